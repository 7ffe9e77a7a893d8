#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "diracnet/data.hpp"
#include "diracnet/kernels.hpp"
#include "diracnet/rng.hpp"
#include "diracnet/train.hpp"
#include "test_util.hpp"

using namespace diracnet;
using namespace diracnet::data;
using namespace diracnet::testutil;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& tag) {
        path = fs::temp_directory_path() / ("diracnet_" + tag);
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        fs::remove_all(path, ec);
    }
};

constexpr std::size_t kRecord = 3073;
constexpr std::size_t kPerFile = 10000;

/// Record r of file b gets label (b*7 + r) % 10 and a pixel ramp, so the
/// loader's output can be predicted exactly.
void write_cifar_file(const fs::path& p, std::size_t file_index, std::size_t records = kPerFile) {
    std::ofstream out(p, std::ios::binary);
    REQUIRE(bool(out));
    std::vector<unsigned char> rec(kRecord);
    for (std::size_t r = 0; r < records; ++r) {
        rec[0] = (unsigned char)((file_index * 7 + r) % 10);
        for (std::size_t i = 1; i < kRecord; ++i) {
            rec[i] = (unsigned char)((r + i * 13 + file_index) % 256);
        }
        out.write(reinterpret_cast<const char*>(rec.data()), std::streamsize(rec.size()));
    }
}

void write_cifar_dir(const fs::path& dir, std::size_t test_records = kPerFile) {
    for (std::size_t b = 1; b <= 5; ++b) {
        write_cifar_file(dir / ("data_batch_" + std::to_string(b) + ".bin"), b);
    }
    write_cifar_file(dir / "test_batch.bin", 6, test_records);
}

}  // namespace

TEST_SUITE("data") {

    TEST_CASE("cifar10 loader parses records and round-trips pixel bytes") {
        TempDir tmp("cifar_ok");
        write_cifar_dir(tmp.path);
        auto [train, test] = load_cifar10(tmp.path);
        CHECK(train.size() == 50000);
        CHECK(test.size() == 10000);
        CHECK(train.images.dim(1) == 3);
        CHECK(train.images.dim(2) == 32);
        CHECK(train.images.dim(3) == 32);
        CHECK(train.split == Split::Train);
        CHECK(test.split == Split::Val);

        // File 1, record 0: label (1*7+0)%10, pixel i-1 = (0 + i*13 + 1)%256.
        CHECK(train.labels[0] == 7);
        for (std::size_t i = 1; i < kRecord; ++i) {
            const unsigned char byte = (unsigned char)((i * 13 + 1) % 256);
            const float v = train.images[i - 1];
            CHECK(v == float(byte) / 255.0f);
            CHECK((unsigned char)std::lround(v * 255.0f) == byte);  // exact inverse
        }
        // Record 3 of file 4 lands at index 3*10000 + 3.
        CHECK(train.labels[3 * kPerFile + 3] == int((4 * 7 + 3) % 10));
        CHECK(test.labels[5] == int((6 * 7 + 5) % 10));
    }

    TEST_CASE("cifar10 loader reports missing and truncated files") {
        TempDir tmp("cifar_bad");
        CHECK_THROWS_AS((void)load_cifar10(tmp.path), IoError);

        write_cifar_dir(tmp.path, /*test_records=*/9999);
        try {
            (void)load_cifar10(tmp.path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string what = e.what();
            CHECK(what.find("test_batch.bin") != std::string::npos);
            CHECK(what.find(std::to_string(9999 * kRecord)) != std::string::npos);
        }
    }

    TEST_CASE("cifar10 loader rejects out-of-range labels") {
        TempDir tmp("cifar_label");
        write_cifar_dir(tmp.path);
        {
            std::fstream f(tmp.path / "data_batch_2.bin",
                           std::ios::binary | std::ios::in | std::ios::out);
            f.seekp(std::streamoff(5 * kRecord));
            const char bad = 11;
            f.write(&bad, 1);
        }
        try {
            (void)load_cifar10(tmp.path);
            FAIL("expected IoError");
        } catch (const IoError& e) {
            const std::string what = e.what();
            CHECK(what.find("record 5") != std::string::npos);
            CHECK(what.find("11") != std::string::npos);
        }
    }

    TEST_CASE("synthetic dataset is balanced, bounded and seed-reproducible") {
        Dataset d = make_synthetic(6, 20, 42);
        CHECK(d.size() == 120);
        CHECK(d.images.dim(1) == 3);
        std::vector<int> counts(6, 0);
        for (auto l : d.labels) {
            REQUIRE(l >= 0);
            REQUIRE(l < 6);
            ++counts[l];
        }
        for (int c : counts) CHECK(c == 20);
        for (std::size_t i = 0; i < d.images.numel(); ++i) {
            REQUIRE(d.images[i] >= 0.0f);
            REQUIRE(d.images[i] <= 1.0f);
        }

        Dataset d2 = make_synthetic(6, 20, 42);
        CHECK(max_abs_diff(d.images, d2.images) == 0.0);
        CHECK(d.labels == d2.labels);
        Dataset d3 = make_synthetic(6, 20, 43);
        CHECK(max_abs_diff(d.images, d3.images) > 0.0);

        CHECK_THROWS_AS((void)make_synthetic(1, 10, 0), ConfigError);
        CHECK_THROWS_AS((void)make_synthetic(4, 0, 0), ConfigError);
    }

    TEST_CASE("augment_image: flip is an involution, center crop is identity") {
        Rng rng(3);
        TensorT<float> img = random_tensor<float>({1, 3, 32, 32}, rng);
        TensorT<float> once(img.shape()), twice(img.shape()), center(img.shape());

        augment_image(&img[0], &once[0], 3, 32, 32, /*flip=*/true, 4, 4, 4);
        CHECK(max_abs_diff(once, img) > 0.0);
        augment_image(&once[0], &twice[0], 3, 32, 32, true, 4, 4, 4);
        CHECK(max_abs_diff(twice, img) == 0.0);

        augment_image(&img[0], &center[0], 3, 32, 32, false, 4, 4, 4);
        CHECK(max_abs_diff(center, img) == 0.0);

        // Offset (0,0) reads 4 pixels up-left; the first 4 rows are padding.
        TensorT<float> shifted(img.shape());
        augment_image(&img[0], &shifted[0], 3, 32, 32, false, 0, 0, 4);
        for (std::size_t x = 0; x < 32; ++x) CHECK(shifted.at4(0, 0, 0, x) == 0.0f);
        CHECK(shifted.at4(0, 1, 10, 10) == img.at4(0, 1, 6, 6));

        CHECK_THROWS_AS(augment_image(&img[0], &shifted[0], 3, 32, 32, false, 9, 0, 4),
                        ConfigError);
    }

    TEST_CASE("batch augmentation is deterministic and varied") {
        Rng rng(9);
        TensorT<float> batch = random_tensor<float>({16, 3, 32, 32}, rng);
        TensorT<float> a = augment(batch, 777);
        TensorT<float> b = augment(batch, 777);
        CHECK(max_abs_diff(a, b) == 0.0);
        CHECK(max_abs_diff(augment(batch, 778), a) > 0.0);

        // With 16 images, at least two must receive different transforms.
        bool any_differs_from_input = false;
        for (std::size_t i = 0; i < 16 && !any_differs_from_input; ++i) {
            for (std::size_t j = 0; j < 3 * 32 * 32; ++j) {
                if (a[i * 3 * 32 * 32 + j] != batch[i * 3 * 32 * 32 + j]) {
                    any_differs_from_input = true;
                    break;
                }
            }
        }
        CHECK(any_differs_from_input);
    }

    TEST_CASE("normalization round-trips and standardizes the training split") {
        Dataset d = make_synthetic(4, 50, 7);
        d.norm = compute_normalization(d);
        REQUIRE(d.norm.mean.size() == 3);

        TensorT<float> batch = TensorT<float>::uninitialized({8, 3, 32, 32});
        std::copy_n(&d.images[0], batch.numel(), &batch[0]);
        TensorT<float> original = batch;
        normalize(batch, d.norm);
        CHECK(max_abs_diff(batch, original) > 0.0);
        denormalize(batch, d.norm);
        CHECK(allclose(batch, original, 1e-6, 1e-6));

        // Normalizing the whole split with its own stats standardizes it.
        TensorT<float> all = d.images;
        normalize(all, d.norm);
        const std::size_t plane = 32 * 32;
        for (std::size_t c = 0; c < 3; ++c) {
            double sum = 0.0, ssq = 0.0;
            for (std::size_t i = 0; i < d.size(); ++i) {
                const float* p = &all[(i * 3 + c) * plane];
                for (std::size_t j = 0; j < plane; ++j) {
                    sum += p[j];
                    ssq += double(p[j]) * double(p[j]);
                }
            }
            const double n = double(d.size() * plane);
            CHECK(std::abs(sum / n) < 1e-4);
            CHECK(std::abs(ssq / n - 1.0) < 1e-3);
        }

        Dataset empty;
        CHECK_THROWS_AS((void)compute_normalization(empty), ConfigError);
    }

    TEST_CASE("oriented gratings defeat a linear probe but not a small convnet") {
        // The probe is multinomial logistic regression on raw standardized
        // pixels, trained to convergence by full-batch gradient descent.
        // With more features than samples it memorizes the training split,
        // so high train accuracy certifies the optimizer worked while
        // held-out accuracy measures what a linear decision rule can see.
        const std::size_t classes = 10;
        Dataset tr = make_synthetic(classes, 100, 1234);
        Dataset val = make_synthetic(classes, 30, 5678);
        tr.norm = compute_normalization(tr);
        val.norm = tr.norm;

        const std::size_t n = tr.size(), dim = 3 * 32 * 32;
        TensorT<float> xtr = tr.images, xval = val.images;
        normalize(xtr, tr.norm);
        normalize(xval, tr.norm);

        TensorT<float> w({classes, dim});
        TensorT<float> logits({n, classes});
        TensorT<float> probs;
        for (int it = 0; it < 250; ++it) {
            kernels::gemm<float>(false, true, n, classes, dim, 1.0f, &xtr[0], dim, &w[0], dim,
                                 0.0f, &logits[0], classes);
            (void)kernels::softmax_cross_entropy_forward(logits, tr.labels, probs);
            TensorT<float> delta =
                kernels::softmax_cross_entropy_backward(probs, tr.labels, 1.0f);
            // w -= lr * delta^T x
            kernels::gemm<float>(true, false, classes, dim, n, -2.0f, &delta[0], classes,
                                 &xtr[0], dim, 1.0f, &w[0], dim);
        }
        auto probe_accuracy = [&](const TensorT<float>& x, const std::vector<std::int32_t>& y) {
            TensorT<float> lg({x.dim(0), classes});
            kernels::gemm<float>(false, true, x.dim(0), classes, dim, 1.0f, &x[0], dim, &w[0],
                                 dim, 0.0f, &lg[0], classes);
            auto pred = kernels::argmax_rows(lg);
            std::size_t correct = 0;
            for (std::size_t i = 0; i < y.size(); ++i) correct += pred[i] == y[i];
            return double(correct) / double(y.size());
        };
        const double probe_train = probe_accuracy(xtr, tr.labels);
        const double probe_val = probe_accuracy(xval, val.labels);
        CAPTURE(probe_train);
        CAPTURE(probe_val);
        CHECK(probe_train > 0.9);  // the probe was actually optimized
        CHECK(probe_val <= 0.7);   // and still cannot read orientation

        // Depth-10 DiracNet on the same split.
        nn::NetworkSpec spec;
        spec.blocks_per_group = 1;
        spec.width_factor = 1;
        spec.num_classes = classes;
        auto net = nn::build_diracnet(spec, 99);
        train::OptimConfig cfg;
        cfg.lr = 0.1;
        cfg.epochs = 10;
        cfg.batch_size = 50;
        cfg.schedule = {{7, 0.2}};
        cfg.augment = false;
        cfg.seed = 5;
        train::Sgd opt(net.parameters(), float(cfg.momentum), float(cfg.weight_decay));
        for (std::size_t e = 0; e < cfg.epochs; ++e) (void)train::train_epoch(net, opt, tr, cfg, e);
        const double net_val = train::evaluate(net, val).accuracy;
        CAPTURE(net_val);
        CHECK(net_val >= 0.9);
    }
}
