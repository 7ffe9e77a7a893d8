#include "diracnet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "diracnet/errors.hpp"
#include "diracnet/rng.hpp"

namespace diracnet::data {

namespace {

constexpr std::size_t kSide = 32;
constexpr std::size_t kPlane = kSide * kSide;
constexpr std::size_t kRecord = 1 + 3 * kPlane;
constexpr std::size_t kRecordsPerFile = 10000;

void read_cifar_file(const std::filesystem::path& path, Dataset& out, std::size_t first) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError(msg("cifar10: cannot open ", path.string()));
    std::vector<unsigned char> buf(kRecord);
    for (std::size_t r = 0; r < kRecordsPerFile; ++r) {
        in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(kRecord));
        if (std::size_t(in.gcount()) != kRecord) {
            throw IoError(msg("cifar10: ", path.string(), " truncated at byte ",
                              r * kRecord + std::size_t(std::max<std::streamsize>(in.gcount(), 0)),
                              " (need ", kRecordsPerFile * kRecord, " bytes)"));
        }
        const std::size_t i = first + r;
        if (buf[0] > 9) {
            throw IoError(msg("cifar10: ", path.string(), " record ", r, " has label ",
                              int(buf[0]), " outside [0,9]"));
        }
        out.labels[i] = std::int32_t(buf[0]);
        float* dst = &out.images[i * 3 * kPlane];
        for (std::size_t p = 0; p < 3 * kPlane; ++p) dst[p] = float(buf[1 + p]) / 255.0f;
    }
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar10(const std::filesystem::path& dir) {
    Dataset train, test;
    train.split = Split::Train;
    test.split = Split::Val;
    train.images = TensorT<float>::uninitialized({5 * kRecordsPerFile, 3, kSide, kSide});
    train.labels.resize(5 * kRecordsPerFile);
    test.images = TensorT<float>::uninitialized({kRecordsPerFile, 3, kSide, kSide});
    test.labels.resize(kRecordsPerFile);
    for (std::size_t b = 0; b < 5; ++b) {
        read_cifar_file(dir / msg("data_batch_", b + 1, ".bin"), train, b * kRecordsPerFile);
    }
    read_cifar_file(dir / "test_batch.bin", test, 0);
    return {std::move(train), std::move(test)};
}

Dataset make_synthetic(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
    if (classes < 2) throw ConfigError(msg("make_synthetic: need >= 2 classes, got ", classes));
    if (per_class == 0) throw ConfigError("make_synthetic: per_class must be positive");
    const std::size_t n = classes * per_class;
    Dataset d;
    d.images = TensorT<float>::uninitialized({n, 3, kSide, kSide});
    d.labels.resize(n);

    const double pi = 3.14159265358979323846;
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;  // interleaved, exactly balanced
        d.labels[i] = std::int32_t(c);
        Rng rng(derive_seed(seed, i));

        // Orientation identifies the class; sign, phase and wavelength do
        // not, which rules out matching any fixed template.
        const double theta = (double(c) + 0.5) * (pi / 2.0) / double(classes);
        const double sign = rng.coin() ? 1.0 : -1.0;
        const double phase = rng.uniform(0.0, 2.0 * pi);
        const double wavelength = rng.uniform(7.0, 9.0);
        const double fx = std::cos(sign * theta) * 2.0 * pi / wavelength;
        const double fy = std::sin(sign * theta) * 2.0 * pi / wavelength;

        double gain[3], offset[3];
        for (int k = 0; k < 3; ++k) {
            gain[k] = 0.3 * rng.uniform(0.8, 1.2);
            offset[k] = 0.5 + rng.uniform(-0.05, 0.05);
        }
        float* img = &d.images[i * 3 * kPlane];
        for (std::size_t y = 0; y < kSide; ++y) {
            for (std::size_t x = 0; x < kSide; ++x) {
                const double g = std::sin(fx * double(x) + fy * double(y) + phase);
                for (int k = 0; k < 3; ++k) {
                    const double v = offset[k] + gain[k] * g + 0.05 * rng.normal();
                    img[std::size_t(k) * kPlane + y * kSide + x] =
                        float(std::clamp(v, 0.0, 1.0));
                }
            }
        }
    }
    return d;
}

void augment_image(const float* in, float* out, std::size_t channels, std::size_t height,
                   std::size_t width, bool flip, std::size_t oy, std::size_t ox,
                   std::size_t pad) {
    if (oy > 2 * pad || ox > 2 * pad) {
        throw ConfigError(msg("augment_image: crop offset (", oy, ",", ox, ") exceeds 2*pad=",
                              2 * pad));
    }
    for (std::size_t c = 0; c < channels; ++c) {
        const float* src = in + c * height * width;
        float* dst = out + c * height * width;
        for (std::size_t y = 0; y < height; ++y) {
            // Output row y reads padded-frame row y + oy, i.e. source row
            // y + oy - pad when that lands inside the image, zero otherwise.
            const std::ptrdiff_t sy = std::ptrdiff_t(y + oy) - std::ptrdiff_t(pad);
            if (sy < 0 || sy >= std::ptrdiff_t(height)) {
                std::fill_n(dst + y * width, width, 0.0f);
                continue;
            }
            for (std::size_t x = 0; x < width; ++x) {
                const std::ptrdiff_t sx = std::ptrdiff_t(x + ox) - std::ptrdiff_t(pad);
                float v = 0.0f;
                if (sx >= 0 && sx < std::ptrdiff_t(width)) {
                    const std::size_t col = flip ? width - 1 - std::size_t(sx) : std::size_t(sx);
                    v = src[std::size_t(sy) * width + col];
                }
                dst[y * width + x] = v;
            }
        }
    }
}

TensorT<float> augment(const TensorT<float>& batch, std::uint64_t stream_seed) {
    require_rank(batch, 4, "augment");
    constexpr std::size_t pad = 4;
    const std::size_t b = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    TensorT<float> out = TensorT<float>::uninitialized(batch.shape());
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < b; ++i) {
        Rng rng(derive_seed(stream_seed, i));
        const bool flip = rng.coin();
        const std::size_t oy = rng.below(2 * pad + 1);
        const std::size_t ox = rng.below(2 * pad + 1);
        augment_image(&batch[i * c * h * w], &out[i * c * h * w], c, h, w, flip, oy, ox, pad);
    }
    return out;
}

Normalization compute_normalization(const Dataset& d) {
    if (d.size() == 0) throw ConfigError("compute_normalization: empty dataset");
    const std::size_t channels = d.channels();
    const std::size_t per = d.size() * d.images.dim(2) * d.images.dim(3);
    std::vector<double> sum(channels, 0.0), ssq(channels, 0.0);
    const std::size_t plane = d.images.dim(2) * d.images.dim(3);
    for (std::size_t i = 0; i < d.size(); ++i) {
        for (std::size_t c = 0; c < channels; ++c) {
            const float* p = &d.images[(i * channels + c) * plane];
            for (std::size_t j = 0; j < plane; ++j) {
                sum[c] += p[j];
                ssq[c] += double(p[j]) * double(p[j]);
            }
        }
    }
    Normalization n;
    n.mean.resize(channels);
    n.stddev.resize(channels);
    for (std::size_t c = 0; c < channels; ++c) {
        const double mean = sum[c] / double(per);
        const double var = ssq[c] / double(per) - mean * mean;
        n.mean[c] = float(mean);
        n.stddev[c] = float(std::sqrt(std::max(var, 1e-12)));
    }
    return n;
}

void normalize(TensorT<float>& batch, const Normalization& n) {
    if (n.identity()) return;
    require_rank(batch, 4, "normalize");
    if (batch.dim(1) != n.mean.size()) {
        throw ShapeError(msg("normalize: stats cover ", n.mean.size(), " channels, batch has ",
                             batch.dim(1)));
    }
    const std::size_t b = batch.dim(0), c = batch.dim(1);
    const std::size_t plane = batch.dim(2) * batch.dim(3);
    for (std::size_t i = 0; i < b * c; ++i) {
        const float mean = n.mean[i % c];
        const float inv = 1.0f / n.stddev[i % c];
        float* p = &batch[i * plane];
        for (std::size_t j = 0; j < plane; ++j) p[j] = (p[j] - mean) * inv;
    }
}

void denormalize(TensorT<float>& batch, const Normalization& n) {
    if (n.identity()) return;
    require_rank(batch, 4, "denormalize");
    if (batch.dim(1) != n.mean.size()) {
        throw ShapeError(msg("denormalize: stats cover ", n.mean.size(), " channels, batch has ",
                             batch.dim(1)));
    }
    const std::size_t b = batch.dim(0), c = batch.dim(1);
    const std::size_t plane = batch.dim(2) * batch.dim(3);
    for (std::size_t i = 0; i < b * c; ++i) {
        const float mean = n.mean[i % c];
        const float sd = n.stddev[i % c];
        float* p = &batch[i * plane];
        for (std::size_t j = 0; j < plane; ++j) p[j] = p[j] * sd + mean;
    }
}

}  // namespace diracnet::data
