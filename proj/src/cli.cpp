#include "diracnet/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <utility>
#include <vector>

#include "diracnet/data.hpp"
#include "diracnet/dirac.hpp"
#include "diracnet/errors.hpp"
#include "diracnet/kernels.hpp"
#include "diracnet/rng.hpp"
#include "diracnet/serialize.hpp"

namespace diracnet::cli {
namespace {

namespace fs = std::filesystem;

// Seed streams, one per consumer, so adding a draw in one place never
// shifts the values another place sees.
constexpr std::uint64_t kStreamTrainData = 11;
constexpr std::uint64_t kStreamValData = 12;
constexpr std::uint64_t kStreamFoldProbe = 14;

std::size_t data_classes(const RunConfig& cfg) {
    return cfg.dataset == "cifar10" ? 10 : cfg.synth_classes;
}

nn::NetworkSpec to_spec(const RunConfig& cfg, std::size_t classes) {
    nn::NetworkSpec s;
    s.blocks_per_group = cfg.n;
    s.width_factor = cfg.k;
    s.num_classes = classes;
    s.variant = cfg.variant;
    s.init_sigma = cfg.sigma;
    return s;
}

/// Train/val pair for the configured dataset. The synthetic pair is a pure
/// function of cfg.seed, so the whole run reproduces from one number.
std::pair<data::Dataset, data::Dataset> load_data(const RunConfig& cfg) {
    if (cfg.dataset == "cifar10") return data::load_cifar10(cfg.data_dir);
    data::Dataset train = data::make_synthetic(cfg.synth_classes, cfg.synth_train_per_class,
                                               derive_seed(cfg.seed, kStreamTrainData));
    data::Dataset val = data::make_synthetic(cfg.synth_classes, cfg.synth_val_per_class,
                                             derive_seed(cfg.seed, kStreamValData));
    val.split = data::Split::Val;
    return {std::move(train), std::move(val)};
}

void apply_threads(const RunConfig& cfg) {
    if (cfg.threads > 0) kernels::set_threads(cfg.threads);
}

nlohmann::json config_json(const RunConfig& cfg) {
    nlohmann::json j;
    j["command"] = cfg.command;
    j["variant"] = nn::variant_name(cfg.variant);
    j["n"] = cfg.n;
    j["k"] = cfg.k;
    j["sigma"] = cfg.sigma;
    j["dataset"] = cfg.dataset;
    j["data_dir"] = cfg.data_dir;
    j["run_dir"] = cfg.run_dir;
    j["seed"] = cfg.seed;
    j["threads"] = cfg.threads;
    j["epochs"] = cfg.optim.epochs;
    j["lr"] = cfg.optim.lr;
    j["momentum"] = cfg.optim.momentum;
    j["weight_decay"] = cfg.optim.weight_decay;
    j["batch_size"] = cfg.optim.batch_size;
    j["augment"] = cfg.optim.augment;
    j["nesterov"] = cfg.optim.nesterov;
    nlohmann::json sched = nlohmann::json::array();
    for (const auto& [epoch, mult] : cfg.optim.schedule) sched.push_back({epoch, mult});
    j["schedule"] = sched;
    if (cfg.dataset == "synthetic") {
        j["synthetic"] = {{"classes", cfg.synth_classes},
                          {"train_per_class", cfg.synth_train_per_class},
                          {"val_per_class", cfg.synth_val_per_class}};
    }
    return j;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError(msg("cannot open ", path.string(), " for writing"));
    f << text;
    f.flush();
    if (!f) throw IoError(msg("short write to ", path.string()));
}

serialize::Checkpoint snapshot(const nn::Network& net, const train::Sgd& opt,
                               const RunConfig& cfg, const data::Normalization& norm,
                               std::size_t epochs_done) {
    serialize::Checkpoint ckpt;
    ckpt.net = net.clone();
    ckpt.epoch = epochs_done;
    ckpt.seed = cfg.seed;
    ckpt.norm = norm;
    for (auto& [name, tensor] : const_cast<train::Sgd&>(opt).state())
        ckpt.optimizer_state.emplace_back(name, *tensor);
    return ckpt;
}

bool has_dirac_layers(const nn::Network& net) {
    for (const auto& layer : net.layers)
        if (std::string(layer->kind()) == "dirac_conv") return true;
    return false;
}

}  // namespace

void RunConfig::validate() const {
    if (command != "train" && command != "eval" && command != "fold" && command != "check")
        throw ConfigError(msg("unknown command '", command, "'"));
    if (n < 1) throw ConfigError("--n must be at least 1");
    if (k < 1) throw ConfigError("--k must be at least 1");
    if (!(sigma > 0.0)) throw ConfigError("--sigma must be positive");
    if (dataset != "synthetic" && dataset != "cifar10")
        throw ConfigError(msg("unknown dataset '", dataset, "' (expected synthetic or cifar10)"));
    if (threads < 0) throw ConfigError("--threads must be >= 0");
    optim.validate();
    if (command == "train" && run_dir.empty()) throw ConfigError("--run-dir must not be empty");
    if ((command == "eval" || command == "fold") && checkpoint.empty())
        throw ConfigError(msg(command, " needs a checkpoint path"));
    if (command == "fold") {
        if (out.empty()) throw ConfigError("fold needs an output path");
        if (fs::path(out) == fs::path(checkpoint))
            throw ConfigError("fold refuses to overwrite its input checkpoint");
    }
    if (dataset == "synthetic" &&
        (synth_classes < 2 || synth_train_per_class < 1 || synth_val_per_class < 1))
        throw ConfigError("synthetic dataset needs >= 2 classes and >= 1 sample per class");
}

int cmd_train(const RunConfig& cfg) {
    cfg.validate();
    apply_threads(cfg);
    fs::create_directories(cfg.run_dir);
    const fs::path run_dir = cfg.run_dir;
    write_text(run_dir / "config.json", config_json(cfg).dump(2) + "\n");

    auto [train_ds, val_ds] = load_data(cfg);
    train_ds.norm = data::compute_normalization(train_ds);
    val_ds.norm = train_ds.norm;

    nn::Network net = nn::build_network<float>(to_spec(cfg, data_classes(cfg)), cfg.seed);
    train::Sgd opt(net.parameters(), float(cfg.optim.momentum), float(cfg.optim.weight_decay),
                   cfg.optim.nesterov);

    const bool traced = has_dirac_layers(net);
    std::vector<train::MetricsRow> metrics;
    train::ScalingTrace trace;
    double best_acc = -1.0;
    train::EpochResult val{};
    for (std::size_t epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
        if (traced) {
            train::ScalingTrace rows = train::record_scaling(net, epoch);
            trace.insert(trace.end(), rows.begin(), rows.end());
        }
        const auto t0 = std::chrono::steady_clock::now();
        train::EpochResult tr = train::train_epoch(net, opt, train_ds, cfg.optim, epoch);
        val = train::evaluate(net, val_ds);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

        metrics.push_back({epoch, "train", tr.loss, tr.accuracy});
        metrics.push_back({epoch, "val", val.loss, val.accuracy});
        train::write_metrics_csv(run_dir / "metrics.csv", metrics);
        if (traced) train::write_scaling_csv(run_dir / "scaling_trace.csv", trace);

        serialize::Checkpoint ckpt = snapshot(net, opt, cfg, train_ds.norm, epoch + 1);
        serialize::save(ckpt, (run_dir / "latest.drcn").string());
        if (val.accuracy > best_acc) {
            best_acc = val.accuracy;
            serialize::save(ckpt, (run_dir / "best.drcn").string());
        }
        std::printf("epoch %zu/%zu lr %.4g train loss %.4f acc %.4f val loss %.4f acc %.4f (%.1f s)\n",
                    epoch + 1, cfg.optim.epochs, cfg.optim.lr_at(epoch), tr.loss, tr.accuracy,
                    val.loss, val.accuracy, secs);
        std::fflush(stdout);
    }
    std::printf("final val accuracy %.4f\n", val.accuracy);
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    cfg.validate();
    apply_threads(cfg);
    serialize::Checkpoint ckpt = serialize::load(cfg.checkpoint);

    data::Dataset ds;
    if (cfg.dataset == "cifar10") {
        ds = data::load_cifar10(cfg.data_dir).second;
    } else {
        // The checkpoint's seed selects the same validation split the
        // training run scored against.
        ds = data::make_synthetic(cfg.synth_classes, cfg.synth_val_per_class,
                                  derive_seed(ckpt.seed, kStreamValData));
        ds.split = data::Split::Val;
    }
    ds.norm = ckpt.norm;

    train::EpochResult r = train::evaluate(ckpt.net, ds, cfg.optim.batch_size);
    std::printf("val loss %.6f accuracy %.4f\n", r.loss, r.accuracy);
    return 0;
}

int cmd_fold(const RunConfig& cfg) {
    cfg.validate();
    apply_threads(cfg);
    serialize::Checkpoint ckpt = serialize::load(cfg.checkpoint);
    if (ckpt.net.folded)
        throw ConfigError(msg("'", cfg.checkpoint, "' is already folded"));
    if (ckpt.net.spec.variant != nn::Variant::Dirac)
        throw ConfigError(msg("cannot fold a ", nn::variant_name(ckpt.net.spec.variant),
                              " checkpoint: only the dirac variant folds"));

    nn::Network folded = nn::fold_network(ckpt.net);

    // Probe both nets on the same random inputs; the folded one must be the
    // same function up to float re-association.
    constexpr std::size_t kProbes = 256, kBatch = 32;
    Rng rng(derive_seed(cfg.seed, kStreamFoldProbe));
    double max_diff = 0.0;
    std::size_t agree = 0;
    for (std::size_t done = 0; done < kProbes; done += kBatch) {
        TensorT<float> x({kBatch, ckpt.net.spec.input_channels, 32, 32});
        fill_normal(x, rng);
        TensorT<float> y0 = ckpt.net.forward(x);
        TensorT<float> y1 = folded.forward(x);
        max_diff = std::max(max_diff, max_abs_diff(y0, y1));
        std::vector<std::int32_t> a0 = kernels::argmax_rows(y0);
        std::vector<std::int32_t> a1 = kernels::argmax_rows(y1);
        for (std::size_t i = 0; i < kBatch; ++i) agree += a0[i] == a1[i];
    }
    const double agreement = double(agree) / double(kProbes);

    serialize::Checkpoint out;
    out.net = std::move(folded);
    out.epoch = ckpt.epoch;
    out.seed = ckpt.seed;
    out.norm = ckpt.norm;
    serialize::save(out, cfg.out);

    fs::path report = fs::path(cfg.out).replace_extension(".report.csv");
    write_text(report, msg("inputs,max_abs_diff,argmax_agreement\n", kProbes, ",",
                           max_diff, ",", agreement, "\n"));
    std::printf("folded %s -> %s\nmax abs logit diff %.3g over %zu inputs, argmax agreement %.1f%%\n",
                cfg.checkpoint.c_str(), cfg.out.c_str(), max_diff, kProbes, 100.0 * agreement);
    return 0;
}

namespace {

/// Shared shape for check steps: print one line, stop at the first failure.
bool report_check(const char* name, bool ok, const std::string& detail) {
    if (ok)
        std::printf("check %s: ok (%s)\n", name, detail.c_str());
    else
        std::fprintf(stderr, "check %s: FAIL %s\n", name, detail.c_str());
    return ok;
}

bool check_dirac_identity() {
    Rng rng(1);
    double worst = 0.0;
    const std::size_t channels[] = {1, 2, 4, 8};
    const std::size_t kernel[] = {1, 3, 5};
    for (int i = 0; i < 12; ++i) {
        const std::size_t m = channels[i % 4];
        const std::size_t k = kernel[i % 3];
        const std::size_t side = 4 + rng.below(13);
        TensorT<float> x = TensorT<float>({2, m, side, side});
        fill_normal(x, rng);
        TensorT<float> delta = dirac::build_dirac_delta<float>(m, k, k);
        TensorT<float> y = kernels::conv2d_forward(x, delta, nullptr, 1, k / 2);
        worst = std::max(worst, max_abs_diff(y, x));
    }
    return report_check("dirac-identity", worst <= 1e-6,
                        msg("max abs error ", worst, ", tolerance 1e-6"));
}

bool check_fold_equivalence() {
    nn::NetworkSpec spec;
    spec.blocks_per_group = 1;
    spec.width_factor = 1;
    spec.num_classes = 10;
    nn::Network net = nn::build_network<float>(spec, 42);
    // A few train-mode passes move the batch-norm running stats off their
    // init so the fold has something real to absorb.
    Rng rng(43);
    net.train();
    for (int i = 0; i < 3; ++i) {
        TensorT<float> x({8, 3, 32, 32});
        fill_normal(x, rng);
        (void)net.forward(autograd::VarT<float>::leaf(x, false));
    }
    net.eval();
    nn::Network folded = nn::fold_network(net);

    double worst = 0.0;
    std::size_t agree = 0, total = 0;
    for (int i = 0; i < 2; ++i) {
        TensorT<float> x({32, 3, 32, 32});
        fill_normal(x, rng);
        TensorT<float> y0 = net.forward(x);
        TensorT<float> y1 = folded.forward(x);
        worst = std::max(worst, max_abs_diff(y0, y1));
        std::vector<std::int32_t> a0 = kernels::argmax_rows(y0);
        std::vector<std::int32_t> a1 = kernels::argmax_rows(y1);
        for (std::size_t r = 0; r < a0.size(); ++r) agree += a0[r] == a1[r];
        total += a0.size();
    }
    return report_check("fold-equivalence", worst <= 1e-4 && agree == total,
                        msg("max abs logit diff ", worst, ", argmax agreement ", agree, "/",
                            total));
}

TensorT<double> draw(const Shape& shape, Rng& rng, double mean = 0.0, double stddev = 1.0) {
    TensorT<double> t(shape);
    fill_normal(t, rng, mean, stddev);
    return t;
}

bool check_gradients() {
    using autograd::VarT;
    Rng rng(7);
    const std::size_t m = 3;
    auto delta = VarT<double>::leaf(dirac::build_dirac_delta<double>(m, 3, 3), false);
    auto x = VarT<double>::leaf(draw({2, m, 5, 5}, rng), false);

    std::vector<dirac::DiracConvParamsT<double>> layers(3);
    std::vector<std::pair<std::string, VarT<double>>> params;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        layers[l].w = VarT<double>::leaf(draw({m, m, 3, 3}, rng), true);
        layers[l].a = VarT<double>::leaf(draw({m}, rng, 1.0, 0.3), true);
        layers[l].b = VarT<double>::leaf(draw({m}, rng, 0.1, 0.3), true);
        params.emplace_back(msg("layer", l, ".w"), layers[l].w);
        params.emplace_back(msg("layer", l, ".a"), layers[l].a);
        params.emplace_back(msg("layer", l, ".b"), layers[l].b);
    }
    auto f = [&]() {
        VarT<double> h = x;
        for (auto& p : layers) {
            h = autograd::ops::relu(autograd::ops::conv2d<double>(
                h, dirac::effective_weight(p, delta), nullptr, 1, 1));
        }
        return autograd::ops::sum(h);
    };
    autograd::FiniteDiffReport report = autograd::finite_diff_check<double>(f, params, 1e-5, 1e-4);
    std::string worst_name = "-";
    for (const auto& e : report.entries)
        if (e.max_rel_err == report.worst()) worst_name = e.name;
    return report_check("gradient-check", report.passed(),
                        msg("worst rel err ", report.worst(), " at ", worst_name,
                            ", tolerance 1e-4"));
}

bool check_sigma_sweep() {
    const double sigmas[] = {1e-8, 1e-4, 0.1};
    data::Dataset ds = data::make_synthetic(5, 40, 3);
    ds.norm = data::compute_normalization(ds);
    for (double sigma : sigmas) {
        nn::NetworkSpec spec;
        spec.blocks_per_group = 1;
        spec.width_factor = 1;
        spec.num_classes = 5;
        spec.variant = nn::Variant::ResnetDiracInit;
        spec.init_sigma = sigma;
        nn::Network net = nn::build_network<float>(spec, 7);

        const double initial = train::evaluate(net, ds).loss;
        train::OptimConfig opt_cfg;
        opt_cfg.epochs = 3;
        opt_cfg.batch_size = 32;
        opt_cfg.schedule = {};
        opt_cfg.augment = false;
        opt_cfg.seed = 7;
        train::Sgd opt(net.parameters(), float(opt_cfg.momentum), float(opt_cfg.weight_decay));
        double last = initial;
        for (std::size_t e = 0; e < opt_cfg.epochs; ++e)
            last = train::train_epoch(net, opt, ds, opt_cfg, e).loss;
        if (!(last <= 0.7 * initial))
            return report_check("sigma-sweep", false,
                                msg("sigma ", sigma, ": loss ", initial, " -> ", last,
                                    ", expected a >= 30% drop in 3 epochs"));
    }
    return report_check("sigma-sweep", true, "loss dropped >= 30% in 3 epochs for all sigmas");
}

}  // namespace

int cmd_check(const RunConfig& cfg) {
    cfg.validate();
    apply_threads(cfg);
    if (!check_dirac_identity()) return 1;
    if (!check_fold_equivalence()) return 1;
    if (!check_gradients()) return 1;
    if (!check_sigma_sweep()) return 1;
    std::printf("all checks passed\n");
    return 0;
}

int run(int argc, const char* const* argv) {
    CLI::App app{"DiracNet trainer: deep plain-conv networks via Dirac parameterization"};
    app.require_subcommand(1);
    RunConfig cfg;
    std::string variant = "dirac";
    bool no_augment = false;

    const std::map<std::string, nn::Variant> variants{
        {"dirac", nn::Variant::Dirac},
        {"plain", nn::Variant::Plain},
        {"resnet-dirac", nn::Variant::ResnetDiracInit}};

    auto add_model_flags = [&](CLI::App* c) {
        c->add_option("--variant", variant, "network variant")
            ->check(CLI::IsMember({"dirac", "plain", "resnet-dirac"}))
            ->capture_default_str();
        c->add_option("--n", cfg.n, "blocks per group; conv depth is 6n+4")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        c->add_option("--k", cfg.k, "width factor")
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        c->add_option("--sigma", cfg.sigma, "conv init stddev (resnet-dirac only)")
            ->capture_default_str();
    };
    auto add_data_flags = [&](CLI::App* c) {
        c->add_option("--dataset", cfg.dataset, "synthetic or cifar10")
            ->check(CLI::IsMember({"synthetic", "cifar10"}))
            ->capture_default_str();
        c->add_option("--data-dir", cfg.data_dir, "directory with cifar10 binary batches")
            ->capture_default_str();
    };
    auto add_threads_flag = [&](CLI::App* c) {
        c->add_option("--threads", cfg.threads, "conv worker threads; 0 keeps the library default")
            ->envname("DIRACNET_THREADS")
            ->capture_default_str();
    };

    CLI::App* train = app.add_subcommand("train", "train a network and write a run directory");
    add_model_flags(train);
    add_data_flags(train);
    add_threads_flag(train);
    train->add_option("--run-dir", cfg.run_dir, "output directory")->capture_default_str();
    train->add_option("--seed", cfg.seed, "seed for init, shuffling, augmentation and synthetic data")
        ->capture_default_str();
    train->add_option("--epochs", cfg.optim.epochs, "training epochs")
        ->check(CLI::PositiveNumber)
        ->capture_default_str();
    train->add_option("--lr", cfg.optim.lr, "base learning rate")->capture_default_str();
    train->add_option("--batch-size", cfg.optim.batch_size, "minibatch size")
        ->capture_default_str();
    train->add_flag("--no-augment", no_augment, "disable flip + pad-4 crop augmentation");

    CLI::App* eval = app.add_subcommand("eval", "print loss and accuracy of a checkpoint");
    eval->add_option("checkpoint", cfg.checkpoint, "checkpoint to evaluate")->required();
    add_data_flags(eval);
    add_threads_flag(eval);
    eval->add_option("--batch-size", cfg.optim.batch_size, "eval batch size")
        ->capture_default_str();

    CLI::App* fold = app.add_subcommand("fold", "fold a dirac checkpoint into plain convolutions");
    fold->add_option("checkpoint", cfg.checkpoint, "trained dirac checkpoint")->required();
    fold->add_option("out", cfg.out, "folded checkpoint to write")->required();
    fold->add_option("--seed", cfg.seed, "seed for the equivalence probe inputs")
        ->capture_default_str();
    add_threads_flag(fold);

    CLI::App* check = app.add_subcommand("check", "run the invariant suite");
    add_threads_flag(check);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    cfg.variant = variants.at(variant);
    if (no_augment) cfg.optim.augment = false;
    if (train->parsed()) cfg.command = "train";
    if (eval->parsed()) cfg.command = "eval";
    if (fold->parsed()) cfg.command = "fold";
    if (check->parsed()) cfg.command = "check";

    try {
        if (cfg.command == "train") return cmd_train(cfg);
        if (cfg.command == "eval") return cmd_eval(cfg);
        if (cfg.command == "fold") return cmd_fold(cfg);
        return cmd_check(cfg);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
}

}  // namespace diracnet::cli
