#include "jemlab/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "jemlab/data.hpp"
#include "jemlab/errors.hpp"
#include "jemlab/eval.hpp"
#include "jemlab/io.hpp"
#include "jemlab/model.hpp"
#include "jemlab/rng.hpp"
#include "jemlab/sampler.hpp"
#include "jemlab/trainer.hpp"

namespace jemlab {

namespace {

using Scalar = float;  // training/eval compute dtype for the CLI
using nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitDivergence = 1;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;

// ---- `key = value` config files (# comments). File entries become flag
// args; flags given on the command line win. ----

std::vector<std::pair<std::string, std::string>> parse_config_file(const std::string& path) {
    const std::string text = read_text_file(path);
    std::vector<std::pair<std::string, std::string>> out;
    std::size_t line_no = 0;
    for (const std::string& raw : split_string(text, '\n')) {
        ++line_no;
        std::string line = raw;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ValueError("config file '" + path + "' line " + std::to_string(line_no) +
                             ": expected key = value");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw ValueError("config file '" + path + "' line " + std::to_string(line_no) +
                             ": empty key");
        out.emplace_back(key, value);
    }
    return out;
}

// Rebuilds argv with config-file entries inserted after the subcommand; user
// flags override file keys by filtering duplicates out of the file set.
std::vector<std::string> merge_config_args(int argc, char** argv) {
    std::vector<std::string> args(argv, argv + argc);
    if (args.size() < 2 || args[1].empty() || args[1][0] == '-') return args;

    std::string config_path;
    std::vector<std::string> rest;  // everything after the subcommand
    for (std::size_t i = 2; i < args.size(); ++i) {
        if (args[i] == "--config") {
            if (i + 1 >= args.size()) throw ValueError("--config needs a file path");
            config_path = args[++i];
        } else if (args[i].rfind("--config=", 0) == 0) {
            config_path = args[i].substr(9);
        } else {
            rest.push_back(args[i]);
        }
    }
    if (config_path.empty()) return args;

    std::set<std::string> user_keys;
    for (const auto& a : rest) {
        if (a.rfind("--", 0) != 0) continue;
        const auto eq = a.find('=');
        user_keys.insert(eq == std::string::npos ? a.substr(2) : a.substr(2, eq - 2));
    }
    std::vector<std::string> merged{args[0], args[1]};
    for (const auto& [key, value] : parse_config_file(config_path)) {
        if (user_keys.count(key)) continue;
        merged.push_back("--" + key);
        merged.push_back(value);
    }
    merged.insert(merged.end(), rest.begin(), rest.end());
    return merged;
}

// ---- shared option bundles ----

struct ModelOpts {
    std::string kind = "auto";  // auto | mlp | cnn
    std::vector<std::size_t> conv{8, 8};
    std::vector<std::size_t> dense;  // auto: {128,128} mlp / {64} cnn
    std::string norm = "auto";       // auto | none | batch
    std::string act = "relu";        // relu | leaky
    double leaky_slope = 0.01;
};

struct TrainOpts {
    std::string data, test_data, out;
    std::uint64_t seed = 0;
    int epochs = 200;
    std::size_t batch = 64;
    double lr = 0.1, momentum = 0.9;
    std::string schedule = "step";
    std::vector<int> milestones{60, 120, 180};
    double lr_decay = 0.2;
    double gen_weight = 1.0, energy_l2 = 0.0;
    bool aug_gen = false;
    int ckpt_every = 10, dump_samples = 64;
    int sgld_k = 5;
    double sgld_alpha = 1.0, sgld_sigma = 0.0;
    std::size_t buffer_size = 10000;
    double gamma = 0.05;
    std::string sam_variant = "sam";
    double rho = 0.2, weight_decay = 0.0;
    bool aug_flip = true;
    std::size_t aug_pad = 2;
    double guard_energy = 1e3, guard_xent = 1e3;
    double init_floor = 1e-4;
    ModelOpts model;
};

void add_model_options(CLI::App* cmd, ModelOpts& m) {
    cmd->add_option("--model.kind", m.kind, "architecture: auto|mlp|cnn")
        ->check(CLI::IsMember({"auto", "mlp", "cnn"}));
    cmd->add_option("--model.conv", m.conv, "conv channels per block (cnn)")->delimiter(',');
    cmd->add_option("--model.dense", m.dense, "hidden dense widths")->delimiter(',');
    cmd->add_option("--model.norm", m.norm, "normalization: auto|none|batch")
        ->check(CLI::IsMember({"auto", "none", "batch"}));
    cmd->add_option("--model.act", m.act, "activation: relu|leaky")
        ->check(CLI::IsMember({"relu", "leaky"}));
    cmd->add_option("--model.leaky-slope", m.leaky_slope, "leaky relu slope");
}

void add_train_options(CLI::App* cmd, TrainOpts& t) {
    cmd->add_option("--data", t.data, "training dataset spec (toy:NAME[:k=v...], idx:IMG:LBL, csv:PATH)")
        ->required();
    cmd->add_option("--test-data", t.test_data, "held-out dataset spec (default: derived)");
    cmd->add_option("--out", t.out, "run output directory")->required();
    cmd->add_option("--seed", t.seed, "master seed");
    cmd->add_option("--epochs", t.epochs, "training epochs");
    cmd->add_option("--batch", t.batch, "mini-batch size");
    cmd->add_option("--lr", t.lr, "base learning rate");
    cmd->add_option("--momentum", t.momentum, "SGD momentum");
    cmd->add_option("--schedule", t.schedule, "lr schedule: step|cosine")
        ->check(CLI::IsMember({"step", "cosine"}));
    cmd->add_option("--milestones", t.milestones, "step-decay epochs")->delimiter(',');
    cmd->add_option("--lr-decay", t.lr_decay, "step-decay factor");
    cmd->add_option("--gen-weight", t.gen_weight, "generative loss weight");
    cmd->add_option("--energy-l2", t.energy_l2, "energy magnitude L2 weight");
    cmd->add_option("--aug-gen", t.aug_gen, "augment the generative branch too (ablation)");
    cmd->add_option("--ckpt-every", t.ckpt_every, "checkpoint cadence (epochs)");
    cmd->add_option("--dump-samples", t.dump_samples, "samples dumped per checkpoint (0=off)");
    cmd->add_option("--sgld.k", t.sgld_k, "SGLD steps per training step");
    cmd->add_option("--sgld.alpha", t.sgld_alpha, "SGLD step size");
    cmd->add_option("--sgld.sigma", t.sgld_sigma, "SGLD noise scale");
    cmd->add_option("--buffer.size", t.buffer_size, "replay buffer capacity");
    cmd->add_option("--buffer.gamma", t.gamma, "chain reinitialization probability");
    cmd->add_option("--sam.variant", t.sam_variant, "sharpness-aware variant: none|sam|asam")
        ->check(CLI::IsMember({"none", "sam", "asam"}));
    cmd->add_option("--sam.rho", t.rho, "perturbation radius");
    cmd->add_option("--sam.wd", t.weight_decay, "weight decay lambda");
    cmd->add_option("--aug.flip", t.aug_flip, "horizontal flip on the clf branch (images)");
    cmd->add_option("--aug.pad", t.aug_pad, "pad-then-random-crop width (images)");
    cmd->add_option("--guard.energy-bound", t.guard_energy, "divergence guard |E(x-)| bound");
    cmd->add_option("--guard.xent-bound", t.guard_xent, "divergence guard cross-entropy bound");
    cmd->add_option("--init.floor", t.init_floor, "informative init variance floor");
    add_model_options(cmd, t.model);
    cmd->add_option("--config", "key = value config file (flags override)");
}

ModelConfig resolve_model(const ModelOpts& opts, const Dataset<Scalar>& ds) {
    ModelConfig m;
    m.class_count = ds.class_count;
    std::string kind = opts.kind;
    if (kind == "auto") kind = ds.image ? "cnn" : "mlp";
    if (kind == "cnn") {
        if (!ds.image) throw ValueError("model.kind=cnn requires an image dataset");
        const Shape ss = ds.sample_shape();
        m.image_input = true;
        m.in_c = ss[0];
        m.in_h = ss[1];
        m.in_w = ss[2];
        m.conv_channels = opts.conv;
        m.dense_widths = opts.dense.empty() ? std::vector<std::size_t>{64} : opts.dense;
        m.norm = opts.norm == "none" ? NormMode::none : NormMode::batch_norm;
    } else {
        if (ds.image) throw ValueError("model.kind=mlp requires a flat-vector dataset");
        m.image_input = false;
        m.input_dim = ds.sample_shape()[0];
        m.conv_channels.clear();
        m.dense_widths = opts.dense.empty() ? std::vector<std::size_t>{128, 128} : opts.dense;
        m.norm = opts.norm == "batch" ? NormMode::batch_norm : NormMode::none;
    }
    m.activation = opts.act == "relu" ? Activation::relu : Activation::leaky_relu;
    m.leaky_slope = opts.leaky_slope;
    return m;
}

TrainConfig resolve_train_config(const TrainOpts& t, const Dataset<Scalar>& ds) {
    TrainConfig cfg;
    cfg.model = resolve_model(t.model, ds);
    cfg.epochs = t.epochs;
    cfg.batch = t.batch;
    cfg.lr = t.lr;
    cfg.momentum = t.momentum;
    cfg.schedule = t.schedule == "cosine" ? ScheduleKind::cosine : ScheduleKind::step_decay;
    cfg.milestones = t.milestones;
    cfg.lr_decay = t.lr_decay;
    cfg.gen_weight = t.gen_weight;
    cfg.energy_l2 = t.energy_l2;
    cfg.aug_gen = t.aug_gen;
    cfg.ckpt_every = t.ckpt_every;
    cfg.sample_dump_count = t.dump_samples;
    cfg.seed = t.seed;
    cfg.sgld.steps = t.sgld_k;
    cfg.sgld.step_size = t.sgld_alpha;
    cfg.sgld.noise = t.sgld_sigma;
    cfg.buffer_capacity = t.buffer_size;
    cfg.reinit_prob = t.gamma;
    cfg.sam.variant = t.sam_variant == "none"
                          ? SamVariant::none
                          : (t.sam_variant == "asam" ? SamVariant::asam : SamVariant::sam);
    cfg.sam.rho = t.rho;
    cfg.sam.weight_decay = t.weight_decay;
    cfg.aug.hflip = t.aug_flip;
    cfg.aug.pad = t.aug_pad;
    cfg.guard.energy_bound = t.guard_energy;
    cfg.guard.xent_bound = t.guard_xent;
    cfg.init_variance_floor = t.init_floor;
    return cfg;
}

Dataset<Scalar> derived_test_set(const std::string& train_spec, const Dataset<Scalar>& train_ds) {
    if (train_spec.rfind("toy:", 0) == 0) {
        ToySpec t = parse_toy_spec(train_spec);
        t.seed += 1;
        Dataset<Scalar> test = synth_toy<Scalar>(t.name, t.n, t.noise, t.seed);
        // keep the training clamp box so the model sees one consistent range
        test.clamp_lo = train_ds.clamp_lo;
        test.clamp_hi = train_ds.clamp_hi;
        clamp_inplace(test.samples, test.clamp_lo, test.clamp_hi);
        test.split = "test";
        return test;
    }
    std::cerr << "note: no --test-data given; evaluating on the training set\n";
    Dataset<Scalar> test = train_ds;
    test.split = "test";
    return test;
}

// ---- run-config JSON (the config.json echoed into each run dir) ----

TrainConfig load_run_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_text_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("cannot parse run config '" + path + "': " + e.what());
    }
    TrainConfig cfg;
    const json& jm = j.at("model");
    cfg.model.image_input = jm.at("image_input").get<bool>();
    cfg.model.input_dim = jm.at("input_dim").get<std::size_t>();
    cfg.model.in_c = jm.at("in_c").get<std::size_t>();
    cfg.model.in_h = jm.at("in_h").get<std::size_t>();
    cfg.model.in_w = jm.at("in_w").get<std::size_t>();
    cfg.model.class_count = jm.at("class_count").get<std::size_t>();
    cfg.model.conv_channels = jm.at("conv_channels").get<std::vector<std::size_t>>();
    cfg.model.dense_widths = jm.at("dense_widths").get<std::vector<std::size_t>>();
    cfg.model.norm =
        jm.at("norm").get<std::string>() == "batch" ? NormMode::batch_norm : NormMode::none;
    cfg.model.activation = jm.at("activation").get<std::string>() == "relu"
                               ? Activation::relu
                               : Activation::leaky_relu;
    cfg.model.leaky_slope = jm.at("leaky_slope").get<double>();
    const json& jt = j.at("train");
    cfg.epochs = jt.at("epochs").get<int>();
    cfg.batch = jt.at("batch").get<std::size_t>();
    cfg.lr = jt.at("lr").get<double>();
    cfg.momentum = jt.at("momentum").get<double>();
    cfg.schedule = jt.at("schedule").get<std::string>() == "cosine" ? ScheduleKind::cosine
                                                                    : ScheduleKind::step_decay;
    cfg.milestones = jt.at("milestones").get<std::vector<int>>();
    cfg.lr_decay = jt.at("lr_decay").get<double>();
    cfg.gen_weight = jt.at("gen_weight").get<double>();
    cfg.energy_l2 = jt.at("energy_l2").get<double>();
    cfg.aug_gen = jt.at("aug_gen").get<bool>();
    cfg.ckpt_every = jt.at("ckpt_every").get<int>();
    cfg.seed = jt.at("seed").get<std::uint64_t>();
    const json& js = j.at("sgld");
    cfg.sgld.steps = js.at("k").get<int>();
    cfg.sgld.step_size = js.at("alpha").get<double>();
    cfg.sgld.noise = js.at("sigma").get<double>();
    cfg.sgld.clamp_lo = js.at("clamp_lo").get<double>();
    cfg.sgld.clamp_hi = js.at("clamp_hi").get<double>();
    const json& jb = j.at("buffer");
    cfg.buffer_capacity = jb.at("capacity").get<std::size_t>();
    cfg.reinit_prob = jb.at("gamma").get<double>();
    const json& jsam = j.at("sam");
    const std::string variant = jsam.at("variant").get<std::string>();
    cfg.sam.variant = variant == "none" ? SamVariant::none
                                        : (variant == "asam" ? SamVariant::asam : SamVariant::sam);
    cfg.sam.rho = jsam.at("rho").get<double>();
    cfg.sam.weight_decay = jsam.at("weight_decay").get<double>();
    const json& ja = j.at("aug");
    cfg.aug.hflip = ja.at("hflip").get<bool>();
    cfg.aug.pad = ja.at("pad").get<std::size_t>();
    const json& jg = j.at("guard");
    cfg.guard.energy_bound = jg.at("energy_bound").get<double>();
    cfg.guard.xent_bound = jg.at("xent_bound").get<double>();
    return cfg;
}

std::string default_run_config_path(const std::string& ckpt_path) {
    const std::filesystem::path p(ckpt_path);
    return (p.parent_path().parent_path() / "config.json").string();
}

struct LoadedModel {
    TrainConfig cfg;
    LogitModel<Scalar> model;
    CheckpointFile file;
};

LoadedModel load_model(const std::string& ckpt_path, std::string run_config_path) {
    if (run_config_path.empty()) run_config_path = default_run_config_path(ckpt_path);
    LoadedModel lm;
    lm.cfg = load_run_config(run_config_path);
    Rng zero(0);
    lm.model = LogitModel<Scalar>::init(lm.cfg.model, zero);
    lm.file = read_checkpoint(ckpt_path);
    lm.model.load_from(lm.file);
    return lm;
}

void check_compatible(const LogitModel<Scalar>& model, const Dataset<Scalar>& ds,
                      const char* what) {
    if (model.config.sample_shape() != ds.sample_shape())
        throw ValueError(std::string(what) + ": checkpoint expects input " +
                         shape_str(model.config.sample_shape()) + ", dataset has " +
                         shape_str(ds.sample_shape()));
    if (model.config.class_count != ds.class_count)
        throw ValueError(std::string(what) + ": class count mismatch (model " +
                         std::to_string(model.config.class_count) + ", dataset " +
                         std::to_string(ds.class_count) + ")");
}

std::vector<double> linspace_with_zero(double lo, double hi, int points) {
    if (points < 2) throw ValueError("grid needs at least 2 points");
    std::vector<double> out(static_cast<std::size_t>(points));
    for (int i = 0; i < points; ++i) {
        double t = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(points - 1);
        if (std::abs(t) < 1e-12 * std::max(std::abs(lo), std::abs(hi))) t = 0.0;
        out[static_cast<std::size_t>(i)] = t;
    }
    return out;
}

// ---- subcommand handlers ----

int cmd_train(const TrainOpts& opts) {
    Dataset<Scalar> train_ds = load_dataset_spec<Scalar>(opts.data);
    train_ds.split = "train";
    Dataset<Scalar> test_ds = opts.test_data.empty()
                                  ? derived_test_set(opts.data, train_ds)
                                  : load_dataset_spec<Scalar>(opts.test_data);
    test_ds.split = "test";

    TrainConfig cfg = resolve_train_config(opts, train_ds);
    cfg.sgld.clamp_lo = train_ds.clamp_lo;
    cfg.sgld.clamp_hi = train_ds.clamp_hi;

    json echo = json::parse(train_config_json(cfg));
    echo["data"] = opts.data;
    echo["test_data"] = opts.test_data;
    echo["out"] = opts.out;
    const TrainResult result = train(cfg, train_ds, test_ds, opts.out, echo.dump(2));
    std::cout << "trained " << result.steps << " steps in " << result.wall_seconds
              << "s; final test accuracy " << result.final_test_accuracy << "\n"
              << "artifacts in " << result.out_dir << "\n";
    return kExitOk;
}

struct SampleOpts {
    std::string ckpt, run_config, out;
    std::size_t n = 64;
    int k_override = -1;
    int conditional = -1;
    std::uint64_t seed = 0;
    std::string rank_by = "none";  // none | density | pyx
    std::size_t rasters = 64;
};

int cmd_sample(const SampleOpts& opts) {
    ensure_dir(opts.out);
    if (opts.n == 0) {  // empty dump is still a valid artifact
        CheckpointFile dump;
        dump.dtype = dtype_tag_of<Scalar>();
        write_checkpoint(opts.out + "/samples.bin", dump);
        std::cout << "wrote empty dump to " << opts.out << "/samples.bin\n";
        return kExitOk;
    }
    LoadedModel lm = load_model(opts.ckpt, opts.run_config);
    InitDistribution<Scalar> init = init_from_checkpoint<Scalar>(lm.file);
    SgldConfig sgld = lm.cfg.sgld;
    sgld.clamp_lo = init.clamp_lo;
    sgld.clamp_hi = init.clamp_hi;
    if (opts.k_override >= 0) sgld.steps = opts.k_override;
    if (opts.conditional >= 0 &&
        static_cast<std::size_t>(opts.conditional) >= lm.cfg.model.class_count)
        throw ValueError("conditional class out of range");

    Rng rng = derive_rng(opts.seed, "init");
    Tensor<Scalar> x0 = init.draw(opts.n, rng);
    const std::optional<int> cls =
        opts.conditional >= 0 ? std::optional<int>(opts.conditional) : std::nullopt;
    Tensor<Scalar> x = sgld_chain(lm.model, std::move(x0), sgld, rng, cls);

    // score and (optionally) rank the dump
    const Tensor<Scalar> logits = lm.model.forward_logits(x);
    const std::size_t classes = logits.size(1);
    std::vector<double> score(opts.n);
    for (std::size_t i = 0; i < opts.n; ++i) {
        const Scalar* row = logits.data().data() + i * classes;
        Scalar m = row[0];
        for (std::size_t c = 1; c < classes; ++c) m = std::max(m, row[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c)
            s += std::exp(static_cast<double>(row[c] - m));
        const double lse = static_cast<double>(m) + std::log(s);
        if (opts.rank_by == "pyx") {
            const std::size_t y =
                opts.conditional >= 0
                    ? static_cast<std::size_t>(opts.conditional)
                    : static_cast<std::size_t>(std::max_element(row, row + classes) - row);
            score[i] = std::exp(static_cast<double>(row[y]) - lse);
        } else {
            score[i] = lse;  // log p(x) up to an additive constant
        }
    }
    std::vector<std::size_t> order(opts.n);
    std::iota(order.begin(), order.end(), 0);
    if (opts.rank_by != "none")
        std::stable_sort(order.begin(), order.end(),
                         [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

    const std::size_t d = x.numel() / opts.n;
    Tensor<Scalar> ranked(x.shape());
    Tensor<Scalar> scores({opts.n});
    for (std::size_t i = 0; i < opts.n; ++i) {
        for (std::size_t j = 0; j < d; ++j) ranked[i * d + j] = x[order[i] * d + j];
        scores[i] = static_cast<Scalar>(score[order[i]]);
    }

    CheckpointFile dump;
    dump.dtype = dtype_tag_of<Scalar>();
    dump.entries.push_back(make_entry("samples", ranked));
    dump.entries.push_back(make_entry("scores", scores));
    if (cls) {
        Tensor<Scalar> cl({opts.n});
        for (auto& v : cl.data()) v = static_cast<Scalar>(*cls);
        dump.entries.push_back(make_entry("classes", cl));
    }
    write_checkpoint(opts.out + "/samples.bin", dump);

    if (lm.cfg.model.image_input) {
        const std::size_t count = std::min(opts.rasters, opts.n);
        const Shape ss = Shape(x.shape().begin() + 1, x.shape().end());
        for (std::size_t i = 0; i < count; ++i) {
            std::vector<double> pix(d);
            for (std::size_t j = 0; j < d; ++j) pix[j] = static_cast<double>(ranked[i * d + j]);
            char name[64];
            std::snprintf(name, sizeof name, "/sample_%04zu.%s", i,
                          ss[0] == 3 ? "ppm" : "pgm");
            write_raster(opts.out + name, ss[0], ss[1], ss[2], pix, sgld.clamp_lo,
                         sgld.clamp_hi);
        }
    }
    std::cout << "wrote " << opts.n << " samples to " << opts.out << "\n";
    return kExitOk;
}

struct EvalOpts {
    std::string ckpt, run_config, data, out;
    std::size_t bins = 20;
};

int cmd_eval(const EvalOpts& opts) {
    LoadedModel lm = load_model(opts.ckpt, opts.run_config);
    const Dataset<Scalar> ds = load_dataset_spec<Scalar>(opts.data);
    check_compatible(lm.model, ds, "eval");
    ensure_dir(opts.out);

    const Predictions p = predict(lm.model, ds);
    const ReliabilityReport rel = ece(p.confidence, p.correct, opts.bins);
    EvalReport report;
    std::size_t hits = 0;
    for (const char c : p.correct) hits += c;
    report.accuracy = static_cast<double>(hits) / static_cast<double>(ds.size());
    report.ece = rel.ece;
    double me = 0.0, mc = 0.0;
    for (const double v : p.density) me -= v;
    for (const double v : p.confidence) mc += v;
    report.mean_energy = me / static_cast<double>(ds.size());
    report.mean_confidence = mc / static_cast<double>(ds.size());
    report.sample_count = ds.size();

    write_text_file(opts.out + "/eval.json", report.to_json());
    write_text_file(opts.out + "/reliability.json", rel.to_json());
    write_text_file(opts.out + "/reliability.csv", rel.to_csv());
    std::cout << "accuracy " << report.accuracy << ", ece " << report.ece << " -> " << opts.out
              << "\n";
    return kExitOk;
}

struct OodOpts {
    std::string ckpt, run_config, data_in, data_out_spec, out;
    std::string method = "density";
    std::uint64_t seed = 0;
    std::size_t bins = 50;
};

int cmd_ood(const OodOpts& opts) {
    LoadedModel lm = load_model(opts.ckpt, opts.run_config);
    const Dataset<Scalar> in_ds = load_dataset_spec<Scalar>(opts.data_in);
    check_compatible(lm.model, in_ds, "ood");

    Dataset<Scalar> out_ds;
    const auto parts = split_string(opts.data_out_spec, ':');
    if (parts[0] == "interp" || parts[0] == "noise") {
        const std::size_t n =
            parts.size() > 1 ? std::stoull(parts[1]) : in_ds.size();
        out_ds = in_ds;
        out_ds.kind = parts[0];
        Rng rng = derive_rng(opts.seed, parts[0]);
        if (parts[0] == "interp") {
            out_ds.samples = interp_ood(in_ds, n, rng);
        } else {
            Shape s{n};
            const Shape ss = in_ds.sample_shape();
            s.insert(s.end(), ss.begin(), ss.end());
            Tensor<Scalar> noise(s);
            for (auto& v : noise.data())
                v = static_cast<Scalar>(rng.uniform(in_ds.clamp_lo, in_ds.clamp_hi));
            out_ds.samples = std::move(noise);
        }
        out_ds.labels.assign(n, 0);
    } else {
        out_ds = load_dataset_spec<Scalar>(opts.data_out_spec);
        check_compatible(lm.model, out_ds, "ood");
    }

    const OodMethod method = opts.method == "maxprob" ? OodMethod::maxprob : OodMethod::density;
    OodReport report;
    report.method = opts.method;
    report.in_scores = ood_scores(lm.model, in_ds, method);
    report.out_scores = ood_scores(lm.model, out_ds, method);
    report.auroc = auroc(report.in_scores, report.out_scores);

    ensure_dir(opts.out);
    write_text_file(opts.out + "/ood.json", report.to_json());
    write_text_file(opts.out + "/ood_histogram.csv", report.histogram_csv(opts.bins));
    std::cout << "auroc(" << opts.method << ") = " << report.auroc << " -> " << opts.out << "\n";
    return kExitOk;
}

struct AttackOpts {
    std::string ckpt, run_config, data, out;
    std::string norm = "linf";
    std::vector<double> eps{0.0, 0.05, 0.1};
    int steps = 40;
    double step_size = 0.0;
    std::uint64_t seed = 0;
    std::size_t limit = 0;
};

int cmd_attack(const AttackOpts& opts) {
    LoadedModel lm = load_model(opts.ckpt, opts.run_config);
    Dataset<Scalar> ds = load_dataset_spec<Scalar>(opts.data);
    check_compatible(lm.model, ds, "attack");
    if (opts.limit > 0 && opts.limit < ds.size()) {
        std::vector<std::size_t> idx(opts.limit);
        std::iota(idx.begin(), idx.end(), 0);
        ds.samples = ds.rows(idx);
        ds.labels.resize(opts.limit);
    }

    const double clean = accuracy(lm.model, ds);
    EvalReport report;
    report.accuracy = clean;
    report.sample_count = ds.size();
    for (const double e : opts.eps) {
        PgdConfig cfg;
        cfg.norm = opts.norm == "l2" ? AttackNorm::l2 : AttackNorm::linf;
        cfg.epsilon = e;
        cfg.steps = opts.steps;
        cfg.step_size = opts.step_size;
        Rng rng = derive_rng(opts.seed, "attack");
        report.robustness.push_back({e, robust_accuracy(lm.model, ds, cfg, rng)});
    }

    ensure_dir(opts.out);
    write_text_file(opts.out + "/attack.json", report.to_json());
    std::cout << "clean accuracy " << clean << "; robustness curve -> " << opts.out << "\n";
    return kExitOk;
}

struct LandscapeOpts {
    std::string ckpt, run_config, data, out;
    int dims = 1;
    double grid_min = -1.0, grid_max = 1.0;
    int grid_points = 41;
    std::string normalization = "filter";
    std::uint64_t seed = 0;
    double subset_frac = 0.1;
    std::size_t subset_cap = 4096;
};

int cmd_landscape(const LandscapeOpts& opts) {
    LoadedModel lm = load_model(opts.ckpt, opts.run_config);
    const Dataset<Scalar> ds = load_dataset_spec<Scalar>(opts.data);
    check_compatible(lm.model, ds, "landscape");

    const std::vector<double> offsets =
        linspace_with_zero(opts.grid_min, opts.grid_max, opts.grid_points);
    const LandscapeSlice slice =
        energy_landscape(lm.model, ds, opts.dims, offsets, opts.normalization == "filter",
                         opts.seed, opts.subset_frac, opts.subset_cap);
    ensure_dir(opts.out);
    write_text_file(opts.out + "/landscape.json", slice.to_json());
    write_text_file(opts.out + "/landscape.csv", slice.to_csv());
    std::cout << "landscape slice (" << opts.dims << "D, " << offsets.size()
              << " offsets per axis) -> " << opts.out << "\n";
    return kExitOk;
}

}  // namespace

int run_cli(int argc, char** argv) {
    CLI::App app{"jemlab: train and probe joint energy-based classifiers"};
    app.require_subcommand(1);

    TrainOpts train_opts;
    auto* train_cmd = app.add_subcommand("train", "run the hybrid training loop");
    add_train_options(train_cmd, train_opts);

    SampleOpts sample_opts;
    auto* sample_cmd = app.add_subcommand("sample", "draw SGLD samples from a checkpoint");
    sample_cmd->add_option("--ckpt", sample_opts.ckpt, "checkpoint file")->required();
    sample_cmd->add_option("--run-config", sample_opts.run_config,
                           "run config.json (default: sibling of the ckpt dir)");
    sample_cmd->add_option("--out", sample_opts.out, "output directory")->required();
    sample_cmd->add_option("--n", sample_opts.n, "number of samples");
    sample_cmd->add_option("--k", sample_opts.k_override, "SGLD step override (-1 = config)");
    sample_cmd->add_option("--class", sample_opts.conditional,
                           "conditional class (-1 = unconditional)");
    sample_cmd->add_option("--seed", sample_opts.seed, "sampling seed");
    sample_cmd->add_option("--rank-by", sample_opts.rank_by, "none|density|pyx")
        ->check(CLI::IsMember({"none", "density", "pyx"}));
    sample_cmd->add_option("--rasters", sample_opts.rasters, "max raster files (image data)");
    sample_cmd->add_option("--config", "key = value config file (flags override)");

    EvalOpts eval_opts;
    auto* eval_cmd = app.add_subcommand("eval", "accuracy and calibration reports");
    eval_cmd->add_option("--ckpt", eval_opts.ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--run-config", eval_opts.run_config, "run config.json");
    eval_cmd->add_option("--data", eval_opts.data, "dataset spec")->required();
    eval_cmd->add_option("--out", eval_opts.out, "output directory")->required();
    eval_cmd->add_option("--bins", eval_opts.bins, "reliability bins");
    eval_cmd->add_option("--config", "key = value config file (flags override)");

    OodOpts ood_opts;
    auto* ood_cmd = app.add_subcommand("ood", "out-of-distribution detection report");
    ood_cmd->add_option("--ckpt", ood_opts.ckpt, "checkpoint file")->required();
    ood_cmd->add_option("--run-config", ood_opts.run_config, "run config.json");
    ood_cmd->add_option("--data-in", ood_opts.data_in, "in-distribution dataset spec")
        ->required();
    ood_cmd->add_option("--data-out", ood_opts.data_out_spec,
                        "OOD dataset spec, or interp[:n] / noise[:n]")
        ->required();
    ood_cmd->add_option("--method", ood_opts.method, "density|maxprob")
        ->check(CLI::IsMember({"density", "maxprob"}));
    ood_cmd->add_option("--seed", ood_opts.seed, "seed for interp/noise sets");
    ood_cmd->add_option("--out", ood_opts.out, "output directory")->required();
    ood_cmd->add_option("--bins", ood_opts.bins, "histogram bins");
    ood_cmd->add_option("--config", "key = value config file (flags override)");

    AttackOpts attack_opts;
    auto* attack_cmd = app.add_subcommand("attack", "PGD robustness curve");
    attack_cmd->add_option("--ckpt", attack_opts.ckpt, "checkpoint file")->required();
    attack_cmd->add_option("--run-config", attack_opts.run_config, "run config.json");
    attack_cmd->add_option("--data", attack_opts.data, "dataset spec")->required();
    attack_cmd->add_option("--out", attack_opts.out, "output directory")->required();
    attack_cmd->add_option("--norm", attack_opts.norm, "linf|l2")
        ->check(CLI::IsMember({"linf", "l2"}));
    attack_cmd->add_option("--eps", attack_opts.eps, "epsilon list")->delimiter(',');
    attack_cmd->add_option("--steps", attack_opts.steps, "PGD steps");
    attack_cmd->add_option("--step-size", attack_opts.step_size,
                           "PGD step size (0 = 2.5*eps/steps)");
    attack_cmd->add_option("--seed", attack_opts.seed, "attack seed");
    attack_cmd->add_option("--limit", attack_opts.limit, "cap evaluated samples (0 = all)");
    attack_cmd->add_option("--config", "key = value config file (flags override)");

    LandscapeOpts land_opts;
    auto* land_cmd = app.add_subcommand("landscape", "energy landscape slices");
    land_cmd->add_option("--ckpt", land_opts.ckpt, "checkpoint file")->required();
    land_cmd->add_option("--run-config", land_opts.run_config, "run config.json");
    land_cmd->add_option("--data", land_opts.data, "dataset spec")->required();
    land_cmd->add_option("--out", land_opts.out, "output directory")->required();
    land_cmd->add_option("--dims", land_opts.dims, "1 or 2 directions");
    land_cmd->add_option("--grid-min", land_opts.grid_min, "grid start");
    land_cmd->add_option("--grid-max", land_opts.grid_max, "grid end");
    land_cmd->add_option("--grid-points", land_opts.grid_points, "points per axis");
    land_cmd->add_option("--normalization", land_opts.normalization, "filter|none")
        ->check(CLI::IsMember({"filter", "none"}));
    land_cmd->add_option("--seed", land_opts.seed, "direction seed");
    land_cmd->add_option("--subset-frac", land_opts.subset_frac, "data subset fraction");
    land_cmd->add_option("--subset-cap", land_opts.subset_cap, "data subset cap");
    land_cmd->add_option("--config", "key = value config file (flags override)");

    std::vector<std::string> merged;
    try {
        merged = merge_config_args(argc, argv);
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    std::vector<char*> cargs;
    cargs.reserve(merged.size());
    for (auto& s : merged) cargs.push_back(s.data());

    try {
        app.parse(static_cast<int>(cargs.size()), cargs.data());
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(train_opts);
        if (sample_cmd->parsed()) return cmd_sample(sample_opts);
        if (eval_cmd->parsed()) return cmd_eval(eval_opts);
        if (ood_cmd->parsed()) return cmd_ood(ood_opts);
        if (attack_cmd->parsed()) return cmd_attack(attack_opts);
        if (land_cmd->parsed()) return cmd_landscape(land_opts);
    } catch (const DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return kExitDivergence;
    } catch (const IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kExitIo;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    }
    return kExitUsage;
}

}  // namespace jemlab
