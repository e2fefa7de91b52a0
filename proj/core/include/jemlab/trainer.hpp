#pragma once

#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jemlab/data.hpp"
#include "jemlab/errors.hpp"
#include "jemlab/eval.hpp"
#include "jemlab/io.hpp"
#include "jemlab/model.hpp"
#include "jemlab/optimizer.hpp"
#include "jemlab/rng.hpp"
#include "jemlab/sampler.hpp"

namespace jemlab {

struct TrainConfig;
inline std::string train_config_json(const TrainConfig& cfg);

struct DivergenceThresholds {
    double energy_bound = 1e3;  // on |mean E(x-)|
    double xent_bound = 1e3;
};

struct TrainConfig {
    ModelConfig model;
    int epochs = 200;
    std::size_t batch = 64;
    SgldConfig sgld;  // clamp range is synced to the dataset by train()
    SamConfig sam;
    double lr = 0.1;
    double momentum = 0.9;
    ScheduleKind schedule = ScheduleKind::step_decay;
    std::vector<int> milestones{60, 120, 180};
    double lr_decay = 0.2;
    std::size_t buffer_capacity = 10000;
    double reinit_prob = 0.05;  // gamma
    double gen_weight = 1.0;
    double energy_l2 = 0.0;
    bool aug_gen = false;  // ablation: augment the generative branch too
    AugmentationPipeline aug;
    int ckpt_every = 10;
    std::uint64_t seed = 0;
    double init_variance_floor = 1e-4;
    DivergenceThresholds guard;
    int sample_dump_count = 64;  // fresh-chain dump size per checkpoint; 0 = off

    void validate() const {
        model.validate();
        sgld.validate();
        sam.validate();
        if (epochs < 1) throw ValueError("train: epochs must be >= 1");
        if (batch == 0) throw ValueError("train: batch must be >= 1");
        if (gen_weight < 0 || energy_l2 < 0)
            throw ValueError("train: loss weights must be >= 0");
        if (reinit_prob < 0 || reinit_prob > 1)
            throw ValueError("train: reinit probability must be in [0,1]");
        if (ckpt_every < 1) throw ValueError("train: ckpt_every must be >= 1");
    }
};

struct StepMetrics {
    long step = 0;
    int epoch = 0;
    double xent = 0.0;
    double e_pos = 0.0;    // mean E(x+)
    double e_neg = 0.0;    // mean E(x-)
    double gen_loss = 0.0;
    double total_loss = 0.0;
    double perturbed_loss = 0.0;
    double grad_norm = 0.0;
    double lr = 0.0;
    double wall_time = 0.0;  // seconds; never written to metrics.jsonl
    bool zero_gradient = false;
    bool has_gen = false;
};

// mean(e_pos) - mean(e_neg) + l2 * (mean(e_pos^2) + mean(e_neg^2))
template <class T>
double generative_loss(const Tensor<T>& e_pos, const Tensor<T>& e_neg, double l2_weight) {
    if (e_pos.numel() != e_neg.numel())
        throw ValueError("generative_loss: batch length mismatch");
    double p = 0.0, q = 0.0, p2 = 0.0, q2 = 0.0;
    for (const T v : e_pos.data()) {
        p += static_cast<double>(v);
        p2 += static_cast<double>(v) * static_cast<double>(v);
    }
    for (const T v : e_neg.data()) {
        q += static_cast<double>(v);
        q2 += static_cast<double>(v) * static_cast<double>(v);
    }
    const double n = static_cast<double>(e_pos.numel());
    return (p - q) / n + l2_weight * (p2 + q2) / n;
}

template <class T>
int generative_loss_graph(Graph<T>& g, int e_pos, int e_neg, double l2_weight) {
    int gen = g.sub(g.mean(e_pos), g.mean(e_neg));
    if (l2_weight > 0) {
        const int l2 = g.add(g.mean(g.mul(e_pos, e_pos)), g.mean(g.mul(e_neg, e_neg)));
        gen = g.add(gen, g.scale(l2, l2_weight));
    }
    return gen;
}

struct GuardDecision {
    bool ok = true;
    std::string reason;
};

inline GuardDecision divergence_guard(const StepMetrics& m, const DivergenceThresholds& t) {
    const double finite_probe[] = {m.xent,       m.e_pos,          m.e_neg, m.gen_loss,
                                   m.total_loss, m.perturbed_loss, m.grad_norm};
    for (const double v : finite_probe)
        if (!std::isfinite(v)) return {false, "non-finite metric"};
    if (m.has_gen && std::abs(m.e_neg) > t.energy_bound) return {false, "energy blow-up"};
    if (m.xent > t.xent_bound) return {false, "cross-entropy blow-up"};
    return {true, ""};
}

template <class T>
struct TrainState {
    TrainConfig cfg;
    LogitModel<T> model;
    InitDistribution<T> init;
    ReplayBuffer<T> buffer;
    OptState<T> opt;
    Rng rng_sampler;
    long global_step = 0;
    int epoch = 0;
};

template <class T>
TrainState<T> make_train_state(TrainConfig cfg, const Dataset<T>& train_ds) {
    cfg.sgld.clamp_lo = train_ds.clamp_lo;
    cfg.sgld.clamp_hi = train_ds.clamp_hi;
    cfg.validate();
    TrainState<T> st;
    st.cfg = cfg;
    Rng params_rng = derive_rng(cfg.seed, "params");
    st.model = LogitModel<T>::init(cfg.model, params_rng);
    st.init = fit_informative_init(train_ds.samples, train_ds.labels, cfg.model.class_count,
                                   cfg.init_variance_floor, train_ds.clamp_lo, train_ds.clamp_hi);
    st.buffer.capacity = cfg.buffer_capacity;
    st.buffer.reinit_prob = cfg.reinit_prob;
    st.opt.momentum = cfg.momentum;
    st.opt.schedule.kind = cfg.schedule;
    st.opt.schedule.base_lr = cfg.lr;
    st.opt.schedule.milestones = cfg.milestones;
    st.opt.schedule.decay = cfg.lr_decay;
    st.opt.schedule.total_epochs = cfg.epochs;
    st.rng_sampler = derive_rng(cfg.seed, "sampler");
    return st;
}

// One step of the training loop: draw chain starts, run SGLD, build the
// combined loss on the dual batch, take a sharpness-aware step, push x- to
// the buffer. x- stays constant through both passes (StopGrad).
template <class T>
StepMetrics training_step(TrainState<T>& st, const DualBatch<T>& batch) {
    const auto t0 = std::chrono::steady_clock::now();
    const TrainConfig& cfg = st.cfg;
    const bool gen_on = cfg.gen_weight > 0;
    const std::size_t b = batch.gen_x.size(0);

    std::optional<Tensor<T>> x_neg;
    if (gen_on) {
        Tensor<T> starts = st.buffer.draw(st.init, b, st.rng_sampler);
        x_neg = sgld_chain(st.model, std::move(starts), cfg.sgld, st.rng_sampler);
    }

    const auto loss_fn = [&]() {
        BuiltLoss<T> built;
        Graph<T>& g = built.graph;
        built.param_nodes = st.model.bind(g);
        const int logits =
            st.model.logits_graph_train(g, g.leaf(batch.clf_x), built.param_nodes);
        const int xent = g.softmax_xent(logits, batch.clf_y);
        built.probes["xent"] = xent;
        int loss = xent;
        if (gen_on) {
            const int e_pos = st.model.energy_graph(g, g.leaf(batch.gen_x), built.param_nodes);
            const int e_neg = st.model.energy_graph(g, g.leaf(*x_neg), built.param_nodes);
            built.probes["e_pos"] = g.mean(e_pos);
            built.probes["e_neg"] = g.mean(e_neg);
            const int gen = generative_loss_graph(g, e_pos, e_neg, cfg.energy_l2);
            built.probes["gen"] = gen;
            loss = g.add(loss, cfg.gen_weight == 1.0 ? gen : g.scale(gen, cfg.gen_weight));
        }
        built.loss_node = loss;
        return built;
    };

    const StepInfo info =
        sharpness_aware_step(st.model.params, LossFn<T>(loss_fn), cfg.sam, st.opt, st.epoch,
                             st.global_step);

    StepMetrics m;
    m.step = st.global_step;
    m.epoch = st.epoch;
    m.xent = info.probe_values.at("xent");
    m.has_gen = gen_on;
    if (gen_on) {
        m.e_pos = info.probe_values.at("e_pos");
        m.e_neg = info.probe_values.at("e_neg");
        m.gen_loss = info.probe_values.at("gen");
    }
    m.total_loss = info.loss;
    m.perturbed_loss = info.perturbed_loss;
    m.grad_norm = info.grad_norm;
    m.lr = info.lr;
    m.zero_gradient = info.zero_gradient;

    const GuardDecision verdict = divergence_guard(m, cfg.guard);
    if (!verdict.ok) throw DivergenceError(verdict.reason, st.global_step);

    if (gen_on) st.buffer.push(*x_neg, st.rng_sampler);
    ++st.global_step;
    m.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return m;
}

struct TrainResult {
    std::string out_dir;
    double final_test_accuracy = 0.0;
    long steps = 0;
    std::vector<std::string> checkpoints;
    double wall_seconds = 0.0;
};

namespace detail {

inline nlohmann::json metrics_json(const StepMetrics& m) {
    nlohmann::json j;
    j["type"] = "step";
    j["step"] = m.step;
    j["epoch"] = m.epoch;
    j["xent"] = m.xent;
    if (m.has_gen) {
        j["e_pos"] = m.e_pos;
        j["e_neg"] = m.e_neg;
        j["gen_loss"] = m.gen_loss;
    }
    j["total_loss"] = m.total_loss;
    j["perturbed_loss"] = m.perturbed_loss;
    j["grad_norm"] = m.grad_norm;
    j["lr"] = m.lr;
    if (m.zero_gradient) j["zero_gradient"] = true;
    return j;
}

}  // namespace detail

// Checkpoint = model parameters + norm state + the informative init (init.*
// entries), so sampling works from the file alone.
template <class T>
CheckpointFile train_checkpoint(const TrainState<T>& st) {
    CheckpointFile f = st.model.to_checkpoint();
    const std::size_t classes = st.init.class_count();
    Shape s{classes};
    const Shape ss = st.init.means[0].shape();
    s.insert(s.end(), ss.begin(), ss.end());
    CheckpointEntry means{"init.mean", s, {}}, vars{"init.var", s, {}};
    for (std::size_t c = 0; c < classes; ++c) {
        for (const T v : st.init.means[c].data()) means.values.push_back(static_cast<double>(v));
        for (const T v : st.init.vars[c].data()) vars.values.push_back(static_cast<double>(v));
    }
    f.entries.push_back(std::move(means));
    f.entries.push_back(std::move(vars));
    f.entries.push_back({"init.clamp", {2}, {st.init.clamp_lo, st.init.clamp_hi}});
    return f;
}

template <class T>
InitDistribution<T> init_from_checkpoint(const CheckpointFile& f) {
    const CheckpointEntry* means = f.find("init.mean");
    const CheckpointEntry* vars = f.find("init.var");
    const CheckpointEntry* clamp = f.find("init.clamp");
    if (!means || !vars || !clamp) throw IoError("checkpoint has no init.* entries");
    InitDistribution<T> init;
    init.clamp_lo = clamp->values.at(0);
    init.clamp_hi = clamp->values.at(1);
    const std::size_t classes = means->shape.at(0);
    const Shape ss(means->shape.begin() + 1, means->shape.end());
    const std::size_t d = shape_numel(ss);
    for (std::size_t c = 0; c < classes; ++c) {
        Tensor<T> m(ss), v(ss);
        for (std::size_t j = 0; j < d; ++j) {
            m[j] = static_cast<T>(means->values[c * d + j]);
            v[j] = static_cast<T>(vars->values[c * d + j]);
        }
        init.means.push_back(std::move(m));
        init.vars.push_back(std::move(v));
    }
    return init;
}

// Full training run. Writes out_dir/{config.json, metrics.jsonl, ckpt_/,
// samples_/} plus eval.json; on divergence writes diagnostic.json with the
// recent E+/E- trace, keeps partial artifacts and rethrows.
template <class T>
TrainResult train(const TrainConfig& cfg, const Dataset<T>& train_ds, const Dataset<T>& test_ds,
                  const std::string& out_dir, const std::string& config_echo = "") {
    if (train_ds.sample_shape() != test_ds.sample_shape() ||
        train_ds.class_count != test_ds.class_count)
        throw ValueError("train: train/test datasets are incompatible");
    const auto t0 = std::chrono::steady_clock::now();

    ensure_dir(out_dir);
    ensure_dir(out_dir + "/ckpt_");
    ensure_dir(out_dir + "/samples_");
    TrainState<T> st = make_train_state(cfg, train_ds);
    write_text_file(out_dir + "/config.json",
                    config_echo.empty() ? train_config_json(st.cfg) : config_echo);

    std::ofstream metrics(out_dir + "/metrics.jsonl", std::ios::trunc);
    if (!metrics) throw IoError("cannot open metrics.jsonl under '" + out_dir + "'");

    DualLoader<T> loader(train_ds, cfg.aug, std::min(cfg.batch, train_ds.size()),
                         derive_rng(cfg.seed, "loader-clf"), derive_rng(cfg.seed, "loader-gen"),
                         cfg.aug_gen);

    TrainResult result;
    result.out_dir = out_dir;
    std::deque<std::pair<double, double>> energy_trace;  // (E+, E-) of recent steps

    const auto checkpoint_at = [&](int epoch_done) {
        char name[64];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", epoch_done);
        const std::string path = out_dir + "/ckpt_/" + name;
        write_checkpoint(path, train_checkpoint(st));
        result.checkpoints.push_back(path);
        if (cfg.sample_dump_count > 0 && cfg.gen_weight > 0) {
            // fresh chains on a forked stream so training rng is untouched
            Rng dump_rng =
                derive_rng(cfg.seed, "dump-" + std::to_string(epoch_done));
            Tensor<T> x0 = st.init.draw(static_cast<std::size_t>(cfg.sample_dump_count), dump_rng);
            const Tensor<T> x = sgld_chain(st.model, std::move(x0), cfg.sgld, dump_rng);
            char sname[64];
            std::snprintf(sname, sizeof sname, "epoch_%04d.bin", epoch_done);
            CheckpointFile dump;
            dump.dtype = dtype_tag_of<T>();
            dump.entries.push_back(make_entry("samples", x));
            write_checkpoint(out_dir + "/samples_/" + sname, dump);
        }
    };

    try {
        for (st.epoch = 0; st.epoch < cfg.epochs; ++st.epoch) {
            loader.start_epoch();
            double epoch_xent = 0.0;
            long epoch_steps = 0;
            while (auto batch = loader.next()) {
                const StepMetrics m = training_step(st, *batch);
                metrics << detail::metrics_json(m).dump() << "\n";
                energy_trace.emplace_back(m.e_pos, m.e_neg);
                if (energy_trace.size() > 50) energy_trace.pop_front();
                epoch_xent += m.xent;
                ++epoch_steps;
            }
            const double test_acc = accuracy(st.model, test_ds);
            nlohmann::json ej;
            ej["type"] = "epoch";
            ej["epoch"] = st.epoch;
            ej["test_accuracy"] = test_acc;
            ej["mean_xent"] = epoch_xent / static_cast<double>(epoch_steps);
            ej["lr"] = schedule_lr(st.opt.schedule, st.epoch);
            ej["buffer_fill"] = st.buffer.fill();
            metrics << ej.dump() << "\n";
            result.final_test_accuracy = test_acc;
            if ((st.epoch + 1) % cfg.ckpt_every == 0 && st.epoch + 1 != cfg.epochs)
                checkpoint_at(st.epoch + 1);
        }
        checkpoint_at(cfg.epochs);
    } catch (const DivergenceError& e) {
        metrics.flush();
        nlohmann::json diag;
        diag["step"] = e.step();
        diag["reason"] = e.reason();
        nlohmann::json trace = nlohmann::json::array();
        for (const auto& [ep, en] : energy_trace) trace.push_back({{"e_pos", ep}, {"e_neg", en}});
        diag["energy_trace"] = trace;
        write_text_file(out_dir + "/diagnostic.json", diag.dump(2));
        throw;
    }

    result.steps = st.global_step;
    result.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    // final summary
    const Predictions p = predict(st.model, test_ds);
    EvalReport report;
    report.accuracy = result.final_test_accuracy;
    report.ece = ece(p.confidence, p.correct).ece;
    double me = 0.0, mc = 0.0;
    for (const double v : p.density) me -= v;
    for (const double v : p.confidence) mc += v;
    report.mean_energy = me / static_cast<double>(p.density.size());
    report.mean_confidence = mc / static_cast<double>(p.confidence.size());
    report.sample_count = test_ds.size();
    write_text_file(out_dir + "/eval.json", report.to_json());
    return result;
}

inline std::string train_config_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["model"]["image_input"] = cfg.model.image_input;
    j["model"]["input_dim"] = cfg.model.input_dim;
    j["model"]["in_c"] = cfg.model.in_c;
    j["model"]["in_h"] = cfg.model.in_h;
    j["model"]["in_w"] = cfg.model.in_w;
    j["model"]["class_count"] = cfg.model.class_count;
    j["model"]["conv_channels"] = cfg.model.conv_channels;
    j["model"]["dense_widths"] = cfg.model.dense_widths;
    j["model"]["norm"] = cfg.model.norm == NormMode::batch_norm ? "batch" : "none";
    j["model"]["activation"] =
        cfg.model.activation == Activation::relu ? "relu" : "leaky_relu";
    j["model"]["leaky_slope"] = cfg.model.leaky_slope;
    j["train"]["epochs"] = cfg.epochs;
    j["train"]["batch"] = cfg.batch;
    j["train"]["lr"] = cfg.lr;
    j["train"]["momentum"] = cfg.momentum;
    j["train"]["schedule"] = cfg.schedule == ScheduleKind::cosine ? "cosine" : "step";
    j["train"]["milestones"] = cfg.milestones;
    j["train"]["lr_decay"] = cfg.lr_decay;
    j["train"]["gen_weight"] = cfg.gen_weight;
    j["train"]["energy_l2"] = cfg.energy_l2;
    j["train"]["aug_gen"] = cfg.aug_gen;
    j["train"]["ckpt_every"] = cfg.ckpt_every;
    j["train"]["seed"] = cfg.seed;
    j["sgld"]["k"] = cfg.sgld.steps;
    j["sgld"]["alpha"] = cfg.sgld.step_size;
    j["sgld"]["sigma"] = cfg.sgld.noise;
    j["sgld"]["clamp_lo"] = cfg.sgld.clamp_lo;
    j["sgld"]["clamp_hi"] = cfg.sgld.clamp_hi;
    j["buffer"]["capacity"] = cfg.buffer_capacity;
    j["buffer"]["gamma"] = cfg.reinit_prob;
    j["sam"]["variant"] = cfg.sam.variant == SamVariant::none
                              ? "none"
                              : (cfg.sam.variant == SamVariant::sam ? "sam" : "asam");
    j["sam"]["rho"] = cfg.sam.rho;
    j["sam"]["weight_decay"] = cfg.sam.weight_decay;
    j["aug"]["hflip"] = cfg.aug.hflip;
    j["aug"]["pad"] = cfg.aug.pad;
    j["guard"]["energy_bound"] = cfg.guard.energy_bound;
    j["guard"]["xent_bound"] = cfg.guard.xent_bound;
    return j.dump(2);
}

}  // namespace jemlab
