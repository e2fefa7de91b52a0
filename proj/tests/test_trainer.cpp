#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "jemlab/trainer.hpp"
#include "oracles.hpp"

using namespace jemlab;
using oracles::random_tensor;

namespace {

TrainConfig toy_config(int epochs, std::uint64_t seed) {
    TrainConfig cfg;
    cfg.model.image_input = false;
    cfg.model.input_dim = 2;
    cfg.model.dense_widths = {16, 16};
    cfg.model.class_count = 2;
    cfg.epochs = epochs;
    cfg.batch = 32;
    cfg.lr = 0.001;
    cfg.seed = seed;
    cfg.sgld.steps = 3;
    cfg.ckpt_every = 1;
    cfg.sample_dump_count = 8;
    cfg.milestones = {};
    return cfg;
}

std::string slurp(const std::string& path) { return read_text_file(path); }

}  // namespace

TEST_CASE("generative_loss arithmetic") {
    CHECK(generative_loss(Tensor<double>({2}, {1, 3}), Tensor<double>({2}, {1, 3}), 0.0) == 0.0);
    CHECK(generative_loss(Tensor<double>({1}, {-1}), Tensor<double>({1}, {-3}), 0.0) ==
          doctest::Approx(2.0));
    CHECK(generative_loss(Tensor<double>({1}, {1}), Tensor<double>({1}, {-1}), 0.1) ==
          doctest::Approx(2.2));
    CHECK_THROWS_AS(generative_loss(Tensor<double>({2}), Tensor<double>({3}), 0.0), ValueError);

    // graph builder agrees with the plain computation
    Rng rng(1);
    const Tensor<double> ep = random_tensor({5}, rng);
    const Tensor<double> en = random_tensor({5}, rng);
    for (const double l2 : {0.0, 0.3}) {
        Graph<double> g;
        const int node = generative_loss_graph(g, g.leaf(ep), g.leaf(en), l2);
        g.evaluate();
        CHECK(g.value(node).item() ==
              doctest::Approx(generative_loss(ep, en, l2)).epsilon(1e-12));
    }
}

TEST_CASE("divergence_guard rules") {
    DivergenceThresholds t;
    StepMetrics m;
    m.has_gen = true;
    CHECK(divergence_guard(m, t).ok);

    m.total_loss = std::nan("");
    CHECK(divergence_guard(m, t).reason == "non-finite metric");
    m.total_loss = 0.0;

    m.e_neg = -1e6;
    CHECK(divergence_guard(m, t).reason == "energy blow-up");
    m.e_neg = 0.0;

    m.xent = 5e3;
    CHECK(divergence_guard(m, t).reason == "cross-entropy blow-up");
}

TEST_CASE("step metrics bookkeeping identity and rho->0 limit") {
    const auto ds = synth_toy<float>("gaussians8", 128, 0.08, 3);
    TrainConfig cfg = toy_config(1, 5);

    auto st = make_train_state(cfg, ds);
    DualLoader<float> loader(ds, cfg.aug, cfg.batch, derive_rng(cfg.seed, "loader-clf"),
                             derive_rng(cfg.seed, "loader-gen"));
    const auto batch = loader.next();
    REQUIRE(batch.has_value());

    // fixed batch, fresh state per variant
    const auto step_with = [&](SamVariant v, double rho) {
        auto s = make_train_state(cfg, ds);
        s.cfg.sam.variant = v;
        s.cfg.sam.rho = rho;
        const StepMetrics m = training_step(s, *batch);
        return std::make_pair(m, std::move(s));
    };

    auto [metrics, state] = step_with(SamVariant::sam, 0.2);
    CHECK(metrics.gen_loss ==
          doctest::Approx(metrics.e_pos - metrics.e_neg).epsilon(1e-6));
    CHECK(metrics.total_loss ==
          doctest::Approx(metrics.xent + metrics.gen_loss).epsilon(1e-5));
    CHECK(state.buffer.fill() == batch->gen_x.size(0));  // x- pushed

    const auto [m_none, s_none] = step_with(SamVariant::none, 0.2);
    double prev_diff = 1e9;
    for (const double rho : {1e-2, 1e-3, 1e-4}) {
        const auto [m_sam, s_sam] = step_with(SamVariant::sam, rho);
        double sq = 0.0;
        for (std::size_t p = 0; p < s_sam.model.params.size(); ++p)
            for (std::size_t j = 0; j < s_sam.model.params[p].tensor.numel(); ++j) {
                const double dv = static_cast<double>(s_sam.model.params[p].tensor[j]) -
                                  static_cast<double>(s_none.model.params[p].tensor[j]);
                sq += dv * dv;
            }
        const double diff = std::sqrt(sq);
        CHECK(diff < 10.0 * rho);  // linear in rho
        CHECK(diff < prev_diff);
        prev_diff = diff;
    }
}

TEST_CASE("ablation collapse: gen_weight=0, K=0, variant none is a plain classifier") {
    const auto ds = synth_toy<float>("gaussians8", 96, 0.08, 17);
    TrainConfig cfg = toy_config(2, 123);
    cfg.gen_weight = 0.0;
    cfg.sgld.steps = 0;
    cfg.sam.variant = SamVariant::none;
    cfg.lr = 0.01;

    const std::string out = "/tmp/jemlab_collapse_run";
    std::filesystem::remove_all(out);
    auto test_ds = ds;
    test_ds.split = "test";
    (void)train(cfg, ds, test_ds, out);

    // independent plain-classifier loop with the same derived streams
    auto oracle = oracles::train_plain_classifier<float>(
        cfg.model, ds, cfg.aug, cfg.batch, cfg.epochs, cfg.lr, cfg.momentum, cfg.milestones,
        cfg.lr_decay, cfg.seed);

    auto final_model = LogitModel<float>::init(cfg.model, derive_rng(cfg.seed, "params"));
    char name[64];
    std::snprintf(name, sizeof name, "/ckpt_/epoch_%04d.ckpt", cfg.epochs);
    final_model.load_from(read_checkpoint(out + name));
    for (std::size_t p = 0; p < oracle.params.size(); ++p)
        CHECK(final_model.params[p].tensor == oracle.params[p].tensor);  // bit-identical
    std::filesystem::remove_all(out);
}

TEST_CASE("x- gradients are stopped: sampled vs injected constant") {
    const auto ds = synth_toy<float>("gaussians8", 64, 0.08, 29);
    TrainConfig cfg = toy_config(1, 31);
    auto st = make_train_state(cfg, ds);

    DualLoader<float> loader(ds, cfg.aug, cfg.batch, derive_rng(cfg.seed, "loader-clf"),
                             derive_rng(cfg.seed, "loader-gen"));
    const auto batch = loader.next();
    REQUIRE(batch.has_value());

    Rng chain_rng(7);
    Tensor<float> starts = st.buffer.draw(st.init, batch->gen_x.size(0), chain_rng);
    const Tensor<float> x_neg = sgld_chain(st.model, starts, st.cfg.sgld, chain_rng);
    Tensor<float> x_neg_copy(x_neg.shape(),
                             std::vector<float>(x_neg.data().begin(), x_neg.data().end()));

    const auto grads_with = [&](const Tensor<float>& neg) {
        Graph<float> g;
        const auto pids = st.model.bind(g);
        const int xent =
            g.softmax_xent(st.model.logits_graph(g, g.leaf(batch->clf_x), pids), batch->clf_y);
        const int ep = st.model.energy_graph(g, g.leaf(batch->gen_x), pids);
        const int en = st.model.energy_graph(g, g.leaf(neg), pids);
        const int loss = g.add(xent, generative_loss_graph(g, ep, en, 0.0));
        g.evaluate();
        return g.gradient(loss, std::span<const int>(pids.data(), pids.size()));
    };
    const auto ga = grads_with(x_neg);
    const auto gb = grads_with(x_neg_copy);
    for (std::size_t p = 0; p < ga.size(); ++p) CHECK(ga[p] == gb[p]);
}

TEST_CASE("2-epoch smoke run emits artifacts; determinism across reruns") {
    const auto train_ds = synth_toy<float>("gaussians8", 128, 0.08, 41);
    auto test_ds = synth_toy<float>("gaussians8", 64, 0.08, 42);
    test_ds.clamp_lo = train_ds.clamp_lo;
    test_ds.clamp_hi = train_ds.clamp_hi;
    clamp_inplace(test_ds.samples, test_ds.clamp_lo, test_ds.clamp_hi);

    TrainConfig cfg = toy_config(2, 77);
    const std::string out1 = "/tmp/jemlab_smoke_a", out2 = "/tmp/jemlab_smoke_b";
    std::filesystem::remove_all(out1);
    std::filesystem::remove_all(out2);

    const TrainResult r1 = train(cfg, train_ds, test_ds, out1);
    CHECK(r1.steps == 8);  // 128/32 per epoch * 2
    CHECK(r1.checkpoints.size() == 2);  // cadence 1: epoch 1 + final
    CHECK(std::filesystem::exists(out1 + "/config.json"));
    CHECK(std::filesystem::exists(out1 + "/metrics.jsonl"));
    CHECK(std::filesystem::exists(out1 + "/eval.json"));
    CHECK(std::filesystem::exists(out1 + "/ckpt_/epoch_0001.ckpt"));
    CHECK(std::filesystem::exists(out1 + "/ckpt_/epoch_0002.ckpt"));
    CHECK(std::filesystem::exists(out1 + "/samples_/epoch_0002.bin"));

    // metrics rows: 8 steps + 2 epoch rows
    std::ifstream nm(out1 + "/metrics.jsonl");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(nm, line))
        if (!line.empty()) ++rows;
    CHECK(rows == 10);

    // buffer accounting: fill  == min(pushed, capacity)
    auto st = make_train_state(cfg, train_ds);
    DualLoader<float> loader(train_ds, cfg.aug, cfg.batch, derive_rng(cfg.seed, "loader-clf"),
                             derive_rng(cfg.seed, "loader-gen"));
    long pushed = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        loader.start_epoch();
        st.epoch = epoch;
        while (auto b = loader.next()) {
            (void)training_step(st, *b);
            pushed += static_cast<long>(b->gen_x.size(0));
        }
    }
    CHECK(st.buffer.fill() ==
          std::min(static_cast<std::size_t>(pushed), cfg.buffer_capacity));

    const TrainResult r2 = train(cfg, train_ds, test_ds, out2);
    CHECK(r2.final_test_accuracy == r1.final_test_accuracy);
    CHECK(slurp(out1 + "/metrics.jsonl") == slurp(out2 + "/metrics.jsonl"));
    CHECK(slurp(out1 + "/ckpt_/epoch_0002.ckpt") == slurp(out2 + "/ckpt_/epoch_0002.ckpt"));
    CHECK(slurp(out1 + "/eval.json") == slurp(out2 + "/eval.json"));

    // buffer contents stay within the clamp range
    for (std::size_t i = 0; i < st.buffer.fill(); ++i)
        for (const float v : st.buffer.slot(i).data()) {
            CHECK(v >= train_ds.clamp_lo);
            CHECK(v <= train_ds.clamp_hi);
        }

    std::filesystem::remove_all(out1);
    std::filesystem::remove_all(out2);
}

TEST_CASE("divergence aborts with diagnostics and partial artifacts") {
    const auto ds = synth_toy<float>("gaussians8", 128, 0.08, 51);
    TrainConfig cfg = toy_config(50, 5);
    cfg.lr = 25.0;  // violent enough to blow up quickly
    cfg.guard.energy_bound = 100.0;

    const std::string out = "/tmp/jemlab_diverge_run";
    std::filesystem::remove_all(out);
    CHECK_THROWS_AS((void)train(cfg, ds, ds, out), DivergenceError);
    CHECK(std::filesystem::exists(out + "/diagnostic.json"));
    CHECK(std::filesystem::exists(out + "/metrics.jsonl"));
    const auto diag = nlohmann::json::parse(slurp(out + "/diagnostic.json"));
    CHECK(diag.contains("step"));
    CHECK(diag.contains("reason"));
    CHECK(diag.contains("energy_trace"));
    std::filesystem::remove_all(out);
}

TEST_CASE("checkpoint init entries round-trip") {
    const auto ds = synth_toy<float>("gaussians8", 64, 0.08, 61);
    TrainConfig cfg = toy_config(1, 9);
    auto st = make_train_state(cfg, ds);
    const CheckpointFile f = train_checkpoint(st);
    const auto init = init_from_checkpoint<float>(f);
    REQUIRE(init.class_count() == st.init.class_count());
    for (std::size_t c = 0; c < init.class_count(); ++c) {
        CHECK(init.means[c] == st.init.means[c]);
        CHECK(init.vars[c] == st.init.vars[c]);
    }
    CHECK(init.clamp_lo == st.init.clamp_lo);
    CHECK(init.clamp_hi == st.init.clamp_hi);
}
