#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "jemlab/io.hpp"
#include "jemlab/model.hpp"
#include "oracles.hpp"

using namespace jemlab;
using oracles::random_tensor;

namespace {

ModelConfig mlp_config(std::size_t in, std::vector<std::size_t> hidden, std::size_t classes,
                       NormMode norm = NormMode::none) {
    ModelConfig c;
    c.image_input = false;
    c.input_dim = in;
    c.dense_widths = std::move(hidden);
    c.class_count = classes;
    c.norm = norm;
    return c;
}

}  // namespace

TEST_CASE("zero-initialized final layer gives all-zero logits") {
    Rng rng(1);
    auto model = LogitModel<double>::init(mlp_config(2, {16}, 4), rng);
    for (auto& v : model.params.at("out.w").data()) v = 0.0;
    for (auto& v : model.params.at("out.b").data()) v = 0.0;
    const Tensor<double> logits = model.forward_logits(random_tensor({5, 2}, rng));
    for (const double v : logits.data()) CHECK(v == 0.0);
}

TEST_CASE("eval-mode forward is pure") {
    Rng rng(2);
    auto model =
        LogitModel<double>::init(mlp_config(3, {8, 8}, 3, NormMode::batch_norm), rng);
    const Tensor<double> x = random_tensor({4, 3}, rng);
    const LogitModel<double>& cm = model;
    const Tensor<double> a = cm.forward_logits(x);
    const Tensor<double> b = cm.forward_logits(x);
    CHECK(a == b);
}

TEST_CASE("single linear layer matches hand computation") {
    Rng rng(3);
    auto model = LogitModel<double>::init(mlp_config(3, {}, 2), rng);
    const Tensor<double>& w = model.params.at("out.w");
    const Tensor<double>& b = model.params.at("out.b");
    const Tensor<double> x = random_tensor({4, 3}, rng);
    const Tensor<double> logits = model.forward_logits(x);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t c = 0; c < 2; ++c) {
            double want = b[c];
            for (std::size_t k = 0; k < 3; ++k) want += x.at(i, k) * w.at(k, c);
            CHECK(logits.at(i, c) == doctest::Approx(want).epsilon(1e-12));
        }
}

TEST_CASE("energy: all-zero logits, LSE-max bound, composition with forward") {
    Rng rng(4);
    auto zero_model = LogitModel<double>::init(mlp_config(2, {8}, 10), rng);
    for (auto& v : zero_model.params.at("out.w").data()) v = 0.0;
    const Tensor<double> e = zero_model.energy(random_tensor({3, 2}, rng));
    for (const double v : e.data()) CHECK(v == doctest::Approx(-std::log(10.0)).epsilon(1e-12));

    auto model = LogitModel<double>::init(mlp_config(2, {16, 16}, 5), rng);
    const Tensor<double> x = random_tensor({8, 2}, rng);
    const Tensor<double> logits = model.forward_logits(x);
    const Tensor<double> energy = model.energy(x);
    for (std::size_t i = 0; i < 8; ++i) {
        double mx = logits.at(i, std::size_t{0});
        double lse = 0.0;
        for (std::size_t c = 0; c < 5; ++c) mx = std::max(mx, logits.at(i, c));
        for (std::size_t c = 0; c < 5; ++c) lse += std::exp(logits.at(i, c) - mx);
        lse = mx + std::log(lse);
        CHECK(energy[i] <= -mx + 1e-12);                        // E <= -max_y f
        CHECK(energy[i] == doctest::Approx(-lse).epsilon(1e-6));  // compositional oracle
    }
}

TEST_CASE("conditional energy: indexing, marginalization, random cross-check") {
    Rng rng(5);
    auto model = LogitModel<double>::init(mlp_config(2, {12}, 3), rng);
    const Tensor<double> x = random_tensor({6, 2}, rng);
    const Tensor<double> logits = model.forward_logits(x);

    // fabricated example: logits [1,2,3], y=2 -> -3 (via gather on a graph)
    Graph<double> g;
    const int le = g.neg(g.gather_class(g.leaf(Tensor<double>({1, 3}, {1, 2, 3})), {2}));
    g.evaluate();
    CHECK(g.value(le)[0] == -3.0);

    CHECK_THROWS_AS(model.conditional_energy(x, 3), ValueError);
    CHECK_THROWS_AS(model.conditional_energy(x, -1), ValueError);

    const Tensor<double> energy = model.energy(x);
    for (std::size_t i = 0; i < 6; ++i) {
        double marg = 0.0;
        for (int y = 0; y < 3; ++y) {
            const Tensor<double> ce = model.conditional_energy(x, y);
            CHECK(ce[i] == doctest::Approx(-logits.at(i, static_cast<std::size_t>(y)))
                               .epsilon(1e-12));
            marg += std::exp(-ce[i]);
        }
        CHECK(-std::log(marg) == doctest::Approx(energy[i]).epsilon(1e-6));
    }
}

TEST_CASE("adding a constant to logits shifts energy by -c, keeps softmax") {
    Rng rng(6);
    auto model = LogitModel<double>::init(mlp_config(2, {8}, 4), rng);
    const Tensor<double> x = random_tensor({5, 2}, rng);
    const Tensor<double> e0 = model.energy(x);
    const Tensor<double> l0 = model.forward_logits(x);

    const double c = 2.75;
    for (auto& v : model.params.at("out.b").data()) v += c;
    const Tensor<double> e1 = model.energy(x);
    const Tensor<double> l1 = model.forward_logits(x);
    for (std::size_t i = 0; i < 5; ++i) {
        CHECK(e1[i] == doctest::Approx(e0[i] - c).epsilon(1e-9));
        // argmax and softmax unchanged
        std::size_t a0 = 0, a1 = 0;
        for (std::size_t k = 1; k < 4; ++k) {
            if (l0.at(i, k) > l0.at(i, a0)) a0 = k;
            if (l1.at(i, k) > l1.at(i, a1)) a1 = k;
        }
        CHECK(a0 == a1);
        double d0 = 0.0, d1 = 0.0;
        for (std::size_t k = 0; k < 4; ++k) {
            d0 += std::exp(l0.at(i, k) - l0.at(i, a0));
            d1 += std::exp(l1.at(i, k) - l1.at(i, a1));
        }
        CHECK(std::exp(l0.at(i, a0) - l0.at(i, a0)) / d0 ==
              doctest::Approx(std::exp(l1.at(i, a1) - l1.at(i, a1)) / d1).epsilon(1e-9));
    }
}

TEST_CASE("dE/dx matches finite differences") {
    Rng rng(7);
    auto model = LogitModel<double>::init(mlp_config(3, {10, 10}, 4), rng);
    double worst = 0.0;
    for (int rep = 0; rep < 20; ++rep) {
        const Tensor<double> x = random_tensor({2, 3}, rng);
        worst = std::max(
            worst, oracles::max_grad_fd_error({x}, [&](Graph<double>& g,
                                                       const std::vector<int>& L) {
                return g.sum(model.energy_graph(g, L[0], model.bind(g)));
            }));
    }
    CHECK(worst < 1e-4);
}

TEST_CASE("penultimate features: hand oracle, shape, purity, no-hidden error") {
    Rng rng(8);
    auto model = LogitModel<double>::init(mlp_config(3, {6}, 2), rng);
    const Tensor<double> x = random_tensor({4, 3}, rng);
    const Tensor<double> f = model.penultimate_features(x);
    CHECK(f.shape() == Shape{4, 6});
    CHECK(model.config.penultimate_dim() == 6);

    const Tensor<double>& w = model.params.at("fc0.w");
    const Tensor<double>& b = model.params.at("fc0.b");
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 6; ++j) {
            double pre = b[j];
            for (std::size_t k = 0; k < 3; ++k) pre += x.at(i, k) * w.at(k, j);
            CHECK(f.at(i, j) == doctest::Approx(std::max(pre, 0.0)).epsilon(1e-12));
        }
    CHECK(f == model.penultimate_features(x));

    auto linear = LogitModel<double>::init(mlp_config(3, {}, 2), rng);
    CHECK_THROWS_AS(linear.penultimate_features(x), ValueError);
}

TEST_CASE("cnn forward shapes and train-mode batch norm updates running stats") {
    ModelConfig cfg;
    cfg.image_input = true;
    cfg.in_c = 1;
    cfg.in_h = 6;
    cfg.in_w = 6;
    cfg.class_count = 2;
    cfg.conv_channels = {4, 4};
    cfg.dense_widths = {8};
    cfg.norm = NormMode::batch_norm;
    Rng rng(9);
    auto model = LogitModel<double>::init(cfg, rng);
    const Tensor<double> x = random_tensor({3, 1, 6, 6}, rng);

    CHECK(model.forward_logits(x, false).shape() == Shape{3, 2});
    const Tensor<double> mean_before = model.norm_state[0].mean;
    (void)model.forward_logits(x, true);
    CHECK(!(model.norm_state[0].mean == mean_before));  // running stats moved

    const Tensor<double> mean_after = model.norm_state[0].mean;
    (void)model.forward_logits(x, false);
    CHECK(model.norm_state[0].mean == mean_after);  // eval mode leaves them

    CHECK_THROWS_AS(model.forward_logits(random_tensor({3, 1, 5, 5}, rng)), ShapeError);
}

TEST_CASE("checkpoint round-trip is bit-exact and order-stable") {
    Rng rng(10);
    auto model =
        LogitModel<double>::init(mlp_config(4, {8, 8}, 3, NormMode::batch_norm), rng);
    (void)model.forward_logits(random_tensor({6, 4}, rng), true);  // move norm stats

    const std::string path = "/tmp/jemlab_test_model.ckpt";
    write_checkpoint(path, model.to_checkpoint());
    auto loaded = LogitModel<double>::init(model.config, rng);  // different init
    loaded.load_from(read_checkpoint(path));

    REQUIRE(loaded.params.size() == model.params.size());
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        CHECK(loaded.params[i].name == model.params[i].name);
        CHECK(loaded.params[i].tensor == model.params[i].tensor);
    }
    for (std::size_t i = 0; i < model.norm_state.size(); ++i) {
        CHECK(loaded.norm_state[i].mean == model.norm_state[i].mean);
        CHECK(loaded.norm_state[i].var == model.norm_state[i].var);
    }
    std::remove(path.c_str());

    // float round-trip through the f32 tag is exact too
    Rng rng2(11);
    auto fmodel = LogitModel<float>::init(mlp_config(2, {5}, 2), rng2);
    write_checkpoint(path, fmodel.to_checkpoint());
    const CheckpointFile back = read_checkpoint(path);
    CHECK(back.dtype == DtypeTag::f32);
    auto floaded = LogitModel<float>::init(fmodel.config, rng2);
    floaded.load_from(back);
    for (std::size_t i = 0; i < fmodel.params.size(); ++i)
        CHECK(floaded.params[i].tensor == fmodel.params[i].tensor);
    std::remove(path.c_str());
}

TEST_CASE("checkpoint rejects non-finite values and missing entries") {
    Rng rng(12);
    auto model = LogitModel<double>::init(mlp_config(2, {4}, 2), rng);
    model.params.at("out.b")[0] = std::nan("");
    CHECK_THROWS_AS(write_checkpoint("/tmp/jemlab_nan.ckpt", model.to_checkpoint()),
                    ValueError);

    model.params.at("out.b")[0] = 0.0;
    CheckpointFile partial = model.to_checkpoint();
    partial.entries.pop_back();  // drop out.b
    auto fresh = LogitModel<double>::init(model.config, rng);
    CHECK_THROWS_AS(fresh.load_from(partial), IoError);
}
