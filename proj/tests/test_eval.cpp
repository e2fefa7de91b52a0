#include <doctest.h>

#include <cmath>

#include "jemlab/eval.hpp"
#include "jemlab/frechet.hpp"
#include "oracles.hpp"

using namespace jemlab;
using oracles::random_tensor;

namespace {

// linear model: logits = [x.w, -x.w] so class 0 wins iff x.w > 0
LogitModel<double> signed_linear_model(const std::vector<double>& w) {
    ModelConfig cfg;
    cfg.image_input = false;
    cfg.input_dim = w.size();
    cfg.dense_widths = {};
    cfg.class_count = 2;
    Rng rng(0);
    auto model = LogitModel<double>::init(cfg, rng);
    auto& ow = model.params.at("out.w");
    for (std::size_t k = 0; k < w.size(); ++k) {
        ow.at(k, std::size_t{0}) = w[k];
        ow.at(k, std::size_t{1}) = -w[k];
    }
    for (auto& v : model.params.at("out.b").data()) v = 0.0;
    return model;
}

Dataset<double> separable_dataset(std::size_t n, Rng& rng) {
    Dataset<double> ds;
    Tensor<double> x({n, 2});
    ds.labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = (i % 2 == 0 ? 0.5 : -0.5) + 0.1 * rng.normal();
        x[i * 2] = v;
        x[i * 2 + 1] = rng.normal() * 0.2;
        ds.labels[i] = v > 0 ? 0 : 1;
    }
    ds.samples = std::move(x);
    ds.class_count = 2;
    ds.clamp_lo = -2.0;
    ds.clamp_hi = 2.0;
    return ds;
}

}  // namespace

TEST_CASE("accuracy: perfect model, constant logits, shift invariance") {
    Rng rng(1);
    auto ds = separable_dataset(64, rng);
    auto model = signed_linear_model({1.0, 0.0});
    CHECK(accuracy(model, ds) == 1.0);

    // constant logits: argmax ties break to class 0 -> accuracy = freq(class 0)
    auto constant = signed_linear_model({0.0, 0.0});
    std::size_t zeros = 0;
    for (const int y : ds.labels) zeros += y == 0 ? 1 : 0;
    CHECK(accuracy(constant, ds) ==
          doctest::Approx(static_cast<double>(zeros) / static_cast<double>(ds.size())));

    // adding a constant to every logit leaves accuracy unchanged
    const double before = accuracy(model, ds);
    for (auto& v : model.params.at("out.b").data()) v += 3.5;
    CHECK(accuracy(model, ds) == before);

    Dataset<double> empty_ds;
    empty_ds.samples = Tensor<double>({1, 2});
    empty_ds.labels = {0};
    empty_ds.class_count = 2;
    CHECK_NOTHROW((void)accuracy(model, empty_ds));
}

TEST_CASE("ece: perfect calibration, hand binning, brute-force oracle") {
    CHECK(ece({1.0, 1.0, 1.0}, {1, 1, 1}).ece == 0.0);

    // single bin: |acc - conf| = |0.5 - 0.75| = 0.25
    const ReliabilityReport r = ece({0.9, 0.8, 0.7, 0.6}, {1, 1, 0, 0}, 1);
    CHECK(r.ece == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(r.count[0] == 4);

    CHECK_THROWS_AS(ece({0.5}, {1, 0}), ValueError);
    CHECK_THROWS_AS(ece({1.5}, {1}), ValueError);

    // statistically calibrated generator: ECE -> 0
    Rng rng(2);
    const std::size_t n = 100000;
    std::vector<double> conf(n);
    std::vector<char> correct(n);
    for (std::size_t i = 0; i < n; ++i) {
        conf[i] = rng.uniform(0.5, 1.0);
        correct[i] = rng.uniform() < conf[i] ? 1 : 0;
    }
    CHECK(ece(conf, correct).ece <= 0.02);

    // exact match against the brute-force binning oracle
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t m = 200;
        std::vector<double> c(m);
        std::vector<char> k(m);
        for (std::size_t i = 0; i < m; ++i) {
            c[i] = rng.uniform();
            k[i] = rng.uniform() < 0.6 ? 1 : 0;
        }
        CHECK(ece(c, k).ece == oracles::brute_force_ece(c, k, 20));
    }

    // permutation invariance
    std::vector<double> c{0.1, 0.5, 0.9, 0.3};
    std::vector<char> k{0, 1, 1, 0};
    const double base = ece(c, k).ece;
    std::swap(c[0], c[3]);
    std::swap(k[0], k[3]);
    CHECK(ece(c, k).ece == base);
}

TEST_CASE("ood scores: density equals -energy, maxprob basics, shifts") {
    Rng rng(3);
    auto ds = separable_dataset(32, rng);
    ModelConfig mc;
    mc.input_dim = 2;
    mc.dense_widths = {12};
    mc.class_count = 2;
    auto model = LogitModel<double>::init(mc, rng);

    const auto density = ood_scores(model, ds, OodMethod::density);
    const Tensor<double> energy = model.energy(ds.samples);
    for (std::size_t i = 0; i < ds.size(); ++i)
        CHECK(density[i] == doctest::Approx(-energy[i]).epsilon(1e-12));

    auto uniform = signed_linear_model({0.0, 0.0});
    const auto maxprob = ood_scores(uniform, ds, OodMethod::maxprob);
    for (const double p : maxprob) CHECK(p == doctest::Approx(0.5).epsilon(1e-12));

    // density scores shift by +c when all logits shift by +c
    const double c = 1.25;
    for (auto& v : model.params.at("out.b").data()) v += c;
    const auto shifted = ood_scores(model, ds, OodMethod::density);
    for (std::size_t i = 0; i < ds.size(); ++i)
        CHECK(shifted[i] == doctest::Approx(density[i] + c).epsilon(1e-9));
}

TEST_CASE("auroc: separation, ties, exhaustive oracle, monotone invariance") {
    CHECK(auroc({5, 6, 7}, {1, 2, 3}) == 1.0);
    CHECK(auroc({1, 2, 3}, {1, 2, 3}) == 0.5);
    CHECK(auroc({2, 0}, {1}) == 0.5);
    CHECK_THROWS_AS(auroc({}, {1.0}), ValueError);

    Rng rng(4);
    for (int rep = 0; rep < 25; ++rep) {
        const std::size_t n_in = 1 + rng.below(200), n_out = 1 + rng.below(200);
        std::vector<double> in(n_in), out(n_out);
        // quantized scores force plenty of ties
        for (auto& v : in) v = static_cast<double>(rng.below(12));
        for (auto& v : out) v = static_cast<double>(rng.below(12)) - 1.0;
        CHECK(auroc(in, out) == oracles::pairwise_auroc(in, out));

        std::vector<double> in_t(in), out_t(out);
        for (auto& v : in_t) v = std::exp(0.3 * v);  // strictly increasing transform
        for (auto& v : out_t) v = std::exp(0.3 * v);
        CHECK(auroc(in_t, out_t) == doctest::Approx(auroc(in, out)).epsilon(1e-12));
    }
}

TEST_CASE("interp_ood: two-point midpoints, clamp membership, mean") {
    Dataset<double> two;
    two.samples = Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 1.0});
    two.labels = {0, 1};
    two.class_count = 2;
    two.clamp_lo = -1.0;
    two.clamp_hi = 1.0;
    Rng rng(5);
    const Tensor<double> mids = interp_ood(two, 16, rng);
    for (std::size_t i = 0; i < 16; ++i) {
        CHECK(mids[i * 2] == 0.5);
        CHECK(mids[i * 2 + 1] == 0.5);
    }

    const auto ds = synth_toy<double>("gaussians8", 512, 0.1, 6);
    Rng rng2(7);
    const Tensor<double> interp = interp_ood(ds, 4096, rng2);
    double mean_x = 0.0, ds_mean_x = 0.0;
    for (std::size_t i = 0; i < interp.size(0); ++i) {
        CHECK(interp[i * 2] >= ds.clamp_lo);
        CHECK(interp[i * 2] <= ds.clamp_hi);
        mean_x += interp[i * 2];
    }
    for (std::size_t i = 0; i < ds.size(); ++i) ds_mean_x += ds.samples[i * 2];
    mean_x /= static_cast<double>(interp.size(0));
    ds_mean_x /= static_cast<double>(ds.size());
    CHECK(std::abs(mean_x - ds_mean_x) < 0.1);

    CHECK_THROWS_AS(interp_ood(two, 0, rng), ValueError);
}

TEST_CASE("pgd: empty ball, exact constraints, FGSM direction, robustness order") {
    Rng rng(8);
    auto ds = separable_dataset(48, rng);
    auto model = signed_linear_model({1.0, -0.5});

    PgdConfig cfg;
    cfg.epsilon = 0.0;
    Rng ar(1);
    const Tensor<double> same =
        pgd_attack(model, ds.samples, ds.labels, cfg, ar, ds.clamp_lo, ds.clamp_hi);
    CHECK(same == ds.samples);  // returned exactly
    CHECK(robust_accuracy(model, ds, cfg, ar) == accuracy(model, ds));

    for (const AttackNorm norm : {AttackNorm::linf, AttackNorm::l2}) {
        PgdConfig c2;
        c2.norm = norm;
        c2.epsilon = 0.13;
        c2.steps = 15;
        Rng r2(2);
        const Tensor<double> adv =
            pgd_attack(model, ds.samples, ds.labels, c2, r2, ds.clamp_lo, ds.clamp_hi);
        for (std::size_t i = 0; i < ds.size(); ++i) {
            double linf = 0.0, l2sq = 0.0;
            for (std::size_t j = 0; j < 2; ++j) {
                const double d = adv[i * 2 + j] - ds.samples[i * 2 + j];
                linf = std::max(linf, std::abs(d));
                l2sq += d * d;
            }
            if (norm == AttackNorm::linf)
                CHECK(linf <= c2.epsilon);  // exact, post-projection
            else
                CHECK(std::sqrt(l2sq) <= c2.epsilon);
            for (std::size_t j = 0; j < 2; ++j) {
                CHECK(adv[i * 2 + j] >= ds.clamp_lo);
                CHECK(adv[i * 2 + j] <= ds.clamp_hi);
            }
        }
    }

    // one-step L-inf without random start follows -sign(w) for true class 0
    PgdConfig fgsm;
    fgsm.norm = AttackNorm::linf;
    fgsm.epsilon = 0.05;
    fgsm.steps = 1;
    fgsm.step_size = 0.05;
    fgsm.random_start = false;
    Tensor<double> x0({1, 2}, {0.3, 0.2});
    Rng r3(3);
    const Tensor<double> adv = pgd_attack(model, x0, {0}, fgsm, r3, -2.0, 2.0);
    CHECK(adv[0] - x0[0] == doctest::Approx(-0.05).epsilon(1e-12));  // w0 > 0
    CHECK(adv[1] - x0[1] == doctest::Approx(+0.05).epsilon(1e-12));  // w1 < 0

    // a real attack cannot beat clean accuracy on this model
    PgdConfig strong;
    strong.epsilon = 0.2;
    strong.steps = 20;
    Rng r4(4);
    CHECK(robust_accuracy(model, ds, strong, r4) <= accuracy(model, ds));
}

TEST_CASE("landscape: center value, bit-exact restore, determinism, parabola") {
    Rng rng(9);
    // linear least squares: L(theta) = ||X theta - y||^2 is quadratic along
    // any parameter-space line
    const Tensor<double> X = random_tensor({12, 3}, rng);
    const Tensor<double> y = random_tensor({12}, rng);
    ParameterSet<double> params;
    params.add("theta", random_tensor({3}, rng));

    const auto aggregate = [&]() {
        double total = 0.0;
        for (std::size_t i = 0; i < 12; ++i) {
            double r = -y[i];
            for (std::size_t k = 0; k < 3; ++k) r += X.at(i, k) * params.at("theta")[k];
            total += r * r;
        }
        return total;
    };

    std::vector<double> offsets;
    for (int i = -10; i <= 10; ++i) offsets.push_back(0.1 * i);
    offsets[10] = 0.0;

    const Tensor<double> before = params.at("theta");
    const LandscapeSlice slice =
        landscape_slice(params, 1, offsets, true, 1234, aggregate);
    CHECK(params.at("theta") == before);                 // restored bit-exactly
    CHECK(slice.center_value == aggregate());            // offset 0 = unperturbed
    CHECK(slice.values[10] == slice.center_value);

    const LandscapeSlice again = landscape_slice(params, 1, offsets, true, 1234, aggregate);
    CHECK(again.values == slice.values);  // same seed, same slice

    // quadratic fit via exact 3-point interpolation; residual ~ 0 everywhere
    const double v0 = slice.values[10], v1 = slice.values[14], v2 = slice.values[6];
    const double t1 = offsets[14], t2 = offsets[6];
    // solve a*t^2 + b*t + c through (0, v0), (t1, v1), (t2, v2)
    const double c = v0;
    const double a = ((v1 - c) / t1 - (v2 - c) / t2) / (t1 - t2);
    const double b = (v1 - c) / t1 - a * t1;
    double scale = 1.0;
    for (const double v : slice.values) scale = std::max(scale, std::abs(v));
    for (std::size_t i = 0; i < offsets.size(); ++i) {
        const double fit = a * offsets[i] * offsets[i] + b * offsets[i] + c;
        CHECK(std::abs(fit - slice.values[i]) / scale < 1e-8);
    }

    CHECK_THROWS_AS(landscape_slice(params, 1, {0.5, 1.0}, true, 1, aggregate), ValueError);
    CHECK_THROWS_AS(landscape_slice(params, 3, offsets, true, 1, aggregate), ValueError);
}

TEST_CASE("energy_landscape on a model: 2D grid and flags") {
    Rng rng(10);
    ModelConfig mc;
    mc.input_dim = 2;
    mc.dense_widths = {8};
    mc.class_count = 2;
    auto model = LogitModel<double>::init(mc, rng);
    const auto ds = synth_toy<double>("gaussians8", 200, 0.1, 11);

    const std::vector<double> offsets{-0.5, 0.0, 0.5};
    const LandscapeSlice slice = energy_landscape(model, ds, 2, offsets, true, 99, 0.1, 64);
    CHECK(slice.values.size() == 9);
    CHECK(slice.directions == 2);
    CHECK(slice.values[4] == slice.center_value);  // (0,0) grid point
    for (const auto f : slice.flagged) CHECK(f == 0);
}

TEST_CASE("frechet distance: closed forms, dense oracle, symmetry") {
    // identical inputs -> 0
    const std::vector<double> mu{0.3, -0.2, 1.0};
    const std::vector<double> cov{0.5, 0.1, 0.0, 0.1, 0.7, 0.2, 0.0, 0.2, 0.9};
    CHECK(frechet_gaussian(mu, cov, mu, cov, 3) == doctest::Approx(0.0).epsilon(1e-6));

    // equal covariances: distance = ||mu1 - mu2||^2
    const std::vector<double> mu2{1.3, -0.2, 0.0};
    const double want = 1.0 + 0.0 + 1.0;
    CHECK(frechet_gaussian(mu, cov, mu2, cov, 3) == doctest::Approx(want).epsilon(1e-5));

    // random PSD pairs vs the Denman-Beavers oracle
    Rng rng(12);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<double> a(9), b(9), m1(3), m2(3);
        const auto raw1 = random_tensor({3, 3}, rng);
        const auto raw2 = random_tensor({3, 3}, rng);
        for (std::size_t i = 0; i < 3; ++i)
            for (std::size_t j = 0; j < 3; ++j) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t k = 0; k < 3; ++k) {
                    s1 += raw1.at(i, k) * raw1.at(j, k);
                    s2 += raw2.at(i, k) * raw2.at(j, k);
                }
                a[i * 3 + j] = s1;
                b[i * 3 + j] = s2;
            }
        for (auto& v : m1) v = rng.normal();
        for (auto& v : m2) v = rng.normal();
        const double impl = frechet_gaussian(m1, a, m2, b, 3);
        const double oracle = oracles::frechet_oracle(m1, a, m2, b, 3);
        CHECK(impl == doctest::Approx(oracle).epsilon(1e-4));
        CHECK(frechet_gaussian(m2, b, m1, a, 3) == doctest::Approx(impl).epsilon(1e-6));
        CHECK(impl >= -1e-9);
    }
}

TEST_CASE("feature_frechet through a model") {
    Rng rng(13);
    ModelConfig mc;
    mc.input_dim = 2;
    mc.dense_widths = {4};
    mc.class_count = 2;
    auto model = LogitModel<double>::init(mc, rng);

    const Tensor<double> a = random_tensor({40, 2}, rng);
    const Tensor<double> b = random_tensor({40, 2}, rng, 2.0);
    CHECK(feature_frechet(model, a, a) == doctest::Approx(0.0).epsilon(1e-6));
    const double dab = feature_frechet(model, a, b);
    CHECK(dab > 0.0);
    CHECK(feature_frechet(model, b, a) == doctest::Approx(dab).epsilon(1e-6));
    CHECK_THROWS_AS((void)feature_frechet(model, random_tensor({3, 2}, rng), a), ValueError);
}

TEST_CASE("mode coverage") {
    const auto centers = gaussians8_centers<double>();
    Tensor<double> exact({8, 2});
    for (std::size_t k = 0; k < 8; ++k) {
        exact[k * 2] = centers[k][0];
        exact[k * 2 + 1] = centers[k][1];
    }
    CHECK(mode_coverage(exact, centers, 0.1) == 8);
    CHECK(mode_coverage(Tensor<double>({4, 2}), centers, 0.1) == 0);  // origin misses all

    // dense uniform samples cover everything at radius ~ box/8
    Rng rng(14);
    Tensor<double> uniform({4096, 2});
    for (auto& v : uniform.data()) v = rng.uniform(-1.0, 1.0);
    CHECK(mode_coverage(uniform, centers, 0.25) == 8);
    CHECK_THROWS_AS(mode_coverage(exact, centers, 0.0), ValueError);
}
