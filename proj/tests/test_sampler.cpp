#include <doctest.h>

#include <cmath>
#include <set>

#include "jemlab/model.hpp"
#include "jemlab/sampler.hpp"
#include "oracles.hpp"

using namespace jemlab;
using oracles::random_tensor;

namespace {

Tensor<double> stack_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t n = rows.size(), d = rows[0].size();
    Tensor<double> t({n, d});
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) t[i * d + j] = rows[i][j];
    return t;
}

}  // namespace

TEST_CASE("fit_informative_init: floor, exact means, law of large numbers") {
    // single-point class hits the variance floor
    const Tensor<double> samples = stack_rows({{0.3, -0.2}, {0.1, 0.1}, {0.5, 0.2}});
    const std::vector<int> labels{0, 1, 1};
    const auto init = fit_informative_init(samples, labels, 2, 1e-4, -1.0, 1.0);
    CHECK(init.means[0][0] == doctest::Approx(0.3));
    CHECK(init.means[0][1] == doctest::Approx(-0.2));
    CHECK(init.vars[0][0] == 1e-4);
    CHECK(init.vars[0][1] == 1e-4);
    // two-point class: exact sample mean
    CHECK(init.means[1][0] == doctest::Approx(0.3));
    CHECK(init.means[1][1] == doctest::Approx(0.15));

    CHECK_THROWS_AS(fit_informative_init(samples, labels, 3, 1e-4, -1.0, 1.0), ValueError);

    // standard-normal synthetic class: fitted mean within 3/sqrt(n)
    Rng rng(21);
    const std::size_t n = 4000;
    Tensor<double> gs({n, 2});
    for (auto& v : gs.data()) v = rng.normal();
    const auto big = fit_informative_init(gs, std::vector<int>(n, 0), 1, 1e-4, -10.0, 10.0);
    const double tol = 3.0 / std::sqrt(static_cast<double>(n));
    CHECK(std::abs(big.means[0][0]) < tol);
    CHECK(std::abs(big.means[0][1]) < tol);
    CHECK(big.vars[0][0] == doctest::Approx(1.0).epsilon(0.15));
}

TEST_CASE("draw_init: degenerate variance, clamp contract, uniform classes") {
    InitDistribution<double> init;
    init.means = {Tensor<double>({1}, {-0.5}), Tensor<double>({1}, {0.5})};
    init.vars = {Tensor<double>({1}, {1e-8}), Tensor<double>({1}, {1e-8})};
    init.clamp_lo = -1.0;
    init.clamp_hi = 1.0;

    Rng rng(31);
    const std::size_t n = 20000;
    const Tensor<double> draws = init.draw(n, rng);
    std::size_t lo_count = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double v = draws[i];
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
        const double d_lo = std::abs(v + 0.5), d_hi = std::abs(v - 0.5);
        CHECK(std::min(d_lo, d_hi) < 3.0 * std::sqrt(1e-8) + 1e-12);
        if (d_lo < d_hi) ++lo_count;
    }
    // multinomial oracle: class frequencies uniform within 4/sqrt(n)
    const double frac = static_cast<double>(lo_count) / static_cast<double>(n);
    CHECK(std::abs(frac - 0.5) < 4.0 / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("buffer_draw branch selection") {
    InitDistribution<double> init;
    init.means = {Tensor<double>({2})};  // zero mean
    init.vars = {Tensor<double>({2}, {1e-6, 1e-6})};
    init.clamp_lo = -1.0;
    init.clamp_hi = 1.0;

    ReplayBuffer<double> buf;
    buf.capacity = 64;
    Rng rng(41);

    // empty buffer forces fresh draws
    const Tensor<double> fresh = buf.draw(init, 100, rng);
    for (const double v : fresh.data()) CHECK(std::abs(v) < 0.01);

    // gamma = 0 with a full buffer: every start is a buffer entry
    buf.reinit_prob = 0.0;
    buf.push(Tensor<double>::full({64, 2}, 0.75), rng);
    const Tensor<double> stored = buf.draw(init, 200, rng);
    for (const double v : stored.data()) CHECK(v == 0.75);

    // gamma = 0.05: fresh fraction 0.05 +- 0.007 at 1e5 draws
    buf.reinit_prob = 0.05;
    const std::size_t n = 100000;
    const Tensor<double> mixed = buf.draw(init, n, rng);
    std::size_t fresh_count = 0;
    for (std::size_t i = 0; i < n; ++i)
        if (mixed[i * 2] != 0.75) ++fresh_count;
    const double frac = static_cast<double>(fresh_count) / static_cast<double>(n);
    CHECK(frac == doctest::Approx(0.05).epsilon(0.14));  // 0.05 +- 0.007
    CHECK(std::abs(frac - 0.05) < 0.007);
}

TEST_CASE("buffer_push: fill, capacity cap, uniform slot replacement") {
    Rng rng(51);
    ReplayBuffer<double> buf;
    buf.capacity = 50;
    buf.push(Tensor<double>::full({20, 1}, 1.0), rng);
    CHECK(buf.fill() == 20);
    buf.push(Tensor<double>::full({31, 1}, 2.0), rng);
    CHECK(buf.fill() == 50);  // capped

    // chi-square uniformity of replacement slots over 1e5 pushes
    std::vector<std::size_t> replaced(50, 0);
    std::vector<double> prev(50);
    for (std::size_t i = 0; i < 50; ++i) prev[i] = buf.slot(i)[0];
    const std::size_t pushes = 100000;
    for (std::size_t p = 0; p < pushes; ++p) {
        buf.push(Tensor<double>::full({1, 1}, 100.0 + static_cast<double>(p)), rng);
        for (std::size_t i = 0; i < 50; ++i) {
            if (buf.slot(i)[0] != prev[i]) {
                ++replaced[i];
                prev[i] = buf.slot(i)[0];
                break;
            }
        }
    }
    const double expected = static_cast<double>(pushes) / 50.0;
    double chi2 = 0.0;
    for (const auto c : replaced)
        chi2 += (static_cast<double>(c) - expected) * (static_cast<double>(c) - expected) /
                expected;
    CHECK(chi2 < 90.0);  // dof 49; 99.9th percentile ~ 85
}

TEST_CASE("sgld_chain: empty chain, analytic quadratic step, determinism") {
    const EnergyGraphFn<double> half_sqnorm = [](Graph<double>& g, int x) {
        return g.reshape(g.scale(g.sqnorm(x), 0.5), Shape{1});
    };
    SgldConfig cfg;
    cfg.steps = 0;
    cfg.step_size = 1.0;
    cfg.noise = 0.0;
    cfg.clamp_lo = -10.0;
    cfg.clamp_hi = 10.0;

    Rng rng(61);
    const Tensor<double> x0 = random_tensor({3, 2}, rng);
    CHECK(sgld_chain(half_sqnorm, x0, cfg, rng) == x0);  // K=0 returns x0 unchanged

    // E = 0.5||x||^2, alpha=1, one step: x1 = x0 - dE/dx = 0
    cfg.steps = 1;
    const Tensor<double> x1 = sgld_chain(half_sqnorm, Tensor<double>({1, 4}, {1, -2, 3, -4}),
                                         cfg, rng);
    for (const double v : x1.data()) CHECK(v == doctest::Approx(0.0).epsilon(1e-12));

    // sigma=0 chains are bit-identical across runs
    Rng ra(7), rb(7), rc(99);
    cfg.steps = 5;
    cfg.step_size = 0.1;
    Rng xr(62);
    const Tensor<double> start = random_tensor({4, 4}, xr, 0.5);
    CHECK(sgld_chain(half_sqnorm, start, cfg, ra) == sgld_chain(half_sqnorm, start, cfg, rc));

    // sigma>0: identical under the same seed, different otherwise
    cfg.noise = 0.1;
    Rng s1(5), s2(5), s3(6);
    const Tensor<double> n1 = sgld_chain(half_sqnorm, start, cfg, s1);
    const Tensor<double> n2 = sgld_chain(half_sqnorm, start, cfg, s2);
    const Tensor<double> n3 = sgld_chain(half_sqnorm, start, cfg, s3);
    CHECK(n1 == n2);
    CHECK(!(n1 == n3));
}

TEST_CASE("sgld monotone descent on convex energy with small alpha") {
    const EnergyGraphFn<double> half_sqnorm = [](Graph<double>& g, int x) {
        return g.reshape(g.scale(g.sqnorm(x), 0.5), Shape{1});
    };
    SgldConfig cfg;
    cfg.steps = 1;
    cfg.step_size = 0.05;
    cfg.noise = 0.0;
    cfg.clamp_lo = -10.0;
    cfg.clamp_hi = 10.0;
    Rng rng(71);
    Tensor<double> x = random_tensor({1, 6}, rng);
    double prev = 0.5 * sqnorm(x);
    for (int t = 0; t < 30; ++t) {
        x = sgld_chain(half_sqnorm, x, cfg, rng);
        const double cur = 0.5 * sqnorm(x);
        CHECK(cur <= prev + 1e-12);
        prev = cur;
    }
}

TEST_CASE("sgld chains are independent: permuting starts permutes outputs") {
    Rng rng(81);
    ModelConfig mc;
    mc.input_dim = 2;
    mc.dense_widths = {16};
    mc.class_count = 2;
    auto model = LogitModel<double>::init(mc, rng);

    SgldConfig cfg;
    cfg.steps = 4;
    cfg.step_size = 0.1;
    cfg.noise = 0.0;
    cfg.clamp_lo = -2.0;
    cfg.clamp_hi = 2.0;

    Rng r1(9), r2(9);
    const Tensor<double> starts = random_tensor({5, 2}, rng, 0.5);
    Tensor<double> reversed({5, 2});
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 2; ++j) reversed[i * 2 + j] = starts[(4 - i) * 2 + j];

    const Tensor<double> out = sgld_chain(model, starts, cfg, r1);
    const Tensor<double> out_rev = sgld_chain(model, reversed, cfg, r2);
    for (std::size_t i = 0; i < 5; ++i)
        for (std::size_t j = 0; j < 2; ++j)
            CHECK(out[i * 2 + j] == out_rev[(4 - i) * 2 + j]);
}

TEST_CASE("sgld outputs always stay inside the clamp range") {
    Rng rng(91);
    ModelConfig mc;
    mc.input_dim = 2;
    mc.dense_widths = {16};
    mc.class_count = 2;
    auto model = LogitModel<double>::init(mc, rng);
    for (auto& v : model.params.at("out.w").data()) v *= 50.0;  // violent gradients

    SgldConfig cfg;
    cfg.steps = 10;
    cfg.step_size = 1.0;
    cfg.noise = 0.5;
    cfg.clamp_lo = -1.0;
    cfg.clamp_hi = 1.0;
    Rng cr(3);
    const Tensor<double> out = sgld_chain(model, random_tensor({16, 2}, rng, 0.3), cfg, cr);
    for (const double v : out.data()) {
        CHECK(v >= -1.0);
        CHECK(v <= 1.0);
    }

    CHECK_THROWS_AS(sgld_chain(model, Tensor<double>::full({1, 2}, 5.0), cfg, cr), ValueError);
}

TEST_CASE("sgld divergence carries the failing step index") {
    // energy whose gradient overflows to inf immediately
    const EnergyGraphFn<double> exploding = [](Graph<double>& g, int x) {
        return g.reshape(g.scale(g.sqnorm(x), 1e308), Shape{1});
    };
    SgldConfig cfg;
    cfg.steps = 3;
    cfg.step_size = 1.0;
    cfg.clamp_lo = -1.0;
    cfg.clamp_hi = 1.0;
    Rng rng(101);
    try {
        (void)sgld_chain(exploding, Tensor<double>::full({1, 2}, 0.5), cfg, rng);
        FAIL("expected DivergenceError");
    } catch (const DivergenceError& e) {
        CHECK(e.step() == 0);
    }
}
