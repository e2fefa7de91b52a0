#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/graph.hpp"
#include "jemlab/model.hpp"
#include "jemlab/rng.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

struct SgldConfig {
    int steps = 5;           // K
    double step_size = 1.0;  // alpha
    double noise = 0.0;      // sigma
    double clamp_lo = -1.0;
    double clamp_hi = 1.0;

    void validate() const {
        if (steps < 0) throw ValueError("sgld: steps must be >= 0");
        if (step_size < 0) throw ValueError("sgld: step_size must be >= 0");
        if (noise < 0) throw ValueError("sgld: noise must be >= 0");
        if (!(clamp_lo < clamp_hi)) throw ValueError("sgld: clamp range requires lo < hi");
    }
};

// Per-class diagonal Gaussian fitted to training data; chains start from it
// instead of uniform noise.
template <class T>
struct InitDistribution {
    std::vector<Tensor<T>> means;  // one per class, sample shape
    std::vector<Tensor<T>> vars;   // diagonal variances, floored
    double variance_floor = 1e-4;
    double clamp_lo = -1.0, clamp_hi = 1.0;

    std::size_t class_count() const { return means.size(); }

    // Draws n samples: uniform class, then Gaussian(mean, diag var), clamped.
    Tensor<T> draw(std::size_t n, Rng& rng) const {
        if (n == 0 || means.empty()) throw ValueError("draw_init: need n >= 1 and fitted init");
        Shape shape{n};
        const Shape& ss = means[0].shape();
        shape.insert(shape.end(), ss.begin(), ss.end());
        Tensor<T> out(shape);
        const std::size_t d = means[0].numel();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t c = rng.below(means.size());
            for (std::size_t j = 0; j < d; ++j) {
                const double v = static_cast<double>(means[c][j]) +
                                 std::sqrt(static_cast<double>(vars[c][j])) * rng.normal();
                out[i * d + j] = static_cast<T>(std::clamp(v, clamp_lo, clamp_hi));
            }
        }
        return out;
    }
};

// Fits per-class empirical means and (biased, floored) diagonal variances.
template <class T>
InitDistribution<T> fit_informative_init(const Tensor<T>& samples, const std::vector<int>& labels,
                                         std::size_t class_count, double variance_floor,
                                         double clamp_lo, double clamp_hi) {
    if (samples.size(0) != labels.size())
        throw ValueError("fit_informative_init: samples/labels length mismatch");
    const std::size_t n = samples.size(0);
    const std::size_t d = samples.numel() / n;
    Shape ss(samples.shape().begin() + 1, samples.shape().end());

    InitDistribution<T> init;
    init.variance_floor = variance_floor;
    init.clamp_lo = clamp_lo;
    init.clamp_hi = clamp_hi;
    std::vector<std::size_t> counts(class_count, 0);
    std::vector<std::vector<double>> sums(class_count, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < n; ++i) {
        const int y = labels[i];
        if (y < 0 || static_cast<std::size_t>(y) >= class_count)
            throw ValueError("fit_informative_init: label out of range");
        ++counts[static_cast<std::size_t>(y)];
        for (std::size_t j = 0; j < d; ++j)
            sums[static_cast<std::size_t>(y)][j] += static_cast<double>(samples[i * d + j]);
    }
    for (std::size_t c = 0; c < class_count; ++c)
        if (counts[c] == 0)
            throw ValueError("fit_informative_init: class " + std::to_string(c) + " is empty");

    std::vector<std::vector<double>> sqsums(class_count, std::vector<double>(d, 0.0));
    for (std::size_t c = 0; c < class_count; ++c)
        for (auto& s : sums[c]) s /= static_cast<double>(counts[c]);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        for (std::size_t j = 0; j < d; ++j) {
            const double dev = static_cast<double>(samples[i * d + j]) - sums[y][j];
            sqsums[y][j] += dev * dev;
        }
    }
    for (std::size_t c = 0; c < class_count; ++c) {
        Tensor<T> mean(ss), var(ss);
        for (std::size_t j = 0; j < d; ++j) {
            mean[j] = static_cast<T>(sums[c][j]);
            var[j] = static_cast<T>(
                std::max(sqsums[c][j] / static_cast<double>(counts[c]), variance_floor));
        }
        init.means.push_back(std::move(mean));
        init.vars.push_back(std::move(var));
    }
    return init;
}

// Fixed-capacity store of past SGLD samples. Once full, each new sample
// overwrites a uniformly random slot.
template <class T>
class ReplayBuffer {
  public:
    std::size_t capacity = 10000;
    double reinit_prob = 0.05;  // gamma

    std::size_t fill() const { return slots_.size(); }
    const Tensor<T>& slot(std::size_t i) const { return slots_[i]; }

    void push(const Tensor<T>& batch, Rng& rng) {
        const std::size_t n = batch.size(0);
        const std::size_t d = batch.numel() / n;
        Shape ss(batch.shape().begin() + 1, batch.shape().end());
        for (std::size_t i = 0; i < n; ++i) {
            Tensor<T> row(ss);
            for (std::size_t j = 0; j < d; ++j) row[j] = batch[i * d + j];
            if (slots_.size() < capacity) {
                slots_.push_back(std::move(row));
            } else {
                slots_[rng.below(slots_.size())] = std::move(row);
            }
        }
    }

    // Chain starts: each row independently comes from a random buffer slot
    // with probability 1-gamma, else fresh from the init distribution. An
    // empty buffer forces fresh draws.
    Tensor<T> draw(const InitDistribution<T>& init, std::size_t n, Rng& rng) const {
        if (n == 0) throw ValueError("buffer_draw: need n >= 1");
        Shape shape{n};
        const Shape& ss = init.means.at(0).shape();
        shape.insert(shape.end(), ss.begin(), ss.end());
        Tensor<T> out(shape);
        const std::size_t d = shape_numel(ss);
        for (std::size_t i = 0; i < n; ++i) {
            const bool fresh = slots_.empty() || rng.uniform() < reinit_prob;
            if (fresh) {
                const Tensor<T> one = init.draw(1, rng);
                for (std::size_t j = 0; j < d; ++j) out[i * d + j] = one[j];
            } else {
                const Tensor<T>& src = slots_[rng.below(slots_.size())];
                for (std::size_t j = 0; j < d; ++j) out[i * d + j] = src[j];
            }
        }
        return out;
    }

  private:
    std::vector<Tensor<T>> slots_;
};

// Builds the per-sample energy node for a batch leaf; lets tests drive the
// sampler with analytic energies.
template <class T>
using EnergyGraphFn = std::function<int(Graph<T>&, int x_node)>;

// K steps of  x <- x - alpha * dE/dx + sigma * N(0, I),  clamped after every
// step. The returned tensor is detached from any graph (StopGrad).
template <class T>
Tensor<T> sgld_chain(const EnergyGraphFn<T>& energy, Tensor<T> x, const SgldConfig& cfg,
                     Rng& rng) {
    cfg.validate();
    for (const T v : x.data())
        if (static_cast<double>(v) < cfg.clamp_lo || static_cast<double>(v) > cfg.clamp_hi)
            throw ValueError("sgld_chain: x0 outside clamp range");
    for (int t = 0; t < cfg.steps; ++t) {
        Graph<T> g;
        const int xid = g.leaf(x);
        const int total = g.sum(energy(g, xid));
        g.evaluate();
        Tensor<T> grad = g.gradient(total, xid);
        if (!grad.all_finite())
            throw DivergenceError("non-finite SGLD gradient", t);
        auto xd = x.data();
        auto gd = grad.data();
        if (cfg.noise > 0.0) {
            for (std::size_t i = 0; i < xd.size(); ++i) {
                const double v = static_cast<double>(xd[i]) -
                                 cfg.step_size * static_cast<double>(gd[i]) +
                                 cfg.noise * rng.normal();
                xd[i] = static_cast<T>(std::clamp(v, cfg.clamp_lo, cfg.clamp_hi));
            }
        } else {
            for (std::size_t i = 0; i < xd.size(); ++i) {
                const double v = static_cast<double>(xd[i]) -
                                 cfg.step_size * static_cast<double>(gd[i]);
                xd[i] = static_cast<T>(std::clamp(v, cfg.clamp_lo, cfg.clamp_hi));
            }
        }
    }
    return x;
}

// Model-backed chains; conditional_class steers every chain toward one class.
template <class T>
Tensor<T> sgld_chain(const LogitModel<T>& model, Tensor<T> x0, const SgldConfig& cfg, Rng& rng,
                     std::optional<int> conditional_class = std::nullopt) {
    const std::size_t n = x0.size(0);
    EnergyGraphFn<T> energy;
    if (conditional_class) {
        if (*conditional_class < 0 ||
            static_cast<std::size_t>(*conditional_class) >= model.config.class_count)
            throw ValueError("sgld_chain: conditional class out of range");
        const std::vector<int> classes(n, *conditional_class);
        energy = [&model, classes](Graph<T>& g, int xid) {
            return model.conditional_energy_graph(g, xid, model.bind(g), classes);
        };
    } else {
        energy = [&model](Graph<T>& g, int xid) {
            return model.energy_graph(g, xid, model.bind(g));
        };
    }
    return sgld_chain(energy, std::move(x0), cfg, rng);
}

}  // namespace jemlab
