#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/graph.hpp"
#include "jemlab/params.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

enum class SamVariant { none, sam, asam };

struct SamConfig {
    SamVariant variant = SamVariant::sam;
    double rho = 0.2;
    double weight_decay = 0.0;  // lambda; applied as +2*lambda*theta

    void validate() const {
        if (variant != SamVariant::none && rho <= 0) throw ValueError("sam: rho must be > 0");
        if (weight_decay < 0) throw ValueError("sam: weight_decay must be >= 0");
    }
};

enum class ScheduleKind { step_decay, cosine };

struct LrSchedule {
    ScheduleKind kind = ScheduleKind::step_decay;
    double base_lr = 0.1;
    std::vector<int> milestones{60, 120, 180};
    double decay = 0.2;
    int total_epochs = 200;  // cosine period
};

inline double schedule_lr(const LrSchedule& s, int epoch) {
    if (epoch < 0) throw ValueError("schedule_lr: epoch must be >= 0");
    if (s.kind == ScheduleKind::step_decay) {
        int passed = 0;
        for (const int m : s.milestones)
            if (epoch >= m) ++passed;
        return s.base_lr * std::pow(s.decay, passed);
    }
    const double t = static_cast<double>(epoch) / static_cast<double>(s.total_epochs);
    return s.base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

// SGD-with-momentum state; buffers mirror the parameter layout.
template <class T>
struct OptState {
    double momentum = 0.9;
    LrSchedule schedule;
    std::vector<Tensor<T>> velocity;  // lazily sized against the ParameterSet

    void ensure_buffers(const ParameterSet<T>& params) {
        if (velocity.size() == params.size()) return;
        velocity.clear();
        velocity.reserve(params.size());
        for (const auto& e : params) velocity.emplace_back(e.tensor.shape());
    }
};

// eps_hat = rho * g / ||g||2 with the global L2 norm over all entries.
// An all-zero gradient yields a zero perturbation with the flag set.
template <class T>
ParameterSet<T> sam_perturbation(const ParameterSet<T>& grads, double rho,
                                 bool* zero_gradient = nullptr) {
    if (grads.empty()) throw ValueError("sam_perturbation: no gradient entries");
    double sq = 0.0;
    for (const auto& e : grads) sq += sqnorm(e.tensor);
    const double norm = std::sqrt(sq);
    if (zero_gradient) *zero_gradient = norm == 0.0;
    ParameterSet<T> eps;
    for (const auto& e : grads) {
        Tensor<T> t = e.tensor;
        scale_inplace(t, norm == 0.0 ? 0.0 : rho / norm);
        eps.add(e.name, std::move(t));
    }
    return eps;
}

// eps_hat_i = rho * |theta_i| * sign(g_i), elementwise; sign(0) = 0.
template <class T>
ParameterSet<T> asam_perturbation(const ParameterSet<T>& params, const ParameterSet<T>& grads,
                                  double rho) {
    if (!params.same_layout(grads))
        throw ValueError("asam_perturbation: parameter/gradient name mismatch");
    ParameterSet<T> eps;
    for (std::size_t i = 0; i < params.size(); ++i) {
        const auto& th = params[i].tensor;
        const auto& g = grads[i].tensor;
        Tensor<T> t(th.shape());
        for (std::size_t j = 0; j < t.numel(); ++j) {
            const T s = g[j] > T{0} ? T{1} : (g[j] < T{0} ? T{-1} : T{0});
            t[j] = static_cast<T>(rho) * std::abs(th[j]) * s;
        }
        eps.add(params[i].name, std::move(t));
    }
    return eps;
}

// A loss closure rebuilds its graph at the current parameter values; the
// two-pass step calls it once at theta and once at theta + eps_hat.
template <class T>
struct BuiltLoss {
    Graph<T> graph;
    int loss_node = -1;
    std::vector<int> param_nodes;          // aligned with the ParameterSet
    std::map<std::string, int> probes;     // extra nodes reported in metrics
};

template <class T>
using LossFn = std::function<BuiltLoss<T>()>;

struct StepInfo {
    double loss = 0.0;            // L(theta)
    double perturbed_loss = 0.0;  // L(theta + eps_hat); == loss when variant none
    double grad_norm = 0.0;       // ||grad L(theta)||2
    double lr = 0.0;
    bool zero_gradient = false;
    std::map<std::string, double> probe_values;  // from the first pass
};

namespace detail {

template <class T>
ParameterSet<T> named_grads(const ParameterSet<T>& params, BuiltLoss<T>& built, long step_hint) {
    built.graph.evaluate();
    const double loss = static_cast<double>(built.graph.value(built.loss_node).item());
    if (!std::isfinite(loss)) throw DivergenceError("non-finite loss", step_hint);
    auto g = built.graph.gradient(
        built.loss_node, std::span<const int>(built.param_nodes.data(), built.param_nodes.size()));
    ParameterSet<T> out;
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!g[i].all_finite()) throw DivergenceError("non-finite gradient", step_hint);
        out.add(params[i].name, std::move(g[i]));
    }
    return out;
}

}  // namespace detail

// Two-pass sharpness-aware update:
//   1. grads at theta; 2. eps_hat per variant; 3. grads at theta + eps_hat;
//   4. restore theta, SGD-momentum update with (g + 2*lambda*theta).
// With variant none this is exactly one plain SGD-momentum step.
template <class T>
StepInfo sharpness_aware_step(ParameterSet<T>& params, const LossFn<T>& loss_fn,
                              const SamConfig& cfg, OptState<T>& opt, int epoch,
                              long step_hint = -1) {
    cfg.validate();
    opt.ensure_buffers(params);
    StepInfo info;
    info.lr = schedule_lr(opt.schedule, epoch);

    BuiltLoss<T> first = loss_fn();
    ParameterSet<T> grads = detail::named_grads(params, first, step_hint);
    info.loss = static_cast<double>(first.graph.value(first.loss_node).item());
    info.perturbed_loss = info.loss;
    double sq = 0.0;
    for (const auto& e : grads) sq += sqnorm(e.tensor);
    info.grad_norm = std::sqrt(sq);
    for (const auto& [name, node] : first.probes)
        info.probe_values[name] = static_cast<double>(first.graph.value(node).item());

    if (cfg.variant != SamVariant::none) {
        ParameterSet<T> eps = cfg.variant == SamVariant::sam
                                  ? sam_perturbation(grads, cfg.rho, &info.zero_gradient)
                                  : asam_perturbation(params, grads, cfg.rho);
        // Save exact bits; (theta + eps) - eps need not restore them.
        std::vector<Tensor<T>> saved;
        saved.reserve(params.size());
        for (const auto& e : params) saved.push_back(e.tensor);
        for (std::size_t i = 0; i < params.size(); ++i)
            axpy_inplace(params[i].tensor, 1.0, eps[i].tensor);
        BuiltLoss<T> second = loss_fn();
        grads = detail::named_grads(params, second, step_hint);
        info.perturbed_loss = static_cast<double>(second.graph.value(second.loss_node).item());
        for (std::size_t i = 0; i < params.size(); ++i)
            params[i].tensor = std::move(saved[i]);
    }

    for (std::size_t i = 0; i < params.size(); ++i) {
        auto th = params[i].tensor.data();
        auto v = opt.velocity[i].data();
        auto g = grads[i].tensor.data();
        const T mu = static_cast<T>(opt.momentum);
        const T lr = static_cast<T>(info.lr);
        const T wd2 = static_cast<T>(2.0 * cfg.weight_decay);
        if (cfg.weight_decay > 0) {
            for (std::size_t j = 0; j < th.size(); ++j) {
                v[j] = mu * v[j] + (g[j] + wd2 * th[j]);
                th[j] -= lr * v[j];
            }
        } else {
            for (std::size_t j = 0; j < th.size(); ++j) {
                v[j] = mu * v[j] + g[j];
                th[j] -= lr * v[j];
            }
        }
    }
    return info;
}

}  // namespace jemlab
