#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "jemlab/data.hpp"
#include "jemlab/errors.hpp"
#include "jemlab/frechet.hpp"
#include "jemlab/model.hpp"
#include "jemlab/reports.hpp"
#include "jemlab/rng.hpp"

namespace jemlab {

inline constexpr std::size_t kEvalChunk = 256;

// ---- predictions / accuracy / calibration ----

struct Predictions {
    std::vector<int> predicted;
    std::vector<double> confidence;  // max_y softmax
    std::vector<char> correct;
    std::vector<double> density;     // logsumexp(logits) = log p(x) + log Z
};

template <class T>
Predictions predict(const LogitModel<T>& model, const Dataset<T>& ds) {
    if (ds.size() == 0) throw ValueError("predict: empty dataset");
    Predictions out;
    out.predicted.reserve(ds.size());
    for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
        const std::size_t take = std::min(kEvalChunk, ds.size() - start);
        std::vector<std::size_t> idx(take);
        std::iota(idx.begin(), idx.end(), start);
        const Tensor<T> logits = model.forward_logits(ds.rows(idx));
        const std::size_t classes = logits.size(1);
        for (std::size_t i = 0; i < take; ++i) {
            const T* row = logits.data().data() + i * classes;
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (row[c] > row[best]) best = c;  // ties -> lowest index
            double s = 0.0;
            for (std::size_t c = 0; c < classes; ++c)
                s += std::exp(static_cast<double>(row[c] - row[best]));
            const double lse = static_cast<double>(row[best]) + std::log(s);
            out.predicted.push_back(static_cast<int>(best));
            out.confidence.push_back(std::exp(static_cast<double>(row[best]) - lse));
            out.correct.push_back(out.predicted.back() == ds.labels[start + i] ? 1 : 0);
            out.density.push_back(lse);
        }
    }
    return out;
}

template <class T>
double accuracy(const LogitModel<T>& model, const Dataset<T>& ds) {
    const Predictions p = predict(model, ds);
    std::size_t hits = 0;
    for (const char c : p.correct) hits += c;
    return static_cast<double>(hits) / static_cast<double>(p.correct.size());
}

// Equal-width binning on confidence; empty bins contribute 0 to the ECE.
inline ReliabilityReport ece(const std::vector<double>& confidences,
                             const std::vector<char>& correctness, std::size_t bins = 20) {
    if (confidences.size() != correctness.size())
        throw ValueError("ece: confidences/correctness length mismatch");
    if (confidences.empty()) throw ValueError("ece: empty input");
    for (const double c : confidences)
        if (!(c >= 0.0 && c <= 1.0)) throw ValueError("ece: confidence outside [0,1]");

    ReliabilityReport r;
    r.bins = bins;
    r.total = confidences.size();
    r.bin_lo.resize(bins);
    r.bin_hi.resize(bins);
    r.count.assign(bins, 0);
    std::vector<double> conf_sum(bins, 0.0), acc_sum(bins, 0.0);
    for (std::size_t b = 0; b < bins; ++b) {
        r.bin_lo[b] = static_cast<double>(b) / static_cast<double>(bins);
        r.bin_hi[b] = static_cast<double>(b + 1) / static_cast<double>(bins);
    }
    for (std::size_t i = 0; i < confidences.size(); ++i) {
        const auto raw = static_cast<std::size_t>(confidences[i] * static_cast<double>(bins));
        const std::size_t b = std::min(raw, bins - 1);  // confidence 1.0 -> last bin
        ++r.count[b];
        conf_sum[b] += confidences[i];
        acc_sum[b] += correctness[i] ? 1.0 : 0.0;
    }
    r.mean_confidence.assign(bins, 0.0);
    r.accuracy.assign(bins, 0.0);
    r.ece = 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
        if (r.count[b] == 0) continue;
        r.mean_confidence[b] = conf_sum[b] / static_cast<double>(r.count[b]);
        r.accuracy[b] = acc_sum[b] / static_cast<double>(r.count[b]);
        r.ece += (static_cast<double>(r.count[b]) / static_cast<double>(r.total)) *
                 std::abs(r.accuracy[b] - r.mean_confidence[b]);
    }
    return r;
}

// ---- OOD scoring ----

enum class OodMethod { density, maxprob };

// density: logsumexp(logits), i.e. -E(x) = log p(x) up to the unknown log Z;
// maxprob: max_y softmax probability.
template <class T>
std::vector<double> ood_scores(const LogitModel<T>& model, const Dataset<T>& ds,
                               OodMethod method) {
    const Predictions p = predict(model, ds);
    return method == OodMethod::density ? p.density : p.confidence;
}

// P(score_in > score_out) + 0.5 P(equal) by rank statistics (Mann-Whitney U
// with midranks); ties get half credit.
inline double auroc(const std::vector<double>& scores_in, const std::vector<double>& scores_out) {
    if (scores_in.empty() || scores_out.empty()) throw ValueError("auroc: empty input");
    struct Item {
        double s;
        bool is_in;
    };
    std::vector<Item> all;
    all.reserve(scores_in.size() + scores_out.size());
    for (const double s : scores_in) all.push_back({s, true});
    for (const double s : scores_out) all.push_back({s, false});
    std::sort(all.begin(), all.end(), [](const Item& a, const Item& b) { return a.s < b.s; });
    double rank_sum_in = 0.0;
    std::size_t i = 0;
    while (i < all.size()) {
        std::size_t j = i;
        while (j < all.size() && all[j].s == all[i].s) ++j;
        const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based average rank
        for (std::size_t k = i; k < j; ++k)
            if (all[k].is_in) rank_sum_in += midrank;
        i = j;
    }
    const double n1 = static_cast<double>(scores_in.size());
    const double n0 = static_cast<double>(scores_out.size());
    const double u = rank_sum_in - n1 * (n1 + 1.0) / 2.0;
    return u / (n1 * n0);
}

// Midpoints of uniformly drawn distinct sample pairs.
template <class T>
Tensor<T> interp_ood(const Dataset<T>& ds, std::size_t n, Rng& rng) {
    if (ds.size() < 2) throw ValueError("interp_ood: dataset needs at least 2 samples");
    if (n == 0) throw ValueError("interp_ood: n must be >= 1");
    Shape s{n};
    const Shape ss = ds.sample_shape();
    s.insert(s.end(), ss.begin(), ss.end());
    Tensor<T> out(s);
    const std::size_t d = ds.sample_numel();
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t i = rng.below(ds.size());
        std::size_t j = rng.below(ds.size() - 1);
        if (j >= i) ++j;
        for (std::size_t t = 0; t < d; ++t)
            out[k * d + t] = static_cast<T>(0.5) * (ds.samples[i * d + t] + ds.samples[j * d + t]);
    }
    return out;
}

// ---- PGD attack ----

enum class AttackNorm { linf, l2 };

struct PgdConfig {
    AttackNorm norm = AttackNorm::linf;
    double epsilon = 0.1;
    int steps = 40;
    double step_size = 0.0;  // <= 0 selects 2.5 * epsilon / steps
    bool random_start = true;
};

// Iterated ascent on cross-entropy; the result satisfies the norm constraint
// and the clamp range exactly.
template <class T>
Tensor<T> pgd_attack(const LogitModel<T>& model, const Tensor<T>& x,
                     const std::vector<int>& labels, const PgdConfig& cfg, Rng& rng,
                     double clamp_lo = -1.0, double clamp_hi = 1.0) {
    if (cfg.epsilon < 0) throw ValueError("pgd_attack: epsilon must be >= 0");
    if (cfg.epsilon == 0.0) return x;
    const std::size_t n = x.size(0);
    const std::size_t d = x.numel() / n;
    const double ss = cfg.step_size > 0 ? cfg.step_size
                                        : 2.5 * cfg.epsilon / static_cast<double>(cfg.steps);

    Tensor<T> adv = x;
    if (cfg.random_start) {
        if (cfg.norm == AttackNorm::linf) {
            for (auto& v : adv.data())
                v = static_cast<T>(std::clamp(static_cast<double>(v) +
                                                  rng.uniform(-cfg.epsilon, cfg.epsilon),
                                              clamp_lo, clamp_hi));
        } else {
            // uniform in the L2 ball: gaussian direction, radius ~ eps*u^(1/d)
            for (std::size_t i = 0; i < n; ++i) {
                std::vector<double> dir(d);
                double sq = 0.0;
                for (auto& v : dir) {
                    v = rng.normal();
                    sq += v * v;
                }
                const double norm = std::sqrt(sq);
                const double radius =
                    cfg.epsilon * std::pow(rng.uniform(), 1.0 / static_cast<double>(d));
                const double k = norm > 0 ? radius / norm : 0.0;
                for (std::size_t j = 0; j < d; ++j)
                    adv[i * d + j] = static_cast<T>(std::clamp(
                        static_cast<double>(adv[i * d + j]) + k * dir[j], clamp_lo, clamp_hi));
            }
        }
    }

    // Snaps stored values onto the eps-ball exactly: rounding at the storage
    // precision may leave a coordinate/norm one ulp outside after the double
    // arithmetic above.
    const auto snap_to_ball = [&](Tensor<T>& a) {
        for (std::size_t i = 0; i < n; ++i) {
            if (cfg.norm == AttackNorm::linf) {
                for (std::size_t j = 0; j < d; ++j) {
                    T v = a[i * d + j];
                    const T xi = x[i * d + j];
                    while (static_cast<double>(v) - static_cast<double>(xi) > cfg.epsilon)
                        v = std::nextafter(v, xi);
                    while (static_cast<double>(xi) - static_cast<double>(v) > cfg.epsilon)
                        v = std::nextafter(v, xi);
                    a[i * d + j] = v;
                }
            } else {
                double scale = 1.0;
                for (int guard = 0; guard < 100; ++guard) {
                    double sq = 0.0;
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dj = static_cast<double>(a[i * d + j]) -
                                          static_cast<double>(x[i * d + j]);
                        sq += dj * dj;
                    }
                    const double norm = std::sqrt(sq);
                    if (norm <= cfg.epsilon) break;
                    scale = (cfg.epsilon / norm) * (1.0 - guard * 1e-12);
                    for (std::size_t j = 0; j < d; ++j) {
                        const double dj = static_cast<double>(a[i * d + j]) -
                                          static_cast<double>(x[i * d + j]);
                        a[i * d + j] =
                            static_cast<T>(static_cast<double>(x[i * d + j]) + dj * scale);
                    }
                }
            }
        }
    };

    for (int t = 0; t < cfg.steps; ++t) {
        Graph<T> g;
        const auto pids = model.bind(g);
        const int xid = g.leaf(adv);
        const int loss = g.softmax_xent(model.logits_graph(g, xid, pids), labels);
        g.evaluate();
        const Tensor<T> grad = g.gradient(loss, xid);
        if (!grad.all_finite()) throw DivergenceError("non-finite attack gradient", t);

        for (std::size_t i = 0; i < n; ++i) {
            if (cfg.norm == AttackNorm::linf) {
                for (std::size_t j = 0; j < d; ++j) {
                    const double gv = static_cast<double>(grad[i * d + j]);
                    const double sgn = gv > 0 ? 1.0 : (gv < 0 ? -1.0 : 0.0);
                    double v = static_cast<double>(adv[i * d + j]) + ss * sgn;
                    // project onto the eps box around x, then the data range
                    const double xi = static_cast<double>(x[i * d + j]);
                    v = std::clamp(v, xi - cfg.epsilon, xi + cfg.epsilon);
                    adv[i * d + j] = static_cast<T>(std::clamp(v, clamp_lo, clamp_hi));
                }
            } else {
                double gsq = 0.0;
                for (std::size_t j = 0; j < d; ++j) {
                    const double gv = static_cast<double>(grad[i * d + j]);
                    gsq += gv * gv;
                }
                const double gn = std::sqrt(gsq);
                const double k = gn > 0 ? ss / gn : 0.0;
                double dsq = 0.0;
                std::vector<double> delta(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double v = static_cast<double>(adv[i * d + j]) +
                                     k * static_cast<double>(grad[i * d + j]);
                    delta[j] = v - static_cast<double>(x[i * d + j]);
                    dsq += delta[j] * delta[j];
                }
                double dn = std::sqrt(dsq);
                // repeat the shrink until rounding leaves the norm <= eps
                for (int guard = 0; guard < 8 && dn > cfg.epsilon; ++guard) {
                    const double shrink = cfg.epsilon / dn;
                    dsq = 0.0;
                    for (auto& dv : delta) {
                        dv *= shrink;
                        dsq += dv * dv;
                    }
                    dn = std::sqrt(dsq);
                }
                for (std::size_t j = 0; j < d; ++j) {
                    const double v = static_cast<double>(x[i * d + j]) + delta[j];
                    adv[i * d + j] = static_cast<T>(std::clamp(v, clamp_lo, clamp_hi));
                }
            }
        }
        snap_to_ball(adv);
    }
    if (cfg.random_start && cfg.steps == 0) snap_to_ball(adv);
    return adv;
}

template <class T>
double robust_accuracy(const LogitModel<T>& model, const Dataset<T>& ds, const PgdConfig& cfg,
                       Rng& rng) {
    std::size_t hits = 0;
    for (std::size_t start = 0; start < ds.size(); start += kEvalChunk) {
        const std::size_t take = std::min(kEvalChunk, ds.size() - start);
        std::vector<std::size_t> idx(take);
        std::iota(idx.begin(), idx.end(), start);
        std::vector<int> labels(take);
        for (std::size_t i = 0; i < take; ++i) labels[i] = ds.labels[start + i];
        const Tensor<T> adv =
            pgd_attack(model, ds.rows(idx), labels, cfg, rng, ds.clamp_lo, ds.clamp_hi);
        const Tensor<T> logits = model.forward_logits(adv);
        const std::size_t classes = logits.size(1);
        for (std::size_t i = 0; i < take; ++i) {
            const T* row = logits.data().data() + i * classes;
            std::size_t best = 0;
            for (std::size_t c = 1; c < classes; ++c)
                if (row[c] > row[best]) best = c;
            hits += static_cast<int>(best) == labels[i] ? 1 : 0;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(ds.size());
}

// ---- energy landscape slices ----

template <class T>
void filter_normalize_direction(Tensor<T>& d, const Tensor<T>& theta);

// Evaluates aggregate(theta + sum_i lambda_i d_i) over a grid; directions are
// Gaussian per parameter tensor, optionally filter-normalized (each axis-0
// slice of d rescaled to the matching parameter slice norm). Parameters are
// restored bit-exactly afterward.
template <class T>
LandscapeSlice landscape_slice(ParameterSet<T>& params, int directions,
                               const std::vector<double>& offsets, bool filter_normalize,
                               std::uint64_t seed, const std::function<double()>& aggregate) {
    if (directions != 1 && directions != 2)
        throw ValueError("landscape_slice: 1 or 2 directions supported");
    if (std::find(offsets.begin(), offsets.end(), 0.0) == offsets.end())
        throw ValueError("landscape_slice: grid must contain offset 0");

    Rng rng(seed);
    std::vector<std::vector<Tensor<T>>> dirs(static_cast<std::size_t>(directions));
    for (auto& dset : dirs) {
        dset.reserve(params.size());
        for (const auto& e : params) {
            Tensor<T> d(e.tensor.shape());
            for (auto& v : d.data()) v = static_cast<T>(rng.normal());
            if (filter_normalize) filter_normalize_direction(d, e.tensor);
            dset.push_back(std::move(d));
        }
    }

    std::vector<Tensor<T>> saved;
    saved.reserve(params.size());
    for (const auto& e : params) saved.push_back(e.tensor);
    const auto restore = [&] {
        for (std::size_t i = 0; i < params.size(); ++i) params[i].tensor = saved[i];
    };

    LandscapeSlice slice;
    slice.seed = seed;
    slice.directions = directions;
    slice.normalization = filter_normalize ? "filter" : "none";
    slice.offsets = offsets;
    const std::size_t grid_points =
        directions == 1 ? offsets.size() : offsets.size() * offsets.size();
    slice.values.resize(grid_points);
    slice.flagged.assign(grid_points, 0);

    try {
        for (std::size_t gi = 0; gi < grid_points; ++gi) {
            const double l0 = directions == 1 ? offsets[gi] : offsets[gi / offsets.size()];
            const double l1 = directions == 1 ? 0.0 : offsets[gi % offsets.size()];
            for (std::size_t p = 0; p < params.size(); ++p) {
                params[p].tensor = saved[p];
                if (l0 != 0.0) axpy_inplace(params[p].tensor, l0, dirs[0][p]);
                if (directions == 2 && l1 != 0.0) axpy_inplace(params[p].tensor, l1, dirs[1][p]);
            }
            const double v = aggregate();
            slice.values[gi] = v;
            if (!std::isfinite(v)) slice.flagged[gi] = 1;
            if (l0 == 0.0 && l1 == 0.0) slice.center_value = v;
        }
    } catch (...) {
        restore();
        throw;
    }
    restore();
    return slice;
}

template <class T>
void filter_normalize_direction(Tensor<T>& d, const Tensor<T>& theta) {
    const std::size_t units = d.rank() == 0 ? 1 : d.size(0);
    const std::size_t stride = d.numel() / units;
    for (std::size_t u = 0; u < units; ++u) {
        double dn = 0.0, tn = 0.0;
        for (std::size_t j = 0; j < stride; ++j) {
            const double dv = static_cast<double>(d[u * stride + j]);
            const double tv = static_cast<double>(theta[u * stride + j]);
            dn += dv * dv;
            tn += tv * tv;
        }
        dn = std::sqrt(dn);
        tn = std::sqrt(tn);
        const double k = dn > 0 ? tn / dn : 0.0;
        for (std::size_t j = 0; j < stride; ++j)
            d[u * stride + j] = static_cast<T>(static_cast<double>(d[u * stride + j]) * k);
    }
}

// Sum of model energies over a dataset subset (10% capped by default, per
// the landscape protocol) along random directions. Temporarily mutates the
// model's parameters; needs exclusive access.
template <class T>
LandscapeSlice energy_landscape(LogitModel<T>& model, const Dataset<T>& ds, int directions,
                                const std::vector<double>& offsets, bool filter_normalize,
                                std::uint64_t seed, double subset_frac = 0.1,
                                std::size_t subset_cap = 4096) {
    Rng subset_rng(derive_seed(seed, "landscape-subset"));
    std::vector<std::size_t> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    subset_rng.shuffle(idx.begin(), idx.end());
    const std::size_t take = std::min<std::size_t>(
        std::max<std::size_t>(1, static_cast<std::size_t>(
                                     std::ceil(subset_frac * static_cast<double>(ds.size())))),
        std::min(subset_cap, ds.size()));
    idx.resize(take);
    const Tensor<T> subset = ds.rows(idx);

    const auto aggregate = [&]() -> double {
        double total = 0.0;
        for (std::size_t start = 0; start < take; start += kEvalChunk) {
            const std::size_t chunk = std::min(kEvalChunk, take - start);
            std::vector<std::size_t> local(chunk);
            std::iota(local.begin(), local.end(), 0);
            Shape s{chunk};
            const Shape ss = ds.sample_shape();
            s.insert(s.end(), ss.begin(), ss.end());
            Tensor<T> batch(s);
            const std::size_t d = ds.sample_numel();
            for (std::size_t i = 0; i < chunk; ++i)
                for (std::size_t j = 0; j < d; ++j)
                    batch[i * d + j] = subset[(start + i) * d + j];
            const Tensor<T> e = model.energy(batch);
            for (const T v : e.data()) total += static_cast<double>(v);
        }
        return total;
    };
    return landscape_slice(model.params, directions, offsets, filter_normalize, seed, aggregate);
}

// ---- feature-space Fréchet distance and mode coverage ----

template <class T>
std::vector<double> feature_rows(const LogitModel<T>& model, const Tensor<T>& samples) {
    const std::size_t n = samples.size(0);
    std::vector<double> rows;
    rows.reserve(n * model.config.penultimate_dim());
    const std::size_t d = samples.numel() / n;
    for (std::size_t start = 0; start < n; start += kEvalChunk) {
        const std::size_t chunk = std::min(kEvalChunk, n - start);
        Shape s{chunk};
        Shape ss(samples.shape().begin() + 1, samples.shape().end());
        s.insert(s.end(), ss.begin(), ss.end());
        Tensor<T> batch(s);
        for (std::size_t i = 0; i < chunk; ++i)
            for (std::size_t j = 0; j < d; ++j) batch[i * d + j] = samples[(start + i) * d + j];
        const Tensor<T> f = model.penultimate_features(batch);
        for (const T v : f.data()) rows.push_back(static_cast<double>(v));
    }
    return rows;
}

// Fréchet distance between Gaussian fits of penultimate features of the two
// sample sets.
template <class T>
double feature_frechet(const LogitModel<T>& model, const Tensor<T>& real,
                       const Tensor<T>& generated) {
    const std::size_t dim = model.config.penultimate_dim();
    if (real.size(0) < dim + 1 || generated.size(0) < dim + 1)
        throw ValueError("feature_frechet: each set needs at least feature_dim+1 samples");
    const std::vector<double> fr = feature_rows(model, real);
    const std::vector<double> fg = feature_rows(model, generated);
    std::vector<double> mu1, cov1, mu2, cov2;
    mean_and_covariance(fr, real.size(0), dim, mu1, cov1);
    mean_and_covariance(fg, generated.size(0), dim, mu2, cov2);
    return frechet_gaussian(mu1, cov1, mu2, cov2, dim);
}

// Number of centers having at least one sample within `radius`.
template <class T>
std::size_t mode_coverage(const Tensor<T>& samples, const std::vector<Tensor<T>>& centers,
                          double radius) {
    if (radius <= 0) throw ValueError("mode_coverage: radius must be > 0");
    const std::size_t n = samples.size(0);
    const std::size_t d = samples.numel() / n;
    std::size_t covered = 0;
    for (const auto& c : centers) {
        bool hit = false;
        for (std::size_t i = 0; i < n && !hit; ++i) {
            double sq = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
                const double diff =
                    static_cast<double>(samples[i * d + j]) - static_cast<double>(c[j]);
                sq += diff * diff;
            }
            hit = sq <= radius * radius;
        }
        covered += hit ? 1 : 0;
    }
    return covered;
}

}  // namespace jemlab
