#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/io.hpp"
#include "jemlab/rng.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

template <class T>
struct Dataset {
    Tensor<T> samples;  // [N,d] or [N,C,H,W], values inside [clamp_lo, clamp_hi]
    std::vector<int> labels;
    std::size_t class_count = 2;
    bool image = false;
    std::string kind;    // e.g. "toy:gaussians8", "idx", "csv2d"
    std::string split;   // "train" / "test"
    double clamp_lo = -1.0, clamp_hi = 1.0;

    std::size_t size() const { return samples.size(0); }
    std::size_t sample_numel() const { return samples.numel() / size(); }
    Shape sample_shape() const {
        return Shape(samples.shape().begin() + 1, samples.shape().end());
    }

    Tensor<T> row(std::size_t i) const {
        const std::size_t d = sample_numel();
        Tensor<T> out(sample_shape());
        for (std::size_t j = 0; j < d; ++j) out[j] = samples[i * d + j];
        return out;
    }

    Tensor<T> rows(const std::vector<std::size_t>& idx) const {
        const std::size_t d = sample_numel();
        Shape s{idx.size()};
        const Shape ss = sample_shape();
        s.insert(s.end(), ss.begin(), ss.end());
        Tensor<T> out(s);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = samples[idx[i] * d + j];
        return out;
    }
};

// ---- synthetic 2D toys ----

// Centers of the gaussians8 toy: 8 points on a circle, labels alternating
// over 2 classes. Exposed so coverage checks can reuse them.
template <class T>
std::vector<Tensor<T>> gaussians8_centers(double radius = 0.7) {
    std::vector<Tensor<T>> centers;
    for (int k = 0; k < 8; ++k) {
        const double a = 2.0 * M_PI * k / 8.0;
        centers.push_back(Tensor<T>({2}, {static_cast<T>(radius * std::cos(a)),
                                          static_cast<T>(radius * std::sin(a))}));
    }
    return centers;
}

inline double gaussians8_center_spacing(double radius = 0.7) {
    return 2.0 * radius * std::sin(M_PI / 8.0);
}

template <class T>
Dataset<T> synth_toy(const std::string& name, std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) throw ValueError("synth_toy: n must be >= class count");
    Rng rng(seed);
    Tensor<T> samples({n, 2});
    std::vector<int> labels(n);

    if (name == "gaussians8") {
        const auto centers = gaussians8_centers<T>();
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t k = i % 8;
            labels[i] = static_cast<int>(k % 2);
            samples[i * 2 + 0] = centers[k][0] + static_cast<T>(noise * rng.normal());
            samples[i * 2 + 1] = centers[k][1] + static_cast<T>(noise * rng.normal());
        }
    } else if (name == "rings") {
        for (std::size_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(i % 2);
            labels[i] = cls;
            const double r = (cls == 0 ? 0.35 : 0.75) + noise * rng.normal();
            const double a = rng.uniform(0.0, 2.0 * M_PI);
            samples[i * 2 + 0] = static_cast<T>(r * std::cos(a));
            samples[i * 2 + 1] = static_cast<T>(r * std::sin(a));
        }
    } else if (name == "moons") {
        for (std::size_t i = 0; i < n; ++i) {
            const int cls = static_cast<int>(i % 2);
            labels[i] = cls;
            const double t = rng.uniform(0.0, M_PI);
            double x = cls == 0 ? std::cos(t) : 1.0 - std::cos(t);
            double y = cls == 0 ? std::sin(t) : 0.5 - std::sin(t);
            x += noise * rng.normal();
            y += noise * rng.normal();
            // map the canonical [-1,2] x [-1,1.5] span into ~[-0.9, 0.9]
            samples[i * 2 + 0] = static_cast<T>((x - 0.5) * 0.6);
            samples[i * 2 + 1] = static_cast<T>((y - 0.25) * 0.8);
        }
    } else {
        throw ValueError("synth_toy: unknown dataset '" + name + "'");
    }

    Dataset<T> ds;
    ds.labels = std::move(labels);
    ds.class_count = 2;
    ds.image = false;
    ds.kind = "toy:" + name;
    ds.split = "train";
    // clamp range = data bounding box +- 10% of its span
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const T v : samples.data()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double margin = 0.1 * (hi - lo);
    ds.clamp_lo = lo - margin;
    ds.clamp_hi = hi + margin;
    ds.samples = std::move(samples);
    return ds;
}

// ---- csv2d: header "x1,x2,label" ----

template <class T>
Dataset<T> load_csv2d(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw IoError("'" + path + "': empty file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line != "x1,x2,label")
        throw IoError("'" + path + "': malformed header (want 'x1,x2,label')");
    std::vector<T> values;
    std::vector<int> labels;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        double x1, x2;
        long y;
        char extra;
        const int got = std::sscanf(line.c_str(), "%lf,%lf,%ld%c", &x1, &x2, &y, &extra);
        if (got != 3)
            throw IoError("'" + path + "': malformed row at line " + std::to_string(line_no));
        if (y < 0) throw IoError("'" + path + "': negative label at line " + std::to_string(line_no));
        values.push_back(static_cast<T>(x1));
        values.push_back(static_cast<T>(x2));
        labels.push_back(static_cast<int>(y));
    }
    if (labels.empty()) throw IoError("'" + path + "': no data rows");

    Dataset<T> ds;
    ds.samples = Tensor<T>({labels.size(), 2}, std::move(values));
    ds.class_count = static_cast<std::size_t>(*std::max_element(labels.begin(), labels.end())) + 1;
    ds.labels = std::move(labels);
    ds.image = false;
    ds.kind = "csv2d";
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (const T v : ds.samples.data()) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double margin = 0.1 * (hi - lo);
    ds.clamp_lo = lo - margin;
    ds.clamp_hi = hi + margin;
    return ds;
}

template <class T>
void save_csv2d(const std::string& path, const Dataset<T>& ds) {
    if (ds.image || ds.sample_numel() != 2) throw ValueError("save_csv2d: dataset is not 2D");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << "x1,x2,label\n";
    char buf[96];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        // max_digits10 keeps the round-trip exact
        std::snprintf(buf, sizeof buf, "%.*g,%.*g,%d\n",
                      std::numeric_limits<T>::max_digits10,
                      static_cast<double>(ds.samples[i * 2 + 0]),
                      std::numeric_limits<T>::max_digits10,
                      static_cast<double>(ds.samples[i * 2 + 1]), ds.labels[i]);
        os << buf;
    }
    if (!os) throw IoError("write failed for '" + path + "'");
}

// ---- IDX image/label pairs, pixels rescaled onto [-1, 1] ----

template <class T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path) {
    const IdxData img = read_idx(images_path);
    const IdxData lbl = read_idx(labels_path);
    if (img.dims.size() != 3)
        throw IoError("'" + images_path + "': expected 3-D IDX image file");
    if (lbl.dims.size() != 1)
        throw IoError("'" + labels_path + "': expected 1-D IDX label file");
    if (img.dims[0] != lbl.dims[0])
        throw IoError("IDX image/label sample count mismatch (" + std::to_string(img.dims[0]) +
                      " vs " + std::to_string(lbl.dims[0]) + ")");
    const std::size_t n = img.dims[0], h = img.dims[1], w = img.dims[2];
    if (n == 0) throw IoError("'" + images_path + "': empty IDX file");

    Dataset<T> ds;
    std::vector<T> values(n * h * w);
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double p = static_cast<double>(img.bytes[i]);
        values[i] = static_cast<T>((2.0 * p - 255.0) / 255.0);
    }
    ds.samples = Tensor<T>({n, 1, h, w}, std::move(values));
    ds.labels.resize(n);
    int max_label = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ds.labels[i] = static_cast<int>(lbl.bytes[i]);
        max_label = std::max(max_label, ds.labels[i]);
    }
    ds.class_count = static_cast<std::size_t>(max_label) + 1;
    ds.image = true;
    ds.kind = "idx";
    ds.clamp_lo = -1.0;
    ds.clamp_hi = 1.0;
    return ds;
}

// ---- augmentation ----

template <class T>
Tensor<T> hflip_image(const Tensor<T>& x) {
    if (x.rank() != 3) throw ValueError("hflip: image tensor [C,H,W] required");
    const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
    Tensor<T> out(x.shape());
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xi = 0; xi < w; ++xi)
                out[(ci * h + y) * w + xi] = x[(ci * h + y) * w + (w - 1 - xi)];
    return out;
}

// Pads by `pad` with `fill`, then crops the original size at offset (oy, ox),
// offsets in [0, 2*pad].
template <class T>
Tensor<T> pad_crop_image(const Tensor<T>& x, std::size_t pad, T fill, std::size_t oy,
                         std::size_t ox) {
    if (x.rank() != 3) throw ValueError("pad_crop: image tensor [C,H,W] required");
    const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
    if (pad >= h || pad >= w) throw ValueError("pad_crop: pad width must be < image size");
    if (oy > 2 * pad || ox > 2 * pad) throw ValueError("pad_crop: offset out of range");
    Tensor<T> out(x.shape());
    for (std::size_t ci = 0; ci < c; ++ci)
        for (std::size_t y = 0; y < h; ++y)
            for (std::size_t xi = 0; xi < w; ++xi) {
                const long sy = static_cast<long>(y + oy) - static_cast<long>(pad);
                const long sx = static_cast<long>(xi + ox) - static_cast<long>(pad);
                const bool inside = sy >= 0 && sy < static_cast<long>(h) && sx >= 0 &&
                                    sx < static_cast<long>(w);
                out[(ci * h + y) * w + xi] =
                    inside ? x[(ci * h + static_cast<std::size_t>(sy)) * w +
                               static_cast<std::size_t>(sx)]
                           : fill;
            }
    return out;
}

// Flip (prob 0.5) then pad-random-crop, image data only; identity for 2D
// toys. Fill value defaults to the clamp lower bound.
struct AugmentationPipeline {
    bool hflip = false;
    std::size_t pad = 0;
    double fill = -1.0;

    bool identity() const { return !hflip && pad == 0; }

    template <class T>
    Tensor<T> apply(const Tensor<T>& sample, Rng& rng) const {
        if (identity() || sample.rank() != 3) return sample;
        Tensor<T> out = sample;
        if (hflip && rng.uniform() < 0.5) out = hflip_image(out);
        if (pad > 0) {
            const std::size_t oy = rng.below(2 * pad + 1);
            const std::size_t ox = rng.below(2 * pad + 1);
            out = pad_crop_image(out, pad, static_cast<T>(fill), oy, ox);
        }
        return out;
    }
};

// ---- dual loader: augmented batches for classification, raw for the
// generative term, independently shuffled per epoch ----

template <class T>
struct DualBatch {
    Tensor<T> clf_x;
    std::vector<int> clf_y;
    Tensor<T> gen_x;  // rows byte-equal to dataset rows unless aug_gen is set
};

template <class T>
class DualLoader {
  public:
    DualLoader(const Dataset<T>& ds, AugmentationPipeline aug, std::size_t batch, Rng rng_clf,
               Rng rng_gen, bool aug_gen = false)
        : ds_(&ds), aug_(aug), batch_(batch), rng_clf_(rng_clf), rng_gen_(rng_gen),
          aug_gen_(aug_gen) {
        if (batch_ == 0 || batch_ > ds.size())
            throw ValueError("dual_loader: batch must be in [1, dataset size]");
        order_clf_.resize(ds.size());
        order_gen_.resize(ds.size());
        start_epoch();
    }

    std::size_t batches_per_epoch() const {
        return (ds_->size() + batch_ - 1) / batch_;
    }

    void start_epoch() {
        for (std::size_t i = 0; i < order_clf_.size(); ++i) order_clf_[i] = order_gen_[i] = i;
        rng_clf_.shuffle(order_clf_.begin(), order_clf_.end());
        rng_gen_.shuffle(order_gen_.begin(), order_gen_.end());
        pos_ = 0;
    }

    // nullopt signals the epoch boundary.
    std::optional<DualBatch<T>> next() {
        if (pos_ >= ds_->size()) return std::nullopt;
        const std::size_t take = std::min(batch_, ds_->size() - pos_);
        std::vector<std::size_t> ci(order_clf_.begin() + pos_, order_clf_.begin() + pos_ + take);
        std::vector<std::size_t> gi(order_gen_.begin() + pos_, order_gen_.begin() + pos_ + take);
        pos_ += take;

        DualBatch<T> b;
        b.clf_y.resize(take);
        for (std::size_t i = 0; i < take; ++i) b.clf_y[i] = ds_->labels[ci[i]];
        b.clf_x = gather_augmented(ci, rng_clf_, true);
        b.gen_x = aug_gen_ ? gather_augmented(gi, rng_gen_, true) : ds_->rows(gi);
        return b;
    }

  private:
    Tensor<T> gather_augmented(const std::vector<std::size_t>& idx, Rng& rng, bool augment) {
        Shape s{idx.size()};
        const Shape ss = ds_->sample_shape();
        s.insert(s.end(), ss.begin(), ss.end());
        Tensor<T> out(s);
        const std::size_t d = ds_->sample_numel();
        for (std::size_t i = 0; i < idx.size(); ++i) {
            Tensor<T> sample = ds_->row(idx[i]);
            if (augment) sample = aug_.apply(sample, rng);
            for (std::size_t j = 0; j < d; ++j) out[i * d + j] = sample[j];
        }
        return out;
    }

    const Dataset<T>* ds_;
    AugmentationPipeline aug_;
    std::size_t batch_;
    Rng rng_clf_, rng_gen_;
    bool aug_gen_;
    std::vector<std::size_t> order_clf_, order_gen_;
    std::size_t pos_ = 0;
};

inline std::vector<std::string> split_string(const std::string& s, char sep) {
    std::vector<std::string> parts;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, sep)) parts.push_back(item);
    return parts;
}

struct ToySpec {
    std::string name;
    std::size_t n = 4096;
    double noise = 0.1;
    std::uint64_t seed = 7;
};

// "toy:gaussians8:n=4096:noise=0.1:seed=7"
inline ToySpec parse_toy_spec(const std::string& spec) {
    const auto parts = split_string(spec, ':');
    if (parts.size() < 2 || parts[0] != "toy")
        throw ValueError("toy spec needs a name, e.g. toy:gaussians8");
    ToySpec t;
    t.name = parts[1];
    for (std::size_t i = 2; i < parts.size(); ++i) {
        const auto kv = split_string(parts[i], '=');
        if (kv.size() != 2) throw ValueError("bad toy option '" + parts[i] + "'");
        if (kv[0] == "n")
            t.n = static_cast<std::size_t>(std::stoull(kv[1]));
        else if (kv[0] == "noise")
            t.noise = std::stod(kv[1]);
        else if (kv[0] == "seed")
            t.seed = std::stoull(kv[1]);
        else
            throw ValueError("unknown toy option '" + kv[0] + "'");
    }
    return t;
}

// Parses "toy:gaussians8:n=4096:noise=0.1:seed=7", "idx:imgs:lbls" or
// "csv:path" dataset specifiers.
template <class T>
Dataset<T> load_dataset_spec(const std::string& spec) {
    const auto parts = split_string(spec, ':');
    if (parts.empty()) throw ValueError("empty dataset spec");
    if (parts[0] == "toy") {
        const ToySpec t = parse_toy_spec(spec);
        return synth_toy<T>(t.name, t.n, t.noise, t.seed);
    }
    if (parts[0] == "idx") {
        if (parts.size() != 3) throw ValueError("idx spec: idx:images_path:labels_path");
        return load_idx<T>(parts[1], parts[2]);
    }
    if (parts[0] == "csv") {
        if (parts.size() != 2) throw ValueError("csv spec: csv:path");
        return load_csv2d<T>(parts[1]);
    }
    throw ValueError("unknown dataset spec '" + spec + "'");
}

}  // namespace jemlab
