#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/graph.hpp"
#include "jemlab/io.hpp"
#include "jemlab/params.hpp"
#include "jemlab/rng.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

enum class Activation { relu, leaky_relu };
enum class NormMode { none, batch_norm };

// Architecture plan. Image models run conv blocks (3x3, stride 1, pad 1, so
// spatial size is preserved) before the dense stack; flat models are MLPs.
struct ModelConfig {
    bool image_input = false;
    std::size_t input_dim = 2;  // flat-vector models
    std::size_t in_c = 1, in_h = 16, in_w = 16;
    std::size_t class_count = 2;
    std::vector<std::size_t> conv_channels;  // empty for MLPs
    std::vector<std::size_t> dense_widths{128, 128};
    NormMode norm = NormMode::none;
    Activation activation = Activation::relu;
    double leaky_slope = 0.01;

    void validate() const {
        if (class_count < 2) throw ValueError("model: class_count must be >= 2");
        for (const auto w : conv_channels)
            if (w == 0) throw ValueError("model: conv channel counts must be positive");
        for (const auto w : dense_widths)
            if (w == 0) throw ValueError("model: dense widths must be positive");
        if (!image_input && !conv_channels.empty())
            throw ValueError("model: conv layers require image input");
        if (image_input && (in_c == 0 || in_h == 0 || in_w == 0))
            throw ValueError("model: image dims must be positive");
        if (!image_input && input_dim == 0)
            throw ValueError("model: input_dim must be positive");
    }

    Shape sample_shape() const {
        return image_input ? Shape{in_c, in_h, in_w} : Shape{input_dim};
    }

    std::size_t flatten_dim() const {
        if (!image_input) return input_dim;
        const std::size_t ch = conv_channels.empty() ? in_c : conv_channels.back();
        return ch * in_h * in_w;
    }

    std::size_t hidden_layer_count() const { return conv_channels.size() + dense_widths.size(); }

    std::size_t penultimate_dim() const {
        return dense_widths.empty() ? flatten_dim() : dense_widths.back();
    }
};

// Classifier whose logits define the energy E(x) = -logsumexp(f(x)) and the
// conditional energy -f(x)[y].
template <class T>
class LogitModel {
  public:
    ModelConfig config;
    ParameterSet<T> params;
    std::vector<BnStats<T>> norm_state;        // one per normalized layer
    std::vector<std::string> norm_layer_names; // aligned with norm_state

    static LogitModel init(const ModelConfig& cfg, Rng& rng) {
        cfg.validate();
        LogitModel m;
        m.config = cfg;
        std::size_t in_ch = cfg.in_c;
        for (std::size_t i = 0; i < cfg.conv_channels.size(); ++i) {
            const std::size_t out_ch = cfg.conv_channels[i];
            const std::string base = "conv" + std::to_string(i);
            m.params.add(base + ".w",
                         kaiming_uniform({out_ch, in_ch, 3, 3}, in_ch * 9, rng));
            m.params.add(base + ".b", Tensor<T>({out_ch}));
            m.add_norm_layer(base, out_ch);
            in_ch = out_ch;
        }
        std::size_t in_dim = cfg.flatten_dim();
        for (std::size_t j = 0; j < cfg.dense_widths.size(); ++j) {
            const std::size_t out_dim = cfg.dense_widths[j];
            const std::string base = "fc" + std::to_string(j);
            m.params.add(base + ".w", kaiming_uniform({in_dim, out_dim}, in_dim, rng));
            m.params.add(base + ".b", Tensor<T>({out_dim}));
            m.add_norm_layer(base, out_dim);
            in_dim = out_dim;
        }
        m.params.add("out.w", kaiming_uniform({in_dim, cfg.class_count}, in_dim, rng));
        m.params.add("out.b", Tensor<T>({cfg.class_count}));
        return m;
    }

    // ---- graph building ----

    // Creates one leaf per parameter, in ParameterSet order.
    std::vector<int> bind(Graph<T>& g) const {
        std::vector<int> ids;
        ids.reserve(params.size());
        for (const auto& e : params) ids.push_back(g.leaf(e.tensor));
        return ids;
    }

    // Eval-mode logits: batch norm reads running statistics only.
    int logits_graph(Graph<T>& g, int x, const std::vector<int>& pids,
                     int* penultimate = nullptr) const {
        return build(g, x, pids, false, nullptr, penultimate);
    }

    // Train-mode logits: batch norm uses batch statistics and updates the
    // running state when the graph is evaluated. Requires exclusive access.
    int logits_graph_train(Graph<T>& g, int x, const std::vector<int>& pids) {
        return build(g, x, pids, true, this, nullptr);
    }

    // Per-sample energy -logsumexp(logits), always eval-mode normalization so
    // sampler chains cannot couple through batch statistics.
    int energy_graph(Graph<T>& g, int x, const std::vector<int>& pids) const {
        return g.neg(g.logsumexp(logits_graph(g, x, pids), 1));
    }

    // Per-sample conditional energy -f(x)[y].
    int conditional_energy_graph(Graph<T>& g, int x, const std::vector<int>& pids,
                                 std::vector<int> classes) const {
        return g.neg(g.gather_class(logits_graph(g, x, pids), std::move(classes)));
    }

    // ---- one-shot tensor ops ----

    Tensor<T> forward_logits(const Tensor<T>& x, bool train = false) {
        Graph<T> g;
        const auto pids = bind(g);
        const int xid = g.leaf(batched(x));
        const int out = train ? logits_graph_train(g, xid, pids) : logits_graph(g, xid, pids);
        g.evaluate();
        return g.value(out);
    }

    Tensor<T> forward_logits(const Tensor<T>& x) const {
        Graph<T> g;
        const auto pids = bind(g);
        const int out = logits_graph(g, g.leaf(batched(x)), pids);
        g.evaluate();
        return g.value(out);
    }

    Tensor<T> energy(const Tensor<T>& x) const {
        Graph<T> g;
        const auto pids = bind(g);
        const int out = energy_graph(g, g.leaf(batched(x)), pids);
        g.evaluate();
        return g.value(out);
    }

    Tensor<T> conditional_energy(const Tensor<T>& x, int y) const {
        const Tensor<T> xb = batched(x);
        return conditional_energy(xb, std::vector<int>(xb.size(0), y));
    }

    Tensor<T> conditional_energy(const Tensor<T>& x, std::vector<int> classes) const {
        Graph<T> g;
        const auto pids = bind(g);
        const int out = conditional_energy_graph(g, g.leaf(batched(x)), pids, std::move(classes));
        g.evaluate();
        return g.value(out);
    }

    Tensor<T> penultimate_features(const Tensor<T>& x) const {
        if (config.hidden_layer_count() < 1)
            throw ValueError("penultimate_features: model has no hidden layer");
        Graph<T> g;
        const auto pids = bind(g);
        int penult = -1;
        (void)logits_graph(g, g.leaf(batched(x)), pids, &penult);
        g.evaluate();
        return g.value(penult);
    }

    // ---- checkpointing ----

    CheckpointFile to_checkpoint() const {
        CheckpointFile f;
        f.dtype = dtype_tag_of<T>();
        append_params(f, params);
        for (std::size_t i = 0; i < norm_state.size(); ++i) {
            f.entries.push_back(
                make_entry("norm." + norm_layer_names[i] + ".mean", norm_state[i].mean));
            f.entries.push_back(
                make_entry("norm." + norm_layer_names[i] + ".var", norm_state[i].var));
        }
        return f;
    }

    void load_from(const CheckpointFile& f) {
        for (auto& e : params) {
            const CheckpointEntry* ce = f.find(e.name);
            if (!ce) throw IoError("checkpoint missing parameter '" + e.name + "'");
            if (ce->shape != e.tensor.shape())
                throw IoError("checkpoint entry '" + e.name + "' has shape " +
                              shape_str(ce->shape) + ", expected " +
                              shape_str(e.tensor.shape()));
            e.tensor = entry_tensor<T>(*ce);
        }
        for (std::size_t i = 0; i < norm_state.size(); ++i) {
            const std::string base = "norm." + norm_layer_names[i];
            const CheckpointEntry* cm = f.find(base + ".mean");
            const CheckpointEntry* cv = f.find(base + ".var");
            if (!cm || !cv) throw IoError("checkpoint missing norm state '" + base + "'");
            norm_state[i].mean = entry_tensor<T>(*cm);
            norm_state[i].var = entry_tensor<T>(*cv);
        }
    }

    std::size_t param_index(const std::string& name) const {
        for (std::size_t i = 0; i < params.size(); ++i)
            if (params[i].name == name) return i;
        throw ValueError("no parameter named '" + name + "'");
    }

  private:
    void add_norm_layer(const std::string& base, std::size_t channels) {
        if (config.norm != NormMode::batch_norm) return;
        params.add(base + ".bn.g", Tensor<T>::ones({channels}));
        params.add(base + ".bn.b", Tensor<T>({channels}));
        norm_state.push_back({Tensor<T>({channels}), Tensor<T>::ones({channels})});
        norm_layer_names.push_back(base);
    }

    static Tensor<T> kaiming_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
        Tensor<T> t(std::move(shape));
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
        return t;
    }

    // Accepts a single sample or a batch; returns a batch view copy.
    Tensor<T> batched(const Tensor<T>& x) const {
        const Shape want = config.sample_shape();
        if (x.shape() == want) {
            Shape b{1};
            b.insert(b.end(), want.begin(), want.end());
            return x.reshaped(b);
        }
        Shape batch = x.shape();
        if (batch.size() != want.size() + 1 ||
            !std::equal(want.begin(), want.end(), batch.begin() + 1))
            throw ShapeError("model input " + shape_str(x.shape()) + " does not match " +
                             shape_str(want));
        return x;
    }

    int build(Graph<T>& g, int x, const std::vector<int>& pids, bool train,
              LogitModel* mutable_self, int* penultimate) const {
        if (pids.size() != params.size())
            throw ValueError("model: bound parameter count mismatch");
        const auto pid = [&](const std::string& name) { return pids[param_index(name)]; };
        int h = x;
        std::size_t norm_idx = 0;
        const auto apply_norm = [&](int node, const std::string& base) {
            if (config.norm != NormMode::batch_norm) return node;
            typename Graph<T>::BnAttrs attrs;
            attrs.train = train;
            attrs.read = &norm_state[norm_idx];
            attrs.write = mutable_self ? &mutable_self->norm_state[norm_idx] : nullptr;
            ++norm_idx;
            return g.batch_norm(node, pid(base + ".bn.g"), pid(base + ".bn.b"), attrs);
        };
        const auto activate = [&](int node) {
            return config.activation == Activation::relu ? g.relu(node)
                                                         : g.leaky_relu(node, config.leaky_slope);
        };

        for (std::size_t i = 0; i < config.conv_channels.size(); ++i) {
            const std::string base = "conv" + std::to_string(i);
            h = g.conv2d(h, pid(base + ".w"), pid(base + ".b"), 1);
            h = apply_norm(h, base);
            h = activate(h);
        }
        if (config.image_input)
            h = g.reshape(h, {g.shape_of(h)[0], config.flatten_dim()});
        for (std::size_t j = 0; j < config.dense_widths.size(); ++j) {
            const std::string base = "fc" + std::to_string(j);
            h = g.add_bias(g.matmul(h, pid(base + ".w")), pid(base + ".b"));
            h = apply_norm(h, base);
            h = activate(h);
        }
        if (penultimate) *penultimate = h;
        return g.add_bias(g.matmul(h, pid("out.w")), pid("out.b"));
    }
};

}  // namespace jemlab
