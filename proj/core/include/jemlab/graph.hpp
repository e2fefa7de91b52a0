#pragma once

#include <cmath>
#include <cstddef>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "jemlab/errors.hpp"
#include "jemlab/tensor.hpp"

namespace jemlab {

// Running batch-norm statistics, owned by the model; graph nodes reference
// them. Train-mode evaluation writes through `write`.
template <class T>
struct BnStats {
    Tensor<T> mean;
    Tensor<T> var;
};

enum class Op {
    input,
    leaf,
    add,
    add_bias,
    sub,
    neg,
    mul,
    scale,
    matmul,
    conv2d,
    relu,
    leaky_relu,
    batch_norm,
    reshape,
    sum,
    mean,
    logsumexp,
    softmax_xent,
    sqnorm,
    gather_class,
};

// Dynamically recorded computation graph with reverse-mode differentiation.
// Shapes are validated when ops are recorded; values are computed by
// evaluate(). Creation order is a topological order by construction.
//
// Graphs are cheap and rebuilt per training step; one graph instance is
// single-threaded, distinct graphs may run on distinct threads.
template <class T>
class Graph {
  public:
    using NodeId = int;

    struct BnAttrs {
        double eps = 1e-5;
        double momentum = 0.1;
        bool train = false;
        const BnStats<T>* read = nullptr;  // eval mode source
        BnStats<T>* write = nullptr;       // train mode running-stat sink
    };

    // ---- graph construction ----

    NodeId input(std::string name, Shape shape) {
        Node n;
        n.op = Op::input;
        n.name = std::move(name);
        n.shape = std::move(shape);
        return push(std::move(n));
    }

    NodeId leaf(Tensor<T> value) {
        Node n;
        n.op = Op::leaf;
        n.shape = value.shape();
        n.value = std::move(value);
        n.has_value = true;
        return push(std::move(n));
    }

    NodeId add(NodeId a, NodeId b) { return binary(Op::add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return binary(Op::sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return binary(Op::mul, a, b); }

    NodeId neg(NodeId a) {
        Node n;
        n.op = Op::neg;
        n.a = a;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    NodeId scale(NodeId a, double c) {
        Node n;
        n.op = Op::scale;
        n.a = a;
        n.scalar_attr = c;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    // x: [N,F], bias: [F]
    NodeId add_bias(NodeId x, NodeId bias) {
        const auto& xs = at(x).shape;
        const auto& bs = at(bias).shape;
        if (xs.size() != 2 || bs.size() != 1 || xs[1] != bs[0])
            throw ShapeError("add_bias: " + shape_str(xs) + " + " + shape_str(bs));
        Node n;
        n.op = Op::add_bias;
        n.a = x;
        n.b = bias;
        n.shape = xs;
        return push(std::move(n));
    }

    NodeId matmul(NodeId a, NodeId b) {
        const auto& as = at(a).shape;
        const auto& bs = at(b).shape;
        if (as.size() != 2 || bs.size() != 2 || as[1] != bs[0])
            throw ShapeError("matmul: " + shape_str(as) + " @ " + shape_str(bs));
        Node n;
        n.op = Op::matmul;
        n.a = a;
        n.b = b;
        n.shape = {as[0], bs[1]};
        return push(std::move(n));
    }

    // x: [N,C,H,W], w: [O,C,kh,kw], bias: [O]; stride 1, zero padding `pad`.
    NodeId conv2d(NodeId x, NodeId w, NodeId bias, std::size_t pad) {
        const auto& xs = at(x).shape;
        const auto& ws = at(w).shape;
        const auto& bs = at(bias).shape;
        if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
            throw ShapeError("conv2d: input " + shape_str(xs) + ", kernel " + shape_str(ws));
        if (bs.size() != 1 || bs[0] != ws[0])
            throw ShapeError("conv2d: bias " + shape_str(bs) + " for kernel " + shape_str(ws));
        if (xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3])
            throw ShapeError("conv2d: kernel larger than padded input");
        Node n;
        n.op = Op::conv2d;
        n.a = x;
        n.b = w;
        n.c = bias;
        n.pad = pad;
        n.shape = {xs[0], ws[0], xs[2] + 2 * pad - ws[2] + 1, xs[3] + 2 * pad - ws[3] + 1};
        return push(std::move(n));
    }

    NodeId relu(NodeId a) {
        Node n;
        n.op = Op::relu;
        n.a = a;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    NodeId leaky_relu(NodeId a, double slope) {
        Node n;
        n.op = Op::leaky_relu;
        n.a = a;
        n.scalar_attr = slope;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    // x: [N,F] (per-feature stats) or [N,C,H,W] (per-channel stats);
    // gamma/beta: [F] or [C].
    NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, BnAttrs attrs) {
        const auto& xs = at(x).shape;
        if (xs.size() != 2 && xs.size() != 4)
            throw ShapeError("batch_norm: rank-2 or rank-4 input required, got " + shape_str(xs));
        const std::size_t channels = xs[1];
        for (const NodeId p : {gamma, beta}) {
            const auto& ps = at(p).shape;
            if (ps.size() != 1 || ps[0] != channels)
                throw ShapeError("batch_norm: gamma/beta must be [" + std::to_string(channels) + "]");
        }
        if (!attrs.read && !attrs.train)
            throw ValueError("batch_norm: eval mode requires running statistics");
        Node n;
        n.op = Op::batch_norm;
        n.a = x;
        n.b = gamma;
        n.c = beta;
        n.bn = attrs;
        n.shape = xs;
        return push(std::move(n));
    }

    NodeId reshape(NodeId a, Shape target) {
        if (shape_numel(target) != shape_numel(at(a).shape))
            throw ShapeError("reshape: " + shape_str(at(a).shape) + " -> " + shape_str(target));
        Node n;
        n.op = Op::reshape;
        n.a = a;
        n.shape = std::move(target);
        return push(std::move(n));
    }

    NodeId sum(NodeId a) { return reduction(Op::sum, a); }
    NodeId mean(NodeId a) { return reduction(Op::mean, a); }

    NodeId logsumexp(NodeId a, std::size_t axis) {
        const auto& as = at(a).shape;
        if (axis >= as.size()) throw ShapeError("logsumexp: axis out of range");
        if (as[axis] == 0) throw ShapeError("logsumexp: empty axis extent");
        Node n;
        n.op = Op::logsumexp;
        n.a = a;
        n.axis = axis;
        Shape out;
        for (std::size_t i = 0; i < as.size(); ++i)
            if (i != axis) out.push_back(as[i]);
        n.shape = std::move(out);
        return push(std::move(n));
    }

    // Mean over the batch of -log softmax(logits)[label]; fused stable form.
    NodeId softmax_xent(NodeId logits, std::vector<int> labels) {
        const auto& ls = at(logits).shape;
        if (ls.size() != 2) throw ShapeError("softmax_xent: logits must be [N,C]");
        if (labels.size() != ls[0]) throw ShapeError("softmax_xent: one label per row required");
        for (const int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= ls[1])
                throw ValueError("softmax_xent: label out of range");
        Node n;
        n.op = Op::softmax_xent;
        n.a = logits;
        n.labels = std::move(labels);
        n.shape = {};
        return push(std::move(n));
    }

    NodeId sqnorm(NodeId a) {
        Node n;
        n.op = Op::sqnorm;
        n.a = a;
        n.shape = {};
        return push(std::move(n));
    }

    // out[i] = logits[i, classes[i]]
    NodeId gather_class(NodeId logits, std::vector<int> classes) {
        const auto& ls = at(logits).shape;
        if (ls.size() != 2) throw ShapeError("gather_class: logits must be [N,C]");
        if (classes.size() != ls[0]) throw ShapeError("gather_class: one class per row required");
        for (const int y : classes)
            if (y < 0 || static_cast<std::size_t>(y) >= ls[1])
                throw ValueError("gather_class: class out of range");
        Node n;
        n.op = Op::gather_class;
        n.a = logits;
        n.labels = std::move(classes);
        n.shape = {ls[0]};
        return push(std::move(n));
    }

    void mark_output(std::string name, NodeId id) {
        at(id);
        outputs_[std::move(name)] = id;
    }
    const std::map<std::string, NodeId>& outputs() const { return outputs_; }

    // ---- evaluation ----

    // Computes every node in creation (= topological) order. `strict` throws
    // on the first non-finite result.
    void evaluate(const std::map<std::string, Tensor<T>>& bindings = {}, bool strict = false) {
        for (auto& n : nodes_) {
            switch (n.op) {
                case Op::leaf:
                    break;
                case Op::input: {
                    const auto it = bindings.find(n.name);
                    if (it == bindings.end())
                        throw ValueError("evaluate: unbound input '" + n.name + "'");
                    if (it->second.shape() != n.shape)
                        throw ShapeError("evaluate: input '" + n.name + "' expects " +
                                         shape_str(n.shape) + ", got " +
                                         shape_str(it->second.shape()));
                    n.value = it->second;
                    break;
                }
                default:
                    forward(n);
                    break;
            }
            n.has_value = true;
            if (strict && !n.value.all_finite())
                throw ValueError("evaluate: non-finite result at node " +
                                 std::to_string(&n - nodes_.data()));
        }
        evaluated_ = true;
    }

    // Spec-shaped convenience: evaluate and return the marked outputs.
    std::map<std::string, Tensor<T>> evaluate_outputs(
        const std::map<std::string, Tensor<T>>& bindings = {}, bool strict = false) {
        evaluate(bindings, strict);
        std::map<std::string, Tensor<T>> out;
        for (const auto& [name, id] : outputs_) out[name] = value(id);
        return out;
    }

    bool evaluated() const { return evaluated_; }

    const Tensor<T>& value(NodeId id) const {
        const Node& n = at(id);
        if (!n.has_value) throw ValueError("value: graph not yet evaluated");
        return n.value;
    }

    const Shape& shape_of(NodeId id) const { return at(id).shape; }
    std::size_t node_count() const { return nodes_.size(); }

    // ---- reverse-mode differentiation ----

    // d(scalar)/d(node) for each node in `wrt`, same order. Requested nodes
    // that do not participate in the scalar get zero gradients.
    std::vector<Tensor<T>> gradient(NodeId scalar, std::span<const NodeId> wrt) {
        if (!evaluated_) throw ValueError("gradient: graph not yet evaluated");
        if (!at(scalar).shape.empty())
            throw ShapeError("gradient: output must be scalar, got " +
                             shape_str(at(scalar).shape));

        // A node needs a gradient iff some wrt leaf is reachable below it.
        std::vector<char> needed(nodes_.size(), 0);
        for (const NodeId w : wrt) needed[static_cast<std::size_t>(at_index(w))] = 1;
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const Node& n = nodes_[i];
            for (const int in : {n.a, n.b, n.c})
                if (in >= 0 && needed[static_cast<std::size_t>(in)]) needed[i] = 1;
        }

        grads_.assign(nodes_.size(), Tensor<T>());
        has_grad_.assign(nodes_.size(), 0);
        if (needed[static_cast<std::size_t>(scalar)]) {
            grads_[static_cast<std::size_t>(scalar)] = Tensor<T>::scalar(T{1});
            has_grad_[static_cast<std::size_t>(scalar)] = 1;
            for (int i = scalar; i >= 0; --i) {
                if (has_grad_[static_cast<std::size_t>(i)]) backward(nodes_[i], i, needed);
            }
        }

        std::vector<Tensor<T>> out;
        out.reserve(wrt.size());
        for (const NodeId w : wrt) {
            if (has_grad_[static_cast<std::size_t>(w)])
                out.push_back(std::move(grads_[static_cast<std::size_t>(w)]));
            else
                out.push_back(Tensor<T>(at(w).shape));
        }
        grads_.clear();
        has_grad_.clear();
        return out;
    }

    Tensor<T> gradient(NodeId scalar, NodeId wrt) {
        const NodeId ids[1] = {wrt};
        return std::move(gradient(scalar, std::span<const NodeId>(ids)).front());
    }

  private:
    struct Node {
        Op op = Op::leaf;
        int a = -1, b = -1, c = -1;
        Shape shape;
        Tensor<T> value;
        bool has_value = false;
        std::string name;        // input
        double scalar_attr = 0;  // scale factor / leaky slope
        std::size_t axis = 0;    // logsumexp
        std::size_t pad = 0;     // conv2d
        std::vector<int> labels; // softmax_xent / gather_class
        BnAttrs bn;              // batch_norm
        Tensor<T> saved_mean, saved_var;  // batch stats kept for backward
    };

    NodeId push(Node n) {
        evaluated_ = false;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    int at_index(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size())
            throw ValueError("invalid node id " + std::to_string(id));
        return id;
    }
    const Node& at(NodeId id) const { return nodes_[static_cast<std::size_t>(at_index(id))]; }
    Node& at(NodeId id) { return nodes_[static_cast<std::size_t>(at_index(id))]; }

    NodeId binary(Op op, NodeId a, NodeId b) {
        if (at(a).shape != at(b).shape)
            throw ShapeError("elementwise op: shape mismatch " + shape_str(at(a).shape) +
                             " vs " + shape_str(at(b).shape));
        Node n;
        n.op = op;
        n.a = a;
        n.b = b;
        n.shape = at(a).shape;
        return push(std::move(n));
    }

    NodeId reduction(Op op, NodeId a) {
        Node n;
        n.op = op;
        n.a = a;
        n.shape = {};
        return push(std::move(n));
    }

    // ---- forward kernels ----

    void forward(Node& n) {
        const Tensor<T>& A = n.a >= 0 ? nodes_[n.a].value : n.value;
        switch (n.op) {
            case Op::add: {
                Tensor<T> out = A;
                axpy_inplace(out, 1.0, nodes_[n.b].value);
                n.value = std::move(out);
                break;
            }
            case Op::sub: {
                Tensor<T> out = A;
                axpy_inplace(out, -1.0, nodes_[n.b].value);
                n.value = std::move(out);
                break;
            }
            case Op::neg: {
                Tensor<T> out = A;
                scale_inplace(out, -1.0);
                n.value = std::move(out);
                break;
            }
            case Op::mul: {
                Tensor<T> out = A;
                auto od = out.data();
                auto bd = nodes_[n.b].value.data();
                for (std::size_t i = 0; i < od.size(); ++i) od[i] *= bd[i];
                n.value = std::move(out);
                break;
            }
            case Op::scale: {
                Tensor<T> out = A;
                scale_inplace(out, n.scalar_attr);
                n.value = std::move(out);
                break;
            }
            case Op::add_bias: {
                Tensor<T> out = A;
                const auto& b = nodes_[n.b].value;
                const std::size_t rows = out.size(0), cols = out.size(1);
                auto od = out.data();
                auto bd = b.data();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c) od[r * cols + c] += bd[c];
                n.value = std::move(out);
                break;
            }
            case Op::matmul:
                n.value = matmul_fwd(A, nodes_[n.b].value);
                break;
            case Op::conv2d:
                n.value = conv2d_fwd(A, nodes_[n.b].value, nodes_[n.c].value, n.pad);
                break;
            case Op::relu: {
                Tensor<T> out = A;
                for (auto& v : out.data()) v = v > T{0} ? v : T{0};
                n.value = std::move(out);
                break;
            }
            case Op::leaky_relu: {
                Tensor<T> out = A;
                const T s = static_cast<T>(n.scalar_attr);
                for (auto& v : out.data()) v = v > T{0} ? v : s * v;
                n.value = std::move(out);
                break;
            }
            case Op::batch_norm:
                n.value = batch_norm_fwd(n, A, nodes_[n.b].value, nodes_[n.c].value);
                break;
            case Op::reshape:
                n.value = A.reshaped(n.shape);
                break;
            case Op::sum:
            case Op::mean: {
                double s = 0.0;
                for (const T v : A.data()) s += static_cast<double>(v);
                if (n.op == Op::mean) s /= static_cast<double>(A.numel());
                n.value = Tensor<T>::scalar(static_cast<T>(s));
                break;
            }
            case Op::logsumexp:
                n.value = logsumexp_fwd(A, n.axis, n.shape);
                break;
            case Op::softmax_xent: {
                const std::size_t rows = A.size(0), cols = A.size(1);
                auto ad = A.data();
                double total = 0.0;
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* row = ad.data() + r * cols;
                    T m = row[0];
                    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c)
                        s += std::exp(static_cast<double>(row[c] - m));
                    const double lse = static_cast<double>(m) + std::log(s);
                    total += lse - static_cast<double>(row[n.labels[r]]);
                }
                n.value = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(rows)));
                break;
            }
            case Op::sqnorm: {
                double s = 0.0;
                for (const T v : A.data())
                    s += static_cast<double>(v) * static_cast<double>(v);
                n.value = Tensor<T>::scalar(static_cast<T>(s));
                break;
            }
            case Op::gather_class: {
                const std::size_t rows = A.size(0), cols = A.size(1);
                Tensor<T> out({rows});
                for (std::size_t r = 0; r < rows; ++r)
                    out[r] = A[r * cols + static_cast<std::size_t>(n.labels[r])];
                n.value = std::move(out);
                break;
            }
            case Op::input:
            case Op::leaf:
                break;
        }
    }

    static Tensor<T> matmul_fwd(const Tensor<T>& A, const Tensor<T>& B) {
        const std::size_t m = A.size(0), k = A.size(1), n = B.size(1);
        Tensor<T> C({m, n});
        auto ad = A.data();
        auto bd = B.data();
        auto cd = C.data();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const T a = ad[i * k + p];
                const T* brow = bd.data() + p * n;
                T* crow = cd.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        return C;
    }

    static Tensor<T> conv2d_fwd(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                                std::size_t pad) {
        const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
        const std::size_t O = w.size(0), kh = w.size(2), kw = w.size(3);
        const std::size_t oh = H + 2 * pad - kh + 1, ow = W + 2 * pad - kw + 1;
        Tensor<T> out({N, O, oh, ow});
        auto xd = x.data();
        auto wd = w.data();
        auto bd = bias.data();
        auto od = out.data();
        const long p = static_cast<long>(pad);
        for (std::size_t nn = 0; nn < N; ++nn)
            for (std::size_t o = 0; o < O; ++o) {
                T* oplane = od.data() + (nn * O + o) * oh * ow;
                for (std::size_t i = 0; i < oh * ow; ++i) oplane[i] = bd[o];
                for (std::size_t c = 0; c < C; ++c) {
                    const T* xplane = xd.data() + (nn * C + c) * H * W;
                    const T* wplane = wd.data() + (o * C + c) * kh * kw;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wv = wplane[ky * kw + kx];
                            for (std::size_t y = 0; y < oh; ++y) {
                                const long iy = static_cast<long>(y + ky) - p;
                                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                const T* xrow = xplane + static_cast<std::size_t>(iy) * W;
                                T* orow = oplane + y * ow;
                                for (std::size_t xo = 0; xo < ow; ++xo) {
                                    const long ix = static_cast<long>(xo + kx) - p;
                                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                    orow[xo] += wv * xrow[static_cast<std::size_t>(ix)];
                                }
                            }
                        }
                }
            }
        return out;
    }

    Tensor<T> batch_norm_fwd(Node& n, const Tensor<T>& x, const Tensor<T>& gamma,
                             const Tensor<T>& beta) {
        const std::size_t channels = x.size(1);
        Tensor<T> mean({channels}), var({channels});
        if (n.bn.train) {
            channel_stats(x, mean, var);
            if (n.bn.write) {
                const double m = n.bn.momentum;
                for (std::size_t c = 0; c < channels; ++c) {
                    n.bn.write->mean[c] =
                        static_cast<T>((1.0 - m) * n.bn.write->mean[c] + m * mean[c]);
                    n.bn.write->var[c] =
                        static_cast<T>((1.0 - m) * n.bn.write->var[c] + m * var[c]);
                }
            }
        } else {
            mean = n.bn.read->mean;
            var = n.bn.read->var;
        }
        n.saved_mean = mean;
        n.saved_var = var;

        Tensor<T> out(x.shape());
        for_each_channel(x, [&](std::size_t c, std::size_t idx) {
            const T inv = static_cast<T>(1.0 / std::sqrt(static_cast<double>(var[c]) + n.bn.eps));
            out[idx] = gamma[c] * ((x[idx] - mean[c]) * inv) + beta[c];
        });
        return out;
    }

    static Tensor<T> logsumexp_fwd(const Tensor<T>& x, std::size_t axis, const Shape& out_shape) {
        const auto& s = x.shape();
        std::size_t outer = 1, inner = 1;
        for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
        for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
        const std::size_t len = s[axis];
        Tensor<T> out(out_shape);
        auto xd = x.data();
        auto od = out.data();
        for (std::size_t ou = 0; ou < outer; ++ou)
            for (std::size_t in = 0; in < inner; ++in) {
                T m = xd[(ou * len) * inner + in];
                for (std::size_t k = 1; k < len; ++k)
                    m = std::max(m, xd[(ou * len + k) * inner + in]);
                double acc = 0.0;
                for (std::size_t k = 0; k < len; ++k)
                    acc += std::exp(static_cast<double>(xd[(ou * len + k) * inner + in] - m));
                od[ou * inner + in] = static_cast<T>(static_cast<double>(m) + std::log(acc));
            }
        return out;
    }

    // ---- backward kernels ----

    Tensor<T>& grad_buffer(int id) {
        auto& g = grads_[static_cast<std::size_t>(id)];
        if (!has_grad_[static_cast<std::size_t>(id)]) {
            g = Tensor<T>(nodes_[id].shape);
            has_grad_[static_cast<std::size_t>(id)] = 1;
        }
        return g;
    }

    void backward(Node& n, int id, const std::vector<char>& needed) {
        const Tensor<T>& g = grads_[static_cast<std::size_t>(id)];
        const auto want = [&](int in) { return in >= 0 && needed[static_cast<std::size_t>(in)]; };
        switch (n.op) {
            case Op::input:
            case Op::leaf:
                return;
            case Op::add:
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), 1.0, g);
                if (want(n.b)) axpy_inplace(grad_buffer(n.b), 1.0, g);
                return;
            case Op::sub:
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), 1.0, g);
                if (want(n.b)) axpy_inplace(grad_buffer(n.b), -1.0, g);
                return;
            case Op::neg:
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), -1.0, g);
                return;
            case Op::mul: {
                if (want(n.a)) {
                    auto ga = grad_buffer(n.a).data();
                    auto bd = nodes_[n.b].value.data();
                    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i] * bd[i];
                }
                if (want(n.b)) {
                    auto gb = grad_buffer(n.b).data();
                    auto ad = nodes_[n.a].value.data();
                    for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g[i] * ad[i];
                }
                return;
            }
            case Op::scale:
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), n.scalar_attr, g);
                return;
            case Op::add_bias: {
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), 1.0, g);
                if (want(n.b)) {
                    auto gb = grad_buffer(n.b).data();
                    const std::size_t rows = n.shape[0], cols = n.shape[1];
                    for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < cols; ++c) gb[c] += g[r * cols + c];
                }
                return;
            }
            case Op::matmul: {
                const Tensor<T>& A = nodes_[n.a].value;
                const Tensor<T>& B = nodes_[n.b].value;
                const std::size_t m = A.size(0), k = A.size(1), q = B.size(1);
                if (want(n.a)) {  // gA[i,p] += sum_j g[i,j] B[p,j]
                    auto ga = grad_buffer(n.a).data();
                    auto bd = B.data();
                    auto gd = g.data();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const T* brow = bd.data() + p * q;
                            const T* grow = gd.data() + i * q;
                            T acc{0};
                            for (std::size_t j = 0; j < q; ++j) acc += grow[j] * brow[j];
                            ga[i * k + p] += acc;
                        }
                }
                if (want(n.b)) {  // gB[p,j] += sum_i A[i,p] g[i,j]
                    auto gb = grad_buffer(n.b).data();
                    auto ad = A.data();
                    auto gd = g.data();
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t p = 0; p < k; ++p) {
                            const T a = ad[i * k + p];
                            const T* grow = gd.data() + i * q;
                            T* gbrow = gb.data() + p * q;
                            for (std::size_t j = 0; j < q; ++j) gbrow[j] += a * grow[j];
                        }
                }
                return;
            }
            case Op::conv2d:
                conv2d_bwd(n, g, want(n.a), want(n.b), want(n.c));
                return;
            case Op::relu: {
                if (!want(n.a)) return;
                auto ga = grad_buffer(n.a).data();
                auto xd = nodes_[n.a].value.data();
                for (std::size_t i = 0; i < ga.size(); ++i)
                    if (xd[i] > T{0}) ga[i] += g[i];
                return;
            }
            case Op::leaky_relu: {
                if (!want(n.a)) return;
                auto ga = grad_buffer(n.a).data();
                auto xd = nodes_[n.a].value.data();
                const T s = static_cast<T>(n.scalar_attr);
                for (std::size_t i = 0; i < ga.size(); ++i)
                    ga[i] += xd[i] > T{0} ? g[i] : s * g[i];
                return;
            }
            case Op::batch_norm:
                batch_norm_bwd(n, g, want(n.a), want(n.b), want(n.c));
                return;
            case Op::reshape:
                if (want(n.a)) axpy_inplace(grad_buffer(n.a), 1.0, g.reshaped(nodes_[n.a].shape));
                return;
            case Op::sum:
            case Op::mean: {
                if (!want(n.a)) return;
                const double c = n.op == Op::mean
                                     ? static_cast<double>(g.item()) /
                                           static_cast<double>(nodes_[n.a].value.numel())
                                     : static_cast<double>(g.item());
                auto ga = grad_buffer(n.a).data();
                for (auto& v : ga) v += static_cast<T>(c);
                return;
            }
            case Op::logsumexp: {
                if (!want(n.a)) return;
                const Tensor<T>& x = nodes_[n.a].value;
                const auto& s = x.shape();
                std::size_t outer = 1, inner = 1;
                for (std::size_t i = 0; i < n.axis; ++i) outer *= s[i];
                for (std::size_t i = n.axis + 1; i < s.size(); ++i) inner *= s[i];
                const std::size_t len = s[n.axis];
                auto ga = grad_buffer(n.a).data();
                for (std::size_t ou = 0; ou < outer; ++ou)
                    for (std::size_t in = 0; in < inner; ++in) {
                        const T lse = n.value[ou * inner + in];
                        const T gv = g[ou * inner + in];
                        for (std::size_t k = 0; k < len; ++k) {
                            const std::size_t idx = (ou * len + k) * inner + in;
                            ga[idx] += gv * static_cast<T>(
                                                std::exp(static_cast<double>(x[idx] - lse)));
                        }
                    }
                return;
            }
            case Op::softmax_xent: {
                if (!want(n.a)) return;
                const Tensor<T>& logits = nodes_[n.a].value;
                const std::size_t rows = logits.size(0), cols = logits.size(1);
                auto ga = grad_buffer(n.a).data();
                const double gv = static_cast<double>(g.item()) / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r) {
                    const T* row = logits.data().data() + r * cols;
                    T m = row[0];
                    for (std::size_t c = 1; c < cols; ++c) m = std::max(m, row[c]);
                    double s = 0.0;
                    for (std::size_t c = 0; c < cols; ++c)
                        s += std::exp(static_cast<double>(row[c] - m));
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double p = std::exp(static_cast<double>(row[c] - m)) / s;
                        const double onehot =
                            static_cast<std::size_t>(n.labels[r]) == c ? 1.0 : 0.0;
                        ga[r * cols + c] += static_cast<T>(gv * (p - onehot));
                    }
                }
                return;
            }
            case Op::sqnorm: {
                if (!want(n.a)) return;
                auto ga = grad_buffer(n.a).data();
                auto xd = nodes_[n.a].value.data();
                const T gv = g.item();
                for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += T{2} * xd[i] * gv;
                return;
            }
            case Op::gather_class: {
                if (!want(n.a)) return;
                auto ga = grad_buffer(n.a).data();
                const std::size_t cols = nodes_[n.a].shape[1];
                for (std::size_t r = 0; r < n.shape[0]; ++r)
                    ga[r * cols + static_cast<std::size_t>(n.labels[r])] += g[r];
                return;
            }
        }
    }

    void conv2d_bwd(Node& n, const Tensor<T>& g, bool wx, bool ww, bool wb) {
        const Tensor<T>& x = nodes_[n.a].value;
        const Tensor<T>& w = nodes_[n.b].value;
        const std::size_t N = x.size(0), C = x.size(1), H = x.size(2), W = x.size(3);
        const std::size_t O = w.size(0), kh = w.size(2), kw = w.size(3);
        const std::size_t oh = n.shape[2], ow = n.shape[3];
        const long p = static_cast<long>(n.pad);
        T* gx = wx ? grad_buffer(n.a).data().data() : nullptr;
        T* gw = ww ? grad_buffer(n.b).data().data() : nullptr;
        if (wb) {
            auto gb = grad_buffer(n.c).data();
            for (std::size_t nn = 0; nn < N; ++nn)
                for (std::size_t o = 0; o < O; ++o) {
                    const T* gplane = g.data().data() + (nn * O + o) * oh * ow;
                    T acc{0};
                    for (std::size_t i = 0; i < oh * ow; ++i) acc += gplane[i];
                    gb[o] += acc;
                }
        }
        if (!wx && !ww) return;
        for (std::size_t nn = 0; nn < N; ++nn)
            for (std::size_t o = 0; o < O; ++o) {
                const T* gplane = g.data().data() + (nn * O + o) * oh * ow;
                for (std::size_t c = 0; c < C; ++c) {
                    const T* xplane = x.data().data() + (nn * C + c) * H * W;
                    const T* wplane = w.data().data() + (o * C + c) * kh * kw;
                    T* gxplane = wx ? gx + (nn * C + c) * H * W : nullptr;
                    T* gwplane = ww ? gw + (o * C + c) * kh * kw : nullptr;
                    for (std::size_t ky = 0; ky < kh; ++ky)
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const T wv = wplane[ky * kw + kx];
                            T wacc{0};
                            for (std::size_t y = 0; y < oh; ++y) {
                                const long iy = static_cast<long>(y + ky) - p;
                                if (iy < 0 || iy >= static_cast<long>(H)) continue;
                                const T* grow = gplane + y * ow;
                                const T* xrow = xplane + static_cast<std::size_t>(iy) * W;
                                T* gxrow =
                                    wx ? gxplane + static_cast<std::size_t>(iy) * W : nullptr;
                                for (std::size_t xo = 0; xo < ow; ++xo) {
                                    const long ix = static_cast<long>(xo + kx) - p;
                                    if (ix < 0 || ix >= static_cast<long>(W)) continue;
                                    const T gvv = grow[xo];
                                    if (wx) gxrow[static_cast<std::size_t>(ix)] += wv * gvv;
                                    if (ww) wacc += xrow[static_cast<std::size_t>(ix)] * gvv;
                                }
                            }
                            if (ww) gwplane[ky * kw + kx] += wacc;
                        }
                }
            }
    }

    void batch_norm_bwd(Node& n, const Tensor<T>& g, bool wx, bool wg, bool wb) {
        const Tensor<T>& x = nodes_[n.a].value;
        const Tensor<T>& gamma = nodes_[n.b].value;
        const std::size_t channels = x.size(1);
        const std::size_t per_channel = x.numel() / channels;

        // Per-channel reductions of g and g*xhat.
        std::vector<double> sum_g(channels, 0.0), sum_gx(channels, 0.0), inv(channels);
        for (std::size_t c = 0; c < channels; ++c)
            inv[c] = 1.0 / std::sqrt(static_cast<double>(n.saved_var[c]) + n.bn.eps);
        for_each_channel(x, [&](std::size_t c, std::size_t idx) {
            const double xhat = (static_cast<double>(x[idx]) - n.saved_mean[c]) * inv[c];
            sum_g[c] += static_cast<double>(g[idx]);
            sum_gx[c] += static_cast<double>(g[idx]) * xhat;
        });
        if (wb) {
            auto gb = grad_buffer(n.c).data();
            for (std::size_t c = 0; c < channels; ++c) gb[c] += static_cast<T>(sum_g[c]);
        }
        if (wg) {
            auto gg = grad_buffer(n.b).data();
            for (std::size_t c = 0; c < channels; ++c) gg[c] += static_cast<T>(sum_gx[c]);
        }
        if (!wx) return;
        auto gx = grad_buffer(n.a).data();
        if (n.bn.train) {
            const double m = static_cast<double>(per_channel);
            for_each_channel(x, [&](std::size_t c, std::size_t idx) {
                const double xhat = (static_cast<double>(x[idx]) - n.saved_mean[c]) * inv[c];
                const double gy = static_cast<double>(g[idx]) * static_cast<double>(gamma[c]);
                const double gyt = static_cast<double>(gamma[c]);
                gx[idx] += static_cast<T>(
                    inv[c] * (gy - gyt * (sum_g[c] / m) - xhat * gyt * (sum_gx[c] / m)));
            });
        } else {
            for_each_channel(x, [&](std::size_t c, std::size_t idx) {
                gx[idx] += static_cast<T>(static_cast<double>(g[idx]) *
                                          static_cast<double>(gamma[c]) * inv[c]);
            });
        }
    }

    // Calls f(channel, flat_index) for every element; channel axis is axis 1.
    template <class F>
    static void for_each_channel(const Tensor<T>& x, F&& f) {
        const std::size_t channels = x.size(1);
        const std::size_t batch = x.size(0);
        const std::size_t spatial = x.numel() / (channels * batch);
        std::size_t idx = 0;
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t c = 0; c < channels; ++c)
                for (std::size_t s = 0; s < spatial; ++s) f(c, idx++);
    }

    static void channel_stats(const Tensor<T>& x, Tensor<T>& mean, Tensor<T>& var) {
        const std::size_t channels = x.size(1);
        const std::size_t per_channel = x.numel() / channels;
        std::vector<double> sums(channels, 0.0), sqs(channels, 0.0);
        for_each_channel(x, [&](std::size_t c, std::size_t idx) {
            sums[c] += static_cast<double>(x[idx]);
        });
        for (std::size_t c = 0; c < channels; ++c)
            mean[c] = static_cast<T>(sums[c] / static_cast<double>(per_channel));
        for_each_channel(x, [&](std::size_t c, std::size_t idx) {
            const double d = static_cast<double>(x[idx]) - static_cast<double>(mean[c]);
            sqs[c] += d * d;
        });
        for (std::size_t c = 0; c < channels; ++c)
            var[c] = static_cast<T>(sqs[c] / static_cast<double>(per_channel));
    }

    std::vector<Node> nodes_;
    std::map<std::string, NodeId> outputs_;
    std::vector<Tensor<T>> grads_;
    std::vector<char> has_grad_;
    bool evaluated_ = false;
};

}  // namespace jemlab
