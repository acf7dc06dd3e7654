#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ssat/common.hpp"
#include "ssat/tensor.hpp"

namespace ssat {

using NodeId = std::uint32_t;

enum class Op : std::uint8_t {
    Leaf,
    Dense,
    Conv2d,
    MaxPool2,
    Relu,
    Flatten,
    Add,
    Sub,
    Mul,
    Scale,
    Sum,
    Mean,
    RowSqDiff,
    SoftmaxCE,
    Sign,
    Clamp,
    MaskedMean,
    StopGrad,
};

// Reverse-mode tape. Nodes are appended in topological order by
// construction; backward walks ancestors of the seeded node in exact
// reverse order. Single-threaded per instance.
class Graph {
  public:
    struct Node {
        Op op = Op::Leaf;
        NodeId in[3] = {0, 0, 0};
        int n_in = 0;
        Tensor value;
        std::vector<double> grad;  // cotangent accumulator, lazily sized
        bool needs_grad = false;
        double a0 = 0.0, a1 = 0.0;  // scale factor / clamp bounds
        int pad = 0;                // conv2d zero padding
        std::vector<std::int32_t> labels;        // softmax-CE targets
        std::vector<std::uint8_t> mask;          // masked reductions
        double denom = 0.0;                      // masked-mean denominator (0 = popcount)
        std::vector<double> aux;                 // softmax probabilities
        std::vector<std::int32_t> iaux;          // max-pool argmax
    };

    // --- leaves ---------------------------------------------------------

    NodeId leaf(Tensor t, bool requires_grad) {
        Node n;
        n.op = Op::Leaf;
        n.value = std::move(t);
        n.needs_grad = requires_grad;
        return push(std::move(n));
    }

    NodeId input(const Tensor& t) { return leaf(t, t.requires_grad); }
    NodeId param(const Tensor& t) { return leaf(t, true); }
    NodeId constant(const Tensor& t) { return leaf(t, false); }

    // --- ops --------------------------------------------------------------

    // x:(B,I) w:(O,I) b:(O) -> (B,O)
    NodeId dense(NodeId x, NodeId w, NodeId b) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        const Shape& bs = shape_of(b);
        if (xs.size() != 2 || ws.size() != 2 || bs.size() != 1 || xs[1] != ws[1] || ws[0] != bs[0])
            throw ConfigError("dense: incompatible shapes x" + shape_str(xs) + " w" + shape_str(ws) +
                              " b" + shape_str(bs));
        return push(make(Op::Dense, {x, w, b}, Shape{xs[0], ws[0]}));
    }

    // x:(B,C,H,W) w:(O,C,k,k) b:(O), stride 1, zero padding `pad`
    NodeId conv2d(NodeId x, NodeId w, NodeId b, int pad = 0) {
        const Shape& xs = shape_of(x);
        const Shape& ws = shape_of(w);
        const Shape& bs = shape_of(b);
        if (xs.size() != 4 || ws.size() != 4 || bs.size() != 1 || xs[1] != ws[1] ||
            ws[2] != ws[3] || bs[0] != ws[0])
            throw ConfigError("conv2d: incompatible shapes x" + shape_str(xs) + " w" +
                              shape_str(ws));
        std::size_t k = ws[2];
        if (xs[2] + 2 * pad < k || xs[3] + 2 * pad < k)
            throw ConfigError("conv2d: kernel larger than padded input");
        Shape out{xs[0], ws[0], xs[2] + 2 * pad - k + 1, xs[3] + 2 * pad - k + 1};
        Node n = make(Op::Conv2d, {x, w, b}, out);
        n.pad = pad;
        return push(std::move(n));
    }

    // 2x2 stride-2 max pool, floor semantics on odd extents
    NodeId maxpool2(NodeId x) {
        const Shape& xs = shape_of(x);
        if (xs.size() != 4 || xs[2] < 2 || xs[3] < 2)
            throw ConfigError("maxpool2: need (B,C,H,W) with H,W >= 2, got " + shape_str(xs));
        return push(make(Op::MaxPool2, {x}, Shape{xs[0], xs[1], xs[2] / 2, xs[3] / 2}));
    }

    NodeId relu(NodeId x) { return push(make(Op::Relu, {x}, shape_of(x))); }

    // (B, ...) -> (B, prod(...))
    NodeId flatten(NodeId x) {
        const Shape& xs = shape_of(x);
        if (xs.size() < 2) throw ConfigError("flatten: need rank >= 2, got " + shape_str(xs));
        std::size_t rest = 1;
        for (std::size_t i = 1; i < xs.size(); ++i) rest *= xs[i];
        return push(make(Op::Flatten, {x}, Shape{xs[0], rest}));
    }

    NodeId add(NodeId a, NodeId b) { return elementwise(Op::Add, a, b); }
    NodeId sub(NodeId a, NodeId b) { return elementwise(Op::Sub, a, b); }
    NodeId mul(NodeId a, NodeId b) { return elementwise(Op::Mul, a, b); }

    NodeId scale(NodeId x, double c) {
        Node n = make(Op::Scale, {x}, shape_of(x));
        n.a0 = c;
        return push(std::move(n));
    }

    NodeId sum(NodeId x) { return push(make(Op::Sum, {x}, Shape{})); }
    NodeId mean(NodeId x) { return push(make(Op::Mean, {x}, Shape{})); }

    // per-row squared L2 distance: a,b:(B,K) -> (B,)
    NodeId row_sqdiff(NodeId a, NodeId b) {
        const Shape& as = shape_of(a);
        if (as != shape_of(b) || as.size() < 1)
            throw ConfigError("row_sqdiff: shape mismatch " + shape_str(as) + " vs " +
                              shape_str(shape_of(b)));
        return push(make(Op::RowSqDiff, {a, b}, Shape{as[0]}));
    }

    // logits:(B,C), labels in [0,C) -> per-sample loss vector (B,)
    NodeId softmax_ce(NodeId logits, const std::vector<std::int32_t>& labels) {
        const Shape& ls = shape_of(logits);
        if (ls.size() != 2) throw ConfigError("softmax_ce: logits must be (B,C)");
        if (labels.size() != ls[0])
            throw ConfigError("softmax_ce: " + std::to_string(labels.size()) + " labels for batch " +
                              std::to_string(ls[0]));
        for (auto y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= ls[1])
                throw ConfigError("softmax_ce: label " + std::to_string(y) + " out of range");
        Node n = make(Op::SoftmaxCE, {logits}, Shape{ls[0]});
        n.labels = labels;
        return push(std::move(n));
    }

    // sign(0) = 0; emits no gradient
    NodeId sign(NodeId x) { return push(make(Op::Sign, {x}, shape_of(x))); }

    // gradient passes inside (lo, hi), zero outside
    NodeId clamp(NodeId x, double lo, double hi) {
        Node n = make(Op::Clamp, {x}, shape_of(x));
        n.a0 = lo;
        n.a1 = hi;
        return push(std::move(n));
    }

    // mean of v over mask-selected entries; empty selection -> 0.
    // denom == 0 uses the selected count, otherwise the explicit value.
    NodeId masked_mean(NodeId v, const std::vector<std::uint8_t>& mask, double denom = 0.0) {
        const Shape& vs = shape_of(v);
        if (vs.size() != 1 || mask.size() != vs[0])
            throw ConfigError("masked_mean: mask length " + std::to_string(mask.size()) +
                              " vs vector " + shape_str(vs));
        Node n = make(Op::MaskedMean, {v}, Shape{});
        n.mask = mask;
        n.denom = denom;
        return push(std::move(n));
    }

    NodeId stopgrad(NodeId x) {
        Node n = make(Op::StopGrad, {x}, shape_of(x));
        n.needs_grad = false;  // cuts the tape
        return push(std::move(n));
    }

    // --- execution --------------------------------------------------------

    // Evaluates any not-yet-evaluated nodes, in order.
    void forward() {
        for (; evaluated_ < nodes_.size(); ++evaluated_) eval_node(nodes_[evaluated_], evaluated_);
    }

    // Seeds 1 into a scalar node and accumulates cotangents down the tape.
    // A second backward without zero_grads accumulates on top.
    void backward(NodeId root) {
        if (shape_of(root).size() != 0)
            throw UsageError("backward: node " + std::to_string(root) + " is not scalar");
        backward_seeded(root, {1.0});
    }

    void backward_seeded(NodeId root, const std::vector<double>& seed) {
        if (root >= evaluated_) throw UsageError("backward before forward");
        if (seed.size() != nodes_[root].value.size())
            throw UsageError("backward: seed size mismatch");
        // ancestors of root only; everything else keeps zero cotangent
        std::vector<std::uint8_t> live(root + 1, 0);
        live[root] = 1;
        for (NodeId id = root + 1; id-- > 0;) {
            if (!live[id]) continue;
            const Node& n = nodes_[id];
            for (int i = 0; i < n.n_in; ++i)
                if (nodes_[n.in[i]].needs_grad) live[n.in[i]] = 1;
        }
        accum(nodes_[root], seed.data());
        for (NodeId id = root + 1; id-- > 0;) {
            Node& n = nodes_[id];
            if (!live[id] || !n.needs_grad || n.grad.empty()) continue;
            vjp(n);
        }
    }

    void zero_grads() {
        for (auto& n : nodes_)
            if (!n.grad.empty()) std::fill(n.grad.begin(), n.grad.end(), 0.0);
    }

    const Tensor& value(NodeId id) const { return nodes_[id].value; }

    // Gradient as a tensor; zero if nothing was accumulated.
    Tensor grad(NodeId id) const {
        const Node& n = nodes_[id];
        Tensor g = Tensor::zeros(n.value.shape);
        if (!n.grad.empty()) g.data = n.grad;
        return g;
    }

    bool has_grad(NodeId id) const { return !nodes_[id].grad.empty(); }

    // Mutable access to a leaf's payload; invalidates downstream values.
    std::vector<double>& leaf_data(NodeId id) {
        if (nodes_[id].op != Op::Leaf) throw UsageError("leaf_data: node is not a leaf");
        evaluated_ = std::min<std::size_t>(evaluated_, id);
        return nodes_[id].value.data;
    }

    std::size_t node_count() const { return nodes_.size(); }
    bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }

  private:
    std::vector<Node> nodes_;
    std::size_t evaluated_ = 0;

    const Shape& shape_of(NodeId id) const {
        if (id >= nodes_.size()) throw UsageError("bad node id");
        return nodes_[id].value.shape;
    }

    Node make(Op op, std::initializer_list<NodeId> ins, Shape out) {
        Node n;
        n.op = op;
        n.n_in = 0;
        for (NodeId i : ins) n.in[n.n_in++] = i;
        n.value = Tensor::zeros(std::move(out));
        for (int i = 0; i < n.n_in; ++i) n.needs_grad = n.needs_grad || nodes_[n.in[i]].needs_grad;
        return n;
    }

    NodeId push(Node n) {
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId elementwise(Op op, NodeId a, NodeId b) {
        if (shape_of(a) != shape_of(b))
            throw ConfigError("elementwise: shape mismatch " + shape_str(shape_of(a)) + " vs " +
                              shape_str(shape_of(b)));
        return push(make(op, {a, b}, shape_of(a)));
    }

    void accum(Node& n, const double* seed) {
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        for (std::size_t i = 0; i < n.grad.size(); ++i) n.grad[i] += seed[i];
    }

    std::vector<double>& grad_buf(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
        return n.grad;
    }

    // --- forward kernels ---------------------------------------------------

    void eval_node(Node& n, std::size_t id) {
        switch (n.op) {
            case Op::Leaf:
                break;
            case Op::Dense:
                fwd_dense(n);
                break;
            case Op::Conv2d:
                fwd_conv(n);
                break;
            case Op::MaxPool2:
                fwd_pool(n);
                break;
            case Op::Relu: {
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = x[i] > 0.0 ? x[i] : 0.0;
                break;
            }
            case Op::Flatten:
                n.value.data = nodes_[n.in[0]].value.data;
                break;
            case Op::Add: {
                const auto& a = nodes_[n.in[0]].value.data;
                const auto& b = nodes_[n.in[1]].value.data;
                for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a[i] + b[i];
                break;
            }
            case Op::Sub: {
                const auto& a = nodes_[n.in[0]].value.data;
                const auto& b = nodes_[n.in[1]].value.data;
                for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a[i] - b[i];
                break;
            }
            case Op::Mul: {
                const auto& a = nodes_[n.in[0]].value.data;
                const auto& b = nodes_[n.in[1]].value.data;
                for (std::size_t i = 0; i < a.size(); ++i) n.value.data[i] = a[i] * b[i];
                break;
            }
            case Op::Scale: {
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < x.size(); ++i) n.value.data[i] = n.a0 * x[i];
                break;
            }
            case Op::Sum: {
                double s = 0.0;
                for (double v : nodes_[n.in[0]].value.data) s += v;
                n.value.data[0] = s;
                break;
            }
            case Op::Mean: {
                double s = 0.0;
                const auto& x = nodes_[n.in[0]].value.data;
                for (double v : x) s += v;
                n.value.data[0] = x.empty() ? 0.0 : s / static_cast<double>(x.size());
                break;
            }
            case Op::RowSqDiff: {
                const Tensor& a = nodes_[n.in[0]].value;
                const Tensor& b = nodes_[n.in[1]].value;
                std::size_t rows = n.value.size();
                std::size_t k = rows ? a.size() / rows : 0;
                for (std::size_t r = 0; r < rows; ++r) {
                    double s = 0.0;
                    for (std::size_t j = 0; j < k; ++j) {
                        double d = a.data[r * k + j] - b.data[r * k + j];
                        s += d * d;
                    }
                    n.value.data[r] = s;
                }
                break;
            }
            case Op::SoftmaxCE:
                fwd_softmax_ce(n);
                break;
            case Op::Sign: {
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < x.size(); ++i)
                    n.value.data[i] = x[i] > 0.0 ? 1.0 : (x[i] < 0.0 ? -1.0 : 0.0);
                break;
            }
            case Op::Clamp: {
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < x.size(); ++i)
                    n.value.data[i] = std::min(std::max(x[i], n.a0), n.a1);
                break;
            }
            case Op::MaskedMean: {
                const auto& v = nodes_[n.in[0]].value.data;
                double s = 0.0;
                std::size_t cnt = 0;
                for (std::size_t i = 0; i < v.size(); ++i)
                    if (n.mask[i]) {
                        s += v[i];
                        ++cnt;
                    }
                double d = n.denom > 0.0 ? n.denom : static_cast<double>(cnt);
                n.value.data[0] = cnt == 0 ? 0.0 : s / d;
                break;
            }
            case Op::StopGrad:
                n.value.data = nodes_[n.in[0]].value.data;
                break;
        }
        if (n.op != Op::Leaf && !n.value.all_finite())
            throw NumericError("non-finite value at node " + std::to_string(id));
    }

    void fwd_dense(Node& n) {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        const Tensor& b = nodes_[n.in[2]].value;
        std::size_t B = x.shape[0], I = x.shape[1], O = w.shape[0];
        for (std::size_t bi = 0; bi < B; ++bi) {
            const double* xr = &x.data[bi * I];
            double* yr = &n.value.data[bi * O];
            for (std::size_t o = 0; o < O; ++o) {
                const double* wr = &w.data[o * I];
                double s = b.data[o];
                for (std::size_t i = 0; i < I; ++i) s += xr[i] * wr[i];
                yr[o] = s;
            }
        }
    }

    void fwd_conv(Node& n) {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        const Tensor& b = nodes_[n.in[2]].value;
        const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const std::size_t O = w.shape[0], K = w.shape[2];
        const std::size_t OH = n.value.shape[2], OW = n.value.shape[3];
        const int p = n.pad;
        for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t o = 0; o < O; ++o) {
                double* out = &n.value.data[(bi * O + o) * OH * OW];
                for (std::size_t i = 0; i < OH * OW; ++i) out[i] = b.data[o];
                for (std::size_t c = 0; c < C; ++c) {
                    const double* xp = &x.data[(bi * C + c) * H * W];
                    const double* wp = &w.data[(o * C + c) * K * K];
                    for (std::size_t ky = 0; ky < K; ++ky)
                        for (std::size_t kx = 0; kx < K; ++kx) {
                            const double wv = wp[ky * K + kx];
                            const long oy0 = std::max<long>(0, p - static_cast<long>(ky));
                            const long oy1 = std::min<long>(OH, H + p - ky);
                            const long ox0 = std::max<long>(0, p - static_cast<long>(kx));
                            const long ox1 = std::min<long>(OW, W + p - kx);
                            for (long oy = oy0; oy < oy1; ++oy) {
                                const double* xr = &xp[(oy + ky - p) * W + (ox0 + kx - p)];
                                double* yr = &out[oy * OW + ox0];
                                for (long ox = 0; ox < ox1 - ox0; ++ox) yr[ox] += wv * xr[ox];
                            }
                        }
                }
            }
    }

    void fwd_pool(Node& n) {
        const Tensor& x = nodes_[n.in[0]].value;
        const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const std::size_t OH = n.value.shape[2], OW = n.value.shape[3];
        n.iaux.assign(n.value.size(), 0);
        for (std::size_t bc = 0; bc < B * C; ++bc) {
            const double* xp = &x.data[bc * H * W];
            double* yp = &n.value.data[bc * OH * OW];
            std::int32_t* ap = &n.iaux[bc * OH * OW];
            for (std::size_t oy = 0; oy < OH; ++oy)
                for (std::size_t ox = 0; ox < OW; ++ox) {
                    std::size_t base = (2 * oy) * W + 2 * ox;
                    // first strict max in row-major order
                    std::size_t best = base;
                    double bv = xp[base];
                    const std::size_t cand[3] = {base + 1, base + W, base + W + 1};
                    for (std::size_t c : cand)
                        if (xp[c] > bv) {
                            bv = xp[c];
                            best = c;
                        }
                    yp[oy * OW + ox] = bv;
                    ap[oy * OW + ox] = static_cast<std::int32_t>(best);
                }
        }
    }

    void fwd_softmax_ce(Node& n) {
        const Tensor& z = nodes_[n.in[0]].value;
        std::size_t B = z.shape[0], C = z.shape[1];
        n.aux.assign(B * C, 0.0);
        for (std::size_t bi = 0; bi < B; ++bi) {
            const double* zr = &z.data[bi * C];
            double m = zr[0];
            for (std::size_t c = 1; c < C; ++c) m = std::max(m, zr[c]);
            double s = 0.0;
            for (std::size_t c = 0; c < C; ++c) s += std::exp(zr[c] - m);
            double logs = std::log(s);
            for (std::size_t c = 0; c < C; ++c) n.aux[bi * C + c] = std::exp(zr[c] - m) / s;
            n.value.data[bi] = logs - (zr[n.labels[bi]] - m);
        }
    }

    // --- backward kernels ---------------------------------------------------

    void vjp(Node& n) {
        const std::vector<double>& g = n.grad;
        switch (n.op) {
            case Op::Leaf:
            case Op::Sign:
            case Op::StopGrad:
                break;
            case Op::Dense:
                bwd_dense(n, g);
                break;
            case Op::Conv2d:
                bwd_conv(n, g);
                break;
            case Op::MaxPool2: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                const Tensor& x = nodes_[n.in[0]].value;
                std::size_t plane = x.shape[2] * x.shape[3];
                std::size_t oplane = n.value.shape[2] * n.value.shape[3];
                for (std::size_t bc = 0; bc < x.shape[0] * x.shape[1]; ++bc)
                    for (std::size_t i = 0; i < oplane; ++i)
                        dx[bc * plane + n.iaux[bc * oplane + i]] += g[bc * oplane + i];
                break;
            }
            case Op::Relu: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < x.size(); ++i)
                    if (x[i] > 0.0) dx[i] += g[i];
                break;
            }
            case Op::Flatten: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
                break;
            }
            case Op::Add:
                for (int s = 0; s < 2; ++s)
                    if (nodes_[n.in[s]].needs_grad) {
                        auto& d = grad_buf(n.in[s]);
                        for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                    }
                break;
            case Op::Sub: {
                if (nodes_[n.in[0]].needs_grad) {
                    auto& da = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
                }
                if (nodes_[n.in[1]].needs_grad) {
                    auto& db = grad_buf(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
                }
                break;
            }
            case Op::Mul: {
                const auto& a = nodes_[n.in[0]].value.data;
                const auto& b = nodes_[n.in[1]].value.data;
                if (nodes_[n.in[0]].needs_grad) {
                    auto& da = grad_buf(n.in[0]);
                    for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * b[i];
                }
                if (nodes_[n.in[1]].needs_grad) {
                    auto& db = grad_buf(n.in[1]);
                    for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * a[i];
                }
                break;
            }
            case Op::Scale: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < g.size(); ++i) dx[i] += n.a0 * g[i];
                break;
            }
            case Op::Sum: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                for (double& d : dx) d += g[0];
                break;
            }
            case Op::Mean: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                double s = g[0] / static_cast<double>(dx.size());
                for (double& d : dx) d += s;
                break;
            }
            case Op::RowSqDiff: {
                const Tensor& a = nodes_[n.in[0]].value;
                const Tensor& b = nodes_[n.in[1]].value;
                std::size_t rows = n.value.size();
                std::size_t k = rows ? a.size() / rows : 0;
                bool ga = nodes_[n.in[0]].needs_grad, gb = nodes_[n.in[1]].needs_grad;
                if (!ga && !gb) break;
                std::vector<double>* da = ga ? &grad_buf(n.in[0]) : nullptr;
                std::vector<double>* db = gb ? &grad_buf(n.in[1]) : nullptr;
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < k; ++j) {
                        double d = 2.0 * g[r] * (a.data[r * k + j] - b.data[r * k + j]);
                        if (da) (*da)[r * k + j] += d;
                        if (db) (*db)[r * k + j] -= d;
                    }
                break;
            }
            case Op::SoftmaxCE: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dz = grad_buf(n.in[0]);
                std::size_t B = n.value.size();
                std::size_t C = nodes_[n.in[0]].value.shape[1];
                for (std::size_t bi = 0; bi < B; ++bi)
                    for (std::size_t c = 0; c < C; ++c) {
                        double p = n.aux[bi * C + c];
                        double y = (static_cast<std::size_t>(n.labels[bi]) == c) ? 1.0 : 0.0;
                        dz[bi * C + c] += g[bi] * (p - y);
                    }
                break;
            }
            case Op::Clamp: {
                if (!nodes_[n.in[0]].needs_grad) break;
                auto& dx = grad_buf(n.in[0]);
                const auto& x = nodes_[n.in[0]].value.data;
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (x[i] > n.a0 && x[i] < n.a1) dx[i] += g[i];
                break;
            }
            case Op::MaskedMean: {
                if (!nodes_[n.in[0]].needs_grad) break;
                std::size_t cnt = 0;
                for (auto m : n.mask) cnt += m;
                if (cnt == 0) break;
                double d = n.denom > 0.0 ? n.denom : static_cast<double>(cnt);
                auto& dv = grad_buf(n.in[0]);
                for (std::size_t i = 0; i < dv.size(); ++i)
                    if (n.mask[i]) dv[i] += g[0] / d;
                break;
            }
        }
    }

    void bwd_dense(Node& n, const std::vector<double>& g) {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        std::size_t B = x.shape[0], I = x.shape[1], O = w.shape[0];
        if (nodes_[n.in[0]].needs_grad) {
            auto& dx = grad_buf(n.in[0]);
            for (std::size_t bi = 0; bi < B; ++bi) {
                double* dxr = &dx[bi * I];
                const double* gr = &g[bi * O];
                for (std::size_t o = 0; o < O; ++o) {
                    const double go = gr[o];
                    if (go == 0.0) continue;
                    const double* wr = &w.data[o * I];
                    for (std::size_t i = 0; i < I; ++i) dxr[i] += go * wr[i];
                }
            }
        }
        if (nodes_[n.in[1]].needs_grad) {
            auto& dw = grad_buf(n.in[1]);
            for (std::size_t bi = 0; bi < B; ++bi) {
                const double* xr = &x.data[bi * I];
                const double* gr = &g[bi * O];
                for (std::size_t o = 0; o < O; ++o) {
                    const double go = gr[o];
                    if (go == 0.0) continue;
                    double* dwr = &dw[o * I];
                    for (std::size_t i = 0; i < I; ++i) dwr[i] += go * xr[i];
                }
            }
        }
        if (nodes_[n.in[2]].needs_grad) {
            auto& db = grad_buf(n.in[2]);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t o = 0; o < O; ++o) db[o] += g[bi * O + o];
        }
    }

    void bwd_conv(Node& n, const std::vector<double>& g) {
        const Tensor& x = nodes_[n.in[0]].value;
        const Tensor& w = nodes_[n.in[1]].value;
        const std::size_t B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
        const std::size_t O = w.shape[0], K = w.shape[2];
        const std::size_t OH = n.value.shape[2], OW = n.value.shape[3];
        const int p = n.pad;
        const bool want_dx = nodes_[n.in[0]].needs_grad;
        const bool want_dw = nodes_[n.in[1]].needs_grad;
        std::vector<double>* dx = want_dx ? &grad_buf(n.in[0]) : nullptr;
        std::vector<double>* dw = want_dw ? &grad_buf(n.in[1]) : nullptr;
        if (want_dx || want_dw)
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t o = 0; o < O; ++o) {
                    const double* gp = &g[(bi * O + o) * OH * OW];
                    for (std::size_t c = 0; c < C; ++c) {
                        const double* xp = &x.data[(bi * C + c) * H * W];
                        double* dxp = want_dx ? &(*dx)[(bi * C + c) * H * W] : nullptr;
                        const double* wp = &w.data[(o * C + c) * K * K];
                        double* dwp = want_dw ? &(*dw)[(o * C + c) * K * K] : nullptr;
                        for (std::size_t ky = 0; ky < K; ++ky)
                            for (std::size_t kx = 0; kx < K; ++kx) {
                                const double wv = wp[ky * K + kx];
                                double wacc = 0.0;
                                const long oy0 = std::max<long>(0, p - static_cast<long>(ky));
                                const long oy1 = std::min<long>(OH, H + p - ky);
                                const long ox0 = std::max<long>(0, p - static_cast<long>(kx));
                                const long ox1 = std::min<long>(OW, W + p - kx);
                                for (long oy = oy0; oy < oy1; ++oy) {
                                    const double* gr = &gp[oy * OW + ox0];
                                    const std::size_t xoff =
                                        (oy + ky - p) * W + (ox0 + kx - p);
                                    if (want_dx) {
                                        double* dxr = &dxp[xoff];
                                        for (long ox = 0; ox < ox1 - ox0; ++ox)
                                            dxr[ox] += wv * gr[ox];
                                    }
                                    if (want_dw) {
                                        const double* xr = &xp[xoff];
                                        for (long ox = 0; ox < ox1 - ox0; ++ox)
                                            wacc += gr[ox] * xr[ox];
                                    }
                                }
                                if (want_dw) dwp[ky * K + kx] += wacc;
                            }
                    }
                }
        if (nodes_[n.in[2]].needs_grad) {
            auto& db = grad_buf(n.in[2]);
            for (std::size_t bi = 0; bi < B; ++bi)
                for (std::size_t o = 0; o < O; ++o) {
                    const double* gp = &g[(bi * O + o) * OH * OW];
                    double s = 0.0;
                    for (std::size_t i = 0; i < OH * OW; ++i) s += gp[i];
                    db[o] += s;
                }
        }
    }
};

}  // namespace ssat
