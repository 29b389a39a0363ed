#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "arrest/errors.hpp"
#include "arrest/tensor.hpp"

namespace arrest {

// Reverse-mode tape. Every operation eagerly computes its value and records
// a backprop closure; backward() walks the DAG once in reverse topological
// order. Nodes whose subtree contains no grad-requiring leaf are pruned from
// the walk.
struct Node {
    Tensor value;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backprop;

    std::vector<double>& grad_buffer() {
        if (grad.empty()) grad.assign(static_cast<std::size_t>(value.size()), 0.0);
        return grad;
    }
};

class Var {
public:
    Var() = default;

    static Var leaf(Tensor t, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->value = std::move(t);
        n->requires_grad = requires_grad;
        return Var(std::move(n));
    }

    static Var constant(Tensor t) { return leaf(std::move(t), false); }
    static Var scalar(double v) { return constant(Tensor::scalar(v)); }

    bool defined() const { return static_cast<bool>(node_); }
    const Tensor& value() const { return node_->value; }
    Tensor& mutable_value() { return node_->value; }
    bool requires_grad() const { return node_->requires_grad; }

    // Gradient accumulated by the last backward() calls; zeros if untouched.
    const std::vector<double>& grad() const {
        if (node_->grad.empty()) node_->grad_buffer();
        return node_->grad;
    }

    void zero_grad() {
        std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    std::shared_ptr<Node> node() const { return node_; }

    // Backward from a scalar root. Accumulates d(root)/d(leaf) into the grad
    // of every reachable grad-requiring node.
    void backward() const;

private:
    explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}
    friend Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                       std::function<void(Node&)> backprop);

    std::shared_ptr<Node> node_;
};

inline Var make_op(const char* name, Tensor value, std::vector<Var> parents,
                   std::function<void(Node&)> backprop) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->op = name;
    bool rg = false;
    n->parents.reserve(parents.size());
    for (const Var& p : parents) {
        rg = rg || p.requires_grad();
        n->parents.push_back(p.node());
    }
    n->requires_grad = rg;
    if (rg) n->backprop = std::move(backprop);
    return Var(std::move(n));
}

inline void Var::backward() const {
    if (!node_) throw state_error("backward: undefined variable");
    if (node_->value.size() != 1)
        throw state_error("backward: root must be scalar, got shape " +
                          node_->value.shape_string());
    if (!node_->requires_grad) return;  // nothing reachable wants a gradient

    // Iterative post-order DFS over grad-requiring nodes.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, idx] = stack.back();
        if (idx < n->parents.size()) {
            Node* p = n->parents[idx++].get();
            if (p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->grad_buffer()[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backprop) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// Shape helpers

namespace detail {

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b))
        throw shape_error(std::string(op) + ": shape mismatch " + a.shape_string() +
                          " vs " + b.shape_string());
}

inline std::vector<double>& parent_grad(Node& n, std::size_t i) {
    return n.parents[i]->grad_buffer();
}

inline bool parent_wants(const Node& n, std::size_t i) {
    return n.parents[i]->requires_grad;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise operations

inline Var add(const Var& a, const Var& b) {
    detail::require_same_shape("add", a.value(), b.value());
    Tensor out = a.value();
    const auto& bv = b.value().values();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return make_op("add", std::move(out), {a, b}, [](Node& n) {
        for (std::size_t p = 0; p < 2; ++p) {
            if (!detail::parent_wants(n, p)) continue;
            auto& g = detail::parent_grad(n, p);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
    });
}

inline Var sub(const Var& a, const Var& b) {
    detail::require_same_shape("sub", a.value(), b.value());
    Tensor out = a.value();
    const auto& bv = b.value().values();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return make_op("sub", std::move(out), {a, b}, [](Node& n) {
        if (detail::parent_wants(n, 0)) {
            auto& g = detail::parent_grad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
        }
        if (detail::parent_wants(n, 1)) {
            auto& g = detail::parent_grad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= n.grad[i];
        }
    });
}

inline Var mul(const Var& a, const Var& b) {
    detail::require_same_shape("mul", a.value(), b.value());
    Tensor out = a.value();
    const auto& bv = b.value().values();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    return make_op("mul", std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.values();
        const auto& bv2 = n.parents[1]->value.values();
        if (detail::parent_wants(n, 0)) {
            auto& g = detail::parent_grad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * bv2[i];
        }
        if (detail::parent_wants(n, 1)) {
            auto& g = detail::parent_grad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * av[i];
        }
    });
}

inline Var div(const Var& a, const Var& b) {
    detail::require_same_shape("div", a.value(), b.value());
    Tensor out = a.value();
    const auto& bv = b.value().values();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] /= bv[i];
    return make_op("div", std::move(out), {a, b}, [](Node& n) {
        const auto& av = n.parents[0]->value.values();
        const auto& bv2 = n.parents[1]->value.values();
        if (detail::parent_wants(n, 0)) {
            auto& g = detail::parent_grad(n, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] / bv2[i];
        }
        if (detail::parent_wants(n, 1)) {
            auto& g = detail::parent_grad(n, 1);
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] -= n.grad[i] * av[i] / (bv2[i] * bv2[i]);
        }
    });
}

// y = alpha * x + beta, elementwise.
inline Var affine(const Var& x, double alpha, double beta) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = alpha * out[i] + beta;
    return make_op("affine", std::move(out), {x}, [alpha](Node& n) {
        auto& g = detail::parent_grad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += alpha * n.grad[i];
    });
}

inline Var relu(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = out[i] > 0.0 ? out[i] : 0.0;
    return make_op("relu", std::move(out), {x}, [](Node& n) {
        const auto& xv = n.parents[0]->value.values();
        auto& g = detail::parent_grad(n, 0);
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > 0.0) g[i] += n.grad[i];
    });
}

inline Var vabs(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::fabs(out[i]);
    return make_op("abs", std::move(out), {x}, [](Node& n) {
        const auto& xv = n.parents[0]->value.values();
        auto& g = detail::parent_grad(n, 0);
        // subgradient at 0 is 0
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (xv[i] > 0.0) g[i] += n.grad[i];
            else if (xv[i] < 0.0) g[i] -= n.grad[i];
        }
    });
}

// sign has zero gradient everywhere; the node never requires grad.
inline Var vsign(const Var& x) {
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = out[i] > 0.0 ? 1.0 : (out[i] < 0.0 ? -1.0 : 0.0);
    return Var::constant(std::move(out));
}

inline Var vclamp(const Var& x, double lo, double hi) {
    if (!(lo < hi)) throw domain_error("clamp: lo must be < hi");
    Tensor out = x.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = std::min(hi, std::max(lo, out[i]));
    return make_op("clamp", std::move(out), {x}, [lo, hi](Node& n) {
        const auto& xv = n.parents[0]->value.values();
        auto& g = detail::parent_grad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i)
            if (xv[i] > lo && xv[i] < hi) g[i] += n.grad[i];
    });
}

// Same data, new shape. Element count must match.
inline Var reshape(const Var& x, std::vector<int> new_shape) {
    Tensor out(std::move(new_shape), x.value().values());
    if (out.size() != x.value().size())
        throw shape_error("reshape: element count mismatch " + x.value().shape_string() +
                          " -> " + out.shape_string());
    return make_op("reshape", std::move(out), {x}, [](Node& n) {
        auto& g = detail::parent_grad(n, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Linear algebra

// (n,k) x (k,m) -> (n,m)
inline Var matmul(const Var& a, const Var& b) {
    const Tensor& A = a.value();
    const Tensor& B = b.value();
    if (A.rank() != 2 || B.rank() != 2)
        throw shape_error("matmul: expects rank-2 operands, got " + A.shape_string() +
                          " and " + B.shape_string());
    const int n = A.dim(0), k = A.dim(1), k2 = B.dim(0), m = B.dim(1);
    if (k != k2)
        throw shape_error("matmul: inner dimensions disagree " + A.shape_string() +
                          " vs " + B.shape_string());
    Tensor out({n, m});
    {
        const double* av = A.values().data();
        const double* bv = B.values().data();
        double* ov = out.values().data();
        for (int i = 0; i < n; ++i)
            for (int kk = 0; kk < k; ++kk) {
                const double aik = av[i * k + kk];
                const double* brow = bv + kk * m;
                double* orow = ov + i * m;
                for (int j = 0; j < m; ++j) orow[j] += aik * brow[j];
            }
    }
    return make_op("matmul", std::move(out), {a, b}, [n, k, m](Node& nd) {
        const double* av = nd.parents[0]->value.values().data();
        const double* bv = nd.parents[1]->value.values().data();
        const double* gv = nd.grad.data();
        if (detail::parent_wants(nd, 0)) {
            double* ga = detail::parent_grad(nd, 0).data();
            // dA = G * B^T
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) {
                    const double gij = gv[i * m + j];
                    const double* bcol = bv + j;
                    double* garow = ga + i * k;
                    for (int kk = 0; kk < k; ++kk) garow[kk] += gij * bcol[kk * m];
                }
        }
        if (detail::parent_wants(nd, 1)) {
            double* gb = detail::parent_grad(nd, 1).data();
            // dB = A^T * G
            for (int i = 0; i < n; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    const double aik = av[i * k + kk];
                    const double* grow = gv + i * m;
                    double* gbrow = gb + kk * m;
                    for (int j = 0; j < m; ++j) gbrow[j] += aik * grow[j];
                }
        }
    });
}

// (n,m) + (m) broadcast over rows
inline Var add_rowvec(const Var& x, const Var& v) {
    const Tensor& X = x.value();
    const Tensor& V = v.value();
    if (X.rank() != 2 || V.rank() != 1 || X.dim(1) != V.dim(0))
        throw shape_error("add_rowvec: incompatible shapes " + X.shape_string() + " and " +
                          V.shape_string());
    const int n = X.dim(0), m = X.dim(1);
    Tensor out = X;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[i * m + j] += V[j];
    return make_op("add_rowvec", std::move(out), {x, v}, [n, m](Node& nd) {
        if (detail::parent_wants(nd, 0)) {
            auto& g = detail::parent_grad(nd, 0);
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += nd.grad[i];
        }
        if (detail::parent_wants(nd, 1)) {
            auto& g = detail::parent_grad(nd, 1);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) g[j] += nd.grad[i * m + j];
        }
    });
}

// Flat dot product of equal-size tensors -> scalar.
inline Var dot(const Var& a, const Var& b) {
    detail::require_same_shape("dot", a.value(), b.value());
    double s = 0.0;
    const auto& av = a.value().values();
    const auto& bv = b.value().values();
    for (std::size_t i = 0; i < av.size(); ++i) s += av[i] * bv[i];
    return make_op("dot", Tensor::scalar(s), {a, b}, [](Node& n) {
        const auto& av2 = n.parents[0]->value.values();
        const auto& bv2 = n.parents[1]->value.values();
        const double g = n.grad[0];
        if (detail::parent_wants(n, 0)) {
            auto& ga = detail::parent_grad(n, 0);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bv2[i];
        }
        if (detail::parent_wants(n, 1)) {
            auto& gb = detail::parent_grad(n, 1);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * av2[i];
        }
    });
}

// Flat L2 norm -> scalar. Gradient at the origin is taken as 0.
inline Var norm(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v * v;
    s = std::sqrt(s);
    return make_op("norm", Tensor::scalar(s), {x}, [s](Node& n) {
        if (s == 0.0) return;
        const auto& xv = n.parents[0]->value.values();
        auto& g = detail::parent_grad(n, 0);
        const double k = n.grad[0] / s;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += k * xv[i];
    });
}

// Per-row dot of (n,d) x (n,d) -> (n)
inline Var rows_dot(const Var& a, const Var& b) {
    detail::require_same_shape("rows_dot", a.value(), b.value());
    if (a.value().rank() != 2) throw shape_error("rows_dot: expects rank-2 operands");
    const int n = a.value().dim(0), d = a.value().dim(1);
    Tensor out({n});
    const auto& av = a.value().values();
    const auto& bv = b.value().values();
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += av[i * d + j] * bv[i * d + j];
        out[i] = s;
    }
    return make_op("rows_dot", std::move(out), {a, b}, [n, d](Node& nd) {
        const auto& av2 = nd.parents[0]->value.values();
        const auto& bv2 = nd.parents[1]->value.values();
        for (std::size_t p = 0; p < 2; ++p) {
            if (!detail::parent_wants(nd, p)) continue;
            auto& g = detail::parent_grad(nd, p);
            const auto& other = (p == 0) ? bv2 : av2;
            for (int i = 0; i < n; ++i) {
                const double gi = nd.grad[i];
                for (int j = 0; j < d; ++j) g[i * d + j] += gi * other[i * d + j];
            }
        }
    });
}

// Per-row L2 norm of (n,d) -> (n). Gradient of a zero row is 0.
inline Var rows_norm(const Var& x) {
    if (x.value().rank() != 2) throw shape_error("rows_norm: expects a rank-2 operand");
    const int n = x.value().dim(0), d = x.value().dim(1);
    Tensor out({n});
    const auto& xv = x.value().values();
    for (int i = 0; i < n; ++i) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += xv[i * d + j] * xv[i * d + j];
        out[i] = std::sqrt(s);
    }
    const std::vector<double> norms = out.values();
    return make_op("rows_norm", std::move(out), {x}, [n, d, norms](Node& nd) {
        const auto& xv2 = nd.parents[0]->value.values();
        auto& g = detail::parent_grad(nd, 0);
        for (int i = 0; i < n; ++i) {
            if (norms[i] == 0.0) continue;
            const double k = nd.grad[i] / norms[i];
            for (int j = 0; j < d; ++j) g[i * d + j] += k * xv2[i * d + j];
        }
    });
}

// Divide each row of (n,m) by the matching entry of (n).
inline Var div_rows(const Var& x, const Var& s) {
    const Tensor& X = x.value();
    const Tensor& S = s.value();
    if (X.rank() != 2 || S.rank() != 1 || X.dim(0) != S.dim(0))
        throw shape_error("div_rows: incompatible shapes " + X.shape_string() + " and " +
                          S.shape_string());
    const int n = X.dim(0), m = X.dim(1);
    Tensor out = X;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) out[i * m + j] /= S[i];
    return make_op("div_rows", std::move(out), {x, s}, [n, m](Node& nd) {
        const auto& xv = nd.parents[0]->value.values();
        const auto& sv = nd.parents[1]->value.values();
        if (detail::parent_wants(nd, 0)) {
            auto& g = detail::parent_grad(nd, 0);
            for (int i = 0; i < n; ++i)
                for (int j = 0; j < m; ++j) g[i * m + j] += nd.grad[i * m + j] / sv[i];
        }
        if (detail::parent_wants(nd, 1)) {
            auto& g = detail::parent_grad(nd, 1);
            for (int i = 0; i < n; ++i) {
                double acc = 0.0;
                for (int j = 0; j < m; ++j) acc += nd.grad[i * m + j] * xv[i * m + j];
                g[i] -= acc / (sv[i] * sv[i]);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Reductions

inline Var reduce_sum(const Var& x) {
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_op("reduce_sum", Tensor::scalar(s), {x}, [](Node& n) {
        auto& g = detail::parent_grad(n, 0);
        const double gv = n.grad[0];
        for (double& v : g) v += gv;
    });
}

inline Var reduce_mean(const Var& x) {
    const double inv = 1.0 / static_cast<double>(x.value().size());
    double s = 0.0;
    for (double v : x.value().values()) s += v;
    return make_op("reduce_mean", Tensor::scalar(s * inv), {x}, [inv](Node& n) {
        auto& g = detail::parent_grad(n, 0);
        const double gv = n.grad[0] * inv;
        for (double& v : g) v += gv;
    });
}

// Sum (n,c,m) over the middle axis -> (n,m).
inline Var sum_channels(const Var& x) {
    if (x.value().rank() != 3) throw shape_error("sum_channels: expects a rank-3 operand");
    const int n = x.value().dim(0), c = x.value().dim(1), m = x.value().dim(2);
    Tensor out({n, m});
    const auto& xv = x.value().values();
    for (int i = 0; i < n; ++i)
        for (int ch = 0; ch < c; ++ch)
            for (int j = 0; j < m; ++j) out[i * m + j] += xv[(i * c + ch) * m + j];
    return make_op("sum_channels", std::move(out), {x}, [n, c, m](Node& nd) {
        auto& g = detail::parent_grad(nd, 0);
        for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch)
                for (int j = 0; j < m; ++j) g[(i * c + ch) * m + j] += nd.grad[i * m + j];
    });
}

// ---------------------------------------------------------------------------
// Neural-network operations

// x: (N,C,H,W), w: (OC,C,KH,KW), b: (OC). Zero padding, square stride.
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
    const Tensor& X = x.value();
    const Tensor& W = w.value();
    const Tensor& B = b.value();
    if (X.rank() != 4 || W.rank() != 4)
        throw shape_error("conv2d: expects rank-4 input and kernel, got " + X.shape_string() +
                          " and " + W.shape_string());
    if (X.dim(1) != W.dim(1))
        throw shape_error("conv2d: channel mismatch " + X.shape_string() + " vs " +
                          W.shape_string());
    if (B.rank() != 1 || B.dim(0) != W.dim(0))
        throw shape_error("conv2d: bias shape " + B.shape_string() + " does not match kernels");
    if (stride < 1 || pad < 0) throw domain_error("conv2d: invalid stride or padding");
    const int N = X.dim(0), C = X.dim(1), H = X.dim(2), Wd = X.dim(3);
    const int OC = W.dim(0), KH = W.dim(2), KW = W.dim(3);
    const int OH = (H + 2 * pad - KH) / stride + 1;
    const int OW = (Wd + 2 * pad - KW) / stride + 1;
    if (OH <= 0 || OW <= 0)
        throw shape_error("conv2d: kernel larger than padded input " + X.shape_string());

    Tensor out({N, OC, OH, OW});
    {
        const double* xv = X.values().data();
        const double* wv = W.values().data();
        double* ov = out.values().data();
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < OC; ++oc) {
                const double bias = B[oc];
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        double acc = bias;
                        const int ih0 = oh * stride - pad;
                        const int iw0 = ow * stride - pad;
                        for (int c = 0; c < C; ++c) {
                            const double* xc = xv + ((n * C + c) * H) * Wd;
                            const double* wc = wv + ((oc * C + c) * KH) * KW;
                            for (int kh = 0; kh < KH; ++kh) {
                                const int ih = ih0 + kh;
                                if (ih < 0 || ih >= H) continue;
                                const double* xrow = xc + ih * Wd;
                                const double* wrow = wc + kh * KW;
                                for (int kw = 0; kw < KW; ++kw) {
                                    const int iw = iw0 + kw;
                                    if (iw < 0 || iw >= Wd) continue;
                                    acc += xrow[iw] * wrow[kw];
                                }
                            }
                        }
                        ov[((n * OC + oc) * OH + oh) * OW + ow] = acc;
                    }
            }
    }
    return make_op("conv2d", std::move(out), {x, w, b},
                   [N, C, H, Wd, OC, KH, KW, OH, OW, stride, pad](Node& nd) {
        const double* xv = nd.parents[0]->value.values().data();
        const double* wv = nd.parents[1]->value.values().data();
        const double* gv = nd.grad.data();
        const bool want_x = detail::parent_wants(nd, 0);
        const bool want_w = detail::parent_wants(nd, 1);
        const bool want_b = detail::parent_wants(nd, 2);
        double* gx = want_x ? detail::parent_grad(nd, 0).data() : nullptr;
        double* gw = want_w ? detail::parent_grad(nd, 1).data() : nullptr;
        double* gb = want_b ? detail::parent_grad(nd, 2).data() : nullptr;
        for (int n = 0; n < N; ++n)
            for (int oc = 0; oc < OC; ++oc)
                for (int oh = 0; oh < OH; ++oh)
                    for (int ow = 0; ow < OW; ++ow) {
                        const double g = gv[((n * OC + oc) * OH + oh) * OW + ow];
                        if (g == 0.0) continue;
                        if (want_b) gb[oc] += g;
                        const int ih0 = oh * stride - pad;
                        const int iw0 = ow * stride - pad;
                        for (int c = 0; c < C; ++c) {
                            const int xbase = ((n * C + c) * H) * Wd;
                            const int wbase = ((oc * C + c) * KH) * KW;
                            for (int kh = 0; kh < KH; ++kh) {
                                const int ih = ih0 + kh;
                                if (ih < 0 || ih >= H) continue;
                                for (int kw = 0; kw < KW; ++kw) {
                                    const int iw = iw0 + kw;
                                    if (iw < 0 || iw >= Wd) continue;
                                    const int xi = xbase + ih * Wd + iw;
                                    const int wi = wbase + kh * KW + kw;
                                    if (want_x) gx[xi] += g * wv[wi];
                                    if (want_w) gw[wi] += g * xv[xi];
                                }
                            }
                        }
                    }
    });
}

// (N,C,H,W) -> (N,C), mean over the spatial extent.
inline Var global_avg_pool(const Var& x) {
    const Tensor& X = x.value();
    if (X.rank() != 4) throw shape_error("global_avg_pool: expects a rank-4 operand");
    const int N = X.dim(0), C = X.dim(1), HW = X.dim(2) * X.dim(3);
    Tensor out({N, C});
    const auto& xv = X.values();
    const double inv = 1.0 / HW;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            const int base = (n * C + c) * HW;
            for (int i = 0; i < HW; ++i) s += xv[base + i];
            out[n * C + c] = s * inv;
        }
    return make_op("global_avg_pool", std::move(out), {x}, [N, C, HW, inv](Node& nd) {
        auto& g = detail::parent_grad(nd, 0);
        for (int n = 0; n < N; ++n)
            for (int c = 0; c < C; ++c) {
                const double gv = nd.grad[n * C + c] * inv;
                const int base = (n * C + c) * HW;
                for (int i = 0; i < HW; ++i) g[base + i] += gv;
            }
    });
}

// Row-wise log-softmax of (N,K), computed in the shifted log-sum-exp form.
inline Var log_softmax(const Var& z) {
    const Tensor& Z = z.value();
    if (Z.rank() != 2) throw shape_error("log_softmax: expects a rank-2 operand");
    const int n = Z.dim(0), k = Z.dim(1);
    Tensor out = Z;
    for (int i = 0; i < n; ++i) {
        double mx = out[i * k];
        for (int j = 1; j < k; ++j) mx = std::max(mx, out[i * k + j]);
        double lse = 0.0;
        for (int j = 0; j < k; ++j) lse += std::exp(out[i * k + j] - mx);
        lse = mx + std::log(lse);
        for (int j = 0; j < k; ++j) out[i * k + j] -= lse;
    }
    return make_op("log_softmax", std::move(out), {z}, [n, k](Node& nd) {
        const auto& lp = nd.value.values();
        auto& g = detail::parent_grad(nd, 0);
        for (int i = 0; i < n; ++i) {
            double gsum = 0.0;
            for (int j = 0; j < k; ++j) gsum += nd.grad[i * k + j];
            for (int j = 0; j < k; ++j)
                g[i * k + j] += nd.grad[i * k + j] - std::exp(lp[i * k + j]) * gsum;
        }
    });
}

}  // namespace arrest
