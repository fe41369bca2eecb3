#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ltmp/tensor.hpp"

namespace ltmp {

/// Handle to a node in a Graph.
struct Var {
    static constexpr std::size_t npos = std::numeric_limits<std::size_t>::max();
    std::size_t id = npos;

    bool valid() const noexcept { return id != npos; }
    bool operator==(const Var&) const = default;
};

/// Tape for reverse-mode differentiation over Tensor values.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// valid topological order for the backward sweep. A graph built with
/// `record == false` only evaluates values; no closures are kept.
template <std::floating_point T>
class Graph {
public:
    using Backward = std::function<void(Graph&, const Tensor<T>&)>;

    explicit Graph(bool record = true) : recording_(record) {}

    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;
    Graph(Graph&&) noexcept = default;
    Graph& operator=(Graph&&) noexcept = default;

    bool recording() const noexcept { return recording_; }
    std::size_t size() const noexcept { return nodes_.size(); }

    Var constant(Tensor<T> value) { return push(std::move(value), false, {}, "constant"); }

    /// A parameter leaf. Only trainable leaves receive gradients.
    Var leaf(Tensor<T> value, bool trainable) {
        return push(std::move(value), recording_ && trainable, {}, "leaf");
    }

    const Tensor<T>& value(Var v) const { return nodes_.at(v.id).value; }
    bool requires_grad(Var v) const { return nodes_.at(v.id).requires_grad; }

    /// Appends an op result. `fn` is kept only when some parent needs a gradient.
    Var record(Tensor<T> value, std::span<const Var> parents, Backward fn, std::string_view op) {
        if (!value.all_finite()) {
            throw NumericError(std::string(op) + " produced non-finite values");
        }
        bool needs = false;
        if (recording_) {
            for (Var p : parents) needs = needs || nodes_.at(p.id).requires_grad;
        }
        return push(std::move(value), needs, needs ? std::move(fn) : Backward{}, op);
    }

    Var record(Tensor<T> value, std::initializer_list<Var> parents, Backward fn, std::string_view op) {
        return record(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn), op);
    }

    /// Zero-initialised gradient slot of `v`, or nullptr when `v` needs none.
    Tensor<T>* grad_slot(Var v) {
        auto& node = nodes_.at(v.id);
        if (!node.requires_grad) return nullptr;
        if (node.grad.empty() && !node.value.empty()) node.grad = Tensor<T>(node.value.shape());
        return &node.grad;
    }

    void accumulate(Var v, const Tensor<T>& g) {
        auto& node = nodes_.at(v.id);
        if (!node.requires_grad) return;
        if (node.grad.empty()) {
            node.grad = g;
        } else {
            node.grad += g;
        }
    }

    /// Runs the backward sweep from a scalar node. Previous gradients are discarded.
    void backward(Var loss) {
        if (!recording_) throw std::logic_error("backward() on a graph built without recording");
        if (value(loss).size() != 1) {
            throw ShapeError("backward() needs a scalar loss, got " + shape_string(value(loss).shape()));
        }
        for (auto& node : nodes_) node.grad = Tensor<T>();
        if (!nodes_[loss.id].requires_grad) return;
        nodes_[loss.id].grad = Tensor<T>(value(loss).shape());
        nodes_[loss.id].grad[0] = T(1);
        for (std::size_t i = loss.id + 1; i-- > 0;) {
            auto& node = nodes_[i];
            if (node.grad.empty() || !node.backward) continue;
            // Closures never write to their own node, so the gradient can be lent out.
            Tensor<T> upstream = std::move(node.grad);
            node.backward(*this, upstream);
            nodes_[i].grad = std::move(upstream);
        }
    }

    /// Gradient accumulated at `v` by the last backward(); zeros when unreachable.
    Tensor<T> grad(Var v) const {
        const auto& node = nodes_.at(v.id);
        if (node.grad.empty()) return Tensor<T>(node.value.shape());
        return node.grad;
    }

    /// dloss/dp for each p in `wrt`.
    std::vector<Tensor<T>> gradients(Var loss, std::span<const Var> wrt) {
        backward(loss);
        std::vector<Tensor<T>> out;
        out.reserve(wrt.size());
        for (Var p : wrt) out.push_back(grad(p));
        return out;
    }

private:
    struct Node {
        Tensor<T> value;
        Tensor<T> grad;
        bool requires_grad = false;
        Backward backward;
        std::string_view op;
    };

    Var push(Tensor<T> value, bool requires_grad, Backward fn, std::string_view op) {
        nodes_.push_back(Node{std::move(value), Tensor<T>(), requires_grad, std::move(fn), op});
        return Var{nodes_.size() - 1};
    }

    std::vector<Node> nodes_;
    bool recording_ = true;
};

/// Differentiable operators. Each records its own backward closure.
namespace ad {

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
    }
}

}  // namespace detail

template <class T>
Var add(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    detail::require_same_shape(av, bv, "add");
    Tensor<T> out = av;
    out += bv;
    return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
        gr.accumulate(a, go);
        gr.accumulate(b, go);
    }, "add");
}

template <class T>
Var sub(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    detail::require_same_shape(av, bv, "sub");
    Tensor<T> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
        gr.accumulate(a, go);
        if (auto* gb = gr.grad_slot(b)) {
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] -= go[i];
        }
    }, "sub");
}

/// Elementwise product.
template <class T>
Var mul(Graph<T>& g, Var a, Var b) {
    const auto& av = g.value(a);
    const auto& bv = g.value(b);
    detail::require_same_shape(av, bv, "mul");
    Tensor<T> out(av.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
    return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* ga = gr.grad_slot(a)) {
            const auto& bv = gr.value(b);
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += go[i] * bv[i];
        }
        if (auto* gb = gr.grad_slot(b)) {
            const auto& av = gr.value(a);
            for (std::size_t i = 0; i < go.size(); ++i) (*gb)[i] += go[i] * av[i];
        }
    }, "mul");
}

template <class T>
Var scale(Graph<T>& g, Var a, T factor) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.values()) v *= factor;
    return g.record(std::move(out), {a}, [a, factor](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* ga = gr.grad_slot(a)) {
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += factor * go[i];
        }
    }, "scale");
}

template <class T>
Var add_scalar(Graph<T>& g, Var a, T offset) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.values()) v += offset;
    return g.record(std::move(out), {a}, [a](Graph<T>& gr, const Tensor<T>& go) { gr.accumulate(a, go); },
                    "add_scalar");
}

template <class T>
Var square(Graph<T>& g, Var a) {
    Tensor<T> out = g.value(a);
    for (auto& v : out.values()) v *= v;
    return g.record(std::move(out), {a}, [a](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* ga = gr.grad_slot(a)) {
            const auto& av = gr.value(a);
            for (std::size_t i = 0; i < go.size(); ++i) (*ga)[i] += T(2) * av[i] * go[i];
        }
    }, "square");
}

template <class T>
Var sum(Graph<T>& g, Var a) {
    T total = 0;
    for (T v : g.value(a).values()) total += v;
    return g.record(Tensor<T>::scalar(total), {a}, [a](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* ga = gr.grad_slot(a)) {
            for (auto& v : ga->values()) v += go[0];
        }
    }, "sum");
}

template <class T>
Var mean(Graph<T>& g, Var a) {
    const auto n = static_cast<T>(g.value(a).size());
    return scale(g, sum(g, a), T(1) / n);
}

template <class T>
Var matmul(Graph<T>& g, Var a, Var b) {
    Tensor<T> out = ltmp::matmul(g.value(a), g.value(b));
    return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
        if (gr.requires_grad(a)) gr.accumulate(a, ltmp::matmul_nt(go, gr.value(b)));
        if (gr.requires_grad(b)) gr.accumulate(b, ltmp::matmul_tn(gr.value(a), go));
    }, "matmul");
}

/// a * b^T
template <class T>
Var matmul_nt(Graph<T>& g, Var a, Var b) {
    Tensor<T> out = ltmp::matmul_nt(g.value(a), g.value(b));
    return g.record(std::move(out), {a, b}, [a, b](Graph<T>& gr, const Tensor<T>& go) {
        if (gr.requires_grad(a)) gr.accumulate(a, ltmp::matmul(go, gr.value(b)));
        if (gr.requires_grad(b)) gr.accumulate(b, ltmp::matmul_tn(go, gr.value(a)));
    }, "matmul_nt");
}

/// x[n x k] * w[k x p] + bias[p]
template <class T>
Var linear(Graph<T>& g, Var x, Var w, Var bias) {
    Tensor<T> out = ltmp::matmul(g.value(x), g.value(w));
    const auto& bv = g.value(bias);
    if (bv.size() != out.cols()) throw ShapeError("linear: bias length mismatch");
    for (std::size_t r = 0; r < out.rows(); ++r) {
        auto row = out.row(r);
        for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
    }
    return g.record(std::move(out), {x, w, bias}, [x, w, bias](Graph<T>& gr, const Tensor<T>& go) {
        if (gr.requires_grad(x)) gr.accumulate(x, ltmp::matmul_nt(go, gr.value(w)));
        if (gr.requires_grad(w)) gr.accumulate(w, ltmp::matmul_tn(gr.value(x), go));
        if (auto* gb = gr.grad_slot(bias)) {
            for (std::size_t r = 0; r < go.rows(); ++r) {
                const auto row = go.row(r);
                for (std::size_t c = 0; c < row.size(); ++c) (*gb)[c] += row[c];
            }
        }
    }, "linear");
}

template <class T>
Var layer_norm(Graph<T>& g, Var x, Var gamma, Var beta) {
    auto res = ltmp::layer_norm_full(g.value(x), g.value(gamma), g.value(beta));
    Tensor<T> out = std::move(res.out);
    return g.record(std::move(out), {x, gamma, beta},
                    [x, gamma, beta, xhat = std::move(res.normalized), rstd = std::move(res.inv_std)](
                        Graph<T>& gr, const Tensor<T>& go) {
        const std::size_t n = go.rows();
        const std::size_t d = go.cols();
        const auto& gm = gr.value(gamma);
        if (auto* gg = gr.grad_slot(gamma)) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) (*gg)[c] += go(r, c) * xhat(r, c);
        }
        if (auto* gb = gr.grad_slot(beta)) {
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t c = 0; c < d; ++c) (*gb)[c] += go(r, c);
        }
        if (auto* gx = gr.grad_slot(x)) {
            std::vector<T> dxhat(d);
            for (std::size_t r = 0; r < n; ++r) {
                T mean_d = 0;
                T mean_dx = 0;
                for (std::size_t c = 0; c < d; ++c) {
                    dxhat[c] = go(r, c) * gm[c];
                    mean_d += dxhat[c];
                    mean_dx += dxhat[c] * xhat(r, c);
                }
                mean_d /= T(d);
                mean_dx /= T(d);
                for (std::size_t c = 0; c < d; ++c) {
                    (*gx)(r, c) += rstd[r] * (dxhat[c] - mean_d - xhat(r, c) * mean_dx);
                }
            }
        }
    }, "layer_norm");
}

template <class T>
Var gelu(Graph<T>& g, Var x) {
    Tensor<T> out = ltmp::gelu(g.value(x));
    return g.record(std::move(out), {x}, [x](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gx = gr.grad_slot(x)) {
            const auto& xv = gr.value(x);
            for (std::size_t i = 0; i < go.size(); ++i) (*gx)[i] += go[i] * gelu_derivative(xv[i]);
        }
    }, "gelu");
}

template <class T>
Var softmax_rows(Graph<T>& g, Var a) {
    Tensor<T> out = ltmp::softmax_rows(g.value(a));
    return g.record(std::move(out), {a}, [a, probs = out](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* ga = gr.grad_slot(a)) {
            for (std::size_t i = 0; i < go.rows(); ++i) {
                T dot = 0;
                for (std::size_t j = 0; j < go.cols(); ++j) dot += go(i, j) * probs(i, j);
                for (std::size_t j = 0; j < go.cols(); ++j) (*ga)(i, j) += probs(i, j) * (go(i, j) - dot);
            }
        }
    }, "softmax_rows");
}

/// Row-wise masked softmax over logits `a` with a column mask vector.
///
/// The mask is differentiable: for masked-out columns (m_j = 0) the gradient
/// still sees exp(A_ij)/Z_i, which is what lets a hard 0 mask pass a
/// straight-through gradient back to its threshold.
template <class T>
Var masked_softmax(Graph<T>& g, Var a, Var mask) {
    const auto& av = g.value(a);
    const auto& mv = g.value(mask);
    Tensor<T> out = ltmp::masked_softmax_rows(av, mv.data());
    return g.record(std::move(out), {a, mask}, [a, mask, probs = out](Graph<T>& gr, const Tensor<T>& go) {
        const auto& av = gr.value(a);
        const auto& mv = gr.value(mask);
        auto* ga = gr.grad_slot(a);
        auto* gm = gr.grad_slot(mask);
        const std::size_t n = go.rows();
        const std::size_t m = go.cols();
        std::vector<T> unmasked(m);
        for (std::size_t i = 0; i < n; ++i) {
            T dot = 0;
            for (std::size_t j = 0; j < m; ++j) dot += go(i, j) * probs(i, j);
            // exp(A_ij - peak) / total, recomputed for every column including masked ones.
            T peak = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j < m; ++j)
                if (mv[j] > T(0)) peak = std::max(peak, av(i, j));
            T total = 0;
            for (std::size_t j = 0; j < m; ++j) {
                unmasked[j] = std::exp(av(i, j) - peak);
                if (mv[j] > T(0)) total += unmasked[j] * mv[j];
            }
            for (std::size_t j = 0; j < m; ++j) {
                const T p = unmasked[j] / total;
                const T centred = go(i, j) - dot;
                if (ga) (*ga)(i, j) += mv[j] * p * centred;
                if (gm) (*gm)[j] += p * centred;
            }
        }
    }, "masked_softmax");
}

template <class T>
Var slice_cols(Graph<T>& g, Var x, std::size_t begin, std::size_t end) {
    const auto& xv = g.value(x);
    if (xv.rank() != 2 || begin > end || end > xv.cols()) throw ShapeError("slice_cols: bad column range");
    const std::size_t w = end - begin;
    Tensor<T> out({xv.rows(), w});
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < w; ++c) out(r, c) = xv(r, begin + c);
    return g.record(std::move(out), {x}, [x, begin, w](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gx = gr.grad_slot(x)) {
            for (std::size_t r = 0; r < go.rows(); ++r)
                for (std::size_t c = 0; c < w; ++c) (*gx)(r, begin + c) += go(r, c);
        }
    }, "slice_cols");
}

template <class T>
Var concat_cols(Graph<T>& g, std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t rows = g.value(parts[0]).rows();
    std::vector<std::size_t> offsets;
    std::size_t width = 0;
    for (Var p : parts) {
        const auto& pv = g.value(p);
        if (pv.rank() != 2 || pv.rows() != rows) throw ShapeError("concat_cols: row count mismatch");
        offsets.push_back(width);
        width += pv.cols();
    }
    Tensor<T> out({rows, width});
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = g.value(parts[k]);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < pv.cols(); ++c) out(r, offsets[k] + c) = pv(r, c);
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return g.record(std::move(out), parts, [ps, offsets](Graph<T>& gr, const Tensor<T>& go) {
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (auto* gp = gr.grad_slot(ps[k])) {
                for (std::size_t r = 0; r < gp->rows(); ++r)
                    for (std::size_t c = 0; c < gp->cols(); ++c) (*gp)(r, c) += go(r, offsets[k] + c);
            }
        }
    }, "concat_cols");
}

template <class T>
Var concat_rows(Graph<T>& g, std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    const std::size_t cols = g.value(parts[0]).cols();
    std::vector<std::size_t> offsets;
    std::size_t rows = 0;
    for (Var p : parts) {
        const auto& pv = g.value(p);
        if (pv.cols() != cols) throw ShapeError("concat_rows: column count mismatch");
        offsets.push_back(rows);
        rows += pv.rows();
    }
    std::vector<T> data;
    data.reserve(rows * cols);
    for (Var p : parts) {
        const auto& pv = g.value(p).values();
        data.insert(data.end(), pv.begin(), pv.end());
    }
    std::vector<Var> ps(parts.begin(), parts.end());
    return g.record(Tensor<T>({rows, cols}, std::move(data)), parts,
                    [ps, offsets, cols](Graph<T>& gr, const Tensor<T>& go) {
        for (std::size_t k = 0; k < ps.size(); ++k) {
            if (auto* gp = gr.grad_slot(ps[k])) {
                const std::size_t base = offsets[k] * cols;
                for (std::size_t i = 0; i < gp->size(); ++i) (*gp)[i] += go[base + i];
            }
        }
    }, "concat_rows");
}

/// Selects rows of a matrix, or entries of a vector, in the given order.
template <class T>
Var gather_rows(Graph<T>& g, Var x, std::vector<std::size_t> index) {
    const auto& xv = g.value(x);
    const bool is_vector = xv.rank() == 1;
    const std::size_t width = is_vector ? 1 : xv.cols();
    const std::size_t n_in = is_vector ? xv.size() : xv.rows();
    std::vector<T> data;
    data.reserve(index.size() * width);
    for (std::size_t r : index) {
        if (r >= n_in) throw ShapeError("gather_rows: index out of range");
        for (std::size_t c = 0; c < width; ++c) data.push_back(xv[r * width + c]);
    }
    Shape shape = is_vector ? Shape{index.size()} : Shape{index.size(), width};
    return g.record(Tensor<T>(std::move(shape), std::move(data)), {x},
                    [x, index = std::move(index), width](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gx = gr.grad_slot(x)) {
            for (std::size_t k = 0; k < index.size(); ++k)
                for (std::size_t c = 0; c < width; ++c) (*gx)[index[k] * width + c] += go[k * width + c];
        }
    }, "gather_rows");
}

/// Places the rows of `x` at `index` inside a zero matrix with `rows` rows.
template <class T>
Var scatter_rows(Graph<T>& g, Var x, std::vector<std::size_t> index, std::size_t rows) {
    const auto& xv = g.value(x);
    if (xv.rank() != 2 || xv.rows() != index.size()) throw ShapeError("scatter_rows: index length mismatch");
    const std::size_t w = xv.cols();
    Tensor<T> out({rows, w});
    for (std::size_t k = 0; k < index.size(); ++k) {
        if (index[k] >= rows) throw ShapeError("scatter_rows: index out of range");
        for (std::size_t c = 0; c < w; ++c) out(index[k], c) = xv(k, c);
    }
    return g.record(std::move(out), {x}, [x, index = std::move(index), w](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gx = gr.grad_slot(x)) {
            for (std::size_t k = 0; k < index.size(); ++k)
                for (std::size_t c = 0; c < w; ++c) (*gx)(k, c) += go(index[k], c);
        }
    }, "scatter_rows");
}

/// x + diag(gate) * delta. `gate` is a constant per-row factor.
template <class T>
Var gated_residual(Graph<T>& g, Var x, Var delta, std::vector<T> gate) {
    const auto& xv = g.value(x);
    const auto& dv = g.value(delta);
    detail::require_same_shape(xv, dv, "gated_residual");
    if (gate.size() != xv.rows()) throw ShapeError("gated_residual: gate length mismatch");
    Tensor<T> out = xv;
    for (std::size_t r = 0; r < out.rows(); ++r) {
        if (gate[r] == T(0)) continue;
        auto o = out.row(r);
        const auto d = dv.row(r);
        for (std::size_t c = 0; c < o.size(); ++c) o[c] += gate[r] * d[c];
    }
    return g.record(std::move(out), {x, delta}, [x, delta, gate = std::move(gate)](Graph<T>& gr, const Tensor<T>& go) {
        gr.accumulate(x, go);
        if (auto* gd = gr.grad_slot(delta)) {
            for (std::size_t r = 0; r < go.rows(); ++r) {
                if (gate[r] == T(0)) continue;
                for (std::size_t c = 0; c < go.cols(); ++c) (*gd)(r, c) += gate[r] * go(r, c);
            }
        }
    }, "gated_residual");
}

/// One sequential row update: row[dst] <- w_dst * row[dst] + w_src * row[src].
struct RowMergeStep {
    std::size_t destination;
    std::size_t source;
    double destination_weight;
    double source_weight;
};

template <class T>
Var merge_rows(Graph<T>& g, Var x, std::vector<RowMergeStep> steps) {
    Tensor<T> out = g.value(x);
    for (const auto& s : steps) {
        if (s.destination == s.source) throw ShapeError("merge_rows: source equals destination");
        auto dst = out.row(s.destination);
        const auto src = out.row(s.source);
        for (std::size_t c = 0; c < dst.size(); ++c) {
            dst[c] = T(s.destination_weight) * dst[c] + T(s.source_weight) * src[c];
        }
    }
    return g.record(std::move(out), {x}, [x, steps = std::move(steps)](Graph<T>& gr, const Tensor<T>& go) {
        auto* gx = gr.grad_slot(x);
        if (!gx) return;
        Tensor<T> gcur = go;
        for (auto it = steps.rbegin(); it != steps.rend(); ++it) {
            auto gd = gcur.row(it->destination);
            auto gs = gcur.row(it->source);
            for (std::size_t c = 0; c < gd.size(); ++c) {
                gs[c] += T(it->source_weight) * gd[c];
                gd[c] *= T(it->destination_weight);
            }
        }
        *gx += gcur;
    }, "merge_rows");
}

/// -log softmax(logits)[label].
template <class T>
Var cross_entropy(Graph<T>& g, Var logits, std::size_t label) {
    const auto& lv = g.value(logits);
    if (label >= lv.size()) throw ShapeError("cross_entropy: label out of range");
    T peak = *std::max_element(lv.values().begin(), lv.values().end());
    T total = 0;
    for (T v : lv.values()) total += std::exp(v - peak);
    const T log_z = peak + std::log(total);
    return g.record(Tensor<T>::scalar(log_z - lv[label]), {logits},
                    [logits, label, log_z](Graph<T>& gr, const Tensor<T>& go) {
        if (auto* gl = gr.grad_slot(logits)) {
            const auto& lv = gr.value(logits);
            for (std::size_t i = 0; i < lv.size(); ++i) {
                const T p = std::exp(lv[i] - log_z);
                (*gl)[i] += go[0] * (p - (i == label ? T(1) : T(0)));
            }
        }
    }, "cross_entropy");
}

}  // namespace ad
}  // namespace ltmp
