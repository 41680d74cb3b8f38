#pragma once

#include <cmath>
#include <functional>
#include <utility>
#include <vector>

#include "htf/tensor.hpp"

namespace htf {

class Tape;

// Handle to a node on a tape. Cheap to copy; the tape owns all storage.
struct Var {
    Tape* tape = nullptr;
    int idx = -1;

    const Tensor& value() const;
    const Tensor& grad() const;
};

// Reverse-mode tape. Nodes are appended in execution order, so every op's
// inputs sit earlier on the tape and one reverse sweep is a valid
// topological traversal. Single-threaded; a crafting run owns its tape.
class Tape {
  public:
    using BackFn = std::function<void(Tape&, int)>;

    Var leaf(Tensor v, bool requires_grad = false) {
        nodes_.push_back(Node{std::move(v), Tensor{}, requires_grad, false, nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    Var constant(Tensor v) { return leaf(std::move(v), false); }

    // Records an op node. The backward closure is dropped when no input
    // needs gradients, which makes grad-free decoding skip all of it.
    Var record(Tensor value, bool needs_grad, BackFn back) {
        nodes_.push_back(Node{std::move(value), Tensor{}, needs_grad, false, needs_grad ? std::move(back) : nullptr});
        return Var{this, static_cast<int>(nodes_.size()) - 1};
    }

    const Tensor& value(int idx) const { return nodes_[static_cast<std::size_t>(idx)].value; }

    bool needs_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].needs_grad; }

    bool has_grad(int idx) const { return nodes_[static_cast<std::size_t>(idx)].has_grad; }

    // Gradient buffer, zero-initialized on first touch. Fan-out accumulates
    // additively because every backward rule adds into this buffer.
    Tensor& grad_buf(int idx) {
        Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.has_grad) {
            n.grad = Tensor::zeros(n.value.shape);
            n.has_grad = true;
        }
        return n.grad;
    }

    const Tensor& grad(int idx) const {
        const Node& n = nodes_[static_cast<std::size_t>(idx)];
        if (!n.has_grad) throw ContractError("Tape::grad: node was not reached by a backward pass");
        return n.grad;
    }

    // Reverse sweep from a scalar loss. Visits each recorded op exactly once.
    void backward(Var loss) {
        if (loss.tape != this) throw ContractError("Tape::backward: loss lives on a different tape");
        const Tensor& lv = value(loss.idx);
        if (!lv.is_scalar())
            throw ContractError("Tape::backward: loss must be scalar, got shape " + Tensor::shape_str(lv.shape));
        for (Node& n : nodes_) n.has_grad = false;
        grad_buf(loss.idx).data[0] = 1.0;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            Node& n = nodes_[i];
            if (n.has_grad && n.back) n.back(*this, static_cast<int>(i));
        }
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

  private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        bool has_grad = false;
        BackFn back;
    };

    std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape->value(idx); }
inline const Tensor& Var::grad() const { return tape->grad(idx); }

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ContractError(std::string(op) + ": operands live on different tapes");
    return *a.tape;
}

}  // namespace detail

// ----------------------------- primitive ops -----------------------------

// Elementwise sum. A rank-1 right operand is broadcast over the leading
// dimension of a rank-2 left operand (bias add); nothing else broadcasts.
inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "add");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    const bool bcast = av.rank() == 2 && bv.rank() == 1 && bv.shape[0] == av.cols();
    if (!bcast && !av.same_shape(bv))
        throw ShapeError("add: shape mismatch " + Tensor::shape_str(av.shape) + " vs " + Tensor::shape_str(bv.shape));
    Tensor out = av;
    if (bcast) {
        const int r = av.rows(), c = av.cols();
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) out.at(i, j) += bv[static_cast<std::size_t>(j)];
    } else {
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    }
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    return t.record(std::move(out), need, [ia, ib, bcast](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad_buf(ia);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad_buf(ib);
            if (bcast) {
                const int r = g.rows(), c = g.cols();
                for (int i = 0; i < r; ++i)
                    for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += g.at(i, j);
            } else {
                for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
            }
        }
    });
}

// Elementwise product, same shapes only.
inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "mul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    if (!av.same_shape(bv))
        throw ShapeError("mul: shape mismatch " + Tensor::shape_str(av.shape) + " vs " + Tensor::shape_str(bv.shape));
    Tensor out = av;
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    return t.record(std::move(out), need, [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad_buf(ia);
            const Tensor& bval = tp.value(ib);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bval[i];
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad_buf(ib);
            const Tensor& aval = tp.value(ia);
            for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * aval[i];
        }
    });
}

// Multiply by a fixed scalar (no gradient through the scalar).
inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (double& v : out.data) v *= c;
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia, c](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * c;
    });
}

inline Var sub(Var a, Var b) { return add(a, scale(b, -1.0)); }

// C = A * B. Backward: gA += g * B^T, gB += A^T * g.
inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "matmul");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = Tensor::zeros({av.rows(), bv.cols()});
    matmul_into(av, bv, out, false);
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    return t.record(std::move(out), need, [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) matmul_nt_into(g, tp.value(ib), tp.grad_buf(ia), true);
        if (tp.needs_grad(ib)) matmul_tn_into(tp.value(ia), g, tp.grad_buf(ib), true);
    });
}

// C = A * B^T. Backward: gA += g * B, gB += g^T * A.
inline Var matmul_nt(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "matmul_nt");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    Tensor out = Tensor::zeros({av.rows(), bv.rows()});
    matmul_nt_into(av, bv, out, false);
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    return t.record(std::move(out), need, [ia, ib](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) matmul_into(g, tp.value(ib), tp.grad_buf(ia), true);
        if (tp.needs_grad(ib)) matmul_tn_into(g, tp.value(ia), tp.grad_buf(ib), true);
    });
}

// Row-wise softmax with max-subtraction; rank-1 input is one row.
inline Var softmax(Var a) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    if (av.rank() != 1 && av.rank() != 2)
        throw ShapeError("softmax: expected rank 1 or 2, got " + Tensor::shape_str(av.shape));
    const int r = av.rank() == 2 ? av.rows() : 1;
    const int c = av.rank() == 2 ? av.cols() : av.shape[0];
    if (c < 1) throw ContractError("softmax: empty axis");
    Tensor out = av;
    for (int i = 0; i < r; ++i) {
        double* row = out.data.data() + static_cast<std::size_t>(i) * c;
        double m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            row[j] = std::exp(row[j] - m);
            s += row[j];
        }
        for (int j = 0; j < c; ++j) row[j] /= s;
    }
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia, r, c](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        const Tensor& s = tp.value(self);
        Tensor& ga = tp.grad_buf(ia);
        for (int i = 0; i < r; ++i) {
            const std::size_t off = static_cast<std::size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += g[off + j] * s[off + j];
            for (int j = 0; j < c; ++j) ga[off + j] += s[off + j] * (g[off + j] - dot);
        }
    });
}

// Natural log. Requires x >= 1e-300; never clamps silently.
inline Var log(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (double& v : out.data) {
        if (!(v >= 1e-300))
            throw ContractError("log: input " + fmt_double(v) + " below 1e-300");
        v = std::log(v);
    }
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(ia);
        Tensor& ga = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / x[i];
    });
}

// Exponential. Requires x <= 709 so the result stays finite.
inline Var exp(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (double& v : out.data) {
        if (!(v <= 709.0))
            throw ContractError("exp: input " + fmt_double(v) + " above 709 would overflow");
        v = std::exp(v);
    }
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        const Tensor& y = tp.value(self);
        Tensor& ga = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * y[i];
    });
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor out = a.value();
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        const Tensor& x = tp.value(ia);
        Tensor& ga = tp.grad_buf(ia);
        for (std::size_t i = 0; i < g.numel(); ++i)
            if (x[i] > 0.0) ga[i] += g[i];
    });
}

// Row-wise layer normalization with learnable gain and bias.
inline Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5) {
    Tape& t = detail::same_tape(x, gain, "layer_norm");
    detail::same_tape(gain, bias, "layer_norm");
    const Tensor& xv = x.value();
    xv.require_rank(2, "layer_norm");
    const int r = xv.rows(), c = xv.cols();
    const Tensor& gv = gain.value();
    const Tensor& bv = bias.value();
    if (gv.rank() != 1 || gv.shape[0] != c || bv.rank() != 1 || bv.shape[0] != c)
        throw ShapeError("layer_norm: gain/bias must be rank-1 of width " + std::to_string(c));
    Tensor out = Tensor::zeros({r, c});
    Tensor xhat = Tensor::zeros({r, c});
    Tensor inv_std = Tensor::zeros({r});
    for (int i = 0; i < r; ++i) {
        const double* row = xv.data.data() + static_cast<std::size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<std::size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            const double h = (row[j] - mean) * is;
            xhat.at(i, j) = h;
            out.at(i, j) = h * gv[static_cast<std::size_t>(j)] + bv[static_cast<std::size_t>(j)];
        }
    }
    const bool need = t.needs_grad(x.idx) || t.needs_grad(gain.idx) || t.needs_grad(bias.idx);
    const int ix = x.idx, ig = gain.idx, ib = bias.idx;
    return t.record(std::move(out), need,
                    [ix, ig, ib, r, c, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& tp, int self) {
                        const Tensor& g = tp.grad(self);
                        const Tensor& gv = tp.value(ig);
                        if (tp.needs_grad(ig)) {
                            Tensor& gg = tp.grad_buf(ig);
                            for (int i = 0; i < r; ++i)
                                for (int j = 0; j < c; ++j) gg[static_cast<std::size_t>(j)] += g.at(i, j) * xhat.at(i, j);
                        }
                        if (tp.needs_grad(ib)) {
                            Tensor& gb = tp.grad_buf(ib);
                            for (int i = 0; i < r; ++i)
                                for (int j = 0; j < c; ++j) gb[static_cast<std::size_t>(j)] += g.at(i, j);
                        }
                        if (tp.needs_grad(ix)) {
                            Tensor& gx = tp.grad_buf(ix);
                            for (int i = 0; i < r; ++i) {
                                double sum_gy = 0.0;
                                double sum_gyx = 0.0;
                                for (int j = 0; j < c; ++j) {
                                    const double gy = g.at(i, j) * gv[static_cast<std::size_t>(j)];
                                    sum_gy += gy;
                                    sum_gyx += gy * xhat.at(i, j);
                                }
                                const double is = inv_std[static_cast<std::size_t>(i)];
                                for (int j = 0; j < c; ++j) {
                                    const double gy = g.at(i, j) * gv[static_cast<std::size_t>(j)];
                                    gx.at(i, j) += (gy - sum_gy / c - xhat.at(i, j) * sum_gyx / c) * is;
                                }
                            }
                        }
                    });
}

// Embedding lookup: out[i] = table[ids[i]]. Backward scatter-adds rows.
inline Var gather_rows(Var table, const std::vector<int>& ids) {
    Tape& t = *table.tape;
    const Tensor& tv = table.value();
    tv.require_rank(2, "gather_rows");
    const int c = tv.cols();
    Tensor out = Tensor::zeros({static_cast<int>(ids.size()), c});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= tv.rows())
            throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) + " outside table of " +
                                    std::to_string(tv.rows()) + " rows");
        std::copy_n(tv.data.data() + static_cast<std::size_t>(ids[i]) * c, c,
                    out.data.data() + i * static_cast<std::size_t>(c));
    }
    const int it = table.idx;
    return t.record(std::move(out), t.needs_grad(it), [it, ids, c](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        Tensor& gt = tp.grad_buf(it);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            double* dst = gt.data.data() + static_cast<std::size_t>(ids[i]) * c;
            const double* src = g.data.data() + i * static_cast<std::size_t>(c);
            for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

inline Var slice_rows(Var a, int r0, int r1) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    av.require_rank(2, "slice_rows");
    if (r0 < 0 || r1 > av.rows() || r0 >= r1)
        throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) + ") out of " +
                         std::to_string(av.rows()) + " rows");
    const int c = av.cols();
    Tensor out({r1 - r0, c},
               std::vector<double>(av.data.begin() + static_cast<std::ptrdiff_t>(r0) * c,
                                   av.data.begin() + static_cast<std::ptrdiff_t>(r1) * c));
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia, r0, c](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad_buf(ia);
        double* dst = ga.data.data() + static_cast<std::size_t>(r0) * c;
        for (std::size_t i = 0; i < g.numel(); ++i) dst[i] += g[i];
    });
}

inline Var slice_cols(Var a, int c0, int c1) {
    Tape& t = *a.tape;
    const Tensor& av = a.value();
    av.require_rank(2, "slice_cols");
    if (c0 < 0 || c1 > av.cols() || c0 >= c1)
        throw ShapeError("slice_cols: range [" + std::to_string(c0) + "," + std::to_string(c1) + ") out of " +
                         std::to_string(av.cols()) + " cols");
    const int r = av.rows(), c = av.cols(), w = c1 - c0;
    Tensor out = Tensor::zeros({r, w});
    for (int i = 0; i < r; ++i)
        std::copy_n(av.data.data() + static_cast<std::size_t>(i) * c + c0, w,
                    out.data.data() + static_cast<std::size_t>(i) * w);
    const int ia = a.idx;
    return t.record(std::move(out), t.needs_grad(ia), [ia, r, c, c0, w](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        Tensor& ga = tp.grad_buf(ia);
        for (int i = 0; i < r; ++i) {
            double* dst = ga.data.data() + static_cast<std::size_t>(i) * c + c0;
            const double* src = g.data.data() + static_cast<std::size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += src[j];
        }
    });
}

inline Var concat_rows(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "concat_rows");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    av.require_rank(2, "concat_rows");
    bv.require_rank(2, "concat_rows");
    if (av.cols() != bv.cols())
        throw ShapeError("concat_rows: width mismatch " + Tensor::shape_str(av.shape) + " vs " +
                         Tensor::shape_str(bv.shape));
    Tensor out = Tensor::zeros({av.rows() + bv.rows(), av.cols()});
    std::copy(av.data.begin(), av.data.end(), out.data.begin());
    std::copy(bv.data.begin(), bv.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(av.numel()));
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    const std::size_t na = av.numel();
    return t.record(std::move(out), need, [ia, ib, na](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad_buf(ia);
            for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad_buf(ib);
            for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[na + i];
        }
    });
}

inline Var concat_cols(Var a, Var b) {
    Tape& t = detail::same_tape(a, b, "concat_cols");
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    av.require_rank(2, "concat_cols");
    bv.require_rank(2, "concat_cols");
    if (av.rows() != bv.rows())
        throw ShapeError("concat_cols: height mismatch " + Tensor::shape_str(av.shape) + " vs " +
                         Tensor::shape_str(bv.shape));
    const int r = av.rows(), ca = av.cols(), cb = bv.cols();
    Tensor out = Tensor::zeros({r, ca + cb});
    for (int i = 0; i < r; ++i) {
        std::copy_n(av.data.data() + static_cast<std::size_t>(i) * ca, ca,
                    out.data.data() + static_cast<std::size_t>(i) * (ca + cb));
        std::copy_n(bv.data.data() + static_cast<std::size_t>(i) * cb, cb,
                    out.data.data() + static_cast<std::size_t>(i) * (ca + cb) + ca);
    }
    const bool need = t.needs_grad(a.idx) || t.needs_grad(b.idx);
    const int ia = a.idx, ib = b.idx;
    return t.record(std::move(out), need, [ia, ib, r, ca, cb](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        if (tp.needs_grad(ia)) {
            Tensor& ga = tp.grad_buf(ia);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < ca; ++j)
                    ga.at(i, j) += g[static_cast<std::size_t>(i) * (ca + cb) + j];
        }
        if (tp.needs_grad(ib)) {
            Tensor& gb = tp.grad_buf(ib);
            for (int i = 0; i < r; ++i)
                for (int j = 0; j < cb; ++j)
                    gb.at(i, j) += g[static_cast<std::size_t>(i) * (ca + cb) + ca + j];
        }
    });
}

// Per-row cross-entropy from logits: out[i] = logsumexp(z_i) - z_i[target_i].
// Backward on z is softmax(z) - onehot(target), scaled by the row's grad.
inline Var cross_entropy_rows(Var z, const std::vector<int>& targets) {
    Tape& t = *z.tape;
    const Tensor& zv = z.value();
    zv.require_rank(2, "cross_entropy_rows");
    const int r = zv.rows(), c = zv.cols();
    if (static_cast<int>(targets.size()) != r)
        throw ShapeError("cross_entropy_rows: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(r) + " rows");
    Tensor out = Tensor::zeros({r});
    Tensor probs = Tensor::zeros({r, c});
    for (int i = 0; i < r; ++i) {
        const int tgt = targets[static_cast<std::size_t>(i)];
        if (tgt < 0 || tgt >= c)
            throw std::out_of_range("cross_entropy_rows: target " + std::to_string(tgt) + " outside vocab of " +
                                    std::to_string(c));
        const double* row = zv.data.data() + static_cast<std::size_t>(i) * c;
        double m = row[0];
        for (int j = 1; j < c; ++j) m = std::max(m, row[j]);
        double s = 0.0;
        for (int j = 0; j < c; ++j) {
            const double e = std::exp(row[j] - m);
            probs.at(i, j) = e;
            s += e;
        }
        for (int j = 0; j < c; ++j) probs.at(i, j) /= s;
        out[static_cast<std::size_t>(i)] = m + std::log(s) - row[tgt];
    }
    const int iz = z.idx;
    return t.record(std::move(out), t.needs_grad(iz),
                    [iz, targets, r, c, probs = std::move(probs)](Tape& tp, int self) {
                        const Tensor& g = tp.grad(self);
                        Tensor& gz = tp.grad_buf(iz);
                        for (int i = 0; i < r; ++i) {
                            const double gi = g[static_cast<std::size_t>(i)];
                            if (gi == 0.0) continue;
                            double* dst = gz.data.data() + static_cast<std::size_t>(i) * c;
                            const double* p = probs.data.data() + static_cast<std::size_t>(i) * c;
                            for (int j = 0; j < c; ++j) dst[j] += gi * p[j];
                            dst[targets[static_cast<std::size_t>(i)]] -= gi;
                        }
                    });
}

// Scalar cross-entropy of one logit vector against a token id.
inline Var cross_entropy_from_logits(Var z, int target) {
    Tape& t = *z.tape;
    const Tensor& zv = z.value();
    if (zv.rank() != 1) throw ShapeError("cross_entropy_from_logits: expected rank-1 logits");
    const int n = zv.shape[0];
    Var z2 = t.record(Tensor({1, n}, zv.data), t.needs_grad(z.idx), [iz = z.idx](Tape& tp, int self) {
        const Tensor& g = tp.grad(self);
        Tensor& gz = tp.grad_buf(iz);
        for (std::size_t i = 0; i < g.numel(); ++i) gz[i] += g[i];
    });
    Var ce = cross_entropy_rows(z2, {target});
    // rank-1 [1] result already scalar by numel
    return ce;
}

inline Var sum_all(Var a) {
    Tape& t = *a.tape;
    double s = 0.0;
    for (double v : a.value().data) s += v;
    const int ia = a.idx;
    return t.record(Tensor::scalar(s), t.needs_grad(ia), [ia](Tape& tp, int self) {
        const double g = tp.grad(self)[0];
        Tensor& ga = tp.grad_buf(ia);
        for (double& v : ga.data) v += g;
    });
}

inline Var mean_all(Var a) {
    Tape& t = *a.tape;
    const std::size_t n = a.value().numel();
    if (n == 0) throw ContractError("mean_all: empty tensor");
    double s = 0.0;
    for (double v : a.value().data) s += v;
    const int ia = a.idx;
    return t.record(Tensor::scalar(s / static_cast<double>(n)), t.needs_grad(ia), [ia, n](Tape& tp, int self) {
        const double g = tp.grad(self)[0] / static_cast<double>(n);
        Tensor& ga = tp.grad_buf(ia);
        for (double& v : ga.data) v += g;
    });
}

// ----------------------------- gradient checking -----------------------------

// Central-difference check of a scalar-valued tensor function. Returns the
// max over coordinates of |analytic - fd| / (|analytic| + 1e-8). The forward
// evaluations are independent of the backward rules they check.
inline double check_gradient(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double h = 1e-5) {
    Tape tape;
    Var xv = tape.leaf(x, true);
    Var loss = f(tape, xv);
    if (!loss.value().is_scalar()) throw ContractError("check_gradient: f must be scalar-valued");
    tape.backward(loss);
    Tensor analytic = tape.has_grad(xv.idx) ? xv.grad() : Tensor::zeros(x.shape);

    auto eval = [&f](const Tensor& point) {
        Tape t2;
        Var v = t2.leaf(point, false);
        return f(t2, v).value().item();
    };

    double worst = 0.0;
    Tensor probe = x;
    for (std::size_t i = 0; i < x.numel(); ++i) {
        const double orig = probe[i];
        probe[i] = orig + h;
        const double fp = eval(probe);
        probe[i] = orig - h;
        const double fm = eval(probe);
        probe[i] = orig;
        const double fd = (fp - fm) / (2.0 * h);
        const double err = std::abs(analytic[i] - fd) / (std::abs(analytic[i]) + 1e-8);
        worst = std::max(worst, err);
    }
    return worst;
}

}  // namespace htf
