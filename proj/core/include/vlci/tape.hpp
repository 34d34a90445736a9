#pragma once

#include "vlci/common.hpp"

#include <functional>
#include <limits>
#include <utility>
#include <vector>

namespace vlci::ad {

// Reverse-mode autodiff over dense row-major matrices. A Tape is rebuilt for
// every forward pass; parameters enter as leaves whose gradients are routed
// into external accumulators. Evaluation order is fixed, so fixed inputs give
// bitwise-identical outputs.
template <typename T>
class Tape {
public:
    struct Node {
        Mat<T> value;
        Mat<T> grad;                       // lazily sized on first contribution
        std::function<void(Tape&, int)> pull;  // propagates grad to parents
        Mat<T>* external_grad = nullptr;   // parameter leaves accumulate here
        bool needs_grad = false;
    };

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }

    int push(Mat<T> value, bool needs_grad, std::function<void(Tape&, int)> pull) {
        Node n;
        n.value = std::move(value);
        n.needs_grad = grad_enabled_ && needs_grad;
        if (n.needs_grad) n.pull = std::move(pull);
        nodes_.push_back(std::move(n));
        return static_cast<int>(nodes_.size()) - 1;
    }

    const Mat<T>& value(int id) const { return nodes_[id].value; }
    Node& node(int id) { return nodes_[id]; }
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }

    void accum(int id, const Mat<T>& delta) {
        Node& n = nodes_[id];
        if (!n.needs_grad) return;
        if (n.grad.size() == 0) {
            n.grad = delta;
        } else {
            n.grad += delta;
        }
    }

    // Backpropagate from a scalar (1x1) node.
    void backward(int loss_id) {
        if (!grad_enabled_) throw Error("tape: backward on a no-grad tape");
        const Mat<T>& lv = nodes_[loss_id].value;
        if (lv.rows() != 1 || lv.cols() != 1) {
            throw ShapeError("tape: backward expects a scalar loss node");
        }
        nodes_[loss_id].grad = Mat<T>::Ones(1, 1);
        for (int id = loss_id; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.needs_grad || n.grad.size() == 0) continue;
            if (n.external_grad) {
                if (n.external_grad->size() == 0) {
                    *n.external_grad = n.grad;
                } else {
                    *n.external_grad += n.grad;
                }
            }
            if (n.pull) n.pull(*this, id);
        }
    }

    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<Node> nodes_;
    bool grad_enabled_;
};

template <typename T>
struct Var {
    Tape<T>* tape = nullptr;
    int id = -1;

    const Mat<T>& value() const { return tape->value(id); }
    bool needs_grad() const { return tape->needs_grad(id); }
};

template <typename T>
Var<T> constant(Tape<T>& tape, Mat<T> v) {
    return {&tape, tape.push(std::move(v), false, nullptr)};
}

template <typename T>
Var<T> leaf(Tape<T>& tape, Mat<T> v, Mat<T>* grad_sink) {
    int id = tape.push(std::move(v), true, nullptr);
    tape.node(id).external_grad = grad_sink;
    return {&tape, id};
}

namespace detail {
template <typename T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
    if (a.tape != b.tape) throw Error("tape: variables from different tapes");
    return *a.tape;
}
}  // namespace detail

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    if (a.value().rows() != b.value().rows() || a.value().cols() != b.value().cols()) {
        throw ShapeError("add: shape mismatch");
    }
    Mat<T> v = a.value() + b.value();
    int ai = a.id, bi = b.id;
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, g);
                        tp.accum(bi, g);
                    });
    return {&t, id};
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    Mat<T> v = a.value() - b.value();
    int ai = a.id, bi = b.id;
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, g);
                        tp.accum(bi, Mat<T>(-g));
                    });
    return {&t, id};
}

template <typename T>
Var<T> scale(Var<T> a, T c) {
    Tape<T>& t = *a.tape;
    Mat<T> v = a.value() * c;
    int ai = a.id;
    int id = t.push(std::move(v), a.needs_grad(), [ai, c](Tape<T>& tp, int self) {
        tp.accum(ai, Mat<T>(tp.node(self).grad * c));
    });
    return {&t, id};
}

template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    Mat<T> v = a.value().cwiseProduct(b.value());
    int ai = a.id, bi = b.id;
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, Mat<T>(g.cwiseProduct(tp.value(bi))));
                        tp.accum(bi, Mat<T>(g.cwiseProduct(tp.value(ai))));
                    });
    return {&t, id};
}

template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    if (a.value().cols() != b.value().rows()) throw ShapeError("matmul: inner dim mismatch");
    Mat<T> v = a.value() * b.value();
    int ai = a.id, bi = b.id;
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, Mat<T>(g * tp.value(bi).transpose()));
                        tp.accum(bi, Mat<T>(tp.value(ai).transpose() * g));
                    });
    return {&t, id};
}

template <typename T>
Var<T> transpose(Var<T> a) {
    Tape<T>& t = *a.tape;
    Mat<T> v = a.value().transpose();
    int ai = a.id;
    int id = t.push(std::move(v), a.needs_grad(), [ai](Tape<T>& tp, int self) {
        tp.accum(ai, Mat<T>(tp.node(self).grad.transpose()));
    });
    return {&t, id};
}

// Broadcast a 1xC row over all rows of m.
template <typename T>
Var<T> add_rowvec(Var<T> m, Var<T> row) {
    Tape<T>& t = detail::same_tape(m, row);
    if (row.value().rows() != 1 || row.value().cols() != m.value().cols()) {
        throw ShapeError("add_rowvec: row must be 1 x cols(m)");
    }
    Mat<T> v = m.value();
    v.rowwise() += row.value().row(0);
    int mi = m.id, ri = row.id;
    int id = t.push(std::move(v), m.needs_grad() || row.needs_grad(),
                    [mi, ri](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(mi, g);
                        tp.accum(ri, Mat<T>(g.colwise().sum()));
                    });
    return {&t, id};
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    if (a.value().cols() != b.value().cols()) throw ShapeError("concat_rows: col mismatch");
    Mat<T> v(a.value().rows() + b.value().rows(), a.value().cols());
    v.topRows(a.value().rows()) = a.value();
    v.bottomRows(b.value().rows()) = b.value();
    int ai = a.id, bi = b.id;
    const Eigen::Index ra = a.value().rows();
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi, ra](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, Mat<T>(g.topRows(ra)));
                        tp.accum(bi, Mat<T>(g.bottomRows(g.rows() - ra)));
                    });
    return {&t, id};
}

template <typename T>
Var<T> concat_cols(Var<T> a, Var<T> b) {
    Tape<T>& t = detail::same_tape(a, b);
    if (a.value().rows() != b.value().rows()) throw ShapeError("concat_cols: row mismatch");
    Mat<T> v(a.value().rows(), a.value().cols() + b.value().cols());
    v.leftCols(a.value().cols()) = a.value();
    v.rightCols(b.value().cols()) = b.value();
    int ai = a.id, bi = b.id;
    const Eigen::Index ca = a.value().cols();
    int id = t.push(std::move(v), a.needs_grad() || b.needs_grad(),
                    [ai, bi, ca](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        tp.accum(ai, Mat<T>(g.leftCols(ca)));
                        tp.accum(bi, Mat<T>(g.rightCols(g.cols() - ca)));
                    });
    return {&t, id};
}

template <typename T>
Var<T> slice_rows(Var<T> a, int start, int n) {
    Tape<T>& t = *a.tape;
    if (start < 0 || n < 0 || start + n > a.value().rows()) throw ShapeError("slice_rows: out of range");
    Mat<T> v = a.value().middleRows(start, n);
    int ai = a.id;
    const Eigen::Index rows = a.value().rows(), cols = a.value().cols();
    int id = t.push(std::move(v), a.needs_grad(), [ai, start, n, rows, cols](Tape<T>& tp, int self) {
        Mat<T> g = Mat<T>::Zero(rows, cols);
        g.middleRows(start, n) = tp.node(self).grad;
        tp.accum(ai, g);
    });
    return {&t, id};
}

template <typename T>
Var<T> slice_cols(Var<T> a, int start, int n) {
    Tape<T>& t = *a.tape;
    if (start < 0 || n < 0 || start + n > a.value().cols()) throw ShapeError("slice_cols: out of range");
    Mat<T> v = a.value().middleCols(start, n);
    int ai = a.id;
    const Eigen::Index rows = a.value().rows(), cols = a.value().cols();
    int id = t.push(std::move(v), a.needs_grad(), [ai, start, n, rows, cols](Tape<T>& tp, int self) {
        Mat<T> g = Mat<T>::Zero(rows, cols);
        g.middleCols(start, n) = tp.node(self).grad;
        tp.accum(ai, g);
    });
    return {&t, id};
}

// Row-wise softmax with an optional keep-mask (true = admissible key).
// A row with no admissible key has no valid distribution.
template <typename T>
Var<T> softmax_rows(Var<T> logits, const std::vector<std::uint8_t>* keep = nullptr) {
    Tape<T>& t = *logits.tape;
    const Mat<T>& x = logits.value();
    const Eigen::Index R = x.rows(), C = x.cols();
    if (keep && static_cast<Eigen::Index>(keep->size()) != R * C) {
        throw ShapeError("softmax_rows: mask size mismatch");
    }
    Mat<T> s(R, C);
    for (Eigen::Index i = 0; i < R; ++i) {
        T mx = -std::numeric_limits<T>::infinity();
        for (Eigen::Index j = 0; j < C; ++j) {
            const bool ok = !keep || (*keep)[i * C + j];
            if (ok && x(i, j) > mx) mx = x(i, j);
        }
        if (mx == -std::numeric_limits<T>::infinity()) {
            throw ShapeError("softmax_rows: fully masked row " + std::to_string(i));
        }
        T z = 0;
        for (Eigen::Index j = 0; j < C; ++j) {
            const bool ok = !keep || (*keep)[i * C + j];
            const T e = ok ? std::exp(x(i, j) - mx) : T(0);
            s(i, j) = e;
            z += e;
        }
        s.row(i) /= z;
    }
    int li = logits.id;
    int id = t.push(std::move(s), logits.needs_grad(), [li](Tape<T>& tp, int self) {
        const Mat<T>& g = tp.node(self).grad;
        const Mat<T>& y = tp.value(self);
        Mat<T> gy = g.cwiseProduct(y);
        Mat<T> dx = gy;
        Eigen::Matrix<T, Eigen::Dynamic, 1> rowsum = gy.rowwise().sum();
        for (Eigen::Index i = 0; i < dx.rows(); ++i) {
            dx.row(i) -= rowsum(i) * y.row(i);
        }
        tp.accum(li, dx);
    });
    return {&t, id};
}

// Per-row layer normalization with learned gain/bias (1xC each).
template <typename T>
Var<T> layernorm_rows(Var<T> x, Var<T> gain, Var<T> bias, T eps = T(1e-5)) {
    Tape<T>& t = *x.tape;
    const Mat<T>& xv = x.value();
    const Eigen::Index R = xv.rows(), C = xv.cols();
    if (gain.value().cols() != C || bias.value().cols() != C) {
        throw ShapeError("layernorm_rows: gain/bias width mismatch");
    }
    Mat<T> xhat(R, C);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_sigma(R);
    for (Eigen::Index i = 0; i < R; ++i) {
        const T mu = xv.row(i).mean();
        const T var = (xv.row(i).array() - mu).square().mean();
        const T is = T(1) / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * is;
        inv_sigma(i) = is;
    }
    Mat<T> y = xhat;
    for (Eigen::Index i = 0; i < R; ++i) {
        y.row(i) = xhat.row(i).cwiseProduct(gain.value().row(0)) + bias.value().row(0);
    }
    int xi = x.id, gi = gain.id, bi = bias.id;
    // cache xhat and inv_sigma as constants on the tape for the backward pass
    int cache_id = t.push(std::move(xhat), false, nullptr);
    Mat<T> is_mat = inv_sigma;
    int is_id = t.push(std::move(is_mat), false, nullptr);
    int id = t.push(std::move(y), x.needs_grad() || gain.needs_grad() || bias.needs_grad(),
                    [xi, gi, bi, cache_id, is_id](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        const Mat<T>& xh = tp.value(cache_id);
                        const Mat<T>& is = tp.value(is_id);
                        const Mat<T>& gn = tp.value(gi);
                        tp.accum(gi, Mat<T>(g.cwiseProduct(xh).colwise().sum()));
                        tp.accum(bi, Mat<T>(g.colwise().sum()));
                        Mat<T> dxh = g;
                        for (Eigen::Index i = 0; i < dxh.rows(); ++i) {
                            dxh.row(i) = g.row(i).cwiseProduct(gn.row(0));
                        }
                        Mat<T> dx(dxh.rows(), dxh.cols());
                        const T C = static_cast<T>(dxh.cols());
                        for (Eigen::Index i = 0; i < dxh.rows(); ++i) {
                            const T m1 = dxh.row(i).mean();
                            const T m2 = dxh.row(i).cwiseProduct(xh.row(i)).mean();
                            dx.row(i) = ((dxh.row(i).array() - m1) - xh.row(i).array() * m2) * is(i, 0);
                        }
                        (void)C;
                        tp.accum(xi, dx);
                    });
    return {&t, id};
}

template <typename T>
Var<T> relu(Var<T> x) {
    Tape<T>& t = *x.tape;
    Mat<T> v = x.value().cwiseMax(T(0));
    int xi = x.id;
    int id = t.push(std::move(v), x.needs_grad(), [xi](Tape<T>& tp, int self) {
        const Mat<T>& g = tp.node(self).grad;
        const Mat<T>& xin = tp.value(xi);
        Mat<T> dx = (xin.array() > T(0)).template cast<T>() * g.array();
        tp.accum(xi, dx);
    });
    return {&t, id};
}

// Exact GELU: x * Phi(x).
template <typename T>
Var<T> gelu(Var<T> x) {
    Tape<T>& t = *x.tape;
    const Mat<T>& xin = x.value();
    Mat<T> v(xin.rows(), xin.cols());
    for (Eigen::Index i = 0; i < xin.size(); ++i) {
        const T z = xin.data()[i];
        v.data()[i] = z * T(0.5) * (T(1) + std::erf(z * T(M_SQRT1_2)));
    }
    int xi = x.id;
    int id = t.push(std::move(v), x.needs_grad(), [xi](Tape<T>& tp, int self) {
        const Mat<T>& g = tp.node(self).grad;
        const Mat<T>& xv = tp.value(xi);
        Mat<T> dx(xv.rows(), xv.cols());
        constexpr T inv_sqrt2pi = T(0.3989422804014326779);
        for (Eigen::Index i = 0; i < xv.size(); ++i) {
            const T z = xv.data()[i];
            const T phi = T(0.5) * (T(1) + std::erf(z * T(M_SQRT1_2)));
            const T pdf = inv_sqrt2pi * std::exp(T(-0.5) * z * z);
            dx.data()[i] = g.data()[i] * (phi + z * pdf);
        }
        tp.accum(xi, dx);
    });
    return {&t, id};
}

template <typename T>
Var<T> gather_rows(Var<T> x, std::vector<int> idx) {
    Tape<T>& t = *x.tape;
    const Mat<T>& xv = x.value();
    Mat<T> v(static_cast<Eigen::Index>(idx.size()), xv.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] < 0 || idx[i] >= xv.rows()) throw ShapeError("gather_rows: index out of range");
        v.row(static_cast<Eigen::Index>(i)) = xv.row(idx[i]);
    }
    int xi = x.id;
    const Eigen::Index rows = xv.rows(), cols = xv.cols();
    int id = t.push(std::move(v), x.needs_grad(),
                    [xi, idx = std::move(idx), rows, cols](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        Mat<T> dx = Mat<T>::Zero(rows, cols);
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            dx.row(idx[i]) += g.row(static_cast<Eigen::Index>(i));
                        }
                        tp.accum(xi, dx);
                    });
    return {&t, id};
}

// Replace the listed rows of x with a single 1xC row (mask-token substitution).
template <typename T>
Var<T> replace_rows(Var<T> x, std::vector<int> idx, Var<T> row) {
    Tape<T>& t = detail::same_tape(x, row);
    if (row.value().rows() != 1 || row.value().cols() != x.value().cols()) {
        throw ShapeError("replace_rows: row must be 1 x cols(x)");
    }
    Mat<T> v = x.value();
    for (int i : idx) {
        if (i < 0 || i >= v.rows()) throw ShapeError("replace_rows: index out of range");
        v.row(i) = row.value().row(0);
    }
    int xi = x.id, ri = row.id;
    int id = t.push(std::move(v), x.needs_grad() || row.needs_grad(),
                    [xi, ri, idx = std::move(idx)](Tape<T>& tp, int self) {
                        Mat<T> g = tp.node(self).grad;
                        Mat<T> dr = Mat<T>::Zero(1, g.cols());
                        for (int i : idx) {
                            dr.row(0) += g.row(i);
                            g.row(i).setZero();
                        }
                        tp.accum(ri, dr);
                        tp.accum(xi, g);
                    });
    return {&t, id};
}

// General gather over the row-major flattening of x; index -1 reads 0.
// Used for im2col: output (out_rows x out_cols).
template <typename T>
Var<T> gather_flat(Var<T> x, const std::vector<long>& flat_idx, int out_rows, int out_cols) {
    Tape<T>& t = *x.tape;
    const Mat<T>& xv = x.value();
    const long total = static_cast<long>(xv.size());
    if (static_cast<long>(flat_idx.size()) != static_cast<long>(out_rows) * out_cols) {
        throw ShapeError("gather_flat: index count mismatch");
    }
    Mat<T> v(out_rows, out_cols);
    const T* src = xv.data();
    for (std::size_t i = 0; i < flat_idx.size(); ++i) {
        const long k = flat_idx[i];
        if (k >= total) throw ShapeError("gather_flat: index out of range");
        v.data()[i] = (k < 0) ? T(0) : src[k];
    }
    int xi = x.id;
    const Eigen::Index rows = xv.rows(), cols = xv.cols();
    // the index vector is owned by the caller and must outlive backward;
    // copy it into the closure to be safe
    std::vector<long> idx_copy = flat_idx;
    int id = t.push(std::move(v), x.needs_grad(),
                    [xi, idx = std::move(idx_copy), rows, cols](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        Mat<T> dx = Mat<T>::Zero(rows, cols);
                        T* dst = dx.data();
                        const T* gs = g.data();
                        for (std::size_t i = 0; i < idx.size(); ++i) {
                            if (idx[i] >= 0) dst[idx[i]] += gs[i];
                        }
                        tp.accum(xi, dx);
                    });
    return {&t, id};
}

// Channelwise 2x2 stride-2 max pooling over a token grid of H x W rows.
template <typename T>
Var<T> grid_maxpool2(Var<T> x, int H, int W) {
    Tape<T>& t = *x.tape;
    const Mat<T>& xv = x.value();
    if (xv.rows() != static_cast<Eigen::Index>(H) * W) throw ShapeError("grid_maxpool2: grid mismatch");
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("grid_maxpool2: odd grid");
    const int Ho = H / 2, Wo = W / 2;
    const Eigen::Index C = xv.cols();
    Mat<T> v(static_cast<Eigen::Index>(Ho) * Wo, C);
    std::vector<int> arg(static_cast<std::size_t>(Ho) * Wo * C);
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            const int out_r = oy * Wo + ox;
            const int r00 = (2 * oy) * W + 2 * ox;
            const int cand[4] = {r00, r00 + 1, r00 + W, r00 + W + 1};
            for (Eigen::Index c = 0; c < C; ++c) {
                T best = xv(cand[0], c);
                int bi = cand[0];
                for (int k = 1; k < 4; ++k) {
                    if (xv(cand[k], c) > best) {
                        best = xv(cand[k], c);
                        bi = cand[k];
                    }
                }
                v(out_r, c) = best;
                arg[static_cast<std::size_t>(out_r) * C + c] = bi;
            }
        }
    }
    int xi = x.id;
    const Eigen::Index rows = xv.rows();
    int id = t.push(std::move(v), x.needs_grad(),
                    [xi, arg = std::move(arg), rows, C](Tape<T>& tp, int self) {
                        const Mat<T>& g = tp.node(self).grad;
                        Mat<T> dx = Mat<T>::Zero(rows, C);
                        for (Eigen::Index r = 0; r < g.rows(); ++r) {
                            for (Eigen::Index c = 0; c < C; ++c) {
                                dx(arg[static_cast<std::size_t>(r) * C + c], c) += g(r, c);
                            }
                        }
                        tp.accum(xi, dx);
                    });
    return {&t, id};
}

// Row-major reshape; element order is preserved.
template <typename T>
Var<T> reshape(Var<T> x, int rows, int cols) {
    Tape<T>& t = *x.tape;
    if (static_cast<Eigen::Index>(rows) * cols != x.value().size()) {
        throw ShapeError("reshape: element count mismatch");
    }
    Mat<T> v(rows, cols);
    std::copy(x.value().data(), x.value().data() + x.value().size(), v.data());
    int xi = x.id;
    const Eigen::Index r0 = x.value().rows(), c0 = x.value().cols();
    int id = t.push(std::move(v), x.needs_grad(), [xi, r0, c0](Tape<T>& tp, int self) {
        const Mat<T>& g = tp.node(self).grad;
        Mat<T> dx(r0, c0);
        std::copy(g.data(), g.data() + g.size(), dx.data());
        tp.accum(xi, dx);
    });
    return {&t, id};
}

template <typename T>
Var<T> mean_all(Var<T> x) {
    Tape<T>& t = *x.tape;
    Mat<T> v(1, 1);
    v(0, 0) = x.value().mean();
    int xi = x.id;
    const Eigen::Index R = x.value().rows(), C = x.value().cols();
    int id = t.push(std::move(v), x.needs_grad(), [xi, R, C](Tape<T>& tp, int self) {
        const T g = tp.node(self).grad(0, 0) / static_cast<T>(R * C);
        tp.accum(xi, Mat<T>(Mat<T>::Constant(R, C, g)));
    });
    return {&t, id};
}

template <typename T>
Var<T> sum_all(Var<T> x) {
    Tape<T>& t = *x.tape;
    Mat<T> v(1, 1);
    v(0, 0) = x.value().sum();
    int xi = x.id;
    const Eigen::Index R = x.value().rows(), C = x.value().cols();
    int id = t.push(std::move(v), x.needs_grad(), [xi, R, C](Tape<T>& tp, int self) {
        const T g = tp.node(self).grad(0, 0);
        tp.accum(xi, Mat<T>(Mat<T>::Constant(R, C, g)));
    });
    return {&t, id};
}

// Column means -> 1xC row.
template <typename T>
Var<T> mean_rows(Var<T> x) {
    Tape<T>& t = *x.tape;
    Mat<T> v = x.value().colwise().mean();
    int xi = x.id;
    const Eigen::Index R = x.value().rows();
    int id = t.push(std::move(v), x.needs_grad(), [xi, R](Tape<T>& tp, int self) {
        const Mat<T>& g = tp.node(self).grad;  // 1xC
        Mat<T> dx(R, g.cols());
        for (Eigen::Index i = 0; i < R; ++i) dx.row(i) = g.row(0) / static_cast<T>(R);
        tp.accum(xi, dx);
    });
    return {&t, id};
}

template <typename T>
Var<T> repeat_row(Var<T> row, int n) {
    Tape<T>& t = *row.tape;
    if (row.value().rows() != 1) throw ShapeError("repeat_row: expects 1xC");
    Mat<T> v(n, row.value().cols());
    for (int i = 0; i < n; ++i) v.row(i) = row.value().row(0);
    int ri = row.id;
    int id = t.push(std::move(v), row.needs_grad(), [ri](Tape<T>& tp, int self) {
        tp.accum(ri, Mat<T>(tp.node(self).grad.colwise().sum()));
    });
    return {&t, id};
}

// Mean negative log-likelihood of targets[i] under row-wise softmax(logits).
template <typename T>
Var<T> nll_mean(Var<T> logits, const std::vector<int>& targets) {
    Tape<T>& t = *logits.tape;
    const Mat<T>& x = logits.value();
    if (static_cast<Eigen::Index>(targets.size()) != x.rows()) {
        throw ShapeError("nll_mean: one target per logit row required");
    }
    const Eigen::Index R = x.rows(), C = x.cols();
    Mat<T> probs(R, C);
    T loss = 0;
    for (Eigen::Index i = 0; i < R; ++i) {
        if (targets[i] < 0 || targets[i] >= C) throw ShapeError("nll_mean: target id out of range");
        const T mx = x.row(i).maxCoeff();
        Eigen::Array<T, 1, Eigen::Dynamic> e = (x.row(i).array() - mx).exp();
        const T z = e.sum();
        probs.row(i) = (e / z).matrix();
        loss += -(x(i, targets[i]) - mx - std::log(z));
    }
    loss /= static_cast<T>(R);
    int li = logits.id;
    int probs_id = t.push(std::move(probs), false, nullptr);
    Mat<T> lv(1, 1);
    lv(0, 0) = loss;
    std::vector<int> tg = targets;
    int id = t.push(std::move(lv), logits.needs_grad(),
                    [li, probs_id, tg = std::move(tg)](Tape<T>& tp, int self) {
                        const T g = tp.node(self).grad(0, 0);
                        Mat<T> dx = tp.value(probs_id);
                        const T invR = T(1) / static_cast<T>(dx.rows());
                        for (Eigen::Index i = 0; i < dx.rows(); ++i) {
                            dx(i, tg[i]) -= T(1);
                        }
                        dx *= g * invR;
                        tp.accum(li, dx);
                    });
    return {&t, id};
}

// Mean of squared differences over all entries.
template <typename T>
Var<T> mse_mean(Var<T> pred, Var<T> target) {
    Tape<T>& t = detail::same_tape(pred, target);
    if (pred.value().rows() != target.value().rows() || pred.value().cols() != target.value().cols()) {
        throw ShapeError("mse_mean: shape mismatch");
    }
    Mat<T> diff = pred.value() - target.value();
    Mat<T> v(1, 1);
    v(0, 0) = diff.array().square().mean();
    int pi = pred.id, ti = target.id;
    int id = t.push(std::move(v), pred.needs_grad() || target.needs_grad(),
                    [pi, ti](Tape<T>& tp, int self) {
                        const T g = tp.node(self).grad(0, 0);
                        Mat<T> d = tp.value(pi) - tp.value(ti);
                        const T c = T(2) * g / static_cast<T>(d.size());
                        Mat<T> dp = d * c;
                        tp.accum(pi, dp);
                        tp.accum(ti, Mat<T>(-dp));
                    });
    return {&t, id};
}

}  // namespace vlci::ad
