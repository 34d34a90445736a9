#pragma once

#include "vlci/tape.hpp"

#include <string>
#include <unordered_map>
#include <vector>

namespace vlci::nn {

using ad::Tape;
using ad::Var;

// Named parameter registry. Names are unique and stable so checkpoints can
// address every tensor; Adam moments live alongside the values.
template <typename T>
class ParamStore {
public:
    struct Entry {
        std::string name;
        Mat<T> value;
        Mat<T> grad;
        Mat<T> m;  // Adam first moment, lazily sized
        Mat<T> v;  // Adam second moment
    };

    int add(const std::string& name, int rows, int cols) {
        if (index_.count(name)) throw Error("param '" + name + "' already registered");
        Entry e;
        e.name = name;
        e.value = Mat<T>::Zero(rows, cols);
        entries_.push_back(std::move(e));
        index_[name] = static_cast<int>(entries_.size()) - 1;
        return static_cast<int>(entries_.size()) - 1;
    }

    Entry& at(int h) { return entries_[h]; }
    const Entry& at(int h) const { return entries_[h]; }
    Entry& named(const std::string& n) {
        auto it = index_.find(n);
        if (it == index_.end()) throw Error("unknown param '" + n + "'");
        return entries_[it->second];
    }
    const Entry& named(const std::string& n) const {
        auto it = index_.find(n);
        if (it == index_.end()) throw Error("unknown param '" + n + "'");
        return entries_[it->second];
    }
    bool has(const std::string& n) const { return index_.count(n) != 0; }
    int handle(const std::string& n) const {
        auto it = index_.find(n);
        if (it == index_.end()) throw Error("unknown param '" + n + "'");
        return it->second;
    }

    std::size_t count() const { return entries_.size(); }
    const std::vector<Entry>& entries() const { return entries_; }
    std::vector<Entry>& entries() { return entries_; }

    void zero_grad() {
        for (auto& e : entries_) e.grad.setZero(e.value.rows(), e.value.cols());
    }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
        return n;
    }

    // Flat coordinates across all parameters, in registration order.
    T get_flat(std::size_t i) const {
        auto [e, k] = locate(i);
        return e->value.data()[k];
    }
    void set_flat(std::size_t i, T x) {
        auto [e, k] = locate(i);
        const_cast<Entry*>(e)->value.data()[k] = x;
    }
    T grad_flat(std::size_t i) const {
        auto [e, k] = locate(i);
        if (e->grad.size() == 0) return T(0);
        return e->grad.data()[k];
    }
    std::string name_of_flat(std::size_t i) const {
        auto [e, k] = locate(i);
        (void)k;
        return e->name;
    }

private:
    std::pair<const Entry*, std::size_t> locate(std::size_t i) const {
        for (const auto& e : entries_) {
            const std::size_t n = static_cast<std::size_t>(e.value.size());
            if (i < n) return {&e, i};
            i -= n;
        }
        throw ShapeError("flat parameter index out of range");
    }

    std::vector<Entry> entries_;
    std::unordered_map<std::string, int> index_;
};

// Per-forward context: one tape plus memoized parameter leaves so each
// parameter appears on the tape exactly once.
template <typename T>
struct Ctx {
    Tape<T> tape;
    ParamStore<T>* params;
    std::vector<int> lifted;

    Ctx(ParamStore<T>& ps, bool grad_enabled = true)
        : tape(grad_enabled), params(&ps), lifted(ps.count(), -1) {}

    Var<T> p(int h) {
        if (lifted[h] < 0) {
            auto& e = params->at(h);
            if (e.grad.size() == 0) e.grad.setZero(e.value.rows(), e.value.cols());
            Var<T> v = ad::leaf(tape, e.value, &e.grad);
            lifted[h] = v.id;
        }
        return {&tape, lifted[h]};
    }

    Var<T> c(Mat<T> m) { return ad::constant(tape, std::move(m)); }
};

struct LinearH {
    int w = -1;  // in x out
    int b = -1;  // 1 x out
};

struct LayerNormH {
    int g = -1;
    int b = -1;
};

struct MhaH {
    LinearH q, k, v, o;
};

struct FfnH {
    LinearH l1, l2;
};

template <typename T>
LinearH make_linear(ParamStore<T>& ps, const std::string& name, int in, int out) {
    return {ps.add(name + ".w", in, out), ps.add(name + ".b", 1, out)};
}

template <typename T>
LayerNormH make_layernorm(ParamStore<T>& ps, const std::string& name, int dim) {
    LayerNormH h{ps.add(name + ".g", 1, dim), ps.add(name + ".b", 1, dim)};
    ps.at(h.g).value.setOnes();
    return h;
}

template <typename T>
MhaH make_mha(ParamStore<T>& ps, const std::string& name, int d) {
    return {make_linear(ps, name + ".q", d, d), make_linear(ps, name + ".k", d, d),
            make_linear(ps, name + ".v", d, d), make_linear(ps, name + ".o", d, d)};
}

template <typename T>
FfnH make_ffn(ParamStore<T>& ps, const std::string& name, int in, int hidden, int out) {
    return {make_linear(ps, name + ".l1", in, hidden), make_linear(ps, name + ".l2", hidden, out)};
}

template <typename T>
Var<T> linear(Ctx<T>& cx, const LinearH& h, Var<T> x) {
    return ad::add_rowvec(ad::matmul(x, cx.p(h.w)), cx.p(h.b));
}

template <typename T>
Var<T> layernorm(Ctx<T>& cx, const LayerNormH& h, Var<T> x) {
    return ad::layernorm_rows(x, cx.p(h.g), cx.p(h.b));
}

template <typename T>
Var<T> ffn(Ctx<T>& cx, const FfnH& h, Var<T> x) {
    return linear(cx, h.l2, ad::gelu(linear(cx, h.l1, x)));
}

// Boolean keep-mask for attention, row-major Lq x Lk; true = admissible key.
struct AttnMask {
    int rows = 0, cols = 0;
    std::vector<std::uint8_t> keep;

    static AttnMask causal(int n) {
        AttnMask m{n, n, std::vector<std::uint8_t>(static_cast<std::size_t>(n) * n, 0)};
        for (int i = 0; i < n; ++i)
            for (int j = 0; j <= i; ++j) m.keep[static_cast<std::size_t>(i) * n + j] = 1;
        return m;
    }
};

template <typename T>
struct AttnResult {
    Var<T> out;                      // Lq x d (head concat, pre output-projection)
    std::vector<Mat<T>> weights;     // per-head Lq x Lk softmax values (detached)
};

// Scaled dot-product attention without learned projections. q,k,v are full
// width d; heads slice the feature axis. Optional per-head additive logit
// bias (e.g. relative-position bias).
template <typename T>
AttnResult<T> scaled_attention(Ctx<T>& cx, Var<T> q, Var<T> k, Var<T> v, int heads,
                               const AttnMask* mask = nullptr,
                               const std::vector<Var<T>>* head_bias = nullptr) {
    const int d = static_cast<int>(q.value().cols());
    if (d % heads != 0) throw ShapeError("attention: width not divisible by heads");
    if (k.value().cols() != d || v.value().cols() != d) throw ShapeError("attention: width mismatch");
    if (k.value().rows() != v.value().rows()) throw ShapeError("attention: key/value length mismatch");
    if (mask && (mask->rows != q.value().rows() || mask->cols != k.value().rows())) {
        throw ShapeError("attention: mask shape mismatch");
    }
    const int dh = d / heads;
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    AttnResult<T> res{Var<T>{}, {}};
    Var<T> acc{};
    for (int h = 0; h < heads; ++h) {
        Var<T> qh = ad::slice_cols(q, h * dh, dh);
        Var<T> kh = ad::slice_cols(k, h * dh, dh);
        Var<T> vh = ad::slice_cols(v, h * dh, dh);
        Var<T> logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        if (head_bias) logits = ad::add(logits, (*head_bias)[h]);
        Var<T> w = ad::softmax_rows(logits, mask ? &mask->keep : nullptr);
        res.weights.push_back(w.value());
        Var<T> oh = ad::matmul(w, vh);
        acc = (h == 0) ? oh : ad::concat_cols(acc, oh);
    }
    res.out = acc;
    return res;
}

// Full multi-head attention with learned projections.
template <typename T>
AttnResult<T> mha(Ctx<T>& cx, const MhaH& h, Var<T> xq, Var<T> xkv, int heads,
                  const AttnMask* mask = nullptr,
                  const std::vector<Var<T>>* head_bias = nullptr) {
    Var<T> q = linear(cx, h.q, xq);
    Var<T> k = linear(cx, h.k, xkv);
    Var<T> v = linear(cx, h.v, xkv);
    AttnResult<T> r = scaled_attention(cx, q, k, v, heads, mask, head_bias);
    r.out = linear(cx, h.o, r.out);
    return r;
}

// N(0, scale) init for every weight matrix; biases stay zero, layernorm
// gains stay one. Deterministic in the passed generator.
template <typename T>
void init_normal(ParamStore<T>& ps, Rng& rng, double scale = 0.02) {
    for (auto& e : ps.entries()) {
        const bool is_bias = e.name.size() >= 2 && e.name.compare(e.name.size() - 2, 2, ".b") == 0;
        const bool is_gain = e.name.size() >= 2 && e.name.compare(e.name.size() - 2, 2, ".g") == 0;
        if (is_bias || is_gain) continue;
        for (Eigen::Index i = 0; i < e.value.size(); ++i) {
            e.value.data()[i] = static_cast<T>(rng.normal() * scale);
        }
    }
}

}  // namespace vlci::nn
