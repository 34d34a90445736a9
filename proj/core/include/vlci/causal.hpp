#pragma once

#include "vlci/backbone.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <optional>

namespace vlci::causal {

using ad::Var;
using model::AttentionTrace;
using model::Model;
using nn::Ctx;

// Attention rollout: per head, multiply row-normalized (A + I)/2 from the
// last layer down to the first; a token's score is the column mean of the
// rolled-up matrix. Returns heads x N.
template <typename T>
Mat<T> accumulate_attention(const AttentionTrace<T>& trace) {
    if (trace.empty()) throw ShapeError("accumulate_attention: empty trace");
    const std::size_t heads = trace.layers[0].size();
    const Eigen::Index n = trace.layers[0][0].rows();
    Mat<T> scores(static_cast<Eigen::Index>(heads), n);
    for (std::size_t h = 0; h < heads; ++h) {
        Mat<T> rolled = Mat<T>::Identity(n, n);
        for (const auto& layer : trace.layers) {
            const Mat<T>& a = layer[h];
            if (a.rows() != n || a.cols() != n) throw ShapeError("accumulate_attention: ragged trace");
            Mat<T> step = (a + Mat<T>::Identity(n, n)) * T(0.5);
            for (Eigen::Index i = 0; i < n; ++i) {
                const T s = step.row(i).sum();
                if (std::abs(s - T(1)) > T(1e-4)) {
                    throw ShapeError("accumulate_attention: non-stochastic attention row");
                }
                step.row(i) /= s;
            }
            rolled = step * rolled;
        }
        scores.row(static_cast<Eigen::Index>(h)) = rolled.colwise().mean();
    }
    return scores;
}

template <typename T>
struct LocalTokens {
    Var<T> tokens;                    // (k * heads) x d
    std::vector<int> source_indices;  // per row, position in [0, N)
};

// Per head, the k highest-scoring token indices (ties: lower index first),
// concatenated in head order; duplicates across heads are allowed.
template <typename T>
LocalTokens<T> local_sample(Var<T> h_v, const Mat<T>& scores, int k) {
    const int n = static_cast<int>(h_v.value().rows());
    if (k > n) throw ShapeError("local_sample: k exceeds token count");
    LocalTokens<T> out;
    for (Eigen::Index h = 0; h < scores.rows(); ++h) {
        std::vector<int> order(static_cast<std::size_t>(n));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
            if (scores(h, a) != scores(h, b)) return scores(h, a) > scores(h, b);
            return a < b;
        });
        std::vector<int> top(order.begin(), order.begin() + k);
        std::sort(top.begin(), top.end());
        out.source_indices.insert(out.source_indices.end(), top.begin(), top.end());
    }
    out.tokens = ad::gather_rows(h_v, out.source_indices);
    return out;
}

// CaaM enhancement: FFN(SelfAttn(x) - ComplementAttn(x)) + x, where the
// complement branch reuses the same projections but softmaxes negated
// logits.
template <typename T>
Var<T> caam_enhance(Ctx<T>& cx, const Model<T>& m, Var<T> h_vl) {
    const auto& p = m.caam;
    const int heads = m.cfg.heads;
    const int d = m.cfg.d;
    const int dh = d / heads;
    Var<T> q = nn::linear(cx, p.attn.q, h_vl);
    Var<T> k = nn::linear(cx, p.attn.k, h_vl);
    Var<T> v = nn::linear(cx, p.attn.v, h_vl);
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
    Var<T> acc{};
    for (int h = 0; h < heads; ++h) {
        Var<T> qh = ad::slice_cols(q, h * dh, dh);
        Var<T> kh = ad::slice_cols(k, h * dh, dh);
        Var<T> vh = ad::slice_cols(v, h * dh, dh);
        Var<T> logits = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
        Var<T> w_pos = ad::softmax_rows(logits);
        Var<T> w_neg = ad::softmax_rows(ad::scale(logits, T(-1)));
        Var<T> oh = ad::matmul(ad::sub(w_pos, w_neg), vh);
        acc = (h == 0) ? oh : ad::concat_cols(acc, oh);
    }
    Var<T> diff = nn::linear(cx, p.attn.o, acc);
    return ad::add(nn::ffn(cx, p.ffn, diff), h_vl);
}

namespace detail {

// Relative-position bias matrices for a q x q grid, one per head, gathered
// from the learned (2q-1)^2 x heads table.
template <typename T>
std::vector<Var<T>> relative_bias(Ctx<T>& cx, const Model<T>& m, int q) {
    const int span = 2 * q - 1;
    std::vector<int> idx(static_cast<std::size_t>(q) * q * q * q);
    std::size_t p = 0;
    for (int iy = 0; iy < q; ++iy)
        for (int ix = 0; ix < q; ++ix)
            for (int jy = 0; jy < q; ++jy)
                for (int jx = 0; jx < q; ++jx)
                    idx[p++] = (jy - iy + q - 1) * span + (jx - ix + q - 1);
    Var<T> rows = ad::gather_rows(cx.p(m.dst.rel_bias), idx);  // (q^4) x heads
    std::vector<Var<T>> bias;
    for (int h = 0; h < m.cfg.heads; ++h) {
        bias.push_back(ad::reshape(ad::slice_cols(rows, h, 1), q * q, q * q));
    }
    return bias;
}

}  // namespace detail

// Down-sampling transformer block: W[P(h_v) + Attn(P(LN(h_v)))] per view,
// where P is 2x2 stride-2 channelwise max pooling on the token grid and
// Attn is multi-head attention with a learned 2-D relative-position bias.
template <typename T>
Var<T> global_sample(Ctx<T>& cx, const Model<T>& m, Var<T> h_v, int views = 1) {
    const int grid = m.cfg.patch_grid;
    if (grid % 2 != 0) throw ShapeError("global_sample: grid side must be even");
    const int n = grid * grid;
    if (static_cast<int>(h_v.value().rows()) != n * views) {
        throw ShapeError("global_sample: token count does not match grid");
    }
    const int q = grid / 2;
    auto bias = detail::relative_bias(cx, m, q);
    Var<T> out{};
    for (int v = 0; v < views; ++v) {
        Var<T> view = ad::slice_rows(h_v, v * n, n);
        Var<T> pooled = ad::grid_maxpool2(view, grid, grid);
        Var<T> pooled_norm = ad::grid_maxpool2(nn::layernorm(cx, m.dst.norm, view), grid, grid);
        auto attn = nn::mha(cx, m.dst.attn, pooled_norm, pooled_norm, m.cfg.heads, nullptr, &bias);
        Var<T> o = nn::linear(cx, m.dst.out, ad::add(pooled, attn.out));
        out = (v == 0) ? o : ad::concat_rows(out, o);
    }
    return out;
}

// Local-global fusion: FFN([MHA(l,l,l), MHA(l,g,g)]) -> the visual mediator.
template <typename T>
Var<T> lgfm(Ctx<T>& cx, const Model<T>& m, Var<T> h_vl, Var<T> h_vg) {
    auto self_b = nn::mha(cx, m.lgfm_h.self_attn, h_vl, h_vl, m.cfg.heads);
    auto cross_b = nn::mha(cx, m.lgfm_h.cross_attn, h_vl, h_vg, m.cfg.heads);
    return nn::ffn(cx, m.lgfm_h.ffn, ad::concat_cols(self_b.out, cross_b.out));
}

// Linguistic mediator in embedding space over the live vocabulary table:
// h' = FFN(MHA(h_vl, w, w)); M_l = FFN(MHA(h', h_vl, h_vl)).
template <typename T>
Var<T> ldm_mediator(Ctx<T>& cx, const Model<T>& m, Var<T> h_vl) {
    Var<T> vocab = cx.p(m.tok_embed);
    auto a = nn::mha(cx, m.ldm_h.vocab_attn, h_vl, vocab, m.cfg.heads);
    Var<T> hp = nn::ffn(cx, m.ldm_h.ffn1, a.out);
    auto b = nn::mha(cx, m.ldm_h.local_attn, hp, h_vl, m.cfg.heads);
    return nn::ffn(cx, m.ldm_h.ffn2, b.out);
}

// Parameter-free front-door fusion. Stage 1 attends features over mediator
// rows (expectation over the mediator); stage 2 attends the mean mediator
// row over the features (expectation over feature states); the result is
// features + stage1 + broadcast(stage2). No learned projections anywhere.
template <typename T>
Var<T> fim_fuse(Ctx<T>& cx, Var<T> features, Var<T> mediator) {
    const int d = static_cast<int>(features.value().cols());
    if (mediator.value().cols() != d) throw ShapeError("fim_fuse: width mismatch");
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));

    Var<T> w1 = ad::softmax_rows(ad::scale(ad::matmul(features, ad::transpose(mediator)), inv_sqrt));
    Var<T> e_m = ad::matmul(w1, mediator);

    Var<T> query = ad::mean_rows(mediator);  // 1 x d
    Var<T> w2 = ad::softmax_rows(ad::scale(ad::matmul(query, ad::transpose(features)), inv_sqrt));
    Var<T> e_x = ad::matmul(w2, features);   // 1 x d

    return ad::add(ad::add(features, e_m), ad::repeat_row(e_x, static_cast<int>(features.value().rows())));
}

// Causal variant of fim_fuse for autoregressive text: row i's stage-2
// expectation attends feature rows 0..i only, so decoding a growing prefix
// reproduces the training-time computation row for row. The final row
// coincides with fim_fuse over the full prefix.
template <typename T>
Var<T> fim_fuse_causal(Ctx<T>& cx, Var<T> features, Var<T> mediator) {
    const int d = static_cast<int>(features.value().cols());
    const int rows = static_cast<int>(features.value().rows());
    if (mediator.value().cols() != d) throw ShapeError("fim_fuse_causal: width mismatch");
    const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(d));

    Var<T> w1 = ad::softmax_rows(ad::scale(ad::matmul(features, ad::transpose(mediator)), inv_sqrt));
    Var<T> e_m = ad::matmul(w1, mediator);

    Var<T> query = ad::mean_rows(mediator);
    // lower-triangular keep mask confines each row's expectation to its past
    nn::AttnMask causal = nn::AttnMask::causal(rows);
    Var<T> q_rep = ad::repeat_row(query, rows);
    Var<T> logits = ad::scale(ad::matmul(q_rep, ad::transpose(features)), inv_sqrt);
    Var<T> w2 = ad::softmax_rows(logits, &causal.keep);
    Var<T> e_x = ad::matmul(w2, features);

    return ad::add(ad::add(features, e_m), e_x);
}

// Optional per-stage dump for inspection.
struct DebugTrace {
    std::string path;

    template <typename T>
    static void write_mat(std::ostream& os, const char* name, const Mat<T>& m, bool last) {
        os << "  \"" << name << "\": {\"rows\": " << m.rows() << ", \"cols\": " << m.cols()
           << ", \"data\": [";
        for (Eigen::Index i = 0; i < m.size(); ++i) {
            if (i) os << ",";
            os << static_cast<double>(m.data()[i]);
        }
        os << "]}" << (last ? "\n" : ",\n");
    }
};

template <typename T>
struct ForwardPieces {
    Var<T> h_v;          // encoder output over visual tokens
    Mat<T> scores;       // rollout scores, heads x N
    std::vector<int> selected;
    Var<T> h_vl;         // CaaM-enhanced local tokens
    Var<T> h_vg;         // global tokens
    Var<T> m_v;          // visual mediator
    Var<T> m_l;          // linguistic mediator
};

// Visual side of the intervention pipeline; shared between training and
// decoding so mediators can be computed once per image.
template <typename T>
ForwardPieces<T> vdm_ldm_pipeline(Ctx<T>& cx, const Model<T>& m,
                                  const std::vector<data::RawImage>& views) {
    ForwardPieces<T> out;
    Var<T> vis = model::embed_image(cx, m, views);
    auto enc = model::multiway_encode<T>(cx, m, vis, std::nullopt);
    out.h_v = enc.hidden;
    out.scores = accumulate_attention(enc.trace);
    auto local = local_sample(out.h_v, out.scores, m.cfg.k_local);
    out.selected = local.source_indices;
    out.h_vl = caam_enhance(cx, m, local.tokens);
    out.h_vg = global_sample(cx, m, out.h_v, static_cast<int>(views.size()));
    out.m_v = lgfm(cx, m, out.h_vl, out.h_vg);
    out.m_l = ldm_mediator(cx, m, out.h_vl);
    return out;
}

// Full fine-tuning/inference forward: deconfounded visual memory and
// deconfounded prefix embeddings feed the decoder. With use_causal=false the
// baseline encoder-decoder path runs instead.
template <typename T>
Var<T> vlci_forward(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>& views,
                    const std::vector<int>& prefix_ids, const DebugTrace* debug = nullptr) {
    if (prefix_ids.empty()) throw ShapeError("vlci_forward: empty prefix");
    if (!m.cfg.use_causal) {
        Var<T> vis = model::embed_image(cx, m, views);
        auto enc = model::multiway_encode<T>(cx, m, vis, std::nullopt);
        Var<T> prefix = model::embed_ids(cx, m, prefix_ids, 0);
        return model::multiway_decode<T>(cx, m, prefix, enc.hidden);
    }
    auto pieces = vdm_ldm_pipeline(cx, m, views);
    Var<T> memory = fim_fuse(cx, pieces.h_v, pieces.m_v);
    Var<T> prefix = model::embed_ids(cx, m, prefix_ids, 0);
    Var<T> text = fim_fuse_causal(cx, prefix, pieces.m_l);
    if (debug && !debug->path.empty()) {
        std::ofstream os(debug->path);
        os << "{\n";
        DebugTrace::write_mat(os, "rollout_scores", pieces.scores, false);
        Mat<T> sel(1, static_cast<Eigen::Index>(pieces.selected.size()));
        for (std::size_t i = 0; i < pieces.selected.size(); ++i)
            sel(0, static_cast<Eigen::Index>(i)) = static_cast<T>(pieces.selected[i]);
        DebugTrace::write_mat(os, "selected_indices", sel, false);
        DebugTrace::write_mat(os, "M_v", pieces.m_v.value(), false);
        DebugTrace::write_mat(os, "M_l", pieces.m_l.value(), true);
        os << "}\n";
    }
    return model::multiway_decode<T>(cx, m, text, memory);
}

}  // namespace vlci::causal
