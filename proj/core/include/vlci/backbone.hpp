#pragma once

#include "vlci/data.hpp"
#include "vlci/nn.hpp"

#include <array>
#include <optional>
#include <string>
#include <vector>

namespace vlci::model {

using ad::Var;
using nn::Ctx;
using nn::FfnH;
using nn::LayerNormH;
using nn::LinearH;
using nn::MhaH;

struct ModelConfig {
    int d = 512;
    int heads = 8;
    int enc_layers = 3;
    int dec_layers = 3;
    int patch_grid = 14;
    int k_local = 6;
    double mask_ratio = 0.85;
    int vocab_size = 0;
    int max_len = 60;
    int image_size = 224;
    int image_channels = 1;
    std::array<int, 3> stem_channels = {32, 64, 1024};
    int ffn_mult = 4;
    int degrade_factor = 2;
    bool use_causal = true;
    double init_scale = 0.02;

    int n_patches() const { return patch_grid * patch_grid; }
    int ffn_hidden() const { return ffn_mult * d; }

    void validate() const {
        if (d <= 0 || d % heads != 0) throw ConfigError("model.d must be a positive multiple of model.heads");
        if (k_local < 1) throw ConfigError("model.k_local must be >= 1");
        if (vocab_size < data::Vocabulary::kSpecialCount) throw ConfigError("model.vocab_size unset");
        if (max_len < 3) throw ConfigError("model.max_len must be >= 3");
        if (image_size % 16 != 0) throw ConfigError("model.image_size must be divisible by the stem stride 16");
        if (image_size / 16 != patch_grid) {
            throw ConfigError("stem grid mismatch: expected " + std::to_string(patch_grid) + "x" +
                              std::to_string(patch_grid) + ", image gives " + std::to_string(image_size / 16) +
                              "x" + std::to_string(image_size / 16));
        }
    }
};

struct StemStageH {
    LinearH conv;  // (Cin*3*3) x Cout
    LayerNormH norm;
};

struct StemH {
    StemStageH s1, s2, s3;
    LinearH proj;  // 1x1 conv to d
};

struct EncLayerH {
    LayerNormH ln1, ln2;
    MhaH attn;       // weight-shared across modalities
    FfnH ffn_vis;    // visual expert
    FfnH ffn_txt;    // textual expert
};

struct DecLayerH {
    LayerNormH ln1, ln2, ln3;
    MhaH self_attn;
    MhaH cross_attn;
    FfnH ffn;
};

struct CaamH {
    MhaH attn;  // Q/K/V/O shared between the positive and negated branch
    FfnH ffn;
};

struct DstH {
    LayerNormH norm;
    MhaH attn;
    int rel_bias = -1;  // (2*(grid/2)-1)^2 x heads
    LinearH out;
};

struct LgfmH {
    MhaH self_attn;
    MhaH cross_attn;
    FfnH ffn;  // 2d -> d
};

struct LdmH {
    MhaH vocab_attn;
    FfnH ffn1;
    MhaH local_attn;
    FfnH ffn2;
};

// Per-layer, per-head attention matrices over visual tokens; rows stochastic.
template <typename T>
struct AttentionTrace {
    std::vector<std::vector<Mat<T>>> layers;  // [layer][head], N x N

    bool empty() const { return layers.empty(); }
};

template <typename T>
struct EncodeResult {
    Var<T> hidden;  // (n_visual + n_text) x d
    int n_visual = 0;
    int n_text = 0;
    AttentionTrace<T> trace;

    Var<T> visual() const { return ad::slice_rows(hidden, 0, n_visual); }
    Var<T> text() const { return ad::slice_rows(hidden, n_visual, n_text); }
};

inline std::vector<long> im2col_indices(int H, int W, int C, int k, int stride, int pad, int* Ho_out,
                                        int* Wo_out) {
    const int Ho = (H + 2 * pad - k) / stride + 1;
    const int Wo = (W + 2 * pad - k) / stride + 1;
    std::vector<long> idx(static_cast<std::size_t>(Ho) * Wo * C * k * k);
    std::size_t p = 0;
    for (int oy = 0; oy < Ho; ++oy) {
        for (int ox = 0; ox < Wo; ++ox) {
            for (int c = 0; c < C; ++c) {
                for (int ky = 0; ky < k; ++ky) {
                    for (int kx = 0; kx < k; ++kx) {
                        const int iy = oy * stride - pad + ky;
                        const int ix = ox * stride - pad + kx;
                        idx[p++] = (iy < 0 || iy >= H || ix < 0 || ix >= W)
                                       ? -1
                                       : (static_cast<long>(iy) * W + ix) * C + c;
                    }
                }
            }
        }
    }
    *Ho_out = Ho;
    *Wo_out = Wo;
    return idx;
}

template <typename T>
struct Model {
    ModelConfig cfg;
    nn::ParamStore<T> params;

    StemH stem;
    int tok_embed = -1;   // V x d
    int pos_vis = -1;     // N x d, shared across views
    int pos_txt = -1;     // max_len x d
    int mask_embed = -1;  // 1 x d
    std::vector<EncLayerH> enc;
    std::vector<DecLayerH> dec;
    LinearH out_proj;  // d -> V
    LinearH mim_head;  // d -> d
    CaamH caam;
    DstH dst;
    LgfmH lgfm_h;
    LdmH ldm_h;

    static Model build(const ModelConfig& cfg) {
        cfg.validate();
        Model m;
        m.cfg = cfg;
        auto& ps = m.params;
        const int d = cfg.d;
        const int c_in = cfg.image_channels;
        const auto& sc = cfg.stem_channels;

        m.stem.s1 = {nn::make_linear(ps, "stem.s1.conv", c_in * 9, sc[0]),
                     nn::make_layernorm(ps, "stem.s1.norm", sc[0])};
        m.stem.s2 = {nn::make_linear(ps, "stem.s2.conv", sc[0] * 9, sc[1]),
                     nn::make_layernorm(ps, "stem.s2.norm", sc[1])};
        m.stem.s3 = {nn::make_linear(ps, "stem.s3.conv", sc[1] * 9, sc[2]),
                     nn::make_layernorm(ps, "stem.s3.norm", sc[2])};
        m.stem.proj = nn::make_linear(ps, "stem.proj", sc[2], d);

        m.tok_embed = ps.add("embed.tok", cfg.vocab_size, d);
        m.pos_vis = ps.add("embed.pos_vis", cfg.n_patches(), d);
        m.pos_txt = ps.add("embed.pos_txt", cfg.max_len, d);
        m.mask_embed = ps.add("embed.mask", 1, d);

        for (int l = 0; l < cfg.enc_layers; ++l) {
            const std::string p = "enc." + std::to_string(l);
            EncLayerH layer;
            layer.ln1 = nn::make_layernorm(ps, p + ".ln1", d);
            layer.ln2 = nn::make_layernorm(ps, p + ".ln2", d);
            layer.attn = nn::make_mha(ps, p + ".attn", d);
            layer.ffn_vis = nn::make_ffn(ps, p + ".ffn_vis", d, cfg.ffn_hidden(), d);
            layer.ffn_txt = nn::make_ffn(ps, p + ".ffn_txt", d, cfg.ffn_hidden(), d);
            m.enc.push_back(layer);
        }
        for (int l = 0; l < cfg.dec_layers; ++l) {
            const std::string p = "dec." + std::to_string(l);
            DecLayerH layer;
            layer.ln1 = nn::make_layernorm(ps, p + ".ln1", d);
            layer.ln2 = nn::make_layernorm(ps, p + ".ln2", d);
            layer.ln3 = nn::make_layernorm(ps, p + ".ln3", d);
            layer.self_attn = nn::make_mha(ps, p + ".self", d);
            layer.cross_attn = nn::make_mha(ps, p + ".cross", d);
            layer.ffn = nn::make_ffn(ps, p + ".ffn", d, cfg.ffn_hidden(), d);
            m.dec.push_back(layer);
        }
        m.out_proj = nn::make_linear(ps, "head.out", d, cfg.vocab_size);
        m.mim_head = nn::make_linear(ps, "head.mim", d, d);

        m.caam = {nn::make_mha(ps, "vdm.caam.attn", d),
                  nn::make_ffn(ps, "vdm.caam.ffn", d, cfg.ffn_hidden(), d)};
        const int half = cfg.patch_grid / 2;
        const int rel = std::max(1, 2 * half - 1);
        m.dst.norm = nn::make_layernorm(ps, "vdm.dst.norm", d);
        m.dst.attn = nn::make_mha(ps, "vdm.dst.attn", d);
        m.dst.rel_bias = ps.add("vdm.dst.rel_bias", rel * rel, cfg.heads);
        m.dst.out = nn::make_linear(ps, "vdm.dst.out", d, d);
        m.lgfm_h = {nn::make_mha(ps, "vdm.lgfm.self", d), nn::make_mha(ps, "vdm.lgfm.cross", d),
                    nn::make_ffn(ps, "vdm.lgfm.ffn", 2 * d, cfg.ffn_hidden(), d)};
        m.ldm_h = {nn::make_mha(ps, "ldm.vocab_attn", d), nn::make_ffn(ps, "ldm.ffn1", d, cfg.ffn_hidden(), d),
                   nn::make_mha(ps, "ldm.local_attn", d), nn::make_ffn(ps, "ldm.ffn2", d, cfg.ffn_hidden(), d)};
        return m;
    }

    void init(Rng& rng) { nn::init_normal(params, rng, cfg.init_scale); }
    void init(Rng& rng, double scale) { nn::init_normal(params, rng, scale); }
};

namespace detail {

template <typename T>
Mat<T> image_to_tokens(const data::RawImage& img, int want_channels) {
    Mat<T> x(static_cast<Eigen::Index>(img.height) * img.width, want_channels);
    for (int y = 0; y < img.height; ++y) {
        for (int xx = 0; xx < img.width; ++xx) {
            const Eigen::Index row = static_cast<Eigen::Index>(y) * img.width + xx;
            if (img.channels == want_channels) {
                for (int c = 0; c < want_channels; ++c) x(row, c) = static_cast<T>(img.at(c, y, xx));
            } else if (want_channels == 1) {
                float acc = 0.0f;
                for (int c = 0; c < img.channels; ++c) acc += img.at(c, y, xx);
                x(row, 0) = static_cast<T>(acc / static_cast<float>(img.channels));
            } else {
                for (int c = 0; c < want_channels; ++c) x(row, c) = static_cast<T>(img.at(0, y, xx));
            }
        }
    }
    return x;
}

template <typename T>
Var<T> stem_stage(Ctx<T>& cx, const StemStageH& st, Var<T> x, int H, int W, int C, int stride, int* Ho,
                  int* Wo) {
    auto idx = im2col_indices(H, W, C, 3, stride, 1, Ho, Wo);
    Var<T> cols = ad::gather_flat(x, idx, *Ho * *Wo, C * 9);
    Var<T> y = nn::linear(cx, st.conv, cols);
    y = ad::relu(nn::layernorm(cx, st.norm, y));
    y = ad::grid_maxpool2(y, *Ho, *Wo);
    *Ho /= 2;
    *Wo /= 2;
    return y;
}

}  // namespace detail

// Conv stem on one view: (grid^2) x d tokens, positional encoding NOT added.
template <typename T>
Var<T> stem_tokens(Ctx<T>& cx, const Model<T>& m, const data::RawImage& img) {
    const auto& cfg = m.cfg;
    if (img.height != img.width) throw ShapeError("stem: image must be square");
    if (img.height % 16 != 0) throw ShapeError("stem: image size not divisible by stride 16");
    const int grid = img.height / 16;
    if (grid != cfg.patch_grid) {
        throw ShapeError("stem grid mismatch: expected " + std::to_string(cfg.patch_grid) + "x" +
                         std::to_string(cfg.patch_grid) + ", got " + std::to_string(grid) + "x" +
                         std::to_string(grid));
    }
    Var<T> x = cx.c(detail::image_to_tokens<T>(img, cfg.image_channels));
    int H = img.height, W = img.width, Ho = 0, Wo = 0;
    x = detail::stem_stage(cx, m.stem.s1, x, H, W, cfg.image_channels, 2, &Ho, &Wo);
    H = Ho; W = Wo;
    x = detail::stem_stage(cx, m.stem.s2, x, H, W, cfg.stem_channels[0], 1, &Ho, &Wo);
    H = Ho; W = Wo;
    x = detail::stem_stage(cx, m.stem.s3, x, H, W, cfg.stem_channels[1], 1, &Ho, &Wo);
    return nn::linear(cx, m.stem.proj, x);
}

// Visual embedding of 1 or 2 views: per-view stem + shared 2-D positional
// table, concatenated along the token axis.
template <typename T>
Var<T> embed_image(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>& views) {
    if (views.empty() || views.size() > 2) throw ShapeError("embed_image: 1 or 2 views required");
    Var<T> out{};
    for (std::size_t v = 0; v < views.size(); ++v) {
        Var<T> tok = ad::add(stem_tokens(cx, m, views[v]), cx.p(m.pos_vis));
        out = (v == 0) ? tok : ad::concat_rows(out, tok);
    }
    return out;
}

// Token ids -> embeddings with 1-D positions starting at position_offset.
template <typename T>
Var<T> embed_ids(Ctx<T>& cx, const Model<T>& m, const std::vector<int>& ids, int position_offset = 0) {
    if (ids.empty()) throw ShapeError("embed_ids: empty sequence");
    std::vector<int> pos(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        pos[i] = position_offset + static_cast<int>(i);
        if (pos[i] >= m.cfg.max_len) throw ShapeError("embed_ids: position beyond max_len");
    }
    return ad::add(ad::gather_rows(cx.p(m.tok_embed), ids), ad::gather_rows(cx.p(m.pos_txt), pos));
}

// Full padded report embedding (pad rows produced; callers mask downstream).
template <typename T>
Var<T> embed_text(Ctx<T>& cx, const Model<T>& m, const data::TokenizedReport& rep) {
    return embed_ids(cx, m, rep.ids, 0);
}

// Multiway encoder: joint weight-shared attention over [visual; text] rows,
// then per-modality feed-forward experts. Either modality may be absent.
// The trace holds per-layer per-head attention over visual tokens,
// row-renormalized when textual keys are present.
template <typename T>
EncodeResult<T> multiway_encode(Ctx<T>& cx, const Model<T>& m, std::optional<Var<T>> visual,
                                std::optional<Var<T>> text) {
    if (!visual && !text) throw ShapeError("multiway_encode: both modalities absent");
    const int nv = visual ? static_cast<int>(visual->value().rows()) : 0;
    const int nt = text ? static_cast<int>(text->value().rows()) : 0;
    Var<T> h = visual ? (text ? ad::concat_rows(*visual, *text) : *visual) : *text;

    EncodeResult<T> res;
    res.n_visual = nv;
    res.n_text = nt;
    for (const auto& layer : m.enc) {
        Var<T> a = nn::layernorm(cx, layer.ln1, h);
        auto attn = nn::mha(cx, layer.attn, a, a, m.cfg.heads);
        if (nv > 0) {
            std::vector<Mat<T>> per_head;
            for (const auto& w : attn.weights) {
                Mat<T> block = w.topLeftCorner(nv, nv);
                for (Eigen::Index i = 0; i < block.rows(); ++i) {
                    const T s = block.row(i).sum();
                    block.row(i) /= s;
                }
                per_head.push_back(std::move(block));
            }
            res.trace.layers.push_back(std::move(per_head));
        }
        h = ad::add(h, attn.out);
        Var<T> normed = nn::layernorm(cx, layer.ln2, h);
        if (nv > 0 && nt > 0) {
            Var<T> hv = ad::add(ad::slice_rows(h, 0, nv), nn::ffn(cx, layer.ffn_vis, ad::slice_rows(normed, 0, nv)));
            Var<T> ht = ad::add(ad::slice_rows(h, nv, nt), nn::ffn(cx, layer.ffn_txt, ad::slice_rows(normed, nv, nt)));
            h = ad::concat_rows(hv, ht);
        } else if (nv > 0) {
            h = ad::add(h, nn::ffn(cx, layer.ffn_vis, normed));
        } else {
            h = ad::add(h, nn::ffn(cx, layer.ffn_txt, normed));
        }
    }
    res.hidden = h;
    return res;
}

// Causal decoder over an unpadded prefix; cross-attends to visual memory
// when present. Returns next-token logits, one row per prefix position.
template <typename T>
Var<T> multiway_decode(Ctx<T>& cx, const Model<T>& m, Var<T> prefix, std::optional<Var<T>> memory) {
    const int L = static_cast<int>(prefix.value().rows());
    if (L < 1) throw ShapeError("multiway_decode: prefix length must be >= 1");
    nn::AttnMask causal = nn::AttnMask::causal(L);
    Var<T> h = prefix;
    for (const auto& layer : m.dec) {
        Var<T> a = nn::layernorm(cx, layer.ln1, h);
        h = ad::add(h, nn::mha(cx, layer.self_attn, a, a, m.cfg.heads, &causal).out);
        if (memory && memory->value().rows() > 0) {
            Var<T> b = nn::layernorm(cx, layer.ln2, h);
            h = ad::add(h, nn::mha(cx, layer.cross_attn, b, *memory, m.cfg.heads).out);
        }
        Var<T> c = nn::layernorm(cx, layer.ln3, h);
        h = ad::add(h, nn::ffn(cx, layer.ffn, c));
    }
    return nn::linear(cx, m.out_proj, h);
}

}  // namespace vlci::model
