#pragma once

#include "vlci/backbone.hpp"
#include "vlci/optim.hpp"

#include <algorithm>
#include <cmath>
#include <optional>

namespace vlci::vlp {

using ad::Var;
using model::Model;
using nn::Ctx;

// Partition of the N visual token positions into masked and visible sets.
struct MaskPlan {
    std::vector<int> masked;   // sorted
    std::vector<int> visible;  // sorted complement
    double ratio = 0.0;
};

inline MaskPlan plan_mask(int n_tokens, double ratio, Rng& rng) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw ConfigError("mask ratio must be in (0,1)");
    const int m = static_cast<int>(std::llround(ratio * n_tokens));
    if (m <= 0 || m >= n_tokens) {
        throw ConfigError("degenerate mask plan: " + std::to_string(m) + " of " +
                          std::to_string(n_tokens) + " tokens masked");
    }
    std::vector<int> order(static_cast<std::size_t>(n_tokens));
    for (int i = 0; i < n_tokens; ++i) order[static_cast<std::size_t>(i)] = i;
    rng.shuffle(order);
    MaskPlan plan;
    plan.ratio = ratio;
    plan.masked.assign(order.begin(), order.begin() + m);
    plan.visible.assign(order.begin() + m, order.end());
    std::sort(plan.masked.begin(), plan.masked.end());
    std::sort(plan.visible.begin(), plan.visible.end());
    return plan;
}

struct PrefixSplit {
    std::vector<int> prefix;  // ids[0, n_p)
    std::vector<int> target;  // ids[n_p, length)
    int n_p = 0;
};

// n_p uniform over [0, length-2]; the target is never empty.
inline PrefixSplit split_prefix(const data::TokenizedReport& rep, Rng& rng) {
    if (rep.length < 3) throw ShapeError("split_prefix: report length must be >= 3");
    PrefixSplit s;
    s.n_p = static_cast<int>(rng.below(static_cast<std::uint64_t>(rep.length - 1)));
    s.prefix.assign(rep.ids.begin(), rep.ids.begin() + s.n_p);
    s.target.assign(rep.ids.begin() + s.n_p, rep.ids.begin() + rep.length);
    return s;
}

// Mean NLL of the target segment given [image tokens; prefix tokens] encoded
// bidirectionally; the suffix is decoded causally with teacher forcing.
// Image-absent samples drop the visual block entirely.
template <typename T>
Var<T> plm_loss(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>* views,
                const data::TokenizedReport& rep, int n_p) {
    if (n_p < 0 || n_p > rep.length - 1) throw ShapeError("plm_loss: n_p out of range");
    std::vector<int> target(rep.ids.begin() + n_p, rep.ids.begin() + rep.length);
    if (target.empty()) throw ShapeError("plm_loss: empty target");

    std::optional<Var<T>> visual;
    if (views && !views->empty()) visual = model::embed_image(cx, m, *views);
    std::optional<Var<T>> prefix;
    if (n_p > 0) {
        std::vector<int> pre(rep.ids.begin(), rep.ids.begin() + n_p);
        prefix = model::embed_ids(cx, m, pre, 0);
    }

    std::optional<Var<T>> memory;
    if (visual || prefix) {
        memory = model::multiway_encode(cx, m, visual, prefix).hidden;
    }

    std::vector<int> dec_in(target.size());
    dec_in[0] = data::Vocabulary::kBos;
    for (std::size_t i = 1; i < target.size(); ++i) dec_in[i] = target[i - 1];
    Var<T> dec = model::embed_ids(cx, m, dec_in, 0);
    Var<T> logits = model::multiway_decode(cx, m, dec, memory);
    return ad::nll_mean(logits, target);
}

// Encoder-side MIM path: degraded image tokens with masked positions swapped
// for the learned mask embedding (positions re-added afterwards), plus the
// full report; returns head outputs at the masked positions.
template <typename T>
Var<T> mim_predictions(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>& views,
                       const data::TokenizedReport& rep, const MaskPlan& plan) {
    Var<T> degraded{};
    for (std::size_t v = 0; v < views.size(); ++v) {
        Var<T> tok = model::stem_tokens(cx, m, data::degrade_image(views[v], m.cfg.degrade_factor));
        degraded = (v == 0) ? tok : ad::concat_rows(degraded, tok);
    }
    Var<T> masked = ad::replace_rows(degraded, plan.masked, cx.p(m.mask_embed));
    Var<T> pos = cx.p(m.pos_vis);
    for (std::size_t v = 1; v < views.size(); ++v) pos = ad::concat_rows(pos, cx.p(m.pos_vis));
    Var<T> visual = ad::add(masked, pos);

    std::vector<int> text_ids(rep.ids.begin(), rep.ids.begin() + rep.length);
    Var<T> text = model::embed_ids(cx, m, text_ids, 0);
    auto enc = model::multiway_encode<T>(cx, m, visual, text);
    return nn::linear(cx, m.mim_head, ad::gather_rows(enc.visual(), plan.masked));
}

// MSE against the given target token matrix, read at masked positions only.
// Targets are the stem tokens of the ORIGINAL (non-degraded) image.
template <typename T>
Var<T> mim_loss_with_targets(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>& views,
                             const data::TokenizedReport& rep, const MaskPlan& plan, Var<T> targets_all) {
    const int n_total = static_cast<int>(targets_all.value().rows());
    if (static_cast<int>(plan.masked.size() + plan.visible.size()) != n_total) {
        throw ShapeError("mim_loss: mask plan does not cover the visual tokens");
    }
    Var<T> pred = mim_predictions(cx, m, views, rep, plan);
    Var<T> target = ad::gather_rows(targets_all, plan.masked);
    return ad::mse_mean(pred, target);
}

template <typename T>
Var<T> mim_loss(Ctx<T>& cx, const Model<T>& m, const std::vector<data::RawImage>& views,
                const data::TokenizedReport& rep, const MaskPlan& plan) {
    if (views.empty()) throw ShapeError("mim_loss: image required");
    Var<T> targets{};
    for (std::size_t v = 0; v < views.size(); ++v) {
        Var<T> tok = model::stem_tokens(cx, m, views[v]);
        targets = (v == 0) ? tok : ad::concat_rows(targets, tok);
    }
    return mim_loss_with_targets(cx, m, views, rep, plan, targets);
}

struct BatchItem {
    const data::TokenizedReport* report = nullptr;
    const std::vector<data::RawImage>* views = nullptr;  // nullptr/empty: text-only
};

struct StepRecord {
    long step = 0;
    double plm = 0.0;
    bool has_mim = false;
    double mim = 0.0;
    double lr = 0.0;
    double total() const { return plm + (has_mim ? mim : 0.0); }
};

// One optimizer update on L_PLM + L_MIM averaged over the batch.
template <typename T>
StepRecord pretrain_step(Model<T>& m, const std::vector<BatchItem>& batch, opt::Adam<T>& adam,
                         double lr, Rng& rng) {
    if (batch.empty()) throw ShapeError("pretrain_step: empty batch");
    m.params.zero_grad();
    const T inv_b = T(1) / static_cast<T>(batch.size());
    double plm_sum = 0.0, mim_sum = 0.0;
    int mim_count = 0;
    for (const auto& item : batch) {
        const bool has_image = item.views && !item.views->empty();
        auto split = split_prefix(*item.report, rng);
        MaskPlan plan;
        if (has_image) {
            const int n_total = m.cfg.n_patches() * static_cast<int>(item.views->size());
            plan = plan_mask(n_total, m.cfg.mask_ratio, rng);
        }

        Ctx<T> cx(m.params);
        Var<T> plm = plm_loss(cx, m, has_image ? item.views : nullptr, *item.report, split.n_p);
        const double plm_v = static_cast<double>(plm.value()(0, 0));
        if (!std::isfinite(plm_v)) throw NumericError("L_PLM non-finite");
        plm_sum += plm_v;

        Var<T> total = plm;
        if (has_image) {
            Var<T> mim = mim_loss(cx, m, *item.views, *item.report, plan);
            const double mim_v = static_cast<double>(mim.value()(0, 0));
            if (!std::isfinite(mim_v)) throw NumericError("L_MIM non-finite");
            mim_sum += mim_v;
            ++mim_count;
            total = ad::add(plm, mim);
        }
        cx.tape.backward(ad::scale(total, inv_b).id);
    }
    adam.step(m.params, lr);

    StepRecord rec;
    rec.step = adam.step_count();
    rec.plm = plm_sum / static_cast<double>(batch.size());
    rec.has_mim = mim_count > 0;
    rec.mim = mim_count > 0 ? mim_sum / static_cast<double>(mim_count) : 0.0;
    rec.lr = lr;
    return rec;
}

}  // namespace vlci::vlp
