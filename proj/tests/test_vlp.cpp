#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "vlci/vlp.hpp"

#include <cmath>
#include <set>

using namespace vlci;
using namespace vlci::vlp;
using model::Model;
using model::ModelConfig;
using nn::Ctx;

namespace {

ModelConfig tiny_config() {
    ModelConfig cfg;
    cfg.d = 16;
    cfg.heads = 2;
    cfg.enc_layers = 1;
    cfg.dec_layers = 1;
    cfg.patch_grid = 2;
    cfg.image_size = 32;
    cfg.k_local = 1;
    cfg.vocab_size = 23;
    cfg.max_len = 12;
    cfg.stem_channels = {4, 6, 8};
    cfg.ffn_mult = 2;
    cfg.mask_ratio = 0.5;
    return cfg;
}

data::RawImage random_image(Rng& rng, int size) {
    data::RawImage img;
    img.channels = 1;
    img.height = size;
    img.width = size;
    img.pix.resize(static_cast<std::size_t>(size) * size);
    for (auto& p : img.pix) p = static_cast<float>(rng.uniform());
    return img;
}

data::TokenizedReport make_report(std::vector<int> word_ids, int max_len) {
    data::TokenizedReport r;
    r.ids.assign(static_cast<std::size_t>(max_len), data::Vocabulary::kPad);
    int p = 0;
    r.ids[p++] = data::Vocabulary::kBos;
    for (int id : word_ids) r.ids[p++] = id;
    r.ids[p++] = data::Vocabulary::kEos;
    r.length = p;
    return r;
}

}  // namespace

TEST_CASE("split_prefix: boundaries, partition, uniformity") {
    auto rep = make_report({5}, 8);  // length 3
    // find a seed that forces n_p = 0
    bool saw_zero = false;
    for (std::uint64_t s = 0; s < 64 && !saw_zero; ++s) {
        Rng rng(s);
        auto sp = split_prefix(rep, rng);
        if (sp.n_p == 0) {
            saw_zero = true;
            CHECK(sp.prefix.empty());
            CHECK(sp.target.size() == 3);
            CHECK(sp.target[0] == data::Vocabulary::kBos);
        }
    }
    CHECK(saw_zero);

    auto rep10 = make_report({5, 6, 7, 8, 9, 10, 11, 12}, 16);  // length 10
    Rng rng(3);
    for (int t = 0; t < 50; ++t) {
        auto sp = split_prefix(rep10, rng);
        CHECK(sp.prefix.size() + sp.target.size() == 10);
        std::vector<int> joined = sp.prefix;
        joined.insert(joined.end(), sp.target.begin(), sp.target.end());
        CHECK(std::equal(joined.begin(), joined.end(), rep10.ids.begin()));
        if (sp.n_p == 4) {
            CHECK(sp.prefix.size() == 4);
            CHECK(sp.target.size() == 6);
        }
    }

    // Monte-Carlo: n_p uniform over {0..8}
    std::vector<int> hist(9, 0);
    Rng mc(17);
    const int draws = 10000;
    for (int t = 0; t < draws; ++t) {
        auto sp = split_prefix(rep10, mc);
        REQUIRE(sp.n_p >= 0);
        REQUIRE(sp.n_p <= 8);
        ++hist[static_cast<std::size_t>(sp.n_p)];
    }
    for (int k = 0; k < 9; ++k) {
        const double freq = static_cast<double>(hist[static_cast<std::size_t>(k)]) / draws;
        CHECK(std::abs(freq - 1.0 / 9.0) < 0.02);
    }
}

TEST_CASE("plan_mask: paper rate, arithmetic, degenerate, distinct seeds") {
    Rng rng(1);
    auto plan = plan_mask(196, 0.85, rng);
    CHECK(plan.masked.size() == 167);
    CHECK(plan.visible.size() == 29);

    auto small = plan_mask(4, 0.5, rng);
    CHECK(small.masked.size() == 2);

    CHECK_THROWS_AS(plan_mask(4, 0.9, rng), ConfigError);   // rounds to 4 == N
    CHECK_THROWS_AS(plan_mask(4, 0.1, rng), ConfigError);   // rounds to 0

    int distinct = 0;
    for (int t = 0; t < 10; ++t) {
        Rng a(100 + static_cast<std::uint64_t>(t)), b(200 + static_cast<std::uint64_t>(t));
        if (plan_mask(196, 0.85, a).masked != plan_mask(196, 0.85, b).masked) ++distinct;
    }
    CHECK(distinct == 10);

    // masked/visible partition the index set
    std::set<int> all(plan.masked.begin(), plan.masked.end());
    all.insert(plan.visible.begin(), plan.visible.end());
    CHECK(all.size() == 196);
    CHECK(*all.begin() == 0);
    CHECK(*all.rbegin() == 195);
}

TEST_CASE("plm_loss: untrained near ln V, saturation, text-only ablation") {
    auto cfg = tiny_config();
    auto m = Model<float>::build(cfg);
    Rng rng(2);
    m.init(rng);

    Rng ir(3);
    std::vector<data::RawImage> views = {random_image(ir, 32)};
    auto rep = make_report({5, 6, 7, 8}, 12);

    Ctx<float> cx(m.params, false);
    auto loss = plm_loss(cx, m, &views, rep, 2);
    const double lnv = std::log(static_cast<double>(cfg.vocab_size));
    CHECK(std::abs(loss.value()(0, 0) - lnv) / lnv < 0.15);

    // single-token target [eos]; forcing its logit to +1e4 saturates
    m.params.named("head.out.w").value.setZero();
    m.params.named("head.out.b").value.setZero();
    m.params.named("head.out.b").value(0, data::Vocabulary::kEos) = 1e4f;
    Ctx<float> c2(m.params, false);
    auto sat = plm_loss(c2, m, &views, rep, rep.length - 1);
    CHECK(sat.value()(0, 0) < 1e-3f);
}

TEST_CASE("plm_loss: image-absent equals zero-image with zeroed value paths") {
    auto cfg = tiny_config();
    auto m = Model<float>::build(cfg);
    Rng rng(4);
    m.init(rng);
    for (int l = 0; l < cfg.enc_layers; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".attn.";
        m.params.named(p + "v.w").value.setZero();
        m.params.named(p + "v.b").value.setZero();
        m.params.named(p + "o.w").value.setZero();
        m.params.named(p + "o.b").value.setZero();
    }
    for (int l = 0; l < cfg.dec_layers; ++l) {
        const std::string p = "dec." + std::to_string(l) + ".cross.";
        m.params.named(p + "v.w").value.setZero();
        m.params.named(p + "v.b").value.setZero();
        m.params.named(p + "o.w").value.setZero();
        m.params.named(p + "o.b").value.setZero();
    }
    data::RawImage zero;
    zero.channels = 1;
    zero.height = 32;
    zero.width = 32;
    zero.pix.assign(32 * 32, 0.0f);
    std::vector<data::RawImage> views = {zero};
    auto rep = make_report({5, 6, 7, 8}, 12);

    Ctx<float> c1(m.params, false), c2(m.params, false);
    auto with_img = plm_loss(c1, m, &views, rep, 2);
    auto without = plm_loss(c2, m, nullptr, rep, 2);
    CHECK(with_img.value()(0, 0) == without.value()(0, 0));
}

TEST_CASE("mim_loss: perfect reconstruction, locality, arithmetic oracle") {
    auto cfg = tiny_config();
    auto m = Model<float>::build(cfg);
    Rng rng(5);
    m.init(rng);

    Rng ir(6);
    std::vector<data::RawImage> views = {random_image(ir, 32)};
    auto rep = make_report({5, 6, 7}, 12);
    Rng pr(7);
    auto plan = plan_mask(4, 0.5, pr);

    // extract the deterministic predictions, then use them as targets
    Ctx<float> cp(m.params, false);
    Mat<float> pred = mim_predictions(cp, m, views, rep, plan).value();
    Mat<float> targets = Mat<float>::Zero(4, cfg.d);
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        targets.row(plan.masked[i]) = pred.row(static_cast<Eigen::Index>(i));
    }
    Ctx<float> c0(m.params, false);
    auto zero_loss = mim_loss_with_targets(c0, m, views, rep, plan, c0.c(targets));
    CHECK(zero_loss.value()(0, 0) == 0.0f);

    // real targets vs hand-computed MSE over masked rows
    Ctx<float> c1(m.params, false);
    Mat<float> stem = model::stem_tokens(c1, m, views[0]).value();
    auto real_loss = mim_loss(c1, m, views, rep, plan);
    double acc = 0.0;
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        Eigen::RowVectorXf diff = pred.row(static_cast<Eigen::Index>(i)) - stem.row(plan.masked[i]);
        acc += static_cast<double>(diff.cwiseProduct(diff).sum());
    }
    acc /= static_cast<double>(plan.masked.size() * static_cast<std::size_t>(cfg.d));
    CHECK(real_loss.value()(0, 0) == doctest::Approx(acc).epsilon(1e-5));

    // masking locality: perturbing targets at VISIBLE rows is invisible
    Ctx<float> c2(m.params, false), c3(m.params, false);
    Mat<float> t_all = stem;
    auto base = mim_loss_with_targets(c2, m, views, rep, plan, c2.c(t_all));
    for (int v : plan.visible) t_all.row(v).setConstant(123.0f);
    auto pert = mim_loss_with_targets(c3, m, views, rep, plan, c3.c(t_all));
    CHECK(base.value()(0, 0) == pert.value()(0, 0));  // bit-identical
}

TEST_CASE("pretrain_step: overfit, text-only, determinism") {
    auto cfg = tiny_config();
    auto m = Model<float>::build(cfg);
    Rng rng(8);
    m.init(rng);

    Rng ir(9);
    std::vector<std::vector<data::RawImage>> views;
    std::vector<data::TokenizedReport> reps;
    for (int i = 0; i < 4; ++i) {
        views.push_back({random_image(ir, 32)});
        reps.push_back(make_report({5 + i, 6 + i, 7 + i}, 12));
    }
    std::vector<BatchItem> batch;
    for (int i = 0; i < 4; ++i) batch.push_back({&reps[static_cast<std::size_t>(i)], &views[static_cast<std::size_t>(i)]});

    opt::AdamConfig ocfg;
    ocfg.weight_decay = 1e-2;
    opt::Adam<float> adam(ocfg);
    Rng step_rng(10);
    double first = 0.0, last = 0.0;
    for (int s = 0; s < 50; ++s) {
        auto rec = pretrain_step(m, batch, adam, 1e-2, step_rng);
        CHECK(rec.has_mim);
        if (s == 0) first = rec.total();
        last = rec.total();
    }
    CHECK(last < 0.5 * first);

    // text-only batch: MIM reported absent
    std::vector<BatchItem> text_batch = {{&reps[0], nullptr}};
    auto rec = pretrain_step(m, text_batch, adam, 1e-3, step_rng);
    CHECK(!rec.has_mim);
    CHECK(std::isfinite(rec.plm));

    // equal seeds give identical 5-step traces
    auto run_trace = [&](std::uint64_t seed) {
        auto mm = Model<float>::build(cfg);
        Rng r(seed);
        mm.init(r);
        opt::Adam<float> ad2(ocfg);
        Rng sr(seed + 1);
        std::vector<double> trace;
        for (int s = 0; s < 5; ++s) trace.push_back(pretrain_step(mm, batch, ad2, 1e-3, sr).total());
        return trace;
    };
    CHECK(run_trace(42) == run_trace(42));
}

TEST_CASE("gradients of PLM and MIM match finite differences (double)") {
    ModelConfig cfg = tiny_config();
    cfg.d = 8;
    cfg.heads = 2;
    auto md = Model<double>::build(cfg);
    Rng rng(11);
    nn::init_normal(md.params, rng, 0.05);

    Rng ir(12);
    data::RawImage img;
    img.channels = 1;
    img.height = 32;
    img.width = 32;
    img.pix.resize(32 * 32);
    for (auto& p : img.pix) p = static_cast<float>(ir.uniform());
    std::vector<data::RawImage> views = {img};
    auto rep = make_report({5, 6, 7, 8}, 12);
    Rng pr(13);
    auto plan = plan_mask(4, 0.5, pr);

    auto loss_fn = [&](bool mim) {
        return [&, mim]() {
            Ctx<double> cx(md.params, false);
            if (mim) return mim_loss(cx, md, views, rep, plan).value()(0, 0);
            return plm_loss(cx, md, &views, rep, 2).value()(0, 0);
        };
    };

    for (bool mim : {false, true}) {
        md.params.zero_grad();
        Ctx<double> cx(md.params);
        auto loss = mim ? mim_loss(cx, md, views, rep, plan) : plm_loss(cx, md, &views, rep, 2);
        cx.tape.backward(loss.id);
        auto eval = loss_fn(mim);
        Rng pick(mim ? 21 : 22);
        const std::size_t total = md.params.scalar_count();
        for (int t = 0; t < 8; ++t) {
            const std::size_t i = static_cast<std::size_t>(pick.below(total));
            const double orig = md.params.get_flat(i);
            const double h = 1e-5;
            md.params.set_flat(i, orig + h);
            const double fp = eval();
            md.params.set_flat(i, orig - h);
            const double fm = eval();
            md.params.set_flat(i, orig);
            const double fd = (fp - fm) / (2 * h);
            const double an = md.params.grad_flat(i);
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-7});
            CAPTURE(md.params.name_of_flat(i));
            CHECK(std::abs(fd - an) / denom < 1e-4);
        }
    }
}
