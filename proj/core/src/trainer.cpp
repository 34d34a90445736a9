#include "vlci/trainer.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace vlci::train {

const std::vector<LoadedSample>& Dataset::split(const std::string& name) const {
    if (name == "train") return train;
    if (name == "val") return val;
    if (name == "test") return test;
    throw ConfigError("unknown split '" + name + "'");
}

namespace {

data::RawImage load_view(const std::string& base_dir, const std::string& rel,
                         std::map<std::string, data::RawImage>& cache, const model::ModelConfig& mc) {
    const std::string full = fs::path(rel).is_absolute() ? rel : (fs::path(base_dir) / rel).string();
    auto it = cache.find(full);
    if (it == cache.end()) {
        it = cache.emplace(full, data::load_png(full)).first;
    }
    const data::RawImage& img = it->second;
    if (img.height != mc.image_size || img.width != mc.image_size) {
        throw ConfigError("image '" + full + "' is " + std::to_string(img.width) + "x" +
                          std::to_string(img.height) + ", model expects " + std::to_string(mc.image_size) +
                          "x" + std::to_string(mc.image_size));
    }
    return img;
}

std::vector<LoadedSample> load_split(const std::vector<data::Sample>& samples, const std::string& base_dir,
                                     const data::Vocabulary& vocab, const model::ModelConfig& mc,
                                     std::map<std::string, data::RawImage>& cache) {
    std::vector<LoadedSample> out;
    for (const auto& s : samples) {
        LoadedSample ls;
        ls.id = s.id;
        ls.report = data::tokenize(s.report, vocab, mc.max_len);
        ls.ref_tokens = data::normalize_tokens(s.report);
        for (const auto& p : s.image_paths) ls.views.push_back(load_view(base_dir, p, cache, mc));
        out.push_back(std::move(ls));
    }
    return out;
}

double validation_loss(model::Model<float>& m, const std::vector<LoadedSample>& val, std::uint64_t seed) {
    if (val.empty()) return std::numeric_limits<double>::infinity();
    double total = 0.0;
    long count = 0;
    Rng rng(seed);
    for (const auto& s : val) {
        auto split = vlp::split_prefix(s.report, rng);
        nn::Ctx<float> cx(m.params, false);
        double loss = static_cast<double>(
            vlp::plm_loss(cx, m, s.views.empty() ? nullptr : &s.views, s.report, split.n_p).value()(0, 0));
        if (!s.views.empty()) {
            const int n_total = m.cfg.n_patches() * static_cast<int>(s.views.size());
            auto plan = vlp::plan_mask(n_total, m.cfg.mask_ratio, rng);
            loss += static_cast<double>(vlp::mim_loss(cx, m, s.views, s.report, plan).value()(0, 0));
        }
        total += loss;
        ++count;
    }
    return total / static_cast<double>(count);
}

struct ParamSnapshot {
    std::vector<MatF> values;

    static ParamSnapshot take(const nn::ParamStore<float>& ps) {
        ParamSnapshot s;
        for (const auto& e : ps.entries()) s.values.push_back(e.value);
        return s;
    }
    void restore(nn::ParamStore<float>& ps) const {
        for (std::size_t i = 0; i < values.size(); ++i) ps.entries()[i].value = values[i];
    }
};

opt::AdamConfig optimizer_config(const RunConfig& cfg) {
    opt::AdamConfig oc;
    oc.kind = cfg.optimizer_kind == "adam" ? opt::OptimizerKind::Adam : opt::OptimizerKind::AdamW;
    oc.weight_decay = cfg.weight_decay;
    oc.clip_norm = cfg.clip_norm;
    oc.beta1 = cfg.beta1;
    oc.beta2 = cfg.beta2;
    return oc;
}

std::string resolve_images_dir(const RunConfig& cfg) {
    if (!cfg.images_dir.empty()) return cfg.images_dir;
    return fs::path(cfg.annotations).parent_path().string();
}

}  // namespace

Dataset load_dataset(const RunConfig& cfg, const data::Vocabulary* fixed_vocab) {
    auto ann = data::load_annotations(cfg.annotations);
    Dataset ds;
    if (fixed_vocab) {
        ds.vocab = *fixed_vocab;
    } else {
        std::vector<std::string> reports;
        for (const auto& s : ann.split("train")) reports.push_back(s.report);
        ds.vocab = data::build_vocabulary(reports, cfg.vocab_min_count);
    }
    const std::string base = resolve_images_dir(cfg);
    std::map<std::string, data::RawImage> cache;
    ds.train = load_split(ann.split("train"), base, ds.vocab, cfg.model, cache);
    ds.val = load_split(ann.split("val"), base, ds.vocab, cfg.model, cache);
    ds.test = load_split(ann.split("test"), base, ds.vocab, cfg.model, cache);
    return ds;
}

TrainedModel pretrain(const RunConfig& cfg) {
    cfg.validate();
    Dataset ds = load_dataset(cfg);
    if (ds.train.empty()) throw ConfigError("pretrain: train split is empty");

    model::ModelConfig mc = cfg.model;
    mc.vocab_size = ds.vocab.size();
    TrainedModel tm{model::Model<float>::build(mc), ds.vocab};
    Rng rng(cfg.seed);
    tm.model.init(rng);

    const long steps_per_epoch = (static_cast<long>(ds.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = steps_per_epoch * cfg.epochs;
    opt::Adam<float> adam(optimizer_config(cfg));

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw ConfigError("cannot open loss log '" + cfg.log_path + "'");
    }

    std::vector<int> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    double best_val = std::numeric_limits<double>::infinity();
    ParamSnapshot best = ParamSnapshot::take(tm.model.params);
    long best_step = 0;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
            std::vector<vlp::BatchItem> batch;
            for (std::size_t i = off; i < std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size)); ++i) {
                const auto& s = ds.train[static_cast<std::size_t>(order[i])];
                batch.push_back({&s.report, s.views.empty() ? nullptr : &s.views});
            }
            const double lr = opt::lr_at(adam.step_count(), total_steps, cfg.lr, cfg.warmup_fraction);
            auto rec = vlp::pretrain_step(tm.model, batch, adam, lr, rng);
            if (log) {
                json line{{"step", rec.step}, {"L_PLM", rec.plm}, {"lr", rec.lr}};
                line["L_MIM"] = rec.has_mim ? json(rec.mim) : json(nullptr);
                log << line.dump() << "\n";
            }
        }
        const double val = validation_loss(tm.model, ds.val,
                                           cfg.seed ^ (0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(epoch)));
        if (val <= best_val || ds.val.empty()) {
            best_val = val;
            best = ParamSnapshot::take(tm.model.params);
            best_step = adam.step_count();
        }
    }
    best.restore(tm.model.params);
    tm.step = best_step;
    tm.rng_state = rng.state();
    if (!cfg.checkpoint_out.empty()) save_checkpoint(tm, cfg.checkpoint_out);
    return tm;
}

ad::Var<float> finetune_loss(nn::Ctx<float>& cx, const model::Model<float>& m, const LoadedSample& s) {
    if (s.views.empty()) throw ShapeError("finetune: sample '" + s.id + "' has no image");
    const int len = s.report.length;
    std::vector<int> prefix(s.report.ids.begin(), s.report.ids.begin() + len - 1);
    std::vector<int> target(s.report.ids.begin() + 1, s.report.ids.begin() + len);
    auto logits = causal::vlci_forward(cx, m, s.views, prefix);
    return ad::nll_mean(logits, target);
}

TrainedModel finetune_from(const RunConfig& cfg, std::optional<TrainedModel> init) {
    cfg.validate();
    TrainedModel tm = [&]() -> TrainedModel {
        if (init) return std::move(*init);
        // fresh random init; vocabulary derived from the annotations
        RunConfig probe = cfg;
        Dataset ds0 = load_dataset(probe);
        model::ModelConfig mc = cfg.model;
        mc.vocab_size = ds0.vocab.size();
        TrainedModel fresh{model::Model<float>::build(mc), ds0.vocab};
        Rng r(cfg.seed);
        fresh.model.init(r);
        return fresh;
    }();
    // the fine-tuning stage keeps the pre-training tokenizer
    Dataset ds = load_dataset(cfg, &tm.vocab);
    if (ds.train.empty()) throw ConfigError("finetune: train split is empty");
    {
        std::vector<std::string> reports;
        auto ann = data::load_annotations(cfg.annotations);
        for (const auto& s : ann.split("train")) reports.push_back(s.report);
        auto derived = data::build_vocabulary(reports, cfg.vocab_min_count);
        if (derived.id_to_word != tm.vocab.id_to_word) {
            throw ConfigError("vocabulary mismatch between checkpoint and annotations (" +
                              std::to_string(derived.size()) + " vs " + std::to_string(tm.vocab.size()) +
                              " entries)");
        }
    }
    // stage settings that differ from the checkpoint's model config
    tm.model.cfg.use_causal = cfg.model.use_causal;

    const long steps_per_epoch = (static_cast<long>(ds.train.size()) + cfg.batch_size - 1) / cfg.batch_size;
    const long total_steps = steps_per_epoch * cfg.epochs;
    opt::Adam<float> adam(optimizer_config(cfg));
    Rng rng(cfg.seed + 1);

    std::ofstream log;
    if (!cfg.log_path.empty()) {
        log.open(cfg.log_path);
        if (!log) throw ConfigError("cannot open loss log '" + cfg.log_path + "'");
    }

    std::vector<int> order(ds.train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

    double best_bleu4 = -1.0;
    ParamSnapshot best = ParamSnapshot::take(tm.model.params);
    long best_step = tm.step;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
            tm.model.params.zero_grad();
            double batch_loss = 0.0;
            std::size_t n_in_batch = 0;
            const std::size_t end = std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            for (std::size_t i = off; i < end; ++i) ++n_in_batch;
            for (std::size_t i = off; i < end; ++i) {
                const auto& s = ds.train[static_cast<std::size_t>(order[i])];
                nn::Ctx<float> cx(tm.model.params);
                auto loss = finetune_loss(cx, tm.model, s);
                const double v = static_cast<double>(loss.value()(0, 0));
                if (!std::isfinite(v)) throw NumericError("fine-tuning NLL non-finite");
                batch_loss += v;
                cx.tape.backward(ad::scale(loss, 1.0f / static_cast<float>(n_in_batch)).id);
            }
            const double lr = opt::lr_at(adam.step_count(), total_steps, cfg.lr, cfg.warmup_fraction);
            adam.step(tm.model.params, lr);
            if (log) {
                json line{{"step", adam.step_count()},
                          {"L_NLL", batch_loss / static_cast<double>(n_in_batch)},
                          {"lr", lr}};
                log << line.dump() << "\n";
            }
        }
        // model selection on validation BLEU-4
        double val_bleu = 0.0;
        if (!ds.val.empty()) {
            metrics::Corpus corpus;
            for (const auto& s : ds.val) {
                const std::string hyp = generate(tm.model, tm.vocab, s.views, cfg.decode);
                auto hyp_toks = data::normalize_tokens(hyp);
                if (hyp_toks.empty()) hyp_toks.push_back("<empty>");
                corpus.pairs.push_back({s.id, s.ref_tokens, hyp_toks});
            }
            val_bleu = metrics::bleu(corpus, 4);
        }
        // ties keep the later epoch: with a tiny validation split whole
        // plateaus tie exactly and training would otherwise be thrown away
        if (val_bleu >= best_bleu4 || ds.val.empty()) {
            best_bleu4 = val_bleu;
            best = ParamSnapshot::take(tm.model.params);
            best_step = adam.step_count();
        }
    }
    best.restore(tm.model.params);
    tm.step = best_step;
    tm.rng_state = rng.state();
    if (!cfg.checkpoint_out.empty()) save_checkpoint(tm, cfg.checkpoint_out);
    return tm;
}

TrainedModel finetune(const RunConfig& cfg) {
    if (cfg.checkpoint_in.empty()) return finetune_from(cfg, std::nullopt);
    return finetune_from(cfg, load_checkpoint(cfg.checkpoint_in));
}

namespace {

struct Beam {
    std::vector<int> ids;  // includes the leading bos
    double logp = 0.0;
    bool finished = false;

    int generated() const { return static_cast<int>(ids.size()) - 1; }
};

}  // namespace

std::string generate(const model::Model<float>& m, const data::Vocabulary& vocab,
                     const std::vector<data::RawImage>& views, const DecodeConfig& decode,
                     const causal::DebugTrace* debug) {
    const int beam_width = decode.strategy == DecodeConfig::Strategy::Greedy ? 1 : decode.beam_width;
    // the positional table bounds the prefix length regardless of decode.max_len
    const int max_new = std::max(1, std::min(decode.max_len, m.cfg.max_len) - 1);

    // image features and mediators once per image; the decoder re-runs per
    // prefix on the same tape
    nn::Ctx<float> cx(const_cast<nn::ParamStore<float>&>(m.params), false);
    std::optional<causal::ForwardPieces<float>> pieces;
    ad::Var<float> memory{};
    if (m.cfg.use_causal) {
        pieces = causal::vdm_ldm_pipeline(cx, m, views);
        memory = causal::fim_fuse(cx, pieces->h_v, pieces->m_v);
        if (debug && !debug->path.empty()) {
            std::ofstream os(debug->path);
            os << "{\n";
            causal::DebugTrace::write_mat(os, "rollout_scores", pieces->scores, false);
            MatF sel(1, static_cast<Eigen::Index>(pieces->selected.size()));
            for (std::size_t i = 0; i < pieces->selected.size(); ++i)
                sel(0, static_cast<Eigen::Index>(i)) = static_cast<float>(pieces->selected[i]);
            causal::DebugTrace::write_mat(os, "selected_indices", sel, false);
            causal::DebugTrace::write_mat(os, "M_v", pieces->m_v.value(), false);
            causal::DebugTrace::write_mat(os, "M_l", pieces->m_l.value(), true);
            os << "}\n";
        }
    } else {
        auto vis = model::embed_image(cx, m, views);
        memory = model::multiway_encode<float>(cx, m, vis, std::nullopt).hidden;
    }

    auto next_logprobs = [&](const std::vector<int>& prefix_ids) {
        ad::Var<float> prefix = model::embed_ids(cx, m, prefix_ids, 0);
        if (m.cfg.use_causal) prefix = causal::fim_fuse_causal(cx, prefix, pieces->m_l);
        auto logits = model::multiway_decode<float>(cx, m, prefix, memory);
        Eigen::RowVectorXf row = logits.value().row(logits.value().rows() - 1);
        // never emit pad/bos/mask
        row(data::Vocabulary::kPad) = -std::numeric_limits<float>::infinity();
        row(data::Vocabulary::kBos) = -std::numeric_limits<float>::infinity();
        row(data::Vocabulary::kMask) = -std::numeric_limits<float>::infinity();
        const float mx = row.maxCoeff();
        Eigen::ArrayXf e = (row.array() - mx).exp();
        const float z = e.sum();
        return Eigen::ArrayXf((row.array() - mx) - std::log(z));
    };

    auto norm_score = [&](const Beam& b) {
        return b.logp / std::pow(static_cast<double>(std::max(1, b.generated())), decode.length_norm_pow);
    };

    std::vector<Beam> live = {Beam{{data::Vocabulary::kBos}, 0.0, false}};
    std::vector<Beam> finished;
    for (int step = 0; step < max_new && !live.empty(); ++step) {
        struct Cand {
            std::size_t beam;
            int token;
            double logp;
        };
        std::vector<Cand> cands;
        for (std::size_t b = 0; b < live.size(); ++b) {
            const auto lp = next_logprobs(live[b].ids);
            for (int t = 0; t < lp.size(); ++t) {
                if (std::isinf(lp(t)) && lp(t) < 0) continue;
                cands.push_back({b, t, live[b].logp + static_cast<double>(lp(t))});
            }
        }
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.logp != b.logp) return a.logp > b.logp;
            return a.token < b.token;  // deterministic tie-break
        });
        std::vector<Beam> next;
        for (const auto& c : cands) {
            if (static_cast<int>(next.size()) + 0 >= beam_width) break;
            Beam nb = live[c.beam];
            nb.ids.push_back(c.token);
            nb.logp = c.logp;
            if (c.token == data::Vocabulary::kEos || nb.generated() >= max_new) {
                nb.finished = true;
                finished.push_back(nb);
            } else {
                next.push_back(nb);
            }
        }
        live = std::move(next);
        if (static_cast<int>(finished.size()) >= beam_width) break;
    }
    for (auto& b : live) finished.push_back(b);
    if (finished.empty()) return "";
    const Beam* best = &finished[0];
    for (const auto& b : finished) {
        if (norm_score(b) > norm_score(*best)) best = &b;
    }
    return data::detokenize(best->ids, vocab);
}

metrics::EvalReport evaluate(const model::Model<float>& m, const data::Vocabulary& vocab,
                             const std::vector<LoadedSample>& split, const RunConfig& cfg) {
    if (split.empty()) throw ConfigError("evaluate: split is empty");
    metrics::Corpus corpus;
    bool first = true;
    for (const auto& s : split) {
        causal::DebugTrace dbg{first ? cfg.debug_trace : std::string{}};
        first = false;
        const std::string hyp =
            generate(m, vocab, s.views, cfg.decode, cfg.debug_trace.empty() ? nullptr : &dbg);
        auto hyp_toks = data::normalize_tokens(hyp);
        if (hyp_toks.empty()) hyp_toks.push_back("<empty>");
        corpus.pairs.push_back({s.id, s.ref_tokens, hyp_toks});
    }
    auto rep = metrics::evaluate_corpus(corpus);
    if (!cfg.report_out.empty()) {
        std::ofstream out(cfg.report_out);
        if (!out) throw ConfigError("cannot write report '" + cfg.report_out + "'");
        out << rep.serialize();
    }
    return rep;
}

}  // namespace vlci::train
