#include "vlci/metrics.hpp"
#include "vlci/findings.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <map>
#include <sstream>

namespace vlci::metrics {

namespace {

using Tokens = std::vector<std::string>;

std::map<Tokens, long> ngram_counts(const Tokens& toks, int n) {
    std::map<Tokens, long> counts;
    if (static_cast<int>(toks.size()) < n) return counts;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
        Tokens g(toks.begin() + static_cast<long>(i), toks.begin() + static_cast<long>(i) + n);
        ++counts[std::move(g)];
    }
    return counts;
}

void require_nonempty(const Corpus& corpus, const char* op) {
    if (corpus.pairs.empty()) throw ShapeError(std::string(op) + ": empty corpus");
    for (const auto& p : corpus.pairs) {
        if (p.reference.empty() || p.hypothesis.empty()) {
            throw ShapeError(std::string(op) + ": empty token list in pair '" + p.id + "'");
        }
    }
}

}  // namespace

double bleu(const Corpus& corpus, int max_n, const MetricOptions& opts) {
    require_nonempty(corpus, "bleu");
    if (max_n < 1 || max_n > 4) throw ConfigError("bleu: max_n must be in 1..4");

    long hyp_len = 0, ref_len = 0;
    std::vector<long> matched(static_cast<std::size_t>(max_n), 0);
    std::vector<long> total(static_cast<std::size_t>(max_n), 0);
    for (const auto& p : corpus.pairs) {
        hyp_len += static_cast<long>(p.hypothesis.size());
        ref_len += static_cast<long>(p.reference.size());
        for (int n = 1; n <= max_n; ++n) {
            auto hyp = ngram_counts(p.hypothesis, n);
            auto ref = ngram_counts(p.reference, n);
            for (const auto& [g, c] : hyp) {
                total[static_cast<std::size_t>(n - 1)] += c;
                auto it = ref.find(g);
                if (it != ref.end()) {
                    matched[static_cast<std::size_t>(n - 1)] += std::min(c, it->second);
                }
            }
        }
    }
    double log_sum = 0.0;
    for (int n = 1; n <= max_n; ++n) {
        double prec = total[static_cast<std::size_t>(n - 1)] > 0
                          ? static_cast<double>(matched[static_cast<std::size_t>(n - 1)]) /
                                static_cast<double>(total[static_cast<std::size_t>(n - 1)])
                          : 0.0;
        if (prec <= 0.0) prec = opts.bleu_epsilon;
        log_sum += std::log(prec) / max_n;
    }
    const double bp = hyp_len >= ref_len
                          ? 1.0
                          : std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len));
    return bp * std::exp(log_sum);
}

namespace {

long lcs_length(const Tokens& a, const Tokens& b) {
    std::vector<long> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            cur[j] = (a[i - 1] == b[j - 1]) ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

}  // namespace

double rouge_l(const Corpus& corpus, const MetricOptions& opts) {
    require_nonempty(corpus, "rouge_l");
    const double beta2 = opts.rouge_beta * opts.rouge_beta;
    double sum = 0.0;
    for (const auto& p : corpus.pairs) {
        const long lcs = lcs_length(p.reference, p.hypothesis);
        if (lcs == 0) continue;
        const double r = static_cast<double>(lcs) / static_cast<double>(p.reference.size());
        const double pr = static_cast<double>(lcs) / static_cast<double>(p.hypothesis.size());
        sum += (1.0 + beta2) * r * pr / (r + beta2 * pr);
    }
    return sum / static_cast<double>(corpus.pairs.size());
}

namespace {

std::string crude_stem(const std::string& w) {
    for (const char* suf : {"ing", "ed", "es", "s"}) {
        const std::size_t n = std::strlen(suf);
        if (w.size() > n && w.compare(w.size() - n, n, suf) == 0) {
            return w.substr(0, w.size() - n);
        }
    }
    return w;
}

}  // namespace

double meteor_lite(const Corpus& corpus) {
    require_nonempty(corpus, "meteor_lite");
    double sum = 0.0;
    for (const auto& p : corpus.pairs) {
        const auto& hyp = p.hypothesis;
        const auto& ref = p.reference;
        std::vector<int> align(hyp.size(), -1);
        std::vector<bool> used(ref.size(), false);
        // exact matches first, then suffix-stem matches for the remainder;
        // each stage pairs a hypothesis token with the earliest free
        // reference token
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && hyp[i] == ref[j]) {
                    align[i] = static_cast<int>(j);
                    used[j] = true;
                    break;
                }
            }
        }
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            if (align[i] >= 0) continue;
            const std::string hs = crude_stem(hyp[i]);
            for (std::size_t j = 0; j < ref.size(); ++j) {
                if (!used[j] && hs == crude_stem(ref[j])) {
                    align[i] = static_cast<int>(j);
                    used[j] = true;
                    break;
                }
            }
        }
        long matches = 0;
        for (int a : align)
            if (a >= 0) ++matches;
        if (matches == 0) continue;
        long chunks = 0;  // maximal runs adjacent in both sentences
        int prev = -2;
        for (std::size_t i = 0; i < hyp.size(); ++i) {
            if (align[i] < 0) {
                prev = -2;
                continue;
            }
            if (align[i] != prev + 1) ++chunks;
            prev = align[i];
        }
        const double precision = static_cast<double>(matches) / static_cast<double>(hyp.size());
        const double recall = static_cast<double>(matches) / static_cast<double>(ref.size());
        const double fmean = 10.0 * precision * recall / (recall + 9.0 * precision);
        const double frag = static_cast<double>(chunks) / static_cast<double>(matches);
        const double penalty = 0.5 * frag * frag * frag;
        sum += fmean * (1.0 - penalty);
    }
    return sum / static_cast<double>(corpus.pairs.size());
}

double cider(const Corpus& corpus, const MetricOptions& opts) {
    require_nonempty(corpus, "cider");
    if (corpus.pairs.size() < 2) throw ShapeError("cider: needs >= 2 pairs for document frequencies");
    const double n_docs = static_cast<double>(corpus.pairs.size());

    double total_score = 0.0;
    for (int n = 1; n <= 4; ++n) {
        std::map<Tokens, long> df;  // document frequency over the reference set
        std::vector<std::map<Tokens, long>> ref_counts, hyp_counts;
        for (const auto& p : corpus.pairs) {
            ref_counts.push_back(ngram_counts(p.reference, n));
            hyp_counts.push_back(ngram_counts(p.hypothesis, n));
            for (const auto& [g, c] : ref_counts.back()) ++df[g];
        }
        double level_sum = 0.0;
        for (std::size_t i = 0; i < corpus.pairs.size(); ++i) {
            const auto& rc = ref_counts[i];
            const auto& hc = hyp_counts[i];
            auto idf = [&](const Tokens& g) {
                auto it = df.find(g);
                const double d = it == df.end() ? 0.0 : static_cast<double>(it->second);
                return std::log(n_docs / std::max(1.0, d));
            };
            double dot = 0.0, norm_hyp = 0.0, norm_ref = 0.0;
            for (const auto& [g, c] : hc) {
                const double w = idf(g);
                const double hfull = static_cast<double>(c) * w;
                norm_hyp += hfull * hfull;
                auto it = rc.find(g);
                if (it == rc.end()) continue;
                const double hv =
                    opts.cider_clip ? static_cast<double>(std::min(c, it->second)) * w : hfull;
                dot += hv * static_cast<double>(it->second) * w;
            }
            for (const auto& [g, c] : rc) {
                const double rv = static_cast<double>(c) * idf(g);
                norm_ref += rv * rv;
            }
            if (norm_hyp <= 0.0 || norm_ref <= 0.0) continue;
            const double len_diff = static_cast<double>(corpus.pairs[i].hypothesis.size()) -
                                    static_cast<double>(corpus.pairs[i].reference.size());
            const double gauss =
                std::exp(-(len_diff * len_diff) / (2.0 * opts.cider_sigma * opts.cider_sigma));
            level_sum += gauss * dot / (std::sqrt(norm_hyp) * std::sqrt(norm_ref));
        }
        total_score += level_sum / n_docs;
    }
    return 10.0 * total_score / 4.0;
}

FindingLabels label_findings(const std::vector<std::string>& tokens) {
    static const std::vector<std::string> negation_cues = {"no", "without", "free", "negative"};
    FindingLabels labels{};
    for (int f = 0; f < findings::kCount; ++f) {
        const auto phrase = findings::keyword_tokens(f);
        bool positive = false;
        for (std::size_t start = 0; start + phrase.size() <= tokens.size() && !positive; ++start) {
            bool match = true;
            for (std::size_t k = 0; k < phrase.size(); ++k) {
                if (tokens[start + k] != phrase[k]) {
                    match = false;
                    break;
                }
            }
            if (!match) continue;
            // the window inspects tokens strictly before the phrase, so a
            // phrase that itself starts with "no" is not self-negating
            bool negated = false;
            const std::size_t lo = start >= 3 ? start - 3 : 0;
            for (std::size_t j = lo; j < start && !negated; ++j) {
                for (const auto& cue : negation_cues) {
                    if (tokens[j] == cue) {
                        negated = true;
                        break;
                    }
                }
            }
            if (!negated) positive = true;
        }
        labels[static_cast<std::size_t>(f)] = positive;
    }
    return labels;
}

CeScores ce_metrics(const std::vector<FindingLabels>& refs, const std::vector<FindingLabels>& hyps) {
    if (refs.size() != hyps.size()) throw ShapeError("ce_metrics: ref/hyp length mismatch");
    long tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < refs.size(); ++i) {
        for (std::size_t f = 0; f < refs[i].size(); ++f) {
            const bool r = refs[i][f], h = hyps[i][f];
            if (h && r) ++tp;
            else if (h && !r) ++fp;
            else if (!h && r) ++fn;
        }
    }
    CeScores s;
    s.precision = (tp + fp) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    s.recall = (tp + fn) > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

EvalReport evaluate_corpus(const Corpus& corpus, const MetricOptions& opts) {
    EvalReport rep;
    rep.corpus_size = static_cast<int>(corpus.pairs.size());
    rep.bleu1 = bleu(corpus, 1, opts);
    rep.bleu2 = bleu(corpus, 2, opts);
    rep.bleu3 = bleu(corpus, 3, opts);
    rep.bleu4 = bleu(corpus, 4, opts);
    rep.rouge = rouge_l(corpus, opts);
    rep.meteor = meteor_lite(corpus);
    rep.cider_score = corpus.pairs.size() >= 2 ? cider(corpus, opts) : 0.0;
    std::vector<FindingLabels> refs, hyps;
    for (const auto& p : corpus.pairs) {
        refs.push_back(label_findings(p.reference));
        hyps.push_back(label_findings(p.hypothesis));
    }
    rep.ce = ce_metrics(refs, hyps);
    return rep;
}

namespace {

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

std::string EvalReport::serialize() const {
    std::ostringstream os;
    os << "corpus_size=" << corpus_size << "\n";
    os << "bleu1=" << fmt(bleu1) << "\n";
    os << "bleu2=" << fmt(bleu2) << "\n";
    os << "bleu3=" << fmt(bleu3) << "\n";
    os << "bleu4=" << fmt(bleu4) << "\n";
    os << "rouge_l=" << fmt(rouge) << "\n";
    os << "meteor_lite=" << fmt(meteor) << "\n";
    os << "cider=" << fmt(cider_score) << "\n";
    os << "ce_precision=" << fmt(ce.precision) << "\n";
    os << "ce_recall=" << fmt(ce.recall) << "\n";
    os << "ce_f1=" << fmt(ce.f1) << "\n";
    return os.str();
}

std::string EvalReport::table_header() {
    return "Method            BLEU-1 BLEU-2 BLEU-3 BLEU-4 CIDEr  ROUGE-L METEOR Precision Recall F1";
}

std::string EvalReport::table_row(const std::string& label) const {
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-17s %.3f  %.3f  %.3f  %.3f  %.3f  %.3f   %.3f  %.3f     %.3f  %.3f", label.c_str(),
                  bleu1, bleu2, bleu3, bleu4, cider_score, rouge, meteor, ce.precision, ce.recall, ce.f1);
    return buf;
}

}  // namespace vlci::metrics
