#pragma once

#include "vlci/common.hpp"

#include <array>
#include <string>
#include <vector>

namespace vlci::metrics {

struct Pair {
    std::string id;
    std::vector<std::string> reference;
    std::vector<std::string> hypothesis;
};

struct Corpus {
    std::vector<Pair> pairs;
};

struct MetricOptions {
    double bleu_epsilon = 1e-9;     // floor applied to zero n-gram precisions
    double rouge_beta = 1.2;        // F-measure beta
    double cider_sigma = 6.0;       // length-gaussian width
    bool cider_clip = true;         // CIDEr-D count clipping
};

double bleu(const Corpus& corpus, int max_n, const MetricOptions& opts = {});
double rouge_l(const Corpus& corpus, const MetricOptions& opts = {});
double meteor_lite(const Corpus& corpus);
double cider(const Corpus& corpus, const MetricOptions& opts = {});

using FindingLabels = std::array<bool, 14>;

// Keyword labeler with a 3-token negation window ("no", "without",
// "free (of)", "negative (for)").
FindingLabels label_findings(const std::vector<std::string>& tokens);

struct CeScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
};

// Micro-averaged over all (report, finding) cells; 0/0 reads as 0.
CeScores ce_metrics(const std::vector<FindingLabels>& refs, const std::vector<FindingLabels>& hyps);

struct EvalReport {
    double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
    double rouge = 0.0;
    double meteor = 0.0;
    double cider_score = 0.0;
    CeScores ce;
    int corpus_size = 0;

    // flat key=value record, one per line; stable byte-for-byte formatting
    std::string serialize() const;
    // single row shaped like the usual results tables
    std::string table_row(const std::string& label) const;
    static std::string table_header();
};

EvalReport evaluate_corpus(const Corpus& corpus, const MetricOptions& opts = {});

}  // namespace vlci::metrics
