#pragma once

#include "vlci/causal.hpp"
#include "vlci/checkpoint.hpp"
#include "vlci/config.hpp"
#include "vlci/metrics.hpp"
#include "vlci/vlp.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vlci::train {

struct LoadedSample {
    std::string id;
    data::TokenizedReport report;
    std::vector<data::RawImage> views;  // empty: text-only
    std::vector<std::string> ref_tokens;
};

struct Dataset {
    data::Vocabulary vocab;
    std::vector<LoadedSample> train, val, test;

    const std::vector<LoadedSample>& split(const std::string& name) const;
};

// Loads annotations + images, builds (or adopts) the vocabulary, tokenizes.
Dataset load_dataset(const RunConfig& cfg, const data::Vocabulary* fixed_vocab = nullptr);

TrainedModel pretrain(const RunConfig& cfg);

// checkpoint_in empty: fine-tuning starts from a fresh random init.
TrainedModel finetune(const RunConfig& cfg);
TrainedModel finetune_from(const RunConfig& cfg, std::optional<TrainedModel> init);

std::string generate(const model::Model<float>& m, const data::Vocabulary& vocab,
                     const std::vector<data::RawImage>& views, const DecodeConfig& decode,
                     const causal::DebugTrace* debug = nullptr);

metrics::EvalReport evaluate(const model::Model<float>& m, const data::Vocabulary& vocab,
                             const std::vector<LoadedSample>& split, const RunConfig& cfg);

// Teacher-forced fine-tuning objective for one sample (exposed for tests).
ad::Var<float> finetune_loss(nn::Ctx<float>& cx, const model::Model<float>& m, const LoadedSample& s);

}  // namespace vlci::train
