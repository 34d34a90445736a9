#pragma once

#include "vlci/backbone.hpp"

#include <map>
#include <string>
#include <vector>

namespace vlci::train {

struct DecodeConfig {
    enum class Strategy { Greedy, Beam };
    Strategy strategy = Strategy::Beam;
    int beam_width = 3;
    int max_len = 60;
    double length_norm_pow = 0.7;
};

struct RunConfig {
    std::string stage;  // pretrain | finetune
    int epochs = 0;
    int batch_size = 0;

    std::string optimizer_kind;  // adamw | adam
    double lr = 0.0;
    double weight_decay = 0.0;
    double warmup_fraction = 0.0;
    double clip_norm = 1.0;
    double beta1 = 0.9;
    double beta2 = 0.999;

    DecodeConfig decode;
    std::uint64_t seed = 0;

    std::string annotations;
    std::string images_dir;  // defaults to the annotation file's directory
    std::string checkpoint_in;
    std::string checkpoint_out;
    std::string log_path;
    std::string report_out;
    std::string debug_trace;

    int vocab_min_count = 1;
    model::ModelConfig model;

    static RunConfig for_stage(const std::string& stage);
    void validate() const;
};

// Flat key=value file ('#' comments); later assignments win.
std::map<std::string, std::string> parse_kv_file(const std::string& path);

// Apply "key=value" settings onto a config; unknown keys raise ConfigError.
void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value);
void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& kv);

}  // namespace vlci::train
