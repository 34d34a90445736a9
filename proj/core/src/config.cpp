#include "vlci/config.hpp"

#include <fstream>
#include <sstream>

namespace vlci::train {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

int to_int(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected integer, got '" + v + "'");
    }
}

double to_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "': expected number, got '" + v + "'");
    }
}

bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1" || v == "yes") return true;
    if (v == "false" || v == "0" || v == "no") return false;
    throw ConfigError("config key '" + key + "': expected boolean, got '" + v + "'");
}

}  // namespace

RunConfig RunConfig::for_stage(const std::string& stage) {
    RunConfig cfg;
    cfg.stage = stage;
    if (stage == "pretrain") {
        cfg.epochs = 30;
        cfg.batch_size = 64;
        cfg.optimizer_kind = "adamw";
        cfg.lr = 5e-4;
        cfg.weight_decay = 1e-2;
        cfg.warmup_fraction = 0.1;
    } else if (stage == "finetune") {
        cfg.epochs = 10;
        cfg.batch_size = 16;
        cfg.optimizer_kind = "adam";
        cfg.lr = 1e-5;
        cfg.weight_decay = 5e-5;
        cfg.warmup_fraction = 0.0;
    } else {
        throw ConfigError("unknown stage '" + stage + "' (expected pretrain or finetune)");
    }
    return cfg;
}

void RunConfig::validate() const {
    if (stage != "pretrain" && stage != "finetune") throw ConfigError("stage must be pretrain or finetune");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (optimizer_kind != "adamw" && optimizer_kind != "adam") {
        throw ConfigError("optimizer.kind must be adamw or adam");
    }
    if (lr <= 0.0) throw ConfigError("optimizer.lr must be positive");
    if (warmup_fraction < 0.0 || warmup_fraction >= 1.0) {
        throw ConfigError("optimizer.warmup_fraction must lie in [0, 1)");
    }
    if (decode.beam_width < 1) throw ConfigError("decode.beam_width must be >= 1");
    if (annotations.empty()) throw ConfigError("paths.annotations is required");
}

std::map<std::string, std::string> parse_kv_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::map<std::string, std::string> kv;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config file '" + path + "' line " + std::to_string(lineno) +
                              ": expected key = value");
        }
        kv[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
    }
    return kv;
}

void apply_setting(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "stage") {
        RunConfig fresh = RunConfig::for_stage(value);
        cfg.stage = value;
        cfg.epochs = fresh.epochs;
        cfg.batch_size = fresh.batch_size;
        cfg.optimizer_kind = fresh.optimizer_kind;
        cfg.lr = fresh.lr;
        cfg.weight_decay = fresh.weight_decay;
        cfg.warmup_fraction = fresh.warmup_fraction;
    } else if (key == "epochs") {
        cfg.epochs = to_int(key, value);
    } else if (key == "batch_size") {
        cfg.batch_size = to_int(key, value);
    } else if (key == "seed") {
        try {
            cfg.seed = static_cast<std::uint64_t>(std::stoull(value));
        } catch (const std::exception&) {
            throw ConfigError("config key 'seed': expected unsigned integer, got '" + value + "'");
        }
    } else if (key == "vocab.min_count") {
        cfg.vocab_min_count = to_int(key, value);
    } else if (key == "optimizer.kind") {
        cfg.optimizer_kind = value;
    } else if (key == "optimizer.lr") {
        cfg.lr = to_double(key, value);
    } else if (key == "optimizer.weight_decay") {
        cfg.weight_decay = to_double(key, value);
    } else if (key == "optimizer.warmup_fraction") {
        cfg.warmup_fraction = to_double(key, value);
    } else if (key == "optimizer.clip_norm") {
        cfg.clip_norm = to_double(key, value);
    } else if (key == "optimizer.beta1") {
        cfg.beta1 = to_double(key, value);
    } else if (key == "optimizer.beta2") {
        cfg.beta2 = to_double(key, value);
    } else if (key == "decode.strategy") {
        if (value == "beam") {
            cfg.decode.strategy = DecodeConfig::Strategy::Beam;
        } else if (value == "greedy") {
            cfg.decode.strategy = DecodeConfig::Strategy::Greedy;
        } else {
            throw ConfigError("decode.strategy must be beam or greedy");
        }
    } else if (key == "decode.beam_width") {
        cfg.decode.beam_width = to_int(key, value);
    } else if (key == "decode.max_len") {
        cfg.decode.max_len = to_int(key, value);
    } else if (key == "decode.length_norm_pow") {
        cfg.decode.length_norm_pow = to_double(key, value);
    } else if (key == "paths.annotations") {
        cfg.annotations = value;
    } else if (key == "paths.images") {
        cfg.images_dir = value;
    } else if (key == "paths.checkpoint_in") {
        cfg.checkpoint_in = value;
    } else if (key == "paths.checkpoint_out") {
        cfg.checkpoint_out = value;
    } else if (key == "paths.log") {
        cfg.log_path = value;
    } else if (key == "paths.report_out") {
        cfg.report_out = value;
    } else if (key == "paths.debug_trace") {
        cfg.debug_trace = value;
    } else if (key == "model.d") {
        cfg.model.d = to_int(key, value);
    } else if (key == "model.heads") {
        cfg.model.heads = to_int(key, value);
    } else if (key == "model.enc_layers") {
        cfg.model.enc_layers = to_int(key, value);
    } else if (key == "model.dec_layers") {
        cfg.model.dec_layers = to_int(key, value);
    } else if (key == "model.patch_grid") {
        cfg.model.patch_grid = to_int(key, value);
    } else if (key == "model.k_local") {
        cfg.model.k_local = to_int(key, value);
    } else if (key == "model.mask_ratio") {
        cfg.model.mask_ratio = to_double(key, value);
    } else if (key == "model.max_len") {
        cfg.model.max_len = to_int(key, value);
        cfg.decode.max_len = cfg.model.max_len;
    } else if (key == "model.image_size") {
        cfg.model.image_size = to_int(key, value);
    } else if (key == "model.image_channels") {
        cfg.model.image_channels = to_int(key, value);
    } else if (key == "model.stem_channels") {
        std::istringstream ss(value);
        std::string part;
        std::vector<int> ch;
        while (std::getline(ss, part, ',')) ch.push_back(to_int(key, trim(part)));
        if (ch.size() != 3) throw ConfigError("model.stem_channels expects 3 comma-separated values");
        cfg.model.stem_channels = {ch[0], ch[1], ch[2]};
    } else if (key == "model.ffn_mult") {
        cfg.model.ffn_mult = to_int(key, value);
    } else if (key == "model.degrade_factor") {
        cfg.model.degrade_factor = to_int(key, value);
    } else if (key == "model.use_causal") {
        cfg.model.use_causal = to_bool(key, value);
    } else if (key == "model.init_scale") {
        cfg.model.init_scale = to_double(key, value);
    } else {
        throw ConfigError("unknown config key '" + key + "'");
    }
}

void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& kv) {
    // stage first, so stage defaults cannot clobber explicit keys
    auto it = kv.find("stage");
    if (it != kv.end()) apply_setting(cfg, "stage", it->second);
    for (const auto& [k, v] : kv) {
        if (k == "stage") continue;
        apply_setting(cfg, k, v);
    }
}

}  // namespace vlci::train
