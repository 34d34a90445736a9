#include "vlci/checkpoint.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>

using json = nlohmann::json;

namespace vlci::train {

namespace {

constexpr char kMagic[8] = {'V', 'L', 'C', 'I', 'C', 'K', 'P', 'T'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_u64(std::ostream& os, std::uint64_t v) { os.write(reinterpret_cast<const char*>(&v), 8); }

std::uint32_t read_u32(std::istream& is) {
    std::uint32_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 4);
    return v;
}
std::uint64_t read_u64(std::istream& is) {
    std::uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), 8);
    return v;
}

void write_tensor(std::ostream& os, const std::string& name, const MatF& m) {
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(m.rows()));
    write_u32(os, static_cast<std::uint32_t>(m.cols()));
    os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * 4));
}

json config_to_json(const model::ModelConfig& c) {
    return json{{"d", c.d},
                {"heads", c.heads},
                {"enc_layers", c.enc_layers},
                {"dec_layers", c.dec_layers},
                {"patch_grid", c.patch_grid},
                {"k_local", c.k_local},
                {"mask_ratio", c.mask_ratio},
                {"vocab_size", c.vocab_size},
                {"max_len", c.max_len},
                {"image_size", c.image_size},
                {"image_channels", c.image_channels},
                {"stem_channels", {c.stem_channels[0], c.stem_channels[1], c.stem_channels[2]}},
                {"ffn_mult", c.ffn_mult},
                {"degrade_factor", c.degrade_factor},
                {"use_causal", c.use_causal},
                {"init_scale", c.init_scale}};
}

model::ModelConfig config_from_json(const json& j) {
    model::ModelConfig c;
    c.d = j.at("d").get<int>();
    c.heads = j.at("heads").get<int>();
    c.enc_layers = j.at("enc_layers").get<int>();
    c.dec_layers = j.at("dec_layers").get<int>();
    c.patch_grid = j.at("patch_grid").get<int>();
    c.k_local = j.at("k_local").get<int>();
    c.mask_ratio = j.at("mask_ratio").get<double>();
    c.vocab_size = j.at("vocab_size").get<int>();
    c.max_len = j.at("max_len").get<int>();
    c.image_size = j.at("image_size").get<int>();
    c.image_channels = j.at("image_channels").get<int>();
    const auto& sc = j.at("stem_channels");
    c.stem_channels = {sc.at(0).get<int>(), sc.at(1).get<int>(), sc.at(2).get<int>()};
    c.ffn_mult = j.at("ffn_mult").get<int>();
    c.degrade_factor = j.at("degrade_factor").get<int>();
    c.use_causal = j.at("use_causal").get<bool>();
    c.init_scale = j.at("init_scale").get<double>();
    return c;
}

}  // namespace

void save_checkpoint(const TrainedModel& tm, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw ConfigError("cannot write checkpoint '" + path + "'");
    os.write(kMagic, 8);
    write_u32(os, kVersion);

    json meta{{"config", config_to_json(tm.model.cfg)},
              {"step", tm.step},
              {"rng_state", tm.rng_state},
              {"vocab", tm.vocab.id_to_word},
              {"vocab_min_count", tm.vocab.min_count}};
    const std::string meta_str = meta.dump();
    write_u64(os, meta_str.size());
    os.write(meta_str.data(), static_cast<std::streamsize>(meta_str.size()));

    const auto& entries = tm.model.params.entries();
    std::uint32_t count = 0;
    for (const auto& e : entries) {
        ++count;
        if (e.m.size() != 0) count += 2;
    }
    write_u32(os, count);
    for (const auto& e : entries) {
        write_tensor(os, e.name, e.value);
        if (e.m.size() != 0) {
            write_tensor(os, "adam_m/" + e.name, e.m);
            write_tensor(os, "adam_v/" + e.name, e.v);
        }
    }
    if (!os) throw ConfigError("short write on checkpoint '" + path + "'");
}

TrainedModel load_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw ConfigError("cannot open checkpoint '" + path + "'");
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, kMagic, 8) != 0) {
        throw ConfigError("'" + path + "' is not a checkpoint archive");
    }
    const std::uint32_t version = read_u32(is);
    if (version != kVersion) {
        throw ConfigError("checkpoint version " + std::to_string(version) + " unsupported");
    }
    const std::uint64_t meta_len = read_u64(is);
    std::string meta_str(meta_len, '\0');
    is.read(meta_str.data(), static_cast<std::streamsize>(meta_len));
    json meta;
    try {
        meta = json::parse(meta_str);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint metadata corrupt: ") + e.what());
    }

    TrainedModel tm{model::Model<float>::build(config_from_json(meta.at("config")))};
    tm.step = meta.at("step").get<long>();
    tm.rng_state = meta.at("rng_state").get<std::uint64_t>();
    tm.vocab.min_count = meta.at("vocab_min_count").get<int>();
    tm.vocab.id_to_word = meta.at("vocab").get<std::vector<std::string>>();
    for (std::size_t i = data::Vocabulary::kSpecialCount; i < tm.vocab.id_to_word.size(); ++i) {
        tm.vocab.word_to_id[tm.vocab.id_to_word[i]] = static_cast<int>(i);
    }
    if (static_cast<int>(tm.vocab.id_to_word.size()) != tm.model.cfg.vocab_size) {
        throw ConfigError("checkpoint vocabulary size disagrees with its model config");
    }

    const std::uint32_t count = read_u32(is);
    std::size_t loaded_values = 0;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = read_u32(is);
        std::string name(name_len, '\0');
        is.read(name.data(), name_len);
        const std::uint32_t rows = read_u32(is);
        const std::uint32_t cols = read_u32(is);
        MatF buf(rows, cols);
        is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size() * 4));
        if (!is) throw ConfigError("checkpoint '" + path + "' truncated at '" + name + "'");

        std::string base = name;
        int kind = 0;
        if (base.rfind("adam_m/", 0) == 0) {
            base = base.substr(7);
            kind = 1;
        } else if (base.rfind("adam_v/", 0) == 0) {
            base = base.substr(7);
            kind = 2;
        }
        if (!tm.model.params.has(base)) {
            throw ConfigError("checkpoint has unexpected tensor '" + name + "'");
        }
        auto& e = tm.model.params.named(base);
        if (e.value.rows() != buf.rows() || e.value.cols() != buf.cols()) {
            throw ConfigError("checkpoint tensor '" + name + "' has shape " + std::to_string(buf.rows()) +
                              "x" + std::to_string(buf.cols()) + ", expected " +
                              std::to_string(e.value.rows()) + "x" + std::to_string(e.value.cols()));
        }
        if (kind == 0) {
            e.value = buf;
            ++loaded_values;
        } else if (kind == 1) {
            e.m = buf;
        } else {
            e.v = buf;
        }
    }
    if (loaded_values != tm.model.params.count()) {
        throw ConfigError("checkpoint is missing " +
                          std::to_string(tm.model.params.count() - loaded_values) + " parameter tensors");
    }
    return tm;
}

}  // namespace vlci::train
