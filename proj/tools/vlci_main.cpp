// vlci: pretrain / finetune / generate / evaluate / scm-verify / synth
#include <CLI11.hpp>

#include "vlci/checkpoint.hpp"
#include "vlci/scm.hpp"
#include "vlci/trainer.hpp"

#include <iostream>

namespace {

using namespace vlci;

train::RunConfig build_config(const std::string& stage, const std::string& config_path,
                              const std::vector<std::string>& overrides, std::optional<std::uint64_t> seed) {
    train::RunConfig cfg = train::RunConfig::for_stage(stage);
    if (!config_path.empty()) {
        train::apply_settings(cfg, train::parse_kv_file(config_path));
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) throw ConfigError("--override expects key=value, got '" + ov + "'");
        train::apply_setting(cfg, ov.substr(0, eq), ov.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    cfg.stage = stage;
    return cfg;
}

scm::ScmSizes parse_sizes(const std::string& s) {
    scm::ScmSizes sizes;
    int vals[4];
    if (std::sscanf(s.c_str(), "%d,%d,%d,%d", &vals[0], &vals[1], &vals[2], &vals[3]) != 4) {
        throw ConfigError("--sizes expects four comma-separated cardinalities, e.g. 2,2,2,2");
    }
    sizes.nz = vals[0];
    sizes.nx = vals[1];
    sizes.nm = vals[2];
    sizes.ny = vals[3];
    return sizes;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"VLCI: visual-linguistic causal intervention for report generation"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    std::optional<std::uint64_t> seed;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", config_path, "flat key=value config file");
        sub->add_option("--override", overrides, "override a config key, key=value (repeatable)");
        sub->add_option("--seed", seed, "random seed (overrides the config)");
    };

    auto* cmd_pre = app.add_subcommand("pretrain", "run the PLM+MIM pre-training stage");
    add_common(cmd_pre);

    auto* cmd_ft = app.add_subcommand("finetune", "fine-tune for report generation");
    add_common(cmd_ft);

    auto* cmd_gen = app.add_subcommand("generate", "generate a report for image(s)");
    add_common(cmd_gen);
    std::string gen_ckpt;
    std::vector<std::string> gen_images;
    std::string gen_trace;
    cmd_gen->add_option("--checkpoint", gen_ckpt, "trained checkpoint")->required();
    cmd_gen->add_option("--image", gen_images, "input PNG view (1 or 2, repeatable)")->required();
    cmd_gen->add_option("--debug-trace", gen_trace, "dump per-stage tensors to this file");

    auto* cmd_eval = app.add_subcommand("evaluate", "score a split with NLG + CE metrics");
    add_common(cmd_eval);
    std::string eval_ckpt, eval_split = "test";
    cmd_eval->add_option("--checkpoint", eval_ckpt, "trained checkpoint")->required();
    cmd_eval->add_option("--split", eval_split, "train|val|test (default test)");

    auto* cmd_scm = app.add_subcommand("scm-verify", "check the front-door theorem on random SCMs");
    std::uint64_t scm_seed = 0;
    int scm_trials = 100;
    std::string scm_sizes = "4,4,4,4";
    cmd_scm->add_option("--seed", scm_seed, "random seed");
    cmd_scm->add_option("--trials", scm_trials, "number of random SCMs");
    cmd_scm->add_option("--sizes", scm_sizes, "cardinalities |Z|,|X|,|M|,|Y|");

    auto* cmd_synth = app.add_subcommand("synth", "write a synthetic desk-scale corpus");
    std::string synth_out;
    int synth_n = 20, synth_size = 128;
    std::uint64_t synth_seed = 0;
    cmd_synth->add_option("--out", synth_out, "output directory")->required();
    cmd_synth->add_option("--n", synth_n, "number of samples");
    cmd_synth->add_option("--seed", synth_seed, "random seed");
    cmd_synth->add_option("--image-size", synth_size, "square image side in pixels");

    CLI11_PARSE(app, argc, argv);

    try {
        if (cmd_pre->parsed()) {
            auto cfg = build_config("pretrain", config_path, overrides, seed);
            auto tm = train::pretrain(cfg);
            std::cout << "pretrain done: " << tm.step << " steps kept";
            if (!cfg.checkpoint_out.empty()) std::cout << ", checkpoint at " << cfg.checkpoint_out;
            std::cout << "\n";
        } else if (cmd_ft->parsed()) {
            auto cfg = build_config("finetune", config_path, overrides, seed);
            auto tm = train::finetune(cfg);
            std::cout << "finetune done: " << tm.step << " steps kept";
            if (!cfg.checkpoint_out.empty()) std::cout << ", checkpoint at " << cfg.checkpoint_out;
            std::cout << "\n";
        } else if (cmd_gen->parsed()) {
            auto tm = train::load_checkpoint(gen_ckpt);
            train::RunConfig cfg = train::RunConfig::for_stage("finetune");
            cfg.decode.max_len = tm.model.cfg.max_len;
            for (const auto& ov : overrides) {
                const auto eq = ov.find('=');
                if (eq == std::string::npos) throw ConfigError("--override expects key=value");
                train::apply_setting(cfg, ov.substr(0, eq), ov.substr(eq + 1));
            }
            std::vector<data::RawImage> views;
            for (const auto& p : gen_images) views.push_back(data::load_png(p));
            causal::DebugTrace dbg{gen_trace};
            std::cout << train::generate(tm.model, tm.vocab, views, cfg.decode,
                                         gen_trace.empty() ? nullptr : &dbg)
                      << "\n";
        } else if (cmd_eval->parsed()) {
            auto cfg = build_config("finetune", config_path, overrides, seed);
            auto tm = train::load_checkpoint(eval_ckpt);
            cfg.model = tm.model.cfg;
            auto ds = train::load_dataset(cfg, &tm.vocab);
            auto rep = train::evaluate(tm.model, tm.vocab, ds.split(eval_split), cfg);
            std::cout << metrics::EvalReport::table_header() << "\n";
            std::cout << rep.table_row("vlci[" + eval_split + "]") << "\n";
        } else if (cmd_scm->parsed()) {
            auto rep = scm::scm_verify(scm_seed, scm_trials, parse_sizes(scm_sizes));
            std::cout << rep.text();
            return rep.pass ? 0 : 3;
        } else if (cmd_synth->parsed()) {
            data::SynthOptions opts;
            opts.seed = synth_seed;
            opts.n = synth_n;
            opts.image_size = synth_size;
            opts.out_dir = synth_out;
            auto ann = data::synth_dataset(opts);
            std::cout << "wrote " << ann.split("train").size() << "/" << ann.split("val").size() << "/"
                      << ann.split("test").size() << " train/val/test samples to " << synth_out << "\n";
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
