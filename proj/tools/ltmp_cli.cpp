// Command-line front end: data generation, training, evaluation and analysis.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ltmp/analysis.hpp"
#include "ltmp/checkpoint.hpp"
#include "ltmp/dataset.hpp"
#include "ltmp/flops.hpp"
#include "ltmp/io.hpp"
#include "ltmp/settings.hpp"
#include "ltmp/trainer.hpp"

namespace fs = std::filesystem;
using namespace ltmp;

namespace {

struct Context {
    Settings settings;
    fs::path out;
};

void write_text(const fs::path& path, const std::string& text) {
    detail::write_file_atomic(path, text.data(), text.size());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

/// Collects JSON-lines records and mirrors them to stderr.
struct JsonLines {
    std::string text;
    void operator()(const nlohmann::json& j) {
        text += j.dump() + "\n";
        std::cerr << j.dump() << "\n";
    }
};

Dataset load_split(const Settings& s, Split split) {
    if (!s.data_dir.empty()) {
        const auto name = split == Split::train ? "train.ltds" : "val.ltds";
        return load_dataset(fs::path(s.data_dir) / name);
    }
    return generate_dataset(dataset_spec(s, split));
}

/// Loads the checkpoint named by `checkpoint`; reduction keys given explicitly override the stored ones.
Checkpoint load_model(const Settings& s) {
    if (s.checkpoint.empty()) throw SettingsError("this command needs checkpoint = PATH");
    Checkpoint ck = load_checkpoint(s.checkpoint);
    if (s.is_explicit("reduction_order")) ck.config.reduction_order = s.model.reduction_order;
    if (s.is_explicit("importance_score")) ck.config.importance_score = s.model.importance_score;
    if (s.is_explicit("merge_weighting")) ck.config.merge_weighting = s.model.merge_weighting;
    if (s.is_explicit("topk")) ck.config.topk = s.model.topk;
    if (s.is_explicit("tau")) ck.thresholds.tau = s.finetune.tau;
    return ck;
}

int cmd_gen_data(const Context& c) {
    nlohmann::json report = nlohmann::json::object();
    for (auto split : {Split::train, Split::val}) {
        const auto spec = dataset_spec(c.settings, split);
        const Dataset ds = generate_dataset(spec);
        const std::string name = split == Split::train ? "train" : "val";
        save_dataset(ds, c.out / (name + ".ltds"));
        const double chi = label_chi_square(ds, spec.classes);
        std::clog << name << ": " << ds.size() << " images, label chi-square " << chi << " (" << spec.classes - 1
                  << " dof)\n";
        report[name] = {{"samples", ds.size()}, {"label_chi_square", chi}};
    }
    write_json(c.out / "gen-data.json", report);
    return 0;
}

int cmd_pretrain(const Context& c) {
    const auto& s = c.settings;
    s.model.validate();
    const Dataset train = load_split(s, Split::train);
    const Dataset val = load_split(s, Split::val);
    JsonLines log;
    Checkpoint ck = pretrain_backbone(make_checkpoint(s.model, s.seed), train, &val, pretrain_config(s), std::ref(log));
    save_checkpoint(ck, c.out / "pretrain.ckpt");
    write_text(c.out / "pretrain.jsonl", log.text);
    write_text(c.out / "pretrain_metrics.json", nlohmann::json::parse(ck.meta.metrics).dump(2) + "\n");
    std::cout << "pretrain: " << ck.meta.metrics << "\n";
    return 0;
}

int cmd_ltmp(const Context& c) {
    auto s = c.settings;
    Checkpoint ck = load_model(s);
    if (!s.is_explicit("reduction_order")) ck.config.reduction_order = s.model.reduction_order;
    const Dataset train = load_split(s, Split::train);
    const Dataset val = load_split(s, Split::val);
    const std::uint64_t before = params_checksum(ck.params);
    JsonLines log;
    auto result = ltmp_finetune(ck, train, finetune_config(s), std::ref(log));
    if (params_checksum(result.checkpoint.params) != before) throw std::logic_error("backbone changed during ltmp");
    const auto metrics = evaluate(result.checkpoint, val, ExecMode::inference);
    auto j = to_json(metrics);
    j["r_target"] = s.finetune.r_target;
    j["theta_merge"] = result.checkpoint.thresholds.merge;
    j["theta_prune"] = result.checkpoint.thresholds.prune;
    j["backbone_checksum"] = before;
    result.checkpoint.meta.metrics = j.dump();
    save_checkpoint(result.checkpoint, c.out / "ltmp.ckpt");
    write_text(c.out / "ltmp_trajectory.jsonl", log.text);
    write_json(c.out / "ltmp_metrics.json", j);
    std::cout << "ltmp: top1 " << metrics.top1 << "  r_FLOPs " << metrics.mean_r_flops << "\n";
    return 0;
}

int cmd_eval(const Context& c) {
    const auto& s = c.settings;
    const Checkpoint ck = load_model(s);
    const Dataset ds = load_split(s, s.eval_split == "train" ? Split::train : Split::val);
    const auto mode = s.eval_mode == "train" ? ExecMode::train : ExecMode::inference;
    const auto metrics = evaluate(ck, ds, mode);
    auto j = to_json(metrics);
    j["mode"] = s.eval_mode;
    j["split"] = s.eval_split;
    write_json(c.out / "eval.json", j);
    std::cout << "eval: top1 " << metrics.top1 << "  r_FLOPs " << metrics.mean_r_flops << "\n";
    return 0;
}

int cmd_correlate(const Context& c) {
    const auto& s = c.settings;
    const Checkpoint ck = load_model(s);
    const Dataset ds = load_split(s, s.eval_split == "train" ? Split::train : Split::val);
    CorrelationOptions opt;
    opt.k = s.correlate_k;
    opt.samples = s.analysis_samples;
    const auto rep = correlation_report(ck, ds, opt);
    std::ostringstream table;
    table << "# Kendall tau-b between importance and similarity scores of set-A tokens\n"
          << "# computed per sample, then averaged; k = " << rep.k << ", samples = " << rep.samples << "\n"
          << "layer  mean_tau  used  skipped  clamped\n";
    for (const auto& l : rep.layers) {
        char line[96];
        std::snprintf(line, sizeof line, "%5zu  %8.4f  %4zu  %7zu  %7zu\n", l.layer, l.mean_tau, l.samples_used,
                      l.skipped, l.clamped);
        table << line;
    }
    write_json(c.out / "correlation.json", to_json(rep));
    write_text(c.out / "correlation.txt", table.str());
    std::cout << table.str();
    return 0;
}

int cmd_visualize(const Context& c) {
    const auto& s = c.settings;
    const Checkpoint ck = load_model(s);
    const Dataset ds = load_split(s, s.eval_split == "train" ? Split::train : Split::val);
    RenderOptions ro;
    ro.scale = s.render_scale;
    const auto vis = visualize_tokens(ck, ds, s.image_index, ro);
    write_ppm(vis.input, c.out / "input.ppm");
    write_ppm(vis.patchified, c.out / "patchified.ppm");
    for (std::size_t l = 0; l < vis.layers.size(); ++l) {
        char name[32];
        std::snprintf(name, sizeof name, "layer_%02zu.ppm", l + 1);
        write_ppm(vis.layers[l], c.out / name);
    }
    write_text(c.out / "trace.jsonl", to_json_lines(vis.trace, s.image_index));
    std::cout << "visualize: wrote " << vis.layers.size() + 2 << " images to " << c.out.string() << "\n";
    return 0;
}

int cmd_kdist(const Context& c) {
    const auto& s = c.settings;
    const Checkpoint ck = load_model(s);
    const Dataset ds = load_split(s, s.eval_split == "train" ? Split::train : Split::val);
    const auto rep = k_distribution_report(ck, ds, s.analysis_samples);
    std::ostringstream table;
    table << "# merged / pruned tokens per layer over " << rep.samples << " samples (q1 median q3 mean)\n"
          << "layer  merged                          pruned\n";
    for (const auto& l : rep.layers) {
        char line[128];
        std::snprintf(line, sizeof line, "%5zu  %6.2f %6.2f %6.2f %6.2f    %6.2f %6.2f %6.2f %6.2f\n", l.layer,
                      l.merged.q1, l.merged.median, l.merged.q3, l.merged.mean, l.pruned.q1, l.pruned.median,
                      l.pruned.q3, l.pruned.mean);
        table << line;
    }
    write_json(c.out / "kdist.json", to_json(rep));
    write_text(c.out / "kdist.txt", table.str());
    std::cout << table.str();
    return 0;
}

int cmd_flops_report(const Context& c) {
    const auto& s = c.settings;
    std::vector<double> kept(s.model.blocks, 1.0);
    if (!s.checkpoint.empty()) {
        const Checkpoint ck = load_model(s);
        const Dataset ds = load_split(s, s.eval_split == "train" ? Split::train : Split::val);
        const auto m = evaluate(ck, ds, ExecMode::inference);
        for (std::size_t l = 0; l < kept.size(); ++l) kept[l] = m.mean_tokens.at(l) / static_cast<double>(ck.config.tokens());
    }
    s.model.validate();
    const double n = static_cast<double>(s.model.tokens());
    const double d = static_cast<double>(s.model.embed_dim);
    const auto rep = make_flops_report(kept, n, d);
    auto j = to_json(rep);
    j["tokens"] = s.model.tokens();
    j["embed_dim"] = s.model.embed_dim;
    write_json(c.out / "flops.json", j);
    char line[160];
    std::snprintf(line, sizeof line, "block FLOPs total %.4e (baseline %.4e), r_FLOPs %.6f\n", rep.total, rep.baseline,
                  rep.r_flops);
    std::cout << line;
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Learned-threshold token merging and pruning for a small vision transformer"};
    app.require_subcommand(1);
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir = "out";
    app.add_option("--config", config_path, "settings file of key = value lines");
    app.add_option("--set", overrides, "override one setting, key=value (repeatable)")->take_all();
    app.add_option("--out", out_dir, "output directory");
    app.fallthrough();

    struct Command {
        const char* name;
        const char* help;
        int (*run)(const Context&);
    };
    const Command commands[] = {
        {"gen-data", "write the synthetic train/val splits", cmd_gen_data},
        {"pretrain", "train the backbone without token reduction", cmd_pretrain},
        {"ltmp", "fine-tune the merge/prune thresholds for one epoch", cmd_ltmp},
        {"eval", "top-1 accuracy, r_FLOPs and tokens per layer", cmd_eval},
        {"correlate", "Kendall tau between importance and similarity scores", cmd_correlate},
        {"visualize", "render kept, merged and pruned patches per layer", cmd_visualize},
        {"kdist", "distribution of merged/pruned counts per layer", cmd_kdist},
        {"flops-report", "block FLOPs and r_FLOPs for the configured shape", cmd_flops_report},
    };
    for (const auto& cmd : commands) app.add_subcommand(cmd.name, cmd.help);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        std::cerr << app.help();
        return 2;
    }

    Context ctx;
    try {
        if (!config_path.empty()) apply_settings_file(ctx.settings, config_path);
        for (const auto& o : overrides) apply_override(ctx.settings, o);
        ctx.settings.model.validate();
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 2;
    }
    ctx.out = out_dir;

    try {
        fs::create_directories(ctx.out);
        for (const auto& cmd : commands) {
            if (app.got_subcommand(cmd.name)) return cmd.run(ctx);
        }
    } catch (const SettingsError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}
