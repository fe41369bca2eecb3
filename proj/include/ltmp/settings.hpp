#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ltmp/config.hpp"
#include "ltmp/dataset.hpp"
#include "ltmp/trainer.hpp"

namespace ltmp {

/// Bad key, bad value or malformed line in a settings file or override.
class SettingsError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Every knob the command-line tool understands.
struct Settings {
    ModelConfig model;

    // data
    std::uint64_t seed = 0;
    std::size_t train_samples = 4096;
    std::size_t val_samples = 512;
    double noise = 0.05;
    std::string data_dir;               // empty: generate the splits in memory

    // pretraining
    std::size_t epochs = 2;
    std::size_t pretrain_batch_size = 32;
    double lr = 1e-3;

    // threshold fine-tuning
    FinetuneConfig finetune;

    // evaluation and analysis
    std::string checkpoint;
    std::string eval_mode = "inference";   // inference | train
    std::string eval_split = "val";        // train | val
    std::size_t analysis_samples = 64;
    std::size_t image_index = 0;
    std::size_t correlate_k = 8;
    std::size_t render_scale = 4;

    std::set<std::string> explicit_keys;   // keys assigned by a file or override

    void set(std::string_view key, std::string_view value);
    nlohmann::json to_json() const;
    static const std::vector<std::string>& keys();

    bool is_explicit(std::string_view key) const { return explicit_keys.count(std::string(key)) != 0; }
};

namespace detail {

inline std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

inline std::size_t parse_size(std::string_view key, std::string_view v) {
    std::size_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw SettingsError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
    return out;
}

inline std::uint64_t parse_u64(std::string_view key, std::string_view v) {
    std::uint64_t out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end) throw SettingsError(std::string(key) + ": expected a non-negative integer, got '" + std::string(v) + "'");
    return out;
}

inline double parse_real(std::string_view key, std::string_view v) {
    double out = 0;
    const auto* end = v.data() + v.size();
    auto [p, ec] = std::from_chars(v.data(), end, out);
    if (ec != std::errc() || p != end || !std::isfinite(out)) {
        throw SettingsError(std::string(key) + ": expected a real number, got '" + std::string(v) + "'");
    }
    return out;
}

struct SettingsField {
    std::string_view name;
    std::function<void(Settings&, std::string_view)> assign;
    std::function<nlohmann::json(const Settings&)> read;
};

#define LTMP_SIZE_FIELD(NAME, MEMBER)                                                                     \
    SettingsField{NAME, [](Settings& s, std::string_view v) { s.MEMBER = parse_size(NAME, v); },          \
                  [](const Settings& s) { return nlohmann::json(s.MEMBER); }}
#define LTMP_REAL_FIELD(NAME, MEMBER)                                                                     \
    SettingsField{NAME, [](Settings& s, std::string_view v) { s.MEMBER = parse_real(NAME, v); },          \
                  [](const Settings& s) { return nlohmann::json(s.MEMBER); }}
#define LTMP_TEXT_FIELD(NAME, MEMBER)                                                                     \
    SettingsField{NAME, [](Settings& s, std::string_view v) { s.MEMBER = std::string(v); },               \
                  [](const Settings& s) { return nlohmann::json(s.MEMBER); }}

inline const std::vector<SettingsField>& settings_fields() {
    static const std::vector<SettingsField> fields = {
        LTMP_SIZE_FIELD("image_size", model.image_size),
        LTMP_SIZE_FIELD("patch_size", model.patch_size),
        LTMP_SIZE_FIELD("channels", model.channels),
        LTMP_SIZE_FIELD("embed_dim", model.embed_dim),
        LTMP_SIZE_FIELD("heads", model.heads),
        LTMP_SIZE_FIELD("blocks", model.blocks),
        LTMP_SIZE_FIELD("mlp_ratio", model.mlp_ratio),
        LTMP_SIZE_FIELD("classes", model.classes),
        SettingsField{"reduction_order",
                      [](Settings& s, std::string_view v) { s.model.reduction_order = parse_reduction_order(v); },
                      [](const Settings& s) { return nlohmann::json(std::string(to_string(s.model.reduction_order))); }},
        SettingsField{"importance_score",
                      [](Settings& s, std::string_view v) { s.model.importance_score = parse_importance_score(v); },
                      [](const Settings& s) { return nlohmann::json(std::string(to_string(s.model.importance_score))); }},
        SettingsField{"merge_weighting",
                      [](Settings& s, std::string_view v) { s.model.merge_weighting = parse_merge_weighting(v); },
                      [](const Settings& s) { return nlohmann::json(std::string(to_string(s.model.merge_weighting))); }},
        LTMP_SIZE_FIELD("topk", model.topk),
        SettingsField{"seed", [](Settings& s, std::string_view v) { s.seed = parse_u64("seed", v); },
                      [](const Settings& s) { return nlohmann::json(s.seed); }},
        LTMP_SIZE_FIELD("train_samples", train_samples),
        LTMP_SIZE_FIELD("val_samples", val_samples),
        LTMP_REAL_FIELD("noise", noise),
        LTMP_TEXT_FIELD("data_dir", data_dir),
        LTMP_SIZE_FIELD("epochs", epochs),
        LTMP_SIZE_FIELD("pretrain_batch_size", pretrain_batch_size),
        LTMP_REAL_FIELD("lr", lr),
        LTMP_REAL_FIELD("r_target", finetune.r_target),
        LTMP_REAL_FIELD("lambda", finetune.lambda),
        LTMP_REAL_FIELD("tau", finetune.tau),
        LTMP_REAL_FIELD("lr_prune", finetune.lr_prune),
        LTMP_REAL_FIELD("lr_merge", finetune.lr_merge),
        LTMP_SIZE_FIELD("batch_size", finetune.batch_size),
        LTMP_TEXT_FIELD("checkpoint", checkpoint),
        SettingsField{"eval_mode",
                      [](Settings& s, std::string_view v) {
                          if (v != "inference" && v != "train") throw SettingsError("eval_mode: expected inference or train");
                          s.eval_mode = std::string(v);
                      },
                      [](const Settings& s) { return nlohmann::json(s.eval_mode); }},
        SettingsField{"eval_split",
                      [](Settings& s, std::string_view v) {
                          if (v != "val" && v != "train") throw SettingsError("eval_split: expected train or val");
                          s.eval_split = std::string(v);
                      },
                      [](const Settings& s) { return nlohmann::json(s.eval_split); }},
        LTMP_SIZE_FIELD("analysis_samples", analysis_samples),
        LTMP_SIZE_FIELD("image_index", image_index),
        LTMP_SIZE_FIELD("correlate_k", correlate_k),
        LTMP_SIZE_FIELD("render_scale", render_scale),
    };
    return fields;
}

#undef LTMP_SIZE_FIELD
#undef LTMP_REAL_FIELD
#undef LTMP_TEXT_FIELD

}  // namespace detail

inline void Settings::set(std::string_view key, std::string_view value) {
    for (const auto& f : detail::settings_fields()) {
        if (f.name != key) continue;
        try {
            f.assign(*this, value);
        } catch (const SettingsError&) {
            throw;
        } catch (const std::invalid_argument& e) {
            throw SettingsError(std::string(key) + ": " + e.what());
        }
        explicit_keys.insert(std::string(key));
        return;
    }
    throw SettingsError("unknown key '" + std::string(key) + "'");
}

inline nlohmann::json Settings::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& f : detail::settings_fields()) j[std::string(f.name)] = f.read(*this);
    return j;
}

inline const std::vector<std::string>& Settings::keys() {
    static const std::vector<std::string> names = [] {
        std::vector<std::string> out;
        for (const auto& f : detail::settings_fields()) out.emplace_back(f.name);
        return out;
    }();
    return names;
}

/// Applies one "key=value" override.
inline void apply_override(Settings& s, std::string_view text) {
    const auto eq = text.find('=');
    if (eq == std::string_view::npos) throw SettingsError("override '" + std::string(text) + "' is not key=value");
    s.set(detail::trim(text.substr(0, eq)), detail::trim(text.substr(eq + 1)));
}

/// Parses `key = value` lines; '#' starts a comment, blank lines are ignored.
inline void apply_settings_text(Settings& s, std::string_view text, std::string_view origin = "<text>") {
    std::istringstream in{std::string(text)};
    std::string line;
    std::size_t number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        const std::string body = detail::trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw SettingsError(std::string(origin) + ":" + std::to_string(number) + ": expected key = value");
        }
        try {
            s.set(detail::trim(std::string_view(body).substr(0, eq)), detail::trim(std::string_view(body).substr(eq + 1)));
        } catch (const SettingsError& e) {
            throw SettingsError(std::string(origin) + ":" + std::to_string(number) + ": " + e.what());
        }
    }
}

inline void apply_settings_file(Settings& s, const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw SettingsError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    apply_settings_text(s, buf.str(), path.string());
}

inline SynthDatasetSpec dataset_spec(const Settings& s, Split split) {
    SynthDatasetSpec spec;
    spec.classes = s.model.classes;
    spec.image_size = s.model.image_size;
    spec.samples = split == Split::train ? s.train_samples : s.val_samples;
    spec.noise = s.noise;
    spec.seed = s.seed;
    spec.split = split;
    return spec;
}

inline PretrainConfig pretrain_config(const Settings& s) {
    PretrainConfig pc;
    pc.epochs = s.epochs;
    pc.batch_size = s.pretrain_batch_size;
    pc.lr = s.lr;
    pc.seed = s.seed;
    return pc;
}

inline FinetuneConfig finetune_config(const Settings& s) {
    FinetuneConfig fc = s.finetune;
    fc.seed = s.seed;
    return fc;
}

}  // namespace ltmp
