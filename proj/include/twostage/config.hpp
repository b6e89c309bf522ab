// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: an INI-style text format with [data], [model],
// [pretrain], [adapt], and [run] sections, strict unknown-key rejection, and
// a stable content hash over the canonicalized (fully resolved, sorted)
// key set so every output file can name the exact configuration it came from.
#pragma once

#include <cctype>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "twostage/adapt.hpp"
#include "twostage/errors.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/peft.hpp"
#include "twostage/profiles.hpp"
#include "twostage/synthdata.hpp"

namespace twostage {

struct ExperimentConfig {
    UniverseConfig data;
    std::size_t shots = 4;
    std::size_t eval_per_class = 8;

    ModelConfig model;
    PretrainConfig pretrain;
    AdaptConfig adapt;

    Protocol protocol = Protocol::base_to_novel;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    std::string output_dir = "out";

    ExperimentConfig() { adapt.shots = shots; }
};

// Build the experiment configuration a bundled profile describes, with the
// profile's first bundled seeds as the default seed list.
inline ExperimentConfig experiment_from_profile(const Profile& p) {
    ExperimentConfig c;
    c.data = p.universe;
    c.shots = p.shots;
    c.eval_per_class = p.eval_per_class;
    c.model = p.model;
    c.pretrain = p.pretrain;
    c.adapt = p.adapt;
    c.adapt.lr = p.two_stage_lr;
    c.adapt.peft.kind = PeftKind::layernorm;
    const std::size_t m = c.adapt.iters_per_shot * c.adapt.shots;
    c.adapt.eval_interval = m / 20;
    c.seeds = p.seeds;
    return c;
}

namespace detail {

inline std::string trim(const std::string& s) {
    std::size_t b = 0, e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
    return s.substr(b, e - b);
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline std::uint64_t parse_uint(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        if (!v.empty() && v[0] == '-') throw std::invalid_argument(v);
        unsigned long long x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return x;
    } catch (const std::exception&) {
        throw config_error("config: key '" + key + "' expects a nonnegative integer, got '" + v +
                           "'");
    }
}

inline std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& v) {
    std::vector<std::uint64_t> out;
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
        item = trim(item);
        if (item.empty()) throw config_error("config: key '" + key + "' has an empty element");
        out.push_back(parse_uint(key, item));
    }
    if (out.empty()) throw config_error("config: key '" + key + "' needs at least one seed");
    return out;
}

inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Applies "section.key" = value onto the config; throws config_error for
// unknown keys or unparseable values.
inline void apply_key(ExperimentConfig& c, const std::string& key, const std::string& value) {
    auto d = [&] { return parse_double(key, value); };
    auto u = [&] { return parse_uint(key, value); };

    if (key == "data.seed") c.data.seed = u();
    else if (key == "data.classes") c.data.classes = u();
    else if (key == "data.pretrain_classes") c.data.pretrain_classes = u();
    else if (key == "data.latent_dim") c.data.latent_dim = u();
    else if (key == "data.image_dim") c.data.image_dim = u();
    else if (key == "data.samples_per_class") c.data.samples_per_class = u();
    else if (key == "data.noise") c.data.noise = d();
    else if (key == "data.domain_shift") c.data.domain_shift = d();
    else if (key == "data.shift_private") c.data.shift_private = d();
    else if (key == "data.ground_scale") c.data.ground_scale = d();
    else if (key == "data.ground_jitter") c.data.ground_jitter = d();
    else if (key == "data.shots") c.shots = c.adapt.shots = u();
    else if (key == "data.eval_per_class") c.eval_per_class = u();
    else if (key == "model.blocks") c.model.blocks = u();
    else if (key == "model.embed_dim") c.model.embed_dim = u();
    else if (key == "model.patch_rows") c.model.patch_rows = u();
    else if (key == "model.patch_cols") c.model.patch_cols = u();
    else if (key == "model.patch_features") c.model.patch_features = u();
    else if (key == "model.mlp_hidden") c.model.mlp_hidden = u();
    else if (key == "model.ln_eps") c.model.ln_eps = d();
    else if (key == "model.init_tau") c.model.init_tau = d();
    else if (key == "pretrain.steps") c.pretrain.steps = u();
    else if (key == "pretrain.batch") c.pretrain.batch = u();
    else if (key == "pretrain.lr") c.pretrain.lr = d();
    else if (key == "pretrain.weight_decay") c.pretrain.weight_decay = d();
    else if (key == "pretrain.holdout_per_class") c.pretrain.holdout_per_class = u();
    else if (key == "adapt.peft") c.adapt.peft.kind = peft_kind_from_string(value);
    else if (key == "adapt.lora_rank") c.adapt.peft.lora_rank = u();
    else if (key == "adapt.lora_scale") c.adapt.peft.lora_scale = d();
    else if (key == "adapt.prompt_ctx") c.adapt.peft.prompt_ctx = u();
    else if (key == "adapt.iters_per_shot") c.adapt.iters_per_shot = u();
    else if (key == "adapt.alpha") c.adapt.alpha = d();
    else if (key == "adapt.lr") c.adapt.lr = d();
    else if (key == "adapt.weight_decay") c.adapt.weight_decay = d();
    else if (key == "adapt.batch") c.adapt.batch = u();
    else if (key == "adapt.eval_interval") c.adapt.eval_interval = u();
    else if (key == "run.protocol") c.protocol = protocol_from_string(value);
    else if (key == "run.seeds") c.seeds = parse_seed_list(key, value);
    else if (key == "run.output_dir") {
        if (value.empty()) throw config_error("config: run.output_dir must not be empty");
        c.output_dir = value;
    } else {
        throw config_error("config: unknown key '" + key + "'");
    }
}

}  // namespace detail

// Parses INI-style text ("[section]" headers, "key = value" lines, '#' or ';'
// comments) onto an existing configuration. Every key must belong to the
// schema; unknown sections or keys are errors, not warnings.
inline void apply_config_text(ExperimentConfig& c, const std::string& text,
                              const std::string& origin = "<config>") {
    static const char* known_sections[] = {"data", "model", "pretrain", "adapt", "run"};
    std::stringstream ss(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(ss, line)) {
        ++lineno;
        auto where = [&] { return origin + ":" + std::to_string(lineno); };
        std::size_t comment = line.find_first_of("#;");
        if (comment != std::string::npos) line = line.substr(0, comment);
        line = detail::trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw config_error(where() + ": malformed section header '" + line + "'");
            section = detail::trim(line.substr(1, line.size() - 2));
            bool ok = false;
            for (const char* s : known_sections) ok = ok || section == s;
            if (!ok) throw config_error(where() + ": unknown section '" + section + "'");
            continue;
        }
        std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw config_error(where() + ": expected 'key = value', got '" + line + "'");
        std::string key = detail::trim(line.substr(0, eq));
        std::string value = detail::trim(line.substr(eq + 1));
        if (key.empty()) throw config_error(where() + ": empty key");
        if (section.empty())
            throw config_error(where() + ": key '" + key + "' appears before any [section]");
        detail::apply_key(c, section + "." + key, value);
    }
}

inline ExperimentConfig load_config_file(const std::string& path, ExperimentConfig base = {}) {
    std::ifstream in(path);
    if (!in) throw config_error("config: cannot open '" + path + "'");
    std::stringstream buf;
    buf << in.rdbuf();
    apply_config_text(base, buf.str(), path);
    return base;
}

// One "section.key = value" override, as accepted on the command line.
inline void apply_override(ExperimentConfig& c, const std::string& assignment) {
    std::size_t eq = assignment.find('=');
    if (eq == std::string::npos)
        throw config_error("override '" + assignment + "' must look like section.key=value");
    std::string key = detail::trim(assignment.substr(0, eq));
    std::string value = detail::trim(assignment.substr(eq + 1));
    if (key.find('.') == std::string::npos)
        throw config_error("override key '" + key + "' must be section-qualified (section.key)");
    detail::apply_key(c, key, value);
}

inline void validate(const ExperimentConfig& c) {
    validate(c.data);
    validate(c.model);
    validate(c.pretrain, c.data);
    validate(c.adapt);
    validate(c.adapt.peft);
    if (c.shots == 0) throw config_error("config: data.shots must be positive");
    if (c.eval_per_class == 0) throw config_error("config: data.eval_per_class must be positive");
    if (c.shots + c.eval_per_class > c.data.samples_per_class)
        throw config_error("config: shots + eval_per_class exceeds samples_per_class");
    if (c.adapt.shots != c.shots)
        throw config_error("config: data.shots and the adapt budget's shot count diverged");
    if (c.seeds.empty()) throw config_error("config: run.seeds must not be empty");
    if (c.data.image_dim != c.model.image_dim())
        throw config_error("config: data.image_dim must equal the model patch grid size");
}

// The fully resolved configuration as sorted canonical text: every key the
// schema knows, one "section.key = value" per line, numbers printed with
// round-trip precision. Equal canonical text <=> equal resolved config.
inline std::string canonical_config_text(const ExperimentConfig& c) {
    std::map<std::string, std::string> kv;
    kv["data.seed"] = std::to_string(c.data.seed);
    kv["data.classes"] = std::to_string(c.data.classes);
    kv["data.pretrain_classes"] = std::to_string(c.data.pretrain_classes);
    kv["data.latent_dim"] = std::to_string(c.data.latent_dim);
    kv["data.image_dim"] = std::to_string(c.data.image_dim);
    kv["data.samples_per_class"] = std::to_string(c.data.samples_per_class);
    kv["data.noise"] = detail::format_double(c.data.noise);
    kv["data.domain_shift"] = detail::format_double(c.data.domain_shift);
    kv["data.shift_private"] = detail::format_double(c.data.shift_private);
    kv["data.ground_scale"] = detail::format_double(c.data.ground_scale);
    kv["data.ground_jitter"] = detail::format_double(c.data.ground_jitter);
    kv["data.shots"] = std::to_string(c.shots);
    kv["data.eval_per_class"] = std::to_string(c.eval_per_class);
    kv["model.blocks"] = std::to_string(c.model.blocks);
    kv["model.embed_dim"] = std::to_string(c.model.embed_dim);
    kv["model.patch_rows"] = std::to_string(c.model.patch_rows);
    kv["model.patch_cols"] = std::to_string(c.model.patch_cols);
    kv["model.patch_features"] = std::to_string(c.model.patch_features);
    kv["model.mlp_hidden"] = std::to_string(c.model.mlp_hidden);
    kv["model.ln_eps"] = detail::format_double(c.model.ln_eps);
    kv["model.init_tau"] = detail::format_double(c.model.init_tau);
    kv["pretrain.steps"] = std::to_string(c.pretrain.steps);
    kv["pretrain.batch"] = std::to_string(c.pretrain.batch);
    kv["pretrain.lr"] = detail::format_double(c.pretrain.lr);
    kv["pretrain.weight_decay"] = detail::format_double(c.pretrain.weight_decay);
    kv["pretrain.holdout_per_class"] = std::to_string(c.pretrain.holdout_per_class);
    kv["adapt.peft"] = to_string(c.adapt.peft.kind);
    kv["adapt.lora_rank"] = std::to_string(c.adapt.peft.lora_rank);
    kv["adapt.lora_scale"] = detail::format_double(c.adapt.peft.lora_scale);
    kv["adapt.prompt_ctx"] = std::to_string(c.adapt.peft.prompt_ctx);
    kv["adapt.iters_per_shot"] = std::to_string(c.adapt.iters_per_shot);
    kv["adapt.alpha"] = detail::format_double(c.adapt.alpha);
    kv["adapt.lr"] = detail::format_double(c.adapt.lr);
    kv["adapt.weight_decay"] = detail::format_double(c.adapt.weight_decay);
    kv["adapt.batch"] = std::to_string(c.adapt.batch);
    kv["adapt.eval_interval"] = std::to_string(c.adapt.eval_interval);
    kv["run.protocol"] = to_string(c.protocol);
    {
        std::string s;
        for (std::size_t i = 0; i < c.seeds.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(c.seeds[i]);
        }
        kv["run.seeds"] = s;
    }
    kv["run.output_dir"] = c.output_dir;

    std::string out;
    for (const auto& [k, v] : kv) {
        out += k;
        out += " = ";
        out += v;
        out += "\n";
    }
    return out;
}

// FNV-1a 64-bit digest of the canonical text, as 16 hex characters.
inline std::string config_hash(const ExperimentConfig& c) {
    const std::string text = canonical_config_text(c);
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace twostage
