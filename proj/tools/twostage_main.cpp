// SPDX-License-Identifier: Apache-2.0
// Command-line workbench around the twostage library: dataset generation,
// contrastive pretraining, two-stage and single-stage adaptation, parameter
// sweeps, and run reports. Every run writes its artifacts under one output
// directory, and every artifact embeds the hash of the configuration that
// produced it. Inputs are never modified.
//
// Exit codes: 0 success, 2 usage or configuration error, 3 runtime error.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "twostage/adapt.hpp"
#include "twostage/checkpoint.hpp"
#include "twostage/config.hpp"
#include "twostage/csv.hpp"
#include "twostage/dynamics.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/profiles.hpp"
#include "twostage/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace twostage;

namespace {

// Default output directory when neither the config nor --out names one.
constexpr const char* OUT_ENV = "TWOSTAGE_OUT";

struct CommonArgs {
    std::string config_path;
    std::string profile;
    std::vector<std::string> sets;
    std::string out_flag;
    std::string seeds_flag;
    std::string protocol_flag;
    std::string peft_flag;
    double alpha_flag = 0.0;
    bool alpha_set = false;
    std::string data_path;       // dataset file reused instead of regenerating
    std::string checkpoint_dir;  // where pretrain_s<seed>.ckpt files live
};

// Precedence, lowest to highest: built-in defaults, $TWOSTAGE_OUT, profile,
// config file, --set overrides in order, dedicated flags.
ExperimentConfig resolve_config(const CommonArgs& a) {
    ExperimentConfig c;
    if (!a.profile.empty()) c = experiment_from_profile(profile_by_name(a.profile));
    if (const char* env = std::getenv(OUT_ENV); env != nullptr && *env != '\0')
        c.output_dir = env;
    if (!a.config_path.empty()) c = load_config_file(a.config_path, std::move(c));
    for (const auto& s : a.sets) apply_override(c, s);
    if (!a.seeds_flag.empty()) apply_override(c, "run.seeds=" + a.seeds_flag);
    if (!a.protocol_flag.empty()) {
        try {
            c.protocol = protocol_from_string(a.protocol_flag);
        } catch (const std::exception&) {
            throw config_error("--protocol: expected all_to_all or base_to_novel, got '" +
                               a.protocol_flag + "'");
        }
    }
    if (!a.peft_flag.empty()) {
        try {
            c.adapt.peft.kind = peft_kind_from_string(a.peft_flag);
        } catch (const std::exception&) {
            throw config_error("--peft: unknown strategy '" + a.peft_flag + "'");
        }
    }
    if (a.alpha_set) c.adapt.alpha = a.alpha_flag;
    if (!a.out_flag.empty()) c.output_dir = a.out_flag;
    validate(c);
    return c;
}

fs::path out_path(const ExperimentConfig& c, const std::string& name) {
    return fs::path(c.output_dir) / name;
}

std::string seed_name(const std::string& stem, std::uint64_t seed, const char* ext) {
    return stem + "_s" + std::to_string(seed) + ext;
}

std::shared_ptr<const Universe> universe_for(const ExperimentConfig& c, std::uint64_t seed,
                                             const std::optional<DatasetFile>& data) {
    if (data) return data->universe;
    UniverseConfig u = c.data;
    u.seed = seed;
    return make_universe(u);
}

// Downstream task over every category the pretraining corpus excludes, or
// the task bundled in the dataset file when one was supplied.
FewShotTask task_for(const ExperimentConfig& c, std::shared_ptr<const Universe> uni,
                     std::uint64_t seed, const std::optional<DatasetFile>& data) {
    if (data && data->task) return *data->task;
    const auto& ucfg = uni->config;
    std::vector<std::size_t> ids;
    for (std::size_t k = ucfg.pretrain_classes; k < ucfg.classes; ++k) ids.push_back(k);
    const Split split = c.protocol == Protocol::all_to_all ? all_categories_split(std::move(ids))
                                                           : split_base_novel(std::move(ids));
    return make_task(std::move(uni), split, c.shots, c.eval_per_class,
                     derive_seed(seed, seed_stream::task));
}

void check_architecture(const Checkpoint& ck, const ExperimentConfig& cfg, const Universe& uni) {
    const ModelConfig& a = ck.model.config;
    const ModelConfig& b = cfg.model;
    const bool same = a.blocks == b.blocks && a.embed_dim == b.embed_dim &&
                      a.patch_rows == b.patch_rows && a.patch_cols == b.patch_cols &&
                      a.patch_features == b.patch_features && a.mlp_hidden == b.mlp_hidden &&
                      a.ln_eps == b.ln_eps && a.init_tau == b.init_tau &&
                      ck.model.vocab_classes == uni.config.classes;
    if (!same) throw state_error("checkpoint architecture does not match the configured model");
}

Checkpoint load_pretrained(const ExperimentConfig& cfg, const std::string& ckdir_flag,
                           std::uint64_t seed, const Universe& uni) {
    const fs::path dir = ckdir_flag.empty() ? fs::path(cfg.output_dir) : fs::path(ckdir_flag);
    const fs::path path = dir / seed_name("pretrain", seed, ".ckpt");
    if (!fs::exists(path))
        throw state_error("missing pretrained checkpoint '" + path.string() +
                          "' (run the pretrain subcommand first)");
    Checkpoint ck = load_checkpoint(path.string());
    check_architecture(ck, cfg, uni);
    return ck;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string opt2(const std::optional<double>& v) { return v ? fmt2(*v) : std::string("-"); }

json metrics_json(const Metrics& m) {
    json j;
    j["base_acc"] = m.base_acc;
    if (m.novel_acc) j["novel_acc"] = *m.novel_acc;
    if (m.hm) j["hm"] = *m.hm;
    j["text_encoder_calls"] = m.text_encoder_calls;
    return j;
}

json record_base(const char* command, const ExperimentConfig& cfg, const std::string& hash,
                 double seconds) {
    json j;
    j["command"] = command;
    j["config_hash"] = hash;
    j["artifact_version"] = CHECKPOINT_VERSION;
    j["duration_seconds"] = seconds;
    j["protocol"] = to_string(cfg.protocol);
    j["seeds"] = cfg.seeds;
    return j;
}

void write_record(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw format_error("cannot open '" + path.string() + "' for writing");
    out << j.dump(2) << "\n";
    if (!out) throw format_error("write failed for '" + path.string() + "'");
}

void print_metrics_table(const std::vector<MetricsRow>& rows) {
    std::cout << std::left << std::setw(6) << "seed" << std::setw(10) << "peft" << std::right
              << std::setw(7) << "alpha" << std::setw(9) << "base" << std::setw(9) << "novel"
              << std::setw(9) << "hm" << std::setw(11) << "txt_calls" << "\n";
    for (const auto& r : rows)
        std::cout << std::left << std::setw(6) << r.seed << std::setw(10) << r.peft << std::right
                  << std::setw(7) << fmt2(r.alpha) << std::setw(9) << fmt2(r.metrics.base_acc)
                  << std::setw(9) << opt2(r.metrics.novel_acc) << std::setw(9)
                  << opt2(r.metrics.hm) << std::setw(11) << r.metrics.text_encoder_calls << "\n";
}

// ===== pretrain =====

int cmd_pretrain(const ExperimentConfig& cfg, const std::optional<DatasetFile>& data) {
    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    const auto t0 = std::chrono::steady_clock::now();

    json per_seed = json::array();
    std::vector<std::string> ckpts;
    for (std::uint64_t s : cfg.seeds) {
        auto uni = universe_for(cfg, s, data);
        ModelConfig mc = cfg.model;
        mc.init_seed = derive_seed(s, seed_stream::model_init);
        PretrainConfig pc = cfg.pretrain;
        pc.seed = derive_seed(s, seed_stream::pretrain);
        std::cerr << "[seed " << s << "] pretraining " << pc.steps << " steps over "
                  << uni->config.pretrain_classes << " categories\n";

        PretrainResult res = pretrain(*uni, pc, mc);
        const FewShotTask task = task_for(cfg, uni, s, data);
        const Metrics zero = evaluate(res.model, nullptr, task, cfg.protocol);

        const fs::path ck = out_path(cfg, seed_name("pretrain", s, ".ckpt"));
        save_checkpoint(ck.string(), res.model, nullptr, hash);
        ckpts.push_back(ck.string());

        std::cout << "seed " << s << ": final loss " << fmt2(res.final_loss) << ", zero-shot base "
                  << fmt2(zero.base_acc) << "%";
        if (zero.novel_acc) std::cout << ", novel " << fmt2(*zero.novel_acc) << "%";
        std::cout << " -> " << ck.string() << "\n";

        json row;
        row["seed"] = s;
        row["final_loss"] = res.final_loss;
        row["metrics"] = metrics_json(zero);
        per_seed.push_back(std::move(row));
    }

    json j = record_base("pretrain", cfg, hash, seconds_since(t0));
    j["per_seed"] = std::move(per_seed);
    j["files"]["checkpoints"] = ckpts;
    write_record(out_path(cfg, "pretrain_record.json"), j);
    return 0;
}

// ===== adapt / single-stage =====

int cmd_run(bool two_stage, const ExperimentConfig& cfg, const std::optional<DatasetFile>& data,
            const std::string& ckdir_flag, std::size_t window, double delta) {
    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    const auto t0 = std::chrono::steady_clock::now();
    const std::string stem = two_stage ? "adapt" : "single";

    std::vector<MetricsRow> rows;
    json per_seed = json::array();
    std::vector<std::string> curves, ckpts;
    for (std::uint64_t s : cfg.seeds) {
        auto uni = universe_for(cfg, s, data);
        Checkpoint ck = load_pretrained(cfg, ckdir_flag, s, *uni);
        FewShotTask task = task_for(cfg, uni, s, data);

        AdaptConfig ac = cfg.adapt;
        ac.seed = derive_seed(s, seed_stream::adapt);
        std::cerr << "[seed " << s << "] " << (two_stage ? "two-stage" : "single-stage")
                  << " adaptation, " << to_string(ac.peft.kind) << ", m="
                  << ac.iters_per_shot * ac.shots << " steps\n";

        AdaptResult res = two_stage ? run_2sfs(ck.model, task, ac, cfg.protocol)
                                    : run_single_stage(ck.model, task, ac, cfg.protocol);

        MetricsRow row;
        row.protocol = to_string(cfg.protocol);
        row.seed = std::to_string(s);
        row.peft = to_string(ac.peft.kind);
        row.alpha = two_stage ? ac.alpha : 1.0;
        row.iters_per_shot = ac.iters_per_shot;
        row.shots = ac.shots;
        row.metrics = res.metrics;
        rows.push_back(row);

        json jrow;
        jrow["seed"] = s;
        jrow["metrics"] = metrics_json(res.metrics);

        if (res.curve.points.size() > 1) {
            res.curve.strategy = to_string(ac.peft.kind);
            res.curve.config_hash = hash;
            const fs::path cpath = out_path(cfg, seed_name(stem + "_curve", s, ".csv"));
            write_curve_csv(cpath.string(), hash, res.curve);
            curves.push_back(cpath.string());
            jrow["curve_csv"] = cpath.string();
        }
        if (!two_stage && res.curve.points.size() >= 3) {
            if (auto bp = detect_breakpoint(res.curve, window, delta)) {
                std::cout << "seed " << s << ": breakpoint at iteration " << bp->iter
                          << " (novel " << fmt2(bp->peak_novel) << " -> " << fmt2(bp->final_novel)
                          << ", drop " << fmt2(bp->drop) << ")\n";
                jrow["breakpoint"] = {{"iter", bp->iter},
                                     {"peak_novel", bp->peak_novel},
                                     {"final_novel", bp->final_novel},
                                     {"drop", bp->drop}};
            } else {
                std::cout << "seed " << s << ": no breakpoint\n";
                jrow["breakpoint"] = nullptr;
            }
        }

        const fs::path cpath = out_path(cfg, seed_name(stem, s, ".ckpt"));
        save_checkpoint(cpath.string(), ck.model,
                        res.classifier ? &*res.classifier : nullptr, hash);
        ckpts.push_back(cpath.string());
        per_seed.push_back(std::move(jrow));
    }

    std::vector<MetricsRow> with_mean = rows;
    with_mean.push_back(mean_row(rows));
    const fs::path mpath = out_path(cfg, stem + "_metrics.csv");
    write_metrics_csv(mpath.string(), hash, with_mean);
    print_metrics_table(with_mean);

    json j = record_base(two_stage ? "adapt" : "single-stage", cfg, hash, seconds_since(t0));
    j["peft"] = to_string(cfg.adapt.peft.kind);
    j["alpha"] = two_stage ? cfg.adapt.alpha : 1.0;
    j["iters_per_shot"] = cfg.adapt.iters_per_shot;
    j["shots"] = cfg.adapt.shots;
    j["per_seed"] = std::move(per_seed);
    j["mean"] = metrics_json(with_mean.back().metrics);
    j["files"]["metrics_csv"] = mpath.string();
    j["files"]["curves"] = curves;
    j["files"]["checkpoints"] = ckpts;
    write_record(out_path(cfg, stem + "_record.json"), j);
    return 0;
}

// ===== sweep =====

std::vector<std::string> split_commas(const std::string& s) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (start <= s.size()) {
        const std::size_t comma = s.find(',', start);
        const std::size_t end = comma == std::string::npos ? s.size() : comma;
        out.push_back(detail::trim(s.substr(start, end - start)));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

// "lo:hi:step" (inclusive range) or a comma-separated list.
std::vector<double> parse_alpha_grid(const std::string& s) {
    std::vector<double> g;
    if (s.find(':') != std::string::npos) {
        const std::size_t a = s.find(':'), b = s.find(':', a + 1);
        if (b == std::string::npos || s.find(':', b + 1) != std::string::npos)
            throw config_error("--grid: range form is lo:hi:step");
        const double lo = detail::parse_double("grid", detail::trim(s.substr(0, a)));
        const double hi = detail::parse_double("grid", detail::trim(s.substr(a + 1, b - a - 1)));
        const double step = detail::parse_double("grid", detail::trim(s.substr(b + 1)));
        if (step <= 0.0) throw config_error("--grid: step must be positive");
        if (hi < lo) throw config_error("--grid: hi must be at least lo");
        const auto n = static_cast<std::size_t>(std::llround((hi - lo) / step));
        for (std::size_t i = 0; i <= n; ++i) {
            const double v = lo + double(i) * step;
            if (v <= hi + 1e-9) g.push_back(v);
        }
    } else {
        for (const auto& item : split_commas(s)) g.push_back(detail::parse_double("grid", item));
    }
    if (g.empty()) throw config_error("--grid: empty grid");
    return g;
}

std::vector<std::size_t> parse_budget_grid(const std::string& s) {
    std::vector<std::size_t> g;
    for (const auto& item : split_commas(s))
        g.push_back(static_cast<std::size_t>(detail::parse_uint("grid", item)));
    if (g.empty()) throw config_error("--grid: empty grid");
    return g;
}

int cmd_sweep(const ExperimentConfig& cfg, const std::optional<DatasetFile>& data,
              const std::string& ckdir_flag, const std::string& kind, const std::string& grid) {
    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    const auto t0 = std::chrono::steady_clock::now();

    const bool is_alpha = kind == "alpha";
    std::vector<double> agrid;
    std::vector<std::size_t> bgrid;
    if (is_alpha)
        agrid = parse_alpha_grid(grid.empty() ? "0.2:0.8:0.1" : grid);
    else
        bgrid = parse_budget_grid(grid.empty() ? "100,300,500" : grid);

    json per_seed = json::array();
    std::vector<std::string> csvs;
    for (std::uint64_t s : cfg.seeds) {
        auto uni = universe_for(cfg, s, data);
        Checkpoint ck = load_pretrained(cfg, ckdir_flag, s, *uni);
        FewShotTask task = task_for(cfg, uni, s, data);

        AdaptConfig ac = cfg.adapt;
        ac.seed = derive_seed(s, seed_stream::adapt);
        std::cerr << "[seed " << s << "] sweeping " << kind << " over "
                  << (is_alpha ? agrid.size() : bgrid.size()) << " cells\n";

        const SweepResult r = is_alpha ? sweep_alpha(ck.model, task, ac, agrid, cfg.protocol)
                                       : sweep_budget(ck.model, task, ac, bgrid, cfg.protocol);

        const fs::path cpath = out_path(cfg, seed_name("sweep_" + kind, s, ".csv"));
        write_sweep_csv(cpath.string(), hash, r);
        csvs.push_back(cpath.string());

        const SweepRow& best = r.rows[r.best_index];
        std::cout << "seed " << s << ": best " << kind << " "
                  << (is_alpha ? fmt2(best.value) : std::to_string(std::size_t(best.value)))
                  << " (base " << fmt2(best.metrics.base_acc) << ", novel "
                  << opt2(best.metrics.novel_acc) << ", hm " << opt2(best.metrics.hm) << ")\n";

        json row;
        row["seed"] = s;
        row["best_" + kind] = best.value;
        row["metrics"] = metrics_json(best.metrics);
        row["sweep_csv"] = cpath.string();
        per_seed.push_back(std::move(row));
    }

    json j = record_base("sweep", cfg, hash, seconds_since(t0));
    j["kind"] = kind;
    j["per_seed"] = std::move(per_seed);
    j["files"]["sweeps"] = csvs;
    write_record(out_path(cfg, "sweep_record.json"), j);
    return 0;
}

// ===== data gen =====

int cmd_data_gen(const ExperimentConfig& cfg) {
    const std::string hash = config_hash(cfg);
    fs::create_directories(cfg.output_dir);
    const auto t0 = std::chrono::steady_clock::now();

    json per_seed = json::array();
    std::vector<std::string> files;
    for (std::uint64_t s : cfg.seeds) {
        UniverseConfig u = cfg.data;
        u.seed = s;
        auto uni = make_universe(u);
        const FewShotTask task = task_for(cfg, uni, s, std::nullopt);

        const fs::path path = out_path(cfg, seed_name("dataset", s, ".bin"));
        save_dataset(path.string(), *uni, &task, hash);
        files.push_back(path.string());

        std::cout << "seed " << s << ": " << u.classes << " categories ("
                  << u.pretrain_classes << " pretraining, " << task.base_ids.size() << " base, "
                  << task.novel_ids.size() << " novel), " << u.samples_per_class
                  << " samples each -> " << path.string() << "\n";

        json row;
        row["seed"] = s;
        row["file"] = path.string();
        row["base_categories"] = task.base_ids.size();
        row["novel_categories"] = task.novel_ids.size();
        per_seed.push_back(std::move(row));
    }

    json j = record_base("data gen", cfg, hash, seconds_since(t0));
    j["per_seed"] = std::move(per_seed);
    j["files"]["datasets"] = files;
    write_record(out_path(cfg, "data_record.json"), j);
    return 0;
}

// ===== report =====

void print_metrics_kv(const json& m) {
    if (m.contains("base_acc")) std::cout << "  base " << fmt2(m["base_acc"].get<double>());
    if (m.contains("novel_acc")) std::cout << "  novel " << fmt2(m["novel_acc"].get<double>());
    if (m.contains("hm")) std::cout << "  hm " << fmt2(m["hm"].get<double>());
    if (m.contains("text_encoder_calls"))
        std::cout << "  txt_calls " << m["text_encoder_calls"].get<std::uint64_t>();
}

int cmd_report(const std::string& record_flag, const ExperimentConfig& cfg) {
    const fs::path path =
        record_flag.empty() ? out_path(cfg, "adapt_record.json") : fs::path(record_flag);
    if (!fs::exists(path)) throw config_error("report: no run record at '" + path.string() + "'");
    std::ifstream in(path);
    json j;
    try {
        j = json::parse(in);
    } catch (const std::exception& e) {
        throw format_error("report: cannot parse '" + path.string() + "': " + e.what());
    }

    std::cout << "command           " << j.value("command", std::string("?")) << "\n";
    std::cout << "config hash       " << j.value("config_hash", std::string("?")) << "\n";
    std::cout << "artifact version  " << j.value("artifact_version", std::uint64_t{0}) << "\n";
    std::cout << "duration          " << fmt2(j.value("duration_seconds", 0.0)) << " s\n";
    std::cout << "protocol          " << j.value("protocol", std::string("?")) << "\n";
    if (j.contains("peft"))
        std::cout << "peft              " << j["peft"].get<std::string>() << "\n";
    if (j.contains("alpha")) std::cout << "alpha             " << j["alpha"].get<double>() << "\n";
    if (j.contains("kind")) std::cout << "sweep kind        " << j["kind"].get<std::string>() << "\n";

    for (const auto& row : j.value("per_seed", json::array())) {
        std::cout << "seed " << row.value("seed", std::uint64_t{0}) << ":";
        if (row.contains("final_loss"))
            std::cout << "  loss " << fmt2(row["final_loss"].get<double>());
        for (const auto& [key, val] : row.items())
            if (key.rfind("best_", 0) == 0) std::cout << "  " << key << " " << val.dump();
        if (row.contains("metrics")) print_metrics_kv(row["metrics"]);
        if (row.contains("breakpoint")) {
            if (row["breakpoint"].is_null())
                std::cout << "  breakpoint none";
            else
                std::cout << "  breakpoint at " << row["breakpoint"]["iter"].get<std::uint64_t>()
                          << " (drop " << fmt2(row["breakpoint"]["drop"].get<double>()) << ")";
        }
        if (row.contains("file")) std::cout << "  " << row["file"].get<std::string>();
        std::cout << "\n";
    }
    if (j.contains("mean")) {
        std::cout << "mean  :";
        print_metrics_kv(j["mean"]);
        std::cout << "\n";
    }
    if (j.contains("files")) {
        std::cout << "files:\n";
        for (const auto& [key, val] : j["files"].items()) {
            if (val.is_array())
                for (const auto& f : val) std::cout << "  " << f.get<std::string>() << "\n";
            else
                std::cout << "  " << val.get<std::string>() << "\n";
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"two-stage few-shot adaptation workbench"};
    app.fallthrough();
    app.require_subcommand(1);

    CommonArgs a;
    app.add_option("--config", a.config_path,
                   "configuration file (sections: data, model, pretrain, adapt, run)");
    app.add_option("--profile", a.profile, "start from a bundled profile: separable | hard");
    app.add_option("--set", a.sets, "override one config key, e.g. --set adapt.alpha=0.5");
    app.add_option("--seeds", a.seeds_flag, "comma-separated run seeds (overrides run.seeds)");
    app.add_option("--out", a.out_flag,
                   "output directory (overrides run.output_dir and $TWOSTAGE_OUT)");
    app.add_option("--protocol", a.protocol_flag, "all_to_all | base_to_novel");
    auto* alpha_opt =
        app.add_option("--alpha", a.alpha_flag, "stage-one budget share (overrides adapt.alpha)");
    app.add_option("--peft", a.peft_flag,
                   "parameter-selection strategy: layernorm | bitfit | lora | prompt");
    app.add_option("--data", a.data_path,
                   "dataset file from 'data gen', reused for every seed instead of regenerating");
    app.add_option("--checkpoints", a.checkpoint_dir,
                   "directory holding pretrain_s<seed>.ckpt files (default: output dir)");

    auto* c_pre =
        app.add_subcommand("pretrain", "contrastive pretraining; writes one checkpoint per seed");
    auto* c_adapt =
        app.add_subcommand("adapt", "two-stage adaptation from pretrained checkpoints");
    auto* c_single = app.add_subcommand(
        "single-stage", "single-stage adaptation: the whole budget in stage one");
    std::size_t window = 3;
    double delta = 2.0;
    c_single->add_option("--window", window, "breakpoint smoothing window, in records");
    c_single->add_option("--delta", delta, "breakpoint drop threshold, accuracy points");

    auto* c_sweep = app.add_subcommand("sweep", "grid sweep over alpha or budget");
    std::string kind = "alpha", grid;
    c_sweep->add_option("--kind", kind, "alpha | budget")
        ->check(CLI::IsMember({"alpha", "budget"}));
    c_sweep->add_option(
        "--grid", grid,
        "comma list, or lo:hi:step for alpha (defaults: 0.2:0.8:0.1 and 100,300,500)");

    auto* c_data = app.add_subcommand("data", "dataset utilities");
    c_data->require_subcommand(1);
    auto* c_gen = c_data->add_subcommand("gen", "render dataset files, one per seed");

    auto* c_report = app.add_subcommand("report", "print a run record");
    std::string record_path;
    c_report->add_option("--record", record_path,
                         "run record JSON (default: <out>/adapt_record.json)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    a.alpha_set = alpha_opt->count() > 0;

    try {
        const ExperimentConfig cfg = resolve_config(a);
        std::optional<DatasetFile> dataset;
        if (!a.data_path.empty()) {
            if (!fs::exists(a.data_path))
                throw config_error("data: cannot open file '" + a.data_path + "'");
            dataset = load_dataset(a.data_path);
        }
        if (*c_pre) return cmd_pretrain(cfg, dataset);
        if (*c_adapt) return cmd_run(true, cfg, dataset, a.checkpoint_dir, window, delta);
        if (*c_single) return cmd_run(false, cfg, dataset, a.checkpoint_dir, window, delta);
        if (*c_sweep) return cmd_sweep(cfg, dataset, a.checkpoint_dir, kind, grid);
        if (*c_gen) return cmd_data_gen(cfg);
        if (*c_report) return cmd_report(record_path, cfg);
    } catch (const config_error& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
