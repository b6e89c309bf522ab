// SPDX-License-Identifier: Apache-2.0
// Mints the committed fixtures under tests/fixtures. The scalar fixtures
// come from the independent reference implementations in tests/support, so
// the library is never checked against itself. The reference-run fixture
// records what the bundled hard profile produces on its bundled seeds; the
// acceptance thresholds were calibrated against exactly this record, and it
// regenerates bit-identically from the same sources.

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "support/oracles.hpp"
#include "twostage/adapt.hpp"
#include "twostage/dynamics.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/profiles.hpp"
#include "twostage/synthdata.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace twostage;

namespace {

json adamw_case(const char* name, const char* note, double theta0,
                const std::vector<double>& grads, double lr, double wd) {
    double m = 0.0, v = 0.0, theta = theta0;
    json traj = json::array();
    for (std::size_t t = 1; t <= grads.size(); ++t) {
        theta = oracle::adamw_step(theta, grads[t - 1], m, v, t, lr, wd);
        traj.push_back(theta);
    }
    json c;
    c["name"] = name;
    c["note"] = note;
    c["theta0"] = theta0;
    c["lr"] = lr;
    c["weight_decay"] = wd;
    c["beta1"] = 0.9;
    c["beta2"] = 0.999;
    c["eps"] = 1e-8;
    c["grads"] = grads;
    c["expected"] = traj;
    return c;
}

json adamw_fixture() {
    json cases = json::array();
    cases.push_back(adamw_case("constant_gradient",
                               "ten steps against a constant pull",
                               1.0, std::vector<double>(10, 0.5), 1e-2, 0.01));
    cases.push_back(adamw_case("zero_gradient_decay",
                               "no gradient, so decoupled decay leaves theta0*(1-lr*wd)^t",
                               2.0, std::vector<double>(10, 0.0), 1e-2, 0.1));
    std::vector<double> alt(10);
    for (std::size_t i = 0; i < alt.size(); ++i) alt[i] = i % 2 == 0 ? 1.0 : -1.0;
    cases.push_back(adamw_case("alternating_gradient",
                               "sign-flipping gradient with weight decay off",
                               0.5, alt, 1e-3, 0.0));
    json j;
    j["oracle"] = "scalar adamw recurrence";
    j["cases"] = std::move(cases);
    return j;
}

json layer_norm_fixture() {
    std::mt19937_64 gen(20260818);
    std::uniform_real_distribution<double> ux(-2.0, 2.0), ug(0.5, 1.5), ub(-0.5, 0.5);
    const double eps = 1e-5;

    json cases = json::array();
    for (std::size_t dim : {4u, 5u, 8u, 16u}) {
        std::vector<double> x(dim), gamma(dim), beta(dim);
        for (auto& v : x) v = ux(gen);
        for (auto& v : gamma) v = ug(gen);
        for (auto& v : beta) v = ub(gen);
        json c;
        c["dim"] = dim;
        c["eps"] = eps;
        c["x"] = x;
        c["gamma"] = gamma;
        c["beta"] = beta;
        c["expected"] = oracle::layer_norm(x, gamma, beta, eps);
        cases.push_back(std::move(c));
    }
    json j;
    j["oracle"] = "per-vector layer normalization, population variance";
    j["cases"] = std::move(cases);
    return j;
}

json breakpoint_json(const std::optional<BreakpointReport>& bp) {
    if (!bp) return nullptr;
    return json{{"iter", bp->iter},
                {"drop", bp->drop},
                {"peak_novel", bp->peak_novel},
                {"final_novel", bp->final_novel}};
}

// Full reference run of the hard profile on its bundled seeds: per-strategy
// learning curves with breakpoint reports, two-stage vs. whole-budget
// stage-one metrics, and the alpha sweep optimum.
json reference_runs_fixture() {
    const Profile p = hard_profile();
    const std::vector<PeftKind> kinds = {PeftKind::layernorm, PeftKind::bitfit, PeftKind::lora};
    std::vector<double> agrid;
    for (int i = 0; i <= 6; ++i) agrid.push_back(0.2 + 0.1 * double(i));

    json per_seed = json::array();
    std::map<std::string, int> reported;
    int ordering = 0, ordering_pairs = 0, interior = 0;
    double hm_two_stage = 0.0, hm_single = 0.0;

    for (std::uint64_t seed : p.seeds) {
        std::cerr << "[seed " << seed << "] pretraining\n";
        auto uni = make_universe(p.universe_for(seed));
        auto pre = pretrain(*uni, p.pretrain_for(seed), p.model_for(seed));
        const FewShotTask task = make_task(uni, split_base_novel(p.task_ids()), p.shots,
                                           p.eval_per_class, derive_seed(seed, seed_stream::task));

        json row;
        row["seed"] = seed;
        std::optional<std::size_t> t_layernorm, t_bitfit;
        for (PeftKind kind : kinds) {
            std::cerr << "[seed " << seed << "] curve " << to_string(kind) << "\n";
            DualEncoder model = pre.model.clone();
            const AdaptConfig ac = p.dynamics_adapt_for(seed, kind);
            const AdaptResult res = run_single_stage(model, task, ac, Protocol::base_to_novel);
            const auto bp = detect_breakpoint(res.curve, p.window, p.delta);
            row["curves"][to_string(kind)] = {{"lr", ac.lr}, {"breakpoint", breakpoint_json(bp)}};
            if (bp) {
                ++reported[to_string(kind)];
                if (kind == PeftKind::layernorm) t_layernorm = bp->iter;
                if (kind == PeftKind::bitfit) t_bitfit = bp->iter;
            }
        }
        if (t_layernorm && t_bitfit) {
            ++ordering_pairs;
            if (*t_layernorm >= *t_bitfit) ++ordering;
        }

        std::cerr << "[seed " << seed << "] two-stage runs\n";
        const AdaptConfig ts = p.two_stage_adapt_for(seed);
        DualEncoder m_two = pre.model.clone();
        const AdaptResult r_two = run_2sfs(m_two, task, ts, Protocol::base_to_novel);
        AdaptConfig ts_one = ts;
        ts_one.alpha = 1.0;
        DualEncoder m_one = pre.model.clone();
        const AdaptResult r_one = run_2sfs(m_one, task, ts_one, Protocol::base_to_novel);
        row["two_stage"] = {{"lr", ts.lr},
                            {"alpha", ts.alpha},
                            {"hm", r_two.metrics.hm.value()},
                            {"hm_alpha_1.0", r_one.metrics.hm.value()}};
        hm_two_stage += r_two.metrics.hm.value();
        hm_single += r_one.metrics.hm.value();

        std::cerr << "[seed " << seed << "] alpha sweep\n";
        const SweepResult sw = sweep_alpha(pre.model, task, ts, agrid, Protocol::base_to_novel);
        const SweepRow& best = sw.rows[sw.best_index];
        row["alpha_sweep"] = {{"grid", agrid},
                              {"best", best.value},
                              {"best_hm", best.metrics.hm.value()}};
        if (best.value > agrid.front() + 1e-12 && best.value < agrid.back() - 1e-12) ++interior;

        per_seed.push_back(std::move(row));
    }

    json j;
    j["profile"] = p.name;
    j["protocol"] = "base_to_novel";
    j["window"] = p.window;
    j["delta"] = p.delta;
    j["seeds"] = p.seeds;
    j["per_seed"] = std::move(per_seed);
    j["summary"] = {{"breakpoints_reported", reported},
                    {"ordering_layernorm_ge_bitfit", ordering},
                    {"ordering_comparable_pairs", ordering_pairs},
                    {"mean_hm_two_stage", hm_two_stage / double(p.seeds.size())},
                    {"mean_hm_whole_budget_stage_one", hm_single / double(p.seeds.size())},
                    {"interior_sweep_optima", interior}};
    return j;
}

void write_fixture(const fs::path& path, const json& j) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        std::cerr << "cannot open " << path << " for writing\n";
        std::exit(3);
    }
    out << j.dump(2) << "\n";
    std::cout << "wrote " << path.string() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    const fs::path dir =
        argc > 1 ? fs::path(argv[1]) : fs::path(TWOSTAGE_REPO_ROOT) / "tests" / "fixtures";
    fs::create_directories(dir);
    write_fixture(dir / "adamw_scalar.json", adamw_fixture());
    write_fixture(dir / "layer_norm_cases.json", layer_norm_fixture());
    write_fixture(dir / "reference_runs.json", reference_runs_fixture());
    return 0;
}
