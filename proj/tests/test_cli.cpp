// SPDX-License-Identifier: Apache-2.0
//
// End-to-end tests driving the installed binary through a shell, checking
// exit codes, artifact layout, CSV schemas, and bitwise rerun stability.
#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <sys/wait.h>

#include <json.hpp>

#include "support/paths.hpp"

namespace fs = std::filesystem;

namespace {

struct RunResult {
    int code = -1;
    std::string output;  // stdout and stderr interleaved
};

RunResult run_cli(const std::string& args, const std::string& env_prefix = "") {
    const std::string bin = (testpaths::bin_dir() / "twostage").string();
    const std::string cmd = env_prefix + "\"" + bin + "\" " + args + " 2>&1";
    FILE* pipe = popen(cmd.c_str(), "r");
    REQUIRE(pipe != nullptr);
    RunResult r;
    char buf[4096];
    while (std::size_t n = std::fread(buf, 1, sizeof buf, pipe)) r.output.append(buf, n);
    const int status = pclose(pipe);
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    return r;
}

const fs::path& work_root() {
    static const fs::path p = [] {
        fs::path root = fs::temp_directory_path() / "twostage_test_cli";
        fs::remove_all(root);
        fs::create_directories(root);
        return root;
    }();
    return p;
}

// Small enough to pretrain in about a second, structured enough to adapt.
const std::string& config_path() {
    static const std::string path = [] {
        const fs::path p = work_root() / "tiny.ini";
        std::ofstream out(p);
        out << "[data]\n"
               "classes = 12\n"
               "pretrain_classes = 8\n"
               "latent_dim = 6\n"
               "samples_per_class = 16\n"
               "noise = 0.2\n"
               "domain_shift = 0.3\n"
               "shots = 4\n"
               "eval_per_class = 8\n"
               "[pretrain]\n"
               "steps = 120\n"
               "batch = 8\n"
               "holdout_per_class = 4\n"
               "[adapt]\n"
               "iters_per_shot = 25\n"
               "lr = 0.001\n"
               "batch = 8\n"
               "eval_interval = 20\n"
               "[run]\n"
               "seeds = 3\n";
        return p.string();
    }();
    return path;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::vector<std::string> lines_of(const std::string& text) {
    std::vector<std::string> out;
    std::stringstream ss(text);
    std::string line;
    while (std::getline(ss, line)) out.push_back(line);
    return out;
}

std::vector<std::string> fields_of(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t comma = line.find(',', start);
        out.push_back(line.substr(start, comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    return out;
}

bool is_hex16(const std::string& s) {
    if (s.size() != 16) return false;
    for (char c : s)
        if (!((c >= '0' && c <= '9') || (c >= 'a' && c <= 'f'))) return false;
    return true;
}

std::string base_args(const fs::path& out) {
    return "--config \"" + config_path() + "\" --out \"" + out.string() + "\"";
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    const fs::path out = work_root() / "usage";

    auto r = run_cli("");
    REQUIRE(r.code == 2);

    r = run_cli("frobnicate");
    REQUIRE(r.code == 2);

    r = run_cli("--help");
    REQUIRE(r.code == 0);
    REQUIRE(r.output.find("pretrain") != std::string::npos);
    REQUIRE(r.output.find("sweep") != std::string::npos);

    r = run_cli("adapt --config /nonexistent/run.ini --out \"" + out.string() + "\"");
    REQUIRE(r.code == 2);
    REQUIRE(r.output.find("cannot open") != std::string::npos);

    r = run_cli("pretrain " + base_args(out) + " --set data.bogus=1");
    REQUIRE(r.code == 2);
    REQUIRE(r.output.find("unknown key") != std::string::npos);

    r = run_cli("sweep --kind alpha --grid 0.9:0.2:0.1 " + base_args(out));
    REQUIRE(r.code == 2);

    r = run_cli("report " + base_args(out / "empty"));
    REQUIRE(r.code == 2);
}

TEST_CASE("missing pretraining checkpoints are a runtime error") {
    const fs::path out = work_root() / "nockpt";
    auto r = run_cli("adapt " + base_args(out));
    REQUIRE(r.code == 3);
    REQUIRE(r.output.find("run the pretrain subcommand first") != std::string::npos);
}

TEST_CASE("end to end flow produces stable artifacts") {
    const fs::path out = work_root() / "flow";

    // --- pretrain, twice: the checkpoint must be bitwise reproducible ---
    auto r = run_cli("pretrain " + base_args(out));
    REQUIRE(r.code == 0);
    REQUIRE(r.output.find("seed 3") != std::string::npos);
    const fs::path ckpt = out / "pretrain_s3.ckpt";
    REQUIRE(fs::exists(ckpt));
    REQUIRE(fs::exists(out / "pretrain_record.json"));
    const std::string ckpt_bytes = slurp(ckpt);
    r = run_cli("pretrain " + base_args(out));
    REQUIRE(r.code == 0);
    REQUIRE(slurp(ckpt) == ckpt_bytes);

    // --- adapt: artifact layout and CSV schema ---
    r = run_cli("adapt " + base_args(out));
    REQUIRE(r.code == 0);
    const fs::path metrics = out / "adapt_metrics.csv";
    REQUIRE(fs::exists(metrics));
    REQUIRE(fs::exists(out / "adapt_curve_s3.csv"));
    REQUIRE(fs::exists(out / "adapt_s3.ckpt"));
    REQUIRE(fs::exists(out / "adapt_record.json"));

    const std::string metrics_bytes = slurp(metrics);
    const auto mlines = lines_of(metrics_bytes);
    REQUIRE(mlines.size() == 4);  // hash, header, seed row, mean row
    REQUIRE(mlines[0].rfind("# config ", 0) == 0);
    const std::string hash = mlines[0].substr(9);
    REQUIRE(is_hex16(hash));
    REQUIRE(mlines[1] == "protocol,seed,peft,alpha,M,k,base_acc,novel_acc,hm,text_encoder_calls");
    const auto seed_row = fields_of(mlines[2]);
    REQUIRE(seed_row.size() == 10);
    REQUIRE(seed_row[0] == "base_to_novel");
    REQUIRE(seed_row[1] == "3");
    REQUIRE(seed_row[2] == "layernorm");
    REQUIRE(seed_row[3] == "0.6");
    REQUIRE(seed_row[4] == "25");
    REQUIRE(seed_row[5] == "4");
    REQUIRE_FALSE(seed_row[7].empty());
    REQUIRE_FALSE(seed_row[8].empty());
    REQUIRE(fields_of(mlines[3])[1] == "mean");

    const auto clines = lines_of(slurp(out / "adapt_curve_s3.csv"));
    REQUIRE(clines.size() == 2 + 6);  // hash, header, 6 records at interval 20
    REQUIRE(clines[1] == "iter,loss,base_acc,novel_acc");
    REQUIRE(fields_of(clines[2])[0] == "0");
    REQUIRE(fields_of(clines.back())[0] == "100");

    const auto record = nlohmann::json::parse(slurp(out / "adapt_record.json"));
    REQUIRE(record.at("command") == "adapt");
    REQUIRE(record.at("config_hash") == hash);
    REQUIRE(record.at("per_seed").size() == 1);
    REQUIRE(record.at("mean").contains("hm"));

    // --- rerun: byte-identical outputs ---
    const std::string curve_bytes = slurp(out / "adapt_curve_s3.csv");
    r = run_cli("adapt " + base_args(out));
    REQUIRE(r.code == 0);
    REQUIRE(slurp(metrics) == metrics_bytes);
    REQUIRE(slurp(out / "adapt_curve_s3.csv") == curve_bytes);

    // --- dataset file reuse reproduces the generated task exactly ---
    r = run_cli("data gen " + base_args(out));
    REQUIRE(r.code == 0);
    const fs::path dataset = out / "dataset_s3.bin";
    REQUIRE(fs::exists(dataset));
    REQUIRE(fs::exists(out / "data_record.json"));
    r = run_cli("adapt " + base_args(out) + " --data \"" + dataset.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(slurp(metrics) == metrics_bytes);

    // --- single stage: breakpoint scan and text-encoder cost ---
    const fs::path sout = work_root() / "flow_single";
    r = run_cli("single-stage " + base_args(sout) + " --checkpoints \"" + out.string() + "\"");
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(sout / "single_metrics.csv"));
    REQUIRE(fs::exists(sout / "single_record.json"));
    const auto srecord = nlohmann::json::parse(slurp(sout / "single_record.json"));
    REQUIRE(srecord.at("command") == "single-stage");
    REQUIRE(srecord.at("per_seed").at(0).contains("breakpoint"));
    REQUIRE((r.output.find("breakpoint") != std::string::npos));

    // --- alpha 1.0 equals single-stage on accuracies, not on cost ---
    const fs::path aout = work_root() / "flow_alpha1";
    r = run_cli("adapt " + base_args(aout) + " --checkpoints \"" + out.string() +
                "\" --alpha 1.0");
    REQUIRE(r.code == 0);
    const auto arow = fields_of(lines_of(slurp(aout / "adapt_metrics.csv"))[2]);
    const auto srow = fields_of(lines_of(slurp(sout / "single_metrics.csv"))[2]);
    REQUIRE(arow[6] == srow[6]);  // base accuracy
    REQUIRE(arow[7] == srow[7]);  // novel accuracy
    REQUIRE(arow[8] == srow[8]);  // harmonic mean
    REQUIRE(arow[9] == "2");      // novel categories only
    REQUIRE(srow[9] == "4");      // every category through the text encoder

    // --- flag precedence: --alpha wins over --set ---
    const fs::path pout = work_root() / "flow_prec";
    r = run_cli("adapt " + base_args(pout) + " --checkpoints \"" + out.string() +
                "\" --set adapt.alpha=0.3 --alpha 0.5");
    REQUIRE(r.code == 0);
    REQUIRE(fields_of(lines_of(slurp(pout / "adapt_metrics.csv"))[2])[3] == "0.5");

    // --- all-to-all protocol: no novel columns, zero text-encoder calls ---
    const fs::path tout = work_root() / "flow_a2a";
    r = run_cli("pretrain " + base_args(tout) + " --protocol all_to_all");
    REQUIRE(r.code == 0);
    r = run_cli("adapt " + base_args(tout) + " --protocol all_to_all");
    REQUIRE(r.code == 0);
    const auto trow = fields_of(lines_of(slurp(tout / "adapt_metrics.csv"))[2]);
    REQUIRE(trow[0] == "all_to_all");
    REQUIRE(trow[7].empty());
    REQUIRE(trow[8].empty());
    REQUIRE(trow[9] == "0");

    // --- sweeps: grid shapes land in the CSVs ---
    const fs::path wout = work_root() / "flow_sweep";
    r = run_cli("sweep " + base_args(wout) + " --checkpoints \"" + out.string() +
                "\" --kind alpha --grid 0.2:0.8:0.1");
    REQUIRE(r.code == 0);
    const auto alines = lines_of(slurp(wout / "sweep_alpha_s3.csv"));
    REQUIRE(alines.size() == 2 + 7);
    REQUIRE(alines[1] == "param,base_acc,novel_acc,hm");
    REQUIRE(fields_of(alines[2])[0] == "0.2");
    REQUIRE(fields_of(alines.back())[0] == "0.8");
    REQUIRE(fs::exists(wout / "sweep_record.json"));

    r = run_cli("sweep " + base_args(wout) + " --checkpoints \"" + out.string() +
                "\" --kind budget --grid 10,25");
    REQUIRE(r.code == 0);
    const auto blines = lines_of(slurp(wout / "sweep_budget_s3.csv"));
    REQUIRE(blines.size() == 2 + 2);
    REQUIRE(fields_of(blines[2])[0] == "10");
    REQUIRE(fields_of(blines[3])[0] == "25");

    // --- report renders records from both defaults and explicit paths ---
    r = run_cli("report " + base_args(out));
    REQUIRE(r.code == 0);
    REQUIRE(r.output.find(hash) != std::string::npos);
    REQUIRE(r.output.find("seed 3") != std::string::npos);
    r = run_cli("report --record \"" + (sout / "single_record.json").string() + "\" " +
                base_args(sout));
    REQUIRE(r.code == 0);
    REQUIRE(r.output.find("single-stage") != std::string::npos);

    // --- environment variable fallback for the output directory ---
    const fs::path eout = work_root() / "flow_env";
    r = run_cli("data gen --config \"" + config_path() + "\"",
                "TWOSTAGE_OUT=\"" + eout.string() + "\" ");
    REQUIRE(r.code == 0);
    REQUIRE(fs::exists(eout / "dataset_s3.bin"));
}

TEST_CASE("checkpoint architecture mismatches are refused") {
    const fs::path out = work_root() / "arch";
    auto r = run_cli("pretrain " + base_args(out));
    REQUIRE(r.code == 0);
    r = run_cli("adapt " + base_args(out) + " --set model.mlp_hidden=32");
    REQUIRE(r.code == 3);
    REQUIRE(r.output.find("architecture") != std::string::npos);
}
