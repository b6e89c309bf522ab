// SPDX-License-Identifier: Apache-2.0
//
// CSV emission for metrics, learning curves, and sweep tables. Every file
// starts with a `# config <hash>` comment naming the configuration that
// produced it; numbers print with round-trip precision so reruns are
// byte-identical.
#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "twostage/adapt.hpp"
#include "twostage/dynamics.hpp"
#include "twostage/errors.hpp"
#include "twostage/infer.hpp"

namespace twostage {

namespace detail {

inline std::string csv_num(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

inline std::ofstream open_csv(const std::string& path, const std::string& config_hash) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw format_error("cannot open '" + path + "' for writing");
    out << "# config " << config_hash << "\n";
    return out;
}

}  // namespace detail

// One metrics row per seed, plus a closing "mean" row over the seeds.
struct MetricsRow {
    std::string protocol;
    std::string seed;  // a number, or "mean"
    std::string peft;
    double alpha;
    std::size_t iters_per_shot;
    std::size_t shots;
    Metrics metrics;
};

inline void write_metrics_csv(const std::string& path, const std::string& config_hash,
                              const std::vector<MetricsRow>& rows) {
    auto out = detail::open_csv(path, config_hash);
    out << "protocol,seed,peft,alpha,M,k,base_acc,novel_acc,hm,text_encoder_calls\n";
    for (const auto& r : rows) {
        out << r.protocol << ',' << r.seed << ',' << r.peft << ',' << detail::csv_num(r.alpha)
            << ',' << r.iters_per_shot << ',' << r.shots << ','
            << detail::csv_num(r.metrics.base_acc) << ','
            << (r.metrics.novel_acc ? detail::csv_num(*r.metrics.novel_acc) : "") << ','
            << (r.metrics.hm ? detail::csv_num(*r.metrics.hm) : "") << ','
            << r.metrics.text_encoder_calls << "\n";
    }
    if (!out) throw format_error("write failed for '" + path + "'");
}

// Averages base/novel/hm over per-seed rows; call counts are summed.
inline MetricsRow mean_row(const std::vector<MetricsRow>& rows) {
    if (rows.empty()) throw argument_error("mean_row: no rows");
    MetricsRow m = rows.front();
    m.seed = "mean";
    double base = 0, novel = 0, hm = 0;
    std::size_t calls = 0, n_novel = 0;
    for (const auto& r : rows) {
        base += r.metrics.base_acc;
        calls += r.metrics.text_encoder_calls;
        if (r.metrics.novel_acc) {
            novel += *r.metrics.novel_acc;
            hm += r.metrics.hm.value();
            ++n_novel;
        }
    }
    m.metrics.base_acc = base / double(rows.size());
    if (n_novel == rows.size()) {
        m.metrics.novel_acc = novel / double(rows.size());
        m.metrics.hm = hm / double(rows.size());
    } else {
        m.metrics.novel_acc.reset();
        m.metrics.hm.reset();
    }
    m.metrics.text_encoder_calls = calls;
    return m;
}

inline void write_curve_csv(const std::string& path, const std::string& config_hash,
                            const DynamicsCurve& curve) {
    auto out = detail::open_csv(path, config_hash);
    out << "iter,loss,base_acc,novel_acc\n";
    for (const auto& p : curve.points) {
        out << p.iter << ',' << detail::csv_num(p.loss) << ',' << detail::csv_num(p.base_acc)
            << ',' << detail::csv_num(p.novel_acc) << "\n";
    }
    if (!out) throw format_error("write failed for '" + path + "'");
}

inline void write_sweep_csv(const std::string& path, const std::string& config_hash,
                            const SweepResult& sweep) {
    auto out = detail::open_csv(path, config_hash);
    out << "param,base_acc,novel_acc,hm\n";
    for (const auto& r : sweep.rows) {
        out << detail::csv_num(r.value) << ',' << detail::csv_num(r.metrics.base_acc) << ','
            << (r.metrics.novel_acc ? detail::csv_num(*r.metrics.novel_acc) : "") << ','
            << (r.metrics.hm ? detail::csv_num(*r.metrics.hm) : "") << "\n";
    }
    if (!out) throw format_error("write failed for '" + path + "'");
}

}  // namespace twostage
