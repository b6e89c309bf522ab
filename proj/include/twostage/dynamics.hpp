// SPDX-License-Identifier: Apache-2.0
#pragma once

// Learning-dynamics records and the breakpoint detector: the point where
// novel-category accuracy peaks and then declines while base-category
// accuracy keeps improving, read off smoothed curves.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twostage/errors.hpp"

namespace twostage {

struct CurvePoint {
    std::size_t iter = 0;
    double loss = 0.0;
    double base_acc = 0.0;   // percent
    double novel_acc = 0.0;  // percent
};

struct DynamicsCurve {
    std::vector<CurvePoint> points;  // strictly increasing iter, starts at 0
    std::string strategy;            // tag of the parameter-selection strategy that ran
    std::string config_hash;         // digest of the configuration that produced it
};

// Centered moving average with edge truncation: window w covers up to w/2
// neighbors on each side, fewer near the ends.
inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t window) {
    if (window == 0) throw argument_error("moving_average: window must be positive");
    const std::size_t half = window / 2;
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const std::size_t lo = i >= half ? i - half : 0;
        const std::size_t hi = std::min(x.size() - 1, i + half);
        double acc = 0.0;
        for (std::size_t j = lo; j <= hi; ++j) acc += x[j];
        out[i] = acc / double(hi - lo + 1);
    }
    return out;
}

struct BreakpointReport {
    std::size_t iter = 0;            // iteration of the smoothed novel peak
    double peak_novel = 0.0;         // smoothed novel accuracy at the peak
    double final_novel = 0.0;        // smoothed novel accuracy at the last record
    double drop = 0.0;               // peak_novel - final_novel, >= delta when reported
};

// Reports a breakpoint when the smoothed novel curve has declined from its
// peak by at least delta accuracy points AND the smoothed base curve at the
// end is no worse than at the peak (so the decline is specialization, not
// collapse). Returns nothing when either condition fails.
inline std::optional<BreakpointReport> detect_breakpoint(const DynamicsCurve& curve,
                                                         std::size_t window = 3,
                                                         double delta = 2.0) {
    if (curve.points.size() < 3)
        throw argument_error("detect_breakpoint: need at least three records");
    if (window == 0) throw argument_error("detect_breakpoint: window must be positive");
    if (delta < 0.0) throw argument_error("detect_breakpoint: delta must be nonnegative");
    for (std::size_t i = 1; i < curve.points.size(); ++i)
        if (curve.points[i].iter <= curve.points[i - 1].iter)
            throw argument_error("detect_breakpoint: iterations must be strictly increasing");

    std::vector<double> novel, base;
    novel.reserve(curve.points.size());
    base.reserve(curve.points.size());
    for (const auto& p : curve.points) {
        novel.push_back(p.novel_acc);
        base.push_back(p.base_acc);
    }
    const auto snovel = moving_average(novel, window);
    const auto sbase = moving_average(base, window);

    std::size_t peak = 0;
    for (std::size_t i = 1; i < snovel.size(); ++i)
        if (snovel[i] > snovel[peak]) peak = i;

    const double drop = snovel[peak] - snovel.back();
    if (drop < delta) return std::nullopt;
    if (sbase.back() < sbase[peak]) return std::nullopt;

    BreakpointReport r;
    r.iter = curve.points[peak].iter;
    r.peak_novel = snovel[peak];
    r.final_novel = snovel.back();
    r.drop = drop;
    return r;
}

}  // namespace twostage
