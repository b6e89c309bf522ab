// SPDX-License-Identifier: Apache-2.0
#pragma once

// Test-side reference implementations. Everything here is written straight
// from the defining formulas with only the standard library, independent of
// the code under test, so agreement is evidence rather than tautology.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

// Central finite difference of a scalar-valued function with respect to one
// coordinate of its input vector.
inline double finite_difference(const std::function<double(const std::vector<double>&)>& f,
                                std::vector<double> x, std::size_t i, double h = 1e-6) {
    const double x0 = x[i];
    x[i] = x0 + h;
    const double fp = f(x);
    x[i] = x0 - h;
    const double fm = f(x);
    return (fp - fm) / (2.0 * h);
}

// Layer normalization of one vector, population variance, eps under the root.
inline std::vector<double> layer_norm(const std::vector<double>& x,
                                      const std::vector<double>& gamma,
                                      const std::vector<double>& beta, double eps) {
    const std::size_t d = x.size();
    double mean = 0.0;
    for (double v : x) mean += v;
    mean /= double(d);
    double var = 0.0;
    for (double v : x) var += (v - mean) * (v - mean);
    var /= double(d);
    std::vector<double> y(d);
    for (std::size_t i = 0; i < d; ++i)
        y[i] = gamma[i] * (x[i] - mean) / std::sqrt(var + eps) + beta[i];
    return y;
}

inline double cosine(const std::vector<double>& u, const std::vector<double>& v) {
    double uu = 0, vv = 0, uv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        uu += u[i] * u[i];
        vv += v[i] * v[i];
        uv += u[i] * v[i];
    }
    return uv / (std::sqrt(uu) * std::sqrt(vv));
}

// Cross-entropy via explicit normalized probabilities (no logsumexp trick, so
// any agreement with the stabilized implementation is meaningful).
inline double cross_entropy(const std::vector<double>& logits, std::size_t target) {
    double mx = *std::max_element(logits.begin(), logits.end());
    double z = 0.0;
    for (double x : logits) z += std::exp(x - mx);
    const double p = std::exp(logits[target] - mx) / z;
    return -std::log(p);
}

// One AdamW step on a single scalar coordinate; returns the new parameter and
// updates the moment accumulators in place. t is the 1-based step index.
inline double adamw_step(double theta, double g, double& m, double& v, std::size_t t, double lr,
                         double wd, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
    m = beta1 * m + (1.0 - beta1) * g;
    v = beta2 * v + (1.0 - beta2) * g * g;
    const double mhat = m / (1.0 - std::pow(beta1, double(t)));
    const double vhat = v / (1.0 - std::pow(beta2, double(t)));
    theta -= lr * wd * theta;
    theta -= lr * mhat / (std::sqrt(vhat) + eps);
    return theta;
}

// Argmax with ties broken toward the lowest index.
inline std::size_t argmax_lowest_tie(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

inline double harmonic_mean(double a, double b) { return 2.0 * a * b / (a + b); }

// Centered moving average with edge truncation; window w means up to w/2
// neighbors on each side.
inline std::vector<double> moving_average(const std::vector<double>& x, std::size_t w) {
    const std::size_t half = w / 2;
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

}  // namespace oracle
