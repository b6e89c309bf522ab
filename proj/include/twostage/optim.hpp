// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

struct AdamWConfig {
    double lr = 2e-4;
    double weight_decay = 0.01;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// AdamW with decoupled weight decay:
//   theta <- theta - lr*wd*theta - lr * mhat / (sqrt(vhat) + eps)
// Decay multiplies the parameter directly and never enters the moment
// estimates. State (m, v, t) belongs to this object; constructing a fresh
// optimizer resets it, which is exactly what the stage switch does.
class AdamW {
public:
    AdamW(std::vector<TensorPtr> params, AdamWConfig cfg = {})
        : cfg_(cfg), params_(std::move(params)) {
        if (params_.empty()) throw argument_error("AdamW: empty parameter list");
        m_.reserve(params_.size());
        v_.reserve(params_.size());
        for (const auto& p : params_) {
            if (!p) throw argument_error("AdamW: null parameter");
            m_.emplace_back(p->size(), 0.0);
            v_.emplace_back(p->size(), 0.0);
        }
    }

    // One update over all managed parameters. Parameters without accumulated
    // gradient storage indicate a missing backward pass.
    void step() {
        for (const auto& p : params_)
            if (p->grad.size() != p->values.size())
                throw state_error("AdamW::step: parameter has no gradient; run backward first");
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = *params_[i];
            std::vector<double>& m = m_[i];
            std::vector<double>& v = v_[i];
            for (std::size_t j = 0; j < p.values.size(); ++j) {
                const double g = p.grad[j];
                m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g;
                v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[j] / bc1;
                const double vhat = v[j] / bc2;
                p.values[j] *= 1.0 - cfg_.lr * cfg_.weight_decay;
                p.values[j] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
        }
    }

    void zero_grad() {
        for (const auto& p : params_) p->zero_grad();
    }

    std::size_t steps_taken() const { return t_; }
    const AdamWConfig& config() const { return cfg_; }
    const std::vector<TensorPtr>& params() const { return params_; }

private:
    AdamWConfig cfg_;
    std::vector<TensorPtr> params_;
    std::vector<std::vector<double>> m_, v_;
    std::size_t t_ = 0;
};

}  // namespace twostage
