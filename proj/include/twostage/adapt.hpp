// SPDX-License-Identifier: Apache-2.0
#pragma once

// Two-stage few-shot adaptation. Stage one spends ceil(alpha * m) of the
// m = iters_per_shot * shots optimizer steps on the attached strategy's
// parameters with the contrastive objective over base categories; stage two
// spends the remainder on a frozen-feature classifier initialized from the
// base-category text embeddings. alpha = 1 collapses to single-stage
// adaptation; the first stage-one steps of both entry points share one code
// path and one RNG stream, so they coincide step for step.

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "twostage/dynamics.hpp"
#include "twostage/errors.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/optim.hpp"
#include "twostage/peft.hpp"
#include "twostage/rng.hpp"
#include "twostage/synthdata.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

struct AdaptConfig {
    std::size_t iters_per_shot = 300;  // M
    std::size_t shots = 16;            // k, support shots per base class
    double alpha = 0.6;                // stage-one share of the budget
    double lr = 2e-4;
    double weight_decay = 0.01;
    std::size_t batch = 32;
    std::size_t eval_interval = 200;   // 0 disables curve recording
    std::uint64_t seed = 1;
    PeftConfig peft;
};

struct Budget {
    std::size_t total = 0;
    std::size_t stage_one = 0;
    std::size_t stage_two = 0;
};

// m = M * k, stage one gets ceil(alpha * m). The tiny nudge keeps exact
// products like 0.2 * 4800 from ceiling up through binary representation
// error; genuine fractions still round up.
inline Budget compute_budget(std::size_t iters_per_shot, std::size_t shots, double alpha) {
    if (iters_per_shot == 0 || shots == 0)
        throw argument_error("compute_budget: M and k must be positive");
    if (alpha < 0.0 || alpha > 1.0) throw argument_error("compute_budget: alpha must be in [0, 1]");
    Budget b;
    b.total = iters_per_shot * shots;
    const double raw = alpha * double(b.total);
    b.stage_one = static_cast<std::size_t>(std::max(0.0, std::ceil(raw - 1e-9)));
    if (b.stage_one > b.total) b.stage_one = b.total;
    b.stage_two = b.total - b.stage_one;
    return b;
}

inline void validate(const AdaptConfig& c) {
    validate(c.peft);
    const Budget b = compute_budget(c.iters_per_shot, c.shots, c.alpha);
    if (c.lr <= 0.0) throw config_error("adapt: lr must be positive");
    if (c.weight_decay < 0.0) throw config_error("adapt: weight_decay must be nonnegative");
    if (c.batch == 0) throw config_error("adapt: batch must be positive");
    if (c.eval_interval > 0 && b.total % c.eval_interval != 0)
        throw config_error("adapt: eval_interval must divide the step budget");
}

struct AdaptResult {
    ParamSet params;
    std::optional<Classifier> classifier;
    DynamicsCurve curve;
    Metrics metrics;
    Budget budget;
};

namespace detail {

// Shared state for one adaptation run over one model and task.
class AdaptEngine {
public:
    AdaptEngine(DualEncoder& model, const FewShotTask& task, const AdaptConfig& cfg,
                Protocol protocol)
        : model_(model), task_(task), cfg_(cfg), protocol_(protocol),
          rng_(derive_seed(cfg.seed, 4000)) {
        if (task.shots.empty()) throw argument_error("adapt: task has no support shots");
        if (cfg.shots != task.shots_per_class)
            throw argument_error("adapt: config shots and task shots per class disagree");
        if (protocol == Protocol::all_to_all && !task.novel_ids.empty())
            throw argument_error("adapt: all-to-all runs need a task without novel categories");
        if (protocol == Protocol::base_to_novel && task.novel_ids.empty())
            throw argument_error("adapt: base-to-novel runs need novel categories");
        const auto& u = *task.universe;
        const std::size_t dim = u.config.image_dim;
        shot_images_.resize(task.shots.size() * dim);
        shot_labels_.resize(task.shots.size());
        for (std::size_t i = 0; i < task.shots.size(); ++i) {
            std::copy_n(u.sample(task.shots[i].class_id, task.shots[i].sample_index), dim,
                        shot_images_.data() + i * dim);
            shot_labels_[i] = task.base_index_of(task.shots[i].class_id);
        }
        tau_ = model.tau();
    }

    // Stage one: train omega with the contrastive objective over base
    // categories, recording the curve at eval_interval boundaries.
    void stage_one(const ParamSet& params, std::size_t steps) {
        maybe_record(0);
        if (steps == 0) return;
        AdamW opt(params.tensors(), optim_config());
        const std::size_t dim = task_.universe->config.image_dim;
        std::vector<double> batch_images(cfg_.batch * dim);
        std::vector<std::size_t> batch_labels(cfg_.batch);
        for (std::size_t g = 1; g <= steps; ++g) {
            for (std::size_t i = 0; i < cfg_.batch; ++i) {
                const std::size_t s = rng_.uniform_index(task_.shots.size());
                std::copy_n(shot_images_.data() + s * dim, dim, batch_images.data() + i * dim);
                batch_labels[i] = shot_labels_[s];
            }
            auto v = model_.encode_image_batch(batch_images.data(), cfg_.batch);
            auto t = model_.encode_text_batch(task_.base_ids);
            auto logits = scale(matmul_nt(v, t), tau_);
            auto loss = cross_entropy_mean(logits, batch_labels);
            opt.zero_grad();
            backward(loss);
            opt.step();
            maybe_record(g);
        }
    }

    // Stage two: freeze the trunk, train only the classifier on precomputed
    // shot embeddings. Curve records reuse cached trunk outputs because
    // nothing upstream of the classifier changes.
    void stage_two(Classifier& classifier, std::size_t stage_one_steps, std::size_t steps) {
        prepare_frozen_caches();
        classifier_ = &classifier;
        if (steps == 0) return;
        AdamW opt({classifier.phi}, optim_config());
        const std::size_t d = model_.config.embed_dim;
        for (std::size_t g = 1; g <= steps; ++g) {
            std::vector<double> rows(cfg_.batch * d);
            std::vector<std::size_t> batch_labels(cfg_.batch);
            for (std::size_t i = 0; i < cfg_.batch; ++i) {
                const std::size_t s = rng_.uniform_index(task_.shots.size());
                std::copy_n(shot_embed_.data() + s * d, d, rows.data() + i * d);
                batch_labels[i] = shot_labels_[s];
            }
            auto v = make_tensor(std::move(rows), {cfg_.batch, d});
            auto logits = scale(matmul_nt(v, l2_normalize_rows(classifier.phi)), tau_);
            auto loss = cross_entropy_mean(logits, batch_labels);
            opt.zero_grad();
            backward(loss);
            opt.step();
            maybe_record(stage_one_steps + g);
        }
    }

    Metrics final_metrics() const {
        return evaluate(model_, classifier_, task_, protocol_);
    }

    DynamicsCurve take_curve() { return std::move(curve_); }

private:
    AdamWConfig optim_config() const {
        AdamWConfig o;
        o.lr = cfg_.lr;
        o.weight_decay = cfg_.weight_decay;
        return o;
    }

    void maybe_record(std::size_t iter) {
        if (cfg_.eval_interval == 0) return;
        if (iter % cfg_.eval_interval != 0) return;
        CurvePoint p;
        p.iter = iter;
        if (classifier_ == nullptr) {
            NoGradGuard ng;
            auto v = model_.encode_image_batch(shot_images_.data(), shot_labels_.size());
            auto t = model_.encode_text_batch(task_.base_ids);
            auto logits = scale(matmul_nt(v, t), tau_);
            p.loss = cross_entropy_mean(logits, shot_labels_)->item();
            const Metrics m = evaluate(model_, nullptr, task_, protocol_);
            p.base_acc = m.base_acc;
            p.novel_acc = m.novel_acc.value_or(0.0);
        } else {
            // frozen trunk: score cached embeddings against current rows
            NoGradGuard ng;
            const std::size_t d = model_.config.embed_dim;
            const auto rows = infer_rows();
            auto v = make_tensor(shot_embed_, {shot_labels_.size(), d});
            auto logits =
                scale(matmul_nt(v, make_tensor(rows, {task_.base_ids.size(), d})), tau_);
            p.loss = cross_entropy_mean(logits, shot_labels_)->item();
            p.base_acc = cached_base_accuracy(rows);
            p.novel_acc = cached_novel_acc_;
        }
        curve_.points.push_back(p);
    }

    std::vector<double> infer_rows() const {
        return twostage::detail::normalized_rows(classifier_->phi);
    }

    // Embeds shots and eval images once the trunk stops changing.
    void prepare_frozen_caches() {
        NoGradGuard ng;
        const auto& u = *task_.universe;
        const std::size_t dim = u.config.image_dim, d = model_.config.embed_dim;
        auto s = model_.encode_image_batch(shot_images_.data(), shot_labels_.size());
        shot_embed_ = s->values;
        if (cfg_.eval_interval > 0) {
            std::vector<double> imgs(task_.base_eval.size() * dim);
            for (std::size_t i = 0; i < task_.base_eval.size(); ++i)
                std::copy_n(u.sample(task_.base_eval[i].class_id, task_.base_eval[i].sample_index),
                            dim, imgs.data() + i * dim);
            base_eval_embed_ = model_.encode_image_batch(imgs.data(), task_.base_eval.size())->values;
            if (protocol_ == Protocol::base_to_novel) {
                const Metrics m = evaluate(model_, nullptr, task_, protocol_);
                cached_novel_acc_ = m.novel_acc.value_or(0.0);
            }
        }
        (void)d;
    }

    double cached_base_accuracy(const std::vector<double>& rows) const {
        const std::size_t d = model_.config.embed_dim;
        std::size_t correct = 0;
        std::vector<double> scores(task_.base_ids.size());
        for (std::size_t i = 0; i < task_.base_eval.size(); ++i) {
            const double* vi = base_eval_embed_.data() + i * d;
            for (std::size_t c = 0; c < task_.base_ids.size(); ++c) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j) acc += vi[j] * rows[c * d + j];
                scores[c] = acc;
            }
            if (task_.base_ids[twostage::detail::argmax_first(scores)] ==
                task_.base_eval[i].class_id)
                ++correct;
        }
        return 100.0 * double(correct) / double(task_.base_eval.size());
    }

    DualEncoder& model_;
    const FewShotTask& task_;
    const AdaptConfig& cfg_;
    Protocol protocol_;
    Rng rng_;
    double tau_ = 1.0;
    std::vector<double> shot_images_;
    std::vector<std::size_t> shot_labels_;
    std::vector<double> shot_embed_;       // filled when stage two begins
    std::vector<double> base_eval_embed_;  // cached for stage-two records
    double cached_novel_acc_ = 0.0;
    const Classifier* classifier_ = nullptr;
    DynamicsCurve curve_;
};

}  // namespace detail

// Full two-stage run on a pretrained model. Mutates the model (attaches the
// strategy and trains omega) and returns the classifier, curve, and final
// selective-inference metrics.
inline AdaptResult run_2sfs(DualEncoder& model, const FewShotTask& task, const AdaptConfig& cfg,
                            Protocol protocol = Protocol::base_to_novel) {
    validate(cfg);
    AdaptResult out;
    out.budget = compute_budget(cfg.iters_per_shot, cfg.shots, cfg.alpha);
    out.params = attach(model, cfg.peft);
    detail::AdaptEngine engine(model, task, cfg, protocol);
    engine.stage_one(out.params, out.budget.stage_one);
    out.classifier = init_classifier(model, task.base_ids);
    engine.stage_two(*out.classifier, out.budget.stage_one, out.budget.stage_two);
    out.metrics = engine.final_metrics();
    out.curve = engine.take_curve();
    return out;
}

// Baseline: the whole budget goes to stage one and inference stays on the
// text-encoder path (no classifier).
inline AdaptResult run_single_stage(DualEncoder& model, const FewShotTask& task,
                                    const AdaptConfig& cfg,
                                    Protocol protocol = Protocol::base_to_novel) {
    validate(cfg);
    AdaptResult out;
    const std::size_t total = cfg.iters_per_shot * cfg.shots;
    out.budget = Budget{total, total, 0};
    out.params = attach(model, cfg.peft);
    detail::AdaptEngine engine(model, task, cfg, protocol);
    engine.stage_one(out.params, total);
    out.metrics = engine.final_metrics();
    out.curve = engine.take_curve();
    return out;
}

// ===== sweeps =====

struct SweepRow {
    double value = 0.0;
    Metrics metrics;
};

struct SweepResult {
    std::string param;  // "alpha" or "M"
    std::vector<SweepRow> rows;
    std::size_t best_index = 0;  // argmax of HM (or base accuracy for all-to-all)
};

namespace detail {

inline double sweep_score(const Metrics& m) { return m.hm ? *m.hm : m.base_acc; }

inline void pick_best(SweepResult& r) {
    for (std::size_t i = 1; i < r.rows.size(); ++i)
        if (sweep_score(r.rows[i].metrics) > sweep_score(r.rows[r.best_index].metrics))
            r.best_index = i;
}

}  // namespace detail

// Runs run_2sfs once per alpha on clones of the same pretrained model with a
// shared seed; reports final metrics per cell.
inline SweepResult sweep_alpha(const DualEncoder& pristine, const FewShotTask& task,
                               AdaptConfig cfg, const std::vector<double>& grid,
                               Protocol protocol = Protocol::base_to_novel) {
    if (grid.empty()) throw argument_error("sweep_alpha: empty grid");
    for (double a : grid)
        if (a < 0.0 || a > 1.0) throw argument_error("sweep_alpha: alpha outside [0, 1]");
    SweepResult out;
    out.param = "alpha";
    cfg.eval_interval = 0;
    for (double a : grid) {
        cfg.alpha = a;
        DualEncoder model = pristine.clone();
        auto res = run_2sfs(model, task, cfg, protocol);
        out.rows.push_back({a, res.metrics});
    }
    detail::pick_best(out);
    return out;
}

// Same, over the per-shot iteration budget M. The task (and so k) is fixed.
inline SweepResult sweep_budget(const DualEncoder& pristine, const FewShotTask& task,
                                AdaptConfig cfg, const std::vector<std::size_t>& grid,
                                Protocol protocol = Protocol::base_to_novel) {
    if (grid.empty()) throw argument_error("sweep_budget: empty grid");
    for (std::size_t m : grid)
        if (m == 0) throw argument_error("sweep_budget: M must be positive");
    SweepResult out;
    out.param = "M";
    cfg.eval_interval = 0;
    for (std::size_t m : grid) {
        cfg.iters_per_shot = m;
        DualEncoder model = pristine.clone();
        auto res = run_2sfs(model, task, cfg, protocol);
        out.rows.push_back({double(m), res.metrics});
    }
    detail::pick_best(out);
    return out;
}

}  // namespace twostage
