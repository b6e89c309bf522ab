// SPDX-License-Identifier: Apache-2.0
#pragma once

// Category-selective inference. Base categories are scored against classifier
// rows (no text-encoder work); any other category costs one text-encoder
// invocation. evaluate() caches text embeddings once per pass and reports the
// exact invocation count so the cost contract is testable.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/model.hpp"
#include "twostage/synthdata.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

enum class Protocol { all_to_all, base_to_novel };

inline const char* to_string(Protocol p) {
    return p == Protocol::all_to_all ? "all_to_all" : "base_to_novel";
}

inline Protocol protocol_from_string(const std::string& s) {
    if (s == "all_to_all") return Protocol::all_to_all;
    if (s == "base_to_novel") return Protocol::base_to_novel;
    throw config_error("unknown protocol: " + s);
}

// Frozen-feature classifier over the base categories: one row per base class,
// ascending id order. Rows are renormalized inside every cosine, so their
// scale is free while predictions stay on the unit sphere.
struct Classifier {
    std::vector<std::size_t> base_ids;
    TensorPtr phi;  // |base| x d, requires_grad while stage two trains it

    std::optional<std::size_t> row_of(std::size_t class_id) const {
        for (std::size_t i = 0; i < base_ids.size(); ++i)
            if (base_ids[i] == class_id) return i;
        return std::nullopt;
    }
};

// Initializes the classifier by stacking current text embeddings of the base
// categories. At this point classifier scores equal text-encoder scores, so
// switching the scoring path is a no-op for predictions.
inline Classifier init_classifier(const DualEncoder& model,
                                  const std::vector<std::size_t>& base_ids) {
    if (base_ids.empty()) throw argument_error("init_classifier: empty base category set");
    Classifier c;
    c.base_ids = base_ids;
    std::sort(c.base_ids.begin(), c.base_ids.end());
    NoGradGuard ng;
    auto rows = model.encode_text_batch(c.base_ids);
    c.phi = make_tensor(rows->values, rows->shape);
    c.phi->requires_grad = true;
    return c;
}

struct Metrics {
    Protocol protocol = Protocol::base_to_novel;
    double base_acc = 0.0;                 // percent
    std::optional<double> novel_acc;       // percent; absent for all-to-all
    std::optional<double> hm;              // absent for all-to-all
    std::size_t text_encoder_calls = 0;    // during the evaluation pass
};

inline double harmonic_mean(double base, double novel) {
    if (base < 0.0 || base > 100.0 || novel < 0.0 || novel > 100.0)
        throw domain_error("harmonic_mean: accuracies must be percentages in [0, 100]");
    if (base == 0.0 && novel == 0.0)
        throw domain_error("harmonic_mean: both accuracies are zero");
    return 2.0 * base * novel / (base + novel);
}

namespace detail {

// Unit-normalized copies of classifier rows, plain data.
inline std::vector<double> normalized_rows(const TensorPtr& phi) {
    const std::size_t r = phi->shape[0], d = phi->shape[1];
    std::vector<double> out(r * d);
    for (std::size_t i = 0; i < r; ++i) {
        double n2 = 0.0;
        for (std::size_t j = 0; j < d; ++j) n2 += phi->values[i * d + j] * phi->values[i * d + j];
        if (n2 == 0.0) throw domain_error("classifier row has zero norm");
        const double inv = 1.0 / std::sqrt(n2);
        for (std::size_t j = 0; j < d; ++j) out[i * d + j] = phi->values[i * d + j] * inv;
    }
    return out;
}

inline std::size_t argmax_first(const std::vector<double>& scores) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < scores.size(); ++i)
        if (scores[i] > scores[best]) best = i;
    return best;
}

}  // namespace detail

// Scores an image against every candidate category by cosine and returns the
// winning id, lowest id on ties. Candidates present in the classifier are
// scored against its rows; the rest go through the text encoder.
inline std::size_t selective_predict(const DualEncoder& model, const Classifier* classifier,
                                     const double* image, std::vector<std::size_t> categories) {
    if (categories.empty()) throw argument_error("selective_predict: empty category set");
    std::sort(categories.begin(), categories.end());
    NoGradGuard ng;
    auto v = model.encode_image(image);
    const std::size_t d = model.config.embed_dim;
    std::vector<double> phi_rows;
    if (classifier) phi_rows = detail::normalized_rows(classifier->phi);
    std::vector<double> scores(categories.size());
    for (std::size_t i = 0; i < categories.size(); ++i) {
        const std::size_t c = categories[i];
        std::optional<std::size_t> row =
            classifier ? classifier->row_of(c) : std::nullopt;
        double acc = 0.0;
        if (row) {
            const double* p = phi_rows.data() + *row * d;
            for (std::size_t j = 0; j < d; ++j) acc += v->values[j] * p[j];
        } else {
            auto t = model.encode_text(c);
            for (std::size_t j = 0; j < d; ++j) acc += v->values[j] * t->values[j];
        }
        scores[i] = acc;
    }
    return categories[detail::argmax_first(scores)];
}

// Pure text-encoder scoring (one invocation per candidate).
inline std::size_t zero_shot_predict(const DualEncoder& model, const double* image,
                                     std::vector<std::size_t> categories) {
    return selective_predict(model, nullptr, image, std::move(categories));
}

namespace detail {

// Percent accuracy of eval refs against a candidate row matrix [n_cats x d].
inline double accuracy_against(const DualEncoder& model, const FewShotTask& task,
                               const std::vector<ShotRef>& refs,
                               const std::vector<std::size_t>& cat_ids,
                               const std::vector<double>& cat_rows) {
    if (refs.empty()) throw argument_error("evaluate: empty evaluation set");
    const auto& u = *task.universe;
    const std::size_t dim = u.config.image_dim, d = model.config.embed_dim;
    std::vector<double> images(refs.size() * dim);
    for (std::size_t i = 0; i < refs.size(); ++i)
        std::copy_n(u.sample(refs[i].class_id, refs[i].sample_index), dim,
                    images.data() + i * dim);
    auto v = model.encode_image_batch(images.data(), refs.size());
    std::size_t correct = 0;
    std::vector<double> scores(cat_ids.size());
    for (std::size_t i = 0; i < refs.size(); ++i) {
        const double* vi = v->values.data() + i * d;
        for (std::size_t c = 0; c < cat_ids.size(); ++c) {
            double acc = 0.0;
            const double* row = cat_rows.data() + c * d;
            for (std::size_t j = 0; j < d; ++j) acc += vi[j] * row[j];
            scores[c] = acc;
        }
        if (cat_ids[argmax_first(scores)] == refs[i].class_id) ++correct;
    }
    return 100.0 * double(correct) / double(refs.size());
}

}  // namespace detail

// Full evaluation pass. base-to-novel scores base samples against base
// categories and novel samples against novel categories; all-to-all requires
// a task without novel categories. Text embeddings are computed once.
inline Metrics evaluate(const DualEncoder& model, const Classifier* classifier,
                        const FewShotTask& task, Protocol protocol) {
    NoGradGuard ng;
    const std::size_t calls_before = model.text_encoder_calls;
    Metrics out;
    out.protocol = protocol;
    if (protocol == Protocol::all_to_all && !task.novel_ids.empty())
        throw argument_error("evaluate: all-to-all protocol expects no novel categories");

    std::vector<double> base_rows;
    if (classifier) {
        if (classifier->base_ids != task.base_ids)
            throw argument_error("evaluate: classifier categories do not match the task");
        base_rows = detail::normalized_rows(classifier->phi);
    } else {
        auto t = model.encode_text_batch(task.base_ids);
        base_rows = t->values;
    }
    out.base_acc = detail::accuracy_against(model, task, task.base_eval, task.base_ids, base_rows);

    if (protocol == Protocol::base_to_novel) {
        if (task.novel_ids.empty())
            throw argument_error("evaluate: base-to-novel protocol needs novel categories");
        auto t = model.encode_text_batch(task.novel_ids);
        out.novel_acc = detail::accuracy_against(model, task, task.novel_eval, task.novel_ids,
                                                 t->values);
        out.hm = harmonic_mean(out.base_acc, *out.novel_acc);
    }
    out.text_encoder_calls = model.text_encoder_calls - calls_before;
    return out;
}

// Zero-shot accuracy on the held-out tail of the pretraining classes; sanity
// metric for pretraining quality.
inline double pretrain_holdout_accuracy(const DualEncoder& model, const Universe& universe,
                                        std::size_t holdout_per_class) {
    const auto& cfg = universe.config;
    if (holdout_per_class == 0 || holdout_per_class >= cfg.samples_per_class)
        throw argument_error("pretrain_holdout_accuracy: bad holdout size");
    NoGradGuard ng;
    std::vector<std::size_t> cats(cfg.pretrain_classes);
    for (std::size_t i = 0; i < cats.size(); ++i) cats[i] = i;
    auto t = model.encode_text_batch(cats);
    const std::size_t d = model.config.embed_dim, dim = cfg.image_dim;
    const std::size_t first = cfg.samples_per_class - holdout_per_class;
    std::size_t correct = 0, total = 0;
    std::vector<double> scores(cats.size());
    for (std::size_t c = 0; c < cfg.pretrain_classes; ++c)
        for (std::size_t s = first; s < cfg.samples_per_class; ++s) {
            auto v = model.encode_image_batch(universe.sample(c, s), 1);
            for (std::size_t k = 0; k < cats.size(); ++k) {
                double acc = 0.0;
                for (std::size_t j = 0; j < d; ++j)
                    acc += v->values[j] * t->values[k * d + j];
                scores[k] = acc;
            }
            (void)dim;
            if (detail::argmax_first(scores) == c) ++correct;
            ++total;
        }
    return 100.0 * double(correct) / double(total);
}

}  // namespace twostage
