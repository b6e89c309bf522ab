// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic class universe for desk-scale experiments. Each class c has a
// latent prototype z_c; images are a fixed random linear render of the
// prototype plus isotropic noise, so within-class samples cluster by
// construction and class difficulty is one knob (noise).
//
// Class tokens are fresh vocabulary entries. Their initial embeddings are a
// fixed random linear image of the prototype (a per-universe grounding map)
// plus jitter: pretraining sees only pretrain classes yet can learn the
// grounding law itself, which is what lets the text tower score classes it
// has never trained on.

#include <cmath>
#include <cstdint>
#include <memory>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/rng.hpp"

namespace twostage {

// Token layout shared by universe and text encoder.
namespace vocab {
inline constexpr std::size_t BOS = 0;
inline constexpr std::size_t EOS = 1;
inline constexpr std::size_t A = 2;
inline constexpr std::size_t PHOTO = 3;
inline constexpr std::size_t OF = 4;
inline constexpr std::size_t FIRST_CLASS = 5;
inline constexpr std::size_t TEXT_LEN = 7;  // BOS a photo of a <class> EOS
}  // namespace vocab

// Non-class vocabulary rows are plain Gaussian at TOKEN_INIT_STD.
inline constexpr double TOKEN_INIT_STD = 0.08;

struct UniverseConfig {
    std::uint64_t seed = 1;
    std::size_t classes = 48;
    std::size_t pretrain_classes = 32;  // classes [0, pretrain_classes) form the pretrain corpus
    std::size_t latent_dim = 16;
    std::size_t image_dim = 64;
    std::size_t samples_per_class = 40;
    double noise = 0.25;
    // Class-token embedding rows carry prototype signal at ground_scale with
    // ground_jitter of private noise, so that the name of a class the text
    // tower never saw still points toward its prototype.
    double ground_scale = 0.12;
    double ground_jitter = 0.02;
    // Downstream classes render through a blend of the pretrain render map
    // and alternate ones: 0 keeps one domain, larger values open a domain
    // gap that adaptation can close generically before it specializes.
    double domain_shift = 0.0;
    // Fraction of the shifted component that is private to each class rather
    // than shared across the downstream domain. The shared part is correctable
    // for every class at once; the private parts are only learnable from a
    // class's own examples.
    double shift_private = 0.5;
};

inline void validate(const UniverseConfig& c) {
    if (c.classes < 2) throw config_error("universe: need at least two classes");
    if (c.pretrain_classes < 2 || c.pretrain_classes > c.classes)
        throw config_error("universe: pretrain_classes must be in [2, classes]");
    if (c.latent_dim == 0 || c.image_dim == 0)
        throw config_error("universe: latent_dim and image_dim must be positive");
    if (c.samples_per_class == 0) throw config_error("universe: samples_per_class must be positive");
    if (c.noise < 0.0) throw config_error("universe: noise must be nonnegative");
    if (c.domain_shift < 0.0 || c.domain_shift > 1.0)
        throw config_error("universe: domain_shift must be in [0, 1]");
    if (c.shift_private < 0.0 || c.shift_private > 1.0)
        throw config_error("universe: shift_private must be in [0, 1]");
    if (c.ground_scale < 0.0 || c.ground_jitter < 0.0)
        throw config_error("universe: ground_scale and ground_jitter must be nonnegative");
}

class Universe {
public:
    UniverseConfig config;
    std::vector<double> prototypes;  // classes x latent_dim
    std::vector<double> render;      // image_dim x latent_dim
    std::vector<double> samples;     // classes x samples_per_class x image_dim

    std::size_t vocab_size() const { return vocab::FIRST_CLASS + config.classes; }

    std::size_t class_token(std::size_t c) const {
        if (c >= config.classes) throw argument_error("class_token: class id out of range");
        return vocab::FIRST_CLASS + c;
    }

    const double* sample(std::size_t c, std::size_t i) const {
        if (c >= config.classes || i >= config.samples_per_class)
            throw argument_error("sample: index out of range");
        return samples.data() + (c * config.samples_per_class + i) * config.image_dim;
    }

    const double* prototype(std::size_t c) const {
        if (c >= config.classes) throw argument_error("prototype: class id out of range");
        return prototypes.data() + c * config.latent_dim;
    }

    // Initial token-embedding rows for all class tokens, at the requested
    // embedding width. Deterministic in (universe seed, embed_dim).
    std::vector<double> grounded_embeddings(std::size_t embed_dim) const {
        const std::size_t L = config.latent_dim;
        Rng grng(derive_seed(config.seed, 1'000'000));
        std::vector<double> G(embed_dim * L);
        const double gstd = 1.0 / std::sqrt(double(L));
        grng.fill_gaussian(G, 0.0, gstd);
        std::vector<double> rows(config.classes * embed_dim);
        for (std::size_t c = 0; c < config.classes; ++c) {
            Rng jrng(derive_seed(config.seed, 2'000'000 + c));
            const double* z = prototypes.data() + c * L;
            for (std::size_t i = 0; i < embed_dim; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < L; ++j) acc += G[i * L + j] * z[j];
                rows[c * embed_dim + i] =
                    config.ground_scale * acc + config.ground_jitter * jrng.gaussian();
            }
        }
        return rows;
    }
};

inline std::shared_ptr<const Universe> make_universe(const UniverseConfig& cfg) {
    validate(cfg);
    auto u = std::make_shared<Universe>();
    u->config = cfg;

    Rng proto_rng(derive_seed(cfg.seed, 0));
    u->prototypes.resize(cfg.classes * cfg.latent_dim);
    proto_rng.fill_gaussian(u->prototypes, 0.0, 1.0);

    Rng render_rng(derive_seed(cfg.seed, 1));
    u->render.resize(cfg.image_dim * cfg.latent_dim);
    render_rng.fill_gaussian(u->render, 0.0, 1.0 / std::sqrt(double(cfg.latent_dim)));

    // Alternate render maps for downstream classes; the blend is rescaled so
    // per-dimension signal power stays comparable across the gap.  The shifted
    // component splits into a map shared by the whole downstream domain and a
    // per-class private map: the shared part can be corrected for every class
    // at once, the private parts only by fitting a class's own examples.
    const double s = cfg.domain_shift;
    const double a = 1.0 - s;
    const double b_shared = s * std::sqrt(1.0 - cfg.shift_private);
    const double b_priv = s * std::sqrt(cfg.shift_private);
    const double renorm = 1.0 / std::sqrt(a * a + b_shared * b_shared + b_priv * b_priv);
    const double map_std = 1.0 / std::sqrt(double(cfg.latent_dim));

    std::vector<double> shared_map;
    if (cfg.domain_shift > 0.0) {
        Rng alt_rng(derive_seed(cfg.seed, 2));
        shared_map.resize(u->render.size());
        alt_rng.fill_gaussian(shared_map, 0.0, map_std);
    }

    u->samples.resize(cfg.classes * cfg.samples_per_class * cfg.image_dim);
    std::vector<double> blended(u->render.size());
    std::vector<double> priv_map(u->render.size());
    for (std::size_t c = 0; c < cfg.classes; ++c) {
        Rng srng(derive_seed(cfg.seed, 10 + c));
        const double* render = u->render.data();
        if (cfg.domain_shift > 0.0 && c >= cfg.pretrain_classes) {
            Rng priv_rng(derive_seed(cfg.seed, 4'000'000 + c));
            priv_rng.fill_gaussian(priv_map, 0.0, map_std);
            for (std::size_t i = 0; i < blended.size(); ++i)
                blended[i] = renorm *
                             (a * u->render[i] + b_shared * shared_map[i] + b_priv * priv_map[i]);
            render = blended.data();
        }
        const double* z = u->prototypes.data() + c * cfg.latent_dim;
        for (std::size_t s2 = 0; s2 < cfg.samples_per_class; ++s2) {
            double* img = u->samples.data() + (c * cfg.samples_per_class + s2) * cfg.image_dim;
            for (std::size_t i = 0; i < cfg.image_dim; ++i) {
                double acc = 0.0;
                for (std::size_t j = 0; j < cfg.latent_dim; ++j)
                    acc += render[i * cfg.latent_dim + j] * z[j];
                img[i] = acc + cfg.noise * srng.gaussian();
            }
        }
    }
    return u;
}

// ===== few-shot task =====

struct Split {
    std::vector<std::size_t> base, novel;
};

// Ascending sort, first ceil(n/2) ids become base, the rest novel.
inline Split split_base_novel(std::vector<std::size_t> ids) {
    if (ids.size() < 2) throw argument_error("split_base_novel: need at least two categories");
    std::sort(ids.begin(), ids.end());
    for (std::size_t i = 1; i < ids.size(); ++i)
        if (ids[i] == ids[i - 1]) throw argument_error("split_base_novel: duplicate category id");
    const std::size_t nb = (ids.size() + 1) / 2;
    Split s;
    s.base.assign(ids.begin(), ids.begin() + nb);
    s.novel.assign(ids.begin() + nb, ids.end());
    return s;
}

inline Split all_categories_split(std::vector<std::size_t> ids) {
    std::sort(ids.begin(), ids.end());
    return Split{std::move(ids), {}};
}

struct ShotRef {
    std::size_t class_id;
    std::size_t sample_index;
};

// A frozen adaptation task: k support shots per base class plus disjoint
// evaluation sets for base and novel classes. Sample membership is by
// (class, index) into the universe; shots and eval never overlap.
class FewShotTask {
public:
    std::shared_ptr<const Universe> universe;
    std::vector<std::size_t> base_ids, novel_ids;  // ascending
    std::vector<ShotRef> shots;                    // grouped by base class, ascending
    std::vector<ShotRef> base_eval, novel_eval;
    std::size_t shots_per_class = 0;
    std::size_t eval_per_class = 0;
    std::uint64_t seed = 0;

    // Position of a base class id inside base_ids; training labels use this.
    std::size_t base_index_of(std::size_t class_id) const {
        for (std::size_t i = 0; i < base_ids.size(); ++i)
            if (base_ids[i] == class_id) return i;
        throw argument_error("base_index_of: not a base class of this task");
    }
};

inline FewShotTask make_task(std::shared_ptr<const Universe> universe, const Split& split,
                             std::size_t k, std::size_t eval_per_class, std::uint64_t seed) {
    if (!universe) throw argument_error("make_task: null universe");
    const auto& cfg = universe->config;
    if (split.base.empty()) throw argument_error("make_task: base category set is empty");
    if (k == 0) throw argument_error("make_task: k must be positive");
    if (eval_per_class == 0) throw argument_error("make_task: eval_per_class must be positive");
    if (k + eval_per_class > cfg.samples_per_class)
        throw config_error("make_task: k + eval_per_class exceeds samples per class");
    std::vector<std::size_t> all = split.base;
    all.insert(all.end(), split.novel.begin(), split.novel.end());
    std::sort(all.begin(), all.end());
    for (std::size_t i = 0; i < all.size(); ++i) {
        if (all[i] >= cfg.classes) throw argument_error("make_task: category id out of range");
        if (i > 0 && all[i] == all[i - 1])
            throw argument_error("make_task: category appears in both base and novel");
    }

    FewShotTask task;
    task.universe = std::move(universe);
    task.base_ids = split.base;
    task.novel_ids = split.novel;
    std::sort(task.base_ids.begin(), task.base_ids.end());
    std::sort(task.novel_ids.begin(), task.novel_ids.end());
    task.shots_per_class = k;
    task.eval_per_class = eval_per_class;
    task.seed = seed;

    for (std::size_t c : task.base_ids) {
        std::vector<std::size_t> order(cfg.samples_per_class);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(seed, 500 + c));
        rng.shuffle(order);
        for (std::size_t i = 0; i < k; ++i) task.shots.push_back({c, order[i]});
        for (std::size_t i = 0; i < eval_per_class; ++i)
            task.base_eval.push_back({c, order[k + i]});
    }
    for (std::size_t c : task.novel_ids) {
        std::vector<std::size_t> order(cfg.samples_per_class);
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(derive_seed(seed, 500 + c));
        rng.shuffle(order);
        for (std::size_t i = 0; i < eval_per_class; ++i)
            task.novel_eval.push_back({c, order[i]});
    }
    return task;
}

}  // namespace twostage
