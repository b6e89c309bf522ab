// SPDX-License-Identifier: Apache-2.0
#pragma once

// Parameter-efficient adaptation strategies over the dual encoder. attach()
// selects or creates the trainable set omega, freezes everything else, and
// returns the set in deterministic name order. Selection keys on the kind
// suffix of registry names, so it is structural rather than hand-listed:
//   layernorm -> every ln_gamma / ln_beta
//   bitfit    -> every bias_* (and nothing named w_*)
//   lora      -> new low-rank (A, B) pairs on w_q / w_k / w_v of both towers
//   prompt    -> new learnable context rows replacing the text template

#include <cstdint>
#include <string>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/model.hpp"
#include "twostage/rng.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

struct PeftConfig {
    PeftKind kind = PeftKind::layernorm;
    std::size_t lora_rank = 2;
    double lora_scale = 1.0;
    std::size_t prompt_ctx = 4;
};

inline void validate(const PeftConfig& c) {
    if (c.kind == PeftKind::none) throw config_error("peft: strategy must not be none");
    if (c.kind == PeftKind::lora && c.lora_rank == 0)
        throw config_error("peft: lora_rank must be positive");
    if (c.kind == PeftKind::prompt && c.prompt_ctx == 0)
        throw config_error("peft: prompt_ctx must be positive");
}

struct ParamRef {
    std::string name;
    TensorPtr tensor;
};

struct ParamSet {
    PeftKind kind = PeftKind::none;
    std::vector<ParamRef> entries;  // ascending by name

    std::vector<TensorPtr> tensors() const {
        std::vector<TensorPtr> out;
        out.reserve(entries.size());
        for (const auto& e : entries) out.push_back(e.tensor);
        return out;
    }

    std::size_t total_size() const {
        std::size_t n = 0;
        for (const auto& e : entries) n += e.tensor->size();
        return n;
    }

    bool contains(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return true;
        return false;
    }
};

namespace detail {

inline std::string kind_suffix(const std::string& name) {
    const auto pos = name.rfind('.');
    return pos == std::string::npos ? name : name.substr(pos + 1);
}

inline const char* lora_suffix(const char* target) {
    if (std::string(target) == "w_q") return "lora_q";
    if (std::string(target) == "w_k") return "lora_k";
    return "lora_v";
}

}  // namespace detail

// Number of trainable parameters a strategy introduces on a given
// architecture; pure arithmetic, no model needed.
inline std::size_t peft_param_count(const ModelConfig& m, const PeftConfig& p) {
    validate(p);
    const std::size_t d = m.embed_dim, h = m.mlp_hidden;
    switch (p.kind) {
        case PeftKind::layernorm:
            // two towers, (2 per block + 1 final) instances, gamma and beta
            return 2 * (2 * m.blocks + 1) * 2 * d;
        case PeftKind::bitfit: {
            const std::size_t per_block = 4 * d + h + d;  // q,k,v,o biases + two mlp biases
            return d + 2 * m.blocks * per_block;          // vision patch bias + both towers
        }
        case PeftKind::lora:
            // q,k,v in every block of both towers; each adapter is A[r x d] + B[d x r]
            return 2 * m.blocks * 3 * p.lora_rank * (d + d);
        case PeftKind::prompt:
            return p.prompt_ctx * d;
        case PeftKind::none:
            break;
    }
    throw config_error("peft: strategy must not be none");
}

// Installs a strategy on the model: creates adapter parameters where needed,
// marks exactly omega trainable, freezes the rest. One strategy at a time.
inline ParamSet attach(DualEncoder& model, const PeftConfig& cfg) {
    validate(cfg);
    if (model.attached != PeftKind::none)
        throw state_error("attach: a strategy is already attached");

    model.freeze_all();
    ParamSet set;
    set.kind = cfg.kind;

    switch (cfg.kind) {
        case PeftKind::layernorm:
            for (auto& [name, t] : model.registry) {
                const auto kind = detail::kind_suffix(name);
                if (kind == "ln_gamma" || kind == "ln_beta") {
                    t->requires_grad = true;
                    set.entries.push_back({name, t});
                }
            }
            break;
        case PeftKind::bitfit:
            for (auto& [name, t] : model.registry) {
                if (detail::kind_suffix(name).rfind("bias_", 0) == 0) {
                    t->requires_grad = true;
                    set.entries.push_back({name, t});
                }
            }
            break;
        case PeftKind::lora: {
            Rng rng(derive_seed(model.config.init_seed, 777));
            const std::size_t d = model.config.embed_dim;
            for (const char* tower : {"vision", "text"})
                for (std::size_t i = 0; i < model.config.blocks; ++i)
                    for (const char* target : {"w_q", "w_k", "w_v"}) {
                        const std::string block =
                            std::string(tower) + ".b" + std::to_string(i) + ".";
                        const std::string wname = block + target;
                        model.param(wname);  // existence check
                        LoraAdapter ad;
                        ad.a = make_tensor({cfg.lora_rank, d});
                        rng.fill_gaussian(ad.a->values, 0.0, 0.02);
                        ad.a->requires_grad = true;
                        ad.b = make_tensor({d, cfg.lora_rank});  // zero, so the bypass starts inert
                        ad.b->requires_grad = true;
                        ad.scale = cfg.lora_scale;
                        model.lora[wname] = ad;
                        const std::string stem = block + detail::lora_suffix(target);
                        set.entries.push_back({stem + ".a", ad.a});
                        set.entries.push_back({stem + ".b", ad.b});
                    }
            break;
        }
        case PeftKind::prompt: {
            const auto table = model.param("text.embed");
            const std::size_t d = model.config.embed_dim;
            static constexpr std::size_t kTemplate[4] = {vocab::A, vocab::PHOTO, vocab::OF,
                                                         vocab::A};
            auto ctx = make_tensor({cfg.prompt_ctx, d});
            for (std::size_t i = 0; i < cfg.prompt_ctx; ++i)
                std::copy_n(table->values.data() + kTemplate[i % 4] * d, d,
                            ctx->values.data() + i * d);
            ctx->requires_grad = true;
            model.prompt_ctx = ctx;
            set.entries.push_back({"text.prompt_ctx", ctx});
            break;
        }
        case PeftKind::none:
            break;
    }

    std::sort(set.entries.begin(), set.entries.end(),
              [](const ParamRef& a, const ParamRef& b) { return a.name < b.name; });
    model.attached = cfg.kind;
    return set;
}

// Folds every adapter into its wrapped weight (W += scale * (BA)^T) and
// removes the adapters. Forward outputs are preserved up to floating-point
// association; a merged model is a plain dual encoder again.
inline void merge_lora(DualEncoder& model) {
    if (model.attached != PeftKind::lora || model.lora.empty())
        throw state_error(model.lora_merged ? "merge_lora: adapters already merged"
                                            : "merge_lora: no adapters attached");
    for (auto& [wname, ad] : model.lora) {
        auto w = model.param(wname);
        const std::size_t r = ad.a->shape[0], in = ad.a->shape[1], out = ad.b->shape[0];
        for (std::size_t p = 0; p < in; ++p)
            for (std::size_t q = 0; q < out; ++q) {
                double acc = 0.0;
                for (std::size_t s = 0; s < r; ++s)
                    acc += ad.b->values[q * r + s] * ad.a->values[s * in + p];
                w->values[p * out + q] += ad.scale * acc;
            }
    }
    model.lora.clear();
    model.freeze_all();
    model.attached = PeftKind::none;
    model.lora_merged = true;
}

}  // namespace twostage
