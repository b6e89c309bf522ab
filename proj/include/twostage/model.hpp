// SPDX-License-Identifier: Apache-2.0
#pragma once

// Dual-encoder contrastive model: a vision tower over patch tokens and a text
// tower over prompt tokens, both pre-norm transformer stacks sharing one
// embedding width, each ending in mean-pool -> linear projection -> L2
// normalization. A learned temperature multiplies cosine logits; it trains
// during pretraining and stays frozen afterwards.
//
// All parameters live in a name-keyed registry. Names follow
//   <tower>.<site>.<kind>
// where kind is one of: embed, proj, ln_gamma, ln_beta, w_q, w_k, w_v, w_o,
// mlp_w1, mlp_w2, or bias_<x>. Parameter-selection rules key on the kind
// suffix, so the naming is load-bearing.

#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/optim.hpp"
#include "twostage/rng.hpp"
#include "twostage/synthdata.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

struct ModelConfig {
    std::size_t blocks = 2;          // transformer blocks per tower
    std::size_t embed_dim = 32;      // token width and joint embedding width
    std::size_t patch_rows = 2;
    std::size_t patch_cols = 2;
    std::size_t patch_features = 16; // features per patch token
    std::size_t mlp_hidden = 64;
    double ln_eps = 1e-5;
    double init_tau = 10.0;
    std::uint64_t init_seed = 42;

    std::size_t image_tokens() const { return patch_rows * patch_cols; }
    std::size_t image_dim() const { return image_tokens() * patch_features; }
};

inline void validate(const ModelConfig& c) {
    if (c.blocks == 0) throw config_error("model: blocks must be positive");
    if (c.embed_dim == 0 || c.patch_features == 0 || c.mlp_hidden == 0)
        throw config_error("model: widths must be positive");
    if (c.patch_rows == 0 || c.patch_cols == 0) throw config_error("model: empty patch grid");
    if (c.ln_eps <= 0.0) throw config_error("model: ln_eps must be positive");
    if (c.init_tau <= 0.0) throw config_error("model: init_tau must be positive");
}

enum class PeftKind { none, layernorm, lora, bitfit, prompt };

inline const char* to_string(PeftKind k) {
    switch (k) {
        case PeftKind::none: return "none";
        case PeftKind::layernorm: return "layernorm";
        case PeftKind::lora: return "lora";
        case PeftKind::bitfit: return "bitfit";
        case PeftKind::prompt: return "prompt";
    }
    return "none";
}

inline PeftKind peft_kind_from_string(const std::string& s) {
    if (s == "none") return PeftKind::none;
    if (s == "layernorm") return PeftKind::layernorm;
    if (s == "lora") return PeftKind::lora;
    if (s == "bitfit") return PeftKind::bitfit;
    if (s == "prompt") return PeftKind::prompt;
    throw config_error("unknown peft strategy: " + s);
}

struct LoraAdapter {
    TensorPtr a;  // rank x in
    TensorPtr b;  // out x rank
    double scale = 1.0;
};

class DualEncoder {
public:
    ModelConfig config;
    std::size_t vocab_classes = 0;  // class-token count; vocab size = FIRST_CLASS + this
    std::map<std::string, TensorPtr> registry;
    std::map<std::string, LoraAdapter> lora;  // keyed by wrapped weight name
    TensorPtr prompt_ctx;                     // null unless prompt strategy attached
    PeftKind attached = PeftKind::none;
    bool lora_merged = false;
    mutable std::size_t text_encoder_calls = 0;

    DualEncoder() = default;
    DualEncoder(const DualEncoder&) = delete;
    DualEncoder& operator=(const DualEncoder&) = delete;
    DualEncoder(DualEncoder&&) = default;
    DualEncoder& operator=(DualEncoder&&) = default;

    // Fresh model with grounded class-token embeddings from the universe.
    // All parameters start frozen; pretraining and attach() decide what trains.
    static DualEncoder init(const ModelConfig& cfg, const Universe& universe) {
        validate(cfg);
        if (universe.config.image_dim != cfg.image_dim())
            throw config_error("model: universe image_dim does not match patch grid");
        DualEncoder m;
        m.config = cfg;
        m.vocab_classes = universe.config.classes;
        Rng rng(cfg.init_seed);
        const std::size_t d = cfg.embed_dim, f = cfg.patch_features, h = cfg.mlp_hidden;

        auto weight = [&](std::vector<std::size_t> shape, std::size_t fan_in) {
            auto t = make_tensor(std::move(shape));
            rng.fill_gaussian(t->values, 0.0, 1.0 / std::sqrt(double(fan_in)));
            return t;
        };
        auto zeros = [&](std::vector<std::size_t> shape) { return make_tensor(std::move(shape)); };
        auto ones = [&](std::size_t n) {
            auto t = make_tensor({n});
            std::fill(t->values.begin(), t->values.end(), 1.0);
            return t;
        };
        auto add_blocks = [&](const std::string& tower) {
            for (std::size_t i = 0; i < cfg.blocks; ++i) {
                const std::string p = tower + ".b" + std::to_string(i) + ".";
                m.registry[p + "ln1.ln_gamma"] = ones(d);
                m.registry[p + "ln1.ln_beta"] = zeros({d});
                m.registry[p + "w_q"] = weight({d, d}, d);
                m.registry[p + "bias_q"] = zeros({d});
                m.registry[p + "w_k"] = weight({d, d}, d);
                m.registry[p + "bias_k"] = zeros({d});
                m.registry[p + "w_v"] = weight({d, d}, d);
                m.registry[p + "bias_v"] = zeros({d});
                m.registry[p + "w_o"] = weight({d, d}, d);
                m.registry[p + "bias_o"] = zeros({d});
                m.registry[p + "ln2.ln_gamma"] = ones(d);
                m.registry[p + "ln2.ln_beta"] = zeros({d});
                m.registry[p + "mlp_w1"] = weight({d, h}, d);
                m.registry[p + "bias_mlp1"] = zeros({h});
                m.registry[p + "mlp_w2"] = weight({h, d}, h);
                m.registry[p + "bias_mlp2"] = zeros({d});
            }
            m.registry[tower + ".final.ln_gamma"] = ones(d);
            m.registry[tower + ".final.ln_beta"] = zeros({d});
            m.registry[tower + ".proj"] = weight({d, d}, d);
        };

        m.registry["vision.embed"] = weight({f, d}, f);
        m.registry["vision.bias_embed"] = zeros({d});
        add_blocks("vision");

        const std::size_t v = vocab::FIRST_CLASS + universe.config.classes;
        auto table = make_tensor({v, d});
        rng.fill_gaussian(table->values, 0.0, TOKEN_INIT_STD);
        const auto grounded = universe.grounded_embeddings(d);
        for (std::size_t c = 0; c < universe.config.classes; ++c)
            std::copy_n(grounded.data() + c * d, d,
                        table->values.data() + (vocab::FIRST_CLASS + c) * d);
        m.registry["text.embed"] = table;
        add_blocks("text");

        auto ls = make_tensor({std::size_t(1)});
        ls->values[0] = std::log(cfg.init_tau);
        m.registry["logit_scale"] = ls;
        return m;
    }

    TensorPtr param(const std::string& name) const {
        auto it = registry.find(name);
        if (it == registry.end()) throw argument_error("unknown parameter: " + name);
        return it->second;
    }

    double tau() const { return std::exp(param("logit_scale")->values[0]); }

    // logit_scale is excluded from every adaptation strategy by freezing; the
    // graph node is only needed during pretraining.
    TensorPtr tau_node() const { return expv(param("logit_scale")); }

    // ----- vision -----

    // Packed batch: images laid out back to back, each image_dim() doubles.
    TensorPtr encode_image_batch(const double* data, std::size_t count) const {
        if (count == 0) throw argument_error("encode_image_batch: empty batch");
        const std::size_t t = config.image_tokens(), f = config.patch_features;
        auto x = make_tensor({count * t, f});
        std::memcpy(x->values.data(), data, count * t * f * sizeof(double));
        auto tok = add_rowvec(matmul(x, param("vision.embed")), param("vision.bias_embed"));
        return tower_forward(tok, "vision", t, count);
    }

    TensorPtr encode_image(const double* image) const {
        return reshape(encode_image_batch(image, 1), {config.embed_dim});
    }

    // ----- text -----

    TensorPtr encode_text_batch(const std::vector<std::size_t>& class_ids) const {
        if (class_ids.empty()) throw argument_error("encode_text_batch: empty category list");
        for (std::size_t c : class_ids)
            if (c >= vocab_classes) throw argument_error("encode_text_batch: class id out of range");
        text_encoder_calls += class_ids.size();
        const auto table = param("text.embed");
        TensorPtr tok;
        std::size_t t;
        if (prompt_ctx) {
            t = 3 + prompt_ctx->shape[0];
            std::vector<TensorPtr> pieces;
            pieces.reserve(class_ids.size() * 3);
            for (std::size_t c : class_ids) {
                pieces.push_back(gather_rows(table, {vocab::BOS}));
                pieces.push_back(prompt_ctx);
                pieces.push_back(gather_rows(table, {vocab::FIRST_CLASS + c, vocab::EOS}));
            }
            tok = concat_rows(pieces);
        } else {
            t = vocab::TEXT_LEN;
            std::vector<std::size_t> ids;
            ids.reserve(class_ids.size() * t);
            for (std::size_t c : class_ids) {
                ids.insert(ids.end(), {vocab::BOS, vocab::A, vocab::PHOTO, vocab::OF, vocab::A,
                                       vocab::FIRST_CLASS + c, vocab::EOS});
            }
            tok = gather_rows(table, ids);
        }
        return tower_forward(tok, "text", t, class_ids.size());
    }

    TensorPtr encode_text(std::size_t class_id) const {
        return reshape(encode_text_batch({class_id}), {config.embed_dim});
    }

    // ----- bookkeeping -----

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : registry) n += t->size();
        return n;
    }

    std::size_t trainable_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : registry)
            if (t->requires_grad) n += t->size();
        for (const auto& [name, ad] : lora) {
            if (ad.a->requires_grad) n += ad.a->size();
            if (ad.b->requires_grad) n += ad.b->size();
        }
        if (prompt_ctx && prompt_ctx->requires_grad) n += prompt_ctx->size();
        return n;
    }

    void freeze_all() {
        for (auto& [name, t] : registry) t->requires_grad = false;
    }

    DualEncoder clone() const {
        DualEncoder m;
        m.config = config;
        m.vocab_classes = vocab_classes;
        for (const auto& [name, t] : registry) {
            auto c = make_tensor(t->values, t->shape);
            c->requires_grad = t->requires_grad;
            m.registry[name] = c;
        }
        for (const auto& [name, ad] : lora) {
            LoraAdapter c;
            c.a = make_tensor(ad.a->values, ad.a->shape);
            c.a->requires_grad = ad.a->requires_grad;
            c.b = make_tensor(ad.b->values, ad.b->shape);
            c.b->requires_grad = ad.b->requires_grad;
            c.scale = ad.scale;
            m.lora[name] = c;
        }
        if (prompt_ctx) {
            m.prompt_ctx = make_tensor(prompt_ctx->values, prompt_ctx->shape);
            m.prompt_ctx->requires_grad = prompt_ctx->requires_grad;
        }
        m.attached = attached;
        m.lora_merged = lora_merged;
        return m;
    }

    // FNV-1a over names and raw value bytes of every registry entry the
    // filter admits. Bitwise-identical parameters give identical hashes.
    template <typename Filter>
    std::uint64_t registry_hash(Filter&& admit) const {
        std::uint64_t h = 1469598103934665603ULL;
        auto mix = [&h](const void* data, std::size_t n) {
            const unsigned char* p = static_cast<const unsigned char*>(data);
            for (std::size_t i = 0; i < n; ++i) {
                h ^= p[i];
                h *= 1099511628211ULL;
            }
        };
        for (const auto& [name, t] : registry) {
            if (!admit(name)) continue;
            mix(name.data(), name.size());
            mix(t->values.data(), t->values.size() * sizeof(double));
        }
        return h;
    }

    std::uint64_t registry_hash() const {
        return registry_hash([](const std::string&) { return true; });
    }

private:
    // Linear layer with optional low-rank bypass: y = xW + scale * (xA^T)B^T.
    TensorPtr linear(const TensorPtr& x, const std::string& wname) const {
        auto y = matmul(x, param(wname));
        auto it = lora.find(wname);
        if (it != lora.end())
            y = add(y, scale(matmul_nt(matmul_nt(x, it->second.a), it->second.b),
                             it->second.scale));
        return y;
    }

    // Pre-norm blocks over packed [count*t x d] token rows, then final LN,
    // per-sequence mean pool, projection, and L2 normalization.
    TensorPtr tower_forward(TensorPtr x, const std::string& tower, std::size_t t,
                            std::size_t count) const {
        (void)count;
        const double eps = config.ln_eps;
        for (std::size_t i = 0; i < config.blocks; ++i) {
            const std::string p = tower + ".b" + std::to_string(i) + ".";
            auto n1 = layer_norm_rows(x, param(p + "ln1.ln_gamma"), param(p + "ln1.ln_beta"), eps);
            auto q = add_rowvec(linear(n1, p + "w_q"), param(p + "bias_q"));
            auto k = add_rowvec(linear(n1, p + "w_k"), param(p + "bias_k"));
            auto v = add_rowvec(linear(n1, p + "w_v"), param(p + "bias_v"));
            auto att = block_attention(q, k, v, t);
            auto o = add_rowvec(matmul(att, param(p + "w_o")), param(p + "bias_o"));
            x = add(x, o);
            auto n2 = layer_norm_rows(x, param(p + "ln2.ln_gamma"), param(p + "ln2.ln_beta"), eps);
            auto h1 = gelu(add_rowvec(matmul(n2, param(p + "mlp_w1")), param(p + "bias_mlp1")));
            auto h2 = add_rowvec(matmul(h1, param(p + "mlp_w2")), param(p + "bias_mlp2"));
            x = add(x, h2);
        }
        x = layer_norm_rows(x, param(tower + ".final.ln_gamma"), param(tower + ".final.ln_beta"),
                            eps);
        auto pooled = block_mean(x, t);
        return l2_normalize_rows(matmul(pooled, param(tower + ".proj")));
    }
};

// ===== pretraining =====

struct PretrainConfig {
    std::size_t steps = 600;
    std::size_t batch = 16;  // distinct classes per contrastive batch
    double lr = 2e-3;
    double weight_decay = 1e-4;
    std::uint64_t seed = 7;
    std::size_t holdout_per_class = 8;  // trailing shuffled samples kept out of pretraining
};

inline void validate(const PretrainConfig& c, const UniverseConfig& u) {
    if (c.steps == 0) throw config_error("pretrain: steps must be positive");
    if (c.batch < 2) throw config_error("pretrain: batch must be at least 2");
    if (c.batch > u.pretrain_classes)
        throw config_error("pretrain: batch exceeds pretrain class count");
    if (c.lr <= 0.0) throw config_error("pretrain: lr must be positive");
    if (c.weight_decay < 0.0) throw config_error("pretrain: weight_decay must be nonnegative");
    if (c.holdout_per_class >= u.samples_per_class)
        throw config_error("pretrain: holdout_per_class leaves no training samples");
}

struct PretrainResult {
    DualEncoder model;
    double final_loss = 0.0;
};

// Symmetric contrastive pretraining over image/text pairs of the universe's
// pretrain classes. Every batch pairs `batch` distinct classes with one
// training sample each; the loss averages cross-entropy along rows (image ->
// text) and columns (text -> image) of the temperature-scaled cosine matrix.
// Afterwards every parameter, including the temperature, is frozen.
inline PretrainResult pretrain(const Universe& universe, const PretrainConfig& cfg,
                               const ModelConfig& model_cfg) {
    validate(cfg, universe.config);
    DualEncoder model = DualEncoder::init(model_cfg, universe);
    for (auto& [name, t] : model.registry) t->requires_grad = true;

    std::vector<TensorPtr> params;
    for (auto& [name, t] : model.registry) params.push_back(t);
    AdamWConfig ocfg;
    ocfg.lr = cfg.lr;
    ocfg.weight_decay = cfg.weight_decay;
    AdamW opt(params, ocfg);

    Rng rng(derive_seed(cfg.seed, 3000));
    const std::size_t train_per_class = universe.config.samples_per_class - cfg.holdout_per_class;
    const std::size_t image_dim = universe.config.image_dim;
    std::vector<std::size_t> classes(universe.config.pretrain_classes);
    for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = i;

    std::vector<double> batch_images(cfg.batch * image_dim);
    std::vector<std::size_t> batch_classes(cfg.batch), diag(cfg.batch);
    for (std::size_t i = 0; i < cfg.batch; ++i) diag[i] = i;

    double final_loss = 0.0;
    for (std::size_t step = 0; step < cfg.steps; ++step) {
        rng.shuffle(classes);
        for (std::size_t i = 0; i < cfg.batch; ++i) {
            batch_classes[i] = classes[i];
            const std::size_t s = rng.uniform_index(train_per_class);
            std::copy_n(universe.sample(classes[i], s), image_dim,
                        batch_images.data() + i * image_dim);
        }
        auto v = model.encode_image_batch(batch_images.data(), cfg.batch);
        auto t = model.encode_text_batch(batch_classes);
        auto logits = mul_scalar(matmul_nt(v, t), model.tau_node());
        auto loss = scale(add(cross_entropy_mean(logits, diag),
                              cross_entropy_mean(transpose(logits), diag)),
                          0.5);
        opt.zero_grad();
        backward(loss);
        opt.step();
        final_loss = loss->item();
    }

    model.freeze_all();
    model.text_encoder_calls = 0;
    return {std::move(model), final_loss};
}

}  // namespace twostage
