// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary persistence: model checkpoints (full parameter registry,
// adapter state, optional tuned classifier) and dataset files (universe
// arrays plus task index lists). Both formats carry a magic tag, a version
// field, and a trailing FNV-1a checksum; loads reject wrong magic, unknown
// versions, truncation, and checksum mismatches before constructing anything.
// Values round-trip bit-exactly: doubles are stored as raw 8-byte images.
#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "twostage/errors.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/synthdata.hpp"
#include "twostage/tensor.hpp"

namespace twostage {

inline constexpr std::uint64_t CHECKPOINT_VERSION = 1;
inline constexpr std::uint64_t DATASET_VERSION = 1;
inline constexpr char CHECKPOINT_MAGIC[8] = {'2', 'S', 'F', 'S', 'C', 'K', 'P', 'T'};
inline constexpr char DATASET_MAGIC[8] = {'2', 'S', 'F', 'S', 'D', 'A', 'T', 'A'};

namespace detail {

class ByteWriter {
public:
    std::vector<unsigned char> bytes;

    void raw(const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        bytes.insert(bytes.end(), b, b + n);
    }
    void u64(std::uint64_t v) { raw(&v, sizeof v); }
    void f64(double v) { raw(&v, sizeof v); }
    void u8(std::uint8_t v) { raw(&v, sizeof v); }
    void str(const std::string& s) {
        u64(s.size());
        raw(s.data(), s.size());
    }
    void f64s(const std::vector<double>& v) {
        u64(v.size());
        raw(v.data(), v.size() * sizeof(double));
    }
    void u64s(const std::vector<std::size_t>& v) {
        u64(v.size());
        for (std::size_t x : v) u64(x);
    }
    void tensor(const TensorPtr& t) {
        u8(t->requires_grad ? 1 : 0);
        u64s(t->shape);
        f64s(t->values);
    }
};

class ByteReader {
public:
    ByteReader(const unsigned char* data, std::size_t size) : data_(data), size_(size) {}

    void raw(void* out, std::size_t n) {
        if (pos_ + n > size_) throw format_error("checkpoint: truncated file");
        std::memcpy(out, data_ + pos_, n);
        pos_ += n;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        raw(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        raw(&v, sizeof v);
        return v;
    }
    std::uint8_t u8() {
        std::uint8_t v;
        raw(&v, sizeof v);
        return v;
    }
    std::string str() {
        std::uint64_t n = u64();
        if (pos_ + n > size_) throw format_error("checkpoint: truncated file");
        std::string s(reinterpret_cast<const char*>(data_ + pos_), n);
        pos_ += n;
        return s;
    }
    std::vector<double> f64s() {
        std::uint64_t n = u64();
        if (n > (size_ - pos_) / sizeof(double)) throw format_error("checkpoint: truncated file");
        std::vector<double> v(n);
        raw(v.data(), n * sizeof(double));
        return v;
    }
    std::vector<std::size_t> u64s() {
        std::uint64_t n = u64();
        if (n > (size_ - pos_) / sizeof(std::uint64_t))
            throw format_error("checkpoint: truncated file");
        std::vector<std::size_t> v(n);
        for (auto& x : v) x = u64();
        return v;
    }
    TensorPtr tensor() {
        const bool rg = u8() != 0;
        auto shape = u64s();
        auto values = f64s();
        auto t = make_tensor(std::move(values), std::move(shape));
        t->requires_grad = rg;
        return t;
    }
    std::size_t pos() const { return pos_; }

private:
    const unsigned char* data_;
    std::size_t size_;
    std::size_t pos_ = 0;
};

inline std::uint64_t fnv1a(const unsigned char* p, std::size_t n) {
    std::uint64_t h = 1469598103934665603ull;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 1099511628211ull;
    }
    return h;
}

// Frame layout shared by both formats: magic, version, payload, checksum of
// everything before the checksum. `expected_name` names the format in errors.
inline void write_frame(const std::string& path, const char magic[8], std::uint64_t version,
                        const ByteWriter& payload) {
    ByteWriter all;
    all.raw(magic, 8);
    all.u64(version);
    all.raw(payload.bytes.data(), payload.bytes.size());
    all.u64(fnv1a(all.bytes.data(), all.bytes.size()));
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw format_error("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(all.bytes.data()),
              static_cast<std::streamsize>(all.bytes.size()));
    if (!out) throw format_error("write failed for '" + path + "'");
}

inline std::vector<unsigned char> read_frame(const std::string& path, const char magic[8],
                                             std::uint64_t version, const char* format_name) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw format_error(std::string(format_name) + ": cannot open '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                     std::istreambuf_iterator<char>());
    if (bytes.size() < 8 + sizeof(std::uint64_t) * 2)
        throw format_error(std::string(format_name) + ": truncated file");
    if (std::memcmp(bytes.data(), magic, 8) != 0)
        throw format_error(std::string(format_name) + ": bad magic, not a " + format_name +
                           " file");
    std::uint64_t stored_sum;
    std::memcpy(&stored_sum, bytes.data() + bytes.size() - sizeof stored_sum, sizeof stored_sum);
    if (fnv1a(bytes.data(), bytes.size() - sizeof stored_sum) != stored_sum)
        throw format_error(std::string(format_name) + ": checksum mismatch, file is corrupt");
    std::uint64_t stored_version;
    std::memcpy(&stored_version, bytes.data() + 8, sizeof stored_version);
    if (stored_version != version)
        throw format_error(std::string(format_name) + ": unsupported version " +
                           std::to_string(stored_version) + " (this build reads version " +
                           std::to_string(version) + ")");
    // Payload = bytes between the version field and the checksum.
    return {bytes.begin() + 8 + sizeof(std::uint64_t), bytes.end() - sizeof(std::uint64_t)};
}

}  // namespace detail

// ===== model checkpoints =====

struct Checkpoint {
    DualEncoder model;
    std::optional<Classifier> classifier;
    std::string config_hash;  // hash of the experiment that produced it ("" if none)
};

inline void save_checkpoint(const std::string& path, const DualEncoder& model,
                            const Classifier* classifier = nullptr,
                            const std::string& config_hash = "") {
    detail::ByteWriter w;
    w.str(config_hash);

    const ModelConfig& c = model.config;
    w.u64(c.blocks);
    w.u64(c.embed_dim);
    w.u64(c.patch_rows);
    w.u64(c.patch_cols);
    w.u64(c.patch_features);
    w.u64(c.mlp_hidden);
    w.f64(c.ln_eps);
    w.f64(c.init_tau);
    w.u64(c.init_seed);
    w.u64(model.vocab_classes);

    w.u64(static_cast<std::uint64_t>(model.attached));
    w.u8(model.lora_merged ? 1 : 0);

    w.u64(model.registry.size());
    for (const auto& [name, t] : model.registry) {
        w.str(name);
        w.tensor(t);
    }

    w.u64(model.lora.size());
    for (const auto& [name, ad] : model.lora) {
        w.str(name);
        w.f64(ad.scale);
        w.tensor(ad.a);
        w.tensor(ad.b);
    }

    w.u8(model.prompt_ctx ? 1 : 0);
    if (model.prompt_ctx) w.tensor(model.prompt_ctx);

    w.u8(classifier ? 1 : 0);
    if (classifier) {
        w.u64s(classifier->base_ids);
        w.tensor(classifier->phi);
    }

    detail::write_frame(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, w);
}

inline Checkpoint load_checkpoint(const std::string& path) {
    auto payload = detail::read_frame(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint");
    detail::ByteReader r(payload.data(), payload.size());

    Checkpoint out;
    out.config_hash = r.str();

    ModelConfig c;
    c.blocks = r.u64();
    c.embed_dim = r.u64();
    c.patch_rows = r.u64();
    c.patch_cols = r.u64();
    c.patch_features = r.u64();
    c.mlp_hidden = r.u64();
    c.ln_eps = r.f64();
    c.init_tau = r.f64();
    c.init_seed = r.u64();
    validate(c);

    DualEncoder& m = out.model;
    m.config = c;
    m.vocab_classes = r.u64();

    const std::uint64_t kind = r.u64();
    if (kind > static_cast<std::uint64_t>(PeftKind::prompt))
        throw format_error("checkpoint: invalid strategy tag");
    m.attached = static_cast<PeftKind>(kind);
    m.lora_merged = r.u8() != 0;

    const std::uint64_t nt = r.u64();
    for (std::uint64_t i = 0; i < nt; ++i) {
        std::string name = r.str();
        m.registry[name] = r.tensor();
    }

    const std::uint64_t na = r.u64();
    for (std::uint64_t i = 0; i < na; ++i) {
        std::string name = r.str();
        LoraAdapter ad;
        ad.scale = r.f64();
        ad.a = r.tensor();
        ad.b = r.tensor();
        m.lora[name] = std::move(ad);
    }

    if (r.u8()) m.prompt_ctx = r.tensor();

    if (r.u8()) {
        Classifier cl;
        cl.base_ids = r.u64s();
        cl.phi = r.tensor();
        out.classifier = std::move(cl);
    }

    return out;
}

// ===== dataset files (universe + task) =====

struct DatasetFile {
    std::shared_ptr<const Universe> universe;
    std::optional<FewShotTask> task;  // regenerated against `universe`
    std::string config_hash;
};

inline void save_dataset(const std::string& path, const Universe& u,
                         const FewShotTask* task = nullptr, const std::string& config_hash = "") {
    detail::ByteWriter w;
    w.str(config_hash);

    const UniverseConfig& c = u.config;
    w.u64(c.seed);
    w.u64(c.classes);
    w.u64(c.pretrain_classes);
    w.u64(c.latent_dim);
    w.u64(c.image_dim);
    w.u64(c.samples_per_class);
    w.f64(c.noise);
    w.f64(c.domain_shift);
    w.f64(c.shift_private);
    w.f64(c.ground_scale);
    w.f64(c.ground_jitter);
    w.f64s(u.prototypes);
    w.f64s(u.render);
    w.f64s(u.samples);

    w.u8(task ? 1 : 0);
    if (task) {
        w.u64s(task->base_ids);
        w.u64s(task->novel_ids);
        w.u64(task->shots_per_class);
        w.u64(task->eval_per_class);
        w.u64(task->seed);
    }

    detail::write_frame(path, DATASET_MAGIC, DATASET_VERSION, w);
}

inline DatasetFile load_dataset(const std::string& path) {
    auto payload = detail::read_frame(path, DATASET_MAGIC, DATASET_VERSION, "dataset");
    detail::ByteReader r(payload.data(), payload.size());

    DatasetFile out;
    out.config_hash = r.str();

    auto u = std::make_shared<Universe>();
    UniverseConfig& c = u->config;
    c.seed = r.u64();
    c.classes = r.u64();
    c.pretrain_classes = r.u64();
    c.latent_dim = r.u64();
    c.image_dim = r.u64();
    c.samples_per_class = r.u64();
    c.noise = r.f64();
    c.domain_shift = r.f64();
    c.shift_private = r.f64();
    c.ground_scale = r.f64();
    c.ground_jitter = r.f64();
    validate(c);
    u->prototypes = r.f64s();
    u->render = r.f64s();
    u->samples = r.f64s();
    if (u->prototypes.size() != c.classes * c.latent_dim ||
        u->render.size() != c.image_dim * c.latent_dim ||
        u->samples.size() != c.classes * c.samples_per_class * c.image_dim)
        throw format_error("dataset: array sizes do not match the stored configuration");
    out.universe = u;

    if (r.u8()) {
        auto base = r.u64s();
        auto novel = r.u64s();
        const std::size_t k = r.u64();
        const std::size_t eval = r.u64();
        const std::uint64_t seed = r.u64();
        out.task = make_task(out.universe, Split{std::move(base), std::move(novel)}, k, eval, seed);
    }

    return out;
}

}  // namespace twostage
