// SPDX-License-Identifier: Apache-2.0
#include <catch2/catch_amalgamated.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "twostage/checkpoint.hpp"
#include "twostage/errors.hpp"
#include "twostage/infer.hpp"
#include "twostage/model.hpp"
#include "twostage/peft.hpp"
#include "twostage/rng.hpp"
#include "twostage/synthdata.hpp"

namespace fs = std::filesystem;
using namespace twostage;

namespace {

fs::path tmp_dir() {
    auto p = fs::temp_directory_path() / "twostage_test_checkpoint";
    fs::create_directories(p);
    return p;
}

std::shared_ptr<const Universe> tiny_universe() {
    UniverseConfig u;
    u.seed = 21;
    u.classes = 12;
    u.pretrain_classes = 8;
    u.latent_dim = 6;
    u.image_dim = 64;
    u.samples_per_class = 16;
    u.noise = 0.2;
    return make_universe(u);
}

DualEncoder fresh_model() { return DualEncoder::init(ModelConfig{}, *tiny_universe()); }

std::vector<double> random_image(std::uint64_t seed, std::size_t dim) {
    Rng rng(seed);
    std::vector<double> img(dim);
    rng.fill_gaussian(img, 0.0, 1.0);
    return img;
}

std::string load_error(const std::string& path) {
    try {
        (void)load_checkpoint(path);
    } catch (const format_error& e) {
        return e.what();
    }
    return "";
}

std::vector<unsigned char> read_bytes(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("model checkpoints round trip bitwise") {
    auto model = fresh_model();
    const auto path = (tmp_dir() / "model.ckpt").string();
    save_checkpoint(path, model, nullptr, "0123456789abcdef");

    auto ck = load_checkpoint(path);
    REQUIRE(ck.config_hash == "0123456789abcdef");
    REQUIRE(ck.model.config.blocks == model.config.blocks);
    REQUIRE(ck.model.config.embed_dim == model.config.embed_dim);
    REQUIRE(ck.model.config.init_seed == model.config.init_seed);
    REQUIRE(ck.model.vocab_classes == model.vocab_classes);
    REQUIRE(ck.model.attached == PeftKind::none);
    REQUIRE_FALSE(ck.model.lora_merged);
    REQUIRE_FALSE(ck.classifier.has_value());

    REQUIRE(ck.model.registry_hash() == model.registry_hash());
    for (const auto& [name, t] : model.registry) {
        auto u = ck.model.param(name);
        REQUIRE(u->shape == t->shape);
        REQUIRE(u->values == t->values);
        REQUIRE(u->requires_grad == t->requires_grad);
    }
    REQUIRE(ck.model.tau() == model.tau());

    auto img = random_image(7, model.config.image_dim());
    REQUIRE(ck.model.encode_image(img.data())->values ==
            model.encode_image(img.data())->values);
    REQUIRE(ck.model.encode_text_batch({0, 5, 11})->values ==
            model.encode_text_batch({0, 5, 11})->values);
}

TEST_CASE("classifier state persists") {
    auto model = fresh_model();
    auto cls = init_classifier(model, {8, 9, 10});
    Rng rng(33);
    rng.fill_gaussian(cls.phi->values, 0.0, 0.1);  // past-initialization state

    const auto path = (tmp_dir() / "classifier.ckpt").string();
    save_checkpoint(path, model, &cls, "");
    auto ck = load_checkpoint(path);

    REQUIRE(ck.classifier.has_value());
    REQUIRE(ck.classifier->base_ids == cls.base_ids);
    REQUIRE(ck.classifier->phi->shape == cls.phi->shape);
    REQUIRE(ck.classifier->phi->values == cls.phi->values);
    REQUIRE(ck.classifier->phi->requires_grad == cls.phi->requires_grad);
    REQUIRE(ck.config_hash.empty());
}

TEST_CASE("adapter state persists through save and load") {
    auto model = fresh_model();
    PeftConfig cfg;
    cfg.kind = PeftKind::lora;
    cfg.lora_scale = 0.5;
    attach(model, cfg);
    Rng rng(44);
    for (auto& [name, ad] : model.lora) {
        rng.fill_gaussian(ad.a->values, 0.0, 0.05);
        rng.fill_gaussian(ad.b->values, 0.0, 0.05);
    }

    const auto path = (tmp_dir() / "lora.ckpt").string();
    save_checkpoint(path, model);
    auto ck = load_checkpoint(path);

    REQUIRE(ck.model.attached == PeftKind::lora);
    REQUIRE(ck.model.lora.size() == model.lora.size());
    for (const auto& [name, ad] : model.lora) {
        const auto& back = ck.model.lora.at(name);
        REQUIRE(back.scale == ad.scale);
        REQUIRE(back.a->values == ad.a->values);
        REQUIRE(back.b->values == ad.b->values);
        REQUIRE(back.a->requires_grad == ad.a->requires_grad);
    }
    auto img = random_image(8, model.config.image_dim());
    REQUIRE(ck.model.encode_image(img.data())->values ==
            model.encode_image(img.data())->values);
}

TEST_CASE("prompt context persists through save and load") {
    auto model = fresh_model();
    PeftConfig cfg;
    cfg.kind = PeftKind::prompt;
    cfg.prompt_ctx = 4;
    attach(model, cfg);
    Rng rng(55);
    rng.fill_gaussian(model.prompt_ctx->values, 0.0, 0.05);

    const auto path = (tmp_dir() / "prompt.ckpt").string();
    save_checkpoint(path, model);
    auto ck = load_checkpoint(path);

    REQUIRE(ck.model.attached == PeftKind::prompt);
    REQUIRE(ck.model.prompt_ctx != nullptr);
    REQUIRE(ck.model.prompt_ctx->values == model.prompt_ctx->values);
    REQUIRE(ck.model.encode_text_batch({1, 2})->values ==
            model.encode_text_batch({1, 2})->values);
}

TEST_CASE("corrupted checkpoint files are rejected before construction") {
    auto model = fresh_model();
    const auto good = tmp_dir() / "good.ckpt";
    save_checkpoint(good.string(), model);

    SECTION("missing file") {
        REQUIRE(load_error((tmp_dir() / "absent.ckpt").string()).find("cannot open") !=
                std::string::npos);
    }
    SECTION("short file") {
        const auto p = tmp_dir() / "short.ckpt";
        write_bytes(p, {'2', 'S', 'F', 'S', 'C', 'K'});
        REQUIRE(load_error(p.string()).find("truncated") != std::string::npos);
    }
    SECTION("flipped payload byte") {
        auto bytes = read_bytes(good);
        bytes[40] ^= 0xff;
        const auto p = tmp_dir() / "corrupt.ckpt";
        write_bytes(p, bytes);
        REQUIRE(load_error(p.string()).find("checksum mismatch") != std::string::npos);
    }
    SECTION("truncated tail") {
        auto bytes = read_bytes(good);
        bytes.resize(bytes.size() / 2);
        const auto p = tmp_dir() / "tail.ckpt";
        write_bytes(p, bytes);
        REQUIRE_THROWS_AS(load_checkpoint(p.string()), format_error);
    }
    SECTION("wrong magic") {
        const auto p = tmp_dir() / "notckpt.bin";
        save_dataset(p.string(), *tiny_universe());
        REQUIRE(load_error(p.string()).find("bad magic") != std::string::npos);
    }
    SECTION("future version") {
        detail::ByteWriter payload;
        payload.str("");
        const auto p = tmp_dir() / "future.ckpt";
        detail::write_frame(p.string(), CHECKPOINT_MAGIC, CHECKPOINT_VERSION + 1, payload);
        const auto msg = load_error(p.string());
        REQUIRE(msg.find("unsupported version 2") != std::string::npos);
        REQUIRE(msg.find("reads version 1") != std::string::npos);
    }
}

TEST_CASE("dataset files round trip with their task") {
    auto uni = tiny_universe();
    auto task = make_task(uni, split_base_novel({8, 9, 10, 11}), 4, 8, 17);
    const auto path = (tmp_dir() / "data.bin").string();
    save_dataset(path, *uni, &task, "feedc0de00000000");

    auto ds = load_dataset(path);
    REQUIRE(ds.config_hash == "feedc0de00000000");
    REQUIRE(ds.universe->config.classes == uni->config.classes);
    REQUIRE(ds.universe->config.seed == uni->config.seed);
    REQUIRE(ds.universe->prototypes == uni->prototypes);
    REQUIRE(ds.universe->render == uni->render);
    REQUIRE(ds.universe->samples == uni->samples);

    REQUIRE(ds.task.has_value());
    REQUIRE(ds.task->base_ids == task.base_ids);
    REQUIRE(ds.task->novel_ids == task.novel_ids);
    REQUIRE(ds.task->shots_per_class == task.shots_per_class);
    REQUIRE(ds.task->eval_per_class == task.eval_per_class);
    REQUIRE(ds.task->seed == task.seed);
    REQUIRE(ds.task->shots.size() == task.shots.size());
    for (std::size_t i = 0; i < task.shots.size(); ++i) {
        REQUIRE(ds.task->shots[i].class_id == task.shots[i].class_id);
        REQUIRE(ds.task->shots[i].sample_index == task.shots[i].sample_index);
    }
    for (std::size_t i = 0; i < task.base_eval.size(); ++i) {
        REQUIRE(ds.task->base_eval[i].class_id == task.base_eval[i].class_id);
        REQUIRE(ds.task->base_eval[i].sample_index == task.base_eval[i].sample_index);
    }
    for (std::size_t i = 0; i < task.novel_eval.size(); ++i) {
        REQUIRE(ds.task->novel_eval[i].class_id == task.novel_eval[i].class_id);
        REQUIRE(ds.task->novel_eval[i].sample_index == task.novel_eval[i].sample_index);
    }

    // Without a task the file loads with none attached.
    const auto bare = (tmp_dir() / "bare.bin").string();
    save_dataset(bare, *uni);
    auto plain = load_dataset(bare);
    REQUIRE_FALSE(plain.task.has_value());
    REQUIRE(plain.universe->samples == uni->samples);
}

TEST_CASE("dataset corruption is rejected") {
    auto uni = tiny_universe();
    const auto good = tmp_dir() / "gooddata.bin";
    save_dataset(good.string(), *uni);

    auto bytes = read_bytes(good);
    bytes[bytes.size() / 2] ^= 0x01;
    const auto p = tmp_dir() / "baddata.bin";
    write_bytes(p, bytes);
    REQUIRE_THROWS_AS(load_dataset(p.string()), format_error);

    // A checkpoint is not a dataset.
    auto model = fresh_model();
    const auto ck = tmp_dir() / "model2.ckpt";
    save_checkpoint(ck.string(), model);
    REQUIRE_THROWS_AS(load_dataset(ck.string()), format_error);
}
