#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "hitt/errors.hpp"
#include "hitt/model.hpp"
#include "hitt/random.hpp"
#include "hitt/tensor.hpp"
#include "testutil.hpp"

using namespace hitt;
using testutil::rand_tensor;

namespace {

ModelConfig small_config(const std::string& variant, bool multi_scale) {
    ModelConfig config;
    config.channels = 8;
    config.variant = variant;
    config.multi_scale = multi_scale;
    config.seed = 3;
    config.tasks = {{TaskKind::semseg, 4},
                    {TaskKind::depth, 5},
                    {TaskKind::normal, 6}};
    return config;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

} // namespace

TEST_CASE("token-path forward produces per-task maps at stride 8") {
    const Model model(small_config("hitt", false));
    CHECK(model.prediction_stride() == 8);
    Rng rng(1);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    const ForwardResult out = model.forward(image);
    REQUIRE(out.logits.size() == 3);
    CHECK(out.logits[0].shape() == std::vector<int>{4, 4, 4});
    CHECK(out.logits[1].shape() == std::vector<int>{5, 4, 4});
    CHECK(out.logits[2].shape() == std::vector<int>{6, 4, 4});
    REQUIRE(out.features.size() == 3);
    CHECK(out.features[0].shape() == std::vector<int>{8, 4, 4});
    REQUIRE(out.tokens.size() == 3);
    CHECK(out.tokens[0].shape() == std::vector<int>{1, 8});
    CHECK(out.affinity.shape() == std::vector<int>{3, 3});

    CHECK_THROWS_AS(model.forward(rand_tensor({1, 32, 32}, rng)),
                    ShapeError);
}

TEST_CASE("two-scale forward fuses at the finer tap") {
    const Model model(small_config("hitt", true));
    CHECK(model.prediction_stride() == 4);
    Rng rng(2);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    const ForwardResult out = model.forward(image);
    CHECK(out.logits[0].shape() == std::vector<int>{4, 8, 8});
    CHECK(out.features[1].shape() == std::vector<int>{8, 8, 8});
    CHECK(out.affinity.shape() == std::vector<int>{3, 3});
}

TEST_CASE("token-free forward has no tokens or affinity") {
    const Model model(small_config("baseline", false));
    CHECK(model.prediction_stride() == 8);
    Rng rng(3);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    const ForwardResult out = model.forward(image);
    REQUIRE(out.logits.size() == 3);
    CHECK(out.logits[2].shape() == std::vector<int>{6, 4, 4});
    CHECK(out.features[0].shape() == std::vector<int>{8, 4, 4});
    CHECK(out.tokens.empty());
    CHECK_FALSE(out.affinity.defined());

    for (const auto& [name, tensor] : model.params()) {
        CHECK(name.find("token") == std::string::npos);
        CHECK(name.find("affinity") == std::string::npos);
        CHECK(name.find(".fg.") == std::string::npos);
    }
}

TEST_CASE("identical seeds build identical models") {
    const Model a(small_config("hitt", false));
    const Model b(small_config("hitt", false));
    REQUIRE(a.params().size() == b.params().size());
    for (std::size_t i = 0; i < a.params().size(); ++i) {
        CHECK(a.params()[i].first == b.params()[i].first);
        CHECK(tensors_equal(a.params()[i].second, b.params()[i].second));
    }

    Rng rng(4);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    CHECK(tensors_equal(a.forward(image).logits[0],
                        b.forward(image).logits[0]));

    ModelConfig other = small_config("hitt", false);
    other.seed = 4;
    const Model c(other);
    CHECK_FALSE(tensors_equal(a.params()[6].second, c.params()[6].second));
}

TEST_CASE("parameter names are unique and stable") {
    const Model model(small_config("hitt", true));
    std::set<std::string> names;
    for (const auto& [name, tensor] : model.params()) {
        CHECK(names.insert(name).second);
        CHECK(tensor.requires_grad());
    }
    // 6 encoder + 2 affinity + 3 tasks x (1 token + 4 scale projections +
    // 6 extract/attention + 2 fuse + 2 head + 8 fine-grained).
    CHECK(model.params().size() == 6 + 2 + 3 * 23);
}

TEST_CASE("every parameter receives a finite gradient") {
    const Model model(small_config("hitt", false));
    Rng rng(5);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    {
        GradientTape tape;
        const ForwardResult out = model.forward(image);
        Tensor loss = Tensor::zeros({1});
        for (const Tensor& logits : out.logits) {
            loss = add(loss, mean(mul(logits, logits)));
        }
        tape.backward(loss);
    }
    for (const auto& [name, param] : model.params()) {
        INFO("parameter ", name);
        REQUIRE(param.has_grad());
        double norm = 0.0;
        for (std::size_t i = 0; i < param.numel(); ++i) {
            const float g = param.grad_values()[i];
            REQUIRE(std::isfinite(g));
            norm += double(g) * g;
        }
        CHECK(norm > 0.0);
    }
}

TEST_CASE("registry handles alias the live weights") {
    Model model(small_config("hitt", false));
    Rng rng(6);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    const float before = model.forward(image).logits[0].values()[0];

    for (const auto& [name, param] : model.params()) {
        if (name == "task0.head.b") {
            Tensor handle = param;
            for (std::size_t i = 0; i < handle.numel(); ++i) {
                handle.data()[i] += 1.0f;
            }
        }
    }
    const float after = model.forward(image).logits[0].values()[0];
    CHECK(before != after);
}

TEST_CASE("checkpoints round trip bit for bit") {
    const std::string dir = "model_roundtrip_tmp";
    std::filesystem::remove_all(dir);

    const Model model(small_config("hitt", true));
    model.save(dir);
    const Model back = Model::load(dir);

    REQUIRE(back.params().size() == model.params().size());
    for (std::size_t i = 0; i < model.params().size(); ++i) {
        CHECK(back.params()[i].first == model.params()[i].first);
        CHECK(tensors_equal(back.params()[i].second,
                            model.params()[i].second));
    }
    Rng rng(7);
    Tensor image = rand_tensor({3, 32, 32}, rng, 0.0f, 1.0f, false);
    CHECK(tensors_equal(model.forward(image).logits[1],
                        back.forward(image).logits[1]));
    CHECK_FALSE(checkpoint_hash(dir).empty());

    std::filesystem::remove_all(dir);
    CHECK_THROWS_AS(Model::load(dir), StateError);
}

TEST_CASE("corrupted checkpoints are rejected by name and shape") {
    const std::string dir = "model_corrupt_tmp";
    std::filesystem::remove_all(dir);
    const Model model(small_config("baseline", false));
    model.save(dir);

    NamedTensors stored = read_named_tensors(dir + "/weights.httc");
    NamedTensors renamed = stored;
    renamed[0].first = "not.a.parameter";
    write_named_tensors(dir + "/weights.httc", renamed);
    CHECK_THROWS_AS(Model::load(dir), FormatError);

    NamedTensors reshaped = stored;
    reshaped[0].second = Tensor::zeros({1, 2, 3});
    write_named_tensors(dir + "/weights.httc", reshaped);
    CHECK_THROWS_AS(Model::load(dir), FormatError);

    NamedTensors truncated(stored.begin(), stored.end() - 1);
    write_named_tensors(dir + "/weights.httc", truncated);
    CHECK_THROWS_AS(Model::load(dir), FormatError);

    std::filesystem::remove_all(dir);
}

TEST_CASE("model configs are validated and serialize") {
    ModelConfig config = small_config("hitt", false);
    const ModelConfig back =
        model_config_from_json(model_config_to_json(config));
    CHECK(back.channels == config.channels);
    CHECK(back.variant == config.variant);
    CHECK(back.seed == config.seed);
    REQUIRE(back.tasks.size() == 3);
    CHECK(back.tasks[1].kind == TaskKind::depth);
    CHECK(back.tasks[1].channels == 5);

    config.variant = "transformer";
    CHECK_THROWS_AS(validate_model_config(config), ConfigError);
    config = small_config("baseline", false);
    config.multi_scale = true;
    CHECK_THROWS_AS(validate_model_config(config), ConfigError);
    config = small_config("hitt", false);
    config.tasks.clear();
    CHECK_THROWS_AS(validate_model_config(config), ConfigError);
    config = small_config("hitt", false);
    config.tasks[1].kind = TaskKind::semseg;
    CHECK_THROWS_AS(validate_model_config(config), ConfigError);
    config = small_config("hitt", false);
    config.tasks[0].channels = 1;
    CHECK_THROWS_AS(validate_model_config(config), ConfigError);
}
