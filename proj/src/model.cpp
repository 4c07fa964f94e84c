#include "hitt/model.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "hitt/errors.hpp"
#include "hitt/random.hpp"

namespace hitt {
namespace {

Tensor fan_in_conv(std::vector<int> shape, Rng& rng) {
    const float fan =
        float(shape[1]) * float(shape[2]) * float(shape[3]);
    return Tensor::random_normal(std::move(shape), rng,
                                 1.0f / std::sqrt(fan), 0.0f,
                                 /*requires_grad=*/true);
}

Tensor fan_in_mat(std::vector<int> shape, Rng& rng) {
    const float fan = float(shape[0]);
    return Tensor::random_normal(std::move(shape), rng,
                                 1.0f / std::sqrt(fan), 0.0f,
                                 /*requires_grad=*/true);
}

Tensor zero_param(std::vector<int> shape) {
    return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
}

Tensor scaled_identity(int n, float v) {
    Tensor t = Tensor::zeros({n, n}, /*requires_grad=*/true);
    for (int i = 0; i < n; ++i) {
        t.data()[i * n + i] = v;
    }
    return t;
}

} // namespace

void validate_model_config(const ModelConfig& config) {
    if (config.channels < 4) {
        throw ConfigError("model config: channel width must be at least 4");
    }
    if (config.variant != "hitt" && config.variant != "baseline") {
        throw ConfigError("model config: unknown variant '" +
                          config.variant + "'");
    }
    if (config.multi_scale && config.variant != "hitt") {
        throw ConfigError(
            "model config: multi_scale requires the token variant");
    }
    if (config.tasks.empty()) {
        throw ConfigError("model config: need at least one task");
    }
    for (const ModelTask& task : config.tasks) {
        if (task.channels < 2) {
            throw ConfigError(
                "model config: every task needs at least two channels");
        }
    }
    for (std::size_t i = 0; i < config.tasks.size(); ++i) {
        for (std::size_t j = i + 1; j < config.tasks.size(); ++j) {
            if (config.tasks[i].kind == config.tasks[j].kind) {
                throw ConfigError(std::string("model config: duplicate ") +
                                  task_kind_name(config.tasks[i].kind) +
                                  " task");
            }
        }
    }
}

nlohmann::json model_config_to_json(const ModelConfig& config) {
    nlohmann::json tasks = nlohmann::json::array();
    for (const ModelTask& task : config.tasks) {
        tasks.push_back({{"kind", task_kind_name(task.kind)},
                         {"channels", task.channels}});
    }
    return nlohmann::json{{"channels", config.channels},
                          {"variant", config.variant},
                          {"multi_scale", config.multi_scale},
                          {"seed", config.seed},
                          {"tasks", tasks}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig config;
    try {
        config.channels = j.at("channels").get<int>();
        config.variant = j.at("variant").get<std::string>();
        config.multi_scale = j.at("multi_scale").get<bool>();
        config.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& t : j.at("tasks")) {
            ModelTask task;
            task.kind = task_kind_from_name(t.at("kind").get<std::string>());
            task.channels = t.at("channels").get<int>();
            config.tasks.push_back(task);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model config: ") + e.what());
    }
    validate_model_config(config);
    return config;
}

Model::Model(const ModelConfig& config) : config_(config) {
    validate_model_config(config_);
    Rng rng(config_.seed);
    const int c = config_.channels;
    const int t = static_cast<int>(config_.tasks.size());

    auto reg = [&](const std::string& name, const Tensor& tensor) {
        registry_.emplace_back(name, tensor);
    };

    const int enc_in[3] = {3, c, c};
    for (int b = 0; b < 3; ++b) {
        enc_w_.push_back(fan_in_conv({c, enc_in[b], 3, 3}, rng));
        enc_b_.push_back(zero_param({c}));
        const std::string stem = "encoder." + std::to_string(b + 1);
        reg(stem + ".w", enc_w_.back());
        reg(stem + ".b", enc_b_.back());
    }

    if (config_.variant == "hitt") {
        tokens_.task_count = t;
        tokens_.channels = c;
        attn_.affinity_wq = fan_in_mat({c, c}, rng);
        attn_.affinity_wk = fan_in_mat({c, c}, rng);
        reg("affinity.wq", attn_.affinity_wq);
        reg("affinity.wk", attn_.affinity_wk);

        for (int i = 0; i < t; ++i) {
            const std::string stem = "task" + std::to_string(i);
            const int cp = config_.tasks[static_cast<std::size_t>(i)]
                               .channels;

            tokens_.theta.push_back(Tensor::random_normal(
                {1, c}, rng, 0.02f, 0.0f, /*requires_grad=*/true));
            reg(stem + ".token", tokens_.theta.back());
            if (config_.multi_scale) {
                // Start at the single-scale equivalent: identity into each
                // scale, averaged back out of them.
                tokens_.to_scale.push_back(
                    {scaled_identity(c, 1.0f), scaled_identity(c, 1.0f)});
                tokens_.from_scale.push_back(
                    {scaled_identity(c, 0.5f), scaled_identity(c, 0.5f)});
                for (int s = 0; s < 2; ++s) {
                    reg(stem + ".to_scale" + std::to_string(s),
                        tokens_.to_scale.back()[static_cast<std::size_t>(
                            s)]);
                    reg(stem + ".from_scale" + std::to_string(s),
                        tokens_.from_scale.back()[static_cast<std::size_t>(
                            s)]);
                }
            }

            TaskAttentionParams task;
            task.extract_w = fan_in_conv({c, c, 1, 1}, rng);
            task.extract_b = zero_param({c});
            task.wq = fan_in_mat({c, c}, rng);
            task.wk = fan_in_mat({c, c}, rng);
            task.wv = fan_in_mat({c, c}, rng);
            task.wo = fan_in_mat({c, c}, rng);
            reg(stem + ".extract.w", task.extract_w);
            reg(stem + ".extract.b", task.extract_b);
            reg(stem + ".attn.wq", task.wq);
            reg(stem + ".attn.wk", task.wk);
            reg(stem + ".attn.wv", task.wv);
            reg(stem + ".attn.wo", task.wo);
            if (config_.multi_scale) {
                task.fuse_w = fan_in_conv({c, 2 * c, 1, 1}, rng);
                task.fuse_b = zero_param({c});
                reg(stem + ".fuse.w", task.fuse_w);
                reg(stem + ".fuse.b", task.fuse_b);
            }
            attn_.task.push_back(std::move(task));

            head_w_.push_back(fan_in_conv({cp, c, 1, 1}, rng));
            head_b_.push_back(zero_param({cp}));
            reg(stem + ".head.w", head_w_.back());
            reg(stem + ".head.b", head_b_.back());

            FineGrainedTaskParams fg;
            fg.oe_proj = Tensor::random_normal({cp, c}, rng, 0.02f, 0.0f,
                                               /*requires_grad=*/true);
            fg.mlp_w1 = fan_in_mat({c, c}, rng);
            fg.mlp_b1 = zero_param({c});
            fg.mlp_w2 = fan_in_mat({c, c}, rng);
            fg.mlp_b2 = zero_param({c});
            fg.proj = fan_in_mat({c, cp}, rng);
            fg.refine_w = fan_in_conv({cp, cp, 3, 3}, rng);
            fg.refine_b = zero_param({cp});
            reg(stem + ".fg.oe_proj", fg.oe_proj);
            reg(stem + ".fg.mlp1.w", fg.mlp_w1);
            reg(stem + ".fg.mlp1.b", fg.mlp_b1);
            reg(stem + ".fg.mlp2.w", fg.mlp_w2);
            reg(stem + ".fg.mlp2.b", fg.mlp_b2);
            reg(stem + ".fg.proj", fg.proj);
            reg(stem + ".fg.refine.w", fg.refine_w);
            reg(stem + ".fg.refine.b", fg.refine_b);
            fg_.push_back(std::move(fg));

            oe_.push_back(build_orthogonal_embeddings(cp));
        }
    } else {
        for (int i = 0; i < t; ++i) {
            const std::string stem = "task" + std::to_string(i);
            const int cp = config_.tasks[static_cast<std::size_t>(i)]
                               .channels;
            extract_w_.push_back(fan_in_conv({c, c, 1, 1}, rng));
            extract_b_.push_back(zero_param({c}));
            head_w_.push_back(fan_in_conv({cp, c, 1, 1}, rng));
            head_b_.push_back(zero_param({cp}));
            refine_w_.push_back(fan_in_conv({cp, cp, 3, 3}, rng));
            refine_b_.push_back(zero_param({cp}));
            reg(stem + ".extract.w", extract_w_.back());
            reg(stem + ".extract.b", extract_b_.back());
            reg(stem + ".head.w", head_w_.back());
            reg(stem + ".head.b", head_b_.back());
            reg(stem + ".refine.w", refine_w_.back());
            reg(stem + ".refine.b", refine_b_.back());
        }
    }
}

int Model::prediction_stride() const {
    // Three stride-2 blocks; the two-scale path fuses at the second block's
    // resolution.
    return config_.multi_scale ? 4 : 8;
}

ForwardResult Model::forward(const Tensor& image) const {
    if (image.rank() != 3 || image.dim(0) != 3) {
        throw ShapeError("model forward: expected a [3, H, W] image, got " +
                         shape_str(image.shape()));
    }
    Tensor e1 = relu(conv2d(image, enc_w_[0], enc_b_[0], 2));
    Tensor e2 = relu(conv2d(e1, enc_w_[1], enc_b_[1], 2));
    Tensor e3 = relu(conv2d(e2, enc_w_[2], enc_b_[2], 2));

    ForwardResult out;
    const std::size_t t = config_.tasks.size();
    if (config_.variant == "hitt") {
        const GlobalLearnResult learned =
            config_.multi_scale
                ? multiscale_global_learning(e2, e3, tokens_, attn_)
                : global_token_learning(e3, tokens_, attn_);
        out.features = learned.features;
        out.tokens = learned.theta;
        out.affinity = learned.affinity;
        for (std::size_t i = 0; i < t; ++i) {
            Tensor base =
                conv2d(learned.features[i], head_w_[i], head_b_[i]);
            Tensor phi =
                project_finegrained(learned.theta[i], oe_[i], fg_[i]);
            out.logits.push_back(refine_logits(base, phi, fg_[i]));
        }
    } else {
        for (std::size_t i = 0; i < t; ++i) {
            Tensor feature =
                relu(conv2d(e3, extract_w_[i], extract_b_[i]));
            Tensor base = conv2d(feature, head_w_[i], head_b_[i]);
            out.logits.push_back(
                conv2d(base, refine_w_[i], refine_b_[i]));
            out.features.push_back(feature);
        }
    }
    return out;
}

void Model::save(const std::string& dir) const {
    std::filesystem::create_directories(dir);
    write_named_tensors(dir + "/weights.httc", registry_);
    std::ofstream out(dir + "/model.json");
    if (!out) {
        throw StateError("model save: cannot write to " + dir);
    }
    out << model_config_to_json(config_).dump(2) << "\n";
}

Model Model::load(const std::string& dir) {
    std::ifstream in(dir + "/model.json");
    if (!in) {
        throw StateError("model load: no model.json in " + dir);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("model load: ") + e.what());
    }
    Model model(model_config_from_json(j));

    const NamedTensors stored = read_named_tensors(dir + "/weights.httc");
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : stored) {
        by_name[name] = &tensor;
    }
    if (stored.size() != model.registry_.size()) {
        throw FormatError("model load: checkpoint has " +
                          std::to_string(stored.size()) + " entries, the "
                          "configured model has " +
                          std::to_string(model.registry_.size()));
    }
    for (auto& [name, param] : model.registry_) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw FormatError("model load: checkpoint is missing '" + name +
                              "'");
        }
        if (it->second->shape() != param.shape()) {
            throw FormatError("model load: '" + name + "' has shape " +
                              shape_str(it->second->shape()) +
                              ", expected " + shape_str(param.shape()));
        }
        std::copy(it->second->values().begin(), it->second->values().end(),
                  param.data());
    }
    return model;
}

std::string checkpoint_hash(const std::string& dir) {
    return file_content_hash(dir + "/weights.httc");
}

} // namespace hitt
