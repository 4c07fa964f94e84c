#pragma once
// The desk-scale multi-task network. A three-block strided encoder is
// shared by every task; decoding either runs the token pathway (per-task
// global tokens with inter/intra attention and fine-grained refinement) or
// a plain token-free head stack that serves as the comparison baseline.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hitt/finegrained.hpp"
#include "hitt/quantization.hpp"
#include "hitt/tensor.hpp"
#include "hitt/tensor_io.hpp"
#include "hitt/token_attention.hpp"

namespace hitt {

// One prediction task: its kind and head width C_p.
struct ModelTask {
    TaskKind kind = TaskKind::semseg;
    int channels = 0;
};

struct ModelConfig {
    int channels = 32;             // shared channel width C
    std::string variant = "hitt";  // "hitt" or "baseline" (token-free)
    bool multi_scale = false;      // two-scale token learning (hitt only)
    std::uint64_t seed = 0;        // parameter initialization stream
    std::vector<ModelTask> tasks;
};

void validate_model_config(const ModelConfig& config);
nlohmann::json model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(const nlohmann::json& j);

// One forward pass's per-task outputs.
struct ForwardResult {
    std::vector<Tensor> logits;    // [C_p, h, w] refined prediction logits
    std::vector<Tensor> features;  // [C, h, w] final task features
    std::vector<Tensor> tokens;    // [1, C] final task tokens (token path)
    Tensor affinity;               // [T, T] cross-task weights (token path)
};

class Model {
public:
    explicit Model(const ModelConfig& config);
    Model(Model&&) = default;
    Model& operator=(Model&&) = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const ModelConfig& config() const { return config_; }

    // Spatial downscale from the input image to the prediction maps.
    int prediction_stride() const;

    // Differentiable while a gradient tape is active.
    ForwardResult forward(const Tensor& image) const;

    // Trainable parameters, stably ordered and name-qualified. The handles
    // alias the live weights: writing through them changes the model.
    const NamedTensors& params() const { return registry_; }

    // Directory layout: weights.httc (binary tensors) + model.json.
    void save(const std::string& dir) const;
    static Model load(const std::string& dir);

private:
    ModelConfig config_;
    std::vector<Tensor> enc_w_, enc_b_;

    // Token pathway.
    TaskTokenSet tokens_;
    AttentionParams attn_;
    std::vector<FineGrainedTaskParams> fg_;
    std::vector<Tensor> oe_;  // fixed orthogonal bases, not trained

    // Token-free pathway.
    std::vector<Tensor> extract_w_, extract_b_;
    std::vector<Tensor> refine_w_, refine_b_;

    // Both pathways.
    std::vector<Tensor> head_w_, head_b_;

    NamedTensors registry_;
};

// Content hash of a saved model's weight file, for run logs and bundles.
std::string checkpoint_hash(const std::string& dir);

}  // namespace hitt
