#pragma once
// Discrete quantization of regression targets. Depth values map into
// logarithmic bins, surface normals into k-means cluster centers on the unit
// sphere; classification heads then predict bin/center indices, and a
// soft-weighted sum over the centers decodes a continuous value back out.
// The mixture loss couples that classification with a small regression term
// on the decoded value.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hitt/tensor.hpp"

namespace hitt {

enum class TaskKind { semseg, depth, normal };

const char* task_kind_name(TaskKind kind);
TaskKind task_kind_from_name(const std::string& name);

// How one task's continuous labels become prediction channels and back.
struct QuantizationSpec {
    TaskKind kind = TaskKind::semseg;
    int channels = 0;          // prediction channels C_p
    std::vector<float> edges;  // depth only: channels + 1 increasing edges
    Tensor centers;            // depth: [C_p]; normal: [C_p, 3]; else empty
    float lambda = 0.0f;       // regression weight in the mixture loss
};

// Plain class-index task: no centers, no regression term.
QuantizationSpec make_semseg_spec(int num_classes);

// Log-uniform depth bins over [d_min, d_max]: edge_k = d_min *
// (d_max/d_min)^(k/n), centers at the geometric midpoint of each bin.
QuantizationSpec build_depth_bins(float d_min, float d_max, int n_bins);

// k-means over unit normal vectors [N, 3]: farthest-point init from a seeded
// start, 50 Lloyd iterations, centers renormalized to unit length after
// every update. Rejects k larger than the number of distinct inputs.
QuantizationSpec build_normal_centers(const Tensor& unit_normals, int k,
                                      std::uint64_t seed);

// Bin/center index per pixel. Depth labels [1, h, w] clamp into the edge
// range; normal labels [3, h, w] take the nearest center by cosine, ties to
// the lowest index.
std::vector<int> quantize_indices(const Tensor& label,
                                  const QuantizationSpec& spec);

// One-hot [C_p, h, w] map from a regression label.
Tensor encode_onehot(const Tensor& label, const QuantizationSpec& spec);

// One-hot map from class indices; negative or ignore (255) entries produce
// an all-zero column.
Tensor encode_onehot_classes(const std::vector<int>& classes, int h, int w,
                             const QuantizationSpec& spec);

// Continuous map from logits: per pixel the softmax-weighted sum of centers.
// Depth gives [1, h, w]; normals give [3, h, w] renormalized to unit length.
// Differentiable; rejects semseg specs.
Tensor soft_decode(const Tensor& logits, const QuantizationSpec& spec);

struct MixtureLossResult {
    Tensor value;             // scalar [1]
    bool empty_valid = false; // no valid pixel: value pinned to 0
    int valid_count = 0;
};

// Cross-entropy of the logits against the one-hot target plus lambda times
// the regression distance between decoded and raw labels (L1 for depth,
// 1 - cosine for normals), both averaged over valid pixels. `valid` holds
// one flag per pixel; an empty vector means every pixel counts.
MixtureLossResult mixture_loss(const Tensor& logits, const Tensor& decoded,
                               const Tensor& target, const Tensor& onehot,
                               const QuantizationSpec& spec,
                               const std::vector<std::uint8_t>& valid);

nlohmann::json quantization_to_json(const QuantizationSpec& spec);
QuantizationSpec quantization_from_json(const nlohmann::json& j);

} // namespace hitt
