#pragma once
// Partial supervision over multiple dense tasks. Labeled tasks train
// against ground truth; unlabeled tasks train against a frozen first-stage
// model through two channels: feature consistency weighted by a per-pixel
// confidence mask, and hard pseudo labels kept only where the frozen
// model's confidence clears a per-task threshold.

#include <cstdint>
#include <string>
#include <vector>

#include "hitt/quantization.hpp"
#include "hitt/synthetic.hpp"
#include "hitt/tensor.hpp"

namespace hitt {

// Per-pixel confidence in (0,1): sigmoid of the dot product between the
// task token [1, C] and each feature column of [C, h, w]. Differentiable,
// so losses weighted by the mask also shape the token.
Tensor feature_confidence_mask(const Tensor& theta, const Tensor& feature);

// One task's feature-consistency term against the saved map: plain MSE
// when labeled, confidence-weighted MSE when unlabeled. An empty saved
// tensor contributes zero (no reference features exist for this task).
Tensor feature_loss(const Tensor& current, const Tensor& saved,
                    const Tensor& mask, bool labeled);

// Mean of the per-task feature losses.
Tensor feature_loss_total(const std::vector<Tensor>& current,
                          const std::vector<Tensor>& saved,
                          const std::vector<Tensor>& masks,
                          const std::vector<std::uint8_t>& alphas);

// Hard labels read off a frozen model's refined logits.
struct PseudoLabels {
    int height = 0;
    int width = 0;
    std::vector<int> labels;         // per-pixel argmax channel
    std::vector<std::uint8_t> mask;  // top softmax strictly above tau
};

// Argmax class per pixel (ties to the lowest index) plus the confidence
// mask; tau must lie in (0, 1).
PseudoLabels discover_pseudo_labels(const Tensor& logits, float tau);

// Cross-entropy against pseudo labels, averaged over mask-true pixels.
// Zero for labeled tasks, absent or all-masked-out labels, or pixels whose
// label is invalid.
Tensor pseudo_label_loss(const Tensor& logits, const PseudoLabels& pseudo,
                         bool labeled, const QuantizationSpec& spec);

// Mean over tasks of the pseudo-label losses (labeled tasks contribute 0).
Tensor pseudo_label_loss_total(const std::vector<Tensor>& logits,
                               const std::vector<PseudoLabels>& pseudo,
                               const std::vector<std::uint8_t>& alphas,
                               const std::vector<QuantizationSpec>& specs);

// Ground truth for one task at the prediction resolution. Semseg uses
// `classes` (255 = ignore); depth and normals use the continuous `values`
// map, quantized internally.
struct TaskTarget {
    std::vector<int> classes;
    Tensor values;
};

// Mean over tasks of alpha-gated mixture losses against ground truth.
// Rejects samples with no labeled task at all.
Tensor supervised_loss(const std::vector<Tensor>& logits,
                       const std::vector<TaskTarget>& targets,
                       const std::vector<std::uint8_t>& alphas,
                       const std::vector<QuantizationSpec>& specs);

// Unweighted sum of the three objective terms; rejects non-finite inputs.
Tensor total_loss(const Tensor& supervised, const Tensor& pseudo,
                  const Tensor& feature);

// Realign saved pseudo labels to an augmented crop. Stride divides the
// full-resolution record down to the label grid.
PseudoLabels transform_pseudo(const PseudoLabels& pseudo,
                              const TransformRecord& record, int stride);

// Bin remap for horizontally flipped normal pseudo labels: each center maps
// to the nearest center of its x-mirrored vector (ties to the lowest index).
std::vector<int> mirror_normal_bins(const std::vector<int>& labels,
                                    const QuantizationSpec& spec);

// Frozen first-stage outputs for one sample, saved at prediction resolution
// on the unaugmented image. `record` realigns the maps to training crops
// and is identity at save time.
struct BundleSample {
    std::vector<Tensor> features;      // per task
    std::vector<PseudoLabels> pseudo;  // per task; empty when labeled
    std::vector<std::uint8_t> alpha;   // 1 = ground truth available
    TransformRecord record;
};

struct PseudoBundle {
    std::vector<BundleSample> samples;
    std::vector<float> tau;         // per-task thresholds used at discovery
    std::string checkpoint_hash;    // fingerprint of the frozen weights
};

void save_bundle(const std::string& dir, const PseudoBundle& bundle);
PseudoBundle load_bundle(const std::string& dir);

}  // namespace hitt
