#pragma once
// Two-stage training over partially annotated scenes. Stage one fits the
// model to whatever ground truth each sample carries. The frozen result
// then labels the training set offline: per-task features plus thresholded
// hard labels for every task a sample lacks. Stage two retrains from
// scratch against ground truth, pseudo labels, and feature consistency
// together, re-aligning the saved maps to every augmented crop.
// Evaluation decodes predictions back to continuous maps and reports the
// standard per-task metrics plus the cross-task improvement percentage.

#include <cstdint>
#include <string>
#include <vector>

#include "hitt/metrics.hpp"
#include "hitt/model.hpp"
#include "hitt/quantization.hpp"
#include "hitt/supervision.hpp"
#include "hitt/synthetic.hpp"

namespace hitt {

// Gradient descent with momentum and a fixed two-step decay schedule.
struct TrainConfig {
    int epochs = 60;
    float lr = 0.05f;
    float momentum = 0.9f;
    bool augment = false;  // random stride-aligned crop + horizontal flip
    int crop = 0;          // crop size in pixels; 0 = full frame (flip only)
    std::uint64_t seed = 0;
};

void validate_train_config(const TrainConfig& config);

// Learning rate for a 1-based epoch: halved after 60% and again after 85%
// of the epoch budget.
float scheduled_lr(const TrainConfig& config, int epoch);

// Per-epoch averages of the three objective terms.
struct LossRow {
    int epoch = 0;
    double supervised = 0.0;
    double pseudo = 0.0;
    double feature = 0.0;
    double total = 0.0;
};

struct TrainResult {
    Model model;
    std::vector<LossRow> curve;
};

// Quantization for each model task: plain classes for segmentation, log
// bins over the scene depth range, k-means centers fitted on normals
// sampled from the dataset. Rejects channel counts that disagree with the
// scene class count.
std::vector<QuantizationSpec> build_task_specs(const PartialDataset& data,
                                               const SceneConfig& scene_config,
                                               const ModelConfig& model_config,
                                               std::uint64_t seed);

// Fit a fresh model to the labeled tasks only. Deterministic for a fixed
// pair of model and train seeds; throws NumericalError if any step's loss
// turns non-finite.
TrainResult train_stage1(const PartialDataset& data,
                         const std::vector<QuantizationSpec>& specs,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config);

// Label the training set with a frozen model: forward each clean image,
// keep the per-task feature maps for every task, and keep thresholded hard
// labels for the tasks the sample has no ground truth for. tau holds one
// confidence threshold per task.
PseudoBundle discover_bundle(const Model& model, const PartialDataset& data,
                             const std::vector<float>& tau,
                             const std::string& checkpoint_hash);

// Retrain from scratch against ground truth plus the bundle's pseudo labels
// and feature maps. Augmented crops re-align the saved maps through the
// same transform record; flips remap normal bins to their mirrored centers.
// The bundle must cover every training sample with matching label masks.
TrainResult train_stage2(const PartialDataset& data,
                         const PseudoBundle& bundle,
                         const std::vector<QuantizationSpec>& specs,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config);

struct EvalOptions {
    std::string setting;
    std::string stage;
    std::uint64_t seed = 0;
    // Compare at the model's output grid against center-pixel labels
    // instead of upsampling predictions to full resolution.
    bool at_prediction_grid = false;
};

// Score a frozen model over scenes: segmentation overlap, decoded depth
// error, decoded normal angle statistics. Full-resolution scoring repeats
// each output cell over its stride block, so scene dimensions must be
// multiples of the model's prediction stride.
MetricsReport evaluate_model(const Model& model,
                             const std::vector<Scene>& scenes,
                             const std::vector<QuantizationSpec>& specs,
                             const EvalOptions& options);

// Copy the baseline's scores for the chosen metrics into the report and
// fill in the relative-improvement percentage.
MetricsReport attach_baseline(MetricsReport multi, const MetricsReport& single,
                              const std::vector<MetricDirection>& metrics);

// CSV with one row per epoch: epoch, supervised, pseudo, feature, total.
void write_loss_csv(const std::string& path,
                    const std::vector<LossRow>& curve);

// CSV with one metric per row; baseline scores appear as baseline.<metric>
// rows and the improvement percentage as a delta_mtl row when present.
void write_metrics_csv(const std::string& path, const MetricsReport& report);

// Worker count for discovery/evaluation: HITT_THREADS when set (min 1),
// otherwise 1. Results are identical for any worker count.
int worker_threads();

} // namespace hitt
