#pragma once
// One JSON document drives a whole experiment: scene generation, the label
// split, model shape, optimization, discovery thresholds, and the artifact
// directories the commands hand to each other. Parsing is strict - any key
// the schema does not know is rejected by its full dotted path - so typos
// fail fast instead of silently falling back to defaults.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "hitt/model.hpp"
#include "hitt/pipeline.hpp"
#include "hitt/synthetic.hpp"

namespace hitt {

struct ExperimentConfig {
    // dataset
    SceneConfig scene;
    int train_count = 24;
    int test_count = 8;
    SplitSetting setting = SplitSetting::one_label;
    int few_shot_task = 0;
    int few_shot_count = 0;
    std::uint64_t dataset_seed = 1;

    // model (task channels resolve to: classes / depth_bins / normal_centers)
    ModelConfig model;
    int depth_bins = 10;
    int normal_centers = 6;

    // training (applies to both training stages)
    TrainConfig training;

    // discovery: one confidence threshold per task, aligned with model.tasks
    std::vector<float> tau;

    // report: score improvements on every metric instead of one per task
    bool full_metric_set = false;

    // artifact directories
    std::string dataset_path;
    std::string stage1_path;
    std::string bundle_path;
    std::string stage2_path;
};

// Desk-scale defaults: 64x64 scenes, 4 classes, 24 train / 8 test samples,
// one labeled task per sample, a 32-channel token model over all three
// tasks, and thresholds 0.9 / 0.45 / 0.6 for semseg / depth / normal.
ExperimentConfig default_experiment();

// Strict parse over the default experiment: every present key overrides the
// default, every unknown key throws ConfigError naming its dotted path, and
// the result is validated end to end.
ExperimentConfig experiment_from_json(const nlohmann::json& j);

// Reads and parses the file; unreadable or malformed files throw
// ConfigError.
ExperimentConfig load_experiment_config(const std::string& path);

void validate_experiment(const ExperimentConfig& config);

} // namespace hitt
