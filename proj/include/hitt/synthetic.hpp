#pragma once
// Procedural scenes for multi-task dense prediction. Every scene is a stack
// of tilted planes (a ground plane plus a few rectangles/ellipses) rendered
// with a z-buffer, so class, depth, and surface normal all derive exactly
// from the same analytic geometry. Shading couples the image to the normals
// and a distance falloff couples it to depth, so each task is learnable from
// pixels alone. Also provides the partial-annotation splitters and the
// flip/crop augmentation with invertible transform records.

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "hitt/random.hpp"
#include "hitt/tensor.hpp"

namespace hitt {

struct SceneConfig {
    int height = 64;
    int width = 64;
    int num_classes = 4; // background class 0 + num_classes-1 object classes
    int min_objects = 2;
    int max_objects = 6;
    float d_min = 1.0f;
    float d_max = 10.0f;
    float noise = 0.02f;   // stddev of the Gaussian pixel noise
    int ignore_border = 1; // semseg ignore margin in pixels
};

// Throws ConfigError on out-of-range fields.
void validate(const SceneConfig& config);

nlohmann::json scene_config_to_json(const SceneConfig& config);
SceneConfig scene_config_from_json(const nlohmann::json& j);

// One plane z(x, y) = z0 + gx*(x - cx) + gy*(y - cy) with an extent mask.
// The ground plane covers every pixel; objects are rectangles or ellipses.
struct Surface {
    int cls = 0;
    bool ellipse = false;
    bool cover_all = false; // ground plane
    float cx = 0.0f, cy = 0.0f;
    float rx = 0.0f, ry = 0.0f; // half extents
    float gx = 0.0f, gy = 0.0f; // depth slope per pixel
    float z0 = 0.0f;            // depth at (cx, cy)
};

struct Scene {
    int height = 0;
    int width = 0;
    std::uint64_t seed = 0;
    Tensor image;            // [3, H, W] in [0, 1]
    std::vector<int> semseg; // H*W class indices, 255 on the ignore border
    Tensor depth;            // [1, H, W] within [d_min, d_max]
    Tensor normal;           // [3, H, W] unit vectors
    // Generation-time geometry (ground first); empty after augmentation or
    // reload, since the analytic frame no longer matches the pixels.
    std::vector<Surface> surfaces;
    std::vector<int> winner; // per pixel: index into surfaces
};

// Rasterize explicit surfaces: nearest plane wins each pixel, labels follow
// the winning plane exactly, and the image adds seeded Gaussian noise.
Scene render_scene(const SceneConfig& config, std::vector<Surface> surfaces,
                   std::uint64_t seed);

// Draw a ground plane and 2-6 objects from the seed, then render. The same
// seed and config always produce a bit-identical scene.
Scene generate_scene(std::uint64_t seed, const SceneConfig& config);

// Scenes with seeds seed_base, seed_base+1, ...
std::vector<Scene> generate_scenes(const SceneConfig& config, int count,
                                   std::uint64_t seed_base);

enum class SplitSetting { one_label, random_labels, full_labels, few_shot };

const char* split_setting_name(SplitSetting setting);
SplitSetting split_setting_from_name(const std::string& name);

struct PartialDataset {
    std::vector<Scene> scenes;
    std::vector<std::vector<std::uint8_t>> alpha; // [sample][task] labeled?
    SplitSetting setting = SplitSetting::full_labels;
    int task_count = 0;
    int few_shot_task = 0;
    int few_shot_count = 0;
};

// Deterministic per-task label assignment:
//   one_label     exactly one labeled task per sample, counts balanced +-1
//   random_labels 1..task_count-1 labeled tasks per sample
//   full_labels   everything labeled
//   few_shot      the designated task labeled on exactly few_shot_count
//                 samples, every other task labeled everywhere
PartialDataset split_partial(std::vector<Scene> scenes, SplitSetting setting,
                             int task_count, std::uint64_t seed,
                             int few_shot_task = 0, int few_shot_count = 0);

// Crop in original coordinates, then horizontal flip of the cropped patch.
struct TransformRecord {
    bool flip = false;
    int crop_y = 0, crop_x = 0;
    int crop_h = 0, crop_w = 0;
};

TransformRecord identity_transform(int height, int width);

// Crop offsets land on multiples of `stride` so the same record applies at
// feature resolution; crop must itself be a multiple of stride.
TransformRecord draw_transform(Rng& rng, int height, int width, int crop,
                               int stride);

// Apply crop+flip to a [C, h, w] map whose resolution is the record's
// divided by `stride` (use stride 1 for full-resolution maps). Pure spatial
// movement: channel values are copied untouched.
Tensor transform_map(const Tensor& map, const TransformRecord& record,
                     int stride);

std::vector<int> transform_classes(const std::vector<int>& classes, int h,
                                   int w, const TransformRecord& record,
                                   int stride);

// Crop+flip image and all labels; a flip negates the normal's x component.
Scene apply_transform(const Scene& scene, const TransformRecord& record);

std::pair<Scene, TransformRecord> augment(const Scene& scene, Rng& rng,
                                          int crop, int stride);

// Labels at feature resolution: the center pixel of each stride x stride
// block.
struct FeatureLabels {
    std::vector<int> semseg;
    Tensor depth;  // [1, h, w]
    Tensor normal; // [3, h, w]
};

FeatureLabels downsample_scene_labels(const Scene& scene, int stride);

// Dataset directory layout: one subdirectory per sample holding image /
// semseg / depth / normal tensor files, plus manifest.json with the split,
// alpha table, seeds, and generation config.
void save_dataset(const std::string& dir, const PartialDataset& data,
                  const SceneConfig& config);

struct LoadedDataset {
    PartialDataset data;
    SceneConfig config;
};

LoadedDataset load_dataset(const std::string& dir);

} // namespace hitt
