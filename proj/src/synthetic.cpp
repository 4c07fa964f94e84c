#include "hitt/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "hitt/errors.hpp"
#include "hitt/tensor_io.hpp"

namespace hitt {
namespace {

// Class colors: ground first, then object classes.
constexpr float kPalette[8][3] = {
    {0.35f, 0.45f, 0.30f}, {0.80f, 0.20f, 0.20f}, {0.20f, 0.35f, 0.80f},
    {0.85f, 0.75f, 0.20f}, {0.75f, 0.25f, 0.75f}, {0.20f, 0.75f, 0.70f},
    {0.90f, 0.55f, 0.15f}, {0.55f, 0.55f, 0.55f},
};

// Fixed light direction for the normal-dependent shading.
const float kLight[3] = {0.32026f, -0.42701f, 0.84561f};

bool surface_contains(const Surface& s, float x, float y) {
    if (s.cover_all) return true;
    const float dx = x - s.cx;
    const float dy = y - s.cy;
    if (s.ellipse) {
        const float ex = dx / s.rx;
        const float ey = dy / s.ry;
        return ex * ex + ey * ey <= 1.0f;
    }
    return std::abs(dx) <= s.rx && std::abs(dy) <= s.ry;
}

float surface_depth(const Surface& s, float x, float y) {
    return s.z0 + s.gx * (x - s.cx) + s.gy * (y - s.cy);
}

// Keep the plane inside [d_min, d_max] across its whole extent: cap the
// slope so the worst-case deviation leaves room for z0, then place z0
// within the remaining interval (`frac_lo`..`frac_hi` of it, so callers can
// push ground far and objects near).
void finish_surface(Surface& s, float ext_x, float ext_y, float d_min,
                    float d_max, float frac_lo, float frac_hi, Rng& rng) {
    const float range = d_max - d_min;
    float maxdz = std::abs(s.gx) * ext_x + std::abs(s.gy) * ext_y;
    if (maxdz > 0.45f * range) {
        const float shrink = 0.45f * range / maxdz;
        s.gx *= shrink;
        s.gy *= shrink;
        maxdz = 0.45f * range;
    }
    const float lo = d_min + maxdz;
    const float hi = d_max - maxdz;
    s.z0 = rng.uniform(lo + frac_lo * (hi - lo), lo + frac_hi * (hi - lo));
}

void unit_normal_of(const Surface& s, float out[3]) {
    const double nx = -double(s.gx);
    const double ny = -double(s.gy);
    const double norm = std::sqrt(nx * nx + ny * ny + 1.0);
    out[0] = static_cast<float>(nx / norm);
    out[1] = static_cast<float>(ny / norm);
    out[2] = static_cast<float>(1.0 / norm);
}

void write_scene_tensor(const std::string& dir, const char* name,
                        const Tensor& t) {
    write_tensor(dir + "/" + name + ".htt", t);
}

} // namespace

void validate(const SceneConfig& config) {
    if (config.height < 16 || config.width < 16) {
        throw ConfigError("scene config: height/width must be at least 16");
    }
    if (config.num_classes < 2 || config.num_classes > 8) {
        throw ConfigError("scene config: num_classes must be in [2, 8]");
    }
    if (config.min_objects < 1 || config.max_objects < config.min_objects) {
        throw ConfigError("scene config: need 1 <= min_objects <= max_objects");
    }
    if (!(config.d_min > 0.0f) || !(config.d_max > config.d_min)) {
        throw ConfigError("scene config: need 0 < d_min < d_max");
    }
    if (config.noise < 0.0f) {
        throw ConfigError("scene config: noise must be non-negative");
    }
    if (config.ignore_border < 0 ||
        2 * config.ignore_border >= std::min(config.height, config.width)) {
        throw ConfigError("scene config: ignore border swallows the image");
    }
}

nlohmann::json scene_config_to_json(const SceneConfig& config) {
    return nlohmann::json{{"height", config.height},
                          {"width", config.width},
                          {"num_classes", config.num_classes},
                          {"min_objects", config.min_objects},
                          {"max_objects", config.max_objects},
                          {"d_min", config.d_min},
                          {"d_max", config.d_max},
                          {"noise", config.noise},
                          {"ignore_border", config.ignore_border}};
}

SceneConfig scene_config_from_json(const nlohmann::json& j) {
    SceneConfig config;
    try {
        config.height = j.at("height").get<int>();
        config.width = j.at("width").get<int>();
        config.num_classes = j.at("num_classes").get<int>();
        config.min_objects = j.at("min_objects").get<int>();
        config.max_objects = j.at("max_objects").get<int>();
        config.d_min = j.at("d_min").get<float>();
        config.d_max = j.at("d_max").get<float>();
        config.noise = j.at("noise").get<float>();
        config.ignore_border = j.at("ignore_border").get<int>();
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("scene config: ") + e.what());
    }
    validate(config);
    return config;
}

Scene render_scene(const SceneConfig& config, std::vector<Surface> surfaces,
                   std::uint64_t seed) {
    validate(config);
    if (surfaces.empty() || !surfaces.front().cover_all) {
        throw StateError("render_scene: first surface must cover the image");
    }
    const int h = config.height;
    const int w = config.width;
    const int hw = h * w;

    Scene scene;
    scene.height = h;
    scene.width = w;
    scene.seed = seed;
    scene.image = Tensor::zeros({3, h, w});
    scene.depth = Tensor::zeros({1, h, w});
    scene.normal = Tensor::zeros({3, h, w});
    scene.semseg.assign(static_cast<std::size_t>(hw), 0);
    scene.winner.assign(static_cast<std::size_t>(hw), 0);

    std::vector<std::array<float, 3>> normals(surfaces.size());
    for (std::size_t i = 0; i < surfaces.size(); ++i) {
        unit_normal_of(surfaces[i], normals[i].data());
    }

    const float range = config.d_max - config.d_min;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const int p = y * w + x;
            int win = 0;
            float z = surface_depth(surfaces[0], float(x), float(y));
            for (std::size_t i = 1; i < surfaces.size(); ++i) {
                if (!surface_contains(surfaces[i], float(x), float(y))) {
                    continue;
                }
                const float zi =
                    surface_depth(surfaces[i], float(x), float(y));
                if (zi < z) {
                    z = zi;
                    win = static_cast<int>(i);
                }
            }
            scene.winner[static_cast<std::size_t>(p)] = win;
            scene.depth.data()[p] = z;
            const float* n = normals[static_cast<std::size_t>(win)].data();
            for (int c = 0; c < 3; ++c) {
                scene.normal.data()[c * hw + p] = n[c];
            }
            scene.semseg[static_cast<std::size_t>(p)] =
                surfaces[static_cast<std::size_t>(win)].cls;

            const float lambert =
                std::max(0.0f, n[0] * kLight[0] + n[1] * kLight[1] +
                                   n[2] * kLight[2]);
            const float shade = 0.35f + 0.65f * lambert;
            const float falloff = 1.0f - 0.35f * (z - config.d_min) / range;
            const float* color =
                kPalette[surfaces[static_cast<std::size_t>(win)].cls];
            for (int c = 0; c < 3; ++c) {
                scene.image.data()[c * hw + p] = color[c] * shade * falloff;
            }
        }
    }

    if (config.noise > 0.0f) {
        Rng rng(seed + 0x9E3779B97F4A7C15ull);
        for (std::size_t i = 0; i < scene.image.numel(); ++i) {
            scene.image.data()[i] += rng.normal(0.0f, config.noise);
        }
    }
    for (std::size_t i = 0; i < scene.image.numel(); ++i) {
        scene.image.data()[i] =
            std::min(1.0f, std::max(0.0f, scene.image.data()[i]));
    }

    const int b = config.ignore_border;
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            if (y < b || y >= h - b || x < b || x >= w - b) {
                scene.semseg[static_cast<std::size_t>(y * w + x)] = 255;
            }
        }
    }

    scene.surfaces = std::move(surfaces);
    return scene;
}

Scene generate_scene(std::uint64_t seed, const SceneConfig& config) {
    validate(config);
    Rng rng(seed);
    const int h = config.height;
    const int w = config.width;
    const float pitch = (config.d_max - config.d_min) / 60.0f;

    std::vector<Surface> surfaces;
    Surface ground;
    ground.cls = 0;
    ground.cover_all = true;
    ground.cx = 0.5f * float(w - 1);
    ground.cy = 0.5f * float(h - 1);
    ground.gx = pitch * rng.uniform(-0.45f, 0.45f);
    ground.gy = pitch * rng.uniform(-0.45f, 0.45f);
    // Ground sits in the far 40% of its feasible interval so objects in the
    // near band stay mostly visible.
    finish_surface(ground, 0.5f * float(w - 1), 0.5f * float(h - 1),
                   config.d_min, config.d_max, 0.6f, 1.0f, rng);
    surfaces.push_back(ground);

    const int objects =
        config.min_objects +
        rng.uniform_int(config.max_objects - config.min_objects + 1);
    for (int i = 0; i < objects; ++i) {
        Surface s;
        s.ellipse = rng.bernoulli(0.5f);
        s.cls = 1 + rng.uniform_int(config.num_classes - 1);
        s.cx = rng.uniform(0.15f * float(w), 0.85f * float(w));
        s.cy = rng.uniform(0.15f * float(h), 0.85f * float(h));
        s.rx = rng.uniform(0.08f * float(w), 0.20f * float(w));
        s.ry = rng.uniform(0.08f * float(h), 0.20f * float(h));
        s.gx = pitch * rng.uniform(-1.0f, 1.0f);
        s.gy = pitch * rng.uniform(-1.0f, 1.0f);
        finish_surface(s, s.rx, s.ry, config.d_min, config.d_max, 0.0f, 0.55f,
                       rng);
        surfaces.push_back(s);
    }
    return render_scene(config, std::move(surfaces), seed);
}

std::vector<Scene> generate_scenes(const SceneConfig& config, int count,
                                   std::uint64_t seed_base) {
    std::vector<Scene> out;
    out.reserve(static_cast<std::size_t>(count));
    for (int i = 0; i < count; ++i) {
        out.push_back(generate_scene(seed_base + std::uint64_t(i), config));
    }
    return out;
}

const char* split_setting_name(SplitSetting setting) {
    switch (setting) {
        case SplitSetting::one_label: return "one_label";
        case SplitSetting::random_labels: return "random_labels";
        case SplitSetting::full_labels: return "full_labels";
        case SplitSetting::few_shot: return "few_shot";
    }
    return "?";
}

SplitSetting split_setting_from_name(const std::string& name) {
    if (name == "one_label") return SplitSetting::one_label;
    if (name == "random_labels") return SplitSetting::random_labels;
    if (name == "full_labels") return SplitSetting::full_labels;
    if (name == "few_shot") return SplitSetting::few_shot;
    throw ConfigError("unknown split setting '" + name + "'");
}

PartialDataset split_partial(std::vector<Scene> scenes, SplitSetting setting,
                             int task_count, std::uint64_t seed,
                             int few_shot_task, int few_shot_count) {
    if (scenes.empty()) {
        throw StateError("split_partial: empty scene list");
    }
    if (task_count < 1) {
        throw ConfigError("split_partial: need at least one task");
    }
    const int n = static_cast<int>(scenes.size());
    Rng rng(seed);

    PartialDataset out;
    out.setting = setting;
    out.task_count = task_count;
    out.alpha.assign(static_cast<std::size_t>(n),
                     std::vector<std::uint8_t>(
                         static_cast<std::size_t>(task_count), 0));

    switch (setting) {
        case SplitSetting::one_label: {
            std::vector<int> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (int i = 0; i < n; ++i) {
                out.alpha[static_cast<std::size_t>(order[i])]
                         [static_cast<std::size_t>(i % task_count)] = 1;
            }
            break;
        }
        case SplitSetting::random_labels: {
            if (task_count < 2) {
                throw ConfigError("split_partial: random_labels needs at "
                                  "least two tasks");
            }
            std::vector<int> tasks(static_cast<std::size_t>(task_count));
            for (int i = 0; i < n; ++i) {
                const int m = 1 + rng.uniform_int(task_count - 1);
                std::iota(tasks.begin(), tasks.end(), 0);
                rng.shuffle(tasks);
                for (int t = 0; t < m; ++t) {
                    out.alpha[static_cast<std::size_t>(i)]
                             [static_cast<std::size_t>(tasks[t])] = 1;
                }
            }
            break;
        }
        case SplitSetting::full_labels: {
            for (auto& row : out.alpha) {
                std::fill(row.begin(), row.end(), 1);
            }
            break;
        }
        case SplitSetting::few_shot: {
            if (few_shot_task < 0 || few_shot_task >= task_count) {
                throw ConfigError("split_partial: few_shot task out of range");
            }
            if (few_shot_count < 0 || few_shot_count > n) {
                throw StateError("split_partial: " +
                                 std::to_string(few_shot_count) +
                                 " shots exceed " + std::to_string(n) +
                                 " samples");
            }
            out.few_shot_task = few_shot_task;
            out.few_shot_count = few_shot_count;
            for (auto& row : out.alpha) {
                std::fill(row.begin(), row.end(), 1);
                row[static_cast<std::size_t>(few_shot_task)] = 0;
            }
            std::vector<int> order(static_cast<std::size_t>(n));
            std::iota(order.begin(), order.end(), 0);
            rng.shuffle(order);
            for (int i = 0; i < few_shot_count; ++i) {
                out.alpha[static_cast<std::size_t>(order[i])]
                         [static_cast<std::size_t>(few_shot_task)] = 1;
            }
            break;
        }
    }
    out.scenes = std::move(scenes);
    return out;
}

TransformRecord identity_transform(int height, int width) {
    TransformRecord r;
    r.crop_h = height;
    r.crop_w = width;
    return r;
}

TransformRecord draw_transform(Rng& rng, int height, int width, int crop,
                               int stride) {
    if (stride < 1 || crop < stride || crop % stride != 0) {
        throw ConfigError("draw_transform: crop must be a positive multiple "
                          "of the stride");
    }
    if (crop > height || crop > width) {
        throw ConfigError("draw_transform: crop " + std::to_string(crop) +
                          " exceeds the " + std::to_string(height) + "x" +
                          std::to_string(width) + " scene");
    }
    TransformRecord r;
    r.crop_h = crop;
    r.crop_w = crop;
    r.crop_y = stride * rng.uniform_int((height - crop) / stride + 1);
    r.crop_x = stride * rng.uniform_int((width - crop) / stride + 1);
    r.flip = rng.bernoulli(0.5f);
    return r;
}

Tensor transform_map(const Tensor& map, const TransformRecord& record,
                     int stride) {
    if (map.rank() != 3) {
        throw ShapeError("transform_map: expected [C, h, w], got " +
                         shape_str(map.shape()));
    }
    if (record.crop_y % stride != 0 || record.crop_x % stride != 0 ||
        record.crop_h % stride != 0 || record.crop_w % stride != 0) {
        throw StateError("transform_map: record is not aligned to stride " +
                         std::to_string(stride));
    }
    const int cy = record.crop_y / stride;
    const int cx = record.crop_x / stride;
    const int ch = record.crop_h / stride;
    const int cw = record.crop_w / stride;
    const int c = map.dim(0);
    const int h = map.dim(1);
    const int w = map.dim(2);
    if (cy + ch > h || cx + cw > w) {
        throw ShapeError("transform_map: crop escapes the " + shape_str(
                             map.shape()) + " map");
    }
    Tensor out = Tensor::zeros({c, ch, cw});
    for (int k = 0; k < c; ++k) {
        for (int y = 0; y < ch; ++y) {
            for (int x = 0; x < cw; ++x) {
                const int sx = record.flip ? (cx + cw - 1 - x) : (cx + x);
                out.data()[(k * ch + y) * cw + x] =
                    map.values()[(k * h + cy + y) * w + sx];
            }
        }
    }
    return out;
}

std::vector<int> transform_classes(const std::vector<int>& classes, int h,
                                   int w, const TransformRecord& record,
                                   int stride) {
    if (static_cast<int>(classes.size()) != h * w) {
        throw ShapeError("transform_classes: got " +
                         std::to_string(classes.size()) + " labels for a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    if (record.crop_y % stride != 0 || record.crop_x % stride != 0 ||
        record.crop_h % stride != 0 || record.crop_w % stride != 0) {
        throw StateError("transform_classes: record is not aligned to "
                         "stride " + std::to_string(stride));
    }
    const int cy = record.crop_y / stride;
    const int cx = record.crop_x / stride;
    const int ch = record.crop_h / stride;
    const int cw = record.crop_w / stride;
    if (cy + ch > h || cx + cw > w) {
        throw ShapeError("transform_classes: crop escapes the grid");
    }
    std::vector<int> out(static_cast<std::size_t>(ch) * cw);
    for (int y = 0; y < ch; ++y) {
        for (int x = 0; x < cw; ++x) {
            const int sx = record.flip ? (cx + cw - 1 - x) : (cx + x);
            out[static_cast<std::size_t>(y * cw + x)] =
                classes[static_cast<std::size_t>((cy + y) * w + sx)];
        }
    }
    return out;
}

Scene apply_transform(const Scene& scene, const TransformRecord& record) {
    Scene out;
    out.height = record.crop_h;
    out.width = record.crop_w;
    out.seed = scene.seed;
    out.image = transform_map(scene.image, record, 1);
    out.depth = transform_map(scene.depth, record, 1);
    out.normal = transform_map(scene.normal, record, 1);
    if (record.flip) {
        // Mirroring the x axis flips the x component of every normal.
        const int hw = out.height * out.width;
        for (int p = 0; p < hw; ++p) {
            out.normal.data()[p] = -out.normal.data()[p];
        }
    }
    out.semseg = transform_classes(scene.semseg, scene.height, scene.width,
                                   record, 1);
    return out;
}

std::pair<Scene, TransformRecord> augment(const Scene& scene, Rng& rng,
                                          int crop, int stride) {
    const TransformRecord record =
        draw_transform(rng, scene.height, scene.width, crop, stride);
    return {apply_transform(scene, record), record};
}

FeatureLabels downsample_scene_labels(const Scene& scene, int stride) {
    if (stride < 1 || scene.height % stride != 0 ||
        scene.width % stride != 0) {
        throw ShapeError("downsample_scene_labels: stride " +
                         std::to_string(stride) + " does not divide " +
                         std::to_string(scene.height) + "x" +
                         std::to_string(scene.width));
    }
    const int fh = scene.height / stride;
    const int fw = scene.width / stride;
    const int hw = scene.height * scene.width;
    FeatureLabels out;
    out.semseg.resize(static_cast<std::size_t>(fh) * fw);
    out.depth = Tensor::zeros({1, fh, fw});
    out.normal = Tensor::zeros({3, fh, fw});
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            const int sy = y * stride + stride / 2;
            const int sx = x * stride + stride / 2;
            const int src = sy * scene.width + sx;
            const int dst = y * fw + x;
            out.semseg[static_cast<std::size_t>(dst)] =
                scene.semseg[static_cast<std::size_t>(src)];
            out.depth.data()[dst] = scene.depth.values()[src];
            for (int c = 0; c < 3; ++c) {
                out.normal.data()[c * fh * fw + dst] =
                    scene.normal.values()[c * hw + src];
            }
        }
    }
    return out;
}

void save_dataset(const std::string& dir, const PartialDataset& data,
                  const SceneConfig& config) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json manifest;
    manifest["setting"] = split_setting_name(data.setting);
    manifest["task_count"] = data.task_count;
    manifest["few_shot_task"] = data.few_shot_task;
    manifest["few_shot_count"] = data.few_shot_count;
    manifest["config"] = scene_config_to_json(config);

    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < data.scenes.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu", i);
        const std::string sub = dir + "/" + name;
        fs::create_directories(sub);

        const Scene& s = data.scenes[i];
        write_scene_tensor(sub, "image", s.image);
        write_scene_tensor(sub, "depth", s.depth);
        write_scene_tensor(sub, "normal", s.normal);
        Tensor seg = Tensor::zeros({1, s.height, s.width});
        for (std::size_t p = 0; p < s.semseg.size(); ++p) {
            seg.data()[p] = static_cast<float>(s.semseg[p]);
        }
        write_scene_tensor(sub, "semseg", seg);

        samples.push_back({{"dir", name},
                           {"seed", s.seed},
                           {"alpha", data.alpha[i]}});
    }
    manifest["samples"] = samples;

    std::ofstream out(dir + "/manifest.json");
    if (!out) {
        throw StateError("save_dataset: cannot write to " + dir);
    }
    out << manifest.dump(2) << "\n";
}

LoadedDataset load_dataset(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) {
        throw StateError("load_dataset: no manifest in " + dir);
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }

    LoadedDataset out;
    try {
        out.config = scene_config_from_json(manifest.at("config"));
        out.data.setting =
            split_setting_from_name(manifest.at("setting").get<std::string>());
        out.data.task_count = manifest.at("task_count").get<int>();
        out.data.few_shot_task = manifest.at("few_shot_task").get<int>();
        out.data.few_shot_count = manifest.at("few_shot_count").get<int>();

        for (const auto& entry : manifest.at("samples")) {
            const std::string sub =
                dir + "/" + entry.at("dir").get<std::string>();
            Scene s;
            s.seed = entry.at("seed").get<std::uint64_t>();
            s.image = read_tensor(sub + "/image.htt");
            s.depth = read_tensor(sub + "/depth.htt");
            s.normal = read_tensor(sub + "/normal.htt");
            s.height = out.config.height;
            s.width = out.config.width;
            if (s.image.shape() !=
                std::vector<int>{3, s.height, s.width}) {
                throw FormatError("load_dataset: image shape " +
                                  shape_str(s.image.shape()) +
                                  " does not match the config");
            }
            Tensor seg = read_tensor(sub + "/semseg.htt");
            s.semseg.resize(seg.numel());
            for (std::size_t p = 0; p < seg.numel(); ++p) {
                const int cls =
                    static_cast<int>(std::lround(seg.values()[p]));
                if (cls != 255 &&
                    (cls < 0 || cls >= out.config.num_classes)) {
                    throw FormatError("load_dataset: class " +
                                      std::to_string(cls) + " out of range");
                }
                s.semseg[p] = cls;
            }
            out.data.scenes.push_back(std::move(s));
            out.data.alpha.push_back(
                entry.at("alpha").get<std::vector<std::uint8_t>>());
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("dataset manifest: ") + e.what());
    }
    return out;
}

} // namespace hitt
