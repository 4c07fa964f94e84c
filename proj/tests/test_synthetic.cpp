#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <array>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <vector>

#include "hitt/errors.hpp"
#include "hitt/quantization.hpp"
#include "hitt/random.hpp"
#include "hitt/synthetic.hpp"
#include "hitt/tensor.hpp"

using namespace hitt;

namespace {

SceneConfig small_config() {
    SceneConfig config;
    config.height = 32;
    config.width = 32;
    return config;
}

Surface flat_ground(float z0, int h, int w) {
    Surface s;
    s.cls = 0;
    s.cover_all = true;
    s.cx = 0.5f * float(w - 1);
    s.cy = 0.5f * float(h - 1);
    s.z0 = z0;
    return s;
}

Surface flat_rect(int cls, float cx, float cy, float rx, float ry, float z0) {
    Surface s;
    s.cls = cls;
    s.cx = cx;
    s.cy = cy;
    s.rx = rx;
    s.ry = ry;
    s.z0 = z0;
    return s;
}

bool tensors_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    return std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

// Least-squares plane fit z = a*x + b*y + c over one surface's pixels,
// solved in double via 3x3 normal equations (Cramer's rule). Returns the
// implied unit normal.
std::array<double, 3> fit_plane_normal(const Scene& scene, int surface) {
    double sxx = 0, sxy = 0, sx = 0, syy = 0, sy = 0, s1 = 0;
    double sxz = 0, syz = 0, sz = 0;
    for (int y = 0; y < scene.height; ++y) {
        for (int x = 0; x < scene.width; ++x) {
            const int p = y * scene.width + x;
            if (scene.winner[static_cast<std::size_t>(p)] != surface) {
                continue;
            }
            const double z = scene.depth.values()[p];
            sxx += double(x) * x;
            sxy += double(x) * y;
            sx += x;
            syy += double(y) * y;
            sy += y;
            s1 += 1;
            sxz += x * z;
            syz += y * z;
            sz += z;
        }
    }
    const double det = sxx * (syy * s1 - sy * sy) -
                       sxy * (sxy * s1 - sy * sx) +
                       sx * (sxy * sy - syy * sx);
    const double det_a = sxz * (syy * s1 - sy * sy) -
                         sxy * (syz * s1 - sy * sz) +
                         sx * (syz * sy - syy * sz);
    const double det_b = sxx * (syz * s1 - sz * sy) -
                         sxz * (sxy * s1 - sx * sy) +
                         sx * (sxy * sz - sx * syz);
    const double a = det_a / det;
    const double b = det_b / det;
    const double norm = std::sqrt(a * a + b * b + 1.0);
    return {-a / norm, -b / norm, 1.0 / norm};
}

} // namespace

TEST_CASE("fronto-parallel planes render with exact depth and normals") {
    SceneConfig config = small_config();
    config.noise = 0.0f;
    std::vector<Surface> surfaces;
    surfaces.push_back(flat_ground(5.0f, config.height, config.width));
    surfaces.push_back(flat_rect(1, 16.0f, 16.0f, 6.0f, 4.0f, 3.0f));

    const Scene scene = render_scene(config, surfaces, 11);
    const int hw = config.height * config.width;
    for (int y = 0; y < config.height; ++y) {
        for (int x = 0; x < config.width; ++x) {
            const int p = y * config.width + x;
            const bool inside =
                std::abs(float(x) - 16.0f) <= 6.0f &&
                std::abs(float(y) - 16.0f) <= 4.0f;
            CHECK(scene.depth.values()[p] == (inside ? 3.0f : 5.0f));
            CHECK(scene.winner[static_cast<std::size_t>(p)] ==
                  (inside ? 1 : 0));
            CHECK(scene.normal.values()[p] == 0.0f);
            CHECK(scene.normal.values()[hw + p] == 0.0f);
            CHECK(scene.normal.values()[2 * hw + p] == 1.0f);
            const bool border = y == 0 || y == config.height - 1 || x == 0 ||
                                x == config.width - 1;
            const int expect = border ? 255 : (inside ? 1 : 0);
            CHECK(scene.semseg[static_cast<std::size_t>(p)] == expect);
        }
    }
}

TEST_CASE("same seed reproduces a scene bit for bit") {
    const SceneConfig config = small_config();
    const Scene a = generate_scene(42, config);
    const Scene b = generate_scene(42, config);
    CHECK(tensors_equal(a.image, b.image));
    CHECK(tensors_equal(a.depth, b.depth));
    CHECK(tensors_equal(a.normal, b.normal));
    CHECK(a.semseg == b.semseg);
    CHECK(a.winner == b.winner);

    const Scene c = generate_scene(43, config);
    CHECK_FALSE(tensors_equal(a.image, c.image));
}

TEST_CASE("stored normals match a least-squares plane fit of the depth") {
    const SceneConfig config = small_config();
    for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
        const Scene scene = generate_scene(seed, config);
        for (std::size_t s = 0; s < scene.surfaces.size(); ++s) {
            std::size_t count = 0;
            for (int v : scene.winner) {
                if (v == static_cast<int>(s)) ++count;
            }
            if (count < 10) continue; // too small for a stable fit
            const auto fitted = fit_plane_normal(scene,
                                                 static_cast<int>(s));
            // Any pixel of the surface carries its constant normal.
            int pix = -1;
            for (std::size_t p = 0; p < scene.winner.size(); ++p) {
                if (scene.winner[p] == static_cast<int>(s)) {
                    pix = static_cast<int>(p);
                    break;
                }
            }
            REQUIRE(pix >= 0);
            const int hw = config.height * config.width;
            CHECK(std::abs(scene.normal.values()[pix] - fitted[0]) < 1e-4);
            CHECK(std::abs(scene.normal.values()[hw + pix] - fitted[1]) <
                  1e-4);
            CHECK(std::abs(scene.normal.values()[2 * hw + pix] - fitted[2]) <
                  1e-4);
        }
    }
}

TEST_CASE("generated scenes satisfy the labeling invariants") {
    const SceneConfig config = small_config();
    const QuantizationSpec bins =
        build_depth_bins(config.d_min, config.d_max, 10);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const Scene scene = generate_scene(seed, config);
        const int hw = config.height * config.width;
        for (int p = 0; p < hw; ++p) {
            const float z = scene.depth.values()[p];
            CHECK(z >= config.d_min);
            CHECK(z <= config.d_max);
            // Every depth lands inside the quantizer's edge range.
            CHECK(z >= bins.edges.front());
            CHECK(z <= bins.edges.back());
            const float nx = scene.normal.values()[p];
            const float ny = scene.normal.values()[hw + p];
            const float nz = scene.normal.values()[2 * hw + p];
            CHECK(std::abs(nx * nx + ny * ny + nz * nz - 1.0f) < 1e-5f);
            CHECK(nz > 0.0f);
            const int cls = scene.semseg[static_cast<std::size_t>(p)];
            const int y = p / config.width;
            const int x = p % config.width;
            const bool border = y < config.ignore_border ||
                                y >= config.height - config.ignore_border ||
                                x < config.ignore_border ||
                                x >= config.width - config.ignore_border;
            if (border) {
                CHECK(cls == 255);
            } else {
                CHECK(cls >= 0);
                CHECK(cls < config.num_classes);
            }
        }
        for (std::size_t i = 0; i < scene.image.numel(); ++i) {
            CHECK(scene.image.values()[i] >= 0.0f);
            CHECK(scene.image.values()[i] <= 1.0f);
        }
        CHECK(scene.surfaces.size() >=
              static_cast<std::size_t>(1 + config.min_objects));
        CHECK(scene.surfaces.size() <=
              static_cast<std::size_t>(1 + config.max_objects));
    }
}

TEST_CASE("one-label split assigns each sample exactly one task, balanced") {
    const SceneConfig config = small_config();
    auto scenes = generate_scenes(config, 9, 100);
    const PartialDataset data =
        split_partial(std::move(scenes), SplitSetting::one_label, 3, 5);
    std::array<int, 3> per_task{0, 0, 0};
    for (const auto& row : data.alpha) {
        int sum = 0;
        for (int t = 0; t < 3; ++t) {
            sum += row[static_cast<std::size_t>(t)];
            per_task[static_cast<std::size_t>(t)] +=
                row[static_cast<std::size_t>(t)];
        }
        CHECK(sum == 1);
    }
    CHECK(per_task[0] == 3);
    CHECK(per_task[1] == 3);
    CHECK(per_task[2] == 3);

    // 10 samples over 3 tasks: counts differ by at most one.
    auto more = generate_scenes(config, 10, 200);
    const PartialDataset uneven =
        split_partial(std::move(more), SplitSetting::one_label, 3, 5);
    per_task = {0, 0, 0};
    for (const auto& row : uneven.alpha) {
        for (int t = 0; t < 3; ++t) {
            per_task[static_cast<std::size_t>(t)] +=
                row[static_cast<std::size_t>(t)];
        }
    }
    std::sort(per_task.begin(), per_task.end());
    CHECK(per_task[0] == 3);
    CHECK(per_task[1] == 3);
    CHECK(per_task[2] == 4);
}

TEST_CASE("full-labels split marks everything labeled") {
    auto scenes = generate_scenes(small_config(), 4, 300);
    const PartialDataset data =
        split_partial(std::move(scenes), SplitSetting::full_labels, 3, 5);
    for (const auto& row : data.alpha) {
        for (auto v : row) CHECK(v == 1);
    }
}

TEST_CASE("random-labels split keeps every sample partially labeled") {
    auto scenes = generate_scenes(small_config(), 24, 400);
    const PartialDataset data =
        split_partial(std::move(scenes), SplitSetting::random_labels, 3, 5);
    bool saw_one = false;
    bool saw_two = false;
    for (const auto& row : data.alpha) {
        int sum = 0;
        for (auto v : row) sum += v;
        CHECK(sum >= 1);
        CHECK(sum <= 2); // never fully labeled
        saw_one = saw_one || sum == 1;
        saw_two = saw_two || sum == 2;
    }
    CHECK(saw_one);
    CHECK(saw_two);

    auto single = generate_scenes(small_config(), 2, 500);
    CHECK_THROWS_AS(split_partial(std::move(single),
                                  SplitSetting::random_labels, 1, 5),
                    ConfigError);
}

TEST_CASE("few-shot split starves exactly one task") {
    auto scenes = generate_scenes(small_config(), 8, 600);
    const PartialDataset data = split_partial(
        std::move(scenes), SplitSetting::few_shot, 3, 5, 1, 2);
    int shots = 0;
    for (const auto& row : data.alpha) {
        CHECK(row[0] == 1);
        CHECK(row[2] == 1);
        shots += row[1];
    }
    CHECK(shots == 2);
    CHECK(data.few_shot_task == 1);
    CHECK(data.few_shot_count == 2);

    auto more = generate_scenes(small_config(), 3, 700);
    CHECK_THROWS_AS(split_partial(std::move(more), SplitSetting::few_shot, 3,
                                  5, 1, 4),
                    StateError);
}

TEST_CASE("splits are deterministic in the seed") {
    auto a = split_partial(generate_scenes(small_config(), 12, 800),
                           SplitSetting::random_labels, 3, 17);
    auto b = split_partial(generate_scenes(small_config(), 12, 800),
                           SplitSetting::random_labels, 3, 17);
    CHECK(a.alpha == b.alpha);
    auto c = split_partial(generate_scenes(small_config(), 12, 800),
                           SplitSetting::random_labels, 3, 18);
    CHECK(a.alpha != c.alpha);
}

TEST_CASE("split setting names round trip") {
    for (SplitSetting s :
         {SplitSetting::one_label, SplitSetting::random_labels,
          SplitSetting::full_labels, SplitSetting::few_shot}) {
        CHECK(split_setting_from_name(split_setting_name(s)) == s);
    }
    CHECK_THROWS_AS(split_setting_from_name("bogus"), ConfigError);
}

TEST_CASE("identity transform leaves a scene unchanged") {
    const Scene scene = generate_scene(3, small_config());
    const TransformRecord id =
        identity_transform(scene.height, scene.width);
    const Scene out = apply_transform(scene, id);
    CHECK(tensors_equal(out.image, scene.image));
    CHECK(tensors_equal(out.depth, scene.depth));
    CHECK(tensors_equal(out.normal, scene.normal));
    CHECK(out.semseg == scene.semseg);
}

TEST_CASE("flipping twice restores the original") {
    const Scene scene = generate_scene(4, small_config());
    TransformRecord flip = identity_transform(scene.height, scene.width);
    flip.flip = true;
    const Scene once = apply_transform(scene, flip);
    const Scene twice = apply_transform(once, flip);
    CHECK(tensors_equal(twice.image, scene.image));
    CHECK(tensors_equal(twice.depth, scene.depth));
    CHECK(tensors_equal(twice.normal, scene.normal));
    CHECK(twice.semseg == scene.semseg);
}

TEST_CASE("scene transform agrees with the raw map/class transforms") {
    const Scene scene = generate_scene(5, small_config());
    TransformRecord record;
    record.flip = true;
    record.crop_y = 8;
    record.crop_x = 16;
    record.crop_h = 16;
    record.crop_w = 16;
    const Scene out = apply_transform(scene, record);

    const Tensor image = transform_map(scene.image, record, 1);
    CHECK(tensors_equal(out.image, image));
    const Tensor depth = transform_map(scene.depth, record, 1);
    CHECK(tensors_equal(out.depth, depth));
    CHECK(out.semseg == transform_classes(scene.semseg, scene.height,
                                          scene.width, record, 1));

    // Normals transform like maps except the x component changes sign.
    const Tensor normal = transform_map(scene.normal, record, 1);
    const int hw = record.crop_h * record.crop_w;
    for (int p = 0; p < hw; ++p) {
        CHECK(out.normal.values()[p] == -normal.values()[p]);
        CHECK(out.normal.values()[hw + p] == normal.values()[hw + p]);
        CHECK(out.normal.values()[2 * hw + p] == normal.values()[2 * hw + p]);
    }
}

TEST_CASE("drawn transforms stay aligned and in bounds") {
    Rng rng(9);
    bool saw_flip = false;
    bool saw_plain = false;
    std::set<std::pair<int, int>> offsets;
    for (int i = 0; i < 200; ++i) {
        const TransformRecord r = draw_transform(rng, 64, 64, 32, 8);
        CHECK(r.crop_h == 32);
        CHECK(r.crop_w == 32);
        CHECK(r.crop_y % 8 == 0);
        CHECK(r.crop_x % 8 == 0);
        CHECK(r.crop_y >= 0);
        CHECK(r.crop_x >= 0);
        CHECK(r.crop_y + r.crop_h <= 64);
        CHECK(r.crop_x + r.crop_w <= 64);
        saw_flip = saw_flip || r.flip;
        saw_plain = saw_plain || !r.flip;
        offsets.insert({r.crop_y, r.crop_x});
    }
    CHECK(saw_flip);
    CHECK(saw_plain);
    CHECK(offsets.size() > 4); // the draw actually explores the grid

    CHECK_THROWS_AS(draw_transform(rng, 64, 64, 30, 8), ConfigError);
    CHECK_THROWS_AS(draw_transform(rng, 24, 24, 32, 8), ConfigError);
    CHECK_THROWS_AS(draw_transform(rng, 64, 64, 32, 0), ConfigError);
}

TEST_CASE("transform records scale down to feature resolution") {
    // A 32-pixel crop at (8, 16) on a stride-8 grid is a 4-cell crop at
    // (1, 2): check against the equivalent full-resolution crop.
    Rng rng(10);
    Tensor fine = Tensor::random_uniform({2, 64, 64}, rng, 0.0f, 1.0f);
    Tensor coarse = Tensor::zeros({2, 8, 8});
    for (int c = 0; c < 2; ++c) {
        for (int y = 0; y < 8; ++y) {
            for (int x = 0; x < 8; ++x) {
                coarse.data()[(c * 8 + y) * 8 + x] =
                    fine.values()[(c * 64 + y * 8) * 64 + x * 8];
            }
        }
    }
    TransformRecord record;
    record.flip = false;
    record.crop_y = 8;
    record.crop_x = 16;
    record.crop_h = 32;
    record.crop_w = 32;

    // Without a flip, cropping commutes with subsampling exactly.
    const Tensor fine_crop = transform_map(fine, record, 1);
    const Tensor coarse_crop = transform_map(coarse, record, 8);
    REQUIRE(coarse_crop.shape() == std::vector<int>{2, 4, 4});
    for (int c = 0; c < 2; ++c) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
                CHECK(coarse_crop.values()[(c * 4 + y) * 4 + x] ==
                      fine_crop.values()[(c * 32 + y * 8) * 32 + x * 8]);
            }
        }
    }

    // With a flip, the record acts on the coarse grid in divided
    // coordinates: crop cells [1, 5) x [2, 6), columns reversed.
    TransformRecord flipped = record;
    flipped.flip = true;
    const Tensor coarse_flip = transform_map(coarse, flipped, 8);
    REQUIRE(coarse_flip.shape() == std::vector<int>{2, 4, 4});
    for (int c = 0; c < 2; ++c) {
        for (int y = 0; y < 4; ++y) {
            for (int x = 0; x < 4; ++x) {
                CHECK(coarse_flip.values()[(c * 4 + y) * 4 + x] ==
                      coarse.values()[(c * 8 + 1 + y) * 8 + (2 + 3 - x)]);
            }
        }
    }

    TransformRecord misaligned = record;
    misaligned.crop_y = 4;
    CHECK_THROWS_AS(transform_map(coarse, misaligned, 8), StateError);
}

TEST_CASE("label downsampling picks block-center pixels") {
    const Scene scene = generate_scene(6, small_config());
    const int stride = 8;
    const FeatureLabels labels = downsample_scene_labels(scene, stride);
    const int fh = scene.height / stride;
    const int fw = scene.width / stride;
    REQUIRE(labels.depth.shape() == std::vector<int>{1, fh, fw});
    REQUIRE(labels.normal.shape() == std::vector<int>{3, fh, fw});
    const int hw = scene.height * scene.width;
    for (int y = 0; y < fh; ++y) {
        for (int x = 0; x < fw; ++x) {
            const int src =
                (y * stride + stride / 2) * scene.width + x * stride +
                stride / 2;
            const int dst = y * fw + x;
            CHECK(labels.semseg[static_cast<std::size_t>(dst)] ==
                  scene.semseg[static_cast<std::size_t>(src)]);
            CHECK(labels.depth.values()[dst] == scene.depth.values()[src]);
            for (int c = 0; c < 3; ++c) {
                CHECK(labels.normal.values()[c * fh * fw + dst] ==
                      scene.normal.values()[c * hw + src]);
            }
        }
    }
    CHECK_THROWS_AS(downsample_scene_labels(scene, 7), ShapeError);
}

TEST_CASE("generation is fast enough for in-test dataset builds") {
    SceneConfig config;
    config.height = 64;
    config.width = 64;
    const auto start = std::chrono::steady_clock::now();
    const auto scenes = generate_scenes(config, 30, 9000);
    const auto elapsed = std::chrono::duration<double>(
                             std::chrono::steady_clock::now() - start)
                             .count();
    CHECK(scenes.size() == 30);
    CHECK(elapsed < 0.3); // at least ~100 scenes/s
}

TEST_CASE("datasets round trip through disk bit for bit") {
    const SceneConfig config = small_config();
    auto scenes = generate_scenes(config, 5, 1000);
    const PartialDataset data =
        split_partial(std::move(scenes), SplitSetting::one_label, 3, 7);

    const std::string dir = "synthetic_roundtrip_tmp";
    std::filesystem::remove_all(dir);
    save_dataset(dir, data, config);
    const LoadedDataset loaded = load_dataset(dir);

    CHECK(loaded.config.height == config.height);
    CHECK(loaded.config.num_classes == config.num_classes);
    CHECK(loaded.data.setting == data.setting);
    CHECK(loaded.data.task_count == data.task_count);
    CHECK(loaded.data.alpha == data.alpha);
    REQUIRE(loaded.data.scenes.size() == data.scenes.size());
    for (std::size_t i = 0; i < data.scenes.size(); ++i) {
        CHECK(tensors_equal(loaded.data.scenes[i].image,
                            data.scenes[i].image));
        CHECK(tensors_equal(loaded.data.scenes[i].depth,
                            data.scenes[i].depth));
        CHECK(tensors_equal(loaded.data.scenes[i].normal,
                            data.scenes[i].normal));
        CHECK(loaded.data.scenes[i].semseg == data.scenes[i].semseg);
        CHECK(loaded.data.scenes[i].seed == data.scenes[i].seed);
    }
    std::filesystem::remove_all(dir);

    CHECK_THROWS_AS(load_dataset("no_such_dataset_dir"), StateError);
}

TEST_CASE("invalid scene configs are rejected") {
    SceneConfig config;
    config.num_classes = 1;
    CHECK_THROWS_AS(validate(config), ConfigError);
    config = SceneConfig{};
    config.d_min = -1.0f;
    CHECK_THROWS_AS(validate(config), ConfigError);
    config = SceneConfig{};
    config.d_max = 0.5f;
    CHECK_THROWS_AS(validate(config), ConfigError);
    config = SceneConfig{};
    config.min_objects = 4;
    config.max_objects = 2;
    CHECK_THROWS_AS(validate(config), ConfigError);
    config = SceneConfig{};
    config.noise = -0.1f;
    CHECK_THROWS_AS(validate(config), ConfigError);
    config = SceneConfig{};
    config.ignore_border = 40;
    CHECK_THROWS_AS(validate(config), ConfigError);
}

TEST_CASE("scene config serialization round trips") {
    SceneConfig config = small_config();
    config.noise = 0.05f;
    const SceneConfig back =
        scene_config_from_json(scene_config_to_json(config));
    CHECK(back.height == config.height);
    CHECK(back.width == config.width);
    CHECK(back.num_classes == config.num_classes);
    CHECK(back.noise == config.noise);

    nlohmann::json j = scene_config_to_json(config);
    j.erase("d_min");
    CHECK_THROWS_AS(scene_config_from_json(j), FormatError);
}
