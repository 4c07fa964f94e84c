#include "hitt/quantization.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <set>

#include "hitt/errors.hpp"
#include "hitt/random.hpp"

namespace hitt {
namespace {

void require_kind(const QuantizationSpec& spec, TaskKind want,
                  const char* where) {
    if (spec.kind != want) {
        throw StateError(std::string(where) + ": spec is " +
                         task_kind_name(spec.kind) + ", expected " +
                         task_kind_name(want));
    }
}

int depth_bin(float v, const std::vector<float>& edges) {
    const int n = static_cast<int>(edges.size()) - 1;
    const float lo = edges.front();
    const float hi = edges.back();
    v = std::min(std::max(v, lo), hi);
    const auto it = std::upper_bound(edges.begin(), edges.end(), v);
    int k = static_cast<int>(it - edges.begin()) - 1;
    return std::min(std::max(k, 0), n - 1);
}

int nearest_center(const float* vec, const Tensor& centers) {
    const int k = centers.dim(0);
    int best = 0;
    float best_dot = -2.0f;
    for (int i = 0; i < k; ++i) {
        float dot = 0.0f;
        for (int c = 0; c < 3; ++c) {
            dot += vec[c] * centers.values()[i * 3 + c];
        }
        if (dot > best_dot) {
            best_dot = dot;
            best = i;
        }
    }
    return best;
}

} // namespace

const char* task_kind_name(TaskKind kind) {
    switch (kind) {
        case TaskKind::semseg: return "semseg";
        case TaskKind::depth: return "depth";
        case TaskKind::normal: return "normal";
    }
    return "?";
}

TaskKind task_kind_from_name(const std::string& name) {
    if (name == "semseg") return TaskKind::semseg;
    if (name == "depth") return TaskKind::depth;
    if (name == "normal") return TaskKind::normal;
    throw ConfigError("unknown task kind '" + name + "'");
}

QuantizationSpec make_semseg_spec(int num_classes) {
    if (num_classes < 2) {
        throw ConfigError("make_semseg_spec: need at least two classes");
    }
    QuantizationSpec spec;
    spec.kind = TaskKind::semseg;
    spec.channels = num_classes;
    spec.lambda = 0.0f;
    return spec;
}

QuantizationSpec build_depth_bins(float d_min, float d_max, int n_bins) {
    if (!(d_min > 0.0f) || !(d_max > d_min)) {
        throw ConfigError("build_depth_bins: need 0 < d_min < d_max, got [" +
                          std::to_string(d_min) + ", " + std::to_string(d_max) +
                          "]");
    }
    if (n_bins < 1) {
        throw ConfigError("build_depth_bins: need at least one bin");
    }
    QuantizationSpec spec;
    spec.kind = TaskKind::depth;
    spec.channels = n_bins;
    spec.lambda = 0.1f;
    const double ratio = double(d_max) / double(d_min);
    spec.edges.resize(static_cast<std::size_t>(n_bins) + 1);
    for (int k = 0; k <= n_bins; ++k) {
        spec.edges[static_cast<std::size_t>(k)] = static_cast<float>(
            double(d_min) * std::pow(ratio, double(k) / double(n_bins)));
    }
    spec.centers = Tensor::zeros({n_bins});
    for (int k = 0; k < n_bins; ++k) {
        spec.centers.data()[k] = static_cast<float>(std::sqrt(
            double(spec.edges[k]) * double(spec.edges[k + 1])));
    }
    return spec;
}

QuantizationSpec build_normal_centers(const Tensor& unit_normals, int k,
                                      std::uint64_t seed) {
    if (unit_normals.rank() != 2 || unit_normals.dim(1) != 3) {
        throw ShapeError("build_normal_centers: inputs must be [N, 3], got " +
                         shape_str(unit_normals.shape()));
    }
    const int n = unit_normals.dim(0);
    if (k < 2) {
        throw ConfigError("build_normal_centers: need k >= 2");
    }
    const float* in = unit_normals.values().data();
    std::set<std::array<float, 3>> distinct;
    for (int i = 0; i < n; ++i) {
        distinct.insert({in[i * 3], in[i * 3 + 1], in[i * 3 + 2]});
    }
    if (k > static_cast<int>(distinct.size())) {
        throw StateError("build_normal_centers: k = " + std::to_string(k) +
                         " exceeds the " + std::to_string(distinct.size()) +
                         " distinct input vectors");
    }

    // Farthest-point init: seeded first pick, then repeatedly the input
    // farthest from its nearest chosen center (ties to the lowest index).
    Rng rng(seed);
    std::vector<std::array<float, 3>> centers;
    centers.reserve(static_cast<std::size_t>(k));
    const int first = rng.uniform_int(n);
    centers.push_back({in[first * 3], in[first * 3 + 1], in[first * 3 + 2]});
    std::vector<float> dist2(static_cast<std::size_t>(n));
    while (static_cast<int>(centers.size()) < k) {
        int far = 0;
        float far_d = -1.0f;
        for (int i = 0; i < n; ++i) {
            float best = std::numeric_limits<float>::max();
            for (const auto& c : centers) {
                float d = 0.0f;
                for (int j = 0; j < 3; ++j) {
                    const float t = in[i * 3 + j] - c[j];
                    d += t * t;
                }
                best = std::min(best, d);
            }
            if (best > far_d) {
                far_d = best;
                far = i;
            }
        }
        centers.push_back({in[far * 3], in[far * 3 + 1], in[far * 3 + 2]});
    }

    // Lloyd iterations; empty clusters and degenerate means keep their
    // previous center so every center stays a unit vector.
    std::vector<int> assign(static_cast<std::size_t>(n));
    for (int iter = 0; iter < 50; ++iter) {
        for (int i = 0; i < n; ++i) {
            int best = 0;
            float best_d = std::numeric_limits<float>::max();
            for (int c = 0; c < k; ++c) {
                float d = 0.0f;
                for (int j = 0; j < 3; ++j) {
                    const float t = in[i * 3 + j] - centers[c][j];
                    d += t * t;
                }
                if (d < best_d) {
                    best_d = d;
                    best = c;
                }
            }
            assign[static_cast<std::size_t>(i)] = best;
        }
        for (int c = 0; c < k; ++c) {
            double acc[3] = {0.0, 0.0, 0.0};
            int count = 0;
            for (int i = 0; i < n; ++i) {
                if (assign[static_cast<std::size_t>(i)] != c) continue;
                for (int j = 0; j < 3; ++j) acc[j] += in[i * 3 + j];
                ++count;
            }
            if (count == 0) continue;
            const double norm =
                std::sqrt(acc[0] * acc[0] + acc[1] * acc[1] + acc[2] * acc[2]);
            if (norm < 1e-12) continue;
            for (int j = 0; j < 3; ++j) {
                centers[c][j] = static_cast<float>(acc[j] / norm);
            }
        }
    }

    QuantizationSpec spec;
    spec.kind = TaskKind::normal;
    spec.channels = k;
    spec.lambda = 0.1f;
    spec.centers = Tensor::zeros({k, 3});
    for (int c = 0; c < k; ++c) {
        for (int j = 0; j < 3; ++j) {
            spec.centers.data()[c * 3 + j] = centers[c][j];
        }
    }
    return spec;
}

std::vector<int> quantize_indices(const Tensor& label,
                                  const QuantizationSpec& spec) {
    if (spec.kind == TaskKind::depth) {
        if (label.rank() != 3 || label.dim(0) != 1) {
            throw ShapeError("quantize_indices: depth label must be "
                             "[1, h, w], got " + shape_str(label.shape()));
        }
        std::vector<int> out(label.numel());
        for (std::size_t i = 0; i < label.numel(); ++i) {
            out[i] = depth_bin(label.values()[i], spec.edges);
        }
        return out;
    }
    if (spec.kind == TaskKind::normal) {
        if (label.rank() != 3 || label.dim(0) != 3) {
            throw ShapeError("quantize_indices: normal label must be "
                             "[3, h, w], got " + shape_str(label.shape()));
        }
        const int hw = label.dim(1) * label.dim(2);
        std::vector<int> out(static_cast<std::size_t>(hw));
        for (int p = 0; p < hw; ++p) {
            const float vec[3] = {label.values()[p],
                                  label.values()[hw + p],
                                  label.values()[2 * hw + p]};
            out[static_cast<std::size_t>(p)] = nearest_center(vec, spec.centers);
        }
        return out;
    }
    throw StateError("quantize_indices: semseg labels are already indices");
}

Tensor encode_onehot(const Tensor& label, const QuantizationSpec& spec) {
    const std::vector<int> idx = quantize_indices(label, spec);
    const int h = label.dim(1);
    const int w = label.dim(2);
    Tensor out = Tensor::zeros({spec.channels, h, w});
    for (int p = 0; p < h * w; ++p) {
        out.data()[idx[static_cast<std::size_t>(p)] * h * w + p] = 1.0f;
    }
    return out;
}

Tensor encode_onehot_classes(const std::vector<int>& classes, int h, int w,
                             const QuantizationSpec& spec) {
    if (static_cast<int>(classes.size()) != h * w) {
        throw ShapeError("encode_onehot_classes: got " +
                         std::to_string(classes.size()) + " labels for a " +
                         std::to_string(h) + "x" + std::to_string(w) + " grid");
    }
    Tensor out = Tensor::zeros({spec.channels, h, w});
    for (int p = 0; p < h * w; ++p) {
        const int c = classes[static_cast<std::size_t>(p)];
        if (c < 0 || c == 255) continue; // ignore label: all-zero column
        if (c >= spec.channels) {
            throw StateError("encode_onehot_classes: class " +
                             std::to_string(c) + " out of range for " +
                             std::to_string(spec.channels) + " channels");
        }
        out.data()[c * h * w + p] = 1.0f;
    }
    return out;
}

Tensor soft_decode(const Tensor& logits, const QuantizationSpec& spec) {
    if (spec.kind == TaskKind::semseg) {
        throw StateError("soft_decode: semseg spec has no centers to decode");
    }
    if (logits.rank() != 3 || logits.dim(0) != spec.channels) {
        throw ShapeError("soft_decode: logits " + shape_str(logits.shape()) +
                         " do not match " + std::to_string(spec.channels) +
                         " channels");
    }
    const int h = logits.dim(1);
    const int w = logits.dim(2);
    Tensor weights = reshape(softmax(logits, 0), {spec.channels, h * w});
    if (spec.kind == TaskKind::depth) {
        Tensor row = reshape(spec.centers, {1, spec.channels});
        return reshape(matmul(row, weights), {1, h, w});
    }
    Tensor mixed = reshape(matmul(transpose2d(spec.centers), weights),
                           {3, h, w});
    Tensor inv_norm = rsqrt(sum_axis(mul(mixed, mixed), 0), 1e-12f);
    return mul(mixed, reshape(inv_norm, {1, h, w}));
}

MixtureLossResult mixture_loss(const Tensor& logits, const Tensor& decoded,
                               const Tensor& target, const Tensor& onehot,
                               const QuantizationSpec& spec,
                               const std::vector<std::uint8_t>& valid) {
    const int h = logits.dim(1);
    const int w = logits.dim(2);
    const int hw = h * w;
    if (!valid.empty() && static_cast<int>(valid.size()) != hw) {
        throw ShapeError("mixture_loss: valid mask has " +
                         std::to_string(valid.size()) + " entries for " +
                         std::to_string(hw) + " pixels");
    }

    MixtureLossResult out;
    Tensor mask = Tensor::zeros({h, w});
    int count = 0;
    for (int p = 0; p < hw; ++p) {
        const bool ok = valid.empty() || valid[static_cast<std::size_t>(p)];
        if (ok) {
            mask.data()[p] = 1.0f;
            ++count;
        }
    }
    out.valid_count = count;
    if (count == 0) {
        out.empty_valid = true;
        out.value = Tensor::zeros({1});
        return out;
    }

    Tensor ce_map = sum_axis(mul(onehot, log_softmax(logits, 0)), 0);
    Tensor loss = scale(sum(mul(mask, ce_map)), -1.0f / float(count));

    if (spec.kind == TaskKind::depth) {
        Tensor l1 = sum_axis(abs_val(sub(decoded, target)), 0);
        loss = add(loss, scale(sum(mul(mask, l1)),
                               spec.lambda / float(count)));
    } else if (spec.kind == TaskKind::normal) {
        Tensor cos_map = sum_axis(mul(decoded, target), 0);
        Tensor mean_cos = scale(sum(mul(mask, cos_map)), 1.0f / float(count));
        loss = add(loss, scale(add_scalar(scale(mean_cos, -1.0f), 1.0f),
                               spec.lambda));
    }
    out.value = loss;
    return out;
}

nlohmann::json quantization_to_json(const QuantizationSpec& spec) {
    nlohmann::json j;
    j["kind"] = task_kind_name(spec.kind);
    j["channels"] = spec.channels;
    j["lambda"] = spec.lambda;
    if (spec.kind == TaskKind::depth) {
        j["edges"] = spec.edges;
        j["centers"] = spec.centers.values();
    } else if (spec.kind == TaskKind::normal) {
        std::vector<std::vector<float>> rows;
        for (int c = 0; c < spec.channels; ++c) {
            rows.push_back({spec.centers.values()[c * 3],
                            spec.centers.values()[c * 3 + 1],
                            spec.centers.values()[c * 3 + 2]});
        }
        j["centers"] = rows;
    }
    return j;
}

QuantizationSpec quantization_from_json(const nlohmann::json& j) {
    QuantizationSpec spec;
    try {
        spec.kind = task_kind_from_name(j.at("kind").get<std::string>());
        spec.channels = j.at("channels").get<int>();
        spec.lambda = j.at("lambda").get<float>();
        if (spec.kind == TaskKind::depth) {
            spec.edges = j.at("edges").get<std::vector<float>>();
            const auto centers = j.at("centers").get<std::vector<float>>();
            spec.centers = Tensor::zeros({spec.channels});
            std::copy(centers.begin(), centers.end(), spec.centers.data());
        } else if (spec.kind == TaskKind::normal) {
            const auto rows =
                j.at("centers").get<std::vector<std::vector<float>>>();
            spec.centers = Tensor::zeros({spec.channels, 3});
            for (int c = 0; c < spec.channels; ++c) {
                for (int k = 0; k < 3; ++k) {
                    spec.centers.data()[c * 3 + k] =
                        rows[static_cast<std::size_t>(c)]
                            [static_cast<std::size_t>(k)];
                }
            }
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("quantization spec: ") + e.what());
    }
    if (spec.kind == TaskKind::depth &&
        static_cast<int>(spec.edges.size()) != spec.channels + 1) {
        throw FormatError("quantization spec: edge count does not match bins");
    }
    return spec;
}

} // namespace hitt
