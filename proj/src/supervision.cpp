#include "hitt/supervision.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "hitt/errors.hpp"
#include "hitt/tensor_io.hpp"

namespace hitt {
namespace {

// Mask-true pixel flags as a constant [h, w] tensor plus the count, shared
// by the masked-average losses.
std::pair<Tensor, int> mask_tensor(const std::vector<std::uint8_t>& flags,
                                   int h, int w) {
    Tensor mask = Tensor::zeros({h, w});
    int count = 0;
    for (int p = 0; p < h * w; ++p) {
        if (flags[static_cast<std::size_t>(p)]) {
            mask.data()[p] = 1.0f;
            ++count;
        }
    }
    return {mask, count};
}

void check_task_counts(std::size_t tasks, std::size_t a, std::size_t b,
                       std::size_t c, const char* who) {
    if (a != tasks || b != tasks || c != tasks) {
        throw ShapeError(std::string(who) +
                         ": per-task argument counts disagree");
    }
}

nlohmann::json record_to_json(const TransformRecord& r) {
    return nlohmann::json{{"flip", r.flip},
                          {"crop_y", r.crop_y},
                          {"crop_x", r.crop_x},
                          {"crop_h", r.crop_h},
                          {"crop_w", r.crop_w}};
}

TransformRecord record_from_json(const nlohmann::json& j) {
    TransformRecord r;
    r.flip = j.at("flip").get<bool>();
    r.crop_y = j.at("crop_y").get<int>();
    r.crop_x = j.at("crop_x").get<int>();
    r.crop_h = j.at("crop_h").get<int>();
    r.crop_w = j.at("crop_w").get<int>();
    return r;
}

} // namespace

Tensor feature_confidence_mask(const Tensor& theta, const Tensor& feature) {
    if (theta.rank() != 2 || theta.dim(0) != 1 || feature.rank() != 3 ||
        theta.dim(1) != feature.dim(0)) {
        throw ShapeError("feature_confidence_mask: token " +
                         shape_str(theta.shape()) +
                         " does not match feature " +
                         shape_str(feature.shape()));
    }
    const int c = feature.dim(0);
    const int h = feature.dim(1);
    const int w = feature.dim(2);
    Tensor columns = reshape(feature, {c, h * w});
    return reshape(sigmoid(matmul(theta, columns)), {1, h, w});
}

Tensor feature_loss(const Tensor& current, const Tensor& saved,
                    const Tensor& mask, bool labeled) {
    if (!saved.defined() || saved.numel() == 0) {
        return Tensor::zeros({1}); // no reference features for this task
    }
    if (current.shape() != saved.shape()) {
        throw ShapeError("feature_loss: feature map " +
                         shape_str(current.shape()) +
                         " misaligned with saved map " +
                         shape_str(saved.shape()));
    }
    Tensor diff = sub(current, saved);
    Tensor sq = mul(diff, diff);
    if (labeled) {
        return mean(sq);
    }
    if (mask.rank() != 3 || mask.dim(0) != 1 ||
        mask.dim(1) != current.dim(1) || mask.dim(2) != current.dim(2)) {
        throw ShapeError("feature_loss: mask " + shape_str(mask.shape()) +
                         " misaligned with feature " +
                         shape_str(current.shape()));
    }
    return mean(mul(sq, mask));
}

Tensor feature_loss_total(const std::vector<Tensor>& current,
                          const std::vector<Tensor>& saved,
                          const std::vector<Tensor>& masks,
                          const std::vector<std::uint8_t>& alphas) {
    const std::size_t tasks = alphas.size();
    check_task_counts(tasks, current.size(), saved.size(), masks.size(),
                      "feature_loss_total");
    Tensor sum = Tensor::zeros({1});
    for (std::size_t i = 0; i < tasks; ++i) {
        sum = add(sum, feature_loss(current[i], saved[i], masks[i],
                                    alphas[i] != 0));
    }
    return scale(sum, 1.0f / float(tasks));
}

PseudoLabels discover_pseudo_labels(const Tensor& logits, float tau) {
    if (!(tau > 0.0f) || !(tau < 1.0f)) {
        throw ConfigError("discover_pseudo_labels: threshold " +
                          std::to_string(tau) + " outside (0, 1)");
    }
    if (logits.rank() != 3) {
        throw ShapeError("discover_pseudo_labels: expected [C, h, w], got " +
                         shape_str(logits.shape()));
    }
    PseudoLabels out;
    out.height = logits.dim(1);
    out.width = logits.dim(2);
    out.labels = argmax_channel(logits);
    const std::vector<float> top = max_channel(softmax(logits, 0));
    out.mask.resize(top.size());
    for (std::size_t p = 0; p < top.size(); ++p) {
        out.mask[p] = top[p] > tau ? 1 : 0;
    }
    return out;
}

Tensor pseudo_label_loss(const Tensor& logits, const PseudoLabels& pseudo,
                         bool labeled, const QuantizationSpec& spec) {
    if (labeled || pseudo.labels.empty()) {
        return Tensor::zeros({1}); // labeled, or no pseudo labels exist
    }
    const int h = logits.dim(1);
    const int w = logits.dim(2);
    if (pseudo.height != h || pseudo.width != w ||
        static_cast<int>(pseudo.labels.size()) != h * w ||
        pseudo.mask.size() != pseudo.labels.size()) {
        throw ShapeError("pseudo_label_loss: pseudo labels misaligned with "
                         "logits " + shape_str(logits.shape()));
    }
    // Invalid labels never count, whatever the stored mask says.
    std::vector<std::uint8_t> usable(pseudo.mask.size(), 0);
    for (std::size_t p = 0; p < usable.size(); ++p) {
        const int cls = pseudo.labels[p];
        usable[p] = (pseudo.mask[p] && cls >= 0 && cls < spec.channels &&
                     cls != 255)
                        ? 1
                        : 0;
    }
    auto [mask, count] = mask_tensor(usable, h, w);
    if (count == 0) {
        return Tensor::zeros({1});
    }
    Tensor onehot = encode_onehot_classes(pseudo.labels, h, w, spec);
    Tensor ce_map = sum_axis(mul(onehot, log_softmax(logits, 0)), 0);
    return scale(sum(mul(mask, ce_map)), -1.0f / float(count));
}

Tensor pseudo_label_loss_total(const std::vector<Tensor>& logits,
                               const std::vector<PseudoLabels>& pseudo,
                               const std::vector<std::uint8_t>& alphas,
                               const std::vector<QuantizationSpec>& specs) {
    const std::size_t tasks = alphas.size();
    check_task_counts(tasks, logits.size(), pseudo.size(), specs.size(),
                      "pseudo_label_loss_total");
    Tensor sum = Tensor::zeros({1});
    for (std::size_t i = 0; i < tasks; ++i) {
        sum = add(sum, pseudo_label_loss(logits[i], pseudo[i],
                                         alphas[i] != 0, specs[i]));
    }
    return scale(sum, 1.0f / float(tasks));
}

Tensor supervised_loss(const std::vector<Tensor>& logits,
                       const std::vector<TaskTarget>& targets,
                       const std::vector<std::uint8_t>& alphas,
                       const std::vector<QuantizationSpec>& specs) {
    const std::size_t tasks = alphas.size();
    check_task_counts(tasks, logits.size(), targets.size(), specs.size(),
                      "supervised_loss");
    if (std::none_of(alphas.begin(), alphas.end(),
                     [](std::uint8_t a) { return a != 0; })) {
        throw StateError("supervised_loss: sample has no labeled task");
    }
    Tensor sum = Tensor::zeros({1});
    for (std::size_t i = 0; i < tasks; ++i) {
        if (!alphas[i]) continue;
        const int h = logits[i].dim(1);
        const int w = logits[i].dim(2);
        if (specs[i].kind == TaskKind::semseg) {
            const auto& classes = targets[i].classes;
            if (static_cast<int>(classes.size()) != h * w) {
                throw ShapeError("supervised_loss: class labels misaligned "
                                 "with logits " +
                                 shape_str(logits[i].shape()));
            }
            std::vector<std::uint8_t> valid(classes.size());
            for (std::size_t p = 0; p < classes.size(); ++p) {
                valid[p] = (classes[p] >= 0 && classes[p] != 255) ? 1 : 0;
            }
            Tensor onehot = encode_onehot_classes(classes, h, w, specs[i]);
            sum = add(sum, mixture_loss(logits[i], Tensor(), Tensor(),
                                        onehot, specs[i], valid)
                              .value);
        } else {
            Tensor onehot = encode_onehot(targets[i].values, specs[i]);
            Tensor decoded = soft_decode(logits[i], specs[i]);
            sum = add(sum, mixture_loss(logits[i], decoded,
                                        targets[i].values, onehot, specs[i],
                                        {})
                              .value);
        }
    }
    return scale(sum, 1.0f / float(tasks));
}

Tensor total_loss(const Tensor& supervised, const Tensor& pseudo,
                  const Tensor& feature) {
    for (const Tensor* t : {&supervised, &pseudo, &feature}) {
        if (t->numel() != 1) {
            throw ShapeError("total_loss: expected scalars");
        }
        if (!std::isfinite(t->values()[0])) {
            throw NumericalError("total_loss: non-finite component");
        }
    }
    return add(add(supervised, pseudo), feature);
}

PseudoLabels transform_pseudo(const PseudoLabels& pseudo,
                              const TransformRecord& record, int stride) {
    PseudoLabels out;
    out.labels = transform_classes(pseudo.labels, pseudo.height,
                                   pseudo.width, record, stride);
    std::vector<int> mask_as_int(pseudo.mask.begin(), pseudo.mask.end());
    const std::vector<int> moved = transform_classes(
        mask_as_int, pseudo.height, pseudo.width, record, stride);
    out.mask.assign(moved.begin(), moved.end());
    out.height = record.crop_h / stride;
    out.width = record.crop_w / stride;
    return out;
}

std::vector<int> mirror_normal_bins(const std::vector<int>& labels,
                                    const QuantizationSpec& spec) {
    if (spec.kind != TaskKind::normal) {
        throw StateError("mirror_normal_bins: spec is not a normal task");
    }
    const int k = spec.channels;
    const float* centers = spec.centers.data();
    std::vector<int> lookup(static_cast<std::size_t>(k));
    for (int i = 0; i < k; ++i) {
        const float mx = -centers[i * 3];
        const float my = centers[i * 3 + 1];
        const float mz = centers[i * 3 + 2];
        int best = 0;
        float best_dot = -2.0f;
        for (int j = 0; j < k; ++j) {
            const float dot = mx * centers[j * 3] + my * centers[j * 3 + 1] +
                              mz * centers[j * 3 + 2];
            if (dot > best_dot) {
                best_dot = dot;
                best = j;
            }
        }
        lookup[static_cast<std::size_t>(i)] = best;
    }
    std::vector<int> out(labels.size());
    for (std::size_t p = 0; p < labels.size(); ++p) {
        const int cls = labels[p];
        if (cls < 0 || cls >= k) {
            throw StateError("mirror_normal_bins: label " +
                             std::to_string(cls) + " out of range");
        }
        out[p] = lookup[static_cast<std::size_t>(cls)];
    }
    return out;
}

void save_bundle(const std::string& dir, const PseudoBundle& bundle) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);

    nlohmann::json manifest;
    manifest["tau"] = bundle.tau;
    manifest["checkpoint_hash"] = bundle.checkpoint_hash;

    nlohmann::json samples = nlohmann::json::array();
    for (std::size_t i = 0; i < bundle.samples.size(); ++i) {
        const BundleSample& s = bundle.samples[i];
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%04zu", i);
        const std::string sub = dir + "/" + name;
        fs::create_directories(sub);

        for (std::size_t t = 0; t < s.features.size(); ++t) {
            if (!s.features[t].defined() || s.features[t].numel() == 0) {
                continue;
            }
            write_tensor(sub + "/feature_" + std::to_string(t) + ".htt",
                         s.features[t]);
        }
        for (std::size_t t = 0; t < s.pseudo.size(); ++t) {
            const PseudoLabels& p = s.pseudo[t];
            if (p.labels.empty()) continue;
            Tensor labels = Tensor::zeros({1, p.height, p.width});
            Tensor mask = Tensor::zeros({1, p.height, p.width});
            for (std::size_t q = 0; q < p.labels.size(); ++q) {
                labels.data()[q] = static_cast<float>(p.labels[q]);
                mask.data()[q] = p.mask[q] ? 1.0f : 0.0f;
            }
            const std::string stem = sub + "/pseudo_" + std::to_string(t);
            write_tensor(stem + "_labels.htt", labels);
            write_tensor(stem + "_mask.htt", mask);
        }
        samples.push_back({{"dir", name},
                           {"alpha", s.alpha},
                           {"tasks", s.features.size()},
                           {"record", record_to_json(s.record)}});
    }
    manifest["samples"] = samples;

    std::ofstream out(dir + "/manifest.json");
    if (!out) {
        throw StateError("save_bundle: cannot write to " + dir);
    }
    out << manifest.dump(2) << "\n";
}

PseudoBundle load_bundle(const std::string& dir) {
    std::ifstream in(dir + "/manifest.json");
    if (!in) {
        throw StateError("load_bundle: no manifest in " + dir);
    }
    nlohmann::json manifest;
    try {
        in >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bundle manifest: ") + e.what());
    }

    PseudoBundle bundle;
    try {
        bundle.tau = manifest.at("tau").get<std::vector<float>>();
        bundle.checkpoint_hash =
            manifest.at("checkpoint_hash").get<std::string>();
        for (const auto& entry : manifest.at("samples")) {
            const std::string sub =
                dir + "/" + entry.at("dir").get<std::string>();
            BundleSample s;
            s.alpha = entry.at("alpha").get<std::vector<std::uint8_t>>();
            s.record = record_from_json(entry.at("record"));
            const std::size_t tasks = entry.at("tasks").get<std::size_t>();
            s.features.resize(tasks);
            s.pseudo.resize(tasks);
            for (std::size_t t = 0; t < tasks; ++t) {
                const std::string feat =
                    sub + "/feature_" + std::to_string(t) + ".htt";
                if (std::filesystem::exists(feat)) {
                    s.features[t] = read_tensor(feat);
                }
                const std::string stem =
                    sub + "/pseudo_" + std::to_string(t);
                if (!std::filesystem::exists(stem + "_labels.htt")) {
                    continue;
                }
                const Tensor labels = read_tensor(stem + "_labels.htt");
                const Tensor mask = read_tensor(stem + "_mask.htt");
                if (labels.shape() != mask.shape() || labels.rank() != 3) {
                    throw FormatError("load_bundle: pseudo maps in " + sub +
                                      " are misshapen");
                }
                PseudoLabels p;
                p.height = labels.dim(1);
                p.width = labels.dim(2);
                p.labels.resize(labels.numel());
                p.mask.resize(labels.numel());
                for (std::size_t q = 0; q < labels.numel(); ++q) {
                    p.labels[q] = static_cast<int>(
                        std::lround(labels.values()[q]));
                    p.mask[q] = mask.values()[q] > 0.5f ? 1 : 0;
                }
                s.pseudo[t] = std::move(p);
            }
            bundle.samples.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("bundle manifest: ") + e.what());
    }
    return bundle;
}

} // namespace hitt
