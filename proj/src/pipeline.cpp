#include "hitt/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <thread>

#include "hitt/errors.hpp"

namespace hitt {

namespace {

void check_specs(const ModelConfig& model_config,
                 const std::vector<QuantizationSpec>& specs) {
    if (specs.size() != model_config.tasks.size()) {
        throw ConfigError("quantization spec count does not match task count");
    }
    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (specs[i].kind != model_config.tasks[i].kind) {
            throw ConfigError("quantization spec kind mismatch at task " +
                              std::to_string(i));
        }
        if (specs[i].channels != model_config.tasks[i].channels) {
            throw ConfigError("quantization spec channels mismatch at task " +
                              std::to_string(i));
        }
    }
}

void check_dataset(const PartialDataset& data, std::size_t task_count) {
    if (data.scenes.empty()) {
        throw StateError("dataset has no scenes");
    }
    if (data.alpha.size() != data.scenes.size()) {
        throw StateError("label table does not cover every scene");
    }
    for (const auto& row : data.alpha) {
        if (row.size() != task_count) {
            throw StateError("label table row does not match task count");
        }
    }
}

// Run fn(0..count-1), possibly on worker_threads() threads. Each index is
// processed exactly once; exceptions are re-thrown on the caller.
void parallel_for(int count, const std::function<void(int)>& fn) {
    const int threads = std::min(worker_threads(), count);
    if (threads <= 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const int i = next.fetch_add(1);
            if (i >= count) return;
            try {
                fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                return;
            }
        }
    };
    std::vector<std::thread> pool;
    pool.reserve(threads);
    for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::vector<TaskTarget> targets_from_labels(const FeatureLabels& labels,
                                            const ModelConfig& model_config) {
    std::vector<TaskTarget> targets(model_config.tasks.size());
    for (std::size_t t = 0; t < model_config.tasks.size(); ++t) {
        switch (model_config.tasks[t].kind) {
            case TaskKind::semseg:
                targets[t].classes = labels.semseg;
                break;
            case TaskKind::depth:
                targets[t].values = labels.depth;
                break;
            case TaskKind::normal:
                targets[t].values = labels.normal;
                break;
        }
    }
    return targets;
}

struct SgdState {
    std::vector<std::vector<float>> velocity;
};

void sgd_step(const NamedTensors& params, SgdState& state, float lr,
              float momentum) {
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor param = params[k].second;
        if (!param.has_grad()) continue;
        std::vector<float>& v = state.velocity[k];
        if (v.size() != param.numel()) v.assign(param.numel(), 0.0f);
        const std::vector<float>& g = param.grad_values();
        float* w = param.data();
        for (std::size_t i = 0; i < v.size(); ++i) {
            v[i] = momentum * v[i] + g[i];
            w[i] -= lr * v[i];
        }
        param.zero_grad();
    }
}

TrainResult run_training(const PartialDataset& data,
                         const PseudoBundle* bundle,
                         const std::vector<QuantizationSpec>& specs,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config) {
    validate_model_config(model_config);
    validate_train_config(train_config);
    check_specs(model_config, specs);
    const std::size_t task_count = model_config.tasks.size();
    check_dataset(data, task_count);
    const int sample_count = int(data.scenes.size());

    if (bundle) {
        if (bundle->samples.size() != data.scenes.size()) {
            throw StateError("bundle does not cover every training sample");
        }
        if (bundle->tau.size() != task_count) {
            throw StateError("bundle threshold count does not match tasks");
        }
        for (int i = 0; i < sample_count; ++i) {
            const BundleSample& sample = bundle->samples[i];
            if (sample.features.size() != task_count ||
                sample.pseudo.size() != task_count ||
                sample.alpha != data.alpha[i]) {
                throw StateError("bundle entry " + std::to_string(i) +
                                 " does not match the dataset");
            }
        }
    }

    Model model(model_config);
    const int stride = model.prediction_stride();
    Rng rng(train_config.seed);
    SgdState opt;
    opt.velocity.resize(model.params().size());

    std::vector<int> order(sample_count);
    std::iota(order.begin(), order.end(), 0);
    std::vector<LossRow> curve;
    curve.reserve(train_config.epochs);

    for (int epoch = 1; epoch <= train_config.epochs; ++epoch) {
        const float lr = scheduled_lr(train_config, epoch);
        rng.shuffle(order);
        double sum_s = 0.0, sum_p = 0.0, sum_f = 0.0, sum_t = 0.0;

        for (const int idx : order) {
            const Scene& base = data.scenes[idx];
            TransformRecord record =
                identity_transform(base.height, base.width);
            Scene cropped;
            const Scene* view = &base;
            if (train_config.augment) {
                int crop = train_config.crop;
                if (crop == 0) {
                    crop = std::min(base.height, base.width) / stride * stride;
                }
                record = draw_transform(rng, base.height, base.width, crop,
                                        stride);
                cropped = apply_transform(base, record);
                view = &cropped;
            }
            const FeatureLabels labels =
                downsample_scene_labels(*view, stride);
            const std::vector<TaskTarget> targets =
                targets_from_labels(labels, model_config);
            const std::vector<std::uint8_t>& alpha = data.alpha[idx];

            float step_s = 0.0f, step_p = 0.0f, step_f = 0.0f,
                  step_t = 0.0f;
            {
                GradientTape tape;
                const ForwardResult out = model.forward(view->image);
                Tensor loss_s =
                    supervised_loss(out.logits, targets, alpha, specs);
                Tensor loss_p = Tensor::zeros({1});
                Tensor loss_f = Tensor::zeros({1});
                if (bundle) {
                    const BundleSample& saved = bundle->samples[idx];
                    std::vector<Tensor> reference(task_count);
                    std::vector<Tensor> masks(task_count);
                    std::vector<PseudoLabels> pseudo(task_count);
                    for (std::size_t t = 0; t < task_count; ++t) {
                        if (saved.features[t].defined()) {
                            reference[t] =
                                train_config.augment
                                    ? transform_map(saved.features[t], record,
                                                    stride)
                                    : saved.features[t];
                            if (!alpha[t]) {
                                const auto& shape = out.features[t].shape();
                                masks[t] =
                                    out.tokens.empty()
                                        ? Tensor::full(
                                              {1, shape[1], shape[2]}, 1.0f)
                                        : feature_confidence_mask(
                                              out.tokens[t], out.features[t]);
                            }
                        }
                        if (!alpha[t] && !saved.pseudo[t].labels.empty()) {
                            PseudoLabels moved = transform_pseudo(
                                saved.pseudo[t], record, stride);
                            if (record.flip &&
                                specs[t].kind == TaskKind::normal) {
                                moved.labels =
                                    mirror_normal_bins(moved.labels, specs[t]);
                            }
                            pseudo[t] = std::move(moved);
                        }
                    }
                    loss_p = pseudo_label_loss_total(out.logits, pseudo,
                                                     alpha, specs);
                    loss_f = feature_loss_total(out.features, reference,
                                                masks, alpha);
                }
                Tensor total;
                try {
                    total = total_loss(loss_s, loss_p, loss_f);
                } catch (const NumericalError& e) {
                    throw NumericalError(
                        std::string(e.what()) + " (epoch " +
                        std::to_string(epoch) + ", sample " +
                        std::to_string(idx) + ")");
                }
                tape.backward(total);
                step_s = loss_s.values()[0];
                step_p = loss_p.values()[0];
                step_f = loss_f.values()[0];
                step_t = total.values()[0];
            }
            sgd_step(model.params(), opt, lr, train_config.momentum);
            sum_s += step_s;
            sum_p += step_p;
            sum_f += step_f;
            sum_t += step_t;
        }

        curve.push_back({epoch, sum_s / sample_count, sum_p / sample_count,
                         sum_f / sample_count, sum_t / sample_count});
    }
    return TrainResult{std::move(model), std::move(curve)};
}

void append_double(std::string& out, double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    out += buf;
}

} // namespace

int worker_threads() {
    const char* env = std::getenv("HITT_THREADS");
    if (!env) return 1;
    const int n = std::atoi(env);
    return n < 1 ? 1 : n;
}

void validate_train_config(const TrainConfig& config) {
    if (config.epochs < 1) {
        throw ConfigError("epochs must be at least 1");
    }
    if (!(config.lr > 0.0f) || !std::isfinite(config.lr)) {
        throw ConfigError("learning rate must be positive and finite");
    }
    if (!(config.momentum >= 0.0f) || config.momentum >= 1.0f) {
        throw ConfigError("momentum must lie in [0, 1)");
    }
    if (config.crop < 0) {
        throw ConfigError("crop must be non-negative");
    }
}

float scheduled_lr(const TrainConfig& config, int epoch) {
    float lr = config.lr;
    if (epoch > config.epochs * 6 / 10) lr *= 0.5f;
    if (epoch > config.epochs * 85 / 100) lr *= 0.5f;
    return lr;
}

std::vector<QuantizationSpec> build_task_specs(
    const PartialDataset& data, const SceneConfig& scene_config,
    const ModelConfig& model_config, std::uint64_t seed) {
    validate_model_config(model_config);
    if (data.scenes.empty()) {
        throw StateError("cannot build task specs from an empty dataset");
    }
    std::vector<QuantizationSpec> specs;
    specs.reserve(model_config.tasks.size());
    for (const ModelTask& task : model_config.tasks) {
        switch (task.kind) {
            case TaskKind::semseg: {
                if (task.channels != scene_config.num_classes) {
                    throw ConfigError(
                        "segmentation channels (" +
                        std::to_string(task.channels) +
                        ") must equal the scene class count (" +
                        std::to_string(scene_config.num_classes) + ")");
                }
                specs.push_back(make_semseg_spec(task.channels));
                break;
            }
            case TaskKind::depth:
                specs.push_back(build_depth_bins(
                    scene_config.d_min, scene_config.d_max, task.channels));
                break;
            case TaskKind::normal: {
                // Every 5th pixel from a handful of scenes is plenty for a
                // handful of cluster centers.
                const std::size_t scene_count =
                    std::min<std::size_t>(data.scenes.size(), 6);
                std::vector<float> stacked;
                for (std::size_t s = 0; s < scene_count; ++s) {
                    const Tensor& normal = data.scenes[s].normal;
                    const auto& shape = normal.shape();
                    const int hw = shape[1] * shape[2];
                    const std::vector<float>& v = normal.values();
                    for (int p = 0; p < hw; p += 5) {
                        stacked.push_back(v[p]);
                        stacked.push_back(v[hw + p]);
                        stacked.push_back(v[2 * hw + p]);
                    }
                }
                const int count = int(stacked.size()) / 3;
                Tensor samples =
                    Tensor::from({count, 3}, std::move(stacked));
                specs.push_back(
                    build_normal_centers(samples, task.channels, seed));
                break;
            }
        }
    }
    return specs;
}

TrainResult train_stage1(const PartialDataset& data,
                         const std::vector<QuantizationSpec>& specs,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config) {
    return run_training(data, nullptr, specs, model_config, train_config);
}

TrainResult train_stage2(const PartialDataset& data,
                         const PseudoBundle& bundle,
                         const std::vector<QuantizationSpec>& specs,
                         const ModelConfig& model_config,
                         const TrainConfig& train_config) {
    return run_training(data, &bundle, specs, model_config, train_config);
}

PseudoBundle discover_bundle(const Model& model, const PartialDataset& data,
                             const std::vector<float>& tau,
                             const std::string& checkpoint_hash) {
    const std::size_t task_count = model.config().tasks.size();
    check_dataset(data, task_count);
    if (tau.size() != task_count) {
        throw ConfigError("need one confidence threshold per task");
    }

    PseudoBundle bundle;
    bundle.tau = tau;
    bundle.checkpoint_hash = checkpoint_hash;
    bundle.samples.resize(data.scenes.size());
    parallel_for(int(data.scenes.size()), [&](int i) {
        const Scene& scene = data.scenes[i];
        const ForwardResult out = model.forward(scene.image);
        BundleSample sample;
        sample.alpha = data.alpha[i];
        sample.record = identity_transform(scene.height, scene.width);
        sample.features.resize(task_count);
        sample.pseudo.resize(task_count);
        for (std::size_t t = 0; t < task_count; ++t) {
            sample.features[t] = out.features[t].detach();
            if (!sample.alpha[t]) {
                sample.pseudo[t] =
                    discover_pseudo_labels(out.logits[t], tau[t]);
            }
        }
        bundle.samples[i] = std::move(sample);
    });
    return bundle;
}

MetricsReport evaluate_model(const Model& model,
                             const std::vector<Scene>& scenes,
                             const std::vector<QuantizationSpec>& specs,
                             const EvalOptions& options) {
    if (scenes.empty()) {
        throw StateError("evaluation needs at least one scene");
    }
    check_specs(model.config(), specs);
    const std::size_t task_count = specs.size();
    const int stride = model.prediction_stride();
    if (!options.at_prediction_grid) {
        for (const Scene& scene : scenes) {
            if (scene.height % stride != 0 || scene.width % stride != 0) {
                throw ShapeError(
                    "scene dimensions must be multiples of the prediction "
                    "stride " +
                    std::to_string(stride) + " for full-resolution scoring");
            }
        }
    }

    struct ScenePrediction {
        std::vector<std::vector<int>> classes;  // per task (semseg only)
        std::vector<Tensor> decoded;            // per task (depth/normal)
    };
    std::vector<ScenePrediction> predictions(scenes.size());

    parallel_for(int(scenes.size()), [&](int i) {
        const ForwardResult out = model.forward(scenes[i].image);
        ScenePrediction pred;
        pred.classes.resize(task_count);
        pred.decoded.resize(task_count);
        for (std::size_t t = 0; t < task_count; ++t) {
            if (specs[t].kind == TaskKind::semseg) {
                std::vector<int> cls = argmax_channel(out.logits[t]);
                if (!options.at_prediction_grid) {
                    const auto& shape = out.logits[t].shape();
                    const int h = shape[1], w = shape[2];
                    std::vector<int> full(std::size_t(h) * w * stride *
                                          stride);
                    for (int y = 0; y < h * stride; ++y) {
                        for (int x = 0; x < w * stride; ++x) {
                            full[std::size_t(y) * (w * stride) + x] =
                                cls[std::size_t(y / stride) * w + x / stride];
                        }
                    }
                    cls = std::move(full);
                }
                pred.classes[t] = std::move(cls);
            } else {
                Tensor decoded = soft_decode(out.logits[t], specs[t]);
                if (!options.at_prediction_grid) {
                    decoded = upsample_nearest(decoded, stride);
                }
                pred.decoded[t] = decoded;
            }
        }
        predictions[i] = std::move(pred);
    });

    MetricsReport report;
    report.setting = options.setting;
    report.stage = options.stage;
    report.seed = options.seed;

    for (std::size_t t = 0; t < task_count; ++t) {
        switch (specs[t].kind) {
            case TaskKind::semseg: {
                SemsegAccum accum(specs[t].channels);
                for (std::size_t i = 0; i < scenes.size(); ++i) {
                    const std::vector<int> gt =
                        options.at_prediction_grid
                            ? downsample_scene_labels(scenes[i], stride)
                                  .semseg
                            : scenes[i].semseg;
                    accum.add(predictions[i].classes[t], gt);
                }
                report.values["semseg.miou"] = accum.miou();
                report.values["semseg.pacc"] = accum.pixel_acc();
                break;
            }
            case TaskKind::depth: {
                DepthAccum accum;
                for (std::size_t i = 0; i < scenes.size(); ++i) {
                    const Tensor gt =
                        options.at_prediction_grid
                            ? downsample_scene_labels(scenes[i], stride).depth
                            : scenes[i].depth;
                    accum.add(predictions[i].decoded[t], gt);
                }
                report.values["depth.abs"] = accum.abs_err();
                report.values["depth.rmse"] = accum.rmse();
                break;
            }
            case TaskKind::normal: {
                NormalAccum accum;
                for (std::size_t i = 0; i < scenes.size(); ++i) {
                    const Tensor gt =
                        options.at_prediction_grid
                            ? downsample_scene_labels(scenes[i], stride)
                                  .normal
                            : scenes[i].normal;
                    accum.add(predictions[i].decoded[t], gt);
                }
                report.values["normal.mean_err"] = accum.mean_err();
                report.values["normal.rmse_angle"] = accum.rmse_angle();
                report.values["normal.eta_1125"] = accum.eta_1125();
                report.values["normal.eta_225"] = accum.eta_225();
                report.values["normal.eta_30"] = accum.eta_30();
                break;
            }
        }
    }
    return report;
}

MetricsReport attach_baseline(MetricsReport multi, const MetricsReport& single,
                              const std::vector<MetricDirection>& metrics) {
    multi.delta = delta_mtl(multi, single, metrics);
    multi.has_delta = true;
    for (const MetricDirection& metric : metrics) {
        multi.baseline[metric.name] = single.values.at(metric.name);
    }
    return multi;
}

void write_loss_csv(const std::string& path,
                    const std::vector<LossRow>& curve) {
    std::string text = "epoch,supervised,pseudo,feature,total\n";
    for (const LossRow& row : curve) {
        text += std::to_string(row.epoch);
        for (const double v :
             {row.supervised, row.pseudo, row.feature, row.total}) {
            text += ',';
            append_double(text, v);
        }
        text += '\n';
    }
    std::ofstream file(path, std::ios::binary);
    if (!file || !(file << text)) {
        throw StateError("cannot write loss curve to " + path);
    }
}

void write_metrics_csv(const std::string& path, const MetricsReport& report) {
    std::string text = "metric,value\n";
    for (const auto& [name, value] : report.values) {
        text += name;
        text += ',';
        append_double(text, value);
        text += '\n';
    }
    for (const auto& [name, value] : report.baseline) {
        text += "baseline." + name;
        text += ',';
        append_double(text, value);
        text += '\n';
    }
    if (report.has_delta) {
        text += "delta_mtl,";
        append_double(text, report.delta);
        text += '\n';
    }
    std::ofstream file(path, std::ios::binary);
    if (!file || !(file << text)) {
        throw StateError("cannot write metrics to " + path);
    }
}

} // namespace hitt
