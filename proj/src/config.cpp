#include "hitt/config.hpp"

#include <fstream>
#include <initializer_list>
#include <string>

#include "hitt/errors.hpp"

namespace hitt {

namespace {

std::string dotted(const std::string& section, const std::string& key) {
    return section.empty() ? key : section + "." + key;
}

void check_keys(const nlohmann::json& obj, const std::string& section,
                std::initializer_list<const char*> allowed) {
    if (!obj.is_object()) {
        throw ConfigError("config section '" +
                          (section.empty() ? std::string("<root>") : section) +
                          "' must be a JSON object");
    }
    for (const auto& item : obj.items()) {
        bool known = false;
        for (const char* name : allowed) {
            if (item.key() == name) {
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("unknown config key \"" +
                              dotted(section, item.key()) + "\"");
        }
    }
}

template <typename T>
void read_field(const nlohmann::json& obj, const std::string& section,
                const char* key, T& out) {
    const auto it = obj.find(key);
    if (it == obj.end()) return;
    try {
        out = it->get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError("config key \"" + dotted(section, key) +
                          "\" has the wrong type");
    }
}

float default_tau(TaskKind kind) {
    switch (kind) {
        case TaskKind::semseg: return 0.9f;
        case TaskKind::depth: return 0.45f;
        case TaskKind::normal: return 0.6f;
    }
    return 0.5f;
}

int task_channels(TaskKind kind, const ExperimentConfig& config) {
    switch (kind) {
        case TaskKind::semseg: return config.scene.num_classes;
        case TaskKind::depth: return config.depth_bins;
        case TaskKind::normal: return config.normal_centers;
    }
    return 0;
}

} // namespace

ExperimentConfig default_experiment() {
    ExperimentConfig config;
    config.scene = SceneConfig{};  // 64x64, 4 classes, 2-6 objects

    config.model.channels = 32;
    config.model.variant = "hitt";
    config.model.multi_scale = false;
    config.model.seed = 1;
    config.model.tasks = {{TaskKind::semseg, config.scene.num_classes},
                          {TaskKind::depth, config.depth_bins},
                          {TaskKind::normal, config.normal_centers}};

    config.training.epochs = 60;
    config.training.lr = 0.02f;
    config.training.momentum = 0.9f;
    config.training.augment = true;
    config.training.crop = 48;
    config.training.seed = 1;

    config.tau = {0.9f, 0.45f, 0.6f};
    return config;
}

ExperimentConfig experiment_from_json(const nlohmann::json& j) {
    check_keys(j, "",
               {"dataset", "model", "training", "discovery", "report",
                "paths"});
    ExperimentConfig config = default_experiment();

    if (j.contains("dataset")) {
        const nlohmann::json& d = j.at("dataset");
        check_keys(d, "dataset",
                   {"height", "width", "classes", "min_objects",
                    "max_objects", "noise", "ignore_border", "train_count",
                    "test_count", "setting", "few_shot_task",
                    "few_shot_count", "seed"});
        read_field(d, "dataset", "height", config.scene.height);
        read_field(d, "dataset", "width", config.scene.width);
        read_field(d, "dataset", "classes", config.scene.num_classes);
        read_field(d, "dataset", "min_objects", config.scene.min_objects);
        read_field(d, "dataset", "max_objects", config.scene.max_objects);
        read_field(d, "dataset", "noise", config.scene.noise);
        read_field(d, "dataset", "ignore_border",
                   config.scene.ignore_border);
        read_field(d, "dataset", "train_count", config.train_count);
        read_field(d, "dataset", "test_count", config.test_count);
        std::string setting = split_setting_name(config.setting);
        read_field(d, "dataset", "setting", setting);
        config.setting = split_setting_from_name(setting);
        read_field(d, "dataset", "few_shot_task", config.few_shot_task);
        read_field(d, "dataset", "few_shot_count", config.few_shot_count);
        read_field(d, "dataset", "seed", config.dataset_seed);
    }

    if (j.contains("model")) {
        const nlohmann::json& m = j.at("model");
        check_keys(m, "model",
                   {"channels", "variant", "multi_scale", "depth_bins",
                    "normal_centers", "seed", "tasks"});
        read_field(m, "model", "channels", config.model.channels);
        read_field(m, "model", "variant", config.model.variant);
        read_field(m, "model", "multi_scale", config.model.multi_scale);
        read_field(m, "model", "depth_bins", config.depth_bins);
        read_field(m, "model", "normal_centers", config.normal_centers);
        read_field(m, "model", "seed", config.model.seed);
        if (m.contains("tasks")) {
            std::vector<std::string> names;
            read_field(m, "model", "tasks", names);
            config.model.tasks.clear();
            for (const std::string& name : names) {
                config.model.tasks.push_back({task_kind_from_name(name), 0});
            }
        }
    }
    // Channel counts follow the class/bin/center settings.
    for (ModelTask& task : config.model.tasks) {
        task.channels = task_channels(task.kind, config);
    }
    config.tau.clear();
    for (const ModelTask& task : config.model.tasks) {
        config.tau.push_back(default_tau(task.kind));
    }

    if (j.contains("training")) {
        const nlohmann::json& t = j.at("training");
        check_keys(t, "training",
                   {"epochs", "lr", "momentum", "augment", "crop", "seed"});
        read_field(t, "training", "epochs", config.training.epochs);
        read_field(t, "training", "lr", config.training.lr);
        read_field(t, "training", "momentum", config.training.momentum);
        read_field(t, "training", "augment", config.training.augment);
        read_field(t, "training", "crop", config.training.crop);
        read_field(t, "training", "seed", config.training.seed);
    }

    if (j.contains("discovery")) {
        const nlohmann::json& d = j.at("discovery");
        check_keys(d, "discovery", {"tau"});
        if (d.contains("tau")) {
            const nlohmann::json& taus = d.at("tau");
            check_keys(taus, "discovery.tau", {"semseg", "depth", "normal"});
            for (const auto& item : taus.items()) {
                const TaskKind kind = task_kind_from_name(item.key());
                bool matched = false;
                for (std::size_t i = 0; i < config.model.tasks.size(); ++i) {
                    if (config.model.tasks[i].kind == kind) {
                        read_field(taus, "discovery.tau", item.key().c_str(),
                                   config.tau[i]);
                        matched = true;
                    }
                }
                if (!matched) {
                    throw ConfigError("config key \"discovery.tau." +
                                      item.key() +
                                      "\" has no matching model task");
                }
            }
        }
    }

    if (j.contains("report")) {
        const nlohmann::json& r = j.at("report");
        check_keys(r, "report", {"metrics"});
        std::string metrics = config.full_metric_set ? "full" : "headline";
        read_field(r, "report", "metrics", metrics);
        if (metrics == "full") {
            config.full_metric_set = true;
        } else if (metrics == "headline") {
            config.full_metric_set = false;
        } else {
            throw ConfigError(
                "config key \"report.metrics\" must be \"headline\" or "
                "\"full\"");
        }
    }

    if (j.contains("paths")) {
        const nlohmann::json& p = j.at("paths");
        check_keys(p, "paths", {"dataset", "stage1", "bundle", "stage2"});
        read_field(p, "paths", "dataset", config.dataset_path);
        read_field(p, "paths", "stage1", config.stage1_path);
        read_field(p, "paths", "bundle", config.bundle_path);
        read_field(p, "paths", "stage2", config.stage2_path);
    }

    validate_experiment(config);
    return config;
}

void validate_experiment(const ExperimentConfig& config) {
    validate(config.scene);
    validate_model_config(config.model);
    validate_train_config(config.training);

    if (config.train_count < 1 || config.test_count < 1) {
        throw ConfigError("train_count and test_count must be at least 1");
    }
    const int stride = config.model.multi_scale ? 4 : 8;
    if (config.scene.height % stride != 0 ||
        config.scene.width % stride != 0) {
        throw ConfigError(
            "scene dimensions must be multiples of the prediction stride " +
            std::to_string(stride));
    }
    if (config.training.crop != 0) {
        if (config.training.crop % stride != 0) {
            throw ConfigError("training.crop must be a multiple of the "
                              "prediction stride " + std::to_string(stride));
        }
        if (config.training.crop >
            std::min(config.scene.height, config.scene.width)) {
            throw ConfigError("training.crop exceeds the scene size");
        }
    }
    bool has_depth = false, has_normal = false;
    for (const ModelTask& task : config.model.tasks) {
        if (task.kind == TaskKind::depth) has_depth = true;
        if (task.kind == TaskKind::normal) has_normal = true;
    }
    if (has_depth && config.depth_bins < 2) {
        throw ConfigError("model.depth_bins must be at least 2");
    }
    if (has_normal && config.normal_centers < 2) {
        throw ConfigError("model.normal_centers must be at least 2");
    }
    if (config.tau.size() != config.model.tasks.size()) {
        throw ConfigError("need one discovery threshold per task");
    }
    for (const float t : config.tau) {
        if (!(t > 0.0f) || !(t < 1.0f)) {
            throw ConfigError(
                "discovery thresholds must lie strictly between 0 and 1");
        }
    }
    if (config.setting == SplitSetting::few_shot) {
        const int tasks = int(config.model.tasks.size());
        if (config.few_shot_task < 0 || config.few_shot_task >= tasks) {
            throw ConfigError("dataset.few_shot_task is out of range");
        }
        if (config.few_shot_count < 1 ||
            config.few_shot_count > config.train_count) {
            throw ConfigError("dataset.few_shot_count must lie in "
                              "[1, train_count]");
        }
    }
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw ConfigError("cannot read config file " + path);
    }
    nlohmann::json j;
    try {
        file >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file " + path +
                          " is not valid JSON: " + e.what());
    }
    return experiment_from_json(j);
}

} // namespace hitt
