// Command-line front end: each training stage is its own command writing an
// inspectable artifact directory (dataset, checkpoint, label bundle, metric
// report) plus a run.json log with content hashes of everything it read and
// wrote, so identical inputs are easy to recognize across reruns.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "hitt/config.hpp"
#include "hitt/errors.hpp"
#include "hitt/metrics.hpp"
#include "hitt/model.hpp"
#include "hitt/pipeline.hpp"
#include "hitt/tensor_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace hitt;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// Order-independent fingerprint of a directory tree: the hash of every
// file's (relative path, content hash) pair, sorted by path.
std::string dir_hash(const std::string& dir) {
    std::vector<std::string> files;
    for (const auto& entry : fs::recursive_directory_iterator(dir)) {
        if (entry.is_regular_file()) {
            files.push_back(
                fs::relative(entry.path(), dir).generic_string());
        }
    }
    std::sort(files.begin(), files.end());
    std::string acc;
    for (const std::string& rel : files) {
        acc += rel;
        acc += ':';
        acc += file_content_hash(dir + "/" + rel);
        acc += '\n';
    }
    return bytes_hash(acc.data(), acc.size());
}

// Claim an output directory, refusing to clobber existing content unless
// --force was given.
void prepare_out(const std::string& dir, bool force) {
    if (fs::exists(dir) && !fs::is_empty(dir)) {
        if (!force) {
            throw ConfigError("output directory " + dir +
                              " already contains files; pass --force to "
                              "overwrite it");
        }
        fs::remove_all(dir);
    }
    fs::create_directories(dir);
}

void require_artifact(const std::string& path, const std::string& what,
                      const std::string& command) {
    if (path.empty()) {
        throw ConfigError("config paths section does not say where the " +
                          what + " lives");
    }
    if (!fs::exists(path)) {
        throw StateError(what + " not found at " + path + "; run `hitt " +
                         command + "` first");
    }
}

void write_json_file(const std::string& path, const json& j) {
    std::ofstream file(path, std::ios::binary);
    if (!file || !(file << j.dump(2) << '\n')) {
        throw StateError("cannot write " + path);
    }
}

json read_json_file(const std::string& path) {
    std::ifstream file(path, std::ios::binary);
    if (!file) {
        throw StateError("cannot read " + path);
    }
    try {
        json j;
        file >> j;
        return j;
    } catch (const json::exception& e) {
        throw FormatError(path + " is not valid JSON: " + e.what());
    }
}

void save_specs(const std::string& dir,
                const std::vector<QuantizationSpec>& specs) {
    json j = json::array();
    for (const QuantizationSpec& spec : specs) {
        j.push_back(quantization_to_json(spec));
    }
    write_json_file(dir + "/specs.json", j);
}

std::vector<QuantizationSpec> load_specs(const std::string& dir) {
    const std::string path = dir + "/specs.json";
    if (!fs::exists(path)) {
        throw StateError("no quantization specs at " + path +
                         "; run `hitt train` first");
    }
    const json j = read_json_file(path);
    if (!j.is_array()) {
        throw FormatError(path + " must hold an array of specs");
    }
    std::vector<QuantizationSpec> specs;
    for (const json& item : j) {
        specs.push_back(quantization_from_json(item));
    }
    return specs;
}

// Stage and seed a checkpoint was trained with, read from its run log;
// absent logs degrade to placeholders rather than failing evaluation.
std::pair<std::string, std::uint64_t> checkpoint_provenance(
    const std::string& dir) {
    const std::string path = dir + "/run.json";
    if (!fs::exists(path)) return {"unknown", 0};
    try {
        const json j = read_json_file(path);
        return {j.value("stage", std::string("unknown")),
                j.value("seed", std::uint64_t(0))};
    } catch (const std::exception&) {
        return {"unknown", 0};
    }
}

LoadedDataset load_split(const ExperimentConfig& config,
                         const char* split) {
    require_artifact(config.dataset_path, "dataset", "gen-data");
    const std::string dir = config.dataset_path + "/" + split;
    if (!fs::exists(dir)) {
        throw StateError("dataset split not found at " + dir +
                         "; run `hitt gen-data` first");
    }
    LoadedDataset loaded = load_dataset(dir);
    if (loaded.data.task_count != int(config.model.tasks.size())) {
        throw ConfigError(
            "dataset was split for " +
            std::to_string(loaded.data.task_count) +
            " tasks but the configured model predicts " +
            std::to_string(config.model.tasks.size()));
    }
    return loaded;
}

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    bool force = false;
    std::uint64_t seed = 0;
    bool seed_given = false;
};

json base_log(const std::string& command, const CommonArgs& args) {
    json log;
    log["command"] = command;
    log["threads"] = worker_threads();
    if (!args.config_path.empty()) {
        log["inputs"]["config"] = file_content_hash(args.config_path);
    }
    return log;
}

void finish_log(json& log, const std::string& out_dir,
                Clock::time_point start) {
    log["wall_seconds"] = seconds_since(start);
    write_json_file(out_dir + "/run.json", log);
}

void cmd_gen_data(const CommonArgs& args) {
    const auto start = Clock::now();
    ExperimentConfig config = load_experiment_config(args.config_path);
    if (args.seed_given) config.dataset_seed = args.seed;
    const int tasks = int(config.model.tasks.size());

    prepare_out(args.out_dir, args.force);
    PartialDataset train = split_partial(
        generate_scenes(config.scene, config.train_count,
                        config.dataset_seed),
        config.setting, tasks, config.dataset_seed, config.few_shot_task,
        config.few_shot_count);
    PartialDataset test = split_partial(
        generate_scenes(config.scene, config.test_count,
                        config.dataset_seed + config.train_count),
        SplitSetting::full_labels, tasks, config.dataset_seed + 1);
    save_dataset(args.out_dir + "/train", train, config.scene);
    save_dataset(args.out_dir + "/test", test, config.scene);

    for (int t = 0; t < tasks; ++t) {
        int labeled = 0;
        for (const auto& row : train.alpha) labeled += row[t] != 0;
        std::printf("%s: %d/%d labeled\n",
                    task_kind_name(config.model.tasks[t].kind), labeled,
                    int(train.alpha.size()));
    }

    json log = base_log("gen-data", args);
    log["seed"] = config.dataset_seed;
    log["setting"] = split_setting_name(config.setting);
    log["outputs"]["train"] = dir_hash(args.out_dir + "/train");
    log["outputs"]["test"] = dir_hash(args.out_dir + "/test");
    finish_log(log, args.out_dir, start);
}

void run_train_command(const CommonArgs& args, bool stage2) {
    const auto start = Clock::now();
    ExperimentConfig config = load_experiment_config(args.config_path);
    if (args.seed_given) {
        config.model.seed = args.seed;
        config.training.seed = args.seed;
    }
    const LoadedDataset loaded = load_split(config, "train");

    PseudoBundle bundle;
    std::vector<QuantizationSpec> specs;
    if (stage2) {
        require_artifact(config.bundle_path, "pseudo-label bundle",
                         "discover");
        bundle = load_bundle(config.bundle_path);
        specs = load_specs(config.bundle_path);
    } else {
        specs = build_task_specs(loaded.data, loaded.config, config.model,
                                 config.dataset_seed);
    }

    prepare_out(args.out_dir, args.force);
    const TrainResult result =
        stage2 ? train_stage2(loaded.data, bundle, specs, config.model,
                              config.training)
               : train_stage1(loaded.data, specs, config.model,
                              config.training);
    result.model.save(args.out_dir);
    save_specs(args.out_dir, specs);
    write_loss_csv(args.out_dir + "/loss.csv", result.curve);

    const LossRow& last = result.curve.back();
    std::printf("epoch %d: supervised %.5f pseudo %.5f feature %.5f "
                "total %.5f\n",
                last.epoch, last.supervised, last.pseudo, last.feature,
                last.total);

    json log = base_log(stage2 ? "retrain" : "train", args);
    log["stage"] = stage2 ? "stage2" : "stage1";
    log["seed"] = config.training.seed;
    log["inputs"]["dataset"] = dir_hash(config.dataset_path + "/train");
    if (stage2) {
        log["inputs"]["bundle"] = dir_hash(config.bundle_path);
        log["bundle_checkpoint"] = bundle.checkpoint_hash;
    }
    log["outputs"]["weights.httc"] =
        file_content_hash(args.out_dir + "/weights.httc");
    log["outputs"]["specs.json"] =
        file_content_hash(args.out_dir + "/specs.json");
    log["outputs"]["loss.csv"] =
        file_content_hash(args.out_dir + "/loss.csv");
    finish_log(log, args.out_dir, start);
}

void cmd_discover(const CommonArgs& args) {
    const auto start = Clock::now();
    const ExperimentConfig config =
        load_experiment_config(args.config_path);
    require_artifact(config.stage1_path, "first-stage checkpoint", "train");
    const LoadedDataset loaded = load_split(config, "train");

    const Model model = Model::load(config.stage1_path);
    const std::vector<QuantizationSpec> specs =
        load_specs(config.stage1_path);
    const std::string frozen_hash = checkpoint_hash(config.stage1_path);
    const PseudoBundle bundle =
        discover_bundle(model, loaded.data, config.tau, frozen_hash);

    prepare_out(args.out_dir, args.force);
    save_bundle(args.out_dir, bundle);
    save_specs(args.out_dir, specs);

    const std::size_t tasks = config.model.tasks.size();
    for (std::size_t t = 0; t < tasks; ++t) {
        long long kept = 0, total = 0;
        for (const BundleSample& sample : bundle.samples) {
            if (sample.alpha[t]) continue;
            for (const std::uint8_t m : sample.pseudo[t].mask) {
                kept += m != 0;
                ++total;
            }
        }
        if (total > 0) {
            std::printf("%s: kept %.1f%% of pseudo labels (tau %.2f)\n",
                        task_kind_name(config.model.tasks[t].kind),
                        100.0 * double(kept) / double(total),
                        double(config.tau[t]));
        }
    }

    json log = base_log("discover", args);
    log["seed"] = config.dataset_seed;
    log["inputs"]["dataset"] = dir_hash(config.dataset_path + "/train");
    log["inputs"]["checkpoint"] = frozen_hash;
    log["outputs"]["bundle"] = dir_hash(args.out_dir);
    finish_log(log, args.out_dir, start);
}

void cmd_eval(const CommonArgs& args, const std::string& checkpoint) {
    const auto start = Clock::now();
    const ExperimentConfig config =
        load_experiment_config(args.config_path);
    if (!fs::exists(checkpoint)) {
        throw StateError("checkpoint not found at " + checkpoint +
                         "; run `hitt train` first");
    }
    const Model model = Model::load(checkpoint);
    const std::vector<QuantizationSpec> specs = load_specs(checkpoint);
    const LoadedDataset test = load_split(config, "test");

    EvalOptions options;
    options.setting = split_setting_name(config.setting);
    const auto [stage, seed] = checkpoint_provenance(checkpoint);
    options.stage = stage;
    options.seed = seed;
    const MetricsReport report =
        evaluate_model(model, test.data.scenes, specs, options);

    prepare_out(args.out_dir, args.force);
    write_json_file(args.out_dir + "/report.json", report_to_json(report));
    write_metrics_csv(args.out_dir + "/metrics.csv", report);
    for (const auto& [name, value] : report.values) {
        std::printf("%s = %.6f\n", name.c_str(), value);
    }

    json log = base_log("eval", args);
    log["seed"] = seed;
    log["stage"] = stage;
    log["inputs"]["checkpoint"] = checkpoint_hash(checkpoint);
    log["inputs"]["dataset"] = dir_hash(config.dataset_path + "/test");
    log["outputs"]["report.json"] =
        file_content_hash(args.out_dir + "/report.json");
    log["outputs"]["metrics.csv"] =
        file_content_hash(args.out_dir + "/metrics.csv");
    finish_log(log, args.out_dir, start);
}

std::vector<TaskKind> kinds_in_report(const MetricsReport& report) {
    std::vector<TaskKind> kinds;
    for (const TaskKind kind :
         {TaskKind::semseg, TaskKind::depth, TaskKind::normal}) {
        const std::string prefix = std::string(task_kind_name(kind)) + ".";
        for (const auto& [name, value] : report.values) {
            if (name.rfind(prefix, 0) == 0) {
                kinds.push_back(kind);
                break;
            }
        }
    }
    return kinds;
}

void cmd_report(const CommonArgs& args,
                const std::vector<std::string>& report_dirs,
                const std::vector<std::string>& baseline_dirs) {
    const auto start = Clock::now();
    // The metric set (headline vs full) comes from the config when given.
    ExperimentConfig config = default_experiment();
    if (!args.config_path.empty()) {
        config = load_experiment_config(args.config_path);
    }
    if (report_dirs.size() < 2) {
        throw ConfigError("report needs at least two report directories");
    }

    struct Row {
        std::string name;
        MetricsReport report;
        double delta = 0.0;
    };
    std::vector<Row> rows;
    for (const std::string& dir : report_dirs) {
        rows.push_back(
            {dir, report_from_json(read_json_file(dir + "/report.json")),
             0.0});
    }
    for (std::size_t i = 1; i < rows.size(); ++i) {
        auto keys_of = [](const MetricsReport& r) {
            std::vector<std::string> keys;
            for (const auto& [name, value] : r.values) keys.push_back(name);
            return keys;
        };
        if (keys_of(rows[i].report) != keys_of(rows[0].report)) {
            throw ConfigError("metric sets differ between " + rows[0].name +
                              " and " + rows[i].name);
        }
    }

    MetricsReport baseline;
    baseline.setting = "baseline";
    for (const std::string& dir : baseline_dirs) {
        const MetricsReport part =
            report_from_json(read_json_file(dir + "/report.json"));
        for (const auto& [name, value] : part.values) {
            if (!baseline.values.emplace(name, value).second) {
                throw ConfigError("baseline reports overlap on metric " +
                                  name);
            }
        }
    }

    const std::vector<TaskKind> kinds = kinds_in_report(rows[0].report);
    const std::vector<MetricDirection> metrics =
        config.full_metric_set ? full_metrics(kinds)
                               : headline_metrics(kinds);
    for (Row& row : rows) {
        row.delta = delta_mtl(row.report, baseline, metrics);
        row.report = attach_baseline(row.report, baseline, metrics);
    }
    std::stable_sort(rows.begin(), rows.end(),
                     [](const Row& a, const Row& b) {
                         return a.delta > b.delta;
                     });

    std::string csv = "report";
    for (const MetricDirection& metric : metrics) csv += "," + metric.name;
    csv += ",delta_mtl\n";
    char cell[64];
    for (const Row& row : rows) {
        csv += row.name;
        for (const MetricDirection& metric : metrics) {
            std::snprintf(cell, sizeof cell, ",%.9g",
                          row.report.values.at(metric.name));
            csv += cell;
        }
        std::snprintf(cell, sizeof cell, ",%.9g\n", row.delta);
        csv += cell;
    }
    csv += "baseline";
    for (const MetricDirection& metric : metrics) {
        std::snprintf(cell, sizeof cell, ",%.9g",
                      baseline.values.at(metric.name));
        csv += cell;
    }
    csv += ",0\n";

    std::string text = "setting: " + rows[0].report.setting +
                       "   metrics: " +
                       (config.full_metric_set ? "full" : "headline") + "\n";
    std::snprintf(cell, sizeof cell, "%-32s", "report");
    text += cell;
    for (const MetricDirection& metric : metrics) {
        std::snprintf(cell, sizeof cell, " %16s", metric.name.c_str());
        text += cell;
    }
    std::snprintf(cell, sizeof cell, " %12s\n", "delta_mtl(%)");
    text += cell;
    auto add_row = [&](const std::string& name, const MetricsReport& r,
                       double delta) {
        std::snprintf(cell, sizeof cell, "%-32s", name.c_str());
        text += cell;
        for (const MetricDirection& metric : metrics) {
            std::snprintf(cell, sizeof cell, " %16.4f",
                          r.values.at(metric.name));
            text += cell;
        }
        std::snprintf(cell, sizeof cell, " %+12.2f\n", delta);
        text += cell;
    };
    for (const Row& row : rows) {
        add_row(row.name + " (" + row.report.stage + ")", row.report,
                row.delta);
    }
    add_row("baseline", baseline, 0.0);

    prepare_out(args.out_dir, args.force);
    std::ofstream csv_file(args.out_dir + "/report.csv", std::ios::binary);
    std::ofstream txt_file(args.out_dir + "/report.txt", std::ios::binary);
    if (!(csv_file << csv) || !(txt_file << text)) {
        throw StateError("cannot write report tables to " + args.out_dir);
    }
    csv_file.close();
    txt_file.close();
    std::fputs(text.c_str(), stdout);

    json log = base_log("report", args);
    log["seed"] = 0;
    for (std::size_t i = 0; i < report_dirs.size(); ++i) {
        log["inputs"]["report" + std::to_string(i)] =
            file_content_hash(report_dirs[i] + "/report.json");
    }
    for (std::size_t i = 0; i < baseline_dirs.size(); ++i) {
        log["inputs"]["baseline" + std::to_string(i)] =
            file_content_hash(baseline_dirs[i] + "/report.json");
    }
    log["outputs"]["report.csv"] =
        file_content_hash(args.out_dir + "/report.csv");
    log["outputs"]["report.txt"] =
        file_content_hash(args.out_dir + "/report.txt");
    finish_log(log, args.out_dir, start);
}

void add_common(CLI::App* cmd, CommonArgs& args, bool needs_config = true) {
    auto* config =
        cmd->add_option("--config", args.config_path, "experiment JSON");
    if (needs_config) config->required();
    cmd->add_option("--out", args.out_dir, "output directory")->required();
    cmd->add_flag("--force", args.force, "overwrite existing output");
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"hierarchical task tokens for partially labeled scenes"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, discover_args, retrain_args, eval_args,
        report_args;
    std::string eval_checkpoint;
    std::vector<std::string> report_dirs, baseline_dirs;

    CLI::App* gen = app.add_subcommand("gen-data",
                                       "generate train/test scene datasets");
    add_common(gen, gen_args);
    CLI::Option* gen_seed =
        gen->add_option("--seed", gen_args.seed, "override dataset seed");

    CLI::App* train =
        app.add_subcommand("train", "first-stage supervised training");
    add_common(train, train_args);
    CLI::Option* train_seed = train->add_option(
        "--seed", train_args.seed, "override model and optimizer seeds");

    CLI::App* discover = app.add_subcommand(
        "discover", "label the training set with a frozen checkpoint");
    add_common(discover, discover_args);

    CLI::App* retrain = app.add_subcommand(
        "retrain", "second-stage training against the discovered bundle");
    add_common(retrain, retrain_args);
    CLI::Option* retrain_seed = retrain->add_option(
        "--seed", retrain_args.seed, "override model and optimizer seeds");

    CLI::App* eval =
        app.add_subcommand("eval", "score a checkpoint on the test split");
    add_common(eval, eval_args);
    eval->add_option("--checkpoint", eval_checkpoint,
                     "checkpoint directory to score")
        ->required();

    CLI::App* report = app.add_subcommand(
        "report", "compare metric reports against a baseline");
    add_common(report, report_args, /*needs_config=*/false);
    report->add_option("reports", report_dirs,
                       "two or more eval output directories");
    report->add_option("--baseline", baseline_dirs,
                       "eval directories whose union forms the baseline")
        ->required();

    try {
        app.parse(argc, argv);
        if (gen->parsed()) {
            gen_args.seed_given = gen_seed->count() > 0;
            cmd_gen_data(gen_args);
        } else if (train->parsed()) {
            train_args.seed_given = train_seed->count() > 0;
            run_train_command(train_args, /*stage2=*/false);
        } else if (discover->parsed()) {
            cmd_discover(discover_args);
        } else if (retrain->parsed()) {
            retrain_args.seed_given = retrain_seed->count() > 0;
            run_train_command(retrain_args, /*stage2=*/true);
        } else if (eval->parsed()) {
            cmd_eval(eval_args, eval_checkpoint);
        } else if (report->parsed()) {
            cmd_report(report_args, report_dirs, baseline_dirs);
        }
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const NumericalError& e) {
        std::fprintf(stderr, "numerical error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    }
    return 0;
}
