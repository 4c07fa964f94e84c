#include "hitt/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "hitt/errors.hpp"

namespace hitt {
namespace {

constexpr double kRadToDeg = 57.29577951308232;

void check_map_pair(const Tensor& pred, const Tensor& gt, int channels,
                    const char* who) {
    if (pred.rank() != 3 || pred.dim(0) != channels ||
        pred.shape() != gt.shape()) {
        throw ShapeError(std::string(who) + ": prediction " +
                         shape_str(pred.shape()) +
                         " does not pair with ground truth " +
                         shape_str(gt.shape()));
    }
}

} // namespace

SemsegAccum::SemsegAccum(int num_classes)
    : intersection_(static_cast<std::size_t>(num_classes), 0),
      union_(static_cast<std::size_t>(num_classes), 0) {
    if (num_classes < 1) {
        throw ConfigError("SemsegAccum: need at least one class");
    }
}

void SemsegAccum::add(const std::vector<int>& pred,
                      const std::vector<int>& gt) {
    if (pred.size() != gt.size()) {
        throw ShapeError("SemsegAccum: prediction and ground truth sizes "
                         "disagree");
    }
    const int classes = static_cast<int>(union_.size());
    for (std::size_t p = 0; p < gt.size(); ++p) {
        const int g = gt[p];
        if (g < 0 || g == 255) continue; // ignored pixel
        if (g >= classes) {
            throw StateError("SemsegAccum: ground-truth class " +
                             std::to_string(g) + " out of range");
        }
        ++total_;
        const int q = pred[p];
        const bool in_range = q >= 0 && q < classes;
        if (in_range && q == g) {
            ++correct_;
            ++intersection_[static_cast<std::size_t>(g)];
            ++union_[static_cast<std::size_t>(g)];
        } else {
            ++union_[static_cast<std::size_t>(g)];
            if (in_range) ++union_[static_cast<std::size_t>(q)];
        }
    }
}

double SemsegAccum::miou() const {
    double sum = 0.0;
    int seen = 0;
    for (std::size_t c = 0; c < union_.size(); ++c) {
        if (union_[c] == 0) continue;
        sum += double(intersection_[c]) / double(union_[c]);
        ++seen;
    }
    return seen == 0 ? 0.0 : sum / seen;
}

double SemsegAccum::pixel_acc() const {
    return total_ == 0 ? 0.0 : double(correct_) / double(total_);
}

void DepthAccum::add(const Tensor& pred, const Tensor& gt) {
    check_map_pair(pred, gt, 1, "DepthAccum");
    for (std::size_t p = 0; p < pred.numel(); ++p) {
        const double d = double(pred.values()[p]) - gt.values()[p];
        abs_sum_ += std::abs(d);
        sq_sum_ += d * d;
        ++count_;
    }
}

double DepthAccum::abs_err() const {
    return count_ == 0 ? 0.0 : abs_sum_ / double(count_);
}

double DepthAccum::rmse() const {
    return count_ == 0 ? 0.0 : std::sqrt(sq_sum_ / double(count_));
}

void NormalAccum::add(const Tensor& pred, const Tensor& gt) {
    check_map_pair(pred, gt, 3, "NormalAccum");
    const int hw = pred.dim(1) * pred.dim(2);
    for (int p = 0; p < hw; ++p) {
        double dot = 0.0, np = 0.0, ng = 0.0;
        for (int c = 0; c < 3; ++c) {
            const double a = pred.values()[static_cast<std::size_t>(
                c * hw + p)];
            const double b =
                gt.values()[static_cast<std::size_t>(c * hw + p)];
            dot += a * b;
            np += a * a;
            ng += b * b;
        }
        const double denom =
            std::sqrt(std::max(np, 1e-24)) * std::sqrt(std::max(ng, 1e-24));
        const double cosine = std::clamp(dot / denom, -1.0, 1.0);
        const double deg = std::acos(cosine) * kRadToDeg;
        deg_sum_ += deg;
        deg_sq_sum_ += deg * deg;
        if (deg < 11.25) ++below_[0];
        if (deg < 22.5) ++below_[1];
        if (deg < 30.0) ++below_[2];
        ++count_;
    }
}

double NormalAccum::mean_err() const {
    return count_ == 0 ? 0.0 : deg_sum_ / double(count_);
}

double NormalAccum::rmse_angle() const {
    return count_ == 0 ? 0.0 : std::sqrt(deg_sq_sum_ / double(count_));
}

double NormalAccum::eta_1125() const {
    return count_ == 0 ? 0.0 : double(below_[0]) / double(count_);
}

double NormalAccum::eta_225() const {
    return count_ == 0 ? 0.0 : double(below_[1]) / double(count_);
}

double NormalAccum::eta_30() const {
    return count_ == 0 ? 0.0 : double(below_[2]) / double(count_);
}

nlohmann::json report_to_json(const MetricsReport& report) {
    nlohmann::json j;
    j["setting"] = report.setting;
    j["stage"] = report.stage;
    j["seed"] = report.seed;
    j["values"] = report.values;
    if (!report.baseline.empty()) {
        j["baseline"] = report.baseline;
    }
    if (report.has_delta) {
        j["delta_mtl"] = report.delta;
    }
    return j;
}

MetricsReport report_from_json(const nlohmann::json& j) {
    MetricsReport report;
    try {
        report.setting = j.at("setting").get<std::string>();
        report.stage = j.at("stage").get<std::string>();
        report.seed = j.at("seed").get<std::uint64_t>();
        report.values =
            j.at("values").get<std::map<std::string, double>>();
        if (j.contains("baseline")) {
            report.baseline =
                j.at("baseline").get<std::map<std::string, double>>();
        }
        if (j.contains("delta_mtl")) {
            report.delta = j.at("delta_mtl").get<double>();
            report.has_delta = true;
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("metrics report: ") + e.what());
    }
    return report;
}

std::vector<MetricDirection> headline_metrics(
    const std::vector<TaskKind>& kinds) {
    std::vector<MetricDirection> out;
    for (TaskKind kind : kinds) {
        switch (kind) {
            case TaskKind::semseg:
                out.push_back({"semseg.miou", false});
                break;
            case TaskKind::depth:
                out.push_back({"depth.abs", true});
                break;
            case TaskKind::normal:
                out.push_back({"normal.mean_err", true});
                break;
        }
    }
    return out;
}

std::vector<MetricDirection> full_metrics(
    const std::vector<TaskKind>& kinds) {
    std::vector<MetricDirection> out;
    for (TaskKind kind : kinds) {
        switch (kind) {
            case TaskKind::semseg:
                out.push_back({"semseg.miou", false});
                out.push_back({"semseg.pacc", false});
                break;
            case TaskKind::depth:
                out.push_back({"depth.abs", true});
                out.push_back({"depth.rmse", true});
                break;
            case TaskKind::normal:
                out.push_back({"normal.mean_err", true});
                out.push_back({"normal.rmse_angle", true});
                out.push_back({"normal.eta_1125", false});
                out.push_back({"normal.eta_225", false});
                out.push_back({"normal.eta_30", false});
                break;
        }
    }
    return out;
}

double delta_mtl(const MetricsReport& multi, const MetricsReport& single,
                 const std::vector<MetricDirection>& metrics) {
    if (metrics.empty()) {
        throw ConfigError("delta_mtl: empty metric set");
    }
    double sum = 0.0;
    for (const MetricDirection& m : metrics) {
        const auto mm = multi.values.find(m.name);
        const auto ms = single.values.find(m.name);
        if (mm == multi.values.end() || ms == single.values.end()) {
            throw StateError("delta_mtl: metric '" + m.name +
                             "' missing from a report");
        }
        if (ms->second == 0.0) {
            throw NumericalError("delta_mtl: zero baseline for '" + m.name +
                                 "'");
        }
        const double gain = (mm->second - ms->second) / ms->second;
        sum += m.lower_better ? -gain : gain;
    }
    return 100.0 * sum / double(metrics.size());
}

} // namespace hitt
