#pragma once
// Evaluation metrics for the three dense tasks, streamed over samples:
// segmentation overlap scores, depth error norms, normal angle statistics,
// and the cross-task improvement score that condenses a multi-task model's
// gains over single-task baselines into one percentage.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "hitt/quantization.hpp"
#include "hitt/tensor.hpp"

namespace hitt {

// Per-class intersection/union and pixel accuracy. Pixels whose ground
// truth is negative or 255 are ignored everywhere.
class SemsegAccum {
public:
    explicit SemsegAccum(int num_classes);

    void add(const std::vector<int>& pred, const std::vector<int>& gt);

    // Mean IoU over classes that appear (union > 0).
    double miou() const;
    double pixel_acc() const;

private:
    std::vector<long long> intersection_;
    std::vector<long long> union_;
    long long correct_ = 0;
    long long total_ = 0;
};

// Absolute and root-mean-square error over depth maps [1, h, w].
class DepthAccum {
public:
    void add(const Tensor& pred, const Tensor& gt);

    double abs_err() const;
    double rmse() const;

private:
    double abs_sum_ = 0.0;
    double sq_sum_ = 0.0;
    long long count_ = 0;
};

// Angle statistics over unit-normal maps [3, h, w]: mean and RMS angle
// error in degrees, and the fraction of pixels with error strictly below
// 11.25, 22.5, and 30 degrees.
class NormalAccum {
public:
    void add(const Tensor& pred, const Tensor& gt);

    double mean_err() const;
    double rmse_angle() const;
    double eta_1125() const;
    double eta_225() const;
    double eta_30() const;

private:
    double deg_sum_ = 0.0;
    double deg_sq_sum_ = 0.0;
    long long below_[3] = {0, 0, 0};
    long long count_ = 0;
};

// One evaluation's scores, keyed "<task>.<metric>" (e.g. "depth.abs").
struct MetricsReport {
    std::string setting;  // dataset/split identifier
    std::string stage;    // which training stage produced the weights
    std::uint64_t seed = 0;
    std::map<std::string, double> values;
    std::map<std::string, double> baseline;  // single-task scores, if known
    double delta = 0.0;                      // vs. baseline, percent
    bool has_delta = false;
};

nlohmann::json report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);

// A metric's key plus its improvement direction.
struct MetricDirection {
    std::string name;
    bool lower_better = false;
};

// One headline metric per task: semseg mIoU, depth absolute error, normal
// mean angle error.
std::vector<MetricDirection> headline_metrics(
    const std::vector<TaskKind>& kinds);

// Every metric the evaluator produces for the given tasks.
std::vector<MetricDirection> full_metrics(const std::vector<TaskKind>& kinds);

// Mean over the metric set of the signed relative gain of `multi` over
// `single`, in percent; positive means the multi-task model is better.
double delta_mtl(const MetricsReport& multi, const MetricsReport& single,
                 const std::vector<MetricDirection>& metrics);

}  // namespace hitt
