#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace ehrseq {

/// Mann-Whitney AUROC; tied scores count one half.
double auroc(std::span<const int> labels, std::span<const double> scores);

/// Average precision over a descending-score sweep. Tied scores form one
/// threshold step, so all-equal scores give exactly the prevalence.
double auprc(std::span<const int> labels, std::span<const double> scores);

double brier(std::span<const int> labels, std::span<const double> probs);

using MetricFn = std::function<double(std::span<const int>, std::span<const double>)>;

struct Interval {
    double lo{0.0};
    double hi{0.0};
};

/// Percentile bootstrap. Iteration `k` draws from its own seed derived from
/// `seed`, so the result does not depend on `threads`. When the input holds
/// both classes, single-class resamples are redrawn.
Interval bootstrap_ci(const MetricFn& metric, std::span<const int> labels,
                      std::span<const double> scores, int iters = 1000, double level = 0.95,
                      std::uint64_t seed = 0, int threads = 1);

/// Linear-interpolation quantile of unsorted values (q in [0,1]).
double quantile(std::vector<double> values, double q);

struct MetricValue {
    double point{0.0};
    double ci_lo{0.0};
    double ci_hi{0.0};
};

struct EvalReport {
    MetricValue auprc;
    MetricValue auroc;
    MetricValue brier;
    std::int64_t n{0};
    std::uint64_t seed{0};
};

EvalReport evaluate(std::span<const int> labels, std::span<const double> probs, int iters = 1000,
                    std::uint64_t seed = 0, int threads = 1);

nlohmann::json to_json(const EvalReport& r);
EvalReport eval_report_from_json(const nlohmann::json& j);
std::string eval_csv_header();
std::string to_csv_row(const EvalReport& r);

}  // namespace ehrseq
