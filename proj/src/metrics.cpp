#include "ehrseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>
#include <thread>

#include "ehrseq/random.hpp"

namespace ehrseq {
namespace {

void check_sizes(std::span<const int> labels, std::span<const double> scores) {
    if (labels.size() != scores.size()) {
        throw std::invalid_argument("labels and scores differ in length");
    }
}

std::vector<std::size_t> order_by_score(std::span<const double> scores, bool descending) {
    std::vector<std::size_t> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return descending ? scores[a] > scores[b] : scores[a] < scores[b];
    });
    return idx;
}

bool has_both_classes(std::span<const int> labels) {
    bool pos = false, neg = false;
    for (int y : labels) {
        (y ? pos : neg) = true;
    }
    return pos && neg;
}

}  // namespace

double auroc(std::span<const int> labels, std::span<const double> scores) {
    check_sizes(labels, scores);
    const auto idx = order_by_score(scores, false);
    double pos_rank_sum = 0.0;
    double n_pos = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            ++j;
        }
        // ranks i+1 .. j share their average
        const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t k = i; k < j; ++k) {
            if (labels[idx[k]]) {
                pos_rank_sum += avg_rank;
                n_pos += 1.0;
            }
        }
        i = j;
    }
    const double n_neg = static_cast<double>(labels.size()) - n_pos;
    if (n_pos == 0.0 || n_neg == 0.0) {
        throw std::invalid_argument("auroc needs both classes");
    }
    return (pos_rank_sum - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

double auprc(std::span<const int> labels, std::span<const double> scores) {
    check_sizes(labels, scores);
    const double n_pos = static_cast<double>(std::count(labels.begin(), labels.end(), 1));
    if (n_pos == 0.0) {
        throw std::invalid_argument("auprc needs at least one positive");
    }
    const auto idx = order_by_score(scores, true);
    double tp = 0.0, fp = 0.0, ap = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        const double tp_before = tp;
        std::size_t j = i;
        while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) {
            (labels[idx[j]] ? tp : fp) += 1.0;
            ++j;
        }
        if (tp > tp_before) {
            ap += (tp - tp_before) / n_pos * (tp / (tp + fp));
        }
        i = j;
    }
    return ap;
}

double brier(std::span<const int> labels, std::span<const double> probs) {
    check_sizes(labels, probs);
    if (labels.empty()) {
        throw std::invalid_argument("brier of empty input");
    }
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        const double p = probs[i];
        if (!(p >= 0.0 && p <= 1.0)) {
            throw std::invalid_argument("probability outside [0,1]");
        }
        const double d = p - labels[i];
        acc += d * d;
    }
    return acc / static_cast<double>(probs.size());
}

double quantile(std::vector<double> values, double q) {
    if (values.empty()) {
        throw std::invalid_argument("quantile of empty input");
    }
    std::sort(values.begin(), values.end());
    const double h = q * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, values.size() - 1);
    return values[lo] + (h - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

Interval bootstrap_ci(const MetricFn& metric, std::span<const int> labels,
                      std::span<const double> scores, int iters, double level,
                      std::uint64_t seed, int threads) {
    check_sizes(labels, scores);
    if (iters < 1) {
        throw std::invalid_argument("bootstrap needs at least one iteration");
    }
    const bool redraw = has_both_classes(labels);
    const std::size_t n = labels.size();
    std::vector<double> stats(static_cast<std::size_t>(iters));

    auto worker = [&](int begin, int end) {
        std::vector<int> y(n);
        std::vector<double> s(n);
        for (int k = begin; k < end; ++k) {
            Rng rng{derive_seed(seed, static_cast<std::uint64_t>(k))};
            do {
                for (std::size_t i = 0; i < n; ++i) {
                    const auto j = rng.below(n);
                    y[i] = labels[j];
                    s[i] = scores[j];
                }
            } while (redraw && !has_both_classes(y));
            stats[static_cast<std::size_t>(k)] = metric(y, s);
        }
    };

    threads = std::clamp(threads, 1, iters);
    if (threads == 1) {
        worker(0, iters);
    } else {
        std::vector<std::jthread> pool;
        const int chunk = (iters + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            const int b = t * chunk;
            const int e = std::min(iters, b + chunk);
            if (b < e) {
                pool.emplace_back(worker, b, e);
            }
        }
    }
    const double tail = (1.0 - level) / 2.0;
    return {quantile(stats, tail), quantile(stats, 1.0 - tail)};
}

EvalReport evaluate(std::span<const int> labels, std::span<const double> probs, int iters,
                    std::uint64_t seed, int threads) {
    EvalReport r;
    r.n = static_cast<std::int64_t>(labels.size());
    r.seed = seed;
    auto fill = [&](MetricValue& mv, const MetricFn& fn, std::uint64_t stream) {
        mv.point = fn(labels, probs);
        const auto ci = bootstrap_ci(fn, labels, probs, iters, 0.95,
                                     derive_seed(seed, stream), threads);
        mv.ci_lo = ci.lo;
        mv.ci_hi = ci.hi;
    };
    fill(r.auprc, auprc, 1);
    fill(r.auroc, auroc, 2);
    fill(r.brier, brier, 3);
    return r;
}

nlohmann::json to_json(const EvalReport& r) {
    auto mv = [](const MetricValue& m) {
        return nlohmann::json{{"point", m.point}, {"ci_lo", m.ci_lo}, {"ci_hi", m.ci_hi}};
    };
    return {{"auprc", mv(r.auprc)}, {"auroc", mv(r.auroc)}, {"brier", mv(r.brier)},
            {"n", r.n},           {"seed", r.seed}};
}

EvalReport eval_report_from_json(const nlohmann::json& j) {
    auto mv = [](const nlohmann::json& m) {
        return MetricValue{m.at("point").get<double>(), m.at("ci_lo").get<double>(),
                           m.at("ci_hi").get<double>()};
    };
    EvalReport r;
    r.auprc = mv(j.at("auprc"));
    r.auroc = mv(j.at("auroc"));
    r.brier = mv(j.at("brier"));
    r.n = j.at("n").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    return r;
}

std::string eval_csv_header() {
    return "n,auprc,auprc_lo,auprc_hi,auroc,auroc_lo,auroc_hi,brier,brier_lo,brier_hi";
}

std::string to_csv_row(const EvalReport& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f",
                  static_cast<long long>(r.n), r.auprc.point, r.auprc.ci_lo, r.auprc.ci_hi,
                  r.auroc.point, r.auroc.ci_lo, r.auroc.ci_hi, r.brier.point, r.brier.ci_lo,
                  r.brier.ci_hi);
    return buf;
}

}  // namespace ehrseq
