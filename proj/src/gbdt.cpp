#include "ehrseq/gbdt.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "ehrseq/kernels.hpp"

namespace ehrseq {

FrequencyVector featurize(const TokenizedSequence& seq, const Vocabulary& vocab) {
    FrequencyVector out;
    out.label = seq.label;
    for (std::size_t i = 0; i < seq.size(); ++i) {
        const int id = seq.concept_ids[i];
        if (!seq.mask[i] || vocab.is_special(id)) continue;
        if (id >= vocab.size()) throw std::out_of_range("token id outside the vocabulary");
        ++out.counts[id];
    }
    return out;
}

FrequencyVector featurize(const PatientRecord& rec, const Vocabulary& vocab, const std::string& task) {
    FrequencyVector out;
    if (auto it = rec.labels.find(task); it != rec.labels.end()) out.label = it->second;
    for (const auto& enc : rec.encounters) {
        for (const auto& e : enc.events) {
            const int id = vocab.event_id(e);
            if (!vocab.is_special(id)) ++out.counts[id];
        }
    }
    return out;
}

void validate(const GbdtConfig& c) {
    if (c.n_trees < 0 || c.max_depth < 1 || !(c.learning_rate > 0.0) || c.lambda_l2 < 0.0 || c.gamma < 0.0 ||
        c.min_child_weight < 0.0) {
        throw std::invalid_argument("invalid gbdt config");
    }
}

double Tree::predict(const FrequencyVector& x) const {
    if (nodes.empty()) return 0.0;
    int i = 0;
    while (!nodes[static_cast<std::size_t>(i)].is_leaf()) {
        const auto& n = nodes[static_cast<std::size_t>(i)];
        auto it = x.counts.find(n.feature);
        const double v = it == x.counts.end() ? 0.0 : it->second;
        i = v < n.threshold ? n.left : n.right;
    }
    return nodes[static_cast<std::size_t>(i)].value;
}

namespace {

struct Builder {
    const GbdtConfig& cfg;
    const std::vector<FrequencyVector>& data;
    const std::vector<double>& g;
    const std::vector<double>& h;
    Tree tree;

    double score(double G, double H) const { return G * G / (H + cfg.lambda_l2); }

    int build(const std::vector<int>& rows, int depth) {
        double G = 0.0, H = 0.0;
        for (int r : rows) G += g[static_cast<std::size_t>(r)], H += h[static_cast<std::size_t>(r)];
        const int id = static_cast<int>(tree.nodes.size());
        tree.nodes.push_back({});
        tree.nodes.back().value = -G / (H + cfg.lambda_l2) * cfg.learning_rate;
        if (depth >= cfg.max_depth || rows.size() < 2) return id;

        // Counts are non-negative and sparse: absent entries form one block at
        // value 0 ahead of the sorted non-zero entries of each feature.
        std::map<int, std::vector<std::pair<double, int>>> nonzero;
        for (int r : rows) {
            for (const auto& [f, n] : data[static_cast<std::size_t>(r)].counts) {
                if (n != 0) nonzero[f].emplace_back(n, r);
            }
        }
        double best_gain = 0.0;
        int best_feature = -1;
        double best_thr = 0.0;
        const double parent = score(G, H);
        for (auto& [f, entries] : nonzero) {
            std::sort(entries.begin(), entries.end());
            double GL = G, HL = H;
            for (const auto& e : entries) GL -= g[static_cast<std::size_t>(e.second)], HL -= h[static_cast<std::size_t>(e.second)];
            const bool have_zero = entries.size() < rows.size();
            double prev = 0.0;
            bool have_prev = have_zero;
            if (!have_zero) GL = HL = 0.0;
            for (const auto& [v, r] : entries) {
                if (have_prev && v > prev && HL >= cfg.min_child_weight && H - HL >= cfg.min_child_weight) {
                    const double gain = 0.5 * (score(GL, HL) + score(G - GL, H - HL) - parent) - cfg.gamma;
                    if (gain > best_gain) {
                        best_gain = gain;
                        best_feature = f;
                        best_thr = 0.5 * (prev + v);
                    }
                }
                GL += g[static_cast<std::size_t>(r)];
                HL += h[static_cast<std::size_t>(r)];
                prev = v;
                have_prev = true;
            }
        }
        if (best_feature < 0) return id;

        std::vector<int> left, right;
        for (int r : rows) {
            const auto& c = data[static_cast<std::size_t>(r)].counts;
            auto it = c.find(best_feature);
            const double v = it == c.end() ? 0.0 : it->second;
            (v < best_thr ? left : right).push_back(r);
        }
        const int l = build(left, depth + 1);
        const int rr = build(right, depth + 1);
        auto& node = tree.nodes[static_cast<std::size_t>(id)];
        node.feature = best_feature;
        node.threshold = best_thr;
        node.left = l;
        node.right = rr;
        node.value = 0.0;
        return id;
    }
};

}  // namespace

GbdtModel GbdtModel::fit(const std::vector<FrequencyVector>& data, const GbdtConfig& cfg) {
    validate(cfg);
    int pos = 0;
    for (const auto& x : data) pos += x.label != 0;
    if (data.empty() || pos == 0 || pos == static_cast<int>(data.size())) {
        throw std::invalid_argument("gbdt needs both classes");
    }
    GbdtModel model(cfg);
    const std::size_t n = data.size();
    std::vector<double> margin(n, 0.0), g(n), h(n);
    std::vector<int> all(n);
    std::iota(all.begin(), all.end(), 0);
    for (int t = 0; t < cfg.n_trees; ++t) {
        for (std::size_t r = 0; r < n; ++r) {
            const double p = sigmoid(margin[r]);
            g[r] = p - data[r].label;
            h[r] = p * (1.0 - p);
        }
        Builder b{cfg, data, g, h, {}};
        b.build(all, 0);
        for (std::size_t r = 0; r < n; ++r) margin[r] += b.tree.predict(data[r]);
        model.trees_.push_back(std::move(b.tree));
    }
    return model;
}

double GbdtModel::margin(const FrequencyVector& x) const {
    double m = 0.0;
    for (const auto& t : trees_) m += t.predict(x);
    return m;
}

double GbdtModel::predict_proba(const FrequencyVector& x) const { return sigmoid(margin(x)); }

nlohmann::json GbdtModel::to_json() const {
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : trees_) {
        nlohmann::json nodes = nlohmann::json::array();
        for (const auto& n : t.nodes) {
            if (n.is_leaf()) {
                nodes.push_back({{"leaf", n.value}});
            } else {
                nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right}});
            }
        }
        trees.push_back(std::move(nodes));
    }
    return {{"format", "ehrseq.gbdt"},
            {"version", 1},
            {"config",
             {{"n_trees", cfg_.n_trees},
              {"max_depth", cfg_.max_depth},
              {"learning_rate", cfg_.learning_rate},
              {"lambda_l2", cfg_.lambda_l2},
              {"gamma", cfg_.gamma},
              {"min_child_weight", cfg_.min_child_weight}}},
            {"trees", std::move(trees)}};
}

GbdtModel GbdtModel::from_json(const nlohmann::json& j) {
    if (j.value("format", "") != "ehrseq.gbdt") throw std::invalid_argument("not a gbdt model");
    const auto& c = j.at("config");
    GbdtConfig cfg;
    c.at("n_trees").get_to(cfg.n_trees);
    c.at("max_depth").get_to(cfg.max_depth);
    c.at("learning_rate").get_to(cfg.learning_rate);
    c.at("lambda_l2").get_to(cfg.lambda_l2);
    c.at("gamma").get_to(cfg.gamma);
    c.at("min_child_weight").get_to(cfg.min_child_weight);
    GbdtModel m(cfg);
    for (const auto& t : j.at("trees")) {
        Tree tree;
        for (const auto& n : t) {
            TreeNode node;
            if (n.contains("leaf")) {
                node.value = n["leaf"].get<double>();
            } else {
                n.at("feature").get_to(node.feature);
                n.at("threshold").get_to(node.threshold);
                n.at("left").get_to(node.left);
                n.at("right").get_to(node.right);
            }
            tree.nodes.push_back(node);
        }
        m.trees_.push_back(std::move(tree));
    }
    return m;
}

}  // namespace ehrseq
