#pragma once

#include <map>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/sequence.hpp"
#include "json.hpp"

namespace ehrseq {

/// Concept counts of one patient, keyed by vocabulary id. Special tokens
/// (including [ATT], [VS], [UNK]) are never counted.
struct FrequencyVector {
    std::map<int, int> counts;
    int label{0};
};

FrequencyVector featurize(const TokenizedSequence& seq, const Vocabulary& vocab);
FrequencyVector featurize(const PatientRecord& rec, const Vocabulary& vocab, const std::string& task = "T2");

struct GbdtConfig {
    int n_trees{100};
    int max_depth{6};
    double learning_rate{0.3};
    double lambda_l2{1.0};
    double gamma{0.0};
    double min_child_weight{1.0};
};

void validate(const GbdtConfig& cfg);

/// Internal nodes send x[feature] < threshold left. Leaves hold the
/// learning-rate-scaled weight.
struct TreeNode {
    int feature{-1};
    double threshold{0.0};
    int left{-1};
    int right{-1};
    double value{0.0};

    bool is_leaf() const { return feature < 0; }
};

struct Tree {
    std::vector<TreeNode> nodes;

    double predict(const FrequencyVector& x) const;
};

class GbdtModel {
public:
    GbdtModel() = default;
    explicit GbdtModel(GbdtConfig cfg) : cfg_(cfg) {}

    /// Exact greedy second-order boosting on the logistic loss.
    static GbdtModel fit(const std::vector<FrequencyVector>& data, const GbdtConfig& cfg);

    double margin(const FrequencyVector& x) const;
    double predict_proba(const FrequencyVector& x) const;

    const std::vector<Tree>& trees() const { return trees_; }
    std::vector<Tree>& trees() { return trees_; }
    const GbdtConfig& config() const { return cfg_; }

    nlohmann::json to_json() const;
    static GbdtModel from_json(const nlohmann::json& j);

private:
    GbdtConfig cfg_;
    std::vector<Tree> trees_;
};

}  // namespace ehrseq
