#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/sequence.hpp"
#include "json.hpp"

namespace ehrseq {

struct TrainConfig {
    int pretrain_epochs{30};
    int pretrain_patience{5};
    int finetune_epochs{10};
    int finetune_patience{2};
    double lr{5e-5};
    int batch_size{32};
    double dropout{0.1};
    double beta1{0.9};
    double beta2{0.999};
    double weight_decay{0.01};
    double eps{1e-8};
    double mask_prob{0.15};
    std::uint64_t seed{0};
};

void validate(const TrainConfig& cfg);
nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct SplitSpec {
    double dev_frac{0.85};
    double train_frac_of_dev{0.90};
    std::string stratify_by{"T2"};
    double train_ratio{1.0};
    std::uint64_t seed{0};
};

/// Patient ids per split, each in cohort order.
struct Split {
    std::vector<std::string> train, val, test;
};

/// Per-class apportionment: test = round(n_c (1 - dev_frac)), validation =
/// round(rest (1 - train_frac_of_dev)), train the remainder, subsampled to
/// round(n_train_c * train_ratio). Throws when a class has fewer than 3 members.
Split stratified_split(const std::vector<PatientRecord>& cohort, const SplitSpec& spec);

/// Throws std::logic_error when any two splits share a patient.
void assert_disjoint(const Split& split);

struct AdamWConfig {
    double lr{5e-5};
    double beta1{0.9};
    double beta2{0.999};
    double eps{1e-8};
    double weight_decay{0.01};
};

struct AdamWState {
    std::vector<Eigen::VectorXd> m, v;
    std::int64_t t{0};
};

/// One AdamW update from the accumulated gradients, which are then cleared.
/// Decay is decoupled and skipped for parameters with decay == false.
void adamw_step(ParameterList& params, AdamWState& state, const AdamWConfig& cfg);

class EarlyStopping {
public:
    EarlyStopping(int patience, bool maximize) : patience_(patience), maximize_(maximize) {}

    /// Records an epoch's metric; true when it is a new best.
    bool update(double metric);
    bool should_stop() const { return since_best_ >= patience_; }
    int best_epoch() const { return best_epoch_; }
    double best() const { return best_; }

private:
    int patience_;
    bool maximize_;
    int epoch_{0};
    int best_epoch_{0};
    int since_best_{0};
    double best_{0.0};
};

struct CurvePoint {
    int epoch{0};
    std::string split;
    std::string metric;
    double value{0.0};
};

struct TrainResult {
    std::vector<CurvePoint> curve;
    int epochs_run{0};
    int best_epoch{0};
    double best_value{0.0};
};

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve);

/// Mean pre-training loss over `data` without dropout. MLM masking is drawn
/// from `seed`, so repeated calls see the same corruption.
double pretrain_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& data, double mask_prob,
                     std::uint64_t seed);

/// Runs MLM or NTP pre-training with early stopping on validation loss and
/// leaves the best-epoch weights in `m`. Epoch 0 in the curve is the
/// untrained validation loss.
TrainResult pretrain(SequenceModel& m, const std::vector<TokenizedSequence>& train,
                     const std::vector<TokenizedSequence>& val, const TrainConfig& cfg);

/// Binary cross-entropy fine-tuning of backbone and head with early
/// stopping on validation AUPRC; leaves the best-epoch weights in place.
TrainResult finetune(SequenceModel& m, ClassifierHead& head, const std::vector<TokenizedSequence>& train,
                     const std::vector<TokenizedSequence>& val, const TrainConfig& cfg);

}  // namespace ehrseq
