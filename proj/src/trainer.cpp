#include "ehrseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <set>
#include <stdexcept>

#include "ehrseq/checkpoint.hpp"
#include "ehrseq/metrics.hpp"

namespace ehrseq {
namespace {

constexpr std::uint64_t kShuffleStream = 0x5f1;
constexpr std::uint64_t kMaskStream = 0x3a5c;
constexpr std::uint64_t kDropoutStream = 0xd0;
constexpr std::uint64_t kValMaskStream = 0x7a1;

AdamWConfig optimizer_config(const TrainConfig& c) {
    return {c.lr, c.beta1, c.beta2, c.eps, c.weight_decay};
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, kShuffleStream + static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order.begin(), order.end());
    return order;
}

}  // namespace

void validate(const TrainConfig& c) {
    auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
    if (!(c.lr > 0.0)) fail("lr must be positive");
    if (c.pretrain_epochs < 1 || c.finetune_epochs < 1) fail("epochs must be positive");
    if (c.pretrain_patience < 1 || c.pretrain_patience >= c.pretrain_epochs) fail("pretrain patience");
    if (c.finetune_patience < 1 || c.finetune_patience >= c.finetune_epochs) fail("finetune patience");
    if (c.batch_size < 1) fail("batch_size");
    if (c.dropout < 0.0 || c.dropout >= 1.0) fail("dropout");
    if (c.mask_prob <= 0.0 || c.mask_prob >= 1.0) fail("mask_prob");
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"pretrain_epochs", c.pretrain_epochs},
            {"pretrain_patience", c.pretrain_patience},
            {"finetune_epochs", c.finetune_epochs},
            {"finetune_patience", c.finetune_patience},
            {"lr", c.lr},
            {"batch_size", c.batch_size},
            {"dropout", c.dropout},
            {"betas", {c.beta1, c.beta2}},
            {"weight_decay", c.weight_decay},
            {"eps", c.eps},
            {"mask_prob", c.mask_prob},
            {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
    c.pretrain_patience = j.value("pretrain_patience", c.pretrain_patience);
    c.finetune_epochs = j.value("finetune_epochs", c.finetune_epochs);
    c.finetune_patience = j.value("finetune_patience", c.finetune_patience);
    c.lr = j.value("lr", c.lr);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.dropout = j.value("dropout", c.dropout);
    if (j.contains("betas")) {
        c.beta1 = j["betas"].at(0).get<double>();
        c.beta2 = j["betas"].at(1).get<double>();
    }
    c.weight_decay = j.value("weight_decay", c.weight_decay);
    c.eps = j.value("eps", c.eps);
    c.mask_prob = j.value("mask_prob", c.mask_prob);
    c.seed = j.value("seed", c.seed);
    validate(c);
    return c;
}

Split stratified_split(const std::vector<PatientRecord>& cohort, const SplitSpec& spec) {
    for (double f : {spec.dev_frac, spec.train_frac_of_dev}) {
        if (!(f > 0.0 && f < 1.0)) throw std::invalid_argument("split fractions must lie in (0, 1)");
    }
    if (!(spec.train_ratio > 0.0 && spec.train_ratio <= 1.0)) throw std::invalid_argument("train_ratio in (0, 1]");
    std::vector<std::size_t> by_class[2];
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        auto it = cohort[i].labels.find(spec.stratify_by);
        if (it == cohort[i].labels.end()) throw std::invalid_argument("patient " + cohort[i].id + " lacks a label");
        by_class[it->second != 0].push_back(i);
    }
    std::vector<int> assign(cohort.size(), -1);  // 0 train, 1 val, 2 test
    for (int c = 0; c < 2; ++c) {
        auto& idx = by_class[c];
        if (idx.size() < 3) throw std::invalid_argument("class " + std::to_string(c) + " has fewer than 3 members");
        Rng rng(derive_seed(spec.seed, 0x5b117 + static_cast<std::uint64_t>(c)));
        rng.shuffle(idx.begin(), idx.end());
        const auto n = static_cast<double>(idx.size());
        const auto n_test = static_cast<std::size_t>(std::lround(n * (1.0 - spec.dev_frac)));
        const auto rest = idx.size() - n_test;
        const auto n_val = static_cast<std::size_t>(std::lround(static_cast<double>(rest) * (1.0 - spec.train_frac_of_dev)));
        const auto n_train = rest - n_val;
        const auto n_keep = static_cast<std::size_t>(std::lround(static_cast<double>(n_train) * spec.train_ratio));
        for (std::size_t k = 0; k < idx.size(); ++k) {
            if (k < n_test) {
                assign[idx[k]] = 2;
            } else if (k < n_test + n_val) {
                assign[idx[k]] = 1;
            } else if (k < n_test + n_val + n_keep) {
                assign[idx[k]] = 0;
            }
        }
    }
    Split out;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        switch (assign[i]) {
            case 0: out.train.push_back(cohort[i].id); break;
            case 1: out.val.push_back(cohort[i].id); break;
            case 2: out.test.push_back(cohort[i].id); break;
            default: break;
        }
    }
    return out;
}

void assert_disjoint(const Split& split) {
    std::set<std::string> seen;
    for (const auto* part : {&split.train, &split.val, &split.test}) {
        for (const auto& id : *part) {
            if (!seen.insert(id).second) throw std::logic_error("patient " + id + " appears in more than one split");
        }
    }
}

void adamw_step(ParameterList& params, AdamWState& state, const AdamWConfig& cfg) {
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.push_back(Eigen::VectorXd::Zero(p.value.numel()));
            state.v.push_back(Eigen::VectorXd::Zero(p.value.numel()));
        }
    }
    if (state.m.size() != params.size()) throw std::logic_error("optimizer state does not match parameters");
    for (auto& p : params) {
        const auto& g = p.value.node()->grad;
        if (g.size() && !g.allFinite()) throw std::runtime_error("non-finite gradient in " + p.name);
    }
    ++state.t;
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i];
        Eigen::VectorXd& w = p.value.mutable_data();
        auto& m = state.m[i];
        auto& v = state.v[i];
        if (p.decay && cfg.weight_decay != 0.0) w *= 1.0 - cfg.lr * cfg.weight_decay;
        const auto& g = p.value.node()->grad;
        if (g.size()) {
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseAbs2();
        } else {
            m *= cfg.beta1;
            v *= cfg.beta2;
        }
        w.array() -= cfg.lr * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.eps);
        p.value.zero_grad();
    }
}

bool EarlyStopping::update(double metric) {
    ++epoch_;
    const bool better = epoch_ == 1 || (maximize_ ? metric > best_ : metric < best_);
    if (better) {
        best_ = metric;
        best_epoch_ = epoch_;
        since_best_ = 0;
    } else {
        ++since_best_;
    }
    return better;
}

void write_curve_csv(std::ostream& os, const std::vector<CurvePoint>& curve) {
    os << "epoch,split,metric,value\n";
    char buf[64];
    for (const auto& c : curve) {
        std::snprintf(buf, sizeof buf, "%.10g", c.value);
        os << c.epoch << ',' << c.split << ',' << c.metric << ',' << buf << '\n';
    }
}

double pretrain_loss(const SequenceModel& m, const std::vector<TokenizedSequence>& data, double mask_prob,
                     std::uint64_t seed) {
    NoGradGuard guard;
    double total = 0.0;
    long count = 0;
    if (m.config().objective == Objective::MLM) {
        Rng rng(seed);
        for (const auto& s : data) {
            const auto masked = mask_tokens(trim_padding(s), m.config().vocab_size, mask_prob, rng);
            if (masked.count == 0) continue;
            const auto term = mlm_term(m, masked);
            total += term.sum.item();
            count += term.count;
        }
    } else {
        for (const auto& s : data) {
            if (s.valid_length() < 2) continue;
            const auto term = ntp_term(m, s);
            total += term.sum.item();
            count += term.count;
        }
    }
    if (count == 0) throw std::invalid_argument("no scorable tokens in data");
    return total / static_cast<double>(count);
}

TrainResult pretrain(SequenceModel& model, const std::vector<TokenizedSequence>& train,
                     const std::vector<TokenizedSequence>& val, const TrainConfig& cfg) {
    validate(cfg);
    if (train.empty()) throw std::invalid_argument("empty training set");
    if (val.empty()) throw std::invalid_argument("empty validation set");
    const bool mlm = model.config().objective == Objective::MLM;
    const std::uint64_t val_seed = derive_seed(cfg.seed, kValMaskStream);

    std::vector<TokenizedSequence> trimmed;
    trimmed.reserve(train.size());
    for (const auto& s : train) {
        if (s.valid_length() >= 2) trimmed.push_back(trim_padding(s));
    }
    if (trimmed.empty()) throw std::invalid_argument("empty training set");

    TrainResult result;
    EarlyStopping stopper(cfg.pretrain_patience, false);
    AdamWState state;
    const auto opt = optimizer_config(cfg);
    auto& params = model.parameters();
    Snapshot best = snapshot(params);
    const double initial = pretrain_loss(model, val, cfg.mask_prob, val_seed);
    result.curve.push_back({0, "val", "loss", initial});

    model.set_dropout(cfg.dropout);
    const int vocab_size = model.config().vocab_size;
    Rng mask_rng(derive_seed(cfg.seed, kMaskStream));
    Rng drop_rng(derive_seed(cfg.seed, kDropoutStream));
    Rng* drop_ptr = cfg.dropout > 0.0 ? &drop_rng : nullptr;
    for (int epoch = 1; epoch <= cfg.pretrain_epochs; ++epoch) {
        const auto order = epoch_order(trimmed.size(), cfg.seed, epoch);
        double epoch_loss = 0.0;
        long epoch_count = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            if (mlm) {
                std::vector<MaskedSequence> masked;
                int total = 0;
                for (auto k = start; k < end; ++k) {
                    masked.push_back(mask_tokens(trimmed[order[k]], vocab_size, cfg.mask_prob, mask_rng));
                    total += masked.back().count;
                }
                if (total == 0) continue;
                for (const auto& ms : masked) {
                    if (ms.count == 0) continue;
                    const auto term = mlm_term(model, ms, drop_ptr);
                    epoch_loss += term.sum.item();
                    term.sum.backward(1.0 / total);
                }
                epoch_count += total;
            } else {
                int total = 0;
                for (auto k = start; k < end; ++k) total += trimmed[order[k]].valid_length() - 1;
                for (auto k = start; k < end; ++k) {
                    const auto term = ntp_term(model, trimmed[order[k]], drop_ptr);
                    epoch_loss += term.sum.item();
                    term.sum.backward(1.0 / total);
                }
                epoch_count += total;
            }
            adamw_step(params, state, opt);
        }
        const double val_loss = pretrain_loss(model, val, cfg.mask_prob, val_seed);
        result.curve.push_back({epoch, "train", "loss", epoch_count ? epoch_loss / static_cast<double>(epoch_count) : 0.0});
        result.curve.push_back({epoch, "val", "loss", val_loss});
        result.epochs_run = epoch;
        if (stopper.update(val_loss)) best = snapshot(params);
        if (stopper.should_stop()) break;
    }
    restore(params, best);
    result.best_epoch = stopper.best_epoch();
    result.best_value = stopper.best();
    return result;
}

TrainResult finetune(SequenceModel& model, ClassifierHead& head, const std::vector<TokenizedSequence>& train,
                     const std::vector<TokenizedSequence>& val, const TrainConfig& cfg) {
    validate(cfg);
    if (train.empty() || val.empty()) throw std::invalid_argument("empty fine-tuning split");
    int positives = 0;
    for (const auto& s : train) positives += s.label != 0;
    if (positives == 0 || positives == static_cast<int>(train.size())) {
        throw std::invalid_argument("single-class training split");
    }
    std::vector<int> val_labels;
    for (const auto& s : val) val_labels.push_back(s.label);

    std::vector<TokenizedSequence> trimmed;
    trimmed.reserve(train.size());
    for (const auto& s : train) trimmed.push_back(trim_padding(s));

    ParameterList params = model.parameters();
    for (const auto& p : head.parameters()) params.push_back(p);

    TrainResult result;
    EarlyStopping stopper(cfg.finetune_patience, true);
    AdamWState state;
    const auto opt = optimizer_config(cfg);
    Snapshot best = snapshot(params);
    model.set_dropout(cfg.dropout);
    Rng drop_rng(derive_seed(cfg.seed, kDropoutStream + 1));
    Rng* drop_ptr = cfg.dropout > 0.0 ? &drop_rng : nullptr;
    for (int epoch = 1; epoch <= cfg.finetune_epochs; ++epoch) {
        const auto order = epoch_order(trimmed.size(), derive_seed(cfg.seed, 0xf1), epoch);
        double epoch_loss = 0.0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const auto end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const double inv = 1.0 / static_cast<double>(end - start);
            for (auto k = start; k < end; ++k) {
                const auto& s = trimmed[order[k]];
                const Tensor loss = bce_with_logits(classifier_logit(model, head, s, drop_ptr), s.label);
                epoch_loss += loss.item();
                loss.backward(inv);
            }
            adamw_step(params, state, opt);
        }
        const auto probs = classify(model, head, val);
        const double val_auprc = auprc(val_labels, probs);
        result.curve.push_back({epoch, "train", "bce", epoch_loss / static_cast<double>(trimmed.size())});
        result.curve.push_back({epoch, "val", "auprc", val_auprc});
        result.epochs_run = epoch;
        if (stopper.update(val_auprc)) best = snapshot(params);
        if (stopper.should_stop()) break;
    }
    restore(params, best);
    result.best_epoch = stopper.best_epoch();
    result.best_value = stopper.best();
    return result;
}

}  // namespace ehrseq
