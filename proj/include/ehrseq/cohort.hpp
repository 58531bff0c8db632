#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace ehrseq {

enum class ConceptGroup { DX, VIT, LAB, MED, PRO };

inline constexpr ConceptGroup kAllGroups[] = {ConceptGroup::DX, ConceptGroup::VIT,
                                              ConceptGroup::LAB, ConceptGroup::MED,
                                              ConceptGroup::PRO};

std::string_view to_string(ConceptGroup g);
ConceptGroup parse_group(std::string_view s);

/// True for groups whose events carry a measured value.
constexpr bool is_measurement(ConceptGroup g) {
    return g == ConceptGroup::VIT || g == ConceptGroup::LAB || g == ConceptGroup::MED;
}

struct ClinicalEvent {
    ConceptGroup group{ConceptGroup::DX};
    std::string code;
    std::optional<double> value;
    double timestamp{0.0};  // days since epoch

    bool operator==(const ClinicalEvent&) const = default;
};

struct Encounter {
    double admit{0.0};
    double discharge{0.0};
    std::vector<ClinicalEvent> events;

    bool operator==(const Encounter&) const = default;
};

enum class Sex { F, M };

struct PatientRecord {
    std::string id;
    int age_at_index{0};
    Sex sex{Sex::F};
    std::optional<double> bmi;
    std::vector<Encounter> encounters;
    std::map<std::string, int> labels;  // task id -> {0,1}

    bool operator==(const PatientRecord&) const = default;
};

inline const std::vector<std::string> kTasks{"T1", "T2", "T3"};

struct RiskCode {
    std::string code;
    double weight{0.0};
};

/// Bonus applies only when the first occurrence of `first` precedes that of `second`.
struct OrderPair {
    std::string first;
    std::string second;
    double bonus{0.0};
};

/// Planted outcome signal. Signal codes are DX codes outside the background
/// code space. They close the index (last) encounter: risk codes first, then
/// the order pair, adjacent and in random order.
struct SignalSpec {
    std::vector<RiskCode> risk_codes;
    OrderPair order_pair;
    double noise_sigma{0.0};
    double carrier_rate{0.3};  // chance each risk code is planted
    double pair_rate{0.9};     // chance each member of the order pair is planted
};

/// Sizes of the synthetic background code lists.
struct CodeSpace {
    int dx_categories{120};
    int dx_subcodes{4};
    int vitals{6};
    int labs{18};
    int meds{143};
    int procedures{100};
    double zipf_exponent{1.1};
};

struct SynthConfig {
    int n_patients{1000};
    std::uint64_t seed{0};
    int target_median_tokens{153};
    int target_median_visits{2};
    std::map<std::string, double> prevalence_targets{
        {"T1", 0.397}, {"T2", 0.248}, {"T3", 0.467}};
    SignalSpec signal;
    CodeSpace codes;
};

/// Order-dependent signal used by the examples and the acceptance runs.
SignalSpec default_signal();

void validate(const SynthConfig& cfg);

std::vector<PatientRecord> generate_cohort(const SynthConfig& cfg);

/// Observable part of the label logit (no intercept, no noise).
double risk_score(const PatientRecord& rec, const SignalSpec& signal);

/// Intercept such that the expected label prevalence equals `prevalence`.
double calibrate_intercept(const SignalSpec& signal, double prevalence);

/// Monte-Carlo AUROC of the true risk score against labels drawn from the
/// generator's label model.
double bayes_rate(const SynthConfig& cfg, std::int64_t n_mc, const std::string& task = "T2");

// JSON-Lines cohort format: one PatientRecord object per line.
nlohmann::json to_json(const PatientRecord& rec);
PatientRecord patient_from_json(const nlohmann::json& j);
void write_jsonl(std::ostream& os, const std::vector<PatientRecord>& cohort);
std::vector<PatientRecord> read_jsonl(std::istream& is);
std::string cohort_hash(const std::vector<PatientRecord>& cohort);

nlohmann::json to_json(const SynthConfig& cfg);
SynthConfig synth_config_from_json(const nlohmann::json& j);

}  // namespace ehrseq
