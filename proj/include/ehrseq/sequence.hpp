#pragma once

#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "json.hpp"

namespace ehrseq {

/// Token-type stream values. Also the row index into the type embedding.
enum class TokenType : int { PAD, CLS, MASK, UNK, VS, VE, REG, ATT, DX, VIT, LAB, MED, PRO };

inline constexpr int kTypeRows = 13;
inline constexpr int kAgeRows = 94;     // PAD + ages 18..110
inline constexpr int kSexRows = 3;      // PAD, F, M
inline constexpr int kBmiRows = 11;     // PAD + 10 bins
inline constexpr int kTimeRows = 522;   // PAD + weeks 0..520
inline constexpr int kVisitRows = 65;   // PAD + visits 1..64
inline constexpr int kSegmentRows = 2;
inline constexpr int kMinAge = 18;
inline constexpr int kMaxAge = 110;
inline constexpr int kMaxWeeks = 520;
inline constexpr int kMaxVisitId = 64;

TokenType token_type(ConceptGroup g);

enum class BinMode { EqualWidth, Quantile };

/// Interior bin edges; bin(v) counts edges <= v.
struct BinEdges {
    std::vector<double> edges;

    int bin(double v) const;
    int n_bins() const { return static_cast<int>(edges.size()) + 1; }
};

/// Equal-width bins over the [p1, p99] range (values outside are clamped),
/// or quantile bins. All-identical input gives one degenerate bin.
BinEdges fit_bins(std::span<const double> values, int b, BinMode mode = BinMode::EqualWidth);

/// Artificial time token for a gap between visits: [W0]-[W3] by week under
/// 28 days, [M1]-[M11] by 30-day month under 360 days, [LT] beyond.
std::string att_token(double gap_days);

/// Merges consecutive encounters less than 24 h apart.
PatientRecord merge_encounters(const PatientRecord& rec);

struct HistoryMode {
    enum class Kind { Cutoff, Truncate, Aggregate };
    Kind kind{Kind::Cutoff};
    int years{0};        // Truncate
    int window_days{1};  // Aggregate

    static HistoryMode cutoff() { return {}; }
    static HistoryMode truncate(int years) { return {Kind::Truncate, years, 1}; }
    static HistoryMode aggregate(int days) { return {Kind::Aggregate, 0, days}; }

    /// Cutoff, Truncate0, Truncate1y, Truncate3y, Agg1d, Agg2d.
    std::string name() const;
    static HistoryMode parse(std::string_view s);
};

/// Applies truncation or aggregation to a merged record.
PatientRecord apply_history(const PatientRecord& merged, const HistoryMode& mode);

class Vocabulary {
public:
    static constexpr int kPad = 0;
    static constexpr int kCls = 1;
    static constexpr int kMask = 2;
    static constexpr int kUnk = 3;
    static constexpr int kVs = 4;
    static constexpr int kVe = 5;
    static constexpr int kReg = 6;
    static constexpr int kFirstAtt = 7;
    static constexpr int kNumAtt = 16;
    static constexpr int kNumSpecials = kFirstAtt + kNumAtt;

    /// Fits bins and token lists on `cohort` (the training split).
    static Vocabulary build(const std::vector<PatientRecord>& cohort, int bins, int icd_level,
                            BinMode mode = BinMode::EqualWidth);

    int size() const { return static_cast<int>(id_to_token_.size()); }
    int bins() const { return bins_; }
    int icd_level() const { return icd_level_; }

    std::optional<int> find(std::string_view token) const;
    int id_or_unk(std::string_view token) const;
    const std::string& token(int id) const { return id_to_token_.at(static_cast<std::size_t>(id)); }

    /// Half-open id range of a concept group.
    std::pair<int, int> range(ConceptGroup g) const { return ranges_[static_cast<std::size_t>(g)]; }
    bool is_special(int id) const { return id < kNumSpecials; }
    std::optional<ConceptGroup> group_of(int id) const;
    TokenType type_of(int id) const;

    /// Vocabulary id of an event (DX codes truncated to the ICD level,
    /// measurements binned). Unknown codes map to [UNK].
    int event_id(const ClinicalEvent& e) const;
    std::string event_token(const ClinicalEvent& e) const;

    const BinEdges* measurement_bins(const std::string& code) const;
    const BinEdges& bmi_bins() const { return bmi_edges_; }
    double bmi_median() const { return bmi_median_; }

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

private:
    void index();

    int bins_{10};
    int icd_level_{3};
    BinMode mode_{BinMode::EqualWidth};
    std::vector<std::string> id_to_token_;
    std::vector<ConceptGroup> group_order_;
    std::unordered_map<std::string, int> token_to_id_;
    std::pair<int, int> ranges_[5]{};
    std::unordered_map<std::string, BinEdges> bins_by_code_;
    BinEdges bmi_edges_;
    double bmi_median_{0.0};
};

std::string_view special_token(int id);

/// Parallel index streams of one patient, right-padded to the context length.
struct TokenizedSequence {
    std::string patient_id;
    std::vector<int> concept_ids, type_ids, age_ids, sex_ids, bmi_ids, time_week_ids, visit_ids,
        segment_ids, position_ids;
    std::vector<bool> mask;
    int label{0};

    std::size_t size() const { return concept_ids.size(); }
    /// Number of non-PAD positions (they form a prefix).
    int valid_length() const;
};

struct TokenizeOptions {
    int context_length{512};
    HistoryMode history;
    /// Concept groups kept after the context window is taken.
    std::vector<ConceptGroup> groups{std::begin(kAllGroups), std::end(kAllGroups)};
    std::string task{"T2"};
};

TokenizedSequence tokenize(const PatientRecord& rec, const Vocabulary& vocab,
                           const TokenizeOptions& opts);
TokenizedSequence tokenize(const PatientRecord& rec, const Vocabulary& vocab, int context_length,
                           const HistoryMode& history);

/// Drops trailing PAD positions.
TokenizedSequence trim_padding(const TokenizedSequence& seq);

/// Copy with streams replaced by `keep` positions, re-padded to `length`.
TokenizedSequence select_positions(const TokenizedSequence& seq, std::span<const int> keep,
                                   int length);

nlohmann::json to_json(const TokenizedSequence& seq);
TokenizedSequence sequence_from_json(const nlohmann::json& j);
void write_sequences(std::ostream& os, const std::vector<TokenizedSequence>& seqs, int context_length);
std::vector<TokenizedSequence> read_sequences(std::istream& is);

}  // namespace ehrseq
