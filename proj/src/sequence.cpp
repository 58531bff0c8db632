#include "ehrseq/sequence.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <stdexcept>

#include "ehrseq/metrics.hpp"

namespace ehrseq {
namespace {

using nlohmann::json;

constexpr double kMergeGapDays = 1.0;
constexpr double kDaysPerYear = 365.0;

const std::string kSpecialTokens[Vocabulary::kNumSpecials] = {
    "[PAD]", "[CLS]", "[MASK]", "[UNK]", "[VS]", "[VE]", "[REG]", "[W0]",
    "[W1]",  "[W2]",  "[W3]",   "[M1]",  "[M2]", "[M3]", "[M4]",  "[M5]",
    "[M6]",  "[M7]",  "[M8]",   "[M9]",  "[M10]", "[M11]", "[LT]"};

std::string group_prefix(ConceptGroup g) { return std::string{to_string(g)} + ":"; }

std::string dx_truncated(const std::string& code, int level) {
    return code.size() > static_cast<std::size_t>(level) ? code.substr(0, static_cast<std::size_t>(level))
                                                         : code;
}

std::string measurement_token(ConceptGroup g, const std::string& code, int bin) {
    return group_prefix(g) + code + "#" + std::to_string(bin);
}

void sort_by_time(std::vector<ClinicalEvent>& events) {
    std::stable_sort(events.begin(), events.end(),
                     [](const ClinicalEvent& a, const ClinicalEvent& b) { return a.timestamp < b.timestamp; });
}

}  // namespace

TokenType token_type(ConceptGroup g) {
    return static_cast<TokenType>(static_cast<int>(TokenType::DX) + static_cast<int>(g));
}

int BinEdges::bin(double v) const {
    return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), v) - edges.begin());
}

BinEdges fit_bins(std::span<const double> values, int b, BinMode mode) {
    if (b < 1) throw std::invalid_argument("bin count must be >= 1");
    std::vector<double> finite;
    finite.reserve(values.size());
    for (double v : values) {
        if (std::isfinite(v)) finite.push_back(v);
    }
    if (finite.empty()) throw std::invalid_argument("fit_bins needs at least one finite value");

    BinEdges out;
    if (mode == BinMode::EqualWidth) {
        const double lo = quantile(finite, 0.01);
        const double hi = quantile(finite, 0.99);
        if (!(hi > lo)) return out;
        const double width = (hi - lo) / b;
        for (int k = 1; k < b; ++k) out.edges.push_back(lo + k * width);
    } else {
        for (int k = 1; k < b; ++k) {
            const double q = quantile(finite, static_cast<double>(k) / b);
            if (out.edges.empty() || q > out.edges.back()) out.edges.push_back(q);
        }
        // A single-valued sample has no interior edge.
        if (!out.edges.empty() && *std::min_element(finite.begin(), finite.end()) ==
                                      *std::max_element(finite.begin(), finite.end())) {
            out.edges.clear();
        }
    }
    return out;
}

std::string att_token(double gap_days) {
    if (!(gap_days >= 0.0)) throw std::invalid_argument("negative gap");
    if (gap_days < 28.0) {
        return "[W" + std::to_string(static_cast<int>(gap_days / 7.0)) + "]";
    }
    if (gap_days < 360.0) {
        const int month = std::max(1, static_cast<int>(gap_days / 30.0));
        return "[M" + std::to_string(month) + "]";
    }
    return "[LT]";
}

PatientRecord merge_encounters(const PatientRecord& rec) {
    PatientRecord out = rec;
    out.encounters.clear();
    for (const auto& enc : rec.encounters) {
        if (!out.encounters.empty() && enc.admit - out.encounters.back().discharge < kMergeGapDays) {
            auto& cur = out.encounters.back();
            cur.discharge = std::max(cur.discharge, enc.discharge);
            cur.events.insert(cur.events.end(), enc.events.begin(), enc.events.end());
            sort_by_time(cur.events);
        } else {
            out.encounters.push_back(enc);
        }
    }
    return out;
}

std::string HistoryMode::name() const {
    switch (kind) {
        case Kind::Cutoff: return "Cutoff";
        case Kind::Truncate: return years == 0 ? "Truncate0" : "Truncate" + std::to_string(years) + "y";
        case Kind::Aggregate: return "Agg" + std::to_string(window_days) + "d";
    }
    return "?";
}

HistoryMode HistoryMode::parse(std::string_view s) {
    if (s == "Cutoff") return cutoff();
    if (s == "Truncate0") return truncate(0);
    auto number_between = [&](std::string_view prefix, std::string_view suffix) -> std::optional<int> {
        if (s.size() <= prefix.size() + suffix.size() || s.substr(0, prefix.size()) != prefix ||
            s.substr(s.size() - suffix.size()) != suffix) {
            return std::nullopt;
        }
        const auto digits = s.substr(prefix.size(), s.size() - prefix.size() - suffix.size());
        if (!std::all_of(digits.begin(), digits.end(), [](char c) { return c >= '0' && c <= '9'; })) {
            return std::nullopt;
        }
        return std::stoi(std::string{digits});
    };
    if (auto y = number_between("Truncate", "y")) return truncate(*y);
    if (auto d = number_between("Agg", "d"); d && *d >= 1) return aggregate(*d);
    throw std::invalid_argument("unknown history mode: " + std::string{s});
}

PatientRecord apply_history(const PatientRecord& merged, const HistoryMode& mode) {
    PatientRecord out = merged;
    if (out.encounters.empty()) return out;
    switch (mode.kind) {
        case HistoryMode::Kind::Cutoff: break;
        case HistoryMode::Kind::Truncate: {
            if (mode.years <= 0) {
                out.encounters.erase(out.encounters.begin(), out.encounters.end() - 1);
                break;
            }
            const double cutoff = out.encounters.back().discharge - kDaysPerYear * mode.years;
            for (auto& enc : out.encounters) {
                std::erase_if(enc.events, [&](const ClinicalEvent& e) { return e.timestamp < cutoff; });
            }
            std::erase_if(out.encounters, [](const Encounter& enc) { return enc.events.empty(); });
            break;
        }
        case HistoryMode::Kind::Aggregate: {
            const double w = mode.window_days;
            for (auto& enc : out.encounters) {
                // (group, code, window) -> index of the surviving event, plus running sums
                std::map<std::tuple<int, std::string, long>, std::size_t> slot;
                std::vector<ClinicalEvent> kept;
                std::vector<std::pair<double, int>> sums;
                for (const auto& e : enc.events) {
                    if (!is_measurement(e.group) || !e.value) {
                        kept.push_back(e);
                        sums.emplace_back(0.0, 0);
                        continue;
                    }
                    const auto window = static_cast<long>(std::floor((e.timestamp - enc.admit) / w));
                    const auto key = std::make_tuple(static_cast<int>(e.group), e.code, window);
                    const auto it = slot.find(key);
                    if (it == slot.end()) {
                        slot.emplace(key, kept.size());
                        kept.push_back(e);
                        sums.emplace_back(*e.value, 1);
                    } else {
                        sums[it->second].first += *e.value;
                        sums[it->second].second += 1;
                    }
                }
                for (std::size_t k = 0; k < kept.size(); ++k) {
                    if (sums[k].second > 1) kept[k].value = sums[k].first / sums[k].second;
                }
                enc.events = std::move(kept);
            }
            break;
        }
    }
    return out;
}

std::string_view special_token(int id) {
    if (id < 0 || id >= Vocabulary::kNumSpecials) throw std::out_of_range("not a special id");
    return kSpecialTokens[id];
}

Vocabulary Vocabulary::build(const std::vector<PatientRecord>& cohort, int bins, int icd_level,
                             BinMode mode) {
    if (cohort.empty()) throw std::invalid_argument("vocabulary needs a non-empty cohort");
    if (bins < 1) throw std::invalid_argument("bins must be >= 1");
    if (icd_level < 1) throw std::invalid_argument("icd level must be >= 1");
    Vocabulary v;
    v.bins_ = bins;
    v.icd_level_ = icd_level;
    v.mode_ = mode;

    std::map<std::string, std::vector<double>> values[5];
    std::vector<std::string> plain[5];
    std::vector<double> bmis;
    for (const auto& rec : cohort) {
        if (rec.bmi) bmis.push_back(*rec.bmi);
        for (const auto& enc : rec.encounters) {
            for (const auto& e : enc.events) {
                const auto g = static_cast<std::size_t>(e.group);
                if (is_measurement(e.group)) {
                    auto& vals = values[g][e.code];
                    if (e.value) vals.push_back(*e.value);
                } else {
                    plain[g].push_back(e.group == ConceptGroup::DX ? dx_truncated(e.code, icd_level) : e.code);
                }
            }
        }
    }

    v.id_to_token_.assign(std::begin(kSpecialTokens), std::end(kSpecialTokens));
    for (auto g : kAllGroups) {
        const auto gi = static_cast<std::size_t>(g);
        const int lo = v.size();
        if (is_measurement(g)) {
            for (const auto& [code, vals] : values[gi]) {
                const auto edges = vals.empty() ? BinEdges{} : fit_bins(vals, bins, mode);
                v.bins_by_code_[group_prefix(g) + code] = edges;
                for (int k = 0; k < bins; ++k) v.id_to_token_.push_back(measurement_token(g, code, k));
            }
        } else {
            auto& codes = plain[gi];
            std::sort(codes.begin(), codes.end());
            codes.erase(std::unique(codes.begin(), codes.end()), codes.end());
            for (const auto& c : codes) v.id_to_token_.push_back(group_prefix(g) + c);
        }
        v.ranges_[gi] = {lo, v.size()};
    }

    if (!bmis.empty()) {
        v.bmi_edges_ = fit_bins(bmis, kBmiRows - 1, mode);
        v.bmi_median_ = quantile(bmis, 0.5);
    } else {
        v.bmi_median_ = 25.0;
    }
    v.index();
    return v;
}

void Vocabulary::index() {
    token_to_id_.clear();
    for (std::size_t id = 0; id < id_to_token_.size(); ++id) {
        if (!token_to_id_.emplace(id_to_token_[id], static_cast<int>(id)).second) {
            throw std::logic_error("duplicate token " + id_to_token_[id]);
        }
    }
}

std::optional<int> Vocabulary::find(std::string_view token) const {
    const auto it = token_to_id_.find(std::string{token});
    if (it == token_to_id_.end()) return std::nullopt;
    return it->second;
}

int Vocabulary::id_or_unk(std::string_view token) const { return find(token).value_or(kUnk); }

std::optional<ConceptGroup> Vocabulary::group_of(int id) const {
    for (auto g : kAllGroups) {
        const auto [lo, hi] = range(g);
        if (id >= lo && id < hi) return g;
    }
    return std::nullopt;
}

TokenType Vocabulary::type_of(int id) const {
    if (id < kFirstAtt) return static_cast<TokenType>(id);
    if (id < kNumSpecials) return TokenType::ATT;
    const auto g = group_of(id);
    if (!g) throw std::out_of_range("token id outside vocabulary");
    return token_type(*g);
}

const BinEdges* Vocabulary::measurement_bins(const std::string& key) const {
    const auto it = bins_by_code_.find(key);
    return it == bins_by_code_.end() ? nullptr : &it->second;
}

std::string Vocabulary::event_token(const ClinicalEvent& e) const {
    if (e.group == ConceptGroup::DX) return group_prefix(e.group) + dx_truncated(e.code, icd_level_);
    if (!is_measurement(e.group)) return group_prefix(e.group) + e.code;
    const auto* edges = measurement_bins(group_prefix(e.group) + e.code);
    if (!edges || !e.value) return std::string{kSpecialTokens[kUnk]};
    return measurement_token(e.group, e.code, std::min(edges->bin(*e.value), bins_ - 1));
}

int Vocabulary::event_id(const ClinicalEvent& e) const { return id_or_unk(event_token(e)); }

json Vocabulary::to_json() const {
    json tokens = json::array();
    for (int id = 0; id < size(); ++id) {
        const auto g = group_of(id);
        tokens.push_back({{"token", token(id)}, {"id", id}, {"group", g ? std::string{ehrseq::to_string(*g)} : "SPECIAL"}});
    }
    json bins = json::object();
    for (const auto& [key, edges] : bins_by_code_) bins[key] = edges.edges;
    return {{"format", "ehrseq.vocab"},
            {"version", 1},
            {"b", bins_},
            {"i", icd_level_},
            {"bin_mode", mode_ == BinMode::EqualWidth ? "equal_width" : "quantile"},
            {"tokens", tokens},
            {"bins", bins},
            {"bmi_edges", bmi_edges_.edges},
            {"bmi_median", bmi_median_}};
}

Vocabulary Vocabulary::from_json(const json& j) {
    if (j.value("format", "") != "ehrseq.vocab" || j.value("version", 0) != 1) {
        throw std::invalid_argument("not an ehrseq.vocab v1 document");
    }
    Vocabulary v;
    v.bins_ = j.at("b").get<int>();
    v.icd_level_ = j.at("i").get<int>();
    v.mode_ = j.at("bin_mode").get<std::string>() == "quantile" ? BinMode::Quantile : BinMode::EqualWidth;
    const auto& tokens = j.at("tokens");
    v.id_to_token_.resize(tokens.size());
    std::vector<std::string> groups(tokens.size());
    for (const auto& t : tokens) {
        const auto id = t.at("id").get<std::size_t>();
        if (id >= tokens.size()) throw std::invalid_argument("token id out of range");
        v.id_to_token_[id] = t.at("token").get<std::string>();
        groups[id] = t.at("group").get<std::string>();
    }
    for (int id = 0; id < kNumSpecials; ++id) {
        if (v.id_to_token_[static_cast<std::size_t>(id)] != kSpecialTokens[id]) {
            throw std::invalid_argument("special tokens out of place");
        }
    }
    int pos = kNumSpecials;
    for (auto g : kAllGroups) {
        const int lo = pos;
        while (pos < v.size() && groups[static_cast<std::size_t>(pos)] == to_string(g)) ++pos;
        v.ranges_[static_cast<std::size_t>(g)] = {lo, pos};
    }
    if (pos != v.size()) throw std::invalid_argument("tokens not grouped in canonical order");
    for (const auto& [key, edges] : j.at("bins").items()) {
        v.bins_by_code_[key] = BinEdges{edges.get<std::vector<double>>()};
    }
    v.bmi_edges_.edges = j.at("bmi_edges").get<std::vector<double>>();
    v.bmi_median_ = j.at("bmi_median").get<double>();
    v.index();
    return v;
}

int TokenizedSequence::valid_length() const {
    return static_cast<int>(std::count(mask.begin(), mask.end(), true));
}

namespace {

struct RawToken {
    int id;
    TokenType type;
    double time;
    int visit;  // 1-based over the processed trajectory
};

}  // namespace

TokenizedSequence tokenize(const PatientRecord& rec, const Vocabulary& vocab, const TokenizeOptions& opts) {
    if (opts.context_length < 1) throw std::invalid_argument("context length must be >= 1");
    const auto merged = merge_encounters(rec);
    const auto processed = apply_history(merged, opts.history);
    if (processed.encounters.empty()) throw std::runtime_error("empty trajectory");

    std::vector<RawToken> raw;
    raw.push_back({Vocabulary::kCls, TokenType::CLS, processed.encounters.front().admit, 1});
    for (std::size_t v = 0; v < processed.encounters.size(); ++v) {
        const auto& enc = processed.encounters[v];
        const int visit = static_cast<int>(v) + 1;
        if (v > 0) {
            const double gap = std::max(0.0, enc.admit - processed.encounters[v - 1].discharge);
            raw.push_back({vocab.id_or_unk(att_token(gap)), TokenType::ATT, enc.admit, visit});
        }
        raw.push_back({Vocabulary::kVs, TokenType::VS, enc.admit, visit});
        for (const auto& e : enc.events) {
            const int id = vocab.event_id(e);
            raw.push_back({id, id == Vocabulary::kUnk ? TokenType::UNK : token_type(e.group), e.timestamp, visit});
        }
        raw.push_back({Vocabulary::kVe, TokenType::VE, enc.discharge, visit});
        raw.push_back({Vocabulary::kReg, TokenType::REG, enc.discharge, visit});
    }

    // Right-sided window, then hide excluded concept groups without back-fill.
    const auto C = static_cast<std::size_t>(opts.context_length);
    std::vector<RawToken> kept(raw.size() > C ? raw.end() - static_cast<std::ptrdiff_t>(C) : raw.begin(),
                               raw.end());
    std::erase_if(kept, [&](const RawToken& t) {
        if (t.type < TokenType::DX) return false;
        const auto g = static_cast<ConceptGroup>(static_cast<int>(t.type) - static_cast<int>(TokenType::DX));
        return std::find(opts.groups.begin(), opts.groups.end(), g) == opts.groups.end();
    });

    const double index_day = merged.encounters.back().discharge;
    double t0 = kept.empty() ? 0.0 : kept.front().time;
    for (const auto& t : kept) t0 = std::min(t0, t.time);
    const int first_visit = kept.empty() ? 1 : kept.front().visit;

    int bmi_id = 0;
    {
        const double bmi = rec.bmi.value_or(vocab.bmi_median());
        bmi_id = 1 + std::min(vocab.bmi_bins().bin(bmi), kBmiRows - 2);
    }

    TokenizedSequence seq;
    seq.patient_id = rec.id;
    const auto lab = rec.labels.find(opts.task);
    seq.label = lab == rec.labels.end() ? 0 : lab->second;
    auto reserve = [&](std::vector<int>& s) { s.assign(C, 0); };
    for (auto* s : {&seq.concept_ids, &seq.type_ids, &seq.age_ids, &seq.sex_ids, &seq.bmi_ids,
                    &seq.time_week_ids, &seq.visit_ids, &seq.segment_ids, &seq.position_ids}) {
        reserve(*s);
    }
    seq.mask.assign(C, false);
    for (std::size_t p = 0; p < C; ++p) seq.position_ids[p] = static_cast<int>(p);
    for (std::size_t p = 0; p < kept.size(); ++p) {
        const auto& t = kept[p];
        const double age = rec.age_at_index - (index_day - t.time) / 365.25;
        const int age_years = std::clamp(static_cast<int>(std::floor(age)), kMinAge, kMaxAge);
        const int weeks = std::clamp(static_cast<int>(std::floor((t.time - t0) / 7.0)), 0, kMaxWeeks);
        const int visit = std::min(t.visit - first_visit + 1, kMaxVisitId);
        seq.concept_ids[p] = t.id;
        seq.type_ids[p] = static_cast<int>(t.type);
        seq.age_ids[p] = age_years - kMinAge + 1;
        seq.sex_ids[p] = rec.sex == Sex::F ? 1 : 2;
        seq.bmi_ids[p] = bmi_id;
        seq.time_week_ids[p] = weeks + 1;
        seq.visit_ids[p] = visit;
        seq.segment_ids[p] = (t.visit - first_visit) % 2;
        seq.mask[p] = true;
    }
    return seq;
}

TokenizedSequence tokenize(const PatientRecord& rec, const Vocabulary& vocab, int context_length,
                           const HistoryMode& history) {
    TokenizeOptions opts;
    opts.context_length = context_length;
    opts.history = history;
    return tokenize(rec, vocab, opts);
}

TokenizedSequence select_positions(const TokenizedSequence& seq, std::span<const int> keep, int length) {
    TokenizedSequence out;
    out.patient_id = seq.patient_id;
    out.label = seq.label;
    const auto L = static_cast<std::size_t>(length);
    auto pick = [&](const std::vector<int>& src, std::vector<int>& dst) {
        dst.assign(L, 0);
        for (std::size_t p = 0; p < keep.size() && p < L; ++p) dst[p] = src.at(static_cast<std::size_t>(keep[p]));
    };
    pick(seq.concept_ids, out.concept_ids);
    pick(seq.type_ids, out.type_ids);
    pick(seq.age_ids, out.age_ids);
    pick(seq.sex_ids, out.sex_ids);
    pick(seq.bmi_ids, out.bmi_ids);
    pick(seq.time_week_ids, out.time_week_ids);
    pick(seq.visit_ids, out.visit_ids);
    pick(seq.segment_ids, out.segment_ids);
    out.position_ids.resize(L);
    out.mask.assign(L, false);
    for (std::size_t p = 0; p < L; ++p) {
        out.position_ids[p] = static_cast<int>(p);
        out.mask[p] = p < keep.size();
    }
    return out;
}

TokenizedSequence trim_padding(const TokenizedSequence& seq) {
    std::vector<int> keep(static_cast<std::size_t>(seq.valid_length()));
    for (std::size_t p = 0; p < keep.size(); ++p) keep[p] = static_cast<int>(p);
    return select_positions(seq, keep, static_cast<int>(keep.size()));
}

json to_json(const TokenizedSequence& seq) {
    std::vector<int> mask(seq.mask.begin(), seq.mask.end());
    return {{"id", seq.patient_id},       {"label", seq.label},         {"concept", seq.concept_ids},
            {"type", seq.type_ids},       {"age", seq.age_ids},         {"sex", seq.sex_ids},
            {"bmi", seq.bmi_ids},         {"time", seq.time_week_ids},  {"visit", seq.visit_ids},
            {"segment", seq.segment_ids}, {"position", seq.position_ids}, {"mask", mask}};
}

TokenizedSequence sequence_from_json(const json& j) {
    TokenizedSequence s;
    s.patient_id = j.at("id").get<std::string>();
    s.label = j.at("label").get<int>();
    s.concept_ids = j.at("concept").get<std::vector<int>>();
    s.type_ids = j.at("type").get<std::vector<int>>();
    s.age_ids = j.at("age").get<std::vector<int>>();
    s.sex_ids = j.at("sex").get<std::vector<int>>();
    s.bmi_ids = j.at("bmi").get<std::vector<int>>();
    s.time_week_ids = j.at("time").get<std::vector<int>>();
    s.visit_ids = j.at("visit").get<std::vector<int>>();
    s.segment_ids = j.at("segment").get<std::vector<int>>();
    s.position_ids = j.at("position").get<std::vector<int>>();
    for (int m : j.at("mask").get<std::vector<int>>()) s.mask.push_back(m != 0);
    const auto n = s.concept_ids.size();
    for (const auto* v : {&s.type_ids, &s.age_ids, &s.sex_ids, &s.bmi_ids, &s.time_week_ids,
                          &s.visit_ids, &s.segment_ids, &s.position_ids}) {
        if (v->size() != n) throw std::invalid_argument("sequence streams differ in length");
    }
    if (s.mask.size() != n) throw std::invalid_argument("mask length differs");
    return s;
}

void write_sequences(std::ostream& os, const std::vector<TokenizedSequence>& seqs, int context_length) {
    os << json{{"format", "ehrseq.sequences"}, {"version", 1}, {"context_length", context_length}}.dump()
       << '\n';
    for (const auto& s : seqs) os << to_json(s).dump() << '\n';
}

std::vector<TokenizedSequence> read_sequences(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("missing sequence header");
    const auto header = json::parse(line);
    if (header.value("format", "") != "ehrseq.sequences" || header.value("version", 0) != 1) {
        throw std::invalid_argument("not an ehrseq.sequences v1 stream");
    }
    std::vector<TokenizedSequence> out;
    while (std::getline(is, line)) {
        if (!line.empty()) out.push_back(sequence_from_json(json::parse(line)));
    }
    return out;
}

}  // namespace ehrseq
