#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ehrseq/cohort.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/random.hpp"
#include "ehrseq/sequence.hpp"

using namespace ehrseq;

namespace {

ClinicalEvent dx(const std::string& code, double t) { return {ConceptGroup::DX, code, std::nullopt, t}; }
ClinicalEvent vit(const std::string& code, double v, double t) { return {ConceptGroup::VIT, code, v, t}; }

PatientRecord two_visits(double gap_days) {
    PatientRecord r;
    r.id = "p";
    r.age_at_index = 60;
    r.labels = {{"T1", 0}, {"T2", 1}, {"T3", 0}};
    r.encounters.push_back({0.0, 2.0, {dx("I509", 0.5), vit("VIT_hr", 70.0, 1.0)}});
    r.encounters.push_back({2.0 + gap_days, 4.0 + gap_days, {dx("I501", 2.5 + gap_days)}});
    return r;
}

std::vector<PatientRecord> cohort_of(int n, std::uint64_t seed) {
    SynthConfig c;
    c.n_patients = n;
    c.seed = seed;
    c.signal = default_signal();
    return generate_cohort(c);
}

std::vector<std::string> tokens(const TokenizedSequence& s, const Vocabulary& v) {
    std::vector<std::string> out;
    for (int p = 0; p < s.valid_length(); ++p) out.push_back(v.token(s.concept_ids[static_cast<std::size_t>(p)]));
    return out;
}

int valid_count(const PatientRecord& r, const Vocabulary& v, HistoryMode h) {
    return tokenize(r, v, 1 << 20, h).valid_length();
}

/// Merge by repeated pairwise passes until nothing changes.
std::size_t merged_count_oracle(std::vector<std::pair<double, double>> spans) {
    bool changed = true;
    while (changed) {
        changed = false;
        for (std::size_t k = 0; k + 1 < spans.size(); ++k) {
            if (spans[k + 1].first - spans[k].second < 1.0) {
                spans[k].second = std::max(spans[k].second, spans[k + 1].second);
                spans.erase(spans.begin() + static_cast<std::ptrdiff_t>(k) + 1);
                changed = true;
                break;
            }
        }
    }
    return spans.size();
}

}  // namespace

TEST_CASE("merge_encounters") {
    PatientRecord r;
    r.encounters.push_back({0.0, 1.0, {dx("A", 0.5)}});
    r.encounters.push_back({1.5, 2.0, {dx("B", 1.6)}});  // 12 h after
    r.encounters.push_back({3.5, 4.0, {dx("C", 3.6)}});  // 36 h after
    const auto m = merge_encounters(r);
    REQUIRE(m.encounters.size() == 2);
    CHECK(m.encounters[0].discharge == 2.0);
    CHECK(m.encounters[0].events.size() == 2);
    CHECK(m.encounters[0].events[1].code == "B");

    PatientRecord single;
    single.encounters.push_back({0.0, 1.0, {dx("A", 0.5)}});
    CHECK(merge_encounters(single) == single);

    Rng rng(3);
    for (int trial = 0; trial < 200; ++trial) {
        PatientRecord p;
        std::vector<std::pair<double, double>> spans;
        double t = 0.0;
        const int n = 1 + static_cast<int>(rng.below(8));
        for (int k = 0; k < n; ++k) {
            const double len = rng.uniform() * 2.0;
            spans.emplace_back(t, t + len);
            p.encounters.push_back({t, t + len, {dx("A", t)}});
            t += len + rng.uniform() * 2.0;
        }
        const auto m2 = merge_encounters(p);
        CHECK(m2.encounters.size() == merged_count_oracle(spans));
        for (std::size_t k = 1; k < m2.encounters.size(); ++k) {
            CHECK(m2.encounters[k].admit - m2.encounters[k - 1].discharge >= 1.0);
        }
    }
}

TEST_CASE("fit_bins") {
    std::vector<double> v;
    for (int k = 1; k <= 100; ++k) v.push_back(k);
    const auto e = fit_bins(v, 10);
    CHECK(e.n_bins() == 10);
    CHECK(e.bin(5) == 0);
    CHECK(e.bin(95) == 9);
    CHECK(std::is_sorted(e.edges.begin(), e.edges.end()));

    const std::vector<double> constant(20, 3.0);
    CHECK(fit_bins(constant, 10).bin(3.0) == 0);
    CHECK(fit_bins(constant, 10).bin(-100.0) == 0);

    // direct edge comparison on random data
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> xs;
        for (int k = 0; k < 300; ++k) xs.push_back(rng.normal(50.0, 10.0));
        const int b = trial % 2 ? 5 : 10;
        const auto edges = fit_bins(xs, b);
        const double lo = quantile(xs, 0.01), hi = quantile(xs, 0.99);
        REQUIRE(edges.edges.size() == static_cast<std::size_t>(b - 1));
        for (double x : xs) {
            int expect = 0;
            for (int k = 1; k < b; ++k) expect += x >= lo + k * (hi - lo) / b;
            CHECK(edges.bin(x) == expect);
            CHECK(edges.bin(x) >= 0);
            CHECK(edges.bin(x) < b);
        }
    }
}

TEST_CASE("att_token boundaries") {
    CHECK(att_token(63) == "[M2]");
    CHECK(att_token(0) == "[W0]");
    CHECK(att_token(360) == "[LT]");
    CHECK(att_token(359) == "[M11]");
    CHECK_THROWS_AS(att_token(-1), std::invalid_argument);
    for (int d = 0; d <= 400; ++d) {
        std::string expect;
        if (d < 28) {
            expect = "[W" + std::to_string(d / 7) + "]";
        } else if (d < 360) {
            expect = "[M" + std::to_string(std::max(1, d / 30)) + "]";
        } else {
            expect = "[LT]";
        }
        CHECK(att_token(d) == expect);
    }
}

TEST_CASE("vocabulary construction") {
    const auto cohort = cohort_of(300, 2);
    const auto v10 = Vocabulary::build(cohort, 10, 3);
    const auto v5 = Vocabulary::build(cohort, 5, 3);
    auto count = [](const Vocabulary& v, ConceptGroup g) { return v.range(g).second - v.range(g).first; };
    CHECK(count(v10, ConceptGroup::VIT) == 2 * count(v5, ConceptGroup::VIT));
    CHECK(count(v10, ConceptGroup::DX) == count(v5, ConceptGroup::DX));

    // size = specials + per-group unique counts (set-union oracle)
    std::set<std::string> dx, pro, meas[3];
    for (const auto& r : cohort) {
        for (const auto& enc : r.encounters) {
            for (const auto& e : enc.events) {
                if (e.group == ConceptGroup::DX) dx.insert(e.code.substr(0, 3));
                if (e.group == ConceptGroup::PRO) pro.insert(e.code);
                if (e.group == ConceptGroup::VIT) meas[0].insert(e.code);
                if (e.group == ConceptGroup::LAB) meas[1].insert(e.code);
                if (e.group == ConceptGroup::MED) meas[2].insert(e.code);
            }
        }
    }
    const auto expect = Vocabulary::kNumSpecials + dx.size() + pro.size() +
                        10 * (meas[0].size() + meas[1].size() + meas[2].size());
    CHECK(static_cast<std::size_t>(v10.size()) == expect);

    CHECK(v10.token(Vocabulary::kPad) == "[PAD]");
    for (int id = 0; id < v10.size(); ++id) {
        CHECK(v10.find(v10.token(id)) == id);
        const bool special = v10.is_special(id);
        CHECK(special != v10.group_of(id).has_value());
    }
    for (auto g : kAllGroups) {
        const auto [lo, hi] = v10.range(g);
        std::vector<std::string> names;
        for (int id = lo; id < hi; ++id) names.push_back(v10.token(id));
        CHECK(std::is_sorted(names.begin(), names.end()));
    }

    const auto again = Vocabulary::build(cohort, 10, 3);
    CHECK(again.to_json() == v10.to_json());
    CHECK(Vocabulary::from_json(v10.to_json()).to_json() == v10.to_json());
}

TEST_CASE("ICD level collapses subcodes") {
    const auto r = two_visits(63);
    const auto v3 = Vocabulary::build({r}, 10, 3);
    const auto v4 = Vocabulary::build({r}, 10, 4);
    CHECK(v3.find("DX:I50").has_value());
    CHECK(!v3.find("DX:I509").has_value());
    CHECK(v4.find("DX:I509").has_value());
    CHECK(v4.find("DX:I501").has_value());
}

TEST_CASE("token grammar with a two-month gap") {
    const auto r = two_visits(63);
    const auto v = Vocabulary::build({r}, 10, 3);
    const auto s = tokenize(r, v, 64, HistoryMode::cutoff());
    const std::vector<std::string> expect{"[CLS]", "[VS]", "DX:I50", "VIT:VIT_hr#0", "[VE]", "[REG]",
                                          "[M2]",  "[VS]", "DX:I50", "[VE]",         "[REG]"};
    CHECK(tokens(s, v) == expect);
    CHECK(s.size() == 64);
    CHECK(s.label == 1);
    for (int p = 0; p < 11; ++p) CHECK(s.mask[static_cast<std::size_t>(p)]);
    CHECK(!s.mask[11]);
    CHECK(s.concept_ids[11] == Vocabulary::kPad);
}

TEST_CASE("cutoff keeps the rightmost C tokens") {
    PatientRecord r;
    r.age_at_index = 50;
    Encounter e{0.0, 5.0, {}};
    // [CLS][VS] + 84 events + [VE][REG] = 88 tokens
    for (int k = 0; k < 84; ++k) e.events.push_back(dx("A" + std::to_string(10 + k), 0.01 * k));
    r.encounters.push_back(e);
    const auto v = Vocabulary::build({r}, 10, 3);
    const int C = 48;
    const auto full = tokenize(r, v, 1000, HistoryMode::cutoff());
    REQUIRE(full.valid_length() == C + 40);
    const auto cut = tokenize(r, v, C, HistoryMode::cutoff());
    CHECK(cut.valid_length() == C);
    for (int p = 0; p < C; ++p) {
        CHECK(cut.concept_ids[static_cast<std::size_t>(p)] == full.concept_ids[static_cast<std::size_t>(p + 40)]);
    }
}

TEST_CASE("aggregation averages repeated measurements") {
    PatientRecord r;
    r.age_at_index = 50;
    r.encounters.push_back({0.0, 2.0, {dx("I10", 0.1), vit("hr", 60.0, 0.2), vit("hr", 80.0, 0.6)}});
    PatientRecord fit = r;
    for (int k = 0; k <= 100; ++k) fit.encounters[0].events.push_back(vit("hr", 20.0 + k, 1.0));
    const auto v = Vocabulary::build({fit}, 10, 3);
    const auto plain = tokenize(r, v, 64, HistoryMode::cutoff());
    const auto agg = tokenize(r, v, 64, HistoryMode::aggregate(1));
    CHECK(agg.valid_length() == plain.valid_length() - 1);
    const auto* edges = v.measurement_bins("VIT:hr");
    REQUIRE(edges);
    const auto t = tokens(agg, v);
    CHECK(std::count(t.begin(), t.end(), "VIT:hr#" + std::to_string(edges->bin(70.0))) == 1);
}

TEST_CASE("invariants over 1000 synthetic patients") {
    const auto cohort = cohort_of(1000, 4);
    const auto v = Vocabulary::build(cohort, 10, 3);
    for (const auto& r : cohort) {
        const auto s = tokenize(r, v, 512, HistoryMode::cutoff());
        const auto L = s.size();
        for (const auto* stream : {&s.type_ids, &s.age_ids, &s.sex_ids, &s.bmi_ids, &s.time_week_ids, &s.visit_ids,
                                   &s.segment_ids, &s.position_ids}) {
            CHECK(stream->size() == L);
        }
        CHECK(s.mask.size() == L);
        const int n = s.valid_length();
        for (std::size_t p = 0; p < L; ++p) {
            CHECK(s.position_ids[p] == static_cast<int>(p));
            CHECK(s.mask[p] == (static_cast<int>(p) < n));
            if (s.mask[p]) CHECK(s.concept_ids[p] != Vocabulary::kPad);
            if (p > 0 && s.mask[p]) {
                CHECK(s.visit_ids[p] >= s.visit_ids[p - 1]);
                if (s.visit_ids[p] != s.visit_ids[p - 1]) CHECK(s.segment_ids[p] != s.segment_ids[p - 1]);
            }
            CHECK((s.segment_ids[p] == 0 || s.segment_ids[p] == 1));
        }
        // grammar: each [VS] is closed by [VE]
        int vs = 0, ve = 0, reg = 0, open = 0;
        for (int p = 0; p < n; ++p) {
            const int id = s.concept_ids[static_cast<std::size_t>(p)];
            if (id == Vocabulary::kVs) ++vs, ++open;
            if (id == Vocabulary::kVe) {
                ++ve;
                if (open > 0) --open;
            }
            if (id == Vocabulary::kReg) ++reg;
        }
        // the window may clip a leading [VE] or [REG]
        CHECK(reg >= ve - 1);
        CHECK(reg <= ve + 1);
        CHECK(open == 0);
        CHECK(vs <= ve);
        CHECK(ve - vs <= 1);

        const int cut = valid_count(r, v, HistoryMode::cutoff());
        const int a1 = valid_count(r, v, HistoryMode::aggregate(1));
        const int a2 = valid_count(r, v, HistoryMode::aggregate(2));
        CHECK(a2 <= a1);
        CHECK(a1 <= cut);

        const auto t0 = tokenize(r, v, 512, HistoryMode::truncate(0));
        for (int p = 1; p < t0.valid_length(); ++p) {
            CHECK(t0.visit_ids[static_cast<std::size_t>(p)] == t0.visit_ids[0]);
        }
    }
}

TEST_CASE("concept filtering hides groups without back-fill") {
    const auto cohort = cohort_of(50, 6);
    const auto v = Vocabulary::build(cohort, 10, 3);
    for (const auto& r : cohort) {
        TokenizeOptions all;
        all.context_length = 128;
        TokenizeOptions dx_only = all;
        dx_only.groups = {ConceptGroup::DX};
        const auto a = tokenize(r, v, all);
        const auto d = tokenize(r, v, dx_only);
        std::vector<int> expect;
        for (int p = 0; p < a.valid_length(); ++p) {
            const auto t = static_cast<TokenType>(a.type_ids[static_cast<std::size_t>(p)]);
            if (t < TokenType::VIT || t == TokenType::ATT) expect.push_back(a.concept_ids[static_cast<std::size_t>(p)]);
        }
        std::vector<int> got(d.concept_ids.begin(), d.concept_ids.begin() + d.valid_length());
        CHECK(got == expect);
    }
}

TEST_CASE("history mode names") {
    for (std::string s : {"Cutoff", "Truncate0", "Truncate1y", "Truncate3y", "Agg1d", "Agg2d"}) {
        CHECK(HistoryMode::parse(s).name() == s);
    }
    CHECK_THROWS_AS(HistoryMode::parse("Agg0d"), std::invalid_argument);
    CHECK_THROWS_AS(HistoryMode::parse("nope"), std::invalid_argument);
}

TEST_CASE("sequence json round trip") {
    const auto cohort = cohort_of(20, 8);
    const auto v = Vocabulary::build(cohort, 10, 3);
    std::vector<TokenizedSequence> seqs;
    for (const auto& r : cohort) seqs.push_back(tokenize(r, v, 128, HistoryMode::cutoff()));
    std::ostringstream os;
    write_sequences(os, seqs, 128);
    std::istringstream is(os.str());
    const auto back = read_sequences(is);
    REQUIRE(back.size() == seqs.size());
    for (std::size_t k = 0; k < seqs.size(); ++k) {
        CHECK(back[k].concept_ids == seqs[k].concept_ids);
        CHECK(back[k].time_week_ids == seqs[k].time_week_ids);
        CHECK(back[k].mask == seqs[k].mask);
        CHECK(back[k].label == seqs[k].label);
    }
}
