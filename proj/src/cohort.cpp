#include "ehrseq/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "ehrseq/metrics.hpp"
#include "ehrseq/random.hpp"

namespace ehrseq {
namespace {

using nlohmann::json;

// Index discharge dates fall in 2015-01-01 .. 2022-12-31 (days since epoch).
constexpr double kFirstIndexDay = 16436.0;
constexpr double kLastIndexDay = 19357.0;

// Event-group mix from the cohort's median per-group event counts.
constexpr double kGroupShare[] = {9.0, 30.0, 23.0, 63.0, 3.0};

constexpr int kMaxVisits = 61;
constexpr int kMaxEvents = 9552;

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

/// Sampler over ranks 0..n-1 with P(k) proportional to (k+1)^-s.
class Zipf {
public:
    Zipf(int n, double s) : cdf_(static_cast<std::size_t>(n)) {
        double acc = 0.0;
        for (int k = 0; k < n; ++k) {
            acc += std::pow(k + 1.0, -s);
            cdf_[static_cast<std::size_t>(k)] = acc;
        }
        for (auto& c : cdf_) {
            c /= acc;
        }
    }

    int draw(Rng& rng) const {
        const double u = rng.uniform();
        const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return static_cast<int>(std::min<std::ptrdiff_t>(it - cdf_.begin(),
                                                          static_cast<std::ptrdiff_t>(cdf_.size()) - 1));
    }

private:
    std::vector<double> cdf_;
};

std::string numbered(const char* prefix, int k) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s%03d", prefix, k);
    return buf;
}

std::string dx_code(int category, int subcode) {
    // 'X' is reserved for planted signal codes.
    static constexpr char kLetters[] = "ABCDEFGHIJKLMNOPQRSTUVWYZ";
    char buf[16];
    std::snprintf(buf, sizeof buf, "%c%02d%d", kLetters[(category / 100) % 25], category % 100,
                  subcode);
    return buf;
}

std::string vital_name(int k) {
    static const char* kNames[] = {"heart_rate", "sbp", "dbp", "resp_rate", "temperature", "spo2"};
    return k < 6 ? std::string{"VIT_"} + kNames[k] : numbered("VIT_", k);
}

/// Background code lists and per-name value distributions.
struct CodeBook {
    std::vector<std::string> dx, vit, lab, med, pro;
    Zipf dx_z, vit_z, lab_z, med_z, pro_z;

    explicit CodeBook(const CodeSpace& cs)
        : dx_z(cs.dx_categories * cs.dx_subcodes, cs.zipf_exponent),
          vit_z(cs.vitals, 0.5),
          lab_z(cs.labs, cs.zipf_exponent),
          med_z(cs.meds, cs.zipf_exponent),
          pro_z(cs.procedures, cs.zipf_exponent) {
        for (int c = 0; c < cs.dx_categories; ++c) {
            for (int s = 0; s < cs.dx_subcodes; ++s) {
                dx.push_back(dx_code(c, s));
            }
        }
        for (int k = 0; k < cs.vitals; ++k) vit.push_back(vital_name(k));
        for (int k = 0; k < cs.labs; ++k) lab.push_back(numbered("LAB", k));
        for (int k = 0; k < cs.meds; ++k) med.push_back(numbered("MED", k));
        for (int k = 0; k < cs.procedures; ++k) pro.push_back(numbered("PRO", k));
    }

    static double value_mean(int k) { return 20.0 + 7.0 * (k % 13) + k; }

    ClinicalEvent draw(ConceptGroup g, double t, Rng& rng) const {
        ClinicalEvent e;
        e.group = g;
        e.timestamp = t;
        int k = 0;
        switch (g) {
            case ConceptGroup::DX: e.code = dx[static_cast<std::size_t>(dx_z.draw(rng))]; break;
            case ConceptGroup::PRO: e.code = pro[static_cast<std::size_t>(pro_z.draw(rng))]; break;
            case ConceptGroup::VIT:
                k = vit_z.draw(rng);
                e.code = vit[static_cast<std::size_t>(k)];
                break;
            case ConceptGroup::LAB:
                k = lab_z.draw(rng);
                e.code = lab[static_cast<std::size_t>(k)];
                break;
            case ConceptGroup::MED:
                k = med_z.draw(rng);
                e.code = med[static_cast<std::size_t>(k)];
                break;
        }
        if (is_measurement(g)) {
            const double mean = value_mean(k);
            e.value = rng.normal(mean, 0.2 * mean);
        }
        return e;
    }
};

ConceptGroup draw_group(Rng& rng) {
    static const double total = std::accumulate(std::begin(kGroupShare), std::end(kGroupShare), 0.0);
    double u = rng.uniform() * total;
    for (std::size_t g = 0; g < 5; ++g) {
        if (u < kGroupShare[g]) return kAllGroups[g];
        u -= kGroupShare[g];
    }
    return ConceptGroup::PRO;
}

/// Splits `total` into `parts` positive counts with Dirichlet(1) shares.
std::vector<int> split_counts(int total, int parts, Rng& rng) {
    std::vector<double> w(static_cast<std::size_t>(parts));
    for (auto& x : w) x = -std::log(rng.uniform_open0());
    const double sum = std::accumulate(w.begin(), w.end(), 0.0);
    const int spare = total - parts;
    std::vector<int> out(w.size(), 1);
    std::vector<std::pair<double, std::size_t>> rem;
    int used = 0;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double exact = spare * w[k] / sum;
        const int fl = static_cast<int>(std::floor(exact));
        out[k] += fl;
        used += fl;
        rem.emplace_back(exact - fl, k);
    }
    std::stable_sort(rem.begin(), rem.end(), [](auto& a, auto& b) { return a.first > b.first; });
    for (int k = 0; k < spare - used; ++k) {
        out[rem[static_cast<std::size_t>(k)].second] += 1;
    }
    return out;
}

void sort_events(std::vector<ClinicalEvent>& ev) {
    std::stable_sort(ev.begin(), ev.end(),
                     [](const ClinicalEvent& a, const ClinicalEvent& b) { return a.timestamp < b.timestamp; });
}

PatientRecord generate_patient(const SynthConfig& cfg, const CodeBook& book,
                               const std::map<std::string, double>& intercepts, int index) {
    Rng rng{derive_seed(cfg.seed, static_cast<std::uint64_t>(index))};
    PatientRecord rec;
    char id[32];
    std::snprintf(id, sizeof id, "P%06d", index);
    rec.id = id;
    rec.age_at_index = std::clamp(static_cast<int>(std::lround(rng.normal(79.0, 11.0))), 18, 107);
    rec.sex = rng.bernoulli(0.454) ? Sex::F : Sex::M;
    if (!rng.bernoulli(0.35)) {
        rec.bmi = std::clamp(rng.normal(27.0, 5.5), 14.0, 60.0);
    }

    // Visit and event counts are log-normal around the calibration medians;
    // sigmas follow the reported IQRs (2 (1,3) visits, 153 (71,324) tokens).
    const int n_visits = std::clamp(
        static_cast<int>(std::lround(rng.lognormal(cfg.target_median_visits, 0.8))), 1, kMaxVisits);
    const double median_events =
        std::max(1.0, static_cast<double>(cfg.target_median_tokens - 4 * cfg.target_median_visits));
    const int n_events = std::clamp(static_cast<int>(std::lround(rng.lognormal(median_events, 1.1))),
                                    n_visits, kMaxEvents);
    const auto per_visit = split_counts(n_events, n_visits, rng);

    // Timeline is laid out backwards from the index discharge.
    std::vector<std::pair<double, double>> spans(static_cast<std::size_t>(n_visits));
    double discharge = kFirstIndexDay + rng.uniform() * (kLastIndexDay - kFirstIndexDay);
    for (int v = n_visits - 1; v >= 0; --v) {
        const double los = std::clamp(rng.lognormal(4.0, 0.8), 0.1, 60.0);
        spans[static_cast<std::size_t>(v)] = {discharge - los, discharge};
        discharge = discharge - los - rng.lognormal(120.0, 1.5);
    }

    for (int v = 0; v < n_visits; ++v) {
        const auto [admit, dis] = spans[static_cast<std::size_t>(v)];
        Encounter enc{admit, dis, {}};
        const int count = per_visit[static_cast<std::size_t>(v)];
        enc.events.reserve(static_cast<std::size_t>(count) + 4);
        for (int k = 0; k < count; ++k) {
            const ConceptGroup g = k == 0 ? ConceptGroup::DX : draw_group(rng);
            enc.events.push_back(book.draw(g, admit + rng.uniform() * (dis - admit), rng));
        }
        rec.encounters.push_back(std::move(enc));
    }

    // Planted codes close the index encounter, in random order.
    std::vector<std::string> planted;
    const auto& sig = cfg.signal;
    for (const auto& rc : sig.risk_codes) {
        if (rng.bernoulli(sig.carrier_rate)) planted.push_back(rc.code);
    }
    const auto close = [](Encounter& enc, const std::vector<std::string>& codes) {
        sort_events(enc.events);
        const double from = enc.events.empty() ? enc.admit : enc.events.back().timestamp;
        for (std::size_t k = 0; k < codes.size(); ++k) {
            ClinicalEvent e;
            e.group = ConceptGroup::DX;
            e.code = codes[k];
            e.timestamp = from + (enc.discharge - from) * static_cast<double>(k + 1) / static_cast<double>(codes.size());
            enc.events.push_back(std::move(e));
        }
    };
    rng.shuffle(planted.begin(), planted.end());
    if (!sig.order_pair.first.empty()) {
        // The order pair comes last, adjacent, in random order.
        std::vector<std::string> pair;
        if (rng.bernoulli(sig.pair_rate)) pair.push_back(sig.order_pair.first);
        if (rng.bernoulli(sig.pair_rate)) pair.push_back(sig.order_pair.second);
        rng.shuffle(pair.begin(), pair.end());
        planted.insert(planted.end(), pair.begin(), pair.end());
    }
    close(rec.encounters.back(), planted);
    for (auto& enc : rec.encounters) sort_events(enc.events);

    const double score = risk_score(rec, sig);
    for (const auto& [task, b0] : intercepts) {
        const double noise = sig.noise_sigma * rng.normal();
        rec.labels[task] = rng.uniform() < sigmoid(b0 + score + noise) ? 1 : 0;
    }
    return rec;
}

/// E[sigmoid(m + sigma Z)], Z standard normal, by composite Simpson on [-10, 10].
double expected_sigmoid(double m, double sigma) {
    if (sigma == 0.0) return sigmoid(m);
    constexpr int n = 2000;
    constexpr double lo = -10.0, hi = 10.0, h = (hi - lo) / n;
    double acc = 0.0;
    for (int k = 0; k <= n; ++k) {
        const double z = lo + k * h;
        const double w = (k == 0 || k == n) ? 1.0 : (k % 2 ? 4.0 : 2.0);
        acc += w * sigmoid(m + sigma * z) * std::exp(-0.5 * z * z);
    }
    return acc * h / 3.0 / std::sqrt(2.0 * std::numbers::pi);
}

/// Draws the planted-code configuration and returns its risk score.
double draw_score(const SignalSpec& sig, Rng& rng) {
    double s = 0.0;
    for (const auto& rc : sig.risk_codes) {
        if (rng.bernoulli(sig.carrier_rate)) s += rc.weight;
    }
    if (!sig.order_pair.first.empty()) {
        const bool a = rng.bernoulli(sig.pair_rate);
        const bool b = rng.bernoulli(sig.pair_rate);
        if (a && b && rng.bernoulli(0.5)) s += sig.order_pair.bonus;
    }
    return s;
}

}  // namespace

std::string_view to_string(ConceptGroup g) {
    switch (g) {
        case ConceptGroup::DX: return "DX";
        case ConceptGroup::VIT: return "VIT";
        case ConceptGroup::LAB: return "LAB";
        case ConceptGroup::MED: return "MED";
        case ConceptGroup::PRO: return "PRO";
    }
    return "?";
}

ConceptGroup parse_group(std::string_view s) {
    for (auto g : kAllGroups) {
        if (to_string(g) == s) return g;
    }
    throw std::invalid_argument("unknown concept group: " + std::string{s});
}

SignalSpec default_signal() {
    SignalSpec s;
    s.risk_codes = {{"X010", 1.0}, {"X020", 1.0}};
    s.order_pair = {"X500", "X510", 4.0};
    s.noise_sigma = 0.3;
    s.carrier_rate = 0.3;
    s.pair_rate = 1.0;
    return s;
}

void validate(const SynthConfig& cfg) {
    if (cfg.n_patients < 1) throw std::invalid_argument("n_patients must be >= 1");
    if (cfg.target_median_visits < 1 || cfg.target_median_tokens < 1) {
        throw std::invalid_argument("calibration medians must be positive");
    }
    for (const auto& [task, p] : cfg.prevalence_targets) {
        if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("prevalence of " + task + " not in (0,1)");
    }
    const auto& s = cfg.signal;
    if (s.risk_codes.size() > 20) throw std::invalid_argument("at most 20 risk codes");
    std::set<std::string> seen;
    for (const auto& rc : s.risk_codes) {
        if (!std::isfinite(rc.weight)) throw std::invalid_argument("non-finite risk weight");
        if (!seen.insert(rc.code).second) throw std::invalid_argument("duplicate risk code " + rc.code);
    }
    if (!s.order_pair.first.empty()) {
        if (s.order_pair.first == s.order_pair.second || seen.count(s.order_pair.first) ||
            seen.count(s.order_pair.second)) {
            throw std::invalid_argument("order pair codes must be distinct from each other and risk codes");
        }
    }
    for (double r : {s.carrier_rate, s.pair_rate}) {
        if (!(r >= 0.0 && r <= 1.0)) throw std::invalid_argument("plant rate not in [0,1]");
    }
    if (!(s.noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be >= 0");
    const auto& c = cfg.codes;
    if (c.dx_categories < 1 || c.dx_subcodes < 1 || c.dx_subcodes > 10 || c.vitals < 1 ||
        c.labs < 1 || c.meds < 1 || c.procedures < 1) {
        throw std::invalid_argument("code space sizes must be positive");
    }
}

double risk_score(const PatientRecord& rec, const SignalSpec& signal) {
    std::map<std::string, double> first_seen;
    for (const auto& enc : rec.encounters) {
        for (const auto& e : enc.events) {
            if (e.group == ConceptGroup::DX) first_seen.emplace(e.code, e.timestamp);
        }
    }
    double s = 0.0;
    for (const auto& rc : signal.risk_codes) {
        if (first_seen.count(rc.code)) s += rc.weight;
    }
    const auto& op = signal.order_pair;
    if (!op.first.empty()) {
        const auto a = first_seen.find(op.first);
        const auto b = first_seen.find(op.second);
        if (a != first_seen.end() && b != first_seen.end() && a->second < b->second) s += op.bonus;
    }
    return s;
}

double calibrate_intercept(const SignalSpec& signal, double prevalence) {
    // Exact score distribution: independent plants, fair order when both present.
    std::vector<std::pair<double, double>> dist{{0.0, 1.0}};  // (score, prob)
    for (const auto& rc : signal.risk_codes) {
        std::vector<std::pair<double, double>> next;
        for (const auto& [s, p] : dist) {
            next.emplace_back(s + rc.weight, p * signal.carrier_rate);
            next.emplace_back(s, p * (1.0 - signal.carrier_rate));
        }
        dist = std::move(next);
    }
    if (!signal.order_pair.first.empty()) {
        const double both_ordered = 0.5 * signal.pair_rate * signal.pair_rate;
        std::vector<std::pair<double, double>> next;
        for (const auto& [s, p] : dist) {
            next.emplace_back(s + signal.order_pair.bonus, p * both_ordered);
            next.emplace_back(s, p * (1.0 - both_ordered));
        }
        dist = std::move(next);
    }
    auto prev_at = [&](double b0) {
        double acc = 0.0;
        for (const auto& [s, p] : dist) acc += p * expected_sigmoid(b0 + s, signal.noise_sigma);
        return acc;
    };
    double lo = -60.0, hi = 60.0;
    for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
        const double mid = 0.5 * (lo + hi);
        (prev_at(mid) < prevalence ? lo : hi) = mid;
    }
    return 0.5 * (lo + hi);
}

std::vector<PatientRecord> generate_cohort(const SynthConfig& cfg) {
    validate(cfg);
    const CodeBook book{cfg.codes};
    std::map<std::string, double> intercepts;
    for (const auto& [task, p] : cfg.prevalence_targets) {
        intercepts[task] = calibrate_intercept(cfg.signal, p);
    }
    std::vector<PatientRecord> out;
    out.reserve(static_cast<std::size_t>(cfg.n_patients));
    for (int i = 0; i < cfg.n_patients; ++i) {
        out.push_back(generate_patient(cfg, book, intercepts, i));
    }
    return out;
}

double bayes_rate(const SynthConfig& cfg, std::int64_t n_mc, const std::string& task) {
    if (n_mc < 10000) throw std::invalid_argument("bayes_rate needs n_mc >= 1e4");
    validate(cfg);
    const auto it = cfg.prevalence_targets.find(task);
    if (it == cfg.prevalence_targets.end()) throw std::invalid_argument("no prevalence for " + task);
    const double b0 = calibrate_intercept(cfg.signal, it->second);
    Rng rng{derive_seed(cfg.seed, 0xba7e5ULL)};
    std::vector<double> scores(static_cast<std::size_t>(n_mc));
    std::vector<int> labels(scores.size());
    for (std::size_t k = 0; k < scores.size(); ++k) {
        scores[k] = draw_score(cfg.signal, rng);
        const double z = cfg.signal.noise_sigma * rng.normal();
        labels[k] = rng.uniform() < sigmoid(b0 + scores[k] + z) ? 1 : 0;
    }
    return auroc(labels, scores);
}

json to_json(const PatientRecord& rec) {
    json encs = json::array();
    for (const auto& enc : rec.encounters) {
        json events = json::array();
        for (const auto& e : enc.events) {
            json je{{"group", to_string(e.group)}, {"code", e.code}, {"timestamp", e.timestamp}};
            if (e.value) je["value"] = *e.value;
            events.push_back(std::move(je));
        }
        encs.push_back({{"admit", enc.admit}, {"discharge", enc.discharge}, {"events", std::move(events)}});
    }
    return {{"id", rec.id},
            {"age_at_index", rec.age_at_index},
            {"sex", rec.sex == Sex::F ? "F" : "M"},
            {"bmi", rec.bmi ? json(*rec.bmi) : json(nullptr)},
            {"encounters", std::move(encs)},
            {"labels", rec.labels}};
}

PatientRecord patient_from_json(const json& j) {
    PatientRecord rec;
    rec.id = j.at("id").get<std::string>();
    rec.age_at_index = j.at("age_at_index").get<int>();
    const auto sex = j.at("sex").get<std::string>();
    if (sex != "F" && sex != "M") throw std::invalid_argument("sex must be F or M");
    rec.sex = sex == "F" ? Sex::F : Sex::M;
    if (!j.at("bmi").is_null()) rec.bmi = j.at("bmi").get<double>();
    for (const auto& je : j.at("encounters")) {
        Encounter enc{je.at("admit").get<double>(), je.at("discharge").get<double>(), {}};
        for (const auto& ev : je.at("events")) {
            ClinicalEvent e;
            e.group = parse_group(ev.at("group").get<std::string>());
            e.code = ev.at("code").get<std::string>();
            e.timestamp = ev.at("timestamp").get<double>();
            if (ev.contains("value")) e.value = ev.at("value").get<double>();
            enc.events.push_back(std::move(e));
        }
        rec.encounters.push_back(std::move(enc));
    }
    rec.labels = j.at("labels").get<std::map<std::string, int>>();
    return rec;
}

void write_jsonl(std::ostream& os, const std::vector<PatientRecord>& cohort) {
    for (const auto& rec : cohort) os << to_json(rec).dump() << '\n';
}

std::vector<PatientRecord> read_jsonl(std::istream& is) {
    std::vector<PatientRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        out.push_back(patient_from_json(json::parse(line)));
    }
    return out;
}

std::string cohort_hash(const std::vector<PatientRecord>& cohort) {
    std::ostringstream os;
    write_jsonl(os, cohort);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(os.str())));
    return buf;
}

json to_json(const SynthConfig& cfg) {
    json risk = json::array();
    for (const auto& rc : cfg.signal.risk_codes) risk.push_back({{"code", rc.code}, {"weight", rc.weight}});
    const auto& s = cfg.signal;
    const auto& c = cfg.codes;
    return {{"n_patients", cfg.n_patients},
            {"seed", cfg.seed},
            {"target_median_tokens", cfg.target_median_tokens},
            {"target_median_visits", cfg.target_median_visits},
            {"prevalence_targets", cfg.prevalence_targets},
            {"signal",
             {{"risk_codes", risk},
              {"order_pair", {{"first", s.order_pair.first}, {"second", s.order_pair.second}, {"bonus", s.order_pair.bonus}}},
              {"noise_sigma", s.noise_sigma},
              {"carrier_rate", s.carrier_rate},
              {"pair_rate", s.pair_rate}}},
            {"codes",
             {{"dx_categories", c.dx_categories},
              {"dx_subcodes", c.dx_subcodes},
              {"vitals", c.vitals},
              {"labs", c.labs},
              {"meds", c.meds},
              {"procedures", c.procedures},
              {"zipf_exponent", c.zipf_exponent}}}};
}

SynthConfig synth_config_from_json(const json& j) {
    SynthConfig cfg;
    cfg.n_patients = j.value("n_patients", cfg.n_patients);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.target_median_tokens = j.value("target_median_tokens", cfg.target_median_tokens);
    cfg.target_median_visits = j.value("target_median_visits", cfg.target_median_visits);
    if (j.contains("prevalence_targets")) {
        cfg.prevalence_targets = j.at("prevalence_targets").get<std::map<std::string, double>>();
    }
    cfg.signal = default_signal();
    if (j.contains("signal")) {
        const auto& js = j.at("signal");
        auto& s = cfg.signal;
        if (js.contains("risk_codes")) {
            s.risk_codes.clear();
            for (const auto& rc : js.at("risk_codes")) {
                s.risk_codes.push_back({rc.at("code").get<std::string>(), rc.at("weight").get<double>()});
            }
        }
        if (js.contains("order_pair")) {
            const auto& op = js.at("order_pair");
            s.order_pair = {op.value("first", std::string{}), op.value("second", std::string{}),
                            op.value("bonus", 0.0)};
        }
        s.noise_sigma = js.value("noise_sigma", s.noise_sigma);
        s.carrier_rate = js.value("carrier_rate", s.carrier_rate);
        s.pair_rate = js.value("pair_rate", s.pair_rate);
    }
    if (j.contains("codes")) {
        const auto& jc = j.at("codes");
        auto& c = cfg.codes;
        c.dx_categories = jc.value("dx_categories", c.dx_categories);
        c.dx_subcodes = jc.value("dx_subcodes", c.dx_subcodes);
        c.vitals = jc.value("vitals", c.vitals);
        c.labs = jc.value("labs", c.labs);
        c.meds = jc.value("meds", c.meds);
        c.procedures = jc.value("procedures", c.procedures);
        c.zipf_exponent = jc.value("zipf_exponent", c.zipf_exponent);
    }
    validate(cfg);
    return cfg;
}

}  // namespace ehrseq
