#include "ehrseq/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <thread>
#include <unordered_map>

#include "ehrseq/random.hpp"
#include "ehrseq/svg.hpp"

namespace ehrseq {

using nlohmann::json;

namespace {

constexpr std::pair<Axis, std::string_view> kAxisNames[] = {
    {Axis::None, "none"},         {Axis::Vocab, "vocab"},       {Axis::Context, "context"},
    {Axis::Size, "size"},         {Axis::History, "history"},   {Axis::Concepts, "concepts"},
    {Axis::TrainRatio, "train_ratio"}};

constexpr std::string_view kConceptSets[] = {"DX", "DX+VIT", "DX+VIT+LAB", "DX+VIT+LAB+MED", "ALL"};

std::string fmt_ratio(double r) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", r);
    return buf;
}

bool valid_history(const std::string& h) {
    try {
        HistoryMode::parse(h);
        return true;
    } catch (const std::invalid_argument&) {
        return false;
    }
}

bool is_gbdt(const std::string& model) { return model == "GBDT"; }

void check_model(const std::string& m) {
    if (!is_gbdt(m)) parse_preset(m);
}

json split_to_json(const SplitSpec& s) {
    return {{"dev_frac", s.dev_frac},
            {"train_frac_of_dev", s.train_frac_of_dev},
            {"stratify_by", s.stratify_by},
            {"train_ratio", s.train_ratio},
            {"seed", s.seed}};
}

SplitSpec split_from_json(const json& j) {
    SplitSpec s;
    s.dev_frac = j.value("dev_frac", s.dev_frac);
    s.train_frac_of_dev = j.value("train_frac_of_dev", s.train_frac_of_dev);
    s.stratify_by = j.value("stratify_by", s.stratify_by);
    s.train_ratio = j.value("train_ratio", s.train_ratio);
    s.seed = j.value("seed", s.seed);
    return s;
}

json gbdt_to_json(const GbdtConfig& c) {
    return {{"n_trees", c.n_trees},     {"max_depth", c.max_depth}, {"learning_rate", c.learning_rate},
            {"lambda_l2", c.lambda_l2}, {"gamma", c.gamma},         {"min_child_weight", c.min_child_weight}};
}

GbdtConfig gbdt_from_json(const json& j) {
    GbdtConfig c;
    c.n_trees = j.value("n_trees", c.n_trees);
    c.max_depth = j.value("max_depth", c.max_depth);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.lambda_l2 = j.value("lambda_l2", c.lambda_l2);
    c.gamma = j.value("gamma", c.gamma);
    c.min_child_weight = j.value("min_child_weight", c.min_child_weight);
    return c;
}

VocabPoint vocab_from_json(const json& j) {
    if (!j.is_array() || j.size() != 2) throw std::invalid_argument("vocab point must be [bins, icd_level]");
    return {j[0].get<int>(), j[1].get<int>()};
}

json defaults_to_json(const AxisDefaults& d) {
    return {{"vocab", {d.vocab.bins, d.vocab.icd_level}},
            {"context", d.context},
            {"size", std::string(to_string(d.size))},
            {"history", d.history},
            {"concepts", d.concepts},
            {"train_ratio", d.train_ratio}};
}

AxisDefaults defaults_from_json(const json& j) {
    AxisDefaults d;
    if (j.contains("vocab")) d.vocab = vocab_from_json(j.at("vocab"));
    d.context = j.value("context", d.context);
    if (j.contains("size")) d.size = parse_size(j.at("size").get<std::string>());
    d.history = j.value("history", d.history);
    d.concepts = j.value("concepts", d.concepts);
    d.train_ratio = j.value("train_ratio", d.train_ratio);
    return d;
}

json grid_to_json(const ExperimentGrid& g) {
    json vocab = json::array();
    for (const auto& v : g.vocab) vocab.push_back({v.bins, v.icd_level});
    json sizes = json::array();
    for (auto s : g.size) sizes.push_back(std::string(to_string(s)));
    return {{"name", g.name},       {"axis", std::string(to_string(g.axis))},
            {"tasks", g.tasks},     {"models", g.models},
            {"vocab", vocab},       {"context", g.context},
            {"size", sizes},        {"history", g.history},
            {"concepts", g.concepts}, {"train_ratio", g.train_ratio},
            {"seeds", g.seeds}};
}

ExperimentGrid grid_from_json(const json& j) {
    ExperimentGrid g;
    g.name = j.value("name", std::string{});
    g.axis = parse_axis(j.value("axis", std::string{"none"}));
    if (j.contains("tasks")) g.tasks = j.at("tasks").get<std::vector<std::string>>();
    if (j.contains("models")) g.models = j.at("models").get<std::vector<std::string>>();
    if (j.contains("vocab")) {
        for (const auto& v : j.at("vocab")) g.vocab.push_back(vocab_from_json(v));
    }
    if (j.contains("context")) g.context = j.at("context").get<std::vector<int>>();
    if (j.contains("size")) {
        for (const auto& s : j.at("size")) g.size.push_back(parse_size(s.get<std::string>()));
    }
    if (j.contains("history")) g.history = j.at("history").get<std::vector<std::string>>();
    if (j.contains("concepts")) g.concepts = j.at("concepts").get<std::vector<std::string>>();
    if (j.contains("train_ratio")) g.train_ratio = j.at("train_ratio").get<std::vector<double>>();
    if (j.contains("seeds")) g.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    return g;
}

std::size_t axis_count(const ExperimentGrid& g) {
    switch (g.axis) {
        case Axis::None: return 1;
        case Axis::Vocab: return g.vocab.size();
        case Axis::Context: return g.context.size();
        case Axis::Size: return g.size.size();
        case Axis::History: return g.history.size();
        case Axis::Concepts: return g.concepts.size();
        case Axis::TrainRatio: return g.train_ratio.size();
    }
    return 0;
}

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    out.push_back(cur);
    return out;
}

}  // namespace

std::vector<ConceptGroup> parse_concepts(const std::string& name) {
    using G = ConceptGroup;
    if (name == "ALL") return {std::begin(kAllGroups), std::end(kAllGroups)};
    if (name == "DX") return {G::DX};
    if (name == "DX+VIT") return {G::DX, G::VIT};
    if (name == "DX+VIT+LAB") return {G::DX, G::VIT, G::LAB};
    if (name == "DX+VIT+LAB+MED") return {G::DX, G::VIT, G::LAB, G::MED};
    throw std::invalid_argument("unknown concept set: " + name);
}

bool valid_concepts(const std::string& name) {
    return std::find(std::begin(kConceptSets), std::end(kConceptSets), name) != std::end(kConceptSets);
}

std::string_view to_string(Axis a) {
    for (const auto& [v, n] : kAxisNames) {
        if (v == a) return n;
    }
    throw std::invalid_argument("unknown axis");
}

Axis parse_axis(std::string_view s) {
    for (const auto& [v, n] : kAxisNames) {
        if (n == s) return v;
    }
    throw std::invalid_argument("unknown axis: " + std::string(s));
}

HarnessConfig harness_config_from_json(const json& j) {
    HarnessConfig c;
    if (j.contains("cohort")) c.cohort = synth_config_from_json(j.at("cohort"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("split")) c.split = split_from_json(j.at("split"));
    if (j.contains("gbdt")) c.gbdt = gbdt_from_json(j.at("gbdt"));
    if (j.contains("defaults")) c.defaults = defaults_from_json(j.at("defaults"));
    if (j.contains("ablations")) {
        for (const auto& g : j.at("ablations")) c.ablations.push_back(grid_from_json(g));
    }
    c.bootstrap_iters = j.value("bootstrap_iters", c.bootstrap_iters);
    validate(c.cohort);
    validate(c.train);
    for (const auto& g : c.ablations) validate(g);
    if (c.bootstrap_iters < 1) throw std::invalid_argument("bootstrap_iters must be >= 1");
    return c;
}

json to_json(const HarnessConfig& c) {
    json grids = json::array();
    for (const auto& g : c.ablations) grids.push_back(grid_to_json(g));
    return {{"cohort", to_json(c.cohort)},     {"train", to_json(c.train)},
            {"split", split_to_json(c.split)}, {"gbdt", gbdt_to_json(c.gbdt)},
            {"defaults", defaults_to_json(c.defaults)}, {"ablations", grids},
            {"bootstrap_iters", c.bootstrap_iters}};
}

HarnessConfig load_harness_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    return harness_config_from_json(json::parse(in));
}

std::string RunSpec::axis_value() const {
    switch (axis) {
        case Axis::None: return "-";
        case Axis::Vocab: return "b" + std::to_string(vocab.bins) + "i" + std::to_string(vocab.icd_level);
        case Axis::Context: return std::to_string(context);
        case Axis::Size: return std::string(to_string(size));
        case Axis::History: return history;
        case Axis::Concepts: return concepts;
        case Axis::TrainRatio: return fmt_ratio(train_ratio);
    }
    return "-";
}

json to_json(const RunSpec& s) {
    return {{"ablation", s.ablation},
            {"axis", std::string(to_string(s.axis))},
            {"task", s.task},
            {"model", s.model},
            {"vocab", {s.vocab.bins, s.vocab.icd_level}},
            {"context", s.context},
            {"size", std::string(to_string(s.size))},
            {"history", s.history},
            {"concepts", s.concepts},
            {"train_ratio", s.train_ratio},
            {"seed", s.seed}};
}

namespace {

RunSpec run_spec_from_json(const json& j) {
    RunSpec s;
    s.ablation = j.at("ablation").get<std::string>();
    s.axis = parse_axis(j.at("axis").get<std::string>());
    s.task = j.at("task").get<std::string>();
    s.model = j.at("model").get<std::string>();
    s.vocab = vocab_from_json(j.at("vocab"));
    s.context = j.at("context").get<int>();
    s.size = parse_size(j.at("size").get<std::string>());
    s.history = j.at("history").get<std::string>();
    s.concepts = j.at("concepts").get<std::string>();
    s.train_ratio = j.at("train_ratio").get<double>();
    s.seed = j.at("seed").get<std::uint64_t>();
    return s;
}

}  // namespace

void validate(const ExperimentGrid& g) {
    auto fail = [&](const std::string& what) { throw std::invalid_argument("ablation '" + g.name + "': " + what); };
    if (g.name.empty()) fail("missing name");
    if (g.tasks.empty() || g.models.empty() || g.seeds.empty()) fail("empty grid");
    for (const auto& t : g.tasks) {
        if (std::find(kTasks.begin(), kTasks.end(), t) == kTasks.end()) fail("unknown task " + t);
    }
    for (const auto& m : g.models) check_model(m);
    for (const auto& v : g.vocab) {
        if ((v.bins != 5 && v.bins != 10) || (v.icd_level != 3 && v.icd_level != 4)) fail("vocab point out of range");
    }
    for (int c : g.context) {
        if (c != 128 && c != 256 && c != 512 && c != 1024) fail("context length out of range");
    }
    for (const auto& h : g.history) {
        if (!valid_history(h)) fail("unknown history mode " + h);
    }
    for (const auto& c : g.concepts) {
        if (!valid_concepts(c)) fail("unknown concept set " + c);
    }
    for (double r : g.train_ratio) {
        if (!(r > 0.0 && r <= 1.0)) fail("train ratio out of (0,1]");
    }
    if (axis_count(g) == 0) fail("varied axis has no values");
}

std::vector<RunSpec> expand(const ExperimentGrid& g, const AxisDefaults& d) {
    validate(g);
    std::vector<RunSpec> out;
    const std::size_t n_values = axis_count(g);
    for (const auto& task : g.tasks) {
        for (const auto& model : g.models) {
            for (std::size_t k = 0; k < n_values; ++k) {
                for (auto seed : g.seeds) {
                    RunSpec s;
                    s.ablation = g.name;
                    s.axis = g.axis;
                    s.task = task;
                    s.model = model;
                    s.vocab = g.axis == Axis::Vocab ? g.vocab[k] : d.vocab;
                    s.context = g.axis == Axis::Context ? g.context[k] : d.context;
                    s.size = g.axis == Axis::Size ? g.size[k] : d.size;
                    s.history = g.axis == Axis::History ? g.history[k] : d.history;
                    s.concepts = g.axis == Axis::Concepts ? g.concepts[k] : d.concepts;
                    s.train_ratio = g.axis == Axis::TrainRatio ? g.train_ratio[k] : d.train_ratio;
                    s.seed = seed;
                    out.push_back(std::move(s));
                }
            }
        }
    }
    return out;
}

std::vector<RunSpec> expand(const HarnessConfig& cfg) {
    if (cfg.ablations.empty()) throw std::invalid_argument("no ablations configured");
    std::set<std::string> names;
    for (const auto& g : cfg.ablations) {
        if (!names.insert(g.name).second) throw std::invalid_argument("duplicate ablation name " + g.name);
    }
    std::vector<RunSpec> out;
    for (const auto& g : cfg.ablations) {
        auto part = expand(g, cfg.defaults);
        out.insert(out.end(), part.begin(), part.end());
    }
    return out;
}

json to_json(const ResultRow& r) {
    return {{"spec", to_json(r.spec)},       {"report", to_json(r.report)},
            {"n_train", r.n_train},          {"n_test", r.n_test},
            {"vocab_size", r.vocab_size},    {"parameters", r.parameters},
            {"hash", r.hash}};
}

ResultRow result_row_from_json(const json& j) {
    ResultRow r;
    r.spec = run_spec_from_json(j.at("spec"));
    r.report = eval_report_from_json(j.at("report"));
    r.n_train = j.at("n_train").get<std::int64_t>();
    r.n_test = j.at("n_test").get<std::int64_t>();
    r.vocab_size = j.at("vocab_size").get<int>();
    r.parameters = j.at("parameters").get<std::int64_t>();
    r.hash = j.at("hash").get<std::string>();
    return r;
}

std::string hex64(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string run_hash(const RunSpec& spec, const HarnessConfig& cfg, const std::string& cohort_hash) {
    const json identity = {{"spec", to_json(spec)},
                           {"train", to_json(cfg.train)},
                           {"split", split_to_json(cfg.split)},
                           {"gbdt", gbdt_to_json(cfg.gbdt)},
                           {"bootstrap_iters", cfg.bootstrap_iters},
                           {"cohort", cohort_hash},
                           {"version", kCodeVersion}};
    return hex64(fnv1a(identity.dump()));
}

ResultRow run(const RunSpec& spec, const RunContext& ctx) {
    if (!ctx.config || !ctx.cohort) throw std::invalid_argument("run context is missing the config or cohort");
    const auto& cfg = *ctx.config;
    const auto& cohort = *ctx.cohort;

    SplitSpec sp = cfg.split;
    sp.stratify_by = spec.task;
    sp.train_ratio = spec.train_ratio;
    const Split split = stratified_split(cohort, sp);
    assert_disjoint(split);

    std::unordered_map<std::string, const PatientRecord*> by_id;
    for (const auto& r : cohort) by_id.emplace(r.id, &r);
    auto records = [&](const std::vector<std::string>& ids) {
        std::vector<PatientRecord> out;
        out.reserve(ids.size());
        for (const auto& id : ids) out.push_back(*by_id.at(id));
        return out;
    };
    const auto train_recs = records(split.train);
    const Vocabulary vocab = Vocabulary::build(train_recs, spec.vocab.bins, spec.vocab.icd_level);

    TokenizeOptions opts;
    opts.context_length = spec.context;
    opts.history = HistoryMode::parse(spec.history);
    opts.groups = parse_concepts(spec.concepts);
    opts.task = spec.task;
    auto tokenize_all = [&](const std::vector<std::string>& ids) {
        std::vector<TokenizedSequence> out;
        out.reserve(ids.size());
        for (const auto& id : ids) out.push_back(tokenize(*by_id.at(id), vocab, opts));
        return out;
    };
    const auto train = tokenize_all(split.train);
    const auto val = tokenize_all(split.val);
    const auto test = tokenize_all(split.test);

    ResultRow row;
    row.spec = spec;
    row.n_train = static_cast<std::int64_t>(train.size());
    row.n_test = static_cast<std::int64_t>(test.size());
    row.vocab_size = vocab.size();

    std::vector<double> probs;
    if (is_gbdt(spec.model)) {
        std::vector<FrequencyVector> data;
        data.reserve(train.size());
        for (const auto& s : train) data.push_back(featurize(s, vocab));
        const auto model = GbdtModel::fit(data, cfg.gbdt);
        for (const auto& s : test) probs.push_back(model.predict_proba(featurize(s, vocab)));
        std::int64_t nodes = 0;
        for (const auto& t : model.trees()) nodes += static_cast<std::int64_t>(t.nodes.size());
        row.parameters = nodes;
    } else {
        const auto mcfg = preset(parse_preset(spec.model), spec.size, vocab.size(), spec.context);
        SequenceModel model(mcfg, derive_seed(spec.seed, 1));
        TrainConfig tc = cfg.train;
        tc.seed = derive_seed(spec.seed, 2);
        pretrain(model, train, val, tc);
        ClassifierHead head(mcfg.d_m, derive_seed(spec.seed, 3));
        finetune(model, head, train, val, tc);
        probs = classify(model, head, test);
        row.parameters = model.count_parameters();
    }
    std::vector<int> labels;
    labels.reserve(test.size());
    for (const auto& s : test) labels.push_back(s.label);
    row.report = evaluate(labels, probs, cfg.bootstrap_iters, derive_seed(spec.seed, 4));
    return row;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    auto tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
        out << bytes;
        if (!out) throw std::runtime_error("write failed: " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

std::string results_csv_header() {
    return "ablation,axis,value,task,model,bins,icd_level,context,size,history,concepts,train_ratio,seed,"
           "n_train,n_test,vocab_size,parameters,hash," +
           eval_csv_header();
}

std::string emit_table(const std::vector<ResultRow>& rows) {
    std::string out = results_csv_header() + "\n";
    for (const auto& r : rows) {
        const auto& s = r.spec;
        out += s.ablation + "," + std::string(to_string(s.axis)) + "," + s.axis_value() + "," + s.task + "," +
               s.model + "," + std::to_string(s.vocab.bins) + "," + std::to_string(s.vocab.icd_level) + "," +
               std::to_string(s.context) + "," + std::string(to_string(s.size)) + "," + s.history + "," +
               s.concepts + "," + fmt_ratio(s.train_ratio) + "," + std::to_string(s.seed) + "," +
               std::to_string(r.n_train) + "," + std::to_string(r.n_test) + "," + std::to_string(r.vocab_size) +
               "," + std::to_string(r.parameters) + "," + r.hash + "," + to_csv_row(r.report) + "\n";
    }
    return out;
}

std::vector<ResultRow> read_results_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw std::invalid_argument("empty results file");
    if (line != results_csv_header()) throw std::invalid_argument("unexpected results header");
    std::vector<ResultRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto f = split_csv_line(line);
        if (f.size() != 28) throw std::invalid_argument("malformed results row: " + line);
        ResultRow r;
        auto& s = r.spec;
        s.ablation = f[0];
        s.axis = parse_axis(f[1]);
        s.task = f[3];
        s.model = f[4];
        s.vocab = {std::stoi(f[5]), std::stoi(f[6])};
        s.context = std::stoi(f[7]);
        s.size = parse_size(f[8]);
        s.history = f[9];
        s.concepts = f[10];
        s.train_ratio = std::stod(f[11]);
        s.seed = std::stoull(f[12]);
        r.n_train = std::stoll(f[13]);
        r.n_test = std::stoll(f[14]);
        r.vocab_size = std::stoi(f[15]);
        r.parameters = std::stoll(f[16]);
        r.hash = f[17];
        r.report.n = std::stoll(f[18]);
        r.report.auprc = {std::stod(f[19]), std::stod(f[20]), std::stod(f[21])};
        r.report.auroc = {std::stod(f[22]), std::stod(f[23]), std::stod(f[24])};
        r.report.brier = {std::stod(f[25]), std::stod(f[26]), std::stod(f[27])};
        rows.push_back(std::move(r));
    }
    return rows;
}

std::string emit_figure(const std::vector<ResultRow>& rows, const std::string& title) {
    if (rows.empty()) throw std::invalid_argument("no rows to plot");
    // First-appearance order for panels, groups and bars.
    std::vector<std::string> tasks, values, models;
    auto note = [](std::vector<std::string>& v, const std::string& s) {
        if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    struct Acc {
        double point{0}, lo{0}, hi{0};
        int n{0};
    };
    std::map<std::tuple<std::string, std::string, std::string>, Acc> cells;
    for (const auto& r : rows) {
        note(tasks, r.spec.task);
        note(values, r.spec.axis_value());
        note(models, r.spec.model);
        auto& a = cells[{r.spec.task, r.spec.axis_value(), r.spec.model}];
        a.point += r.report.auprc.point;
        a.lo += r.report.auprc.ci_lo;
        a.hi += r.report.auprc.ci_hi;
        ++a.n;
    }

    constexpr double bar = 14.0, group_gap = 18.0, panel_h = 220.0, top = 50.0, left = 50.0;
    constexpr double panel_gap = 40.0, legend_h = 30.0;
    const double group_w = bar * static_cast<double>(models.size()) + group_gap;
    const double panel_w = group_w * static_cast<double>(values.size()) + group_gap;
    const double width = left + (panel_w + panel_gap) * static_cast<double>(tasks.size()) + 10.0;
    const double height = top + panel_h + 60.0 + legend_h;

    SvgWriter svg(width, height);
    svg.text(width / 2.0, 22.0, title, 14.0, "middle");
    const std::string axis_name = std::string(to_string(rows.front().spec.axis));
    for (std::size_t t = 0; t < tasks.size(); ++t) {
        const double x0 = left + static_cast<double>(t) * (panel_w + panel_gap);
        const double y0 = top, y1 = top + panel_h;
        auto y_of = [&](double v) { return y1 - std::clamp(v, 0.0, 1.0) * panel_h; };
        for (int k = 0; k <= 4; ++k) {
            const double v = k / 4.0;
            svg.line(x0, y_of(v), x0 + panel_w, y_of(v), "#dddddd");
            svg.text(x0 - 4.0, y_of(v) + 4.0, fmt2(v), 9.0, "end");
        }
        svg.line(x0, y0, x0, y1, "#000000");
        svg.line(x0, y1, x0 + panel_w, y1, "#000000");
        svg.text(x0 + panel_w / 2.0, top - 8.0, tasks[t], 12.0, "middle");
        if (t == 0) svg.text(14.0, top + panel_h / 2.0, "AUPRC", 11.0, "middle", -90.0);
        for (std::size_t g = 0; g < values.size(); ++g) {
            const double gx = x0 + group_gap + static_cast<double>(g) * group_w;
            svg.text(gx + bar * static_cast<double>(models.size()) / 2.0, y1 + 14.0, values[g], 9.0, "middle");
            for (std::size_t m = 0; m < models.size(); ++m) {
                const auto it = cells.find({tasks[t], values[g], models[m]});
                if (it == cells.end()) continue;
                const auto& a = it->second;
                const double p = a.point / a.n, lo = a.lo / a.n, hi = a.hi / a.n;
                const double bx = gx + static_cast<double>(m) * bar;
                svg.rect(bx, y_of(p), bar - 2.0, y1 - y_of(p), palette(static_cast<int>(m)));
                const double cx = bx + (bar - 2.0) / 2.0;
                svg.line(cx, y_of(lo), cx, y_of(hi), "#000000");
                svg.line(cx - 3.0, y_of(lo), cx + 3.0, y_of(lo), "#000000");
                svg.line(cx - 3.0, y_of(hi), cx + 3.0, y_of(hi), "#000000");
            }
        }
        svg.text(x0 + panel_w / 2.0, y1 + 32.0, axis_name, 10.0, "middle");
    }
    double lx = left;
    const double ly = top + panel_h + 50.0;
    for (std::size_t m = 0; m < models.size(); ++m) {
        svg.rect(lx, ly, 10.0, 10.0, palette(static_cast<int>(m)));
        svg.text(lx + 14.0, ly + 9.0, models[m], 10.0);
        lx += 24.0 + 7.0 * static_cast<double>(models[m].size());
    }
    return svg.str();
}

AblateSummary ablate(const HarnessConfig& cfg, const AblateOptions& opts) {
    if (opts.out_dir.empty()) throw std::invalid_argument("output directory required");
    if (opts.jobs < 1) throw std::invalid_argument("jobs must be >= 1");
    auto log = [&](const std::string& msg) {
        if (opts.log) opts.log(msg);
    };
    const auto specs = expand(cfg);
    const auto cohort = generate_cohort(cfg.cohort);
    RunContext ctx{&cfg, &cohort, cohort_hash(cohort)};
    const auto runs_dir = opts.out_dir / "runs";
    std::filesystem::create_directories(runs_dir);

    std::vector<std::string> hashes;
    hashes.reserve(specs.size());
    for (const auto& s : specs) hashes.push_back(run_hash(s, cfg, ctx.cohort_hash));

    AblateSummary summary;
    std::vector<std::optional<ResultRow>> rows(specs.size());
    std::vector<std::size_t> pending;
    std::map<std::string, std::size_t> first_of;  // identical specs share one run
    for (std::size_t i = 0; i < specs.size(); ++i) {
        const auto path = runs_dir / (hashes[i] + ".json");
        if (opts.resume && std::filesystem::exists(path)) {
            try {
                auto row = result_row_from_json(json::parse(read_file(path)));
                row.spec = specs[i];
                rows[i] = std::move(row);
                ++summary.skipped;
                continue;
            } catch (const std::exception&) {
                log("discarding unreadable cache entry " + path.string());
            }
        }
        if (first_of.emplace(hashes[i], i).second) pending.push_back(i);
    }

    std::mutex mu;
    std::atomic<std::size_t> next{0};
    std::atomic<int> started{0};
    std::exception_ptr error;
    auto worker = [&] {
        while (true) {
            {
                std::lock_guard lock(mu);
                if (error) return;
            }
            if (opts.max_new_runs >= 0 && started.fetch_add(1) >= opts.max_new_runs) return;
            const std::size_t k = next.fetch_add(1);
            if (k >= pending.size()) return;
            const std::size_t i = pending[k];
            try {
                ResultRow row = run(specs[i], ctx);
                row.hash = hashes[i];
                write_file_atomic(runs_dir / (hashes[i] + ".json"), to_json(row).dump(1) + "\n");
                std::lock_guard lock(mu);
                log("done " + hashes[i] + " " + specs[i].ablation + " " + specs[i].task + " " + specs[i].model + " " +
                    specs[i].axis_value());
                rows[i] = std::move(row);
                ++summary.executed;
            } catch (...) {
                std::lock_guard lock(mu);
                if (!error) error = std::current_exception();
                return;
            }
        }
    };
    const int n_threads = std::max(1, std::min<int>(opts.jobs, static_cast<int>(pending.size())));
    std::vector<std::thread> threads;
    for (int t = 1; t < n_threads; ++t) threads.emplace_back(worker);
    worker();
    for (auto& th : threads) th.join();
    if (error) std::rethrow_exception(error);

    for (std::size_t i = 0; i < specs.size(); ++i) {
        if (rows[i]) continue;
        const auto it = first_of.find(hashes[i]);
        if (it != first_of.end() && rows[it->second]) {
            rows[i] = rows[it->second];
            rows[i]->spec = specs[i];
        }
    }
    for (const auto& r : rows) {
        if (!r) summary.complete = false;
    }
    if (!summary.complete) {
        log("interrupted before all runs finished; rerun with --resume");
        return summary;
    }
    for (auto& r : rows) summary.rows.push_back(std::move(*r));

    json manifest = {{"version", kCodeVersion},
                     {"config_hash", hex64(fnv1a(to_json(cfg).dump()))},
                     {"cohort_hash", ctx.cohort_hash},
                     {"runs", json::array()},
                     {"files", json::object()}};
    for (std::size_t i = 0; i < specs.size(); ++i) {
        manifest["runs"].push_back({{"hash", hashes[i]},
                                    {"ablation", specs[i].ablation},
                                    {"task", specs[i].task},
                                    {"model", specs[i].model},
                                    {"value", specs[i].axis_value()},
                                    {"seed", specs[i].seed}});
    }
    const std::string table = emit_table(summary.rows);
    write_file_atomic(opts.out_dir / "results.csv", table);
    manifest["files"]["results.csv"] = hex64(fnv1a(table));
    for (const auto& g : cfg.ablations) {
        std::vector<ResultRow> part;
        for (const auto& r : summary.rows) {
            if (r.spec.ablation == g.name) part.push_back(r);
        }
        const std::string svg = emit_figure(part, g.name + " (" + std::string(to_string(g.axis)) + ")");
        const std::string rel = "figures/" + g.name + ".svg";
        write_file_atomic(opts.out_dir / rel, svg);
        manifest["files"][rel] = hex64(fnv1a(svg));
    }
    write_file_atomic(opts.out_dir / "manifest.json", manifest.dump(2) + "\n");
    return summary;
}

}  // namespace ehrseq
