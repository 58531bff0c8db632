// ehrseq command-line front end.
//
//   ehrseq synth    --config C --out D          cohort.jsonl
//   ehrseq vocab    --config C --out D          split.json, vocab.json
//   ehrseq tokenize --config C --out D          sequences/{train,val,test}.jsonl
//   ehrseq pretrain --config C --out D --model M
//   ehrseq finetune --config C --out D --model M
//   ehrseq ablate   --config C --out D [--jobs N] [--resume]
//   ehrseq report   --out D

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <unordered_map>

#include "CLI11.hpp"
#include "ehrseq/checkpoint.hpp"
#include "ehrseq/harness.hpp"

using namespace ehrseq;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
    std::string config;
    std::string out{"out"};
    std::uint64_t seed{0};
    bool seed_given{false};
    int jobs{1};
    bool resume{false};
    std::string model{"LLAMA"};
};

HarnessConfig load(const Common& c) {
    HarnessConfig cfg = c.config.empty() ? HarnessConfig{} : load_harness_config(c.config);
    if (c.seed_given) {
        cfg.cohort.seed = c.seed;
        cfg.train.seed = c.seed;
    }
    return cfg;
}

std::vector<PatientRecord> read_cohort(const fs::path& dir) {
    std::ifstream in(dir / "cohort.jsonl");
    if (!in) throw std::runtime_error("missing " + (dir / "cohort.jsonl").string() + "; run 'synth' first");
    return read_jsonl(in);
}

std::vector<TokenizedSequence> read_split(const fs::path& dir, const std::string& name) {
    const auto path = dir / "sequences" / (name + ".jsonl");
    std::ifstream in(path);
    if (!in) throw std::runtime_error("missing " + path.string() + "; run 'tokenize' first");
    return read_sequences(in);
}

Vocabulary read_vocab(const fs::path& dir) {
    return Vocabulary::from_json(json::parse(read_file(dir / "vocab.json")));
}

void say(const std::string& msg) { std::cerr << msg << "\n"; }

int cmd_synth(const Common& c) {
    const auto cfg = load(c);
    const fs::path dir = c.out;
    const auto cohort = generate_cohort(cfg.cohort);
    std::ostringstream os;
    write_jsonl(os, cohort);
    write_file_atomic(dir / "cohort.jsonl", os.str());
    const json meta = {{"config", to_json(cfg.cohort)},
                       {"hash", cohort_hash(cohort)},
                       {"bayes_rate", bayes_rate(cfg.cohort, 100000, cfg.split.stratify_by)}};
    write_file_atomic(dir / "cohort.json", meta.dump(2) + "\n");
    say("wrote " + std::to_string(cohort.size()) + " patients to " + (dir / "cohort.jsonl").string());
    return 0;
}

int cmd_vocab(const Common& c) {
    const auto cfg = load(c);
    const fs::path dir = c.out;
    const auto cohort = read_cohort(dir);
    SplitSpec sp = cfg.split;
    sp.train_ratio = cfg.defaults.train_ratio;
    const Split split = stratified_split(cohort, sp);
    assert_disjoint(split);
    write_file_atomic(dir / "split.json",
                      json{{"train", split.train}, {"val", split.val}, {"test", split.test}}.dump(1) + "\n");
    std::unordered_map<std::string, const PatientRecord*> by_id;
    for (const auto& r : cohort) by_id.emplace(r.id, &r);
    std::vector<PatientRecord> train;
    for (const auto& id : split.train) train.push_back(*by_id.at(id));
    const auto vocab = Vocabulary::build(train, cfg.defaults.vocab.bins, cfg.defaults.vocab.icd_level);
    write_file_atomic(dir / "vocab.json", vocab.to_json().dump() + "\n");
    say("vocabulary of " + std::to_string(vocab.size()) + " tokens from " + std::to_string(train.size()) +
        " training patients");
    return 0;
}

int cmd_tokenize(const Common& c) {
    const auto cfg = load(c);
    const fs::path dir = c.out;
    const auto cohort = read_cohort(dir);
    const auto vocab = read_vocab(dir);
    const json split = json::parse(read_file(dir / "split.json"));
    std::unordered_map<std::string, const PatientRecord*> by_id;
    for (const auto& r : cohort) by_id.emplace(r.id, &r);
    TokenizeOptions opts;
    opts.context_length = cfg.defaults.context;
    opts.history = HistoryMode::parse(cfg.defaults.history);
    opts.groups = parse_concepts(cfg.defaults.concepts);
    opts.task = cfg.split.stratify_by;
    for (const char* name : {"train", "val", "test"}) {
        std::vector<TokenizedSequence> seqs;
        for (const auto& id : split.at(name)) seqs.push_back(tokenize(*by_id.at(id.get<std::string>()), vocab, opts));
        std::ostringstream os;
        write_sequences(os, seqs, opts.context_length);
        write_file_atomic(dir / "sequences" / (std::string(name) + ".jsonl"), os.str());
        say(std::string(name) + ": " + std::to_string(seqs.size()) + " sequences");
    }
    return 0;
}

ModelConfig model_config(const HarnessConfig& cfg, const std::string& model, const Vocabulary& vocab) {
    return preset(parse_preset(model), cfg.defaults.size, vocab.size(), cfg.defaults.context);
}

void write_curve(const fs::path& path, const TrainResult& r) {
    std::ostringstream os;
    write_curve_csv(os, r.curve);
    write_file_atomic(path, os.str());
}

int cmd_pretrain(const Common& c) {
    const auto cfg = load(c);
    const fs::path dir = c.out;
    const auto ckpt = dir / "pretrain" / (c.model + ".ckpt");
    if (c.resume && fs::exists(ckpt)) {
        say("checkpoint exists, skipping: " + ckpt.string());
        return 0;
    }
    const auto vocab = read_vocab(dir);
    const auto train = read_split(dir, "train");
    const auto val = read_split(dir, "val");
    const auto mcfg = model_config(cfg, c.model, vocab);
    SequenceModel model(mcfg, derive_seed(cfg.train.seed, 1));
    const auto t0 = std::chrono::steady_clock::now();
    const auto result = pretrain(model, train, val, cfg.train);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    fs::create_directories(ckpt.parent_path());
    save_checkpoint(ckpt, model.parameters(),
                    {{"model", to_json(mcfg)},
                     {"train", to_json(cfg.train)},
                     {"best_epoch", result.best_epoch},
                     {"best_val_loss", result.best_value}});
    write_curve(dir / "pretrain" / (c.model + ".curve.csv"), result);
    char buf[160];
    std::snprintf(buf, sizeof buf, "%s: best epoch %d, val loss %.4f, %.1f s", c.model.c_str(), result.best_epoch,
                  result.best_value, secs);
    say(buf);
    return 0;
}

int cmd_finetune(const Common& c) {
    const auto cfg = load(c);
    const fs::path dir = c.out;
    const auto eval_path = dir / "finetune" / (c.model + ".eval.json");
    if (c.resume && fs::exists(eval_path)) {
        say("evaluation exists, skipping: " + eval_path.string());
        return 0;
    }
    const auto vocab = read_vocab(dir);
    const auto train = read_split(dir, "train");
    const auto val = read_split(dir, "val");
    const auto test = read_split(dir, "test");
    std::vector<int> labels;
    for (const auto& s : test) labels.push_back(s.label);
    std::vector<double> probs;
    if (c.model == "GBDT") {
        std::vector<FrequencyVector> data;
        for (const auto& s : train) data.push_back(featurize(s, vocab));
        const auto model = GbdtModel::fit(data, cfg.gbdt);
        for (const auto& s : test) probs.push_back(model.predict_proba(featurize(s, vocab)));
        write_file_atomic(dir / "finetune" / "GBDT.json", model.to_json().dump() + "\n");
    } else {
        const auto mcfg = model_config(cfg, c.model, vocab);
        SequenceModel model(mcfg, derive_seed(cfg.train.seed, 1));
        const auto ckpt = dir / "pretrain" / (c.model + ".ckpt");
        if (!fs::exists(ckpt)) throw std::runtime_error("missing " + ckpt.string() + "; run 'pretrain' first");
        load_checkpoint(ckpt, model.parameters());
        ClassifierHead head(mcfg.d_m, derive_seed(cfg.train.seed, 3));
        const auto result = finetune(model, head, train, val, cfg.train);
        fs::create_directories(dir / "finetune");
        save_checkpoint(dir / "finetune" / (c.model + ".ckpt"), model.parameters(), {{"model", to_json(mcfg)}});
        save_checkpoint(dir / "finetune" / (c.model + ".head.ckpt"), head.parameters(), {{"d_m", mcfg.d_m}});
        write_curve(dir / "finetune" / (c.model + ".curve.csv"), result);
        probs = classify(model, head, test);
    }
    const auto report = evaluate(labels, probs, cfg.bootstrap_iters, derive_seed(cfg.train.seed, 4));
    write_file_atomic(eval_path, to_json(report).dump(2) + "\n");
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s test: AUPRC %.4f [%.4f, %.4f]  AUROC %.4f [%.4f, %.4f]  Brier %.4f",
                  c.model.c_str(), report.auprc.point, report.auprc.ci_lo, report.auprc.ci_hi, report.auroc.point,
                  report.auroc.ci_lo, report.auroc.ci_hi, report.brier.point);
    std::cout << buf << "\n";
    return 0;
}

int cmd_ablate(const Common& c) {
    if (c.config.empty()) throw std::invalid_argument("ablate needs --config");
    const auto cfg = load(c);
    AblateOptions opts;
    opts.out_dir = c.out;
    opts.jobs = c.jobs;
    opts.resume = c.resume;
    opts.log = say;
    const auto summary = ablate(cfg, opts);
    say(std::to_string(summary.executed) + " runs executed, " + std::to_string(summary.skipped) + " reused");
    return summary.complete ? 0 : 3;
}

int cmd_report(const Common& c) {
    const fs::path dir = c.out;
    std::ifstream in(dir / "results.csv");
    if (!in) throw std::runtime_error("missing " + (dir / "results.csv").string() + "; run 'ablate' first");
    const auto rows = read_results_csv(in);
    std::map<std::string, std::vector<ResultRow>> by_ablation;
    for (const auto& r : rows) by_ablation[r.spec.ablation].push_back(r);
    for (const auto& [name, part] : by_ablation) {
        const auto svg = emit_figure(part, name + " (" + std::string(to_string(part.front().spec.axis)) + ")");
        write_file_atomic(dir / "figures" / (name + ".svg"), svg);
        std::cout << name << "\n";
        for (const auto& r : part) {
            char buf[200];
            std::snprintf(buf, sizeof buf, "  %-3s %-10s %-14s AUPRC %.3f [%.3f, %.3f]  AUROC %.3f\n",
                          r.spec.task.c_str(), r.spec.model.c_str(), r.spec.axis_value().c_str(),
                          r.report.auprc.point, r.report.auprc.ci_lo, r.report.auprc.ci_hi, r.report.auroc.point);
            std::cout << buf;
        }
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Sequence models and a frequency baseline on synthetic EHR cohorts"};
    app.require_subcommand(1);
    Common c;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", c.config, "JSON configuration file")->check(CLI::ExistingFile);
        sub->add_option("--seed", c.seed, "Override cohort and training seeds");
        sub->add_option("--out", c.out, "Working directory")->capture_default_str();
        sub->add_option("--jobs", c.jobs, "Concurrent runs")->check(CLI::PositiveNumber);
        sub->add_flag("--resume", c.resume, "Reuse finished outputs");
    };
    std::map<std::string, int (*)(const Common&)> verbs = {
        {"synth", cmd_synth},       {"vocab", cmd_vocab},   {"tokenize", cmd_tokenize}, {"pretrain", cmd_pretrain},
        {"finetune", cmd_finetune}, {"ablate", cmd_ablate}, {"report", cmd_report}};
    const std::map<std::string, std::string> help = {
        {"synth", "Generate a synthetic cohort"},
        {"vocab", "Split the cohort and fit the vocabulary on the training split"},
        {"tokenize", "Tokenize every split"},
        {"pretrain", "Pre-train one model"},
        {"finetune", "Fine-tune one model and evaluate it on the test split"},
        {"ablate", "Run the configured ablation grids"},
        {"report", "Redraw figures and summarise results.csv"}};
    for (const auto& [name, fn] : verbs) {
        auto* sub = app.add_subcommand(name, help.at(name));
        add_common(sub);
        if (name == "pretrain" || name == "finetune") {
            sub->add_option("--model", c.model, "BERT, MBERT_lite, LLAMA, MAMBA, MAMBA2 or GBDT")->capture_default_str();
        }
    }
    CLI11_PARSE(app, argc, argv);
    try {
        for (const auto& [name, fn] : verbs) {
            auto* sub = app.get_subcommand(name);
            if (!sub->parsed()) continue;
            c.seed_given = sub->get_option("--seed")->count() > 0;
            return fn(c);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
