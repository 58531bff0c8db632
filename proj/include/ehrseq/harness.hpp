#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ehrseq/cohort.hpp"
#include "ehrseq/gbdt.hpp"
#include "ehrseq/metrics.hpp"
#include "ehrseq/model.hpp"
#include "ehrseq/sequence.hpp"
#include "ehrseq/trainer.hpp"
#include "json.hpp"

namespace ehrseq {

inline constexpr const char* kCodeVersion = "ehrseq-0.1.0";

/// Incremental concept sets: DX, DX+VIT, DX+VIT+LAB, DX+VIT+LAB+MED, ALL.
std::vector<ConceptGroup> parse_concepts(const std::string& name);
bool valid_concepts(const std::string& name);

struct VocabPoint {
    int bins{10};
    int icd_level{3};

    bool operator==(const VocabPoint&) const = default;
};

enum class Axis { None, Vocab, Context, Size, History, Concepts, TrainRatio };

std::string_view to_string(Axis a);
Axis parse_axis(std::string_view s);

/// Values every run takes on the axes it does not vary.
struct AxisDefaults {
    VocabPoint vocab{};
    int context{512};
    Size size{Size::Medium};
    std::string history{"Cutoff"};
    std::string concepts{"ALL"};
    double train_ratio{1.0};
};

/// One named ablation: `axis` takes the listed values, every other axis is
/// pinned to the defaults.
struct ExperimentGrid {
    std::string name;
    Axis axis{Axis::None};
    std::vector<std::string> tasks{"T2"};
    std::vector<std::string> models;  // preset names or "GBDT"
    std::vector<VocabPoint> vocab;
    std::vector<int> context;
    std::vector<Size> size;
    std::vector<std::string> history;
    std::vector<std::string> concepts;
    std::vector<double> train_ratio;
    std::vector<std::uint64_t> seeds{0};
};

struct HarnessConfig {
    SynthConfig cohort;
    TrainConfig train;
    SplitSpec split;
    GbdtConfig gbdt;
    AxisDefaults defaults;
    std::vector<ExperimentGrid> ablations;
    int bootstrap_iters{1000};
};

HarnessConfig harness_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const HarnessConfig& cfg);
HarnessConfig load_harness_config(const std::filesystem::path& path);

struct RunSpec {
    std::string ablation;
    Axis axis{Axis::None};
    std::string task;
    std::string model;
    VocabPoint vocab;
    int context{512};
    Size size{Size::Medium};
    std::string history{"Cutoff"};
    std::string concepts{"ALL"};
    double train_ratio{1.0};
    std::uint64_t seed{0};

    /// Printable value of the varied axis ("-" when none).
    std::string axis_value() const;
};

nlohmann::json to_json(const RunSpec& spec);

/// Throws std::invalid_argument on an empty or malformed grid.
void validate(const ExperimentGrid& grid);

/// Runs in order tasks, models, axis values, seeds.
std::vector<RunSpec> expand(const ExperimentGrid& grid, const AxisDefaults& defaults);
std::vector<RunSpec> expand(const HarnessConfig& cfg);

struct ResultRow {
    RunSpec spec;
    EvalReport report;
    std::int64_t n_train{0};
    std::int64_t n_test{0};
    int vocab_size{0};
    std::int64_t parameters{0};
    std::string hash;
};

nlohmann::json to_json(const ResultRow& row);
ResultRow result_row_from_json(const nlohmann::json& j);

/// Run identity: FNV-1a over the spec, training settings, cohort hash and
/// code version, as 16 hex digits.
std::string run_hash(const RunSpec& spec, const HarnessConfig& cfg, const std::string& cohort_hash);

/// Everything a run needs from the cohort, shared across runs.
struct RunContext {
    const HarnessConfig* config{nullptr};
    const std::vector<PatientRecord>* cohort{nullptr};
    std::string cohort_hash;
};

/// Split, vocabulary, tokenization, pre-training, fine-tuning and test
/// evaluation of one run. Single-threaded.
ResultRow run(const RunSpec& spec, const RunContext& ctx);

struct AblateOptions {
    std::filesystem::path out_dir;
    int jobs{1};
    bool resume{false};
    /// Stop after this many new runs (simulated interruption); negative means no limit.
    int max_new_runs{-1};
    std::function<void(const std::string&)> log;
};

struct AblateSummary {
    std::vector<ResultRow> rows;
    int executed{0};
    int skipped{0};
    bool complete{true};
};

/// Runs every expanded spec, caching each finished row under
/// out_dir/runs/<hash>.json. With `resume`, cached rows are reused. When all
/// rows exist, writes results.csv, figures/<ablation>.svg and manifest.json.
AblateSummary ablate(const HarnessConfig& cfg, const AblateOptions& opts);

std::string results_csv_header();
std::string emit_table(const std::vector<ResultRow>& rows);
/// Grouped AUPRC bars with CI whiskers, one panel per task. Throws on empty rows.
std::string emit_figure(const std::vector<ResultRow>& rows, const std::string& title);
std::vector<ResultRow> read_results_csv(std::istream& is);

/// Writes `bytes` to `path` through a temporary file and rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);
std::string read_file(const std::filesystem::path& path);
std::string hex64(std::uint64_t h);

}  // namespace ehrseq
