#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "prol/backbone.hpp"
#include "prol/evaluator.hpp"
#include "prol/learner.hpp"
#include "prol/toml_lite.hpp"

namespace prol {

// Flat experiment description; the TOML file and CLI flags both map onto this.
struct ExperimentConfig {
    // dataset
    std::string dataset = "synthetic";  // "synthetic" | "manifest"
    std::string manifest_path;
    int classes = 20;  // continual classes
    int per_class = 100;
    double separation = 3.0;
    std::uint64_t data_seed = 7;
    double test_fraction = 0.2;

    // protocol
    int tasks = 5;
    int chunk_size = 10;
    std::vector<std::uint64_t> seeds = {1, 2, 3};

    // backbone + pretraining
    BackboneConfig backbone;
    std::string checkpoint = "prol_backbone.ckpt";
    bool pretrain = false;  // force pretraining even if the checkpoint exists
    int base_classes = 4;
    int pretrain_epochs = 30;
    int pretrain_batch = 32;
    double pretrain_lr = 1e-3;
    std::uint64_t pretrain_seed = 1;

    // prompts / losses / schedule / optimizer
    PromptConfig prompt = [] {
        PromptConfig p;
        p.injected_layers = {0, 1, 2};
        return p;
    }();
    LossWeights weights;
    double loss_thres = 0.8;
    int hsu_t_max = 20;
    double hsu_min_lr = 0.005;
    OptimizerConfig optimizer;
    bool standardize_gen = true;

    // ablation preset: ft | ft_g | ft_g_ss_k | ft_g_ss_k_hsu | full | custom
    std::string ablation = "full";
    AblationFlags flags;

    std::string outdir = "results";

    LearnerConfig learner_config(std::uint64_t seed) const;
};

AblationFlags preset_flags(const std::string& name);
const std::vector<std::string>& ablation_presets();

struct ValidationResult {
    ExperimentConfig config;                   // normalized, defaults filled
    std::vector<std::string> errors;           // empty means valid
    std::vector<std::string> defaults_applied; // keys that fell back to defaults
    bool ok() const { return errors.empty(); }
};

// Cross-field validation plus default filling, from an already-built config or
// from a parsed TOML table (unknown keys are errors).
ValidationResult validate_config(const ExperimentConfig& config);
ValidationResult config_from_toml(const TomlTable& table);

std::string config_to_toml(const ExperimentConfig& config);
std::string config_hash(const ExperimentConfig& config);  // hex FNV-1a of the normalized TOML

struct SeedResult {
    std::uint64_t seed = 0;
    MetricsLedger ledger;
    double faa = 0.0, caa = 0.0, ffm = 0.0;
    std::vector<double> aa;  // AA_t for t = 1..T
    std::vector<TimingRecord> timing;
    std::filesystem::path dir;
};

struct RunResult {
    std::vector<SeedResult> seeds;
    double faa_mean = 0.0, faa_std = 0.0;
    double caa_mean = 0.0, caa_std = 0.0;
    double ffm_mean = 0.0, ffm_std = 0.0;
    std::string hash;
    std::filesystem::path outdir;
};

// Builds (or loads) the pretrained backbone for a config.
BackboneCheckpoint prepare_backbone(const ExperimentConfig& config);

// Pretrains on the base classes and writes the checkpoint file. Returns the
// final train accuracy on the base set.
double run_pretrain(const ExperimentConfig& config);

// Full protocol: per seed, stream tasks in order, evaluate after each task,
// persist config copy / metrics / ledger / timing / train log / plots, then
// aggregate across seeds.
RunResult run_experiment(const ExperimentConfig& config);

struct GridRow {
    double lr = 0.0;
    double faa = 0.0, caa = 0.0, ffm = 0.0;
};
struct GridResult {
    std::vector<GridRow> rows;
    double best_lr = 0.0;
    std::filesystem::path outdir;
};

// One single-seed run per learning rate; best by FAA, ties by lower FFM then
// lower lr.
GridResult grid_search_lr(const ExperimentConfig& config, const std::vector<double>& grid);
const GridRow& best_grid_row(const std::vector<GridRow>& rows);

struct AblationResult {
    std::vector<std::pair<std::string, RunResult>> runs;  // preset order
    std::filesystem::path outdir;
};
AblationResult run_ablation(const ExperimentConfig& config, const std::vector<std::string>& presets);

// Trains all tasks for one seed without evaluation and returns the training
// wall time in seconds; backs the linear-time scaling check.
double timed_training_run(const ExperimentConfig& config, std::uint64_t seed,
                          const BackboneCheckpoint& backbone);

// Hooks used by tests and the acceptance suite.
struct SeedRunArtifacts {
    SeedResult result;
    LearnerState final_state;
    std::vector<std::uint64_t> generator_hash_after_task;
    std::uint64_t backbone_hash_before = 0, backbone_hash_after = 0;
    bool clamp_violation = false;
};
SeedRunArtifacts run_single_seed(const ExperimentConfig& config, std::uint64_t seed,
                                 const BackboneCheckpoint& backbone,
                                 const std::filesystem::path& seed_dir);

}  // namespace prol
