#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <string>
#include <vector>

#include "prol/backbone.hpp"
#include "prol/data_stream.hpp"
#include "prol/objectives.hpp"
#include "prol/optim.hpp"
#include "prol/prompt_engine.hpp"

namespace prol {

// Hard-soft update schedule: constant base_lr while classes are new or the
// cross-entropy is above the threshold, cosine-annealed decay afterwards.
struct HSUState {
    enum class Mode { hard, soft };
    Mode mode = Mode::hard;
    double base_lr = 0.01;
    double min_lr = 0.005;
    int t_max = 20;
    int soft_step = 0;
    double loss_thres = 0.8;
};

const char* hsu_mode_name(HSUState::Mode mode);

struct HsuDecision {
    double lr = 0.0;
    HSUState::Mode mode_used = HSUState::Mode::hard;  // mode the update runs in
    HSUState next;
};

// A chunk containing a first-seen class resets to hard with a fresh annealing
// counter. In hard mode lr = base_lr and ce < loss_thres arms the switch to
// soft for the next step. In soft mode
//   lr = min_lr + 0.5 (base_lr - min_lr)(1 + cos(pi * soft_step / t_max))
// and soft_step saturates at t_max.
HsuDecision hsu_step(const HSUState& hsu, double ce, bool new_class_in_chunk);

struct AblationFlags {
    bool use_generator = true;
    bool use_scaler_shifter_keys = true;
    bool use_sim_loss = true;
    bool use_ort_loss = true;
    bool use_hsu = true;
    bool use_gen_matrix = true;

    void validate() const;  // scalers/shifters/keys require the generator
};

struct LearnerConfig {
    PromptConfig prompt;
    LossWeights weights;
    OptimizerConfig optimizer;
    AblationFlags flags;
    double hsu_min_lr = 0.005;
    int hsu_t_max = 20;
    double loss_thres = 0.8;
    bool standardize_gen = true;
    std::uint64_t seed = 1;
};

struct HsuTracePoint {
    std::string mode;
    double lr = 0.0;
    bool new_class = false;
    double ce = 0.0;
};

// All trainable state of a continual run. The backbone checkpoint rides along
// read-only; training never touches it.
struct LearnerState {
    BackboneCheckpoint backbone;
    LearnerConfig config;
    PromptGenerator generator;
    ClassRegistry registry;
    std::map<int, Tensor> head_w;  // per-class row, dim D
    std::map<int, Tensor> head_b;  // per-class bias, 1 element
    std::map<std::string, AdamState> adam;
    HSUState hsu;
    int current_task = 0;
    long global_step = 0;
    std::vector<bool> visit_audit;
    std::vector<HsuTracePoint> hsu_trace;

    std::vector<int> registered_classes() const { return registry.order(); }
    int column_of(int class_id) const;
};

LearnerState make_learner(BackboneCheckpoint backbone, LearnerConfig config);

// Widen the head with freshly initialized per-class rows; init depends only on
// (seed, class id). Duplicate ids are contract errors.
void register_head_classes(LearnerState& state, const std::vector<int>& class_ids);

// Logits over registered classes, columns in registration order.
Tensor head_logits(const LearnerState& state, const Tensor& features);

// One pass of the training algorithm over a task's chunk stream: register
// unseen classes, generate per-sample prompts from ground-truth keys, assemble
// the joint loss per the ablation flags, step Adam at the HSU rate, clamp the
// scalers/shifters, and log one JSON line per step.
void train_task(LearnerState& state, int task_id, const LabeledDataset& train_ds, ChunkStream& stream,
                std::ostream* jsonl_log = nullptr);

std::uint64_t generator_hash(const LearnerState& state);

// Container plus JSON sidecar (path + ".json") holding the scalar state.
void snapshot(const LearnerState& state, const std::filesystem::path& path);
LearnerState restore(const std::filesystem::path& path, BackboneCheckpoint backbone);

}  // namespace prol
