#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "prol/autograd.hpp"
#include "prol/checkpoint.hpp"
#include "prol/data_stream.hpp"
#include "prol/image.hpp"
#include "prol/prompt_engine.hpp"

namespace prol {

struct BackboneConfig {
    int layers = 4;
    int heads = 4;
    int dim = 64;
    int patch_size = 4;
    int image_side = 16;
    int channels = 3;
    double mlp_ratio = 2.0;

    int head_dim() const { return dim / heads; }
    int patches_per_side() const { return image_side / patch_size; }
    int patch_count() const { return patches_per_side() * patches_per_side(); }
    int token_count() const { return patch_count() + 1; }  // class token first
    int patch_dim() const { return patch_size * patch_size * channels; }
    int mlp_hidden() const { return static_cast<int>(dim * mlp_ratio); }

    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

struct BackboneCheckpoint {
    BackboneConfig config;
    int base_class_count = 0;
    NamedTensors params;
};

// Expected name -> shape map for a config; init and load both go through it.
std::map<std::string, std::vector<std::size_t>> backbone_param_shapes(const BackboneConfig& config);

BackboneCheckpoint init_backbone(const BackboneConfig& config, std::uint64_t seed);

// Leaves for every backbone tensor, either constant (frozen) or trainable.
struct BackboneValues {
    BackboneConfig config;
    std::map<std::string, Value> tensors;
    const Value& at(const std::string& name) const;
};
BackboneValues backbone_constants(const BackboneCheckpoint& ckpt);
BackboneValues backbone_trainable(const BackboneCheckpoint& ckpt);

// Per-(layer, head, sample) softmax statistics, for shape and normalization checks.
struct ForwardTrace {
    struct ScoreStat {
        int layer = 0, head = 0, sample = 0;
        std::size_t rows = 0, cols = 0;
        double row_sum_min = 0.0, row_sum_max = 0.0;
    };
    std::vector<ScoreStat> stats;
};

struct ForwardResult {
    Value features;    // class token after the final norm (B x D); the default feature
    Value cls_pre_ln;  // class token before the final norm (B x D)
    Value patch_mean;  // mean patch embedding per sample (B x D)
};

// Prefix attention: at each injected layer the keys become [P_K; K] and the
// values [P_V; V]; queries are never prefixed. An empty prompt list (or a
// prompt with no layers) reproduces the plain forward exactly.
ForwardResult vit_forward(const BackboneValues& backbone, const std::vector<const Image*>& batch,
                          const std::vector<PrefixPrompt>& prompts = {}, ForwardTrace* trace = nullptr);

// Plain-tensor fronts for the two forward contracts. No gradients flow into
// the checkpoint parameters.
Tensor forward_plain(const BackboneCheckpoint& ckpt, const std::vector<const Image*>& batch,
                     ForwardTrace* trace = nullptr);
Tensor forward_prompted(const BackboneCheckpoint& ckpt, const std::vector<const Image*>& batch,
                        const std::vector<PrefixPrompt>& prompts, ForwardTrace* trace = nullptr);

std::vector<const Image*> batch_view(const LabeledDataset& ds, const std::vector<std::size_t>& indices);

struct PretrainOptions {
    int epochs = 30;
    double lr = 1e-3;
    int batch_size = 32;
    std::uint64_t seed = 1;
};

// Supervised pretraining of the backbone plus a temporary linear head on the
// base classes; the head is dropped from the returned checkpoint. The caller
// guarantees base classes are disjoint from later continual classes; when both
// original id lists are supplied this is asserted.
BackboneCheckpoint pretrain_base(const BackboneConfig& config, const LabeledDataset& base_dataset,
                                 const PretrainOptions& options,
                                 const std::vector<int>& base_original_ids = {},
                                 const std::vector<int>& cl_original_ids = {});

// Training-set accuracy of a checkpoint plus head (used by pretraining tests).
double pretrain_train_accuracy(const BackboneCheckpoint& ckpt, const Tensor& head_w, const Tensor& head_b,
                               const LabeledDataset& ds);

// Last pretraining head (weights "head/w", "head/b") for diagnostics.
struct PretrainResult {
    BackboneCheckpoint checkpoint;
    Tensor head_w, head_b;
    double final_train_accuracy = 0.0;
};
PretrainResult pretrain_base_full(const BackboneConfig& config, const LabeledDataset& base_dataset,
                                  const PretrainOptions& options,
                                  const std::vector<int>& base_original_ids = {},
                                  const std::vector<int>& cl_original_ids = {});

void save_checkpoint(const BackboneCheckpoint& ckpt, const std::filesystem::path& path);
BackboneCheckpoint load_checkpoint(const std::filesystem::path& path);
BackboneCheckpoint load_checkpoint(const std::filesystem::path& path, const BackboneConfig& expected);

// Hash over every backbone tensor; the whole continual run must keep it constant.
std::uint64_t backbone_hash(const BackboneCheckpoint& ckpt);

}  // namespace prol
