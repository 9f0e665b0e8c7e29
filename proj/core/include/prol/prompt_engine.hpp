#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "prol/autograd.hpp"
#include "prol/tensor.hpp"

namespace prol {

enum class MatchSource { class_feature, class_token, patch_embedding };

struct PromptConfig {
    int length = 5;                    // l; position 1 is raw, 2..l are scaled/shifted
    std::vector<int> injected_layers;  // strictly increasing; empty disables prompting
    double eps_a = 0.2;
    double eps_b = 0.1;
    MatchSource match_source = MatchSource::class_feature;

    void validate(int backbone_layers) const;
};

// One 3-tap kernel per (branch, injected layer, head). The whole generator is
// 2 * |layers| * H * 3 parameters and is frozen after the first task.
struct PromptGenerator {
    int heads = 0;
    std::vector<int> layers;
    std::vector<Tensor> kernels_k;  // indexed layer_pos * heads + head
    std::vector<Tensor> kernels_v;
    bool frozen = false;

    std::size_t param_count() const { return 2 * layers.size() * heads * 3; }
    const Tensor& kernel_k(std::size_t layer_pos, int head) const { return kernels_k[layer_pos * heads + head]; }
    const Tensor& kernel_v(std::size_t layer_pos, int head) const { return kernels_v[layer_pos * heads + head]; }
};

PromptGenerator init_generator(std::vector<int> injected_layers, int heads, std::uint64_t seed);

// Per-class key plus scaler/shifter vectors; a starts at 1 and b at 0 so a
// fresh class applies the identity transform to the generator output.
struct ClassState {
    int class_id = -1;
    Tensor key;              // D, unit norm at init
    Tensor a_k, b_k;         // l-1 each
    Tensor a_v, b_v;
    int created_task = 0;

    std::size_t scaler_shifter_count() const { return a_k.numel() + b_k.numel() + a_v.numel() + b_v.numel(); }
};

ClassState make_class_state(int class_id, int dim, int prompt_len, std::uint64_t seed, int created_task);

class ClassRegistry {
public:
    // Throws contract_error on duplicate registration. State init depends only
    // on (seed, class id), not on registration order.
    ClassState& register_class(int class_id, int dim, int prompt_len, std::uint64_t seed, int created_task);

    bool has(int class_id) const { return states_.count(class_id) > 0; }
    const ClassState& at(int class_id) const;
    ClassState& at(int class_id);
    const std::vector<int>& order() const { return order_; }  // registration order
    std::size_t size() const { return order_.size(); }

private:
    std::map<int, ClassState> states_;
    std::vector<int> order_;
};

double cosine_similarity(const Tensor& a, const Tensor& b, double eps = 1e-8);

// Top-1 cosine match over the scope; ties break toward the smallest class id.
std::pair<int, double> match_key(const Tensor& q, const ClassRegistry& registry,
                                 const std::vector<int>& scope);

// Plain-tensor 3-tap same convolution (see conv3_same for the graph version).
Tensor conv_same(const Tensor& kernel, const Tensor& v);

// Projects a into [1-eps_a, 1+eps_a] and b into [-eps_b, eps_b].
void clamp_class(ClassState& state, double eps_a, double eps_b);

// Graph-side views of the learnable pieces feeding prompt generation.
struct ClassStateValues {
    Value key, a_k, b_k, a_v, b_v;
};
struct GeneratorValues {
    int heads = 0;
    std::vector<int> layers;
    std::vector<Value> kernels_k, kernels_v;
    const Value& kernel_k(std::size_t layer_pos, int head) const { return kernels_k[layer_pos * heads + head]; }
    const Value& kernel_v(std::size_t layer_pos, int head) const { return kernels_v[layer_pos * heads + head]; }
};

ClassStateValues as_constants(const ClassState& state);
GeneratorValues as_constants(const PromptGenerator& gen);

// Per-sample prefix prompt: one (H, l, head_dim) pair of tensors per injected layer.
struct PrefixPrompt {
    std::vector<int> layers;
    std::vector<Value> pk, pv;
};

// Realizes the prompt equation: g = s * conv(kernel, q_head); position 1 is g
// itself, position i in [2..l] is a[i-1] * g + b[i-1].
PrefixPrompt generate_prompt(const Value& q, const ClassStateValues& cs, const Value& s,
                             const GeneratorValues& gen, int prompt_len, int head_dim);

// Convenience: identity scalers/shifters (a=1, b=0), used when per-class
// specialization is ablated away.
ClassStateValues identity_class_values(int dim, int prompt_len);

}  // namespace prol
