#include "prol/prompt_engine.hpp"

#include <algorithm>
#include <cmath>

#include "prol/errors.hpp"
#include "prol/rng.hpp"

namespace prol {

void PromptConfig::validate(int backbone_layers) const {
    if (length < 2) throw contract_error("prompt length must be >= 2 (positions 2..l carry scalers)");
    if (!(eps_a > 0.0) || !(eps_b > 0.0)) throw contract_error("eps_a and eps_b must be positive");
    for (std::size_t i = 0; i < injected_layers.size(); ++i) {
        if (injected_layers[i] < 0 || injected_layers[i] >= backbone_layers)
            throw contract_error("injected layer index " + std::to_string(injected_layers[i]) +
                                 " outside backbone depth " + std::to_string(backbone_layers));
        if (i > 0 && injected_layers[i] <= injected_layers[i - 1])
            throw contract_error("injected layer indices must be strictly increasing");
    }
}

PromptGenerator init_generator(std::vector<int> injected_layers, int heads, std::uint64_t seed) {
    if (heads < 1) throw contract_error("init_generator: heads must be >= 1");
    PromptGenerator gen;
    gen.heads = heads;
    gen.layers = std::move(injected_layers);
    gen.kernels_k.reserve(gen.layers.size() * heads);
    gen.kernels_v.reserve(gen.layers.size() * heads);
    for (std::size_t li = 0; li < gen.layers.size(); ++li) {
        for (int h = 0; h < heads; ++h) {
            for (int branch = 0; branch < 2; ++branch) {
                Rng rng(derive_seed(seed, {seed_tag("gen"), static_cast<std::uint64_t>(branch),
                                           static_cast<std::uint64_t>(gen.layers[li]),
                                           static_cast<std::uint64_t>(h)}));
                Tensor k({3});
                for (int i = 0; i < 3; ++i) k[i] = rng.uniform(-0.5, 0.5);
                (branch == 0 ? gen.kernels_k : gen.kernels_v).push_back(std::move(k));
            }
        }
    }
    return gen;
}

ClassState make_class_state(int class_id, int dim, int prompt_len, std::uint64_t seed, int created_task) {
    if (prompt_len < 2) throw contract_error("class state requires prompt length >= 2");
    ClassState cs;
    cs.class_id = class_id;
    cs.created_task = created_task;
    Rng rng(derive_seed(seed, {seed_tag("class_key"), static_cast<std::uint64_t>(class_id)}));
    cs.key = Tensor({static_cast<std::size_t>(dim)});
    double norm = 0.0;
    for (std::size_t i = 0; i < cs.key.numel(); ++i) {
        cs.key[i] = rng.normal();
        norm += cs.key[i] * cs.key[i];
    }
    norm = std::sqrt(norm);
    for (double& v : cs.key.data) v /= norm;
    std::size_t m = static_cast<std::size_t>(prompt_len - 1);
    cs.a_k = Tensor::full({m}, 1.0);
    cs.a_v = Tensor::full({m}, 1.0);
    cs.b_k = Tensor::zeros({m});
    cs.b_v = Tensor::zeros({m});
    return cs;
}

ClassState& ClassRegistry::register_class(int class_id, int dim, int prompt_len, std::uint64_t seed,
                                          int created_task) {
    if (has(class_id))
        throw contract_error("class " + std::to_string(class_id) + " is already registered");
    states_[class_id] = make_class_state(class_id, dim, prompt_len, seed, created_task);
    order_.push_back(class_id);
    return states_[class_id];
}

const ClassState& ClassRegistry::at(int class_id) const {
    auto it = states_.find(class_id);
    if (it == states_.end()) throw contract_error("class " + std::to_string(class_id) + " not registered");
    return it->second;
}

ClassState& ClassRegistry::at(int class_id) {
    auto it = states_.find(class_id);
    if (it == states_.end()) throw contract_error("class " + std::to_string(class_id) + " not registered");
    return it->second;
}

double cosine_similarity(const Tensor& a, const Tensor& b, double eps) {
    if (a.numel() != b.numel()) throw contract_error("cosine_similarity: length mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    return dot / std::max(std::sqrt(na) * std::sqrt(nb), eps);
}

std::pair<int, double> match_key(const Tensor& q, const ClassRegistry& registry,
                                 const std::vector<int>& scope) {
    if (scope.empty()) throw contract_error("match_key: scope must not be empty");
    int best = -1;
    double best_sim = 0.0;
    for (int c : scope) {
        double s = cosine_similarity(q, registry.at(c).key);
        if (best < 0 || s > best_sim || (s == best_sim && c < best)) {
            best = c;
            best_sim = s;
        }
    }
    return {best, best_sim};
}

Tensor conv_same(const Tensor& kernel, const Tensor& v) {
    return conv3_same(Value::constant(kernel), Value::constant(v)).val();
}

void clamp_class(ClassState& state, double eps_a, double eps_b) {
    for (Tensor* a : {&state.a_k, &state.a_v})
        for (double& x : a->data) x = std::clamp(x, 1.0 - eps_a, 1.0 + eps_a);
    for (Tensor* b : {&state.b_k, &state.b_v})
        for (double& x : b->data) x = std::clamp(x, -eps_b, eps_b);
}

ClassStateValues as_constants(const ClassState& state) {
    return {Value::constant(state.key), Value::constant(state.a_k), Value::constant(state.b_k),
            Value::constant(state.a_v), Value::constant(state.b_v)};
}

GeneratorValues as_constants(const PromptGenerator& gen) {
    GeneratorValues g;
    g.heads = gen.heads;
    g.layers = gen.layers;
    for (const auto& k : gen.kernels_k) g.kernels_k.push_back(Value::constant(k));
    for (const auto& k : gen.kernels_v) g.kernels_v.push_back(Value::constant(k));
    return g;
}

ClassStateValues identity_class_values(int dim, int prompt_len) {
    std::size_t m = static_cast<std::size_t>(prompt_len - 1);
    return {Value::constant(Tensor::zeros({static_cast<std::size_t>(dim)})),
            Value::constant(Tensor::full({m}, 1.0)), Value::constant(Tensor::zeros({m})),
            Value::constant(Tensor::full({m}, 1.0)), Value::constant(Tensor::zeros({m}))};
}

namespace {

// One (l, head_dim) block: position 1 is g, positions 2..l are a[i]*g + b[i].
Value positions_block(const Value& g, const Value& a, const Value& b, int prompt_len, int head_dim) {
    std::vector<Value> rows;
    rows.reserve(prompt_len);
    Value g_row = reshape(g, {1, static_cast<std::size_t>(head_dim)});
    rows.push_back(g_row);
    Value a_row = reshape(a, {1, a.val().numel()});
    Value b_row = reshape(b, {1, b.val().numel()});
    for (int i = 0; i + 1 < prompt_len; ++i) {
        Value ai = col_slice(a_row, i, i + 1);
        Value bi = col_slice(b_row, i, i + 1);
        rows.push_back(scalar_add(scalar_mul(g_row, ai), bi));
    }
    return concat_rows(rows);
}

}  // namespace

PrefixPrompt generate_prompt(const Value& q, const ClassStateValues& cs, const Value& s,
                             const GeneratorValues& gen, int prompt_len, int head_dim) {
    if (!q.val().all_finite()) throw contract_error("generate_prompt: non-finite query feature");
    std::size_t dim = q.val().numel();
    if (dim != static_cast<std::size_t>(gen.heads) * head_dim)
        throw contract_error("generate_prompt: feature size does not match heads * head_dim");

    PrefixPrompt prompt;
    prompt.layers = gen.layers;
    Value q_row = reshape(q, {1, dim});
    for (std::size_t li = 0; li < gen.layers.size(); ++li) {
        std::vector<Value> head_blocks_k, head_blocks_v;
        head_blocks_k.reserve(gen.heads);
        head_blocks_v.reserve(gen.heads);
        for (int h = 0; h < gen.heads; ++h) {
            Value qh = reshape(col_slice(q_row, h * head_dim, (h + 1) * head_dim),
                               {static_cast<std::size_t>(head_dim)});
            Value gk = scalar_mul(conv3_same(gen.kernel_k(li, h), qh), s);
            Value gv = scalar_mul(conv3_same(gen.kernel_v(li, h), qh), s);
            head_blocks_k.push_back(positions_block(gk, cs.a_k, cs.b_k, prompt_len, head_dim));
            head_blocks_v.push_back(positions_block(gv, cs.a_v, cs.b_v, prompt_len, head_dim));
        }
        std::vector<std::size_t> shape3 = {static_cast<std::size_t>(gen.heads),
                                           static_cast<std::size_t>(prompt_len),
                                           static_cast<std::size_t>(head_dim)};
        prompt.pk.push_back(reshape(concat_rows(head_blocks_k), shape3));
        prompt.pv.push_back(reshape(concat_rows(head_blocks_v), shape3));
    }
    return prompt;
}

}  // namespace prol
