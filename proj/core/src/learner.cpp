#include "prol/learner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>

#include <nlohmann/json.hpp>

#include "prol/errors.hpp"
#include "prol/rng.hpp"

namespace prol {

const char* hsu_mode_name(HSUState::Mode mode) {
    return mode == HSUState::Mode::hard ? "hard" : "soft";
}

HsuDecision hsu_step(const HSUState& hsu, double ce, bool new_class_in_chunk) {
    HsuDecision d;
    d.next = hsu;
    if (new_class_in_chunk) {
        d.next.mode = HSUState::Mode::hard;
        d.next.soft_step = 0;
    }
    if (d.next.mode == HSUState::Mode::hard) {
        d.lr = d.next.base_lr;
        d.mode_used = HSUState::Mode::hard;
        if (ce < d.next.loss_thres) {
            d.next.mode = HSUState::Mode::soft;
            d.next.soft_step = 0;
        }
    } else {
        double phase = M_PI * static_cast<double>(d.next.soft_step) / static_cast<double>(d.next.t_max);
        d.lr = d.next.min_lr + 0.5 * (d.next.base_lr - d.next.min_lr) * (1.0 + std::cos(phase));
        d.mode_used = HSUState::Mode::soft;
        d.next.soft_step = std::min(d.next.soft_step + 1, d.next.t_max);
    }
    return d;
}

void AblationFlags::validate() const {
    if (use_scaler_shifter_keys && !use_generator)
        throw contract_error("scaler/shifter/key ablation requires the generator");
}

int LearnerState::column_of(int class_id) const {
    const auto& order = registry.order();
    for (std::size_t i = 0; i < order.size(); ++i)
        if (order[i] == class_id) return static_cast<int>(i);
    throw contract_error("class " + std::to_string(class_id) + " not registered");
}

LearnerState make_learner(BackboneCheckpoint backbone, LearnerConfig config) {
    backbone.config.validate();
    config.prompt.validate(backbone.config.layers);
    config.weights.validate();
    config.flags.validate();
    LearnerState st;
    st.backbone = std::move(backbone);
    st.config = std::move(config);
    st.generator = init_generator(st.config.prompt.injected_layers, st.backbone.config.heads,
                                  derive_seed(st.config.seed, {seed_tag("generator")}));
    st.hsu.base_lr = st.config.optimizer.base_lr;
    st.hsu.min_lr = st.config.hsu_min_lr;
    st.hsu.t_max = st.config.hsu_t_max;
    st.hsu.loss_thres = st.config.loss_thres;
    return st;
}

void register_head_classes(LearnerState& state, const std::vector<int>& class_ids) {
    for (int c : class_ids) {
        if (state.head_w.count(c))
            throw contract_error("head row for class " + std::to_string(c) + " already exists");
        Rng rng(derive_seed(state.config.seed, {seed_tag("head"), static_cast<std::uint64_t>(c)}));
        Tensor w({static_cast<std::size_t>(state.backbone.config.dim)});
        for (double& v : w.data) v = 0.02 * rng.normal();
        state.head_w[c] = std::move(w);
        state.head_b[c] = Tensor::scalar(0.0);
    }
}

Tensor head_logits(const LearnerState& state, const Tensor& features) {
    const auto& order = state.registry.order();
    std::size_t B = features.rows(), D = features.cols(), W = order.size();
    Tensor logits({B, W});
    for (std::size_t k = 0; k < W; ++k) {
        const Tensor& w = state.head_w.at(order[k]);
        double b = state.head_b.at(order[k])[0];
        for (std::size_t r = 0; r < B; ++r) {
            double acc = b;
            for (std::size_t j = 0; j < D; ++j) acc += features(r, j) * w[j];
            logits(r, k) = acc;
        }
    }
    return logits;
}

namespace {

std::string gen_param_name(char branch, int layer, int head) {
    return std::string("gen/") + branch + "/layer" + std::to_string(layer) + "/head" +
           std::to_string(head);
}

std::string class_param_name(int c, const char* field) {
    return "class" + std::to_string(c) + "/" + field;
}

// Cosine similarity as a graph value with the same epsilon guard as loss_sim.
Value cosine_value(const Value& q, const Value& key) {
    Value denom = vmax_const(mul(vsqrt(dot(q, q)), vsqrt(dot(key, key))), 1e-8);
    return vdiv(dot(q, key), denom);
}

struct ClassLeaves {
    Value key, a_k, b_k, a_v, b_v;
};

Value select_match_source(const ForwardResult& fr, MatchSource source) {
    switch (source) {
        case MatchSource::class_feature: return fr.features;
        case MatchSource::class_token: return fr.cls_pre_ln;
        case MatchSource::patch_embedding: return fr.patch_mean;
    }
    throw contract_error("unknown match source");
}

}  // namespace

void train_task(LearnerState& st, int task_id, const LabeledDataset& train_ds, ChunkStream& stream,
                std::ostream* jsonl_log) {
    if (task_id != st.current_task + 1)
        throw contract_error("tasks must be trained in order: expected task " +
                             std::to_string(st.current_task + 1) + ", got " + std::to_string(task_id));
    const AblationFlags& flags = st.config.flags;
    flags.validate();
    st.generator.frozen = task_id > 1;
    const bool train_generator = flags.use_generator && !st.generator.frozen;

    const BackboneConfig& bc = st.backbone.config;
    const int prompt_len = st.config.prompt.length;
    const int head_dim = bc.head_dim();

    StreamChunk chunk;
    while (stream.next(chunk)) {
        // learner-side seen-once audit
        for (std::size_t idx : chunk.indices) {
            if (idx >= st.visit_audit.size()) st.visit_audit.resize(idx + 1, false);
            if (st.visit_audit[idx])
                throw seen_once_error("training sample " + std::to_string(idx) + " visited twice");
            st.visit_audit[idx] = true;
        }

        // previously-learned classes, snapshot before registering this chunk's
        std::vector<int> old_classes;
        for (int c : st.registry.order())
            if (st.registry.at(c).created_task < task_id) old_classes.push_back(c);

        std::vector<int> new_ids;
        for (int label : chunk.labels)
            if (!st.registry.has(label) &&
                std::find(new_ids.begin(), new_ids.end(), label) == new_ids.end())
                new_ids.push_back(label);
        for (int c : new_ids) {
            st.registry.register_class(c, bc.dim, prompt_len, st.config.seed, task_id);
            register_head_classes(st, {c});
        }
        bool new_class_in_chunk = !new_ids.empty();

        const auto batch = batch_view(train_ds, chunk.indices);
        const std::size_t B = batch.size();

        BackboneValues bbc = backbone_constants(st.backbone);
        ForwardResult plain = vit_forward(bbc, batch);
        Tensor q_all = select_match_source(plain, st.config.prompt.match_source).val();

        // parameter leaves for this step
        GeneratorValues gen_vals;
        if (flags.use_generator) {
            gen_vals.heads = st.generator.heads;
            gen_vals.layers = st.generator.layers;
            for (std::size_t i = 0; i < st.generator.kernels_k.size(); ++i) {
                gen_vals.kernels_k.push_back(train_generator ? Value::param(st.generator.kernels_k[i])
                                                             : Value::constant(st.generator.kernels_k[i]));
                gen_vals.kernels_v.push_back(train_generator ? Value::param(st.generator.kernels_v[i])
                                                             : Value::constant(st.generator.kernels_v[i]));
            }
        }
        std::map<int, ClassLeaves> class_leaves;
        if (flags.use_scaler_shifter_keys) {
            for (int label : chunk.labels) {
                if (class_leaves.count(label)) continue;
                const ClassState& cs = st.registry.at(label);
                class_leaves[label] = {Value::param(cs.key), Value::param(cs.a_k), Value::param(cs.b_k),
                                       Value::param(cs.a_v), Value::param(cs.b_v)};
            }
        }
        std::map<int, std::pair<Value, Value>> head_leaves;
        for (int c : st.registry.order())
            head_leaves[c] = {Value::param(st.head_w.at(c)), Value::param(st.head_b.at(c))};

        // prompts from ground-truth class states; s trains the key via cosine
        Value features;
        std::vector<Value> sim_terms;
        if (flags.use_generator) {
            std::vector<PrefixPrompt> prompts;
            prompts.reserve(B);
            for (std::size_t i = 0; i < B; ++i) {
                Value qi = Value::constant(
                    Tensor({static_cast<std::size_t>(bc.dim)},
                           std::vector<double>(q_all.data.begin() + i * bc.dim,
                                               q_all.data.begin() + (i + 1) * bc.dim)));
                Value s;
                ClassStateValues csv;
                if (flags.use_scaler_shifter_keys) {
                    const ClassLeaves& cl = class_leaves.at(chunk.labels[i]);
                    s = cosine_value(qi, cl.key);
                    csv = {cl.key, cl.a_k, cl.b_k, cl.a_v, cl.b_v};
                    if (flags.use_sim_loss) sim_terms.push_back(neg(cosine_value(qi, cl.key)));
                } else {
                    s = Value::constant(Tensor::scalar(1.0));
                    csv = identity_class_values(bc.dim, prompt_len);
                }
                prompts.push_back(generate_prompt(qi, csv, s, gen_vals, prompt_len, head_dim));
            }
            features = vit_forward(bbc, batch, prompts).features;
        } else {
            features = plain.features;  // no prompts: prompted forward equals plain
        }

        // logits over registered classes, columns in registration order
        std::vector<Value> cols;
        cols.reserve(st.registry.size());
        for (int c : st.registry.order()) {
            const auto& [w, b] = head_leaves.at(c);
            cols.push_back(scalar_add(matmul(features, reshape(w, {w.val().numel(), 1})), b));
        }
        Value logits = concat_cols(cols);

        std::vector<std::size_t> label_cols(B);
        for (std::size_t i = 0; i < B; ++i)
            label_cols[i] = static_cast<std::size_t>(st.column_of(chunk.labels[i]));
        std::vector<std::size_t> current_cols, seen_cols;
        {
            const auto& order = st.registry.order();
            for (std::size_t k = 0; k < order.size(); ++k) {
                seen_cols.push_back(k);
                if (st.registry.at(order[k]).created_task == task_id) current_cols.push_back(k);
            }
        }

        LossTerms terms;
        terms.intra = loss_intra(logits, label_cols, current_cols);
        terms.inter = loss_inter(logits, label_cols, seen_cols);
        if (!sim_terms.empty()) {
            Value acc = sim_terms[0];
            for (std::size_t i = 1; i < sim_terms.size(); ++i) acc = add(acc, sim_terms[i]);
            terms.sim = scale(acc, 1.0 / static_cast<double>(sim_terms.size()));
        }
        if (flags.use_scaler_shifter_keys && flags.use_ort_loss && !old_classes.empty()) {
            Rng ort_rng(derive_seed(st.config.seed, {seed_tag("ort"), static_cast<std::uint64_t>(task_id),
                                                     static_cast<std::uint64_t>(chunk.chunk_id)}));
            std::vector<Value> new_keys, old_keys;
            for (std::size_t i = 0; i < B; ++i) {
                int old_c = old_classes[ort_rng.uniform_index(old_classes.size())];
                new_keys.push_back(class_leaves.at(chunk.labels[i]).key);
                old_keys.push_back(Value::constant(st.registry.at(old_c).key));  // old keys stay put
            }
            terms.ort = loss_ort(new_keys, old_keys);
        }
        if (flags.use_generator && flags.use_gen_matrix && B >= 2) {
            Value m = gen_matrix(detach(plain.features), features, st.config.standardize_gen);
            terms.gen = loss_gen(m);
        }

        auto [total, report] = loss_total(terms, st.config.weights);
        if (!std::isfinite(report.total))
            throw training_diverged("total loss is not finite at task " + std::to_string(task_id) +
                                    ", chunk " + std::to_string(chunk.chunk_id) + ", step " +
                                    std::to_string(st.global_step));

        double lr;
        HSUState::Mode mode_used;
        if (flags.use_hsu) {
            HsuDecision d = hsu_step(st.hsu, report.ce, new_class_in_chunk);
            lr = d.lr;
            mode_used = d.mode_used;
            st.hsu = d.next;
        } else {
            lr = st.config.optimizer.base_lr;
            mode_used = HSUState::Mode::hard;
        }

        backward(total);

        auto maybe_step = [&](const Value& leaf, Tensor& data, const std::string& name) {
            if (!leaf.defined() || !leaf.node_->grad_alloc) return;
            adam_step(data, st.adam[name], leaf.grad(), lr, st.config.optimizer);
        };
        if (train_generator) {
            for (std::size_t li = 0; li < gen_vals.layers.size(); ++li)
                for (int h = 0; h < gen_vals.heads; ++h) {
                    std::size_t idx = li * gen_vals.heads + h;
                    maybe_step(gen_vals.kernels_k[idx], st.generator.kernels_k[idx],
                               gen_param_name('K', gen_vals.layers[li], h));
                    maybe_step(gen_vals.kernels_v[idx], st.generator.kernels_v[idx],
                               gen_param_name('V', gen_vals.layers[li], h));
                }
        }
        for (auto& [c, leaves] : class_leaves) {
            ClassState& cs = st.registry.at(c);
            maybe_step(leaves.key, cs.key, class_param_name(c, "key"));
            maybe_step(leaves.a_k, cs.a_k, class_param_name(c, "aK"));
            maybe_step(leaves.b_k, cs.b_k, class_param_name(c, "bK"));
            maybe_step(leaves.a_v, cs.a_v, class_param_name(c, "aV"));
            maybe_step(leaves.b_v, cs.b_v, class_param_name(c, "bV"));
        }
        for (auto& [c, wb] : head_leaves) {
            maybe_step(wb.first, st.head_w.at(c), "learner/head/class" + std::to_string(c) + "/w");
            maybe_step(wb.second, st.head_b.at(c), "learner/head/class" + std::to_string(c) + "/b");
        }

        for (int c : st.registry.order())
            clamp_class(st.registry.at(c), st.config.prompt.eps_a, st.config.prompt.eps_b);

        st.hsu_trace.push_back({hsu_mode_name(mode_used), lr, new_class_in_chunk, report.ce});
        if (jsonl_log) {
            nlohmann::ordered_json line = {{"step", st.global_step}, {"intra", report.intra},
                                           {"inter", report.inter},  {"sim", report.sim},
                                           {"ort", report.ort},      {"gen", report.gen},
                                           {"ce", report.ce},        {"total", report.total},
                                           {"lr", lr},               {"mode", hsu_mode_name(mode_used)}};
            (*jsonl_log) << line.dump() << "\n";
        }
        ++st.global_step;
    }
    st.current_task = task_id;
}

std::uint64_t generator_hash(const LearnerState& state) {
    std::uint64_t h = 0x2545f4914f6cdd1dULL;
    for (const auto& k : state.generator.kernels_k) h = splitmix64(h ^ tensor_hash(k));
    for (const auto& k : state.generator.kernels_v) h = splitmix64(h ^ tensor_hash(k));
    return h;
}

// ---------------- snapshot / restore ----------------

void snapshot(const LearnerState& st, const std::filesystem::path& path) {
    NamedTensors out;
    for (std::size_t li = 0; li < st.generator.layers.size(); ++li)
        for (int h = 0; h < st.generator.heads; ++h) {
            out.put(gen_param_name('K', st.generator.layers[li], h), st.generator.kernel_k(li, h));
            out.put(gen_param_name('V', st.generator.layers[li], h), st.generator.kernel_v(li, h));
        }
    for (int c : st.registry.order()) {
        const ClassState& cs = st.registry.at(c);
        out.put(class_param_name(c, "key"), cs.key);
        out.put(class_param_name(c, "aK"), cs.a_k);
        out.put(class_param_name(c, "bK"), cs.b_k);
        out.put(class_param_name(c, "aV"), cs.a_v);
        out.put(class_param_name(c, "bV"), cs.b_v);
        out.put("learner/head/class" + std::to_string(c) + "/w", st.head_w.at(c));
        out.put("learner/head/class" + std::to_string(c) + "/b", st.head_b.at(c));
    }
    for (const auto& [name, adam] : st.adam) {
        if (adam.m.numel() == 0) continue;
        out.put("learner/adam/" + name + "/m", adam.m);
        out.put("learner/adam/" + name + "/v", adam.v);
    }
    save_container(path, out);

    nlohmann::ordered_json j;
    j["version"] = 1;
    j["current_task"] = st.current_task;
    j["global_step"] = st.global_step;
    j["hsu"] = {{"mode", hsu_mode_name(st.hsu.mode)}, {"base_lr", st.hsu.base_lr},
                {"min_lr", st.hsu.min_lr},            {"t_max", st.hsu.t_max},
                {"soft_step", st.hsu.soft_step},      {"loss_thres", st.hsu.loss_thres}};
    j["generator_frozen"] = st.generator.frozen;
    j["registered"] = nlohmann::ordered_json::array();
    for (int c : st.registry.order())
        j["registered"].push_back({{"id", c}, {"created_task", st.registry.at(c).created_task}});
    nlohmann::ordered_json steps = nlohmann::ordered_json::object();
    for (const auto& [name, adam] : st.adam)
        if (adam.m.numel() > 0) steps[name] = adam.step;
    j["adam_steps"] = steps;
    std::string visited(st.visit_audit.size(), '0');
    for (std::size_t i = 0; i < st.visit_audit.size(); ++i)
        if (st.visit_audit[i]) visited[i] = '1';
    j["visit_audit"] = visited;
    j["config"] = {{"prompt_length", st.config.prompt.length},
                   {"injected_layers", st.config.prompt.injected_layers},
                   {"eps_a", st.config.prompt.eps_a},
                   {"eps_b", st.config.prompt.eps_b},
                   {"match_source", static_cast<int>(st.config.prompt.match_source)},
                   {"weights", {st.config.weights.l1, st.config.weights.l2, st.config.weights.l3,
                                st.config.weights.l4, st.config.weights.l5}},
                   {"optimizer", {st.config.optimizer.base_lr, st.config.optimizer.beta1,
                                  st.config.optimizer.beta2, st.config.optimizer.eps}},
                   {"flags", {st.config.flags.use_generator, st.config.flags.use_scaler_shifter_keys,
                              st.config.flags.use_sim_loss, st.config.flags.use_ort_loss,
                              st.config.flags.use_hsu, st.config.flags.use_gen_matrix}},
                   {"hsu_min_lr", st.config.hsu_min_lr},
                   {"hsu_t_max", st.config.hsu_t_max},
                   {"loss_thres", st.config.loss_thres},
                   {"standardize_gen", st.config.standardize_gen},
                   {"seed", st.config.seed}};
    std::ofstream side(path.string() + ".json");
    if (!side) throw io_error("cannot write snapshot sidecar for " + path.string());
    side << j.dump(2) << "\n";
}

LearnerState restore(const std::filesystem::path& path, BackboneCheckpoint backbone) {
    std::ifstream side(path.string() + ".json");
    if (!side) throw io_error("missing snapshot sidecar: " + path.string() + ".json");
    nlohmann::json j;
    try {
        side >> j;
    } catch (const nlohmann::json::exception& e) {
        throw io_error("malformed snapshot sidecar: " + std::string(e.what()));
    }
    if (j.value("version", 0) != 1) throw io_error("unsupported snapshot version");

    LearnerConfig cfg;
    const auto& jc = j.at("config");
    cfg.prompt.length = jc.at("prompt_length").get<int>();
    cfg.prompt.injected_layers = jc.at("injected_layers").get<std::vector<int>>();
    cfg.prompt.eps_a = jc.at("eps_a").get<double>();
    cfg.prompt.eps_b = jc.at("eps_b").get<double>();
    cfg.prompt.match_source = static_cast<MatchSource>(jc.at("match_source").get<int>());
    auto w = jc.at("weights").get<std::vector<double>>();
    cfg.weights = {w[0], w[1], w[2], w[3], w[4]};
    auto o = jc.at("optimizer").get<std::vector<double>>();
    cfg.optimizer = {o[0], o[1], o[2], o[3]};
    auto f = jc.at("flags").get<std::vector<bool>>();
    cfg.flags = {f[0], f[1], f[2], f[3], f[4], f[5]};
    cfg.hsu_min_lr = jc.at("hsu_min_lr").get<double>();
    cfg.hsu_t_max = jc.at("hsu_t_max").get<int>();
    cfg.loss_thres = jc.at("loss_thres").get<double>();
    cfg.standardize_gen = jc.at("standardize_gen").get<bool>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();

    LearnerState st = make_learner(std::move(backbone), cfg);
    st.current_task = j.at("current_task").get<int>();
    st.global_step = j.at("global_step").get<long>();
    const auto& jh = j.at("hsu");
    st.hsu.mode = jh.at("mode").get<std::string>() == "hard" ? HSUState::Mode::hard : HSUState::Mode::soft;
    st.hsu.base_lr = jh.at("base_lr").get<double>();
    st.hsu.min_lr = jh.at("min_lr").get<double>();
    st.hsu.t_max = jh.at("t_max").get<int>();
    st.hsu.soft_step = jh.at("soft_step").get<int>();
    st.hsu.loss_thres = jh.at("loss_thres").get<double>();
    st.generator.frozen = j.at("generator_frozen").get<bool>();
    std::string visited = j.at("visit_audit").get<std::string>();
    st.visit_audit.resize(visited.size());
    for (std::size_t i = 0; i < visited.size(); ++i) st.visit_audit[i] = visited[i] == '1';

    NamedTensors in = load_container(path);
    for (std::size_t li = 0; li < st.generator.layers.size(); ++li)
        for (int h = 0; h < st.generator.heads; ++h) {
            st.generator.kernels_k[li * st.generator.heads + h] =
                in.at(gen_param_name('K', st.generator.layers[li], h));
            st.generator.kernels_v[li * st.generator.heads + h] =
                in.at(gen_param_name('V', st.generator.layers[li], h));
        }
    for (const auto& entry : j.at("registered")) {
        int c = entry.at("id").get<int>();
        int task = entry.at("created_task").get<int>();
        ClassState& cs = st.registry.register_class(c, st.backbone.config.dim, cfg.prompt.length,
                                                    cfg.seed, task);
        cs.key = in.at(class_param_name(c, "key"));
        cs.a_k = in.at(class_param_name(c, "aK"));
        cs.b_k = in.at(class_param_name(c, "bK"));
        cs.a_v = in.at(class_param_name(c, "aV"));
        cs.b_v = in.at(class_param_name(c, "bV"));
        st.head_w[c] = in.at("learner/head/class" + std::to_string(c) + "/w");
        st.head_b[c] = in.at("learner/head/class" + std::to_string(c) + "/b");
    }
    for (const auto& [name, step] : j.at("adam_steps").items()) {
        AdamState& a = st.adam[name];
        a.m = in.at("learner/adam/" + name + "/m");
        a.v = in.at("learner/adam/" + name + "/v");
        a.step = step.get<long>();
    }
    return st;
}

}  // namespace prol
