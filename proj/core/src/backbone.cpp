#include "prol/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prol/errors.hpp"
#include "prol/objectives.hpp"
#include "prol/optim.hpp"
#include "prol/rng.hpp"

namespace prol {

void BackboneConfig::validate() const {
    if (layers < 1) throw contract_error("backbone: layer count must be >= 1");
    if (heads < 1 || dim % heads != 0) throw contract_error("backbone: dim must be divisible by heads");
    if (patch_size < 1 || image_side % patch_size != 0)
        throw contract_error("backbone: image side must be divisible by patch size");
    if (channels < 1) throw contract_error("backbone: channels must be >= 1");
    if (mlp_ratio <= 0.0) throw contract_error("backbone: mlp ratio must be positive");
}

std::map<std::string, std::vector<std::size_t>> backbone_param_shapes(const BackboneConfig& c) {
    std::map<std::string, std::vector<std::size_t>> s;
    auto D = static_cast<std::size_t>(c.dim);
    auto P = static_cast<std::size_t>(c.patch_dim());
    auto T = static_cast<std::size_t>(c.token_count());
    auto M = static_cast<std::size_t>(c.mlp_hidden());
    s["patch/w"] = {P, D};
    s["patch/b"] = {D};
    s["cls"] = {1, D};
    s["pos"] = {T, D};
    for (int i = 0; i < c.layers; ++i) {
        std::string p = "layer" + std::to_string(i) + "/";
        s[p + "ln1/g"] = {D};
        s[p + "ln1/b"] = {D};
        for (const char* w : {"wq", "wk", "wv", "wo"}) s[p + w] = {D, D};
        for (const char* b : {"bq", "bk", "bv", "bo"}) s[p + b] = {D};
        s[p + "ln2/g"] = {D};
        s[p + "ln2/b"] = {D};
        s[p + "mlp/w1"] = {D, M};
        s[p + "mlp/b1"] = {M};
        s[p + "mlp/w2"] = {M, D};
        s[p + "mlp/b2"] = {D};
    }
    s["final_ln/g"] = {D};
    s["final_ln/b"] = {D};
    return s;
}

BackboneCheckpoint init_backbone(const BackboneConfig& config, std::uint64_t seed) {
    config.validate();
    BackboneCheckpoint ckpt;
    ckpt.config = config;
    for (const auto& [name, shape] : backbone_param_shapes(config)) {
        Tensor t(shape);
        bool is_gain = name.ends_with("ln1/g") || name.ends_with("ln2/g") || name == "final_ln/g";
        bool is_bias = name.ends_with("/b") || name.starts_with("final_ln/b") ||
                       name.ends_with("bq") || name.ends_with("bk") || name.ends_with("bv") ||
                       name.ends_with("bo") || name.ends_with("b1") || name.ends_with("b2");
        if (is_gain) {
            t.fill(1.0);
        } else if (is_bias) {
            // zeros
        } else {
            Rng rng(derive_seed(seed, {seed_tag("init"), seed_tag(name)}));
            for (double& v : t.data) v = 0.02 * rng.normal();
        }
        ckpt.params.put(name, std::move(t));
    }
    return ckpt;
}

const Value& BackboneValues::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw contract_error("backbone tensor missing: " + name);
    return it->second;
}

BackboneValues backbone_constants(const BackboneCheckpoint& ckpt) {
    BackboneValues v;
    v.config = ckpt.config;
    for (const auto& [name, t] : ckpt.params.items) v.tensors.emplace(name, Value::constant(t));
    return v;
}

BackboneValues backbone_trainable(const BackboneCheckpoint& ckpt) {
    BackboneValues v;
    v.config = ckpt.config;
    for (const auto& [name, t] : ckpt.params.items) v.tensors.emplace(name, Value::param(t));
    return v;
}

std::vector<const Image*> batch_view(const LabeledDataset& ds, const std::vector<std::size_t>& indices) {
    std::vector<const Image*> out;
    out.reserve(indices.size());
    for (std::size_t i : indices) out.push_back(&ds.images[i]);
    return out;
}

namespace {

Tensor patch_matrix(const std::vector<const Image*>& batch, const BackboneConfig& c) {
    std::size_t np = c.patch_count(), pd = c.patch_dim();
    Tensor out({batch.size() * np, pd});
    std::size_t row = 0;
    for (const Image* img : batch) {
        if (img->height != c.image_side || img->width != c.image_side || img->channels != c.channels)
            throw contract_error("image shape does not match backbone config");
        for (int py = 0; py < c.patches_per_side(); ++py)
            for (int px = 0; px < c.patches_per_side(); ++px) {
                double* dst = out.data.data() + (row++) * pd;
                std::size_t k = 0;
                for (int y = 0; y < c.patch_size; ++y)
                    for (int x = 0; x < c.patch_size; ++x)
                        for (int ch = 0; ch < c.channels; ++ch)
                            dst[k++] = img->at(py * c.patch_size + y, px * c.patch_size + x, ch);
            }
    }
    return out;
}

void validate_prompts(const std::vector<PrefixPrompt>& prompts, const BackboneConfig& c,
                      std::size_t batch) {
    if (prompts.empty()) return;
    if (prompts.size() != batch)
        throw contract_error("one prefix prompt per sample required (got " +
                             std::to_string(prompts.size()) + " for batch " + std::to_string(batch) + ")");
    for (const auto& p : prompts) {
        if (p.layers.size() != prompts[0].layers.size() || p.layers != prompts[0].layers)
            throw contract_error("prompts must target the same layers across the batch");
        for (std::size_t li = 0; li < p.layers.size(); ++li) {
            if (p.layers[li] < 0 || p.layers[li] >= c.layers)
                throw contract_error("prompt layer index " + std::to_string(p.layers[li]) +
                                     " outside backbone depth " + std::to_string(c.layers));
            if (li > 0 && p.layers[li] <= p.layers[li - 1])
                throw contract_error("prompt layer indices must be strictly increasing");
            const auto& shp = p.pk[li].val().shape;
            if (shp.size() != 3 || shp[0] != static_cast<std::size_t>(c.heads) || shp[1] < 1 ||
                shp[2] != static_cast<std::size_t>(c.head_dim()))
                throw contract_error("prompt tensor shape must be (heads, l, head_dim)");
            if (!p.pk[li].val().all_finite() || !p.pv[li].val().all_finite())
                throw contract_error("prompt tensors must be finite");
        }
    }
}

}  // namespace

ForwardResult vit_forward(const BackboneValues& bb, const std::vector<const Image*>& batch,
                          const std::vector<PrefixPrompt>& prompts, ForwardTrace* trace) {
    const BackboneConfig& c = bb.config;
    if (batch.empty()) throw contract_error("vit_forward: empty batch");
    validate_prompts(prompts, c, batch.size());

    std::size_t B = batch.size();
    std::size_t np = c.patch_count(), nt = c.token_count();
    std::size_t hd = c.head_dim();

    // patch embed
    Value patches = Value::constant(patch_matrix(batch, c));
    Value embedded = add_rowvec(matmul(patches, bb.at("patch/w")), bb.at("patch/b"));

    // per-sample mean patch embedding (one of the optional match sources)
    Tensor avg({B, B * np});
    for (std::size_t b = 0; b < B; ++b)
        for (std::size_t j = 0; j < np; ++j) avg.data[b * (B * np) + b * np + j] = 1.0 / double(np);
    Value patch_mean = matmul(Value::constant(avg), embedded);

    // prepend class token, add positions
    std::vector<Value> tok_parts;
    tok_parts.reserve(2 * B);
    for (std::size_t b = 0; b < B; ++b) {
        tok_parts.push_back(bb.at("cls"));
        tok_parts.push_back(row_slice(embedded, b * np, (b + 1) * np));
    }
    Value x = add_block_rows(concat_rows(tok_parts), bb.at("pos"), B);

    double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    for (int layer = 0; layer < c.layers; ++layer) {
        std::string pfx = "layer" + std::to_string(layer) + "/";
        Value h = layer_norm_rows(x, bb.at(pfx + "ln1/g"), bb.at(pfx + "ln1/b"), 1e-5);
        Value Q = add_rowvec(matmul(h, bb.at(pfx + "wq")), bb.at(pfx + "bq"));
        Value K = add_rowvec(matmul(h, bb.at(pfx + "wk")), bb.at(pfx + "bk"));
        Value V = add_rowvec(matmul(h, bb.at(pfx + "wv")), bb.at(pfx + "bv"));

        // which slot of the prompt applies to this layer, if any
        int prompt_slot = -1;
        if (!prompts.empty()) {
            const auto& layers = prompts[0].layers;
            auto it = std::find(layers.begin(), layers.end(), layer);
            if (it != layers.end()) prompt_slot = static_cast<int>(it - layers.begin());
        }

        std::vector<Value> sample_outs;
        sample_outs.reserve(B);
        for (std::size_t b = 0; b < B; ++b) {
            Value Qb = row_slice(Q, b * nt, (b + 1) * nt);
            Value Kb = row_slice(K, b * nt, (b + 1) * nt);
            Value Vb = row_slice(V, b * nt, (b + 1) * nt);
            Value pkb, pvb;
            std::size_t l = 0;
            if (prompt_slot >= 0) {
                const auto& shp = prompts[b].pk[prompt_slot].val().shape;
                l = shp[1];
                pkb = reshape(prompts[b].pk[prompt_slot], {shp[0] * l, hd});
                pvb = reshape(prompts[b].pv[prompt_slot], {shp[0] * l, hd});
            }
            std::vector<Value> head_outs;
            head_outs.reserve(c.heads);
            for (int hh = 0; hh < c.heads; ++hh) {
                Value Qh = col_slice(Qb, hh * hd, (hh + 1) * hd);
                Value Kh = col_slice(Kb, hh * hd, (hh + 1) * hd);
                Value Vh = col_slice(Vb, hh * hd, (hh + 1) * hd);
                if (prompt_slot >= 0) {
                    Kh = concat_rows({row_slice(pkb, hh * l, (hh + 1) * l), Kh});
                    Vh = concat_rows({row_slice(pvb, hh * l, (hh + 1) * l), Vh});
                }
                Value scores = scale(matmul(Qh, transpose(Kh)), inv_sqrt_hd);
                Value alpha = softmax_rows(scores);
                if (trace) {
                    ForwardTrace::ScoreStat st;
                    st.layer = layer;
                    st.head = hh;
                    st.sample = static_cast<int>(b);
                    st.rows = alpha.val().rows();
                    st.cols = alpha.val().cols();
                    double mn = 2.0, mx = -1.0;
                    for (std::size_t r = 0; r < st.rows; ++r) {
                        double s = 0.0;
                        for (std::size_t cc = 0; cc < st.cols; ++cc) s += alpha.val()(r, cc);
                        mn = std::min(mn, s);
                        mx = std::max(mx, s);
                    }
                    st.row_sum_min = mn;
                    st.row_sum_max = mx;
                    trace->stats.push_back(st);
                }
                head_outs.push_back(matmul(alpha, Vh));
            }
            sample_outs.push_back(concat_cols(head_outs));
        }
        Value attn = concat_rows(sample_outs);
        x = add(x, add_rowvec(matmul(attn, bb.at(pfx + "wo")), bb.at(pfx + "bo")));

        Value h2 = layer_norm_rows(x, bb.at(pfx + "ln2/g"), bb.at(pfx + "ln2/b"), 1e-5);
        Value m = add_rowvec(matmul(gelu(add_rowvec(matmul(h2, bb.at(pfx + "mlp/w1")), bb.at(pfx + "mlp/b1"))),
                                    bb.at(pfx + "mlp/w2")),
                             bb.at(pfx + "mlp/b2"));
        x = add(x, m);
    }

    std::vector<std::size_t> cls_rows(B);
    for (std::size_t b = 0; b < B; ++b) cls_rows[b] = b * nt;
    ForwardResult result;
    result.cls_pre_ln = gather_rows(x, cls_rows);
    result.features = layer_norm_rows(result.cls_pre_ln, bb.at("final_ln/g"), bb.at("final_ln/b"), 1e-5);
    result.patch_mean = patch_mean;
    return result;
}

Tensor forward_plain(const BackboneCheckpoint& ckpt, const std::vector<const Image*>& batch,
                     ForwardTrace* trace) {
    return vit_forward(backbone_constants(ckpt), batch, {}, trace).features.val();
}

Tensor forward_prompted(const BackboneCheckpoint& ckpt, const std::vector<const Image*>& batch,
                        const std::vector<PrefixPrompt>& prompts, ForwardTrace* trace) {
    return vit_forward(backbone_constants(ckpt), batch, prompts, trace).features.val();
}

PretrainResult pretrain_base_full(const BackboneConfig& config, const LabeledDataset& base_dataset,
                                  const PretrainOptions& options, const std::vector<int>& base_original_ids,
                                  const std::vector<int>& cl_original_ids) {
    config.validate();
    base_dataset.validate();
    if (!base_original_ids.empty() && !cl_original_ids.empty()) {
        for (int b : base_original_ids)
            for (int c : cl_original_ids)
                if (b == c)
                    throw contract_error("pretraining base class " + std::to_string(b) +
                                         " overlaps the continual class list");
    }

    BackboneCheckpoint ckpt = init_backbone(config, options.seed);
    std::size_t D = config.dim, W = base_dataset.class_count;
    Rng head_rng(derive_seed(options.seed, {seed_tag("pretrain_head")}));
    Tensor head_w({D, W});
    for (double& v : head_w.data) v = 0.02 * head_rng.normal();
    Tensor head_b({W});

    std::map<std::string, AdamState> adam;
    OptimizerConfig opt;
    opt.base_lr = options.lr;

    std::vector<std::size_t> all_cols(W);
    std::iota(all_cols.begin(), all_cols.end(), 0);

    long step = 0;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        std::vector<std::size_t> order(base_dataset.size());
        std::iota(order.begin(), order.end(), 0);
        Rng rng(derive_seed(options.seed, {seed_tag("pretrain_epoch"), static_cast<std::uint64_t>(epoch)}));
        rng.shuffle(order);

        for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
            std::size_t end = std::min(order.size(), start + options.batch_size);
            std::vector<std::size_t> idx(order.begin() + start, order.begin() + end);
            auto batch = batch_view(base_dataset, idx);

            BackboneValues bb = backbone_trainable(ckpt);
            Value hw = Value::param(head_w);
            Value hb = Value::param(head_b);
            Value features = vit_forward(bb, batch).features;
            Value logits = add_rowvec(matmul(features, hw), hb);

            std::vector<std::size_t> label_cols;
            label_cols.reserve(idx.size());
            for (std::size_t i : idx) label_cols.push_back(static_cast<std::size_t>(base_dataset.labels[i]));
            Value loss = masked_cross_entropy(logits, label_cols, all_cols);
            if (!std::isfinite(loss.val()[0]))
                throw training_diverged("pretraining loss is not finite at step " + std::to_string(step));
            backward(loss);

            for (auto& [name, value] : bb.tensors) {
                if (!value.node_->grad_alloc) continue;
                Tensor& data = ckpt.params.items.at(name);
                adam_step(data, adam[name], value.grad(), options.lr, opt);
            }
            if (hw.node_->grad_alloc) adam_step(head_w, adam["head/w"], hw.grad(), options.lr, opt);
            if (hb.node_->grad_alloc) adam_step(head_b, adam["head/b"], hb.grad(), options.lr, opt);
            ++step;
        }
    }

    ckpt.base_class_count = base_dataset.class_count;
    PretrainResult result;
    result.head_w = head_w;
    result.head_b = head_b;
    result.checkpoint = std::move(ckpt);
    result.final_train_accuracy =
        pretrain_train_accuracy(result.checkpoint, result.head_w, result.head_b, base_dataset);
    return result;
}

BackboneCheckpoint pretrain_base(const BackboneConfig& config, const LabeledDataset& base_dataset,
                                 const PretrainOptions& options, const std::vector<int>& base_original_ids,
                                 const std::vector<int>& cl_original_ids) {
    return pretrain_base_full(config, base_dataset, options, base_original_ids, cl_original_ids).checkpoint;
}

double pretrain_train_accuracy(const BackboneCheckpoint& ckpt, const Tensor& head_w, const Tensor& head_b,
                               const LabeledDataset& ds) {
    std::size_t correct = 0;
    const std::size_t eval_batch = 64;
    for (std::size_t start = 0; start < ds.size(); start += eval_batch) {
        std::size_t end = std::min(ds.size(), start + eval_batch);
        std::vector<std::size_t> idx(end - start);
        std::iota(idx.begin(), idx.end(), start);
        Tensor f = forward_plain(ckpt, batch_view(ds, idx));
        for (std::size_t r = 0; r < idx.size(); ++r) {
            std::size_t best = 0;
            double best_v = -1e300;
            for (std::size_t c = 0; c < head_b.numel(); ++c) {
                double v = head_b[c];
                for (std::size_t k = 0; k < f.cols(); ++k) v += f(r, k) * head_w(k, c);
                if (v > best_v) {
                    best_v = v;
                    best = c;
                }
            }
            if (static_cast<int>(best) == ds.labels[idx[r]]) ++correct;
        }
    }
    return static_cast<double>(correct) / static_cast<double>(ds.size());
}

namespace {

Tensor config_tensor(const BackboneConfig& c) {
    return Tensor::vec({static_cast<double>(c.layers), static_cast<double>(c.heads),
                        static_cast<double>(c.dim), static_cast<double>(c.patch_size),
                        static_cast<double>(c.image_side), static_cast<double>(c.channels), c.mlp_ratio});
}

BackboneConfig config_from_tensor(const Tensor& t) {
    if (t.numel() != 7) throw io_error("checkpoint meta/config has unexpected size");
    BackboneConfig c;
    c.layers = static_cast<int>(t[0]);
    c.heads = static_cast<int>(t[1]);
    c.dim = static_cast<int>(t[2]);
    c.patch_size = static_cast<int>(t[3]);
    c.image_side = static_cast<int>(t[4]);
    c.channels = static_cast<int>(t[5]);
    c.mlp_ratio = t[6];
    return c;
}

}  // namespace

void save_checkpoint(const BackboneCheckpoint& ckpt, const std::filesystem::path& path) {
    NamedTensors out = ckpt.params;
    out.put("meta/config", config_tensor(ckpt.config));
    out.put("meta/base_class_count", Tensor::scalar(ckpt.base_class_count));
    save_container(path, out);
}

BackboneCheckpoint load_checkpoint(const std::filesystem::path& path) {
    NamedTensors in = load_container(path);
    BackboneCheckpoint ckpt;
    ckpt.config = config_from_tensor(in.at("meta/config"));
    ckpt.config.validate();
    ckpt.base_class_count = static_cast<int>(in.at("meta/base_class_count")[0]);
    in.items.erase("meta/config");
    in.items.erase("meta/base_class_count");

    auto expected = backbone_param_shapes(ckpt.config);
    for (const auto& [name, shape] : expected) {
        if (!in.has(name)) throw io_error("checkpoint missing tensor: " + name);
        if (in.at(name).shape != shape)
            throw io_error("checkpoint tensor " + name + " has shape " + in.at(name).shape_str() +
                           ", config requires a different shape");
        if (!in.at(name).all_finite()) throw io_error("checkpoint tensor " + name + " has non-finite values");
    }
    for (const auto& [name, t] : in.items)
        if (!expected.count(name)) throw io_error("checkpoint has unexpected tensor: " + name);
    ckpt.params = std::move(in);
    return ckpt;
}

BackboneCheckpoint load_checkpoint(const std::filesystem::path& path, const BackboneConfig& expected) {
    BackboneCheckpoint ckpt = load_checkpoint(path);
    if (!(ckpt.config == expected))
        throw io_error("checkpoint config disagrees with the declared config: " + path.string());
    return ckpt;
}

std::uint64_t backbone_hash(const BackboneCheckpoint& ckpt) {
    std::uint64_t h = 0x9e3779b97f4a7c15ULL;
    for (const auto& [name, t] : ckpt.params.items) {
        h = splitmix64(h ^ seed_tag(name));
        h = splitmix64(h ^ tensor_hash(t));
    }
    return h;
}

}  // namespace prol
