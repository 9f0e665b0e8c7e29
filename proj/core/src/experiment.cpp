#include "prol/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "prol/errors.hpp"
#include "prol/report.hpp"
#include "prol/rng.hpp"

namespace prol {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

struct DataBundle {
    LabeledDataset train, test;
    TaskSequence tasks;
    std::vector<std::vector<std::size_t>> test_groups;
};

LabeledDataset continual_dataset(const ExperimentConfig& cfg) {
    if (cfg.dataset == "manifest") return load_manifest(cfg.manifest_path);
    LabeledDataset full = make_synthetic(cfg.base_classes + cfg.classes, cfg.per_class,
                                         cfg.backbone.image_side, cfg.separation, cfg.data_seed);
    std::vector<int> cl_ids(cfg.classes);
    std::iota(cl_ids.begin(), cl_ids.end(), cfg.base_classes);
    return subset_classes(full, cl_ids, /*relabel=*/true);
}

DataBundle build_data(const ExperimentConfig& cfg, std::uint64_t seed) {
    DataBundle d;
    LabeledDataset cl = continual_dataset(cfg);
    std::tie(d.train, d.test) = split_train_test(cl, cfg.test_fraction, cfg.data_seed);
    d.tasks = split_tasks(d.train, cfg.tasks, seed);
    if (d.test.size() > 0) d.test_groups = group_by_tasks(d.test, d.tasks);
    return d;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

LearnerConfig ExperimentConfig::learner_config(std::uint64_t seed) const {
    LearnerConfig lc;
    lc.prompt = prompt;
    lc.weights = weights;
    lc.optimizer = optimizer;
    lc.flags = flags;
    lc.hsu_min_lr = hsu_min_lr;
    lc.hsu_t_max = hsu_t_max;
    lc.loss_thres = loss_thres;
    lc.standardize_gen = standardize_gen;
    lc.seed = seed;
    return lc;
}

const std::vector<std::string>& ablation_presets() {
    static const std::vector<std::string> presets = {"ft", "ft_g", "ft_g_ss_k", "ft_g_ss_k_hsu", "full"};
    return presets;
}

AblationFlags preset_flags(const std::string& name) {
    AblationFlags f;
    if (name == "ft") {
        f = {false, false, false, false, false, false};
    } else if (name == "ft_g") {
        f = {true, false, false, false, false, false};
    } else if (name == "ft_g_ss_k") {
        f = {true, true, true, true, false, false};
    } else if (name == "ft_g_ss_k_hsu") {
        f = {true, true, true, true, true, false};
    } else if (name == "full") {
        f = {true, true, true, true, true, true};
    } else {
        throw contract_error("unknown ablation preset: " + name);
    }
    return f;
}

ValidationResult validate_config(const ExperimentConfig& input) {
    ValidationResult r;
    r.config = input;
    auto err = [&r](const std::string& m) { r.errors.push_back(m); };

    ExperimentConfig& c = r.config;
    if (c.dataset != "synthetic" && c.dataset != "manifest")
        err("dataset must be 'synthetic' or 'manifest'");
    if (c.dataset == "manifest" && c.manifest_path.empty())
        err("manifest dataset requires manifest_path");
    if (c.dataset == "synthetic") {
        if (c.classes < 2) err("synthetic dataset needs at least 2 continual classes");
        if (c.per_class < 2) err("per_class must be >= 2");
        if (!(c.separation > 0.0)) err("separation must be > 0");
        if (c.base_classes < 2) err("base_classes must be >= 2 for pretraining");
    }
    if (!(c.test_fraction > 0.0 && c.test_fraction < 1.0)) err("test_fraction must be in (0, 1)");
    if (c.tasks < 1) err("tasks must be >= 1");
    if (c.dataset == "synthetic" && c.tasks > c.classes) err("tasks cannot exceed the class count");
    if (c.chunk_size < 1) err("chunk_size must be >= 1");
    if (c.seeds.empty()) err("at least one seed required");

    try {
        c.backbone.validate();
    } catch (const contract_error& e) {
        err(e.what());
    }
    try {
        c.prompt.validate(c.backbone.layers);
    } catch (const contract_error& e) {
        err(e.what());
    }
    try {
        c.weights.validate();
    } catch (const contract_error& e) {
        err(e.what());
    }
    try {
        c.flags.validate();
    } catch (const contract_error& e) {
        err(e.what());
    }
    if (c.flags.use_generator && c.prompt.injected_layers.empty())
        err("injected_layers must be non-empty when the generator is enabled");
    if (!(c.optimizer.base_lr > 0.0)) err("lr must be > 0");
    if (c.hsu_min_lr > c.optimizer.base_lr) err("hsu_min_lr cannot exceed the base lr");
    if (c.hsu_t_max < 1) err("hsu_t_max must be >= 1");
    if (!(c.loss_thres > 0.0)) err("loss_thres must be > 0");
    if (c.pretrain_epochs < 0) err("pretrain_epochs must be >= 0");
    if (c.checkpoint.empty()) err("checkpoint path must be set");
    if (c.outdir.empty()) err("outdir must be set");
    return r;
}

namespace {

const std::vector<std::string>& known_keys() {
    static const std::vector<std::string> keys = {
        "dataset", "manifest_path", "classes", "per_class", "separation", "data_seed", "test_fraction",
        "tasks", "chunk_size", "seeds",
        "backbone_layers", "backbone_heads", "backbone_dim", "patch_size", "image_side", "mlp_ratio",
        "checkpoint", "pretrain", "base_classes", "pretrain_epochs", "pretrain_batch", "pretrain_lr",
        "pretrain_seed",
        "prompt_length", "injected_layers", "eps_a", "eps_b", "match_source",
        "lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "loss_thres", "hsu_t_max", "hsu_min_lr",
        "lr", "adam_beta1", "adam_beta2", "adam_eps", "standardize_gen", "ablation",
        "use_generator", "use_scaler_shifter_keys", "use_sim_loss", "use_ort_loss", "use_hsu",
        "use_gen_matrix", "outdir"};
    return keys;
}

}  // namespace

ValidationResult config_from_toml(const TomlTable& table) {
    ValidationResult r;
    ExperimentConfig& c = r.config;

    for (const auto& [key, _] : table) {
        if (std::find(known_keys().begin(), known_keys().end(), key) == known_keys().end())
            r.errors.push_back("unknown config key: " + key);
    }

    auto present = [&table](const char* key) { return table.count(key) > 0; };
    auto flag_default = [&r](const char* key, const std::string& shown) {
        r.defaults_applied.push_back(std::string(key) + " = " + shown + " (default)");
    };
    auto get_str = [&](const char* key, std::string& dst) {
        if (!present(key)) return flag_default(key, "\"" + dst + "\"");
        const TomlValue& v = table.at(key);
        if (v.kind != TomlValue::Kind::string) {
            r.errors.push_back(std::string(key) + " must be a string");
            return;
        }
        dst = v.s;
    };
    auto get_int = [&](const char* key, int& dst) {
        if (!present(key)) return flag_default(key, std::to_string(dst));
        const TomlValue& v = table.at(key);
        if (v.kind != TomlValue::Kind::integer) {
            r.errors.push_back(std::string(key) + " must be an integer");
            return;
        }
        dst = static_cast<int>(v.i);
    };
    auto get_u64 = [&](const char* key, std::uint64_t& dst) {
        if (!present(key)) return flag_default(key, std::to_string(dst));
        const TomlValue& v = table.at(key);
        if (v.kind != TomlValue::Kind::integer || v.i < 0) {
            r.errors.push_back(std::string(key) + " must be a non-negative integer");
            return;
        }
        dst = static_cast<std::uint64_t>(v.i);
    };
    auto get_num = [&](const char* key, double& dst) {
        if (!present(key)) return flag_default(key, format_double(dst));
        const TomlValue& v = table.at(key);
        if (v.kind != TomlValue::Kind::integer && v.kind != TomlValue::Kind::floating) {
            r.errors.push_back(std::string(key) + " must be a number");
            return;
        }
        dst = v.as_number();
    };
    auto get_bool = [&](const char* key, bool& dst) {
        if (!present(key)) return flag_default(key, dst ? "true" : "false");
        const TomlValue& v = table.at(key);
        if (v.kind != TomlValue::Kind::boolean) {
            r.errors.push_back(std::string(key) + " must be a boolean");
            return;
        }
        dst = v.b;
    };

    get_str("dataset", c.dataset);
    get_str("manifest_path", c.manifest_path);
    get_int("classes", c.classes);
    get_int("per_class", c.per_class);
    get_num("separation", c.separation);
    get_u64("data_seed", c.data_seed);
    get_num("test_fraction", c.test_fraction);
    get_int("tasks", c.tasks);
    get_int("chunk_size", c.chunk_size);
    if (present("seeds")) {
        const TomlValue& v = table.at("seeds");
        if (v.kind != TomlValue::Kind::array) {
            r.errors.push_back("seeds must be an array of integers");
        } else {
            c.seeds.clear();
            for (const auto& e : v.array) {
                if (e.kind != TomlValue::Kind::integer || e.i < 0) {
                    r.errors.push_back("seeds must be non-negative integers");
                    break;
                }
                c.seeds.push_back(static_cast<std::uint64_t>(e.i));
            }
        }
    } else {
        flag_default("seeds", "[1, 2, 3]");
    }
    get_int("backbone_layers", c.backbone.layers);
    get_int("backbone_heads", c.backbone.heads);
    get_int("backbone_dim", c.backbone.dim);
    get_int("patch_size", c.backbone.patch_size);
    get_int("image_side", c.backbone.image_side);
    get_num("mlp_ratio", c.backbone.mlp_ratio);
    get_str("checkpoint", c.checkpoint);
    get_bool("pretrain", c.pretrain);
    get_int("base_classes", c.base_classes);
    get_int("pretrain_epochs", c.pretrain_epochs);
    get_int("pretrain_batch", c.pretrain_batch);
    get_num("pretrain_lr", c.pretrain_lr);
    get_u64("pretrain_seed", c.pretrain_seed);
    get_int("prompt_length", c.prompt.length);
    if (present("injected_layers")) {
        const TomlValue& v = table.at("injected_layers");
        if (v.kind != TomlValue::Kind::array) {
            r.errors.push_back("injected_layers must be an array of integers");
        } else {
            c.prompt.injected_layers.clear();
            for (const auto& e : v.array) {
                if (e.kind != TomlValue::Kind::integer) {
                    r.errors.push_back("injected_layers entries must be integers");
                    break;
                }
                c.prompt.injected_layers.push_back(static_cast<int>(e.i));
            }
        }
    } else {
        c.prompt.injected_layers = {0, 1, 2};
        flag_default("injected_layers", "[0, 1, 2]");
    }
    get_num("eps_a", c.prompt.eps_a);
    get_num("eps_b", c.prompt.eps_b);
    {
        std::string source = "class_feature";
        get_str("match_source", source);
        if (source == "class_feature") c.prompt.match_source = MatchSource::class_feature;
        else if (source == "class_token") c.prompt.match_source = MatchSource::class_token;
        else if (source == "patch_embedding") c.prompt.match_source = MatchSource::patch_embedding;
        else r.errors.push_back("match_source must be class_feature, class_token, or patch_embedding");
    }
    get_num("lambda1", c.weights.l1);
    get_num("lambda2", c.weights.l2);
    get_num("lambda3", c.weights.l3);
    get_num("lambda4", c.weights.l4);
    get_num("lambda5", c.weights.l5);
    get_num("loss_thres", c.loss_thres);
    get_int("hsu_t_max", c.hsu_t_max);
    get_num("hsu_min_lr", c.hsu_min_lr);
    get_num("lr", c.optimizer.base_lr);
    get_num("adam_beta1", c.optimizer.beta1);
    get_num("adam_beta2", c.optimizer.beta2);
    get_num("adam_eps", c.optimizer.eps);
    get_bool("standardize_gen", c.standardize_gen);
    get_str("ablation", c.ablation);
    if (c.ablation == "custom") {
        get_bool("use_generator", c.flags.use_generator);
        get_bool("use_scaler_shifter_keys", c.flags.use_scaler_shifter_keys);
        get_bool("use_sim_loss", c.flags.use_sim_loss);
        get_bool("use_ort_loss", c.flags.use_ort_loss);
        get_bool("use_hsu", c.flags.use_hsu);
        get_bool("use_gen_matrix", c.flags.use_gen_matrix);
    } else {
        try {
            c.flags = preset_flags(c.ablation);
        } catch (const contract_error& e) {
            r.errors.push_back(e.what());
        }
    }
    get_str("outdir", c.outdir);

    ValidationResult cross = validate_config(c);
    r.config = cross.config;
    for (auto& e : cross.errors) r.errors.push_back(std::move(e));
    return r;
}

std::string config_to_toml(const ExperimentConfig& c) {
    std::ostringstream o;
    o << "# dataset\n";
    o << "dataset = \"" << toml_escape(c.dataset) << "\"\n";
    o << "manifest_path = \"" << toml_escape(c.manifest_path) << "\"\n";
    o << "classes = " << c.classes << "\n";
    o << "per_class = " << c.per_class << "\n";
    o << "separation = " << format_double(c.separation) << "\n";
    o << "data_seed = " << c.data_seed << "\n";
    o << "test_fraction = " << format_double(c.test_fraction) << "\n";
    o << "\n# protocol\n";
    o << "tasks = " << c.tasks << "\n";
    o << "chunk_size = " << c.chunk_size << "\n";
    o << "seeds = [";
    for (std::size_t i = 0; i < c.seeds.size(); ++i) o << (i ? ", " : "") << c.seeds[i];
    o << "]\n";
    o << "\n# backbone\n";
    o << "backbone_layers = " << c.backbone.layers << "\n";
    o << "backbone_heads = " << c.backbone.heads << "\n";
    o << "backbone_dim = " << c.backbone.dim << "\n";
    o << "patch_size = " << c.backbone.patch_size << "\n";
    o << "image_side = " << c.backbone.image_side << "\n";
    o << "mlp_ratio = " << format_double(c.backbone.mlp_ratio) << "\n";
    o << "checkpoint = \"" << toml_escape(c.checkpoint) << "\"\n";
    o << "\n# pretraining\n";
    o << "pretrain = " << (c.pretrain ? "true" : "false") << "\n";
    o << "base_classes = " << c.base_classes << "\n";
    o << "pretrain_epochs = " << c.pretrain_epochs << "\n";
    o << "pretrain_batch = " << c.pretrain_batch << "\n";
    o << "pretrain_lr = " << format_double(c.pretrain_lr) << "\n";
    o << "pretrain_seed = " << c.pretrain_seed << "\n";
    o << "\n# prompts\n";
    o << "prompt_length = " << c.prompt.length << "\n";
    o << "injected_layers = [";
    for (std::size_t i = 0; i < c.prompt.injected_layers.size(); ++i)
        o << (i ? ", " : "") << c.prompt.injected_layers[i];
    o << "]\n";
    o << "eps_a = " << format_double(c.prompt.eps_a) << "\n";
    o << "eps_b = " << format_double(c.prompt.eps_b) << "\n";
    const char* source = c.prompt.match_source == MatchSource::class_feature ? "class_feature"
                         : c.prompt.match_source == MatchSource::class_token ? "class_token"
                                                                             : "patch_embedding";
    o << "match_source = \"" << source << "\"\n";
    o << "\n# losses and schedule\n";
    o << "lambda1 = " << format_double(c.weights.l1) << "\n";
    o << "lambda2 = " << format_double(c.weights.l2) << "\n";
    o << "lambda3 = " << format_double(c.weights.l3) << "\n";
    o << "lambda4 = " << format_double(c.weights.l4) << "\n";
    o << "lambda5 = " << format_double(c.weights.l5) << "\n";
    o << "loss_thres = " << format_double(c.loss_thres) << "\n";
    o << "hsu_t_max = " << c.hsu_t_max << "\n";
    o << "hsu_min_lr = " << format_double(c.hsu_min_lr) << "\n";
    o << "\n# optimizer\n";
    o << "lr = " << format_double(c.optimizer.base_lr) << "\n";
    o << "adam_beta1 = " << format_double(c.optimizer.beta1) << "\n";
    o << "adam_beta2 = " << format_double(c.optimizer.beta2) << "\n";
    o << "adam_eps = " << format_double(c.optimizer.eps) << "\n";
    o << "standardize_gen = " << (c.standardize_gen ? "true" : "false") << "\n";
    o << "\n# ablation\n";
    o << "ablation = \"" << toml_escape(c.ablation) << "\"\n";
    o << "use_generator = " << (c.flags.use_generator ? "true" : "false") << "\n";
    o << "use_scaler_shifter_keys = " << (c.flags.use_scaler_shifter_keys ? "true" : "false") << "\n";
    o << "use_sim_loss = " << (c.flags.use_sim_loss ? "true" : "false") << "\n";
    o << "use_ort_loss = " << (c.flags.use_ort_loss ? "true" : "false") << "\n";
    o << "use_hsu = " << (c.flags.use_hsu ? "true" : "false") << "\n";
    o << "use_gen_matrix = " << (c.flags.use_gen_matrix ? "true" : "false") << "\n";
    o << "\noutdir = \"" << toml_escape(c.outdir) << "\"\n";
    return o.str();
}

std::string config_hash(const ExperimentConfig& config) {
    std::string text = config_to_toml(config);
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

double run_pretrain(const ExperimentConfig& cfg) {
    if (cfg.dataset != "synthetic")
        throw contract_error("pretraining builds its base set from the synthetic generator; "
                             "manifest runs need an existing checkpoint");
    LabeledDataset full = make_synthetic(cfg.base_classes + cfg.classes, cfg.per_class,
                                         cfg.backbone.image_side, cfg.separation, cfg.data_seed);
    std::vector<int> base_ids(cfg.base_classes), cl_ids(cfg.classes);
    std::iota(base_ids.begin(), base_ids.end(), 0);
    std::iota(cl_ids.begin(), cl_ids.end(), cfg.base_classes);
    LabeledDataset base = subset_classes(full, base_ids, /*relabel=*/true);

    PretrainOptions opts;
    opts.epochs = cfg.pretrain_epochs;
    opts.lr = cfg.pretrain_lr;
    opts.batch_size = cfg.pretrain_batch;
    opts.seed = cfg.pretrain_seed;
    PretrainResult pr = pretrain_base_full(cfg.backbone, base, opts, base_ids, cl_ids);
    auto path = std::filesystem::path(cfg.checkpoint);
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    save_checkpoint(pr.checkpoint, path);
    return pr.final_train_accuracy;
}

BackboneCheckpoint prepare_backbone(const ExperimentConfig& cfg) {
    if (cfg.pretrain || !std::filesystem::exists(cfg.checkpoint)) {
        if (!cfg.pretrain && !std::filesystem::exists(cfg.checkpoint))
            throw io_error("backbone checkpoint not found: " + cfg.checkpoint +
                           " (run the pretrain command or set pretrain = true)");
        run_pretrain(cfg);
    }
    return load_checkpoint(cfg.checkpoint, cfg.backbone);
}

SeedRunArtifacts run_single_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const BackboneCheckpoint& backbone,
                                 const std::filesystem::path& seed_dir) {
    std::filesystem::create_directories(seed_dir / "plots");
    DataBundle data = build_data(cfg, seed);

    SeedRunArtifacts art;
    art.final_state = make_learner(backbone, cfg.learner_config(seed));
    art.backbone_hash_before = backbone_hash(art.final_state.backbone);
    art.result.seed = seed;
    art.result.dir = seed_dir;
    art.result.ledger = MetricsLedger(cfg.tasks);

    StreamSession session(data.train, data.tasks, cfg.chunk_size, seed);
    std::ofstream log(seed_dir / "train.log.jsonl");
    if (!log) throw io_error("cannot write training log in " + seed_dir.string());

    for (int t = 1; t <= cfg.tasks; ++t) {
        ChunkStream stream = session.open_task(t);
        auto t0 = Clock::now();
        train_task(art.final_state, t, data.train, stream, &log);
        auto t1 = Clock::now();

        art.generator_hash_after_task.push_back(generator_hash(art.final_state));
        for (int c : art.final_state.registry.order()) {
            const ClassState& cs = art.final_state.registry.at(c);
            for (const Tensor* a : {&cs.a_k, &cs.a_v})
                for (double v : a->data)
                    if (v < 1.0 - cfg.prompt.eps_a - 1e-12 || v > 1.0 + cfg.prompt.eps_a + 1e-12)
                        art.clamp_violation = true;
            for (const Tensor* b : {&cs.b_k, &cs.b_v})
                for (double v : b->data)
                    if (v < -cfg.prompt.eps_b - 1e-12 || v > cfg.prompt.eps_b + 1e-12)
                        art.clamp_violation = true;
        }

        auto accs = evaluate_after_task(art.final_state, t, data.test, data.test_groups);
        auto t2 = Clock::now();
        art.result.ledger.add_column(accs);
        art.result.timing.push_back(make_timing(t, data.tasks.task(t).sample_indices.size(),
                                                seconds_between(t0, t1), seconds_between(t1, t2)));
        // keep partial results on disk after every task
        write_ledger_csv(seed_dir / "ledger.csv", art.result.ledger);
    }
    art.backbone_hash_after = backbone_hash(art.final_state.backbone);

    for (int t = 1; t <= cfg.tasks; ++t) art.result.aa.push_back(aa_at(art.result.ledger, t));
    art.result.faa = faa(art.result.ledger);
    art.result.caa = caa(art.result.ledger);
    art.result.ffm = cfg.tasks >= 2 ? ffm(art.result.ledger) : 0.0;

    write_metrics_json(seed_dir / "metrics.json", art.result.faa, art.result.caa, art.result.ffm,
                       art.result.aa);
    write_timing_json(seed_dir / "timing.json", art.result.timing);
    {
        std::ofstream cfg_copy(seed_dir / "config.toml");
        cfg_copy << config_to_toml(cfg);
    }
    {
        PlotSeries series;
        for (int t = 1; t <= cfg.tasks; ++t) {
            series.x.push_back(t);
            series.mean.push_back(art.result.aa[t - 1]);
        }
        write_line_plot_svg(seed_dir / "plots" / "aa_curve.svg", "Average accuracy after each task",
                            "task", "AA (%)", series);
        PlotSeries fseries;
        for (int t = 2; t <= cfg.tasks; ++t) {
            fseries.x.push_back(t);
            fseries.mean.push_back(ffm_at(art.result.ledger, t));
        }
        write_line_plot_svg(seed_dir / "plots" / "ffm_curve.svg", "Forgetting after each task", "task",
                            "FFM (%)", fseries);
    }
    return art;
}

RunResult run_experiment(const ExperimentConfig& input) {
    ValidationResult vr = validate_config(input);
    if (!vr.ok()) {
        std::string joined = "invalid experiment config:";
        for (const auto& e : vr.errors) joined += "\n  - " + e;
        throw contract_error(joined);
    }
    const ExperimentConfig& cfg = vr.config;

    std::filesystem::path outdir(cfg.outdir);
    std::filesystem::create_directories(outdir / "plots");
    {
        std::ofstream cfg_copy(outdir / "config.toml");
        cfg_copy << config_to_toml(cfg);
    }
    BackboneCheckpoint backbone = prepare_backbone(cfg);

    RunResult result;
    result.outdir = outdir;
    result.hash = config_hash(cfg);
    for (std::uint64_t seed : cfg.seeds) {
        auto art = run_single_seed(cfg, seed, backbone, outdir / ("seed" + std::to_string(seed)));
        result.seeds.push_back(std::move(art.result));
    }

    std::vector<double> faas, caas, ffms;
    for (const auto& s : result.seeds) {
        faas.push_back(s.faa);
        caas.push_back(s.caa);
        ffms.push_back(s.ffm);
    }
    result.faa_mean = mean_of(faas);
    result.faa_std = stddev_of(faas);
    result.caa_mean = mean_of(caas);
    result.caa_std = stddev_of(caas);
    result.ffm_mean = mean_of(ffms);
    result.ffm_std = stddev_of(ffms);

    // aggregate artifacts
    nlohmann::ordered_json agg;
    agg["config_hash"] = result.hash;
    agg["seeds"] = cfg.seeds;
    agg["FAA_mean"] = result.faa_mean;
    agg["FAA_std"] = result.faa_std;
    agg["CAA_mean"] = result.caa_mean;
    agg["CAA_std"] = result.caa_std;
    agg["FFM_mean"] = result.ffm_mean;
    agg["FFM_std"] = result.ffm_std;
    agg["FAA_per_seed"] = faas;
    agg["FFM_per_seed"] = ffms;
    {
        std::ofstream out(outdir / "aggregate.json");
        out << agg.dump(2) << "\n";
    }

    std::vector<CurveRow> rows;
    for (const auto& s : result.seeds) rows.push_back({"seed" + std::to_string(s.seed), s.aa});
    CurveRow mean_row{"mean", {}};
    for (int t = 0; t < cfg.tasks; ++t) {
        std::vector<double> vals;
        for (const auto& s : result.seeds) vals.push_back(s.aa[t]);
        mean_row.values.push_back(mean_of(vals));
    }
    rows.push_back(mean_row);
    write_accuracy_curve_csv(outdir / "accuracy_curve.csv", cfg.tasks, rows);

    PlotSeries aa_series;
    for (int t = 1; t <= cfg.tasks; ++t) {
        std::vector<double> vals;
        for (const auto& s : result.seeds) vals.push_back(s.aa[t - 1]);
        aa_series.x.push_back(t);
        aa_series.mean.push_back(mean_of(vals));
        aa_series.band.push_back(stddev_of(vals));
    }
    write_line_plot_svg(outdir / "plots" / "aa_curve.svg", "Average accuracy (mean over seeds)", "task",
                        "AA (%)", aa_series);
    PlotSeries ffm_series;
    for (int t = 2; t <= cfg.tasks; ++t) {
        std::vector<double> vals;
        for (const auto& s : result.seeds) vals.push_back(ffm_at(s.ledger, t));
        ffm_series.x.push_back(t);
        ffm_series.mean.push_back(mean_of(vals));
        ffm_series.band.push_back(stddev_of(vals));
    }
    write_line_plot_svg(outdir / "plots" / "ffm_curve.svg", "Forgetting (mean over seeds)", "task",
                        "FFM (%)", ffm_series);
    return result;
}

const GridRow& best_grid_row(const std::vector<GridRow>& rows) {
    if (rows.empty()) throw contract_error("best_grid_row: no rows");
    const GridRow* best = &rows.front();
    for (const auto& row : rows) {
        if (row.faa > best->faa ||
            (row.faa == best->faa &&
             (row.ffm < best->ffm || (row.ffm == best->ffm && row.lr < best->lr))))
            best = &row;
    }
    return *best;
}

GridResult grid_search_lr(const ExperimentConfig& input, const std::vector<double>& grid) {
    if (grid.empty()) throw contract_error("grid_search_lr: empty grid");
    GridResult gr;
    gr.outdir = std::filesystem::path(input.outdir) / "grid";
    std::filesystem::create_directories(gr.outdir);

    for (double lr : grid) {
        ExperimentConfig cfg = input;
        cfg.optimizer.base_lr = lr;
        cfg.seeds = {input.seeds.front()};
        std::ostringstream dir;
        dir << "lr_" << lr;
        cfg.outdir = (gr.outdir / dir.str()).string();
        RunResult run = run_experiment(cfg);
        gr.rows.push_back({lr, run.faa_mean, run.caa_mean, run.ffm_mean});
    }

    gr.best_lr = best_grid_row(gr.rows).lr;

    std::ofstream csv(gr.outdir / "grid.csv");
    csv << "lr,FAA,CAA,FFM\n";
    for (const auto& row : gr.rows)
        csv << row.lr << "," << row.faa << "," << row.caa << "," << row.ffm << "\n";
    csv << "# best_lr = " << gr.best_lr << "\n";
    return gr;
}

AblationResult run_ablation(const ExperimentConfig& input, const std::vector<std::string>& presets) {
    AblationResult ar;
    ar.outdir = std::filesystem::path(input.outdir) / "ablate";
    std::filesystem::create_directories(ar.outdir);

    for (const std::string& name : presets) {
        ExperimentConfig cfg = input;
        cfg.ablation = name;
        cfg.flags = preset_flags(name);
        cfg.outdir = (ar.outdir / name).string();
        ar.runs.emplace_back(name, run_experiment(cfg));
    }

    std::ofstream csv(ar.outdir / "ablation.csv");
    csv << "preset,FAA_mean,FAA_std,CAA_mean,FFM_mean,FFM_std\n";
    for (const auto& [name, run] : ar.runs)
        csv << name << "," << run.faa_mean << "," << run.faa_std << "," << run.caa_mean << ","
            << run.ffm_mean << "," << run.ffm_std << "\n";

    std::vector<CurveRow> rows;
    for (const auto& [name, run] : ar.runs) {
        CurveRow row{name, {}};
        for (int t = 0; t < input.tasks; ++t) {
            std::vector<double> vals;
            for (const auto& s : run.seeds) vals.push_back(s.aa[t]);
            row.values.push_back(mean_of(vals));
        }
        rows.push_back(row);
    }
    write_accuracy_curve_csv(ar.outdir / "accuracy_curve.csv", input.tasks, rows);
    return ar;
}

double timed_training_run(const ExperimentConfig& input, std::uint64_t seed,
                          const BackboneCheckpoint& backbone) {
    ExperimentConfig cfg = input;
    DataBundle data;
    LabeledDataset cl = continual_dataset(cfg);
    data.train = std::move(cl);  // no held-out split: time every sample
    data.tasks = split_tasks(data.train, cfg.tasks, seed);

    LearnerState state = make_learner(backbone, cfg.learner_config(seed));
    StreamSession session(data.train, data.tasks, cfg.chunk_size, seed);
    auto t0 = Clock::now();
    for (int t = 1; t <= cfg.tasks; ++t) {
        ChunkStream stream = session.open_task(t);
        train_task(state, t, data.train, stream, nullptr);
    }
    return seconds_between(t0, Clock::now());
}

}  // namespace prol
