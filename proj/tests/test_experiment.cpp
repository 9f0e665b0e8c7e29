#include <doctest.h>

#include <prol/errors.hpp>
#include <prol/experiment.hpp>
#include <prol/report.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace prol;
namespace fs = std::filesystem;

namespace {

fs::path tmp_dir(const char* name) {
    fs::path dir = fs::temp_directory_path() / "prol_experiment_tests" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// small but complete experiment: 6 continual classes over 2 tasks
ExperimentConfig tiny_experiment(const fs::path& dir) {
    ExperimentConfig cfg;
    cfg.classes = 6;
    cfg.per_class = 15;
    cfg.separation = 4.0;
    cfg.tasks = 2;
    cfg.chunk_size = 6;
    cfg.seeds = {1};
    cfg.backbone.layers = 2;
    cfg.backbone.heads = 2;
    cfg.backbone.dim = 32;
    cfg.backbone.patch_size = 2;
    cfg.backbone.image_side = 8;
    cfg.base_classes = 4;
    cfg.pretrain_epochs = 10;
    cfg.pretrain_batch = 8;
    cfg.pretrain = true;
    cfg.prompt.length = 3;
    cfg.prompt.injected_layers = {0, 1};
    cfg.optimizer.base_lr = 0.05;
    cfg.loss_thres = 0.3;
    cfg.checkpoint = (dir / "bb.ckpt").string();
    cfg.outdir = (dir / "out").string();
    return cfg;
}

}  // namespace

TEST_CASE("toml parser: scalars, arrays, comments, and error reporting") {
    TomlTable t = parse_toml(
        "# a comment\n"
        "alpha = 3\n"
        "beta = 2.5   # trailing comment\n"
        "gamma = \"hello world\"\n"
        "flag = true\n"
        "xs = [1, 2, 3]\n"
        "ys = [0.5, 1.5]\n"
        "negative = -4\n"
        "expo = 1e-3\n");
    CHECK(t.at("alpha").i == 3);
    CHECK(t.at("beta").f == 2.5);
    CHECK(t.at("gamma").s == "hello world");
    CHECK(t.at("flag").b == true);
    REQUIRE(t.at("xs").array.size() == 3);
    CHECK(t.at("xs").array[2].i == 3);
    CHECK(t.at("ys").array[1].f == 1.5);
    CHECK(t.at("negative").i == -4);
    CHECK(t.at("expo").f == doctest::Approx(1e-3));

    CHECK_THROWS_WITH_AS(parse_toml("a = 1\na = 2\n"), doctest::Contains("duplicate"), io_error);
    CHECK_THROWS_WITH_AS(parse_toml("[section]\n"), doctest::Contains("flat"), io_error);
    CHECK_THROWS_AS(parse_toml("a = \n"), io_error);
    CHECK_THROWS_AS(parse_toml("a 1\n"), io_error);
    CHECK_THROWS_AS(parse_toml("a = \"unterminated\n"), io_error);
}

TEST_CASE("config validation: the documented error cases") {
    ExperimentConfig c;
    c.prompt.length = 1;
    auto r = validate_config(c);
    REQUIRE_FALSE(r.ok());
    bool found = false;
    for (const auto& e : r.errors)
        if (e.find("prompt length must be >= 2") != std::string::npos) found = true;
    CHECK(found);

    ExperimentConfig d;
    d.backbone.dim = 65;
    d.backbone.heads = 4;
    auto r2 = validate_config(d);
    REQUIRE_FALSE(r2.ok());
    bool div = false;
    for (const auto& e : r2.errors)
        if (e.find("divisible") != std::string::npos) div = true;
    CHECK(div);

    ExperimentConfig e;
    e.weights.l4 = -1.0;
    CHECK_FALSE(validate_config(e).ok());

    CHECK(validate_config(ExperimentConfig{}).ok());  // defaults are coherent
}

TEST_CASE("config from toml: defaults are filled and flagged, unknown keys rejected") {
    TomlTable t = parse_toml("classes = 8\nlambda2 = 0.01\n");
    ValidationResult r = config_from_toml(t);
    CHECK(r.ok());
    CHECK(r.config.classes == 8);
    CHECK(r.config.weights.l2 == 0.01);
    CHECK(r.config.weights.l5 == 1.0);  // documented default
    bool flagged = false;
    for (const auto& d : r.defaults_applied)
        if (d.find("lambda5") != std::string::npos) flagged = true;
    CHECK(flagged);

    ValidationResult bad = config_from_toml(parse_toml("classez = 8\n"));
    REQUIRE_FALSE(bad.ok());
    CHECK(bad.errors.front().find("unknown config key") != std::string::npos);
}

TEST_CASE("normalized toml round-trips to the same config hash") {
    ExperimentConfig cfg;
    cfg.classes = 12;
    cfg.seeds = {4, 5};
    cfg.weights.l2 = 0.001;
    cfg.ablation = "ft_g";
    cfg.flags = preset_flags("ft_g");
    std::string text = config_to_toml(cfg);
    ValidationResult r = config_from_toml(parse_toml(text));
    REQUIRE(r.ok());
    CHECK(config_hash(r.config) == config_hash(cfg));
    CHECK(r.defaults_applied.empty());  // every key explicit in the emitted file
}

TEST_CASE("ablation presets map onto the component toggles") {
    CHECK_FALSE(preset_flags("ft").use_generator);
    CHECK(preset_flags("ft_g").use_generator);
    CHECK_FALSE(preset_flags("ft_g").use_scaler_shifter_keys);
    CHECK(preset_flags("ft_g_ss_k").use_sim_loss);
    CHECK(preset_flags("ft_g_ss_k").use_ort_loss);
    CHECK_FALSE(preset_flags("ft_g_ss_k").use_hsu);
    CHECK(preset_flags("ft_g_ss_k_hsu").use_hsu);
    CHECK_FALSE(preset_flags("ft_g_ss_k_hsu").use_gen_matrix);
    AblationFlags full = preset_flags("full");
    CHECK((full.use_generator && full.use_scaler_shifter_keys && full.use_sim_loss &&
           full.use_ort_loss && full.use_hsu && full.use_gen_matrix));
    CHECK_THROWS_AS(preset_flags("nope"), contract_error);
    CHECK(ablation_presets().size() == 5);
}

TEST_CASE("grid tie-breaks: FAA first, then lower FFM, then lower lr") {
    std::vector<GridRow> rows = {{0.1, 80.0, 85.0, 5.0}, {0.05, 82.0, 86.0, 6.0}};
    CHECK(best_grid_row(rows).lr == 0.05);
    rows = {{0.1, 82.0, 85.0, 5.0}, {0.05, 82.0, 86.0, 6.0}};
    CHECK(best_grid_row(rows).lr == 0.1);  // equal FAA, lower FFM wins
    rows = {{0.1, 82.0, 85.0, 5.0}, {0.05, 82.0, 86.0, 5.0}};
    CHECK(best_grid_row(rows).lr == 0.05);  // full tie, lower lr wins
    CHECK_THROWS_AS(best_grid_row({}), contract_error);
}

TEST_CASE("accuracy curve table: layout and incomplete-row errors") {
    auto dir = tmp_dir("tables");
    std::vector<CurveRow> rows = {{"seed1", {90, 85, 80, 78, 75, 74, 73, 72, 71, 70}},
                                  {"mean", {90, 85, 80, 78, 75, 74, 73, 72, 71, 70}}};
    write_accuracy_curve_csv(dir / "curve.csv", 10, rows);
    std::string text = slurp(dir / "curve.csv");
    CHECK(text.find("label,task1,task2,task3,task4,task5,task6,task7,task8,task9,task10,AVG") == 0);
    CHECK(text.find("seed1,90,85") != std::string::npos);
    CHECK(text.find(",76.8\n") != std::string::npos);  // AVG column

    std::vector<CurveRow> gap = {{"seed1", {90, 85}}};
    CHECK_THROWS_WITH_AS(write_accuracy_curve_csv(dir / "bad.csv", 10, gap),
                         doctest::Contains("seed1"), contract_error);
}

TEST_CASE("ledger csv round trip and single-point plots") {
    auto dir = tmp_dir("ledger");
    MetricsLedger ledger(2);
    ledger.add_column({90.0});
    ledger.add_column({85.5, 80.25});
    write_ledger_csv(dir / "ledger.csv", ledger);
    std::string text = slurp(dir / "ledger.csv");
    CHECK(text.find("task_i,after_t,accuracy") == 0);
    MetricsLedger back = read_ledger_csv(dir / "ledger.csv", 2);
    CHECK(back.at(1, 1) == 90.0);
    CHECK(back.at(2, 2) == 80.25);

    PlotSeries one;
    one.x = {1.0};
    one.mean = {75.0};
    write_line_plot_svg(dir / "one.svg", "single point", "task", "AA", one);  // no crash
    CHECK(slurp(dir / "one.svg").find("<svg") == 0);
    PlotSeries empty;
    write_line_plot_svg(dir / "empty.svg", "empty", "task", "FFM", empty);
}

TEST_CASE("run_experiment: full artifact tree, determinism, aggregate consistency") {
    auto dir = tmp_dir("run");
    ExperimentConfig cfg = tiny_experiment(dir);
    RunResult run = run_experiment(cfg);

    fs::path seed_dir = fs::path(cfg.outdir) / "seed1";
    for (const char* f : {"config.toml", "metrics.json", "ledger.csv", "timing.json", "train.log.jsonl"})
        CHECK(fs::exists(seed_dir / f));
    CHECK(fs::exists(seed_dir / "plots" / "aa_curve.svg"));
    CHECK(fs::exists(seed_dir / "plots" / "ffm_curve.svg"));
    CHECK(fs::exists(fs::path(cfg.outdir) / "config.toml"));
    CHECK(fs::exists(fs::path(cfg.outdir) / "aggregate.json"));
    CHECK(fs::exists(fs::path(cfg.outdir) / "accuracy_curve.csv"));

    REQUIRE(run.seeds.size() == 1);
    CHECK(run.faa_mean == run.seeds[0].faa);  // aggregate over one seed
    CHECK(run.seeds[0].timing.size() == 2);
    for (const auto& t : run.seeds[0].timing) {
        CHECK(t.train_seconds > 0.0);
        CHECK(t.throughput > 0.0);
    }

    // bit-identical metrics on a rerun with the identical config
    std::string metrics_first = slurp(seed_dir / "metrics.json");
    cfg.pretrain = false;  // reuse the checkpoint written by the first run
    run_experiment(cfg);
    CHECK(slurp(seed_dir / "metrics.json") == metrics_first);
}

TEST_CASE("run_experiment refuses to start without a checkpoint or pretraining") {
    auto dir = tmp_dir("no_ckpt");
    ExperimentConfig cfg = tiny_experiment(dir);
    cfg.pretrain = false;  // checkpoint file does not exist
    CHECK_THROWS_WITH_AS(run_experiment(cfg), doctest::Contains("checkpoint"), io_error);
}

TEST_CASE("grid search: singleton grid selects that rate and persists the table") {
    auto dir = tmp_dir("grid");
    ExperimentConfig cfg = tiny_experiment(dir);
    GridResult gr = grid_search_lr(cfg, {0.05});
    CHECK(gr.best_lr == 0.05);
    REQUIRE(gr.rows.size() == 1);
    CHECK(fs::exists(gr.outdir / "grid.csv"));
    CHECK(slurp(gr.outdir / "grid.csv").find("lr,FAA,CAA,FFM") == 0);
}

TEST_CASE("single-task run: no forgetting metric, plots still emitted") {
    auto dir = tmp_dir("single_task");
    ExperimentConfig cfg = tiny_experiment(dir);
    cfg.tasks = 1;
    RunResult run = run_experiment(cfg);
    CHECK(run.seeds[0].ffm == 0.0);
    CHECK(fs::exists(fs::path(cfg.outdir) / "plots" / "aa_curve.svg"));
}

TEST_CASE("ablation runner produces one run per preset plus comparison tables") {
    auto dir = tmp_dir("ablate");
    ExperimentConfig cfg = tiny_experiment(dir);
    AblationResult ar = run_ablation(cfg, {"ft", "full"});
    REQUIRE(ar.runs.size() == 2);
    CHECK(ar.runs[0].first == "ft");
    CHECK(fs::exists(ar.outdir / "ablation.csv"));
    CHECK(fs::exists(ar.outdir / "accuracy_curve.csv"));
    CHECK(fs::exists(ar.outdir / "ft" / "seed1" / "metrics.json"));
    CHECK(fs::exists(ar.outdir / "full" / "seed1" / "metrics.json"));
}
