#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "prol/errors.hpp"
#include "prol/experiment.hpp"
#include "prol/report.hpp"

namespace fs = std::filesystem;
using namespace prol;

namespace {

struct CliOverrides {
    std::string config_path;
    std::int64_t seed = -1;
    int tasks = -1;
    int chunk_size = -1;
    int prompt_length = -1;
    std::vector<int> layers;
    double lr = -1.0;
    double lthres = -1.0;
    std::string ablation;
    std::string outdir;
    bool pretrain = false;
};

ExperimentConfig resolve_config(const CliOverrides& cli) {
    ValidationResult vr;
    if (!cli.config_path.empty()) {
        vr = config_from_toml(parse_toml_file(cli.config_path));
    } else {
        vr = validate_config(ExperimentConfig{});
    }

    ExperimentConfig cfg = vr.config;
    if (cli.seed >= 0) cfg.seeds = {static_cast<std::uint64_t>(cli.seed)};
    if (cli.tasks > 0) cfg.tasks = cli.tasks;
    if (cli.chunk_size > 0) cfg.chunk_size = cli.chunk_size;
    if (cli.prompt_length > 0) cfg.prompt.length = cli.prompt_length;
    if (!cli.layers.empty()) cfg.prompt.injected_layers = cli.layers;
    if (cli.lr > 0.0) cfg.optimizer.base_lr = cli.lr;
    if (cli.lthres > 0.0) cfg.loss_thres = cli.lthres;
    if (!cli.ablation.empty()) {
        cfg.ablation = cli.ablation;
        if (cli.ablation != "custom") cfg.flags = preset_flags(cli.ablation);
    }
    if (!cli.outdir.empty()) cfg.outdir = cli.outdir;
    if (cli.pretrain) cfg.pretrain = true;

    // PROL_OUTDIR is the default output root for relative paths
    if (const char* root = std::getenv("PROL_OUTDIR")) {
        fs::path out(cfg.outdir);
        if (out.is_relative()) cfg.outdir = (fs::path(root) / out).string();
    }

    ValidationResult final = validate_config(cfg);
    if (!final.ok()) {
        std::ostringstream msg;
        msg << "invalid configuration:";
        for (const auto& e : final.errors) msg << "\n  - " << e;
        throw contract_error(msg.str());
    }
    if (!final.defaults_applied.empty() && !cli.config_path.empty()) {
        // defaults recorded in the normalized config copy written at run time
    }
    return final.config;
}

void print_run_summary(const RunResult& run) {
    std::cout << "results in " << run.outdir.string() << "\n";
    for (const auto& s : run.seeds)
        std::cout << "  seed " << s.seed << ": FAA " << s.faa << "  CAA " << s.caa << "  FFM " << s.ffm
                  << "\n";
    std::cout << "  aggregate: FAA " << run.faa_mean << " +- " << run.faa_std << ", CAA " << run.caa_mean
              << ", FFM " << run.ffm_mean << " +- " << run.ffm_std << "\n";
}

int cmd_report(const std::string& dir_arg) {
    fs::path dir(dir_arg);
    std::vector<SeedResult> seeds;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_directory()) continue;
        std::string name = entry.path().filename().string();
        if (name.rfind("seed", 0) != 0) continue;
        fs::path metrics_path = entry.path() / "metrics.json";
        fs::path ledger_path = entry.path() / "ledger.csv";
        if (!fs::exists(metrics_path) || !fs::exists(ledger_path)) continue;
        std::ifstream mf(metrics_path);
        nlohmann::json m;
        mf >> m;
        SeedResult s;
        s.seed = std::stoull(name.substr(4));
        s.faa = m.at("FAA").get<double>();
        s.caa = m.at("CAA").get<double>();
        s.ffm = m.at("FFM").get<double>();
        s.aa = m.at("AA").get<std::vector<double>>();
        s.ledger = read_ledger_csv(ledger_path, static_cast<int>(s.aa.size()));
        s.dir = entry.path();
        seeds.push_back(std::move(s));
    }
    if (seeds.empty()) {
        std::cerr << "no seed results under " << dir << "\n";
        return 1;
    }
    std::sort(seeds.begin(), seeds.end(),
              [](const SeedResult& a, const SeedResult& b) { return a.seed < b.seed; });
    int tasks = static_cast<int>(seeds.front().aa.size());

    std::vector<CurveRow> rows;
    for (const auto& s : seeds) rows.push_back({"seed" + std::to_string(s.seed), s.aa});
    CurveRow mean_row{"mean", {}};
    PlotSeries aa_series;
    for (int t = 0; t < tasks; ++t) {
        std::vector<double> vals;
        for (const auto& s : seeds) vals.push_back(s.aa[t]);
        mean_row.values.push_back(mean_of(vals));
        aa_series.x.push_back(t + 1);
        aa_series.mean.push_back(mean_of(vals));
        aa_series.band.push_back(stddev_of(vals));
    }
    rows.push_back(mean_row);
    write_accuracy_curve_csv(dir / "accuracy_curve.csv", tasks, rows);
    fs::create_directories(dir / "plots");
    write_line_plot_svg(dir / "plots" / "aa_curve.svg", "Average accuracy (mean over seeds)", "task",
                        "AA (%)", aa_series);
    PlotSeries ffm_series;
    for (int t = 2; t <= tasks; ++t) {
        std::vector<double> vals;
        for (const auto& s : seeds) vals.push_back(ffm_at(s.ledger, t));
        ffm_series.x.push_back(t);
        ffm_series.mean.push_back(mean_of(vals));
        ffm_series.band.push_back(stddev_of(vals));
    }
    write_line_plot_svg(dir / "plots" / "ffm_curve.svg", "Forgetting (mean over seeds)", "task",
                        "FFM (%)", ffm_series);

    std::vector<double> faas, ffms;
    for (const auto& s : seeds) {
        faas.push_back(s.faa);
        ffms.push_back(s.ffm);
    }
    std::cout << "report over " << seeds.size() << " seeds: FAA " << mean_of(faas) << " +- "
              << stddev_of(faas) << ", FFM " << mean_of(ffms) << "\n";
    std::cout << "tables and plots written under " << dir << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"PROL: rehearsal-free online class-incremental learning with generated prompts"};
    app.require_subcommand(1);

    CliOverrides cli;
    std::string grid_csv = "0.001,0.005,0.01,0.05,0.1";
    std::vector<std::string> presets = ablation_presets();
    std::string report_dir;

    auto add_common = [&cli](CLI::App* cmd) {
        cmd->add_option("--config", cli.config_path, "TOML experiment config");
        cmd->add_option("--seed", cli.seed, "override: run a single seed");
        cmd->add_option("--tasks", cli.tasks, "override: number of tasks");
        cmd->add_option("--chunk-size", cli.chunk_size, "override: stream chunk size");
        cmd->add_option("--prompt-length", cli.prompt_length, "override: prompt length l");
        cmd->add_option("--layers", cli.layers, "override: injected layer indices")->delimiter(',');
        cmd->add_option("--lr", cli.lr, "override: base learning rate");
        cmd->add_option("--lthres", cli.lthres, "override: hard-to-soft loss threshold");
        cmd->add_option("--ablation", cli.ablation, "ablation preset (ft|ft_g|ft_g_ss_k|ft_g_ss_k_hsu|full)");
        cmd->add_option("--outdir", cli.outdir, "output directory (PROL_OUTDIR roots relative paths)");
        cmd->add_flag("--pretrain", cli.pretrain, "pretrain the backbone before running");
    };

    CLI::App* pretrain = app.add_subcommand("pretrain", "pretrain the backbone on the base classes");
    add_common(pretrain);
    CLI::App* run = app.add_subcommand("run", "run the continual protocol over all seeds");
    add_common(run);
    CLI::App* grid = app.add_subcommand("grid", "learning-rate grid search (single seed per point)");
    add_common(grid);
    grid->add_option("--grid", grid_csv, "comma-separated learning rates");
    CLI::App* ablate = app.add_subcommand("ablate", "run the ablation presets");
    add_common(ablate);
    ablate->add_option("--presets", presets, "presets to run")->delimiter(',');
    CLI::App* report = app.add_subcommand("report", "aggregate tables and plots from a results directory");
    report->add_option("--dir", report_dir, "results directory (defaults to --outdir)");
    add_common(report);

    CLI11_PARSE(app, argc, argv);

    try {
        if (app.got_subcommand(pretrain)) {
            ExperimentConfig cfg = resolve_config(cli);
            double acc = run_pretrain(cfg);
            std::cout << "pretrained backbone written to " << cfg.checkpoint
                      << " (base train accuracy " << 100.0 * acc << "%)\n";
            return 0;
        }
        if (app.got_subcommand(run)) {
            ExperimentConfig cfg = resolve_config(cli);
            RunResult result = run_experiment(cfg);
            print_run_summary(result);
            return 0;
        }
        if (app.got_subcommand(grid)) {
            ExperimentConfig cfg = resolve_config(cli);
            std::vector<double> lrs;
            std::stringstream ss(grid_csv);
            std::string tok;
            while (std::getline(ss, tok, ',')) lrs.push_back(std::stod(tok));
            GridResult gr = grid_search_lr(cfg, lrs);
            std::cout << "lr,FAA,CAA,FFM\n";
            for (const auto& row : gr.rows)
                std::cout << row.lr << "," << row.faa << "," << row.caa << "," << row.ffm << "\n";
            std::cout << "best lr: " << gr.best_lr << " (table in " << gr.outdir.string() << ")\n";
            return 0;
        }
        if (app.got_subcommand(ablate)) {
            ExperimentConfig cfg = resolve_config(cli);
            AblationResult ar = run_ablation(cfg, presets);
            std::cout << "preset,FAA_mean,FFM_mean\n";
            for (const auto& [name, res] : ar.runs)
                std::cout << name << "," << res.faa_mean << "," << res.ffm_mean << "\n";
            std::cout << "details in " << ar.outdir.string() << "\n";
            return 0;
        }
        if (app.got_subcommand(report)) {
            std::string dir = !report_dir.empty() ? report_dir
                              : !cli.outdir.empty() ? cli.outdir
                                                    : std::string("results");
            if (const char* root = std::getenv("PROL_OUTDIR")) {
                fs::path p(dir);
                if (p.is_relative()) dir = (fs::path(root) / p).string();
            }
            return cmd_report(dir);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
