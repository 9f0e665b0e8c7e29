#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "prol/evaluator.hpp"

namespace prol {

// ledger.csv: header "task_i,after_t,accuracy", one row per defined A[i][t].
void write_ledger_csv(const std::filesystem::path& path, const MetricsLedger& ledger);
MetricsLedger read_ledger_csv(const std::filesystem::path& path, int task_count);

void write_metrics_json(const std::filesystem::path& path, double faa, double caa, double ffm,
                        const std::vector<double>& aa);

void write_timing_json(const std::filesystem::path& path, const std::vector<TimingRecord>& records);

// accuracy_curve.csv: one row per label with AA_t for t = 1..T plus an AVG
// column, mirroring the per-task accuracy table layout.
struct CurveRow {
    std::string label;
    std::vector<double> values;
};
void write_accuracy_curve_csv(const std::filesystem::path& path, int task_count,
                              const std::vector<CurveRow>& rows);

// Line chart with an optional +-band around the mean series. Writes SVG.
struct PlotSeries {
    std::vector<double> x;
    std::vector<double> mean;
    std::vector<double> band;  // empty or per-point stddev
};
void write_line_plot_svg(const std::filesystem::path& path, const std::string& title,
                         const std::string& x_label, const std::string& y_label,
                         const PlotSeries& series);

double mean_of(const std::vector<double>& v);
double stddev_of(const std::vector<double>& v);  // population

}  // namespace prol
