#pragma once

#include <vector>

#include "prol/learner.hpp"

namespace prol {

// Lower-triangular accuracy matrix: columns[t-1][i-1] = A[i][t], accuracy (%)
// on task i's test set after training task t, defined for i <= t.
struct MetricsLedger {
    int task_count = 0;
    std::vector<std::vector<double>> columns;

    explicit MetricsLedger(int tasks = 0) : task_count(tasks) {}
    void add_column(std::vector<double> accuracies);
    double at(int task_i, int after_t) const;
    int completed() const { return static_cast<int>(columns.size()); }
    bool complete() const { return task_count > 0 && completed() == task_count; }
};

double aa_at(const MetricsLedger& ledger, int t);   // (1/t) sum_i A[i][t]
double faa(const MetricsLedger& ledger);            // AA_T
double caa(const MetricsLedger& ledger);            // (1/T) sum_t AA_t
double ffm(const MetricsLedger& ledger);            // requires T >= 2
double ffm_at(const MetricsLedger& ledger, int t);  // forgetting up to task t

// Inference per the method: q from the plain backbone, top-1 key match picks
// the class state, prompt per the generation equation, argmax over registered
// class logits. Pure function of (state, input).
int predict(const LearnerState& state, const Image& image);
std::vector<int> predict_batch(const LearnerState& state, const std::vector<const Image*>& batch);

// Accuracy (%) on the test sets of tasks 1..t. test_groups[i-1] holds indices
// into test_ds for task i.
std::vector<double> evaluate_after_task(const LearnerState& state, int t, const LabeledDataset& test_ds,
                                        const std::vector<std::vector<std::size_t>>& test_groups);

struct TimingRecord {
    int task_id = 0;
    std::size_t samples = 0;
    double train_seconds = 0.0;
    double infer_seconds = 0.0;
    double throughput = 0.0;  // samples / train_seconds
};

TimingRecord make_timing(int task_id, std::size_t samples, double train_seconds, double infer_seconds);

// Least-squares line fit y ~ a*x + b with per-point |fit-y|/y residuals;
// backs the linear-time training check.
struct LinearFit {
    double slope = 0.0;
    double intercept = 0.0;
    std::vector<double> residual_fraction;
};
LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace prol
