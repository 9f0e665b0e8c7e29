#include "prol/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "prol/errors.hpp"

namespace prol {

void MetricsLedger::add_column(std::vector<double> accuracies) {
    if (accuracies.size() != columns.size() + 1)
        throw contract_error("ledger column after task t must carry t entries");
    for (double a : accuracies)
        if (a < 0.0 || a > 100.0) throw contract_error("accuracy outside [0, 100]");
    columns.push_back(std::move(accuracies));
}

double MetricsLedger::at(int task_i, int after_t) const {
    if (after_t < 1 || after_t > completed() || task_i < 1 || task_i > after_t)
        throw contract_error("ledger entry A[" + std::to_string(task_i) + "][" + std::to_string(after_t) +
                             "] is undefined");
    return columns[after_t - 1][task_i - 1];
}

double aa_at(const MetricsLedger& ledger, int t) {
    if (t < 1 || t > ledger.completed()) throw contract_error("aa_at: task out of range");
    double acc = 0.0;
    for (int i = 1; i <= t; ++i) acc += ledger.at(i, t);
    return acc / static_cast<double>(t);
}

namespace {
void require_complete(const MetricsLedger& ledger) {
    if (!ledger.complete())
        throw contract_error("metrics require a ledger complete through T=" +
                             std::to_string(ledger.task_count));
}
}  // namespace

double faa(const MetricsLedger& ledger) {
    require_complete(ledger);
    return aa_at(ledger, ledger.task_count);
}

double caa(const MetricsLedger& ledger) {
    require_complete(ledger);
    double acc = 0.0;
    for (int t = 1; t <= ledger.task_count; ++t) acc += aa_at(ledger, t);
    return acc / static_cast<double>(ledger.task_count);
}

double ffm_at(const MetricsLedger& ledger, int t) {
    if (t < 2 || t > ledger.completed()) throw contract_error("forgetting requires at least two tasks");
    double acc = 0.0;
    for (int i = 1; i <= t - 1; ++i) {
        double worst = -1e300;
        for (int tau = 1; tau <= t - 1; ++tau) {
            if (i > tau) continue;  // A[i][tau] undefined before task i
            worst = std::max(worst, ledger.at(i, tau) - ledger.at(i, t));
        }
        acc += worst;
    }
    return acc / static_cast<double>(t - 1);
}

double ffm(const MetricsLedger& ledger) {
    require_complete(ledger);
    return ffm_at(ledger, ledger.task_count);
}

std::vector<int> predict_batch(const LearnerState& st, const std::vector<const Image*>& batch) {
    if (st.registry.size() == 0) throw contract_error("predict: no classes registered");
    const BackboneConfig& bc = st.backbone.config;
    const AblationFlags& flags = st.config.flags;

    BackboneValues bbc = backbone_constants(st.backbone);
    ForwardResult plain = vit_forward(bbc, batch);
    Tensor q_all;
    switch (st.config.prompt.match_source) {
        case MatchSource::class_feature: q_all = plain.features.val(); break;
        case MatchSource::class_token: q_all = plain.cls_pre_ln.val(); break;
        case MatchSource::patch_embedding: q_all = plain.patch_mean.val(); break;
    }

    Tensor features;
    if (flags.use_generator) {
        GeneratorValues gen_vals = as_constants(st.generator);
        std::vector<PrefixPrompt> prompts;
        prompts.reserve(batch.size());
        for (std::size_t i = 0; i < batch.size(); ++i) {
            Tensor q({static_cast<std::size_t>(bc.dim)},
                     std::vector<double>(q_all.data.begin() + i * bc.dim,
                                         q_all.data.begin() + (i + 1) * bc.dim));
            Value qv = Value::constant(q);
            Value s;
            ClassStateValues csv;
            if (flags.use_scaler_shifter_keys) {
                auto [c_star, sim] = match_key(q, st.registry, st.registry.order());
                s = Value::constant(Tensor::scalar(sim));
                csv = as_constants(st.registry.at(c_star));
            } else {
                s = Value::constant(Tensor::scalar(1.0));
                csv = identity_class_values(bc.dim, st.config.prompt.length);
            }
            prompts.push_back(generate_prompt(qv, csv, s, gen_vals, st.config.prompt.length, bc.head_dim()));
        }
        features = vit_forward(bbc, batch, prompts).features.val();
    } else {
        features = plain.features.val();
    }

    Tensor logits = head_logits(st, features);
    const auto& order = st.registry.order();
    std::vector<int> out(batch.size());
    for (std::size_t r = 0; r < batch.size(); ++r) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits(r, c) > logits(r, best)) best = c;
        out[r] = order[best];
    }
    return out;
}

int predict(const LearnerState& st, const Image& image) {
    return predict_batch(st, {&image}).front();
}

std::vector<double> evaluate_after_task(const LearnerState& st, int t, const LabeledDataset& test_ds,
                                        const std::vector<std::vector<std::size_t>>& test_groups) {
    if (t < 1 || t > st.current_task)
        throw contract_error("evaluate_after_task: task " + std::to_string(t) + " not trained yet");
    if (static_cast<int>(test_groups.size()) < t)
        throw contract_error("evaluate_after_task: missing test sets beyond task " +
                             std::to_string(test_groups.size()));

    std::vector<double> accuracies;
    accuracies.reserve(t);
    const std::size_t eval_batch = 32;
    for (int i = 1; i <= t; ++i) {
        const auto& group = test_groups[i - 1];
        if (group.empty()) throw contract_error("evaluate_after_task: empty test set for task " +
                                                std::to_string(i));
        std::size_t correct = 0;
        for (std::size_t start = 0; start < group.size(); start += eval_batch) {
            std::size_t end = std::min(group.size(), start + eval_batch);
            std::vector<std::size_t> idx(group.begin() + start, group.begin() + end);
            auto preds = predict_batch(st, batch_view(test_ds, idx));
            for (std::size_t k = 0; k < idx.size(); ++k)
                if (preds[k] == test_ds.labels[idx[k]]) ++correct;
        }
        accuracies.push_back(100.0 * static_cast<double>(correct) / static_cast<double>(group.size()));
    }
    return accuracies;
}

TimingRecord make_timing(int task_id, std::size_t samples, double train_seconds, double infer_seconds) {
    if (train_seconds <= 0.0 || infer_seconds < 0.0)
        throw contract_error("timing record requires positive training time");
    TimingRecord r;
    r.task_id = task_id;
    r.samples = samples;
    r.train_seconds = train_seconds;
    r.infer_seconds = infer_seconds;
    r.throughput = static_cast<double>(samples) / train_seconds;
    return r;
}

LinearFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size() || x.size() < 2) throw contract_error("fit_line: need >= 2 points");
    double n = static_cast<double>(x.size());
    double sx = std::accumulate(x.begin(), x.end(), 0.0);
    double sy = std::accumulate(y.begin(), y.end(), 0.0);
    double sxx = 0.0, sxy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxx += x[i] * x[i];
        sxy += x[i] * y[i];
    }
    LinearFit fit;
    fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    fit.intercept = (sy - fit.slope * sx) / n;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double pred = fit.slope * x[i] + fit.intercept;
        fit.residual_fraction.push_back(std::abs(pred - y[i]) / std::abs(y[i]));
    }
    return fit;
}

}  // namespace prol
