#include <doctest.h>

#include <prol/errors.hpp>
#include <prol/evaluator.hpp>
#include <prol/rng.hpp>

#include <cmath>

using namespace prol;

namespace {

const AblationFlags kFlagsFull{true, true, true, true, true, true};

BackboneConfig tiny_config() {
    BackboneConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 8;
    c.patch_size = 2;
    c.image_side = 4;
    return c;
}

LearnerConfig tiny_learner_config(const AblationFlags& flags, std::uint64_t seed = 1) {
    LearnerConfig lc;
    lc.prompt.length = 3;
    lc.prompt.injected_layers = flags.use_generator ? std::vector<int>{0, 1} : std::vector<int>{};
    lc.flags = flags;
    lc.seed = seed;
    return lc;
}

MetricsLedger ledger_from(std::vector<std::vector<double>> cols, int t_total) {
    MetricsLedger ledger(t_total);
    for (auto& c : cols) ledger.add_column(std::move(c));
    return ledger;
}

}  // namespace

TEST_CASE("metric formulas on the hand-evaluated two-task ledger") {
    // A[1][1] = 100, A[1][2] = 90, A[2][2] = 80
    MetricsLedger ledger = ledger_from({{100.0}, {90.0, 80.0}}, 2);
    CHECK(faa(ledger) == doctest::Approx(85.0).epsilon(1e-12));
    CHECK(caa(ledger) == doctest::Approx(92.5).epsilon(1e-12));
    CHECK(ffm(ledger) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(aa_at(ledger, 1) == 100.0);
}

TEST_CASE("constant ledger has zero forgetting") {
    MetricsLedger ledger = ledger_from({{50.0}, {50.0, 50.0}, {50.0, 50.0, 50.0}}, 3);
    CHECK(faa(ledger) == 50.0);
    CHECK(caa(ledger) == 50.0);
    CHECK(ffm(ledger) == 0.0);
}

TEST_CASE("monotone improvement yields negative forgetting") {
    MetricsLedger ledger = ledger_from({{60.0}, {70.0, 70.0}}, 2);
    CHECK(ffm(ledger) == doctest::Approx(-10.0).epsilon(1e-12));
}

TEST_CASE("ledger contracts: shape, range, undefined entries, completeness") {
    MetricsLedger ledger(3);
    CHECK_THROWS_AS(ledger.add_column({50.0, 60.0}), contract_error);  // first column needs 1 entry
    ledger.add_column({50.0});
    CHECK_THROWS_AS(ledger.at(1, 2), contract_error);  // not evaluated yet
    CHECK_THROWS_AS(ledger.at(2, 1), contract_error);  // i > t undefined
    CHECK_THROWS_AS(faa(ledger), contract_error);      // incomplete
    MetricsLedger bad(1);
    CHECK_THROWS_AS(bad.add_column({101.0}), contract_error);

    MetricsLedger single = ledger_from({{75.0}}, 1);
    CHECK(faa(single) == 75.0);                     // FAA = AA_1 with one task
    CHECK_THROWS_AS(ffm(single), contract_error);   // forgetting needs T >= 2
}

TEST_CASE("FAA equals the mean of the last column on random ledgers") {
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        int T = 2 + static_cast<int>(rng.uniform_index(6));
        MetricsLedger ledger(T);
        for (int t = 1; t <= T; ++t) {
            std::vector<double> col(t);
            for (double& v : col) v = 100.0 * rng.uniform();
            ledger.add_column(col);
        }
        double mean_last = 0.0;
        for (int i = 1; i <= T; ++i) mean_last += ledger.at(i, T);
        mean_last /= T;
        CHECK(faa(ledger) == doctest::Approx(mean_last).epsilon(1e-12));

        // CAA lies between the extreme AA_t values
        double lo = 1e300, hi = -1e300;
        for (int t = 1; t <= T; ++t) {
            lo = std::min(lo, aa_at(ledger, t));
            hi = std::max(hi, aa_at(ledger, t));
        }
        CHECK(caa(ledger) >= lo - 1e-12);
        CHECK(caa(ledger) <= hi + 1e-12);
    }
}

TEST_CASE("FFM is non-negative when rows never improve after their task") {
    Rng rng(9);
    for (int trial = 0; trial < 30; ++trial) {
        int T = 2 + static_cast<int>(rng.uniform_index(4));
        std::vector<std::vector<double>> a(T + 1, std::vector<double>(T + 1, 0.0));
        MetricsLedger ledger(T);
        for (int t = 1; t <= T; ++t) {
            std::vector<double> col(t);
            for (int i = 1; i <= t; ++i) {
                if (i == t) a[i][t] = 40.0 + 60.0 * rng.uniform();
                else a[i][t] = a[i][t - 1] * (0.6 + 0.4 * rng.uniform());  // non-increasing rows
                col[i - 1] = a[i][t];
            }
            ledger.add_column(col);
        }
        CHECK(ffm(ledger) >= -1e-12);
    }
}

TEST_CASE("predict: single registered class is always predicted, and is deterministic") {
    LabeledDataset data = make_synthetic(2, 4, 4, 4.0, 3);
    BackboneCheckpoint bb = init_backbone(tiny_config(), 3);
    LearnerState st = make_learner(bb, tiny_learner_config(kFlagsFull));
    CHECK_THROWS_AS(predict(st, data.images[0]), contract_error);  // empty registry

    st.registry.register_class(1, tiny_config().dim, 3, 1, 1);
    register_head_classes(st, {1});
    st.current_task = 1;
    for (int i = 0; i < 4; ++i) CHECK(predict(st, data.images[i]) == 1);
    int first = predict(st, data.images[0]);
    for (int rep = 0; rep < 3; ++rep) CHECK(predict(st, data.images[0]) == first);
}

TEST_CASE("trained two-class learner separates a well-separated synthetic task") {
    // base classes 0..3 pretrain the frozen backbone; classes 4..5 stream online
    BackboneConfig c;
    c.layers = 2;
    c.heads = 2;
    c.dim = 32;
    c.patch_size = 2;
    c.image_side = 8;
    LabeledDataset full = make_synthetic(6, 40, 8, 5.0, 29);
    LabeledDataset base = subset_classes(full, {0, 1, 2, 3}, true);
    LabeledDataset cl = subset_classes(full, {4, 5}, true);
    PretrainOptions po;
    po.epochs = 20;
    po.lr = 1e-3;
    po.batch_size = 8;
    po.seed = 5;
    BackboneCheckpoint bb = pretrain_base(c, base, po, {0, 1, 2, 3}, {4, 5});

    auto [train, test] = split_train_test(cl, 0.2, 29);
    TaskSequence tasks = split_tasks(train, 1, 13);
    LearnerConfig lc;
    lc.prompt.length = 3;
    lc.prompt.injected_layers = {0, 1};
    lc.flags = kFlagsFull;
    lc.optimizer.base_lr = 0.05;
    lc.loss_thres = 0.3;
    lc.seed = 13;
    LearnerState st = make_learner(bb, lc);
    StreamSession session(train, tasks, 6, 13);
    ChunkStream stream = session.open_task(1);
    train_task(st, 1, train, stream);

    auto groups = group_by_tasks(test, tasks);
    auto accs = evaluate_after_task(st, 1, test, groups);
    REQUIRE(accs.size() == 1);
    CHECK(accs[0] >= 90.0);  // threshold pinned after the seeded pilot run
}

TEST_CASE("evaluate_after_task contracts") {
    LabeledDataset data = make_synthetic(2, 6, 4, 4.0, 17);
    TaskSequence tasks = split_tasks(data, 2, 17);
    BackboneCheckpoint bb = init_backbone(tiny_config(), 17);
    LearnerState st = make_learner(bb, tiny_learner_config(kFlagsFull, 17));
    StreamSession session(data, tasks, 4, 17);
    ChunkStream stream = session.open_task(1);
    train_task(st, 1, data, stream);

    CHECK_THROWS_AS(evaluate_after_task(st, 2, data, {{0}, {1}}), contract_error);  // task 2 untrained
    CHECK_THROWS_AS(evaluate_after_task(st, 1, data, {{}}), contract_error);        // empty test set
    CHECK_THROWS_AS(evaluate_after_task(st, 1, data, {}), contract_error);          // missing test sets

    // the AA example: accuracies (80, 60) average to 70
    MetricsLedger ledger = ledger_from({{90.0}, {80.0, 60.0}}, 2);
    CHECK(aa_at(ledger, 2) == doctest::Approx(70.0));
}

TEST_CASE("any-time inference: predictions are valid from a mid-stream snapshot") {
    // train on only half of a task's data, then predict
    LabeledDataset data = make_synthetic(2, 10, 4, 4.0, 23);
    LabeledDataset half;
    half.class_count = 2;
    for (std::size_t i = 0; i < data.size(); i += 2) {
        half.images.push_back(data.images[i]);
        half.labels.push_back(data.labels[i]);
    }
    TaskSequence tasks = split_tasks(half, 1, 23);
    BackboneCheckpoint bb = init_backbone(tiny_config(), 23);
    LearnerState st = make_learner(bb, tiny_learner_config(kFlagsFull, 23));
    StreamSession session(half, tasks, 4, 23);
    ChunkStream stream = session.open_task(1);
    train_task(st, 1, half, stream);
    int label = predict(st, data.images[1]);  // an image the learner never saw
    CHECK((label == 0 || label == 1));
}

TEST_CASE("timing records and the line fit") {
    TimingRecord r = make_timing(3, 200, 4.0, 1.5);
    CHECK(r.throughput == doctest::Approx(50.0));  // samples per training second
    CHECK(r.train_seconds == 4.0);
    CHECK(r.infer_seconds == 1.5);
    CHECK_THROWS_AS(make_timing(1, 10, 0.0, 1.0), contract_error);

    LinearFit fit = fit_line({500, 1000, 2000}, {1.0, 2.0, 4.0});
    CHECK(fit.slope == doctest::Approx(0.002).epsilon(1e-9));
    for (double rf : fit.residual_fraction) CHECK(rf < 1e-9);
    CHECK_THROWS_AS(fit_line({1.0}, {1.0}), contract_error);
}
