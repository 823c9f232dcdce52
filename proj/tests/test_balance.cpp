#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cooplearn/balance.hpp"
#include "helpers.hpp"

using namespace coop;

namespace {

TaskGradient tg(TaskId id, std::vector<double> v) {
    TaskGradient g;
    g.task = id;
    g.values = std::move(v);
    return g;
}

TaskGradient random_grad(Rng& rng, TaskId id, std::size_t n, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return tg(id, std::move(v));
}

VoxelSpec tiny_spec() {
    VoxelSpec spec;
    spec.x_min = -3.2;
    spec.x_max = 3.2;
    spec.y_min = -3.2;
    spec.y_max = 3.2;
    spec.z_min = -0.4;
    spec.z_max = 2.0;
    spec.bev_cell = 0.8;
    return spec;
}

ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.hidden = 6;
    cfg.channels = 4;
    return cfg;
}

std::vector<Scene> tiny_scenes(std::size_t count) {
    std::vector<Scene> scenes;
    for (std::size_t i = 0; i < count; ++i) {
        ScenarioConfig sc;
        sc.agent_count = 2;
        sc.object_count = 2;
        sc.extent_x = 3.0;
        sc.extent_y = 3.0;
        sc.rays_per_frame = 72;
        sc.speed_max = 1.0;
        sc.seed = 900 + i;
        scenes.push_back(generate_scene(sc, "b" + std::to_string(i)));
    }
    return scenes;
}

bool stores_equal(const ParamStore& a, const ParamStore& b) {
    if (a.count() != b.count()) return false;
    for (std::size_t i = 0; i < a.count(); ++i) {
        if (a.names()[i] != b.names()[i]) return false;
        if (!bitwise_equal(a.value(i), b.value(i))) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("conflict delta basics") {
    CHECK(conflict_delta(tg(TaskId::detection, {1, 0}), tg(TaskId::prediction, {0, 1})) == 0.0);
    CHECK(conflict_delta(tg(TaskId::detection, {1, 0}), tg(TaskId::prediction, {-1, 1})) == -1.0);
    CHECK_THROWS_AS(conflict_delta(tg(TaskId::detection, {1}), tg(TaskId::prediction, {1, 2})),
                    std::invalid_argument);
}

TEST_CASE("conflict delta matches an independent summation oracle") {
    Rng rng(7);
    for (int rep = 0; rep < 20; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(200);
        TaskGradient a = random_grad(rng, TaskId::detection, n);
        TaskGradient b = random_grad(rng, TaskId::prediction, n);
        double oracle = 0.0;
        for (std::size_t k = 0; k < n; ++k) oracle += a.values[k] * b.values[k];
        CHECK(conflict_delta(a, b) == oracle);
    }
}

TEST_CASE("suppress_conflict worked examples") {
    SUBCASE("aligned gradients sum bitwise") {
        auto out = suppress_conflict(tg(TaskId::detection, {1, 0}), tg(TaskId::prediction, {1, 0}));
        CHECK(out == std::vector<double>{2, 0});
    }
    SUBCASE("zero inner product counts as non-conflicting") {
        auto out = suppress_conflict(tg(TaskId::detection, {1, 0}), tg(TaskId::prediction, {0, 1}));
        CHECK(out == std::vector<double>{1, 1});
    }
    SUBCASE("hand-computed projection") {
        // delta = -1, |g_j|^2 = 2, coefficient 1.5 -> (-0.5, 1.5)
        auto out =
            suppress_conflict(tg(TaskId::detection, {1, 0}), tg(TaskId::prediction, {-1, 1}));
        CHECK(out[0] == doctest::Approx(-0.5).epsilon(1e-12));
        CHECK(out[1] == doctest::Approx(1.5).epsilon(1e-12));
        // cross-check against the projection identity (g_i - (d/|g_j|^2) g_j) + g_j
        const double d = -1.0, nj2 = 2.0;
        const double e0 = (1.0 - (d / nj2) * -1.0) + -1.0;
        const double e1 = (0.0 - (d / nj2) * 1.0) + 1.0;
        CHECK(out[0] == doctest::Approx(e0).epsilon(1e-12));
        CHECK(out[1] == doctest::Approx(e1).epsilon(1e-12));
    }
    SUBCASE("vanishing g_j with negative-looking delta is treated as non-conflicting") {
        auto out = suppress_conflict(tg(TaskId::detection, {1, 1}),
                                     tg(TaskId::prediction, {-1e-13, 0}));
        CHECK(out[0] == 1.0 + -1e-13);
        CHECK(out[1] == 1.0);
    }
}

TEST_CASE("post-suppression output aligns with g_j") {
    Rng rng(11);
    std::size_t fired = 0;
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(64);
        TaskGradient gi = random_grad(rng, TaskId::detection, n);
        TaskGradient gj = random_grad(rng, TaskId::prediction, n);
        const double delta = conflict_delta(gi, gj);
        if (delta >= 0.0) continue;
        ++fired;
        auto out = suppress_conflict(gi, gj);
        double dot = 0.0;
        for (std::size_t k = 0; k < n; ++k) dot += out[k] * gj.values[k];
        const double nj2 = squared_norm(gj.values);
        CHECK(std::fabs(dot - nj2) <= 1e-9 * std::max(1.0, nj2));
    }
    CHECK(fired > 20);
}

TEST_CASE("branch equivalence identity holds elementwise") {
    Rng rng(13);
    for (int rep = 0; rep < 100; ++rep) {
        const std::size_t n = 1 + rng.uniform_index(128);
        TaskGradient gi = random_grad(rng, TaskId::detection, n);
        TaskGradient gj = random_grad(rng, TaskId::prediction, n);
        const double delta = conflict_delta(gi, gj);
        if (delta >= 0.0) continue;
        auto out = suppress_conflict(gi, gj);
        const double q = delta / squared_norm(gj.values);
        for (std::size_t k = 0; k < n; ++k) {
            const double other = (gi.values[k] - q * gj.values[k]) + gj.values[k];
            CHECK(std::fabs(out[k] - other) < 1e-12);
        }
    }
}

TEST_CASE("suppression is positively homogeneous") {
    Rng rng(17);
    TaskGradient gi = random_grad(rng, TaskId::detection, 32);
    TaskGradient gj = random_grad(rng, TaskId::prediction, 32);
    auto base = suppress_conflict(gi, gj);
    for (double c : {2.0, 0.5, 4.0}) {  // powers of two scale exactly
        TaskGradient gi_c = gi, gj_c = gj;
        for (auto& v : gi_c.values) v *= c;
        for (auto& v : gj_c.values) v *= c;
        auto scaled = suppress_conflict(gi_c, gj_c);
        for (std::size_t k = 0; k < base.size(); ++k)
            CHECK(scaled[k] == doctest::Approx(c * base[k]).epsilon(1e-12));
    }
}

TEST_CASE("symmetric variant also removes g_j's conflicting component") {
    TaskGradient gi = tg(TaskId::detection, {1, 0});
    TaskGradient gj = tg(TaskId::prediction, {-1, 1});
    auto out = suppress_conflict_symmetric(gi, gj);
    // g_i off g_j: (0.5, 0.5); g_j off g_i: (0, 1); sum (0.5, 1.5)
    CHECK(out[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(out[1] == doctest::Approx(1.5).epsilon(1e-12));
    double di = 0.0, dj = 0.0;
    for (std::size_t k = 0; k < 2; ++k) {
        di += out[k] * gi.values[k];
        dj += out[k] * gj.values[k];
    }
    CHECK(di >= 0.0);
    CHECK(dj >= 0.0);
}

TEST_CASE("schedule phases follow n free then m balanced per cycle") {
    SUBCASE("n=2, m=1") {
        BalanceSchedule s;
        s.free_steps = 2;
        s.balanced_steps = 1;
        std::string phases;
        for (int i = 0; i < 6; ++i) {
            phases += s.in_balanced_phase() ? 'B' : 'F';
            s.advance();
        }
        CHECK(phases == "FFBFFB");
    }
    SUBCASE("n=0 balances every step") {
        BalanceSchedule s;
        s.free_steps = 0;
        s.balanced_steps = 1;
        for (int i = 0; i < 5; ++i) {
            CHECK(s.in_balanced_phase());
            s.advance();
        }
    }
    SUBCASE("counter wraps modulo n+m") {
        BalanceSchedule s;
        s.free_steps = 2;
        s.balanced_steps = 1;
        std::vector<std::size_t> cts;
        for (int i = 0; i < 6; ++i) {
            cts.push_back(s.cycle_position());
            s.advance();
        }
        CHECK(cts == std::vector<std::size_t>{0, 1, 2, 0, 1, 2});
    }
    SUBCASE("any n+m window holds exactly n free steps") {
        BalanceSchedule s;
        s.free_steps = 3;
        s.balanced_steps = 2;
        std::vector<bool> balanced;
        for (int i = 0; i < 25; ++i) {
            balanced.push_back(s.in_balanced_phase());
            s.advance();
        }
        for (std::size_t start = 0; start + 5 <= balanced.size(); ++start) {
            std::size_t free_count = 0;
            for (std::size_t k = start; k < start + 5; ++k)
                if (!balanced[k]) ++free_count;
            CHECK(free_count == 3);
        }
    }
    SUBCASE("n + m = 0 rejected") {
        BalanceSchedule s;
        s.free_steps = 0;
        s.balanced_steps = 0;
        CHECK_THROWS_AS(s.validate(), std::invalid_argument);
    }
}

TEST_CASE("hybrid_combine sums in the free phase and suppresses in the balanced phase") {
    BalanceSchedule s;
    s.free_steps = 1;
    s.balanced_steps = 1;
    TaskGradient gd = tg(TaskId::detection, {1, 0});
    TaskGradient gp = tg(TaskId::prediction, {-1, 1});

    CombineOutcome free_out = hybrid_combine(s, gd, gp);
    CHECK(!free_out.balanced_phase);
    CHECK(free_out.shared_grad == std::vector<double>{0, 1});
    CHECK(s.step == 1);

    CombineOutcome bal_out = hybrid_combine(s, gd, gp);
    CHECK(bal_out.balanced_phase);
    CHECK(bal_out.suppressed);
    CHECK(bal_out.delta == -1.0);
    CHECK(bal_out.shared_grad[0] == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(bal_out.shared_grad[1] == doctest::Approx(1.5).epsilon(1e-12));
}

TEST_CASE("train_run with an all-free schedule is bitwise identical to balance-off") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(3);

    TrainConfig plain;
    plain.epochs = 2;
    plain.seed = 5;
    plain.balance_enabled = false;

    TrainConfig all_free = plain;
    all_free.balance_enabled = true;
    all_free.schedule.free_steps = 1000;  // larger than the step budget
    all_free.schedule.balanced_steps = 0;

    TrainResult a = train_run(scenes, spec, mcfg, plain);
    TrainResult b = train_run(scenes, spec, mcfg, all_free);
    CHECK(stores_equal(a.trunk, b.trunk));
    CHECK(stores_equal(a.det_head, b.det_head));
    CHECK(stores_equal(a.pred_head, b.pred_head));
    for (const auto& row : b.log) CHECK(row.phase == 'F');
}

TEST_CASE("train_run is deterministic in the seed") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(2);
    TrainConfig cfg;
    cfg.epochs = 2;
    cfg.seed = 77;
    cfg.balance_enabled = true;
    cfg.schedule.free_steps = 2;
    cfg.schedule.balanced_steps = 1;
    TrainResult a = train_run(scenes, spec, mcfg, cfg);
    TrainResult b = train_run(scenes, spec, mcfg, cfg);
    CHECK(stores_equal(a.trunk, b.trunk));
    CHECK(stores_equal(a.det_head, b.det_head));
    CHECK(stores_equal(a.pred_head, b.pred_head));
}

TEST_CASE("balanced steps log gradient statistics, free steps do not") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(2);
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.seed = 3;
    cfg.balance_enabled = true;
    cfg.schedule.free_steps = 2;
    cfg.schedule.balanced_steps = 1;
    TrainResult r = train_run(scenes, spec, mcfg, cfg);
    REQUIRE(r.log.size() == 6);
    std::size_t balanced_rows = 0;
    for (const auto& row : r.log) {
        CHECK(std::isfinite(row.loss_det));
        CHECK(std::isfinite(row.loss_pred));
        if (row.phase == 'B') {
            ++balanced_rows;
            CHECK(std::isfinite(row.delta));
            CHECK(std::isfinite(row.norm_det));
            CHECK(std::isfinite(row.norm_pred));
        } else {
            CHECK(std::isnan(row.delta));
        }
    }
    CHECK(balanced_rows == 2);  // steps 2 and 5
}

TEST_CASE("train_run aborts on non-finite losses naming the step") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(1);
    Rng rng(1);
    ParamStore poisoned = make_trunk_params(mcfg, rng);
    // the mix bias feeds the heads without passing any NaN-absorbing relu
    poisoned.at("temporal.mix_b")[0] = std::numeric_limits<double>::quiet_NaN();
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_WITH_AS(train_run(scenes, spec, mcfg, cfg, &poisoned),
                         doctest::Contains("non-finite loss at step"), std::runtime_error);
}

TEST_CASE("train_run requires checkpoint parameters to cover the trunk") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(1);
    ParamStore incomplete;
    incomplete.add("enc.w1", NumArray::zeros({6, 6}));
    TrainConfig cfg;
    cfg.epochs = 1;
    CHECK_THROWS_AS(train_run(scenes, spec, mcfg, cfg, &incomplete), std::invalid_argument);
}

TEST_CASE("diagnose_conflicts emits finite bounded traces") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(2);
    Rng rng(21);
    ParamStore trunk = make_trunk_params(mcfg, rng);
    ParamStore det = make_det_head_params(mcfg, rng);
    ParamStore pred = make_pred_head_params(mcfg, rng);
    auto rows = diagnose_conflicts(trunk, det, pred, scenes, spec, mcfg, 10);
    REQUIRE(rows.size() == 10);
    for (const auto& row : rows) {
        CHECK(std::isfinite(row.delta));
        CHECK(std::isfinite(row.norm_det));
        CHECK(std::isfinite(row.norm_pred));
        if (std::isfinite(row.cosine)) {
            CHECK(row.cosine >= -1.0 - 1e-12);
            CHECK(row.cosine <= 1.0 + 1e-12);
            if (row.delta != 0.0) CHECK((row.cosine > 0) == (row.delta > 0));
        }
    }
}

TEST_CASE("balanced suppressed steps satisfy the descent identity on g_pred") {
    VoxelSpec spec = tiny_spec();
    ModelConfig mcfg = tiny_model();
    std::vector<Scene> scenes = tiny_scenes(1);
    Rng rng(33);
    ParamStore trunk = make_trunk_params(mcfg, rng);
    ParamStore det = make_det_head_params(mcfg, rng);
    ParamStore pred = make_pred_head_params(mcfg, rng);

    Tape t;
    Binding tb = bind_params(t, trunk);
    Binding db = bind_params(t, det);
    Binding pb = bind_params(t, pred);
    NodeId fused = trunk_forward(t, scenes[0], spec, mcfg, tb);
    HeadOutputs heads = heads_forward(t, fused, db, pb);
    TaskLosses losses = task_losses(t, heads, scenes[0], spec, mcfg);
    TaskGradient g_det =
        flatten_gradients(t.backward(losses.detection), tb.order, TaskId::detection);
    TaskGradient g_pred =
        flatten_gradients(t.backward(losses.prediction), tb.order, TaskId::prediction);

    auto combined = suppress_conflict(g_det, g_pred);
    const double delta = conflict_delta(g_det, g_pred);
    double dot = 0.0;
    for (std::size_t k = 0; k < combined.size(); ++k) dot += combined[k] * g_pred.values[k];
    const double nj2 = squared_norm(g_pred.values);
    if (delta < 0.0) {
        CHECK(std::fabs(dot - nj2) <= 1e-9 * std::max(1.0, nj2));
    } else {
        CHECK(dot == doctest::Approx(delta + nj2).epsilon(1e-9));
    }
}
