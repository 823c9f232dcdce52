#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "cooplearn/autodiff.hpp"
#include "helpers.hpp"

using namespace coop;
using testutil::check_against_fd;
using testutil::random_array;

TEST_CASE("forward elementwise arithmetic") {
    Tape t;
    NodeId a = t.constant(NumArray::vec({1, 2}));
    NodeId b = t.constant(NumArray::vec({3, 4}));
    CHECK(t.value(t.add(a, b)).values() == std::vector<double>{4, 6});
    CHECK(t.value(t.sub(a, b)).values() == std::vector<double>{-2, -2});
    CHECK(t.value(t.mul(a, b)).values() == std::vector<double>{3, 8});
}

TEST_CASE("matmul identity") {
    Tape t;
    NodeId eye = t.constant(NumArray({2, 2}, {1, 0, 0, 1}));
    NodeId m = t.constant(NumArray({2, 2}, {5, 6, 7, 8}));
    CHECK(t.value(t.matmul(eye, m)).values() == std::vector<double>{5, 6, 7, 8});
}

TEST_CASE("relu definition and subgradient at zero") {
    Tape t;
    NodeId x = t.param(NumArray::vec({-1, 0, 2}));
    NodeId r = t.relu(x);
    CHECK(t.value(r).values() == std::vector<double>{0, 0, 2});
    GradientMap gm = t.backward(t.sum(r));
    CHECK(gm.at(x).values() == std::vector<double>{0, 0, 1});
}

TEST_CASE("shape mismatch is rejected with shapes named") {
    Tape t;
    NodeId a = t.constant(NumArray::vec({1, 2}));
    NodeId b = t.constant(NumArray::vec({1, 2, 3}));
    CHECK_THROWS_WITH_AS(t.add(a, b), doctest::Contains("[2]"), std::invalid_argument);
    NodeId m = t.constant(NumArray({2, 3}, std::vector<double>(6, 0.0)));
    CHECK_THROWS_AS(t.matmul(m, m), std::invalid_argument);
}

TEST_CASE("backward rejects non-scalar root") {
    Tape t;
    NodeId x = t.param(NumArray::vec({1, 2}));
    CHECK_THROWS_AS(t.backward(x), std::invalid_argument);
}

TEST_CASE("d(x*x)/dx = 2x") {
    Tape t;
    NodeId x = t.param(NumArray::scalar(3.0));
    GradientMap gm = t.backward(t.mul(x, x));
    CHECK(gm.at(x).item() == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("constant-only root yields empty gradient map") {
    Tape t;
    NodeId c = t.constant(NumArray::vec({1, 2, 3}));
    GradientMap gm = t.backward(t.sum(c));
    CHECK(gm.empty());
}

TEST_CASE("unreached parameters get exact zero gradients") {
    Tape t;
    NodeId used = t.param(NumArray::scalar(2.0));
    NodeId unused = t.param(NumArray::vec({1, 2, 3}));
    GradientMap gm = t.backward(t.mul(used, used));
    CHECK(gm.at(unused).values() == std::vector<double>{0, 0, 0});
    CHECK(gm.size() == 2);
}

TEST_CASE("min reduce ties resolve to lowest index") {
    Tape t;
    NodeId x = t.param(NumArray::vec({5, 3, 3, 7}));
    NodeId m = t.min_reduce(x);
    CHECK(t.value(m).item() == 3);
    GradientMap gm = t.backward(m);
    CHECK(gm.at(x).values() == std::vector<double>{0, 1, 0, 0});
}

TEST_CASE("min reduce along both axes") {
    Tape t;
    NodeId x = t.constant(NumArray({2, 3}, {4, 1, 2, 0, 5, 2}));
    CHECK(t.value(t.min_reduce(x, 1)).values() == std::vector<double>{1, 0});
    CHECK(t.value(t.min_reduce(x, 0)).values() == std::vector<double>{0, 1, 2});
}

TEST_CASE("gather rows with repeats scatters gradient") {
    Tape t;
    NodeId x = t.param(NumArray({3, 2}, {1, 2, 3, 4, 5, 6}));
    NodeId g = t.gather_rows(x, {2, 0, 2});
    CHECK(t.value(g).values() == std::vector<double>{5, 6, 1, 2, 5, 6});
    GradientMap gm = t.backward(t.sum(g));
    CHECK(gm.at(x).values() == std::vector<double>{1, 1, 0, 0, 2, 2});
}

TEST_CASE("concat along both axes round-trips gradients") {
    Tape t;
    NodeId a = t.param(NumArray({2, 2}, {1, 2, 3, 4}));
    NodeId b = t.param(NumArray({1, 2}, {5, 6}));
    NodeId c0 = t.concat({a, b}, 0);
    CHECK(t.value(c0).shape() == std::vector<std::size_t>{3, 2});
    NodeId c = t.param(NumArray({2, 1}, {9, 9}));
    NodeId c1 = t.concat({a, c}, 1);
    CHECK(t.value(c1).shape() == std::vector<std::size_t>{2, 3});
    CHECK(t.value(c1).values() == std::vector<double>{1, 2, 9, 3, 4, 9});
    GradientMap gm = t.backward(t.sum(c1));
    CHECK(gm.at(a).values() == std::vector<double>{1, 1, 1, 1});
    CHECK(gm.at(c).values() == std::vector<double>{1, 1});
}

TEST_CASE("finite-difference agreement for every differentiable op") {
    Rng rng(20240901);
    auto check = [&](const char* name, std::vector<NumArray> params,
                     testutil::GraphBuilder build) {
        for (int rep = 0; rep < 20; ++rep) {
            std::vector<NumArray> p;
            for (const auto& proto : params) p.push_back(random_array(rng, proto.shape()));
            auto rep_out = check_against_fd(p, build);
            INFO("op ", name, " rep ", rep, " max rel err ", rep_out.max_rel_error);
            CHECK(rep_out.max_rel_error < 1e-4);
        }
    };

    NumArray v4 = NumArray::zeros({4});
    NumArray m23 = NumArray::zeros({2, 3});
    NumArray m32 = NumArray::zeros({3, 2});

    check("add", {v4, v4}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.add(p[0], p[1]));
    });
    check("sub", {v4, v4}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.sub(p[0], p[1]));
    });
    check("mul", {v4, v4}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.mul(p[0], p[1]));
    });
    check("matmul", {m23, m32}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.matmul(p[0], p[1]));
    });
    check("sigmoid", {v4}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.sigmoid(p[0]));
    });
    check("scale", {v4}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.scale(p[0], -2.5));
    });
    check("mean", {m23}, [](Tape& t, const std::vector<NodeId>& p) { return t.mean(p[0]); });
    check("reshape", {m23}, [](Tape& t, const std::vector<NodeId>& p) {
        return t.sum(t.mul(t.reshape(p[0], {6}), t.reshape(p[0], {6})));
    });
    check("concat", {v4, v4}, [](Tape& t, const std::vector<NodeId>& p) {
        NodeId c = t.concat({p[0], p[1]}, 0);
        return t.sum(t.mul(c, c));
    });
    check("gather", {m32}, [](Tape& t, const std::vector<NodeId>& p) {
        NodeId g = t.gather_rows(p[0], {1, 1, 2});
        return t.sum(t.mul(g, g));
    });

    // Domain-restricted ops need inputs away from singularities and kinks.
    for (int rep = 0; rep < 20; ++rep) {
        NumArray pos = random_array(rng, {5}, 0.5, 2.0);
        auto r1 = check_against_fd({pos}, [](Tape& t, const std::vector<NodeId>& p) {
            return t.sum(t.log(p[0]));
        });
        CHECK(r1.max_rel_error < 1e-4);
        auto r2 = check_against_fd({pos}, [](Tape& t, const std::vector<NodeId>& p) {
            return t.sum(t.pow_scalar(p[0], 0.25));
        });
        CHECK(r2.max_rel_error < 1e-4);

        NumArray away = NumArray::zeros({6});
        for (auto& v : away.values()) {
            v = rng.uniform(0.2, 1.5);
            if (rng.uniform() < 0.5) v = -v;
        }
        auto r3 = check_against_fd({away}, [](Tape& t, const std::vector<NodeId>& p) {
            return t.sum(t.relu(p[0]));
        });
        CHECK(r3.max_rel_error < 1e-4);

        // Unique minima with margin much larger than the FD step.
        NumArray sep = NumArray::zeros({2, 4});
        for (std::size_t i = 0; i < sep.size(); ++i) sep[i] = rng.uniform(0.0, 1.0) + 0.01 * static_cast<double>(i);
        auto r4 = check_against_fd({sep}, [](Tape& t, const std::vector<NodeId>& p) {
            return t.sum(t.min_reduce(p[0], 1));
        });
        CHECK(r4.max_rel_error < 1e-4);
    }
}

TEST_CASE("two-layer MLP gradient matches finite differences") {
    Rng rng(7);
    for (int rep = 0; rep < 5; ++rep) {
        std::vector<NumArray> params = {
            random_array(rng, {3, 8}), random_array(rng, {1, 8}),
            random_array(rng, {8, 4}), random_array(rng, {1, 4}),
        };
        NumArray input = random_array(rng, {2, 3});
        NumArray target = random_array(rng, {2, 4});
        auto build = [&](Tape& t, const std::vector<NodeId>& p) {
            NodeId x = t.constant(input);
            NodeId ones = t.constant(NumArray({2, 1}, {1, 1}));
            NodeId h = t.relu(t.add(t.matmul(x, p[0]), t.matmul(ones, p[1])));
            NodeId y = t.add(t.matmul(h, p[2]), t.matmul(ones, p[3]));
            NodeId err = t.sub(y, t.constant(target));
            return t.mean(t.mul(err, err));
        };
        auto report = check_against_fd(params, build);
        INFO("rep ", rep, " rel err ", report.max_rel_error);
        CHECK(report.max_rel_error < 1e-4);
    }
}

TEST_CASE("linearity of backward") {
    Rng rng(99);
    NumArray x0 = random_array(rng, {6});
    auto build_parts = [&](Tape& t, NodeId x) {
        NodeId f = t.sum(t.mul(x, x));
        NodeId g = t.mean(t.sigmoid(x));
        return std::pair<NodeId, NodeId>(f, g);
    };
    const double a = 2.25, b = -0.75;

    Tape t1;
    NodeId x1 = t1.param(x0);
    auto [f1, g1] = build_parts(t1, x1);
    GradientMap gm_comb = t1.backward(t1.add(t1.scale(f1, a), t1.scale(g1, b)));

    Tape t2;
    NodeId x2 = t2.param(x0);
    auto [f2, g2] = build_parts(t2, x2);
    GradientMap gm_f = t2.backward(f2);
    GradientMap gm_g = t2.backward(g2);

    for (std::size_t k = 0; k < x0.size(); ++k) {
        const double expect = a * gm_f.at(x2)[k] + b * gm_g.at(x2)[k];
        CHECK(std::fabs(gm_comb.at(x1)[k] - expect) < 1e-10);
    }
}

TEST_CASE("identical graphs give bitwise-identical gradients") {
    auto run = [] {
        Rng rng(4242);
        Tape t;
        NodeId w = t.param(random_array(rng, {4, 4}));
        NodeId x = t.constant(random_array(rng, {4, 4}));
        NodeId y = t.sigmoid(t.matmul(x, w));
        return std::pair<GradientMap, NodeId>(t.backward(t.mean(t.mul(y, y))), w);
    };
    auto [gm1, w1] = run();
    auto [gm2, w2] = run();
    CHECK(bitwise_equal(gm1.at(w1), gm2.at(w2)));
}

TEST_CASE("flatten_gradients concatenates in order") {
    GradientMap gm;
    gm.emplace(0, NumArray::vec({1, 2, 3}));
    gm.emplace(1, NumArray::vec({4, 5}));
    TaskGradient tg = flatten_gradients(gm, {0, 1}, TaskId::detection);
    CHECK(tg.values == std::vector<double>{1, 2, 3, 4, 5});
    CHECK(tg.size() == 5);

    TaskGradient empty = flatten_gradients(gm, {}, TaskId::prediction);
    CHECK(empty.values.empty());

    CHECK_THROWS_AS(flatten_gradients(gm, {0, 7}, TaskId::detection), std::invalid_argument);
}

TEST_CASE("unflatten inverts flatten") {
    GradientMap gm;
    gm.emplace(3, NumArray({2, 2}, {1, 2, 3, 4}));
    gm.emplace(5, NumArray::vec({7, 8}));
    std::vector<NodeId> order = {3, 5};
    TaskGradient tg = flatten_gradients(gm, order, TaskId::prediction);
    GradientMap back = unflatten_gradients(tg, order, {{2, 2}, {2}});
    CHECK(bitwise_equal(back.at(3), gm.at(3)));
    CHECK(bitwise_equal(back.at(5), gm.at(5)));
}
