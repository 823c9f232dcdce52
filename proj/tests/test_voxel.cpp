#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "cooplearn/rng.hpp"
#include "cooplearn/voxel.hpp"

using namespace coop;

namespace {

VoxelSpec default_spec() {
    VoxelSpec spec;  // paper-style defaults
    spec.validate();
    return spec;
}

VoxelSpec small_spec() {
    VoxelSpec spec;
    spec.x_min = -12.8;
    spec.x_max = 12.8;
    spec.y_min = -12.8;
    spec.y_max = 12.8;
    spec.z_min = -0.4;
    spec.z_max = 2.0;
    spec.bev_cell = 0.8;
    spec.validate();
    return spec;
}

}  // namespace

TEST_CASE("transform_to_ego identity when src == ego") {
    PointCloudFrame f;
    f.points = {{1, 2, 3}, {-4, 5, 0.5}};
    AgentPose pose{3.0, -2.0, 0.7};
    PointCloudFrame out = transform_to_ego(f, pose, pose);
    CHECK(out.frame == PointFrame::ego);
    for (std::size_t i = 0; i < f.points.size(); ++i)
        for (int d = 0; d < 3; ++d)
            CHECK(out.points[i][d] == doctest::Approx(f.points[i][d]).epsilon(1e-12));
}

TEST_CASE("pure translation shifts points the opposite way") {
    PointCloudFrame f;
    f.points = {{0, 0, 1}, {2, 3, 0}};
    AgentPose src{1.0, 0.0, 0.0}, ego{0.0, 0.0, 0.0};
    PointCloudFrame out = transform_to_ego(f, src, ego);
    CHECK(out.points[0][0] == doctest::Approx(1.0));
    CHECK(out.points[0][1] == doctest::Approx(0.0));
    // In the other direction: ego ahead of src by (1,0) means x shifts by -1.
    PointCloudFrame out2 = transform_to_ego(f, ego, src);
    CHECK(out2.points[0][0] == doctest::Approx(-1.0));
}

TEST_CASE("quarter-turn source yaw rotates local points") {
    PointCloudFrame f;
    f.points = {{1, 0, 0.2}};
    AgentPose src{0.0, 0.0, kPi / 2.0}, ego{0.0, 0.0, 0.0};
    PointCloudFrame out = transform_to_ego(f, src, ego);
    CHECK(out.points[0][0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(out.points[0][1] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(out.points[0][2] == doctest::Approx(0.2));
}

TEST_CASE("transform_to_ego inverts within 1e-9") {
    Rng rng(21);
    for (int rep = 0; rep < 20; ++rep) {
        AgentPose src{rng.uniform(-10, 10), rng.uniform(-10, 10),
                      normalize_angle(rng.uniform(-kPi, kPi))};
        AgentPose ego{rng.uniform(-10, 10), rng.uniform(-10, 10),
                      normalize_angle(rng.uniform(-kPi, kPi))};
        PointCloudFrame f;
        for (int i = 0; i < 16; ++i)
            f.points.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-1, 2)});
        PointCloudFrame there = transform_to_ego(f, src, ego);
        PointCloudFrame back = transform_to_ego(there, ego, src);
        for (std::size_t i = 0; i < f.points.size(); ++i)
            for (int d = 0; d < 3; ++d)
                CHECK(std::fabs(back.points[i][d] - f.points[i][d]) < 1e-9);
    }
}

TEST_CASE("voxelize empty input gives empty grid") {
    VoxelGrid g = voxelize({}, default_spec());
    CHECK(g.voxels.empty());
    CHECK(g.kept_points == 0);
}

TEST_CASE("six coincident points cap at five per voxel") {
    std::vector<std::array<double, 3>> pts(6, {0.05, 0.05, 0.05});
    VoxelGrid g = voxelize(pts, default_spec());
    REQUIRE(g.voxels.size() == 1);
    CHECK(g.voxels[0].count == 5);
    CHECK(g.kept_points == 5);
    CHECK(g.dropped_over_cap == 1);
}

TEST_CASE("corner point lands in voxel (0,0,0)") {
    VoxelSpec spec = default_spec();
    std::vector<std::array<double, 3>> pts = {
        {spec.x_min + 0.05, spec.y_min + 0.05, spec.z_min + 0.1}};
    VoxelGrid g = voxelize(pts, spec);
    REQUIRE(g.voxels.size() == 1);
    CHECK(g.voxels[0].ix == 0);
    CHECK(g.voxels[0].iy == 0);
    CHECK(g.voxels[0].iz == 0);
}

TEST_CASE("point conservation across kept and dropped counts") {
    VoxelSpec spec = small_spec();
    Rng rng(31);
    for (int rep = 0; rep < 10; ++rep) {
        std::vector<std::array<double, 3>> pts;
        const std::size_t n = 200 + static_cast<std::size_t>(rng.uniform_index(800));
        for (std::size_t i = 0; i < n; ++i)
            pts.push_back({rng.uniform(-20, 20), rng.uniform(-20, 20), rng.uniform(-2, 4)});
        VoxelGrid g = voxelize(pts, spec);
        CHECK(g.kept_points + g.dropped_out_of_range + g.dropped_over_cap == n);
        std::size_t slot_total = 0;
        for (const auto& v : g.voxels) slot_total += v.count;
        CHECK(slot_total == g.kept_points);
    }
}

TEST_CASE("voxel budget drops whole new voxels once exhausted") {
    VoxelSpec spec = small_spec();
    spec.max_voxels = 4;
    std::vector<std::array<double, 3>> pts;
    for (int i = 0; i < 10; ++i)
        pts.push_back({-12.0 + 0.25 * static_cast<double>(i), 0.0, 0.0});
    VoxelGrid g = voxelize(pts, spec);
    CHECK(g.voxels.size() == 4);
    CHECK(g.kept_points + g.dropped_over_cap == 10);
}

TEST_CASE("mask counts follow the ceiling rule") {
    std::vector<std::size_t> cells;
    for (std::size_t i = 0; i < 10; ++i) cells.push_back(i * 3);
    BevMaskPlan plan = mask_grids(cells, 0.7, 42);
    CHECK(plan.masked.size() == 7);
    CHECK(mask_grids(cells, 0.0, 42).masked.empty());
    CHECK(mask_grids(cells, 1.0, 42).masked.size() == 10);

    for (std::size_t K = 1; K <= 60; ++K) {
        std::vector<std::size_t> c(K);
        for (std::size_t i = 0; i < K; ++i) c[i] = i;
        for (double ratio : {0.0, 0.3, 0.7, 1.0}) {
            const std::size_t expect =
                (static_cast<std::size_t>(ratio * 10.0 + 0.5) * K + 9) / 10;  // exact rational
            CHECK(mask_grids(c, ratio, K).masked.size() == expect);
        }
    }
}

TEST_CASE("masked set is a deterministic subset of non-empty") {
    std::vector<std::size_t> cells = {5, 1, 9, 33, 2, 8, 21, 13};
    BevMaskPlan a = mask_grids(cells, 0.5, 7);
    BevMaskPlan b = mask_grids(cells, 0.5, 7);
    CHECK(a.masked == b.masked);
    for (std::size_t m : a.masked)
        CHECK(std::find(a.non_empty.begin(), a.non_empty.end(), m) != a.non_empty.end());
    BevMaskPlan c = mask_grids(cells, 0.5, 8);
    CHECK(a.masked.size() == c.masked.size());
}

TEST_CASE("build_targets collects merged points and occupancy labels") {
    VoxelSpec spec = small_spec();

    SUBCASE("single point yields a single-point target") {
        std::vector<std::array<double, 3>> merged = {{0.1, 0.1, 0.1}};
        BevMaskPlan plan = mask_grids(non_empty_cells(merged, spec), 1.0, 0);
        build_targets(merged, spec, plan);
        REQUIRE(plan.targets.size() == 1);
        CHECK(plan.targets[0].points.size() == 1);
        CHECK(plan.targets[0].points[0] == merged[0]);
    }

    SUBCASE("contributions from two agents accumulate in one cell") {
        std::vector<std::array<double, 3>> ego_pts = {{0.1, 0.1, 0.1}, {0.2, 0.2, 0.3}};
        std::vector<std::array<double, 3>> coop_pts = {{0.3, 0.3, 0.5}};
        std::vector<std::array<double, 3>> merged = ego_pts;
        merged.insert(merged.end(), coop_pts.begin(), coop_pts.end());
        BevMaskPlan plan = mask_grids(non_empty_cells(merged, spec), 1.0, 0);
        build_targets(merged, spec, plan);
        REQUIRE(plan.targets.size() == 1);
        CHECK(plan.targets[0].points.size() == 3);
    }

    SUBCASE("occupancy labels are one-hot for a single occupied z level") {
        // z level 2 spans [z_min + 2*vz, z_min + 3*vz) = [0.0, 0.2)
        std::vector<std::array<double, 3>> merged = {{0.1, 0.1, 0.05}, {0.15, 0.12, 0.1}};
        BevMaskPlan plan = mask_grids(non_empty_cells(merged, spec), 1.0, 0);
        build_targets(merged, spec, plan);
        REQUIRE(plan.targets.size() == 1);
        const auto& occ = plan.targets[0].occupancy;
        REQUIRE(occ.size() == spec.z_levels());
        for (std::size_t l = 0; l < occ.size(); ++l) CHECK(occ[l] == (l == 2 ? 1 : 0));
    }
}

TEST_CASE("masked fraction is exact for all K") {
    Rng rng(5);
    for (std::size_t K = 1; K <= 40; ++K) {
        std::vector<std::size_t> cells(K);
        for (std::size_t i = 0; i < K; ++i) cells[i] = 100 + i;
        const double ratio = rng.uniform();
        BevMaskPlan plan = mask_grids(cells, ratio, K * 7);
        CHECK(plan.masked.size() ==
              static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(K))));
    }
}
