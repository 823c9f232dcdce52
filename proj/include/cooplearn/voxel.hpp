#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "cooplearn/geom.hpp"
#include "cooplearn/rng.hpp"
#include "cooplearn/scene.hpp"

namespace coop {

struct VoxelSpec {
    double x_min = -102.4, x_max = 102.4;
    double y_min = -40.0, y_max = 40.0;
    double z_min = -2.0, z_max = 2.0;
    double voxel_x = 0.1, voxel_y = 0.1, voxel_z = 0.2;
    std::size_t max_points_per_voxel = 5;
    std::size_t max_voxels = 32000;
    double bev_cell = 0.4;  // integer multiple of the xy voxel size

    void validate() const {
        auto divisible = [](double range, double step) {
            const double q = range / step;
            return std::fabs(q - std::round(q)) < 1e-6 && q >= 1.0;
        };
        if (!(x_max > x_min && y_max > y_min && z_max > z_min))
            throw std::invalid_argument("voxel spec: empty range");
        if (!divisible(x_max - x_min, voxel_x) || !divisible(y_max - y_min, voxel_y) ||
            !divisible(z_max - z_min, voxel_z))
            throw std::invalid_argument("voxel spec: ranges must be divisible by voxel sizes");
        if (!divisible(bev_cell, voxel_x) || !divisible(bev_cell, voxel_y))
            throw std::invalid_argument(
                "voxel spec: BEV cell must be an integer multiple of the voxel size");
        if (!divisible(x_max - x_min, bev_cell) || !divisible(y_max - y_min, bev_cell))
            throw std::invalid_argument("voxel spec: ranges must be divisible by the BEV cell");
        if (max_points_per_voxel < 1 || max_voxels < 1)
            throw std::invalid_argument("voxel spec: caps must be >= 1");
    }

    std::size_t nx() const { return static_cast<std::size_t>(std::round((x_max - x_min) / voxel_x)); }
    std::size_t ny() const { return static_cast<std::size_t>(std::round((y_max - y_min) / voxel_y)); }
    std::size_t nz() const { return static_cast<std::size_t>(std::round((z_max - z_min) / voxel_z)); }
    std::size_t z_levels() const { return nz(); }

    std::size_t cells_x() const {
        return static_cast<std::size_t>(std::round((x_max - x_min) / bev_cell));
    }
    std::size_t cells_y() const {
        return static_cast<std::size_t>(std::round((y_max - y_min) / bev_cell));
    }
    std::size_t cell_count() const { return cells_x() * cells_y(); }

    bool in_range(const std::array<double, 3>& p) const {
        return p[0] >= x_min && p[0] < x_max && p[1] >= y_min && p[1] < y_max && p[2] >= z_min &&
               p[2] < z_max;
    }

    // Flat BEV cell id of an in-range point: cx * cells_y + cy.
    std::size_t cell_of(double x, double y) const {
        const std::size_t cx = static_cast<std::size_t>(std::floor((x - x_min) / bev_cell));
        const std::size_t cy = static_cast<std::size_t>(std::floor((y - y_min) / bev_cell));
        return cx * cells_y() + cy;
    }

    std::array<double, 2> cell_center(std::size_t cell) const {
        const std::size_t cx = cell / cells_y();
        const std::size_t cy = cell % cells_y();
        return {x_min + (static_cast<double>(cx) + 0.5) * bev_cell,
                y_min + (static_cast<double>(cy) + 0.5) * bev_cell};
    }

    std::size_t z_level_of(double z) const {
        return static_cast<std::size_t>(std::floor((z - z_min) / voxel_z));
    }
};

// Rigid 2D transform from the source agent's local frame into the ego frame;
// z passes through.
inline PointCloudFrame transform_to_ego(const PointCloudFrame& cloud, const AgentPose& src,
                                        const AgentPose& ego) {
    PointCloudFrame out;
    out.agent_id = cloud.agent_id;
    out.timestamp = cloud.timestamp;
    out.frame = PointFrame::ego;
    out.points.reserve(cloud.points.size());
    const double cs = std::cos(src.yaw), ss = std::sin(src.yaw);
    const double ce = std::cos(ego.yaw), se = std::sin(ego.yaw);
    for (const auto& p : cloud.points) {
        const double wx = cs * p[0] - ss * p[1] + src.x;
        const double wy = ss * p[0] + cs * p[1] + src.y;
        const double dx = wx - ego.x, dy = wy - ego.y;
        out.points.push_back({ce * dx + se * dy, -se * dx + ce * dy, p[2]});
    }
    return out;
}

struct Voxel {
    std::size_t ix = 0, iy = 0, iz = 0;
    std::array<std::array<double, 3>, 8> slots{};  // first max_points_per_voxel used
    std::size_t count = 0;
};

struct VoxelGrid {
    std::vector<Voxel> voxels;  // first-seen order, no duplicates
    std::size_t kept_points = 0;
    std::size_t dropped_out_of_range = 0;
    std::size_t dropped_over_cap = 0;  // per-voxel cap plus voxel-budget drops
};

// Assigns points to voxels by floor((coord - min) / size). Within a voxel the
// first max_points_per_voxel points in input order are kept; at most
// max_voxels voxels are created, in first-seen order.
inline VoxelGrid voxelize(const std::vector<std::array<double, 3>>& points,
                          const VoxelSpec& spec) {
    if (spec.max_points_per_voxel > 8)
        throw std::invalid_argument("voxelize: max_points_per_voxel > 8 unsupported");
    VoxelGrid grid;
    std::unordered_map<std::uint64_t, std::size_t> slot_of;
    slot_of.reserve(points.size());
    const std::uint64_t ny = spec.ny(), nz = spec.nz();
    for (const auto& p : points) {
        if (!spec.in_range(p)) {
            ++grid.dropped_out_of_range;
            continue;
        }
        const std::uint64_t ix = static_cast<std::uint64_t>(std::floor((p[0] - spec.x_min) / spec.voxel_x));
        const std::uint64_t iy = static_cast<std::uint64_t>(std::floor((p[1] - spec.y_min) / spec.voxel_y));
        const std::uint64_t iz = static_cast<std::uint64_t>(std::floor((p[2] - spec.z_min) / spec.voxel_z));
        const std::uint64_t key = (ix * ny + iy) * nz + iz;
        auto it = slot_of.find(key);
        if (it == slot_of.end()) {
            if (grid.voxels.size() >= spec.max_voxels) {
                ++grid.dropped_over_cap;
                continue;
            }
            Voxel v;
            v.ix = ix;
            v.iy = iy;
            v.iz = iz;
            it = slot_of.emplace(key, grid.voxels.size()).first;
            grid.voxels.push_back(v);
        }
        Voxel& v = grid.voxels[it->second];
        if (v.count < spec.max_points_per_voxel) {
            v.slots[v.count++] = p;
            ++grid.kept_points;
        } else {
            ++grid.dropped_over_cap;
        }
    }
    return grid;
}

// Completed by build_targets for each masked cell.
struct CellTarget {
    std::size_t cell = 0;
    std::vector<std::array<double, 3>> points;  // merged ego + cooperative points
    std::vector<std::uint8_t> occupancy;        // one label per z level
};

struct BevMaskPlan {
    std::vector<std::size_t> non_empty;  // sorted flat cell ids
    std::vector<std::size_t> masked;     // sorted subset of non_empty
    std::vector<CellTarget> targets;     // aligned with masked
};

// Sorted flat ids of BEV cells holding at least one in-range point.
inline std::vector<std::size_t> non_empty_cells(const std::vector<std::array<double, 3>>& points,
                                                const VoxelSpec& spec) {
    std::vector<std::size_t> cells;
    cells.reserve(points.size());
    for (const auto& p : points)
        if (spec.in_range(p)) cells.push_back(spec.cell_of(p[0], p[1]));
    std::sort(cells.begin(), cells.end());
    cells.erase(std::unique(cells.begin(), cells.end()), cells.end());
    return cells;
}

// Uniform subset of exactly ceil(ratio * K) cells, without replacement,
// deterministic in the seed. Empty cells are never candidates.
inline BevMaskPlan mask_grids(const std::vector<std::size_t>& non_empty, double ratio,
                              std::uint64_t seed) {
    if (ratio < 0.0 || ratio > 1.0)
        throw std::invalid_argument("mask_grids: ratio must be in [0,1], got " +
                                    std::to_string(ratio));
    BevMaskPlan plan;
    plan.non_empty = non_empty;
    std::sort(plan.non_empty.begin(), plan.non_empty.end());
    plan.non_empty.erase(std::unique(plan.non_empty.begin(), plan.non_empty.end()),
                         plan.non_empty.end());
    const std::size_t k =
        static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(plan.non_empty.size())));
    Rng rng(seed);
    std::vector<std::size_t> pick = rng.sample_without_replacement(plan.non_empty.size(), k);
    plan.masked.reserve(k);
    for (std::size_t i : pick) plan.masked.push_back(plan.non_empty[i]);
    std::sort(plan.masked.begin(), plan.masked.end());
    return plan;
}

// Fills per-masked-cell ground-truth point lists and per-z-level occupancy
// labels from the merged multi-agent ego-frame cloud.
inline void build_targets(const std::vector<std::array<double, 3>>& merged_points,
                          const VoxelSpec& spec, BevMaskPlan& plan) {
    plan.targets.clear();
    plan.targets.resize(plan.masked.size());
    const std::size_t levels = spec.z_levels();
    std::unordered_map<std::size_t, std::size_t> target_of;
    target_of.reserve(plan.masked.size());
    for (std::size_t i = 0; i < plan.masked.size(); ++i) {
        plan.targets[i].cell = plan.masked[i];
        plan.targets[i].occupancy.assign(levels, 0);
        target_of.emplace(plan.masked[i], i);
    }
    for (const auto& p : merged_points) {
        if (!spec.in_range(p)) continue;
        auto it = target_of.find(spec.cell_of(p[0], p[1]));
        if (it == target_of.end()) continue;
        CellTarget& t = plan.targets[it->second];
        t.points.push_back(p);
        t.occupancy[spec.z_level_of(p[2])] = 1;
    }
    for (const auto& t : plan.targets) {
        if (t.points.empty())
            throw std::logic_error("build_targets: masked cell " + std::to_string(t.cell) +
                                   " has no merged points; masked set must come from the same "
                                   "merged cloud");
    }
}

}  // namespace coop
