#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cooplearn/geom.hpp"
#include "cooplearn/rng.hpp"

namespace coop {

// Temporal regime: 2 Hz frames, 2 s of history plus the current frame,
// 3 s prediction horizon.
constexpr std::size_t kHistFrames = 4;
constexpr std::size_t kFutureFrames = 6;
constexpr double kFramePeriod = 0.5;

struct AgentPose {
    double x = 0.0, y = 0.0;
    double yaw = 0.0;  // (-pi, pi]
};

struct ObjectState {
    double cx = 0.0, cy = 0.0;
    double length = 4.0, width = 2.0;
    double yaw = 0.0;
    double speed = 0.0;    // m/s, >= 0
    double heading = 0.0;  // direction of travel
};

enum class PointFrame { agent_local, ego };

struct PointCloudFrame {
    std::uint32_t agent_id = 0;
    double timestamp = 0.0;  // seconds relative to the current frame
    PointFrame frame = PointFrame::agent_local;
    std::vector<std::array<double, 3>> points;
};

struct SceneAgent {
    std::vector<AgentPose> poses;           // oldest .. current, kHistFrames+1 of them
    std::vector<PointCloudFrame> clouds;    // aligned with poses, agent-local frame
};

struct SceneObject {
    ObjectState state;                            // at the current frame
    std::vector<std::array<double, 2>> future;    // kFutureFrames center waypoints
};

struct Scene {
    std::string id;
    double frame_period = kFramePeriod;
    std::size_t t_hist = kHistFrames;
    std::size_t t_fut = kFutureFrames;
    std::vector<SceneAgent> agents;
    std::vector<SceneObject> objects;

    std::size_t frame_count() const { return t_hist + 1; }
};

struct ScenarioConfig {
    std::size_t agent_count = 2;  // 1..4
    std::size_t object_count = 5;
    double extent_x = 12.8;  // scene spans [-extent, extent] on each axis
    double extent_y = 12.8;
    double speed_min = 0.0;
    double speed_max = 3.0;
    std::size_t rays_per_frame = 360;
    double range_limit = 50.0;
    double noise_sigma = 0.02;
    std::uint64_t seed = 0;

    void validate() const {
        if (agent_count < 1 || agent_count > 4)
            throw std::invalid_argument("scenario: agent count must be in [1,4], got " +
                                        std::to_string(agent_count));
        if (extent_x <= 0.0 || extent_x > 102.4 || extent_y <= 0.0 || extent_y > 40.0)
            throw std::invalid_argument(
                "scenario: extents must fit the evaluation range x in [-102.4,102.4], "
                "y in [-40,40]");
        if (speed_min < 0.0 || speed_max < speed_min)
            throw std::invalid_argument("scenario: invalid speed range");
        if (range_limit <= 0.0) throw std::invalid_argument("scenario: range limit must be > 0");
        if (noise_sigma < 0.0) throw std::invalid_argument("scenario: noise sigma must be >= 0");
    }
};

// Box side returns get a height in this band; ground returns sit at z = 0.
constexpr double kBoxPointZMin = 0.1;
constexpr double kBoxPointZMax = 1.5;

// Casts rays_per_frame beams from the pose, keeping the nearest box-edge hit
// per beam (occlusion) or a ground return when nothing is hit. Output points
// are in the agent's local frame; anything landing outside range is dropped.
inline PointCloudFrame sample_lidar(const AgentPose& pose,
                                    const std::vector<ObjectState>& objects,
                                    const ScenarioConfig& cfg, Rng& rng,
                                    std::uint32_t agent_id = 0, double timestamp = 0.0) {
    PointCloudFrame out;
    out.agent_id = agent_id;
    out.timestamp = timestamp;
    out.frame = PointFrame::agent_local;
    out.points.reserve(cfg.rays_per_frame);

    std::vector<std::array<Vec2, 4>> corners;
    corners.reserve(objects.size());
    for (const auto& ob : objects)
        corners.push_back(box_corners(ob.cx, ob.cy, ob.length, ob.width, ob.yaw));

    const Vec2 origin{pose.x, pose.y};
    for (std::size_t r = 0; r < cfg.rays_per_frame; ++r) {
        const double angle = pose.yaw + 2.0 * kPi * static_cast<double>(r) /
                                            static_cast<double>(cfg.rays_per_frame);
        const Vec2 dir{std::cos(angle), std::sin(angle)};

        double nearest = std::numeric_limits<double>::infinity();
        for (const auto& box : corners) {
            for (int e = 0; e < 4; ++e) {
                auto t = ray_segment_distance(origin, dir, box[e], box[(e + 1) % 4]);
                if (t && *t > 1e-9 && *t < nearest) nearest = *t;
            }
        }

        double px, py, pz;
        if (nearest <= cfg.range_limit) {
            px = origin.x + nearest * dir.x;
            py = origin.y + nearest * dir.y;
            pz = rng.uniform(kBoxPointZMin, kBoxPointZMax);
        } else {
            const double d = rng.uniform(1.0, 0.9 * cfg.range_limit);
            px = origin.x + d * dir.x;
            py = origin.y + d * dir.y;
            pz = 0.0;
        }
        if (cfg.noise_sigma > 0.0) {
            px += rng.gaussian(0.0, cfg.noise_sigma);
            py += rng.gaussian(0.0, cfg.noise_sigma);
            pz += rng.gaussian(0.0, cfg.noise_sigma);
        }

        // To the agent's local frame, then the range gate.
        const Vec2 local = rotate({px - pose.x, py - pose.y}, -pose.yaw);
        if (std::sqrt(local.x * local.x + local.y * local.y + pz * pz) > cfg.range_limit)
            continue;
        out.points.push_back({local.x, local.y, pz});
    }
    return out;
}

inline ObjectState object_at_time(const SceneObject& ob, double dt_from_now) {
    ObjectState s = ob.state;
    s.cx += dt_from_now * s.speed * std::cos(s.heading);
    s.cy += dt_from_now * s.speed * std::sin(s.heading);
    return s;
}

// Deterministic synthetic scenario: constant-velocity objects with bounded
// per-step heading noise in the future rollout, slow-moving agents, and one
// simulated LiDAR sweep per agent per frame.
inline Scene generate_scene(const ScenarioConfig& cfg, const std::string& scene_id = "scene") {
    cfg.validate();
    Rng rng(cfg.seed);
    Scene scene;
    scene.id = scene_id;

    const double margin = 2.0;
    const double ax = std::max(0.5, cfg.extent_x - margin);
    const double ay = std::max(0.5, cfg.extent_y - margin);

    // Objects first so every agent's sweeps see the same world.
    scene.objects.resize(cfg.object_count);
    for (auto& ob : scene.objects) {
        ObjectState st;
        st.cx = rng.uniform(-ax, ax);
        st.cy = rng.uniform(-ay, ay);
        st.length = rng.uniform(2.2, 3.2);
        st.width = rng.uniform(1.3, 1.9);
        st.heading = normalize_angle(rng.uniform(-kPi, kPi));
        st.yaw = st.heading;
        st.speed = rng.uniform(cfg.speed_min, cfg.speed_max);
        ob.state = st;

        ob.future.resize(kFutureFrames);
        double h = st.heading;
        double wx = st.cx, wy = st.cy;
        for (std::size_t k = 0; k < kFutureFrames; ++k) {
            h = normalize_angle(h + rng.uniform(-0.05, 0.05));
            wx += kFramePeriod * st.speed * std::cos(h);
            wy += kFramePeriod * st.speed * std::sin(h);
            ob.future[k] = {wx, wy};
        }
    }

    struct AgentMotion {
        AgentPose current;
        double speed, heading;
    };
    std::vector<AgentMotion> motions(cfg.agent_count);
    for (auto& m : motions) {
        m.current.x = rng.uniform(-ax, ax);
        m.current.y = rng.uniform(-ay, ay);
        m.current.yaw = normalize_angle(rng.uniform(-kPi, kPi));
        m.speed = rng.uniform(0.0, 1.0);
        m.heading = m.current.yaw;
    }

    scene.agents.resize(cfg.agent_count);
    for (std::size_t a = 0; a < cfg.agent_count; ++a) {
        SceneAgent& agent = scene.agents[a];
        agent.poses.resize(kHistFrames + 1);
        agent.clouds.resize(kHistFrames + 1);
        for (std::size_t f = 0; f <= kHistFrames; ++f) {
            const double dt = (static_cast<double>(f) - static_cast<double>(kHistFrames)) *
                              kFramePeriod;  // <= 0
            AgentPose pose;
            pose.x = motions[a].current.x + dt * motions[a].speed * std::cos(motions[a].heading);
            pose.y = motions[a].current.y + dt * motions[a].speed * std::sin(motions[a].heading);
            pose.yaw = motions[a].current.yaw;
            agent.poses[f] = pose;

            std::vector<ObjectState> at_time;
            at_time.reserve(scene.objects.size());
            for (const auto& ob : scene.objects) at_time.push_back(object_at_time(ob, dt));
            agent.clouds[f] =
                sample_lidar(pose, at_time, cfg, rng, static_cast<std::uint32_t>(a), dt);
        }
    }
    return scene;
}

// ---------------------------------------------------------------------------
// Scene files: UTF-8, line-delimited records, one frame record per line.
// Doubles are printed with 17 significant digits so read(write(s)) == s.

namespace detail {

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct LineParser {
    std::istringstream in;
    std::size_t line_no;
    explicit LineParser(const std::string& line, std::size_t n) : in(line), line_no(n) {}

    [[noreturn]] void fail(const std::string& what) const {
        throw std::runtime_error("scene file line " + std::to_string(line_no) + ": " + what);
    }
    std::string word(const char* what) {
        std::string w;
        if (!(in >> w)) fail(std::string("missing ") + what);
        return w;
    }
    double number(const char* what) {
        double v;
        if (!(in >> v)) fail(std::string("missing or malformed ") + what);
        return v;
    }
    std::size_t index(const char* what) {
        long long v;
        if (!(in >> v) || v < 0) fail(std::string("missing or malformed ") + what);
        return static_cast<std::size_t>(v);
    }
    void expect_kv(const char* key, std::size_t expected) {
        std::string w = word(key);
        const std::string prefix = std::string(key) + "=";
        if (w.rfind(prefix, 0) != 0) fail("expected '" + prefix + "...', got '" + w + "'");
        if (std::stoull(w.substr(prefix.size())) != expected)
            fail(std::string(key) + " mismatch");
    }
    void expect_end() {
        std::string extra;
        if (in >> extra) fail("unexpected trailing field '" + extra + "'");
    }
};

}  // namespace detail

inline void write_scene(std::ostream& out, const Scene& scene) {
    using detail::fmt_double;
    out << "scene v1 " << scene.id << " agents=" << scene.agents.size()
        << " objects=" << scene.objects.size() << " hist=" << scene.t_hist
        << " fut=" << scene.t_fut << " dt=" << fmt_double(scene.frame_period) << "\n";
    for (std::size_t a = 0; a < scene.agents.size(); ++a) {
        const SceneAgent& agent = scene.agents[a];
        for (std::size_t f = 0; f < agent.poses.size(); ++f) {
            const AgentPose& p = agent.poses[f];
            out << "agent " << a << " pose " << f << " " << fmt_double(p.x) << " "
                << fmt_double(p.y) << " " << fmt_double(p.yaw) << "\n";
        }
        for (std::size_t f = 0; f < agent.clouds.size(); ++f) {
            const PointCloudFrame& c = agent.clouds[f];
            out << "agent " << a << " cloud " << f << " " << fmt_double(c.timestamp) << " "
                << c.points.size();
            for (const auto& pt : c.points)
                out << " " << fmt_double(pt[0]) << " " << fmt_double(pt[1]) << " "
                    << fmt_double(pt[2]);
            out << "\n";
        }
    }
    for (std::size_t j = 0; j < scene.objects.size(); ++j) {
        const SceneObject& ob = scene.objects[j];
        const ObjectState& s = ob.state;
        out << "object " << j << " state " << fmt_double(s.cx) << " " << fmt_double(s.cy) << " "
            << fmt_double(s.length) << " " << fmt_double(s.width) << " " << fmt_double(s.yaw)
            << " " << fmt_double(s.speed) << " " << fmt_double(s.heading) << "\n";
        out << "object " << j << " future " << ob.future.size();
        for (const auto& w : ob.future) out << " " << fmt_double(w[0]) << " " << fmt_double(w[1]);
        out << "\n";
    }
    out << "end\n";
}

inline void write_scene(const std::string& path, const Scene& scene) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("scene: cannot write '" + path + "'");
    write_scene(out, scene);
    if (!out) throw std::runtime_error("scene: write failed for '" + path + "'");
}

inline Scene read_scene(std::istream& in, const std::string& label = "<stream>") {
    Scene scene;
    std::string line;
    std::size_t line_no = 0;
    bool have_header = false, have_end = false;
    std::size_t agent_count = 0, object_count = 0;

    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        detail::LineParser p(line, line_no);
        const std::string kind = p.word("record kind");
        if (!have_header) {
            if (kind != "scene") p.fail("expected header record 'scene', got '" + kind + "'");
            const std::string version = p.word("format version");
            if (version != "v1") p.fail("unsupported format version '" + version + "'");
            scene.id = p.word("scene id");
            std::string field = p.word("agents field");
            auto parse_kv = [&p](const std::string& w, const char* key) -> std::size_t {
                const std::string prefix = std::string(key) + "=";
                if (w.rfind(prefix, 0) != 0)
                    p.fail("expected '" + prefix + "...', got '" + w + "'");
                return std::stoull(w.substr(prefix.size()));
            };
            agent_count = parse_kv(field, "agents");
            object_count = parse_kv(p.word("objects field"), "objects");
            scene.t_hist = parse_kv(p.word("hist field"), "hist");
            scene.t_fut = parse_kv(p.word("fut field"), "fut");
            std::string dtw = p.word("dt field");
            if (dtw.rfind("dt=", 0) != 0) p.fail("expected 'dt=...', got '" + dtw + "'");
            scene.frame_period = std::stod(dtw.substr(3));
            p.expect_end();
            scene.agents.resize(agent_count);
            for (auto& a : scene.agents) {
                a.poses.resize(scene.t_hist + 1);
                a.clouds.resize(scene.t_hist + 1);
            }
            scene.objects.resize(object_count);
            have_header = true;
            continue;
        }
        if (kind == "end") {
            p.expect_end();
            have_end = true;
            break;
        } else if (kind == "agent") {
            const std::size_t a = p.index("agent index");
            if (a >= agent_count) p.fail("agent index out of range");
            const std::string what = p.word("agent record type");
            const std::size_t f = p.index("frame index");
            if (f > scene.t_hist) p.fail("frame index out of range");
            if (what == "pose") {
                AgentPose pose;
                pose.x = p.number("x");
                pose.y = p.number("y");
                pose.yaw = p.number("yaw");
                p.expect_end();
                scene.agents[a].poses[f] = pose;
            } else if (what == "cloud") {
                PointCloudFrame c;
                c.agent_id = static_cast<std::uint32_t>(a);
                c.frame = PointFrame::agent_local;
                c.timestamp = p.number("timestamp");
                const std::size_t n = p.index("point count");
                c.points.resize(n);
                for (std::size_t i = 0; i < n; ++i) {
                    c.points[i][0] = p.number("point x");
                    c.points[i][1] = p.number("point y");
                    c.points[i][2] = p.number("point z");
                }
                p.expect_end();
                scene.agents[a].clouds[f] = std::move(c);
            } else {
                p.fail("unknown agent record type '" + what + "'");
            }
        } else if (kind == "object") {
            const std::size_t j = p.index("object index");
            if (j >= object_count) p.fail("object index out of range");
            const std::string what = p.word("object record type");
            if (what == "state") {
                ObjectState s;
                s.cx = p.number("cx");
                s.cy = p.number("cy");
                s.length = p.number("length");
                s.width = p.number("width");
                s.yaw = p.number("yaw");
                s.speed = p.number("speed");
                s.heading = p.number("heading");
                p.expect_end();
                scene.objects[j].state = s;
            } else if (what == "future") {
                const std::size_t n = p.index("waypoint count");
                if (n != scene.t_fut) p.fail("future waypoint count mismatch");
                scene.objects[j].future.resize(n);
                for (std::size_t k = 0; k < n; ++k) {
                    scene.objects[j].future[k][0] = p.number("waypoint x");
                    scene.objects[j].future[k][1] = p.number("waypoint y");
                }
                p.expect_end();
            } else {
                p.fail("unknown object record type '" + what + "'");
            }
        } else {
            p.fail("unknown field '" + kind + "'");
        }
    }
    if (!have_header)
        throw std::runtime_error("scene file '" + label + "': missing section: header");
    if (!have_end)
        throw std::runtime_error("scene file '" + label + "': missing section: end record");
    return scene;
}

inline Scene read_scene(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("scene: cannot open '" + path + "'");
    return read_scene(in, path);
}

inline bool operator==(const AgentPose& a, const AgentPose& b) {
    return a.x == b.x && a.y == b.y && a.yaw == b.yaw;
}
inline bool operator==(const ObjectState& a, const ObjectState& b) {
    return a.cx == b.cx && a.cy == b.cy && a.length == b.length && a.width == b.width &&
           a.yaw == b.yaw && a.speed == b.speed && a.heading == b.heading;
}
inline bool operator==(const PointCloudFrame& a, const PointCloudFrame& b) {
    return a.agent_id == b.agent_id && a.timestamp == b.timestamp && a.frame == b.frame &&
           a.points == b.points;
}
inline bool operator==(const SceneAgent& a, const SceneAgent& b) {
    return a.poses == b.poses && a.clouds == b.clouds;
}
inline bool operator==(const SceneObject& a, const SceneObject& b) {
    return a.state == b.state && a.future == b.future;
}
inline bool operator==(const Scene& a, const Scene& b) {
    return a.id == b.id && a.frame_period == b.frame_period && a.t_hist == b.t_hist &&
           a.t_fut == b.t_fut && a.agents == b.agents && a.objects == b.objects;
}

}  // namespace coop
