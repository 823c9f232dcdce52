#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <vector>

namespace coop {

constexpr double kPi = 3.14159265358979323846;

// Normalizes to (-pi, pi].
inline double normalize_angle(double a) {
    a = std::fmod(a, 2.0 * kPi);
    if (a <= -kPi) a += 2.0 * kPi;
    if (a > kPi) a -= 2.0 * kPi;
    return a;
}

struct Vec2 {
    double x = 0.0, y = 0.0;

    Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
    Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
    Vec2 operator*(double s) const { return {x * s, y * s}; }
    double dot(const Vec2& o) const { return x * o.x + y * o.y; }
    double cross(const Vec2& o) const { return x * o.y - y * o.x; }
    double norm() const { return std::hypot(x, y); }
};

inline Vec2 rotate(const Vec2& p, double yaw) {
    const double c = std::cos(yaw), s = std::sin(yaw);
    return {c * p.x - s * p.y, s * p.x + c * p.y};
}

// Corners of an oriented rectangle, counter-clockwise.
inline std::array<Vec2, 4> box_corners(double cx, double cy, double length, double width,
                                       double yaw) {
    const double hl = 0.5 * length, hw = 0.5 * width;
    const std::array<Vec2, 4> local = {Vec2{hl, hw}, Vec2{-hl, hw}, Vec2{-hl, -hw},
                                       Vec2{hl, -hw}};
    std::array<Vec2, 4> out;
    for (int i = 0; i < 4; ++i) {
        Vec2 r = rotate(local[i], yaw);
        out[i] = {cx + r.x, cy + r.y};
    }
    return out;
}

// Distance along the ray (origin + t*dir, t >= 0) to segment [a,b], if any.
inline std::optional<double> ray_segment_distance(const Vec2& origin, const Vec2& dir,
                                                  const Vec2& a, const Vec2& b) {
    const Vec2 seg = b - a;
    const double denom = dir.cross(seg);
    if (std::fabs(denom) < 1e-15) return std::nullopt;  // parallel
    const Vec2 ao = a - origin;
    const double t = ao.cross(seg) / denom;
    const double u = ao.cross(dir) / denom;
    if (t < 0.0 || u < 0.0 || u > 1.0) return std::nullopt;
    return t;
}

// Shoelace area of a simple polygon (positive for counter-clockwise order).
inline double polygon_area(const std::vector<Vec2>& poly) {
    double s = 0.0;
    const std::size_t n = poly.size();
    for (std::size_t i = 0; i < n; ++i) {
        const Vec2& p = poly[i];
        const Vec2& q = poly[(i + 1) % n];
        s += p.cross(q);
    }
    return 0.5 * s;
}

// BEV intersection-over-union of two oriented rectangles via convex clipping.
// Declared after clip_convex below.
inline std::vector<Vec2> clip_convex(const std::vector<Vec2>& subject,
                                     const std::vector<Vec2>& clip);

inline double oriented_box_iou(double acx, double acy, double al, double aw, double ayaw,
                               double bcx, double bcy, double bl, double bw, double byaw) {
    auto ca = box_corners(acx, acy, al, aw, ayaw);
    auto cb = box_corners(bcx, bcy, bl, bw, byaw);
    std::vector<Vec2> pa(ca.begin(), ca.end());
    std::vector<Vec2> pb(cb.begin(), cb.end());
    const std::vector<Vec2> inter = clip_convex(pa, pb);
    double inter_area = 0.0;
    if (inter.size() >= 3) inter_area = std::fabs(polygon_area(inter));
    const double union_area = al * aw + bl * bw - inter_area;
    if (union_area <= 0.0) return 0.0;
    double iou = inter_area / union_area;
    if (iou < 0.0) iou = 0.0;
    if (iou > 1.0) iou = 1.0;
    return iou;
}

// Sutherland-Hodgman clip of a convex polygon against convex clip region.
inline std::vector<Vec2> clip_convex(const std::vector<Vec2>& subject,
                                     const std::vector<Vec2>& clip) {
    std::vector<Vec2> out = subject;
    const std::size_t n = clip.size();
    for (std::size_t i = 0; i < n && !out.empty(); ++i) {
        const Vec2 a = clip[i];
        const Vec2 b = clip[(i + 1) % n];
        const Vec2 edge = b - a;
        std::vector<Vec2> in;
        in.swap(out);
        const std::size_t m = in.size();
        for (std::size_t j = 0; j < m; ++j) {
            const Vec2& p = in[j];
            const Vec2& q = in[(j + 1) % m];
            const double sp = edge.cross(p - a);
            const double sq = edge.cross(q - a);
            if (sp >= 0.0) out.push_back(p);
            if ((sp >= 0.0) != (sq >= 0.0)) {
                const double t = sp / (sp - sq);
                out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
            }
        }
    }
    return out;
}

}  // namespace coop
