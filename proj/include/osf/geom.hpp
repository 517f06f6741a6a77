#pragma once

#include <array>
#include <cmath>
#include <limits>

namespace osf {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    double& operator[](int i) { return (&x)[i]; }
    double operator[](int i) const { return (&x)[i]; }

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    Vec3 operator/(double s) const { return {x / s, y / s, z / s}; }
    Vec3 operator-() const { return {-x, -y, -z}; }
    Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }
    Vec3& operator-=(const Vec3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
    Vec3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }
};

inline Vec3 operator*(double s, const Vec3& v) { return v * s; }

inline double dot(const Vec3& a, const Vec3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
inline Vec3 cross(const Vec3& a, const Vec3& b) {
    return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Vec3& v) { return std::sqrt(dot(v, v)); }
inline double norm_sq(const Vec3& v) { return dot(v, v); }

inline Vec3 normalized(const Vec3& v) {
    double n = norm(v);
    return n > 0.0 ? v / n : Vec3{0, 0, 0};
}

inline Vec3 cwise_max(const Vec3& a, const Vec3& b) {
    return {std::max(a.x, b.x), std::max(a.y, b.y), std::max(a.z, b.z)};
}
inline Vec3 cwise_abs(const Vec3& v) { return {std::fabs(v.x), std::fabs(v.y), std::fabs(v.z)}; }
inline double max_component(const Vec3& v) { return std::max(v.x, std::max(v.y, v.z)); }

/// Row-major 3x3 matrix. Used for rigid rotations only.
struct Mat3 {
    std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

    static Mat3 identity() { return Mat3{}; }

    double operator()(int r, int c) const { return m[3 * r + c]; }
    double& operator()(int r, int c) { return m[3 * r + c]; }

    Vec3 operator*(const Vec3& v) const {
        return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
                m[3] * v.x + m[4] * v.y + m[5] * v.z,
                m[6] * v.x + m[7] * v.y + m[8] * v.z};
    }

    Mat3 operator*(const Mat3& o) const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
                double s = 0;
                for (int k = 0; k < 3; ++k) s += (*this)(i, k) * o(k, j);
                r(i, j) = s;
            }
        return r;
    }

    Mat3 transposed() const {
        Mat3 r;
        for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
        return r;
    }

    /// Applies the transpose without materializing it.
    Vec3 transposed_mul(const Vec3& v) const {
        return {m[0] * v.x + m[3] * v.y + m[6] * v.z,
                m[1] * v.x + m[4] * v.y + m[7] * v.z,
                m[2] * v.x + m[5] * v.y + m[8] * v.z};
    }

    double determinant() const {
        return m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
               m[2] * (m[3] * m[7] - m[4] * m[6]);
    }
};

/// Rodrigues formula; the vector's length is the rotation angle in radians.
inline Mat3 rotation_from_axis_angle(const Vec3& aa) {
    double angle = norm(aa);
    if (angle < 1e-14) return Mat3::identity();
    Vec3 a = aa / angle;
    double c = std::cos(angle), s = std::sin(angle), t = 1.0 - c;
    Mat3 r;
    r(0, 0) = c + a.x * a.x * t;
    r(0, 1) = a.x * a.y * t - a.z * s;
    r(0, 2) = a.x * a.z * t + a.y * s;
    r(1, 0) = a.y * a.x * t + a.z * s;
    r(1, 1) = c + a.y * a.y * t;
    r(1, 2) = a.y * a.z * t - a.x * s;
    r(2, 0) = a.z * a.x * t - a.y * s;
    r(2, 1) = a.z * a.y * t + a.x * s;
    r(2, 2) = c + a.z * a.z * t;
    return r;
}

struct RigidTransform {
    Mat3 rotation;
    Vec3 translation;

    Vec3 apply(const Vec3& p) const { return rotation * p + translation; }
    Vec3 apply_inverse(const Vec3& p) const { return rotation.transposed_mul(p - translation); }
    Vec3 rotate(const Vec3& v) const { return rotation * v; }
    Vec3 rotate_inverse(const Vec3& v) const { return rotation.transposed_mul(v); }
};

struct Aabb {
    Vec3 min{0, 0, 0};
    Vec3 max{0, 0, 0};

    Vec3 center() const { return (min + max) * 0.5; }
    Vec3 extent() const { return max - min; }
    double diagonal() const { return norm(max - min); }
    bool contains(const Vec3& p) const {
        return p.x >= min.x && p.x <= max.x && p.y >= min.y && p.y <= max.y && p.z >= min.z &&
               p.z <= max.z;
    }
    Aabb expanded(double margin) const {
        Vec3 m{margin, margin, margin};
        return {min - m, max + m};
    }
};

/// Slab test; returns false when the ray misses the box entirely.
inline bool intersect_aabb(const Aabb& box, const Vec3& origin, const Vec3& dir, double& t_enter,
                           double& t_exit) {
    double t0 = -std::numeric_limits<double>::infinity();
    double t1 = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 3; ++i) {
        double o = origin[i], d = dir[i];
        if (std::fabs(d) < 1e-15) {
            if (o < box.min[i] || o > box.max[i]) return false;
            continue;
        }
        double ta = (box.min[i] - o) / d;
        double tb = (box.max[i] - o) / d;
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
    }
    if (t0 > t1) return false;
    t_enter = t0;
    t_exit = t1;
    return true;
}

struct Ray {
    Vec3 origin;
    Vec3 direction;  // unit length
    double near = 0.0;
    double far = 0.0;

    Vec3 at(double t) const { return origin + direction * t; }
    bool valid() const {
        return near >= 0.0 && near < far && std::fabs(norm(direction) - 1.0) < 1e-9;
    }
};

}  // namespace osf
