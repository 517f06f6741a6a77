#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osf/geom.hpp"

namespace osf {

enum class PrimitiveKind { Sphere, Box, Cylinder, Plane };

/// One solid in an analytic scene. The union of all primitives is the
/// ground-truth shape; every query below is exact (up to the stated CSG
/// caveat for overlapping interiors).
struct Primitive {
    PrimitiveKind kind = PrimitiveKind::Sphere;
    RigidTransform pose;      // local-to-world
    double radius = 1.0;      // sphere, cylinder
    double height = 1.0;      // cylinder (full height, along local z)
    Vec3 half_extents{1, 1, 1};  // box
    Vec3 plane_normal{0, 0, 1};  // plane (unit, points out of the solid)
    double plane_offset = 0.0;
    Vec3 albedo{0.5, 0.5, 0.5};

    /// Signed distance in world units, negative inside.
    double sdf(const Vec3& p) const;
    /// Analytic unit gradient of sdf. Deterministic on the measure-zero sets
    /// where the true gradient is undefined (box/cylinder ridges, centers).
    Vec3 sdf_gradient(const Vec3& p) const;

    void validate() const;
};

struct AnalyticScene {
    std::vector<Primitive> primitives;
    Aabb bounds;
    std::string scene_id;

    void validate() const;
};

/// Signed distance of the CSG union: min over primitive SDFs.
/// Exact outside the union; a lower bound inside overlapping solids.
double sdf_query(const AnalyticScene& scene, const Vec3& p);

/// Unit normal of the primitive attaining the union minimum (ties broken by
/// lowest primitive index).
Vec3 normal_query(const AnalyticScene& scene, const Vec3& p);

/// Index of the primitive attaining the union minimum.
int nearest_primitive(const AnalyticScene& scene, const Vec3& p);

/// 1 iff strictly inside (sdf < 0); points exactly on the boundary map to 0.
int occupancy_query(const AnalyticScene& scene, const Vec3& p);

/// Smallest t in [ray.near, ray.far] where the union SDF crosses zero,
/// located by sphere tracing plus bisection to |sdf| < 1e-7.
std::optional<double> ray_first_hit(const AnalyticScene& scene, const Ray& ray);

/// Multi-object layout: a large bright box, a thin dark cylinder in front of
/// it and a small box off to the side, arranged so rays aimed at the box face
/// can pass close to the cylinder first.
AnalyticScene build_toy_scene();

/// A ray that grazes the toy cylinder and then hits the large box face; its
/// SDF profile has at least two local minima.
Ray toy_occluded_ray();

/// A ray approaching the small toy box with nothing else in front; its SDF
/// profile decreases monotonically up to the hit.
Ray toy_single_object_ray();

struct SceneIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Radius of a ball around `center` that contains every primitive surface
/// (planes fall back to the bounds radius).
double scene_content_radius(const AnalyticScene& scene, const Vec3& center);

/// Scene file schema is documented in the README (JSON, one object per
/// primitive). Throws SceneIoError naming the offending field.
AnalyticScene load_scene(const std::string& path);
void save_scene(const AnalyticScene& scene, const std::string& path);
AnalyticScene scene_from_json_text(const std::string& text);
std::string scene_to_json_text(const AnalyticScene& scene);

}  // namespace osf
