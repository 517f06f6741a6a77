#include "osf/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "json.hpp"

namespace osf {

namespace {

double sdf_sphere(const Vec3& q, double r) { return norm(q) - r; }

double sdf_box(const Vec3& q, const Vec3& h) {
    Vec3 d = cwise_abs(q) - h;
    Vec3 outside = cwise_max(d, Vec3{0, 0, 0});
    return norm(outside) + std::min(max_component(d), 0.0);
}

double sdf_cylinder(const Vec3& q, double r, double half_h) {
    double dr = std::sqrt(q.x * q.x + q.y * q.y) - r;
    double dz = std::fabs(q.z) - half_h;
    double outside = std::sqrt(std::max(dr, 0.0) * std::max(dr, 0.0) +
                               std::max(dz, 0.0) * std::max(dz, 0.0));
    return outside + std::min(std::max(dr, dz), 0.0);
}

Vec3 grad_box(const Vec3& q, const Vec3& h) {
    Vec3 d = cwise_abs(q) - h;
    Vec3 sign{q.x < 0 ? -1.0 : 1.0, q.y < 0 ? -1.0 : 1.0, q.z < 0 ? -1.0 : 1.0};
    if (d.x > 0 || d.y > 0 || d.z > 0) {
        Vec3 outside = cwise_max(d, Vec3{0, 0, 0});
        Vec3 g = normalized(outside);
        return {g.x * sign.x, g.y * sign.y, g.z * sign.z};
    }
    // Inside: nearest face along the axis with the largest (least negative) d.
    int axis = 0;
    if (d.y > d[axis]) axis = 1;
    if (d.z > d[axis]) axis = 2;
    Vec3 g{0, 0, 0};
    g[axis] = sign[axis];
    return g;
}

Vec3 grad_cylinder(const Vec3& q, double r, double half_h) {
    double rho = std::sqrt(q.x * q.x + q.y * q.y);
    double dr = rho - r;
    double dz = std::fabs(q.z) - half_h;
    Vec3 radial = rho > 1e-14 ? Vec3{q.x / rho, q.y / rho, 0} : Vec3{1, 0, 0};
    double zsign = q.z < 0 ? -1.0 : 1.0;
    if (dr > 0 || dz > 0) {
        double a = std::max(dr, 0.0), b = std::max(dz, 0.0);
        double len = std::sqrt(a * a + b * b);
        if (len < 1e-14) return radial;
        return {radial.x * a / len, radial.y * a / len, zsign * b / len};
    }
    if (dr > dz) return radial;
    return {0, 0, zsign};
}

}  // namespace

double Primitive::sdf(const Vec3& p) const {
    switch (kind) {
        case PrimitiveKind::Sphere:
            return sdf_sphere(pose.apply_inverse(p), radius);
        case PrimitiveKind::Box:
            return sdf_box(pose.apply_inverse(p), half_extents);
        case PrimitiveKind::Cylinder:
            return sdf_cylinder(pose.apply_inverse(p), radius, 0.5 * height);
        case PrimitiveKind::Plane:
            return dot(plane_normal, p) - plane_offset;
    }
    return 0.0;
}

Vec3 Primitive::sdf_gradient(const Vec3& p) const {
    switch (kind) {
        case PrimitiveKind::Sphere: {
            Vec3 q = pose.apply_inverse(p);
            Vec3 g = norm(q) > 1e-14 ? normalized(q) : Vec3{0, 0, 1};
            return pose.rotate(g);
        }
        case PrimitiveKind::Box:
            return pose.rotate(grad_box(pose.apply_inverse(p), half_extents));
        case PrimitiveKind::Cylinder:
            return pose.rotate(grad_cylinder(pose.apply_inverse(p), radius, 0.5 * height));
        case PrimitiveKind::Plane:
            return plane_normal;
    }
    return {0, 0, 1};
}

void Primitive::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw SceneIoError(std::string("invalid primitive: ") + what);
    };
    switch (kind) {
        case PrimitiveKind::Sphere:
            require(radius > 0, "sphere radius must be > 0");
            break;
        case PrimitiveKind::Box:
            require(half_extents.x > 0 && half_extents.y > 0 && half_extents.z > 0,
                    "box half_extents must be > 0");
            break;
        case PrimitiveKind::Cylinder:
            require(radius > 0 && height > 0, "cylinder radius/height must be > 0");
            break;
        case PrimitiveKind::Plane:
            require(std::fabs(norm(plane_normal) - 1.0) < 1e-9, "plane normal must be unit");
            break;
    }
    Mat3 rt_r = pose.rotation.transposed() * pose.rotation;
    double ortho_err = 0;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) ortho_err += std::fabs(rt_r(i, j) - (i == j ? 1.0 : 0.0));
    require(ortho_err < 1e-9 && pose.rotation.determinant() > 0, "rotation must be in SO(3)");
}

void AnalyticScene::validate() const {
    if (primitives.empty()) throw SceneIoError("scene must contain at least one primitive");
    for (const auto& prim : primitives) prim.validate();
    if (!(bounds.min.x < bounds.max.x && bounds.min.y < bounds.max.y &&
          bounds.min.z < bounds.max.z))
        throw SceneIoError("scene bounds must be a non-empty box");
}

double sdf_query(const AnalyticScene& scene, const Vec3& p) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& prim : scene.primitives) best = std::min(best, prim.sdf(p));
    return best;
}

int nearest_primitive(const AnalyticScene& scene, const Vec3& p) {
    int best_idx = 0;
    double best = std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < scene.primitives.size(); ++i) {
        double d = scene.primitives[i].sdf(p);
        if (d < best) {
            best = d;
            best_idx = static_cast<int>(i);
        }
    }
    return best_idx;
}

Vec3 normal_query(const AnalyticScene& scene, const Vec3& p) {
    return scene.primitives[nearest_primitive(scene, p)].sdf_gradient(p);
}

int occupancy_query(const AnalyticScene& scene, const Vec3& p) {
    return sdf_query(scene, p) < 0.0 ? 1 : 0;
}

std::optional<double> ray_first_hit(const AnalyticScene& scene, const Ray& ray) {
    constexpr double kStepSafety = 0.99;
    constexpr int kMaxSteps = 512;
    constexpr int kBisectIters = 64;
    constexpr double kHitTol = 1e-7;

    double t = ray.near;
    double f = sdf_query(scene, ray.at(t));
    if (std::fabs(f) < kHitTol) return t;
    double sign0 = f < 0 ? -1.0 : 1.0;

    for (int step = 0; step < kMaxSteps && t <= ray.far; ++step) {
        double dt = std::max(kStepSafety * std::fabs(f), 1e-6);
        double t_next = t + dt;
        if (t_next > ray.far) {
            t_next = ray.far;
            if (t_next <= t) break;
        }
        double f_next = sdf_query(scene, ray.at(t_next));
        if (std::fabs(f_next) < kHitTol) return t_next;
        if ((f_next < 0 ? -1.0 : 1.0) != sign0) {
            // Bracketed a crossing; bisect.
            double lo = t, hi = t_next;
            double f_lo = f;
            for (int i = 0; i < kBisectIters; ++i) {
                double mid = 0.5 * (lo + hi);
                double f_mid = sdf_query(scene, ray.at(mid));
                if (std::fabs(f_mid) < kHitTol) return mid;
                if ((f_mid < 0 ? -1.0 : 1.0) == (f_lo < 0 ? -1.0 : 1.0)) {
                    lo = mid;
                    f_lo = f_mid;
                } else {
                    hi = mid;
                }
            }
            return 0.5 * (lo + hi);
        }
        if (t_next >= ray.far) break;
        t = t_next;
        f = f_next;
    }
    return std::nullopt;
}

AnalyticScene build_toy_scene() {
    AnalyticScene scene;
    scene.scene_id = "toy";

    Primitive wall;
    wall.kind = PrimitiveKind::Box;
    wall.pose.translation = {2.5, 0.0, 0.0};
    wall.half_extents = {0.3, 1.2, 1.2};
    wall.albedo = {0.80, 0.78, 0.75};
    scene.primitives.push_back(wall);

    Primitive cylinder;
    cylinder.kind = PrimitiveKind::Cylinder;
    cylinder.pose.translation = {1.2, 0.25, 0.0};
    cylinder.radius = 0.12;
    cylinder.height = 0.8;
    cylinder.albedo = {0.02, 0.02, 0.02};
    scene.primitives.push_back(cylinder);

    Primitive small_box;
    small_box.kind = PrimitiveKind::Box;
    small_box.pose.translation = {1.2, -0.6, 0.0};
    small_box.half_extents = {0.1, 0.1, 0.3};
    small_box.albedo = {0.5, 0.35, 0.3};
    scene.primitives.push_back(small_box);

    scene.bounds = {{-0.3, -1.5, -1.5}, {3.0, 1.5, 1.5}};
    return scene;
}

Ray toy_occluded_ray() {
    // Grazes the cylinder (closest approach ~0.04) before the box face.
    Vec3 origin{0.0, 0.45, 0.0};
    Vec3 target{1.2, 0.41, 0.0};
    Ray ray;
    ray.origin = origin;
    ray.direction = normalized(target - origin);
    ray.near = 0.05;
    ray.far = 3.2;
    return ray;
}

double scene_content_radius(const AnalyticScene& scene, const Vec3& center) {
    double radius = 0;
    for (const auto& prim : scene.primitives) {
        double local = 0;
        switch (prim.kind) {
            case PrimitiveKind::Sphere:
                local = prim.radius;
                break;
            case PrimitiveKind::Box:
                local = norm(prim.half_extents);
                break;
            case PrimitiveKind::Cylinder:
                local = std::sqrt(prim.radius * prim.radius + 0.25 * prim.height * prim.height);
                break;
            case PrimitiveKind::Plane:
                return 0.5 * scene.bounds.diagonal();
        }
        radius = std::max(radius, norm(prim.pose.translation - center) + local);
    }
    return radius;
}

Ray toy_single_object_ray() {
    Ray ray;
    ray.origin = {1.2, -3.0, 0.0};
    ray.direction = {0.0, 1.0, 0.0};
    ray.near = 0.05;
    ray.far = 3.0;
    return ray;
}

namespace {

using nlohmann::ordered_json;

ordered_json vec3_to_json(const Vec3& v) { return ordered_json::array({v.x, v.y, v.z}); }

Vec3 vec3_from_json(const ordered_json& j, const std::string& field) {
    if (!j.is_array() || j.size() != 3)
        throw SceneIoError("field '" + field + "' must be a 3-array");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

std::string kind_name(PrimitiveKind k) {
    switch (k) {
        case PrimitiveKind::Sphere: return "sphere";
        case PrimitiveKind::Box: return "box";
        case PrimitiveKind::Cylinder: return "cylinder";
        case PrimitiveKind::Plane: return "plane";
    }
    return "sphere";
}

PrimitiveKind kind_from_name(const std::string& s) {
    if (s == "sphere") return PrimitiveKind::Sphere;
    if (s == "box") return PrimitiveKind::Box;
    if (s == "cylinder") return PrimitiveKind::Cylinder;
    if (s == "plane") return PrimitiveKind::Plane;
    throw SceneIoError("unknown primitive kind '" + s + "'");
}

}  // namespace

std::string scene_to_json_text(const AnalyticScene& scene) {
    ordered_json j;
    j["version"] = 1;
    j["scene_id"] = scene.scene_id;
    j["bounds"] = {{"min", vec3_to_json(scene.bounds.min)}, {"max", vec3_to_json(scene.bounds.max)}};
    j["primitives"] = ordered_json::array();
    for (const auto& prim : scene.primitives) {
        ordered_json p;
        p["kind"] = kind_name(prim.kind);
        if (prim.kind != PrimitiveKind::Plane) {
            p["center"] = vec3_to_json(prim.pose.translation);
        }
        switch (prim.kind) {
            case PrimitiveKind::Sphere:
                p["radius"] = prim.radius;
                break;
            case PrimitiveKind::Box:
                p["half_extents"] = vec3_to_json(prim.half_extents);
                break;
            case PrimitiveKind::Cylinder:
                p["radius"] = prim.radius;
                p["height"] = prim.height;
                break;
            case PrimitiveKind::Plane:
                p["normal"] = vec3_to_json(prim.plane_normal);
                p["offset"] = prim.plane_offset;
                break;
        }
        p["albedo"] = vec3_to_json(prim.albedo);
        j["primitives"].push_back(std::move(p));
    }
    return j.dump(2) + "\n";
}

AnalyticScene scene_from_json_text(const std::string& text) {
    ordered_json j;
    try {
        j = ordered_json::parse(text);
    } catch (const std::exception& e) {
        throw SceneIoError(std::string("scene parse error: ") + e.what());
    }
    if (!j.contains("version") || j["version"].get<int>() != 1)
        throw SceneIoError("scene file version missing or unsupported (expected 1)");
    if (!j.contains("primitives") || !j["primitives"].is_array())
        throw SceneIoError("field 'primitives' missing or not an array");
    if (!j.contains("bounds")) throw SceneIoError("field 'bounds' missing");

    AnalyticScene scene;
    scene.scene_id = j.value("scene_id", std::string("scene"));
    scene.bounds.min = vec3_from_json(j["bounds"]["min"], "bounds.min");
    scene.bounds.max = vec3_from_json(j["bounds"]["max"], "bounds.max");

    for (const auto& p : j["primitives"]) {
        if (!p.contains("kind")) throw SceneIoError("primitive missing field 'kind'");
        Primitive prim;
        prim.kind = kind_from_name(p["kind"].get<std::string>());
        if (p.contains("center")) prim.pose.translation = vec3_from_json(p["center"], "center");
        if (p.contains("rotation_axis_angle"))
            prim.pose.rotation =
                rotation_from_axis_angle(vec3_from_json(p["rotation_axis_angle"], "rotation_axis_angle"));
        switch (prim.kind) {
            case PrimitiveKind::Sphere:
                if (!p.contains("radius")) throw SceneIoError("sphere missing field 'radius'");
                prim.radius = p["radius"].get<double>();
                break;
            case PrimitiveKind::Box:
                if (!p.contains("half_extents")) throw SceneIoError("box missing field 'half_extents'");
                prim.half_extents = vec3_from_json(p["half_extents"], "half_extents");
                break;
            case PrimitiveKind::Cylinder:
                if (!p.contains("radius")) throw SceneIoError("cylinder missing field 'radius'");
                if (!p.contains("height")) throw SceneIoError("cylinder missing field 'height'");
                prim.radius = p["radius"].get<double>();
                prim.height = p["height"].get<double>();
                break;
            case PrimitiveKind::Plane:
                if (!p.contains("normal")) throw SceneIoError("plane missing field 'normal'");
                prim.plane_normal = normalized(vec3_from_json(p["normal"], "normal"));
                prim.plane_offset = p.value("offset", 0.0);
                break;
        }
        if (p.contains("albedo")) prim.albedo = vec3_from_json(p["albedo"], "albedo");
        scene.primitives.push_back(prim);
    }
    scene.validate();
    return scene;
}

AnalyticScene load_scene(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SceneIoError("cannot open scene file: " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return scene_from_json_text(ss.str());
}

void save_scene(const AnalyticScene& scene, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw SceneIoError("cannot write scene file: " + path);
    out << scene_to_json_text(scene);
}

}  // namespace osf
