#include "osf/camera.hpp"

#include <cmath>

namespace osf {

Ray pixel_ray(const PinholeCamera& camera, double u, double v) {
    if (u < 0 || u >= camera.width || v < 0 || v >= camera.height)
        throw std::invalid_argument("pixel_ray: pixel out of range");
    Vec3 dir_cam{(u + 0.5 - camera.cx) / camera.fx, (v + 0.5 - camera.cy) / camera.fy, 1.0};
    Ray ray;
    ray.origin = camera.pose.translation;
    ray.direction = normalized(camera.pose.rotate(dir_cam));
    ray.near = 0.0;
    ray.far = std::numeric_limits<double>::infinity();
    return ray;
}

bool project_point(const PinholeCamera& camera, const Vec3& p, double& u, double& v,
                   double& range) {
    Vec3 q = camera.pose.apply_inverse(p);
    if (q.z <= 0) return false;
    u = camera.fx * q.x / q.z + camera.cx - 0.5;
    v = camera.fy * q.y / q.z + camera.cy - 0.5;
    range = norm(q);
    return true;
}

std::vector<PinholeCamera> build_camera_rig(const RigConfig& config, const Vec3& target,
                                            double scene_radius) {
    double dist = config.radius > 0 ? config.radius : config.radius_scale * scene_radius;
    double fov = config.fov_deg;
    if (fov <= 0) {
        double half = std::asin(std::min(0.95, 1.1 * scene_radius / dist));
        fov = 2.0 * half * 180.0 / M_PI;
    }
    double half_rad = 0.5 * fov * M_PI / 180.0;
    double f = (0.5 * config.width) / std::tan(half_rad);

    std::vector<PinholeCamera> cameras;
    cameras.reserve(config.views);
    const double golden_angle = M_PI * (3.0 - std::sqrt(5.0));
    for (int i = 0; i < config.views; ++i) {
        // Spiral over latitudes in [-60, 60] degrees; avoids degenerate poles.
        double frac = config.views > 1 ? double(i) / double(config.views - 1) : 0.5;
        double lat = (-60.0 + 120.0 * frac) * M_PI / 180.0;
        double lon = golden_angle * i;
        Vec3 eye = target + dist * Vec3{std::cos(lat) * std::cos(lon),
                                        std::cos(lat) * std::sin(lon), std::sin(lat)};

        Vec3 forward = normalized(target - eye);
        Vec3 world_up{0, 0, 1};
        if (std::fabs(dot(forward, world_up)) > 0.999) world_up = {0, 1, 0};
        Vec3 right = normalized(cross(forward, world_up));
        Vec3 down = cross(forward, right);  // y points down in camera frame

        PinholeCamera cam;
        cam.fx = cam.fy = f;
        cam.cx = 0.5 * config.width;
        cam.cy = 0.5 * config.height;
        cam.width = config.width;
        cam.height = config.height;
        for (int r = 0; r < 3; ++r) {
            cam.pose.rotation(r, 0) = right[r];
            cam.pose.rotation(r, 1) = down[r];
            cam.pose.rotation(r, 2) = forward[r];
        }
        cam.pose.translation = eye;
        cam.validate();
        cameras.push_back(cam);
    }
    return cameras;
}

}  // namespace osf
