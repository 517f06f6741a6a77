#pragma once

#include <stdexcept>
#include <vector>

#include "osf/geom.hpp"

namespace osf {

/// Pinhole model, OpenCV convention: x right, y down, z forward.
struct PinholeCamera {
    double fx = 0, fy = 0, cx = 0, cy = 0;
    RigidTransform pose;  // camera-to-world
    int width = 0, height = 0;

    void validate() const {
        if (!(fx > 0 && fy > 0)) throw std::invalid_argument("camera focal lengths must be > 0");
        if (!(cx > 0 && cx < width && cy > 0 && cy < height))
            throw std::invalid_argument("camera principal point must lie inside the image");
    }
};

/// World-space ray through the center of pixel (u, v). Fractional pixel
/// coordinates are accepted; the center offset of +0.5 is always applied.
Ray pixel_ray(const PinholeCamera& camera, double u, double v);

/// Projects a world point; returns false when behind the camera.
/// Out params are pixel coordinates (center convention) and camera-space depth
/// along the ray through that pixel (i.e. distance from the camera center).
bool project_point(const PinholeCamera& camera, const Vec3& p, double& u, double& v,
                   double& range);

struct RigConfig {
    int views = 24;
    double radius = 0.0;        // absolute camera distance; 0 means use radius_scale
    double radius_scale = 2.5;  // times the scene bounding radius
    int width = 64, height = 64;
    double fov_deg = 0.0;  // 0 means auto-fit the scene bounds
    Vec3 light_dir{1, 1, 1};
    double ambient = 0.01;
};

/// Cameras on a spiral over the viewing sphere, all looking at the target.
std::vector<PinholeCamera> build_camera_rig(const RigConfig& config, const Vec3& target,
                                            double scene_radius);

}  // namespace osf
