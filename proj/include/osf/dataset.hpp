#pragma once

#include <string>
#include <vector>

#include "osf/camera.hpp"
#include "osf/scene.hpp"

namespace osf {

/// Ground-truth images of one camera. Misses carry depth = +inf, black rgb
/// and a zero normal.
struct SupervisionFrame {
    PinholeCamera camera;
    std::vector<double> rgb;     // H*W*3, row-major, in [0,1]
    std::vector<double> depth;   // H*W, scene units
    std::vector<double> normal;  // H*W*3, world frame, unit where depth finite

    int width() const { return camera.width; }
    int height() const { return camera.height; }
    size_t pixel_count() const { return size_t(camera.width) * camera.height; }

    Vec3 rgb_at(int u, int v) const {
        size_t i = (size_t(v) * camera.width + u) * 3;
        return {rgb[i], rgb[i + 1], rgb[i + 2]};
    }
    double depth_at(int u, int v) const { return depth[size_t(v) * camera.width + u]; }
    Vec3 normal_at(int u, int v) const {
        size_t i = (size_t(v) * camera.width + u) * 3;
        return {normal[i], normal[i + 1], normal[i + 2]};
    }
};

struct Dataset {
    std::vector<SupervisionFrame> frames;
    std::string scene_id;
    Aabb bounds;
};

struct ShadingConfig {
    Vec3 light_dir{1, 1, 1};  // normalized on use; points toward the light
    double ambient = 0.01;
};

/// Lambertian: albedo * (max(0, n.l) + ambient), clamped to [0,1].
Vec3 shade(const Vec3& albedo, const Vec3& normal, const ShadingConfig& shading);

/// Exact per-pixel ground truth via ray_first_hit / normal_query / shade.
SupervisionFrame render_frame(const AnalyticScene& scene, const PinholeCamera& camera,
                              const ShadingConfig& shading, int workers = 1);

Dataset generate_dataset(const AnalyticScene& scene, const RigConfig& rig, int workers = 1);

/// Fraction of hit pixels whose max rgb channel is below `threshold`.
double dark_pixel_fraction(const Dataset& dataset, double threshold = 0.05);

struct DatasetIoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Directory layout: meta.json + frames/frame_NNNN.bin, little-endian f64
/// arrays (rgb, depth, normal back to back). Round trips are bit-exact.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace osf
