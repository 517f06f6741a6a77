#pragma once

#include <string>
#include <vector>

#include "osf/mesh.hpp"
#include "osf/rng.hpp"
#include "osf/scene.hpp"

namespace osf {

struct SurfaceSamples {
    std::vector<Vec3> points;
    std::vector<Vec3> normals;
};

/// Area-weighted uniform sampling; normals are the face normals.
SurfaceSamples sample_surface(const TriangleMesh& mesh, int count, Rng& rng);

/// Exact nearest neighbors via a uniform grid (equivalent to brute force).
class NearestNeighborIndex {
public:
    explicit NearestNeighborIndex(const std::vector<Vec3>& points);
    /// Returns the index of the nearest stored point and its distance.
    int query(const Vec3& p, double& distance) const;

private:
    std::vector<Vec3> points_;
    Aabb bounds_;
    double cell_ = 1.0;
    int nx_ = 1, ny_ = 1, nz_ = 1;
    std::vector<std::vector<int>> cells_;
    int cell_of(int ix, int iy, int iz) const { return (iz * ny_ + iy) * nx_ + ix; }
};

void nearest_neighbor(const std::vector<Vec3>& points, const std::vector<Vec3>& queries,
                      std::vector<double>& distances, std::vector<int>& indices);

struct MeshMetricsReport {
    double accuracy = 0;            // mean pred -> gt distance
    double completeness = 0;        // mean gt -> pred distance
    double chamfer_l1 = 0;          // (accuracy + completeness) / 2
    double precision = 0;           // % pred samples within threshold
    double recall = 0;              // % gt samples within threshold
    double fscore = 0;              // harmonic mean, 0 when degenerate
    double normal_consistency = 0;  // mean |cos| over both directions
    double threshold = 0.05;
    int sample_count = 0;
    bool empty_prediction = false;

    std::string to_json() const;
};

/// Distances use the inclusive boundary convention (<= threshold counts).
MeshMetricsReport evaluate_point_clouds(const SurfaceSamples& pred, const SurfaceSamples& gt,
                                        double threshold);

MeshMetricsReport evaluate(const TriangleMesh& pred, const TriangleMesh& gt, double threshold,
                           int sample_count, uint64_t seed = 1);

/// Ground truth from the analytic scene: a fine extraction provides the
/// sampling domain and normal_query provides exact normals.
MeshMetricsReport evaluate_against_scene(const TriangleMesh& pred, const AnalyticScene& scene,
                                         double threshold, int sample_count, int gt_resolution = 160,
                                         uint64_t seed = 1);

}  // namespace osf
