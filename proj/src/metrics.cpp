#include "osf/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "json.hpp"

namespace osf {

SurfaceSamples sample_surface(const TriangleMesh& mesh, int count, Rng& rng) {
    if (mesh.empty()) throw std::invalid_argument("sample_surface: empty mesh");
    if (count < 1) throw std::invalid_argument("sample_surface: count must be >= 1");

    std::vector<double> cumulative(mesh.triangles.size());
    double total = 0;
    for (size_t i = 0; i < mesh.triangles.size(); ++i) {
        const auto& t = mesh.triangles[i];
        total += triangle_area(mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]);
        cumulative[i] = total;
    }
    if (total <= 0) throw std::invalid_argument("sample_surface: degenerate mesh");

    SurfaceSamples samples;
    samples.points.reserve(count);
    samples.normals.reserve(count);
    for (int k = 0; k < count; ++k) {
        double u = rng.next_double() * total;
        size_t idx = std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin();
        idx = std::min(idx, mesh.triangles.size() - 1);
        const auto& t = mesh.triangles[idx];
        Vec3 a = mesh.vertices[t[0]], b = mesh.vertices[t[1]], c = mesh.vertices[t[2]];
        double r1 = std::sqrt(rng.next_double());
        double r2 = rng.next_double();
        // Uniform barycentric coordinates.
        Vec3 p = a * (1 - r1) + b * (r1 * (1 - r2)) + c * (r1 * r2);
        samples.points.push_back(p);
        samples.normals.push_back(normalized(cross(b - a, c - a)));
    }
    return samples;
}

NearestNeighborIndex::NearestNeighborIndex(const std::vector<Vec3>& points) : points_(points) {
    if (points_.empty()) throw std::invalid_argument("nearest_neighbor: empty point set");
    bounds_.min = bounds_.max = points_[0];
    for (const Vec3& p : points_) {
        bounds_.min = {std::min(bounds_.min.x, p.x), std::min(bounds_.min.y, p.y),
                       std::min(bounds_.min.z, p.z)};
        bounds_.max = {std::max(bounds_.max.x, p.x), std::max(bounds_.max.y, p.y),
                       std::max(bounds_.max.z, p.z)};
    }
    double diag = std::max(bounds_.diagonal(), 1e-9);
    // Aim for a handful of points per cell.
    double target = diag / std::cbrt(double(points_.size()) + 1.0);
    cell_ = std::max(target, 1e-9);
    nx_ = std::max(1, int(std::ceil((bounds_.max.x - bounds_.min.x) / cell_)) + 1);
    ny_ = std::max(1, int(std::ceil((bounds_.max.y - bounds_.min.y) / cell_)) + 1);
    nz_ = std::max(1, int(std::ceil((bounds_.max.z - bounds_.min.z) / cell_)) + 1);
    cells_.resize(size_t(nx_) * ny_ * nz_);
    for (size_t i = 0; i < points_.size(); ++i) {
        const Vec3& p = points_[i];
        int ix = std::clamp(int((p.x - bounds_.min.x) / cell_), 0, nx_ - 1);
        int iy = std::clamp(int((p.y - bounds_.min.y) / cell_), 0, ny_ - 1);
        int iz = std::clamp(int((p.z - bounds_.min.z) / cell_), 0, nz_ - 1);
        cells_[cell_of(ix, iy, iz)].push_back(int(i));
    }
}

int NearestNeighborIndex::query(const Vec3& p, double& distance) const {
    int ix = std::clamp(int((p.x - bounds_.min.x) / cell_), 0, nx_ - 1);
    int iy = std::clamp(int((p.y - bounds_.min.y) / cell_), 0, ny_ - 1);
    int iz = std::clamp(int((p.z - bounds_.min.z) / cell_), 0, nz_ - 1);

    int best = -1;
    double best_sq = std::numeric_limits<double>::infinity();
    int max_ring = std::max({nx_, ny_, nz_});
    for (int ring = 0; ring <= max_ring; ++ring) {
        // Once a candidate exists, stop when the next shell cannot beat it.
        if (best >= 0) {
            double safe = double(ring - 1) * cell_;
            if (safe > 0 && safe * safe >= best_sq) break;
        }
        bool visited_any = false;
        for (int dz = -ring; dz <= ring; ++dz) {
            for (int dy = -ring; dy <= ring; ++dy) {
                for (int dx = -ring; dx <= ring; ++dx) {
                    if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
                    int cx = ix + dx, cy = iy + dy, cz = iz + dz;
                    if (cx < 0 || cy < 0 || cz < 0 || cx >= nx_ || cy >= ny_ || cz >= nz_) continue;
                    visited_any = true;
                    for (int idx : cells_[cell_of(cx, cy, cz)]) {
                        double d = norm_sq(points_[idx] - p);
                        if (d < best_sq) {
                            best_sq = d;
                            best = idx;
                        }
                    }
                }
            }
        }
        if (!visited_any && best >= 0) break;
    }
    distance = std::sqrt(best_sq);
    return best;
}

void nearest_neighbor(const std::vector<Vec3>& points, const std::vector<Vec3>& queries,
                      std::vector<double>& distances, std::vector<int>& indices) {
    NearestNeighborIndex index(points);
    distances.resize(queries.size());
    indices.resize(queries.size());
    for (size_t i = 0; i < queries.size(); ++i) indices[i] = index.query(queries[i], distances[i]);
}

MeshMetricsReport evaluate_point_clouds(const SurfaceSamples& pred, const SurfaceSamples& gt,
                                        double threshold) {
    MeshMetricsReport report;
    report.threshold = threshold;
    report.sample_count = int(std::max(pred.points.size(), gt.points.size()));
    if (gt.points.empty()) throw std::invalid_argument("evaluate: empty ground truth");
    if (pred.points.empty()) {
        report.empty_prediction = true;
        report.precision = 0;
        report.recall = 0;
        report.fscore = 0;
        return report;
    }

    NearestNeighborIndex gt_index(gt.points);
    NearestNeighborIndex pred_index(pred.points);

    double acc = 0, ncos = 0;
    int within = 0;
    for (size_t i = 0; i < pred.points.size(); ++i) {
        double d;
        int j = gt_index.query(pred.points[i], d);
        acc += d;
        if (d <= threshold) ++within;
        ncos += std::fabs(dot(pred.normals[i], gt.normals[j]));
    }
    report.accuracy = acc / double(pred.points.size());
    report.precision = 100.0 * double(within) / double(pred.points.size());

    double comp = 0;
    int covered = 0;
    for (size_t i = 0; i < gt.points.size(); ++i) {
        double d;
        int j = pred_index.query(gt.points[i], d);
        comp += d;
        if (d <= threshold) ++covered;
        ncos += std::fabs(dot(gt.normals[i], pred.normals[j]));
    }
    report.completeness = comp / double(gt.points.size());
    report.recall = 100.0 * double(covered) / double(gt.points.size());

    report.chamfer_l1 = 0.5 * (report.accuracy + report.completeness);
    double pr = report.precision + report.recall;
    report.fscore = pr > 0 ? 2.0 * report.precision * report.recall / pr : 0.0;
    report.normal_consistency = ncos / double(pred.points.size() + gt.points.size());
    return report;
}

MeshMetricsReport evaluate(const TriangleMesh& pred, const TriangleMesh& gt, double threshold,
                           int sample_count, uint64_t seed) {
    if (gt.empty()) throw std::invalid_argument("evaluate: empty ground-truth mesh");
    Rng rng_gt = Rng::keyed(seed, "eval_gt");
    SurfaceSamples gt_samples = sample_surface(gt, sample_count, rng_gt);
    if (pred.empty()) {
        MeshMetricsReport report;
        report.threshold = threshold;
        report.sample_count = sample_count;
        report.empty_prediction = true;
        return report;
    }
    Rng rng_pred = Rng::keyed(seed, "eval_pred");
    SurfaceSamples pred_samples = sample_surface(pred, sample_count, rng_pred);
    MeshMetricsReport report = evaluate_point_clouds(pred_samples, gt_samples, threshold);
    report.sample_count = sample_count;
    return report;
}

MeshMetricsReport evaluate_against_scene(const TriangleMesh& pred, const AnalyticScene& scene,
                                         double threshold, int sample_count, int gt_resolution,
                                         uint64_t seed) {
    auto field = [&scene](const Vec3& p) { return sdf_query(scene, p); };
    TriangleMesh gt_mesh = extract_mesh(field, scene.bounds.expanded(0.02), gt_resolution);
    if (gt_mesh.empty()) throw std::invalid_argument("evaluate: scene produced an empty surface");
    if (pred.empty()) {
        MeshMetricsReport report;
        report.threshold = threshold;
        report.sample_count = sample_count;
        report.empty_prediction = true;
        return report;
    }
    Rng rng_gt = Rng::keyed(seed, "eval_gt");
    SurfaceSamples gt_samples = sample_surface(gt_mesh, sample_count, rng_gt);
    for (size_t i = 0; i < gt_samples.points.size(); ++i)
        gt_samples.normals[i] = normal_query(scene, gt_samples.points[i]);
    Rng rng_pred = Rng::keyed(seed, "eval_pred");
    SurfaceSamples pred_samples = sample_surface(pred, sample_count, rng_pred);
    MeshMetricsReport report = evaluate_point_clouds(pred_samples, gt_samples, threshold);
    report.sample_count = sample_count;
    return report;
}

std::string MeshMetricsReport::to_json() const {
    nlohmann::ordered_json j;
    j["accuracy"] = accuracy;
    j["completeness"] = completeness;
    j["chamfer_l1"] = chamfer_l1;
    j["precision"] = precision;
    j["recall"] = recall;
    j["fscore"] = fscore;
    j["normal_consistency"] = normal_consistency;
    j["threshold"] = threshold;
    j["sample_count"] = sample_count;
    j["empty_prediction"] = empty_prediction;
    return j.dump(2);
}

}  // namespace osf
