#include "osf/losses.hpp"

#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace osf {

double rgb_l1(std::span<const Vec3> pred, std::span<const Vec3> gt) {
    if (pred.size() != gt.size()) throw std::invalid_argument("rgb_l1: length mismatch");
    if (pred.empty()) return 0.0;
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        Vec3 d = pred[i] - gt[i];
        acc += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z);
    }
    return acc / double(pred.size());
}

double eikonal_loss(std::span<const double> gradient_norms) {
    if (gradient_norms.empty()) return 0.0;
    double acc = 0;
    for (double n : gradient_norms) acc += (n - 1.0) * (n - 1.0);
    return acc / double(gradient_norms.size());
}

ScaleShift solve_scale_shift(std::span<const double> pred, std::span<const double> gt,
                             std::span<const uint8_t> valid) {
    if (pred.size() != gt.size() || pred.size() != valid.size())
        throw std::invalid_argument("solve_scale_shift: length mismatch");

    double sum_x = 0, sum_y = 0, sum_xx = 0, sum_xy = 0;
    size_t n = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        sum_x += pred[i];
        sum_y += gt[i];
        sum_xx += pred[i] * pred[i];
        sum_xy += pred[i] * gt[i];
        ++n;
    }
    ScaleShift fit;
    if (n < 2) {
        fit.degenerate = true;
        fit.shift = n == 1 ? sum_y - sum_x : 0.0;
        return fit;
    }
    double det = double(n) * sum_xx - sum_x * sum_x;
    if (det <= 1e-12 * double(n) * std::max(sum_xx, 1e-300)) {
        fit.degenerate = true;
        fit.shift = (sum_y - sum_x) / double(n);
        return fit;
    }
    fit.scale = (double(n) * sum_xy - sum_x * sum_y) / det;
    fit.shift = (sum_y - fit.scale * sum_x) / double(n);
    return fit;
}

double depth_loss(std::span<const double> pred, std::span<const double> gt,
                  std::span<const uint8_t> valid, const ScaleShift& fit) {
    size_t n = 0;
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        double r = fit.scale * pred[i] + fit.shift - gt[i];
        acc += r * r;
        ++n;
    }
    return n == 0 ? 0.0 : acc / double(n);
}

double depth_loss(std::span<const double> pred, std::span<const double> gt,
                  std::span<const uint8_t> valid) {
    return depth_loss(pred, gt, valid, solve_scale_shift(pred, gt, valid));
}

double normal_loss(std::span<const Vec3> pred, std::span<const Vec3> gt,
                   std::span<const uint8_t> valid) {
    if (pred.size() != gt.size() || pred.size() != valid.size())
        throw std::invalid_argument("normal_loss: length mismatch");
    size_t n = 0;
    double acc = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        if (!valid[i]) continue;
        Vec3 d = pred[i] - gt[i];
        acc += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z);
        acc += std::fabs(1.0 - dot(pred[i], gt[i]));
        ++n;
    }
    return n == 0 ? 0.0 : acc / double(n);
}

LossBreakdown total_loss(double rgb_sdf, double rgb_feature, double eikonal, double depth_occ,
                         double depth_sdf, double normal_occ, double normal_sdf,
                         const LossWeights& weights) {
    LossBreakdown b;
    b.rgb_sdf = rgb_sdf;
    b.rgb_feature = rgb_feature;
    b.eikonal = eikonal;
    b.depth_occ = depth_occ;
    b.depth_sdf = depth_sdf;
    b.normal_occ = normal_occ;
    b.normal_sdf = normal_sdf;
    b.total = rgb_feature + rgb_sdf + weights.eikonal * eikonal + weights.depth_occ * depth_occ +
              weights.depth_sdf * depth_sdf + weights.normal * (normal_occ + normal_sdf);
    return b;
}

std::string loss_log_line(uint64_t step, const LossBreakdown& b) {
    nlohmann::ordered_json j;
    j["step"] = step;
    j["rgb_sdf"] = b.rgb_sdf;
    j["rgb_feature"] = b.rgb_feature;
    j["eikonal"] = b.eikonal;
    j["depth_occ"] = b.depth_occ;
    j["depth_sdf"] = b.depth_sdf;
    j["normal_occ"] = b.normal_occ;
    j["normal_sdf"] = b.normal_sdf;
    j["total"] = b.total;
    return j.dump();
}

}  // namespace osf
