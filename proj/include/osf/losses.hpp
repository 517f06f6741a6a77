#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "osf/geom.hpp"

namespace osf {

struct LossWeights {
    double eikonal = 0.05;    // lambda_1
    double depth_occ = 1.0;   // lambda_2
    double depth_sdf = 0.1;   // lambda_3
    double normal = 0.05;     // lambda_4, applied to both normal terms
};

struct LossBreakdown {
    double rgb_sdf = 0;
    double rgb_feature = 0;
    double eikonal = 0;
    double depth_occ = 0;
    double depth_sdf = 0;
    double normal_occ = 0;
    double normal_sdf = 0;
    double total = 0;
};

/// Mean over rays of the per-ray L1 color norm.
double rgb_l1(std::span<const Vec3> pred, std::span<const Vec3> gt);

/// Mean squared deviation of the gradient norms from one.
double eikonal_loss(std::span<const double> gradient_norms);

struct ScaleShift {
    double scale = 1.0;
    double shift = 0.0;
    bool degenerate = false;
};

/// Closed-form least-squares fit of scale*pred + shift to gt over the masked
/// entries. Degenerate batches (all pred equal) fall back to scale 1 and the
/// mean residual as shift.
ScaleShift solve_scale_shift(std::span<const double> pred, std::span<const double> gt,
                             std::span<const uint8_t> valid);

/// Mean squared residual after the affine alignment; the solve is treated as
/// a constant in differentiation. Masked-out rays contribute nothing.
double depth_loss(std::span<const double> pred, std::span<const double> gt,
                  std::span<const uint8_t> valid, const ScaleShift& fit);
double depth_loss(std::span<const double> pred, std::span<const double> gt,
                  std::span<const uint8_t> valid);

/// Mean over valid rays of ||pred - gt||_1 + |1 - pred . gt|.
double normal_loss(std::span<const Vec3> pred, std::span<const Vec3> gt,
                   std::span<const uint8_t> valid);

/// Applies the overall weighting to already-computed component losses.
LossBreakdown total_loss(double rgb_sdf, double rgb_feature, double eikonal, double depth_occ,
                         double depth_sdf, double normal_occ, double normal_sdf,
                         const LossWeights& weights);

/// One JSON object per line, fixed key order.
std::string loss_log_line(uint64_t step, const LossBreakdown& breakdown);

}  // namespace osf
