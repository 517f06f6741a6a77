#pragma once

#include <functional>
#include <span>
#include <vector>

#include "osf/fields.hpp"
#include "osf/rng.hpp"
#include "osf/scene.hpp"

namespace osf {

/// Resolved (positive) density scales. Inside FieldParams these live behind a
/// softplus reparameterization; rendering code works with the actual values.
struct DensityScales {
    double alpha = 10.0;
    double beta = 0.1;
};

/// Zero-mean Laplace CDF with scale beta.
double laplace_cdf(double s, double beta);
double laplace_cdf_ds(double s, double beta);
double laplace_cdf_dbeta(double s, double beta);

/// sigma = alpha * Psi_beta(-sdf), in (0, alpha).
double sdf_to_density(double sdf, const DensityScales& scales);

struct CompositeWeights {
    std::vector<double> alphas;          // per-sample opacity in [0,1]
    std::vector<double> transmittances;  // T_i, non-increasing, T_1 = 1
    std::vector<double> weights;         // T_i * alpha_i
    double residual_transmittance = 1.0;

    double weight_sum() const {
        double s = 0;
        for (double w : weights) s += w;
        return s;
    }
};

/// alpha_i = 1 - exp(-sigma_i * delta_i), T_i = prod_{j<i} (1 - alpha_j).
CompositeWeights compute_weights_sdf(std::span<const double> sigmas,
                                     std::span<const double> deltas);

/// Occupancy compositing: w_i = o_i * prod_{j<i} (1 - o_j).
CompositeWeights compute_weights_occ(std::span<const double> occs);

/// Weighted sum of per-sample values, generic over the value dimension.
void composite(const CompositeWeights& weights, const double* values, int dim, double* out);
double composite_scalar(const CompositeWeights& weights, std::span<const double> values);
Vec3 composite_vec3(const CompositeWeights& weights, std::span<const Vec3> values);

struct RaySampleConfig {
    int stratified = 64;
    int importance = 32;
    bool deterministic = false;  // stratum midpoints, no importance jitter
    double delta_cap = 0.0;      // 0: (far - near) / stratified
};

struct SampledRay {
    std::vector<double> ts;      // strictly ascending in [near, far]
    std::vector<double> deltas;  // forward differences; last entry capped
};

/// Stratified samples plus one optional importance round driven by the given
/// density evaluator (only called when importance > 0). rng may be null in
/// deterministic mode.
SampledRay sample_ray(const Ray& ray, const RaySampleConfig& config, Rng* rng,
                      const std::function<double(double)>& density_at = nullptr);

void fill_deltas(std::span<const double> ts, double cap, std::vector<double>& deltas);

struct RenderOutput {
    Vec3 color{0, 0, 0};          // direct-color compositing
    Vec3 decoded_color{0, 0, 0};  // decoder applied to the composited feature
    std::vector<double> feature;  // composited hidden feature
    double depth = 0.0;
    Vec3 normal{0, 0, 0};
    double weight_sum = 0.0;
};

struct RenderConfig {
    RaySampleConfig sampling;
};

/// Full SDF-branch render of one ray (color, feature+decoded color, depth,
/// normal). Pure given the parameter snapshot.
RenderOutput render_ray_sdf(const FieldParams& params, const Ray& ray, const RenderConfig& config,
                            Rng* rng);

/// Occupancy-branch render (color/depth/normal; no feature).
RenderOutput render_ray_occ(const FieldParams& params, const Ray& ray, const RenderConfig& config,
                            Rng* rng);

/// Occupancy compositing with the analytic indicator as the field; depth then
/// snaps to the first occupied sample.
RenderOutput render_ray_occ_oracle(const AnalyticScene& scene, const Ray& ray, int sample_count);

/// Closed-form derivative of the per-ray L1 color loss with respect to
/// alpha_i, one entry per channel (sign convention: subgradient 0 at zero).
Vec3 rgb_loss_alpha_gradient(std::span<const Vec3> colors, std::span<const double> alphas,
                             const Vec3& gt_color, int index);

/// Reverse-mode route for the same quantity (summed over channels), built on
/// the linear-time suffix recurrence the trainer uses.
std::vector<double> composite_l1_alpha_gradient_reverse(std::span<const Vec3> colors,
                                                        std::span<const double> alphas,
                                                        const Vec3& gt_color);

struct ToyRayRow {
    double t, sdf, sigma, weight;
};

struct ToyRayAnalysis {
    std::vector<ToyRayRow> rows;
    double rendered_depth = 0.0;
    double true_depth = 0.0;
    int num_weight_modes = 0;
};

/// Evaluates the ground-truth SDF along the ray, applies the Laplace density
/// conversion and compositing, and reports rendered vs first-hit depth.
ToyRayAnalysis toy_ray_analysis(const AnalyticScene& scene, const Ray& ray,
                                const DensityScales& scales, int sample_count);

int count_weight_modes(std::span<const double> weights, double relative_floor = 1e-3);

}  // namespace osf
