#pragma once

#include <array>
#include <functional>
#include <string>
#include <vector>

#include "osf/dataset.hpp"
#include "osf/fields.hpp"
#include "osf/losses.hpp"
#include "osf/render.hpp"

namespace osf {

/// Which loss terms are active. sdf_only is the no-feature, no-occupancy
/// baseline; feature adds the decoded-color loss; hybrid adds the
/// occupancy-branch depth/normal losses; full enables everything.
enum class TrainMode { SdfOnly, Feature, Hybrid, Full };

TrainMode train_mode_from_string(const std::string& name);
std::string to_string(TrainMode mode);
bool mode_has_feature(TrainMode mode);
bool mode_has_occ(TrainMode mode);

struct TrainConfig {
    double learning_rate = 5e-4;
    int batch_rays = 512;
    int iterations = 2000;
    TrainMode mode = TrainMode::Full;
    LossWeights loss_weights;
    uint64_t seed = 1;
    RaySampleConfig sampling{64, 32, false, 0.0};
    int eikonal_points = 0;  // 0: one per batch ray
    FieldConfig field;
    int log_interval = 50;
    int checkpoint_interval = 0;  // 0: final checkpoint only
    int probe_interval = 0;       // 0: no gradient probes
    int probe_rays_per_region = 128;
    bool lr_cosine_decay = false;
    int workers = 1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
};

struct AdamState {
    std::vector<double> m, v;
    uint64_t step = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    static AdamState create(size_t count, double beta1 = 0.9, double beta2 = 0.999,
                            double eps = 1e-8);
};

/// Bias-corrected Adam update, in place.
void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
               double learning_rate);

struct RayBatch {
    std::vector<Ray> rays;          // near/far clipped to the scene bounds
    std::vector<Vec3> gt_rgb;
    std::vector<double> gt_depth;   // +inf for misses
    std::vector<Vec3> gt_normal;
    std::vector<uint8_t> hit;       // gt depth finite
    std::vector<uint8_t> in_bounds; // ray intersects the bounds box
    std::vector<std::array<int, 3>> pixels;  // frame, u, v
};

/// Uniform over all pixels of all frames; reproducible from the rng stream.
RayBatch sample_ray_batch(const Dataset& dataset, Rng& rng, int batch_rays, const Aabb& bounds);

struct ProbeRegion {
    std::string name;
    std::vector<std::array<int, 3>> pixels;  // frame, u, v
};

struct GradientProbeResult {
    std::vector<uint64_t> steps;
    std::vector<std::string> regions;
    std::vector<std::vector<double>> series;  // [region][probe index]
};

struct NumericalError : std::runtime_error {
    std::string term;
    uint64_t step;
    NumericalError(const std::string& term_name, uint64_t at_step)
        : std::runtime_error("non-finite loss term '" + term_name + "' at step " +
                             std::to_string(at_step)),
          term(term_name),
          step(at_step) {}
};

struct TrainCallbacks {
    std::function<void(uint64_t, const LossBreakdown&)> on_log;
    std::string checkpoint_dir;  // interval checkpoints land here when set
};

struct TrainResult {
    FieldParams params;
    AdamState adam;
    std::vector<std::pair<uint64_t, LossBreakdown>> log;
    GradientProbeResult probe;
    uint64_t final_step = 0;
};

/// The optimization loop: sample batch, render both branches per mode, total
/// loss, exact backward, Adam. Bit-reproducible for a fixed seed and worker
/// count; throws NumericalError naming the first non-finite term.
TrainResult train(const TrainConfig& config, const Dataset& dataset, const Aabb& bounds,
                  const std::vector<ProbeRegion>& probe_regions = {},
                  const TrainCallbacks& callbacks = {}, const Checkpoint* resume = nullptr);

/// Loss (and, when grads is non-null, the exact parameter gradient) of one
/// training step at a fixed parameter snapshot. This is the unit train()
/// iterates; exposed so gradients can be checked against finite differences.
LossBreakdown compute_loss_and_gradient(const TrainConfig& config, const Dataset& dataset,
                                        const Aabb& bounds, const FieldParams& params,
                                        uint64_t step, std::vector<double>* grads);

/// Mean over a region's rays of the L2 norm of d(ray rgb loss)/d(per-sample
/// sdf), using the decoded-feature loss when `feature_loss` is set.
double probe_region_grad_norm(const FieldParams& params, const Dataset& dataset,
                              const ProbeRegion& region, bool feature_loss,
                              const RaySampleConfig& sampling, uint64_t seed, int max_rays);

/// Convenience wrapper: trains with probes enabled and returns the series.
GradientProbeResult gradient_probe(const TrainConfig& config, const Dataset& dataset,
                                   const Aabb& bounds, const std::vector<ProbeRegion>& regions);

/// Validates the probe precondition (dark mean intensity < 0.05, bright > 0.5)
/// and returns regions built from ground-truth intensities.
std::vector<ProbeRegion> build_intensity_regions(const Dataset& dataset, double dark_below = 0.05,
                                                 double bright_above = 0.5, int max_pixels = 4096);

/// Fills in the automatic initialization radius (a sphere inscribed in the
/// bounds) when the config leaves it unset.
FieldConfig resolve_field_config(FieldConfig config, const Aabb& bounds);

}  // namespace osf
