#include "osf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <thread>

namespace osf {

TrainMode train_mode_from_string(const std::string& name) {
    if (name == "sdf_only") return TrainMode::SdfOnly;
    if (name == "feature") return TrainMode::Feature;
    if (name == "hybrid") return TrainMode::Hybrid;
    if (name == "full") return TrainMode::Full;
    throw std::invalid_argument("unknown training mode '" + name + "'");
}

std::string to_string(TrainMode mode) {
    switch (mode) {
        case TrainMode::SdfOnly: return "sdf_only";
        case TrainMode::Feature: return "feature";
        case TrainMode::Hybrid: return "hybrid";
        case TrainMode::Full: return "full";
    }
    return "full";
}

bool mode_has_feature(TrainMode mode) {
    return mode == TrainMode::Feature || mode == TrainMode::Full;
}
bool mode_has_occ(TrainMode mode) { return mode == TrainMode::Hybrid || mode == TrainMode::Full; }

AdamState AdamState::create(size_t count, double beta1, double beta2, double eps) {
    AdamState s;
    s.m.assign(count, 0.0);
    s.v.assign(count, 0.0);
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
}

void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
               double learning_rate) {
    if (params.size() != grads.size() || params.size() != state.m.size())
        throw std::invalid_argument("adam_step: shape mismatch");
    state.step += 1;
    double c1 = 1.0 - std::pow(state.beta1, double(state.step));
    double c2 = 1.0 - std::pow(state.beta2, double(state.step));
    for (size_t i = 0; i < params.size(); ++i) {
        double g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        double m_hat = state.m[i] / c1;
        double v_hat = state.v[i] / c2;
        params[i] -= learning_rate * m_hat / (std::sqrt(v_hat) + state.eps);
    }
}

RayBatch sample_ray_batch(const Dataset& dataset, Rng& rng, int batch_rays, const Aabb& bounds) {
    if (dataset.frames.empty()) throw std::invalid_argument("sample_ray_batch: empty dataset");
    RayBatch batch;
    batch.rays.reserve(batch_rays);
    size_t frame_count = dataset.frames.size();
    for (int k = 0; k < batch_rays; ++k) {
        int f = int(rng.next_below(frame_count));
        const SupervisionFrame& frame = dataset.frames[f];
        int u = int(rng.next_below(uint64_t(frame.width())));
        int v = int(rng.next_below(uint64_t(frame.height())));

        Ray ray = pixel_ray(frame.camera, u, v);
        double t0, t1;
        bool inside = intersect_aabb(bounds, ray.origin, ray.direction, t0, t1);
        if (inside) {
            ray.near = std::max(t0, 1e-6);
            ray.far = t1;
            inside = ray.near < ray.far;
        }
        if (!inside) {
            ray.near = 0.0;
            ray.far = 1.0;
        }

        batch.rays.push_back(ray);
        batch.gt_rgb.push_back(frame.rgb_at(u, v));
        batch.gt_depth.push_back(frame.depth_at(u, v));
        batch.gt_normal.push_back(frame.normal_at(u, v));
        batch.hit.push_back(std::isfinite(frame.depth_at(u, v)) ? 1 : 0);
        batch.in_bounds.push_back(inside ? 1 : 0);
        batch.pixels.push_back({f, u, v});
    }
    return batch;
}

namespace {

// ---------------------------------------------------------------------------
// Per-ray forward record. Pass 1 fills values only; pass 2 re-runs the same
// deterministic forward keeping tapes, then walks the adjoints back.

struct RayForward {
    SampledRay sampled;
    std::vector<double> sdf, occ, sigma;
    std::vector<Vec3> color, normal, grad;
    std::vector<double> features;  // sample-major hidden features (feature modes)
    CompositeWeights weights_sdf, weights_occ;
    Vec3 color_sdf{0, 0, 0}, decoded_color{0, 0, 0};
    Vec3 normal_sdf{0, 0, 0}, normal_occ{0, 0, 0};
    std::vector<double> feature_composited;
    double depth_sdf = 0, depth_occ = 0;
};

struct WorkerScratch {
    std::vector<GeometryEval> geo;
    std::vector<AppearanceEval> app;
    DecoderEval dec;
    GeometryEval geo_probe;  // sampling pre-pass and eikonal points
    std::vector<double> grads;
    RayForward fwd;
    std::vector<double> adj_feat_hat;   // decoder input adjoint
    std::vector<double> adj_hidden;     // per-sample hidden adjoint
    std::vector<double> adj_geo_feat;   // appearance -> geometry feature adjoint
    std::vector<double> suffix_feature;
    double eikonal_sum = 0.0;

    void prepare(const FieldConfig& config, int max_samples, bool with_grads) {
        geo.resize(max_samples);
        app.resize(max_samples);
        for (auto& e : geo) e.prepare(config);
        for (auto& e : app) e.prepare(config);
        dec.prepare(config);
        geo_probe.prepare(config);
        adj_feat_hat.assign(config.feature_dim, 0.0);
        adj_hidden.assign(config.feature_dim, 0.0);
        adj_geo_feat.assign(config.geo_feature_dim, 0.0);
        suffix_feature.assign(config.feature_dim, 0.0);
        if (with_grads) grads.clear();
    }
};

struct ModeFlags {
    bool feature = false;
    bool occ = false;
};

// Forward of one ray. Sampling randomness is keyed by (seed, step, ray index)
// so pass 2 reproduces pass 1 bit-exactly.
void forward_ray(const FieldParams& params, const Ray& ray, const RaySampleConfig& sampling,
                 const ModeFlags& mode, uint64_t seed, uint64_t step, uint64_t ray_index,
                 WorkerScratch& scratch, bool keep_tape) {
    RayForward& f = scratch.fwd;
    DensityScales scales{params.alpha_scale(), params.beta_scale()};

    Rng rng = Rng::keyed(seed, "ray_sampling", step, ray_index);
    auto density_at = [&](double t) {
        scratch.geo_probe.forward(params, ray.at(t), false);
        return sdf_to_density(scratch.geo_probe.sdf(), scales);
    };
    f.sampled = sample_ray(ray, sampling, &rng,
                           sampling.importance > 0 ? std::function<double(double)>(density_at)
                                                   : nullptr);

    size_t n = f.sampled.ts.size();
    int feat_dim = params.config.feature_dim;
    f.sdf.resize(n);
    f.occ.resize(n);
    f.sigma.resize(n);
    f.color.resize(n);
    f.normal.resize(n);
    f.grad.resize(n);
    if (mode.feature) f.features.resize(n * feat_dim);

    for (size_t i = 0; i < n; ++i) {
        Vec3 p = ray.at(f.sampled.ts[i]);
        GeometryEval& geo = scratch.geo[i];
        geo.forward(params, p, true);
        f.sdf[i] = geo.sdf();
        f.occ[i] = geo.occ();
        f.sigma[i] = sdf_to_density(geo.sdf(), scales);
        f.grad[i] = geo.sdf_gradient();
        f.normal[i] = geo.normal();

        AppearanceEval& app = scratch.app[i];
        app.forward(params, p, ray.direction, f.normal[i], geo.geo_feature());
        f.color[i] = app.color();
        if (mode.feature)
            std::copy(app.hidden_feature().begin(), app.hidden_feature().end(),
                      f.features.begin() + i * feat_dim);
    }

    f.weights_sdf = compute_weights_sdf(f.sigma, f.sampled.deltas);
    f.color_sdf = composite_vec3(f.weights_sdf, f.color);
    f.depth_sdf = composite_scalar(f.weights_sdf, f.sampled.ts);
    f.normal_sdf = composite_vec3(f.weights_sdf, f.normal);
    if (mode.feature) {
        f.feature_composited.assign(feat_dim, 0.0);
        composite(f.weights_sdf, f.features.data(), feat_dim, f.feature_composited.data());
        scratch.dec.forward(params, f.feature_composited);
        // Composited over a black background, matching the direct color path.
        f.decoded_color = scratch.dec.color() * f.weights_sdf.weight_sum();
    }
    if (mode.occ) {
        f.weights_occ = compute_weights_occ(f.occ);
        f.depth_occ = composite_scalar(f.weights_occ, f.sampled.ts);
        f.normal_occ = composite_vec3(f.weights_occ, f.normal);
    }
    (void)keep_tape;  // tapes live in scratch.geo/app either way
}

struct RayAdjoints {
    Vec3 color_sdf{0, 0, 0};     // d(total)/d(rendered sdf color)
    Vec3 decoded_color{0, 0, 0};
    double depth_sdf = 0;
    Vec3 normal_sdf{0, 0, 0};
    double depth_occ = 0;
    Vec3 normal_occ{0, 0, 0};
};

Vec3 l1_sign(const Vec3& diff) {
    auto s = [](double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); };
    return {s(diff.x), s(diff.y), s(diff.z)};
}

// Walks the loss adjoints of one ray back to the parameters. scratch.fwd and
// the per-sample tapes must hold this ray's pass-2 forward.
void backward_ray(const FieldParams& params, const Ray& ray, const ModeFlags& mode,
                  const RayAdjoints& adj, WorkerScratch& scratch) {
    RayForward& f = scratch.fwd;
    size_t n = f.sampled.ts.size();
    if (n == 0) return;
    int feat_dim = params.config.feature_dim;
    std::vector<double>& grads = scratch.grads;

    // Decoded-color adjoint flows through the decoder to the composited
    // feature, and through the background compositing to the weight sum.
    bool use_feature = mode.feature && (adj.decoded_color.x != 0 || adj.decoded_color.y != 0 ||
                                        adj.decoded_color.z != 0);
    std::fill(scratch.adj_feat_hat.begin(), scratch.adj_feat_hat.end(), 0.0);
    double adj_wsum = 0;
    if (use_feature) {
        double wsum = f.weights_sdf.weight_sum();
        adj_wsum = dot(adj.decoded_color, scratch.dec.color());
        scratch.dec.backward(params, adj.decoded_color * wsum, grads, scratch.adj_feat_hat);
    }

    // Suffix recurrences: d(composite)/d(alpha_i) = T_i (x_i - suffix_i) per
    // output stream, accumulated over all active streams of each branch.
    double alpha_scale_bar = 0, beta_scale_bar = 0;
    DensityScales scales{params.alpha_scale(), params.beta_scale()};

    std::vector<double> alpha_bar(n, 0.0), occ_bar(n, 0.0);
    {
        Vec3 suffix_color{0, 0, 0}, suffix_normal{0, 0, 0};
        double suffix_t = 0, suffix_one = 0;
        std::fill(scratch.suffix_feature.begin(), scratch.suffix_feature.end(), 0.0);
        for (int i = int(n) - 1; i >= 0; --i) {
            double T = f.weights_sdf.transmittances[i];
            double a = dot(adj.color_sdf, (f.color[i] - suffix_color) * T);
            a += adj.depth_sdf * T * (f.sampled.ts[i] - suffix_t);
            a += dot(adj.normal_sdf, (f.normal[i] - suffix_normal) * T);
            if (use_feature) {
                const double* fi = f.features.data() + size_t(i) * feat_dim;
                for (int k = 0; k < feat_dim; ++k)
                    a += scratch.adj_feat_hat[k] * T * (fi[k] - scratch.suffix_feature[k]);
                a += adj_wsum * T * (1.0 - suffix_one);
            }
            alpha_bar[i] = a;

            double al = f.weights_sdf.alphas[i];
            suffix_color = f.color[i] * al + suffix_color * (1.0 - al);
            suffix_t = f.sampled.ts[i] * al + suffix_t * (1.0 - al);
            suffix_normal = f.normal[i] * al + suffix_normal * (1.0 - al);
            if (use_feature) {
                const double* fi = f.features.data() + size_t(i) * feat_dim;
                for (int k = 0; k < feat_dim; ++k)
                    scratch.suffix_feature[k] =
                        fi[k] * al + scratch.suffix_feature[k] * (1.0 - al);
                suffix_one = al + suffix_one * (1.0 - al);
            }
        }
    }
    if (mode.occ) {
        Vec3 suffix_normal{0, 0, 0};
        double suffix_t = 0;
        for (int i = int(n) - 1; i >= 0; --i) {
            double T = f.weights_occ.transmittances[i];
            double a = adj.depth_occ * T * (f.sampled.ts[i] - suffix_t);
            a += dot(adj.normal_occ, (f.normal[i] - suffix_normal) * T);
            occ_bar[i] = a;
            double o = f.occ[i];
            suffix_t = f.sampled.ts[i] * o + suffix_t * (1.0 - o);
            suffix_normal = f.normal[i] * o + suffix_normal * (1.0 - o);
        }
    }

    for (size_t i = 0; i < n; ++i) {
        // alpha -> density -> sdf value and density scales
        double one_minus_alpha = 1.0 - f.weights_sdf.alphas[i];
        double sigma_bar = alpha_bar[i] * f.sampled.deltas[i] * one_minus_alpha;
        double sdf_bar = sigma_bar * (-scales.alpha * laplace_cdf_ds(-f.sdf[i], scales.beta));
        alpha_scale_bar += sigma_bar * laplace_cdf(-f.sdf[i], scales.beta);
        beta_scale_bar += sigma_bar * scales.alpha * laplace_cdf_dbeta(-f.sdf[i], scales.beta);

        double occ_logit_bar = 0;
        if (mode.occ) occ_logit_bar = occ_bar[i] * f.occ[i] * (1.0 - f.occ[i]);

        // Appearance inputs: weighted color / hidden-feature adjoints.
        Vec3 color_bar = adj.color_sdf * f.weights_sdf.weights[i];
        const double* hidden_bar = nullptr;
        if (use_feature) {
            double w = f.weights_sdf.weights[i];
            for (int k = 0; k < feat_dim; ++k)
                scratch.adj_hidden[k] = scratch.adj_feat_hat[k] * w;
            hidden_bar = scratch.adj_hidden.data();
        }

        Vec3 adj_normal = adj.normal_sdf * f.weights_sdf.weights[i];
        if (mode.occ) adj_normal += adj.normal_occ * f.weights_occ.weights[i];

        bool appearance_active = color_bar.x != 0 || color_bar.y != 0 || color_bar.z != 0 ||
                                 hidden_bar != nullptr;
        std::fill(scratch.adj_geo_feat.begin(), scratch.adj_geo_feat.end(), 0.0);
        if (appearance_active) {
            Vec3 adj_normal_app;
            scratch.app[i].backward(params, color_bar, hidden_bar, grads, adj_normal_app,
                                    scratch.adj_geo_feat);
            adj_normal += adj_normal_app;
        }

        Vec3 adj_grad = normalize_adjoint(f.grad[i], adj_normal);
        scratch.geo[i].backward(params, sdf_bar, occ_logit_bar,
                                appearance_active ? scratch.adj_geo_feat.data() : nullptr, adj_grad,
                                grads);
    }

    double alpha_raw = params.data[params.alpha_raw()];
    double beta_raw = params.data[params.beta_raw()];
    grads[params.alpha_raw()] += alpha_scale_bar * sigmoid(alpha_raw);
    grads[params.beta_raw()] += beta_scale_bar * sigmoid(beta_raw);
    (void)ray;
}

struct EikonalPoint {
    Vec3 p;
};

std::vector<EikonalPoint> make_eikonal_points(const TrainConfig& config, const Aabb& bounds,
                                              const RayBatch& batch,
                                              const std::vector<SampledRay>& sampled, uint64_t step) {
    int count = config.eikonal_points > 0 ? config.eikonal_points : config.batch_rays;
    std::vector<EikonalPoint> points;
    points.reserve(count);
    double jitter = 0.02 * bounds.diagonal();
    for (int k = 0; k < count; ++k) {
        Rng rng = Rng::keyed(config.seed, "eikonal", step, uint64_t(k));
        bool uniform = (k % 2 == 0);
        Vec3 p;
        if (!uniform && !batch.rays.empty()) {
            size_t r = rng.next_below(batch.rays.size());
            if (batch.in_bounds[r] && !sampled[r].ts.empty()) {
                double t = sampled[r].ts[rng.next_below(sampled[r].ts.size())];
                p = batch.rays[r].at(t) + Vec3{rng.uniform(-jitter, jitter),
                                               rng.uniform(-jitter, jitter),
                                               rng.uniform(-jitter, jitter)};
            } else {
                uniform = true;
            }
        }
        if (uniform || batch.rays.empty()) {
            p = {rng.uniform(bounds.min.x, bounds.max.x), rng.uniform(bounds.min.y, bounds.max.y),
                 rng.uniform(bounds.min.z, bounds.max.z)};
        }
        points.push_back({p});
    }
    return points;
}

void run_sharded(int workers, size_t count, const std::function<void(int, size_t, size_t)>& body) {
    workers = std::max(1, workers);
    if (workers == 1 || count < 2 * size_t(workers)) {
        body(0, 0, count);
        return;
    }
    std::vector<std::thread> pool;
    size_t per = (count + workers - 1) / workers;
    std::vector<std::exception_ptr> errors(workers);
    for (int w = 0; w < workers; ++w) {
        size_t lo = w * per, hi = std::min(count, lo + per);
        if (lo >= hi) break;
        pool.emplace_back([&, w, lo, hi] {
            try {
                body(w, lo, hi);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

}  // namespace

double probe_region_grad_norm(const FieldParams& params, const Dataset& dataset,
                              const ProbeRegion& region, bool feature_loss,
                              const RaySampleConfig& sampling, uint64_t seed, int max_rays) {
    if (region.pixels.empty()) return 0.0;

    // Deterministic subset of the region's pixels.
    std::vector<std::array<int, 3>> pixels = region.pixels;
    if (int(pixels.size()) > max_rays) {
        Rng rng = Rng::keyed(seed, "probe_subset", Rng::hash_tag(region.name));
        for (size_t i = 0; i < size_t(max_rays); ++i) {
            size_t j = i + rng.next_below(pixels.size() - i);
            std::swap(pixels[i], pixels[j]);
        }
        pixels.resize(max_rays);
    }

    ModeFlags mode{feature_loss, false};
    WorkerScratch scratch;
    scratch.prepare(params.config, sampling.stratified + sampling.importance + 1, false);
    DensityScales scales{params.alpha_scale(), params.beta_scale()};
    int feat_dim = params.config.feature_dim;
    std::vector<double> sink;
    if (feature_loss) sink.assign(params.size(), 0.0);  // decoder param grads unused here

    double total = 0;
    size_t used = 0;
    for (size_t idx = 0; idx < pixels.size(); ++idx) {
        auto [frame_idx, u, v] = pixels[idx];
        const SupervisionFrame& frame = dataset.frames.at(frame_idx);
        Ray ray = pixel_ray(frame.camera, u, v);
        double t0, t1;
        if (!intersect_aabb(dataset.bounds, ray.origin, ray.direction, t0, t1)) continue;
        ray.near = std::max(t0, 1e-6);
        ray.far = t1;
        if (ray.near >= ray.far) continue;

        forward_ray(params, ray, sampling, mode, seed, 0, idx, scratch, false);
        RayForward& f = scratch.fwd;
        size_t n = f.sampled.ts.size();
        if (n == 0) continue;

        Vec3 gt = frame.rgb_at(u, v);

        // Adjoint of the per-ray L1 loss on the active color stream.
        Vec3 color_adj{0, 0, 0};
        double adj_wsum = 0;
        std::fill(scratch.adj_feat_hat.begin(), scratch.adj_feat_hat.end(), 0.0);
        if (feature_loss) {
            Vec3 sign = l1_sign(f.decoded_color - gt);
            double wsum = f.weights_sdf.weight_sum();
            adj_wsum = dot(sign, scratch.dec.color());
            scratch.dec.backward(params, sign * wsum, sink, scratch.adj_feat_hat);
        } else {
            color_adj = l1_sign(f.color_sdf - gt);
        }

        // d(loss)/d(alpha_i) via the suffix recurrence, then alpha -> sdf.
        double norm_sq = 0;
        Vec3 suffix_color{0, 0, 0};
        double suffix_one = 0;
        std::fill(scratch.suffix_feature.begin(), scratch.suffix_feature.end(), 0.0);
        for (int i = int(n) - 1; i >= 0; --i) {
            double T = f.weights_sdf.transmittances[i];
            double a = 0;
            if (feature_loss) {
                const double* fi = f.features.data() + size_t(i) * feat_dim;
                for (int k = 0; k < feat_dim; ++k)
                    a += scratch.adj_feat_hat[k] * T * (fi[k] - scratch.suffix_feature[k]);
                a += adj_wsum * T * (1.0 - suffix_one);
            } else {
                a = dot(color_adj, (f.color[i] - suffix_color) * T);
            }
            double al = f.weights_sdf.alphas[i];
            double sigma_bar = a * f.sampled.deltas[i] * (1.0 - al);
            double sdf_bar = sigma_bar * (-scales.alpha * laplace_cdf_ds(-f.sdf[i], scales.beta));
            norm_sq += sdf_bar * sdf_bar;

            suffix_color = f.color[i] * al + suffix_color * (1.0 - al);
            if (feature_loss) {
                const double* fi = f.features.data() + size_t(i) * feat_dim;
                for (int k = 0; k < feat_dim; ++k)
                    scratch.suffix_feature[k] = fi[k] * al + scratch.suffix_feature[k] * (1.0 - al);
                suffix_one = al + suffix_one * (1.0 - al);
            }
        }
        total += std::sqrt(norm_sq);
        ++used;
    }
    return used == 0 ? 0.0 : total / double(used);
}

namespace {

// One training step's forward/backward over a batch. Owns the per-worker
// scratch so train() can reuse it across iterations.
class StepEngine {
public:
    StepEngine(const TrainConfig& config, const Dataset& dataset, const Aabb& bounds)
        : config_(config),
          dataset_(dataset),
          bounds_(bounds),
          mode_{mode_has_feature(config.mode), mode_has_occ(config.mode)},
          workers_(std::max(1, config.workers)),
          scratch_(workers_),
          ray_out_(size_t(config.batch_rays)) {
        int max_samples = config.sampling.stratified + config.sampling.importance + 1;
        for (auto& s : scratch_) s.prepare(config.field, max_samples, true);
    }

    LossBreakdown run(const FieldParams& params, uint64_t step, std::vector<double>* grads_out) {
        const size_t R = size_t(config_.batch_rays);
        if (grads_out)
            for (auto& s : scratch_) s.grads.assign(params.size(), 0.0);

        Rng batch_rng = Rng::keyed(config_.seed, "batch", step);
        RayBatch batch = sample_ray_batch(dataset_, batch_rng, config_.batch_rays, bounds_);

        // Pass 1: forward all rays, collect per-ray outputs.
        run_sharded(workers_, R, [&](int w, size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                if (!batch.in_bounds[r]) {
                    ray_out_[r] = RayOutputs{};
                    continue;
                }
                forward_ray(params, batch.rays[r], config_.sampling, mode_, config_.seed, step, r,
                            scratch_[w], false);
                RayForward& f = scratch_[w].fwd;
                ray_out_[r] = {f.color_sdf, f.decoded_color, f.normal_sdf, f.normal_occ,
                               f.depth_sdf, f.depth_occ, f.sampled};
            }
        });

        // Batch losses.
        size_t n_rgb = 0;
        double rgb_sdf_sum = 0, rgb_feature_sum = 0;
        std::vector<double> pred_depth_sdf(R, 0), pred_depth_occ(R, 0);
        std::vector<uint8_t> geom_valid(R, 0);
        for (size_t r = 0; r < R; ++r) {
            if (!batch.in_bounds[r]) continue;
            ++n_rgb;
            Vec3 d = ray_out_[r].color_sdf - batch.gt_rgb[r];
            rgb_sdf_sum += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z);
            if (mode_.feature) {
                Vec3 df = ray_out_[r].decoded_color - batch.gt_rgb[r];
                rgb_feature_sum += std::fabs(df.x) + std::fabs(df.y) + std::fabs(df.z);
            }
            pred_depth_sdf[r] = ray_out_[r].depth_sdf;
            pred_depth_occ[r] = ray_out_[r].depth_occ;
            geom_valid[r] = batch.hit[r];
        }
        size_t n_geom = 0;
        for (auto v : geom_valid) n_geom += v;

        double rgb_sdf = n_rgb ? rgb_sdf_sum / double(n_rgb) : 0.0;
        double rgb_feature = mode_.feature && n_rgb ? rgb_feature_sum / double(n_rgb) : 0.0;

        ScaleShift fit_sdf = solve_scale_shift(pred_depth_sdf, batch.gt_depth, geom_valid);
        double d_sdf = depth_loss(pred_depth_sdf, batch.gt_depth, geom_valid, fit_sdf);
        ScaleShift fit_occ;
        double d_occ = 0;
        if (mode_.occ) {
            fit_occ = solve_scale_shift(pred_depth_occ, batch.gt_depth, geom_valid);
            d_occ = depth_loss(pred_depth_occ, batch.gt_depth, geom_valid, fit_occ);
        }

        double n_sdf_loss = 0, n_occ_loss = 0;
        for (size_t r = 0; r < R; ++r) {
            if (!geom_valid[r]) continue;
            Vec3 d = ray_out_[r].normal_sdf - batch.gt_normal[r];
            n_sdf_loss += std::fabs(d.x) + std::fabs(d.y) + std::fabs(d.z) +
                          std::fabs(1.0 - dot(ray_out_[r].normal_sdf, batch.gt_normal[r]));
            if (mode_.occ) {
                Vec3 dn = ray_out_[r].normal_occ - batch.gt_normal[r];
                n_occ_loss += std::fabs(dn.x) + std::fabs(dn.y) + std::fabs(dn.z) +
                              std::fabs(1.0 - dot(ray_out_[r].normal_occ, batch.gt_normal[r]));
            }
        }
        if (n_geom) {
            n_sdf_loss /= double(n_geom);
            n_occ_loss /= double(n_geom);
        }

        // Eikonal points: half uniform in bounds, half jittered around ray samples.
        std::vector<SampledRay> sampled_per_ray(R);
        for (size_t r = 0; r < R; ++r) sampled_per_ray[r] = ray_out_[r].sampled;
        auto eik_points = make_eikonal_points(config_, bounds_, batch, sampled_per_ray, step);
        std::vector<double> eik_norms(eik_points.size(), 0.0);
        run_sharded(workers_, eik_points.size(), [&](int w, size_t lo, size_t hi) {
            for (size_t k = lo; k < hi; ++k) {
                scratch_[w].geo_probe.forward(params, eik_points[k].p, true);
                eik_norms[k] = norm(scratch_[w].geo_probe.sdf_gradient());
            }
        });
        double eik = eikonal_loss(eik_norms);

        LossBreakdown breakdown = total_loss(rgb_sdf, rgb_feature, eik, d_occ, d_sdf, n_occ_loss,
                                             n_sdf_loss, config_.loss_weights);

        // Abort before touching the parameters if anything went non-finite.
        auto check = [&](double v, const char* name) {
            if (!std::isfinite(v)) throw NumericalError(name, step);
        };
        check(breakdown.rgb_sdf, "rgb_sdf");
        check(breakdown.rgb_feature, "rgb_feature");
        check(breakdown.eikonal, "eikonal");
        check(breakdown.depth_occ, "depth_occ");
        check(breakdown.depth_sdf, "depth_sdf");
        check(breakdown.normal_occ, "normal_occ");
        check(breakdown.normal_sdf, "normal_sdf");

        if (!grads_out) return breakdown;

        // Pass 2: backward. Per-ray loss adjoints are cheap to reconstruct.
        const LossWeights& lw = config_.loss_weights;
        run_sharded(workers_, R, [&](int w, size_t lo, size_t hi) {
            for (size_t r = lo; r < hi; ++r) {
                if (!batch.in_bounds[r]) continue;
                forward_ray(params, batch.rays[r], config_.sampling, mode_, config_.seed, step, r,
                            scratch_[w], true);

                RayAdjoints adj;
                adj.color_sdf = l1_sign(ray_out_[r].color_sdf - batch.gt_rgb[r]) / double(n_rgb);
                if (mode_.feature)
                    adj.decoded_color =
                        l1_sign(ray_out_[r].decoded_color - batch.gt_rgb[r]) / double(n_rgb);
                if (geom_valid[r] && n_geom) {
                    double resid =
                        fit_sdf.scale * ray_out_[r].depth_sdf + fit_sdf.shift - batch.gt_depth[r];
                    adj.depth_sdf = lw.depth_sdf * 2.0 * fit_sdf.scale * resid / double(n_geom);
                    Vec3 nd = ray_out_[r].normal_sdf - batch.gt_normal[r];
                    double dsign = 1.0 - dot(ray_out_[r].normal_sdf, batch.gt_normal[r]);
                    Vec3 adj_n = l1_sign(nd) -
                                 batch.gt_normal[r] * (dsign > 0 ? 1.0 : (dsign < 0 ? -1.0 : 0.0));
                    adj.normal_sdf = adj_n * (lw.normal / double(n_geom));
                    if (mode_.occ) {
                        double resid_o = fit_occ.scale * ray_out_[r].depth_occ + fit_occ.shift -
                                         batch.gt_depth[r];
                        adj.depth_occ =
                            lw.depth_occ * 2.0 * fit_occ.scale * resid_o / double(n_geom);
                        Vec3 ndo = ray_out_[r].normal_occ - batch.gt_normal[r];
                        double dsigno = 1.0 - dot(ray_out_[r].normal_occ, batch.gt_normal[r]);
                        Vec3 adj_no =
                            l1_sign(ndo) -
                            batch.gt_normal[r] * (dsigno > 0 ? 1.0 : (dsigno < 0 ? -1.0 : 0.0));
                        adj.normal_occ = adj_no * (lw.normal / double(n_geom));
                    }
                }
                backward_ray(params, batch.rays[r], mode_, adj, scratch_[w]);
            }
        });

        // Eikonal backward (second-order path through the sdf gradient).
        if (!eik_points.empty() && lw.eikonal > 0) {
            double scale = lw.eikonal * 2.0 / double(eik_points.size());
            run_sharded(workers_, eik_points.size(), [&](int w, size_t lo, size_t hi) {
                for (size_t k = lo; k < hi; ++k) {
                    GeometryEval& geo = scratch_[w].geo_probe;
                    geo.forward(params, eik_points[k].p, true);
                    Vec3 g = geo.sdf_gradient();
                    double gn = norm(g);
                    if (gn <= 1e-12) continue;
                    Vec3 adj_grad = g * (scale * (gn - 1.0) / gn);
                    geo.backward(params, 0.0, 0.0, nullptr, adj_grad, scratch_[w].grads);
                }
            });
        }

        // Deterministic reduction in worker order.
        grads_out->assign(params.size(), 0.0);
        for (int w = 0; w < workers_; ++w)
            for (size_t i = 0; i < grads_out->size(); ++i) (*grads_out)[i] += scratch_[w].grads[i];
        return breakdown;
    }

private:
    struct RayOutputs {
        Vec3 color_sdf, decoded_color, normal_sdf, normal_occ;
        double depth_sdf = 0, depth_occ = 0;
        SampledRay sampled;
    };

    const TrainConfig& config_;
    const Dataset& dataset_;
    Aabb bounds_;
    ModeFlags mode_;
    int workers_;
    std::vector<WorkerScratch> scratch_;
    std::vector<RayOutputs> ray_out_;
};

}  // namespace

LossBreakdown compute_loss_and_gradient(const TrainConfig& config, const Dataset& dataset,
                                        const Aabb& bounds, const FieldParams& params,
                                        uint64_t step, std::vector<double>* grads) {
    StepEngine engine(config, dataset, bounds);
    return engine.run(params, step, grads);
}

TrainResult train(const TrainConfig& config, const Dataset& dataset, const Aabb& bounds,
                  const std::vector<ProbeRegion>& probe_regions, const TrainCallbacks& callbacks,
                  const Checkpoint* resume) {
    if (config.iterations < 1) throw std::invalid_argument("train: iterations must be >= 1");
    if (config.learning_rate <= 0) throw std::invalid_argument("train: learning rate must be > 0");

    TrainResult result;
    FieldConfig field = resolve_field_config(config.field, bounds);
    if (resume) {
        FieldParams probe = FieldParams::create(field, bounds.center());
        if (resume->params.architecture_hash() != probe.architecture_hash())
            throw CheckpointError("resume checkpoint architecture does not match the config");
        result.params = resume->params;
        result.adam = AdamState::create(result.params.size(), config.adam_beta1, config.adam_beta2,
                                        config.adam_eps);
        if (resume->adam_m) {
            result.adam.m = *resume->adam_m;
            result.adam.v = *resume->adam_v;
        }
        result.adam.step = resume->step;
    } else {
        result.params = FieldParams::create(field, bounds.center());
        result.params.initialize(config.seed);
        result.adam = AdamState::create(result.params.size(), config.adam_beta1, config.adam_beta2,
                                        config.adam_eps);
    }

    for (auto& region : probe_regions) {
        result.probe.regions.push_back(region.name);
        result.probe.series.emplace_back();
    }
    auto run_probes = [&](uint64_t step) {
        if (config.probe_interval <= 0 || probe_regions.empty()) return;
        if (step % uint64_t(config.probe_interval) != 0 && step != uint64_t(config.iterations))
            return;
        result.probe.steps.push_back(step);
        for (size_t r = 0; r < probe_regions.size(); ++r) {
            double value = probe_region_grad_norm(result.params, dataset, probe_regions[r],
                                                  mode_has_feature(config.mode), config.sampling,
                                                  config.seed, config.probe_rays_per_region);
            result.probe.series[r].push_back(value);
        }
    };

    StepEngine engine(config, dataset, bounds);
    std::vector<double> grads(result.params.size(), 0.0);

    for (uint64_t step = result.adam.step; step < uint64_t(config.iterations); ++step) {
        run_probes(step);

        LossBreakdown breakdown = engine.run(result.params, step, &grads);

        double lr = config.learning_rate;
        if (config.lr_cosine_decay)
            lr *= 0.5 * (1.0 + std::cos(M_PI * double(step) / double(config.iterations)));
        adam_step(result.params.data, grads, result.adam, lr);

        if (config.log_interval > 0 &&
            (step % uint64_t(config.log_interval) == 0 || step + 1 == uint64_t(config.iterations))) {
            result.log.emplace_back(step, breakdown);
            if (callbacks.on_log) callbacks.on_log(step, breakdown);
        }
        if (!callbacks.checkpoint_dir.empty() && config.checkpoint_interval > 0 &&
            (step + 1) % uint64_t(config.checkpoint_interval) == 0) {
            save_checkpoint(callbacks.checkpoint_dir + "/checkpoint_" + std::to_string(step + 1) +
                                ".bin",
                            result.params, step + 1, &result.adam.m, &result.adam.v);
        }
    }

    run_probes(uint64_t(config.iterations));
    result.final_step = result.adam.step;
    return result;
}

GradientProbeResult gradient_probe(const TrainConfig& config, const Dataset& dataset,
                                   const Aabb& bounds, const std::vector<ProbeRegion>& regions) {
    TrainConfig probe_config = config;
    if (probe_config.probe_interval <= 0)
        probe_config.probe_interval = std::max(1, config.iterations / 10);
    return train(probe_config, dataset, bounds, regions).probe;
}

FieldConfig resolve_field_config(FieldConfig config, const Aabb& bounds) {
    if (config.init_radius <= 0) {
        Vec3 half = bounds.extent() * 0.5;
        config.init_radius = 0.8 * std::min({half.x, half.y, half.z});
    }
    return config;
}

std::vector<ProbeRegion> build_intensity_regions(const Dataset& dataset, double dark_below,
                                                 double bright_above, int max_pixels) {
    ProbeRegion dark{"dark", {}}, bright{"bright", {}};
    double dark_mean = 0, bright_mean = 0;
    for (int f = 0; f < int(dataset.frames.size()); ++f) {
        const SupervisionFrame& frame = dataset.frames[f];
        for (int v = 0; v < frame.height(); ++v) {
            for (int u = 0; u < frame.width(); ++u) {
                if (!std::isfinite(frame.depth_at(u, v))) continue;
                Vec3 c = frame.rgb_at(u, v);
                double mx = std::max(c.x, std::max(c.y, c.z));
                if (mx < dark_below && int(dark.pixels.size()) < max_pixels) {
                    dark.pixels.push_back({f, u, v});
                    dark_mean += mx;
                } else if (mx > bright_above && int(bright.pixels.size()) < max_pixels) {
                    bright.pixels.push_back({f, u, v});
                    bright_mean += mx;
                }
            }
        }
    }
    if (dark.pixels.empty() || bright.pixels.empty())
        throw std::invalid_argument("dataset lacks dark or bright pixels for probe regions");
    dark_mean /= double(dark.pixels.size());
    bright_mean /= double(bright.pixels.size());
    if (!(dark_mean < 0.05 && bright_mean > 0.5))
        throw std::invalid_argument("probe regions violate the intensity preconditions");
    return {dark, bright};
}

}  // namespace osf
