#include "osf/render.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace osf {

double laplace_cdf(double s, double beta) {
    if (s <= 0) return 0.5 * std::exp(s / beta);
    return 1.0 - 0.5 * std::exp(-s / beta);
}

double laplace_cdf_ds(double s, double beta) { return 0.5 / beta * std::exp(-std::fabs(s) / beta); }

double laplace_cdf_dbeta(double s, double beta) {
    // d/dbeta of both branches collapses to -s/beta^2 times the pdf tail.
    if (s <= 0) return 0.5 * std::exp(s / beta) * (-s / (beta * beta));
    return -0.5 * std::exp(-s / beta) * (s / (beta * beta));
}

double sdf_to_density(double sdf, const DensityScales& scales) {
    return scales.alpha * laplace_cdf(-sdf, scales.beta);
}

CompositeWeights compute_weights_sdf(std::span<const double> sigmas,
                                     std::span<const double> deltas) {
    if (sigmas.size() != deltas.size())
        throw std::invalid_argument("compute_weights_sdf: sigma/delta length mismatch");
    CompositeWeights out;
    size_t n = sigmas.size();
    out.alphas.resize(n);
    out.transmittances.resize(n);
    out.weights.resize(n);
    double transmittance = 1.0;
    for (size_t i = 0; i < n; ++i) {
        double alpha = 1.0 - std::exp(-sigmas[i] * deltas[i]);
        out.alphas[i] = alpha;
        out.transmittances[i] = transmittance;
        out.weights[i] = transmittance * alpha;
        transmittance *= (1.0 - alpha);
    }
    out.residual_transmittance = transmittance;
    return out;
}

CompositeWeights compute_weights_occ(std::span<const double> occs) {
    CompositeWeights out;
    size_t n = occs.size();
    out.alphas.assign(occs.begin(), occs.end());
    out.transmittances.resize(n);
    out.weights.resize(n);
    double transmittance = 1.0;
    for (size_t i = 0; i < n; ++i) {
        out.transmittances[i] = transmittance;
        out.weights[i] = transmittance * occs[i];
        transmittance *= (1.0 - occs[i]);
    }
    out.residual_transmittance = transmittance;
    return out;
}

void composite(const CompositeWeights& weights, const double* values, int dim, double* out) {
    std::fill(out, out + dim, 0.0);
    for (size_t i = 0; i < weights.weights.size(); ++i) {
        double w = weights.weights[i];
        if (w == 0.0) continue;
        const double* v = values + size_t(i) * dim;
        for (int d = 0; d < dim; ++d) out[d] += w * v[d];
    }
}

double composite_scalar(const CompositeWeights& weights, std::span<const double> values) {
    if (values.size() != weights.weights.size())
        throw std::invalid_argument("composite: value/weight length mismatch");
    double out = 0;
    for (size_t i = 0; i < values.size(); ++i) out += weights.weights[i] * values[i];
    return out;
}

Vec3 composite_vec3(const CompositeWeights& weights, std::span<const Vec3> values) {
    if (values.size() != weights.weights.size())
        throw std::invalid_argument("composite: value/weight length mismatch");
    Vec3 out{0, 0, 0};
    for (size_t i = 0; i < values.size(); ++i) out += values[i] * weights.weights[i];
    return out;
}

void fill_deltas(std::span<const double> ts, double cap, std::vector<double>& deltas) {
    size_t n = ts.size();
    deltas.resize(n);
    for (size_t i = 0; i + 1 < n; ++i) deltas[i] = ts[i + 1] - ts[i];
    if (n > 0) deltas[n - 1] = cap;
}

SampledRay sample_ray(const Ray& ray, const RaySampleConfig& config, Rng* rng,
                      const std::function<double(double)>& density_at) {
    if (!(ray.near < ray.far)) throw std::invalid_argument("sample_ray: requires near < far");
    if (config.stratified < 2) throw std::invalid_argument("sample_ray: requires count >= 2");

    SampledRay out;
    double range = ray.far - ray.near;
    double stratum = range / config.stratified;
    out.ts.reserve(config.stratified + config.importance);
    for (int i = 0; i < config.stratified; ++i) {
        double u = config.deterministic || !rng ? 0.5 : rng->next_double();
        out.ts.push_back(ray.near + (i + u) * stratum);
    }

    if (config.importance > 0 && density_at) {
        // First-pass weights over the stratified intervals drive an inverse-CDF
        // draw; a small uniform floor keeps empty regions reachable.
        std::vector<double> sigmas(out.ts.size()), deltas;
        for (size_t i = 0; i < out.ts.size(); ++i) sigmas[i] = density_at(out.ts[i]);
        fill_deltas(out.ts, stratum, deltas);
        CompositeWeights weights = compute_weights_sdf(sigmas, deltas);

        std::vector<double> cdf(weights.weights.size() + 1, 0.0);
        double floor = 0.01 / double(config.stratified);
        for (size_t i = 0; i < weights.weights.size(); ++i)
            cdf[i + 1] = cdf[i] + weights.weights[i] + floor;
        double total = cdf.back();

        for (int k = 0; k < config.importance; ++k) {
            double u = (config.deterministic || !rng ? (k + 0.5) / config.importance
                                                     : rng->next_double()) *
                       total;
            size_t bin =
                std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin();
            bin = std::min(std::max<size_t>(bin, 1) - 1, weights.weights.size() - 1);
            double frac = (u - cdf[bin]) / std::max(cdf[bin + 1] - cdf[bin], 1e-300);
            out.ts.push_back(ray.near + (bin + frac) * stratum);
        }
        std::sort(out.ts.begin(), out.ts.end());
        // Enforce strict ascent; exact duplicates would make deltas vanish.
        std::vector<double> unique_ts;
        unique_ts.reserve(out.ts.size());
        for (double t : out.ts)
            if (unique_ts.empty() || t > unique_ts.back() + 1e-12 * range) unique_ts.push_back(t);
        out.ts = std::move(unique_ts);
    }

    double cap = config.delta_cap > 0 ? config.delta_cap : stratum;
    fill_deltas(out.ts, cap, out.deltas);
    return out;
}

namespace {

struct FieldRaySamples {
    SampledRay sampled;
    std::vector<double> sdfs, occs;
    std::vector<Vec3> colors, normals;
    std::vector<double> features;  // sample-major, feature_dim each
};

FieldRaySamples evaluate_field_along_ray(const FieldParams& params, const Ray& ray,
                                         const RenderConfig& config, Rng* rng, bool need_appearance) {
    DensityScales scales{params.alpha_scale(), params.beta_scale()};
    GeometryEval geo;
    geo.prepare(params.config);

    auto density_at = [&](double t) {
        geo.forward(params, ray.at(t), false);
        return sdf_to_density(geo.sdf(), scales);
    };

    FieldRaySamples out;
    std::function<double(double)> density_fn;
    if (config.sampling.importance > 0) density_fn = density_at;
    out.sampled = sample_ray(ray, config.sampling, rng, density_fn);

    AppearanceEval app;
    if (need_appearance) app.prepare(params.config);
    size_t n = out.sampled.ts.size();
    out.sdfs.resize(n);
    out.occs.resize(n);
    out.colors.resize(n);
    out.normals.resize(n);
    if (need_appearance) out.features.resize(n * params.config.feature_dim);

    for (size_t i = 0; i < n; ++i) {
        Vec3 p = ray.at(out.sampled.ts[i]);
        geo.forward(params, p, true);
        out.sdfs[i] = geo.sdf();
        out.occs[i] = geo.occ();
        out.normals[i] = geo.normal();
        if (need_appearance) {
            app.forward(params, p, ray.direction, geo.normal(), geo.geo_feature());
            out.colors[i] = app.color();
            std::copy(app.hidden_feature().begin(), app.hidden_feature().end(),
                      out.features.begin() + i * params.config.feature_dim);
        }
    }
    return out;
}

RenderOutput composite_render(const FieldParams& params, const FieldRaySamples& samples,
                              const CompositeWeights& weights, bool with_feature) {
    RenderOutput out;
    out.color = composite_vec3(weights, samples.colors);
    out.depth = composite_scalar(weights, samples.sampled.ts);
    out.normal = composite_vec3(weights, samples.normals);
    out.weight_sum = weights.weight_sum();
    if (with_feature) {
        out.feature.assign(params.config.feature_dim, 0.0);
        composite(weights, samples.features.data(), params.config.feature_dim, out.feature.data());
        // Like the direct path, the decoded color composites over a black
        // background with the residual transmittance.
        out.decoded_color = decode_feature(params, out.feature) * out.weight_sum;
    }
    return out;
}

}  // namespace

RenderOutput render_ray_sdf(const FieldParams& params, const Ray& ray, const RenderConfig& config,
                            Rng* rng) {
    if (!ray.valid()) throw std::invalid_argument("render_ray_sdf: invalid ray");
    FieldRaySamples samples = evaluate_field_along_ray(params, ray, config, rng, true);
    DensityScales scales{params.alpha_scale(), params.beta_scale()};
    std::vector<double> sigmas(samples.sdfs.size());
    for (size_t i = 0; i < sigmas.size(); ++i) sigmas[i] = sdf_to_density(samples.sdfs[i], scales);
    CompositeWeights weights = compute_weights_sdf(sigmas, samples.sampled.deltas);
    return composite_render(params, samples, weights, true);
}

RenderOutput render_ray_occ(const FieldParams& params, const Ray& ray, const RenderConfig& config,
                            Rng* rng) {
    if (!ray.valid()) throw std::invalid_argument("render_ray_occ: invalid ray");
    FieldRaySamples samples = evaluate_field_along_ray(params, ray, config, rng, true);
    CompositeWeights weights = compute_weights_occ(samples.occs);
    return composite_render(params, samples, weights, false);
}

RenderOutput render_ray_occ_oracle(const AnalyticScene& scene, const Ray& ray, int sample_count) {
    RaySampleConfig sampling;
    sampling.stratified = sample_count;
    sampling.importance = 0;
    sampling.deterministic = true;
    SampledRay sampled = sample_ray(ray, sampling, nullptr);

    std::vector<double> occs(sampled.ts.size());
    std::vector<Vec3> normals(sampled.ts.size());
    for (size_t i = 0; i < sampled.ts.size(); ++i) {
        Vec3 p = ray.at(sampled.ts[i]);
        occs[i] = double(occupancy_query(scene, p));
        normals[i] = normal_query(scene, p);
    }
    CompositeWeights weights = compute_weights_occ(occs);

    RenderOutput out;
    out.depth = composite_scalar(weights, sampled.ts);
    out.normal = composite_vec3(weights, normals);
    out.weight_sum = weights.weight_sum();
    return out;
}

Vec3 rgb_loss_alpha_gradient(std::span<const Vec3> colors, std::span<const double> alphas,
                             const Vec3& gt_color, int index) {
    int n = static_cast<int>(colors.size());
    if (index < 0 || index >= n || alphas.size() != colors.size())
        throw std::invalid_argument("rgb_loss_alpha_gradient: bad index or lengths");

    // Rendered color decides the L1 sign per channel (0 exactly at the kink).
    CompositeWeights weights = compute_weights_occ(alphas);
    Vec3 rendered = composite_vec3(weights, colors);

    Vec3 out{0, 0, 0};
    for (int c = 0; c < 3; ++c) {
        double lead = colors[index][c];
        for (int j = 0; j < index; ++j) lead *= (1.0 - alphas[j]);
        double tail = 0.0;
        for (int k = index + 1; k < n; ++k) {
            double term = colors[k][c] * alphas[k];
            for (int j = 0; j < k; ++j)
                if (j != index) term *= (1.0 - alphas[j]);
            tail += term;
        }
        double diff = rendered[c] - gt_color[c];
        double sign = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
        out[c] = sign * (lead - tail);
    }
    return out;
}

std::vector<double> composite_l1_alpha_gradient_reverse(std::span<const Vec3> colors,
                                                        std::span<const double> alphas,
                                                        const Vec3& gt_color) {
    size_t n = colors.size();
    CompositeWeights weights = compute_weights_occ(alphas);
    Vec3 rendered = composite_vec3(weights, colors);
    Vec3 adj;
    for (int c = 0; c < 3; ++c) {
        double diff = rendered[c] - gt_color[c];
        adj[c] = diff > 0 ? 1.0 : (diff < 0 ? -1.0 : 0.0);
    }

    // Linear-time suffix recurrence: d(rendered)/d(alpha_i) = T_i (c_i - A_i)
    // with A_i = sum_{k>i} alpha_k c_k prod_{i<j<k} (1-alpha_j).
    std::vector<double> out(n, 0.0);
    Vec3 suffix{0, 0, 0};
    for (int i = static_cast<int>(n) - 1; i >= 0; --i) {
        Vec3 dv = (colors[i] - suffix) * weights.transmittances[i];
        out[i] = dot(adj, dv);
        suffix = colors[i] * alphas[i] + suffix * (1.0 - alphas[i]);
    }
    return out;
}

int count_weight_modes(std::span<const double> weights, double relative_floor) {
    double max_w = 0;
    for (double w : weights) max_w = std::max(max_w, w);
    if (max_w <= 0) return 0;
    double floor = relative_floor * max_w;
    int modes = 0;
    size_t n = weights.size();
    for (size_t i = 0; i < n; ++i) {
        double left = i > 0 ? weights[i - 1] : -1.0;
        double right = i + 1 < n ? weights[i + 1] : -1.0;
        if (weights[i] > floor && weights[i] > left && weights[i] >= right) ++modes;
    }
    return modes;
}

ToyRayAnalysis toy_ray_analysis(const AnalyticScene& scene, const Ray& ray,
                                const DensityScales& scales, int sample_count) {
    auto hit = ray_first_hit(scene, ray);
    if (!hit) throw std::invalid_argument("toy_ray_analysis: ray does not intersect the scene");

    RaySampleConfig sampling;
    sampling.stratified = sample_count;
    sampling.importance = 0;
    sampling.deterministic = true;
    SampledRay sampled = sample_ray(ray, sampling, nullptr);

    std::vector<double> sigmas(sampled.ts.size());
    ToyRayAnalysis out;
    out.rows.resize(sampled.ts.size());
    for (size_t i = 0; i < sampled.ts.size(); ++i) {
        double sdf = sdf_query(scene, ray.at(sampled.ts[i]));
        sigmas[i] = sdf_to_density(sdf, scales);
        out.rows[i] = {sampled.ts[i], sdf, sigmas[i], 0.0};
    }
    CompositeWeights weights = compute_weights_sdf(sigmas, sampled.deltas);
    for (size_t i = 0; i < weights.weights.size(); ++i) out.rows[i].weight = weights.weights[i];

    out.rendered_depth = composite_scalar(weights, sampled.ts);
    out.true_depth = *hit;
    out.num_weight_modes = count_weight_modes(weights.weights);
    return out;
}

}  // namespace osf
