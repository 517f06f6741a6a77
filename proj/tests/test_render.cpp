#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "osf/render.hpp"

using namespace osf;

TEST_CASE("laplace cdf") {
    CHECK(laplace_cdf(0.0, 0.5) == 0.5);
    CHECK(laplace_cdf(100.0, 0.1) == doctest::Approx(1.0));
    CHECK(laplace_cdf(-100.0, 0.1) == doctest::Approx(0.0));
    for (double beta : {0.05, 0.3, 2.0}) {
        CHECK(laplace_cdf(beta, beta) == doctest::Approx(1.0 - 0.5 * std::exp(-1.0)).epsilon(1e-15));
        // continuity at zero
        CHECK(laplace_cdf(1e-13, beta) == doctest::Approx(laplace_cdf(-1e-13, beta)).epsilon(1e-9));
    }
}

TEST_CASE("laplace cdf derivatives match finite differences") {
    const double h = 1e-7;
    for (double s : {-0.4, -0.01, 0.02, 0.7}) {
        for (double beta : {0.05, 0.2, 1.0}) {
            double fd_s = (laplace_cdf(s + h, beta) - laplace_cdf(s - h, beta)) / (2 * h);
            CHECK(laplace_cdf_ds(s, beta) == doctest::Approx(fd_s).epsilon(1e-6));
            double fd_b = (laplace_cdf(s, beta + h) - laplace_cdf(s, beta - h)) / (2 * h);
            CHECK(laplace_cdf_dbeta(s, beta) == doctest::Approx(fd_b).epsilon(1e-5));
        }
    }
}

TEST_CASE("sdf to density") {
    DensityScales scales{8.0, 0.25};
    CHECK(sdf_to_density(0.0, scales) == doctest::Approx(4.0));
    CHECK(sdf_to_density(50.0, scales) == doctest::Approx(0.0));
    CHECK(sdf_to_density(-50.0, scales) == doctest::Approx(8.0));
    for (double f : {-1.0, -0.1, 0.0, 0.1, 1.0}) {
        double sigma = sdf_to_density(f, scales);
        CHECK(sigma > 0.0);
        CHECK(sigma < scales.alpha + 1e-12);
    }
}

TEST_CASE("sdf weights: trivial patterns") {
    {
        std::vector<double> sigmas(4, 0.0), deltas(4, 0.1);
        auto w = compute_weights_sdf(sigmas, deltas);
        for (int i = 0; i < 4; ++i) {
            CHECK(w.alphas[i] == 0.0);
            CHECK(w.transmittances[i] == 1.0);
            CHECK(w.weights[i] == 0.0);
        }
        CHECK(w.residual_transmittance == 1.0);
    }
    {
        std::vector<double> sigmas{1e9, 1.0, 1.0}, deltas{1.0, 0.1, 0.1};
        auto w = compute_weights_sdf(sigmas, deltas);
        CHECK(w.alphas[0] == doctest::Approx(1.0));
        CHECK(w.weights[0] == doctest::Approx(1.0));
        CHECK(w.weights[1] == doctest::Approx(0.0));
        CHECK(w.weights[2] == doctest::Approx(0.0));
    }
    {
        // sigma*delta = ln 2 everywhere: alpha = 1/2, weights halve each step.
        std::vector<double> sigmas(5, std::log(2.0)), deltas(5, 1.0);
        auto w = compute_weights_sdf(sigmas, deltas);
        double expected = 0.5;
        for (int i = 0; i < 5; ++i) {
            CHECK(w.alphas[i] == doctest::Approx(0.5).epsilon(1e-15));
            CHECK(w.weights[i] == doctest::Approx(expected).epsilon(1e-14));
            expected *= 0.5;
        }
    }
    std::vector<double> bad_sigmas(3, 1.0), bad_deltas(2, 1.0);
    CHECK_THROWS_AS(compute_weights_sdf(bad_sigmas, bad_deltas), std::invalid_argument);
}

TEST_CASE("occupancy weights: trivial patterns") {
    {
        std::vector<double> occs{1.0, 0.7, 0.2};
        auto w = compute_weights_occ(occs);
        CHECK(w.weights[0] == 1.0);
        CHECK(w.weights[1] == 0.0);
        CHECK(w.weights[2] == 0.0);
    }
    {
        std::vector<double> occs{0.0, 0.0, 1.0};
        auto w = compute_weights_occ(occs);
        CHECK(w.weights[0] == 0.0);
        CHECK(w.weights[1] == 0.0);
        CHECK(w.weights[2] == 1.0);
    }
    {
        std::vector<double> occs{0.5, 0.5};
        auto w = compute_weights_occ(occs);
        CHECK(w.weights[0] == doctest::Approx(0.5));
        CHECK(w.weights[1] == doctest::Approx(0.25));
    }
}

TEST_CASE("weight identities on random inputs") {
    Rng rng = Rng::keyed(17, "weights");
    for (int trial = 0; trial < 200; ++trial) {
        int n = 1 + int(rng.next_below(64));
        std::vector<double> sigmas(n), deltas(n), occs(n);
        for (int i = 0; i < n; ++i) {
            sigmas[i] = rng.uniform(0, 30);
            deltas[i] = rng.uniform(1e-4, 0.2);
            occs[i] = rng.next_double();
        }
        for (const auto& w : {compute_weights_sdf(sigmas, deltas), compute_weights_occ(occs)}) {
            // Telescoping: sum of weights + residual transmittance = 1 at f64.
            double sum = 0;
            for (double wi : w.weights) sum += wi;
            CHECK(std::fabs(sum + w.residual_transmittance - 1.0) < 1e-12);
            CHECK(sum <= 1.0 + 1e-9);
            for (size_t i = 0; i + 1 < w.transmittances.size(); ++i)
                CHECK(w.transmittances[i + 1] <= w.transmittances[i] + 1e-15);
            for (double a : w.alphas) {
                CHECK(a >= 0.0);
                CHECK(a <= 1.0);
            }
        }
    }
}

TEST_CASE("composite basics and linearity") {
    CompositeWeights w;
    w.alphas = {1.0};
    w.transmittances = {1.0};
    w.weights = {1.0};
    std::vector<double> value{7.5};
    CHECK(composite_scalar(w, value) == 7.5);

    CompositeWeights zero;
    zero.alphas = {0, 0};
    zero.transmittances = {1, 1};
    zero.weights = {0, 0};
    std::vector<Vec3> vecs{{1, 2, 3}, {4, 5, 6}};
    CHECK(norm(composite_vec3(zero, vecs)) == 0.0);

    CompositeWeights geom;
    geom.weights = {0.5, 0.25, 0.125};
    geom.alphas = {0.5, 0.5, 0.5};
    geom.transmittances = {1.0, 0.5, 0.25};
    std::vector<double> depths{1, 2, 3};
    CHECK(composite_scalar(geom, depths) == doctest::Approx(1.375));

    // Linearity in the composited values.
    Rng rng = Rng::keyed(23, "linear");
    std::vector<double> x(3), y(3), mix(3);
    for (int i = 0; i < 3; ++i) {
        x[i] = rng.next_gaussian();
        y[i] = rng.next_gaussian();
        mix[i] = 2.5 * x[i] - 1.25 * y[i];
    }
    double lhs = composite_scalar(geom, mix);
    double rhs = 2.5 * composite_scalar(geom, x) - 1.25 * composite_scalar(geom, y);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("stratified sampling") {
    Ray ray{{0, 0, 0}, {1, 0, 0}, 1.0, 3.0};
    RaySampleConfig cfg;
    cfg.stratified = 8;
    cfg.importance = 0;
    cfg.deterministic = true;
    auto sampled = sample_ray(ray, cfg, nullptr);
    REQUIRE(sampled.ts.size() == 8);
    for (int i = 0; i < 8; ++i)
        CHECK(sampled.ts[i] == doctest::Approx(1.0 + (i + 0.5) * 0.25).epsilon(1e-15));
    for (size_t i = 0; i + 1 < sampled.deltas.size(); ++i)
        CHECK(sampled.deltas[i] == doctest::Approx(sampled.ts[i + 1] - sampled.ts[i]));
    CHECK(sampled.deltas.back() == doctest::Approx(0.25));

    Rng rng = Rng::keyed(29, "strat");
    cfg.deterministic = false;
    for (int trial = 0; trial < 50; ++trial) {
        auto s = sample_ray(ray, cfg, &rng);
        for (size_t i = 0; i + 1 < s.ts.size(); ++i) CHECK(s.ts[i] < s.ts[i + 1]);
        CHECK(s.ts.front() >= ray.near);
        CHECK(s.ts.back() <= ray.far);
    }

    Ray bad{{0, 0, 0}, {1, 0, 0}, 3.0, 1.0};
    CHECK_THROWS_AS(sample_ray(bad, cfg, &rng), std::invalid_argument);
    RaySampleConfig too_few;
    too_few.stratified = 1;
    CHECK_THROWS_AS(sample_ray(ray, too_few, &rng), std::invalid_argument);
}

TEST_CASE("importance round concentrates samples in the weight mass") {
    // One-surface ray: ground-truth sphere sdf drives the density.
    AnalyticScene scene;
    Primitive s;
    s.kind = PrimitiveKind::Sphere;
    s.radius = 1.0;
    scene.primitives.push_back(s);
    scene.bounds = {{-1.5, -1.5, -1.5}, {1.5, 1.5, 1.5}};

    Ray ray{{-3, 0, 0}, {1, 0, 0}, 1.0, 5.0};
    DensityScales scales{50.0, 0.05};
    auto density = [&](double t) { return sdf_to_density(sdf_query(scene, ray.at(t)), scales); };

    RaySampleConfig cfg;
    cfg.stratified = 32;
    cfg.importance = 16;
    cfg.deterministic = true;  // midpoints; added samples are identifiable
    auto sampled = sample_ray(ray, cfg, nullptr, density);

    // Oracle: interquartile t-range of the first-pass weight distribution,
    // from the piecewise-linear inverse CDF over the strata.
    RaySampleConfig first_cfg = cfg;
    first_cfg.importance = 0;
    auto first = sample_ray(ray, first_cfg, nullptr);
    std::vector<double> sigmas(first.ts.size());
    for (size_t i = 0; i < first.ts.size(); ++i) sigmas[i] = density(first.ts[i]);
    auto weights = compute_weights_sdf(sigmas, first.deltas);
    double total = 0;
    for (double w : weights.weights) total += w;
    double stratum = (ray.far - ray.near) / cfg.stratified;
    auto quantile_t = [&](double q) {
        double target = q * total, acc = 0;
        for (size_t i = 0; i < weights.weights.size(); ++i) {
            if (acc + weights.weights[i] >= target) {
                double frac = (target - acc) / std::max(weights.weights[i], 1e-300);
                return ray.near + (double(i) + frac) * stratum;
            }
            acc += weights.weights[i];
        }
        return ray.far;
    };
    double t25 = quantile_t(0.25), t75 = quantile_t(0.75);

    int added_inside = 0, added_total = 0;
    for (double t : sampled.ts) {
        bool is_stratified = false;
        for (double ts : first.ts)
            if (std::fabs(t - ts) < 1e-12) is_stratified = true;
        if (is_stratified) continue;
        ++added_total;
        if (t >= t25 - 1e-9 && t <= t75 + 1e-9) ++added_inside;
    }
    REQUIRE(added_total > 0);
    CHECK(added_inside * 2 >= added_total);
}

TEST_CASE("closed-form alpha gradient of the color loss") {
    // Single term: gradient is +-c1.
    std::vector<Vec3> c1{{0.3, 0.6, 0.9}};
    std::vector<double> a1{0.4};
    Vec3 g = rgb_loss_alpha_gradient(c1, a1, Vec3{0, 0, 0}, 0);
    CHECK(g.x == doctest::Approx(0.3));
    CHECK(g.z == doctest::Approx(0.9));
    Vec3 g_neg = rgb_loss_alpha_gradient(c1, a1, Vec3{1, 1, 1}, 0);
    CHECK(g_neg.x == doctest::Approx(-0.3));

    // Vanishing case: dark point with nothing behind it contributes nothing.
    std::vector<Vec3> colors{{0.5, 0.5, 0.5}, {0, 0, 0}, {0.7, 0.7, 0.7}, {0.2, 0.2, 0.2}};
    std::vector<double> alphas{0.3, 0.25, 0.0, 0.0};
    Vec3 vanish = rgb_loss_alpha_gradient(colors, alphas, Vec3{0.9, 0.9, 0.9}, 1);
    CHECK(vanish.x == 0.0);
    CHECK(vanish.y == 0.0);
    CHECK(vanish.z == 0.0);
}

TEST_CASE("closed-form alpha gradient matches finite differences") {
    Rng rng = Rng::keyed(31, "eq7_fd");
    for (int trial = 0; trial < 30; ++trial) {
        int n = 2 + int(rng.next_below(10));
        std::vector<Vec3> colors(n);
        std::vector<double> alphas(n);
        for (int i = 0; i < n; ++i) {
            colors[i] = {rng.next_double(), rng.next_double(), rng.next_double()};
            alphas[i] = rng.uniform(0.05, 0.95);
        }
        Vec3 gt{rng.next_double(), rng.next_double(), rng.next_double()};
        int index = int(rng.next_below(n));

        auto loss_per_channel = [&](int channel) {
            auto w = compute_weights_occ(alphas);
            Vec3 rendered = composite_vec3(w, colors);
            return std::fabs(rendered[channel] - gt[channel]);
        };

        Vec3 analytic = rgb_loss_alpha_gradient(colors, alphas, gt, index);
        const double h = 1e-7;
        for (int channel = 0; channel < 3; ++channel) {
            double keep = alphas[index];
            alphas[index] = keep + h;
            double up = loss_per_channel(channel);
            alphas[index] = keep - h;
            double down = loss_per_channel(channel);
            alphas[index] = keep;
            double fd = (up - down) / (2 * h);
            CHECK(analytic[channel] == doctest::Approx(fd).epsilon(1e-6));
        }
    }
}

TEST_CASE("closed form equals the linear-time reverse route") {
    Rng rng = Rng::keyed(37, "eq7_rev");
    for (int trial = 0; trial < 100; ++trial) {
        int n = 1 + int(rng.next_below(16));
        std::vector<Vec3> colors(n);
        std::vector<double> alphas(n);
        for (int i = 0; i < n; ++i) {
            colors[i] = {rng.next_double(), rng.next_double(), rng.next_double()};
            alphas[i] = rng.next_double();
        }
        Vec3 gt{rng.next_double(), rng.next_double(), rng.next_double()};
        auto reverse = composite_l1_alpha_gradient_reverse(colors, alphas, gt);
        for (int i = 0; i < n; ++i) {
            Vec3 closed = rgb_loss_alpha_gradient(colors, alphas, gt, i);
            double closed_sum = closed.x + closed.y + closed.z;
            double denom = std::max({std::fabs(closed_sum), std::fabs(reverse[i]), 1e-12});
            CHECK(std::fabs(closed_sum - reverse[i]) / denom < 1e-8);
        }
    }
}

TEST_CASE("occupancy-oracle rendering snaps to the first hit") {
    auto scene = build_toy_scene();
    Ray ray = toy_occluded_ray();
    const int count = 64;
    auto out = render_ray_occ_oracle(scene, ray, count);
    auto hit = ray_first_hit(scene, ray);
    REQUIRE(hit.has_value());
    double spacing = (ray.far - ray.near) / count;
    CHECK(std::fabs(out.depth - *hit) <= spacing);
    CHECK(out.weight_sum == doctest::Approx(1.0));
}

TEST_CASE("binary occupancy edge cases") {
    std::vector<double> zeros(16, 0.0);
    auto w = compute_weights_occ(zeros);
    CHECK(w.weight_sum() == 0.0);
    std::vector<double> depths(16);
    for (int i = 0; i < 16; ++i) depths[i] = 1.0 + i;
    CHECK(composite_scalar(w, depths) == 0.0);

    std::vector<double> first_on(16, 0.0);
    first_on[0] = 1.0;
    auto w2 = compute_weights_occ(first_on);
    CHECK(composite_scalar(w2, depths) == doctest::Approx(depths[0]));
}

TEST_CASE("toy ray study: biased sdf depth, multi-modal weights, faithful single-object depth") {
    auto scene = build_toy_scene();
    DensityScales scales{50.0, 0.05};
    const int count = 64;

    Ray occluded = toy_occluded_ray();
    auto occluded_study = toy_ray_analysis(scene, occluded, scales, count);
    double spacing = (occluded.far - occluded.near) / count;
    CHECK(occluded_study.rendered_depth < occluded_study.true_depth - 5 * spacing);
    CHECK(occluded_study.num_weight_modes >= 2);
    REQUIRE(occluded_study.rows.size() == size_t(count));

    Ray single = toy_single_object_ray();
    auto single_study = toy_ray_analysis(scene, single, scales, count);
    double single_spacing = (single.far - single.near) / count;
    CHECK(std::fabs(single_study.rendered_depth - single_study.true_depth) <= single_spacing);
    CHECK(single_study.num_weight_modes >= 1);

    Ray missing{{0, 0, 10}, {0, 0, 1}, 0.1, 1.0};
    CHECK_THROWS_AS(toy_ray_analysis(scene, missing, scales, count), std::invalid_argument);
}

TEST_CASE("render_ray_sdf produces bounded outputs on a fresh field") {
    FieldConfig cfg;
    cfg.geo_width = 32;
    cfg.geo_hidden_layers = 2;
    cfg.app_width = 32;
    cfg.geo_feature_dim = 16;
    cfg.feature_dim = 32;
    cfg.init_radius = 0.8;
    FieldParams params = FieldParams::create(cfg, {0, 0, 0});
    params.initialize(3);

    Ray ray{{-3, 0, 0}, {1, 0, 0}, 1.5, 4.5};
    RenderConfig rc;
    rc.sampling.stratified = 24;
    rc.sampling.importance = 8;
    Rng rng = Rng::keyed(3, "render");
    auto out = render_ray_sdf(params, ray, rc, &rng);
    CHECK(out.weight_sum <= 1.0 + 1e-9);
    CHECK(out.depth >= 0.0);
    for (int c = 0; c < 3; ++c) {
        CHECK(out.color[c] >= 0.0);
        CHECK(out.color[c] <= 1.0);
        CHECK(out.decoded_color[c] > 0.0);
        CHECK(out.decoded_color[c] < 1.0);
    }
    for (double f : out.feature) CHECK(std::isfinite(f));

    auto occ_out = render_ray_occ(params, ray, rc, &rng);
    CHECK(occ_out.weight_sum <= 1.0 + 1e-9);
}
