#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "osf/trainer.hpp"

using namespace osf;

namespace {

AnalyticScene unit_sphere_scene() {
    AnalyticScene scene;
    scene.scene_id = "unit_sphere";
    Primitive s;
    s.kind = PrimitiveKind::Sphere;
    s.radius = 1.0;
    s.albedo = {0.7, 0.65, 0.6};
    scene.primitives.push_back(s);
    scene.bounds = {{-1.4, -1.4, -1.4}, {1.4, 1.4, 1.4}};
    return scene;
}

Dataset micro_dataset(int views = 3, int res = 9) {
    RigConfig rig;
    rig.views = views;
    rig.radius = 3.0;
    rig.width = rig.height = res;
    rig.fov_deg = 45;
    rig.ambient = 0.02;
    return generate_dataset(unit_sphere_scene(), rig);
}

FieldConfig micro_field() {
    FieldConfig cfg;
    cfg.pe_position = 2;
    cfg.pe_direction = 1;
    cfg.geo_hidden_layers = 2;
    cfg.geo_width = 8;
    cfg.geo_feature_dim = 4;
    cfg.app_hidden_layers = 1;
    cfg.app_width = 8;
    cfg.feature_dim = 8;
    cfg.init_radius = 0.7;
    return cfg;
}

TrainConfig micro_train_config(TrainMode mode) {
    TrainConfig config;
    config.batch_rays = 4;
    config.iterations = 2;
    config.mode = mode;
    config.seed = 11;
    config.sampling = {8, 0, false, 0.0};  // fixed positions: finite differences stay valid
    config.eikonal_points = 4;
    config.field = micro_field();
    config.workers = 1;
    return config;
}

}  // namespace

TEST_CASE("adam update properties") {
    std::vector<double> params{1.0, -2.0};
    AdamState state = AdamState::create(2);

    std::vector<double> zero{0.0, 0.0};
    auto before = params;
    adam_step(params, zero, state, 1e-3);
    CHECK(params == before);
    CHECK(state.step == 1);

    // Constant gradient: parameter moves monotonically against the sign.
    std::vector<double> grads{0.5, -0.25};
    double prev0 = params[0], prev1 = params[1];
    for (int i = 0; i < 50; ++i) {
        adam_step(params, grads, state, 1e-3);
        CHECK(params[0] < prev0);
        CHECK(params[1] > prev1);
        prev0 = params[0];
        prev1 = params[1];
    }

    // Fresh state: first step has magnitude ~= lr (bias-corrected ratio ~ 1).
    std::vector<double> p{0.0};
    AdamState fresh = AdamState::create(1);
    std::vector<double> g{0.37};
    adam_step(p, g, fresh, 1e-3);
    CHECK(std::fabs(p[0]) == doctest::Approx(1e-3).epsilon(1e-4));
    CHECK(p[0] < 0.0);

    std::vector<double> wrong_shape{1.0};
    CHECK_THROWS_AS(adam_step(params, wrong_shape, state, 1e-3), std::invalid_argument);
}

TEST_CASE("ray batch sampling is reproducible and uniform") {
    Dataset dataset = micro_dataset(4, 8);
    Rng rng_a = Rng::keyed(7, "batch", 0);
    Rng rng_b = Rng::keyed(7, "batch", 0);
    RayBatch a = sample_ray_batch(dataset, rng_a, 64, dataset.bounds);
    RayBatch b = sample_ray_batch(dataset, rng_b, 64, dataset.bounds);
    REQUIRE(a.pixels.size() == b.pixels.size());
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        CHECK(a.pixels[i] == b.pixels[i]);
        CHECK(a.gt_depth[i] == b.gt_depth[i]);
    }

    // Ground truth comes straight from the dataset arrays.
    for (size_t i = 0; i < a.pixels.size(); ++i) {
        auto [f, u, v] = a.pixels[i];
        CHECK(norm(a.gt_rgb[i] - dataset.frames[f].rgb_at(u, v)) == 0.0);
        CHECK(norm(a.gt_normal[i] - dataset.frames[f].normal_at(u, v)) == 0.0);
    }

    // Frequencies over frames stay within 3 sigma of uniform.
    const int draws = 8000;
    Rng rng_c = Rng::keyed(7, "batch", 1);
    RayBatch big = sample_ray_batch(dataset, rng_c, draws, dataset.bounds);
    std::vector<int> counts(dataset.frames.size(), 0);
    for (auto& px : big.pixels) counts[px[0]]++;
    double expected = double(draws) / double(counts.size());
    double sigma = std::sqrt(expected * (1.0 - 1.0 / double(counts.size())));
    for (int c : counts) CHECK(std::fabs(c - expected) <= 3.0 * sigma);
}

TEST_CASE("training gradient matches finite differences through the whole pipeline") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::Full);

    FieldParams params = FieldParams::create(config.field, dataset.bounds.center());
    params.initialize(config.seed);
    Rng rng = Rng::keyed(config.seed, "fdjitter");
    for (double& v : params.data) v += 0.03 * rng.next_gaussian();

    std::vector<double> grads;
    compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, &grads);
    REQUIRE(grads.size() == params.size());

    double max_abs = 1e-8;
    for (double g : grads) max_abs = std::max(max_abs, std::fabs(g));

    double worst = 0;
    int checked = 0;
    const double h = 1e-6;
    for (size_t i = 0; i < params.size(); ++i) {
        double keep = params.data[i];
        double hi = h * std::max(1.0, std::fabs(keep));
        params.data[i] = keep + hi;
        double up = compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, nullptr)
                        .total;
        params.data[i] = keep - hi;
        double down = compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, nullptr)
                          .total;
        params.data[i] = keep;
        double fd = (up - down) / (2 * hi);
        double denom = std::max({std::fabs(fd), std::fabs(grads[i]), 1e-4 * max_abs});
        worst = std::max(worst, std::fabs(fd - grads[i]) / denom);
        ++checked;
    }
    CHECK(checked == int(params.size()));
    CHECK(worst < 1e-3);
}

TEST_CASE("inactive modes report exactly zero for their loss terms") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::SdfOnly);
    config.iterations = 2;
    TrainResult result = train(config, dataset, dataset.bounds);
    REQUIRE(!result.log.empty());
    for (auto& [step, b] : result.log) {
        CHECK(b.rgb_feature == 0.0);
        CHECK(b.depth_occ == 0.0);
        CHECK(b.normal_occ == 0.0);
        CHECK(b.rgb_sdf > 0.0);
    }

    // Depth losses need enough hit rays for a non-trivial least-squares fit.
    TrainConfig hybrid = micro_train_config(TrainMode::Hybrid);
    hybrid.batch_rays = 24;
    TrainResult hybrid_result = train(hybrid, dataset, dataset.bounds);
    for (auto& [step, b] : hybrid_result.log) {
        CHECK(b.rgb_feature == 0.0);
        CHECK(b.depth_occ > 0.0);
    }
}

TEST_CASE("training is bit-deterministic for a fixed seed") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::Full);
    config.iterations = 3;
    TrainResult a = train(config, dataset, dataset.bounds);
    TrainResult b = train(config, dataset, dataset.bounds);
    CHECK(a.params.data == b.params.data);
    CHECK(a.adam.m == b.adam.m);

    config.seed = 12;
    TrainResult c = train(config, dataset, dataset.bounds);
    CHECK(a.params.data != c.params.data);
}

TEST_CASE("checkpoint resume is exact") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::Full);
    config.iterations = 4;
    TrainResult full = train(config, dataset, dataset.bounds);

    TrainConfig half = config;
    half.iterations = 2;
    TrainResult first = train(half, dataset, dataset.bounds);
    auto path = (std::filesystem::temp_directory_path() / "osf_resume.bin").string();
    save_checkpoint(path, first.params, first.adam.step, &first.adam.m, &first.adam.v);

    Checkpoint ck = load_checkpoint(path);
    TrainResult second = train(config, dataset, dataset.bounds, {}, {}, &ck);
    CHECK(second.params.data == full.params.data);
    CHECK(second.adam.m == full.adam.m);
    CHECK(second.adam.v == full.adam.v);
    CHECK(second.final_step == full.final_step);
}

TEST_CASE("non-finite losses abort with the offending term") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::Full);

    FieldParams params = FieldParams::create(config.field, dataset.bounds.center());
    params.initialize(config.seed);
    params.data[params.sdf_head_b()] = std::numeric_limits<double>::quiet_NaN();

    try {
        compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, nullptr);
        FAIL("expected NumericalError");
    } catch (const NumericalError& e) {
        CHECK(!e.term.empty());
        CHECK(std::string(e.what()).find(e.term) != std::string::npos);
    }
}

TEST_CASE("two workers reproduce the single-worker gradient") {
    Dataset dataset = micro_dataset();
    TrainConfig config = micro_train_config(TrainMode::Full);
    config.batch_rays = 8;

    FieldParams params = FieldParams::create(config.field, dataset.bounds.center());
    params.initialize(config.seed);

    std::vector<double> g1, g2;
    compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, &g1);
    config.workers = 2;
    compute_loss_and_gradient(config, dataset, dataset.bounds, params, 0, &g2);
    REQUIRE(g1.size() == g2.size());
    double worst = 0;
    for (size_t i = 0; i < g1.size(); ++i)
        worst = std::max(worst, std::fabs(g1[i] - g2[i]));
    CHECK(worst < 1e-12);  // same shard contents, only the merge order differs
}

TEST_CASE("short training run reduces the loss on a sphere") {
    Dataset dataset = micro_dataset(4, 12);
    TrainConfig config;
    config.batch_rays = 24;
    config.iterations = 40;
    config.mode = TrainMode::Full;
    config.seed = 5;
    config.sampling = {12, 4, false, 0.0};
    config.eikonal_points = 8;
    config.field = micro_field();
    config.field.geo_width = 16;
    config.field.app_width = 16;
    config.learning_rate = 2e-3;
    config.log_interval = 1;
    config.workers = 2;
    TrainResult result = train(config, dataset, dataset.bounds);
    REQUIRE(result.log.size() >= 2);
    double initial = result.log.front().second.total;
    double final_loss = result.log.back().second.total;
    CHECK(final_loss < initial);
    CHECK(std::isfinite(final_loss));
}

TEST_CASE("gradient probe produces balanced series on a fresh field") {
    // Dark + bright spheres; at initialization the two regions should see
    // comparable color-loss gradients.
    AnalyticScene scene;
    Primitive dark;
    dark.kind = PrimitiveKind::Sphere;
    dark.radius = 0.55;
    dark.pose.translation = {-0.75, 0, 0};
    dark.albedo = {0.01, 0.01, 0.01};
    scene.primitives.push_back(dark);
    Primitive bright = dark;
    bright.pose.translation = {0.75, 0, 0};
    bright.albedo = {0.9, 0.9, 0.9};
    scene.primitives.push_back(bright);
    scene.bounds = {{-1.6, -1.6, -1.6}, {1.6, 1.6, 1.6}};
    scene.scene_id = "bispheres";

    RigConfig rig;
    rig.views = 6;
    rig.radius = 3.4;
    rig.width = rig.height = 24;
    rig.ambient = 0.1;
    Dataset dataset = generate_dataset(scene, rig);

    auto regions = build_intensity_regions(dataset);
    REQUIRE(regions.size() == 2);
    CHECK(regions[0].name == "dark");
    CHECK(regions[0].pixels.size() >= 8);
    CHECK(regions[1].pixels.size() >= 8);

    FieldConfig field = micro_field();
    field.geo_width = 16;
    field.app_width = 16;
    // The initial sphere must enclose both objects so rays from either region
    // cross nonzero density at step zero.
    field.init_radius = 1.25;
    FieldParams params = FieldParams::create(field, dataset.bounds.center());
    params.initialize(3);

    RaySampleConfig sampling{12, 0, false, 0.0};
    double dark_norm =
        probe_region_grad_norm(params, dataset, regions[0], false, sampling, 3, 64);
    double bright_norm =
        probe_region_grad_norm(params, dataset, regions[1], false, sampling, 3, 64);
    REQUIRE(dark_norm > 0.0);
    REQUIRE(bright_norm > 0.0);
    double ratio = dark_norm / bright_norm;
    CHECK(ratio > 0.5);
    CHECK(ratio < 2.0);
}
