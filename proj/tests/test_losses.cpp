#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "osf/losses.hpp"
#include "osf/rng.hpp"

using namespace osf;

TEST_CASE("rgb l1") {
    std::vector<Vec3> gt{{0.2, 0.4, 0.6}, {0.8, 0.1, 0.3}};
    CHECK(rgb_l1(gt, gt) == 0.0);

    std::vector<Vec3> shifted = gt;
    for (auto& c : shifted) c.x += 0.1;
    CHECK(rgb_l1(shifted, gt) == doctest::Approx(0.1).epsilon(1e-12));

    // Brute-force recomputation on a random batch.
    Rng rng = Rng::keyed(41, "rgb");
    std::vector<Vec3> pred(37), truth(37);
    double expected = 0;
    for (size_t i = 0; i < pred.size(); ++i) {
        pred[i] = {rng.next_double(), rng.next_double(), rng.next_double()};
        truth[i] = {rng.next_double(), rng.next_double(), rng.next_double()};
        expected += std::fabs(pred[i].x - truth[i].x) + std::fabs(pred[i].y - truth[i].y) +
                    std::fabs(pred[i].z - truth[i].z);
    }
    expected /= double(pred.size());
    CHECK(rgb_l1(pred, truth) == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("eikonal loss") {
    std::vector<double> ones(9, 1.0);
    CHECK(eikonal_loss(ones) == 0.0);
    std::vector<double> zeros(4, 0.0);
    CHECK(eikonal_loss(zeros) == 1.0);
    std::vector<double> split{0.5, 1.5};
    CHECK(eikonal_loss(split) == doctest::Approx(0.25));
}

TEST_CASE("scale-shift solve: exact fits") {
    std::vector<double> pred{1.0, 2.0, 3.5, 0.2};
    std::vector<uint8_t> valid(4, 1);
    auto fit = solve_scale_shift(pred, pred, valid);
    CHECK(fit.scale == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(fit.shift == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(!fit.degenerate);

    std::vector<double> gt(4);
    for (int i = 0; i < 4; ++i) gt[i] = 2.0 * pred[i] + 3.0;
    fit = solve_scale_shift(pred, gt, valid);
    CHECK(fit.scale == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(fit.shift == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(depth_loss(pred, gt, valid, fit) == doctest::Approx(0.0).epsilon(1e-20));
}

TEST_CASE("scale-shift solve beats a dense grid around it") {
    Rng rng = Rng::keyed(43, "grid");
    std::vector<double> pred(24), gt(24);
    std::vector<uint8_t> valid(24, 1);
    for (int i = 0; i < 24; ++i) {
        pred[i] = rng.uniform(0.5, 4.0);
        gt[i] = 1.7 * pred[i] - 0.4 + 0.3 * rng.next_gaussian();
    }
    auto fit = solve_scale_shift(pred, gt, valid);
    double best = depth_loss(pred, gt, valid, fit);
    for (int a = 0; a < 101; ++a) {
        for (int b = 0; b < 101; ++b) {
            ScaleShift candidate;
            candidate.scale = fit.scale + (a - 50) * 0.01;
            candidate.shift = fit.shift + (b - 50) * 0.01;
            CHECK(best <= depth_loss(pred, gt, valid, candidate) + 1e-12);
        }
    }
}

TEST_CASE("degenerate scale-shift batches") {
    std::vector<double> pred(5, 2.0);
    std::vector<double> gt{2.5, 2.7, 2.6, 2.4, 2.8};
    std::vector<uint8_t> valid(5, 1);
    auto fit = solve_scale_shift(pred, gt, valid);
    CHECK(fit.degenerate);
    CHECK(fit.scale == 1.0);
    double mean_residual = 0;
    for (size_t i = 0; i < pred.size(); ++i) mean_residual += gt[i] - pred[i];
    mean_residual /= double(pred.size());
    CHECK(fit.shift == doctest::Approx(mean_residual).epsilon(1e-12));
}

TEST_CASE("depth loss: single-ray perturbation matches the closed-form residual") {
    const int n = 64;
    Rng rng = Rng::keyed(47, "depth");
    std::vector<double> gt(n), pred(n);
    std::vector<uint8_t> valid(n, 1);
    for (int i = 0; i < n; ++i) gt[i] = pred[i] = rng.uniform(1.0, 5.0);
    const double eps = 1e-3;
    pred[11] += eps;
    double loss = depth_loss(pred, gt, valid);
    double approx = eps * eps * double(n - 1) / double(n) / double(n);
    CHECK(loss == doctest::Approx(approx).epsilon(0.05));

    // Masked-out rays contribute nothing.
    std::vector<uint8_t> mask = valid;
    mask[11] = 0;
    CHECK(depth_loss(pred, gt, mask) == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("depth loss is invariant to affine reparameterization of predictions") {
    Rng rng = Rng::keyed(53, "affine");
    std::vector<double> pred(32), gt(32);
    std::vector<uint8_t> valid(32, 1);
    for (int i = 0; i < 32; ++i) {
        pred[i] = rng.uniform(0.5, 3.0);
        gt[i] = pred[i] + 0.2 * rng.next_gaussian();
    }
    double base = depth_loss(pred, gt, valid);
    for (double a : {0.5, -2.0, 3.7}) {
        std::vector<double> re(32);
        for (int i = 0; i < 32; ++i) re[i] = a * pred[i] + 1.3;
        CHECK(depth_loss(re, gt, valid) == doctest::Approx(base).epsilon(1e-9));
    }
}

TEST_CASE("normal loss") {
    std::vector<Vec3> gt{{0, 0, 1}};
    std::vector<uint8_t> valid{1};
    CHECK(normal_loss(gt, gt, valid) == doctest::Approx(0.0));

    std::vector<Vec3> anti{{0, 0, -1}};
    CHECK(normal_loss(anti, gt, valid) == doctest::Approx(4.0));

    std::vector<Vec3> zero{{0, 0, 0}};
    CHECK(normal_loss(zero, gt, valid) == doctest::Approx(2.0));  // |gt| sum + (1 - 0)

    std::vector<Vec3> generic_gt{{0.6, 0.0, 0.8}};
    std::vector<Vec3> zero2{{0, 0, 0}};
    CHECK(normal_loss(zero2, generic_gt, valid) == doctest::Approx(0.6 + 0.8 + 1.0));
}

TEST_CASE("total loss applies the published weighting") {
    LossWeights weights;  // 0.05, 1, 0.1, 0.05
    auto zero = total_loss(0, 0, 0, 0, 0, 0, 0, weights);
    CHECK(zero.total == 0.0);

    auto only_eik = total_loss(0, 0, 1, 0, 0, 0, 0, weights);
    CHECK(only_eik.total == doctest::Approx(0.05));

    auto only_depth_occ = total_loss(0, 0, 0, 1, 0, 0, 0, weights);
    CHECK(only_depth_occ.total == doctest::Approx(1.0));

    auto only_depth_sdf = total_loss(0, 0, 0, 0, 1, 0, 0, weights);
    CHECK(only_depth_sdf.total == doctest::Approx(0.1));

    auto normals = total_loss(0, 0, 0, 0, 0, 1, 1, weights);
    CHECK(normals.total == doctest::Approx(0.1));

    // Linearity in each component.
    Rng rng = Rng::keyed(59, "lin");
    double base_vals[7];
    for (double& v : base_vals) v = rng.next_double();
    auto base = total_loss(base_vals[0], base_vals[1], base_vals[2], base_vals[3], base_vals[4],
                           base_vals[5], base_vals[6], weights);
    double coefficients[7] = {1.0, 1.0, weights.eikonal, weights.depth_occ, weights.depth_sdf,
                              weights.normal, weights.normal};
    for (int k = 0; k < 7; ++k) {
        double perturbed_vals[7];
        std::copy(base_vals, base_vals + 7, perturbed_vals);
        perturbed_vals[k] += 0.25;
        auto perturbed = total_loss(perturbed_vals[0], perturbed_vals[1], perturbed_vals[2],
                                    perturbed_vals[3], perturbed_vals[4], perturbed_vals[5],
                                    perturbed_vals[6], weights);
        CHECK(perturbed.total - base.total == doctest::Approx(0.25 * coefficients[k]).epsilon(1e-9));
    }
}

TEST_CASE("loss log line is one json object with all terms") {
    LossBreakdown b = total_loss(0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, LossWeights{});
    std::string line = loss_log_line(42, b);
    CHECK(line.find("\"step\":42") != std::string::npos);
    CHECK(line.find("\"rgb_sdf\"") != std::string::npos);
    CHECK(line.find("\"total\"") != std::string::npos);
    CHECK(line.find('\n') == std::string::npos);
}
