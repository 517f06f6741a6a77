#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "osf/dataset.hpp"
#include "osf/rng.hpp"

using namespace osf;

namespace {

AnalyticScene unit_sphere_scene() {
    AnalyticScene scene;
    scene.scene_id = "unit_sphere";
    Primitive s;
    s.kind = PrimitiveKind::Sphere;
    s.radius = 1.0;
    s.albedo = {0.7, 0.7, 0.7};
    scene.primitives.push_back(s);
    scene.bounds = {{-1.4, -1.4, -1.4}, {1.4, 1.4, 1.4}};
    return scene;
}

PinholeCamera on_axis_camera(int res, double dist) {
    PinholeCamera cam;
    cam.width = cam.height = res;
    cam.fx = cam.fy = res * 1.2;
    cam.cx = cam.cy = res / 2.0;
    // Looking down +x from (-dist, 0, 0): camera z = +x world.
    cam.pose.rotation(0, 2) = 1;  // world x <- cam z
    cam.pose.rotation(1, 0) = 1;  // world y <- cam x
    cam.pose.rotation(2, 1) = -1; // world z <- -cam y
    cam.pose.rotation(0, 0) = cam.pose.rotation(1, 1) = cam.pose.rotation(2, 2) = 0;
    cam.pose.translation = {-dist, 0, 0};
    return cam;
}

}  // namespace

TEST_CASE("pixel_ray basics") {
    PinholeCamera cam;
    cam.width = 65;
    cam.height = 65;
    cam.fx = cam.fy = 80.0;
    cam.cx = cam.cy = 32.5;

    // Pixel whose center is the principal point maps to the optical axis.
    Ray center = pixel_ray(cam, 32, 32);
    CHECK(center.direction.x == doctest::Approx(0.0));
    CHECK(center.direction.y == doctest::Approx(0.0));
    CHECK(center.direction.z == doctest::Approx(1.0));

    // Adjacent pixels differ by roughly 1/fx radians.
    Ray a = pixel_ray(cam, 32, 32);
    Ray b = pixel_ray(cam, 33, 32);
    double angle = std::acos(std::clamp(dot(a.direction, b.direction), -1.0, 1.0));
    CHECK(angle == doctest::Approx(1.0 / cam.fx).epsilon(1e-3));

    // Translation moves origins, not directions.
    PinholeCamera moved = cam;
    moved.pose.translation = {5, -2, 7};
    Ray c = pixel_ray(moved, 17, 41);
    Ray d = pixel_ray(cam, 17, 41);
    CHECK(norm(c.direction - d.direction) < 1e-15);
    CHECK(norm(c.origin - Vec3{5, -2, 7}) < 1e-15);

    CHECK_THROWS_AS(pixel_ray(cam, -1, 0), std::invalid_argument);
    CHECK_THROWS_AS(pixel_ray(cam, 0, 65), std::invalid_argument);
}

TEST_CASE("lambertian shading") {
    ShadingConfig shading;
    shading.light_dir = {0, 0, 1};
    shading.ambient = 0.0;

    CHECK(norm(shade({0, 0, 0}, {0, 0, 1}, shading)) == 0.0);
    Vec3 full = shade({1, 1, 1}, {0, 0, 1}, shading);
    CHECK(full.x == doctest::Approx(1.0));
    CHECK(full.z == doctest::Approx(1.0));

    shading.ambient = 0.25;
    Vec3 perp = shade({0.8, 0.4, 0.2}, {1, 0, 0}, shading);
    CHECK(perp.x == doctest::Approx(0.2));
    CHECK(perp.y == doctest::Approx(0.1));
    CHECK(perp.z == doctest::Approx(0.05));
}

TEST_CASE("render_frame ground truth") {
    auto scene = unit_sphere_scene();
    ShadingConfig shading;
    shading.light_dir = {1, 1, 1};
    shading.ambient = 0.02;
    PinholeCamera cam = on_axis_camera(33, 3.0);
    SupervisionFrame frame = render_frame(scene, cam, shading);

    CHECK(frame.depth_at(16, 16) == doctest::Approx(2.0).epsilon(1e-7));

    // Rendered depth equals the per-pixel first-hit oracle, and hits satisfy
    // the sdf/normal consistency bounds.
    int finite = 0;
    for (int v = 0; v < 33; ++v) {
        for (int u = 0; u < 33; ++u) {
            Ray ray = pixel_ray(cam, u, v);
            double t0, t1;
            if (!intersect_aabb(scene.bounds, ray.origin, ray.direction, t0, t1)) {
                CHECK(!std::isfinite(frame.depth_at(u, v)));
                continue;
            }
            ray.near = std::max(t0, 1e-6);
            ray.far = t1;
            auto hit = ray_first_hit(scene, ray);
            if (!hit) {
                CHECK(!std::isfinite(frame.depth_at(u, v)));
                continue;
            }
            ++finite;
            REQUIRE(std::isfinite(frame.depth_at(u, v)));
            CHECK(frame.depth_at(u, v) == doctest::Approx(*hit).epsilon(1e-12));
            Vec3 p = ray.at(frame.depth_at(u, v));
            CHECK(std::fabs(sdf_query(scene, p)) < 1e-5);

            Vec3 n = frame.normal_at(u, v);
            Vec3 fd;
            const double h = 1e-5;
            for (int i = 0; i < 3; ++i) {
                Vec3 pa = p, pb = p;
                pa[i] += h;
                pb[i] -= h;
                fd[i] = (sdf_query(scene, pa) - sdf_query(scene, pb)) / (2 * h);
            }
            CHECK(norm(n - normalized(fd)) < 1e-3);
        }
    }
    CHECK(finite > 100);

    // A camera that sees nothing reports misses everywhere.
    PinholeCamera away = on_axis_camera(9, 3.0);
    away.pose.rotation(0, 2) = -1;  // look down -x, bounds behind the camera
    SupervisionFrame empty = render_frame(scene, away, shading);
    for (size_t i = 0; i < empty.pixel_count(); ++i) CHECK(!std::isfinite(empty.depth[i]));

    // Multi-threaded rendering is identical to single-threaded.
    SupervisionFrame threaded = render_frame(scene, cam, shading, 2);
    CHECK(threaded.depth == frame.depth);
    CHECK(threaded.rgb == frame.rgb);
    CHECK(threaded.normal == frame.normal);
}

TEST_CASE("multi-view consistency of generated datasets") {
    auto scene = unit_sphere_scene();
    RigConfig rig;
    rig.views = 6;
    rig.radius = 3.0;
    rig.width = rig.height = 33;
    rig.fov_deg = 45;
    rig.ambient = 0.02;
    Dataset dataset = generate_dataset(scene, rig);
    REQUIRE(dataset.frames.size() == 6);

    const SupervisionFrame& fa = dataset.frames[0];
    int checked = 0;
    for (int v = 4; v < 29 && checked < 60; ++v) {
        for (int u = 4; u < 29 && checked < 60; ++u) {
            double depth = fa.depth_at(u, v);
            if (!std::isfinite(depth)) continue;
            Ray ray = pixel_ray(fa.camera, u, v);
            Vec3 world = ray.at(depth);
            Vec3 n = fa.normal_at(u, v);
            if (dot(n, ray.direction) > -0.5) continue;  // grazing; skip

            for (size_t bi = 1; bi < dataset.frames.size(); ++bi) {
                const SupervisionFrame& fb = dataset.frames[bi];
                double ub, vb, range;
                if (!project_point(fb.camera, world, ub, vb, range)) continue;
                if (ub < 1 || ub >= fb.width() - 1 || vb < 1 || vb >= fb.height() - 1) continue;
                // On a convex surface any point with positive facing is
                // directly visible; the margin only avoids numerical grazing.
                Vec3 to_cam = normalized(fb.camera.pose.translation - world);
                if (dot(n, to_cam) < 0.05) continue;

                Ray rb = pixel_ray(fb.camera, ub, vb);
                double t0, t1;
                if (!intersect_aabb(scene.bounds, rb.origin, rb.direction, t0, t1)) continue;
                rb.near = std::max(t0, 1e-6);
                rb.far = t1;
                auto hit_b = ray_first_hit(scene, rb);
                if (!hit_b) continue;
                Vec3 world_b = rb.at(*hit_b);
                // Either the same surface point (depth agrees) or B sees an occluder.
                if (norm(world_b - world) < 2e-3) {
                    CHECK(std::fabs(*hit_b - range) < 1e-3);
                    ++checked;
                }
            }
        }
    }
    CHECK(checked >= 20);
}

TEST_CASE("dataset round trip is bit exact") {
    auto scene = unit_sphere_scene();
    RigConfig rig;
    rig.views = 2;
    rig.radius = 3.0;
    rig.width = rig.height = 8;
    Dataset dataset = generate_dataset(scene, rig);

    auto dir = (std::filesystem::temp_directory_path() / "osf_dataset_test").string();
    std::filesystem::remove_all(dir);
    save_dataset(dataset, dir);
    Dataset loaded = load_dataset(dir);

    REQUIRE(loaded.frames.size() == dataset.frames.size());
    CHECK(loaded.scene_id == dataset.scene_id);
    for (size_t i = 0; i < dataset.frames.size(); ++i) {
        CHECK(loaded.frames[i].rgb == dataset.frames[i].rgb);
        CHECK(loaded.frames[i].depth == dataset.frames[i].depth);
        CHECK(loaded.frames[i].normal == dataset.frames[i].normal);
        CHECK(loaded.frames[i].camera.fx == dataset.frames[i].camera.fx);
        CHECK(loaded.frames[i].camera.pose.translation.x ==
              dataset.frames[i].camera.pose.translation.x);
    }

    // Truncated frame data is a schema error, not a crash.
    {
        std::filesystem::resize_file(std::filesystem::path(dir) / "frames" / "frame_0000.bin", 64);
        CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("truncated"), DatasetIoError);
    }

    // Version mismatch is an explicit incompatibility error.
    {
        save_dataset(dataset, dir);
        auto meta_path = std::filesystem::path(dir) / "meta.json";
        std::ifstream in(meta_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();
        auto pos = text.find("\"version\": 1");
        REQUIRE(pos != std::string::npos);
        text.replace(pos, 12, "\"version\": 9");
        std::ofstream out(meta_path);
        out << text;
        out.close();
        CHECK_THROWS_WITH_AS(load_dataset(dir), doctest::Contains("incompatible"), DatasetIoError);
    }

    CHECK_THROWS_AS(load_dataset("/nonexistent/osf_dataset"), DatasetIoError);
}

TEST_CASE("benchmark datasets keep a dark-pixel share") {
    // One dark and one bright sphere; the dark side of both plus the black
    // albedo guarantee well over 2% dark hit pixels.
    AnalyticScene scene;
    Primitive dark;
    dark.kind = PrimitiveKind::Sphere;
    dark.radius = 0.55;
    dark.pose.translation = {-0.75, 0, 0};
    dark.albedo = {0.01, 0.01, 0.01};
    scene.primitives.push_back(dark);
    Primitive bright = dark;
    bright.pose.translation = {0.75, 0, 0};
    bright.albedo = {0.85, 0.85, 0.85};
    scene.primitives.push_back(bright);
    scene.bounds = {{-1.6, -1.6, -1.6}, {1.6, 1.6, 1.6}};
    scene.scene_id = "bispheres";

    RigConfig rig;
    rig.views = 6;
    rig.radius = 3.4;
    rig.width = rig.height = 32;
    rig.ambient = 0.06;
    Dataset dataset = generate_dataset(scene, rig);
    CHECK(dark_pixel_fraction(dataset) >= 0.02);
}
