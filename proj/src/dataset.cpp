#include "osf/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace osf {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

Vec3 shade(const Vec3& albedo, const Vec3& normal, const ShadingConfig& shading) {
    Vec3 l = normalized(shading.light_dir);
    double diffuse = std::max(0.0, dot(normal, l));
    double intensity = diffuse + shading.ambient;
    return {std::min(1.0, albedo.x * intensity), std::min(1.0, albedo.y * intensity),
            std::min(1.0, albedo.z * intensity)};
}

SupervisionFrame render_frame(const AnalyticScene& scene, const PinholeCamera& camera,
                              const ShadingConfig& shading, int workers) {
    camera.validate();
    SupervisionFrame frame;
    frame.camera = camera;
    frame.rgb.assign(frame.pixel_count() * 3, 0.0);
    frame.depth.assign(frame.pixel_count(), std::numeric_limits<double>::infinity());
    frame.normal.assign(frame.pixel_count() * 3, 0.0);

    auto render_rows = [&](int v0, int v1) {
        for (int v = v0; v < v1; ++v) {
            for (int u = 0; u < camera.width; ++u) {
                Ray ray = pixel_ray(camera, u, v);
                double t_enter, t_exit;
                if (!intersect_aabb(scene.bounds, ray.origin, ray.direction, t_enter, t_exit))
                    continue;
                ray.near = std::max(t_enter, 1e-6);
                ray.far = t_exit;
                if (ray.near >= ray.far) continue;
                auto hit = ray_first_hit(scene, ray);
                if (!hit) continue;
                Vec3 p = ray.at(*hit);
                Vec3 n = normal_query(scene, p);
                Vec3 albedo = scene.primitives[nearest_primitive(scene, p)].albedo;
                Vec3 c = shade(albedo, n, shading);
                size_t i = size_t(v) * camera.width + u;
                frame.depth[i] = *hit;
                frame.rgb[3 * i] = c.x;
                frame.rgb[3 * i + 1] = c.y;
                frame.rgb[3 * i + 2] = c.z;
                frame.normal[3 * i] = n.x;
                frame.normal[3 * i + 1] = n.y;
                frame.normal[3 * i + 2] = n.z;
            }
        }
    };

    workers = std::max(1, workers);
    if (workers == 1 || camera.height < 2 * workers) {
        render_rows(0, camera.height);
    } else {
        std::vector<std::thread> pool;
        int rows_per = (camera.height + workers - 1) / workers;
        for (int w = 0; w < workers; ++w) {
            int v0 = w * rows_per;
            int v1 = std::min(camera.height, v0 + rows_per);
            if (v0 < v1) pool.emplace_back(render_rows, v0, v1);
        }
        for (auto& t : pool) t.join();
    }
    return frame;
}

Dataset generate_dataset(const AnalyticScene& scene, const RigConfig& rig, int workers) {
    Dataset dataset;
    dataset.scene_id = scene.scene_id;
    dataset.bounds = scene.bounds;
    double scene_radius = scene_content_radius(scene, scene.bounds.center());
    auto cameras = build_camera_rig(rig, scene.bounds.center(), scene_radius);
    ShadingConfig shading{rig.light_dir, rig.ambient};
    for (const auto& cam : cameras)
        dataset.frames.push_back(render_frame(scene, cam, shading, workers));
    return dataset;
}

double dark_pixel_fraction(const Dataset& dataset, double threshold) {
    size_t hits = 0, dark = 0;
    for (const auto& frame : dataset.frames) {
        for (size_t i = 0; i < frame.pixel_count(); ++i) {
            if (!std::isfinite(frame.depth[i])) continue;
            ++hits;
            double mx = std::max(frame.rgb[3 * i], std::max(frame.rgb[3 * i + 1], frame.rgb[3 * i + 2]));
            if (mx < threshold) ++dark;
        }
    }
    return hits == 0 ? 0.0 : double(dark) / double(hits);
}

namespace {

constexpr int kDatasetVersion = 1;

ordered_json camera_to_json(const PinholeCamera& cam) {
    ordered_json j;
    j["fx"] = cam.fx;
    j["fy"] = cam.fy;
    j["cx"] = cam.cx;
    j["cy"] = cam.cy;
    j["width"] = cam.width;
    j["height"] = cam.height;
    j["rotation"] = ordered_json::array();
    for (double v : cam.pose.rotation.m) j["rotation"].push_back(v);
    j["translation"] =
        ordered_json::array({cam.pose.translation.x, cam.pose.translation.y, cam.pose.translation.z});
    return j;
}

PinholeCamera camera_from_json(const ordered_json& j) {
    PinholeCamera cam;
    for (const char* field : {"fx", "fy", "cx", "cy", "width", "height", "rotation", "translation"})
        if (!j.contains(field))
            throw DatasetIoError(std::string("dataset meta missing camera field '") + field + "'");
    cam.fx = j["fx"].get<double>();
    cam.fy = j["fy"].get<double>();
    cam.cx = j["cx"].get<double>();
    cam.cy = j["cy"].get<double>();
    cam.width = j["width"].get<int>();
    cam.height = j["height"].get<int>();
    for (int i = 0; i < 9; ++i) cam.pose.rotation.m[i] = j["rotation"][i].get<double>();
    cam.pose.translation = {j["translation"][0].get<double>(), j["translation"][1].get<double>(),
                            j["translation"][2].get<double>()};
    return cam;
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

void read_doubles(std::ifstream& in, std::vector<double>& v, size_t count, const std::string& what) {
    v.resize(count);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(count * sizeof(double)));
    if (static_cast<size_t>(in.gcount()) != count * sizeof(double))
        throw DatasetIoError("truncated frame data while reading " + what);
}

std::string frame_filename(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "frame_%04zu.bin", index);
    return buf;
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::string& dir) {
    fs::create_directories(fs::path(dir) / "frames");
    ordered_json meta;
    meta["version"] = kDatasetVersion;
    meta["scene_id"] = dataset.scene_id;
    meta["bounds"] = {{"min",
                       ordered_json::array({dataset.bounds.min.x, dataset.bounds.min.y,
                                            dataset.bounds.min.z})},
                      {"max",
                       ordered_json::array({dataset.bounds.max.x, dataset.bounds.max.y,
                                            dataset.bounds.max.z})}};
    meta["frame_count"] = dataset.frames.size();
    meta["cameras"] = ordered_json::array();
    for (const auto& frame : dataset.frames) meta["cameras"].push_back(camera_to_json(frame.camera));

    std::ofstream meta_out(fs::path(dir) / "meta.json", std::ios::binary);
    if (!meta_out) throw DatasetIoError("cannot write dataset meta in " + dir);
    meta_out << meta.dump(2) << "\n";

    for (size_t i = 0; i < dataset.frames.size(); ++i) {
        const auto& frame = dataset.frames[i];
        std::ofstream out(fs::path(dir) / "frames" / frame_filename(i), std::ios::binary);
        if (!out) throw DatasetIoError("cannot write frame file in " + dir);
        write_doubles(out, frame.rgb);
        write_doubles(out, frame.depth);
        write_doubles(out, frame.normal);
    }
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream meta_in(fs::path(dir) / "meta.json", std::ios::binary);
    if (!meta_in) throw DatasetIoError("cannot open dataset meta.json in " + dir);
    ordered_json meta;
    try {
        meta_in >> meta;
    } catch (const std::exception& e) {
        throw DatasetIoError(std::string("dataset meta parse error: ") + e.what());
    }
    if (!meta.contains("version"))
        throw DatasetIoError("dataset meta missing field 'version'");
    if (meta["version"].get<int>() != kDatasetVersion)
        throw DatasetIoError("dataset version " + meta["version"].dump() +
                             " is incompatible with this build (expected 1)");
    for (const char* field : {"scene_id", "bounds", "frame_count", "cameras"})
        if (!meta.contains(field))
            throw DatasetIoError(std::string("dataset meta missing field '") + field + "'");

    Dataset dataset;
    dataset.scene_id = meta["scene_id"].get<std::string>();
    dataset.bounds.min = {meta["bounds"]["min"][0].get<double>(),
                          meta["bounds"]["min"][1].get<double>(),
                          meta["bounds"]["min"][2].get<double>()};
    dataset.bounds.max = {meta["bounds"]["max"][0].get<double>(),
                          meta["bounds"]["max"][1].get<double>(),
                          meta["bounds"]["max"][2].get<double>()};
    size_t frame_count = meta["frame_count"].get<size_t>();
    if (meta["cameras"].size() != frame_count)
        throw DatasetIoError("dataset meta field 'cameras' length does not match 'frame_count'");

    for (size_t i = 0; i < frame_count; ++i) {
        SupervisionFrame frame;
        frame.camera = camera_from_json(meta["cameras"][i]);
        size_t pixels = frame.pixel_count();
        std::ifstream in(fs::path(dir) / "frames" / frame_filename(i), std::ios::binary);
        if (!in) throw DatasetIoError("missing frame file " + frame_filename(i) + " in " + dir);
        read_doubles(in, frame.rgb, pixels * 3, "rgb");
        read_doubles(in, frame.depth, pixels, "depth");
        read_doubles(in, frame.normal, pixels * 3, "normal");
        dataset.frames.push_back(std::move(frame));
    }
    return dataset;
}

}  // namespace osf
