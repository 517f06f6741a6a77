#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"

#include "osf/dataset.hpp"
#include "osf/mesh.hpp"
#include "osf/metrics.hpp"
#include "osf/render.hpp"
#include "osf/scene.hpp"
#include "osf/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace osf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitIo = 4;

int default_workers(int requested) {
    if (requested > 0) return requested;
    unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : int(hw);
}

ordered_json load_json_file(const std::string& path, const char* what) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error(std::string("cannot open ") + what + " file: " + path);
    ordered_json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw std::invalid_argument(std::string(what) + " parse error in " + path + ": " + e.what());
    }
    return j;
}

void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << text;
}

void write_manifest(const std::string& out_dir, const std::string& command,
                    const ordered_json& args) {
    ordered_json manifest;
    manifest["command"] = command;
    manifest["args"] = args;
    write_text_file((fs::path(out_dir) / "manifest.json").string(), manifest.dump(2) + "\n");
}

RigConfig rig_from_json(const ordered_json& j) {
    RigConfig rig;
    rig.views = j.value("views", rig.views);
    rig.radius = j.value("radius", rig.radius);
    rig.radius_scale = j.value("radius_scale", rig.radius_scale);
    rig.width = j.value("width", rig.width);
    rig.height = j.value("height", rig.height);
    rig.fov_deg = j.value("fov_deg", rig.fov_deg);
    if (j.contains("light_dir"))
        rig.light_dir = {j["light_dir"][0].get<double>(), j["light_dir"][1].get<double>(),
                         j["light_dir"][2].get<double>()};
    rig.ambient = j.value("ambient", rig.ambient);
    if (rig.views < 1) throw std::invalid_argument("rig config: views must be >= 1");
    if (rig.width < 2 || rig.height < 2)
        throw std::invalid_argument("rig config: resolution must be at least 2x2");
    return rig;
}

TrainConfig train_config_from_json(const ordered_json& j) {
    TrainConfig c;
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_rays = j.value("batch_rays", c.batch_rays);
    c.iterations = j.value("iterations", c.iterations);
    if (j.contains("mode")) c.mode = train_mode_from_string(j["mode"].get<std::string>());
    c.seed = j.value("seed", c.seed);
    if (j.contains("loss_weights")) {
        const auto& w = j["loss_weights"];
        c.loss_weights.eikonal = w.value("eikonal", c.loss_weights.eikonal);
        c.loss_weights.depth_occ = w.value("depth_occ", c.loss_weights.depth_occ);
        c.loss_weights.depth_sdf = w.value("depth_sdf", c.loss_weights.depth_sdf);
        c.loss_weights.normal = w.value("normal", c.loss_weights.normal);
    }
    if (j.contains("sampling")) {
        const auto& s = j["sampling"];
        c.sampling.stratified = s.value("stratified", c.sampling.stratified);
        c.sampling.importance = s.value("importance", c.sampling.importance);
        c.sampling.deterministic = s.value("deterministic", c.sampling.deterministic);
        c.sampling.delta_cap = s.value("delta_cap", c.sampling.delta_cap);
    }
    c.eikonal_points = j.value("eikonal_points", c.eikonal_points);
    if (j.contains("field")) {
        const auto& f = j["field"];
        c.field.pe_position = f.value("pe_position", c.field.pe_position);
        c.field.pe_direction = f.value("pe_direction", c.field.pe_direction);
        c.field.geo_hidden_layers = f.value("geo_hidden_layers", c.field.geo_hidden_layers);
        c.field.geo_width = f.value("geo_width", c.field.geo_width);
        c.field.geo_feature_dim = f.value("geo_feature_dim", c.field.geo_feature_dim);
        c.field.app_hidden_layers = f.value("app_hidden_layers", c.field.app_hidden_layers);
        c.field.app_width = f.value("app_width", c.field.app_width);
        c.field.feature_dim = f.value("feature_dim", c.field.feature_dim);
        c.field.softplus_beta = f.value("softplus_beta", c.field.softplus_beta);
        c.field.init_radius = f.value("init_radius", c.field.init_radius);
    }
    c.log_interval = j.value("log_interval", c.log_interval);
    c.checkpoint_interval = j.value("checkpoint_interval", c.checkpoint_interval);
    if (j.contains("probe")) {
        c.probe_interval = j["probe"].value("interval", c.probe_interval);
        c.probe_rays_per_region = j["probe"].value("rays_per_region", c.probe_rays_per_region);
    }
    c.lr_cosine_decay = j.value("lr_cosine_decay", c.lr_cosine_decay);
    c.workers = j.value("workers", c.workers);
    return c;
}

std::vector<ProbeRegion> regions_from_json(const ordered_json& j, const Dataset& dataset) {
    if (!j.contains("regions") || !j["regions"].is_array() || j["regions"].empty())
        throw std::invalid_argument("regions file: field 'regions' missing or empty");
    std::vector<ProbeRegion> regions;
    for (const auto& r : j["regions"]) {
        ProbeRegion region;
        if (!r.contains("name")) throw std::invalid_argument("regions file: region missing 'name'");
        region.name = r["name"].get<std::string>();
        if (r.contains("pixels")) {
            for (const auto& p : r["pixels"]) {
                if (!p.is_array() || p.size() != 3)
                    throw std::invalid_argument("regions file: pixel entries must be [frame,u,v]");
                region.pixels.push_back({p[0].get<int>(), p[1].get<int>(), p[2].get<int>()});
            }
        }
        if (r.contains("rects")) {
            for (const auto& rect : r["rects"]) {
                int frame = rect.at("frame").get<int>();
                int x0 = rect.at("x0").get<int>(), y0 = rect.at("y0").get<int>();
                int x1 = rect.at("x1").get<int>(), y1 = rect.at("y1").get<int>();
                for (int v = y0; v < y1; ++v)
                    for (int u = x0; u < x1; ++u) region.pixels.push_back({frame, u, v});
            }
        }
        if (region.pixels.empty())
            throw std::invalid_argument("regions file: region '" + region.name + "' has no pixels");
        for (auto& [f, u, v] : region.pixels) {
            if (f < 0 || size_t(f) >= dataset.frames.size() || u < 0 ||
                u >= dataset.frames[f].width() || v < 0 || v >= dataset.frames[f].height())
                throw std::invalid_argument("regions file: pixel outside the dataset in region '" +
                                            region.name + "'");
        }
        regions.push_back(std::move(region));
    }
    return regions;
}

FieldParams load_params_checked(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    return std::move(ck.params);
}

// ---------------------------------------------------------------------------

int cmd_generate_data(const std::string& scene_path, const std::string& rig_path,
                      const std::string& out_dir, int workers) {
    AnalyticScene scene = load_scene(scene_path);
    RigConfig rig;
    if (!rig_path.empty()) rig = rig_from_json(load_json_file(rig_path, "rig config"));

    fs::create_directories(out_dir);
    Dataset dataset = generate_dataset(scene, rig, default_workers(workers));
    save_dataset(dataset, out_dir);

    ordered_json args;
    args["scene"] = scene_path;
    args["rig"] = rig_path;
    args["views"] = rig.views;
    args["resolution"] = {rig.width, rig.height};
    write_manifest(out_dir, "generate-data", args);

    double dark = dark_pixel_fraction(dataset);
    std::cout << "frames: " << dataset.frames.size() << "\n"
              << "resolution: " << rig.width << "x" << rig.height << "\n"
              << "dark pixel fraction: " << dark << "\n";
    if (dark < 0.02)
        std::cout << "warning: dark-pixel fraction below the 2% benchmark floor\n";
    return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& dataset_dir,
              const std::string& out_dir, const std::string& mode_override, int64_t seed_override,
              const std::string& regions_path, bool resume, int workers) {
    TrainConfig config = train_config_from_json(load_json_file(config_path, "train config"));
    if (!mode_override.empty()) config.mode = train_mode_from_string(mode_override);
    if (seed_override >= 0) config.seed = uint64_t(seed_override);
    config.workers = default_workers(workers > 0 ? workers : config.workers);

    Dataset dataset = load_dataset(dataset_dir);
    std::vector<ProbeRegion> regions;
    if (!regions_path.empty())
        regions = regions_from_json(load_json_file(regions_path, "regions"), dataset);
    if (!regions.empty() && config.probe_interval <= 0)
        config.probe_interval = std::max(1, config.iterations / 10);

    fs::create_directories(out_dir);
    ordered_json args;
    args["config"] = config_path;
    args["dataset"] = dataset_dir;
    args["mode"] = to_string(config.mode);
    args["seed"] = config.seed;
    args["iterations"] = config.iterations;
    args["workers"] = config.workers;
    write_manifest(out_dir, "train", args);

    Checkpoint resume_state;
    const Checkpoint* resume_ptr = nullptr;
    std::string final_path = (fs::path(out_dir) / "checkpoint_final.bin").string();
    if (resume) {
        std::string best;
        uint64_t best_step = 0;
        for (const auto& entry : fs::directory_iterator(out_dir)) {
            std::string name = entry.path().filename().string();
            if (name.rfind("checkpoint_", 0) != 0 || entry.path().extension() != ".bin") continue;
            Checkpoint ck = load_checkpoint(entry.path().string());
            if (ck.step >= best_step) {
                best_step = ck.step;
                best = entry.path().string();
            }
        }
        if (!best.empty()) {
            resume_state = load_checkpoint(best);
            resume_ptr = &resume_state;
            std::cout << "resuming from " << best << " at step " << resume_state.step << "\n";
        }
    }

    std::ofstream log(fs::path(out_dir) / "train_log.jsonl",
                      resume_ptr ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot write training log in " + out_dir);

    TrainCallbacks callbacks;
    callbacks.checkpoint_dir = config.checkpoint_interval > 0 ? out_dir : "";
    callbacks.on_log = [&log](uint64_t step, const LossBreakdown& b) {
        log << loss_log_line(step, b) << "\n";
        log.flush();
    };

    TrainResult result = train(config, dataset, dataset.bounds, regions, callbacks, resume_ptr);
    save_checkpoint(final_path, result.params, result.final_step, &result.adam.m, &result.adam.v);

    if (!regions.empty()) {
        std::ostringstream csv;
        csv << "epoch,region,mean_grad_norm\n";
        for (size_t s = 0; s < result.probe.steps.size(); ++s)
            for (size_t r = 0; r < result.probe.regions.size(); ++r)
                csv << result.probe.steps[s] << "," << result.probe.regions[r] << ","
                    << result.probe.series[r][s] << "\n";
        write_text_file((fs::path(out_dir) / "probe.csv").string(), csv.str());
    }

    std::cout << "trained " << result.final_step << " steps\n"
              << "final total loss: "
              << (result.log.empty() ? 0.0 : result.log.back().second.total) << "\n"
              << "checkpoint: " << final_path << "\n";
    return kExitOk;
}

Ray parse_ray_spec(const std::string& spec, const AnalyticScene& scene) {
    if (spec == "occluded") return toy_occluded_ray();
    if (spec == "single") return toy_single_object_ray();
    std::vector<double> v;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
    if (v.size() != 8)
        throw std::invalid_argument(
            "ray spec must be 'occluded', 'single', or 'ox,oy,oz,dx,dy,dz,near,far'");
    Ray ray;
    ray.origin = {v[0], v[1], v[2]};
    ray.direction = normalized(Vec3{v[3], v[4], v[5]});
    ray.near = v[6];
    ray.far = v[7];
    if (!ray.valid()) throw std::invalid_argument("ray spec: requires 0 <= near < far, unit direction");
    (void)scene;
    return ray;
}

int cmd_toy_ray(const std::string& scene_path, const std::string& ray_spec, double alpha,
                double beta, int count, const std::string& out_dir) {
    AnalyticScene scene = scene_path.empty() ? build_toy_scene() : load_scene(scene_path);
    Ray ray = parse_ray_spec(ray_spec, scene);
    DensityScales scales{alpha, beta};

    ToyRayAnalysis study = toy_ray_analysis(scene, ray, scales, count);
    RenderOutput occ = render_ray_occ_oracle(scene, ray, count);

    fs::create_directories(out_dir);
    std::ostringstream csv;
    csv << "t,sdf,sigma,weight\n";
    char line[160];
    for (const auto& row : study.rows) {
        std::snprintf(line, sizeof(line), "%.17g,%.17g,%.17g,%.17g\n", row.t, row.sdf, row.sigma,
                      row.weight);
        csv << line;
    }
    write_text_file((fs::path(out_dir) / "profile.csv").string(), csv.str());

    ordered_json summary;
    summary["rendered_depth"] = study.rendered_depth;
    summary["true_depth"] = study.true_depth;
    summary["num_weight_modes"] = study.num_weight_modes;
    summary["occ_rendered_depth"] = occ.depth;
    summary["sample_count"] = count;
    summary["sample_spacing"] = (ray.far - ray.near) / count;
    summary["alpha"] = alpha;
    summary["beta"] = beta;
    write_text_file((fs::path(out_dir) / "summary.json").string(), summary.dump(2) + "\n");

    ordered_json args;
    args["scene"] = scene_path.empty() ? "builtin-toy" : scene_path;
    args["ray"] = ray_spec;
    args["alpha"] = alpha;
    args["beta"] = beta;
    args["count"] = count;
    write_manifest(out_dir, "toy-ray", args);

    std::cout << summary.dump(2) << "\n";
    return kExitOk;
}

int cmd_gradient_probe(const std::string& config_path, const std::string& dataset_dir,
                       const std::string& regions_path, const std::string& out_dir, int workers,
                       int64_t seed_override) {
    TrainConfig base = train_config_from_json(load_json_file(config_path, "train config"));
    if (seed_override >= 0) base.seed = uint64_t(seed_override);
    base.workers = default_workers(workers > 0 ? workers : base.workers);
    if (base.probe_interval <= 0) base.probe_interval = std::max(1, base.iterations / 10);

    Dataset dataset = load_dataset(dataset_dir);
    auto regions = regions_from_json(load_json_file(regions_path, "regions"), dataset);

    fs::create_directories(out_dir);
    ordered_json args;
    args["config"] = config_path;
    args["dataset"] = dataset_dir;
    args["regions"] = regions_path;
    args["seed"] = base.seed;
    write_manifest(out_dir, "gradient-probe", args);

    std::ostringstream csv;
    csv << "mode,epoch,region,mean_grad_norm\n";
    for (TrainMode mode : {TrainMode::SdfOnly, TrainMode::Feature}) {
        TrainConfig config = base;
        config.mode = mode;
        GradientProbeResult probe = gradient_probe(config, dataset, dataset.bounds, regions);
        for (size_t s = 0; s < probe.steps.size(); ++s)
            for (size_t r = 0; r < probe.regions.size(); ++r)
                csv << to_string(mode) << "," << probe.steps[s] << "," << probe.regions[r] << ","
                    << probe.series[r][s] << "\n";
        std::cout << to_string(mode) << ": " << probe.steps.size() << " probe epochs\n";
    }
    write_text_file((fs::path(out_dir) / "probe.csv").string(), csv.str());
    return kExitOk;
}

int cmd_extract(const std::string& checkpoint_path, bool oracle, const std::string& scene_path,
                int resolution, double threshold, int samples, const std::string& out_dir) {
    AnalyticScene scene = load_scene(scene_path);

    ScalarField field;
    FieldParams params;
    if (oracle) {
        field = [&scene](const Vec3& p) { return sdf_query(scene, p); };
    } else {
        if (checkpoint_path.empty())
            throw std::invalid_argument("extract: requires --checkpoint or --oracle");
        params = load_params_checked(checkpoint_path);
        field = [&params](const Vec3& p) { return geometry_forward(params, p).sdf; };
    }

    TriangleMesh mesh = extract_mesh(field, scene.bounds, resolution);
    fs::create_directories(out_dir);
    save_obj(mesh, (fs::path(out_dir) / "mesh.obj").string());

    MeshMetricsReport report = evaluate_against_scene(mesh, scene, threshold, samples);
    write_text_file((fs::path(out_dir) / "metrics.json").string(), report.to_json() + "\n");

    ordered_json args;
    args["checkpoint"] = oracle ? "oracle" : checkpoint_path;
    args["scene"] = scene_path;
    args["resolution"] = resolution;
    args["threshold"] = threshold;
    args["samples"] = samples;
    write_manifest(out_dir, "extract", args);

    std::cout << report.to_json() << "\n";
    if (mesh.empty()) std::cout << "note: extracted mesh is empty\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hybrid occupancy-SDF neural surface reconstruction on analytic scenes"};
    app.require_subcommand(1);

    std::string scene_path, rig_path, out_dir, config_path, dataset_dir, regions_path;
    std::string checkpoint_path, mode, ray_spec = "occluded";
    int workers = 0, resolution = 128, count = 64, samples = 100000;
    int64_t seed = -1;
    double alpha = 50.0, beta = 0.05, threshold = 0.05;
    bool resume = false, oracle = false;

    auto* gen = app.add_subcommand("generate-data", "Render ground-truth images of a scene");
    gen->add_option("--scene", scene_path, "Scene description file (JSON)")->required();
    gen->add_option("--rig", rig_path, "Camera rig config (JSON); defaults when omitted");
    gen->add_option("--out", out_dir, "Output dataset directory")->required();
    gen->add_option("--workers", workers, "Worker threads (default: all cores)");

    auto* tr = app.add_subcommand("train", "Optimize the fields on a dataset");
    tr->add_option("--config", config_path, "Train config (JSON)")->required();
    tr->add_option("--dataset", dataset_dir, "Dataset directory")->required();
    tr->add_option("--out", out_dir, "Output directory")->required();
    tr->add_option("--mode", mode, "sdf_only | feature | hybrid | full (overrides config)");
    tr->add_option("--seed", seed, "Seed override");
    tr->add_option("--regions", regions_path, "Probe regions file (enables gradient probes)");
    tr->add_flag("--resume", resume, "Resume from the newest checkpoint in --out");
    tr->add_option("--workers", workers, "Worker threads (default: all cores)");

    auto* toy = app.add_subcommand("toy-ray", "Density/weight study along one ray of a scene");
    toy->add_option("--scene", scene_path, "Scene file (default: built-in multi-object layout)");
    toy->add_option("--ray", ray_spec, "occluded | single | ox,oy,oz,dx,dy,dz,near,far");
    toy->add_option("--alpha", alpha, "Density scale alpha");
    toy->add_option("--beta", beta, "Laplace spread beta");
    toy->add_option("--count", count, "Samples along the ray");
    toy->add_option("--out", out_dir, "Output directory")->required();

    auto* probe = app.add_subcommand("gradient-probe",
                                     "Region-tagged color-loss gradient series for both modes");
    probe->add_option("--config", config_path, "Train config (JSON)")->required();
    probe->add_option("--dataset", dataset_dir, "Dataset directory")->required();
    probe->add_option("--regions", regions_path, "Regions file (JSON)")->required();
    probe->add_option("--out", out_dir, "Output directory")->required();
    probe->add_option("--seed", seed, "Seed override");
    probe->add_option("--workers", workers, "Worker threads (default: all cores)");

    auto* ext = app.add_subcommand("extract", "Extract the zero level set and evaluate it");
    ext->add_option("--checkpoint", checkpoint_path, "Trained checkpoint");
    ext->add_flag("--oracle", oracle, "Use the analytic scene SDF instead of a checkpoint");
    ext->add_option("--scene", scene_path, "Scene file (ground truth)")->required();
    ext->add_option("--resolution", resolution, "Marching cubes grid resolution");
    ext->add_option("--threshold", threshold, "Precision/recall distance threshold");
    ext->add_option("--samples", samples, "Evaluation sample count");
    ext->add_option("--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitInput;
    }

    try {
        if (gen->parsed()) return cmd_generate_data(scene_path, rig_path, out_dir, workers);
        if (tr->parsed())
            return cmd_train(config_path, dataset_dir, out_dir, mode, seed, regions_path, resume,
                             workers);
        if (toy->parsed()) return cmd_toy_ray(scene_path, ray_spec, alpha, beta, count, out_dir);
        if (probe->parsed())
            return cmd_gradient_probe(config_path, dataset_dir, regions_path, out_dir, workers,
                                      seed);
        if (ext->parsed())
            return cmd_extract(checkpoint_path, oracle, scene_path, resolution, threshold, samples,
                               out_dir);
    } catch (const NumericalError& e) {
        std::cerr << "numerical abort: " << e.what() << "\n";
        return kExitNumerical;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const std::runtime_error& e) {
        // Schema/contract problems exit 2; filesystem-level failures exit 4.
        std::string message = e.what();
        std::cerr << "error: " << message << "\n";
        bool io = message.find("cannot open") != std::string::npos ||
                  message.find("cannot write") != std::string::npos ||
                  message.find("truncated") != std::string::npos ||
                  message.find("missing frame file") != std::string::npos;
        return io ? kExitIo : kExitInput;
    }
    return kExitInput;
}
