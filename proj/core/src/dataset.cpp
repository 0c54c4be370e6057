#include "sparsesplat/dataset.hpp"

#include "sparsesplat/checkpoint.hpp"
#include "sparsesplat/image_io.hpp"
#include "sparsesplat/rasterizer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

namespace ssplat {

namespace fs = std::filesystem;
using nlohmann::json;

Vec3<double> PlantedMotion::offset(double time) const {
    return amplitude * std::sin(2.0 * std::numbers::pi * frequency * time);
}

std::vector<const ViewEntry*> DatasetManifest::split(const std::string& name) const {
    std::vector<const ViewEntry*> out;
    for (const auto& v : views)
        if (name.empty() || v.split == name)
            out.push_back(&v);
    return out;
}

namespace {

json vec_json(const Vec3<double>& v) { return json::array({v.x(), v.y(), v.z()}); }

Vec3<double> json_vec(const json& j) {
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

void check_map(const fs::path& root, const ViewEntry& view, const std::string& rel,
               const char* what, int width, int height, int channels) {
    const fs::path p = root / rel;
    if (!fs::exists(p))
        throw Error(ErrorCode::MissingFile,
                    "view '" + view.id + "' references a missing " + what + " file " + p.string());
    const ImageF map = read_pfm(p);
    if (map.width() != width || map.height() != height || map.channels() != channels)
        throw Error(ErrorCode::ResolutionMismatch,
                    "view '" + view.id + "': " + what + " is " + std::to_string(map.width()) + "x" +
                        std::to_string(map.height()) + "x" + std::to_string(map.channels()) +
                        ", expected " + std::to_string(width) + "x" + std::to_string(height) + "x" +
                        std::to_string(channels));
}

} // namespace

DatasetManifest load_manifest(const fs::path& path, const ManifestOptions& options) {
    const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
    std::ifstream in(file);
    if (!in)
        throw Error(ErrorCode::MissingFile, "missing manifest " + file.string());
    DatasetManifest m;
    m.root = file.parent_path();
    try {
        const json j = json::parse(in);
        const int version = j.at("version").get<int>();
        if (version != kManifestVersion)
            throw Error(ErrorCode::VersionMismatch,
                        "manifest version " + std::to_string(version) + " is not supported");
        m.width = j.at("width").get<int>();
        m.height = j.at("height").get<int>();
        m.near_plane = j.value("near_plane", 0.01);
        m.bounds.min = json_vec(j.at("bounds").at("min"));
        m.bounds.max = json_vec(j.at("bounds").at("max"));
        if (j.contains("ground_truth") && !j.at("ground_truth").is_null()) {
            const auto& gt = j.at("ground_truth");
            m.ground_truth = gt.at("checkpoint").get<std::string>();
            m.motion.amplitude = json_vec(gt.at("motion_amplitude"));
            m.motion.frequency = gt.at("motion_frequency").get<double>();
        }
        for (const auto& jv : j.at("views")) {
            ViewEntry v;
            v.id = jv.at("id").get<std::string>();
            v.split = jv.value("split", std::string("train"));
            v.time = jv.at("time").get<double>();
            const auto& k = jv.at("intrinsics");
            v.intrinsics = {k.at("fx").get<double>(), k.at("fy").get<double>(),
                            k.at("cx").get<double>(), k.at("cy").get<double>()};
            const auto& w2c = jv.at("world_to_camera");
            for (int r = 0; r < 3; ++r) {
                for (int c = 0; c < 3; ++c)
                    v.rotation(r, c) = w2c.at(r).at(c).get<double>();
                v.translation[r] = w2c.at(r).at(3).get<double>();
            }
            v.image = jv.at("image").get<std::string>();
            if (jv.contains("image_png"))
                v.image_png = jv.at("image_png").get<std::string>();
            if (jv.contains("depth"))
                v.depth = jv.at("depth").get<std::string>();
            if (jv.contains("mask"))
                v.mask = jv.at("mask").get<std::string>();
            m.views.push_back(std::move(v));
        }
    } catch (const json::exception& e) {
        throw Error(ErrorCode::InvalidArgument,
                    "manifest " + file.string() + " is malformed: " + e.what());
    }

    if (m.width <= 0 || m.height <= 0)
        throw Error(ErrorCode::InvalidArgument, "manifest resolution must be positive");
    if (!((m.bounds.max - m.bounds.min).minCoeff() > 0.0))
        throw Error(ErrorCode::InvalidArgument, "manifest scene bounds must be strictly ordered");
    for (std::size_t i = 0; i < m.views.size(); ++i) {
        const ViewEntry& v = m.views[i];
        if (v.split != "train" && v.split != "heldout")
            throw Error(ErrorCode::InvalidArgument, "view '" + v.id + "' has unknown split '" + v.split + "'");
        if (i > 0 && v.time < m.views[i - 1].time)
            throw Error(ErrorCode::InvalidArgument,
                        "view times must be non-decreasing; view '" + v.id + "' goes back in time");
        view_from_entry(v, m.width, m.height).validate();
        check_map(m.root, v, v.image, "image", m.width, m.height, 3);
        if (v.depth)
            check_map(m.root, v, *v.depth, "depth", m.width, m.height, 1);
        else if (options.require_depth && v.split == "train")
            throw Error(ErrorCode::MissingFile, "view '" + v.id + "' has no depth map");
        if (v.mask)
            check_map(m.root, v, *v.mask, "mask", m.width, m.height, 1);
    }
    return m;
}

void save_manifest(const fs::path& path, const DatasetManifest& m) {
    json j;
    j["format"] = "sparsesplat-dataset";
    j["version"] = kManifestVersion;
    j["width"] = m.width;
    j["height"] = m.height;
    j["near_plane"] = m.near_plane;
    j["bounds"] = {{"min", vec_json(m.bounds.min)}, {"max", vec_json(m.bounds.max)}};
    if (m.ground_truth)
        j["ground_truth"] = {{"checkpoint", *m.ground_truth},
                             {"motion_amplitude", vec_json(m.motion.amplitude)},
                             {"motion_frequency", m.motion.frequency}};
    j["views"] = json::array();
    for (const auto& v : m.views) {
        json jv;
        jv["id"] = v.id;
        jv["split"] = v.split;
        jv["time"] = v.time;
        jv["intrinsics"] = {{"fx", v.intrinsics.fx}, {"fy", v.intrinsics.fy},
                            {"cx", v.intrinsics.cx}, {"cy", v.intrinsics.cy}};
        json w2c = json::array();
        for (int r = 0; r < 3; ++r)
            w2c.push_back({v.rotation(r, 0), v.rotation(r, 1), v.rotation(r, 2), v.translation[r]});
        w2c.push_back({0.0, 0.0, 0.0, 1.0});
        jv["world_to_camera"] = w2c;
        jv["image"] = v.image;
        if (v.image_png)
            jv["image_png"] = *v.image_png;
        if (v.depth)
            jv["depth"] = *v.depth;
        if (v.mask)
            jv["mask"] = *v.mask;
        j["views"].push_back(std::move(jv));
    }
    std::ofstream out(path);
    if (!out)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out << j.dump(2) << "\n";
}

CameraView view_from_entry(const ViewEntry& entry, int width, int height) {
    CameraView v;
    v.id = entry.id;
    v.intrinsics = entry.intrinsics;
    v.rotation = entry.rotation;
    v.translation = entry.translation;
    v.width = width;
    v.height = height;
    v.time = entry.time;
    return v;
}

std::vector<CameraView> load_views(const DatasetManifest& manifest, const std::string& split) {
    std::vector<CameraView> out;
    for (const ViewEntry* e : manifest.split(split)) {
        CameraView v = view_from_entry(*e, manifest.width, manifest.height);
        v.gt_image = read_pfm(manifest.root / e->image);
        if (e->depth)
            v.gt_depth = read_pfm(manifest.root / *e->depth);
        if (e->mask)
            v.mask = read_pfm(manifest.root / *e->mask);
        v.validate();
        out.push_back(std::move(v));
    }
    return out;
}

GaussianCloud<double> displaced_cloud(const GaussianCloud<double>& cloud, const PlantedMotion& motion,
                                      double time) {
    GaussianCloud<double> out = cloud;
    if (!motion.active())
        return out;
    const Vec3<double> d = motion.offset(time);
    for (std::size_t i = 0; i < out.size(); ++i)
        for (int a = 0; a < 3; ++a)
            out.means[3 * i + a] += d[a];
    return out;
}

// ---------------------------------------------------------------------------

namespace {

struct SurfaceShape {
    double phase_x, phase_y, phase_xy;

    double height(double x, double y) const {
        return 0.15 * std::sin(2.2 * x + phase_x) * std::cos(1.8 * y + phase_y) +
               0.06 * std::sin(3.1 * x * y + phase_xy);
    }
    Vec3<double> normal(double x, double y) const {
        const double h = 1e-6;
        const double hx = (height(x + h, y) - height(x - h, y)) / (2 * h);
        const double hy = (height(x, y + h) - height(x, y - h)) / (2 * h);
        return Vec3<double>(-hx, -hy, 1.0).normalized();
    }
};

// Out of line: GCC 11 at -O3 (SLP vectorizer) drops an inlined double->float->double round trip.
[[gnu::noinline]] double round_to_float(double v) { return static_cast<double>(static_cast<float>(v)); }

ImageF tool_mask(int width, int height, double time) {
    ImageF mask(width, height, 1);
    const double cx = (0.25 + 0.5 * time) * width, cy = 0.72 * height;
    const double hw = 0.11 * width, hh = 0.16 * height;
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x)
            if (std::abs(x + 0.5 - cx) < hw && std::abs(y + 0.5 - cy) < hh)
                mask.at(x, y) = 1.0f;
    return mask;
}

} // namespace

SyntheticScene synth_scene(const SynthConfig& config) {
    if (config.views < 1 || config.heldout < 0 || config.gaussians < 1 || config.width < 1 ||
        config.height < 1)
        throw Error(ErrorCode::InvalidArgument, "synthetic scene needs positive counts and resolution");
    std::mt19937_64 rng(config.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
    std::normal_distribution<double> normal(0.0, 1.0);

    SyntheticScene scene;
    scene.bounds.min = Vec3<double>(-1.1, -1.1, -0.45);
    scene.bounds.max = Vec3<double>(1.1, 1.1, 0.45);
    const SurfaceShape surface{uniform(0, 2 * std::numbers::pi), uniform(0, 2 * std::numbers::pi),
                               uniform(0, 2 * std::numbers::pi)};

    scene.cloud = GaussianCloud<double>(config.sh_degree, 0);
    const int k = sh_coeff_count(config.sh_degree);
    for (int i = 0; i < config.gaussians; ++i) {
        GaussianPrimitive<double> p;
        const double x = uniform(-0.9, 0.9), y = uniform(-0.9, 0.9);
        p.position = {x, y, surface.height(x, y)};
        const Eigen::Quaterniond tilt =
            Eigen::Quaterniond::FromTwoVectors(Vec3<double>::UnitZ(), surface.normal(x, y));
        const Eigen::Quaterniond twist(Eigen::AngleAxisd(uniform(0, std::numbers::pi), Vec3<double>::UnitZ()));
        const Eigen::Quaterniond q = (tilt * twist).normalized();
        p.rotation = {q.w(), q.x(), q.y(), q.z()};
        p.log_scale = {std::log(uniform(0.06, 0.12)), std::log(uniform(0.06, 0.12)), std::log(0.015)};
        p.opacity_logit = uniform(1.5, 3.5);
        const Vec3<double> base(0.72 + 0.15 * std::sin(3.0 * x), 0.38 + 0.15 * std::cos(2.5 * y),
                                0.36 + 0.10 * std::sin(2.0 * (x + y)));
        p.sh.assign(static_cast<std::size_t>(k) * 3, 0.0);
        for (int c = 0; c < 3; ++c)
            p.sh[c] = (base[c] + uniform(-0.05, 0.05) - kColorOffset) / kShC0;
        for (std::size_t j = 3; j < p.sh.size(); ++j)
            p.sh[j] = 0.03 * normal(rng);

        // Store float-representable values so float checkpoints reproduce the scene exactly.
        for (int a = 0; a < 3; ++a) {
            p.position[a] = round_to_float(p.position[a]);
            p.log_scale[a] = round_to_float(p.log_scale[a]);
        }
        for (int a = 0; a < 4; ++a)
            p.rotation[a] = round_to_float(p.rotation[a]);
        p.opacity_logit = round_to_float(p.opacity_logit);
        for (auto& v : p.sh)
            v = round_to_float(v);
        scene.cloud.push_back(p);
    }
    if (config.deform) {
        scene.motion.amplitude = Vec3<double>(0.06, 0.04, 0.03);
        scene.motion.frequency = 1.0;
    }

    // Poses along the arc: training views evenly including both ends, held-out
    // views at the centers of equal sub-arcs.
    struct Placement {
        double angle;
        bool heldout;
    };
    std::vector<Placement> placements;
    const double arc = config.arc_deg * std::numbers::pi / 180.0;
    for (int i = 0; i < config.views; ++i)
        placements.push_back({config.views == 1 ? 0.0 : -arc / 2 + arc * i / (config.views - 1), false});
    for (int j = 0; j < config.heldout; ++j)
        placements.push_back({-arc / 2 + arc * (j + 0.5) / config.heldout, true});
    std::stable_sort(placements.begin(), placements.end(),
                     [](const Placement& a, const Placement& b) { return a.angle < b.angle; });

    const double focal = 0.5 * config.width / std::tan(0.5 * config.fov_deg * std::numbers::pi / 180.0);
    const Intrinsics intr{focal, focal, 0.5 * config.width, 0.5 * config.height};
    const std::size_t count = placements.size();
    for (std::size_t i = 0; i < count; ++i) {
        const double time = count == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(count - 1);
        const double a = placements[i].angle - std::numbers::pi / 2;
        const Vec3<double> eye(config.ring_radius * std::cos(a), config.ring_radius * std::sin(a),
                               config.ring_height);
        CameraView view = CameraView::look_at(eye, Vec3<double>::Zero(), Vec3<double>::UnitZ(), intr,
                                              config.width, config.height, time);
        char id[32];
        std::snprintf(id, sizeof(id), "view_%03zu", i);
        view.id = id;

        const RenderOutput<double> out = render(displaced_cloud(scene.cloud, scene.motion, time), view);
        ImageF image = out.color.cast<float>();
        for (auto& v : image.storage())
            v = std::clamp(v, 0.0f, 1.0f);
        if (config.tool) {
            ImageF mask = tool_mask(config.width, config.height, time);
            for (std::size_t p = 0; p < mask.size(); ++p)
                if (mask[p] != 0.0f)
                    for (int c = 0; c < 3; ++c)
                        image[p * 3 + c] = 0.5f;
            view.mask = std::move(mask);
        }
        view.gt_image = std::move(image);
        view.gt_depth = out.depth.cast<float>();
        scene.views.push_back(std::move(view));
        scene.splits.push_back(placements[i].heldout ? "heldout" : "train");
    }
    return scene;
}

DatasetManifest synth_generate(const SynthConfig& config, const fs::path& out_dir) {
    const SyntheticScene scene = synth_scene(config);
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "depth");
    fs::create_directories(out_dir / "masks");

    DatasetManifest m;
    m.root = out_dir;
    m.width = config.width;
    m.height = config.height;
    m.bounds = scene.bounds;
    m.ground_truth = "scene.esck";
    m.motion = scene.motion;
    for (std::size_t i = 0; i < scene.views.size(); ++i) {
        const CameraView& v = scene.views[i];
        ViewEntry e;
        e.id = v.id;
        e.split = scene.splits[i];
        e.time = v.time;
        e.intrinsics = v.intrinsics;
        e.rotation = v.rotation;
        e.translation = v.translation;
        e.image = "images/" + v.id + ".pfm";
        e.image_png = "images/" + v.id + ".png";
        e.depth = "depth/" + v.id + ".pfm";
        write_pfm(out_dir / e.image, *v.gt_image);
        write_png(out_dir / *e.image_png, *v.gt_image);
        write_pfm(out_dir / *e.depth, *v.gt_depth);
        write_png(out_dir / ("depth/" + v.id + ".png"), normalize_for_display(*v.gt_depth));
        if (v.mask) {
            e.mask = "masks/" + v.id + ".pfm";
            write_pfm(out_dir / *e.mask, *v.mask);
        }
        m.views.push_back(std::move(e));
    }

    Checkpoint gt;
    gt.seed = config.seed;
    gt.bounds = scene.bounds;
    gt.cloud = scene.cloud.cast<float>();
    for (const auto& v : scene.views) {
        CameraView pose = v;
        pose.gt_image.reset();
        pose.gt_depth.reset();
        pose.mask.reset();
        gt.cameras.push_back(std::move(pose));
    }
    save_checkpoint(out_dir / *m.ground_truth, gt);
    save_manifest(out_dir / "manifest.json", m);
    return m;
}

} // namespace ssplat
