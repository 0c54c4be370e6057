#include "sparsesplat/workflow.hpp"

#include "sparsesplat/image_io.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>

namespace ssplat {

namespace {

struct ParsedSpec {
    std::string kind;
    std::string argument;
};

ParsedSpec parse_spec(const std::string& spec) {
    const auto colon = spec.find(':');
    if (colon == std::string::npos)
        return {spec, {}};
    return {spec.substr(0, colon), spec.substr(colon + 1)};
}

// Reads the depth maps referenced by the manifest itself.
class ManifestDepth final : public DepthProvider {
public:
    explicit ManifestDepth(const DatasetManifest& manifest) : root_(manifest.root) {
        for (const auto& v : manifest.views)
            if (v.depth)
                paths_[v.id] = *v.depth;
    }
    ImageD predict_depth(const DepthRequest& request) override {
        const auto it = paths_.find(request.view_key);
        if (it == paths_.end())
            throw Error(ErrorCode::MissingFile, "view '" + request.view_key + "' has no depth map");
        return read_pfm(root_ / it->second).cast<double>();
    }
    std::string kind() const override { return "file"; }

private:
    std::filesystem::path root_;
    std::map<std::string, std::string> paths_;
};

} // namespace

std::unique_ptr<DenoiserProvider> make_denoiser(const std::string& spec,
                                                std::span<const std::byte> conditioning) {
    const ParsedSpec s = parse_spec(spec);
    if (s.kind == "oracle")
        return std::make_unique<OracleDenoiser>();
    if (s.kind == "zero")
        return std::make_unique<ZeroDenoiser>();
    if (s.kind == "file" && !s.argument.empty())
        return std::make_unique<FileDenoiser>(s.argument);
    if (s.kind == "subprocess" && !s.argument.empty())
        return std::make_unique<SubprocessDenoiser>(s.argument, conditioning);
    throw Error(ErrorCode::InvalidArgument, "unknown denoiser provider '" + spec + "'");
}

GaussianCloud<double> load_reference_cloud(const DatasetManifest& manifest) {
    if (!manifest.ground_truth)
        throw Error(ErrorCode::PriorUnavailable, "dataset has no reference scene for the oracle provider");
    return load_checkpoint(manifest.root / *manifest.ground_truth).cloud.cast<double>();
}

std::unique_ptr<DepthProvider> make_depth_provider(const std::string& spec,
                                                   const DatasetManifest& manifest,
                                                   std::span<const CameraView> views) {
    const ParsedSpec s = parse_spec(spec);
    if (s.kind == "oracle") {
        auto cloud = std::make_shared<const GaussianCloud<double>>(load_reference_cloud(manifest));
        const PlantedMotion motion = manifest.motion;
        return std::make_unique<OracleDepth>(
            [cloud, motion](double time) { return displaced_cloud(*cloud, motion, time); });
    }
    if (s.kind == "file" && s.argument.empty()) {
        for (const auto& v : views) {
            const auto it = std::find_if(manifest.views.begin(), manifest.views.end(),
                                         [&](const ViewEntry& e) { return e.id == v.id; });
            if (it == manifest.views.end() || !it->depth)
                throw Error(ErrorCode::MissingFile, "view '" + v.id + "' has no depth map in the manifest");
            if (!std::filesystem::exists(manifest.root / *it->depth))
                throw Error(ErrorCode::MissingFile, "view '" + v.id + "' references a missing depth file " +
                                                        (manifest.root / *it->depth).string());
        }
        return std::make_unique<ManifestDepth>(manifest);
    }
    if (s.kind == "file") {
        auto provider = std::make_unique<FileDepth>(s.argument);
        for (const auto& v : views)
            if (!provider->has_view(v.id))
                throw Error(ErrorCode::MissingFile,
                            "view '" + v.id + "' has no depth map in " + s.argument);
        return provider;
    }
    if (s.kind == "subprocess" && !s.argument.empty())
        return std::make_unique<SubprocessDepth>(s.argument);
    throw Error(ErrorCode::InvalidArgument, "unknown depth provider '" + spec + "'");
}

GaussianCloud<float> checkpoint_scene(const Checkpoint& checkpoint, double time, int threads) {
    if (!checkpoint.deformation)
        return checkpoint.cloud;
    return apply_deformation(checkpoint.cloud, *checkpoint.deformation, static_cast<float>(time),
                             static_cast<DeformationCache<float>*>(nullptr), threads);
}

MetricReport evaluate_checkpoint(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                                 const EvalOptions& options) {
    const std::vector<CameraView> views = load_views(manifest, options.split);
    if (views.empty())
        throw Error(ErrorCode::InvalidArgument, "no views in split '" + options.split + "'");
    MetricReport report;
    report.label = options.label;
    for (const auto& v : views) {
        const GaussianCloud<float> scene = checkpoint_scene(checkpoint, v.time, options.render.threads);
        const RenderOutput<float> out = render(scene, v, options.render);
        report.views.push_back(evaluate_view(v.id, out.color, out.depth, *v.gt_image,
                                             v.gt_depth ? &*v.gt_depth : nullptr,
                                             v.mask ? &*v.mask : nullptr));
    }
    report.aggregate();
    if (options.fps_repeats > 0) {
        const FpsResult fps = measure_fps(
            [&](const CameraView& v) {
                return render(checkpoint_scene(checkpoint, v.time, options.render.threads), v,
                              options.render)
                    .color;
            },
            views, options.fps_repeats);
        report.fps = fps.fps;
    }
    return report;
}

namespace {

nlohmann::ordered_json config_json(const TrainJob& job, const std::vector<std::string>& views) {
    const TrainConfig& c = job.config;
    nlohmann::ordered_json j;
    j["seed"] = c.seed;
    j["views"] = views;
    j["warmup_iters"] = c.warmup_iters;
    j["extra_iters"] = c.extra_iters;
    j["learning_rate"] = c.learning_rate;
    j["weights"] = {{"rgb", c.weights.rgb}, {"diff", c.weights.diff}, {"geo", c.weights.geo}};
    j["prior_diff"] = c.prior_diff;
    j["prior_geo"] = c.prior_geo;
    j["denoiser"] = c.prior_diff ? nlohmann::ordered_json(job.denoiser) : nlohmann::ordered_json(nullptr);
    j["depth"] = c.prior_geo ? nlohmann::ordered_json(job.depth) : nlohmann::ordered_json(nullptr);
    j["init_gaussians"] = c.init_gaussians;
    j["densify"] = {{"enabled", c.densify.enabled},
                    {"interval", c.densify.interval},
                    {"grad_threshold", c.densify.grad_threshold},
                    {"min_opacity", c.densify.min_opacity},
                    {"max_primitives", c.densify.max_primitives}};
    j["novel_view_range_deg"] = c.novel_view_range_deg;
    j["threads"] = c.render.threads;
    return j;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out << text;
    if (!out)
        throw Error(ErrorCode::Io, "failed writing " + path.string());
}

} // namespace

std::string step_record_json(const StepRecord& r) {
    nlohmann::ordered_json j;
    j["iter"] = r.iteration;
    j["stage"] = r.stage;
    j["l_rgb"] = r.loss.rgb;
    j["l_diff"] = r.loss.diff;
    j["l_geo"] = r.loss.geo;
    j["total"] = r.loss.total;
    j["diff_skipped"] = r.loss.diff_skipped;
    j["n_gaussians"] = r.n_gaussians;
    j["wall_ms"] = r.wall_ms;
    return j.dump();
}

TrainOutput train_dataset(const DatasetManifest& manifest, const TrainJob& job) {
    const TrainConfig& config = job.config;
    config.validate();
    const std::vector<CameraView> candidates = load_views(manifest, "train");
    if (candidates.size() < static_cast<std::size_t>(config.view_budget))
        throw Error(ErrorCode::InvalidArgument,
                    "dataset has " + std::to_string(candidates.size()) + " training views, " +
                        std::to_string(config.view_budget) + " requested");
    const std::vector<std::size_t> chosen =
        select_views(candidates.size(), static_cast<std::size_t>(config.view_budget));
    std::vector<CameraView> supervised;
    TrainOutput output;
    for (std::size_t i : chosen) {
        supervised.push_back(candidates[i]);
        output.view_ids.push_back(candidates[i].id);
    }

    std::unique_ptr<DenoiserProvider> denoiser;
    std::unique_ptr<DepthProvider> depth;
    if (config.prior_diff)
        denoiser = make_denoiser(job.denoiser, job.conditioning);
    if (config.prior_geo)
        depth = make_depth_provider(job.depth, manifest, supervised);

    std::ofstream log;
    if (!job.out_dir.empty()) {
        std::filesystem::create_directories(job.out_dir);
        write_text(job.out_dir / "run.json", config_json(job, output.view_ids).dump(2) + "\n");
        log.open(job.out_dir / "log.ndjson", std::ios::trunc);
        if (!log)
            throw Error(ErrorCode::Io, "cannot open " + (job.out_dir / "log.ndjson").string());
    }

    ScheduleHooks hooks;
    hooks.on_step = [&](const StepRecord& r) {
        if (log.is_open())
            log << step_record_json(r) << '\n';
        if (job.on_step)
            job.on_step(r);
    };
    if (!job.out_dir.empty())
        hooks.on_checkpoint = [&](const TrainState& state) {
            char name[32];
            std::snprintf(name, sizeof(name), "ckpt_%06d.esck", state.iteration);
            save_checkpoint(job.out_dir / name, make_checkpoint(state, config, manifest.bounds, supervised));
        };

    // The schedule selects again from `supervised`; with budget == size that is the identity.
    TrainResult result = run_schedule(supervised, manifest.bounds, config,
                                      {denoiser.get(), depth.get()}, hooks);
    output.final = make_checkpoint(result.state, config, manifest.bounds, supervised);
    output.log = std::move(result.log);
    if (!job.out_dir.empty()) {
        log.flush();
        save_checkpoint(job.out_dir / "final.esck", output.final);
    }
    return output;
}

std::vector<MetricReport> run_ablation(const DatasetManifest& manifest, const AblationOptions& options) {
    std::string split = options.eval_split;
    if (split.empty())
        split = manifest.split("heldout").empty() ? std::string() : std::string("heldout");
    std::vector<MetricReport> reports;
    for (bool diff : {false, true})
        for (bool geo : {false, true}) {
            TrainJob job = options.base;
            job.config.prior_diff = diff;
            job.config.prior_geo = geo;
            const std::string on_off[2] = {"off", "on"};
            const std::string label = "diff-" + on_off[diff] + "/geo-" + on_off[geo];
            if (!options.base.out_dir.empty())
                job.out_dir = options.base.out_dir / ("diff-" + on_off[diff] + "_geo-" + on_off[geo]);
            const TrainOutput trained = train_dataset(manifest, job);
            EvalOptions eval = options.eval;
            eval.split = split;
            eval.label = label;
            MetricReport report = evaluate_checkpoint(trained.final, manifest, eval);
            if (!job.out_dir.empty())
                write_text(job.out_dir / "report.json", report_to_json(report));
            reports.push_back(std::move(report));
        }
    if (!options.base.out_dir.empty())
        write_text(options.base.out_dir / "ablation.txt", report_to_table(reports));
    return reports;
}

} // namespace ssplat
