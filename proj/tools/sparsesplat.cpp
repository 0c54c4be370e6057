#include "sparsesplat/image_io.hpp"
#include "sparsesplat/workflow.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace ssplat;

namespace {

int fail(std::string_view code, const std::string& message) {
    nlohmann::ordered_json j;
    j["error"] = code;
    j["message"] = message;
    std::cerr << j.dump() << '\n';
    return 2;
}

void write_file(const fs::path& path, const std::string& text) {
    if (path.has_parent_path())
        fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error(ErrorCode::Io, "cannot open " + path.string() + " for writing");
    out << text;
}

bool on_off(const std::string& value) { return value == "on"; }

struct TrainFlags {
    std::string data;
    int views = 3;
    std::string prior_diff = "on";
    std::string prior_geo = "on";
    std::uint64_t seed = 0;
    std::string out;
    int warmup = 1000;
    int iters = 3000;
    double lr = 1.6e-3;
    int init_gaussians = 1000;
    std::string denoiser = "oracle";
    std::string depth = "oracle";
    int threads = 1;
    int checkpoint_every = 500;
    std::size_t max_gaussians = 0;
    bool quiet = false;

    CLI::Option* denoiser_opt = nullptr;
    CLI::Option* depth_opt = nullptr;

    void add_to(CLI::App* cmd, bool with_toggles) {
        cmd->add_option("--data", data, "dataset folder or manifest.json")->required();
        cmd->add_option("--views", views, "training view budget")
            ->check(CLI::IsMember({3, 6, 9, 12}))
            ->capture_default_str();
        if (with_toggles) {
            cmd->add_option("--prior-diff", prior_diff, "diffusion prior")
                ->check(CLI::IsMember({"on", "off"}))
                ->capture_default_str();
            cmd->add_option("--prior-geo", prior_geo, "geometric prior")
                ->check(CLI::IsMember({"on", "off"}))
                ->capture_default_str();
        }
        cmd->add_option("--seed", seed)->capture_default_str();
        cmd->add_option("--out", out, "output folder")->required();
        cmd->add_option("--warmup", warmup, "stage-1 iterations")->capture_default_str();
        cmd->add_option("--iters", iters, "stage-2 iterations")->capture_default_str();
        cmd->add_option("--lr", lr, "learning rate")->capture_default_str();
        cmd->add_option("--init-gaussians", init_gaussians)->capture_default_str();
        denoiser_opt = cmd->add_option("--denoiser", denoiser,
                                       "oracle | zero | file:<dir> | subprocess:<cmd>")
                           ->capture_default_str();
        depth_opt = cmd->add_option("--depth", depth,
                                    "oracle | file | file:<dir> | subprocess:<cmd>")
                        ->capture_default_str();
        cmd->add_option("--threads", threads)->check(CLI::PositiveNumber)->capture_default_str();
        cmd->add_option("--checkpoint-every", checkpoint_every)
            ->check(CLI::PositiveNumber)
            ->capture_default_str();
        cmd->add_option("--max-gaussians", max_gaussians, "0 = unbounded")->capture_default_str();
        cmd->add_flag("--quiet", quiet, "no progress on stderr");
    }

    TrainJob job() const {
        if (prior_diff == "off" && denoiser_opt->count() > 0)
            throw Error(ErrorCode::InvalidArgument, "--denoiser conflicts with --prior-diff off");
        if (prior_geo == "off" && depth_opt->count() > 0)
            throw Error(ErrorCode::InvalidArgument, "--depth conflicts with --prior-geo off");
        TrainJob job;
        job.config.seed = seed;
        job.config.view_budget = views;
        job.config.prior_diff = on_off(prior_diff);
        job.config.prior_geo = on_off(prior_geo);
        job.config.warmup_iters = warmup;
        job.config.extra_iters = iters;
        job.config.learning_rate = lr;
        job.config.init_gaussians = init_gaussians;
        job.config.checkpoint_interval = checkpoint_every;
        job.config.densify.max_primitives = max_gaussians;
        job.config.render.threads = threads;
        job.denoiser = denoiser;
        job.depth = depth;
        job.out_dir = out;
        if (!quiet)
            job.on_step = [total = warmup + iters](const StepRecord& r) {
                if (r.iteration % 100 == 0 || r.iteration == total)
                    std::fprintf(stderr, "iter %d/%d stage %d total %.6f gaussians %zu\n",
                                 r.iteration, total, r.stage, r.loss.total, r.n_gaussians);
            };
        return job;
    }
};

int run(int argc, char** argv) {
    CLI::App app{"Sparse-view deformable Gaussian splatting"};
    app.require_subcommand(1);

    SynthConfig synth;
    std::string synth_out;
    bool no_deform = false;
    bool no_tool = false;
    CLI::App* synth_cmd = app.add_subcommand("synth", "generate a synthetic dataset");
    synth_cmd->add_option("--seed", synth.seed)->capture_default_str();
    synth_cmd->add_option("--gaussians", synth.gaussians)->check(CLI::PositiveNumber)->capture_default_str();
    synth_cmd->add_option("--views", synth.views)->check(CLI::PositiveNumber)->capture_default_str();
    synth_cmd->add_option("--heldout", synth.heldout, "views marked heldout, interleaved")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    CLI::Option* deform_flag = synth_cmd->add_flag("--deform", synth.deform, "plant a rigid sinusoidal motion");
    synth_cmd->add_flag("--no-deform", no_deform)->excludes(deform_flag);
    synth_cmd->add_flag("--no-tool", no_tool, "no tool occluder or masks");
    synth_cmd->add_option("--width", synth.width)->check(CLI::PositiveNumber)->capture_default_str();
    synth_cmd->add_option("--height", synth.height)->check(CLI::PositiveNumber)->capture_default_str();
    synth_cmd->add_option("--out", synth_out, "output folder")->required();

    TrainFlags train;
    CLI::App* train_cmd = app.add_subcommand("train", "fit a model to a dataset");
    train.add_to(train_cmd, true);

    std::string render_ckpt, render_view, render_out, render_data;
    double render_time = 0.0;
    int render_threads = 1;
    CLI::App* render_cmd = app.add_subcommand("render", "render a checkpoint from one of its views");
    render_cmd->add_option("--ckpt", render_ckpt)->required();
    render_cmd->add_option("--view-id", render_view)->required();
    CLI::Option* time_opt = render_cmd->add_option("--time", render_time, "defaults to the view's time")
                                ->check(CLI::Range(0.0, 1.0));
    render_cmd->add_option("--out", render_out, "color image (.png or .pfm); depth goes to <stem>.depth.pfm")
        ->required();
    render_cmd->add_option("--data", render_data, "dataset to look the view up in when the checkpoint lacks it");
    render_cmd->add_option("--threads", render_threads)->check(CLI::PositiveNumber)->capture_default_str();

    std::string eval_ckpt, eval_data, eval_report, eval_split, eval_label;
    int eval_fps_repeats = 1;
    int eval_threads = 1;
    CLI::App* eval_cmd = app.add_subcommand("eval", "score a checkpoint against a dataset");
    eval_cmd->add_option("--ckpt", eval_ckpt)->required();
    eval_cmd->add_option("--data", eval_data)->required();
    eval_cmd->add_option("--report", eval_report, "report JSON path")->required();
    eval_cmd->add_option("--split", eval_split, "only views of this split");
    eval_cmd->add_option("--label", eval_label);
    eval_cmd->add_option("--fps-repeats", eval_fps_repeats, "0 skips the timing pass")
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();
    eval_cmd->add_option("--threads", eval_threads)->check(CLI::PositiveNumber)->capture_default_str();

    TrainFlags ablation;
    std::string ablation_split;
    int ablation_fps_repeats = 0;
    CLI::App* ablation_cmd = app.add_subcommand("ablation", "train and score the 2x2 prior matrix");
    ablation.add_to(ablation_cmd, false);
    ablation_cmd->add_option("--split", ablation_split, "evaluation split (default heldout if present)");
    ablation_cmd->add_option("--fps-repeats", ablation_fps_repeats)
        ->check(CLI::NonNegativeNumber)
        ->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        return fail("invalid_argument", e.what());
    }

    if (synth_cmd->parsed()) {
        synth.tool = !no_tool;
        const DatasetManifest manifest = synth_generate(synth, synth_out);
        std::cout << "wrote " << manifest.views.size() << " views to " << synth_out << '\n';
        return 0;
    }

    if (train_cmd->parsed()) {
        const TrainJob job = train.job();
        const DatasetManifest manifest = load_manifest(train.data);
        const TrainOutput out = train_dataset(manifest, job);
        nlohmann::ordered_json j;
        j["checkpoint"] = (fs::path(train.out) / "final.esck").string();
        j["iterations"] = out.final.iteration;
        j["gaussians"] = out.final.cloud.size();
        j["views"] = out.view_ids;
        std::cout << j.dump() << '\n';
        return 0;
    }

    if (render_cmd->parsed()) {
        const Checkpoint ckpt = load_checkpoint(render_ckpt);
        std::optional<CameraView> view;
        for (const CameraView& c : ckpt.cameras)
            if (c.id == render_view)
                view = c;
        if (!view && !render_data.empty()) {
            const DatasetManifest manifest = load_manifest(render_data);
            for (const ViewEntry& e : manifest.views)
                if (e.id == render_view)
                    view = view_from_entry(e, manifest.width, manifest.height);
        }
        if (!view)
            throw Error(ErrorCode::InvalidArgument, "unknown view id " + render_view);
        const double time = time_opt->count() > 0 ? render_time : view->time;
        RenderSettings settings;
        settings.threads = render_threads;
        const RenderOutput<float> out =
            render(checkpoint_scene(ckpt, time, render_threads), *view, settings);
        const fs::path color_path = render_out;
        if (color_path.has_parent_path())
            fs::create_directories(color_path.parent_path());
        if (color_path.extension() == ".png")
            write_png(color_path, out.color);
        else
            write_pfm(color_path, out.color);
        fs::path depth_path = color_path;
        depth_path.replace_extension(".depth.pfm");
        write_pfm(depth_path, out.depth);
        return 0;
    }

    if (eval_cmd->parsed()) {
        const DatasetManifest manifest = load_manifest(eval_data);
        const Checkpoint ckpt = load_checkpoint(eval_ckpt);
        EvalOptions options;
        options.split = eval_split;
        options.fps_repeats = eval_fps_repeats;
        options.render.threads = eval_threads;
        options.label = eval_label.empty() ? fs::path(eval_ckpt).stem().string() : eval_label;
        const MetricReport report = evaluate_checkpoint(ckpt, manifest, options);
        write_file(eval_report, report_to_json(report));
        std::cout << report_to_table(std::vector<MetricReport>{report});
        return 0;
    }

    if (ablation_cmd->parsed()) {
        AblationOptions options;
        options.base = ablation.job();
        options.eval_split = ablation_split;
        options.eval.fps_repeats = ablation_fps_repeats;
        options.eval.render.threads = ablation.threads;
        const DatasetManifest manifest = load_manifest(ablation.data);
        const std::vector<MetricReport> reports = run_ablation(manifest, options);
        std::cout << report_to_table(reports);
        return 0;
    }
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const Error& e) {
        return fail(to_string(e.code()), e.what());
    } catch (const fs::filesystem_error& e) {
        return fail("io", e.what());
    } catch (const std::exception& e) {
        return fail("internal", e.what());
    }
}
