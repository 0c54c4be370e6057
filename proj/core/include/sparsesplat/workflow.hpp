#pragma once

#include "sparsesplat/checkpoint.hpp"
#include "sparsesplat/dataset.hpp"
#include "sparsesplat/metrics.hpp"
#include "sparsesplat/priors.hpp"

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace ssplat {

/// Provider specs: "oracle", "zero", "file:<dir>" or "subprocess:<command>".
std::unique_ptr<DenoiserProvider> make_denoiser(const std::string& spec,
                                                std::span<const std::byte> conditioning = {});

/// Provider specs: "oracle" (needs the dataset's reference scene), "file"
/// (the manifest's own depth maps), "file:<dir>" or "subprocess:<command>".
/// File providers are checked up front for every view in `views`; a missing
/// map raises MissingFile naming the view.
std::unique_ptr<DepthProvider> make_depth_provider(const std::string& spec,
                                                   const DatasetManifest& manifest,
                                                   std::span<const CameraView> views);

/// Reference cloud of a synthetic dataset, as stored.
GaussianCloud<double> load_reference_cloud(const DatasetManifest& manifest);

struct EvalOptions {
    std::string split;   // empty = every view
    int fps_repeats = 1; // 0 skips the timing pass
    RenderSettings render;
    std::string label;
};

/// The checkpoint's scene at `time`, deformed when it carries a field.
GaussianCloud<float> checkpoint_scene(const Checkpoint& checkpoint, double time, int threads = 1);

MetricReport evaluate_checkpoint(const Checkpoint& checkpoint, const DatasetManifest& manifest,
                                 const EvalOptions& options);

struct TrainJob {
    TrainConfig config;
    std::string denoiser = "oracle";
    std::string depth = "oracle";
    std::vector<std::byte> conditioning;
    /// When set: log.ndjson, run.json, periodic ckpt_<iter>.esck and final.esck.
    std::filesystem::path out_dir;
    std::function<void(const StepRecord&)> on_step;
};

struct TrainOutput {
    Checkpoint final;
    std::vector<StepRecord> log;
    std::vector<std::string> view_ids; // supervised views, in training order
};

/// Trains on the manifest's "train" split, restricted to the config's view
/// budget by the strided subset rule. Providers are built only for the
/// priors that are switched on.
TrainOutput train_dataset(const DatasetManifest& manifest, const TrainJob& job);

/// One newline-free JSON object per step: iter, stage, l_rgb, l_diff, l_geo,
/// total, diff_skipped, n_gaussians, wall_ms.
std::string step_record_json(const StepRecord& record);

struct AblationOptions {
    TrainJob base;          // priors toggled per cell; out_dir is the matrix root
    std::string eval_split; // empty: "heldout" when present, else every view
    EvalOptions eval;
};

/// The 2 x 2 matrix of diffusion/geometry prior toggles. Returns one report
/// per cell, labelled "diff-<on|off>/geo-<on|off>", in the order off/off,
/// off/on, on/off, on/on. With an out_dir each cell is trained into
/// <out_dir>/diff-*_geo-* and its report saved beside the checkpoints.
std::vector<MetricReport> run_ablation(const DatasetManifest& manifest, const AblationOptions& options);

} // namespace ssplat
