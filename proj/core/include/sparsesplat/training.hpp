#pragma once

#include "sparsesplat/adam.hpp"
#include "sparsesplat/deformation.hpp"
#include "sparsesplat/priors.hpp"
#include "sparsesplat/rasterizer.hpp"
#include "sparsesplat/scene.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <vector>

namespace ssplat {

struct LossWeights {
    double rgb = 1.0;
    double diff = 0.001;
    double geo = 0.01;
};

struct DensifyConfig {
    bool enabled = true;
    int interval = 200;
    double grad_threshold = 2e-4;
    double min_opacity = 0.005;
    double split_scale_divisor = 1.6;
    std::size_t max_primitives = 0; // 0 = unbounded
};

struct SceneBounds {
    Vec3<double> min = Vec3<double>::Constant(-1.0);
    Vec3<double> max = Vec3<double>::Constant(1.0);
};

struct TrainConfig {
    int warmup_iters = 1000;
    int extra_iters = 3000;
    double learning_rate = 1.6e-3;
    std::uint64_t seed = 0;
    int view_budget = 3;
    bool prior_diff = true;
    bool prior_geo = true;
    LossWeights weights;
    DensifyConfig densify;
    double novel_view_range_deg = 5.0;
    int checkpoint_interval = 500;
    int init_gaussians = 1000;
    double init_opacity = 0.1;
    int sh_degree = kDefaultShDegree;
    EncodingConfig encoding;
    HeadConfig head;
    RenderSettings render;

    int total_iters() const { return warmup_iters + extra_iters; }
    /// Throws InvalidArgument on non-positive counts or negative weights.
    void validate() const;
};

struct CompositeLoss {
    double total = 0.0;
    double rgb = 0.0;
    double diff = 0.0;
    double geo = 0.0;
    bool diff_skipped = false;  // prior disabled, unavailable or no novel view
    bool geo_degenerate = false;
};

template <typename T>
struct RgbLoss {
    T loss = T(0);
    Image<T> grad;
    std::size_t tissue = 0; // valid pixel-channels
};

/// Mean absolute error over tissue pixels (mask == 0) and its gradient
/// sign(rendered - target) / N. A fully masked view yields zero.
template <typename T>
RgbLoss<T> masked_rgb_loss(const Image<T>& rendered, const Image<T>& target,
                           const ImageF* mask = nullptr);

/// Gradients for every trainable parameter plus the densification signal.
template <typename T>
struct ParameterGrads {
    GaussianCloud<T> cloud;
    DeformationModel<T> deformation;
    std::vector<T> viewspace_grad_norm;
    std::vector<std::uint8_t> visible;

    static ParameterGrads zeros_like(const GaussianCloud<T>& cloud,
                                     const DeformationModel<T>& deformation);
};

template <typename T>
struct ViewTerms {
    T rgb = T(0);
    T geo = T(0);
    bool geo_degenerate = false;
    RenderOutput<T> render;
};

/// Renders a supervised view (deformed to the view's time when
/// `use_deformation`) and adds the gradients of
/// weights.rgb * rgb + weights.geo * geo into `grads`. `depth_prediction`
/// may be null, which disables the geometric term.
template <typename T>
ViewTerms<T> accumulate_view_terms(const GaussianCloud<T>& canonical,
                                   const DeformationModel<T>& deformation, bool use_deformation,
                                   const CameraView& view, const ImageD* depth_prediction,
                                   const LossWeights& weights, const RenderSettings& settings,
                                   ParameterGrads<T>& grads);

template <typename T>
struct DiffusionTerm {
    T loss = T(0);
    bool skipped = false;
};

/// Renders an unsupervised view and adds weight * SDS gradients into
/// `grads`. A failing provider marks the term skipped instead of throwing.
template <typename T>
DiffusionTerm<T> accumulate_diffusion_term(const GaussianCloud<T>& canonical,
                                           const DeformationModel<T>& deformation,
                                           bool use_deformation, const CameraView& view,
                                           DenoiserProvider& denoiser,
                                           const DiffusionSchedule& schedule,
                                           const NoiseDraw<T>& draw, double weight,
                                           const RenderSettings& settings,
                                           ParameterGrads<T>& grads);

/// Least-squares intersection of the cameras' optical axes. Falls back to
/// one unit in front of the mean camera center when the axes are parallel.
Vec3<double> estimate_scene_centroid(std::span<const CameraView> views);

/// Normalized mean of the cameras' up vectors (negated image y axes).
Vec3<double> mean_up_axis(std::span<const CameraView> views);

/// Rigidly rotates a camera pose by `angle` radians about the line through
/// `pivot` along `axis`. Supervision maps are carried over unchanged.
CameraView rotate_view_about_axis(const CameraView& view, const Vec3<double>& pivot,
                                  const Vec3<double>& axis, double angle);

/// Picks a view uniformly and rotates it about the mean up axis through the
/// centroid by an angle drawn uniformly from +-range_deg. The source view's
/// mask is kept; color and depth supervision are dropped.
CameraView sample_novel_view(std::span<const CameraView> views, std::mt19937_64& rng,
                             double range_deg);

/// Evenly strided subset: index floor(i * n / k) for i in [0, k).
std::vector<std::size_t> select_views(std::size_t available, std::size_t budget);

/// Random primitives uniform inside the bounds.
GaussianCloud<float> init_cloud(const SceneBounds& bounds, int count, int sh_degree,
                                double opacity, std::mt19937_64& rng);

struct TrainState {
    GaussianCloud<float> cloud;
    DeformationModel<float> deformation;
    Adam<float> cloud_optimizer;
    Adam<float> deformation_optimizer;
    int iteration = 0;
    std::vector<double> grad_accum;      // per primitive, summed viewspace gradient norms
    std::vector<std::uint32_t> grad_count;
    std::mt19937_64 rng;
    NoiseSampler noise{0};

    static TrainState create(const TrainConfig& config, const SceneBounds& bounds);
};

struct DensifyOutcome {
    std::size_t split = 0;
    std::size_t pruned = 0;
};

/// Splits primitives whose average viewspace gradient exceeds the threshold
/// into two children offset within one standard deviation of the parent,
/// then removes primitives below the opacity floor. Optimizer moments follow
/// the survivors; new children start with zero moments.
DensifyOutcome densify_and_prune(TrainState& state, const DensifyConfig& config);

struct TrainingData {
    std::vector<CameraView> views;          // supervised views, gt_image required
    std::vector<ImageD> depth_predictions;  // per view, empty when the depth prior is off
};

/// One optimization step on `view_index`: the training-view terms, the
/// diffusion term on a sampled novel view, one Adam step on the active groups.
CompositeLoss train_step(TrainState& state, const TrainingData& data, std::size_t view_index,
                         DenoiserProvider* denoiser, const DiffusionSchedule& schedule,
                         const TrainConfig& config);

struct StepRecord {
    int iteration = 0;
    int stage = 1;
    CompositeLoss loss;
    std::size_t n_gaussians = 0;
    double wall_ms = 0.0;
};

struct Providers {
    DenoiserProvider* denoiser = nullptr;
    DepthProvider* depth = nullptr;
};

struct ScheduleHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<void(const TrainState&)> on_checkpoint;
};

struct TrainResult {
    TrainState state;
    std::vector<StepRecord> log;
    std::vector<std::size_t> view_indices; // into the candidate list
};

/// Warm-up on the canonical cloud with the deformation frozen, then joint
/// optimization. Densification runs only during warm-up; checkpoints fire
/// every config.checkpoint_interval iterations and at the end.
TrainResult run_schedule(std::span<const CameraView> candidates, const SceneBounds& bounds,
                         const TrainConfig& config, const Providers& providers,
                         const ScheduleHooks& hooks = {});

/// Canonical cloud deformed to `time` (identity when the model is untouched).
GaussianCloud<float> scene_at_time(const TrainState& state, double time);

} // namespace ssplat
