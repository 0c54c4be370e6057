#include "sparsesplat/training.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <sstream>

namespace ssplat {

void TrainConfig::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorCode::InvalidArgument, what); };
    if (warmup_iters < 0 || extra_iters < 0 || total_iters() <= 0)
        fail("iteration counts must be non-negative with a positive total");
    if (!(learning_rate > 0.0))
        fail("learning rate must be positive");
    if (view_budget <= 0)
        fail("view budget must be positive");
    if (weights.rgb < 0.0 || weights.diff < 0.0 || weights.geo < 0.0)
        fail("loss weights must be non-negative");
    if (densify.enabled && densify.interval <= 0)
        fail("densification interval must be positive");
    if (!(densify.split_scale_divisor > 0.0))
        fail("split scale divisor must be positive");
    if (checkpoint_interval <= 0)
        fail("checkpoint interval must be positive");
    if (init_gaussians <= 0)
        fail("initial primitive count must be positive");
    if (!(init_opacity > 0.0 && init_opacity < 1.0))
        fail("initial opacity must lie in (0, 1)");
    if (novel_view_range_deg < 0.0)
        fail("novel-view range must be non-negative");
}

template <typename T>
RgbLoss<T> masked_rgb_loss(const Image<T>& rendered, const Image<T>& target, const ImageF* mask) {
    if (!rendered.same_shape(target))
        throw Error(ErrorCode::ShapeMismatch, "masked_rgb_loss: image shapes differ");
    if (mask && mask->pixel_count() != rendered.pixel_count())
        throw Error(ErrorCode::ShapeMismatch, "masked_rgb_loss: mask shape differs");
    RgbLoss<T> r;
    r.grad = Image<T>(rendered.width(), rendered.height(), rendered.channels());
    const int ch = rendered.channels();
    double sum = 0.0;
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        if (mask && (*mask)[p] != 0.0f)
            continue;
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = p * ch + c;
            sum += static_cast<double>(std::abs(rendered[i] - target[i]));
        }
        r.tissue += static_cast<std::size_t>(ch);
    }
    if (r.tissue == 0)
        return r;
    const T inv_n = T(1) / static_cast<T>(r.tissue);
    r.loss = static_cast<T>(sum / static_cast<double>(r.tissue));
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        if (mask && (*mask)[p] != 0.0f)
            continue;
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = p * ch + c;
            const T d = rendered[i] - target[i];
            r.grad[i] = d > T(0) ? inv_n : (d < T(0) ? -inv_n : T(0));
        }
    }
    return r;
}

template <typename T>
ParameterGrads<T> ParameterGrads<T>::zeros_like(const GaussianCloud<T>& cloud,
                                                const DeformationModel<T>& deformation) {
    ParameterGrads g;
    g.cloud = cloud.zeros_like();
    g.deformation = deformation.zeros_like();
    g.viewspace_grad_norm.assign(cloud.size(), T(0));
    g.visible.assign(cloud.size(), 0);
    return g;
}

namespace {

template <typename T>
void add_into(std::vector<T>& dst, const std::vector<T>& src) {
    for (std::size_t i = 0; i < dst.size(); ++i)
        dst[i] += src[i];
}

template <typename T>
struct PosedScene {
    GaussianCloud<T> deformed;
    DeformationCache<T> cache;
    bool deformed_used = false;

    const GaussianCloud<T>& scene(const GaussianCloud<T>& canonical) const {
        return deformed_used ? deformed : canonical;
    }
};

template <typename T>
PosedScene<T> pose(const GaussianCloud<T>& canonical, const DeformationModel<T>& deformation,
                   bool use_deformation, double time, int threads) {
    PosedScene<T> p;
    if (use_deformation) {
        p.deformed = apply_deformation(canonical, deformation, static_cast<T>(time), &p.cache, threads);
        p.deformed_used = true;
    }
    return p;
}

template <typename T>
void backpropagate(const GaussianCloud<T>& canonical, const DeformationModel<T>& deformation,
                   const PosedScene<T>& posed, const CameraView& view,
                   const RenderOutput<T>& forward, const RenderGradients<T>& upstream,
                   ParameterGrads<T>& grads, bool record_viewspace) {
    BackwardResult<T> back = render_backward(posed.scene(canonical), view, forward, upstream);
    if (posed.deformed_used) {
        deformation_backward(canonical, deformation, posed.cache, back.grads, grads.cloud,
                             grads.deformation);
    } else {
        add_into(grads.cloud.means, back.grads.means);
        add_into(grads.cloud.rotations, back.grads.rotations);
        add_into(grads.cloud.log_scales, back.grads.log_scales);
        add_into(grads.cloud.opacity_logits, back.grads.opacity_logits);
        add_into(grads.cloud.sh, back.grads.sh);
    }
    if (record_viewspace) {
        for (std::size_t i = 0; i < back.visible.size(); ++i) {
            grads.viewspace_grad_norm[i] += back.viewspace_grad_norm[i];
            grads.visible[i] |= back.visible[i];
        }
    }
}

template <typename T>
void scale_in_place(Image<T>& image, T factor) {
    for (auto& v : image.storage())
        v *= factor;
}

} // namespace

template <typename T>
ViewTerms<T> accumulate_view_terms(const GaussianCloud<T>& canonical,
                                   const DeformationModel<T>& deformation, bool use_deformation,
                                   const CameraView& view, const ImageD* depth_prediction,
                                   const LossWeights& weights, const RenderSettings& settings,
                                   ParameterGrads<T>& grads) {
    if (!view.gt_image)
        throw Error(ErrorCode::InvalidArgument, "view '" + view.id + "' has no ground-truth image");
    const PosedScene<T> posed = pose(canonical, deformation, use_deformation, view.time, settings.threads);
    ViewTerms<T> terms;
    terms.render = render(posed.scene(canonical), view, settings);
    const ImageF* mask = view.mask ? &*view.mask : nullptr;

    RgbLoss<T> rgb = masked_rgb_loss(terms.render.color, view.gt_image->cast<T>(), mask);
    terms.rgb = rgb.loss;
    scale_in_place(rgb.grad, static_cast<T>(weights.rgb));

    RenderGradients<T> upstream;
    upstream.color = &rgb.grad;
    Image<T> depth_grad;
    if (depth_prediction) {
        if (depth_prediction->width() != view.width || depth_prediction->height() != view.height ||
            depth_prediction->channels() != 1)
            throw Error(ErrorCode::ResolutionMismatch,
                        "depth prediction for view '" + view.id + "' has the wrong resolution");
        // A non-positive prediction carries no depth (0 marks "no surface" in stored maps).
        Image<T> valid(view.width, view.height, 1, T(1));
        for (std::size_t p = 0; p < valid.size(); ++p)
            if ((mask && (*mask)[p] != 0.0f) || !((*depth_prediction)[p] > 0.0))
                valid[p] = T(0);
        GeoLoss<T> geo = geo_loss(terms.render.depth, depth_prediction->cast<T>(), &valid);
        terms.geo = geo.loss;
        terms.geo_degenerate = geo.degenerate;
        depth_grad = std::move(geo.grad);
        scale_in_place(depth_grad, static_cast<T>(weights.geo));
        if (weights.geo != 0.0 && !geo.degenerate)
            upstream.depth = &depth_grad;
    }
    backpropagate(canonical, deformation, posed, view, terms.render, upstream, grads, true);
    return terms;
}

template <typename T>
DiffusionTerm<T> accumulate_diffusion_term(const GaussianCloud<T>& canonical,
                                           const DeformationModel<T>& deformation,
                                           bool use_deformation, const CameraView& view,
                                           DenoiserProvider& denoiser,
                                           const DiffusionSchedule& schedule,
                                           const NoiseDraw<T>& draw, double weight,
                                           const RenderSettings& settings,
                                           ParameterGrads<T>& grads) {
    const PosedScene<T> posed = pose(canonical, deformation, use_deformation, view.time, settings.threads);
    const RenderOutput<T> fwd = render(posed.scene(canonical), view, settings);
    const ImageF* mask = view.mask ? &*view.mask : nullptr;
    SdsResult<T> sds;
    try {
        sds = sds_residual(fwd.color, denoiser, schedule, draw, mask, view.id);
    } catch (const Error& e) {
        if (e.code() != ErrorCode::PriorUnavailable)
            throw;
        return {T(0), true};
    }
    DiffusionTerm<T> term;
    term.loss = sds.loss;
    if (weight != 0.0) {
        scale_in_place(sds.grad, static_cast<T>(weight));
        RenderGradients<T> upstream;
        upstream.color = &sds.grad;
        backpropagate(canonical, deformation, posed, view, fwd, upstream, grads, false);
    }
    return term;
}

// ---------------------------------------------------------------------------

Vec3<double> estimate_scene_centroid(std::span<const CameraView> views) {
    if (views.empty())
        throw Error(ErrorCode::InvalidArgument, "centroid estimation needs at least one view");
    Mat3<double> a = Mat3<double>::Zero();
    Vec3<double> b = Vec3<double>::Zero();
    Vec3<double> mean_center = Vec3<double>::Zero();
    Vec3<double> mean_forward = Vec3<double>::Zero();
    for (const auto& v : views) {
        const Vec3<double> c = v.center();
        const Vec3<double> d = v.rotation.row(2).transpose().normalized();
        const Mat3<double> proj = Mat3<double>::Identity() - d * d.transpose();
        a += proj;
        b += proj * c;
        mean_center += c;
        mean_forward += d;
    }
    mean_center /= static_cast<double>(views.size());
    Eigen::SelfAdjointEigenSolver<Mat3<double>> eig(a);
    if (eig.eigenvalues().minCoeff() > 1e-6 * std::max(1.0, a.trace()))
        return a.ldlt().solve(b);
    const double norm = mean_forward.norm();
    return norm > 0.0 ? Vec3<double>(mean_center + mean_forward / norm) : mean_center;
}

Vec3<double> mean_up_axis(std::span<const CameraView> views) {
    Vec3<double> up = Vec3<double>::Zero();
    for (const auto& v : views)
        up -= v.rotation.row(1).transpose();
    if (up.norm() < 1e-12)
        throw Error(ErrorCode::NumericalDegeneracy, "camera up vectors cancel out");
    return up.normalized();
}

CameraView rotate_view_about_axis(const CameraView& view, const Vec3<double>& pivot,
                                  const Vec3<double>& axis, double angle) {
    if (angle == 0.0)
        return view;
    if (axis.norm() < 1e-12)
        throw Error(ErrorCode::InvalidArgument, "rotation axis must be nonzero");
    const Mat3<double> turn = Eigen::AngleAxis<double>(angle, axis.normalized()).toRotationMatrix();
    CameraView out = view;
    const Vec3<double> center = pivot + turn * (view.center() - pivot);
    out.rotation = view.rotation * turn.transpose();
    out.translation = -out.rotation * center;
    return out;
}

CameraView sample_novel_view(std::span<const CameraView> views, std::mt19937_64& rng,
                             double range_deg) {
    if (views.empty())
        throw Error(ErrorCode::InvalidArgument, "novel-view sampling needs at least one view");
    const std::size_t pick = std::uniform_int_distribution<std::size_t>(0, views.size() - 1)(rng);
    double angle = 0.0;
    if (range_deg > 0.0)
        angle = std::uniform_real_distribution<double>(-range_deg, range_deg)(rng) *
                std::numbers::pi / 180.0;
    CameraView out = angle == 0.0
                         ? views[pick]
                         : rotate_view_about_axis(views[pick], estimate_scene_centroid(views),
                                                  mean_up_axis(views), angle);
    out.id = views[pick].id + "/novel";
    out.gt_image.reset();
    out.gt_depth.reset();
    return out;
}

std::vector<std::size_t> select_views(std::size_t available, std::size_t budget) {
    if (budget == 0 || budget > available)
        throw Error(ErrorCode::InvalidArgument,
                    "view budget " + std::to_string(budget) + " exceeds the " +
                        std::to_string(available) + " available views");
    std::vector<std::size_t> out(budget);
    for (std::size_t i = 0; i < budget; ++i)
        out[i] = i * available / budget;
    return out;
}

GaussianCloud<float> init_cloud(const SceneBounds& bounds, int count, int sh_degree,
                                double opacity, std::mt19937_64& rng) {
    const Vec3<double> extent = bounds.max - bounds.min;
    if (!(extent.minCoeff() > 0.0))
        throw Error(ErrorCode::InvalidArgument, "scene bounds must be strictly ordered");
    GaussianCloud<float> cloud(sh_degree, 0);
    const double spacing = std::cbrt(extent.prod() / count);
    const float log_scale = static_cast<float>(std::log(0.5 * spacing));
    const float logit = static_cast<float>(std::log(opacity / (1.0 - opacity)));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int i = 0; i < count; ++i) {
        GaussianPrimitive<float> p;
        for (int a = 0; a < 3; ++a)
            p.position[a] = static_cast<float>(bounds.min[a] + unit(rng) * extent[a]);
        p.log_scale.setConstant(log_scale);
        p.opacity_logit = logit;
        p.sh.assign(static_cast<std::size_t>(cloud.coeffs()) * 3, 0.0f);
        for (int c = 0; c < 3; ++c)
            p.sh[c] = static_cast<float>((unit(rng) - kColorOffset) / kShC0);
        cloud.push_back(p);
    }
    return cloud;
}

TrainState TrainState::create(const TrainConfig& config, const SceneBounds& bounds) {
    config.validate();
    TrainState s;
    s.rng.seed(config.seed);
    s.cloud = init_cloud(bounds, config.init_gaussians, config.sh_degree, config.init_opacity, s.rng);
    EncodingConfig enc = config.encoding;
    enc.bounds_min = bounds.min;
    enc.bounds_max = bounds.max;
    s.deformation = DeformationModel<float>::create(enc, config.head, config.seed ^ 0x9e3779b97f4a7c15ull);
    AdamSettings adam;
    adam.learning_rate = config.learning_rate;
    s.cloud_optimizer = Adam<float>(adam);
    s.deformation_optimizer = Adam<float>(adam);
    s.grad_accum.assign(s.cloud.size(), 0.0);
    s.grad_count.assign(s.cloud.size(), 0);
    s.noise = NoiseSampler(config.seed * 0x2545f4914f6cdd1dull + 1);
    return s;
}

DensifyOutcome densify_and_prune(TrainState& state, const DensifyConfig& config) {
    GaussianCloud<float>& cloud = state.cloud;
    const std::size_t n = cloud.size();
    DensifyOutcome outcome;
    const float shrink = static_cast<float>(std::log(config.split_scale_divisor));

    std::vector<GaussianPrimitive<float>> kept;
    std::vector<std::int64_t> source;
    std::vector<GaussianPrimitive<float>> appended;
    kept.reserve(n);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t i = 0; i < n; ++i) {
        GaussianPrimitive<float> p = cloud.primitive(i);
        const double avg = state.grad_count[i] > 0 ? state.grad_accum[i] / state.grad_count[i] : 0.0;
        const bool room = config.max_primitives == 0 || n + appended.size() < config.max_primitives;
        if (avg > config.grad_threshold && room) {
            Vec3<double> u(normal(state.rng), normal(state.rng), normal(state.rng));
            if (u.norm() == 0.0)
                u = Vec3<double>::UnitX();
            u = u.normalized() * std::cbrt(unit(state.rng));
            const Vec3<double> offset = quaternion_to_rotation<double>(p.rotation.cast<double>()) *
                                        (p.scale().cast<double>().cwiseProduct(u));
            GaussianPrimitive<float> a = p, b = p;
            a.position = (p.position.cast<double>() + offset).cast<float>();
            b.position = (p.position.cast<double>() - offset).cast<float>();
            a.log_scale.array() -= shrink;
            b.log_scale.array() -= shrink;
            kept.push_back(a);
            source.push_back(-1);
            appended.push_back(b);
            ++outcome.split;
        } else {
            kept.push_back(p);
            source.push_back(static_cast<std::int64_t>(i));
        }
    }
    for (auto& b : appended) {
        kept.push_back(std::move(b));
        source.push_back(-1);
    }

    GaussianCloud<float> next(cloud.sh_degree, 0);
    std::vector<std::int64_t> next_source;
    for (std::size_t i = 0; i < kept.size(); ++i) {
        if (kept[i].opacity() < static_cast<float>(config.min_opacity)) {
            ++outcome.pruned;
            continue;
        }
        next.push_back(kept[i]);
        next_source.push_back(source[i]);
    }
    const std::size_t k = static_cast<std::size_t>(next.coeffs()) * 3;
    state.cloud_optimizer.remap("means", next_source, 3);
    state.cloud_optimizer.remap("rotations", next_source, 4);
    state.cloud_optimizer.remap("log_scales", next_source, 3);
    state.cloud_optimizer.remap("opacity_logits", next_source, 1);
    state.cloud_optimizer.remap("sh", next_source, k);
    cloud = std::move(next);
    state.grad_accum.assign(cloud.size(), 0.0);
    state.grad_count.assign(cloud.size(), 0);
    return outcome;
}

CompositeLoss train_step(TrainState& state, const TrainingData& data, std::size_t view_index,
                         DenoiserProvider* denoiser, const DiffusionSchedule& schedule,
                         const TrainConfig& config) {
    if (view_index >= data.views.size())
        throw Error(ErrorCode::InvalidArgument, "training view index out of range");
    const bool stage2 = state.iteration >= config.warmup_iters;
    auto grads = ParameterGrads<float>::zeros_like(state.cloud, state.deformation);

    const ImageD* depth = nullptr;
    if (config.prior_geo && !data.depth_predictions.empty())
        depth = &data.depth_predictions.at(view_index);
    const ViewTerms<float> terms =
        accumulate_view_terms(state.cloud, state.deformation, stage2, data.views[view_index],
                              depth, config.weights, config.render, grads);

    CompositeLoss loss;
    loss.rgb = terms.rgb;
    loss.geo = depth ? terms.geo : 0.0f;
    loss.geo_degenerate = terms.geo_degenerate;
    loss.diff_skipped = true;
    if (config.prior_diff && denoiser) {
        const CameraView novel = sample_novel_view(data.views, state.rng, config.novel_view_range_deg);
        const NoiseDraw<float> draw = state.noise.draw<float>(novel.width, novel.height, 3, schedule);
        const DiffusionTerm<float> d =
            accumulate_diffusion_term(state.cloud, state.deformation, stage2, novel, *denoiser,
                                      schedule, draw, config.weights.diff, config.render, grads);
        loss.diff = d.loss;
        loss.diff_skipped = d.skipped;
    }
    loss.total = config.weights.rgb * loss.rgb + config.weights.diff * loss.diff +
                 config.weights.geo * loss.geo;
    if (!std::isfinite(loss.total)) {
        std::ostringstream msg;
        msg.precision(17);
        msg << "non-finite loss at iteration " << state.iteration + 1 << " on view '"
            << data.views[view_index].id << "': rgb=" << loss.rgb << " diff=" << loss.diff
            << " geo=" << loss.geo;
        throw Error(ErrorCode::NonFiniteLoss, msg.str());
    }

    if (!stage2) {
        for (std::size_t i = 0; i < grads.visible.size(); ++i)
            if (grads.visible[i]) {
                state.grad_accum[i] += grads.viewspace_grad_norm[i];
                ++state.grad_count[i];
            }
    }
    state.cloud_optimizer.step(state.cloud, grads.cloud);
    if (stage2)
        state.deformation_optimizer.step(state.deformation, grads.deformation);
    ++state.iteration;

    if (!stage2 && config.densify.enabled && state.iteration % config.densify.interval == 0)
        densify_and_prune(state, config.densify);
    return loss;
}

TrainResult run_schedule(std::span<const CameraView> candidates, const SceneBounds& bounds,
                         const TrainConfig& config, const Providers& providers,
                         const ScheduleHooks& hooks) {
    config.validate();
    if (config.prior_diff && !providers.denoiser)
        throw Error(ErrorCode::PriorUnavailable, "diffusion prior enabled without a denoiser");
    if (config.prior_geo && !providers.depth)
        throw Error(ErrorCode::PriorUnavailable, "geometric prior enabled without a depth provider");

    TrainResult result;
    result.view_indices = select_views(candidates.size(), static_cast<std::size_t>(config.view_budget));
    TrainingData data;
    for (std::size_t idx : result.view_indices) {
        const CameraView& v = candidates[idx];
        if (!v.gt_image)
            throw Error(ErrorCode::InvalidArgument, "training view '" + v.id + "' has no image");
        data.views.push_back(v);
    }
    if (config.prior_geo) {
        for (const CameraView& v : data.views) {
            const ImageD color = v.gt_image->cast<double>();
            DepthRequest request{&v, &color, v.id};
            ImageD predicted = providers.depth->predict_depth(request);
            if (predicted.width() != v.width || predicted.height() != v.height ||
                predicted.channels() != 1)
                throw Error(ErrorCode::ResolutionMismatch,
                            "depth prediction for view '" + v.id + "' has the wrong resolution");
            data.depth_predictions.push_back(std::move(predicted));
        }
    }

    const DiffusionSchedule schedule = DiffusionSchedule::linear();
    TrainState state = TrainState::create(config, bounds);
    const int total = config.total_iters();
    result.log.reserve(static_cast<std::size_t>(total));
    for (int it = 1; it <= total; ++it) {
        const auto start = std::chrono::steady_clock::now();
        const std::size_t view =
            std::uniform_int_distribution<std::size_t>(0, data.views.size() - 1)(state.rng);
        StepRecord record;
        record.iteration = it;
        record.stage = it <= config.warmup_iters ? 1 : 2;
        record.loss = train_step(state, data, view, providers.denoiser, schedule, config);
        record.n_gaussians = state.cloud.size();
        record.wall_ms = std::chrono::duration<double, std::milli>(
                             std::chrono::steady_clock::now() - start).count();
        if (hooks.on_step)
            hooks.on_step(record);
        result.log.push_back(record);
        if (hooks.on_checkpoint && (it % config.checkpoint_interval == 0 || it == total))
            hooks.on_checkpoint(state);
    }
    result.state = std::move(state);
    return result;
}

GaussianCloud<float> scene_at_time(const TrainState& state, double time) {
    return apply_deformation(state.cloud, state.deformation, static_cast<float>(time));
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template RgbLoss<T> masked_rgb_loss<T>(const Image<T>&, const Image<T>&, const ImageF*);    \
    template struct ParameterGrads<T>;                                                          \
    template ViewTerms<T> accumulate_view_terms<T>(                                             \
        const GaussianCloud<T>&, const DeformationModel<T>&, bool, const CameraView&,           \
        const ImageD*, const LossWeights&, const RenderSettings&, ParameterGrads<T>&);          \
    template DiffusionTerm<T> accumulate_diffusion_term<T>(                                     \
        const GaussianCloud<T>&, const DeformationModel<T>&, bool, const CameraView&,           \
        DenoiserProvider&, const DiffusionSchedule&, const NoiseDraw<T>&, double,               \
        const RenderSettings&, ParameterGrads<T>&);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

} // namespace ssplat
