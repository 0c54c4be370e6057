#pragma once

// Finite-difference verification of the training-view gradients (masked
// L1 color term and 1 - Pearson depth term) through the full chain:
// deformation field, projection, blending.

#include "test_support.hpp"

#include "sparsesplat/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace ssplat::testkit {

struct GradCase {
    GaussianCloud<double> cloud;
    DeformationModel<double> model;
    bool use_deformation = false;
    CameraView view;
    ImageD depth_prediction;
    LossWeights weights{1.0, 0.0, 0.0};
};

// Mean |rendered - target| over tissue pixel-channels, written out directly.
inline double reference_l1(const ImageD& rendered, const ImageF& target, const ImageF* mask) {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        if (mask && (*mask)[p] != 0.0f)
            continue;
        for (int c = 0; c < 3; ++c) {
            sum += std::abs(rendered[p * 3 + c] - static_cast<double>(target[p * 3 + c]));
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

// Textbook sample correlation over tissue pixels with a positive prediction (no normalization step).
inline double reference_pearson(const ImageD& a, const ImageD& b, const ImageF* mask) {
    std::vector<double> xs, ys;
    for (std::size_t p = 0; p < a.size(); ++p)
        if ((!mask || (*mask)[p] == 0.0f) && b[p] > 0.0) {
            xs.push_back(a[p]);
            ys.push_back(b[p]);
        }
    const double n = static_cast<double>(xs.size());
    const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
    const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        sxy += (xs[i] - mx) * (ys[i] - my);
        sxx += (xs[i] - mx) * (xs[i] - mx);
        syy += (ys[i] - my) * (ys[i] - my);
    }
    return sxy / std::sqrt(sxx * syy);
}

struct Evaluation {
    double loss = 0.0;
    std::vector<std::int64_t> state;
};

inline Evaluation evaluate_case(const GradCase& c) {
    DeformationCache<double> cache;
    const GaussianCloud<double> posed =
        c.use_deformation ? apply_deformation(c.cloud, c.model, c.view.time, &cache) : c.cloud;
    const RenderOutput<double> out = render(posed, c.view);
    const ImageF* mask = c.view.mask ? &*c.view.mask : nullptr;
    Evaluation e;
    if (c.weights.rgb != 0.0)
        e.loss += c.weights.rgb * reference_l1(out.color, *c.view.gt_image, mask);
    if (c.weights.geo != 0.0)
        e.loss += c.weights.geo * std::abs(1.0 - reference_pearson(out.depth, c.depth_prediction, mask));

    e.state = contributor_state(posed, c.view);
    e.state.insert(e.state.end(), out.last_entry.begin(), out.last_entry.end());
    for (std::size_t i = 0; i < out.color.size(); ++i)
        e.state.push_back(out.color[i] > static_cast<double>((*c.view.gt_image)[i]) ? 1 : 0);
    for (const auto& enc : cache.encodings)
        for (const auto& s : enc.samples) {
            e.state.insert(e.state.end(), s.corner.begin(), s.corner.end());
            e.state.push_back(s.scale_a == 0.0);
            e.state.push_back(s.scale_b == 0.0);
        }
    for (const auto& h : cache.heads)
        for (std::size_t l = 1; l < h.activations.size(); ++l)
            for (double a : h.activations[l])
                e.state.push_back(a > 0.0);
    return e;
}

struct GradCheckStats {
    std::size_t checked = 0;
    std::size_t nonzero = 0;       // entries whose analytic gradient is nonzero
    std::size_t discontinuous = 0; // no step size kept the discrete state fixed
    std::size_t failures = 0;
    double worst = 0.0;
    std::string worst_name;

    void merge(const GradCheckStats& o) {
        checked += o.checked;
        nonzero += o.nonzero;
        discontinuous += o.discontinuous;
        failures += o.failures;
        if (o.worst > worst) {
            worst = o.worst;
            worst_name = o.worst_name;
        }
    }
};

// Relative error with an absolute floor: entries whose gradients are both
// below `floor` in magnitude are compared on the floor's scale.
inline double gradient_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// Central difference at a step that leaves the discrete state unchanged on
// both sides; tries successively smaller steps. Returns false when none does.
inline bool stable_difference(GradCase& c, double& param, double h, const Evaluation& base,
                              double& out) {
    const double keep = param;
    for (int attempt = 0; attempt < 4; ++attempt, h *= 0.1) {
        param = keep + h;
        const Evaluation up = evaluate_case(c);
        param = keep - h;
        const Evaluation down = evaluate_case(c);
        param = keep;
        if (up.state == base.state && down.state == base.state) {
            out = (up.loss - down.loss) / (2 * h);
            return true;
        }
    }
    param = keep;
    return false;
}

inline void check_entry(GradCase& c, const std::string& name, double& param, double analytic,
                        double h, double tolerance, const Evaluation& base, GradCheckStats& stats) {
    double numeric = 0.0;
    if (!stable_difference(c, param, h, base, numeric)) {
        ++stats.discontinuous;
        return;
    }
    ++stats.checked;
    if (analytic != 0.0)
        ++stats.nonzero;
    const double err = gradient_error(analytic, numeric);
    if (err > stats.worst) {
        stats.worst = err;
        stats.worst_name = name;
    }
    if (err > tolerance)
        ++stats.failures;
}

struct GradCheckOptions {
    double step = 1e-5;
    double tolerance = 1e-4;
    // Deformation groups are large; this many entries per group are checked,
    // preferring ones with a nonzero analytic gradient. 0 = all.
    std::size_t deformation_samples_per_group = 24;
    std::uint64_t sample_seed = 1;
};

// Checks every cloud parameter and a sample of deformation parameters.
inline GradCheckStats check_gradients(GradCase c, const GradCheckOptions& opt) {
    ParameterGrads<double> grads = ParameterGrads<double>::zeros_like(c.cloud, c.model);
    accumulate_view_terms<double>(c.cloud, c.model, c.use_deformation, c.view,
                                  c.weights.geo != 0.0 ? &c.depth_prediction : nullptr, c.weights,
                                  RenderSettings{}, grads);
    const Evaluation base = evaluate_case(c);
    GradCheckStats stats;

    std::vector<std::pair<std::string, const std::vector<double>*>> cloud_grads;
    grads.cloud.for_each_group([&](const std::string& n, const std::vector<double>& g) {
        cloud_grads.emplace_back(n, &g);
    });
    std::size_t gi = 0;
    c.cloud.for_each_group([&](const std::string& n, std::vector<double>& p) {
        const std::vector<double>& g = *cloud_grads[gi++].second;
        for (std::size_t i = 0; i < p.size(); ++i)
            check_entry(c, n + "[" + std::to_string(i) + "]", p[i], g[i], opt.step, opt.tolerance,
                        base, stats);
    });

    if (!c.use_deformation)
        return stats;
    std::vector<const std::vector<double>*> model_grads;
    grads.deformation.for_each_group(
        [&](const std::string&, const std::vector<double>& g) { model_grads.push_back(&g); });
    std::mt19937_64 rng(opt.sample_seed);
    gi = 0;
    c.model.for_each_group([&](const std::string& n, std::vector<double>& p) {
        const std::vector<double>& g = *model_grads[gi++];
        std::vector<std::size_t> idx(p.size());
        std::iota(idx.begin(), idx.end(), 0);
        if (opt.deformation_samples_per_group && idx.size() > opt.deformation_samples_per_group) {
            std::shuffle(idx.begin(), idx.end(), rng);
            std::stable_partition(idx.begin(), idx.end(), [&](std::size_t i) { return g[i] != 0.0; });
            idx.resize(opt.deformation_samples_per_group);
        }
        for (std::size_t i : idx)
            check_entry(c, n + "[" + std::to_string(i) + "]", p[i], g[i], opt.step, opt.tolerance,
                        base, stats);
    });
    return stats;
}

// Small deformation model with every parameter randomized, so no gradient
// path is trivially zero.
inline DeformationModel<double> random_deformation(std::mt19937_64& rng, const Vec3<double>& lo,
                                                   const Vec3<double>& hi) {
    EncodingConfig enc;
    enc.resolutions = {4, 6};
    enc.features = 4;
    enc.bounds_min = lo;
    enc.bounds_max = hi;
    HeadConfig head;
    head.hidden_width = 8;
    head.hidden_layers = 2;
    DeformationModel<double> m = DeformationModel<double>::create(enc, head, rng());
    std::normal_distribution<double> nd;
    m.for_each_group([&](const std::string& name, std::vector<double>& v) {
        const bool plane = name.rfind("field/", 0) == 0;
        const bool output = name.rfind("head/hidden", 0) != 0 && !plane;
        for (double& x : v)
            x = plane ? 1.0 + 0.5 * nd(rng) : (output ? 0.05 : 0.3) * nd(rng);
    });
    return m;
}

// A full training-view case: random scene, random target, a tool rectangle,
// a random positive depth prediction.
inline GradCase random_grad_case(std::uint64_t seed, int gaussians, int size, bool deformation) {
    std::mt19937_64 rng(seed);
    RandomScene s = random_scene(rng, gaussians, size, size);
    GradCase c;
    c.cloud = std::move(s.cloud);
    c.view = std::move(s.view);
    c.view.time = 0.37;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageF target(size, size, 3);
    for (float& v : target.storage())
        v = static_cast<float>(u(rng));
    c.view.gt_image = target;
    ImageF mask(size, size, 1, 0.0f);
    for (int y = size / 4; y < size / 2; ++y)
        for (int x = size / 2; x < size - 1; ++x)
            mask.at(x, y) = 1.0f;
    c.view.mask = mask;
    c.depth_prediction = ImageD(size, size, 1);
    for (double& v : c.depth_prediction.storage())
        v = 1.0 + 3.0 * u(rng);
    Vec3<double> lo = Vec3<double>::Constant(1e9), hi = Vec3<double>::Constant(-1e9);
    for (std::size_t i = 0; i < c.cloud.size(); ++i) {
        lo = lo.cwiseMin(c.cloud.mean(i));
        hi = hi.cwiseMax(c.cloud.mean(i));
    }
    c.model = random_deformation(rng, lo.array() - 0.5, hi.array() + 0.5);
    c.use_deformation = deformation;
    return c;
}

} // namespace ssplat::testkit
