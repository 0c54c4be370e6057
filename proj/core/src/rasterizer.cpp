#include "sparsesplat/rasterizer.hpp"

#include <algorithm>
#include <array>
#include <cmath>

namespace ssplat {

namespace {

template <typename T>
bool all_finite(std::span<const T> values) {
    return std::all_of(values.begin(), values.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void check_finite(const GaussianCloud<T>& cloud, std::size_t i) {
    const bool ok =
        all_finite<T>(std::span<const T>(cloud.means).subspan(3 * i, 3)) &&
        all_finite<T>(std::span<const T>(cloud.rotations).subspan(4 * i, 4)) &&
        all_finite<T>(std::span<const T>(cloud.log_scales).subspan(3 * i, 3)) &&
        std::isfinite(cloud.opacity_logits[i]) && all_finite<T>(cloud.sh_of(i));
    if (!ok)
        throw Error(ErrorCode::NonFiniteAttribute,
                    "primitive " + std::to_string(i) + " has a non-finite attribute");
}

template <typename T>
struct CameraT {
    Mat3<T> rotation;
    Vec3<T> translation;
    Vec3<T> center;
    T fx, fy, cx, cy;

    explicit CameraT(const CameraView& v)
        : rotation(v.rotation.cast<T>()), translation(v.translation.cast<T>()),
          center(v.center().cast<T>()), fx(T(v.intrinsics.fx)), fy(T(v.intrinsics.fy)),
          cx(T(v.intrinsics.cx)), cy(T(v.intrinsics.cy)) {}
};

template <typename T>
Mat23<T> perspective_jacobian(const CameraT<T>& cam, const Vec3<T>& t) {
    const T inv_z = T(1) / t.z();
    Mat23<T> j;
    j << cam.fx * inv_z, T(0), -cam.fx * t.x() * inv_z * inv_z,
        T(0), cam.fy * inv_z, -cam.fy * t.y() * inv_z * inv_z;
    return j;
}

int clamp_to_int(double v, int lo, int hi) {
    if (!(v > lo))
        return lo;
    if (!(v < hi))
        return hi;
    return static_cast<int>(v);
}

// Screen position at which pixel (x, y) is sampled.
template <typename T>
Vec2<T> pixel_center(int x, int y) {
    return {T(x) + T(0.5), T(y) + T(0.5)};
}

} // namespace

template <typename T>
std::vector<ProjectedGaussian<T>> project(const GaussianCloud<T>& cloud, const CameraView& view) {
    const CameraT<T> cam(view);
    std::vector<ProjectedGaussian<T>> out;
    out.reserve(cloud.size());

    for (std::size_t i = 0; i < cloud.size(); ++i) {
        check_finite(cloud, i);
        const Vec3<T> mu = cloud.mean(i);
        const Vec3<T> t = cam.rotation * mu + cam.translation;
        if (t.z() <= T(kNearPlane))
            continue;

        const Mat3<T> sigma =
            build_covariance<T>(cloud.log_scale(i).array().exp().matrix(), cloud.rotation(i));
        const Mat23<T> tm = perspective_jacobian(cam, t) * cam.rotation;
        Mat2<T> cov = tm * sigma * tm.transpose();
        cov(0, 0) += T(kLowPass);
        cov(1, 1) += T(kLowPass);
        const T det = cov.determinant();
        if (!(det > T(0)))
            continue;

        ProjectedGaussian<T> p;
        p.index = static_cast<std::uint32_t>(i);
        p.mean2d = {cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy};
        p.cov2d = cov;
        p.conic << cov(1, 1) / det, -cov(0, 1) / det, -cov(1, 0) / det, cov(0, 0) / det;
        p.depth = t.z();
        const Vec3<T> dir = (mu - cam.center).normalized();
        p.color_raw = eval_sh_unclamped<T>(cloud.sh_degree, cloud.sh_of(i), dir);
        p.color = p.color_raw.cwiseMax(T(0));
        p.alpha_base = sigmoid(cloud.opacity_logits[i]);

        const double rx = 3.0 * std::sqrt(static_cast<double>(cov(0, 0)));
        const double ry = 3.0 * std::sqrt(static_cast<double>(cov(1, 1)));
        const double mx = static_cast<double>(p.mean2d.x());
        const double my = static_cast<double>(p.mean2d.y());
        p.px_min = clamp_to_int(std::ceil(mx - rx - 0.5), 0, view.width);
        p.px_max = clamp_to_int(std::floor(mx + rx - 0.5), -1, view.width - 1);
        p.py_min = clamp_to_int(std::ceil(my - ry - 0.5), 0, view.height);
        p.py_max = clamp_to_int(std::floor(my + ry - 0.5), -1, view.height - 1);
        if (p.px_min > p.px_max || p.py_min > p.py_max)
            continue;
        out.push_back(p);
    }

    std::stable_sort(out.begin(), out.end(),
                     [](const auto& a, const auto& b) { return a.depth < b.depth; });
    return out;
}

template <typename T>
BlendResult<T> blend_pixel(std::span<const BlendContributor<T>> contributors, bool early_stop) {
    BlendResult<T> r;
    T transmittance = T(1);
    for (const auto& c : contributors) {
        const T next = transmittance * (T(1) - c.alpha);
        if (early_stop && next < T(kMinTransmittance))
            break;
        const T w = c.alpha * transmittance;
        r.color += w * c.color;
        r.depth += w * c.depth;
        transmittance = next;
    }
    r.accum_alpha = T(1) - transmittance;
    return r;
}

namespace {

// Walks one pixel's tile list front-to-back, calling visit(entry, alpha,
// gaussian_falloff, clamped, transmittance_before, delta) for every
// contributor. Returns (final transmittance, one past last processed entry).
template <typename T, typename Visit>
std::pair<T, std::uint32_t> walk_pixel(const std::vector<ProjectedGaussian<T>>& projected,
                                       std::span<const std::uint32_t> entries,
                                       std::uint32_t first_entry, int x, int y,
                                       bool early_stop, Visit&& visit) {
    const Vec2<T> pix = pixel_center<T>(x, y);
    T transmittance = T(1);
    std::uint32_t e = 0;
    for (; e < entries.size(); ++e) {
        const auto& g = projected[entries[e]];
        if (x < g.px_min || x > g.px_max || y < g.py_min || y > g.py_max)
            continue;
        const Vec2<T> d = pix - g.mean2d;
        const T q = d.dot(g.conic * d);
        if (q > T(kFootprintQ))
            continue;
        const T falloff = std::exp(T(-0.5) * q);
        const T raw_alpha = g.alpha_base * falloff;
        const bool clamped = raw_alpha > T(kMaxAlpha);
        const T alpha = clamped ? T(kMaxAlpha) : raw_alpha;
        const T next = transmittance * (T(1) - alpha);
        if (early_stop && next < T(kMinTransmittance))
            break;
        visit(first_entry + e, entries[e], alpha, falloff, clamped, transmittance, d);
        transmittance = next;
    }
    return {transmittance, first_entry + e};
}

} // namespace

template <typename T>
RenderOutput<T> render(const GaussianCloud<T>& cloud, const CameraView& view,
                       const RenderSettings& settings) {
    if (settings.tile_size <= 0)
        throw Error(ErrorCode::InvalidArgument, "tile size must be positive");
    const int w = view.width, h = view.height;
    RenderOutput<T> out;
    out.color = Image<T>(w, h, 3);
    out.depth = Image<T>(w, h, 1);
    out.depth_raw = Image<T>(w, h, 1);
    out.accum_alpha = Image<T>(w, h, 1);
    out.transmittance = Image<T>(w, h, 1, T(1));
    out.last_entry.assign(static_cast<std::size_t>(w) * h, 0);
    out.settings = settings;
    out.projected = project(cloud, view);

    const int ts = settings.tile_size;
    out.tiles_x = (w + ts - 1) / ts;
    out.tiles_y = (h + ts - 1) / ts;
    const std::size_t tile_count = static_cast<std::size_t>(out.tiles_x) * out.tiles_y;

    // Counting sort of (tile, primitive) pairs; per-tile order follows depth order.
    std::vector<std::uint32_t> counts(tile_count + 1, 0);
    for (const auto& g : out.projected)
        for (int ty = g.py_min / ts; ty <= g.py_max / ts; ++ty)
            for (int tx = g.px_min / ts; tx <= g.px_max / ts; ++tx)
                ++counts[static_cast<std::size_t>(ty) * out.tiles_x + tx + 1];
    for (std::size_t t = 1; t <= tile_count; ++t)
        counts[t] += counts[t - 1];
    out.tile_offsets = counts;
    out.tile_entries.resize(counts[tile_count]);
    std::vector<std::uint32_t> cursor(counts.begin(), counts.end() - 1);
    for (std::uint32_t pi = 0; pi < out.projected.size(); ++pi) {
        const auto& g = out.projected[pi];
        for (int ty = g.py_min / ts; ty <= g.py_max / ts; ++ty)
            for (int tx = g.px_min / ts; tx <= g.px_max / ts; ++tx)
                out.tile_entries[cursor[static_cast<std::size_t>(ty) * out.tiles_x + tx]++] = pi;
    }

    parallel_for(tile_count, settings.threads, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % out.tiles_x);
        const int ty = static_cast<int>(tile / out.tiles_x);
        const std::uint32_t begin = out.tile_offsets[tile];
        const std::span<const std::uint32_t> entries(out.tile_entries.data() + begin,
                                                     out.tile_offsets[tile + 1] - begin);
        for (int y = ty * ts; y < std::min(h, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(w, (tx + 1) * ts); ++x) {
                Vec3<T> color = Vec3<T>::Zero();
                T depth = T(0);
                auto [trans, last] = walk_pixel<T>(
                    out.projected, entries, begin, x, y, settings.early_stop,
                    [&](std::uint32_t, std::uint32_t pi, T alpha, T, bool, T t_before,
                        const Vec2<T>&) {
                        const auto& g = out.projected[pi];
                        const T weight = alpha * t_before;
                        color += weight * g.color;
                        depth += weight * g.depth;
                    });
                const T accum = T(1) - trans;
                for (int c = 0; c < 3; ++c)
                    out.color.at(x, y, c) = color[c];
                out.depth_raw.at(x, y) = depth;
                out.accum_alpha.at(x, y) = accum;
                out.depth.at(x, y) = accum > T(0) ? depth / accum : T(0);
                out.transmittance.at(x, y) = trans;
                out.last_entry[static_cast<std::size_t>(y) * w + x] = last;
            }
        }
    });

    out.has_intermediates = true;
    return out;
}

namespace {

// Per (tile, primitive) gradient accumulator for screen-space quantities.
template <typename T>
struct ScreenGrad {
    Vec2<T> mean2d = Vec2<T>::Zero();
    T conic_xx = T(0), conic_xy = T(0), conic_yy = T(0); // full-matrix entries
    Vec3<T> color = Vec3<T>::Zero();
    T alpha_base = T(0);
    T depth = T(0);

    ScreenGrad& operator+=(const ScreenGrad& o) {
        mean2d += o.mean2d;
        conic_xx += o.conic_xx;
        conic_xy += o.conic_xy;
        conic_yy += o.conic_yy;
        color += o.color;
        alpha_base += o.alpha_base;
        depth += o.depth;
        return *this;
    }
};

template <typename T>
struct PixelContributor {
    std::uint32_t entry;
    std::uint32_t projected;
    T alpha;
    T falloff;
    bool clamped;
    T t_before;
    Vec2<T> delta;
};

// dR/dq for the normalized quaternion (w, x, y, z): returns dL/dq given dL/dR.
template <typename T>
Vec4<T> rotation_backward(const Vec4<T>& q, const Mat3<T>& g) {
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    Vec4<T> d;
    d[0] = T(2) * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) +
                   x * g(2, 1));
    d[1] = T(2) * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) +
                   w * g(2, 1)) -
           T(4) * x * (g(1, 1) + g(2, 2));
    d[2] = T(2) * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) +
                   z * g(2, 1)) -
           T(4) * y * (g(0, 0) + g(2, 2));
    d[3] = T(2) * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) +
                   y * g(2, 1)) -
           T(4) * z * (g(0, 0) + g(1, 1));
    return d;
}

} // namespace

template <typename T>
BackwardResult<T> render_backward(const GaussianCloud<T>& cloud, const CameraView& view,
                                  const RenderOutput<T>& fwd,
                                  const RenderGradients<T>& upstream) {
    if (!fwd.has_intermediates)
        throw Error(ErrorCode::MissingIntermediates,
                    "render_backward needs a forward pass with stored intermediates");
    const int w = view.width, h = view.height;
    if (fwd.color.width() != w || fwd.color.height() != h)
        throw Error(ErrorCode::ShapeMismatch, "forward output does not match the view");
    auto check_shape = [&](const Image<T>* img, int channels, const char* what) {
        if (img && (img->width() != w || img->height() != h || img->channels() != channels))
            throw Error(ErrorCode::ShapeMismatch,
                        std::string("upstream gradient '") + what + "' has the wrong shape");
    };
    check_shape(upstream.color, 3, "color");
    check_shape(upstream.depth, 1, "depth");
    check_shape(upstream.depth_raw, 1, "depth_raw");
    check_shape(upstream.accum_alpha, 1, "accum_alpha");

    const int ts = fwd.settings.tile_size;
    const std::size_t tile_count = static_cast<std::size_t>(fwd.tiles_x) * fwd.tiles_y;
    std::vector<ScreenGrad<T>> entry_grads(fwd.tile_entries.size());

    parallel_for(tile_count, fwd.settings.threads, [&](std::size_t tile) {
        const int tx = static_cast<int>(tile % fwd.tiles_x);
        const int ty = static_cast<int>(tile / fwd.tiles_x);
        const std::uint32_t begin = fwd.tile_offsets[tile];
        std::vector<PixelContributor<T>> list;
        for (int y = ty * ts; y < std::min(h, (ty + 1) * ts); ++y) {
            for (int x = tx * ts; x < std::min(w, (tx + 1) * ts); ++x) {
                const std::size_t pix = static_cast<std::size_t>(y) * w + x;
                Vec3<T> g_color = Vec3<T>::Zero();
                if (upstream.color)
                    for (int c = 0; c < 3; ++c)
                        g_color[c] = upstream.color->at(x, y, c);
                T g_depth = upstream.depth_raw ? upstream.depth_raw->at(x, y) : T(0);
                T g_accum = upstream.accum_alpha ? upstream.accum_alpha->at(x, y) : T(0);
                const T accum = fwd.accum_alpha.at(x, y);
                if (upstream.depth && accum > T(0)) {
                    const T g = upstream.depth->at(x, y);
                    g_depth += g / accum;
                    g_accum -= g * fwd.depth_raw.at(x, y) / (accum * accum);
                }
                if (g_color.isZero() && g_depth == T(0) && g_accum == T(0))
                    continue;

                list.clear();
                const std::uint32_t end = fwd.last_entry[pix];
                const std::span<const std::uint32_t> entries(fwd.tile_entries.data() + begin,
                                                             end - begin);
                // Replaying without early stop over the recorded range yields exactly
                // the contributors of the forward pass.
                walk_pixel<T>(fwd.projected, entries, begin, x, y, false,
                              [&](std::uint32_t e, std::uint32_t pi, T alpha, T falloff,
                                  bool clamped, T t_before, const Vec2<T>& d) {
                                  list.push_back({e, pi, alpha, falloff, clamped, t_before, d});
                              });

                Vec3<T> suffix_color = Vec3<T>::Zero();
                T suffix_depth = T(0), suffix_accum = T(0);
                for (auto it = list.rbegin(); it != list.rend(); ++it) {
                    const auto& g = fwd.projected[it->projected];
                    auto& acc = entry_grads[it->entry];
                    const T weight = it->alpha * it->t_before;
                    const T inv_one_minus = T(1) / (T(1) - it->alpha);
                    acc.color += weight * g_color;
                    acc.depth += weight * g_depth;
                    const T d_alpha =
                        g_color.dot(it->t_before * g.color - suffix_color * inv_one_minus) +
                        g_depth * (it->t_before * g.depth - suffix_depth * inv_one_minus) +
                        g_accum * (it->t_before - suffix_accum * inv_one_minus);
                    suffix_color += weight * g.color;
                    suffix_depth += weight * g.depth;
                    suffix_accum += weight;
                    if (it->clamped)
                        continue;
                    acc.alpha_base += d_alpha * it->falloff;
                    const T s = d_alpha * it->alpha;
                    acc.mean2d += s * (g.conic * it->delta);
                    acc.conic_xx += T(-0.5) * s * it->delta.x() * it->delta.x();
                    acc.conic_xy += T(-0.5) * s * it->delta.x() * it->delta.y();
                    acc.conic_yy += T(-0.5) * s * it->delta.y() * it->delta.y();
                }
            }
        }
    });

    // Fixed tile order keeps the reduction bit-stable for any worker count.
    std::vector<ScreenGrad<T>> proj_grads(fwd.projected.size());
    for (std::size_t e = 0; e < fwd.tile_entries.size(); ++e)
        proj_grads[fwd.tile_entries[e]] += entry_grads[e];

    BackwardResult<T> result;
    result.grads = cloud.zeros_like();
    result.viewspace_grad_norm.assign(cloud.size(), T(0));
    result.visible.assign(cloud.size(), 0);

    const CameraT<T> cam(view);
    const int degree = cloud.sh_degree;
    const int k = cloud.coeffs();

    parallel_for(fwd.projected.size(), fwd.settings.threads, [&](std::size_t pi) {
        const auto& g = fwd.projected[pi];
        const auto& sg = proj_grads[pi];
        const std::size_t i = g.index;
        auto& out = result.grads;
        result.visible[i] = 1;
        const T half_w = T(0.5) * T(w), half_h = T(0.5) * T(h);
        result.viewspace_grad_norm[i] =
            std::sqrt(sg.mean2d.x() * half_w * sg.mean2d.x() * half_w +
                      sg.mean2d.y() * half_h * sg.mean2d.y() * half_h);

        // Opacity.
        const T opacity = g.alpha_base;
        out.opacity_logits[i] = sg.alpha_base * opacity * (T(1) - opacity);

        const Vec3<T> mu = cloud.mean(i);
        Vec3<T> d_mu = Vec3<T>::Zero();

        // Color through SH and the view direction.
        Vec3<T> d_color = sg.color;
        for (int c = 0; c < 3; ++c)
            if (g.color_raw[c] < T(0))
                d_color[c] = T(0);
        const Vec3<T> v = mu - cam.center;
        const T v_norm = v.norm();
        const Vec3<T> dir = v / v_norm;
        std::array<T, 16> basis{};
        std::array<Vec3<T>, 16> basis_jac{};
        sh_basis<T>(degree, dir, basis);
        sh_basis_jacobian<T>(degree, dir, basis_jac);
        auto d_sh = out.sh_of(i);
        const auto coeffs = cloud.sh_of(i);
        Vec3<T> d_dir = Vec3<T>::Zero();
        for (int b = 0; b < k; ++b) {
            T dot = T(0);
            for (int c = 0; c < 3; ++c) {
                d_sh[3 * b + c] = d_color[c] * basis[b];
                dot += d_color[c] * coeffs[3 * b + c];
            }
            d_dir += dot * basis_jac[b];
        }
        d_mu += (d_dir - dir * dir.dot(d_dir)) / v_norm;

        // Screen-space covariance.
        Mat2<T> g_conic;
        g_conic << sg.conic_xx, sg.conic_xy, sg.conic_xy, sg.conic_yy;
        const Mat2<T> g_cov2d = -g.conic * g_conic * g.conic;

        const Vec3<T> t = cam.rotation * mu + cam.translation;
        const Mat23<T> jac = perspective_jacobian(cam, t);
        const Mat23<T> tm = jac * cam.rotation;
        const Vec3<T> scale = cloud.log_scale(i).array().exp().matrix();
        const Vec4<T> q_raw = cloud.rotation(i);
        const T q_norm = q_raw.norm();
        const Vec4<T> q = q_raw / q_norm;
        const Mat3<T> rot = quaternion_to_rotation<T>(q);
        const Mat3<T> m = rot * scale.asDiagonal();
        const Mat3<T> sigma = m * m.transpose();

        const Mat3<T> g_sigma = tm.transpose() * g_cov2d * tm;
        const Mat23<T> g_tm = T(2) * g_cov2d * tm * sigma;
        const Mat23<T> g_jac = g_tm * cam.rotation.transpose();

        const T iz = T(1) / t.z();
        const T iz2 = iz * iz;
        const T iz3 = iz2 * iz;
        Vec3<T> d_t = Vec3<T>::Zero();
        d_t.x() += g_jac(0, 2) * (-cam.fx * iz2);
        d_t.y() += g_jac(1, 2) * (-cam.fy * iz2);
        d_t.z() += g_jac(0, 0) * (-cam.fx * iz2) + g_jac(0, 2) * (T(2) * cam.fx * t.x() * iz3) +
                   g_jac(1, 1) * (-cam.fy * iz2) + g_jac(1, 2) * (T(2) * cam.fy * t.y() * iz3);
        d_t.x() += sg.mean2d.x() * cam.fx * iz;
        d_t.y() += sg.mean2d.y() * cam.fy * iz;
        d_t.z() += -sg.mean2d.x() * cam.fx * t.x() * iz2 - sg.mean2d.y() * cam.fy * t.y() * iz2;
        d_t.z() += sg.depth;
        d_mu += cam.rotation.transpose() * d_t;

        for (int a = 0; a < 3; ++a)
            out.means[3 * i + a] = d_mu[a];

        // Sigma = M M^T, M = R diag(s).
        const Mat3<T> g_m = T(2) * g_sigma * m;
        Mat3<T> g_rot;
        Vec3<T> g_scale;
        for (int c = 0; c < 3; ++c) {
            g_scale[c] = g_m.col(c).dot(rot.col(c));
            g_rot.col(c) = g_m.col(c) * scale[c];
        }
        for (int a = 0; a < 3; ++a)
            out.log_scales[3 * i + a] = g_scale[a] * scale[a];

        const Vec4<T> g_q = rotation_backward<T>(q, g_rot);
        const Vec4<T> g_q_raw = (g_q - q * q.dot(g_q)) / q_norm;
        for (int a = 0; a < 4; ++a)
            out.rotations[4 * i + a] = g_q_raw[a];
    });

    return result;
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template std::vector<ProjectedGaussian<T>> project<T>(const GaussianCloud<T>&,              \
                                                          const CameraView&);                   \
    template BlendResult<T> blend_pixel<T>(std::span<const BlendContributor<T>>, bool);         \
    template RenderOutput<T> render<T>(const GaussianCloud<T>&, const CameraView&,              \
                                       const RenderSettings&);                                  \
    template BackwardResult<T> render_backward<T>(const GaussianCloud<T>&, const CameraView&,   \
                                                  const RenderOutput<T>&,                       \
                                                  const RenderGradients<T>&);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

} // namespace ssplat
