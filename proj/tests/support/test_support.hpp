#pragma once

// Independent reference implementations used as oracles by the unit and
// acceptance suites. Nothing here calls into the rasterizer or the SH code
// of the library, so agreement between the two is meaningful.

#include "sparsesplat/deformation.hpp"
#include "sparsesplat/rasterizer.hpp"
#include "sparsesplat/scene.hpp"

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace ssplat::testkit {

// Camera at the origin looking down +z, image y down.
inline CameraView axis_camera(int width, int height, double focal) {
    CameraView v;
    v.id = "axis";
    v.width = width;
    v.height = height;
    v.intrinsics = {focal, focal, width / 2.0, height / 2.0};
    return v;
}

// Random Gaussians in front of axis_camera, spread over the frustum.
inline GaussianCloud<double> random_cloud(std::mt19937_64& rng, int n, int sh_degree = 2,
                                          double depth_lo = 2.0, double depth_hi = 4.0) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::uniform_real_distribution<double> zd(depth_lo, depth_hi);
    GaussianCloud<double> c(sh_degree, 0);
    for (int i = 0; i < n; ++i) {
        GaussianPrimitive<double> p;
        const double z = zd(rng);
        p.position = {0.35 * z * u(rng), 0.35 * z * u(rng), z};
        p.rotation = Vec4<double>(u(rng), u(rng), u(rng), u(rng));
        if (p.rotation.norm() < 0.2)
            p.rotation(0) += 1.0;
        p.log_scale = {std::log(0.12 + 0.1 * (u(rng) + 1.0)), std::log(0.12 + 0.1 * (u(rng) + 1.0)),
                       std::log(0.12 + 0.1 * (u(rng) + 1.0))};
        p.opacity_logit = 1.5 * u(rng);
        p.sh.resize(sh_coeff_count(sh_degree) * 3);
        for (double& v : p.sh)
            v = 0.4 * u(rng);
        c.push_back(p);
    }
    return c;
}

// Real SH basis written out from the closed-form polynomials (degree <= 2).
inline std::vector<double> reference_sh_basis(int degree, const Vec3<double>& d) {
    const double x = d.x(), y = d.y(), z = d.z();
    std::vector<double> b{0.28209479177387814};
    if (degree >= 1) {
        const double k1 = std::sqrt(3.0 / (4.0 * M_PI));
        b.insert(b.end(), {-k1 * y, k1 * z, -k1 * x});
    }
    if (degree >= 2) {
        const double k2 = 0.5 * std::sqrt(15.0 / M_PI);
        const double k20 = 0.25 * std::sqrt(5.0 / M_PI);
        const double k22 = 0.25 * std::sqrt(15.0 / M_PI);
        b.insert(b.end(), {k2 * x * y, -k2 * y * z, k20 * (2 * z * z - x * x - y * y),
                           -k2 * x * z, k22 * (x * x - y * y)});
    }
    return b;
}

// Screen-space record of one primitive, computed from first principles.
struct ReferenceProjection {
    double depth;
    std::size_t index;
    double mx, my;
    double a, b, c; // inverse 2D covariance entries (xx, xy, yy)
    double opacity;
    Vec3<double> color;
    Vec3<double> color_raw;
};

inline std::vector<ReferenceProjection> reference_project(const GaussianCloud<double>& cloud,
                                                          const CameraView& view) {
    std::vector<ReferenceProjection> projs;
    const Mat3<double>& W = view.rotation;
    const double fx = view.intrinsics.fx, fy = view.intrinsics.fy;
    for (std::size_t i = 0; i < cloud.size(); ++i) {
        const Vec3<double> mu = cloud.mean(i);
        const Vec3<double> t = W * mu + view.translation;
        if (t.z() <= 0.01)
            continue;
        Vec4<double> q = cloud.rotation(i);
        q /= q.norm();
        const double w = q(0), x = q(1), y = q(2), z = q(3);
        Mat3<double> R;
        R << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
        const Vec3<double> s = cloud.log_scale(i).array().exp().matrix();
        const Mat3<double> M = R * s.asDiagonal();
        const Mat3<double> sigma = M * M.transpose();
        Eigen::Matrix<double, 2, 3> J;
        J << fx / t.z(), 0, -fx * t.x() / (t.z() * t.z()), 0, fy / t.z(), -fy * t.y() / (t.z() * t.z());
        Mat2<double> cov = J * W * sigma * W.transpose() * J.transpose();
        cov(0, 0) += 0.3;
        cov(1, 1) += 0.3;
        const double det = cov(0, 0) * cov(1, 1) - cov(0, 1) * cov(1, 0);
        if (det <= 0)
            continue;
        const Vec3<double> dir = (mu - view.center()).normalized();
        const auto basis = reference_sh_basis(cloud.sh_degree, dir);
        Vec3<double> col = Vec3<double>::Constant(0.5);
        const auto coeffs = cloud.sh_of(i);
        for (std::size_t k = 0; k < basis.size(); ++k)
            for (int ch = 0; ch < 3; ++ch)
                col(ch) += basis[k] * coeffs[k * 3 + ch];
        projs.push_back({t.z(), i, fx * t.x() / t.z() + view.intrinsics.cx,
                         fy * t.y() / t.z() + view.intrinsics.cy, cov(1, 1) / det, -cov(0, 1) / det,
                         cov(0, 0) / det, 1.0 / (1.0 + std::exp(-cloud.opacity_logits[i])),
                         col.cwiseMax(0.0), col});
    }
    std::sort(projs.begin(), projs.end(), [](const auto& l, const auto& r) {
        return l.depth != r.depth ? l.depth < r.depth : l.index < r.index;
    });
    return projs;
}

inline double reference_q(const ReferenceProjection& g, int px, int py) {
    const double dx = px + 0.5 - g.mx, dy = py + 0.5 - g.my;
    return g.a * dx * dx + 2 * g.b * dx * dy + g.c * dy * dy;
}

struct OracleImage {
    ImageD color, depth_raw, accum;
};

// Direct evaluation of the blend sums: every Gaussian is tested at every
// pixel, contributors sorted by camera depth, no tiles and no early stop.
inline OracleImage brute_force_render(const GaussianCloud<double>& cloud, const CameraView& view) {
    const auto projs = reference_project(cloud, view);
    OracleImage out{ImageD(view.width, view.height, 3), ImageD(view.width, view.height, 1),
                    ImageD(view.width, view.height, 1)};
    for (int py = 0; py < view.height; ++py)
        for (int px = 0; px < view.width; ++px) {
            double trans = 1.0;
            for (const auto& g : projs) {
                const double q = reference_q(g, px, py);
                if (q > 9.0)
                    continue;
                const double alpha = std::min(0.99, g.opacity * std::exp(-0.5 * q));
                for (int ch = 0; ch < 3; ++ch)
                    out.color.at(px, py, ch) += g.color(ch) * alpha * trans;
                out.depth_raw.at(px, py) += g.depth * alpha * trans;
                trans *= 1.0 - alpha;
            }
            out.accum.at(px, py) = 1.0 - trans;
        }
    return out;
}

// Discrete state the render is piecewise smooth in: which (pixel, primitive)
// pairs pass the footprint test, which alphas hit the clamp, which colors
// hit the zero clamp. Finite differences are only meaningful while this
// stays fixed.
inline std::vector<std::int64_t> contributor_state(const GaussianCloud<double>& cloud,
                                                   const CameraView& view) {
    std::vector<std::int64_t> out;
    for (const auto& g : reference_project(cloud, view)) {
        out.push_back(static_cast<std::int64_t>(g.index));
        for (int ch = 0; ch < 3; ++ch)
            out.push_back(g.color_raw(ch) < 0 ? 1 : 0);
        for (int py = 0; py < view.height; ++py)
            for (int px = 0; px < view.width; ++px) {
                const double q = reference_q(g, px, py);
                out.push_back(q > 9.0 ? 0 : (g.opacity * std::exp(-0.5 * q) > 0.99 ? 2 : 1));
            }
    }
    return out;
}

// Generic view: tilted camera somewhere in space, primitives sampled in its
// frustum and carried to world coordinates.
struct RandomScene {
    GaussianCloud<double> cloud;
    CameraView view;
};

inline RandomScene random_scene(std::mt19937_64& rng, int n, int width, int height, int sh_degree = 2) {
    std::normal_distribution<double> nd;
    RandomScene s;
    s.view = axis_camera(width, height, 1.0 * width);
    const Vec4<double> tilt(1.0, 0.15 * nd(rng), 0.15 * nd(rng), 0.15 * nd(rng));
    s.view.rotation = quaternion_to_rotation<double>(tilt);
    const Vec3<double> center(0.5 * nd(rng), 0.5 * nd(rng), 0.5 * nd(rng));
    s.view.translation = -s.view.rotation * center;
    s.cloud = random_cloud(rng, n, sh_degree);
    for (std::size_t i = 0; i < s.cloud.size(); ++i) {
        const Vec3<double> world = s.view.rotation.transpose() * s.cloud.mean(i) + center;
        for (int k = 0; k < 3; ++k)
            s.cloud.means[3 * i + k] = world(k);
    }
    return s;
}

// Textbook sample correlation over pixels where `valid` is nonzero.
inline double reference_pearson_plain(const ImageD& a, const ImageD& b, const ImageD& valid) {
    double n = 0, sa = 0, sb = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (valid[i] != 0.0) {
            n += 1;
            sa += a[i];
            sb += b[i];
        }
    const double ma = sa / n, mb = sb / n;
    double sab = 0, saa = 0, sbb = 0;
    for (std::size_t i = 0; i < a.size(); ++i)
        if (valid[i] != 0.0) {
            sab += (a[i] - ma) * (b[i] - mb);
            saa += (a[i] - ma) * (a[i] - ma);
            sbb += (b[i] - mb) * (b[i] - mb);
        }
    return sab / std::sqrt(saa * sbb);
}

// Central difference of f with respect to x[i].
inline double central_difference(std::vector<double>& x, std::size_t i, double h,
                                 const std::function<double()>& f) {
    const double keep = x[i];
    x[i] = keep + h;
    const double up = f();
    x[i] = keep - h;
    const double down = f();
    x[i] = keep;
    return (up - down) / (2 * h);
}

inline double relative_error(double analytic, double numeric, double floor = 1e-6) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

// What a call threw: the error code and message, or nothing when it returned.
struct Caught {
    std::optional<ErrorCode> code;
    std::string message;
    bool mentions(const std::string& text) const { return message.find(text) != std::string::npos; }
};

template <typename F>
Caught catch_error(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return {e.code(), e.what()};
    }
    return {};
}

template <typename F>
std::optional<ErrorCode> code_of(F&& f) {
    return catch_error(std::forward<F>(f)).code;
}

// True when every parameter group of `a` and `b` matches bit for bit.
template <typename Params>
bool groups_bit_equal(const Params& a, const Params& b) {
    std::vector<std::pair<std::string, const void*>> lhs;
    std::vector<std::size_t> sizes;
    a.for_each_group([&](const std::string& n, const auto& v) {
        lhs.emplace_back(n, v.data());
        sizes.push_back(v.size() * sizeof(v[0]));
    });
    std::size_t i = 0;
    bool same = true;
    b.for_each_group([&](const std::string& n, const auto& v) {
        if (i >= lhs.size() || lhs[i].first != n || sizes[i] != v.size() * sizeof(v[0]) ||
            std::memcmp(lhs[i].second, v.data(), sizes[i]) != 0)
            same = false;
        ++i;
    });
    return same && i == lhs.size();
}

// Scratch directory removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        std::random_device rd;
        path_ = std::filesystem::temp_directory_path() /
                ("ssplat-" + tag + "-" + std::to_string(rd()) + std::to_string(rd()));
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
    const std::filesystem::path& path() const { return path_; }
    std::filesystem::path operator/(const std::string& leaf) const { return path_ / leaf; }

private:
    std::filesystem::path path_;
};

} // namespace ssplat::testkit
