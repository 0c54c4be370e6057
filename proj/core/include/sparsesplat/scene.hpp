#pragma once

#include "sparsesplat/common.hpp"
#include "sparsesplat/image.hpp"

#include <array>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssplat {

inline constexpr int kMaxShDegree = 3;
inline constexpr int kDefaultShDegree = 2;
inline constexpr double kShC0 = 0.28209479177387814;
inline constexpr double kColorOffset = 0.5;

constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

/// One Gaussian in "stored" parameterization: log-scale and opacity logit are
/// activated at use sites; the quaternion is (w, x, y, z) and is normalized
/// before any covariance construction.
template <typename T>
struct GaussianPrimitive {
    Vec3<T> position = Vec3<T>::Zero();
    Vec4<T> rotation = Vec4<T>(T(1), T(0), T(0), T(0));
    Vec3<T> log_scale = Vec3<T>::Zero();
    T opacity_logit = T(0);
    std::vector<T> sh; // k x 3, coefficient-major

    Vec3<T> scale() const { return log_scale.array().exp().matrix(); }
    T opacity() const { return sigmoid(opacity_logit); }
};

/// The explicit scene, stored as one flat array per attribute so optimizer
/// state, gradients and checkpoints can address each parameter group.
template <typename T>
struct GaussianCloud {
    int sh_degree = kDefaultShDegree;
    std::vector<T> means;          // 3n
    std::vector<T> rotations;      // 4n
    std::vector<T> log_scales;     // 3n
    std::vector<T> opacity_logits; // n
    std::vector<T> sh;             // n * k * 3

    GaussianCloud() = default;
    explicit GaussianCloud(int degree, std::size_t n = 0) : sh_degree(degree) {
        if (degree < 0 || degree > kMaxShDegree)
            throw Error(ErrorCode::InvalidArgument,
                        "sh degree must be in [0, 3], got " + std::to_string(degree));
        resize(n);
    }

    std::size_t size() const noexcept { return opacity_logits.size(); }
    bool empty() const noexcept { return opacity_logits.empty(); }
    int coeffs() const noexcept { return sh_coeff_count(sh_degree); }

    void resize(std::size_t n) {
        means.resize(3 * n, T(0));
        rotations.resize(4 * n, T(0));
        log_scales.resize(3 * n, T(0));
        opacity_logits.resize(n, T(0));
        sh.resize(n * coeffs() * 3, T(0));
    }

    /// Same shape, every value zero; used as a gradient accumulator.
    GaussianCloud zeros_like() const {
        GaussianCloud out(sh_degree, 0);
        out.resize(size());
        return out;
    }

    Vec3<T> mean(std::size_t i) const { return {means[3 * i], means[3 * i + 1], means[3 * i + 2]}; }
    Vec4<T> rotation(std::size_t i) const {
        return {rotations[4 * i], rotations[4 * i + 1], rotations[4 * i + 2], rotations[4 * i + 3]};
    }
    Vec3<T> log_scale(std::size_t i) const {
        return {log_scales[3 * i], log_scales[3 * i + 1], log_scales[3 * i + 2]};
    }
    std::span<T> sh_of(std::size_t i) {
        return std::span<T>(sh).subspan(i * coeffs() * 3, coeffs() * 3);
    }
    std::span<const T> sh_of(std::size_t i) const {
        return std::span<const T>(sh).subspan(i * coeffs() * 3, coeffs() * 3);
    }

    GaussianPrimitive<T> primitive(std::size_t i) const;
    void set_primitive(std::size_t i, const GaussianPrimitive<T>& p);
    void push_back(const GaussianPrimitive<T>& p);

    /// Visits (name, values) for each parameter group in a fixed order.
    template <typename F>
    void for_each_group(F&& f) {
        f("means", means);
        f("rotations", rotations);
        f("log_scales", log_scales);
        f("opacity_logits", opacity_logits);
        f("sh", sh);
    }
    template <typename F>
    void for_each_group(F&& f) const {
        f("means", means);
        f("rotations", rotations);
        f("log_scales", log_scales);
        f("opacity_logits", opacity_logits);
        f("sh", sh);
    }

    template <typename U>
    GaussianCloud<U> cast() const {
        GaussianCloud<U> out(sh_degree, 0);
        auto conv = [](const std::vector<T>& v) { return std::vector<U>(v.begin(), v.end()); };
        out.means = conv(means);
        out.rotations = conv(rotations);
        out.log_scales = conv(log_scales);
        out.opacity_logits = conv(opacity_logits);
        out.sh = conv(sh);
        return out;
    }

    bool operator==(const GaussianCloud& other) const = default;
};

struct Intrinsics {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
};

/// Pinhole camera with world-to-camera extrinsics (right-handed, +z forward,
/// +y down in the image) plus the optional supervision attached to a view.
struct CameraView {
    std::string id;
    Intrinsics intrinsics;
    Mat3<double> rotation = Mat3<double>::Identity(); // world -> camera
    Vec3<double> translation = Vec3<double>::Zero();
    int width = 0;
    int height = 0;
    double time = 0.0;
    std::optional<ImageF> gt_image; // H x W x 3
    std::optional<ImageF> gt_depth; // H x W x 1
    std::optional<ImageF> mask;     // H x W x 1, 1 = tool pixel

    Vec3<double> center() const { return -rotation.transpose() * translation; }

    /// Throws InvalidArgument when the rotation is not a proper orthonormal
    /// matrix, time lies outside [0, 1], or attached maps disagree with the
    /// declared resolution.
    void validate() const;

    static CameraView look_at(const Vec3<double>& eye, const Vec3<double>& target,
                              const Vec3<double>& world_up, const Intrinsics& k,
                              int width, int height, double time = 0.0);
};

template <typename T>
Mat3<T> quaternion_to_rotation(const Vec4<T>& q);

/// Sigma = R diag(s)^2 R^T with R from the normalized quaternion.
template <typename T>
Mat3<T> build_covariance(const Vec3<T>& scale, const Vec4<T>& rotation);

/// Normalized trivariate Gaussian density. A covariance that fails Cholesky
/// is retried once with 1e-8 * trace / 3 added to the diagonal.
double gaussian_density(const Vec3<double>& x, const Vec3<double>& mean,
                        const Mat3<double>& covariance);

/// Real SH basis (Condon-Shortley phase, degree <= 3) evaluated at a unit
/// direction. `out` receives (degree + 1)^2 values.
template <typename T>
void sh_basis(int degree, const Vec3<T>& dir, std::span<T> out);

/// Jacobian of sh_basis with respect to the (unit) direction components.
template <typename T>
void sh_basis_jacobian(int degree, const Vec3<T>& dir, std::span<Vec3<T>> out);

/// Coefficient-weighted SH sum plus the 0.5 offset, before clamping.
template <typename T>
Vec3<T> eval_sh_unclamped(int degree, std::span<const T> coeffs, const Vec3<T>& dir);

/// Coefficient-weighted SH sum plus the 0.5 offset, clamped at zero.
/// `coeffs` must hold (degree + 1)^2 * 3 values.
template <typename T>
Vec3<T> eval_sh_color(int degree, std::span<const T> coeffs, const Vec3<T>& dir);

} // namespace ssplat
