#include "sparsesplat/scene.hpp"

#include <Eigen/Cholesky>

#include <cmath>
#include <numbers>

namespace ssplat {

template <typename T>
GaussianPrimitive<T> GaussianCloud<T>::primitive(std::size_t i) const {
    GaussianPrimitive<T> p;
    p.position = mean(i);
    p.rotation = rotation(i);
    p.log_scale = log_scale(i);
    p.opacity_logit = opacity_logits[i];
    auto coeffs = sh_of(i);
    p.sh.assign(coeffs.begin(), coeffs.end());
    return p;
}

template <typename T>
void GaussianCloud<T>::set_primitive(std::size_t i, const GaussianPrimitive<T>& p) {
    if (p.sh.size() != static_cast<std::size_t>(coeffs() * 3))
        throw Error(ErrorCode::ShapeMismatch, "primitive SH size does not match cloud degree");
    for (int a = 0; a < 3; ++a) {
        means[3 * i + a] = p.position[a];
        log_scales[3 * i + a] = p.log_scale[a];
    }
    for (int a = 0; a < 4; ++a)
        rotations[4 * i + a] = p.rotation[a];
    opacity_logits[i] = p.opacity_logit;
    std::copy(p.sh.begin(), p.sh.end(), sh_of(i).begin());
}

template <typename T>
void GaussianCloud<T>::push_back(const GaussianPrimitive<T>& p) {
    resize(size() + 1);
    set_primitive(size() - 1, p);
}

void CameraView::validate() const {
    const double det = rotation.determinant();
    const double ortho = (rotation * rotation.transpose() - Mat3<double>::Identity()).norm();
    if (std::abs(det - 1.0) > 1e-6 || ortho > 1e-6)
        throw Error(ErrorCode::InvalidArgument,
                    "view '" + id + "': extrinsic rotation is not orthonormal with det +1");
    if (!(time >= 0.0 && time <= 1.0))
        throw Error(ErrorCode::InvalidArgument, "view '" + id + "': time outside [0, 1]");
    if (width <= 0 || height <= 0)
        throw Error(ErrorCode::InvalidArgument, "view '" + id + "': empty resolution");
    auto check = [&](const std::optional<ImageF>& img, int channels, const char* what) {
        if (!img)
            return;
        if (img->width() != width || img->height() != height || img->channels() != channels)
            throw Error(ErrorCode::ResolutionMismatch,
                        "view '" + id + "': " + what + " does not match the view resolution");
    };
    check(gt_image, 3, "image");
    check(gt_depth, 1, "depth");
    check(mask, 1, "mask");
    if (mask) {
        for (float v : mask->data())
            if (v != 0.0f && v != 1.0f)
                throw Error(ErrorCode::InvalidArgument, "view '" + id + "': mask is not binary");
    }
}

CameraView CameraView::look_at(const Vec3<double>& eye, const Vec3<double>& target,
                               const Vec3<double>& world_up, const Intrinsics& k,
                               int width, int height, double time) {
    const Vec3<double> forward = (target - eye).normalized();
    Vec3<double> right = forward.cross(world_up);
    if (right.norm() < 1e-12)
        throw Error(ErrorCode::InvalidArgument, "look_at: up vector parallel to view direction");
    right.normalize();
    const Vec3<double> down = forward.cross(right);

    CameraView view;
    view.intrinsics = k;
    view.rotation.row(0) = right.transpose();
    view.rotation.row(1) = down.transpose();
    view.rotation.row(2) = forward.transpose();
    view.translation = -view.rotation * eye;
    view.width = width;
    view.height = height;
    view.time = time;
    return view;
}

template <typename T>
Mat3<T> quaternion_to_rotation(const Vec4<T>& q_raw) {
    const T norm = q_raw.norm();
    if (!(norm > T(0)))
        throw Error(ErrorCode::DegenerateRotation, "quaternion has zero norm");
    const Vec4<T> q = q_raw / norm;
    const T w = q[0], x = q[1], y = q[2], z = q[3];
    Mat3<T> r;
    r << T(1) - T(2) * (y * y + z * z), T(2) * (x * y - w * z), T(2) * (x * z + w * y),
        T(2) * (x * y + w * z), T(1) - T(2) * (x * x + z * z), T(2) * (y * z - w * x),
        T(2) * (x * z - w * y), T(2) * (y * z + w * x), T(1) - T(2) * (x * x + y * y);
    return r;
}

template <typename T>
Mat3<T> build_covariance(const Vec3<T>& scale, const Vec4<T>& rotation) {
    const Mat3<T> m = quaternion_to_rotation(rotation) * scale.asDiagonal();
    // Filled from one triangle so the result is symmetric bit for bit.
    Mat3<T> sigma;
    for (int i = 0; i < 3; ++i)
        for (int j = i; j < 3; ++j)
            sigma(i, j) = sigma(j, i) = m.row(i).dot(m.row(j));
    return sigma;
}

double gaussian_density(const Vec3<double>& x, const Vec3<double>& mean,
                        const Mat3<double>& covariance) {
    Eigen::LLT<Mat3<double>> llt(covariance);
    if (llt.info() != Eigen::Success) {
        const double eps = 1e-8 * covariance.trace() / 3.0;
        llt.compute(covariance + eps * Mat3<double>::Identity());
        if (llt.info() != Eigen::Success)
            throw Error(ErrorCode::NumericalDegeneracy, "covariance is singular after regularization");
    }
    const Mat3<double> l = llt.matrixL();
    const Vec3<double> whitened = llt.matrixL().solve(x - mean);
    const double sqrt_det = l(0, 0) * l(1, 1) * l(2, 2);
    const double norm = std::pow(2.0 * std::numbers::pi, 1.5) * sqrt_det;
    return std::exp(-0.5 * whitened.squaredNorm()) / norm;
}

namespace {
constexpr double kC1 = 0.4886025119029199;
constexpr double kC2[] = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                          -1.0925484305920792, 0.5462742152960396};
constexpr double kC3[] = {-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
                          0.3731763325901154, -0.4570457994644658, 1.445305721320277,
                          -0.5900435899266435};
} // namespace

template <typename T>
void sh_basis(int degree, const Vec3<T>& dir, std::span<T> out) {
    const T x = dir[0], y = dir[1], z = dir[2];
    out[0] = T(kShC0);
    if (degree < 1)
        return;
    out[1] = -T(kC1) * y;
    out[2] = T(kC1) * z;
    out[3] = -T(kC1) * x;
    if (degree < 2)
        return;
    const T xx = x * x, yy = y * y, zz = z * z;
    out[4] = T(kC2[0]) * x * y;
    out[5] = T(kC2[1]) * y * z;
    out[6] = T(kC2[2]) * (T(2) * zz - xx - yy);
    out[7] = T(kC2[3]) * x * z;
    out[8] = T(kC2[4]) * (xx - yy);
    if (degree < 3)
        return;
    out[9] = T(kC3[0]) * y * (T(3) * xx - yy);
    out[10] = T(kC3[1]) * x * y * z;
    out[11] = T(kC3[2]) * y * (T(4) * zz - xx - yy);
    out[12] = T(kC3[3]) * z * (T(2) * zz - T(3) * xx - T(3) * yy);
    out[13] = T(kC3[4]) * x * (T(4) * zz - xx - yy);
    out[14] = T(kC3[5]) * z * (xx - yy);
    out[15] = T(kC3[6]) * x * (xx - T(3) * yy);
}

template <typename T>
void sh_basis_jacobian(int degree, const Vec3<T>& dir, std::span<Vec3<T>> out) {
    const T x = dir[0], y = dir[1], z = dir[2];
    out[0] = Vec3<T>::Zero();
    if (degree < 1)
        return;
    const T c1 = T(kC1);
    out[1] = {T(0), -c1, T(0)};
    out[2] = {T(0), T(0), c1};
    out[3] = {-c1, T(0), T(0)};
    if (degree < 2)
        return;
    const T xx = x * x, yy = y * y, zz = z * z;
    out[4] = T(kC2[0]) * Vec3<T>(y, x, T(0));
    out[5] = T(kC2[1]) * Vec3<T>(T(0), z, y);
    out[6] = T(kC2[2]) * Vec3<T>(-T(2) * x, -T(2) * y, T(4) * z);
    out[7] = T(kC2[3]) * Vec3<T>(z, T(0), x);
    out[8] = T(kC2[4]) * Vec3<T>(T(2) * x, -T(2) * y, T(0));
    if (degree < 3)
        return;
    out[9] = T(kC3[0]) * Vec3<T>(T(6) * x * y, T(3) * xx - T(3) * yy, T(0));
    out[10] = T(kC3[1]) * Vec3<T>(y * z, x * z, x * y);
    out[11] = T(kC3[2]) * Vec3<T>(-T(2) * x * y, T(4) * zz - xx - T(3) * yy, T(8) * y * z);
    out[12] = T(kC3[3]) * Vec3<T>(-T(6) * x * z, -T(6) * y * z, T(6) * zz - T(3) * xx - T(3) * yy);
    out[13] = T(kC3[4]) * Vec3<T>(T(4) * zz - T(3) * xx - yy, -T(2) * x * y, T(8) * x * z);
    out[14] = T(kC3[5]) * Vec3<T>(T(2) * x * z, -T(2) * y * z, xx - yy);
    out[15] = T(kC3[6]) * Vec3<T>(T(3) * xx - T(3) * yy, -T(6) * x * y, T(0));
}

template <typename T>
Vec3<T> eval_sh_unclamped(int degree, std::span<const T> coeffs, const Vec3<T>& dir) {
    const int k = sh_coeff_count(degree);
    if (degree < 0 || degree > kMaxShDegree || coeffs.size() != static_cast<std::size_t>(k * 3))
        throw Error(ErrorCode::ShapeMismatch, "SH coefficient count does not match degree " +
                                                  std::to_string(degree));
    std::array<T, 16> basis{};
    sh_basis<T>(degree, dir, basis);
    Vec3<T> color = Vec3<T>::Constant(T(kColorOffset));
    for (int i = 0; i < k; ++i)
        for (int c = 0; c < 3; ++c)
            color[c] += basis[i] * coeffs[3 * i + c];
    return color;
}

template <typename T>
Vec3<T> eval_sh_color(int degree, std::span<const T> coeffs, const Vec3<T>& dir) {
    return eval_sh_unclamped(degree, coeffs, dir).cwiseMax(T(0));
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template struct GaussianCloud<T>;                                                           \
    template Mat3<T> quaternion_to_rotation<T>(const Vec4<T>&);                                 \
    template Mat3<T> build_covariance<T>(const Vec3<T>&, const Vec4<T>&);                       \
    template void sh_basis<T>(int, const Vec3<T>&, std::span<T>);                               \
    template void sh_basis_jacobian<T>(int, const Vec3<T>&, std::span<Vec3<T>>);                \
    template Vec3<T> eval_sh_unclamped<T>(int, std::span<const T>, const Vec3<T>&);             \
    template Vec3<T> eval_sh_color<T>(int, std::span<const T>, const Vec3<T>&);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

} // namespace ssplat
