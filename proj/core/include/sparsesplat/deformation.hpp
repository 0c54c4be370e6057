#pragma once

#include "sparsesplat/common.hpp"
#include "sparsesplat/scene.hpp"

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace ssplat {

/// Feature planes of the space-time encoding. Spatial planes pair with the
/// space-time plane over the complementary axes: XY*ZT + XZ*YT + YZ*XT.
enum class Plane : int { XY = 0, XZ = 1, YZ = 2, XT = 3, YT = 4, ZT = 5 };
inline constexpr int kPlaneCount = 6;

struct EncodingConfig {
    std::vector<int> resolutions{32, 64};
    int features = 16;
    Vec3<double> bounds_min = Vec3<double>::Constant(-1.0);
    Vec3<double> bounds_max = Vec3<double>::Constant(1.0);
};

template <typename T>
struct EncodingField {
    std::vector<int> resolutions;
    int features = 0;
    Vec3<T> bounds_min = Vec3<T>::Constant(T(-1));
    Vec3<T> bounds_max = Vec3<T>::Constant(T(1));
    /// planes[level * 6 + plane], each res * res * features, laid out
    /// [second axis][first axis][feature].
    std::vector<std::vector<T>> planes;

    int levels() const noexcept { return static_cast<int>(resolutions.size()); }
    int output_width() const noexcept { return features * levels(); }
    std::vector<T>& plane(int level, Plane p) { return planes[level * kPlaneCount + static_cast<int>(p)]; }
    const std::vector<T>& plane(int level, Plane p) const {
        return planes[level * kPlaneCount + static_cast<int>(p)];
    }

    /// Spatial planes uniform in [0.1, 0.5], space-time planes at 1 so the
    /// initial encoding is time-independent.
    static EncodingField create(const EncodingConfig& config, std::mt19937_64& rng);
    /// Throws InvalidArgument on unordered bounds or mismatched plane sizes.
    void validate() const;

    bool operator==(const EncodingField&) const = default;
};

/// Per-query interpolation record kept for the backward pass.
template <typename T>
struct EncodingCache {
    struct PlaneSample {
        std::array<std::uint32_t, 4> corner{}; // element offsets of the 4 corner features
        std::array<T, 4> weight{};
        T frac_a = T(0), frac_b = T(0);
        T scale_a = T(0), scale_b = T(0); // d(grid coord)/d(input), 0 when clamped
        int axis_a = 0, axis_b = 0;       // 0..2 spatial, 3 = time
    };
    std::vector<PlaneSample> samples;   // levels * 6
    std::vector<T> plane_values;        // levels * 6 * features
};

template <typename T>
std::vector<T> encode(const EncodingField<T>& field, const Vec3<T>& position, T time,
                      EncodingCache<T>* cache = nullptr);

template <typename T>
struct DenseLayer {
    int inputs = 0;
    int outputs = 0;
    std::vector<T> weight; // outputs x inputs, row-major
    std::vector<T> bias;   // outputs

    bool operator==(const DenseLayer&) const = default;
};

struct HeadConfig {
    int hidden_width = 64;
    int hidden_layers = 2;
};

/// Compact decoder: ReLU hidden stack feeding three zero-initialized linear
/// heads for position (3), rotation (4) and log-scale (3) offsets.
template <typename T>
struct DeformationHead {
    std::vector<DenseLayer<T>> hidden;
    DenseLayer<T> position_head;
    DenseLayer<T> rotation_head;
    DenseLayer<T> scale_head;

    int input_width() const {
        return hidden.empty() ? position_head.inputs : hidden.front().inputs;
    }

    static DeformationHead create(int input_width, const HeadConfig& config, std::mt19937_64& rng);

    bool operator==(const DeformationHead&) const = default;
};

template <typename T>
struct DeformationDelta {
    Vec3<T> position = Vec3<T>::Zero();
    Vec4<T> rotation = Vec4<T>::Zero();
    Vec3<T> log_scale = Vec3<T>::Zero();
};

template <typename T>
struct HeadCache {
    std::vector<std::vector<T>> activations; // input, then each hidden output (post-ReLU)
};

template <typename T>
DeformationDelta<T> deform(const DeformationHead<T>& head, std::span<const T> latent,
                           HeadCache<T>* cache = nullptr);

/// The full deformation field: encoding followed by the decoder.
template <typename T>
struct DeformationModel {
    EncodingField<T> field;
    DeformationHead<T> head;

    static DeformationModel create(const EncodingConfig& enc, const HeadConfig& head,
                                   std::uint64_t seed);

    DeformationModel zeros_like() const;

    /// Visits (name, values) for each parameter group in a fixed order.
    template <typename F>
    void for_each_group(F&& f) {
        visit_groups(*this, f);
    }
    template <typename F>
    void for_each_group(F&& f) const {
        visit_groups(*this, f);
    }

    template <typename U>
    DeformationModel<U> cast() const;

    bool operator==(const DeformationModel&) const = default;

private:
    template <typename Self, typename F>
    static void visit_groups(Self& self, F& f) {
        for (int l = 0; l < self.field.levels(); ++l)
            for (int p = 0; p < kPlaneCount; ++p)
                f("field/l" + std::to_string(l) + "/p" + std::to_string(p),
                  self.field.planes[l * kPlaneCount + p]);
        for (std::size_t i = 0; i < self.head.hidden.size(); ++i) {
            f("head/hidden" + std::to_string(i) + "/weight", self.head.hidden[i].weight);
            f("head/hidden" + std::to_string(i) + "/bias", self.head.hidden[i].bias);
        }
        f(std::string("head/position/weight"), self.head.position_head.weight);
        f(std::string("head/position/bias"), self.head.position_head.bias);
        f(std::string("head/rotation/weight"), self.head.rotation_head.weight);
        f(std::string("head/rotation/bias"), self.head.rotation_head.bias);
        f(std::string("head/scale/weight"), self.head.scale_head.weight);
        f(std::string("head/scale/bias"), self.head.scale_head.bias);
    }
};

template <typename T>
struct DeformationCache {
    T time = T(0);
    std::vector<EncodingCache<T>> encodings;
    std::vector<HeadCache<T>> heads;
};

/// Deformed copy of `canonical` at `time`: position and log-scale offsets are
/// added, the rotation offset is added to the raw quaternion (covariance
/// construction normalizes it). Opacity and SH are copied untouched.
template <typename T>
GaussianCloud<T> apply_deformation(const GaussianCloud<T>& canonical,
                                   const DeformationModel<T>& model, T time,
                                   DeformationCache<T>* cache = nullptr, int threads = 1);

/// Pulls gradients of the deformed cloud back to the canonical cloud (added
/// into `canonical_grads`) and to the deformation parameters (added into
/// `model_grads`).
template <typename T>
void deformation_backward(const GaussianCloud<T>& canonical, const DeformationModel<T>& model,
                          const DeformationCache<T>& cache, const GaussianCloud<T>& deformed_grads,
                          GaussianCloud<T>& canonical_grads, DeformationModel<T>& model_grads);

} // namespace ssplat
