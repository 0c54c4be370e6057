#pragma once

#include "sparsesplat/common.hpp"
#include "sparsesplat/image.hpp"
#include "sparsesplat/scene.hpp"

#include <cstdint>
#include <vector>

namespace ssplat {

inline constexpr double kNearPlane = 0.01;
inline constexpr double kLowPass = 0.3;
inline constexpr double kMaxAlpha = 0.99;
inline constexpr double kMinTransmittance = 1e-4;
/// Squared Mahalanobis radius of the screen-space footprint (3 sigma).
inline constexpr double kFootprintQ = 9.0;

struct RenderSettings {
    int tile_size = 16;
    int threads = 1;
    bool early_stop = true;
};

/// A primitive after EWA projection, in front-to-back order.
template <typename T>
struct ProjectedGaussian {
    std::uint32_t index = 0; // primitive index in the cloud
    Vec2<T> mean2d;          // pixels
    Mat2<T> cov2d;           // pixels^2, low-pass included
    Mat2<T> conic;           // inverse of cov2d
    T depth = T(0);          // camera-space z
    Vec3<T> color;           // clamped SH color
    Vec3<T> color_raw;       // before clamping, for the backward mask
    T alpha_base = T(0);     // activated opacity
    int px_min = 0, px_max = -1, py_min = 0, py_max = -1; // pixel footprint
};

/// Project every primitive into the view, cull those at or behind the near
/// plane, and sort front-to-back (stable on primitive index).
template <typename T>
std::vector<ProjectedGaussian<T>> project(const GaussianCloud<T>& cloud, const CameraView& view);

template <typename T>
struct BlendContributor {
    Vec3<T> color;
    T alpha;
    T depth;
};

template <typename T>
struct BlendResult {
    Vec3<T> color = Vec3<T>::Zero();
    T depth = T(0); // raw, alpha-weighted
    T accum_alpha = T(0);
};

/// Front-to-back compositing of one pixel's ordered contributors.
template <typename T>
BlendResult<T> blend_pixel(std::span<const BlendContributor<T>> contributors,
                           bool early_stop = true);

template <typename T>
struct RenderOutput {
    Image<T> color;       // H x W x 3
    Image<T> depth;       // normalized: raw / accum_alpha, 0 where nothing landed
    Image<T> depth_raw;   // sum d_i alpha_i T_i
    Image<T> accum_alpha; // 1 - final transmittance

    // Backward-pass intermediates.
    bool has_intermediates = false;
    RenderSettings settings;
    int tiles_x = 0, tiles_y = 0;
    std::vector<ProjectedGaussian<T>> projected;
    std::vector<std::uint32_t> tile_offsets; // tiles + 1 entries into tile_entries
    std::vector<std::uint32_t> tile_entries; // indices into `projected`
    std::vector<std::uint32_t> last_entry;   // per pixel: one past the last processed entry
    Image<T> transmittance;                  // per pixel final transmittance
};

template <typename T>
RenderOutput<T> render(const GaussianCloud<T>& cloud, const CameraView& view,
                       const RenderSettings& settings = {});

/// Upstream gradients of a loss with respect to the render outputs. Any
/// member may be null.
template <typename T>
struct RenderGradients {
    const Image<T>* color = nullptr;
    const Image<T>* depth = nullptr; // normalized depth
    const Image<T>* depth_raw = nullptr;
    const Image<T>* accum_alpha = nullptr;
};

template <typename T>
struct BackwardResult {
    GaussianCloud<T> grads;
    /// Per primitive: norm of dL/d(mean2d) in normalized device units, and
    /// whether the primitive was visible (for densification statistics).
    std::vector<T> viewspace_grad_norm;
    std::vector<std::uint8_t> visible;
};

template <typename T>
BackwardResult<T> render_backward(const GaussianCloud<T>& cloud, const CameraView& view,
                                  const RenderOutput<T>& forward,
                                  const RenderGradients<T>& upstream);

} // namespace ssplat
