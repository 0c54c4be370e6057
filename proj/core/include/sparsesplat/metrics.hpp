#pragma once

#include "sparsesplat/image.hpp"
#include "sparsesplat/rasterizer.hpp"
#include "sparsesplat/scene.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ssplat {

/// Returned by psnr for identical images.
inline constexpr double kPsnrIdentical = std::numeric_limits<double>::infinity();

/// 10 log10(1 / MSE) for images in [0, 1]. With a mask, only pixels where
/// the mask is 0 are compared.
template <typename T>
double psnr(const Image<T>& a, const Image<T>& b, const ImageF* mask = nullptr);

/// Mean SSIM over valid 11x11 windows (Gaussian weights, sigma 1.5) and
/// channels, with C1 = 0.01^2 and C2 = 0.03^2. Throws InvalidArgument when
/// the image is smaller than the window.
template <typename T>
double ssim(const Image<T>& a, const Image<T>& b);

/// Anisotropic total variation, unnormalized.
template <typename T>
double depth_tv(const Image<T>& depth);

struct Delta1 {
    double value = 0.0;
    bool degenerate = false;
};

/// Fraction of valid pixels with max(p / r, r / p) < 1.25 after scaling the
/// prediction by median(ref) / median(pred). Pixels must be valid (nonzero
/// in `valid`, or all when null) and strictly positive in both maps.
template <typename T>
Delta1 delta1(const Image<T>& pred, const Image<T>& ref, const Image<T>* valid = nullptr);

/// SSIM of the two depth maps after independent min-max normalization.
template <typename T>
double depth_ssim(const Image<T>& pred, const Image<T>& ref);

/// Min-max normalization into [0, 1]; constant maps become zero.
template <typename T>
Image<T> minmax_normalized(const Image<T>& map);

struct FpsResult {
    double fps = 0.0;
    double seconds = 0.0;
    std::size_t frames = 0;
    bool deterministic = true; // every repeat reproduced the first pass bit-exactly
};

double frames_per_second(std::size_t frames, double seconds);

/// Times repeats * |views| calls of render_frame after one untimed warm-up
/// pass. Throws InvalidArgument for repeats < 1 or no views.
FpsResult measure_fps(const std::function<ImageF(const CameraView&)>& render_frame,
                      std::span<const CameraView> views, int repeats);

FpsResult measure_fps(const GaussianCloud<float>& cloud, std::span<const CameraView> views,
                      int repeats, const RenderSettings& settings = {});

struct ViewMetrics {
    std::string id;
    double psnr = 0.0;
    double ssim = 0.0;
    double depth_tv = 0.0;
    std::optional<double> delta1;     // absent without reference depth
    std::optional<double> depth_ssim; // absent without reference depth
    std::optional<double> depth_corr; // Pearson correlation with the reference depth
};

struct MetricReport {
    std::string label;
    std::vector<ViewMetrics> views;
    double psnr = 0.0;
    double ssim = 0.0;
    double depth_tv = 0.0;
    std::optional<double> delta1;
    std::optional<double> depth_ssim;
    std::optional<double> depth_corr;
    std::optional<double> fps;

    /// Recomputes the aggregates as means over `views`.
    void aggregate();
};

/// Metrics of one rendered view against its supervision. Tool pixels are
/// excluded from PSNR and replaced by the target in the SSIM input.
ViewMetrics evaluate_view(const std::string& id, const ImageF& color, const ImageF& depth,
                          const ImageF& target, const ImageF* target_depth, const ImageF* mask);

std::string report_to_json(const MetricReport& report);
/// Plain-text table: FPS, TV, delta1, depth SSIM, PSNR, SSIM.
std::string report_to_table(std::span<const MetricReport> reports);

} // namespace ssplat
