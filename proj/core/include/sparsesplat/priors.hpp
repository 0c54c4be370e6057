#pragma once

#include "sparsesplat/common.hpp"
#include "sparsesplat/image.hpp"
#include "sparsesplat/scene.hpp"

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace ssplat {

// ---------------------------------------------------------------------------
// Forward diffusion

struct DiffusionSchedule {
    std::vector<double> betas;      // betas[t - 1] for t = 1..T
    std::vector<double> alpha_bars; // cumulative products, same indexing

    int steps() const noexcept { return static_cast<int>(betas.size()); }
    /// alpha_bar(0) == 1 by convention.
    double alpha_bar(int t) const;

    static DiffusionSchedule linear(int steps = 1000, double beta_start = 1e-4,
                                    double beta_end = 0.02);
};

template <typename T>
struct NoiseDraw {
    int t = 0;
    Image<T> eps;
    std::uint64_t seed = 0;  // generator seed the draw came from
    std::uint64_t index = 0; // how many draws preceded this one
};

/// Seeded source of (t, eps) pairs: t uniform on {1..T}, eps standard normal.
class NoiseSampler {
public:
    explicit NoiseSampler(std::uint64_t seed) : seed_(seed), rng_(seed) {}

    template <typename T>
    NoiseDraw<T> draw(int width, int height, int channels, const DiffusionSchedule& schedule);

private:
    std::uint64_t seed_;
    std::uint64_t count_ = 0;
    std::mt19937_64 rng_;
};

/// sqrt(alpha_bar) * clean + sqrt(1 - alpha_bar) * eps.
template <typename T>
Image<T> add_noise(const Image<T>& clean, const Image<T>& eps, double alpha_bar);

// ---------------------------------------------------------------------------
// Providers

struct DenoiseRequest {
    const ImageD* noised = nullptr;
    int t = 0;
    double alpha_bar = 1.0;
    std::string view_key;
    /// The injected noise; only the oracle provider looks at it.
    const ImageD* injected_noise = nullptr;
    std::span<const std::byte> conditioning;
};

/// Noise-prediction model used by score distillation. Implementations are
/// exclusive-access: one request in flight at a time.
class DenoiserProvider {
public:
    virtual ~DenoiserProvider() = default;
    virtual ImageD predict_noise(const DenoiseRequest& request) = 0;
    virtual std::string kind() const = 0;
};

struct DepthRequest {
    const CameraView* view = nullptr;
    const ImageD* rendered_color = nullptr;
    std::string view_key;
};

class DepthProvider {
public:
    virtual ~DepthProvider() = default;
    virtual ImageD predict_depth(const DepthRequest& request) = 0;
    virtual std::string kind() const = 0;
};

/// Returns the injected noise exactly.
class OracleDenoiser final : public DenoiserProvider {
public:
    ImageD predict_noise(const DenoiseRequest& request) override;
    std::string kind() const override { return "oracle"; }
};

/// Always predicts zero noise.
class ZeroDenoiser final : public DenoiserProvider {
public:
    ImageD predict_noise(const DenoiseRequest& request) override;
    std::string kind() const override { return "zero"; }
};

/// Reads `<dir>/<view_key>.pfm`.
class FileDenoiser final : public DenoiserProvider {
public:
    explicit FileDenoiser(std::filesystem::path dir) : dir_(std::move(dir)) {}
    ImageD predict_noise(const DenoiseRequest& request) override;
    std::string kind() const override { return "file"; }

private:
    std::filesystem::path dir_;
};

/// Ground-truth depth of a known scene, optionally affine-warped:
/// scale * depth + shift.
class OracleDepth final : public DepthProvider {
public:
    using SceneAtTime = std::function<GaussianCloud<double>(double time)>;

    OracleDepth(SceneAtTime scene, double scale = 1.0, double shift = 0.0)
        : scene_(std::move(scene)), scale_(scale), shift_(shift) {}
    ImageD predict_depth(const DepthRequest& request) override;
    std::string kind() const override { return "oracle"; }

private:
    SceneAtTime scene_;
    double scale_;
    double shift_;
};

/// Reads `<dir>/<view_key>.pfm`.
class FileDepth final : public DepthProvider {
public:
    explicit FileDepth(std::filesystem::path dir) : dir_(std::move(dir)) {}
    ImageD predict_depth(const DepthRequest& request) override;
    std::string kind() const override { return "file"; }
    bool has_view(const std::string& view_key) const;

private:
    std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// Subprocess wire protocol: each frame is the 5-byte magic "ESPR1", then
// u32 width, u32 height, u32 channels, then width*height*channels float32
// values, row-major, all little-endian. A request is one or more frames; the
// child answers each request with exactly one frame.

inline constexpr char kFrameMagic[5] = {'E', 'S', 'P', 'R', '1'};

std::vector<std::byte> encode_frame(const ImageF& image);
/// Parses one complete frame from the front of `bytes`; returns the number of
/// bytes consumed, or 0 when more bytes are needed. Throws MalformedFrame on a
/// bad magic or implausible header.
std::size_t decode_frame(std::span<const std::byte> bytes, ImageF& out);

/// A long-lived child process spoken to over its stdin/stdout.
class SubprocessChannel {
public:
    explicit SubprocessChannel(std::string command,
                               std::chrono::milliseconds timeout = std::chrono::seconds(30),
                               std::vector<std::pair<std::string, std::string>> env = {});
    ~SubprocessChannel();
    SubprocessChannel(const SubprocessChannel&) = delete;
    SubprocessChannel& operator=(const SubprocessChannel&) = delete;

    /// Sends the request frames and waits for one response frame.
    ImageF exchange(std::span<const ImageF> request);

    const std::string& command() const noexcept { return command_; }

private:
    void start();
    void stop() noexcept;

    std::string command_;
    std::chrono::milliseconds timeout_;
    std::vector<std::pair<std::string, std::string>> env_;
    int pid_ = -1;
    int to_child_ = -1;
    int from_child_ = -1;
    std::vector<std::byte> pending_;
};

/// One request/response round trip through a provider channel.
ImageF provider_roundtrip(SubprocessChannel& channel, std::span<const ImageF> request);

/// Sends [noised image (H x W x 3), meta (1 x 1 x 2: t, alpha_bar)], expects
/// an H x W x 3 noise prediction. The conditioning payload is handed to the
/// child once at start-up, hex-encoded in ESPR_CONDITIONING.
class SubprocessDenoiser final : public DenoiserProvider {
public:
    SubprocessDenoiser(std::string command, std::span<const std::byte> conditioning = {},
                       std::chrono::milliseconds timeout = std::chrono::seconds(30));
    ImageD predict_noise(const DenoiseRequest& request) override;
    std::string kind() const override { return "subprocess"; }

private:
    SubprocessChannel channel_;
};

/// Sends the rendered color (H x W x 3), expects an H x W x 1 depth map.
class SubprocessDepth final : public DepthProvider {
public:
    explicit SubprocessDepth(std::string command,
                             std::chrono::milliseconds timeout = std::chrono::seconds(30));
    ImageD predict_depth(const DepthRequest& request) override;
    std::string kind() const override { return "subprocess"; }

private:
    SubprocessChannel channel_;
};

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct SdsResult {
    T loss = T(0);           // mean squared residual over valid pixel-channels
    Image<T> residual;       // eps_hat - eps
    Image<T> grad;           // surrogate gradient w.r.t. the rendered image
    std::size_t valid = 0;   // valid pixel-channels
};

/// Score distillation with the denoiser treated as a constant. The gradient
/// map is w(t) * sqrt(alpha_bar) * (eps_hat - eps) / N on valid pixels, which
/// is the exact gradient of sds_surrogate. `tool_mask` (1 = excluded) may be
/// null. Throws PriorUnavailable if the provider fails.
template <typename T>
SdsResult<T> sds_residual(const Image<T>& rendered, DenoiserProvider& provider,
                          const DiffusionSchedule& schedule, const NoiseDraw<T>& draw,
                          const ImageF* tool_mask = nullptr, const std::string& view_key = {},
                          std::span<const std::byte> conditioning = {});

/// sum over valid (frozen_residual * noised(rendered)) / N; differentiating
/// this reproduces the SDS gradient.
template <typename T>
T sds_surrogate(const Image<T>& rendered, const Image<T>& frozen_residual,
                const NoiseDraw<T>& draw, const DiffusionSchedule& schedule,
                const ImageF* tool_mask = nullptr);

template <typename T>
struct PearsonResult {
    T value = T(0);
    bool degenerate = false;
};

/// Pearson correlation over pixels where `valid` is nonzero (null = all).
/// Both maps are min-max normalized over the valid set first; fewer than two
/// valid pixels or a zero-variance input is reported as degenerate.
template <typename T>
PearsonResult<T> pearson_corr(const Image<T>& a, const Image<T>& b, const Image<T>* valid = nullptr);

template <typename T>
struct GeoLoss {
    T loss = T(0);
    Image<T> grad; // d loss / d rendered depth
    bool degenerate = false;
};

/// 1 - pearson_corr(rendered, predicted) and its gradient w.r.t. `rendered`.
/// Degenerate statistics give zero loss and zero gradient.
template <typename T>
GeoLoss<T> geo_loss(const Image<T>& rendered, const Image<T>& predicted,
                    const Image<T>* valid = nullptr);

} // namespace ssplat
