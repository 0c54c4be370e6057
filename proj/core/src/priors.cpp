#include "sparsesplat/priors.hpp"

#include "sparsesplat/image_io.hpp"
#include "sparsesplat/rasterizer.hpp"

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <csignal>
#include <cstring>

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

namespace ssplat {

double DiffusionSchedule::alpha_bar(int t) const {
    if (t == 0)
        return 1.0;
    if (t < 0 || t > steps())
        throw Error(ErrorCode::InvalidArgument, "diffusion step out of range");
    return alpha_bars[t - 1];
}

DiffusionSchedule DiffusionSchedule::linear(int steps, double beta_start, double beta_end) {
    if (steps < 1 || !(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
        throw Error(ErrorCode::InvalidArgument, "invalid linear beta schedule");
    DiffusionSchedule s;
    s.betas.resize(steps);
    s.alpha_bars.resize(steps);
    double prod = 1.0;
    for (int i = 0; i < steps; ++i) {
        const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / (steps - 1);
        s.betas[i] = beta_start + frac * (beta_end - beta_start);
        prod *= 1.0 - s.betas[i];
        s.alpha_bars[i] = prod;
    }
    return s;
}

template <typename T>
NoiseDraw<T> NoiseSampler::draw(int width, int height, int channels,
                                const DiffusionSchedule& schedule) {
    NoiseDraw<T> d;
    d.seed = seed_;
    d.index = count_++;
    d.t = std::uniform_int_distribution<int>(1, schedule.steps())(rng_);
    d.eps = Image<T>(width, height, channels);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (auto& v : d.eps.storage())
        v = static_cast<T>(normal(rng_));
    return d;
}

template <typename T>
Image<T> add_noise(const Image<T>& clean, const Image<T>& eps, double alpha_bar) {
    if (!clean.same_shape(eps))
        throw Error(ErrorCode::ShapeMismatch, "add_noise: image and noise shapes differ");
    const T a = static_cast<T>(std::sqrt(alpha_bar));
    const T b = static_cast<T>(std::sqrt(1.0 - alpha_bar));
    Image<T> out(clean.width(), clean.height(), clean.channels());
    for (std::size_t i = 0; i < clean.size(); ++i)
        out[i] = a * clean[i] + b * eps[i];
    return out;
}

// ---------------------------------------------------------------------------

ImageD OracleDenoiser::predict_noise(const DenoiseRequest& request) {
    if (!request.injected_noise)
        throw Error(ErrorCode::PriorUnavailable, "oracle denoiser needs the injected noise");
    return *request.injected_noise;
}

ImageD ZeroDenoiser::predict_noise(const DenoiseRequest& request) {
    return ImageD(request.noised->width(), request.noised->height(), request.noised->channels());
}

ImageD FileDenoiser::predict_noise(const DenoiseRequest& request) {
    return read_pfm(dir_ / (request.view_key + ".pfm")).cast<double>();
}

ImageD OracleDepth::predict_depth(const DepthRequest& request) {
    const GaussianCloud<double> scene = scene_(request.view->time);
    ImageD depth = render<double>(scene, *request.view).depth;
    if (scale_ != 1.0 || shift_ != 0.0)
        for (auto& v : depth.storage())
            v = scale_ * v + shift_;
    return depth;
}

ImageD FileDepth::predict_depth(const DepthRequest& request) {
    ImageD depth = read_pfm(dir_ / (request.view_key + ".pfm")).cast<double>();
    if (request.view && (depth.width() != request.view->width ||
                         depth.height() != request.view->height || depth.channels() != 1))
        throw Error(ErrorCode::ResolutionMismatch,
                    "depth map for view '" + request.view_key + "' does not match the view");
    return depth;
}

bool FileDepth::has_view(const std::string& view_key) const {
    return std::filesystem::exists(dir_ / (view_key + ".pfm"));
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(std::span<const std::byte> b, std::size_t at) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(b[at + i]) << (8 * i);
    return v;
}

constexpr std::size_t kHeaderBytes = 5 + 12;
constexpr std::uint64_t kMaxFrameValues = 1ull << 28;

} // namespace

std::vector<std::byte> encode_frame(const ImageF& image) {
    std::vector<std::byte> out;
    out.reserve(kHeaderBytes + image.size() * 4);
    for (char c : kFrameMagic)
        out.push_back(static_cast<std::byte>(c));
    put_u32(out, static_cast<std::uint32_t>(image.width()));
    put_u32(out, static_cast<std::uint32_t>(image.height()));
    put_u32(out, static_cast<std::uint32_t>(image.channels()));
    for (float v : image.data()) {
        const auto bits = std::bit_cast<std::uint32_t>(v);
        put_u32(out, bits);
    }
    return out;
}

std::size_t decode_frame(std::span<const std::byte> bytes, ImageF& out) {
    const std::size_t check = std::min<std::size_t>(bytes.size(), 5);
    for (std::size_t i = 0; i < check; ++i)
        if (bytes[i] != static_cast<std::byte>(kFrameMagic[i]))
            throw Error(ErrorCode::MalformedFrame, "frame magic mismatch");
    if (bytes.size() < kHeaderBytes)
        return 0;
    const std::uint32_t w = get_u32(bytes, 5), h = get_u32(bytes, 9), c = get_u32(bytes, 13);
    const std::uint64_t values = static_cast<std::uint64_t>(w) * h * c;
    if (values > kMaxFrameValues)
        throw Error(ErrorCode::MalformedFrame, "frame header declares an implausible size");
    const std::size_t total = kHeaderBytes + values * 4;
    if (bytes.size() < total)
        return 0;
    out = ImageF(static_cast<int>(w), static_cast<int>(h), static_cast<int>(c));
    for (std::size_t i = 0; i < values; ++i)
        out[i] = std::bit_cast<float>(get_u32(bytes, kHeaderBytes + 4 * i));
    return total;
}

SubprocessChannel::SubprocessChannel(std::string command, std::chrono::milliseconds timeout,
                                     std::vector<std::pair<std::string, std::string>> env)
    : command_(std::move(command)), timeout_(timeout), env_(std::move(env)) {
    start();
}

SubprocessChannel::~SubprocessChannel() { stop(); }

void SubprocessChannel::start() {
    std::signal(SIGPIPE, SIG_IGN);
    int in_pipe[2], out_pipe[2];
    if (pipe(in_pipe) != 0)
        throw Error(ErrorCode::PriorUnavailable, "pipe() failed");
    if (pipe(out_pipe) != 0) {
        close(in_pipe[0]);
        close(in_pipe[1]);
        throw Error(ErrorCode::PriorUnavailable, "pipe() failed");
    }
    const pid_t pid = fork();
    if (pid < 0)
        throw Error(ErrorCode::PriorUnavailable, "fork() failed");
    if (pid == 0) {
        setpgid(0, 0); // lets stop() reach the command's own children
        dup2(in_pipe[0], STDIN_FILENO);
        dup2(out_pipe[1], STDOUT_FILENO);
        close(in_pipe[0]);
        close(in_pipe[1]);
        close(out_pipe[0]);
        close(out_pipe[1]);
        for (const auto& [k, v] : env_)
            setenv(k.c_str(), v.c_str(), 1);
        execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
        _exit(127);
    }
    close(in_pipe[0]);
    close(out_pipe[1]);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    fcntl(to_child_, F_SETFL, fcntl(to_child_, F_GETFL) | O_NONBLOCK);
    fcntl(from_child_, F_SETFL, fcntl(from_child_, F_GETFL) | O_NONBLOCK);
}

void SubprocessChannel::stop() noexcept {
    if (to_child_ >= 0)
        close(to_child_);
    if (from_child_ >= 0)
        close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
        int status = 0;
        // Give a well-behaved child a moment to exit on EOF, then kill it.
        for (int i = 0; i < 50; ++i) {
            if (waitpid(pid_, &status, WNOHANG) == pid_) {
                pid_ = -1;
                return;
            }
            usleep(2000);
        }
        kill(-pid_, SIGKILL);
        kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
        pid_ = -1;
    }
}

ImageF SubprocessChannel::exchange(std::span<const ImageF> request) {
    if (pid_ <= 0)
        throw Error(ErrorCode::PriorUnavailable, "provider process '" + command_ + "' is not running");
    std::vector<std::byte> outgoing;
    for (const auto& frame : request) {
        auto bytes = encode_frame(frame);
        outgoing.insert(outgoing.end(), bytes.begin(), bytes.end());
    }

    const auto deadline = std::chrono::steady_clock::now() + timeout_;
    std::size_t written = 0;
    ImageF response;
    std::byte buffer[65536];
    for (;;) {
        const std::size_t used = pending_.empty() ? 0 : decode_frame(pending_, response);
        if (used > 0) {
            pending_.erase(pending_.begin(), pending_.begin() + static_cast<std::ptrdiff_t>(used));
            if (written < outgoing.size())
                throw Error(ErrorCode::MalformedFrame, "provider answered before reading the request");
            return response;
        }

        const auto now = std::chrono::steady_clock::now();
        if (now >= deadline)
            throw Error(ErrorCode::ProviderTimeout, "provider '" + command_ + "' timed out");
        const int wait_ms = static_cast<int>(
            std::chrono::duration_cast<std::chrono::milliseconds>(deadline - now).count()) + 1;

        pollfd fds[2] = {{from_child_, POLLIN, 0}, {to_child_, POLLOUT, 0}};
        const nfds_t nfds = written < outgoing.size() ? 2 : 1;
        const int ready = poll(fds, nfds, wait_ms);
        if (ready < 0) {
            if (errno == EINTR)
                continue;
            throw Error(ErrorCode::PriorUnavailable, "poll() failed on provider pipes");
        }
        if (ready == 0)
            continue;
        if (nfds == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
            const ssize_t n = write(to_child_, outgoing.data() + written, outgoing.size() - written);
            if (n < 0 && errno != EAGAIN && errno != EINTR)
                throw Error(ErrorCode::PriorUnavailable,
                            "provider '" + command_ + "' closed its input");
            if (n > 0)
                written += static_cast<std::size_t>(n);
        }
        if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
            const ssize_t n = read(from_child_, buffer, sizeof(buffer));
            if (n == 0)
                throw Error(ErrorCode::MalformedFrame,
                            "provider '" + command_ + "' exited before sending a complete frame");
            if (n < 0 && errno != EAGAIN && errno != EINTR)
                throw Error(ErrorCode::PriorUnavailable, "read() failed on provider pipe");
            if (n > 0)
                pending_.insert(pending_.end(), buffer, buffer + n);
        }
    }
}

ImageF provider_roundtrip(SubprocessChannel& channel, std::span<const ImageF> request) {
    return channel.exchange(request);
}

namespace {

std::string hex_encode(std::span<const std::byte> bytes) {
    static constexpr char digits[] = "0123456789abcdef";
    std::string out;
    out.reserve(bytes.size() * 2);
    for (std::byte b : bytes) {
        const auto v = static_cast<unsigned>(b);
        out.push_back(digits[v >> 4]);
        out.push_back(digits[v & 0xf]);
    }
    return out;
}

} // namespace

SubprocessDenoiser::SubprocessDenoiser(std::string command, std::span<const std::byte> conditioning,
                                       std::chrono::milliseconds timeout)
    : channel_(std::move(command), timeout, {{"ESPR_CONDITIONING", hex_encode(conditioning)}}) {}

ImageD SubprocessDenoiser::predict_noise(const DenoiseRequest& request) {
    ImageF meta(1, 1, 2);
    meta[0] = static_cast<float>(request.t);
    meta[1] = static_cast<float>(request.alpha_bar);
    const ImageF frames[2] = {request.noised->cast<float>(), meta};
    ImageF reply = channel_.exchange(frames);
    if (!reply.same_shape(frames[0]))
        throw Error(ErrorCode::MalformedFrame, "denoiser reply does not match the request shape");
    return reply.cast<double>();
}

SubprocessDepth::SubprocessDepth(std::string command, std::chrono::milliseconds timeout)
    : channel_(std::move(command), timeout) {}

ImageD SubprocessDepth::predict_depth(const DepthRequest& request) {
    const ImageF frames[1] = {request.rendered_color->cast<float>()};
    ImageF reply = channel_.exchange(frames);
    if (reply.width() != frames[0].width() || reply.height() != frames[0].height() ||
        reply.channels() != 1)
        throw Error(ErrorCode::MalformedFrame, "depth reply does not match the request resolution");
    return reply.cast<double>();
}

// ---------------------------------------------------------------------------

namespace {

bool pixel_valid(const ImageF* tool_mask, std::size_t pixel) {
    return !tool_mask || (*tool_mask)[pixel] == 0.0f;
}

} // namespace

template <typename T>
SdsResult<T> sds_residual(const Image<T>& rendered, DenoiserProvider& provider,
                          const DiffusionSchedule& schedule, const NoiseDraw<T>& draw,
                          const ImageF* tool_mask, const std::string& view_key,
                          std::span<const std::byte> conditioning) {
    if (!rendered.same_shape(draw.eps))
        throw Error(ErrorCode::ShapeMismatch, "sds: noise draw does not match the image");
    if (tool_mask && tool_mask->pixel_count() != rendered.pixel_count())
        throw Error(ErrorCode::ShapeMismatch, "sds: mask does not match the image");
    const double alpha_bar = schedule.alpha_bar(draw.t);
    const Image<T> noised = add_noise(rendered, draw.eps, alpha_bar);

    const ImageD noised_d = noised.template cast<double>();
    const ImageD eps_d = draw.eps.template cast<double>();
    DenoiseRequest request;
    request.noised = &noised_d;
    request.t = draw.t;
    request.alpha_bar = alpha_bar;
    request.view_key = view_key;
    request.injected_noise = &eps_d;
    request.conditioning = conditioning;
    ImageD predicted;
    try {
        predicted = provider.predict_noise(request);
    } catch (const Error& e) {
        throw Error(ErrorCode::PriorUnavailable,
                    "denoiser '" + provider.kind() + "' failed: " + e.what());
    }
    if (!predicted.same_shape(noised_d))
        throw Error(ErrorCode::PriorUnavailable, "denoiser returned a map of the wrong shape");

    SdsResult<T> r;
    r.residual = Image<T>(rendered.width(), rendered.height(), rendered.channels());
    r.grad = Image<T>(rendered.width(), rendered.height(), rendered.channels());
    const int ch = rendered.channels();
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = p * ch + c;
            r.residual[i] = static_cast<T>(predicted[i]) - draw.eps[i];
        }
        if (pixel_valid(tool_mask, p))
            r.valid += static_cast<std::size_t>(ch);
    }
    if (r.valid == 0)
        return r;
    const T inv_n = T(1) / static_cast<T>(r.valid);
    const T scale = static_cast<T>(std::sqrt(alpha_bar)) * inv_n; // w(t) = 1
    double sum = 0.0;
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        if (!pixel_valid(tool_mask, p))
            continue;
        for (int c = 0; c < ch; ++c) {
            const std::size_t i = p * ch + c;
            sum += static_cast<double>(r.residual[i]) * static_cast<double>(r.residual[i]);
            r.grad[i] = scale * r.residual[i];
        }
    }
    r.loss = static_cast<T>(sum / static_cast<double>(r.valid));
    return r;
}

template <typename T>
T sds_surrogate(const Image<T>& rendered, const Image<T>& frozen_residual,
                const NoiseDraw<T>& draw, const DiffusionSchedule& schedule,
                const ImageF* tool_mask) {
    const Image<T> noised = add_noise(rendered, draw.eps, schedule.alpha_bar(draw.t));
    const int ch = rendered.channels();
    T sum = T(0);
    std::size_t n = 0;
    for (std::size_t p = 0; p < rendered.pixel_count(); ++p) {
        if (!pixel_valid(tool_mask, p))
            continue;
        for (int c = 0; c < ch; ++c)
            sum += frozen_residual[p * ch + c] * noised[p * ch + c];
        n += static_cast<std::size_t>(ch);
    }
    return n == 0 ? T(0) : sum / static_cast<T>(n);
}

namespace {

template <typename T>
struct MomentSums {
    T mean_a = T(0), mean_b = T(0);
    T var_a = T(0), var_b = T(0), cov = T(0);
    std::size_t n = 0;
};

template <typename T>
MomentSums<T> moments(const Image<T>& a, const Image<T>& b, const Image<T>* valid) {
    MomentSums<T> m;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        m.mean_a += a[i];
        m.mean_b += b[i];
        ++m.n;
    }
    if (m.n == 0)
        return m;
    m.mean_a /= static_cast<T>(m.n);
    m.mean_b /= static_cast<T>(m.n);
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        const T da = a[i] - m.mean_a, db = b[i] - m.mean_b;
        m.var_a += da * da;
        m.var_b += db * db;
        m.cov += da * db;
    }
    m.var_a /= static_cast<T>(m.n);
    m.var_b /= static_cast<T>(m.n);
    m.cov /= static_cast<T>(m.n);
    return m;
}

// Min-max normalization over the valid set; returns false for a constant map.
template <typename T>
bool minmax_normalize(const Image<T>& in, const Image<T>* valid, Image<T>& out) {
    T lo = std::numeric_limits<T>::infinity(), hi = -lo;
    for (std::size_t i = 0; i < in.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        lo = std::min(lo, in[i]);
        hi = std::max(hi, in[i]);
    }
    out = Image<T>(in.width(), in.height(), in.channels());
    if (!(hi > lo))
        return false;
    const T range = hi - lo;
    for (std::size_t i = 0; i < in.size(); ++i)
        out[i] = (in[i] - lo) / range;
    return true;
}

constexpr double kPearsonEps = 1e-8;

} // namespace

template <typename T>
PearsonResult<T> pearson_corr(const Image<T>& a, const Image<T>& b, const Image<T>* valid) {
    if (!a.same_shape(b) || (valid && valid->size() != a.size()))
        throw Error(ErrorCode::ShapeMismatch, "pearson_corr: map shapes differ");
    PearsonResult<T> r;
    Image<T> na, nb;
    if (!minmax_normalize(a, valid, na) || !minmax_normalize(b, valid, nb)) {
        r.degenerate = true;
        return r;
    }
    const auto m = moments(na, nb, valid);
    if (m.n < 2 || !(m.var_a > T(0)) || !(m.var_b > T(0))) {
        r.degenerate = true;
        return r;
    }
    r.value = m.cov / std::max(std::sqrt(m.var_a * m.var_b), T(kPearsonEps));
    return r;
}

template <typename T>
GeoLoss<T> geo_loss(const Image<T>& rendered, const Image<T>& predicted, const Image<T>* valid) {
    GeoLoss<T> g;
    g.grad = Image<T>(rendered.width(), rendered.height(), rendered.channels());
    const PearsonResult<T> corr = pearson_corr(rendered, predicted, valid);
    if (corr.degenerate) {
        g.degenerate = true;
        return g;
    }
    g.loss = std::abs(T(1) - corr.value);

    // The min-max normalization is a positive affine map, under which the
    // correlation is invariant, so its gradient can be taken on the raw map.
    const auto m = moments(rendered, predicted, valid);
    const T denom = std::sqrt(m.var_a * m.var_b);
    if (!(denom > T(kPearsonEps)))
        return g;
    const T corr_raw = m.cov / denom;
    const T inv_n = T(1) / static_cast<T>(m.n);
    for (std::size_t i = 0; i < rendered.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        const T da = rendered[i] - m.mean_a, db = predicted[i] - m.mean_b;
        const T d_corr = inv_n * (db / denom - corr_raw * da / m.var_a);
        g.grad[i] = -d_corr;
    }
    return g;
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template NoiseDraw<T> NoiseSampler::draw<T>(int, int, int, const DiffusionSchedule&);       \
    template Image<T> add_noise<T>(const Image<T>&, const Image<T>&, double);                   \
    template SdsResult<T> sds_residual<T>(const Image<T>&, DenoiserProvider&,                   \
                                          const DiffusionSchedule&, const NoiseDraw<T>&,        \
                                          const ImageF*, const std::string&,                    \
                                          std::span<const std::byte>);                          \
    template T sds_surrogate<T>(const Image<T>&, const Image<T>&, const NoiseDraw<T>&,          \
                                const DiffusionSchedule&, const ImageF*);                       \
    template PearsonResult<T> pearson_corr<T>(const Image<T>&, const Image<T>&,                 \
                                              const Image<T>*);                                 \
    template GeoLoss<T> geo_loss<T>(const Image<T>&, const Image<T>&, const Image<T>*);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

} // namespace ssplat
