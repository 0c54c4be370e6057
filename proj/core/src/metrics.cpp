#include "sparsesplat/metrics.hpp"

#include "sparsesplat/priors.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace ssplat {

template <typename T>
double psnr(const Image<T>& a, const Image<T>& b, const ImageF* mask) {
    if (!a.same_shape(b))
        throw Error(ErrorCode::ShapeMismatch, "psnr: image shapes differ");
    if (mask && mask->pixel_count() != a.pixel_count())
        throw Error(ErrorCode::ShapeMismatch, "psnr: mask shape differs");
    const int ch = a.channels();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t p = 0; p < a.pixel_count(); ++p) {
        if (mask && (*mask)[p] != 0.0f)
            continue;
        for (int c = 0; c < ch; ++c) {
            const double d = static_cast<double>(a[p * ch + c]) - static_cast<double>(b[p * ch + c]);
            sum += d * d;
        }
        n += static_cast<std::size_t>(ch);
    }
    if (n == 0)
        throw Error(ErrorCode::InvalidArgument, "psnr: no pixels to compare");
    const double mse = sum / static_cast<double>(n);
    return mse == 0.0 ? kPsnrIdentical : 10.0 * std::log10(1.0 / mse);
}

namespace {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

std::array<double, kWindow> gaussian_window() {
    std::array<double, kWindow> w{};
    double sum = 0.0;
    for (int i = 0; i < kWindow; ++i) {
        const double x = i - kWindow / 2;
        w[i] = std::exp(-x * x / (2.0 * kSigma * kSigma));
        sum += w[i];
    }
    for (auto& v : w)
        v /= sum;
    return w;
}

// Separable valid-mode filter of one channel.
std::vector<double> filter_valid(const std::vector<double>& in, int w, int h) {
    static const auto win = gaussian_window();
    const int ow = w - kWindow + 1, oh = h - kWindow + 1;
    std::vector<double> rows(static_cast<std::size_t>(ow) * h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k)
                s += win[k] * in[static_cast<std::size_t>(y) * w + x + k];
            rows[static_cast<std::size_t>(y) * ow + x] = s;
        }
    std::vector<double> out(static_cast<std::size_t>(ow) * oh);
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double s = 0.0;
            for (int k = 0; k < kWindow; ++k)
                s += win[k] * rows[static_cast<std::size_t>(y + k) * ow + x];
            out[static_cast<std::size_t>(y) * ow + x] = s;
        }
    return out;
}

} // namespace

template <typename T>
double ssim(const Image<T>& a, const Image<T>& b) {
    if (!a.same_shape(b))
        throw Error(ErrorCode::ShapeMismatch, "ssim: image shapes differ");
    const int w = a.width(), h = a.height(), ch = a.channels();
    if (w < kWindow || h < kWindow)
        throw Error(ErrorCode::InvalidArgument, "ssim: image is smaller than the 11x11 window");
    double total = 0.0;
    std::size_t count = 0;
    for (int c = 0; c < ch; ++c) {
        std::vector<double> xa(a.pixel_count()), xb(a.pixel_count());
        for (std::size_t p = 0; p < a.pixel_count(); ++p) {
            xa[p] = static_cast<double>(a[p * ch + c]);
            xb[p] = static_cast<double>(b[p * ch + c]);
        }
        std::vector<double> aa(xa.size()), bb(xa.size()), ab(xa.size());
        for (std::size_t p = 0; p < xa.size(); ++p) {
            aa[p] = xa[p] * xa[p];
            bb[p] = xb[p] * xb[p];
            ab[p] = xa[p] * xb[p];
        }
        const auto mu_a = filter_valid(xa, w, h), mu_b = filter_valid(xb, w, h);
        const auto e_aa = filter_valid(aa, w, h), e_bb = filter_valid(bb, w, h);
        const auto e_ab = filter_valid(ab, w, h);
        for (std::size_t i = 0; i < mu_a.size(); ++i) {
            const double var_a = e_aa[i] - mu_a[i] * mu_a[i];
            const double var_b = e_bb[i] - mu_b[i] * mu_b[i];
            const double cov = e_ab[i] - mu_a[i] * mu_b[i];
            const double num = (2.0 * mu_a[i] * mu_b[i] + kC1) * (2.0 * cov + kC2);
            const double den = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + kC1) * (var_a + var_b + kC2);
            total += num / den;
            ++count;
        }
    }
    return total / static_cast<double>(count);
}

template <typename T>
double depth_tv(const Image<T>& depth) {
    double tv = 0.0;
    const int ch = depth.channels();
    for (int y = 0; y < depth.height(); ++y)
        for (int x = 0; x < depth.width(); ++x)
            for (int c = 0; c < ch; ++c) {
                const double v = depth.at(x, y, c);
                if (x + 1 < depth.width())
                    tv += std::abs(static_cast<double>(depth.at(x + 1, y, c)) - v);
                if (y + 1 < depth.height())
                    tv += std::abs(static_cast<double>(depth.at(x, y + 1, c)) - v);
            }
    return tv;
}

namespace {

double median(std::vector<double> v) {
    const std::size_t mid = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
    const double upper = v[mid];
    if (v.size() % 2 == 1)
        return upper;
    const double lower = *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid));
    return 0.5 * (lower + upper);
}

} // namespace

template <typename T>
Delta1 delta1(const Image<T>& pred, const Image<T>& ref, const Image<T>* valid) {
    if (!pred.same_shape(ref) || (valid && valid->size() != pred.size()))
        throw Error(ErrorCode::ShapeMismatch, "delta1: map shapes differ");
    std::vector<double> p, r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        if (valid && (*valid)[i] == T(0))
            continue;
        if (!(pred[i] > T(0)) || !(ref[i] > T(0)))
            continue;
        p.push_back(static_cast<double>(pred[i]));
        r.push_back(static_cast<double>(ref[i]));
    }
    Delta1 out;
    if (p.empty()) {
        out.degenerate = true;
        return out;
    }
    const double scale = median(r) / median(p);
    std::size_t good = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const double s = p[i] * scale;
        if (std::max(s / r[i], r[i] / s) < 1.25)
            ++good;
    }
    out.value = static_cast<double>(good) / static_cast<double>(p.size());
    return out;
}

template <typename T>
Image<T> minmax_normalized(const Image<T>& map) {
    Image<T> out(map.width(), map.height(), map.channels());
    if (map.empty())
        return out;
    const auto [lo, hi] = std::minmax_element(map.data().begin(), map.data().end());
    const T range = *hi - *lo;
    if (!(range > T(0)))
        return out;
    for (std::size_t i = 0; i < map.size(); ++i)
        out[i] = (map[i] - *lo) / range;
    return out;
}

template <typename T>
double depth_ssim(const Image<T>& pred, const Image<T>& ref) {
    return ssim(minmax_normalized(pred), minmax_normalized(ref));
}

double frames_per_second(std::size_t frames, double seconds) {
    if (!(seconds > 0.0))
        throw Error(ErrorCode::InvalidArgument, "elapsed time must be positive");
    return static_cast<double>(frames) / seconds;
}

FpsResult measure_fps(const std::function<ImageF(const CameraView&)>& render_frame,
                      std::span<const CameraView> views, int repeats) {
    if (repeats < 1)
        throw Error(ErrorCode::InvalidArgument, "fps measurement needs at least one repeat");
    if (views.empty())
        throw Error(ErrorCode::InvalidArgument, "fps measurement needs at least one view");
    std::vector<ImageF> reference;
    reference.reserve(views.size());
    for (const auto& v : views)
        reference.push_back(render_frame(v));

    FpsResult r;
    const auto start = std::chrono::steady_clock::now();
    for (int rep = 0; rep < repeats; ++rep)
        for (std::size_t i = 0; i < views.size(); ++i) {
            const ImageF frame = render_frame(views[i]);
            r.deterministic = r.deterministic && frame == reference[i];
            ++r.frames;
        }
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    r.fps = frames_per_second(r.frames, std::max(r.seconds, 1e-9));
    return r;
}

FpsResult measure_fps(const GaussianCloud<float>& cloud, std::span<const CameraView> views,
                      int repeats, const RenderSettings& settings) {
    return measure_fps(
        [&](const CameraView& v) { return render(cloud, v, settings).color; }, views, repeats);
}

void MetricReport::aggregate() {
    psnr = ssim = depth_tv = 0.0;
    delta1.reset();
    depth_ssim.reset();
    depth_corr.reset();
    if (views.empty())
        return;
    double d1 = 0.0, ds = 0.0, dc = 0.0;
    std::size_t nd1 = 0, nds = 0, ndc = 0;
    for (const auto& v : views) {
        psnr += v.psnr;
        ssim += v.ssim;
        depth_tv += v.depth_tv;
        if (v.delta1) {
            d1 += *v.delta1;
            ++nd1;
        }
        if (v.depth_ssim) {
            ds += *v.depth_ssim;
            ++nds;
        }
        if (v.depth_corr) {
            dc += *v.depth_corr;
            ++ndc;
        }
    }
    const double n = static_cast<double>(views.size());
    psnr /= n;
    ssim /= n;
    depth_tv /= n;
    if (nd1)
        delta1 = d1 / static_cast<double>(nd1);
    if (nds)
        depth_ssim = ds / static_cast<double>(nds);
    if (ndc)
        depth_corr = dc / static_cast<double>(ndc);
}

ViewMetrics evaluate_view(const std::string& id, const ImageF& color, const ImageF& depth,
                          const ImageF& target, const ImageF* target_depth, const ImageF* mask) {
    ViewMetrics m;
    m.id = id;
    m.psnr = psnr(color, target, mask);
    ImageF composited = color;
    if (mask)
        for (std::size_t p = 0; p < color.pixel_count(); ++p)
            if ((*mask)[p] != 0.0f)
                for (int c = 0; c < color.channels(); ++c)
                    composited[p * color.channels() + c] = target[p * color.channels() + c];
    m.ssim = ssim(composited, target);
    m.depth_tv = depth_tv(minmax_normalized(depth));
    if (target_depth) {
        ImageF valid(depth.width(), depth.height(), 1, 1.0f);
        if (mask)
            for (std::size_t p = 0; p < valid.size(); ++p)
                valid[p] = (*mask)[p] != 0.0f ? 0.0f : 1.0f;
        const Delta1 d = delta1(depth, *target_depth, &valid);
        if (!d.degenerate)
            m.delta1 = d.value;
        m.depth_ssim = depth_ssim(depth, *target_depth);
        // Same convention as delta1: a non-positive reference has no depth.
        ImageD valid_d = valid.cast<double>();
        for (std::size_t p = 0; p < valid_d.size(); ++p)
            if (!((*target_depth)[p] > 0.0f))
                valid_d[p] = 0.0;
        const PearsonResult<double> corr =
            pearson_corr(depth.cast<double>(), target_depth->cast<double>(), &valid_d);
        if (!corr.degenerate)
            m.depth_corr = corr.value;
    }
    return m;
}

namespace {

nlohmann::json number_or_null(double v) {
    if (std::isinf(v))
        return v > 0 ? "inf" : "-inf";
    if (std::isnan(v))
        return nullptr;
    return v;
}

nlohmann::json optional_number(const std::optional<double>& v) {
    return v ? number_or_null(*v) : nlohmann::json(nullptr);
}

} // namespace

std::string report_to_json(const MetricReport& report) {
    nlohmann::ordered_json j;
    j["label"] = report.label;
    j["fps"] = optional_number(report.fps);
    j["depth_tv"] = number_or_null(report.depth_tv);
    j["delta1"] = optional_number(report.delta1);
    j["depth_ssim"] = optional_number(report.depth_ssim);
    j["psnr"] = number_or_null(report.psnr);
    j["ssim"] = number_or_null(report.ssim);
    j["lpips"] = nullptr;
    j["depth_corr"] = optional_number(report.depth_corr);
    auto& views = j["views"] = nlohmann::ordered_json::array();
    for (const auto& v : report.views) {
        nlohmann::ordered_json e;
        e["id"] = v.id;
        e["depth_tv"] = number_or_null(v.depth_tv);
        e["delta1"] = optional_number(v.delta1);
        e["depth_ssim"] = optional_number(v.depth_ssim);
        e["psnr"] = number_or_null(v.psnr);
        e["ssim"] = number_or_null(v.ssim);
        e["depth_corr"] = optional_number(v.depth_corr);
        views.push_back(std::move(e));
    }
    return j.dump(2) + "\n";
}

std::string report_to_table(std::span<const MetricReport> reports) {
    std::ostringstream out;
    auto cell = [&](const std::optional<double>& v, int precision) {
        std::ostringstream c;
        if (v)
            c << std::fixed << std::setprecision(precision) << *v;
        else
            c << "-";
        out << std::setw(12) << c.str();
    };
    out << std::left << std::setw(24) << "run" << std::right << std::setw(12) << "FPS"
        << std::setw(12) << "TV" << std::setw(12) << "delta1" << std::setw(12) << "depth-SSIM"
        << std::setw(12) << "PSNR" << std::setw(12) << "SSIM" << std::setw(12) << "depth-corr"
        << "\n";
    for (const auto& r : reports) {
        out << std::left << std::setw(24) << r.label << std::right;
        cell(r.fps, 1);
        cell(r.depth_tv, 2);
        cell(r.delta1, 4);
        cell(r.depth_ssim, 4);
        cell(r.psnr, 2);
        cell(r.ssim, 4);
        cell(r.depth_corr, 4);
        out << "\n";
    }
    return out.str();
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template double psnr<T>(const Image<T>&, const Image<T>&, const ImageF*);                   \
    template double ssim<T>(const Image<T>&, const Image<T>&);                                  \
    template double depth_tv<T>(const Image<T>&);                                               \
    template Delta1 delta1<T>(const Image<T>&, const Image<T>&, const Image<T>*);               \
    template double depth_ssim<T>(const Image<T>&, const Image<T>&);                            \
    template Image<T> minmax_normalized<T>(const Image<T>&);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

} // namespace ssplat
