#include "doctest.h"
#include "test_support.hpp"

#include "sparsesplat/metrics.hpp"

#include <json.hpp>

#include <cmath>
#include <random>

using namespace ssplat;
using namespace ssplat::testkit;

namespace {

ImageD random_image(std::mt19937_64& rng, int w, int h, int c) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    ImageD out(w, h, c);
    for (double& v : out.storage())
        v = u(rng);
    return out;
}

// Direct per-window SSIM: weighted moments summed over each 11x11 window.
double reference_ssim(const ImageD& a, const ImageD& b) {
    double g[11], gs = 0;
    for (int i = 0; i < 11; ++i)
        gs += g[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5));
    const double c1 = 1e-4, c2 = 9e-4;
    double total = 0;
    int count = 0;
    for (int c = 0; c < a.channels(); ++c)
        for (int y0 = 0; y0 + 11 <= a.height(); ++y0)
            for (int x0 = 0; x0 + 11 <= a.width(); ++x0) {
                double ma = 0, mb = 0;
                for (int dy = 0; dy < 11; ++dy)
                    for (int dx = 0; dx < 11; ++dx) {
                        const double w = g[dy] * g[dx] / (gs * gs);
                        ma += w * a.at(x0 + dx, y0 + dy, c);
                        mb += w * b.at(x0 + dx, y0 + dy, c);
                    }
                double va = 0, vb = 0, cab = 0;
                for (int dy = 0; dy < 11; ++dy)
                    for (int dx = 0; dx < 11; ++dx) {
                        const double w = g[dy] * g[dx] / (gs * gs);
                        const double da = a.at(x0 + dx, y0 + dy, c) - ma;
                        const double db = b.at(x0 + dx, y0 + dy, c) - mb;
                        va += w * da * da;
                        vb += w * db * db;
                        cab += w * da * db;
                    }
                total += (2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                ++count;
            }
    return total / count;
}

} // namespace

TEST_SUITE("evalkit") {

TEST_CASE("psnr closed forms") {
    ImageD a(8, 4, 3, 0.2), b = a;
    CHECK(psnr(a, b) == kPsnrIdentical);
    CHECK(std::isinf(psnr(a, b)));
    for (double& v : b.storage())
        v += 0.1; // MSE 0.01
    CHECK(psnr(a, b) == doctest::Approx(20.0).epsilon(1e-12));
    CHECK(psnr(b, a) == psnr(a, b));
    ImageD zero(8, 4, 3, 0.0), one(8, 4, 3, 1.0);
    CHECK(psnr(zero, one) == 0.0);

    // tool pixels are ignored
    ImageF fa(4, 1, 3, 0.5f), fb = fa;
    ImageF mask(4, 1, 1);
    mask[2] = 1.0f;
    for (int c = 0; c < 3; ++c)
        fb.at(2, 0, c) = 0.0f;
    CHECK(psnr(fa, fb, &mask) == kPsnrIdentical);
    CHECK(std::isfinite(psnr(fa, fb)));

    CHECK(code_of([&] { psnr(a, ImageD(8, 4, 1)); }) == ErrorCode::ShapeMismatch);
    const ImageF all(4, 1, 1, 1.0f);
    CHECK(code_of([&] { psnr(fa, fb, &all); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("ssim examples") {
    std::mt19937_64 rng(4);
    const ImageD r = random_image(rng, 16, 13, 3);
    CHECK(ssim(r, r) == 1.0);

    const ImageD zero(12, 12, 1, 0.0), one(12, 12, 1, 1.0);
    // zero variances: (C1)(C2) / ((1 + C1)(C2))
    CHECK(ssim(zero, one) == doctest::Approx(1e-4 / (1.0 + 1e-4)).epsilon(1e-12));

    ImageD check(16, 16, 1), inverse(16, 16, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            check.at(x, y) = (x + y) % 2;
            inverse.at(x, y) = 1 - check.at(x, y);
        }
    const double s = ssim(check, inverse);
    CHECK(s < 0.0);
    CHECK(s == doctest::Approx(reference_ssim(check, inverse)).epsilon(1e-10));

    CHECK(code_of([] { ssim(ImageD(10, 20, 1), ImageD(10, 20, 1)); }) == ErrorCode::InvalidArgument);
    CHECK(code_of([] { ssim(ImageD(12, 12, 1), ImageD(12, 12, 3)); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("ssim agrees with a per-window reference") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 4; ++trial) {
        const ImageD a = random_image(rng, 14 + trial, 12 + 2 * trial, trial % 2 ? 3 : 1);
        ImageD b = a;
        std::normal_distribution<double> n(0.0, 0.2);
        for (double& v : b.storage())
            v += n(rng);
        const double s = ssim(a, b);
        CHECK(s == doctest::Approx(reference_ssim(a, b)).epsilon(1e-10));
        CHECK(s <= 1.0);
        CHECK(s >= -1.0);
        CHECK(ssim(b, a) == doctest::Approx(s).epsilon(1e-14));
    }
}

TEST_CASE("total variation") {
    CHECK(depth_tv(ImageD(5, 4, 1, 3.0)) == 0.0);
    ImageD row(3, 1, 1);
    row[0] = 0;
    row[1] = 1;
    row[2] = 3;
    CHECK(depth_tv(row) == 3.0);

    const int w = 9, h = 6;
    ImageD ramp(w, h, 1);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            ramp.at(x, y) = static_cast<double>(x) / (w - 1);
    CHECK(depth_tv(ramp) == doctest::Approx(h * 1.0).epsilon(1e-14));

    std::mt19937_64 rng(2);
    const ImageD r = random_image(rng, 7, 5, 1);
    ImageD shifted = r;
    for (double& v : shifted.storage())
        v += 2.5;
    CHECK(depth_tv(shifted) == doctest::Approx(depth_tv(r)).epsilon(1e-12));
}

TEST_CASE("delta1") {
    std::mt19937_64 rng(3);
    ImageD ref = random_image(rng, 6, 5, 1);
    for (double& v : ref.storage())
        v += 0.5;
    CHECK(delta1(ref, ref).value == 1.0);
    ImageD scaled = ref;
    for (double& v : scaled.storage())
        v *= 1.3;
    CHECK(delta1(scaled, ref).value == 1.0);

    // Medians coincide, so the scaled ratios are 5.5/5 = 1.1 and 1.5/1 = 1.5.
    ImageD p(2, 1, 1), r(2, 1, 1);
    p[0] = 5.0, p[1] = 1.5;
    r[0] = 5.5, r[1] = 1.0;
    CHECK(delta1(p, r).value == 0.5);
    for (double& v : p.storage())
        v *= 7.0;
    CHECK(delta1(p, r).value == 0.5);

    // invariant under positive scaling of the prediction
    ImageD noisy = ref;
    std::normal_distribution<double> n(0.0, 0.3);
    for (double& v : noisy.storage())
        v = std::max(0.05, v + n(rng));
    const double d = delta1(noisy, ref).value;
    for (double k : {0.01, 0.7, 40.0}) {
        ImageD s = noisy;
        for (double& v : s.storage())
            v *= k;
        CHECK(delta1(s, ref).value == doctest::Approx(d).epsilon(1e-12));
    }

    // invalid and non-positive pixels are skipped
    ImageD valid(2, 1, 1, 1.0);
    valid[1] = 0.0;
    CHECK(delta1(p, r, &valid).value == 1.0);
    ImageD neg = p;
    neg[1] = -1.0;
    CHECK(delta1(neg, r).value == 1.0);
    const ImageD none(2, 1, 1, 0.0);
    CHECK(delta1(p, r, &none).degenerate);
}

TEST_CASE("depth ssim normalizes both maps") {
    std::mt19937_64 rng(8);
    const ImageD d = random_image(rng, 14, 12, 1);
    ImageD affine = d;
    for (double& v : affine.storage())
        v = 3.0 * v + 10.0;
    CHECK(depth_ssim(affine, d) == doctest::Approx(1.0).epsilon(1e-12));
    const ImageD flat = minmax_normalized(ImageD(3, 3, 1, 4.0));
    for (double v : flat.storage())
        CHECK(v == 0.0);
    const ImageD nd = minmax_normalized(affine);
    CHECK(*std::min_element(nd.storage().begin(), nd.storage().end()) == 0.0);
    CHECK(*std::max_element(nd.storage().begin(), nd.storage().end()) == 1.0);
}

TEST_CASE("frame rate harness") {
    CHECK(frames_per_second(10, 2.0) == 5.0);
    CHECK(code_of([] { frames_per_second(10, 0.0); }) == ErrorCode::InvalidArgument);

    std::vector<CameraView> views(3, axis_camera(4, 4, 4.0));
    int calls = 0;
    auto frame = [&](const CameraView&) {
        ++calls;
        return ImageF(4, 4, 3, 0.5f);
    };
    CHECK(code_of([&] { measure_fps(frame, views, 0); }) == ErrorCode::InvalidArgument);
    CHECK(code_of([&] { measure_fps(frame, std::span<const CameraView>{}, 1); }) == ErrorCode::InvalidArgument);
    calls = 0;
    const FpsResult r = measure_fps(frame, views, 4);
    CHECK(calls == 3 + 12); // warm-up pass excluded from the count
    CHECK(r.frames == 12);
    CHECK(r.deterministic);
    CHECK(std::isfinite(r.fps));
    CHECK(r.fps > 0.0);

    auto drifting = [&](const CameraView&) { return ImageF(4, 4, 3, static_cast<float>(++calls)); };
    CHECK_FALSE(measure_fps(drifting, views, 1).deterministic);
}

TEST_CASE("frame rate does not rise with twice the primitives") {
    std::mt19937_64 rng(12);
    const GaussianCloud<float> small = random_cloud(rng, 400).cast<float>();
    GaussianCloud<float> big = small;
    const GaussianCloud<float> extra = random_cloud(rng, 400).cast<float>();
    for (std::size_t i = 0; i < extra.size(); ++i)
        big.push_back(extra.primitive(i));
    const std::vector<CameraView> views{axis_camera(96, 96, 96.0)};
    const FpsResult a = measure_fps(small, views, 5), b = measure_fps(big, views, 5);
    CHECK(a.deterministic);
    CHECK(b.deterministic);
    if (b.fps > a.fps)
        MESSAGE("fps rose from " << a.fps << " to " << b.fps << " with twice the primitives (timing noise)");
}

TEST_CASE("reference pixels without depth are left out of depth correlation and delta1") {
    ImageF color(16, 16, 3, 0.5f), depth(16, 16, 1), ref(16, 16, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            ref.at(x, y) = x < 2 ? 0.0f : 1.0f + 0.1f * static_cast<float>(x * y + x);
            depth.at(x, y) = x < 2 ? 7.0f + static_cast<float>(y) : 3.0f * ref.at(x, y);
        }
    const ViewMetrics m = evaluate_view("v", color, depth, color, &ref, nullptr);
    REQUIRE(m.depth_corr);
    CHECK(*m.depth_corr == doctest::Approx(1.0).epsilon(1e-9));
    REQUIRE(m.delta1);
    CHECK(*m.delta1 == 1.0);
}

TEST_CASE("view metrics and reports") {
    std::mt19937_64 rng(5);
    const ImageF target = random_image(rng, 16, 16, 3).cast<float>();
    ImageF color = target;
    ImageF mask(16, 16, 1);
    for (int x = 0; x < 16; ++x)
        mask.at(x, 3) = 1.0f;
    for (int x = 0; x < 16; ++x)
        for (int c = 0; c < 3; ++c)
            color.at(x, 3, c) = 0.0f; // wrong only under the tool
    ImageF depth(16, 16, 1), ref(16, 16, 1);
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            ref.at(x, y) = 2.0f + 0.05f * static_cast<float>(x + y);
            depth.at(x, y) = 0.5f * ref.at(x, y);
        }
    const ViewMetrics m = evaluate_view("v0", color, depth, target, &ref, &mask);
    CHECK(m.psnr == kPsnrIdentical);
    CHECK(m.ssim == 1.0);
    REQUIRE(m.delta1);
    CHECK(*m.delta1 == 1.0);
    REQUIRE(m.depth_corr);
    CHECK(*m.depth_corr == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(m.depth_tv == doctest::Approx(16.0).epsilon(1e-5)); // normalized diagonal ramp: 2 * 16 * 15 / 30
    const ViewMetrics plain = evaluate_view("v1", color, depth, target, nullptr, nullptr);
    CHECK(std::isfinite(plain.psnr));
    CHECK_FALSE(plain.delta1);

    MetricReport rep;
    rep.label = "run";
    ViewMetrics a, b;
    a.psnr = 20, b.psnr = 30;
    a.ssim = 0.5, b.ssim = 0.7;
    a.depth_tv = 1, b.depth_tv = 3;
    a.delta1 = 0.8;
    rep.views = {a, b};
    rep.fps = 12.5;
    rep.aggregate();
    CHECK(rep.psnr == 25.0);
    CHECK(rep.ssim == doctest::Approx(0.6));
    CHECK(rep.depth_tv == 2.0);
    CHECK(*rep.delta1 == 0.8);
    CHECK_FALSE(rep.depth_ssim);

    const auto j = nlohmann::json::parse(report_to_json(rep));
    CHECK(j["psnr"] == 25.0);
    CHECK(j["fps"] == 12.5);
    CHECK(j["lpips"].is_null());
    CHECK(j["depth_ssim"].is_null());
    CHECK(j["views"].size() == 2);

    const std::vector<MetricReport> reports{rep};
    const std::string table = report_to_table(reports);
    const auto at = [&](const char* s) { return table.find(s); };
    CHECK(at("FPS") < at("TV"));
    CHECK(at("TV") < at("delta1"));
    CHECK(at("delta1") < at("depth-SSIM"));
    CHECK(at("depth-SSIM") < at("PSNR"));
    CHECK(at("PSNR") < at(" SSIM"));
    CHECK(table.find("25.00") != std::string::npos);
}

} // TEST_SUITE
