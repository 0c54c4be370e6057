#include "doctest.h"
#include "test_support.hpp"

#include "sparsesplat/image_io.hpp"
#include "sparsesplat/priors.hpp"
#include "sparsesplat/rasterizer.hpp"

#include <cstring>
#include <random>

using namespace ssplat;

namespace {

std::string stub(const std::string& mode) {
    return std::string("'") + SSPLAT_PROVIDER_STUB + "' " + mode;
}

template <typename T>
Image<T> random_image(std::mt19937_64& rng, int w, int h, int c, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Image<T> img(w, h, c);
    for (auto& v : img.storage())
        v = static_cast<T>(u(rng));
    return img;
}

ErrorCode expect_error(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return ErrorCode::Io;
}

} // namespace

TEST_SUITE("priors") {

TEST_CASE("linear schedule: strictly decreasing, ends below 1e-4, alpha_bar(0) = 1") {
    const auto s = DiffusionSchedule::linear();
    REQUIRE(s.steps() == 1000);
    CHECK(s.betas.front() == doctest::Approx(1e-4));
    CHECK(s.betas.back() == doctest::Approx(0.02));
    CHECK(s.alpha_bar(0) == 1.0);
    double prev = 1.0;
    for (int t = 1; t <= 1000; ++t) {
        CHECK(s.alpha_bar(t) < prev);
        CHECK(s.alpha_bar(t) > 0.0);
        prev = s.alpha_bar(t);
    }
    CHECK(s.alpha_bar(1000) < 1e-4);
    CHECK(s.alpha_bar(1) == doctest::Approx(1 - 1e-4));
    CHECK_THROWS_AS(s.alpha_bar(1001), Error);
    CHECK_THROWS_AS(s.alpha_bar(-1), Error);
}

TEST_CASE("add_noise endpoints and the scalar example") {
    std::mt19937_64 rng(1);
    const auto clean = random_image<double>(rng, 5, 4, 3);
    const auto eps = random_image<double>(rng, 5, 4, 3, -2, 2);
    CHECK(add_noise(clean, eps, 1.0) == clean);
    CHECK(add_noise(clean, eps, 0.0) == eps);
    ImageD c(1, 1, 1, 0.8), e(1, 1, 1, 0.2);
    CHECK(add_noise(c, e, 0.25)[0] == doctest::Approx(0.5 * 0.8 + 0.8660254 * 0.2).epsilon(1e-7));
    CHECK(add_noise(c, e, 0.25)[0] == doctest::Approx(0.5732051).epsilon(1e-7));
    CHECK(expect_error([&] { add_noise(c, eps, 0.5); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("noised image has mean sqrt(alpha_bar) * clean") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(5);
    const ImageD clean(2, 1, 1, 0.6);
    const int draws = 10000;
    const double ab = 0.3;
    double sum = 0;
    for (int k = 0; k < draws; ++k) {
        const auto d = sampler.draw<double>(2, 1, 1, sched);
        sum += add_noise(clean, d.eps, ab)[0];
    }
    const double sigma = std::sqrt(1 - ab) / std::sqrt(static_cast<double>(draws));
    CHECK(std::abs(sum / draws - std::sqrt(ab) * 0.6) < 3 * sigma);
}

TEST_CASE("noise sampler is seeded and covers 1..T") {
    const auto sched = DiffusionSchedule::linear(10);
    NoiseSampler a(9), b(9), c(10);
    int lo = 100, hi = 0;
    for (int k = 0; k < 200; ++k) {
        const auto da = a.draw<float>(4, 4, 3, sched);
        const auto db = b.draw<float>(4, 4, 3, sched);
        CHECK(da.t == db.t);
        CHECK(da.eps == db.eps);
        CHECK(da.index == static_cast<std::uint64_t>(k));
        lo = std::min(lo, da.t);
        hi = std::max(hi, da.t);
    }
    CHECK(lo == 1);
    CHECK(hi == 10);
    CHECK(a.draw<float>(4, 4, 3, sched).eps != c.draw<float>(4, 4, 3, sched).eps);
}

TEST_CASE("oracle denoiser: zero residual, loss and gradient on every image") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(3);
    OracleDenoiser oracle;
    std::mt19937_64 rng(4);
    for (int k = 0; k < 10; ++k) {
        const auto img = random_image<float>(rng, 7 + k, 5, 3);
        const auto draw = sampler.draw<float>(img.width(), 5, 3, sched);
        const auto r = sds_residual(img, oracle, sched, draw);
        CHECK(r.loss == 0.0f);
        for (float g : r.grad.storage())
            CHECK(g == 0.0f);
    }
}

TEST_CASE("zero denoiser: loss is the mean squared recorded noise") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(42);
    ZeroDenoiser zero;
    std::mt19937_64 rng(5);
    const auto img = random_image<float>(rng, 64, 48, 3);
    const auto draw = sampler.draw<float>(64, 48, 3, sched);
    const auto r = sds_residual(img, zero, sched, draw);
    double expect = 0;
    for (float e : draw.eps.storage())
        expect += static_cast<double>(e) * e;
    expect /= static_cast<double>(draw.eps.size());
    CHECK(std::abs(r.loss - expect) < 1e-7);
}

TEST_CASE("tool pixels are excluded from the SDS loss and gradient") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(6);
    ZeroDenoiser zero;
    ImageF img(4, 2, 3, 0.5f);
    ImageF mask(4, 2, 1, 0.0f);
    mask.at(1, 0) = 1.0f;
    const auto draw = sampler.draw<float>(4, 2, 3, sched);
    const auto r = sds_residual(img, zero, sched, draw, &mask);
    CHECK(r.valid == 7 * 3);
    for (int c = 0; c < 3; ++c)
        CHECK(r.grad.at(1, 0, c) == 0.0f);
    double expect = 0;
    for (std::size_t p = 0; p < 8; ++p)
        if (p != 1)
            for (int c = 0; c < 3; ++c)
                expect += std::pow(static_cast<double>(draw.eps[p * 3 + c]), 2);
    CHECK(r.loss == doctest::Approx(expect / 21).epsilon(1e-6));
}

TEST_CASE("SDS gradient is the derivative of the surrogate with the denoiser frozen") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(7);
    std::mt19937_64 rng(8);
    auto img = random_image<double>(rng, 6, 5, 3);
    const auto draw = sampler.draw<double>(6, 5, 3, sched);
    // A fixed linear "denoiser" so the residual is generic and nonzero.
    class Affine final : public DenoiserProvider {
    public:
        ImageD predict_noise(const DenoiseRequest& r) override {
            ImageD out = *r.noised;
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = 0.3 * out[i] - 0.1 * static_cast<double>(i % 5);
            return out;
        }
        std::string kind() const override { return "affine"; }
    } affine;
    ImageF mask(6, 5, 1, 0.0f);
    mask.at(2, 2) = 1.0f;
    const auto r = sds_residual(img, affine, sched, draw, &mask);
    for (std::size_t i = 0; i < img.size(); ++i) {
        const double numeric = testkit::central_difference(img.storage(), i, 1e-5, [&] {
            return sds_surrogate(img, r.residual, draw, sched, &mask);
        });
        CHECK(testkit::relative_error(r.grad[i], numeric, 1e-9) < 1e-4);
    }
    CHECK(r.grad.at(2, 2, 1) == 0.0);
}

TEST_CASE("failing denoiser surfaces as prior-unavailable") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(9);
    const ImageF img(3, 3, 3, 0.2f);
    const auto draw = sampler.draw<float>(3, 3, 3, sched);
    testkit::TempDir dir("denoise");
    FileDenoiser missing(dir.path());
    CHECK(expect_error([&] { sds_residual(img, missing, sched, draw, nullptr, "nope"); }) ==
          ErrorCode::PriorUnavailable);
    SubprocessDenoiser garbage(stub("garbage"));
    CHECK(expect_error([&] { sds_residual(img, garbage, sched, draw); }) == ErrorCode::PriorUnavailable);
}

TEST_CASE("Pearson correlation examples") {
    const ImageD a = [] {
        ImageD m(4, 1, 1);
        for (int i = 0; i < 4; ++i)
            m[i] = i + 1;
        return m;
    }();
    ImageD rev(4, 1, 1), affine(4, 1, 1);
    for (int i = 0; i < 4; ++i) {
        rev[i] = 4 - i;
        affine[i] = 2 * a[i] + 5;
    }
    CHECK(pearson_corr(a, a).value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson_corr(a, affine).value == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(pearson_corr(a, rev).value == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(geo_loss(a, a).loss == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(geo_loss(a, rev).loss == doctest::Approx(2.0).epsilon(1e-12));
}

TEST_CASE("Pearson correlation is symmetric and positive-affine invariant") {
    std::mt19937_64 rng(10);
    for (int k = 0; k < 10; ++k) {
        const auto a = random_image<double>(rng, 9, 7, 1, 0.5, 4.0);
        const auto b = random_image<double>(rng, 9, 7, 1, 0.5, 4.0);
        ImageD valid(9, 7, 1, 1.0);
        valid[3] = valid[10] = 0.0;
        ImageD scaled = a;
        for (double& v : scaled.storage())
            v = 3.7 * v - 11.0;
        const double r = pearson_corr(a, b, &valid).value;
        CHECK(std::abs(r - pearson_corr(b, a, &valid).value) < 1e-14);
        CHECK(std::abs(r - pearson_corr(scaled, b, &valid).value) < 1e-12);
        CHECK(r >= -1.0);
        CHECK(r <= 1.0);
    }
}

TEST_CASE("Pearson correlation ignores invalid pixels") {
    std::mt19937_64 rng(11);
    auto a = random_image<double>(rng, 6, 6, 1);
    const auto b = random_image<double>(rng, 6, 6, 1);
    ImageD valid(6, 6, 1, 1.0);
    valid[7] = 0.0;
    const double before = pearson_corr(a, b, &valid).value;
    a[7] = 1e6;
    CHECK(pearson_corr(a, b, &valid).value == before);
}

TEST_CASE("degenerate statistics give zero loss and zero gradient") {
    const ImageD flat(5, 5, 1, 2.0);
    std::mt19937_64 rng(12);
    const auto b = random_image<double>(rng, 5, 5, 1);
    CHECK(pearson_corr(flat, b).degenerate);
    const auto g = geo_loss(flat, b);
    CHECK(g.degenerate);
    CHECK(g.loss == 0.0);
    for (double v : g.grad.storage())
        CHECK(v == 0.0);
    ImageD one_valid(5, 5, 1, 0.0);
    one_valid[4] = 1.0;
    CHECK(pearson_corr(b, b, &one_valid).degenerate);
}

TEST_CASE("geo loss gradient matches finite differences") {
    std::mt19937_64 rng(13);
    for (int k = 0; k < 3; ++k) {
        auto a = random_image<double>(rng, 8, 8, 1, 1.0, 3.0);
        const auto b = random_image<double>(rng, 8, 8, 1, 1.0, 3.0);
        ImageD valid(8, 8, 1, 1.0);
        valid[k * 9] = 0.0;
        const auto g = geo_loss(a, b, &valid);
        for (std::size_t i = 0; i < a.size(); ++i) {
            const double numeric = testkit::central_difference(a.storage(), i, 1e-6, [&] {
                return 1.0 - testkit::reference_pearson_plain(a, b, valid);
            });
            CHECK(testkit::relative_error(g.grad[i], numeric, 1e-8) < 1e-5);
        }
        CHECK(g.grad[k * 9] == 0.0);
    }
}

TEST_CASE("frame codec round trip, partial frames and corrupt headers") {
    std::mt19937_64 rng(14);
    const auto img = random_image<float>(rng, 3, 2, 3, -5, 5);
    const auto bytes = encode_frame(img);
    CHECK(bytes.size() == 17 + img.size() * 4);
    CHECK(std::memcmp(bytes.data(), "ESPR1", 5) == 0);
    CHECK(static_cast<int>(bytes[5]) == 3); // little-endian width
    ImageF out;
    CHECK(decode_frame(bytes, out) == bytes.size());
    CHECK(out == img);
    CHECK(decode_frame(std::span(bytes).first(bytes.size() - 1), out) == 0);
    CHECK(decode_frame(std::span(bytes).first(4), out) == 0);
    auto bad = bytes;
    bad[0] = std::byte{'X'};
    CHECK(expect_error([&] { decode_frame(bad, out); }) == ErrorCode::MalformedFrame);
    auto huge = bytes;
    for (int i = 5; i < 17; ++i)
        huge[i] = std::byte{0xff};
    CHECK(expect_error([&] { decode_frame(huge, out); }) == ErrorCode::MalformedFrame);
}

TEST_CASE("subprocess echo returns the request unchanged") {
    std::mt19937_64 rng(15);
    SubprocessChannel channel(stub("echo"));
    for (int k = 0; k < 3; ++k) {
        const auto img = random_image<float>(rng, 5 + k, 3, 3, -1e3, 1e3);
        const std::vector<ImageF> req{img};
        CHECK(provider_roundtrip(channel, req) == img);
    }
    // Larger than a pipe buffer in both directions.
    const auto big = random_image<float>(rng, 256, 200, 3);
    CHECK(provider_roundtrip(channel, std::vector<ImageF>{big}) == big);
}

TEST_CASE("subprocess denoiser and depth adapters") {
    const auto sched = DiffusionSchedule::linear();
    NoiseSampler sampler(16);
    std::mt19937_64 rng(17);
    const auto img = random_image<float>(rng, 8, 6, 3);
    const auto draw = sampler.draw<float>(8, 6, 3, sched);

    SubprocessDenoiser zero(stub("zero-denoise"));
    ZeroDenoiser local;
    CHECK(sds_residual(img, zero, sched, draw).loss == sds_residual(img, local, sched, draw).loss);

    SubprocessDenoiser echo(stub("echo-denoise"));
    const auto noised = add_noise(img, draw.eps, sched.alpha_bar(draw.t));
    const auto r = sds_residual(img, echo, sched, draw);
    for (std::size_t i = 0; i < img.size(); ++i)
        CHECK(r.residual[i] == noised[i] - draw.eps[i]);

    const std::vector<std::byte> payload{std::byte{1}, std::byte{0xab}, std::byte{7}};
    SubprocessDenoiser cond(stub("conditioning"), payload);
    ImageD nd = img.cast<double>();
    DenoiseRequest req;
    req.noised = &nd;
    req.t = 10;
    req.alpha_bar = sched.alpha_bar(10);
    CHECK(cond.predict_noise(req)[0] == 3.0);

    SubprocessDepth depth(stub("depth"));
    CameraView v = testkit::axis_camera(8, 6, 8);
    DepthRequest dr;
    dr.view = &v;
    dr.rendered_color = &nd;
    const ImageD d = depth.predict_depth(dr);
    CHECK(d.channels() == 1);
    CHECK(d[0] == doctest::Approx((nd[0] + nd[1] + nd[2]) / 3).epsilon(1e-6));
}

TEST_CASE("subprocess failures have distinct codes") {
    const std::vector<ImageF> req{ImageF(2, 2, 3, 0.5f)};
    {
        SubprocessChannel hang(stub("hang"), std::chrono::milliseconds(300));
        CHECK(expect_error([&] { hang.exchange(req); }) == ErrorCode::ProviderTimeout);
    }
    {
        SubprocessChannel garbage(stub("garbage"));
        CHECK(expect_error([&] { garbage.exchange(req); }) == ErrorCode::MalformedFrame);
    }
    {
        SubprocessChannel quits(stub("exit"));
        CHECK(expect_error([&] { quits.exchange(req); }) == ErrorCode::MalformedFrame);
    }
    {
        SubprocessDepth wrong(stub("wrong-shape"));
        CameraView v = testkit::axis_camera(2, 2, 2);
        const ImageD c(2, 2, 3, 0.1);
        DepthRequest dr;
        dr.view = &v;
        dr.rendered_color = &c;
        CHECK(expect_error([&] { wrong.predict_depth(dr); }) == ErrorCode::MalformedFrame);
    }
}

TEST_CASE("file providers return stored maps bit-exactly") {
    testkit::TempDir dir("fileprov");
    ImageF map(2, 2, 1);
    map[0] = 0.125f;
    map[1] = 3.5f;
    map[2] = -7.0f;
    map[3] = 1e-20f;
    write_pfm(dir / "view_a.pfm", map);
    FileDepth depth(dir.path());
    CHECK(depth.has_view("view_a"));
    CHECK_FALSE(depth.has_view("view_b"));
    CameraView v = testkit::axis_camera(2, 2, 2);
    DepthRequest dr;
    dr.view = &v;
    dr.view_key = "view_a";
    const ImageD got = depth.predict_depth(dr);
    for (int i = 0; i < 4; ++i)
        CHECK(got[i] == static_cast<double>(map[i]));
    dr.view_key = "view_b";
    CHECK(expect_error([&] { depth.predict_depth(dr); }) == ErrorCode::MissingFile);
    CameraView big = testkit::axis_camera(3, 2, 2);
    dr.view = &big;
    dr.view_key = "view_a";
    CHECK(expect_error([&] { depth.predict_depth(dr); }) == ErrorCode::ResolutionMismatch);

    ImageF noise(2, 2, 3, 0.25f);
    write_pfm(dir / "n.pfm", noise);
    FileDenoiser den(dir.path());
    DenoiseRequest req;
    req.view_key = "n";
    CHECK(den.predict_noise(req) == noise.cast<double>());
}

TEST_CASE("oracle depth provider equals the renderer's normalized depth") {
    std::mt19937_64 rng(18);
    const auto s = testkit::random_scene(rng, 30, 20, 16);
    OracleDepth oracle([&](double) { return s.cloud; });
    DepthRequest dr;
    dr.view = &s.view;
    const ImageD d = oracle.predict_depth(dr);
    const ImageD ref = render(s.cloud, s.view).depth;
    for (std::size_t i = 0; i < d.size(); ++i)
        CHECK(std::abs(d[i] - ref[i]) < 1e-6);
    OracleDepth warped([&](double) { return s.cloud; }, 2.0, 0.5);
    const ImageD w = warped.predict_depth(dr);
    CHECK(w[50] == doctest::Approx(2.0 * ref[50] + 0.5));
}

} // TEST_SUITE
