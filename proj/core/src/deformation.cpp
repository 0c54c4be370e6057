#include "sparsesplat/deformation.hpp"

#include <algorithm>
#include <cmath>

namespace ssplat {

namespace {

// Axis pairs (first, second) per plane; 3 denotes time.
constexpr std::array<std::array<int, 2>, kPlaneCount> kPlaneAxes{{
    {0, 1}, // XY
    {0, 2}, // XZ
    {1, 2}, // YZ
    {0, 3}, // XT
    {1, 3}, // YT
    {2, 3}, // ZT
}};
// Spatial plane -> complementary space-time plane.
constexpr std::array<std::array<int, 2>, 3> kPairs{{{0, 5}, {1, 4}, {2, 3}}};

bool is_spatial(int plane) { return plane < 3; }

} // namespace

template <typename T>
EncodingField<T> EncodingField<T>::create(const EncodingConfig& config, std::mt19937_64& rng) {
    EncodingField<T> f;
    f.resolutions = config.resolutions;
    f.features = config.features;
    f.bounds_min = config.bounds_min.cast<T>();
    f.bounds_max = config.bounds_max.cast<T>();
    std::uniform_real_distribution<double> init(0.1, 0.5);
    for (int res : f.resolutions) {
        for (int p = 0; p < kPlaneCount; ++p) {
            std::vector<T> values(static_cast<std::size_t>(res) * res * f.features, T(1));
            if (is_spatial(p))
                for (auto& v : values)
                    v = static_cast<T>(init(rng));
            f.planes.push_back(std::move(values));
        }
    }
    f.validate();
    return f;
}

template <typename T>
void EncodingField<T>::validate() const {
    if (features <= 0 || resolutions.empty())
        throw Error(ErrorCode::InvalidArgument, "encoding needs at least one level and feature");
    for (int a = 0; a < 3; ++a)
        if (!(bounds_min[a] < bounds_max[a]))
            throw Error(ErrorCode::InvalidArgument, "encoding bounds must satisfy min < max");
    if (planes.size() != resolutions.size() * kPlaneCount)
        throw Error(ErrorCode::ShapeMismatch, "encoding plane count does not match levels");
    for (int l = 0; l < levels(); ++l) {
        if (resolutions[l] < 2)
            throw Error(ErrorCode::InvalidArgument, "plane resolution must be at least 2");
        const std::size_t expect = static_cast<std::size_t>(resolutions[l]) * resolutions[l] * features;
        for (int p = 0; p < kPlaneCount; ++p)
            if (planes[l * kPlaneCount + p].size() != expect)
                throw Error(ErrorCode::ShapeMismatch, "encoding plane has the wrong size");
    }
}

template <typename T>
std::vector<T> encode(const EncodingField<T>& field, const Vec3<T>& position, T time,
                      EncodingCache<T>* cache) {
    const int h = field.features;
    std::array<T, 4> coord{};
    std::array<T, 4> coord_scale{};
    for (int a = 0; a < 3; ++a) {
        const T extent = field.bounds_max[a] - field.bounds_min[a];
        const T u = (position[a] - field.bounds_min[a]) / extent;
        coord[a] = std::clamp(u, T(0), T(1));
        coord_scale[a] = (u > T(0) && u < T(1)) ? T(1) / extent : T(0);
    }
    coord[3] = std::clamp(time, T(0), T(1));
    coord_scale[3] = (time > T(0) && time < T(1)) ? T(1) : T(0);

    std::vector<T> latent(static_cast<std::size_t>(h) * field.levels(), T(0));
    if (cache) {
        cache->samples.resize(static_cast<std::size_t>(field.levels()) * kPlaneCount);
        cache->plane_values.assign(cache->samples.size() * h, T(0));
    }
    std::vector<T> values(static_cast<std::size_t>(kPlaneCount) * h);

    for (int l = 0; l < field.levels(); ++l) {
        const int res = field.resolutions[l];
        for (int p = 0; p < kPlaneCount; ++p) {
            const auto [axis_a, axis_b] = kPlaneAxes[p];
            const T ga = coord[axis_a] * T(res - 1);
            const T gb = coord[axis_b] * T(res - 1);
            const int ia = std::min(static_cast<int>(std::floor(ga)), res - 2);
            const int ib = std::min(static_cast<int>(std::floor(gb)), res - 2);
            const T fa = ga - T(ia);
            const T fb = gb - T(ib);
            const auto& plane = field.planes[l * kPlaneCount + p];
            const std::array<std::uint32_t, 4> corner{
                static_cast<std::uint32_t>((ib * res + ia) * h),
                static_cast<std::uint32_t>((ib * res + ia + 1) * h),
                static_cast<std::uint32_t>(((ib + 1) * res + ia) * h),
                static_cast<std::uint32_t>(((ib + 1) * res + ia + 1) * h)};
            const std::array<T, 4> weight{(T(1) - fa) * (T(1) - fb), fa * (T(1) - fb),
                                          (T(1) - fa) * fb, fa * fb};
            for (int f = 0; f < h; ++f) {
                T v = T(0);
                for (int c = 0; c < 4; ++c)
                    v += weight[c] * plane[corner[c] + f];
                values[p * h + f] = v;
            }
            if (cache) {
                auto& s = cache->samples[l * kPlaneCount + p];
                s.corner = corner;
                s.weight = weight;
                s.frac_a = fa;
                s.frac_b = fb;
                s.scale_a = coord_scale[axis_a] * T(res - 1);
                s.scale_b = coord_scale[axis_b] * T(res - 1);
                s.axis_a = axis_a;
                s.axis_b = axis_b;
                std::copy(values.begin() + p * h, values.begin() + (p + 1) * h,
                          cache->plane_values.begin() + (l * kPlaneCount + p) * h);
            }
        }
        for (int f = 0; f < h; ++f) {
            T sum = T(0);
            for (const auto& [sp, st] : kPairs)
                sum += values[sp * h + f] * values[st * h + f];
            latent[l * h + f] = sum;
        }
    }
    return latent;
}

namespace {

// Backward of encode: scatters dL/dlatent into plane gradients and returns
// dL/dposition.
template <typename T>
Vec3<T> encode_backward(const EncodingField<T>& field, const EncodingCache<T>& cache,
                        std::span<const T> d_latent, EncodingField<T>& d_field) {
    const int h = field.features;
    Vec3<T> d_pos = Vec3<T>::Zero();
    std::vector<T> d_values(static_cast<std::size_t>(kPlaneCount) * h);
    for (int l = 0; l < field.levels(); ++l) {
        const T* vals = cache.plane_values.data() + static_cast<std::size_t>(l) * kPlaneCount * h;
        for (int f = 0; f < h; ++f) {
            const T g = d_latent[l * h + f];
            for (const auto& [sp, st] : kPairs) {
                d_values[sp * h + f] = g * vals[st * h + f];
                d_values[st * h + f] = g * vals[sp * h + f];
            }
        }
        for (int p = 0; p < kPlaneCount; ++p) {
            const auto& s = cache.samples[l * kPlaneCount + p];
            const auto& plane = field.planes[l * kPlaneCount + p];
            auto& d_plane = d_field.planes[l * kPlaneCount + p];
            T d_ga = T(0), d_gb = T(0);
            for (int f = 0; f < h; ++f) {
                const T g = d_values[p * h + f];
                if (g == T(0))
                    continue;
                for (int c = 0; c < 4; ++c)
                    d_plane[s.corner[c] + f] += s.weight[c] * g;
                const T v00 = plane[s.corner[0] + f], v10 = plane[s.corner[1] + f];
                const T v01 = plane[s.corner[2] + f], v11 = plane[s.corner[3] + f];
                d_ga += g * ((T(1) - s.frac_b) * (v10 - v00) + s.frac_b * (v11 - v01));
                d_gb += g * ((T(1) - s.frac_a) * (v01 - v00) + s.frac_a * (v11 - v10));
            }
            if (s.axis_a < 3)
                d_pos[s.axis_a] += d_ga * s.scale_a;
            if (s.axis_b < 3)
                d_pos[s.axis_b] += d_gb * s.scale_b;
        }
    }
    return d_pos;
}

template <typename T>
void dense_forward(const DenseLayer<T>& layer, std::span<const T> in, std::span<T> out) {
    for (int o = 0; o < layer.outputs; ++o) {
        T acc = layer.bias[o];
        const T* row = layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
        for (int i = 0; i < layer.inputs; ++i)
            acc += row[i] * in[i];
        out[o] = acc;
    }
}

// Accumulates parameter gradients and adds dL/din into d_in.
template <typename T>
void dense_backward(const DenseLayer<T>& layer, std::span<const T> in, std::span<const T> d_out,
                    DenseLayer<T>& d_layer, std::span<T> d_in) {
    for (int o = 0; o < layer.outputs; ++o) {
        const T g = d_out[o];
        if (g == T(0))
            continue;
        d_layer.bias[o] += g;
        const T* row = layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
        T* d_row = d_layer.weight.data() + static_cast<std::size_t>(o) * layer.inputs;
        for (int i = 0; i < layer.inputs; ++i) {
            d_row[i] += g * in[i];
            d_in[i] += g * row[i];
        }
    }
}

template <typename T>
DenseLayer<T> make_layer(int inputs, int outputs, std::mt19937_64* rng) {
    DenseLayer<T> layer;
    layer.inputs = inputs;
    layer.outputs = outputs;
    layer.weight.assign(static_cast<std::size_t>(inputs) * outputs, T(0));
    layer.bias.assign(outputs, T(0));
    if (rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(inputs));
        std::uniform_real_distribution<double> init(-bound, bound);
        for (auto& w : layer.weight)
            w = static_cast<T>(init(*rng));
        for (auto& b : layer.bias)
            b = static_cast<T>(init(*rng));
    }
    return layer;
}

template <typename U, typename T>
DenseLayer<U> cast_layer(const DenseLayer<T>& l) {
    DenseLayer<U> out;
    out.inputs = l.inputs;
    out.outputs = l.outputs;
    out.weight.assign(l.weight.begin(), l.weight.end());
    out.bias.assign(l.bias.begin(), l.bias.end());
    return out;
}

template <typename T>
DenseLayer<T> zero_layer(const DenseLayer<T>& l) {
    return make_layer<T>(l.inputs, l.outputs, nullptr);
}

} // namespace

template <typename T>
DeformationHead<T> DeformationHead<T>::create(int input_width, const HeadConfig& config,
                                              std::mt19937_64& rng) {
    if (input_width <= 0 || config.hidden_layers < 0 || config.hidden_width <= 0)
        throw Error(ErrorCode::InvalidArgument, "invalid deformation head configuration");
    DeformationHead<T> head;
    int width = input_width;
    for (int i = 0; i < config.hidden_layers; ++i) {
        head.hidden.push_back(make_layer<T>(width, config.hidden_width, &rng));
        width = config.hidden_width;
    }
    head.position_head = make_layer<T>(width, 3, nullptr);
    head.rotation_head = make_layer<T>(width, 4, nullptr);
    head.scale_head = make_layer<T>(width, 3, nullptr);
    return head;
}

template <typename T>
DeformationDelta<T> deform(const DeformationHead<T>& head, std::span<const T> latent,
                           HeadCache<T>* cache) {
    if (static_cast<int>(latent.size()) != head.input_width())
        throw Error(ErrorCode::ShapeMismatch, "latent width does not match the deformation head");
    std::vector<T> current(latent.begin(), latent.end());
    if (cache) {
        cache->activations.clear();
        cache->activations.push_back(current);
    }
    for (const auto& layer : head.hidden) {
        std::vector<T> next(layer.outputs);
        dense_forward<T>(layer, current, next);
        for (auto& v : next)
            v = std::max(v, T(0));
        current = std::move(next);
        if (cache)
            cache->activations.push_back(current);
    }
    DeformationDelta<T> d;
    dense_forward<T>(head.position_head, current, std::span<T>(d.position.data(), 3));
    dense_forward<T>(head.rotation_head, current, std::span<T>(d.rotation.data(), 4));
    dense_forward<T>(head.scale_head, current, std::span<T>(d.log_scale.data(), 3));
    return d;
}

namespace {

// Returns dL/dlatent; accumulates head parameter gradients.
template <typename T>
std::vector<T> head_backward(const DeformationHead<T>& head, const HeadCache<T>& cache,
                             const DeformationDelta<T>& d_delta, DeformationHead<T>& d_head) {
    const auto& last = cache.activations.back();
    std::vector<T> d_current(last.size(), T(0));
    dense_backward<T>(head.position_head, last,
                      std::span<const T>(d_delta.position.data(), 3), d_head.position_head,
                      d_current);
    dense_backward<T>(head.rotation_head, last,
                      std::span<const T>(d_delta.rotation.data(), 4), d_head.rotation_head,
                      d_current);
    dense_backward<T>(head.scale_head, last,
                      std::span<const T>(d_delta.log_scale.data(), 3), d_head.scale_head,
                      d_current);
    for (int i = static_cast<int>(head.hidden.size()) - 1; i >= 0; --i) {
        const auto& out = cache.activations[i + 1];
        for (std::size_t j = 0; j < out.size(); ++j)
            if (!(out[j] > T(0)))
                d_current[j] = T(0);
        const auto& in = cache.activations[i];
        std::vector<T> d_in(in.size(), T(0));
        dense_backward<T>(head.hidden[i], in, d_current, d_head.hidden[i], d_in);
        d_current = std::move(d_in);
    }
    return d_current;
}

} // namespace

template <typename T>
DeformationModel<T> DeformationModel<T>::create(const EncodingConfig& enc, const HeadConfig& head,
                                                std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    DeformationModel<T> m;
    m.field = EncodingField<T>::create(enc, rng);
    m.head = DeformationHead<T>::create(m.field.output_width(), head, rng);
    return m;
}

template <typename T>
DeformationModel<T> DeformationModel<T>::zeros_like() const {
    DeformationModel<T> z;
    z.field = field;
    for (auto& p : z.field.planes)
        std::fill(p.begin(), p.end(), T(0));
    for (const auto& l : head.hidden)
        z.head.hidden.push_back(zero_layer(l));
    z.head.position_head = zero_layer(head.position_head);
    z.head.rotation_head = zero_layer(head.rotation_head);
    z.head.scale_head = zero_layer(head.scale_head);
    return z;
}

template <typename T>
template <typename U>
DeformationModel<U> DeformationModel<T>::cast() const {
    DeformationModel<U> out;
    out.field.resolutions = field.resolutions;
    out.field.features = field.features;
    out.field.bounds_min = field.bounds_min.template cast<U>();
    out.field.bounds_max = field.bounds_max.template cast<U>();
    for (const auto& p : field.planes)
        out.field.planes.emplace_back(p.begin(), p.end());
    for (const auto& l : head.hidden)
        out.head.hidden.push_back(cast_layer<U>(l));
    out.head.position_head = cast_layer<U>(head.position_head);
    out.head.rotation_head = cast_layer<U>(head.rotation_head);
    out.head.scale_head = cast_layer<U>(head.scale_head);
    return out;
}

template <typename T>
GaussianCloud<T> apply_deformation(const GaussianCloud<T>& canonical,
                                   const DeformationModel<T>& model, T time,
                                   DeformationCache<T>* cache, int threads) {
    GaussianCloud<T> out = canonical;
    const std::size_t n = canonical.size();
    if (cache) {
        cache->time = time;
        cache->encodings.assign(n, {});
        cache->heads.assign(n, {});
    }
    parallel_for(n, threads, [&](std::size_t i) {
        const std::vector<T> latent = encode<T>(model.field, canonical.mean(i), time,
                                                cache ? &cache->encodings[i] : nullptr);
        const DeformationDelta<T> d =
            deform<T>(model.head, latent, cache ? &cache->heads[i] : nullptr);
        for (int a = 0; a < 3; ++a) {
            out.means[3 * i + a] = canonical.means[3 * i + a] + d.position[a];
            out.log_scales[3 * i + a] = canonical.log_scales[3 * i + a] + d.log_scale[a];
        }
        for (int a = 0; a < 4; ++a)
            out.rotations[4 * i + a] = canonical.rotations[4 * i + a] + d.rotation[a];
    });
    return out;
}

template <typename T>
void deformation_backward(const GaussianCloud<T>& canonical, const DeformationModel<T>& model,
                          const DeformationCache<T>& cache, const GaussianCloud<T>& deformed_grads,
                          GaussianCloud<T>& canonical_grads, DeformationModel<T>& model_grads) {
    const std::size_t n = canonical.size();
    if (cache.encodings.size() != n || deformed_grads.size() != n || canonical_grads.size() != n)
        throw Error(ErrorCode::MissingIntermediates, "deformation cache does not match the cloud");

    // Attribute gradients pass straight through the additive offsets.
    for (std::size_t k = 0; k < canonical_grads.means.size(); ++k)
        canonical_grads.means[k] += deformed_grads.means[k];
    for (std::size_t k = 0; k < canonical_grads.rotations.size(); ++k)
        canonical_grads.rotations[k] += deformed_grads.rotations[k];
    for (std::size_t k = 0; k < canonical_grads.log_scales.size(); ++k)
        canonical_grads.log_scales[k] += deformed_grads.log_scales[k];
    for (std::size_t k = 0; k < canonical_grads.opacity_logits.size(); ++k)
        canonical_grads.opacity_logits[k] += deformed_grads.opacity_logits[k];
    for (std::size_t k = 0; k < canonical_grads.sh.size(); ++k)
        canonical_grads.sh[k] += deformed_grads.sh[k];

    // Sequential over primitives so the shared parameter sums are bit-stable.
    for (std::size_t i = 0; i < n; ++i) {
        DeformationDelta<T> d;
        d.position = deformed_grads.mean(i);
        d.rotation = deformed_grads.rotation(i);
        d.log_scale = deformed_grads.log_scale(i);
        if (d.position.isZero() && d.rotation.isZero() && d.log_scale.isZero())
            continue;
        const std::vector<T> d_latent = head_backward<T>(model.head, cache.heads[i], d, model_grads.head);
        const Vec3<T> d_pos =
            encode_backward<T>(model.field, cache.encodings[i], d_latent, model_grads.field);
        for (int a = 0; a < 3; ++a)
            canonical_grads.means[3 * i + a] += d_pos[a];
    }
}

#define SSPLAT_INSTANTIATE(T)                                                                   \
    template struct EncodingField<T>;                                                           \
    template struct DeformationHead<T>;                                                         \
    template struct DeformationModel<T>;                                                        \
    template std::vector<T> encode<T>(const EncodingField<T>&, const Vec3<T>&, T,               \
                                      EncodingCache<T>*);                                       \
    template DeformationDelta<T> deform<T>(const DeformationHead<T>&, std::span<const T>,       \
                                           HeadCache<T>*);                                      \
    template GaussianCloud<T> apply_deformation<T>(const GaussianCloud<T>&,                     \
                                                   const DeformationModel<T>&, T,               \
                                                   DeformationCache<T>*, int);                  \
    template void deformation_backward<T>(const GaussianCloud<T>&, const DeformationModel<T>&,  \
                                          const DeformationCache<T>&, const GaussianCloud<T>&,  \
                                          GaussianCloud<T>&, DeformationModel<T>&);

SSPLAT_INSTANTIATE(float)
SSPLAT_INSTANTIATE(double)
#undef SSPLAT_INSTANTIATE

template DeformationModel<double> DeformationModel<float>::cast<double>() const;
template DeformationModel<float> DeformationModel<double>::cast<float>() const;
template DeformationModel<float> DeformationModel<float>::cast<float>() const;
template DeformationModel<double> DeformationModel<double>::cast<double>() const;

} // namespace ssplat
