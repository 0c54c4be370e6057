#pragma once

#include "sparsesplat/common.hpp"

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ssplat {

struct AdamSettings {
    double learning_rate = 1.6e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-15;
};

/// Adam over named parameter groups. Any type exposing for_each_group(name,
/// values) can be optimized; moments are created lazily per group name.
template <typename T>
class Adam {
public:
    explicit Adam(AdamSettings settings = {}) : settings_(settings) {}

    template <typename Params>
    void step(Params& params, const Params& grads) {
        std::map<std::string, const std::vector<T>*> by_name;
        grads.for_each_group([&](const std::string& name, const std::vector<T>& g) {
            by_name[name] = &g;
        });
        ++steps_;
        const T b1 = T(settings_.beta1), b2 = T(settings_.beta2);
        const T lr = T(settings_.learning_rate), eps = T(settings_.epsilon);
        const T bias1 = T(1) - T(std::pow(settings_.beta1, static_cast<double>(steps_)));
        const T bias2 = T(1) - T(std::pow(settings_.beta2, static_cast<double>(steps_)));
        params.for_each_group([&](const std::string& name, std::vector<T>& p) {
            const auto it = by_name.find(name);
            if (it == by_name.end() || it->second->size() != p.size())
                throw Error(ErrorCode::ShapeMismatch, "gradient group '" + name + "' does not match");
            const std::vector<T>& g = *it->second;
            Moments& m = moments_[name];
            m.first.resize(p.size(), T(0));
            m.second.resize(p.size(), T(0));
            for (std::size_t i = 0; i < p.size(); ++i) {
                m.first[i] = b1 * m.first[i] + (T(1) - b1) * g[i];
                m.second[i] = b2 * m.second[i] + (T(1) - b2) * g[i] * g[i];
                const T m_hat = m.first[i] / bias1;
                const T v_hat = m.second[i] / bias2;
                p[i] -= lr * m_hat / (std::sqrt(v_hat) + eps);
            }
        });
    }

    /// Rebuilds a group's moments after its primitives were reordered:
    /// entry i of the new layout takes entry source[i] of the old one, or
    /// zeros when source[i] < 0. `stride` values belong to each primitive.
    void remap(const std::string& group, std::span<const std::int64_t> source, std::size_t stride) {
        auto it = moments_.find(group);
        if (it == moments_.end())
            return;
        for (std::vector<T>* v : {&it->second.first, &it->second.second}) {
            std::vector<T> out(source.size() * stride, T(0));
            for (std::size_t i = 0; i < source.size(); ++i)
                if (source[i] >= 0)
                    for (std::size_t k = 0; k < stride; ++k)
                        out[i * stride + k] = (*v)[static_cast<std::size_t>(source[i]) * stride + k];
            *v = std::move(out);
        }
    }

    std::uint64_t steps() const noexcept { return steps_; }
    const AdamSettings& settings() const noexcept { return settings_; }
    const std::vector<T>* first_moment(const std::string& group) const {
        auto it = moments_.find(group);
        return it == moments_.end() ? nullptr : &it->second.first;
    }
    const std::vector<T>* second_moment(const std::string& group) const {
        auto it = moments_.find(group);
        return it == moments_.end() ? nullptr : &it->second.second;
    }

private:
    struct Moments {
        std::vector<T> first;
        std::vector<T> second;
    };

    AdamSettings settings_;
    std::uint64_t steps_ = 0;
    std::map<std::string, Moments> moments_;
};

} // namespace ssplat
