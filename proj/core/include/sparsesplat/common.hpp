#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cstddef>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>

namespace ssplat {

template <typename T> using Vec2 = Eigen::Matrix<T, 2, 1>;
template <typename T> using Vec3 = Eigen::Matrix<T, 3, 1>;
template <typename T> using Vec4 = Eigen::Matrix<T, 4, 1>;
template <typename T> using Mat2 = Eigen::Matrix<T, 2, 2>;
template <typename T> using Mat3 = Eigen::Matrix<T, 3, 3>;
template <typename T> using Mat23 = Eigen::Matrix<T, 2, 3>;

enum class ErrorCode {
    DegenerateRotation,
    NumericalDegeneracy,
    ShapeMismatch,
    NonFiniteAttribute,
    MissingIntermediates,
    DegenerateStatistics,
    PriorUnavailable,
    ProviderTimeout,
    MalformedFrame,
    MissingFile,
    VersionMismatch,
    ResolutionMismatch,
    InvalidArgument,
    NonFiniteLoss,
    Io,
};

std::string_view to_string(ErrorCode code);

/// Library-wide exception. Every failure path carries a code so the CLI can
/// emit machine-readable diagnostics.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

/// Runs body(i) for i in [0, count) on up to `threads` workers. Work is split
/// into contiguous static chunks, so any per-index output is independent of
/// the worker count.
void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& body);

} // namespace ssplat
