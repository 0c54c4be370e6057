#include "sparsesplat/common.hpp"

#include <algorithm>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace ssplat {

std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::DegenerateRotation: return "degenerate_rotation";
    case ErrorCode::NumericalDegeneracy: return "numerical_degeneracy";
    case ErrorCode::ShapeMismatch: return "shape_mismatch";
    case ErrorCode::NonFiniteAttribute: return "non_finite_attribute";
    case ErrorCode::MissingIntermediates: return "missing_intermediates";
    case ErrorCode::DegenerateStatistics: return "degenerate_statistics";
    case ErrorCode::PriorUnavailable: return "prior_unavailable";
    case ErrorCode::ProviderTimeout: return "provider_timeout";
    case ErrorCode::MalformedFrame: return "malformed_frame";
    case ErrorCode::MissingFile: return "missing_file";
    case ErrorCode::VersionMismatch: return "version_mismatch";
    case ErrorCode::ResolutionMismatch: return "resolution_mismatch";
    case ErrorCode::InvalidArgument: return "invalid_argument";
    case ErrorCode::NonFiniteLoss: return "non_finite_loss";
    case ErrorCode::Io: return "io";
    }
    return "unknown";
}

void parallel_for(std::size_t count, int threads,
                  const std::function<void(std::size_t)>& body) {
    const std::size_t workers =
        std::min<std::size_t>(count, static_cast<std::size_t>(std::max(threads, 1)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < count; ++i)
            body(i);
        return;
    }

    std::exception_ptr failure;
    std::mutex failure_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (count + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t begin = w * chunk;
        const std::size_t end = std::min(count, begin + chunk);
        pool.emplace_back([&, begin, end] {
            try {
                for (std::size_t i = begin; i < end; ++i)
                    body(i);
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure)
                    failure = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (failure)
        std::rethrow_exception(failure);
}

} // namespace ssplat
