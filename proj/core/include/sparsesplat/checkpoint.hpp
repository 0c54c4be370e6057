#pragma once

#include "sparsesplat/deformation.hpp"
#include "sparsesplat/scene.hpp"
#include "sparsesplat/training.hpp"

#include <filesystem>
#include <optional>
#include <vector>

namespace ssplat {

/// Binary container: magic "ESCK1", u32 format version, u32 metadata length,
/// UTF-8 JSON metadata, u32 tensor count, then per tensor u32 name length,
/// name, u32 rank, u32 dims, float32 values. Everything little-endian.
inline constexpr char kCheckpointMagic[5] = {'E', 'S', 'C', 'K', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    int iteration = 0;
    std::uint64_t seed = 0;
    SceneBounds bounds;
    GaussianCloud<float> cloud;
    std::optional<DeformationModel<float>> deformation;
    HeadConfig head;                 // shape of `deformation` when present
    std::vector<CameraView> cameras; // poses only; no supervision maps

    bool operator==(const Checkpoint& other) const;
};

/// Throws Io when the file cannot be written.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);

/// Throws MissingFile, VersionMismatch (bad magic or version) or Io
/// (truncated or inconsistent contents).
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint make_checkpoint(const TrainState& state, const TrainConfig& config,
                           const SceneBounds& bounds, std::span<const CameraView> cameras);

} // namespace ssplat
