#pragma once

#include "sparsesplat/scene.hpp"
#include "sparsesplat/training.hpp"

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace ssplat {

inline constexpr int kManifestVersion = 1;

/// One view of `manifest.json`. Paths are relative to the manifest folder.
/// Camera matrices are world-to-camera, row-major, right-handed, +z forward.
struct ViewEntry {
    std::string id;
    std::string split = "train"; // "train" or "heldout"
    double time = 0.0;
    Intrinsics intrinsics;
    Mat3<double> rotation = Mat3<double>::Identity();
    Vec3<double> translation = Vec3<double>::Zero();
    std::string image;                // PFM, H x W x 3
    std::optional<std::string> image_png;
    std::optional<std::string> depth; // PFM, H x W x 1
    std::optional<std::string> mask;  // PFM, H x W x 1, 1 = tool
};

/// Sinusoidal rigid translation of the whole scene: amplitude * sin(2 pi f t).
struct PlantedMotion {
    Vec3<double> amplitude = Vec3<double>::Zero();
    double frequency = 1.0;

    Vec3<double> offset(double time) const;
    bool active() const { return amplitude != Vec3<double>::Zero(); }
};

struct DatasetManifest {
    std::filesystem::path root;
    int width = 0;
    int height = 0;
    double near_plane = 0.01;
    SceneBounds bounds;
    std::vector<ViewEntry> views;
    std::optional<std::string> ground_truth; // checkpoint holding the reference cloud
    PlantedMotion motion;

    std::vector<const ViewEntry*> split(const std::string& name) const;
};

struct ManifestOptions {
    /// Every view of the training split must reference an existing depth map.
    bool require_depth = false;
};

/// Parses and validates `path` (a manifest file or a folder holding
/// manifest.json). Throws MissingFile naming the view for absent files,
/// ResolutionMismatch for maps of the wrong size, VersionMismatch for an
/// unknown format version and InvalidArgument for unsorted times.
DatasetManifest load_manifest(const std::filesystem::path& path, const ManifestOptions& options = {});

void save_manifest(const std::filesystem::path& path, const DatasetManifest& manifest);

/// Builds camera views with their supervision maps loaded from disk.
/// An empty split name selects every view.
std::vector<CameraView> load_views(const DatasetManifest& manifest, const std::string& split = {});

CameraView view_from_entry(const ViewEntry& entry, int width, int height);

/// The reference cloud displaced by the planted motion at `time`.
GaussianCloud<double> displaced_cloud(const GaussianCloud<double>& cloud, const PlantedMotion& motion,
                                      double time);

// ---------------------------------------------------------------------------

struct SynthConfig {
    std::uint64_t seed = 0;
    int gaussians = 400;
    int views = 12;
    int heldout = 0;
    bool deform = false;
    bool tool = true;
    int width = 64;
    int height = 64;
    int sh_degree = kDefaultShDegree;
    double ring_radius = 2.2;
    double ring_height = 1.8;
    double arc_deg = 90.0;
    double fov_deg = 50.0;
};

struct SyntheticScene {
    GaussianCloud<double> cloud; // float-representable values
    PlantedMotion motion;
    SceneBounds bounds;
    std::vector<CameraView> views; // manifest order, with maps attached
    std::vector<std::string> splits;
};

/// Deterministic oracle scene: a textured height-field of flattened
/// Gaussians seen by cameras on an arc of a ring around the +z axis, rendered
/// in 64-bit, with a moving rectangular tool occluder painted gray.
SyntheticScene synth_scene(const SynthConfig& config);

/// Writes the scene as a dataset folder (manifest.json, PFM + PNG images,
/// depth and mask maps, reference checkpoint) and returns the manifest.
DatasetManifest synth_generate(const SynthConfig& config, const std::filesystem::path& out_dir);

} // namespace ssplat
