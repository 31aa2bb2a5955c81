#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cubeseg/common.hpp"

namespace cubeseg {

/// A labeled point cloud in normalized scene units. All positions lie in
/// [0,1]^3. instance_ids use -1 for unassigned/background points; labeled ids
/// are dense 0..K-1 after canonicalization.
struct PointCloud {
  std::vector<Vec3> positions;
  std::vector<int> semantic_labels;
  std::vector<int> instance_ids;

  std::size_t size() const { return positions.size(); }

  /// Number of distinct labeled instances; assumes canonical ids.
  int instance_count() const;

  /// Throws DataError when the three arrays disagree, the cloud is empty, or
  /// a position falls outside [0,1]^3.
  void validate() const;
};

enum class ShapeKind { Box, Ellipsoid };

/// Semantic class is derived from shape kind: box = 0, ellipsoid = 1.
inline int semantic_class_of(ShapeKind kind) { return kind == ShapeKind::Box ? 0 : 1; }

struct SceneSpec {
  int instances_min = 1;
  int instances_max = 1;
  int points_min = 64;
  int points_max = 64;
  std::vector<ShapeKind> shape_kinds = {ShapeKind::Box, ShapeKind::Ellipsoid};
  double size_min = 0.1;  // per-axis extent bounds, normalized units
  double size_max = 0.3;
  double noise_sigma = 0.0;
  double min_centroid_separation = 0.0;
  int background_points = 0;  // unlabeled clutter scattered uniformly
  std::uint64_t rng_seed = 0;

  void validate() const;
};

/// Samples a synthetic scene: K instances of the requested shapes with
/// per-point jitter, plus optional background clutter. Deterministic for a
/// fixed seed. Centroid separation is rejection-sampled; throws
/// InfeasibleSpecError after bounded retries.
PointCloud generate_scene(const SceneSpec& spec);

/// Remaps labeled ids to dense 0..K-1 in order of first appearance; -1 is
/// preserved. Idempotent and partition-preserving.
std::vector<int> canonical_ids(std::span<const int> ids);
void canonicalize(PointCloud& cloud);

/// Point indices grouped per canonical instance id.
std::vector<std::vector<int>> group_by_instance(const PointCloud& cloud);

enum class CloudFormat { CsvPoints, PlyAscii };

struct LoadResult {
  PointCloud cloud;
  bool labels_absent = false;
};

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format);

/// Loads a cloud; when label columns are missing the load still succeeds with
/// instance_ids = -1 and labels_absent set. Malformed content raises
/// ParseError with the offending line number.
LoadResult load_cloud(const std::filesystem::path& path, CloudFormat format);

/// Picks the format from a file extension (.csv or .ply).
CloudFormat format_from_extension(const std::filesystem::path& path);

}  // namespace cubeseg
