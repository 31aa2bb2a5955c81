#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cubeseg/common.hpp"
#include "cubeseg/scene.hpp"

namespace cubeseg {

/// Uniform quantization of [0,1]^3 into n_s x n_s x n_s cubes. Cells are
/// half-open [a,b) with the last cell closed, so the cube tiles exactly.
struct CubeGrid {
  int n_s = 2;

  explicit CubeGrid(int cells_per_axis) : n_s(cells_per_axis) {
    if (n_s < 2) throw ConfigError("grid needs at least 2 cells per axis");
  }

  double edge() const { return 1.0 / n_s; }
  int cell_count() const { return n_s * n_s * n_s; }
};

struct CubeIndex {
  int x = 0;
  int y = 0;
  int z = 0;
  bool operator==(const CubeIndex&) const = default;
};

/// Cube containing a position; the boundary value 1.0 maps to the last cell.
CubeIndex cube_of(Vec3 position, const CubeGrid& grid);

/// Flat index j = x*n_s^2 + y*n_s + z.
int flatten_index(CubeIndex idx, int n_s);
int flatten_index(int x, int y, int z, int n_s);
CubeIndex unflatten_index(int flat, int n_s);

/// Geometric center of a cube.
Vec3 cube_center(CubeIndex idx, int n_s);

/// Mean position per canonical instance id. Requires >= 1 labeled instance.
std::vector<Vec3> instance_centroids(const PointCloud& cloud);

/// Cubes whose centers fall inside the axis-aligned box centered at the
/// instance centroid with per-axis extent scale * (instance bbox extent).
/// The centroid's own cube is always included. Returns sorted flat indices.
std::vector<int> center_region_cubes(const PointCloud& cloud, int instance_id,
                                     const CubeGrid& grid, double scale);

enum class Paradigm { Flatten, Project };

const char* paradigm_name(Paradigm p);
Paradigm paradigm_from_name(const std::string& name);

/// Ground-truth classification targets for one scene. The flatten target
/// (N_p x n_s^3, binary) is stored sparsely: each labeled point's positive
/// columns are the cubes owned by its instance. Project targets factor every
/// owned cube into its three axis indices.
struct TargetSet {
  Paradigm paradigm = Paradigm::Flatten;
  int n_s = 0;
  std::size_t n_points = 0;

  std::vector<int> point_instance;               // canonical id per point, -1 background
  std::vector<std::vector<int>> instance_points; // per instance, ascending point indices
  std::vector<std::vector<int>> owned_cubes;     // per instance, sorted flat indices
  // Project decomposition: per axis, per instance, sorted unique axis indices.
  std::array<std::vector<std::vector<int>>, 3> owned_axis;

  std::vector<int> positive_cubes;     // sorted flat indices of every claimed cube
  std::vector<std::uint8_t> score_target;  // length n_s^3
  std::map<int, int> instance_of_cube; // flat index -> owning instance
  std::vector<int> colliding_cubes;    // claimed by more than one instance
  int collision_count = 0;

  int instance_count() const { return static_cast<int>(instance_points.size()); }
  int n_positive() const { return static_cast<int>(positive_cubes.size()); }

  /// Positive flatten columns of a point's row (empty for background).
  std::span<const int> row_columns(int point) const;
  /// Dense flatten column j as 0/1 over points.
  std::vector<std::uint8_t> flatten_column(int flat) const;
  /// Dense project column (axis in {0,1,2}, index in [0,n_s)).
  std::vector<std::uint8_t> project_column(int axis, int index) const;
  /// Project target entry for one point.
  bool project_entry(int axis, int point, int index) const;
};

/// Builds targets for one labeled cloud. Cube collisions (two instances, one
/// cube) are resolved by centroid containment, then by centroid proximity to
/// the cube center, ties to the lower instance id; contested cubes stay
/// positive and are counted in colliding_cubes.
TargetSet build_targets(const PointCloud& cloud, const CubeGrid& grid, Paradigm paradigm,
                        double scale);

/// Fraction of positive cubes claimed by more than one instance, aggregated
/// over the dataset.
double overlap_rate(std::span<const PointCloud> clouds, const CubeGrid& grid, double scale);

/// Debug JSON form: paradigm, n_s, positive cubes, per-point positive columns.
std::string target_debug_json(const TargetSet& targets);

}  // namespace cubeseg
