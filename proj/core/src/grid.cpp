#include "cubeseg/grid.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "json.hpp"

namespace cubeseg {

CubeIndex cube_of(Vec3 position, const CubeGrid& grid) {
  for (int a = 0; a < 3; ++a)
    if (!(position[a] >= 0.0 && position[a] <= 1.0))
      throw DomainError("position outside [0,1]^3");
  CubeIndex idx;
  idx.x = std::min(static_cast<int>(std::floor(position.x * grid.n_s)), grid.n_s - 1);
  idx.y = std::min(static_cast<int>(std::floor(position.y * grid.n_s)), grid.n_s - 1);
  idx.z = std::min(static_cast<int>(std::floor(position.z * grid.n_s)), grid.n_s - 1);
  return idx;
}

int flatten_index(int x, int y, int z, int n_s) {
  if (x < 0 || x >= n_s || y < 0 || y >= n_s || z < 0 || z >= n_s)
    throw DomainError("cube index out of range");
  return x * n_s * n_s + y * n_s + z;
}

int flatten_index(CubeIndex idx, int n_s) { return flatten_index(idx.x, idx.y, idx.z, n_s); }

CubeIndex unflatten_index(int flat, int n_s) {
  if (flat < 0 || flat >= n_s * n_s * n_s) throw DomainError("flat cube index out of range");
  return {flat / (n_s * n_s), (flat / n_s) % n_s, flat % n_s};
}

Vec3 cube_center(CubeIndex idx, int n_s) {
  return {(idx.x + 0.5) / n_s, (idx.y + 0.5) / n_s, (idx.z + 0.5) / n_s};
}

std::vector<Vec3> instance_centroids(const PointCloud& cloud) {
  const int k = cloud.instance_count();
  if (k < 1) throw DataError("cloud has no labeled instances");
  std::vector<Vec3> sum(k);
  std::vector<int> count(k, 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int id = cloud.instance_ids[i];
    if (id < 0) continue;
    sum[id] = sum[id] + cloud.positions[i];
    ++count[id];
  }
  for (int i = 0; i < k; ++i) {
    if (count[i] == 0) throw DataError("instance ids are not canonical");
    sum[i] = sum[i] / static_cast<double>(count[i]);
  }
  return sum;
}

namespace {

struct InstanceGeometry {
  Vec3 centroid;
  Vec3 half_extent;  // scale * bbox extent / 2
};

InstanceGeometry instance_geometry(const PointCloud& cloud, std::span<const int> points,
                                   double scale) {
  Vec3 lo = cloud.positions[points.front()];
  Vec3 hi = lo;
  Vec3 sum{};
  for (int p : points) {
    const Vec3& v = cloud.positions[p];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::min(lo[a], v[a]);
      hi[a] = std::max(hi[a], v[a]);
    }
    sum = sum + v;
  }
  InstanceGeometry g;
  g.centroid = sum / static_cast<double>(points.size());
  for (int a = 0; a < 3; ++a) g.half_extent[a] = scale * (hi[a] - lo[a]) / 2.0;
  return g;
}

// A cube belongs to the region iff its center lies inside the closed box
// |center - centroid| <= half_extent per axis; the same predicate the
// brute-force oracle in the tests applies to every cube center.
std::vector<int> region_cubes(const InstanceGeometry& g, const CubeGrid& grid) {
  const int n = grid.n_s;
  std::array<std::vector<int>, 3> axis_sets;
  for (int a = 0; a < 3; ++a) {
    const double lo = g.centroid[a] - g.half_extent[a];
    const double hi = g.centroid[a] + g.half_extent[a];
    int i_lo = static_cast<int>(std::ceil(lo * n - 0.5)) - 1;
    int i_hi = static_cast<int>(std::floor(hi * n - 0.5)) + 1;
    i_lo = std::max(i_lo, 0);
    i_hi = std::min(i_hi, n - 1);
    for (int i = i_lo; i <= i_hi; ++i) {
      const double center = (i + 0.5) / n;
      if (std::fabs(center - g.centroid[a]) <= g.half_extent[a]) axis_sets[a].push_back(i);
    }
  }

  std::vector<int> cubes;
  if (!axis_sets[0].empty() && !axis_sets[1].empty() && !axis_sets[2].empty()) {
    for (int x : axis_sets[0])
      for (int y : axis_sets[1])
        for (int z : axis_sets[2]) cubes.push_back(flatten_index(x, y, z, n));
  }
  // The centroid cube is always positive, even when the scaled box contains
  // no cube center at all.
  cubes.push_back(flatten_index(cube_of(g.centroid, grid), n));
  std::sort(cubes.begin(), cubes.end());
  cubes.erase(std::unique(cubes.begin(), cubes.end()), cubes.end());
  return cubes;
}

}  // namespace

std::vector<int> center_region_cubes(const PointCloud& cloud, int instance_id,
                                     const CubeGrid& grid, double scale) {
  if (!(scale > 0.0 && scale <= 1.0)) throw DomainError("center-sampling scale must be in (0,1]");
  const auto groups = group_by_instance(cloud);
  if (instance_id < 0 || instance_id >= static_cast<int>(groups.size()) ||
      groups[instance_id].empty())
    throw DataError("unknown instance id");
  return region_cubes(instance_geometry(cloud, groups[instance_id], scale), grid);
}

const char* paradigm_name(Paradigm p) { return p == Paradigm::Flatten ? "flatten" : "project"; }

Paradigm paradigm_from_name(const std::string& name) {
  if (name == "flatten") return Paradigm::Flatten;
  if (name == "project") return Paradigm::Project;
  throw ConfigError("unknown paradigm '" + name + "' (expected flatten|project)");
}

std::span<const int> TargetSet::row_columns(int point) const {
  const int id = point_instance[point];
  if (id < 0) return {};
  return owned_cubes[id];
}

std::vector<std::uint8_t> TargetSet::flatten_column(int flat) const {
  std::vector<std::uint8_t> col(n_points, 0);
  const auto it = instance_of_cube.find(flat);
  if (it == instance_of_cube.end()) return col;
  const auto& owned = owned_cubes[it->second];
  if (!std::binary_search(owned.begin(), owned.end(), flat)) return col;
  for (int p : instance_points[it->second]) col[p] = 1;
  return col;
}

bool TargetSet::project_entry(int axis, int point, int index) const {
  if (paradigm != Paradigm::Project)
    throw ConfigError("targets carry no project decomposition");
  const int id = point_instance[point];
  if (id < 0) return false;
  const auto& set = owned_axis[axis][id];
  return std::binary_search(set.begin(), set.end(), index);
}

std::vector<std::uint8_t> TargetSet::project_column(int axis, int index) const {
  std::vector<std::uint8_t> col(n_points, 0);
  for (std::size_t p = 0; p < n_points; ++p) col[p] = project_entry(axis, static_cast<int>(p), index);
  return col;
}

TargetSet build_targets(const PointCloud& cloud, const CubeGrid& grid, Paradigm paradigm,
                        double scale) {
  cloud.validate();
  TargetSet t;
  t.paradigm = paradigm;
  t.n_s = grid.n_s;
  t.n_points = cloud.size();
  t.point_instance = canonical_ids(cloud.instance_ids);

  PointCloud canon = cloud;
  canon.instance_ids = t.point_instance;
  const int k = canon.instance_count();
  if (k < 1) throw DataError("cloud has no labeled instances");

  const auto groups = group_by_instance(canon);
  t.instance_points = groups;

  std::vector<InstanceGeometry> geom;
  geom.reserve(k);
  std::map<int, std::vector<int>> claims;  // cube -> claiming instances
  for (int inst = 0; inst < k; ++inst) {
    geom.push_back(instance_geometry(canon, groups[inst], scale));
    for (int cube : region_cubes(geom.back(), grid)) claims[cube].push_back(inst);
  }

  t.owned_cubes.assign(k, {});
  t.score_target.assign(grid.cell_count(), 0);
  for (const auto& [cube, claimants] : claims) {
    t.positive_cubes.push_back(cube);
    t.score_target[cube] = 1;
    int owner;
    if (claimants.size() == 1) {
      owner = claimants.front();
    } else {
      t.colliding_cubes.push_back(cube);
      const CubeIndex ci = unflatten_index(cube, grid.n_s);
      const Vec3 center = cube_center(ci, grid.n_s);
      // Prefer an instance whose centroid lies inside the cube; break ties
      // (and the no-containment case) by centroid distance to the cube
      // center, then by the lower instance id.
      int best = -1;
      bool best_inside = false;
      double best_d2 = 0.0;
      for (int inst : claimants) {
        const bool inside = cube_of(geom[inst].centroid, grid) == ci;
        const double d2 = squared_norm(geom[inst].centroid - center);
        if (best < 0 || (inside && !best_inside) ||
            (inside == best_inside && d2 < best_d2)) {
          best = inst;
          best_inside = inside;
          best_d2 = d2;
        }
      }
      owner = best;
    }
    t.instance_of_cube[cube] = owner;
    t.owned_cubes[owner].push_back(cube);
  }
  t.collision_count = static_cast<int>(t.colliding_cubes.size());
  for (auto& owned : t.owned_cubes) std::sort(owned.begin(), owned.end());

  if (paradigm == Paradigm::Project) {
    for (int a = 0; a < 3; ++a) t.owned_axis[a].assign(k, {});
    for (int inst = 0; inst < k; ++inst) {
      for (int cube : t.owned_cubes[inst]) {
        const CubeIndex ci = unflatten_index(cube, grid.n_s);
        t.owned_axis[0][inst].push_back(ci.x);
        t.owned_axis[1][inst].push_back(ci.y);
        t.owned_axis[2][inst].push_back(ci.z);
      }
      for (int a = 0; a < 3; ++a) {
        auto& v = t.owned_axis[a][inst];
        std::sort(v.begin(), v.end());
        v.erase(std::unique(v.begin(), v.end()), v.end());
      }
    }
  }
  return t;
}

double overlap_rate(std::span<const PointCloud> clouds, const CubeGrid& grid, double scale) {
  if (clouds.empty()) throw DataError("overlap_rate needs at least one cloud");
  long long positives = 0;
  long long collisions = 0;
  for (const PointCloud& cloud : clouds) {
    const TargetSet t = build_targets(cloud, grid, Paradigm::Flatten, scale);
    positives += t.n_positive();
    collisions += t.collision_count;
  }
  return positives == 0 ? 0.0 : static_cast<double>(collisions) / static_cast<double>(positives);
}

std::string target_debug_json(const TargetSet& t) {
  nlohmann::json j;
  j["paradigm"] = paradigm_name(t.paradigm);
  j["n_s"] = t.n_s;
  j["positive_cubes"] = t.positive_cubes;
  j["colliding_cubes"] = t.colliding_cubes;
  nlohmann::json rows = nlohmann::json::array();
  for (std::size_t p = 0; p < t.n_points; ++p) {
    const auto cols = t.row_columns(static_cast<int>(p));
    rows.push_back(std::vector<int>(cols.begin(), cols.end()));
  }
  j["rows"] = std::move(rows);
  if (t.paradigm == Paradigm::Project) {
    const char* names[3] = {"axis_x", "axis_y", "axis_z"};
    for (int a = 0; a < 3; ++a) j[names[a]] = t.owned_axis[a];
  }
  return j.dump();
}

}  // namespace cubeseg
