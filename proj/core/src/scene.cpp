#include "cubeseg/scene.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace cubeseg {

namespace {

constexpr int kSceneAttempts = 32;
constexpr int kPlacementTries = 1000;
// Cushion between nominal placement separation and the required minimum, so
// that jitter rarely forces a full scene retry.
constexpr double kSeparationSlack = 0.02;

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

// Interior sampling is center-weighted (density falls off toward the hull),
// the way scanned objects thin out toward their extents; local density then
// carries the radial coordinate instead of being flat.
Vec3 sample_in_shape(ShapeKind kind, Vec3 center, Vec3 extent, Rng& rng) {
  if (kind == ShapeKind::Box) {
    auto offset = [&rng](double ext) {
      const double u = 2.0 * rng.uniform() - 1.0;  // [-1,1)
      const double v = (u < 0.0 ? -1.0 : 1.0) * u * u;
      return 0.5 * ext * v;
    };
    return {center.x + offset(extent.x), center.y + offset(extent.y),
            center.z + offset(extent.z)};
  }
  Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
  double n = norm(dir);
  if (n == 0.0) dir = {1.0, 0.0, 0.0}, n = 1.0;
  dir = (1.0 / n) * dir;
  const double r = rng.uniform();  // uniform ball would be u^(1/3)
  return {center.x + 0.5 * extent.x * r * dir.x,
          center.y + 0.5 * extent.y * r * dir.y,
          center.z + 0.5 * extent.z * r * dir.z};
}

std::vector<Vec3> labeled_centroids(const PointCloud& cloud, int k) {
  std::vector<Vec3> sum(k);
  std::vector<int> count(k, 0);
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int id = cloud.instance_ids[i];
    if (id < 0) continue;
    sum[id] = sum[id] + cloud.positions[i];
    ++count[id];
  }
  for (int i = 0; i < k; ++i) sum[i] = sum[i] / static_cast<double>(count[i]);
  return sum;
}

}  // namespace

int PointCloud::instance_count() const {
  int max_id = -1;
  for (int id : instance_ids) max_id = std::max(max_id, id);
  return max_id + 1;
}

void PointCloud::validate() const {
  if (positions.empty()) throw DataError("point cloud is empty");
  if (semantic_labels.size() != positions.size() || instance_ids.size() != positions.size())
    throw DataError("point cloud arrays have mismatched lengths");
  for (const Vec3& p : positions) {
    for (int a = 0; a < 3; ++a)
      if (!(p[a] >= 0.0 && p[a] <= 1.0))
        throw DataError("position outside the normalized [0,1]^3 cube");
  }
}

void SceneSpec::validate() const {
  if (instances_min < 1 || instances_max < instances_min)
    throw ConfigError("instance count range is empty");
  if (points_min < 1 || points_max < points_min)
    throw ConfigError("points-per-instance range is empty");
  if (shape_kinds.empty()) throw ConfigError("no shape kinds selected");
  if (!(size_min > 0.0) || size_max < size_min) throw ConfigError("size bounds must be positive");
  if (size_max > 1.0) throw ConfigError("size bounds exceed the normalized cube");
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be >= 0");
  if (min_centroid_separation < 0.0) throw ConfigError("min_centroid_separation must be >= 0");
  if (background_points < 0) throw ConfigError("background_points must be >= 0");
}

PointCloud generate_scene(const SceneSpec& spec) {
  spec.validate();
  Rng rng(spec.rng_seed);

  for (int attempt = 0; attempt < kSceneAttempts; ++attempt) {
    const int k = rng.uniform_int(spec.instances_min, spec.instances_max);

    std::vector<Vec3> centers, extents;
    std::vector<ShapeKind> kinds;
    bool placed_all = true;
    for (int inst = 0; inst < k; ++inst) {
      bool placed = false;
      for (int t = 0; t < kPlacementTries; ++t) {
        Vec3 ext{rng.uniform(spec.size_min, spec.size_max),
                 rng.uniform(spec.size_min, spec.size_max),
                 rng.uniform(spec.size_min, spec.size_max)};
        Vec3 c{rng.uniform(ext.x / 2, 1.0 - ext.x / 2), rng.uniform(ext.y / 2, 1.0 - ext.y / 2),
               rng.uniform(ext.z / 2, 1.0 - ext.z / 2)};
        bool ok = true;
        for (const Vec3& other : centers)
          if (distance(c, other) < spec.min_centroid_separation + kSeparationSlack) {
            ok = false;
            break;
          }
        if (ok) {
          centers.push_back(c);
          extents.push_back(ext);
          kinds.push_back(spec.shape_kinds[rng.uniform_int(0, int(spec.shape_kinds.size()) - 1)]);
          placed = true;
          break;
        }
      }
      if (!placed) {
        placed_all = false;
        break;
      }
    }
    if (!placed_all) continue;

    PointCloud cloud;
    for (int inst = 0; inst < k; ++inst) {
      const int n = rng.uniform_int(spec.points_min, spec.points_max);
      const int sem = semantic_class_of(kinds[inst]);
      for (int i = 0; i < n; ++i) {
        Vec3 p = sample_in_shape(kinds[inst], centers[inst], extents[inst], rng);
        if (spec.noise_sigma > 0.0) {
          p.x += spec.noise_sigma * rng.normal();
          p.y += spec.noise_sigma * rng.normal();
          p.z += spec.noise_sigma * rng.normal();
        }
        cloud.positions.push_back({clamp01(p.x), clamp01(p.y), clamp01(p.z)});
        cloud.semantic_labels.push_back(sem);
        cloud.instance_ids.push_back(inst);
      }
    }
    for (int i = 0; i < spec.background_points; ++i) {
      cloud.positions.push_back({rng.uniform(), rng.uniform(), rng.uniform()});
      cloud.semantic_labels.push_back(0);
      cloud.instance_ids.push_back(-1);
    }

    // Jitter and clamping shift the realized centroids; verify the contract on
    // the actual point means and retry the whole scene when violated.
    const std::vector<Vec3> cents = labeled_centroids(cloud, k);
    bool separated = true;
    for (int a = 0; a < k && separated; ++a)
      for (int b = a + 1; b < k; ++b)
        if (distance(cents[a], cents[b]) < spec.min_centroid_separation) {
          separated = false;
          break;
        }
    if (separated) return cloud;
  }
  throw InfeasibleSpecError();
}

std::vector<int> canonical_ids(std::span<const int> ids) {
  std::vector<int> out(ids.size());
  std::unordered_map<int, int> remap;
  int next = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0) {
      out[i] = -1;
      continue;
    }
    auto [it, inserted] = remap.try_emplace(ids[i], next);
    if (inserted) ++next;
    out[i] = it->second;
  }
  return out;
}

void canonicalize(PointCloud& cloud) { cloud.instance_ids = canonical_ids(cloud.instance_ids); }

std::vector<std::vector<int>> group_by_instance(const PointCloud& cloud) {
  std::vector<std::vector<int>> groups(cloud.instance_count());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const int id = cloud.instance_ids[i];
    if (id >= 0) groups[id].push_back(static_cast<int>(i));
  }
  return groups;
}

// ---------------------------------------------------------------------------
// I/O
// ---------------------------------------------------------------------------

namespace {

void format_double(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

double parse_double(std::string_view tok, int line) {
  double v = 0.0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError("bad numeric field '" + std::string(tok) + "'", line);
  return v;
}

int parse_int(std::string_view tok, int line) {
  int v = 0;
  const auto res = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (res.ec != std::errc() || res.ptr != tok.data() + tok.size())
    throw ParseError("bad integer field '" + std::string(tok) + "'", line);
  return v;
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == sep) {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

void save_csv(const PointCloud& cloud, const std::filesystem::path& path) {
  std::string out = "x,y,z,sem,inst\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    format_double(out, cloud.positions[i].x);
    out += ',';
    format_double(out, cloud.positions[i].y);
    out += ',';
    format_double(out, cloud.positions[i].z);
    out += ',';
    out += std::to_string(cloud.semantic_labels[i]);
    out += ',';
    out += std::to_string(cloud.instance_ids[i]);
    out += '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << out;
}

LoadResult load_csv(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string line;
  int lineno = 0;
  if (!std::getline(f, line)) throw ParseError("missing header", 1);
  ++lineno;
  const auto header = split(line, ',');
  bool labels_absent = false;
  if (header.size() == 5 && header[0] == "x" && header[1] == "y" && header[2] == "z" &&
      header[3] == "sem" && header[4] == "inst") {
    labels_absent = false;
  } else if (header.size() == 3 && header[0] == "x" && header[1] == "y" && header[2] == "z") {
    labels_absent = true;
  } else {
    throw ParseError("expected header 'x,y,z,sem,inst'", 1);
  }

  LoadResult result;
  result.labels_absent = labels_absent;
  const std::size_t want = labels_absent ? 3 : 5;
  while (std::getline(f, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto tok = split(line, ',');
    if (tok.size() != want)
      throw ParseError("expected " + std::to_string(want) + " fields, got " +
                           std::to_string(tok.size()),
                       lineno);
    Vec3 p{parse_double(tok[0], lineno), parse_double(tok[1], lineno), parse_double(tok[2], lineno)};
    result.cloud.positions.push_back(p);
    result.cloud.semantic_labels.push_back(labels_absent ? 0 : parse_int(tok[3], lineno));
    result.cloud.instance_ids.push_back(labels_absent ? -1 : parse_int(tok[4], lineno));
  }
  if (result.cloud.positions.empty()) throw ParseError("no data rows", lineno);
  return result;
}

void save_ply(const PointCloud& cloud, const std::filesystem::path& path) {
  std::string out;
  out += "ply\nformat ascii 1.0\n";
  out += "element vertex " + std::to_string(cloud.size()) + "\n";
  out += "property double x\nproperty double y\nproperty double z\n";
  out += "property int sem\nproperty int inst\n";
  out += "end_header\n";
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    format_double(out, cloud.positions[i].x);
    out += ' ';
    format_double(out, cloud.positions[i].y);
    out += ' ';
    format_double(out, cloud.positions[i].z);
    out += ' ';
    out += std::to_string(cloud.semantic_labels[i]);
    out += ' ';
    out += std::to_string(cloud.instance_ids[i]);
    out += '\n';
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open for writing: " + path.string());
  f << out;
}

LoadResult load_ply(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open: " + path.string());
  std::string line;
  int lineno = 0;

  auto next_line = [&]() -> bool {
    if (!std::getline(f, line)) return false;
    ++lineno;
    return true;
  };

  if (!next_line() || trim(line) != "ply") throw ParseError("not a PLY file", std::max(lineno, 1));
  if (!next_line() || trim(line) != "format ascii 1.0")
    throw ParseError("only 'format ascii 1.0' is supported", lineno);

  std::size_t vertex_count = 0;
  std::vector<std::string> properties;
  bool in_vertex_element = false;
  while (true) {
    if (!next_line()) throw ParseError("unexpected end of header", lineno);
    const auto tok = split(trim(line), ' ');
    if (tok.empty() || tok[0].empty()) continue;
    if (tok[0] == "comment") continue;
    if (tok[0] == "end_header") break;
    if (tok[0] == "element") {
      if (tok.size() != 3) throw ParseError("malformed element declaration", lineno);
      if (tok[1] == "vertex") {
        vertex_count = static_cast<std::size_t>(parse_int(tok[2], lineno));
        in_vertex_element = true;
      } else {
        if (parse_int(tok[2], lineno) != 0)
          throw ParseError("unsupported element '" + std::string(tok[1]) + "'", lineno);
        in_vertex_element = false;
      }
      continue;
    }
    if (tok[0] == "property") {
      if (!in_vertex_element) continue;
      if (tok.size() != 3) throw ParseError("malformed property declaration", lineno);
      properties.emplace_back(tok[2]);
      continue;
    }
    throw ParseError("unexpected header line", lineno);
  }

  auto index_of = [&](const char* name) {
    const auto it = std::find(properties.begin(), properties.end(), name);
    return it == properties.end() ? -1 : static_cast<int>(it - properties.begin());
  };
  const int ix = index_of("x"), iy = index_of("y"), iz = index_of("z");
  const int isem = index_of("sem"), iinst = index_of("inst");
  if (ix < 0 || iy < 0 || iz < 0) throw ParseError("vertex element lacks x/y/z properties", lineno);

  LoadResult result;
  result.labels_absent = (isem < 0 || iinst < 0);
  for (std::size_t v = 0; v < vertex_count; ++v) {
    if (!next_line()) throw ParseError("fewer vertex rows than declared", lineno);
    const auto tok = split(trim(line), ' ');
    if (tok.size() != properties.size())
      throw ParseError("expected " + std::to_string(properties.size()) + " fields, got " +
                           std::to_string(tok.size()),
                       lineno);
    Vec3 p{parse_double(tok[ix], lineno), parse_double(tok[iy], lineno),
           parse_double(tok[iz], lineno)};
    result.cloud.positions.push_back(p);
    result.cloud.semantic_labels.push_back(isem < 0 ? 0 : parse_int(tok[isem], lineno));
    result.cloud.instance_ids.push_back(iinst < 0 ? -1 : parse_int(tok[iinst], lineno));
  }
  if (result.cloud.positions.empty()) throw ParseError("no vertex rows", lineno);
  return result;
}

}  // namespace

void save_cloud(const PointCloud& cloud, const std::filesystem::path& path, CloudFormat format) {
  if (cloud.size() == 0) throw DataError("refusing to save an empty cloud");
  if (format == CloudFormat::CsvPoints)
    save_csv(cloud, path);
  else
    save_ply(cloud, path);
}

LoadResult load_cloud(const std::filesystem::path& path, CloudFormat format) {
  return format == CloudFormat::CsvPoints ? load_csv(path) : load_ply(path);
}

CloudFormat format_from_extension(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".csv") return CloudFormat::CsvPoints;
  if (ext == ".ply") return CloudFormat::PlyAscii;
  throw ConfigError("unknown cloud format extension: " + ext);
}

}  // namespace cubeseg
