#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "fmapkit/error.hpp"

namespace fmapkit {

using Index = Eigen::Index;
using Points = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using Faces = Eigen::Matrix<int, Eigen::Dynamic, 3>;

enum class Axis { X = 0, Y = 1, Z = 2 };

inline Axis parse_axis(std::string_view s) {
  if (s == "x" || s == "X") return Axis::X;
  if (s == "y" || s == "Y") return Axis::Y;
  if (s == "z" || s == "Z") return Axis::Z;
  throw UsageError("unknown axis '" + std::string(s) + "'");
}

/// Triangle mesh with lumped (barycentric) vertex areas.
///
/// Faces are 0-based and counter-clockwise. `vertex_masses[i]` is one third of
/// the area of every triangle incident to vertex i, so the masses sum to the
/// surface area.
struct Mesh {
  Points vertices;
  Faces faces;
  Eigen::VectorXd vertex_masses;
  Axis up_axis = Axis::Y;
  /// Zero-area faces removed while building the mesh.
  std::size_t dropped_faces = 0;

  Index num_vertices() const { return vertices.rows(); }
  Index num_faces() const { return faces.rows(); }
  double total_area() const { return vertex_masses.sum(); }
};

inline double triangle_area(const Eigen::Vector3d& a, const Eigen::Vector3d& b, const Eigen::Vector3d& c) {
  return 0.5 * (b - a).cross(c - a).norm();
}

inline Eigen::VectorXd face_areas(const Points& vertices, const Faces& faces) {
  Eigen::VectorXd areas(faces.rows());
  for (Index f = 0; f < faces.rows(); ++f) {
    areas[f] = triangle_area(vertices.row(faces(f, 0)), vertices.row(faces(f, 1)), vertices.row(faces(f, 2)));
  }
  return areas;
}

inline Eigen::VectorXd lumped_masses(const Points& vertices, const Faces& faces) {
  Eigen::VectorXd mass = Eigen::VectorXd::Zero(vertices.rows());
  const Eigen::VectorXd areas = face_areas(vertices, faces);
  for (Index f = 0; f < faces.rows(); ++f) {
    for (int c = 0; c < 3; ++c) mass[faces(f, c)] += areas[f] / 3.0;
  }
  return mass;
}

/// Validates indices, drops zero-area faces and computes masses.
inline Mesh make_mesh(Points vertices, const Faces& faces, Axis up = Axis::Y) {
  const Index n = vertices.rows();
  if (n < 4) throw TopologyError("mesh needs at least 4 vertices, got " + std::to_string(n));
  if (!vertices.allFinite()) throw TopologyError("non-finite vertex coordinate");

  std::vector<Index> kept;
  kept.reserve(static_cast<std::size_t>(faces.rows()));
  std::size_t dropped = 0;
  for (Index f = 0; f < faces.rows(); ++f) {
    for (int c = 0; c < 3; ++c) {
      if (faces(f, c) < 0 || faces(f, c) >= n) {
        throw TopologyError("face " + std::to_string(f) + " references vertex " + std::to_string(faces(f, c)) +
                            " but mesh has " + std::to_string(n) + " vertices");
      }
    }
    if (faces(f, 0) == faces(f, 1) || faces(f, 1) == faces(f, 2) || faces(f, 0) == faces(f, 2)) {
      throw TopologyError("face " + std::to_string(f) + " repeats a vertex");
    }
    const double area =
        triangle_area(vertices.row(faces(f, 0)), vertices.row(faces(f, 1)), vertices.row(faces(f, 2)));
    if (area > 0.0) {
      kept.push_back(f);
    } else {
      ++dropped;
    }
  }
  if (kept.empty()) throw TopologyError("mesh has no non-degenerate faces");

  Mesh mesh;
  mesh.vertices = std::move(vertices);
  mesh.faces.resize(static_cast<Index>(kept.size()), 3);
  for (std::size_t i = 0; i < kept.size(); ++i) mesh.faces.row(static_cast<Index>(i)) = faces.row(kept[i]);
  mesh.vertex_masses = lumped_masses(mesh.vertices, mesh.faces);
  for (Index i = 0; i < n; ++i) {
    if (!(mesh.vertex_masses[i] > 0.0)) {
      throw TopologyError("vertex " + std::to_string(i) + " has no incident face");
    }
  }
  mesh.up_axis = up;
  mesh.dropped_faces = dropped;
  return mesh;
}

/// Mass-weighted centroid.
inline Eigen::Vector3d centroid(const Mesh& mesh) {
  return (mesh.vertices.transpose() * mesh.vertex_masses) / mesh.total_area();
}

namespace detail {

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    std::size_t j = i;
    while (j < line.size() && !std::isspace(static_cast<unsigned char>(line[j]))) ++j;
    if (j > i) out.push_back(line.substr(i, j - i));
    i = j;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view tok, std::string_view what) {
  T value{};
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
  if (ec != std::errc() || ptr != tok.data() + tok.size()) {
    throw ParseError("bad " + std::string(what) + " token '" + std::string(tok) + "'");
  }
  return value;
}

/// Non-empty lines with '#' comments stripped.
inline std::vector<std::string> content_lines(const std::string& text) {
  std::vector<std::string> lines;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (split_ws(line).empty()) continue;
    lines.push_back(line);
  }
  return lines;
}

inline Mesh parse_off(const std::string& text, Axis up) {
  const auto lines = content_lines(text);
  if (lines.empty()) throw ParseError("empty OFF file");
  auto header = split_ws(lines[0]);
  if (header.empty() || header[0] != "OFF") throw ParseError("missing OFF header");
  std::size_t cursor = 1;
  std::vector<std::string_view> counts(header.begin() + 1, header.end());
  if (counts.empty()) {
    if (lines.size() < 2) throw ParseError("missing OFF counts");
    counts = split_ws(lines[1]);
    cursor = 2;
  }
  if (counts.size() < 2) throw ParseError("OFF counts line needs vertex and face counts");
  const auto n = parse_number<long>(counts[0], "vertex count");
  const auto f = parse_number<long>(counts[1], "face count");
  if (n < 0 || f < 0) throw ParseError("negative OFF counts");
  if (lines.size() < cursor + static_cast<std::size_t>(n + f)) throw ParseError("OFF file truncated");

  Points vertices(n, 3);
  for (long i = 0; i < n; ++i) {
    auto toks = split_ws(lines[cursor + static_cast<std::size_t>(i)]);
    if (toks.size() < 3) throw ParseError("vertex line " + std::to_string(i) + " has fewer than 3 coordinates");
    for (int c = 0; c < 3; ++c) vertices(i, c) = parse_number<double>(toks[static_cast<std::size_t>(c)], "coordinate");
  }
  cursor += static_cast<std::size_t>(n);
  Faces faces(f, 3);
  for (long i = 0; i < f; ++i) {
    auto toks = split_ws(lines[cursor + static_cast<std::size_t>(i)]);
    const auto arity = parse_number<long>(toks[0], "face arity");
    if (arity != 3) throw ParseError("face " + std::to_string(i) + " is not a triangle");
    if (toks.size() < 4) throw ParseError("face " + std::to_string(i) + " truncated");
    for (int c = 0; c < 3; ++c) faces(i, c) = parse_number<int>(toks[static_cast<std::size_t>(c + 1)], "face index");
  }
  return make_mesh(std::move(vertices), faces, up);
}

inline Mesh parse_ply(const std::string& text, Axis up) {
  struct Property {
    std::string name;
    bool is_list = false;
  };
  struct Element {
    std::string name;
    long count = 0;
    std::vector<Property> props;
  };

  std::istringstream in(text);
  std::string line;
  std::getline(in, line);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != "ply") throw ParseError("missing ply magic");

  std::vector<Element> elements;
  bool ascii = false;
  bool header_done = false;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto toks = split_ws(line);
    if (toks.empty()) continue;
    if (toks[0] == "comment" || toks[0] == "obj_info") continue;
    if (toks[0] == "format") {
      if (toks.size() < 2) throw ParseError("bad format line");
      if (toks[1] == "ascii") {
        ascii = true;
      } else {
        throw ParseError("binary PLY is not supported (format " + std::string(toks[1]) + ")");
      }
    } else if (toks[0] == "element") {
      if (toks.size() < 3) throw ParseError("bad element line");
      elements.push_back({std::string(toks[1]), parse_number<long>(toks[2], "element count"), {}});
    } else if (toks[0] == "property") {
      if (elements.empty()) throw ParseError("property before element");
      if (toks.size() >= 5 && toks[1] == "list") {
        elements.back().props.push_back({std::string(toks[4]), true});
      } else if (toks.size() >= 3) {
        elements.back().props.push_back({std::string(toks[2]), false});
      } else {
        throw ParseError("bad property line");
      }
    } else if (toks[0] == "end_header") {
      header_done = true;
      break;
    } else {
      throw ParseError("unexpected header line '" + line + "'");
    }
  }
  if (!header_done) throw ParseError("missing end_header");
  if (!ascii) throw ParseError("missing format line");

  std::vector<std::string> body;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind('#', 0) == 0 || split_ws(line).empty()) continue;
    body.push_back(line);
  }

  Points vertices;
  Faces faces;
  bool have_vertices = false;
  bool have_faces = false;
  std::size_t cursor = 0;
  for (const auto& el : elements) {
    if (body.size() < cursor + static_cast<std::size_t>(el.count)) throw ParseError("PLY body truncated");
    if (el.name == "vertex") {
      int ix = -1, iy = -1, iz = -1;
      for (std::size_t p = 0; p < el.props.size(); ++p) {
        if (el.props[p].is_list) throw ParseError("list property on vertex element");
        if (el.props[p].name == "x") ix = static_cast<int>(p);
        if (el.props[p].name == "y") iy = static_cast<int>(p);
        if (el.props[p].name == "z") iz = static_cast<int>(p);
      }
      if (ix < 0 || iy < 0 || iz < 0) throw ParseError("vertex element lacks x/y/z");
      vertices.resize(el.count, 3);
      for (long i = 0; i < el.count; ++i) {
        auto toks = split_ws(body[cursor + static_cast<std::size_t>(i)]);
        if (toks.size() < el.props.size()) throw ParseError("vertex " + std::to_string(i) + " truncated");
        vertices(i, 0) = parse_number<double>(toks[static_cast<std::size_t>(ix)], "coordinate");
        vertices(i, 1) = parse_number<double>(toks[static_cast<std::size_t>(iy)], "coordinate");
        vertices(i, 2) = parse_number<double>(toks[static_cast<std::size_t>(iz)], "coordinate");
      }
      have_vertices = true;
    } else if (el.name == "face") {
      faces.resize(el.count, 3);
      for (long i = 0; i < el.count; ++i) {
        auto toks = split_ws(body[cursor + static_cast<std::size_t>(i)]);
        std::size_t t = 0;
        bool found = false;
        for (const auto& prop : el.props) {
          if (t >= toks.size()) throw ParseError("face " + std::to_string(i) + " truncated");
          if (!prop.is_list) {
            ++t;
            continue;
          }
          const auto len = parse_number<long>(toks[t++], "list length");
          if (t + static_cast<std::size_t>(len) > toks.size()) throw ParseError("face " + std::to_string(i) + " truncated");
          if (prop.name == "vertex_indices" || prop.name == "vertex_index") {
            if (len != 3) throw ParseError("face " + std::to_string(i) + " is not a triangle");
            for (int c = 0; c < 3; ++c) faces(i, c) = parse_number<int>(toks[t + static_cast<std::size_t>(c)], "face index");
            found = true;
          }
          t += static_cast<std::size_t>(len);
        }
        if (!found) throw ParseError("face element lacks vertex_indices");
      }
      have_faces = true;
    }
    cursor += static_cast<std::size_t>(el.count);
  }
  if (!have_vertices || !have_faces) throw ParseError("PLY needs vertex and face elements");
  return make_mesh(std::move(vertices), faces, up);
}

}  // namespace detail

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Parses ASCII OFF or ASCII PLY text, chosen by the leading magic.
inline Mesh parse_mesh(const std::string& text, Axis up = Axis::Y) {
  std::size_t i = 0;
  while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
  if (text.compare(i, 3, "ply") == 0) return detail::parse_ply(text.substr(i), up);
  return detail::parse_off(text, up);
}

inline Mesh load_mesh(const std::filesystem::path& path, Axis up = Axis::Y) {
  return parse_mesh(read_file(path), up);
}

inline void write_off(const Mesh& mesh, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(17);
  out << "OFF\n" << mesh.num_vertices() << ' ' << mesh.num_faces() << " 0\n";
  for (Index i = 0; i < mesh.num_vertices(); ++i) {
    out << mesh.vertices(i, 0) << ' ' << mesh.vertices(i, 1) << ' ' << mesh.vertices(i, 2) << '\n';
  }
  for (Index f = 0; f < mesh.num_faces(); ++f) {
    out << "3 " << mesh.faces(f, 0) << ' ' << mesh.faces(f, 1) << ' ' << mesh.faces(f, 2) << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

enum class NormalizeMode { none, unit_area, unit_max_extent };

inline NormalizeMode parse_normalize_mode(std::string_view s) {
  if (s == "none") return NormalizeMode::none;
  if (s == "unit_area") return NormalizeMode::unit_area;
  if (s == "unit_max_extent") return NormalizeMode::unit_max_extent;
  throw UsageError("unknown normalization mode '" + std::string(s) + "'");
}

inline std::string to_string(NormalizeMode m) {
  switch (m) {
    case NormalizeMode::none: return "none";
    case NormalizeMode::unit_area: return "unit_area";
    case NormalizeMode::unit_max_extent: return "unit_max_extent";
  }
  return "none";
}

/// Uniformly rescales about the mass centroid; masses are recomputed.
inline Mesh normalize_mesh(const Mesh& mesh, NormalizeMode mode) {
  if (mode == NormalizeMode::none) return mesh;
  const double area = mesh.total_area();
  if (!(area > 0.0)) throw NumericError("cannot normalize a mesh with zero total area");
  const Eigen::Vector3d center = centroid(mesh);
  double scale = 1.0;
  if (mode == NormalizeMode::unit_area) {
    scale = 1.0 / std::sqrt(area);
  } else {
    const Eigen::Vector3d extent = mesh.vertices.colwise().maxCoeff() - mesh.vertices.colwise().minCoeff();
    scale = 1.0 / extent.maxCoeff();
  }
  Mesh out = mesh;
  out.vertices = ((mesh.vertices.rowwise() - center.transpose()) * scale).rowwise() + center.transpose();
  out.vertex_masses = lumped_masses(out.vertices, out.faces);
  return out;
}

/// Rotation by `angle` radians about `axis` through `center`.
inline Points rotate_about(const Points& points, Axis axis, double angle, const Eigen::Vector3d& center) {
  Eigen::Vector3d dir = Eigen::Vector3d::Zero();
  dir[static_cast<int>(axis)] = 1.0;
  const Eigen::Matrix3d rot = Eigen::AngleAxisd(angle, dir).toRotationMatrix();
  return ((points.rowwise() - center.transpose()) * rot.transpose()).rowwise() + center.transpose();
}

// ---------------------------------------------------------------------------
// Point clouds, grid pooling and neighbourhoods

struct PointCloud {
  Points points;
  /// Set by grid_subsample: for every point of the finer input cloud, the index
  /// of the cell point it was pooled into.
  std::vector<Index> parent_indices;

  Index size() const { return points.rows(); }
};

inline PointCloud to_cloud(const Mesh& mesh) { return PointCloud{mesh.vertices, {}}; }

using CellKey = std::array<std::int64_t, 3>;

inline CellKey cell_of(const Eigen::Vector3d& p, double cell_size) {
  return {static_cast<std::int64_t>(std::floor(p[0] / cell_size)),
          static_cast<std::int64_t>(std::floor(p[1] / cell_size)),
          static_cast<std::int64_t>(std::floor(p[2] / cell_size))};
}

/// One barycenter per occupied cell [k*s, (k+1)*s)^3, cells anchored at the
/// origin. Output points are ordered by lexicographic cell coordinates.
inline PointCloud grid_subsample(const PointCloud& cloud, double cell_size) {
  if (!(cell_size > 0.0)) throw UsageError("grid cell size must be positive");
  std::map<CellKey, Index> cells;
  std::vector<CellKey> keys(static_cast<std::size_t>(cloud.size()));
  for (Index i = 0; i < cloud.size(); ++i) {
    keys[static_cast<std::size_t>(i)] = cell_of(cloud.points.row(i), cell_size);
    cells.emplace(keys[static_cast<std::size_t>(i)], 0);
  }
  Index next = 0;
  for (auto& [key, idx] : cells) idx = next++;

  PointCloud out;
  out.points = Points::Zero(next, 3);
  out.parent_indices.resize(static_cast<std::size_t>(cloud.size()));
  std::vector<Index> counts(static_cast<std::size_t>(next), 0);
  for (Index i = 0; i < cloud.size(); ++i) {
    const Index c = cells.at(keys[static_cast<std::size_t>(i)]);
    out.parent_indices[static_cast<std::size_t>(i)] = c;
    out.points.row(c) += cloud.points.row(i);
    ++counts[static_cast<std::size_t>(c)];
  }
  for (Index c = 0; c < next; ++c) out.points.row(c) /= static_cast<double>(counts[static_cast<std::size_t>(c)]);
  return out;
}

struct SamplingLevel {
  PointCloud cloud;
  double cell_size = 0.0;
};

/// levels[0] pools the input points; levels[i] pools levels[i-1]. Each level's
/// cloud.parent_indices is the child-to-parent pooling map.
struct SamplingHierarchy {
  std::vector<SamplingLevel> levels;

  std::size_t depth() const { return levels.size(); }
};

inline SamplingHierarchy build_hierarchy(const PointCloud& points, double base_cell, int num_levels) {
  if (num_levels < 1) throw UsageError("hierarchy needs at least one level");
  SamplingHierarchy h;
  const PointCloud* prev = &points;
  for (int i = 0; i < num_levels; ++i) {
    const double cell = base_cell * std::ldexp(1.0, i);
    PointCloud level = grid_subsample(*prev, cell);
    if (level.size() < 4) {
      throw HierarchyError("level " + std::to_string(i) + " (cell " + std::to_string(cell) + ") has only " +
                           std::to_string(level.size()) + " points");
    }
    h.levels.push_back({std::move(level), cell});
    prev = &h.levels.back().cloud;
  }
  return h;
}

using NeighborLists = std::vector<std::vector<Index>>;

inline bool within_radius(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double radius) {
  const double dx = a[0] - b[0];
  const double dy = a[1] - b[1];
  const double dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz < radius * radius;
}

namespace detail {
struct CellKeyHash {
  std::size_t operator()(const CellKey& k) const noexcept {
    std::uint64_t h = 1469598103934665603ull;
    for (auto v : k) {
      h ^= static_cast<std::uint64_t>(v);
      h *= 1099511628211ull;
    }
    return static_cast<std::size_t>(h);
  }
};
}  // namespace detail

/// Support indices strictly closer than `radius` to each query, ascending.
inline NeighborLists radius_neighbors(const PointCloud& queries, const PointCloud& support, double radius) {
  if (!(radius > 0.0)) throw UsageError("neighbourhood radius must be positive");
  // Buckets slightly wider than the radius so any hit lies in the 27 adjacent buckets.
  const double bucket = radius * (1.0 + 1e-9);
  std::unordered_map<CellKey, std::vector<Index>, detail::CellKeyHash> buckets;
  for (Index i = 0; i < support.size(); ++i) buckets[cell_of(support.points.row(i), bucket)].push_back(i);

  NeighborLists out(static_cast<std::size_t>(queries.size()));
  for (Index q = 0; q < queries.size(); ++q) {
    const Eigen::Vector3d x = queries.points.row(q);
    const CellKey base = cell_of(x, bucket);
    auto& list = out[static_cast<std::size_t>(q)];
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        for (std::int64_t dz = -1; dz <= 1; ++dz) {
          auto it = buckets.find({base[0] + dx, base[1] + dy, base[2] + dz});
          if (it == buckets.end()) continue;
          for (Index i : it->second) {
            if (within_radius(x, support.points.row(i), radius)) list.push_back(i);
          }
        }
      }
    }
    std::sort(list.begin(), list.end());
  }
  return out;
}

}  // namespace fmapkit
