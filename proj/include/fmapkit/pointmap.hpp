#pragma once

#include <Eigen/Core>

#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fmapkit/error.hpp"
#include "fmapkit/mesh.hpp"

namespace fmapkit {

/// Dense vertex assignment T: N -> M. `assignment[j]` is the vertex of M
/// matched to vertex j of N.
struct PointMap {
  std::vector<int> assignment;
  /// Optional per-target-vertex score (embedding distance for recovered maps).
  std::optional<Eigen::VectorXd> confidence;

  Index size() const { return static_cast<Index>(assignment.size()); }
  int operator[](Index j) const { return assignment[static_cast<std::size_t>(j)]; }
  bool operator==(const PointMap& other) const { return assignment == other.assignment; }
};

inline PointMap identity_pointmap(Index n) {
  PointMap t;
  t.assignment.resize(static_cast<std::size_t>(n));
  for (Index j = 0; j < n; ++j) t.assignment[static_cast<std::size_t>(j)] = static_cast<int>(j);
  return t;
}

inline void check_pointmap(const PointMap& t, Index n_target, Index n_source) {
  if (t.size() != n_target) {
    throw DimensionError("point map has " + std::to_string(t.size()) + " entries, target has " +
                         std::to_string(n_target) + " vertices");
  }
  for (Index j = 0; j < t.size(); ++j) {
    if (t[j] < 0 || t[j] >= n_source) {
      throw DimensionError("point map entry " + std::to_string(j) + " = " + std::to_string(t[j]) +
                           " outside [0, " + std::to_string(n_source) + ")");
    }
  }
}

/// Correspondence file: "P2P n_N n_M" then one "j i" line per target vertex.
inline void write_p2p(const std::filesystem::path& path, const PointMap& t, Index n_source) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P2P " << t.size() << ' ' << n_source << '\n';
  for (Index j = 0; j < t.size(); ++j) out << j << ' ' << t[j] << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

struct P2PFile {
  PointMap map;
  Index n_source = 0;
};

inline P2PFile read_p2p(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  long n_target = -1, n_source = -1;
  if (!(in >> magic >> n_target >> n_source) || magic != "P2P" || n_target < 0 || n_source < 0) {
    throw ParseError(path.string() + ": bad P2P header");
  }
  P2PFile file;
  file.n_source = n_source;
  file.map.assignment.assign(static_cast<std::size_t>(n_target), -1);
  for (long line = 0; line < n_target; ++line) {
    long j = -1, i = -1;
    if (!(in >> j >> i)) throw ParseError(path.string() + ": truncated at entry " + std::to_string(line));
    if (j < 0 || j >= n_target || i < 0 || i >= n_source) {
      throw ParseError(path.string() + ": entry '" + std::to_string(j) + " " + std::to_string(i) + "' out of range");
    }
    file.map.assignment[static_cast<std::size_t>(j)] = static_cast<int>(i);
  }
  for (long j = 0; j < n_target; ++j) {
    if (file.map.assignment[static_cast<std::size_t>(j)] < 0) {
      throw ParseError(path.string() + ": target vertex " + std::to_string(j) + " unassigned");
    }
  }
  return file;
}

}  // namespace fmapkit
