#pragma once

#include <nlohmann/json.hpp>

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <queue>
#include <utility>
#include <vector>

#include "fmapkit/error.hpp"
#include "fmapkit/mesh.hpp"
#include "fmapkit/parallel.hpp"
#include "fmapkit/pointmap.hpp"
#include "fmapkit/text_io.hpp"

namespace fmapkit {

/// Weighted edge graph of a mesh; adjacency lists sorted by neighbour index.
struct EdgeGraph {
  std::vector<std::vector<std::pair<int, double>>> adjacency;
};

inline EdgeGraph edge_graph(const Mesh& mesh) {
  EdgeGraph g;
  g.adjacency.resize(static_cast<std::size_t>(mesh.num_vertices()));
  for (Index f = 0; f < mesh.num_faces(); ++f) {
    for (int c = 0; c < 3; ++c) {
      const int a = mesh.faces(f, c);
      const int b = mesh.faces(f, (c + 1) % 3);
      const double len = (mesh.vertices.row(a) - mesh.vertices.row(b)).norm();
      g.adjacency[static_cast<std::size_t>(a)].emplace_back(b, len);
      g.adjacency[static_cast<std::size_t>(b)].emplace_back(a, len);
    }
  }
  for (auto& list : g.adjacency) {
    std::sort(list.begin(), list.end());
    list.erase(std::unique(list.begin(), list.end(), [](auto& x, auto& y) { return x.first == y.first; }), list.end());
  }
  return g;
}

/// Distances from a source vertex along mesh edges.
struct GeodesicField {
  Eigen::VectorXd distances;
  /// sqrt(total area) of the mesh, the protocol's error normalization.
  double normalization = 1.0;
  /// Vertices not reachable from the source (distance = +inf).
  std::size_t unreachable = 0;
};

inline Eigen::VectorXd dijkstra(const EdgeGraph& g, int source) {
  const auto n = g.adjacency.size();
  Eigen::VectorXd dist = Eigen::VectorXd::Constant(static_cast<Index>(n), std::numeric_limits<double>::infinity());
  using Item = std::pair<double, int>;
  std::priority_queue<Item, std::vector<Item>, std::greater<>> heap;
  dist[source] = 0.0;
  heap.emplace(0.0, source);
  while (!heap.empty()) {
    auto [d, u] = heap.top();
    heap.pop();
    if (d > dist[u]) continue;
    for (auto [v, w] : g.adjacency[static_cast<std::size_t>(u)]) {
      const double nd = d + w;
      if (nd < dist[v]) {
        dist[v] = nd;
        heap.emplace(nd, v);
      }
    }
  }
  return dist;
}

inline GeodesicField geodesic_from(const Mesh& mesh, int source) {
  if (source < 0 || source >= mesh.num_vertices()) throw DimensionError("geodesic source out of range");
  GeodesicField field;
  field.distances = dijkstra(edge_graph(mesh), source);
  field.normalization = std::sqrt(mesh.total_area());
  for (Index i = 0; i < field.distances.size(); ++i) {
    if (!std::isfinite(field.distances[i])) ++field.unreachable;
  }
  return field;
}

struct GeodesicErrors {
  /// Normalized per-target-vertex errors; +inf where disconnected.
  std::vector<double> per_vertex;
  double mean = 0.0;
  double mean_x100 = 0.0;
  /// Target vertices excluded from the mean because no path exists.
  std::size_t excluded = 0;
};

/// Mean over target vertices j of d_M(pred(j), gt(j)) / sqrt(area(M)).
inline GeodesicErrors geodesic_errors(const PointMap& pred, const PointMap& gt, const Mesh& mesh_m) {
  if (pred.size() != gt.size()) {
    throw DimensionError("predicted map has " + std::to_string(pred.size()) + " entries, ground truth has " +
                         std::to_string(gt.size()));
  }
  check_pointmap(pred, pred.size(), mesh_m.num_vertices());
  check_pointmap(gt, gt.size(), mesh_m.num_vertices());

  const EdgeGraph graph = edge_graph(mesh_m);
  const double norm = std::sqrt(mesh_m.total_area());

  // One Dijkstra per distinct ground-truth vertex.
  std::vector<int> sources;
  std::vector<int> slot(static_cast<std::size_t>(mesh_m.num_vertices()), -1);
  for (Index j = 0; j < gt.size(); ++j) {
    if (pred[j] == gt[j]) continue;
    if (slot[static_cast<std::size_t>(gt[j])] < 0) {
      slot[static_cast<std::size_t>(gt[j])] = static_cast<int>(sources.size());
      sources.push_back(gt[j]);
    }
  }
  std::vector<Eigen::VectorXd> fields(sources.size());
  parallel_for(0, static_cast<std::ptrdiff_t>(sources.size()),
               [&](std::ptrdiff_t s) { fields[static_cast<std::size_t>(s)] = dijkstra(graph, sources[static_cast<std::size_t>(s)]); });

  GeodesicErrors out;
  out.per_vertex.resize(static_cast<std::size_t>(gt.size()), 0.0);
  double sum = 0.0;
  std::size_t counted = 0;
  for (Index j = 0; j < gt.size(); ++j) {
    double e = 0.0;
    if (pred[j] != gt[j]) e = fields[static_cast<std::size_t>(slot[static_cast<std::size_t>(gt[j])])][pred[j]] / norm;
    out.per_vertex[static_cast<std::size_t>(j)] = e;
    if (std::isfinite(e)) {
      sum += e;
      ++counted;
    } else {
      ++out.excluded;
    }
  }
  out.mean = counted ? sum / static_cast<double>(counted) : 0.0;
  out.mean_x100 = 100.0 * out.mean;
  return out;
}

inline double mean_geodesic_error(const PointMap& pred, const PointMap& gt, const Mesh& mesh_m) {
  return geodesic_errors(pred, gt, mesh_m).mean;
}

/// Fraction of errors at or below each threshold.
inline std::vector<double> accuracy_curve(const std::vector<double>& errors, const std::vector<double>& thresholds) {
  for (std::size_t i = 1; i < thresholds.size(); ++i) {
    if (thresholds[i] < thresholds[i - 1]) throw UsageError("accuracy thresholds must be ascending");
  }
  std::vector<double> sorted = errors;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    const auto count = std::upper_bound(sorted.begin(), sorted.end(), t) - sorted.begin();
    out.push_back(sorted.empty() ? 0.0 : static_cast<double>(count) / static_cast<double>(sorted.size()));
  }
  return out;
}

/// `count` thresholds evenly spaced on [0, max_threshold].
inline std::vector<double> default_thresholds(double max_threshold = 0.25, int count = 51) {
  std::vector<double> t;
  for (int i = 0; i < count; ++i) t.push_back(max_threshold * i / (count - 1));
  return t;
}

struct EvaluationReport {
  std::size_t pairs = 1;
  double mean_error = 0.0;
  double mean_error_x100 = 0.0;
  std::size_t excluded = 0;
  std::vector<std::pair<double, double>> curve;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["pairs"] = pairs;
    j["mean_error"] = mean_error;
    j["mean_error_x100"] = mean_error_x100;
    j["excluded"] = excluded;
    j["curve"] = nlohmann::json::array();
    for (const auto& [t, f] : curve) j["curve"].push_back({t, f});
    return j;
  }
};

inline EvaluationReport make_report(const std::vector<GeodesicErrors>& results,
                                    const std::vector<double>& thresholds = default_thresholds()) {
  EvaluationReport report;
  report.pairs = results.size();
  std::vector<double> all;
  double sum = 0.0;
  for (const auto& r : results) {
    sum += r.mean;
    report.excluded += r.excluded;
    for (double e : r.per_vertex) {
      if (std::isfinite(e)) all.push_back(e);
    }
  }
  report.mean_error = results.empty() ? 0.0 : sum / static_cast<double>(results.size());
  report.mean_error_x100 = 100.0 * report.mean_error;
  const auto fractions = accuracy_curve(all, thresholds);
  for (std::size_t i = 0; i < thresholds.size(); ++i) report.curve.emplace_back(thresholds[i], fractions[i]);
  return report;
}

inline void write_report(const EvaluationReport& report, const std::filesystem::path& json_path,
                         const std::filesystem::path& curve_path) {
  {
    std::ofstream out(json_path);
    if (!out) throw IoError("cannot write " + json_path.string());
    out << report.to_json().dump(2) << '\n';
  }
  std::ofstream out(curve_path);
  if (!out) throw IoError("cannot write " + curve_path.string());
  out << "# threshold fraction\n";
  for (const auto& [t, f] : report.curve) out << format_double(t) << ' ' << format_double(f) << '\n';
}

}  // namespace fmapkit
