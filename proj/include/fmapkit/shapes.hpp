#pragma once

// Procedural meshes and synthetic correspondence pairs used by tests, the
// acceptance suite and the samples.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <utility>
#include <vector>

#include "fmapkit/mesh.hpp"

namespace fmapkit::shapes {

/// Unit-radius icosphere; 10*4^s + 2 vertices.
inline Mesh icosphere(int subdivisions) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Eigen::Vector3d> v = {{-1, t, 0}, {1, t, 0},  {-1, -t, 0}, {1, -t, 0}, {0, -1, t},  {0, 1, t},
                                    {0, -1, -t}, {0, 1, -t}, {t, 0, -1},  {t, 0, 1},  {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<int, 3>> f = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                       {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                       {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                       {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int s = 0; s < subdivisions; ++s) {
    std::map<std::pair<int, int>, int> midpoint;
    auto mid = [&](int a, int b) {
      auto key = std::minmax(a, b);
      auto it = midpoint.find(key);
      if (it != midpoint.end()) return it->second;
      v.push_back((v[static_cast<std::size_t>(a)] + v[static_cast<std::size_t>(b)]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      midpoint.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    next.reserve(f.size() * 4);
    for (const auto& tri : f) {
      const int a = mid(tri[0], tri[1]);
      const int b = mid(tri[1], tri[2]);
      const int c = mid(tri[2], tri[0]);
      next.push_back({tri[0], a, c});
      next.push_back({tri[1], b, a});
      next.push_back({tri[2], c, b});
      next.push_back({a, b, c});
    }
    f = std::move(next);
  }
  Points verts(static_cast<Index>(v.size()), 3);
  for (std::size_t i = 0; i < v.size(); ++i) verts.row(static_cast<Index>(i)) = v[i];
  Faces faces(static_cast<Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) faces.row(static_cast<Index>(i)) << f[i][0], f[i][1], f[i][2];
  return make_mesh(std::move(verts), faces);
}

/// Latitude/longitude sphere with poles on the y axis; (stacks-1)*slices + 2
/// vertices.
inline Mesh uv_sphere(int stacks, int slices) {
  const double pi = std::acos(-1.0);
  const int rings = stacks - 1;
  Points verts(rings * slices + 2, 3);
  verts.row(0) << 0, 1, 0;
  for (int r = 0; r < rings; ++r) {
    const double theta = pi * (r + 1) / stacks;
    for (int s = 0; s < slices; ++s) {
      const double phi = 2.0 * pi * s / slices;
      verts.row(1 + r * slices + s) << std::sin(theta) * std::cos(phi), std::cos(theta), -std::sin(theta) * std::sin(phi);
    }
  }
  const int south = rings * slices + 1;
  verts.row(south) << 0, -1, 0;

  std::vector<std::array<int, 3>> f;
  auto at = [&](int r, int s) { return 1 + r * slices + (s % slices); };
  for (int s = 0; s < slices; ++s) f.push_back({0, at(0, s), at(0, s + 1)});
  for (int r = 0; r + 1 < rings; ++r) {
    for (int s = 0; s < slices; ++s) {
      f.push_back({at(r, s), at(r + 1, s), at(r + 1, s + 1)});
      f.push_back({at(r, s), at(r + 1, s + 1), at(r, s + 1)});
    }
  }
  for (int s = 0; s < slices; ++s) f.push_back({south, at(rings - 1, s + 1), at(rings - 1, s)});
  Faces faces(static_cast<Index>(f.size()), 3);
  for (std::size_t i = 0; i < f.size(); ++i) faces.row(static_cast<Index>(i)) << f[i][0], f[i][1], f[i][2];
  return make_mesh(std::move(verts), faces);
}

/// Replaces vertex positions, keeping connectivity and up axis.
inline Mesh with_vertices(const Mesh& mesh, Points vertices) {
  Mesh out = make_mesh(std::move(vertices), mesh.faces, mesh.up_axis);
  return out;
}

/// Adds independent uniform noise in [-amplitude, amplitude]^3 to every vertex.
inline Mesh jitter(const Mesh& mesh, double amplitude, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  Points v = mesh.vertices;
  for (Index i = 0; i < v.rows(); ++i) {
    for (int c = 0; c < 3; ++c) v(i, c) += u(rng);
  }
  return with_vertices(mesh, std::move(v));
}

inline std::vector<int> random_permutation(Index n, std::uint64_t seed) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = perm.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(perm[i - 1], perm[pick(rng)]);
  }
  return perm;
}

/// New vertex j is old vertex perm[j]. The point map from the result back to
/// the input is therefore j -> perm[j].
inline Mesh permute_vertices(const Mesh& mesh, const std::vector<int>& perm) {
  const Index n = mesh.num_vertices();
  std::vector<int> inverse(static_cast<std::size_t>(n));
  Points v(n, 3);
  for (Index j = 0; j < n; ++j) {
    v.row(j) = mesh.vertices.row(perm[static_cast<std::size_t>(j)]);
    inverse[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])] = static_cast<int>(j);
  }
  Faces f = mesh.faces;
  for (Index i = 0; i < f.rows(); ++i) {
    for (int c = 0; c < 3; ++c) f(i, c) = inverse[static_cast<std::size_t>(f(i, c))];
  }
  return make_mesh(std::move(v), f, mesh.up_axis);
}

inline Mesh rotate_up(const Mesh& mesh, double angle) {
  return with_vertices(mesh, rotate_about(mesh.vertices, mesh.up_axis, angle, centroid(mesh)));
}

/// Low-frequency displacement: a sum of a few random sinusoidal waves per
/// coordinate, amplitude-scaled. Small amplitudes give near-isometric copies.
inline Mesh smooth_deform(const Mesh& mesh, double amplitude, std::uint64_t seed, int waves = 3) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * std::acos(-1.0));
  const Eigen::Vector3d extent = mesh.vertices.colwise().maxCoeff() - mesh.vertices.colwise().minCoeff();
  const double scale = extent.maxCoeff();
  struct Wave {
    Eigen::Vector3d freq;
    Eigen::Vector3d dir;
    double phase;
  };
  std::vector<Wave> ws;
  for (int w = 0; w < waves; ++w) {
    Eigen::Vector3d freq(gauss(rng), gauss(rng), gauss(rng));
    Eigen::Vector3d dir(gauss(rng), gauss(rng), gauss(rng));
    ws.push_back({freq * (2.0 / scale), dir.normalized(), phase(rng)});
  }
  Points v = mesh.vertices;
  for (Index i = 0; i < v.rows(); ++i) {
    const Eigen::Vector3d p = mesh.vertices.row(i);
    Eigen::Vector3d d = Eigen::Vector3d::Zero();
    for (const auto& w : ws) d += w.dir * std::sin(w.freq.dot(p) + w.phase);
    v.row(i) += (amplitude * scale / std::sqrt(static_cast<double>(waves))) * d.transpose();
  }
  return with_vertices(mesh, std::move(v));
}

/// Maps a unit-sphere mesh onto an asymmetric bumpy blob: elongated along y
/// with a few fixed Gaussian bumps so that no rigid symmetry survives. Vertex
/// i of the result lies over direction i of the input.
inline Mesh bumpy_surface(const Mesh& sphere) {
  const std::vector<std::pair<Eigen::Vector3d, double>> bumps = {
      {Eigen::Vector3d(0.8, 0.5, 0.2).normalized(), 0.35},
      {Eigen::Vector3d(-0.6, -0.2, 0.7).normalized(), 0.25},
      {Eigen::Vector3d(0.1, -0.9, -0.4).normalized(), 0.30},
      {Eigen::Vector3d(-0.3, 0.6, -0.8).normalized(), 0.15},
  };
  Points v = sphere.vertices;
  for (Index i = 0; i < v.rows(); ++i) {
    const Eigen::Vector3d dir = sphere.vertices.row(i).normalized();
    double r = 1.0;
    for (const auto& [center, height] : bumps) r += height * std::exp(-(dir - center).squaredNorm() / 0.18);
    Eigen::Vector3d p = r * dir;
    p[1] *= 1.6;
    v.row(i) = p.transpose();
  }
  return with_vertices(sphere, std::move(v));
}

inline Mesh bumpy_blob(int stacks, int slices) { return bumpy_surface(uv_sphere(stacks, slices)); }

}  // namespace fmapkit::shapes
