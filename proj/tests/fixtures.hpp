#pragma once

// Synthetic datasets with known correspondence shared by the unit and
// acceptance tests.

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fmapkit.hpp"

namespace fixtures {

using namespace fmapkit;

/// A copy of a base mesh: deformed, rotated about the up axis, vertex-permuted
/// and normalized to unit area. `to_base[j]` is the base vertex of vertex j.
struct DerivedShape {
  Mesh mesh;
  std::vector<int> to_base;
};

inline DerivedShape derive_shape(const Mesh& base, double amplitude, std::uint64_t seed, bool rotate = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::acos(-1.0));
  Mesh m = amplitude > 0.0 ? shapes::smooth_deform(base, amplitude, seed) : base;
  if (rotate) m = shapes::rotate_up(m, angle(rng));
  const auto perm = shapes::random_permutation(base.num_vertices(), seed * 31 + 7);
  m = normalize_mesh(shapes::permute_vertices(m, perm), NormalizeMode::unit_area);
  return DerivedShape{std::move(m), perm};
}

/// T: N -> M between two derived shapes of the same base.
inline PointMap correspondence(const DerivedShape& source, const DerivedShape& target) {
  std::vector<int> inverse(source.to_base.size());
  for (std::size_t j = 0; j < source.to_base.size(); ++j) inverse[static_cast<std::size_t>(source.to_base[j])] = static_cast<int>(j);
  PointMap t;
  for (int b : target.to_base) t.assignment.push_back(inverse[static_cast<std::size_t>(b)]);
  return t;
}

struct TrainingFixture {
  std::vector<DerivedShape> derived;
  std::vector<ShapeSample> samples;
  std::vector<TrainingPair> pairs;
  /// Held-out pair (source, target) of shapes never seen in training.
  std::size_t held_source = 0;
  std::size_t held_target = 0;
  PointMap held_gt;
  int k = 20;
};

/// Training set of `num_pairs` pairs among `num_shapes` deformed copies of a
/// ~300 vertex asymmetric blob, plus one held-out pair of two further copies.
inline TrainingFixture make_training_fixture(int k = 20, int num_shapes = 10, int num_pairs = 20,
                                             double amplitude = 0.08, std::uint64_t seed = 2024) {
  TrainingFixture fx;
  fx.k = k;
  const Mesh base = shapes::bumpy_blob(17, 18);
  for (int s = 0; s < num_shapes + 2; ++s) {
    fx.derived.push_back(derive_shape(base, amplitude, seed + 101 * static_cast<std::uint64_t>(s)));
  }
  fx.samples.reserve(fx.derived.size());
  for (const auto& d : fx.derived) fx.samples.push_back(ShapeSample{d.mesh, eigendecompose(d.mesh, k)});

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> pick(0, num_shapes - 1);
  while (static_cast<int>(fx.pairs.size()) < num_pairs) {
    const int a = pick(rng);
    const int b = pick(rng);
    if (a == b) continue;
    const PointMap t = correspondence(fx.derived[static_cast<std::size_t>(a)], fx.derived[static_cast<std::size_t>(b)]);
    const auto& sa = fx.samples[static_cast<std::size_t>(a)];
    const auto& sb = fx.samples[static_cast<std::size_t>(b)];
    fx.pairs.push_back(TrainingPair{&sa, &sb, pointmap_to_fmap(sa.basis, sb.basis, t, k, k)});
  }
  fx.held_source = static_cast<std::size_t>(num_shapes);
  fx.held_target = static_cast<std::size_t>(num_shapes + 1);
  fx.held_gt = correspondence(fx.derived[fx.held_source], fx.derived[fx.held_target]);
  return fx;
}

/// Mean geodesic error of the held-out pair with the given descriptors.
inline double held_out_error(const TrainingFixture& fx, const DescriptorConfig& desc, double lambda,
                             const ExtractorNet<float>* net = nullptr) {
  const auto& m = fx.samples[fx.held_source];
  const auto& n = fx.samples[fx.held_target];
  const MatchResult r = match_shapes(m.mesh, m.basis, n.mesh, n.basis, fx.k, lambda, desc, net);
  return geodesic_errors(r.t, fx.held_gt, m.mesh).mean;
}

inline constexpr double kTrainingBaseCell = 0.05;

/// Prolate ellipsoid along the up axis with x and z scaled by `thickness`.
/// Its low-frequency embedding barely separates points around the waist, so
/// coarse spectral maps are ambiguous there.
inline Mesh thin_ellipsoid(int stacks, int slices, double thickness) {
  const Mesh s = shapes::uv_sphere(stacks, slices);
  Points v = s.vertices;
  v.col(0) *= thickness;
  v.col(2) *= thickness;
  return shapes::with_vertices(s, std::move(v));
}

}  // namespace fixtures
