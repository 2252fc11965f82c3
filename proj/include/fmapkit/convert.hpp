#pragma once

#include <Eigen/Core>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>

#include "fmapkit/fmap.hpp"
#include "fmapkit/kdtree.hpp"
#include "fmapkit/parallel.hpp"
#include "fmapkit/pointmap.hpp"
#include "fmapkit/spectral.hpp"

namespace fmapkit {

/// Recovers T: N -> M from C by nearest neighbours between the rows of
/// Phi_N C (n_N x k_M) and the rows of Phi_M (n_M x k_M). Ties go to the
/// lowest source index. Confidence holds the embedding distance.
inline PointMap fmap_to_pointmap(const FuncMap& c, const SpectralBasis& basis_m, const SpectralBasis& basis_n) {
  const Index km = c.source_k();
  const Index kn = c.target_k();
  if (km > basis_m.size() || kn > basis_n.size()) {
    throw DimensionError("functional map " + std::to_string(kn) + "x" + std::to_string(km) +
                         " is wider than the bases (" + std::to_string(basis_n.size()) + ", " +
                         std::to_string(basis_m.size()) + ")");
  }
  KdTree tree(KdTree::RowMatrix(basis_m.phi.leftCols(km)));
  const KdTree::RowMatrix embedded = basis_n.phi.leftCols(kn) * c.c;

  PointMap t;
  t.assignment.resize(static_cast<std::size_t>(embedded.rows()));
  Eigen::VectorXd confidence(embedded.rows());
  parallel_for(0, embedded.rows(), [&](std::ptrdiff_t j) {
    const auto hit = tree.nearest(embedded.row(j).data());
    t.assignment[static_cast<std::size_t>(j)] = static_cast<int>(hit.index);
    confidence[j] = std::sqrt(hit.squared_distance);
  });
  t.confidence = std::move(confidence);
  return t;
}

/// Closest orthonormal matrix U V^T from the SVD of a square C.
inline Eigen::MatrixXd orthonormal_projection(const Eigen::MatrixXd& c) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(c, Eigen::ComputeFullU | Eigen::ComputeFullV);
  return svd.matrixU() * svd.matrixV().transpose();
}

inline constexpr int kDefaultIcpIterations = 10;

/// Alternates point-map recovery, re-estimation of C from the point map and
/// orthonormal projection. Stops after `iterations` rounds or once the point
/// map repeats.
inline FuncMap icp_refine(const FuncMap& c0, const SpectralBasis& basis_m, const SpectralBasis& basis_n,
                          int iterations = kDefaultIcpIterations) {
  if (c0.source_k() != c0.target_k()) throw DimensionError("ICP refinement needs a square functional map");
  const Index k = c0.source_k();
  FuncMap c = c0;
  PointMap previous;
  for (int it = 0; it < iterations; ++it) {
    PointMap t = fmap_to_pointmap(c, basis_m, basis_n);
    if (it > 0 && t == previous) break;
    c = FuncMap{orthonormal_projection(pointmap_to_fmap(basis_m, basis_n, t, k, k).c)};
    previous = std::move(t);
  }
  return c;
}

struct ZoomOutSchedule {
  int k_end = 90;
  int step = 2;
};

/// Spectral upsampling: starting from a k0 x k0 map, repeatedly recover the
/// point map and re-estimate C at width k + step, until width k1. The last
/// step is truncated so the output is exactly k1 x k1.
inline FuncMap zoomout(const FuncMap& c0, const SpectralBasis& basis_m, const SpectralBasis& basis_n, int k1,
                       int step = 2) {
  if (c0.source_k() != c0.target_k()) throw DimensionError("ZoomOut needs a square initial map");
  if (step < 1) throw UsageError("ZoomOut step must be at least 1");
  const Index k0 = c0.source_k();
  if (k1 < k0) throw UsageError("ZoomOut target width is below the initial width");
  if (k1 > basis_m.size() || k1 > basis_n.size()) {
    throw DimensionError("basis too narrow for ZoomOut to width " + std::to_string(k1) + " (have " +
                         std::to_string(std::min(basis_m.size(), basis_n.size())) + ")");
  }
  FuncMap c = c0;
  Index k = k0;
  do {
    const Index next = std::min<Index>(k + step, k1);
    const PointMap t = fmap_to_pointmap(c, basis_m, basis_n);
    c = pointmap_to_fmap(basis_m, basis_n, t, next, next);
    k = next;
  } while (k < k1);
  return c;
}

}  // namespace fmapkit
