#pragma once

// Kernel point convolution on point clouds.
//
// A kernel is K points z_k inside a ball of radius r, each carrying a D x D'
// weight matrix W_k. For a query x with support neighbours x_i (|x_i - x| < r)
//   out(x) = sum_i sum_k h(x_i - x, z_k) f_i W_k,   h(y, z) = max(0, 1 - |y - z| / sigma).
// Kernel positions are fixed; only the W_k are trained.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <vector>

#include "fmapkit/error.hpp"
#include "fmapkit/mesh.hpp"

namespace fmapkit {

template <typename Scalar>
using FeatureMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using WeightMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

inline double kernel_influence(const Eigen::Vector3d& y, const Eigen::Vector3d& z, double sigma) {
  return std::max(0.0, 1.0 - (y - z).norm() / sigma);
}

/// One point at the origin plus K-1 points on a Fibonacci sphere of radius
/// 0.75 r.
inline Points kernel_layout(int num_points, double radius) {
  if (num_points < 1) throw UsageError("a kernel needs at least one point");
  Points z = Points::Zero(num_points, 3);
  const int shell = num_points - 1;
  const double golden = std::acos(-1.0) * (3.0 - std::sqrt(5.0));
  for (int i = 0; i < shell; ++i) {
    const double y = shell == 1 ? 0.0 : 1.0 - 2.0 * (i + 0.5) / shell;
    const double rad = std::sqrt(std::max(0.0, 1.0 - y * y));
    const double theta = golden * i;
    z.row(i + 1) << rad * std::cos(theta), y, rad * std::sin(theta);
  }
  z.bottomRows(shell) *= 0.75 * radius;
  return z;
}

template <typename Scalar>
struct KernelParams {
  Points kernel_points;
  std::vector<WeightMatrix<Scalar>> weights;
  double radius = 1.0;
  double sigma = 1.0;

  Index size() const { return kernel_points.rows(); }
  Index in_dim() const { return weights.empty() ? 0 : weights.front().rows(); }
  Index out_dim() const { return weights.empty() ? 0 : weights.front().cols(); }

  void validate() const {
    if (kernel_points.rows() < 1) throw UsageError("kernel has no points");
    if (static_cast<Index>(weights.size()) != kernel_points.rows()) {
      throw DimensionError("kernel has " + std::to_string(kernel_points.rows()) + " points but " +
                           std::to_string(weights.size()) + " weight matrices");
    }
    if (!(sigma > 0.0)) throw UsageError("kernel influence sigma must be positive");
    for (Index k = 0; k < kernel_points.rows(); ++k) {
      if (kernel_points.row(k).norm() > radius * (1.0 + 1e-12)) throw UsageError("kernel point outside its radius");
      if (weights[static_cast<std::size_t>(k)].rows() != in_dim() || weights[static_cast<std::size_t>(k)].cols() != out_dim()) {
        throw DimensionError("kernel weight matrices differ in shape");
      }
    }
  }
};

/// Nonzero influences h(x_i - x, z_k) for every query, ordered by ascending
/// neighbour then kernel index. Depends only on geometry, so it is computed
/// once per (support, queries, kernel) and reused by forward and backward.
struct ConvInfluence {
  std::vector<Index> offsets;  // size queries + 1
  std::vector<Index> neighbor;
  std::vector<int> kernel;
  std::vector<double> weight;

  Index num_queries() const { return static_cast<Index>(offsets.size()) - 1; }
};

inline ConvInfluence conv_influence(const PointCloud& support, const PointCloud& queries, const Points& kernel_points,
                                    double sigma, const NeighborLists& neighbors) {
  if (static_cast<Index>(neighbors.size()) != queries.size()) {
    throw DimensionError("neighbour lists do not match the query count");
  }
  ConvInfluence inf;
  inf.offsets.reserve(static_cast<std::size_t>(queries.size()) + 1);
  inf.offsets.push_back(0);
  for (Index q = 0; q < queries.size(); ++q) {
    const Eigen::Vector3d x = queries.points.row(q);
    for (Index i : neighbors[static_cast<std::size_t>(q)]) {
      if (i < 0 || i >= support.size()) throw DimensionError("neighbour index outside the support cloud");
      const Eigen::Vector3d y = support.points.row(i).transpose() - x;
      for (Index k = 0; k < kernel_points.rows(); ++k) {
        const double h = kernel_influence(y, kernel_points.row(k).transpose(), sigma);
        if (h > 0.0) {
          inf.neighbor.push_back(i);
          inf.kernel.push_back(static_cast<int>(k));
          inf.weight.push_back(h);
        }
      }
    }
    inf.offsets.push_back(static_cast<Index>(inf.neighbor.size()));
  }
  return inf;
}

namespace detail {

/// Per-kernel-point influence-weighted feature sums for one query (K x D).
template <typename Scalar>
void gather_kernel_sums(const ConvInfluence& inf, Index q, const FeatureMatrix<Scalar>& feats,
                        FeatureMatrix<Scalar>& sums, std::vector<char>& touched) {
  sums.setZero();
  std::fill(touched.begin(), touched.end(), 0);
  for (Index e = inf.offsets[static_cast<std::size_t>(q)]; e < inf.offsets[static_cast<std::size_t>(q) + 1]; ++e) {
    const auto k = inf.kernel[static_cast<std::size_t>(e)];
    sums.row(k) += static_cast<Scalar>(inf.weight[static_cast<std::size_t>(e)]) *
                   feats.row(inf.neighbor[static_cast<std::size_t>(e)]);
    touched[static_cast<std::size_t>(k)] = 1;
  }
}

}  // namespace detail

/// Convolution with precomputed influences. feats is p x D; returns q x D'.
template <typename Scalar>
FeatureMatrix<Scalar> kpconv_forward(const ConvInfluence& inf, const FeatureMatrix<Scalar>& feats,
                                     const std::vector<WeightMatrix<Scalar>>& weights) {
  if (weights.empty()) throw DimensionError("kernel without weights");
  const Index d_in = weights.front().rows();
  const Index d_out = weights.front().cols();
  if (feats.cols() != d_in) {
    throw DimensionError("features have " + std::to_string(feats.cols()) + " channels, kernel expects " +
                         std::to_string(d_in));
  }
  const Index num_k = static_cast<Index>(weights.size());
  FeatureMatrix<Scalar> out = FeatureMatrix<Scalar>::Zero(inf.num_queries(), d_out);
  FeatureMatrix<Scalar> sums(num_k, d_in);
  std::vector<char> touched(static_cast<std::size_t>(num_k));
  for (Index q = 0; q < inf.num_queries(); ++q) {
    detail::gather_kernel_sums(inf, q, feats, sums, touched);
    for (Index k = 0; k < num_k; ++k) {
      if (touched[static_cast<std::size_t>(k)]) out.row(q).noalias() += sums.row(k) * weights[static_cast<std::size_t>(k)];
    }
  }
  return out;
}

template <typename Scalar>
FeatureMatrix<Scalar> kpconv_forward(const PointCloud& support, const PointCloud& queries,
                                     const FeatureMatrix<Scalar>& feats, const KernelParams<Scalar>& kernel,
                                     const NeighborLists& neighbors) {
  kernel.validate();
  if (feats.rows() != support.size()) throw DimensionError("feature rows do not match the support cloud");
  return kpconv_forward(conv_influence(support, queries, kernel.kernel_points, kernel.sigma, neighbors), feats,
                        kernel.weights);
}

template <typename Scalar>
struct KpconvGradients {
  FeatureMatrix<Scalar> d_feats;
  std::vector<WeightMatrix<Scalar>> d_weights;
};

/// Reverse mode of kpconv_forward for an upstream gradient of shape q x D'.
template <typename Scalar>
KpconvGradients<Scalar> kpconv_backward(const ConvInfluence& inf, const FeatureMatrix<Scalar>& feats,
                                        const std::vector<WeightMatrix<Scalar>>& weights,
                                        const FeatureMatrix<Scalar>& upstream) {
  if (weights.empty()) throw DimensionError("kernel without weights");
  const Index d_in = weights.front().rows();
  const Index d_out = weights.front().cols();
  if (feats.cols() != d_in || upstream.cols() != d_out || upstream.rows() != inf.num_queries()) {
    throw DimensionError("kpconv backward shapes do not match the forward call");
  }
  const Index num_k = static_cast<Index>(weights.size());
  KpconvGradients<Scalar> g;
  g.d_feats = FeatureMatrix<Scalar>::Zero(feats.rows(), d_in);
  g.d_weights.assign(static_cast<std::size_t>(num_k), WeightMatrix<Scalar>::Zero(d_in, d_out));

  FeatureMatrix<Scalar> sums(num_k, d_in);
  FeatureMatrix<Scalar> pulled(num_k, d_in);
  std::vector<char> touched(static_cast<std::size_t>(num_k));
  for (Index q = 0; q < inf.num_queries(); ++q) {
    if (upstream.row(q).isZero(0)) continue;
    detail::gather_kernel_sums(inf, q, feats, sums, touched);
    for (Index k = 0; k < num_k; ++k) {
      if (!touched[static_cast<std::size_t>(k)]) continue;
      g.d_weights[static_cast<std::size_t>(k)].noalias() += sums.row(k).transpose() * upstream.row(q);
      pulled.row(k).noalias() = upstream.row(q) * weights[static_cast<std::size_t>(k)].transpose();
    }
    for (Index e = inf.offsets[static_cast<std::size_t>(q)]; e < inf.offsets[static_cast<std::size_t>(q) + 1]; ++e) {
      g.d_feats.row(inf.neighbor[static_cast<std::size_t>(e)]) +=
          static_cast<Scalar>(inf.weight[static_cast<std::size_t>(e)]) * pulled.row(inf.kernel[static_cast<std::size_t>(e)]);
    }
  }
  return g;
}

template <typename Scalar>
KpconvGradients<Scalar> kpconv_backward(const PointCloud& support, const PointCloud& queries,
                                        const FeatureMatrix<Scalar>& feats, const KernelParams<Scalar>& kernel,
                                        const NeighborLists& neighbors, const FeatureMatrix<Scalar>& upstream) {
  kernel.validate();
  return kpconv_backward(conv_influence(support, queries, kernel.kernel_points, kernel.sigma, neighbors), feats,
                         kernel.weights, upstream);
}

}  // namespace fmapkit
