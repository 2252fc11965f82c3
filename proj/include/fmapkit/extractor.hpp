#pragma once

// Reduced-depth point-cloud feature extractor: strided kernel point
// convolutions down a grid hierarchy, then parent-copy upsampling with skip
// concatenation and pointwise linear layers back to the finest level.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmapkit/error.hpp"
#include "fmapkit/hash.hpp"
#include "fmapkit/kpconv.hpp"
#include "fmapkit/mesh.hpp"

namespace fmapkit {

struct ExtractorConfig {
  /// Output width of each conv block; block 0 runs on level 0, block b pools
  /// level b-1 into level b.
  std::vector<int> down_dims{16, 32, 64};
  /// Output width of each upsampling stage; there is one stage per pooling.
  std::vector<int> up_dims{32, 32};
  int input_dim = 4;
  int kernel_points = 15;
  /// Kernel radius and influence range in units of the support level's cell.
  double radius_multiplier = 2.5;
  double sigma_multiplier = 1.0;
  double leaky_slope = 0.1;

  int num_levels() const { return static_cast<int>(down_dims.size()); }
  int output_dim() const { return up_dims.empty() ? down_dims.back() : up_dims.back(); }

  void validate() const {
    if (down_dims.empty()) throw UsageError("extractor needs at least one conv block");
    if (up_dims.size() + 1 != down_dims.size()) {
      throw UsageError("extractor needs exactly one upsampling stage per pooling block");
    }
    if (input_dim < 1 || kernel_points < 1) throw UsageError("extractor input_dim and kernel_points must be positive");
    for (int d : down_dims) {
      if (d < 1) throw UsageError("extractor widths must be positive");
    }
    for (int d : up_dims) {
      if (d < 1) throw UsageError("extractor widths must be positive");
    }
    if (!(radius_multiplier > 0.0) || !(sigma_multiplier > 0.0)) {
      throw UsageError("kernel radius and sigma multipliers must be positive");
    }
  }

  nlohmann::json to_json() const {
    return {{"down_dims", down_dims},         {"up_dims", up_dims},
            {"input_dim", input_dim},         {"kernel_points", kernel_points},
            {"radius_multiplier", radius_multiplier}, {"sigma_multiplier", sigma_multiplier},
            {"leaky_slope", leaky_slope}};
  }

  static ExtractorConfig from_json(const nlohmann::json& j) {
    ExtractorConfig c;
    c.down_dims = j.value("down_dims", c.down_dims);
    c.up_dims = j.value("up_dims", c.up_dims);
    c.input_dim = j.value("input_dim", c.input_dim);
    c.kernel_points = j.value("kernel_points", c.kernel_points);
    c.radius_multiplier = j.value("radius_multiplier", c.radius_multiplier);
    c.sigma_multiplier = j.value("sigma_multiplier", c.sigma_multiplier);
    c.leaky_slope = j.value("leaky_slope", c.leaky_slope);
    c.validate();
    return c;
  }
};

template <typename Scalar>
struct ConvBlock {
  KernelParams<Scalar> kernel;
  int support_level = 0;
  int query_level = 0;
  double leaky_slope = 0.1;
};

template <typename Scalar>
struct UpStage {
  /// (coarse width + skip width) x output width.
  WeightMatrix<Scalar> weight;
  int from_level = 1;
  int to_level = 0;
  /// Block whose output (at to_level) is concatenated after the upsampled
  /// coarse features.
  int skip_block = 0;
  bool activate = true;
};

template <typename Scalar>
struct ExtractorNet {
  std::vector<ConvBlock<Scalar>> blocks;
  std::vector<UpStage<Scalar>> ups;
  int input_dim = 4;
  int output_dim = 0;
  double base_cell = 0.03;

  /// Architecture with zero weights. Kernel radii follow the cell size of
  /// each block's support level: base_cell * 2^level.
  static ExtractorNet build(const ExtractorConfig& cfg, double base_cell) {
    cfg.validate();
    if (!(base_cell > 0.0)) throw UsageError("base cell must be positive");
    ExtractorNet net;
    net.input_dim = cfg.input_dim;
    net.output_dim = cfg.output_dim();
    net.base_cell = base_cell;
    int in = cfg.input_dim;
    for (int b = 0; b < cfg.num_levels(); ++b) {
      ConvBlock<Scalar> block;
      block.support_level = b == 0 ? 0 : b - 1;
      block.query_level = b;
      block.leaky_slope = cfg.leaky_slope;
      const double cell = base_cell * std::ldexp(1.0, block.support_level);
      block.kernel.radius = cfg.radius_multiplier * cell;
      block.kernel.sigma = cfg.sigma_multiplier * cell;
      block.kernel.kernel_points = kernel_layout(cfg.kernel_points, block.kernel.radius);
      block.kernel.weights.assign(static_cast<std::size_t>(cfg.kernel_points),
                                  WeightMatrix<Scalar>::Zero(in, cfg.down_dims[static_cast<std::size_t>(b)]));
      net.blocks.push_back(std::move(block));
      in = cfg.down_dims[static_cast<std::size_t>(b)];
    }
    for (std::size_t u = 0; u < cfg.up_dims.size(); ++u) {
      UpStage<Scalar> stage;
      stage.from_level = cfg.num_levels() - 1 - static_cast<int>(u);
      stage.to_level = stage.from_level - 1;
      stage.skip_block = stage.to_level;
      stage.activate = u + 1 < cfg.up_dims.size();
      const int skip = cfg.down_dims[static_cast<std::size_t>(stage.skip_block)];
      stage.weight = WeightMatrix<Scalar>::Zero(in + skip, cfg.up_dims[u]);
      net.ups.push_back(std::move(stage));
      in = cfg.up_dims[u];
    }
    return net;
  }

  int num_levels() const { return static_cast<int>(blocks.size()); }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& b : blocks) {
      for (const auto& w : b.kernel.weights) n += w.size();
    }
    for (const auto& u : ups) n += u.weight.size();
    return n;
  }

  /// Parameters in storage order: blocks, kernel points, column-major entries;
  /// then upsampling weights.
  template <typename T>
  void set_parameters(std::span<const T> params) {
    if (static_cast<Index>(params.size()) != parameter_count()) {
      throw DimensionError("expected " + std::to_string(parameter_count()) + " parameters, got " +
                           std::to_string(params.size()));
    }
    std::size_t at = 0;
    auto fill = [&](WeightMatrix<Scalar>& w) {
      for (Index i = 0; i < w.size(); ++i) w.data()[i] = static_cast<Scalar>(params[at++]);
    };
    for (auto& b : blocks) {
      for (auto& w : b.kernel.weights) fill(w);
    }
    for (auto& u : ups) fill(u.weight);
  }

  template <typename T>
  std::vector<T> parameters() const {
    std::vector<T> out;
    out.reserve(static_cast<std::size_t>(parameter_count()));
    auto take = [&](const WeightMatrix<Scalar>& w) {
      for (Index i = 0; i < w.size(); ++i) out.push_back(static_cast<T>(w.data()[i]));
    };
    for (const auto& b : blocks) {
      for (const auto& w : b.kernel.weights) take(w);
    }
    for (const auto& u : ups) take(u.weight);
    return out;
  }
};

/// Glorot-uniform initialization: every weight matrix of shape D x D' draws
/// from U(-sqrt(6/(D+D')), sqrt(6/(D+D'))).
template <typename Scalar>
std::vector<float> init_parameters(const ExtractorNet<Scalar>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::vector<float> params;
  params.reserve(static_cast<std::size_t>(net.parameter_count()));
  auto draw = [&](const WeightMatrix<Scalar>& w) {
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Index i = 0; i < w.size(); ++i) params.push_back(static_cast<float>(u(rng)));
  };
  for (const auto& b : net.blocks) {
    for (const auto& w : b.kernel.weights) draw(w);
  }
  for (const auto& u : net.ups) draw(u.weight);
  return params;
}

/// Geometry-only inputs of the extractor for one shape: the grid hierarchy,
/// per-block influences and the level-0 input signal [1, x, y, z].
struct ShapeGeometry {
  SamplingHierarchy hierarchy;
  std::vector<ConvInfluence> influences;
  FeatureMatrix<double> input_features;
  Index num_vertices = 0;

  /// Level-0 cell of each vertex.
  const std::vector<Index>& vertex_cells() const { return hierarchy.levels.front().cloud.parent_indices; }
};

template <typename Scalar>
ShapeGeometry prepare_geometry(const Points& vertices, const ExtractorNet<Scalar>& net) {
  ShapeGeometry geo;
  geo.num_vertices = vertices.rows();
  geo.hierarchy = build_hierarchy(PointCloud{vertices, {}}, net.base_cell, net.num_levels());
  for (const auto& block : net.blocks) {
    const PointCloud& support = geo.hierarchy.levels[static_cast<std::size_t>(block.support_level)].cloud;
    const PointCloud& queries = geo.hierarchy.levels[static_cast<std::size_t>(block.query_level)].cloud;
    const NeighborLists nb = radius_neighbors(queries, support, block.kernel.radius);
    geo.influences.push_back(conv_influence(support, queries, block.kernel.kernel_points, block.kernel.sigma, nb));
  }
  const Points& p0 = geo.hierarchy.levels.front().cloud.points;
  if (net.input_dim != 4) throw UsageError("the geometric input signal has 4 channels (1, x, y, z)");
  geo.input_features.resize(p0.rows(), 4);
  geo.input_features.col(0).setOnes();
  geo.input_features.rightCols(3) = p0;
  return geo;
}

template <typename Scalar>
struct ForwardTrace {
  std::vector<FeatureMatrix<Scalar>> block_in;
  std::vector<FeatureMatrix<Scalar>> block_pre;
  std::vector<FeatureMatrix<Scalar>> block_out;
  std::vector<FeatureMatrix<Scalar>> up_in;
  std::vector<FeatureMatrix<Scalar>> up_pre;
};

namespace detail {

template <typename Scalar>
FeatureMatrix<Scalar> leaky(const FeatureMatrix<Scalar>& x, double slope) {
  const Scalar s = static_cast<Scalar>(slope);
  return x.unaryExpr([s](Scalar v) { return v > Scalar(0) ? v : s * v; });
}

template <typename Scalar>
FeatureMatrix<Scalar> leaky_backward(const FeatureMatrix<Scalar>& pre, const FeatureMatrix<Scalar>& grad,
                                     double slope) {
  const Scalar s = static_cast<Scalar>(slope);
  return grad.binaryExpr(pre, [s](Scalar g, Scalar p) { return p > Scalar(0) ? g : s * g; });
}

template <typename Scalar>
FeatureMatrix<Scalar> upsample(const FeatureMatrix<Scalar>& coarse, const std::vector<Index>& parent) {
  FeatureMatrix<Scalar> fine(static_cast<Index>(parent.size()), coarse.cols());
  for (std::size_t p = 0; p < parent.size(); ++p) fine.row(static_cast<Index>(p)) = coarse.row(parent[p]);
  return fine;
}

template <typename Scalar>
void upsample_backward(const FeatureMatrix<Scalar>& d_fine, const std::vector<Index>& parent,
                       FeatureMatrix<Scalar>& d_coarse) {
  for (std::size_t p = 0; p < parent.size(); ++p) d_coarse.row(parent[p]) += d_fine.row(static_cast<Index>(p));
}

}  // namespace detail

/// Per-vertex descriptors (n x output_dim). Each vertex takes the feature of
/// its level-0 cell.
template <typename Scalar>
FeatureMatrix<Scalar> extractor_forward(const ExtractorNet<Scalar>& net, const ShapeGeometry& geo,
                                        ForwardTrace<Scalar>* trace = nullptr) {
  if (static_cast<int>(geo.hierarchy.depth()) < net.num_levels() ||
      geo.influences.size() != net.blocks.size()) {
    throw DimensionError("shape geometry was prepared for a different extractor");
  }
  ForwardTrace<Scalar> local;
  ForwardTrace<Scalar>& t = trace ? *trace : local;
  t = {};
  FeatureMatrix<Scalar> x = geo.input_features.template cast<Scalar>();
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    const auto& block = net.blocks[b];
    const FeatureMatrix<Scalar>& in = b == 0 ? x : t.block_out[b - 1];
    t.block_in.push_back(in);
    t.block_pre.push_back(kpconv_forward(geo.influences[b], in, block.kernel.weights));
    t.block_out.push_back(detail::leaky(t.block_pre.back(), block.leaky_slope));
  }
  FeatureMatrix<Scalar> cur = t.block_out.back();
  for (const auto& stage : net.ups) {
    const auto& parent = geo.hierarchy.levels[static_cast<std::size_t>(stage.from_level)].cloud.parent_indices;
    const FeatureMatrix<Scalar> up = detail::upsample(cur, parent);
    const FeatureMatrix<Scalar>& skip = t.block_out[static_cast<std::size_t>(stage.skip_block)];
    if (stage.weight.rows() != up.cols() + skip.cols()) throw DimensionError("upsampling stage width mismatch");
    FeatureMatrix<Scalar> in(up.rows(), up.cols() + skip.cols());
    in << up, skip;
    t.up_in.push_back(in);
    t.up_pre.push_back(in * stage.weight);
    cur = stage.activate ? detail::leaky(t.up_pre.back(), net.blocks.front().leaky_slope) : t.up_pre.back();
  }
  return detail::upsample(cur, geo.vertex_cells());
}

/// Gradient of <d_output, extractor_forward(net, geo)> with respect to the
/// parameters, in ExtractorNet::parameters() order.
template <typename Scalar>
std::vector<Scalar> extractor_backward(const ExtractorNet<Scalar>& net, const ShapeGeometry& geo,
                                       const ForwardTrace<Scalar>& trace, const FeatureMatrix<Scalar>& d_output) {
  if (d_output.rows() != geo.num_vertices || d_output.cols() != net.output_dim) {
    throw DimensionError("output gradient shape does not match the extractor output");
  }
  const Index level0 = geo.hierarchy.levels.front().cloud.size();
  FeatureMatrix<Scalar> d_cur = FeatureMatrix<Scalar>::Zero(level0, d_output.cols());
  detail::upsample_backward(d_output, geo.vertex_cells(), d_cur);

  std::vector<FeatureMatrix<Scalar>> d_block_out(net.blocks.size());
  for (std::size_t b = 0; b < net.blocks.size(); ++b) {
    d_block_out[b] = FeatureMatrix<Scalar>::Zero(trace.block_out[b].rows(), trace.block_out[b].cols());
  }
  std::vector<WeightMatrix<Scalar>> d_up(net.ups.size());
  for (std::size_t r = net.ups.size(); r-- > 0;) {
    const auto& stage = net.ups[r];
    const FeatureMatrix<Scalar> d_pre =
        stage.activate ? detail::leaky_backward(trace.up_pre[r], d_cur, net.blocks.front().leaky_slope) : d_cur;
    d_up[r] = trace.up_in[r].transpose() * d_pre;
    const FeatureMatrix<Scalar> d_in = d_pre * stage.weight.transpose();
    const Index coarse_width = stage.weight.rows() - trace.block_out[static_cast<std::size_t>(stage.skip_block)].cols();
    d_block_out[static_cast<std::size_t>(stage.skip_block)] += d_in.rightCols(d_in.cols() - coarse_width);
    const auto& parent = geo.hierarchy.levels[static_cast<std::size_t>(stage.from_level)].cloud.parent_indices;
    FeatureMatrix<Scalar> d_coarse =
        FeatureMatrix<Scalar>::Zero(geo.hierarchy.levels[static_cast<std::size_t>(stage.from_level)].cloud.size(),
                                    coarse_width);
    detail::upsample_backward(FeatureMatrix<Scalar>(d_in.leftCols(coarse_width)), parent, d_coarse);
    d_cur = std::move(d_coarse);
  }
  d_block_out.back() += d_cur;

  std::vector<std::vector<WeightMatrix<Scalar>>> d_kernels(net.blocks.size());
  for (std::size_t b = net.blocks.size(); b-- > 0;) {
    const auto& block = net.blocks[b];
    const FeatureMatrix<Scalar> d_pre = detail::leaky_backward(trace.block_pre[b], d_block_out[b], block.leaky_slope);
    auto g = kpconv_backward(geo.influences[b], trace.block_in[b], block.kernel.weights, d_pre);
    d_kernels[b] = std::move(g.d_weights);
    if (b > 0) d_block_out[b - 1] += g.d_feats;
  }

  std::vector<Scalar> grad;
  grad.reserve(static_cast<std::size_t>(net.parameter_count()));
  for (const auto& ks : d_kernels) {
    for (const auto& w : ks) grad.insert(grad.end(), w.data(), w.data() + w.size());
  }
  for (const auto& w : d_up) grad.insert(grad.end(), w.data(), w.data() + w.size());
  return grad;
}

/// Digest identifying the parameter layout of an extractor.
inline Digest extractor_digest(const ExtractorConfig& cfg, double base_cell) {
  nlohmann::json j = cfg.to_json();
  j["base_cell"] = base_cell;
  return sha256(j.dump());
}

}  // namespace fmapkit
