#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fmapkit/binary_io.hpp"
#include "fmapkit/extractor.hpp"
#include "fmapkit/fmap.hpp"
#include "fmapkit/mesh.hpp"
#include "fmapkit/spectral.hpp"

namespace fmapkit {

/// Rotates about the mesh up axis through its centroid by a uniform random
/// angle in [0, 2 pi). Masses are unchanged by a rigid motion and are kept.
template <typename Rng>
Mesh augment_rotation(const Mesh& mesh, Rng& rng, double* angle_out = nullptr) {
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::acos(-1.0));
  const double theta = angle(rng);
  if (angle_out) *angle_out = theta;
  Mesh out = mesh;
  out.vertices = rotate_about(mesh.vertices, mesh.up_axis, theta, centroid(mesh));
  return out;
}

inline Mesh rotate_mesh_up(const Mesh& mesh, double theta) {
  Mesh out = mesh;
  out.vertices = rotate_about(mesh.vertices, mesh.up_axis, theta, centroid(mesh));
  return out;
}

struct TrainOptions {
  int k = kDefaultBasisSize;
  double lambda = kDefaultLambda;
  int batch_size = 4;
  bool augment = true;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Optimizer state. The learning rate decays log-linearly from lr_initial to
/// lr_final over schedule_steps.
struct TrainState {
  std::vector<float> params;
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t step = 0;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  std::int64_t schedule_steps = 1000;
  std::uint64_t seed = 0;

  static TrainState fresh(std::vector<float> params, std::uint64_t seed) {
    TrainState s;
    s.m.assign(params.size(), 0.0f);
    s.v.assign(params.size(), 0.0f);
    s.params = std::move(params);
    s.seed = seed;
    return s;
  }

  double learning_rate() const {
    const double t = schedule_steps > 1
                         ? std::min(1.0, static_cast<double>(step) / static_cast<double>(schedule_steps - 1))
                         : 1.0;
    if (lr_initial <= 0.0 || lr_final <= 0.0) return lr_initial + (lr_final - lr_initial) * t;
    return lr_initial * std::pow(lr_final / lr_initial, t);
  }
};

/// One bias-corrected ADAM update at the current learning rate; advances step.
inline void adam_update(TrainState& state, std::span<const double> grad, const TrainOptions& opts) {
  if (grad.size() != state.params.size()) throw DimensionError("gradient length does not match parameters");
  const double lr = state.learning_rate();
  const double t = static_cast<double>(state.step + 1);
  const double c1 = 1.0 - std::pow(opts.beta1, t);
  const double c2 = 1.0 - std::pow(opts.beta2, t);
  for (std::size_t i = 0; i < grad.size(); ++i) {
    const double m = opts.beta1 * state.m[i] + (1.0 - opts.beta1) * grad[i];
    const double v = opts.beta2 * state.v[i] + (1.0 - opts.beta2) * grad[i] * grad[i];
    state.m[i] = static_cast<float>(m);
    state.v[i] = static_cast<float>(v);
    const double update = lr * (m / c1) / (std::sqrt(v / c2) + opts.epsilon);
    state.params[i] = static_cast<float>(state.params[i] - update);
  }
  ++state.step;
}

/// A training shape: its mesh and a spectral basis at least k wide.
struct ShapeSample {
  Mesh mesh;
  SpectralBasis basis;
};

struct TrainingPair {
  const ShapeSample* source = nullptr;
  const ShapeSample* target = nullptr;
  /// k x k ground truth mapping spectral(source) to spectral(target).
  FuncMap gt;
};

struct PairEvaluation {
  double loss = 0.0;
  FuncMap c;
  std::vector<double> gradient;
};

/// Learned descriptors of one shape, widened to double.
template <typename Scalar>
Eigen::MatrixXd learned_descriptors(const ExtractorNet<Scalar>& net, const Points& vertices) {
  const ShapeGeometry geo = prepare_geometry(vertices, net);
  return extractor_forward(net, geo).template cast<double>();
}

/// Siamese forward and full backward for one pair: shared extractor on both
/// shapes, projection onto the bases, regularized solve, spectral loss, and
/// the chain back to the extractor parameters.
template <typename Scalar>
PairEvaluation evaluate_pair(const ExtractorNet<Scalar>& net, const ShapeGeometry& geo_m, const ShapeGeometry& geo_n,
                             const SpectralBasis& basis_m, const SpectralBasis& basis_n, const FuncMap& gt,
                             double lambda, bool with_gradient = true) {
  ForwardTrace<Scalar> trace_m, trace_n;
  const FeatureMatrix<Scalar> f = extractor_forward(net, geo_m, &trace_m);
  const FeatureMatrix<Scalar> g = extractor_forward(net, geo_n, &trace_n);
  const Eigen::MatrixXd fd = f.template cast<double>();
  const Eigen::MatrixXd gd = g.template cast<double>();

  SolveContext ctx;
  ctx.a = project(basis_m, fd);
  ctx.b = project(basis_n, gd);
  ctx.evals_m = basis_m.evals;
  ctx.evals_n = basis_n.evals;
  ctx.lambda = lambda;

  PairEvaluation out;
  out.c = solve_regularized(ctx);
  const LossValue loss = spectral_loss(out.c, gt);
  out.loss = loss.value;
  if (!with_gradient) return out;

  const SolveGradients sg = solve_backward(ctx, out.c, loss.gradient);
  // A = Phi^T diag(mass) F  =>  dF = diag(mass) Phi dA
  const Eigen::MatrixXd df = basis_m.mass.asDiagonal() * (basis_m.phi * sg.da);
  const Eigen::MatrixXd dg = basis_n.mass.asDiagonal() * (basis_n.phi * sg.db);
  const auto grad_m = extractor_backward(net, geo_m, trace_m, FeatureMatrix<Scalar>(df.template cast<Scalar>()));
  const auto grad_n = extractor_backward(net, geo_n, trace_n, FeatureMatrix<Scalar>(dg.template cast<Scalar>()));
  out.gradient.resize(grad_m.size());
  for (std::size_t i = 0; i < grad_m.size(); ++i) {
    out.gradient[i] = static_cast<double>(grad_m[i]) + static_cast<double>(grad_n[i]);
  }
  return out;
}

/// Per-step RNG so that resuming from a checkpoint replays the same stream.
inline std::mt19937_64 step_rng(std::uint64_t seed, std::int64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(static_cast<std::uint64_t>(step) >> 32)};
  return std::mt19937_64(seq);
}

/// One optimizer step over a batch of pairs. Returns the batch-mean loss.
/// Gradients are summed in pair order, then averaged.
inline double train_step(TrainState& state, ExtractorNet<float>& net, std::span<const TrainingPair> batch,
                         const TrainOptions& opts) {
  if (batch.empty()) throw UsageError("empty training batch");
  net.set_parameters(std::span<const float>(state.params));
  auto rng = step_rng(state.seed, state.step);

  std::vector<double> grad(state.params.size(), 0.0);
  double loss = 0.0;
  for (const auto& pair : batch) {
    const Mesh mesh_m = opts.augment ? augment_rotation(pair.source->mesh, rng) : pair.source->mesh;
    const Mesh mesh_n = opts.augment ? augment_rotation(pair.target->mesh, rng) : pair.target->mesh;
    const ShapeGeometry geo_m = prepare_geometry(mesh_m.vertices, net);
    const ShapeGeometry geo_n = prepare_geometry(mesh_n.vertices, net);
    const PairEvaluation eval = evaluate_pair(net, geo_m, geo_n, pair.source->basis.truncated(opts.k),
                                              pair.target->basis.truncated(opts.k), pair.gt, opts.lambda);
    loss += eval.loss;
    for (std::size_t i = 0; i < grad.size(); ++i) grad[i] += eval.gradient[i];
  }
  const double inv = 1.0 / static_cast<double>(batch.size());
  loss *= inv;
  for (auto& g : grad) g *= inv;
  if (!std::isfinite(loss)) {
    throw NumericError("non-finite training loss at step " + std::to_string(state.step));
  }
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (!std::isfinite(grad[i])) {
      throw NumericError("non-finite gradient for parameter " + std::to_string(i) + " at step " +
                         std::to_string(state.step));
    }
  }
  adam_update(state, grad, opts);
  return loss;
}

// ---------------------------------------------------------------------------
// Checkpoint: "KPW1", 32-byte config digest, u64 parameter count, f32
// parameters, f32 first moments, f32 second moments, i64 step.

struct Checkpoint {
  Digest config_digest{};
  TrainState state;
};

inline void write_checkpoint(const std::filesystem::path& path, const Digest& digest, const TrainState& state) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    binary::put_bytes(out, "KPW1", 4);
    binary::put_bytes(out, digest.data(), digest.size());
    binary::put<std::uint64_t>(out, state.params.size());
    for (float p : state.params) binary::put<float>(out, p);
    for (float p : state.m) binary::put<float>(out, p);
    for (float p : state.v) binary::put<float>(out, p);
    binary::put<std::int64_t>(out, state.step);
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  binary::expect_magic(in, "KPW1");
  Checkpoint ck;
  binary::get_bytes(in, ck.config_digest.data(), ck.config_digest.size());
  const auto count = binary::get<std::uint64_t>(in);
  if (count > (1ull << 32)) throw ParseError("implausible parameter count in checkpoint");
  auto read_vec = [&](std::vector<float>& v) {
    v.resize(count);
    for (auto& x : v) x = binary::get<float>(in);
  };
  read_vec(ck.state.params);
  read_vec(ck.state.m);
  read_vec(ck.state.v);
  ck.state.step = binary::get<std::int64_t>(in);
  return ck;
}

}  // namespace fmapkit
