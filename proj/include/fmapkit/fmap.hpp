#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "fmapkit/error.hpp"
#include "fmapkit/parallel.hpp"
#include "fmapkit/pointmap.hpp"
#include "fmapkit/spectral.hpp"
#include "fmapkit/text_io.hpp"

namespace fmapkit {

inline constexpr double kDefaultLambda = 1e-3;
inline constexpr int kDefaultBasisSize = 30;

/// Functional map C of shape k_N x k_M. It acts on spectral coefficients of
/// the source M: C * A ~ B.
struct FuncMap {
  Eigen::MatrixXd c;

  Index source_k() const { return c.cols(); }
  Index target_k() const { return c.rows(); }
};

enum class GtProvenance { from_pointmap, from_template_composition, loaded };

struct GroundTruthMap {
  FuncMap map;
  GtProvenance provenance = GtProvenance::loaded;
};

/// Delta_ij = (mu^M_j - mu^N_i)^2, the elementwise weight of the Laplacian
/// commutativity penalty in a shared eigenbasis.
inline Eigen::MatrixXd commutativity_weights(const Eigen::VectorXd& evals_m, const Eigen::VectorXd& evals_n) {
  Eigen::MatrixXd delta(evals_n.size(), evals_m.size());
  for (Index i = 0; i < evals_n.size(); ++i) {
    for (Index j = 0; j < evals_m.size(); ++j) {
      const double d = evals_m[j] - evals_n[i];
      delta(i, j) = d * d;
    }
  }
  return delta;
}

namespace detail {

/// Reciprocal condition estimate below which a row system counts as singular.
inline constexpr double kSingularRcond = 1e-12;

/// Factorization of one symmetric row system: Cholesky, falling back to a
/// fully pivoted LU when the matrix is not numerically positive definite.
class RowSystem {
 public:
  RowSystem() = default;

  RowSystem(const Eigen::MatrixXd& m, long row) {
    llt_.compute(m);
    if (llt_.info() == Eigen::Success && llt_.rcond() >= kSingularRcond) return;
    use_lu_ = true;
    lu_.compute(m);
    if (!lu_.isInvertible() || lu_.rcond() < kSingularRcond) {
      throw SingularError(row < 0 ? std::string("A A^T is rank deficient")
                                  : "row " + std::to_string(row) + " system is not invertible",
                          row);
    }
  }

  template <typename Rhs>
  Eigen::Matrix<double, Eigen::Dynamic, Rhs::ColsAtCompileTime> solve(const Rhs& rhs) const {
    if (use_lu_) return lu_.solve(rhs);
    return llt_.solve(rhs);
  }

  bool uses_fallback() const { return use_lu_; }

 private:
  Eigen::LLT<Eigen::MatrixXd> llt_;
  Eigen::FullPivLU<Eigen::MatrixXd> lu_;
  bool use_lu_ = false;
};

}  // namespace detail

/// Inputs of the regularized solve: spectral descriptors A (k_M x d) and
/// B (k_N x d), both eigenvalue sequences and the weight lambda. The row
/// factorizations are cached by solve_regularized for solve_backward.
struct SolveContext {
  Eigen::MatrixXd a;
  Eigen::MatrixXd b;
  Eigen::VectorXd evals_m;
  Eigen::VectorXd evals_n;
  double lambda = kDefaultLambda;

  std::vector<detail::RowSystem> factors;

  void validate() const {
    if (a.cols() < 1) throw DimensionError("descriptor count d must be at least 1");
    if (a.cols() != b.cols()) {
      throw DimensionError("A has " + std::to_string(a.cols()) + " descriptors, B has " + std::to_string(b.cols()));
    }
    if (a.rows() != evals_m.size() || b.rows() != evals_n.size()) {
      throw DimensionError("coefficient rows do not match eigenvalue counts");
    }
    if (!(lambda >= 0.0)) throw UsageError("lambda must be nonnegative");
  }

  void factorize() {
    validate();
    const Eigen::MatrixXd gram = a * a.transpose();
    const Eigen::MatrixXd delta = commutativity_weights(evals_m, evals_n);
    factors.assign(static_cast<std::size_t>(b.rows()), {});
    parallel_for(0, b.rows(), [&](std::ptrdiff_t i) {
      Eigen::MatrixXd m = gram;
      m.diagonal() += lambda * delta.row(i).transpose();
      factors[static_cast<std::size_t>(i)] = detail::RowSystem(m, static_cast<long>(i));
    });
  }
};

/// Minimizes ||C A - B||^2 + lambda ||C Delta_M - Delta_N C||^2 one row at a
/// time: (A A^T + lambda diag_j((mu^M_j - mu^N_i)^2)) c_i = A b_i.
inline FuncMap solve_regularized(SolveContext& ctx) {
  ctx.factorize();
  const Eigen::MatrixXd rhs = ctx.a * ctx.b.transpose();
  FuncMap out;
  out.c.resize(ctx.b.rows(), ctx.a.rows());
  parallel_for(0, ctx.b.rows(), [&](std::ptrdiff_t i) {
    out.c.row(i) = ctx.factors[static_cast<std::size_t>(i)].solve(Eigen::VectorXd(rhs.col(i))).transpose();
  });
  return out;
}

/// Least-squares C = B A^T (A A^T)^{-1}; throws SingularError when A has fewer
/// than k_M independent descriptors.
inline FuncMap solve_unregularized(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  if (a.cols() != b.cols()) throw DimensionError("A and B need the same descriptor count");
  if (a.cols() < 1) throw DimensionError("descriptor count d must be at least 1");
  detail::RowSystem system(a * a.transpose(), -1);
  const Eigen::MatrixXd rhs = a * b.transpose();
  return FuncMap{system.solve(rhs).transpose()};
}

struct SolveGradients {
  Eigen::MatrixXd da;
  Eigen::MatrixXd db;
};

/// Reverse-mode gradients of the row-wise solve. With M_i the row matrix and
/// g_i = M_i^{-1} upstream_i: dB_i = (A^T g_i)^T and
/// dA = sum_i g_i b_i^T - (g_i c_i^T + c_i g_i^T) A.
/// Eigenvalues are treated as constants.
inline SolveGradients solve_backward(SolveContext& ctx, const FuncMap& c, const Eigen::MatrixXd& upstream) {
  if (upstream.rows() != c.c.rows() || upstream.cols() != c.c.cols()) {
    throw DimensionError("upstream gradient shape does not match C");
  }
  if (c.c.rows() != ctx.b.rows() || c.c.cols() != ctx.a.rows()) throw DimensionError("C does not match the context");
  if (ctx.factors.size() != static_cast<std::size_t>(ctx.b.rows())) ctx.factorize();

  const Index kn = ctx.b.rows();
  Eigen::MatrixXd adjoint(ctx.a.rows(), kn);
  parallel_for(0, kn, [&](std::ptrdiff_t i) {
    adjoint.col(i) = ctx.factors[static_cast<std::size_t>(i)].solve(Eigen::VectorXd(upstream.row(i).transpose()));
  });

  SolveGradients grads;
  grads.db = (ctx.a.transpose() * adjoint).transpose();
  // sum_i g_i b_i^T = G B;  sum_i (g_i c_i^T + c_i g_i^T) = G C + C^T G^T
  const Eigen::MatrixXd outer = adjoint * c.c + c.c.transpose() * adjoint.transpose();
  grads.da = adjoint * ctx.b - outer * ctx.a;
  return grads;
}

struct LossValue {
  double value = 0.0;
  Eigen::MatrixXd gradient;
};

/// Squared Frobenius distance to the ground truth and its gradient 2 (C - C_gt).
inline LossValue spectral_loss(const FuncMap& c, const FuncMap& gt) {
  if (c.c.rows() != gt.c.rows() || c.c.cols() != gt.c.cols()) {
    throw DimensionError("C is " + std::to_string(c.c.rows()) + "x" + std::to_string(c.c.cols()) +
                         ", ground truth is " + std::to_string(gt.c.rows()) + "x" + std::to_string(gt.c.cols()));
  }
  const Eigen::MatrixXd diff = c.c - gt.c;
  return LossValue{diff.squaredNorm(), 2.0 * diff};
}

inline LossValue spectral_loss(const FuncMap& c, const GroundTruthMap& gt) { return spectral_loss(c, gt.map); }

/// C = Phi_N^T diag(mass_N) Pi_T Phi_M with Pi_T[j, T(j)] = 1, truncated to
/// the requested widths (-1 keeps the full basis).
inline FuncMap pointmap_to_fmap(const SpectralBasis& basis_m, const SpectralBasis& basis_n, const PointMap& t,
                                Index k_m = -1, Index k_n = -1) {
  if (k_m < 0) k_m = basis_m.size();
  if (k_n < 0) k_n = basis_n.size();
  if (k_m > basis_m.size() || k_n > basis_n.size()) throw DimensionError("requested width exceeds basis width");
  check_pointmap(t, basis_n.num_vertices(), basis_m.num_vertices());
  Eigen::MatrixXd pulled(t.size(), k_m);
  for (Index j = 0; j < t.size(); ++j) pulled.row(j) = basis_m.phi.row(t[j]).head(k_m);
  return FuncMap{basis_n.phi.leftCols(k_n).transpose() * (basis_n.mass.asDiagonal() * pulled)};
}

inline GroundTruthMap gt_from_pointmap(const SpectralBasis& basis_m, const SpectralBasis& basis_n, const PointMap& t,
                                       Index k_m = -1, Index k_n = -1) {
  return GroundTruthMap{pointmap_to_fmap(basis_m, basis_n, t, k_m, k_n), GtProvenance::from_pointmap};
}

inline constexpr double kPinvTruncation = 1e-10;

/// Moore-Penrose pseudo-inverse with singular values below
/// kPinvTruncation * sigma_max treated as zero.
inline Eigen::MatrixXd pseudo_inverse(const Eigen::MatrixXd& m) {
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Eigen::VectorXd& s = svd.singularValues();
  const double cutoff = s.size() > 0 ? kPinvTruncation * s[0] : 0.0;
  Eigen::VectorXd inv = Eigen::VectorXd::Zero(s.size());
  for (Index i = 0; i < s.size(); ++i) {
    if (s[i] > cutoff) inv[i] = 1.0 / s[i];
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

/// Ground truth between two shapes that were each matched to a common
/// template. `c_i` and `c_j` are the maps induced by the template -> S_i and
/// template -> S_j point maps (rows = template width); the result
/// pinv(C_j) C_i maps spectral(S_i) to spectral(S_j).
inline GroundTruthMap gt_from_template(const FuncMap& c_i, const FuncMap& c_j) {
  if (c_i.c.rows() != c_j.c.rows()) {
    throw DimensionError("template widths differ: " + std::to_string(c_i.c.rows()) + " vs " +
                         std::to_string(c_j.c.rows()));
  }
  return GroundTruthMap{FuncMap{pseudo_inverse(c_j.c) * c_i.c}, GtProvenance::from_template_composition};
}

/// Text format: "FMAP k_N k_M" then k_N lines of k_M numbers.
inline void write_fmap(const std::filesystem::path& path, const FuncMap& c) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "FMAP " << c.c.rows() << ' ' << c.c.cols() << '\n';
  for (Index i = 0; i < c.c.rows(); ++i) {
    for (Index j = 0; j < c.c.cols(); ++j) {
      if (j) out << ' ';
      out << format_double(c.c(i, j));
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing " + path.string());
}

inline FuncMap read_fmap(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  long rows = -1, cols = -1;
  if (!(in >> magic >> rows >> cols) || magic != "FMAP" || rows < 1 || cols < 1) {
    throw ParseError(path.string() + ": bad FMAP header");
  }
  FuncMap c{Eigen::MatrixXd(rows, cols)};
  for (long i = 0; i < rows; ++i) {
    for (long j = 0; j < cols; ++j) {
      std::string tok;
      if (!(in >> tok)) throw ParseError(path.string() + ": truncated FMAP body");
      c.c(i, j) = detail::parse_number<double>(tok, "FMAP entry");
    }
  }
  if (!c.c.allFinite()) throw ParseError(path.string() + ": non-finite FMAP entry");
  return c;
}

}  // namespace fmapkit
