#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/QR>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "fmapkit/binary_io.hpp"
#include "fmapkit/error.hpp"
#include "fmapkit/hash.hpp"
#include "fmapkit/mesh.hpp"

namespace fmapkit {

/// Cotangent stiffness matrix and lumped mass of a mesh. The stiffness is
/// positive semi-definite with zero row sums.
struct LaplaceOperators {
  Eigen::SparseMatrix<double> stiffness;
  Eigen::VectorXd mass;
};

inline constexpr double kCotangentClamp = 1e4;

inline LaplaceOperators cotan_laplacian(const Mesh& mesh) {
  const Index n = mesh.num_vertices();
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(static_cast<std::size_t>(mesh.num_faces()) * 12);
  for (Index f = 0; f < mesh.num_faces(); ++f) {
    for (int corner = 0; corner < 3; ++corner) {
      const int c = mesh.faces(f, corner);
      const int a = mesh.faces(f, (corner + 1) % 3);
      const int b = mesh.faces(f, (corner + 2) % 3);
      const Eigen::Vector3d u = mesh.vertices.row(a) - mesh.vertices.row(c);
      const Eigen::Vector3d v = mesh.vertices.row(b) - mesh.vertices.row(c);
      double cot = u.dot(v) / u.cross(v).norm();
      cot = std::clamp(cot, -kCotangentClamp, kCotangentClamp);
      if (!std::isfinite(cot)) {
        throw NumericError("non-finite cotangent in face " + std::to_string(f));
      }
      const double w = 0.5 * cot;
      triplets.emplace_back(a, b, -w);
      triplets.emplace_back(b, a, -w);
      triplets.emplace_back(a, a, w);
      triplets.emplace_back(b, b, w);
    }
  }
  LaplaceOperators ops;
  ops.stiffness.resize(n, n);
  ops.stiffness.setFromTriplets(triplets.begin(), triplets.end());
  ops.stiffness.makeCompressed();
  ops.mass = mesh.vertex_masses;
  return ops;
}

/// First k eigenpairs of the Laplace-Beltrami operator.
///
/// Columns of `phi` are mass-orthonormal (phi^T diag(mass) phi = I) and sorted
/// by ascending eigenvalue. Each column is signed so that its entry of largest
/// magnitude is positive.
struct SpectralBasis {
  Eigen::MatrixXd phi;
  Eigen::VectorXd evals;
  Eigen::VectorXd mass;

  Index size() const { return phi.cols(); }
  Index num_vertices() const { return phi.rows(); }
  double total_area() const { return mass.sum(); }

  SpectralBasis truncated(Index k) const {
    if (k < 1 || k > size()) {
      throw DimensionError("cannot truncate a basis of width " + std::to_string(size()) + " to " + std::to_string(k));
    }
    return SpectralBasis{phi.leftCols(k), evals.head(k), mass};
  }
};

struct EigenOptions {
  /// Iteration budget is `iterations_per_eigenpair * k`.
  int iterations_per_eigenpair = 100;
  double tolerance = 1e-10;
  std::uint64_t seed = 0x5eed5eedULL;
};

namespace detail {

inline void fix_signs(Eigen::MatrixXd& phi) {
  for (Index j = 0; j < phi.cols(); ++j) {
    Index arg = 0;
    phi.col(j).cwiseAbs().maxCoeff(&arg);
    if (phi(arg, j) < 0.0) phi.col(j) = -phi.col(j);
  }
}

/// Mass-orthonormal basis of span(X).
inline Eigen::MatrixXd mass_orthonormalize(const Eigen::MatrixXd& x, const Eigen::VectorXd& sqrt_mass) {
  const Eigen::MatrixXd y = sqrt_mass.asDiagonal() * x;
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(y);
  Eigen::MatrixXd q = qr.householderQ() * Eigen::MatrixXd::Identity(y.rows(), y.cols());
  return sqrt_mass.cwiseInverse().asDiagonal() * q;
}

inline SpectralBasis dense_eigendecompose(const LaplaceOperators& ops, Index k) {
  const Eigen::VectorXd inv_sqrt = ops.mass.cwiseSqrt().cwiseInverse();
  Eigen::MatrixXd s = inv_sqrt.asDiagonal() * Eigen::MatrixXd(ops.stiffness) * inv_sqrt.asDiagonal();
  s = 0.5 * (s + s.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(s);
  if (eig.info() != Eigen::Success) throw ConvergenceError("dense symmetric eigensolver failed");
  SpectralBasis basis;
  basis.phi = inv_sqrt.asDiagonal() * eig.eigenvectors().leftCols(k);
  basis.evals = eig.eigenvalues().head(k);
  basis.mass = ops.mass;
  return basis;
}

}  // namespace detail

/// Smallest k generalized eigenpairs of stiffness * phi = mu * diag(mass) * phi.
///
/// Shift-invert block subspace iteration around a shift just above zero, with
/// a Rayleigh-Ritz step every iteration. Converged when every wanted Ritz pair
/// has ||M^{-1/2}(L phi - mu M phi)|| <= tolerance * max(1, mu_{k-1}).
inline SpectralBasis eigendecompose(const LaplaceOperators& ops, Index k, const EigenOptions& opts = {}) {
  const Index n = ops.stiffness.rows();
  if (k < 1 || k > n - 1) {
    throw UsageError("eigenpair count " + std::to_string(k) + " outside [1, " + std::to_string(n - 1) + "]");
  }
  const Index block = std::min(n, std::max<Index>(2 * k, k + 16));

  SpectralBasis basis;
  if (n <= 3 * block) {
    basis = detail::dense_eigendecompose(ops, k);
  } else {
    const Eigen::VectorXd sqrt_mass = ops.mass.cwiseSqrt();
    const double scale = (Eigen::VectorXd(ops.stiffness.diagonal()).array() / ops.mass.array()).mean();
    const double shift = 1e-8 * scale;
    Eigen::SparseMatrix<double> shifted = ops.stiffness;
    for (Index i = 0; i < n; ++i) shifted.coeffRef(i, i) += shift * ops.mass[i];
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(shifted);
    if (solver.info() != Eigen::Success) throw ConvergenceError("factorization of shifted Laplacian failed");

    std::mt19937_64 rng(opts.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd x(n, block);
    for (Index j = 0; j < block; ++j) {
      for (Index i = 0; i < n; ++i) x(i, j) = gauss(rng);
    }
    x = detail::mass_orthonormalize(x, sqrt_mass);

    const long budget = static_cast<long>(opts.iterations_per_eigenpair) * static_cast<long>(k);
    bool converged = false;
    Eigen::VectorXd theta;
    for (long it = 0; it < budget && !converged; ++it) {
      Eigen::MatrixXd y = solver.solve(ops.mass.asDiagonal() * x);
      x = detail::mass_orthonormalize(y, sqrt_mass);
      Eigen::MatrixXd lx = ops.stiffness * x;
      Eigen::MatrixXd h = x.transpose() * lx;
      h = 0.5 * (h + h.transpose()).eval();
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ritz(h);
      theta = ritz.eigenvalues();
      x = (x * ritz.eigenvectors()).eval();
      lx = (lx * ritz.eigenvectors()).eval();

      const double bound = opts.tolerance * std::max(1.0, std::abs(theta[k - 1]));
      converged = true;
      for (Index j = 0; j < k && converged; ++j) {
        const Eigen::VectorXd r = lx.col(j) - theta[j] * ops.mass.cwiseProduct(x.col(j));
        if (r.cwiseQuotient(sqrt_mass).norm() > bound) converged = false;
      }
    }
    if (!converged) {
      throw ConvergenceError("eigensolver did not reach tolerance within " + std::to_string(budget) + " iterations");
    }
    basis.phi = x.leftCols(k);
    basis.evals = theta.head(k);
    basis.mass = ops.mass;
  }
  basis.evals = basis.evals.cwiseMax(0.0);
  detail::fix_signs(basis.phi);
  return basis;
}

inline SpectralBasis eigendecompose(const Mesh& mesh, Index k, const EigenOptions& opts = {}) {
  return eigendecompose(cotan_laplacian(mesh), k, opts);
}

enum class DescriptorKind { hks, wks, xyz, learned };

inline DescriptorKind parse_descriptor_kind(std::string_view s) {
  if (s == "hks") return DescriptorKind::hks;
  if (s == "wks") return DescriptorKind::wks;
  if (s == "xyz") return DescriptorKind::xyz;
  if (s == "learned") return DescriptorKind::learned;
  throw UsageError("unknown descriptor kind '" + std::string(s) + "'");
}

inline std::string to_string(DescriptorKind k) {
  switch (k) {
    case DescriptorKind::hks: return "hks";
    case DescriptorKind::wks: return "wks";
    case DescriptorKind::xyz: return "xyz";
    case DescriptorKind::learned: return "learned";
  }
  return "hks";
}

/// Per-vertex feature functions, one column per function.
struct DescriptorField {
  Eigen::MatrixXd values;
  DescriptorKind kind = DescriptorKind::xyz;
};

/// Spectral coefficients A = phi^T diag(mass) F, the mass-weighted
/// pseudo-inverse applied to F.
inline Eigen::MatrixXd project(const SpectralBasis& basis, const Eigen::MatrixXd& values) {
  if (values.rows() != basis.num_vertices()) {
    throw DimensionError("field has " + std::to_string(values.rows()) + " rows, basis has " +
                         std::to_string(basis.num_vertices()) + " vertices");
  }
  return basis.phi.transpose() * (basis.mass.asDiagonal() * values);
}

inline Eigen::MatrixXd project(const SpectralBasis& basis, const DescriptorField& field) {
  return project(basis, field.values);
}

inline DescriptorField reconstruct(const SpectralBasis& basis, const Eigen::MatrixXd& coeffs,
                                   DescriptorKind kind = DescriptorKind::learned) {
  if (coeffs.rows() != basis.size()) {
    throw DimensionError("coefficients have " + std::to_string(coeffs.rows()) + " rows, basis has width " +
                         std::to_string(basis.size()));
  }
  return DescriptorField{basis.phi * coeffs, kind};
}

/// Heat kernel signature: sum_i exp(-mu_i t) phi_i(x)^2, one column per time.
inline DescriptorField hks(const SpectralBasis& basis, const std::vector<double>& times) {
  const Eigen::MatrixXd sq = basis.phi.array().square().matrix();
  Eigen::MatrixXd weights(basis.size(), static_cast<Index>(times.size()));
  for (std::size_t t = 0; t < times.size(); ++t) {
    if (!(times[t] > 0.0)) throw UsageError("HKS times must be positive");
    weights.col(static_cast<Index>(t)) = (-basis.evals.array() * times[t]).exp().matrix();
  }
  return DescriptorField{sq * weights, DescriptorKind::hks};
}

/// Wave kernel signature with log-normal energy filters. Eigenvalues at or
/// below 1e-12 are skipped. Throws if every filter weight underflows.
inline DescriptorField wks(const SpectralBasis& basis, const std::vector<double>& energies, double sigma) {
  if (!(sigma > 0.0)) throw UsageError("WKS sigma must be positive");
  const Eigen::MatrixXd sq = basis.phi.array().square().matrix();
  Eigen::MatrixXd out(basis.num_vertices(), static_cast<Index>(energies.size()));
  for (std::size_t e = 0; e < energies.size(); ++e) {
    Eigen::VectorXd w = Eigen::VectorXd::Zero(basis.size());
    for (Index i = 0; i < basis.size(); ++i) {
      if (basis.evals[i] <= 1e-12) continue;
      const double z = energies[e] - std::log(basis.evals[i]);
      w[i] = std::exp(-z * z / (2.0 * sigma * sigma));
    }
    const double total = w.sum();
    if (!(total > 0.0)) throw NumericError("all WKS weights underflow at energy " + std::to_string(energies[e]));
    out.col(static_cast<Index>(e)) = sq * (w / total);
  }
  return DescriptorField{out, DescriptorKind::wks};
}

struct WksParams {
  std::vector<double> energies;
  double sigma = 0.0;
};

/// `count` energies uniform in [log mu_1 + 2 sigma, log mu_max - 2 sigma] with
/// sigma = 7 * (log mu_max - log mu_1) / 100, mu_1 the first nonzero value.
inline WksParams default_wks_params(const SpectralBasis& basis, int count = 100) {
  double lo = 0.0;
  bool found = false;
  for (Index i = 0; i < basis.size(); ++i) {
    if (basis.evals[i] > 1e-12) {
      lo = std::log(basis.evals[i]);
      found = true;
      break;
    }
  }
  if (!found) throw NumericError("WKS needs at least one nonzero eigenvalue");
  const double hi = std::log(basis.evals[basis.size() - 1]);
  WksParams p;
  p.sigma = 7.0 * (hi - lo) / 100.0;
  if (!(p.sigma > 0.0)) throw NumericError("WKS needs at least two distinct nonzero eigenvalues");
  const double a = lo + 2.0 * p.sigma;
  const double b = hi - 2.0 * p.sigma;
  for (int e = 0; e < count; ++e) p.energies.push_back(count == 1 ? a : a + (b - a) * e / (count - 1));
  return p;
}

/// `count` times log-spaced in [4 ln 10 / mu_max, 4 ln 10 / mu_1].
inline std::vector<double> default_hks_times(const SpectralBasis& basis, int count = 100) {
  double first = 0.0;
  for (Index i = 0; i < basis.size(); ++i) {
    if (basis.evals[i] > 1e-12) {
      first = basis.evals[i];
      break;
    }
  }
  if (!(first > 0.0)) throw NumericError("HKS needs at least one nonzero eigenvalue");
  const double c = 4.0 * std::log(10.0);
  const double tmin = std::log(c / basis.evals[basis.size() - 1]);
  const double tmax = std::log(c / first);
  std::vector<double> times;
  for (int i = 0; i < count; ++i) times.push_back(std::exp(count == 1 ? tmin : tmin + (tmax - tmin) * i / (count - 1)));
  return times;
}

// ---------------------------------------------------------------------------
// Spectral cache: "SPEC1", u32 n, u32 k, f64 phi (row-major), f64 evals[k],
// f64 mass[n], 32-byte mesh hash. Little-endian.

struct SpectralCache {
  SpectralBasis basis;
  Digest mesh_hash{};
};

inline void write_spectral_cache(const std::filesystem::path& path, const SpectralBasis& basis, const Digest& hash) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp);
    binary::put_bytes(out, "SPEC1", 5);
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(basis.num_vertices()));
    binary::put<std::uint32_t>(out, static_cast<std::uint32_t>(basis.size()));
    for (Index i = 0; i < basis.num_vertices(); ++i) {
      for (Index j = 0; j < basis.size(); ++j) binary::put<double>(out, basis.phi(i, j));
    }
    for (Index j = 0; j < basis.size(); ++j) binary::put<double>(out, basis.evals[j]);
    for (Index i = 0; i < basis.num_vertices(); ++i) binary::put<double>(out, basis.mass[i]);
    binary::put_bytes(out, hash.data(), hash.size());
    if (!out) throw IoError("failed writing " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

inline SpectralCache read_spectral_cache(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  binary::expect_magic(in, "SPEC1");
  const auto n = binary::get<std::uint32_t>(in);
  const auto k = binary::get<std::uint32_t>(in);
  SpectralCache cache;
  cache.basis.phi.resize(n, k);
  cache.basis.evals.resize(k);
  cache.basis.mass.resize(n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k; ++j) cache.basis.phi(i, j) = binary::get<double>(in);
  }
  for (Index j = 0; j < k; ++j) cache.basis.evals[j] = binary::get<double>(in);
  for (Index i = 0; i < n; ++i) cache.basis.mass[i] = binary::get<double>(in);
  binary::get_bytes(in, cache.mesh_hash.data(), cache.mesh_hash.size());
  return cache;
}

}  // namespace fmapkit
