#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <random>

#include "fmapkit.hpp"

using namespace fmapkit;

namespace {

Eigen::MatrixXd noise(Index k, double frobenius, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd n(k, k);
  for (Index i = 0; i < n.size(); ++i) n.data()[i] = g(rng);
  return n * (frobenius / n.norm());
}

PointMap brute_force(const FuncMap& c, const SpectralBasis& bm, const SpectralBasis& bn) {
  const Eigen::MatrixXd em = bm.phi.leftCols(c.source_k());
  const Eigen::MatrixXd en = bn.phi.leftCols(c.target_k()) * c.c;
  PointMap t;
  for (Index j = 0; j < en.rows(); ++j) {
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Index i = 0; i < em.rows(); ++i) {
      double d = 0.0;
      for (Index q = 0; q < em.cols(); ++q) d += (en(j, q) - em(i, q)) * (en(j, q) - em(i, q));
      if (d < best_d) {
        best_d = d;
        best = static_cast<int>(i);
      }
    }
    t.assignment.push_back(best);
  }
  return t;
}

std::size_t non_identity(const PointMap& t) {
  std::size_t count = 0;
  for (Index j = 0; j < t.size(); ++j) count += t[j] != j;
  return count;
}

struct PermutedPair {
  Mesh m;
  Mesh n;
  PointMap gt;
  SpectralBasis bm;
  SpectralBasis bn;
};

PermutedPair permuted_pair(Index width) {
  PermutedPair p;
  p.m = normalize_mesh(shapes::bumpy_blob(12, 14), NormalizeMode::unit_area);
  const auto perm = shapes::random_permutation(p.m.num_vertices(), 77);
  p.n = shapes::permute_vertices(p.m, perm);
  p.gt = PointMap{perm, std::nullopt};
  p.bm = eigendecompose(p.m, width);
  p.bn = eigendecompose(p.n, width);
  return p;
}

}  // namespace

TEST(FmapToPointmap, IdentityOnSameShape) {
  const Mesh m = shapes::bumpy_blob(10, 12);
  const SpectralBasis b = eigendecompose(m, 20);
  const PointMap t = fmap_to_pointmap(FuncMap{Eigen::MatrixXd::Identity(20, 20)}, b, b);
  EXPECT_EQ(t, identity_pointmap(m.num_vertices()));
  ASSERT_TRUE(t.confidence.has_value());
  EXPECT_TRUE(t.confidence->isZero(0));
}

TEST(FmapToPointmap, RecoversPermutation) {
  const PermutedPair p = permuted_pair(20);
  EXPECT_EQ(fmap_to_pointmap(FuncMap{Eigen::MatrixXd::Identity(20, 20)}, p.bm, p.bn), p.gt);
}

TEST(FmapToPointmap, TiesGoToLowestIndex) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> g(0.0, 1.0);
  SpectralBasis bm;
  bm.phi.resize(10, 3);
  for (Index i = 0; i < bm.phi.size(); ++i) bm.phi.data()[i] = g(rng);
  bm.phi.row(7) = bm.phi.row(3);
  bm.evals = Eigen::Vector3d(0, 1, 2);
  bm.mass = Eigen::VectorXd::Ones(10);
  SpectralBasis bn = bm;
  bn.phi.resize(2, 3);
  bn.phi.row(0) = bm.phi.row(7);
  bn.phi.row(1) = bm.phi.row(3);
  bn.mass = Eigen::VectorXd::Ones(2);
  const PointMap t = fmap_to_pointmap(FuncMap{Eigen::MatrixXd::Identity(3, 3)}, bm, bn);
  EXPECT_EQ(t[0], 3);
  EXPECT_EQ(t[1], 3);
}

TEST(FmapToPointmap, MatchesBruteForce) {
  const Mesh m = shapes::bumpy_blob(12, 14);
  const Mesh n = shapes::jitter(shapes::bumpy_blob(11, 15), 0.02, 3);
  const SpectralBasis bm = eigendecompose(m, 15);
  const SpectralBasis bn = eigendecompose(n, 12);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    FuncMap c{Eigen::MatrixXd(12, 15)};
    for (Index i = 0; i < c.c.size(); ++i) c.c.data()[i] = g(rng);
    EXPECT_EQ(fmap_to_pointmap(c, bm, bn), brute_force(c, bm, bn));
  }
}

TEST(FmapToPointmap, QuantizedEmbeddingsWithManyTies) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> u(-2, 2);
  SpectralBasis bm;
  bm.phi.resize(200, 4);
  for (Index i = 0; i < bm.phi.size(); ++i) bm.phi.data()[i] = u(rng);
  bm.evals = Eigen::Vector4d(0, 1, 2, 3);
  bm.mass = Eigen::VectorXd::Ones(200);
  SpectralBasis bn = bm;
  bn.phi.resize(150, 4);
  for (Index i = 0; i < bn.phi.size(); ++i) bn.phi.data()[i] = u(rng) + 0.5;
  bn.mass = Eigen::VectorXd::Ones(150);
  const FuncMap c{Eigen::MatrixXd::Identity(4, 4)};
  EXPECT_EQ(fmap_to_pointmap(c, bm, bn), brute_force(c, bm, bn));
}

TEST(FmapToPointmap, OrthogonalInvariance) {
  const PermutedPair p = permuted_pair(10);
  const FuncMap c{Eigen::MatrixXd::Identity(10, 10) + noise(10, 0.3, 8)};
  const Eigen::MatrixXd r = noise(10, 1.0, 9).householderQr().householderQ();
  SpectralBasis rotated = p.bm;
  rotated.phi = p.bm.phi * r;
  const PointMap a = fmap_to_pointmap(c, p.bm, p.bn);
  const PointMap b = fmap_to_pointmap(FuncMap{c.c * r}, rotated, p.bn);
  EXPECT_EQ(a, b);
}

TEST(FmapToPointmap, RejectsWideMap) {
  const SpectralBasis b = eigendecompose(shapes::bumpy_blob(8, 10), 5);
  EXPECT_THROW(fmap_to_pointmap(FuncMap{Eigen::MatrixXd::Identity(6, 6)}, b, b), DimensionError);
}

TEST(Icp, IdentityIsFixedPoint) {
  const Mesh m = shapes::bumpy_blob(10, 12);
  const SpectralBasis b = eigendecompose(m, 15);
  const FuncMap c = icp_refine(FuncMap{Eigen::MatrixXd::Identity(15, 15)}, b, b, 5);
  EXPECT_LT((c.c - Eigen::MatrixXd::Identity(15, 15)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Icp, OutputIsOrthonormal) {
  const PermutedPair p = permuted_pair(20);
  for (int it : {1, 3, 10}) {
    const FuncMap c = icp_refine(FuncMap{Eigen::MatrixXd::Identity(20, 20) + noise(20, 2.0, 10 + it)}, p.bm, p.bn, it);
    EXPECT_LE((c.c.transpose() * c.c - Eigen::MatrixXd::Identity(20, 20)).norm(), 1e-8);
  }
}

TEST(Icp, NoisyInitRecoversPermutation) {
  const PermutedPair p = permuted_pair(20);
  const FuncMap c = icp_refine(FuncMap{Eigen::MatrixXd::Identity(20, 20) + noise(20, 0.1, 11)}, p.bm, p.bn, 10);
  EXPECT_EQ(fmap_to_pointmap(c, p.bm, p.bn), p.gt);
}

TEST(Icp, NeverIncreasesNonIdentityCount) {
  const Mesh m = shapes::bumpy_blob(10, 12);
  const SpectralBasis b = eigendecompose(m, 15);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FuncMap c0{Eigen::MatrixXd::Identity(15, 15) + noise(15, 0.2, 20 + seed)};
    const std::size_t before = non_identity(fmap_to_pointmap(c0, b, b));
    const std::size_t after = non_identity(fmap_to_pointmap(icp_refine(c0, b, b), b, b));
    EXPECT_LE(after, before);
  }
}

TEST(Icp, RequiresSquareMap) {
  const SpectralBasis b = eigendecompose(shapes::bumpy_blob(8, 10), 6);
  EXPECT_THROW(icp_refine(FuncMap{Eigen::MatrixXd::Identity(5, 4)}, b, b), DimensionError);
}

TEST(ZoomOut, IdentityStaysIdentity) {
  const Mesh m = shapes::bumpy_blob(10, 12);
  const SpectralBasis b = eigendecompose(m, 30);
  for (int k1 : {10, 11, 20, 30}) {
    const FuncMap c = zoomout(FuncMap{Eigen::MatrixXd::Identity(10, 10)}, b, b, k1);
    ASSERT_EQ(c.c.rows(), k1);
    ASSERT_EQ(c.c.cols(), k1);
    EXPECT_LT((c.c - Eigen::MatrixXd::Identity(k1, k1)).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(ZoomOut, EqualWidthsIsOneRoundTrip) {
  const PermutedPair p = permuted_pair(20);
  const FuncMap c0{Eigen::MatrixXd::Identity(20, 20) + noise(20, 0.5, 12)};
  const FuncMap expected = pointmap_to_fmap(p.bm, p.bn, fmap_to_pointmap(c0, p.bm, p.bn), 20, 20);
  EXPECT_EQ(zoomout(c0, p.bm, p.bn, 20).c, expected.c);
}

TEST(ZoomOut, OutputIsImageOfAPointMap) {
  const PermutedPair p = permuted_pair(25);
  const FuncMap c0{Eigen::MatrixXd::Identity(10, 10) + noise(10, 0.5, 13)};
  // 10 -> 13 -> 16 -> 19 -> 22 -> 25 with step 3; the last C comes from the
  // point map of the width-22 C.
  const FuncMap c22 = zoomout(c0, p.bm, p.bn, 22, 3);
  const FuncMap expected = pointmap_to_fmap(p.bm, p.bn, fmap_to_pointmap(c22, p.bm, p.bn), 25, 25);
  EXPECT_EQ(zoomout(c0, p.bm, p.bn, 25, 3).c, expected.c);
  // Truncated final step: 10 -> 14 -> 18 -> 22 -> 24.
  const FuncMap c24 = zoomout(c0, p.bm, p.bn, 24, 4);
  EXPECT_EQ(c24.c.rows(), 24);
}

TEST(ZoomOut, NoisyInitRecoversPermutation) {
  const PermutedPair p = permuted_pair(40);
  const FuncMap c0{Eigen::MatrixXd::Identity(20, 20) + noise(20, 0.1, 14)};
  const FuncMap c = zoomout(c0, p.bm, p.bn, 40, 2);
  EXPECT_EQ(fmap_to_pointmap(c, p.bm, p.bn), p.gt);
}

TEST(ZoomOut, NeverIncreasesNonIdentityCount) {
  const Mesh m = shapes::bumpy_blob(10, 12);
  const SpectralBasis b = eigendecompose(m, 30);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const FuncMap c0{Eigen::MatrixXd::Identity(15, 15) + noise(15, 0.2, 30 + seed)};
    const std::size_t before = non_identity(fmap_to_pointmap(c0, b, b));
    const std::size_t after = non_identity(fmap_to_pointmap(zoomout(c0, b, b, 30), b, b));
    EXPECT_LE(after, before);
  }
}

TEST(ZoomOut, Errors) {
  const SpectralBasis b = eigendecompose(shapes::bumpy_blob(8, 10), 12);
  const FuncMap c0{Eigen::MatrixXd::Identity(10, 10)};
  EXPECT_THROW(zoomout(c0, b, b, 20), DimensionError);
  EXPECT_THROW(zoomout(c0, b, b, 8), UsageError);
  EXPECT_THROW(zoomout(c0, b, b, 12, 0), UsageError);
  EXPECT_THROW(zoomout(FuncMap{Eigen::MatrixXd::Identity(4, 5)}, b, b, 12), DimensionError);
}

TEST(P2PFileFormat, RoundTripAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "fmapkit_test_convert";
  std::filesystem::create_directories(dir);
  const PointMap t{{2, 0, 1, 1}, std::nullopt};
  write_p2p(dir / "t.p2p", t, 3);
  {
    std::ifstream in(dir / "t.p2p");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    EXPECT_EQ(text, "P2P 4 3\n0 2\n1 0\n2 1\n3 1\n");
  }
  const P2PFile back = read_p2p(dir / "t.p2p");
  EXPECT_EQ(back.map, t);
  EXPECT_EQ(back.n_source, 3);
  {
    std::ofstream out(dir / "bad.p2p");
    out << "P2P 2 3\n0 1\n1 5\n";
  }
  EXPECT_THROW(read_p2p(dir / "bad.p2p"), ParseError);
  {
    std::ofstream out(dir / "bad.p2p");
    out << "P2P 2 3\n0 1\n0 2\n";
  }
  EXPECT_THROW(read_p2p(dir / "bad.p2p"), ParseError);
}
