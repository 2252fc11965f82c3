// Matches a jittered sphere to a permuted, rotated copy of itself with WKS
// descriptors and reports the geodesic error before and after ZoomOut.

#include <cstdio>

#include "fmapkit.hpp"

int main() {
  using namespace fmapkit;
  const Mesh m = shapes::jitter(shapes::icosphere(3), 0.01, 3);
  const auto perm = shapes::random_permutation(m.num_vertices(), 11);
  const Mesh n = shapes::rotate_up(shapes::permute_vertices(m, perm), 1.1);
  const PointMap gt{perm, std::nullopt};

  const SpectralBasis bm = eigendecompose(m, 60);
  const SpectralBasis bn = eigendecompose(n, 60);
  const MatchResult r = match_shapes(m, bm, n, bn, 30, kDefaultLambda, DescriptorConfig{});
  std::printf("k=30   error x100 = %.4f\n", geodesic_errors(r.t, gt, m).mean_x100);

  const FuncMap zo = zoomout(r.c, bm, bn, 60);
  const PointMap t = fmap_to_pointmap(zo, bm, bn);
  std::printf("k=60   error x100 = %.4f\n", geodesic_errors(t, gt, m).mean_x100);
  return 0;
}
