// Acceptance suite: one PASS/FAIL line per criterion. Pass criterion numbers
// as arguments to run a subset. Exit status is 0 only if every selected
// criterion passes.

#include <Eigen/Dense>

#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../fixtures.hpp"
#include "fmapkit.hpp"

namespace {

using namespace fmapkit;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// ---------------------------------------------------------------------------
// Oracles

/// Dense least squares over vec(C) (column-major, k_N * k_M unknowns):
///   [ A^T (x) I_kN                          ]          [ vec(B) ]
///   [ sqrt(lambda) (D_M (x) I - I (x) D_N)  ] vec(C) = [   0    ]
/// solved by column-pivoted Householder QR.
Eigen::MatrixXd vectorized_oracle(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::VectorXd& em,
                                  const Eigen::VectorXd& en, double lambda) {
  const Index km = a.rows(), kn = b.rows(), d = a.cols();
  const Index unknowns = kn * km;
  Eigen::MatrixXd sys = Eigen::MatrixXd::Zero(kn * d + unknowns, unknowns);
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(sys.rows());
  for (Index l = 0; l < d; ++l) {
    for (Index i = 0; i < kn; ++i) {
      for (Index j = 0; j < km; ++j) sys(i + l * kn, i + j * kn) = a(j, l);
      rhs(i + l * kn) = b(i, l);
    }
  }
  const double s = std::sqrt(lambda);
  for (Index j = 0; j < km; ++j) {
    for (Index i = 0; i < kn; ++i) sys(kn * d + i + j * kn, i + j * kn) = s * (em(j) - en(i));
  }
  const Eigen::VectorXd x = sys.colPivHouseholderQr().solve(rhs);
  return Eigen::Map<const Eigen::MatrixXd>(x.data(), kn, km);
}

Eigen::VectorXd random_spectrum(Index k, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 2.0 * static_cast<double>(k));
  Eigen::VectorXd e(k);
  e(0) = 0.0;
  for (Index i = 1; i < k; ++i) e(i) = u(rng);
  std::sort(e.data(), e.data() + k);
  return e;
}

Eigen::MatrixXd gaussian(Index r, Index c, std::mt19937_64& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

// ---------------------------------------------------------------------------
// 1. Solver against the vectorized oracle

Outcome criterion1() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(1);
  const std::array<double, 3> lambdas{0.0, 1e-3, 1.0};
  double worst = 0.0;
  for (int inst = 0; inst < 50; ++inst) {
    const double lambda = lambdas[static_cast<std::size_t>(inst % 3)];
    const int k = std::uniform_int_distribution<int>(2, 8)(rng);
    // lambda = 0 with d < k has no unique solution for either method.
    const int d = std::uniform_int_distribution<int>(lambda == 0.0 ? k : 1, 12)(rng);
    SolveContext ctx;
    ctx.a = gaussian(k, d, rng);
    ctx.b = gaussian(k, d, rng);
    ctx.evals_m = random_spectrum(k, rng);
    ctx.evals_n = random_spectrum(k, rng);
    ctx.lambda = lambda;
    const Eigen::MatrixXd c = solve_regularized(ctx).c;
    const Eigen::MatrixXd ref = vectorized_oracle(ctx.a, ctx.b, ctx.evals_m, ctx.evals_n, lambda);
    worst = std::max(worst, (c - ref).norm() / ref.norm());
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return {worst <= 1e-10 && secs < 5.0,
          "max relative Frobenius error " + fmt("%.3e", worst) + " (<= 1e-10), " + fmt("%.3f", secs) + " s (< 5 s)"};
}

// ---------------------------------------------------------------------------
// 2. Gradients against central finite differences

double relative_error(const Eigen::VectorXd& analytic, const Eigen::VectorXd& numeric) {
  return (analytic - numeric).norm() / std::max(numeric.norm(), std::numeric_limits<double>::min());
}

Outcome criterion2() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(2);
  const int k = 5, d = 7;
  const double lambda = 1e-3;
  const double h = 1e-6;
  double worst_solver = 0.0;
  for (int inst = 0; inst < 20; ++inst) {
    SolveContext ctx;
    ctx.a = gaussian(k, d, rng);
    ctx.b = gaussian(k, d, rng);
    ctx.evals_m = random_spectrum(k, rng);
    ctx.evals_n = random_spectrum(k, rng);
    ctx.lambda = lambda;
    const FuncMap gt{gaussian(k, k, rng)};

    auto loss_at = [&](const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
      SolveContext c2 = ctx;
      c2.a = a;
      c2.b = b;
      return spectral_loss(solve_regularized(c2), gt).value;
    };
    const FuncMap c = solve_regularized(ctx);
    const SolveGradients g = solve_backward(ctx, c, spectral_loss(c, gt).gradient);

    Eigen::VectorXd analytic(2 * k * d), numeric(2 * k * d);
    Index at = 0;
    for (int which = 0; which < 2; ++which) {
      for (Index e = 0; e < k * d; ++e, ++at) {
        Eigen::MatrixXd plus_a = ctx.a, minus_a = ctx.a, plus_b = ctx.b, minus_b = ctx.b;
        if (which == 0) {
          plus_a.data()[e] += h;
          minus_a.data()[e] -= h;
          analytic(at) = g.da.data()[e];
        } else {
          plus_b.data()[e] += h;
          minus_b.data()[e] -= h;
          analytic(at) = g.db.data()[e];
        }
        numeric(at) = (loss_at(plus_a, plus_b) - loss_at(minus_a, minus_b)) / (2.0 * h);
      }
    }
    worst_solver = std::max(worst_solver, relative_error(analytic, numeric));
  }

  // End to end through the double-precision extractor on a 62-vertex pair.
  const Mesh base = shapes::uv_sphere(7, 10);
  const fixtures::DerivedShape sm = fixtures::derive_shape(base, 0.05, 5);
  const fixtures::DerivedShape sn = fixtures::derive_shape(base, 0.05, 6);
  const int ke = 10;
  const SpectralBasis bm = eigendecompose(sm.mesh, ke);
  const SpectralBasis bn = eigendecompose(sn.mesh, ke);
  const FuncMap gt = pointmap_to_fmap(bm, bn, fixtures::correspondence(sm, sn), ke, ke);

  ExtractorConfig cfg;
  auto net = ExtractorNet<double>::build(cfg, 0.08);
  const std::vector<float> init = init_parameters(net, 9);
  std::vector<double> params(init.begin(), init.end());
  net.set_parameters(std::span<const double>(params));
  const ShapeGeometry gm = prepare_geometry(sm.mesh.vertices, net);
  const ShapeGeometry gn = prepare_geometry(sn.mesh.vertices, net);
  const PairEvaluation full = evaluate_pair(net, gm, gn, bm, bn, gt, lambda);

  std::vector<std::size_t> probe;
  std::uniform_int_distribution<std::size_t> pick(0, params.size() - 1);
  for (int i = 0; i < 40; ++i) probe.push_back(pick(rng));
  const double he = 1e-6;
  const double gmax = Eigen::Map<const Eigen::VectorXd>(full.gradient.data(), static_cast<Index>(full.gradient.size()))
                          .cwiseAbs()
                          .maxCoeff();
  double worst_e2e = 0.0;
  for (std::size_t p : probe) {
    auto loss_with = [&](double v) {
      std::vector<double> q = params;
      q[p] = v;
      auto net2 = net;
      net2.set_parameters(std::span<const double>(q));
      return evaluate_pair(net2, gm, gn, bm, bn, gt, lambda, false).loss;
    };
    const double fd = (loss_with(params[p] + he) - loss_with(params[p] - he)) / (2.0 * he);
    const double an = full.gradient[p];
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-6 * gmax});
    worst_e2e = std::max(worst_e2e, std::abs(fd - an) / denom);
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return {worst_solver <= 1e-5 && worst_e2e <= 1e-4 && secs < 60.0,
          "solver " + fmt("%.3e", worst_solver) + " (<= 1e-5), end-to-end over 40 weights " + fmt("%.3e", worst_e2e) +
              " (<= 1e-4), " + fmt("%.1f", secs) + " s (< 60 s)"};
}

// ---------------------------------------------------------------------------
// 3. Rank-deficient descriptors

Outcome criterion3() {
  std::mt19937_64 rng(3);
  int raised = 0, finite = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const int k = std::uniform_int_distribution<int>(3, 12)(rng);
    const int d = k - 2;
    SolveContext ctx;
    ctx.a = gaussian(k, d, rng);
    ctx.b = gaussian(k, d, rng);
    ctx.evals_m = random_spectrum(k, rng);
    ctx.evals_n = random_spectrum(k, rng);
    ctx.lambda = 1e-3;
    try {
      solve_unregularized(ctx.a, ctx.b);
    } catch (const SingularError&) {
      ++raised;
    }
    try {
      if (solve_regularized(ctx).c.allFinite()) ++finite;
    } catch (const Error&) {
    }
  }
  return {raised == 100 && finite == 100, "unregularized raised " + std::to_string(raised) +
                                              "/100, regularized finite " + std::to_string(finite) + "/100"};
}

// ---------------------------------------------------------------------------
// 4. Isometry recovery

Outcome criterion4() {
  const auto t0 = Clock::now();
  const Mesh m = shapes::jitter(shapes::icosphere(3), 0.01, 4);
  const auto perm = shapes::random_permutation(m.num_vertices(), 44);
  const Mesh n = shapes::rotate_up(shapes::permute_vertices(m, perm), 2.3);
  const PointMap gt{perm, std::nullopt};
  const SpectralBasis bm = eigendecompose(m, 60);
  const SpectralBasis bn = eigendecompose(n, 60);
  const MatchResult r = match_shapes(m, bm, n, bn, 30, 1e-3, DescriptorConfig{DescriptorKind::wks, 100});

  auto exact = [&](const PointMap& t) {
    Index hits = 0;
    for (Index j = 0; j < t.size(); ++j) hits += t[j] == gt[j];
    return static_cast<double>(hits) / static_cast<double>(t.size());
  };
  const double rate30 = exact(r.t);
  const double err30 = geodesic_errors(r.t, gt, m).mean_x100;
  const PointMap t60 = fmap_to_pointmap(zoomout(r.c, bm, bn, 60, 2), bm, bn);
  const double rate60 = exact(t60);
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  return {rate30 >= 0.99 && err30 <= 0.5 && rate60 == 1.0 && secs < 120.0,
          std::to_string(m.num_vertices()) + " vertices; k=30 exact " + fmt("%.4f", rate30) + " (>= 0.99), error x100 " +
              fmt("%.4f", err30) + " (<= 0.5); zoomout 60 exact " + fmt("%.4f", rate60) + " (= 1); " +
              fmt("%.1f", secs) + " s (< 120 s)"};
}

// ---------------------------------------------------------------------------
// 5. Refinement monotonicity

Outcome criterion5() {
  const Mesh base = fixtures::thin_ellipsoid(50, 24, 0.08);
  int zo_better = 0;
  int icp_ok = 0;
  double worst_icp = -std::numeric_limits<double>::infinity();
  std::mt19937_64 rng(5);
  for (int p = 0; p < 10; ++p) {
    const fixtures::DerivedShape sm = fixtures::derive_shape(base, 0.002, 500 + 2 * static_cast<std::uint64_t>(p));
    const fixtures::DerivedShape sn = fixtures::derive_shape(base, 0.002, 501 + 2 * static_cast<std::uint64_t>(p));
    const PointMap gt = fixtures::correspondence(sm, sn);
    const SpectralBasis bm = eigendecompose(sm.mesh, 60);
    const SpectralBasis bn = eigendecompose(sn.mesh, 60);
    Eigen::MatrixXd noise = gaussian(30, 30, rng);
    noise *= 0.1 / noise.norm();
    const FuncMap c0{pointmap_to_fmap(bm, bn, gt, 30, 30).c + noise};

    const double e0 = geodesic_errors(fmap_to_pointmap(c0, bm, bn), gt, sm.mesh).mean;
    const double ezo = geodesic_errors(fmap_to_pointmap(zoomout(c0, bm, bn, 60, 2), bm, bn), gt, sm.mesh).mean;
    const double eicp = geodesic_errors(fmap_to_pointmap(icp_refine(c0, bm, bn), bm, bn), gt, sm.mesh).mean;
    zo_better += ezo < e0;
    icp_ok += eicp <= e0 + 1e-9;
    worst_icp = std::max(worst_icp, eicp - e0);
  }
  return {zo_better >= 9 && icp_ok == 10, "zoomout reduced error in " + std::to_string(zo_better) +
                                              "/10 (>= 9); icp within 1e-9 in " + std::to_string(icp_ok) +
                                              "/10 (worst change " + fmt("%+.3e", worst_icp) + ")"};
}

// ---------------------------------------------------------------------------
// 6. Sphere spectrum

Outcome criterion6() {
  const Mesh m = shapes::icosphere(4);
  const SpectralBasis b = eigendecompose(m, 16);
  const double scale = 4.0 * std::acos(-1.0) / m.total_area();
  double worst = 0.0;
  bool mult_ok = true;
  Index at = 1;
  for (int l = 1; l <= 3; ++l) {
    const double target = l * (l + 1) * scale;
    for (int i = 0; i < 2 * l + 1; ++i, ++at) worst = std::max(worst, std::abs(b.evals[at] - target) / target);
    // Multiplicity: exactly 2l+1 eigenvalues of the first 16 lie within 3%.
    int count = 0;
    for (Index i = 0; i < b.size(); ++i) count += std::abs(b.evals[i] - target) <= 0.03 * target;
    mult_ok = mult_ok && count == 2 * l + 1;
  }
  return {worst <= 0.03 && mult_ok,
          "max relative deviation " + fmt("%.4f", worst) + " (<= 0.03), multiplicities 3/5/7 " +
              (mult_ok ? "confirmed" : "violated")};
}

// ---------------------------------------------------------------------------
// 7, 8. Desk-scale training

struct TrainRun {
  std::vector<StepRecord> log;
  ExtractorNet<float> net;
};

TrainRun train_on(const fixtures::TrainingFixture& fx, double lambda, std::uint64_t seed, int steps) {
  ExtractorConfig cfg;
  TrainRun run{{}, ExtractorNet<float>::build(cfg, fixtures::kTrainingBaseCell)};
  TrainState state = TrainState::fresh(init_parameters(run.net, seed), seed);
  state.schedule_steps = 200;
  TrainOptions opts;
  opts.k = fx.k;
  opts.lambda = lambda;
  opts.batch_size = 4;
  run.log = run_training(state, run.net, fx.pairs, opts, steps);
  run.net.set_parameters(std::span<const float>(state.params));
  return run;
}

const fixtures::TrainingFixture& training_fixture() {
  static const fixtures::TrainingFixture fx = fixtures::make_training_fixture(20);
  return fx;
}

Outcome criterion7() {
  const auto& fx = training_fixture();
  const TrainRun run = train_on(fx, 1e-3, 7, 200);
  const auto means = epoch_means(run.log);
  int decreases = 0;
  for (std::size_t e = 1; e < means.size(); ++e) decreases += means[e] < means[e - 1];
  const double learned = fixtures::held_out_error(fx, DescriptorConfig{DescriptorKind::learned, 0}, 1e-3, &run.net);
  const double xyz = fixtures::held_out_error(fx, DescriptorConfig{DescriptorKind::xyz, 0}, 1e-3);
  const bool loss_ok = means.back() < means.front();
  return {loss_ok && learned < xyz,
          "epoch-mean loss " + fmt("%.4f", means.front()) + " -> " + fmt("%.4f", means.back()) + " over " +
              std::to_string(means.size()) + " epochs (" + std::to_string(decreases) + "/" +
              std::to_string(means.size() - 1) + " epoch-to-epoch decreases); held-out error x100 learned " +
              fmt("%.3f", 100 * learned) + " vs xyz " + fmt("%.3f", 100 * xyz)};
}

Outcome criterion8() {
  const auto& fx = training_fixture();
  int wins = 0;
  std::string detail;
  for (std::uint64_t seed : {11ULL, 12ULL, 13ULL}) {
    const double reg = train_on(fx, 1e-3, seed, 100).log.back().loss;
    double plain = std::numeric_limits<double>::infinity();
    try {
      plain = train_on(fx, 0.0, seed, 100).log.back().loss;
    } catch (const Error&) {
    }
    wins += reg < plain;
    detail += (detail.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) + ": " + fmt("%.4f", reg) +
              " vs " + fmt("%.4f", plain);
  }
  return {wins >= 2, "step-100 loss lambda=1e-3 vs lambda=0: " + detail + " (" + std::to_string(wins) + "/3 wins, >= 2)"};
}

// ---------------------------------------------------------------------------
// 9. CLI round trip

struct RunResult {
  int status = -1;
  std::string output;
};

RunResult run(const std::string& cmd) {
  RunResult r;
  FILE* pipe = ::popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) return r;
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = ::pclose(pipe);
  r.status = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome criterion9() {
  const fs::path dir = fs::absolute("acceptance_cli");
  fs::remove_all(dir);
  fs::create_directories(dir);
  write_off(shapes::jitter(shapes::icosphere(2), 0.01, 9), dir / "a.off");
  write_off(shapes::bumpy_blob(12, 14), dir / "b.off");
  write_p2p(dir / "aa.p2p", identity_pointmap(162), 162);
  {
    std::ofstream(dir / "manifest.json") << R"({"shapes": [{"id": "a", "mesh": "a.off"}, {"id": "b", "mesh": "b.off"}],
 "pairs": [{"id": "aa", "source": "a", "target": "a", "gt": "aa.p2p"}]})";
    std::ofstream(dir / "config.json") << R"({"k": 20, "descriptor": {"kind": "hks"}, "zoomout": {"k_end": 30, "step": 2},
 "cache_dir": "cache"})";
  }
  const std::string cli = std::string(FMAPKIT_CLI_PATH);
  const std::string common = " --config " + (dir / "config.json").string() + " --manifest " +
                             (dir / "manifest.json").string();

  auto round = [&](const fs::path& out) {
    std::vector<RunResult> r;
    r.push_back(run(cli + " precompute" + common));
    r.push_back(run(cli + " match --pair aa" + common + " --out " + out.string()));
    r.push_back(run(cli + " eval --pred " + (out / "aa.p2p").string() + " --gt " + (dir / "aa.p2p").string() +
                    " --mesh " + (dir / "a.off").string() + " --config " + (dir / "config.json").string() + " --out " +
                    out.string()));
    return r;
  };
  const auto first = round(dir / "run1");
  const std::string cache_a = slurp(dir / "cache" / "a.spec");
  const auto second = round(dir / "run2");

  bool statuses = true;
  for (const auto& r : first) statuses = statuses && r.status == 0;
  for (const auto& r : second) statuses = statuses && r.status == 0;
  const bool prints_zero = first[2].output == "0.0\n";
  bool identical = slurp(dir / "cache" / "a.spec") == cache_a;
  for (const char* f : {"aa.fmap", "aa.p2p", "report.json", "curve.txt"}) {
    identical = identical && slurp(dir / "run1" / f) == slurp(dir / "run2" / f) && !slurp(dir / "run1" / f).empty();
  }
  const bool cached_second = second[0].output.find("0 computed, 2 cached") != std::string::npos;

  // Edit mesh b: only its cache is rebuilt.
  write_off(shapes::bumpy_blob(12, 15), dir / "b.off");
  const RunResult third = run(cli + " precompute" + common);
  const bool invalidated = third.status == 0 && third.output.find("1 computed, 1 cached") != std::string::npos;

  const bool ok = statuses && prints_zero && identical && cached_second && invalidated;
  std::string detail = std::string("eval printed '") + (first[2].output.empty() ? "" : first[2].output.substr(0, first[2].output.size() - 1)) +
                       "'; rerun byte-identical " + (identical ? "yes" : "no") + "; second precompute " +
                       (cached_second ? "all cached" : "recomputed") + "; mesh edit " +
                       (invalidated ? "rebuilt 1 of 2" : "not detected");
  if (!statuses) detail += "; a command exited nonzero";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"solver matches vectorized least-squares oracle", criterion1},
      {"gradients match central finite differences", criterion2},
      {"rank-deficient descriptors: unregularized raises, regularized finite", criterion3},
      {"isometry recovery with WKS and zoomout", criterion4},
      {"refinement monotonicity", criterion5},
      {"icosphere spectrum shells l=1..3", criterion6},
      {"desk-scale training", criterion7},
      {"regularized layer converges faster", criterion8},
      {"CLI round trip", criterion9},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    std::printf("%s criterion %d: %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first.c_str(),
                o.detail.c_str(), secs);
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
