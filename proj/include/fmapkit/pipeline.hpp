#pragma once

// Batch pipeline: configuration and manifest documents, the spectral cache
// directory, and the command implementations behind the fmapkit CLI.

#include <nlohmann/json.hpp>

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "fmapkit/convert.hpp"
#include "fmapkit/error.hpp"
#include "fmapkit/eval.hpp"
#include "fmapkit/extractor.hpp"
#include "fmapkit/fmap.hpp"
#include "fmapkit/hash.hpp"
#include "fmapkit/mesh.hpp"
#include "fmapkit/pointmap.hpp"
#include "fmapkit/spectral.hpp"
#include "fmapkit/text_io.hpp"
#include "fmapkit/train.hpp"

namespace fmapkit {

namespace fs = std::filesystem;
using nlohmann::json;

inline std::string to_string(Axis a) {
  switch (a) {
    case Axis::X: return "x";
    case Axis::Y: return "y";
    case Axis::Z: return "z";
  }
  return "y";
}

struct DescriptorConfig {
  DescriptorKind kind = DescriptorKind::wks;
  /// Number of HKS times or WKS energies.
  int count = 100;
};

struct TrainConfig {
  /// Total step budget; also the length of the learning-rate schedule.
  int steps = 200;
  int batch_size = 4;
  double lr_initial = 1e-3;
  double lr_final = 1e-4;
  bool augment = true;
  int checkpoint_every = 100;
};

struct PipelineConfig {
  int k = kDefaultBasisSize;
  double lambda = kDefaultLambda;
  DescriptorConfig descriptor;
  /// Finest grid cell of the extractor hierarchy, in normalized mesh units.
  double base_cell = 0.05;
  ExtractorConfig extractor;
  TrainConfig train;
  ZoomOutSchedule zoomout;
  int icp_iterations = kDefaultIcpIterations;
  std::uint64_t seed = 0;
  NormalizeMode normalization = NormalizeMode::unit_area;
  Axis up_axis = Axis::Y;
  /// Empty means "<manifest dir>/.fmapkit-cache".
  fs::path cache_dir;

  void validate() const {
    if (k < 2) throw UsageError("k must be at least 2");
    if (!(lambda >= 0.0)) throw UsageError("lambda must be non-negative");
    if (descriptor.count < 1) throw UsageError("descriptor count must be positive");
    if (!(base_cell > 0.0)) throw UsageError("base_cell must be positive");
    if (train.steps < 0 || train.batch_size < 1 || train.checkpoint_every < 1) {
      throw UsageError("train.steps must be >= 0, batch_size and checkpoint_every >= 1");
    }
    if (zoomout.step < 1) throw UsageError("zoomout.step must be at least 1");
    if (icp_iterations < 0) throw UsageError("icp_iterations must be non-negative");
    extractor.validate();
  }

  /// Basis width to cache: wide enough for matching and for ZoomOut.
  Index cache_width(Index num_vertices) const {
    return std::min<Index>(std::max(k, zoomout.k_end), num_vertices - 1);
  }

  json to_json() const {
    return {{"k", k},
            {"lambda", lambda},
            {"descriptor", {{"kind", to_string(descriptor.kind)}, {"count", descriptor.count}}},
            {"base_cell", base_cell},
            {"extractor", extractor.to_json()},
            {"train",
             {{"steps", train.steps},
              {"batch_size", train.batch_size},
              {"lr_initial", train.lr_initial},
              {"lr_final", train.lr_final},
              {"augment", train.augment},
              {"checkpoint_every", train.checkpoint_every}}},
            {"zoomout", {{"k_end", zoomout.k_end}, {"step", zoomout.step}}},
            {"icp_iterations", icp_iterations},
            {"seed", seed},
            {"normalization", to_string(normalization)},
            {"up_axis", to_string(up_axis)},
            {"cache_dir", cache_dir.string()}};
  }

  /// Relative cache_dir values resolve against `base_dir`.
  static PipelineConfig from_json(const json& j, const fs::path& base_dir = {}) {
    static const std::set<std::string> known{"k",         "lambda",  "descriptor",     "base_cell", "extractor",
                                             "train",     "zoomout", "icp_iterations", "seed",      "normalization",
                                             "up_axis",   "cache_dir"};
    if (!j.is_object()) throw ParseError("config must be a JSON object");
    for (const auto& [key, value] : j.items()) {
      if (!known.count(key)) throw UsageError("unknown config key '" + key + "'");
    }
    PipelineConfig c;
    try {
      c.k = j.value("k", c.k);
      c.lambda = j.value("lambda", c.lambda);
      if (j.contains("descriptor")) {
        const auto& d = j.at("descriptor");
        c.descriptor.kind = parse_descriptor_kind(d.value("kind", to_string(c.descriptor.kind)));
        c.descriptor.count = d.value("count", c.descriptor.count);
      }
      c.base_cell = j.value("base_cell", c.base_cell);
      if (j.contains("extractor")) c.extractor = ExtractorConfig::from_json(j.at("extractor"));
      if (j.contains("train")) {
        const auto& t = j.at("train");
        c.train.steps = t.value("steps", c.train.steps);
        c.train.batch_size = t.value("batch_size", c.train.batch_size);
        c.train.lr_initial = t.value("lr_initial", c.train.lr_initial);
        c.train.lr_final = t.value("lr_final", c.train.lr_final);
        c.train.augment = t.value("augment", c.train.augment);
        c.train.checkpoint_every = t.value("checkpoint_every", c.train.checkpoint_every);
      }
      if (j.contains("zoomout")) {
        c.zoomout.k_end = j.at("zoomout").value("k_end", c.zoomout.k_end);
        c.zoomout.step = j.at("zoomout").value("step", c.zoomout.step);
      }
      c.icp_iterations = j.value("icp_iterations", c.icp_iterations);
      c.seed = j.value("seed", c.seed);
      c.normalization = parse_normalize_mode(j.value("normalization", to_string(c.normalization)));
      c.up_axis = parse_axis(j.value("up_axis", to_string(c.up_axis)));
      if (j.contains("cache_dir")) {
        fs::path p = j.at("cache_dir").get<std::string>();
        c.cache_dir = p.is_relative() && !base_dir.empty() ? base_dir / p : p;
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("config: ") + e.what());
    }
    c.validate();
    return c;
  }
};

inline json parse_json_file(const fs::path& path) {
  const std::string text = read_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline PipelineConfig load_config(const fs::path& path) {
  return PipelineConfig::from_json(parse_json_file(path), path.parent_path());
}

struct ShapeEntry {
  std::string id;
  fs::path mesh;
  /// Template-to-shape functional map, for remeshed datasets.
  std::optional<fs::path> template_fmap;
};

struct PairEntry {
  std::string id;
  std::string source;
  std::string target;
  /// P2P file mapping target vertices to source vertices.
  std::optional<fs::path> gt;
  /// FMAP file with the ground-truth functional map.
  std::optional<fs::path> gt_fmap;
};

/// Shapes and pairs of a dataset. Paths are resolved against the manifest's
/// directory.
struct DatasetManifest {
  fs::path root;
  std::vector<ShapeEntry> shapes;
  std::vector<PairEntry> pairs;

  const ShapeEntry& shape(const std::string& id) const {
    for (const auto& s : shapes) {
      if (s.id == id) return s;
    }
    throw UsageError("unknown shape id '" + id + "'");
  }

  const PairEntry& pair(const std::string& id) const {
    for (const auto& p : pairs) {
      if (p.id == id) return p;
    }
    throw UsageError("unknown pair id '" + id + "'");
  }

  static DatasetManifest from_json(const json& j, const fs::path& root) {
    DatasetManifest m;
    m.root = root;
    auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_relative() ? root / path : path;
    };
    try {
      for (const auto& s : j.at("shapes")) {
        ShapeEntry e;
        e.id = s.at("id").get<std::string>();
        e.mesh = resolve(s.at("mesh").get<std::string>());
        if (s.contains("template_fmap")) e.template_fmap = resolve(s.at("template_fmap").get<std::string>());
        m.shapes.push_back(std::move(e));
      }
      if (j.contains("pairs")) {
        for (const auto& p : j.at("pairs")) {
          PairEntry e;
          e.source = p.at("source").get<std::string>();
          e.target = p.at("target").get<std::string>();
          e.id = p.value("id", e.source + "-" + e.target);
          if (p.contains("gt")) e.gt = resolve(p.at("gt").get<std::string>());
          if (p.contains("gt_fmap")) e.gt_fmap = resolve(p.at("gt_fmap").get<std::string>());
          m.pairs.push_back(std::move(e));
        }
      }
    } catch (const json::exception& e) {
      throw ParseError(std::string("manifest: ") + e.what());
    }
    std::set<std::string> ids;
    for (const auto& s : m.shapes) {
      if (!ids.insert(s.id).second) throw UsageError("duplicate shape id '" + s.id + "'");
    }
    std::set<std::string> pair_ids;
    for (const auto& p : m.pairs) {
      m.shape(p.source);
      m.shape(p.target);
      if (!pair_ids.insert(p.id).second) throw UsageError("duplicate pair id '" + p.id + "'");
    }
    return m;
  }
};

inline DatasetManifest load_manifest(const fs::path& path) {
  return DatasetManifest::from_json(parse_json_file(path), path.parent_path());
}

// ---------------------------------------------------------------------------
// Shapes and the spectral cache

struct LoadedShape {
  std::string id;
  Mesh mesh;
  SpectralBasis basis;
  Digest hash{};
};

/// Content key of a cached basis: the mesh file bytes plus every setting that
/// changes the loaded geometry.
inline Digest shape_hash(const std::string& mesh_bytes, const PipelineConfig& cfg) {
  return sha256({mesh_bytes, "normalization=" + to_string(cfg.normalization), "up=" + to_string(cfg.up_axis)});
}

/// Exclusive advisory lock on "<dir>/.lock" for the lifetime of the object.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    fs::create_directories(dir);
    const auto path = (dir / ".lock").string();
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file " + path);
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + path);
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

class Workspace {
 public:
  Workspace(DatasetManifest manifest, PipelineConfig cfg) : manifest_(std::move(manifest)), cfg_(std::move(cfg)) {
    if (const char* env = std::getenv("FMAPKIT_CACHE"); env && *env) {
      cache_dir_ = env;
    } else if (!cfg_.cache_dir.empty()) {
      cache_dir_ = cfg_.cache_dir;
    } else {
      cache_dir_ = manifest_.root / ".fmapkit-cache";
    }
  }

  const DatasetManifest& manifest() const { return manifest_; }
  const PipelineConfig& config() const { return cfg_; }
  const fs::path& cache_dir() const { return cache_dir_; }

  fs::path cache_path(const std::string& id) const { return cache_dir_ / (id + ".spec"); }

  enum class CacheStatus { computed, cached };

  /// Loads the mesh and a basis of cache_width; reads the cache when its hash
  /// and width match, otherwise computes and rewrites it.
  const LoadedShape& shape(const std::string& id, CacheStatus* status = nullptr) {
    if (auto it = shapes_.find(id); it != shapes_.end()) {
      if (status) *status = CacheStatus::cached;
      return it->second;
    }
    const ShapeEntry& entry = manifest_.shape(id);
    LoadedShape s;
    s.id = id;
    const std::string bytes = read_file(entry.mesh);
    s.hash = shape_hash(bytes, cfg_);
    s.mesh = normalize_mesh(parse_mesh(bytes, cfg_.up_axis), cfg_.normalization);
    const Index width = cfg_.cache_width(s.mesh.num_vertices());
    if (width < cfg_.k) {
      throw UsageError("shape '" + id + "' has " + std::to_string(s.mesh.num_vertices()) +
                       " vertices, too few for k = " + std::to_string(cfg_.k));
    }

    bool hit = false;
    const fs::path path = cache_path(id);
    if (fs::exists(path)) {
      try {
        SpectralCache cache = read_spectral_cache(path);
        if (cache.mesh_hash == s.hash && cache.basis.num_vertices() == s.mesh.num_vertices() &&
            cache.basis.size() >= width) {
          s.basis = cache.basis.size() == width ? std::move(cache.basis) : cache.basis.truncated(width);
          hit = true;
        }
      } catch (const Error&) {
        hit = false;
      }
    }
    if (!hit) {
      s.basis = eigendecompose(s.mesh, width);
      DirectoryLock lock(cache_dir_);
      write_spectral_cache(path, s.basis, s.hash);
    }
    if (status) *status = hit ? CacheStatus::cached : CacheStatus::computed;
    return shapes_.emplace(id, std::move(s)).first->second;
  }

  /// Ground-truth functional map of a pair at width k x k.
  GroundTruthMap ground_truth(const PairEntry& pair, Index k) {
    const LoadedShape& m = shape(pair.source);
    const LoadedShape& n = shape(pair.target);
    if (pair.gt) {
      const P2PFile gt = read_p2p(*pair.gt);
      check_pointmap(gt.map, n.mesh.num_vertices(), m.mesh.num_vertices());
      return gt_from_pointmap(m.basis, n.basis, gt.map, k, k);
    }
    if (pair.gt_fmap) {
      FuncMap c = read_fmap(*pair.gt_fmap);
      if (c.target_k() < k || c.source_k() < k) throw DimensionError("ground-truth map narrower than k");
      return GroundTruthMap{FuncMap{c.c.topLeftCorner(k, k)}, GtProvenance::loaded};
    }
    const ShapeEntry& sm = manifest_.shape(pair.source);
    const ShapeEntry& sn = manifest_.shape(pair.target);
    if (sm.template_fmap && sn.template_fmap) {
      GroundTruthMap gt = gt_from_template(read_fmap(*sm.template_fmap), read_fmap(*sn.template_fmap));
      if (gt.map.target_k() < k || gt.map.source_k() < k) throw DimensionError("template maps narrower than k");
      gt.map.c = gt.map.c.topLeftCorner(k, k).eval();
      return gt;
    }
    throw UsageError("pair '" + pair.id + "' has no ground truth");
  }

  /// Vertex-level ground truth when the pair carries a P2P file.
  std::optional<PointMap> ground_truth_pointmap(const PairEntry& pair) {
    if (!pair.gt) return std::nullopt;
    return read_p2p(*pair.gt).map;
  }

 private:
  DatasetManifest manifest_;
  PipelineConfig cfg_;
  fs::path cache_dir_;
  std::map<std::string, LoadedShape> shapes_;
};

// ---------------------------------------------------------------------------
// Library-level pipeline steps shared by the CLI, tests and samples

/// Descriptor field of the configured kind on a basis of width k.
inline Eigen::MatrixXd compute_descriptors(const Mesh& mesh, const SpectralBasis& basis,
                                           const DescriptorConfig& cfg, const ExtractorNet<float>* net = nullptr) {
  switch (cfg.kind) {
    case DescriptorKind::hks: return hks(basis, default_hks_times(basis, cfg.count)).values;
    case DescriptorKind::wks: {
      const WksParams p = default_wks_params(basis, cfg.count);
      return wks(basis, p.energies, p.sigma).values;
    }
    case DescriptorKind::xyz: return mesh.vertices;
    case DescriptorKind::learned:
      if (!net) throw UsageError("learned descriptors need a checkpoint");
      return learned_descriptors(*net, mesh.vertices);
  }
  throw UsageError("unknown descriptor kind");
}

struct MatchResult {
  FuncMap c;
  PointMap t;
};

/// Descriptors, projection, regularized solve and point-map recovery at
/// width k for the pair (source M, target N).
inline MatchResult match_shapes(const Mesh& mesh_m, const SpectralBasis& basis_m, const Mesh& mesh_n,
                                const SpectralBasis& basis_n, int k, double lambda, const DescriptorConfig& desc,
                                const ExtractorNet<float>* net = nullptr) {
  const SpectralBasis bm = basis_m.truncated(k);
  const SpectralBasis bn = basis_n.truncated(k);
  SolveContext ctx;
  ctx.a = project(bm, compute_descriptors(mesh_m, bm, desc, net));
  ctx.b = project(bn, compute_descriptors(mesh_n, bn, desc, net));
  ctx.evals_m = bm.evals;
  ctx.evals_n = bn.evals;
  ctx.lambda = lambda;
  MatchResult r;
  r.c = solve_regularized(ctx);
  r.t = fmap_to_pointmap(r.c, bm, bn);
  return r;
}

/// Pair indices for one step: each epoch visits the pairs in a seeded random
/// order, in consecutive batches. A short final batch is kept.
inline std::vector<std::size_t> batch_for_step(std::size_t num_pairs, int batch_size, std::uint64_t seed,
                                               std::int64_t step) {
  if (num_pairs == 0) throw UsageError("no training pairs");
  const auto per_epoch = static_cast<std::int64_t>((num_pairs + static_cast<std::size_t>(batch_size) - 1) /
                                                   static_cast<std::size_t>(batch_size));
  const std::int64_t epoch = step / per_epoch;
  const std::int64_t slot = step % per_epoch;
  std::vector<std::size_t> order(num_pairs);
  for (std::size_t i = 0; i < num_pairs; ++i) order[i] = i;
  auto rng = step_rng(seed ^ 0x9e3779b97f4a7c15ULL, epoch);
  std::shuffle(order.begin(), order.end(), rng);
  const auto lo = static_cast<std::size_t>(slot * batch_size);
  const auto hi = std::min(num_pairs, lo + static_cast<std::size_t>(batch_size));
  return {order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi)};
}

inline std::int64_t steps_per_epoch(std::size_t num_pairs, int batch_size) {
  return static_cast<std::int64_t>((num_pairs + static_cast<std::size_t>(batch_size) - 1) /
                                   static_cast<std::size_t>(batch_size));
}

struct StepRecord {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss = 0.0;
  double learning_rate = 0.0;
};

/// Runs train_step until state.step reaches `until`. `on_step` is called after
/// every step with the record and the updated state.
template <typename OnStep>
std::vector<StepRecord> run_training(TrainState& state, ExtractorNet<float>& net,
                                     const std::vector<TrainingPair>& pairs, const TrainOptions& opts,
                                     std::int64_t until, OnStep&& on_step) {
  std::vector<StepRecord> log;
  const std::int64_t per_epoch = steps_per_epoch(pairs.size(), opts.batch_size);
  while (state.step < until) {
    const auto idx = batch_for_step(pairs.size(), opts.batch_size, state.seed, state.step);
    std::vector<TrainingPair> batch;
    for (auto i : idx) batch.push_back(pairs[i]);
    StepRecord rec;
    rec.step = state.step;
    rec.epoch = state.step / per_epoch;
    rec.learning_rate = state.learning_rate();
    rec.loss = train_step(state, net, batch, opts);
    log.push_back(rec);
    on_step(rec, state);
  }
  return log;
}

inline std::vector<StepRecord> run_training(TrainState& state, ExtractorNet<float>& net,
                                            const std::vector<TrainingPair>& pairs, const TrainOptions& opts,
                                            std::int64_t until) {
  return run_training(state, net, pairs, opts, until, [](const StepRecord&, const TrainState&) {});
}

/// Mean loss per epoch, in epoch order.
inline std::vector<double> epoch_means(const std::vector<StepRecord>& log) {
  std::map<std::int64_t, std::pair<double, int>> acc;
  for (const auto& r : log) {
    acc[r.epoch].first += r.loss;
    acc[r.epoch].second += 1;
  }
  std::vector<double> out;
  for (const auto& [e, v] : acc) out.push_back(v.first / v.second);
  return out;
}

// ---------------------------------------------------------------------------
// Commands

struct CommandContext {
  std::ostream& log;
  fs::path out_dir = ".";
};

struct PrecomputeSummary {
  int computed = 0;
  int cached = 0;
  int failed = 0;
};

inline PrecomputeSummary cmd_precompute(Workspace& ws, CommandContext& ctx) {
  PrecomputeSummary summary;
  for (const auto& entry : ws.manifest().shapes) {
    try {
      Workspace::CacheStatus status{};
      const LoadedShape& s = ws.shape(entry.id, &status);
      const bool computed = status == Workspace::CacheStatus::computed;
      (computed ? summary.computed : summary.cached) += 1;
      ctx.log << "shape " << entry.id << ": " << (computed ? "computed" : "cached") << " (n=" << s.mesh.num_vertices()
              << ", k=" << s.basis.size() << ")\n";
    } catch (const Error& e) {
      if (!e.is_computational()) throw;
      ++summary.failed;
      ctx.log << "shape " << entry.id << ": failed: " << e.what() << '\n';
    }
  }
  ctx.log << summary.computed << " computed, " << summary.cached << " cached";
  if (summary.failed) ctx.log << ", " << summary.failed << " failed";
  ctx.log << '\n';
  return summary;
}

inline std::optional<ExtractorNet<float>> load_network(const PipelineConfig& cfg,
                                                       const std::optional<fs::path>& checkpoint) {
  if (!checkpoint) return std::nullopt;
  const Checkpoint ck = read_checkpoint(*checkpoint);
  if (ck.config_digest != extractor_digest(cfg.extractor, cfg.base_cell)) {
    throw UsageError("checkpoint " + checkpoint->string() + " was written for a different extractor configuration");
  }
  auto net = ExtractorNet<float>::build(cfg.extractor, cfg.base_cell);
  net.set_parameters(std::span<const float>(ck.state.params));
  return net;
}

inline std::vector<const PairEntry*> select_pairs(const DatasetManifest& manifest, const std::string& pair_id) {
  std::vector<const PairEntry*> out;
  if (!pair_id.empty()) {
    out.push_back(&manifest.pair(pair_id));
  } else {
    for (const auto& p : manifest.pairs) out.push_back(&p);
  }
  if (out.empty()) throw UsageError("manifest has no pairs");
  return out;
}

inline void cmd_match(Workspace& ws, CommandContext& ctx, const std::string& pair_id,
                      const std::optional<fs::path>& checkpoint) {
  const PipelineConfig& cfg = ws.config();
  if (cfg.descriptor.kind == DescriptorKind::learned && !checkpoint) {
    throw UsageError("descriptor kind 'learned' needs --checkpoint");
  }
  const auto net = cfg.descriptor.kind == DescriptorKind::learned ? load_network(cfg, checkpoint) : std::nullopt;
  fs::create_directories(ctx.out_dir);
  for (const PairEntry* pair : select_pairs(ws.manifest(), pair_id)) {
    const LoadedShape& m = ws.shape(pair->source);
    const LoadedShape& n = ws.shape(pair->target);
    const MatchResult r =
        match_shapes(m.mesh, m.basis, n.mesh, n.basis, cfg.k, cfg.lambda, cfg.descriptor, net ? &*net : nullptr);
    write_fmap(ctx.out_dir / (pair->id + ".fmap"), r.c);
    write_p2p(ctx.out_dir / (pair->id + ".p2p"), r.t, m.mesh.num_vertices());
    ctx.log << "pair " << pair->id << ": " << to_string(cfg.descriptor.kind) << " k=" << cfg.k
            << " lambda=" << format_double(cfg.lambda) << " -> " << (pair->id + ".fmap") << ", "
            << (pair->id + ".p2p") << '\n';
  }
}

struct TrainCommandOptions {
  std::optional<fs::path> resume;
  std::optional<int> steps;
};

inline TrainState cmd_train(Workspace& ws, CommandContext& ctx, const TrainCommandOptions& opts) {
  const PipelineConfig& cfg = ws.config();
  const int budget = opts.steps.value_or(cfg.train.steps);
  if (budget < 0) throw UsageError("steps must be non-negative");
  if (ws.manifest().pairs.empty()) throw UsageError("manifest has no training pairs");

  // Shapes, then ground truth for every pair.
  std::map<std::string, ShapeSample> samples;
  for (const auto& p : ws.manifest().pairs) {
    for (const auto& id : {p.source, p.target}) {
      if (!samples.count(id)) {
        const LoadedShape& s = ws.shape(id);
        samples.emplace(id, ShapeSample{s.mesh, s.basis.truncated(cfg.k)});
      }
    }
  }
  std::vector<TrainingPair> pairs;
  for (const auto& p : ws.manifest().pairs) {
    pairs.push_back(TrainingPair{&samples.at(p.source), &samples.at(p.target), ws.ground_truth(p, cfg.k).map});
  }

  auto net = ExtractorNet<float>::build(cfg.extractor, cfg.base_cell);
  const Digest digest = extractor_digest(cfg.extractor, cfg.base_cell);
  TrainState state;
  if (opts.resume) {
    Checkpoint ck = read_checkpoint(*opts.resume);
    if (ck.config_digest != digest) throw UsageError("checkpoint was written for a different extractor configuration");
    if (static_cast<Index>(ck.state.params.size()) != net.parameter_count()) {
      throw DimensionError("checkpoint parameter count does not match the extractor");
    }
    state = std::move(ck.state);
    state.seed = cfg.seed;
    ctx.log << "resuming at step " << state.step << '\n';
  } else {
    state = TrainState::fresh(init_parameters(net, cfg.seed), cfg.seed);
  }
  state.lr_initial = cfg.train.lr_initial;
  state.lr_final = cfg.train.lr_final;
  state.schedule_steps = budget;

  TrainOptions topts;
  topts.k = cfg.k;
  topts.lambda = cfg.lambda;
  topts.batch_size = cfg.train.batch_size;
  topts.augment = cfg.train.augment;

  fs::create_directories(ctx.out_dir);
  const fs::path ck_path = ctx.out_dir / "checkpoint.kpw";
  const fs::path log_path = ctx.out_dir / "train_log.csv";
  const bool append = opts.resume.has_value() && fs::exists(log_path);
  std::ofstream csv(log_path, append ? std::ios::app : std::ios::trunc);
  if (!csv) throw IoError("cannot write " + log_path.string());
  if (!append) csv << "step,epoch,loss,learning_rate\n";

  run_training(state, net, pairs, topts, budget, [&](const StepRecord& r, const TrainState& s) {
    csv << r.step << ',' << r.epoch << ',' << format_double(r.loss) << ',' << format_double(r.learning_rate) << '\n';
    if (s.step % cfg.train.checkpoint_every == 0) write_checkpoint(ck_path, digest, s);
  });
  write_checkpoint(ck_path, digest, state);
  ctx.log << "trained to step " << state.step << " -> " << ck_path.filename().string() << '\n';
  return state;
}

enum class RefineMethod { icp, zoomout };

inline RefineMethod parse_refine_method(std::string_view s) {
  if (s == "icp") return RefineMethod::icp;
  if (s == "zoomout") return RefineMethod::zoomout;
  throw UsageError("unknown refinement method '" + std::string(s) + "'");
}

struct RefineOptions {
  fs::path input;
  std::string pair_id;
  RefineMethod method = RefineMethod::zoomout;
  std::optional<int> iterations;
};

/// Refines a FMAP or P2P file of a manifest pair. A P2P input is first
/// converted to a k x k functional map.
inline FuncMap cmd_refine(Workspace& ws, CommandContext& ctx, const RefineOptions& opts) {
  const PipelineConfig& cfg = ws.config();
  const auto pairs = select_pairs(ws.manifest(), opts.pair_id);
  if (pairs.size() != 1) throw UsageError("refine needs --pair when the manifest has several pairs");
  const PairEntry& pair = *pairs.front();
  const LoadedShape& m = ws.shape(pair.source);
  const LoadedShape& n = ws.shape(pair.target);

  const std::string text = read_file(opts.input);
  FuncMap c0;
  if (text.rfind("FMAP", 0) == 0) {
    c0 = read_fmap(opts.input);
  } else if (text.rfind("P2P", 0) == 0) {
    const P2PFile p = read_p2p(opts.input);
    check_pointmap(p.map, n.mesh.num_vertices(), m.mesh.num_vertices());
    c0 = pointmap_to_fmap(m.basis, n.basis, p.map, cfg.k, cfg.k);
  } else {
    throw ParseError(opts.input.string() + ": expected an FMAP or P2P file");
  }

  FuncMap c;
  std::string tag;
  if (opts.method == RefineMethod::icp) {
    const int iters = opts.iterations.value_or(cfg.icp_iterations);
    c = icp_refine(c0, m.basis, n.basis, iters);
    tag = "icp";
    ctx.log << "icp: " << iters << " iterations at k=" << c.source_k() << '\n';
  } else {
    c = zoomout(c0, m.basis, n.basis, cfg.zoomout.k_end, cfg.zoomout.step);
    tag = "zoomout";
    ctx.log << "zoomout: " << c0.source_k() << " -> " << c.source_k() << " step " << cfg.zoomout.step << '\n';
  }
  const PointMap t = fmap_to_pointmap(c, m.basis, n.basis);
  fs::create_directories(ctx.out_dir);
  write_fmap(ctx.out_dir / (pair.id + "." + tag + ".fmap"), c);
  write_p2p(ctx.out_dir / (pair.id + "." + tag + ".p2p"), t, m.mesh.num_vertices());
  return c;
}

struct EvalOptions {
  fs::path pred;
  fs::path gt;
  fs::path mesh;
};

/// Geodesic error of a predicted P2P against ground truth on the source mesh.
/// Writes report.json and curve.txt and returns the report.
inline EvaluationReport cmd_eval(const PipelineConfig& cfg, CommandContext& ctx, const EvalOptions& opts) {
  const P2PFile pred = read_p2p(opts.pred);
  const P2PFile gt = read_p2p(opts.gt);
  const Mesh mesh = normalize_mesh(load_mesh(opts.mesh, cfg.up_axis), cfg.normalization);
  if (pred.n_source != mesh.num_vertices() || gt.n_source != mesh.num_vertices()) {
    throw DimensionError("maps point into " + std::to_string(pred.n_source) + " / " + std::to_string(gt.n_source) +
                         " vertices, mesh has " + std::to_string(mesh.num_vertices()));
  }
  const EvaluationReport report = make_report({geodesic_errors(pred.map, gt.map, mesh)});
  fs::create_directories(ctx.out_dir);
  write_report(report, ctx.out_dir / "report.json", ctx.out_dir / "curve.txt");
  return report;
}

struct ExportOptions {
  std::string shape_id;
  fs::path checkpoint;
  std::vector<int> channels;
};

inline void write_scalar_field(const fs::path& path, const Eigen::VectorXd& values) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  for (Index i = 0; i < values.size(); ++i) out << format_double(values[i]) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

/// Learned descriptor channels of one shape and their reconstructions from
/// the first k spectral coefficients, one value per line.
inline void cmd_export_descriptors(Workspace& ws, CommandContext& ctx, const ExportOptions& opts) {
  const PipelineConfig& cfg = ws.config();
  const auto net = load_network(cfg, opts.checkpoint);
  const LoadedShape& s = ws.shape(opts.shape_id);
  const Eigen::MatrixXd f = learned_descriptors(*net, s.mesh.vertices);
  std::vector<int> channels = opts.channels;
  if (channels.empty()) {
    for (int c = 0; c < f.cols(); ++c) channels.push_back(c);
  }
  for (int c : channels) {
    if (c < 0 || c >= f.cols()) {
      throw UsageError("channel " + std::to_string(c) + " out of range [0, " + std::to_string(f.cols()) + ")");
    }
  }
  const SpectralBasis basis = s.basis.truncated(cfg.k);
  fs::create_directories(ctx.out_dir);
  for (int c : channels) {
    const Eigen::VectorXd field = f.col(c);
    const Eigen::VectorXd recon = reconstruct(basis, project(basis, Eigen::MatrixXd(field))).values.col(0);
    const std::string stem = opts.shape_id + ".ch" + std::to_string(c);
    write_scalar_field(ctx.out_dir / (stem + ".txt"), field);
    write_scalar_field(ctx.out_dir / (stem + ".recon.txt"), recon);
  }
  ctx.log << "exported " << channels.size() << " channels of " << opts.shape_id << '\n';
}

}  // namespace fmapkit
