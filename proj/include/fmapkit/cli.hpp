#pragma once

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "fmapkit/parallel.hpp"
#include "fmapkit/pipeline.hpp"

namespace fmapkit {

/// Process exit codes of the command-line driver.
enum ExitCode : int { kExitOk = 0, kExitComputational = 1, kExitUsage = 2 };

inline int exit_code_for(const Error& e) { return e.is_computational() ? kExitComputational : kExitUsage; }

/// Entry point of the `fmapkit` executable. Log lines go to `out`, errors to
/// `err`.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Spectral shape correspondence with functional maps", "fmapkit"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_path, manifest_path, out_dir = ".";
  std::optional<int> k;
  std::optional<double> lambda;
  std::optional<std::uint64_t> seed;
  unsigned threads = 0;
  app.add_option("--config", config_path, "pipeline config (JSON)");
  app.add_option("--manifest", manifest_path, "dataset manifest (JSON)");
  app.add_option("--k", k, "spectral basis size")->check(CLI::PositiveNumber);
  app.add_option("--lambda", lambda, "Laplacian commutativity weight")->check(CLI::NonNegativeNumber);
  app.add_option("--seed", seed, "random seed");
  app.add_option("--threads", threads, "worker threads (0 = all cores)");
  app.add_option("--out", out_dir, "output directory");

  auto* precompute = app.add_subcommand("precompute", "compute and cache spectral bases");

  auto* match = app.add_subcommand("match", "functional and point maps for manifest pairs");
  std::string pair_id, checkpoint, descriptor;
  match->add_option("--pair", pair_id, "pair id (default: every pair)");
  match->add_option("--checkpoint", checkpoint, "extractor checkpoint for learned descriptors");
  match->add_option("--descriptor", descriptor, "descriptor kind: hks, wks, xyz, learned");

  auto* train = app.add_subcommand("train", "train the feature extractor");
  std::optional<int> steps;
  std::string resume;
  train->add_option("--steps", steps, "total step budget")->check(CLI::NonNegativeNumber);
  train->add_option("--resume", resume, "checkpoint to resume from");

  auto* refine = app.add_subcommand("refine", "ICP or ZoomOut refinement of a map");
  std::string input, method = "zoomout";
  std::optional<int> iterations, k_end;
  refine->add_option("--input", input, "FMAP or P2P file")->required();
  refine->add_option("--pair", pair_id, "pair id");
  refine->add_option("--method", method, "icp or zoomout")->check(CLI::IsMember({"icp", "zoomout"}));
  refine->add_option("--iterations", iterations, "ICP iterations")->check(CLI::NonNegativeNumber);
  refine->add_option("--k-end", k_end, "ZoomOut final width")->check(CLI::PositiveNumber);

  auto* eval = app.add_subcommand("eval", "geodesic error of a point map");
  std::string pred, gt, mesh;
  eval->add_option("--pred", pred, "predicted P2P file")->required();
  eval->add_option("--gt", gt, "ground-truth P2P file")->required();
  eval->add_option("--mesh", mesh, "source mesh the maps point into")->required();

  auto* export_desc = app.add_subcommand("export-desc", "write learned descriptor channels");
  std::string shape_id;
  std::vector<int> channels;
  export_desc->add_option("--shape", shape_id, "shape id")->required();
  export_desc->add_option("--checkpoint", checkpoint, "extractor checkpoint")->required();
  export_desc->add_option("--channels", channels, "channel indices (default: all)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    set_num_threads(threads);
    PipelineConfig cfg = config_path.empty() ? PipelineConfig{} : load_config(config_path);
    if (k) cfg.k = *k;
    if (lambda) cfg.lambda = *lambda;
    if (seed) cfg.seed = *seed;
    if (!descriptor.empty()) cfg.descriptor.kind = parse_descriptor_kind(descriptor);
    if (k_end) cfg.zoomout.k_end = *k_end;
    cfg.validate();

    CommandContext ctx{out, out_dir};
    if (eval->parsed()) {
      const EvaluationReport report = cmd_eval(cfg, ctx, EvalOptions{pred, gt, mesh});
      out << format_decimal(report.mean_error_x100) << '\n';
      return kExitOk;
    }

    if (manifest_path.empty()) throw UsageError("--manifest is required for this command");
    Workspace ws(load_manifest(manifest_path), cfg);

    if (precompute->parsed()) {
      const PrecomputeSummary s = cmd_precompute(ws, ctx);
      return s.failed ? kExitComputational : kExitOk;
    }
    if (match->parsed()) {
      out << "lambda = " << format_double(cfg.lambda) << (lambda ? " (command line)" : " (config)") << '\n';
      cmd_match(ws, ctx, pair_id, checkpoint.empty() ? std::nullopt : std::optional<fs::path>(checkpoint));
      return kExitOk;
    }
    if (train->parsed()) {
      TrainCommandOptions opts;
      opts.steps = steps;
      if (!resume.empty()) opts.resume = resume;
      cmd_train(ws, ctx, opts);
      return kExitOk;
    }
    if (refine->parsed()) {
      RefineOptions opts;
      opts.input = input;
      opts.pair_id = pair_id;
      opts.method = parse_refine_method(method);
      opts.iterations = iterations;
      cmd_refine(ws, ctx, opts);
      return kExitOk;
    }
    if (export_desc->parsed()) {
      cmd_export_descriptors(ws, ctx, ExportOptions{shape_id, checkpoint, channels});
      return kExitOk;
    }
    throw UsageError("no command given");
  } catch (const Error& e) {
    err << "fmapkit: " << e.what() << '\n';
    return exit_code_for(e);
  } catch (const fs::filesystem_error& e) {
    err << "fmapkit: io error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "fmapkit: " << e.what() << '\n';
    return kExitComputational;
  }
}

}  // namespace fmapkit
