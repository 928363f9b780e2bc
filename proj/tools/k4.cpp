// k4 — command-line front end for the typicality-based log anomaly pipeline.
//
//   k4 run     --config cfg.json [--out DIR] [--threads N] [--seed S]
//   k4 sweep   --config grid.json ...
//   k4 windows --config cfg.json ...   (stage 1: manifest + split)
//   k4 embed   --config cfg.json ...   (stage 2: train/test K4EM)
//   k4 score   --config cfg.json ...   (stage 3: bundle + scores.csv)
//   k4 score   --bundle DIR --input emb.k4em --out scores.csv
//   k4 eval    --config cfg.json ...   (stage 4: metrics + diagnostics)

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "k4/experiment.hpp"
#include "k4/parallel.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string out;
  std::optional<unsigned> threads;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool config_required = true) {
  auto* c = cmd->add_option("--config", f.config, "Experiment config (JSON)");
  if (config_required) c->required();
  c->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "Output directory (overrides config \"output\")");
  cmd->add_option("--threads", f.threads, "Worker threads (default: K4_THREADS or hardware concurrency)")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--seed", f.seed, "Seed (overrides config \"seed\")");
}

void apply_threads(const CommonFlags& f) {
  if (f.threads) k4::set_num_threads(*f.threads);
}

k4::Json load_root(const CommonFlags& f) {
  auto root = k4::load_json(f.config);
  if (!root.is_object()) throw k4::InvalidInput(f.config + ": config must be a JSON object");
  if (f.seed) root["seed"] = *f.seed;
  return root;
}

std::filesystem::path base_dir(const CommonFlags& f) {
  return std::filesystem::absolute(f.config).parent_path();
}

k4::ExperimentConfig load_config(const CommonFlags& f) {
  auto c = k4::config_from_json(load_root(f), base_dir(f));
  if (!f.out.empty()) c.output = f.out;
  return c;
}

std::filesystem::path out_dir(const k4::ExperimentConfig& c, const CommonFlags& f) {
  return f.out.empty() ? c.resolve(c.output) : std::filesystem::path(f.out);
}

void log_line(const std::string& s) { std::cerr << s << '\n'; }

int report(const k4::RunSummary& r, const std::filesystem::path& out) {
  std::cerr << r.count(k4::ChunkOutcome::Status::kReported) << " chunk(s) reported, "
            << r.count(k4::ChunkOutcome::Status::kSkipped) << " skipped, "
            << r.count(k4::ChunkOutcome::Status::kFailed) << " failed; outputs in " << out.string() << '\n';
  return r.ok() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Typicality-based (kNN PRDC) log anomaly detection"};
  app.require_subcommand(1);

  CommonFlags run_f, sweep_f, win_f, emb_f, score_f, eval_f;
  auto* run = app.add_subcommand("run", "Full protocol on every chunk: window, sample, embed, train, score, evaluate");
  add_common(run, run_f);
  auto* sweep = app.add_subcommand("sweep", "Grid over list-valued axes (window, stride, n_train, detector, k)");
  add_common(sweep, sweep_f);
  auto* windows = app.add_subcommand("windows", "Stage: write window manifests and train/test splits");
  add_common(windows, win_f);
  auto* embed = app.add_subcommand("embed", "Stage: embed sampled windows to train.k4em / test.k4em");
  add_common(embed, emb_f);
  auto* score = app.add_subcommand("score", "Stage: train pipelines and score test embeddings, or score with a bundle");
  add_common(score, score_f, /*config_required=*/false);
  std::string bundle_dir, input_path;
  score->add_option("--bundle", bundle_dir, "Trained pipeline bundle directory")->check(CLI::ExistingDirectory);
  score->add_option("--input", input_path, "K4EM embeddings to score with --bundle")->check(CLI::ExistingFile);
  auto* eval = app.add_subcommand("eval", "Stage: metrics and diagnostics from scores.csv");
  add_common(eval, eval_f);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) {
      apply_threads(run_f);
      const auto c = load_config(run_f);
      const auto out = out_dir(c, run_f);
      return report(k4::run_experiment(c, out, log_line), out);
    }
    if (*sweep) {
      apply_threads(sweep_f);
      auto root = load_root(sweep_f);
      const auto probe = k4::config_from_json(k4::expand_grid(root).front(), base_dir(sweep_f));
      const auto out = sweep_f.out.empty() ? probe.resolve(probe.output) : std::filesystem::path(sweep_f.out);
      const auto r = k4::run_sweep(root, base_dir(sweep_f), out, log_line);
      std::cerr << r.cells.size() << " cell(s), " << r.failures << " failure(s); summary in "
                << (out / "sweep_summary.csv").string() << '\n';
      return r.failures == 0 ? 0 : 1;
    }
    if (*windows) {
      apply_threads(win_f);
      const auto c = load_config(win_f);
      k4::stage_windows(c, out_dir(c, win_f), log_line);
      return 0;
    }
    if (*embed) {
      apply_threads(emb_f);
      const auto c = load_config(emb_f);
      k4::stage_embed(c, out_dir(c, emb_f), log_line);
      return 0;
    }
    if (*score) {
      apply_threads(score_f);
      if (!bundle_dir.empty()) {
        if (input_path.empty() || score_f.out.empty())
          throw k4::InvalidInput("score --bundle needs --input EMB.k4em and --out SCORES.csv");
        const auto p = k4::load_bundle(bundle_dir);
        const auto emb = k4::load_external(input_path);
        const auto s = p.score(emb.matrix);
        std::string csv = "window_id,score\n";
        for (std::size_t i = 0; i < s.size(); ++i) csv += std::to_string(emb.ids[i]) + ',' + k4::format_double(s[i]) + '\n';
        k4::write_file(score_f.out, csv);
        std::cerr << "scored " << s.size() << " rows -> " << score_f.out << '\n';
        return 0;
      }
      if (score_f.config.empty()) throw k4::InvalidInput("score needs --config, or --bundle with --input");
      const auto c = load_config(score_f);
      k4::stage_score(c, out_dir(c, score_f), log_line);
      return 0;
    }
    if (*eval) {
      apply_threads(eval_f);
      const auto c = load_config(eval_f);
      const auto out = out_dir(c, eval_f);
      return report(k4::stage_eval(c, out, log_line), out);
    }
  } catch (const std::exception& e) {
    std::cerr << "k4: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
