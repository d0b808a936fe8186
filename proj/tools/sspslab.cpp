// Command-line front end: train, eval, resume, sweep and a few exports.

#include "sspslab/experiment.hpp"
#include "sspslab/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <sstream>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

namespace {

using namespace sspslab;
namespace fs = std::filesystem;

void print_report(const MetricsReport& r) {
  std::printf("eer        %.6f\n", r.eer);
  std::printf("min_dcf    %.6f\n", r.min_dcf);
  std::printf("intra_var  %.6f\n", r.intra_speaker_variance);
  std::printf("inter_var  %.6f\n", r.inter_speaker_variance);
  std::printf("trials     %zu target / %zu non-target\n", r.n_target, r.n_nontarget);
}

void print_artifacts(const RunArtifacts& art) {
  for (const auto& rec : art.epochs) {
    std::printf("epoch %4lld  loss %.5f  lr %.3g", static_cast<long long>(rec.epoch),
                rec.mean_loss, rec.lr);
    if (rec.clusters) std::printf("  fallback %.3f", rec.fallback_rate);
    if (rec.metrics) std::printf("  eer %.4f  min_dcf %.4f", rec.metrics->eer, rec.metrics->min_dcf);
    std::printf("\n");
  }
  if (!art.checkpoints.empty()) std::printf("checkpoint %s\n", art.checkpoints.back().c_str());
  print_report(art.final_report);
}

// "key=value" pairs from --set.
std::vector<std::pair<std::string, std::string>> split_sets(const std::vector<std::string>& sets) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    SSPSLAB_CHECK(eq != std::string::npos, "--set expects key=value, got " << s);
    out.emplace_back(detail::trim(s.substr(0, eq)), detail::trim(s.substr(eq + 1)));
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sspslab: positive sampling experiments on a synthetic speaker corpus"};
  app.require_subcommand(1);

  std::string config_path, checkpoint, trials_path, grid_path, out_dir, pos_sampling, framework;
  std::uint64_t seed = 0;
  std::int64_t epochs = 0;
  std::vector<std::string> sets;

  auto* train = app.add_subcommand("train", "train a model from a config file");
  train->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  auto* train_seed = train->add_option("--seed", seed, "override the run seed");
  train->add_option("--out", out_dir, "override output_dir");
  train->add_option("--set", sets, "extra key=value override, repeatable");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a trial list");
  eval->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  eval->add_option("--trials", trials_path)->required()->check(CLI::ExistingFile);

  auto* res = app.add_subcommand("resume", "continue training from a checkpoint");
  res->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  res->add_option("--pos-sampling", pos_sampling, "ssl, ssps or supervised")
      ->check(CLI::IsMember({"ssl", "ssps", "supervised"}));
  res->add_option("--epochs", epochs, "additional epochs")->required()->check(CLI::NonNegativeNumber);
  res->add_option("--out", out_dir, "output directory (default: next to the checkpoint)");
  res->add_option("--set", sets, "extra key=value override, repeatable");

  auto* sweep = app.add_subcommand("sweep", "run the positive-sampling comparison grid");
  sweep->add_option("--grid", grid_path, "grid file")->required()->check(CLI::ExistingFile);
  sweep->add_option("--out", out_dir, "override the grid output_dir");

  auto* emb = app.add_subcommand("export-embeddings", "write eval-corpus representations as CSV");
  emb->add_option("--checkpoint", checkpoint)->required()->check(CLI::ExistingFile);
  emb->add_option("--out", out_dir, "CSV path")->required();

  auto* corp = app.add_subcommand("export-corpus", "write corpus metadata and trials for a config");
  corp->add_option("--config", config_path, "config file")->check(CLI::ExistingFile);
  corp->add_option("--framework", framework, "use framework defaults instead of a config")
      ->check(CLI::IsMember({"simclr", "dino"}));
  corp->add_option("--out", out_dir, "output directory")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      RunConfig cfg = load_config(config_path);
      if (*train_seed) cfg.seed = seed;
      if (!out_dir.empty()) cfg.output_dir = out_dir;
      for (const auto& [k, v] : split_sets(sets)) set_config_value(cfg, k, v);
      print_artifacts(run_training(cfg));
    } else if (*eval) {
      print_report(run_eval(checkpoint, read_trials(trials_path)));
    } else if (*res) {
      auto ov = split_sets(sets);
      if (!pos_sampling.empty()) ov.emplace_back("pos_sampling", "\"" + pos_sampling + "\"");
      if (out_dir.empty()) out_dir = fs::path(checkpoint).parent_path().string();
      print_artifacts(resume(checkpoint, ov, epochs, out_dir));
    } else if (*sweep) {
      GridSpec g = load_grid(grid_path);
      if (!out_dir.empty()) g.output_dir = out_dir;
      SSPSLAB_CHECK(!g.output_dir.empty(), "sweep needs an output directory (--out or output_dir)");
      const auto rows = run_comparison(g, [](const ComparisonRow& r) {
        std::printf("%-7s %-10s K=%-4lld M=%-2lld seed=%-3llu eer %.4f  min_dcf %.4f  intra %.4f\n",
                    to_string(r.framework), to_string(r.pos_sampling), static_cast<long long>(r.K),
                    static_cast<long long>(r.M), static_cast<unsigned long long>(r.seed),
                    r.report.eer, r.report.min_dcf, r.report.intra_speaker_variance);
        std::fflush(stdout);
      });
      const std::string summary = (fs::path(g.output_dir) / "summary.csv").string();
      write_summary_csv(rows, summary);
      std::printf("summary %s\n", summary.c_str());
    } else if (*emb) {
      const TrainingState st = load_checkpoint(checkpoint);
      const Corpus eval_corpus =
          build_eval_corpus(build_corpus(st.config.corpus), st.config.eval_speakers);
      std::vector<UttId> ids;
      std::vector<Index> spk;
      for (const auto& u : eval_corpus.evaluation_labels()) {
        ids.push_back(u.utterance_id);
        spk.push_back(u.speaker_id);
      }
      export_embeddings(encode_corpus(st.models.teacher().encoder, eval_corpus), ids, spk, out_dir);
    } else if (*corp) {
      SSPSLAB_CHECK(config_path.empty() != framework.empty(),
                    "export-corpus needs exactly one of --config and --framework");
      const RunConfig cfg =
          config_path.empty() ? default_config(parse_framework(framework)) : load_config(config_path);
      fs::create_directories(out_dir);
      const Corpus train_corpus = build_corpus(cfg.corpus);
      const Corpus eval_corpus = build_eval_corpus(train_corpus, cfg.eval_speakers);
      std::ofstream(fs::path(out_dir) / "train_corpus.txt") << [&] {
        std::ostringstream os;
        export_corpus(train_corpus, os);
        return os.str();
      }();
      std::ofstream(fs::path(out_dir) / "eval_corpus.txt") << [&] {
        std::ostringstream os;
        export_corpus(eval_corpus, os);
        return os.str();
      }();
      Rng trial_rng(derive_seed(cfg.corpus.seed, 2));
      write_trials(build_trials(eval_corpus, cfg.n_target_trials, cfg.n_nontarget_trials, trial_rng),
                   (fs::path(out_dir) / "trials.txt").string());
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
