// Acceptance checks. One PASS/FAIL line per criterion; exit status is
// nonzero when any criterion fails.

#include "sspslab/experiment.hpp"
#include "sspslab/trainer.hpp"

#include "oracles.hpp"
#include "test_util.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

using namespace sspslab;
using namespace sspslab::testing;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kGradTol = 1e-4;
constexpr double kGradSeconds = 10.0;
constexpr int kGradInstancesPerLoss = 12;
constexpr double kMetricTol = 1e-9;
constexpr double kMetricSeconds = 30.0;
constexpr int kMetricSets = 100;
constexpr std::size_t kMaxTrials = 10000;
constexpr int kKmeansRuns = 50;
constexpr double kTraceSlack = 1e-12;  // float rounding in the mean cosine
constexpr double kComparisonSeconds = 600.0;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

int failures = 0;

void report(int id, const char* name, bool ok, const std::string& detail) {
  std::printf("[%s] %d %s: %s\n", ok ? "PASS" : "FAIL", id, name, detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

// Random small architecture, every width and the batch at most 16 / 8.
RunConfig random_model_config(Framework fw, Rng& rng) {
  RunConfig c = tiny_config(fw);
  auto dim = [&] { return 2 + static_cast<Index>(rng.index(15)); };
  c.corpus.input_dim = dim();
  c.encoder_hidden = {dim()};
  c.repr_dim = dim();
  c.projector_hidden = {dim()};
  c.bottleneck_dim = dim();
  c.emb_dim = dim();
  return c;
}

double max_param_error(Branch& br, const std::function<double()>& loss,
                       const std::vector<Matrix>& grads) {
  double worst = 0.0;
  auto params = br.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    worst = std::max(worst, fd_relative_error(loss, *params[i], grads[i]));
  return worst;
}

void criterion_gradients() {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  int instances = 0;
  for (int k = 0; k < kGradInstancesPerLoss; ++k, ++instances) {
    const RunConfig c = random_model_config(Framework::simclr, rng);
    Branch br = build_branch(c, rng);
    const Index b = 1 + static_cast<Index>(rng.index(8));
    const Matrix xa = random_matrix(b, c.corpus.input_dim, rng);
    const Matrix xp = random_matrix(b, c.corpus.input_dim, rng);
    const SimclrParams p{0.05 + rng.uniform()};
    auto loss = [&] { return simclr_loss(forward(br, xa).embedding, forward(br, xp).embedding, p).loss; };
    BranchCache ca, cp;
    const auto za = forward(br, xa, &ca), zp = forward(br, xp, &cp);
    const LossResult r = simclr_loss(za.embedding, zp.embedding, p);
    std::vector<Matrix> g = backward(br, ca, r.grads[0]);
    accumulate(g, backward(br, cp, r.grads[1]));
    worst = std::max(worst, max_param_error(br, loss, g));
  }
  for (int k = 0; k < kGradInstancesPerLoss; ++k, ++instances) {
    const RunConfig c = random_model_config(Framework::dino, rng);
    Branch br = build_branch(c, rng);
    const Index b = 1 + static_cast<Index>(rng.index(8));
    std::vector<Matrix> views, teacher;
    for (int v = 0; v < 6; ++v) views.push_back(random_matrix(b, c.corpus.input_dim, rng));
    for (int v = 0; v < 2; ++v) teacher.push_back(random_matrix(b, c.emb_dim, rng, 0.2));
    DinoParams p;
    p.center = random_matrix(1, c.emb_dim, rng, 0.05);
    auto loss = [&] {
      std::vector<Matrix> s;
      for (const auto& v : views) s.push_back(forward(br, v).embedding);
      return dino_loss(s, teacher, p).loss;
    };
    std::vector<BranchCache> caches(6);
    std::vector<Matrix> s;
    for (std::size_t v = 0; v < 6; ++v) s.push_back(forward(br, views[v], &caches[v]).embedding);
    const LossResult r = dino_loss(s, teacher, p);
    std::vector<Matrix> g;
    for (std::size_t v = 0; v < 6; ++v) accumulate(g, backward(br, caches[v], r.grads[v]));
    worst = std::max(worst, max_param_error(br, loss, g));
  }
  const double secs = seconds_since(t0);
  report(1, "gradient fidelity", worst < kGradTol && secs < kGradSeconds,
         std::to_string(instances) + " instances (SimCLR + DINO), max rel err " +
             fmt("%.3e", worst) + " (< 1e-4), " + fmt("%.2f s", secs) + " (< 10 s)");
}

void criterion_metrics() {
  const auto t0 = Clock::now();
  Rng rng(202);
  double worst_eer = 0.0, worst_dcf = 0.0;
  for (int k = 0; k < kMetricSets; ++k) {
    ScoredTrials st;
    const std::size_t n = 2 + rng.index(kMaxTrials - 1);
    const bool coarse = rng.index(2) == 0;
    const double shift = 2 * rng.uniform();
    for (std::size_t i = 0; i < n; ++i) {
      const bool tgt = i < 2 ? i == 0 : rng.index(2) == 0;
      double s = rng.normal() + (tgt ? shift : 0.0);
      if (coarse) s = std::round(s * 8) / 8;
      st.scores.push_back(s);
      st.labels.push_back(tgt);
    }
    worst_eer = std::max(worst_eer, std::abs(compute_eer(st) - brute_force_eer(st)));
    worst_dcf = std::max(worst_dcf, std::abs(compute_min_dcf(st) - brute_force_min_dcf(st)));
  }
  const double secs = seconds_since(t0);
  report(2, "metric oracles", worst_eer <= kMetricTol && worst_dcf <= kMetricTol && secs < kMetricSeconds,
         std::to_string(kMetricSets) + " trial sets, max |EER diff| " + fmt("%.2e", worst_eer) +
             ", max |minDCF diff| " + fmt("%.2e", worst_dcf) + " (<= 1e-9), " +
             fmt("%.2f s", secs) + " (< 30 s)");
}

void criterion_kmeans() {
  Rng rng(303);
  int monotone = 0, argmax = 0;
  for (int run = 0; run < kKmeansRuns; ++run) {
    const Index n = 20 + static_cast<Index>(rng.index(200));
    const Index d = 2 + static_cast<Index>(rng.index(15));
    ReferenceQueue q(static_cast<std::size_t>(n), d);
    const Matrix pts = random_matrix(n, d, rng);
    for (Index i = 0; i < n; ++i) q.enqueue(i, pts.row(i));
    SspsConfig cfg;
    cfg.K = 1 + static_cast<Index>(rng.index(static_cast<std::size_t>(n / 2)));
    cfg.seed = static_cast<std::uint64_t>(run);
    cfg.kmeans_iterations = 1 + static_cast<int>(rng.index(20));
    const ClusterState st = cluster(q, cfg);
    bool mono = true;
    for (std::size_t i = 1; i < st.objective_trace.size(); ++i)
      mono = mono && st.objective_trace[i] >= st.objective_trace[i - 1] - kTraceSlack;
    monotone += mono;
    const Matrix sims = normalize_rows(pts) * st.centroids.transpose();
    bool ok = true;
    for (Index i = 0; i < n; ++i) {
      const double own = sims(i, st.assignment[static_cast<std::size_t>(i)]);
      ok = ok && own >= sims.row(i).maxCoeff();
    }
    argmax += ok;
  }
  report(3, "k-means soundness", monotone == kKmeansRuns && argmax == kKmeansRuns,
         std::to_string(monotone) + "/" + std::to_string(kKmeansRuns) + " monotone traces, " +
             std::to_string(argmax) + "/" + std::to_string(kKmeansRuns) + " argmax audits");
}

const ComparisonMean& find_mean(const std::vector<ComparisonMean>& means, Framework fw,
                                PosSampling ps, Index m = 0) {
  for (const auto& x : means)
    if (x.framework == fw && x.pos_sampling == ps && (ps != PosSampling::ssps || x.M == m)) return x;
  throw Error("missing comparison row");
}

void criteria_comparison() {
  const auto t0 = Clock::now();
  GridSpec g;
  g.frameworks = {Framework::simclr, Framework::dino};
  g.seeds = {1, 2, 3};
  g.ks = {0};
  g.ms = {0, 1};
  const auto rows = run_comparison(g);
  const double secs = seconds_since(t0);
  const auto means = average_over_seeds(rows);

  std::printf("      3-seed means      EER       intra_var\n");
  for (const auto& m : means)
    std::printf("      %-7s %-10s M=%lld  %.4f    %.4f   (K=%lld, fallback %.3f)\n",
                to_string(m.framework), to_string(m.pos_sampling), static_cast<long long>(m.M),
                m.eer, m.intra, static_cast<long long>(m.K), m.fallback_rate);

  bool ok4 = secs < kComparisonSeconds, ok5 = true, ok6 = true;
  std::string d4, d5, d6;
  for (Framework fw : g.frameworks) {
    const auto& ssl = find_mean(means, fw, PosSampling::ssl);
    const auto& sup = find_mean(means, fw, PosSampling::supervised);
    ok4 = ok4 && sup.eer < ssl.eer;
    d4 += std::string(to_string(fw)) + " sup " + fmt("%.4f", sup.eer) + " vs ssl " + fmt("%.4f", ssl.eer) + "; ";
    for (Index m : g.ms) {
      const auto& sp = find_mean(means, fw, PosSampling::ssps, m);
      const bool e = sp.eer < ssl.eer, v = sp.intra < ssl.intra;
      ok5 = ok5 && e && v;
      d5 += std::string(to_string(fw)) + " M=" + std::to_string(m) + " EER " + (e ? "lower" : "NOT lower") +
            ", intra " + (v ? "lower" : "NOT lower") + "; ";
      const bool s = sup.eer <= sp.eer && sp.eer <= ssl.eer;
      ok6 = ok6 && s;
      d6 += std::string(to_string(fw)) + " M=" + std::to_string(m) + " " + fmt("%.4f", sup.eer) + " <= " +
            fmt("%.4f", sp.eer) + " <= " + fmt("%.4f", ssl.eer) + (s ? " holds" : " violated") + "; ";
    }
  }
  report(4, "supervised beats SSL", ok4, d4 + fmt("grid %.1f s (< 600 s)", secs));
  report(5, "SSPS beats SSL (EER and intra variance)", ok5, d5);
  report(6, "sandwich supervised <= SSPS <= SSL", ok6, d6);
}

bool same_params(const TrainingState& a, const TrainingState& b) {
  const auto pa = a.models.student().parameters(), pb = b.models.student().parameters();
  for (std::size_t i = 0; i < pa.size(); ++i)
    if (*pa[i] != *pb[i]) return false;
  const auto ta = a.models.teacher().parameters(), tb = b.models.teacher().parameters();
  for (std::size_t i = 0; i < ta.size(); ++i)
    if (*ta[i] != *tb[i]) return false;
  return a.center.size() == b.center.size() && (a.center.size() == 0 || a.center == b.center);
}

void criterion_fallback() {
  bool ok = true;
  std::string detail;
  for (Framework fw : {Framework::simclr, Framework::dino}) {
    RunConfig ssl = default_config(fw);
    ssl.output_dir = "";
    RunConfig ssps = ssl;
    ssps.pos_sampling = PosSampling::ssps;
    ssps.ssps.enable_epoch = 0;
    Trainer a(ssl), b(ssps);
    a.run_epoch();
    b.run_epoch();  // Q-hat fills; sampler inert
    a.begin_epoch();
    b.begin_epoch();
    a.state_mut().positive_queue.clear();
    b.state_mut().positive_queue.clear();
    bool same = b.ssps_active();
    for (int s = 0; s < 3 && same; ++s) {
      b.state_mut().positive_queue.clear();
      a.state_mut().positive_queue.clear();
      same = a.step() == b.step() && same_params(a.state(), b.state()) &&
             a.state().data_rng == b.state().data_rng;
    }
    ok = ok && same;
    detail += std::string(to_string(fw)) + (same ? " identical" : " DIFFERS") + "; ";
  }
  report(7, "fallback equivalence", ok, detail + "3 steps each with Q' emptied");
}

void criterion_determinism(const fs::path& root) {
  bool ok = true;
  std::string detail;
  for (Framework fw : {Framework::simclr, Framework::dino}) {
    RunConfig c = default_config(fw);
    c.pos_sampling = PosSampling::ssps;
    c.epochs_total = 12;
    c.ssps.enable_epoch = 6;
    c.eval_every = 3;
    c.output_dir = (root / ("det_" + std::string(to_string(fw)))).string();
    std::string ckpt[2], log[2];
    for (int r = 0; r < 2; ++r) {
      fs::remove_all(c.output_dir);
      const RunArtifacts art = run_training(c);
      ckpt[r] = slurp(art.checkpoints.back());
      log[r] = slurp(art.metrics_log);
    }
    const bool same = ckpt[0] == ckpt[1] && log[0] == log[1] && !log[0].empty();
    ok = ok && same;
    detail += std::string(to_string(fw)) + (same ? " byte-identical" : " DIFFERS") + "; ";
  }
  report(8, "determinism", ok, detail + "ssps runs, 12 epochs, checkpoints + metrics logs");
}

void criterion_split_run(const fs::path& root) {
  bool ok = true;
  std::string detail;
  for (Framework fw : {Framework::simclr, Framework::dino}) {
    RunConfig c = default_config(fw);
    c.pos_sampling = PosSampling::ssps;
    c.epochs_total = 10;
    c.schedule_epochs = 10;
    c.epochs_warmup = std::min<std::int64_t>(c.epochs_warmup, 2);
    c.ssps.enable_epoch = 3;
    c.output_dir = (root / ("split_" + std::string(to_string(fw)))).string();

    fs::remove_all(c.output_dir);
    RunConfig first = c;
    first.epochs_total = 5;
    const RunArtifacts a = run_training(first);
    const RunArtifacts b = resume(a.checkpoints.back(), {}, 5, c.output_dir);
    const std::string split = slurp(b.checkpoints.back());

    fs::remove_all(c.output_dir);
    const RunArtifacts s = run_training(c);
    const bool same = split == slurp(s.checkpoints.back());
    ok = ok && same;
    detail += std::string(to_string(fw)) + (same ? " bit-exact" : " DIFFERS") + "; ";
  }
  report(9, "split-run equivalence", ok, detail + "5 + 5 vs 10 epochs, ssps from epoch 3");
}

}  // namespace

int main() {
  const fs::path root = fs::temp_directory_path() / "sspslab_acceptance";
  fs::remove_all(root);
  fs::create_directories(root);
  try {
    criterion_gradients();
    criterion_metrics();
    criterion_kmeans();
    criteria_comparison();
    criterion_fallback();
    criterion_determinism(root);
    criterion_split_run(root);
  } catch (const std::exception& e) {
    std::printf("[FAIL] acceptance aborted: %s\n", e.what());
    return 2;
  }
  fs::remove_all(root);
  std::printf("%d of 9 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
