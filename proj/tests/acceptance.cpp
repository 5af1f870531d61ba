// Acceptance gate: one PASS/FAIL line per criterion; exit status 0 iff all pass.

#include <sys/wait.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <regex>
#include <sstream>

#include "CLI11.hpp"

#include "deepclust/pipeline.hpp"
#include "support/gradient_suite.hpp"
#include "support/oracles.hpp"

namespace fs = std::filesystem;
using namespace deepclust;

namespace {

struct Outcome {
  bool pass;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string fmt(double v, int precision = 4) {
  std::ostringstream ss;
  ss << std::setprecision(precision) << v;
  return ss.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// A shipped config with some keys replaced.
RunConfig config_with(const std::string& name, const std::map<std::string, std::string>& overrides) {
  const fs::path path = fs::path(DEEPCLUST_CONFIG_DIR) / name;
  std::istringstream in(slurp(path));
  std::string text, line;
  while (std::getline(in, line)) {
    const auto eq = line.find('=');
    std::string key = eq == std::string::npos ? "" : line.substr(0, eq);
    key.erase(key.find_last_not_of(" \t") + 1);
    key.erase(0, key.find_first_not_of(" \t"));
    if (!overrides.count(key)) text += line + "\n";
  }
  for (const auto& [k, v] : overrides) text += k + " = " + v + "\n";
  return parse_config_text(text, path.string(), path.parent_path());
}

double mean(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / v.size(); }

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + fmt(x);
  return s;
}

Outcome gradient_suite_check() {
  const auto start = Clock::now();
  double worst = 0.0;
  std::string worst_case;
  std::size_t checks = 0;
  for (std::size_t c = 0; c < gradient_suite::layer_cases().size(); ++c) {
    for (std::uint64_t seed = 0; seed < 20; ++seed, ++checks) {
      const double e = gradient_suite::layer_gradient_error(c, seed);
      if (e > worst) worst = e, worst_case = gradient_suite::layer_cases()[c];
    }
  }
  for (std::size_t c = 0; c < gradient_suite::loss_cases().size(); ++c) {
    for (std::uint64_t seed = 0; seed < 20; ++seed, ++checks) {
      const double e = gradient_suite::loss_gradient_error(c, seed);
      if (e > worst) worst = e, worst_case = gradient_suite::loss_cases()[c];
    }
  }
  const double t = seconds_since(start);
  return {worst < 1e-4 && t < 60.0,
          std::to_string(gradient_suite::layer_cases().size()) + " layer kinds + " +
              std::to_string(gradient_suite::loss_cases().size()) + " losses x 20 seeds (" + std::to_string(checks) +
              " checks), max rel err " + fmt(worst, 3) + " (" + worst_case + "), " + fmt(t, 3) + " s"};
}

Outcome distribution_invariants() {
  Rng rng(20240);
  double row_q = 0.0, row_p = 0.0, kl_min = INFINITY, kl_self = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 1 + rng.index(20), k = 1 + rng.index(6), d = 1 + rng.index(5);
    const double nu = std::vector<double>{0.5, 1.0, 2.0, 5.0}[rng.index(4)];
    const double scale = rng.uniform(0.1, 5.0);
    Tensor z({n, d}), mu({k, d});
    for (double& v : z.values()) v = scale * rng.normal();
    for (double& v : mu.values()) v = scale * rng.normal();
    const SoftAssignment q = student_t_assignments(z, mu, nu);
    const TargetDistribution p = target_distribution(q);
    for (std::size_t i = 0; i < n; ++i) {
      double sq = 0.0, sp = 0.0;
      for (std::size_t j = 0; j < k; ++j) sq += q.q(i, j), sp += p.p(i, j);
      row_q = std::max(row_q, std::abs(sq - 1.0));
      row_p = std::max(row_p, std::abs(sp - 1.0));
    }
    kl_min = std::min(kl_min, assignment_hardening_kl(p, q, z, mu, Reduction::sum).loss);
    kl_self = std::max(kl_self, assignment_hardening_kl(TargetDistribution{q.q}, q, z, mu, Reduction::sum).loss);
  }
  return {row_q <= 1e-9 && row_p <= 1e-9 && kl_min >= 0.0 && kl_self < 1e-12,
          "1000 fuzzed inputs: max |row sum - 1| Q " + fmt(row_q, 3) + ", P " + fmt(row_p, 3) + "; min KL(P||Q) " +
              fmt(kl_min, 3) + "; max KL(Q||Q) " + fmt(kl_self, 3)};
}

Outcome hardening_example() {
  const SoftAssignment q{Tensor::matrix(2, 2, {0.9, 0.1, 0.6, 0.4}), 1.0};
  const Tensor p = target_distribution(q).p;
  // direct evaluation: p_ij = (q_ij^2 / f_j) / sum_j' (q_ij'^2 / f_j'), f_j = sum_i q_ij
  const double f0 = 0.9 + 0.6, f1 = 0.1 + 0.4;
  auto direct = [&](double a, double b) {
    const double u = a * a / f0, v = b * b / f1;
    return std::pair{u / (u + v), v / (u + v)};
  };
  const auto [d10, d11] = direct(0.9, 0.1);
  const auto [d20, d21] = direct(0.6, 0.4);
  const double expected[4] = {0.9643, 0.0357, 0.4286, 0.5714};
  const double oracle[4] = {d10, d11, d20, d21};
  double err = 0.0, oracle_err = 0.0;
  for (std::size_t i = 0; i < 4; ++i) {
    err = std::max(err, std::abs(p[i] - expected[i]));
    oracle_err = std::max(oracle_err, std::abs(p[i] - oracle[i]));
  }
  return {err < 1e-3 && oracle_err < 1e-12,
          "p1=[" + fmt(p(0, 0)) + "," + fmt(p(0, 1)) + "] p2=[" + fmt(p(1, 0)) + "," + fmt(p(1, 1)) +
              "], max dev from worked example " + fmt(err, 3) + ", from direct evaluation " + fmt(oracle_err, 3)};
}

Outcome kmeans_oracle() {
  const auto start = Clock::now();
  Rng rng(4242);
  std::size_t hits = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t k = 1 + rng.index(3);
    const std::size_t n = k + rng.index(9 - k);
    Tensor x({n, 1 + rng.index(3)});
    for (double& v : x.values()) v = rng.normal();
    KmeansOptions opts;
    opts.seed = static_cast<std::uint64_t>(inst);
    const ClusterModel m = kmeans_best_of(x, k, 20, opts);
    hits += oracles::partition_inertia(x, m.assignments, k) == oracles::best_partition_inertia(x, k);
  }
  const double t = seconds_since(start);
  return {hits == 100 && t < 30.0,
          std::to_string(hits) + "/100 instances (n<=8, k<=3) at the exhaustive optimum, " + fmt(t, 3) + " s"};
}

Outcome acc_oracle() {
  Rng rng(777);
  std::size_t acc_hits = 0, nmi_hits = 0;
  double nmi_dev = 0.0;
  for (int t = 0; t < 200; ++t) {
    const std::size_t n = 1 + rng.index(40), kp = 1 + rng.index(6), kt = 1 + rng.index(6);
    std::vector<std::size_t> pred(n), truth(n);
    for (auto& v : pred) v = rng.index(kp);
    for (auto& v : truth) v = rng.index(kt);
    const std::vector<long> lp(pred.begin(), pred.end()), lt(truth.begin(), truth.end());
    acc_hits += acc(lp, lt) == oracles::brute_force_acc(pred, truth);

    std::vector<long> pp(6), pt(6);
    std::iota(pp.begin(), pp.end(), 0);
    std::iota(pt.begin(), pt.end(), 0);
    rng.shuffle(pp);
    rng.shuffle(pt);
    std::vector<long> rp, rt;
    for (std::size_t v : pred) rp.push_back(pp[v]);
    for (std::size_t v : truth) rt.push_back(pt[v]);
    const double dev = std::abs(nmi(lp, lt) - nmi(rp, rt));
    nmi_dev = std::max(nmi_dev, dev);
    nmi_hits += dev <= 1e-12;
  }
  return {acc_hits == 200 && nmi_hits == 200,
          "acc == brute force on " + std::to_string(acc_hits) + "/200; NMI relabel-invariant on " +
              std::to_string(nmi_hits) + "/200 (max |diff| " + fmt(nmi_dev, 3) + ")"};
}

Outcome synthetic_end_to_end() {
  std::vector<double> raw, full, secs;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const RunConfig cfg = config_with("blobs.cfg", {{"seed", std::to_string(seed)}});
    const Dataset data = load_dataset(cfg);
    KmeansOptions opts;
    opts.seed = derive_seed(seed, stream::recluster);
    const ClusterModel baseline = kmeans_best_of(data.samples.flattened(), cfg.k, cfg.kmeans_restarts, opts);
    raw.push_back(score(baseline.assignments, *data.labels).nmi);
    const CaseStudyResult r = run_case_study(cfg, data);
    full.push_back(*r.report.nmi);
    secs.push_back(r.report.wall_clock_s);
  }
  const double slowest = *std::max_element(secs.begin(), secs.end());
  return {mean(raw) < mean(full) && mean(full) >= 0.90 && slowest < 300.0,
          "5 seeds: raw k-means NMI mean " + fmt(mean(raw)) + " [" + join(raw) + "], pipeline NMI mean " +
              fmt(mean(full)) + " [" + join(full) + "], slowest seed " + fmt(slowest, 3) + " s"};
}

Outcome mnist_trend() {
  std::vector<double> base, full, secs;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const RunConfig cfg = config_with("mnist.cfg", {{"seed", std::to_string(seed)}});
    const Dataset data = load_dataset(cfg);
    if (data.samples.dim(0) != 1000) throw std::runtime_error("MNIST subset must hold 1000 images");
    const CaseStudyResult r = run_case_study(cfg, data);
    base.push_back(r.report.config["diagnostics"]["pretrain_kmeans"]["nmi"].get<double>());
    full.push_back(*r.report.nmi);
    secs.push_back(r.report.wall_clock_s);
    std::cerr << "  mnist seed " << seed << ": pretrain k-means NMI " << fmt(base.back()) << ", fine-tuned NMI "
              << fmt(full.back()) << ", " << fmt(secs.back(), 3) << " s\n";
  }
  const double gain = mean(full) - mean(base);
  const double slowest = *std::max_element(secs.begin(), secs.end());
  return {gain >= 0.02 && slowest < 600.0,
          "1000 digits 0-4, 3 seeds: pretrain-only NMI mean " + fmt(mean(base)) + " [" + join(base) +
              "], fine-tuned NMI mean " + fmt(mean(full)) + " [" + join(full) + "], gain " + fmt(gain) +
              ", slowest seed " + fmt(slowest, 3) + " s"};
}

Outcome zero_alpha_ablation() {
  const std::vector<std::string> losses = {"assignment_hardening", "kmeans", "balanced_assignments",
                                           "locality_preserving", "group_sparsity", "cluster_classification",
                                           "agglomerative", "assignment_hardening,balanced_assignments"};
  std::size_t runs = 0, differing = 0;
  for (const char* update : {"alternating", "joint_trainable_centroids"}) {
    std::optional<std::string> reference;
    for (const std::string& loss : losses) {
      if (std::string(update) == "joint_trainable_centroids" && loss == "kmeans") continue;
      const RunConfig cfg = config_with("blobs.cfg", {{"alpha_constant", "0"},
                                                      {"clustering_loss", loss},
                                                      {"cluster_update", update},
                                                      {"seed", "11"}});
      const CaseStudyResult r = run_case_study(cfg, load_dataset(cfg));
      std::ostringstream os(std::ios::binary);
      save_checkpoint(os, *r.model, r.in_training.centroids);
      ++runs;
      if (!reference) reference = os.str();
      differing += os.str() != *reference;
    }
  }
  return {differing == 0,
          std::to_string(runs) + " runs over 8 clustering-loss choices x 2 update policies with alpha=0: " +
              std::to_string(differing) + " checkpoints differ from their policy's reference"};
}

struct Proc {
  int code;
  std::string output;
};

Proc shell(const std::string& cmd) {
  FILE* pipe = popen((cmd + " 2>&1").c_str(), "r");
  if (!pipe) throw std::runtime_error("popen failed");
  std::string out;
  char buf[4096];
  while (std::size_t got = std::fread(buf, 1, sizeof buf, pipe)) out.append(buf, got);
  const int status = pclose(pipe);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

Outcome determinism() {
  const fs::path dir = fs::temp_directory_path() / "deepclust_acceptance_determinism";
  fs::remove_all(dir);
  const std::string cfg = (fs::path(DEEPCLUST_CONFIG_DIR) / "blobs.cfg").string();
  for (const char* run : {"a", "b"}) {
    const Proc p = shell(std::string(DEEPCLUST_CLI) + " run --config " + cfg + " --out " + (dir / run).string());
    if (p.code != 0) return {false, "run exited " + std::to_string(p.code) + ": " + p.output};
  }
  const std::regex wall("\"wall_clock_s\": [^\n]*");
  const std::string a = slurp(dir / "a" / "report.json"), b = slurp(dir / "b" / "report.json");
  const std::string sa = std::regex_replace(a, wall, ""), sb = std::regex_replace(b, wall, "");
  const bool stripped_once = sa.size() < a.size() && sb.size() < b.size();
  const bool same = stripped_once && sa == sb;
  fs::remove_all(dir);
  return {same, "two `run` invocations on blobs.cfg: report.json " + std::to_string(a.size()) + " bytes, " +
                    (same ? "byte-identical" : "DIFFERENT") + " outside wall_clock_s"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance gate"};
  std::vector<int> only;
  app.add_option("--only", only, "criteria to run (default: all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite_check},
      {"distribution invariants", distribution_invariants},
      {"hardening example", hardening_example},
      {"k-means oracle", kmeans_oracle},
      {"ACC/Hungarian oracle", acc_oracle},
      {"synthetic end-to-end", synthetic_end_to_end},
      {"MNIST-subset trend", mnist_trend},
      {"alpha=0 ablation", zero_alpha_ablation},
      {"determinism", determinism},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << "criterion " << id << " (" << criteria[i].first << "): " << (o.pass ? "PASS" : "FAIL") << " - "
              << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
