#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "json.hpp"

#include "deepclust/autoencoder.hpp"
#include "deepclust/clustering.hpp"
#include "deepclust/config.hpp"
#include "deepclust/losses.hpp"
#include "deepclust/metrics.hpp"
#include "deepclust/nn/optimizer.hpp"

namespace deepclust {

struct PhasePlan {
  std::string name;  // "pretrain" or "finetune"
  NonClusteringLoss non_clustering = NonClusteringLoss::reconstruction;
  std::vector<ClusteringLoss> clustering;  // empty while pretraining
  AlphaSchedule schedule;
  std::size_t steps = 1;
  std::size_t batch_size = 256;
};

struct AlternatingPolicy {
  std::size_t frequency_p = 50;
  StopRule stop{0.001, 300};
};

struct ClusterUpdatePolicy {
  ClusterUpdate kind = ClusterUpdate::joint_trainable_centroids;
  AlternatingPolicy alternating;  // read only when kind == alternating
};

struct LossSettings {
  double student_t_nu = 1.0;
  Similarity augmentation_similarity = Similarity::negative_squared_distance;
  AugmentationSpec augmentation{0.1, 0};
  std::size_t locality_k_nn = 5;
  std::optional<double> locality_sigma;
  std::optional<std::size_t> group_sparsity_groups;
  double group_sparsity_lambda = 0.1;
  Linkage agglomerative_linkage = Linkage::average;
};

struct TrainPlan {
  std::vector<PhasePlan> phases;
  ClusterUpdatePolicy policy;
  PostTraining post_training = PostTraining::rerun_kmeans;
  nn::SgdSettings optimizer;
  std::uint64_t seed = 0;
  std::size_t k = 2;
  FeatureSelector features;
  LossSettings losses;
  std::size_t log_interval = 10;
  std::size_t target_refresh_interval = 50;
  double finetune_tolerance = 0.001;
  std::size_t kmeans_restarts = 20;

  const PhasePlan* phase(std::string_view name) const {
    for (const PhasePlan& p : phases) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  void validate() const {
    if (phases.empty()) throw std::invalid_argument("train plan has no phases");
    for (std::size_t i = 0; i < phases.size(); ++i) {
      const PhasePlan& p = phases[i];
      if (p.name != "pretrain" && p.name != "finetune") {
        throw std::invalid_argument("train plan: unknown phase '" + p.name + "'");
      }
      if (p.steps < 1) throw std::invalid_argument("train plan: phase " + p.name + " needs at least one step");
      if (p.batch_size < 1) throw std::invalid_argument("train plan: phase " + p.name + " needs a positive batch");
      if (p.name == "pretrain" && !p.clustering.empty()) {
        throw std::invalid_argument("train plan: pretraining uses the non-clustering loss only");
      }
      if (p.name == "finetune" && p.clustering.empty()) {
        throw std::invalid_argument("train plan: fine-tuning needs a clustering loss");
      }
      p.schedule.validate();
      for (std::size_t j = 0; j < i; ++j) {
        if (phases[j].name == p.name) throw std::invalid_argument("train plan: phase " + p.name + " repeated");
      }
    }
    if (phases.size() == 2 && phases[0].name != "pretrain") {
      throw std::invalid_argument("train plan: pretrain must precede finetune");
    }
    if (policy.kind == ClusterUpdate::alternating && policy.alternating.frequency_p < 1) {
      throw std::invalid_argument("train plan: update frequency P must be at least 1");
    }
    if (k < 1) throw std::invalid_argument("train plan: k must be at least 1");
    if (log_interval < 1 || target_refresh_interval < 1 || kmeans_restarts < 1) {
      throw std::invalid_argument("train plan: intervals and restarts must be positive");
    }
  }

  static TrainPlan from_config(const RunConfig& cfg) {
    TrainPlan plan;
    if (cfg.pretrain_steps > 0) {
      plan.phases.push_back({"pretrain", cfg.non_clustering, {}, cfg.alpha, cfg.pretrain_steps, cfg.batch_size});
    }
    plan.phases.push_back(
        {"finetune", cfg.non_clustering, cfg.clustering, cfg.alpha, cfg.finetune_steps, cfg.batch_size});
    plan.policy.kind = cfg.cluster_update;
    plan.policy.alternating.frequency_p = cfg.update_frequency_p;
    plan.policy.alternating.stop = stop_rule_assignment_change(cfg.update_stop_threshold, cfg.update_max_iterations);
    plan.post_training = cfg.post_training;
    plan.optimizer = cfg.optimizer;
    plan.seed = cfg.seed;
    plan.k = cfg.k;
    plan.features = cfg.features;
    plan.losses = {cfg.student_t_nu,          cfg.augmentation_similarity, cfg.augmentation,
                   cfg.locality_k_nn,         cfg.locality_sigma,          cfg.group_sparsity_groups,
                   cfg.group_sparsity_lambda, cfg.agglomerative_linkage};
    plan.log_interval = cfg.log_interval;
    plan.target_refresh_interval = cfg.target_refresh_interval;
    plan.finetune_tolerance = cfg.finetune_tolerance;
    plan.kmeans_restarts = cfg.kmeans_restarts;
    plan.validate();
    return plan;
  }
};

// Named sub-streams of the run seed.
namespace stream {
inline constexpr std::uint64_t ae_init = 1, holdout_split = 2, pretrain_batches = 3, pretrain_augment = 4,
                               holdout_augment = 5, centroid_init = 6, finetune_batches = 7, finetune_augment = 8,
                               recluster = 9;
}

struct PhaseLog {
  std::string name;
  std::size_t interval = 1;
  std::size_t steps_run = 0;
  // Mean over each logging interval; the last interval may be partial.
  std::map<std::string, std::vector<double>> curves;
};

// Aborts a run; names the phase that failed.
struct PhaseError : std::runtime_error {
  PhaseError(std::string phase, const std::string& what)
      : std::runtime_error(phase + ": " + what), phase(std::move(phase)) {}
  std::string phase;
};

// Features for every sample, computed in eval mode in fixed-size chunks.
inline Tensor encode_all(Autoencoder& ae, const Tensor& samples, const FeatureSelector& sel,
                         std::size_t chunk = 256) {
  const std::size_t n = samples.dim(0);
  Tensor out;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += chunk) {
    idx.clear();
    for (std::size_t i = start; i < std::min(n, start + chunk); ++i) idx.push_back(i);
    const Tensor f = ae.extract_features(samples.gather_rows(idx), sel, nn::Mode::eval);
    if (out.empty()) out = Tensor({n, f.dim(1)});
    std::copy(f.values().begin(), f.values().end(), out.values().begin() + static_cast<long>(start * f.dim(1)));
  }
  return out;
}

namespace detail {

// Epoch-wise shuffled minibatches; a short tail is dropped and the order
// reshuffled, so every batch has the same size.
class BatchSampler {
 public:
  BatchSampler(std::vector<std::size_t> pool, std::size_t batch, std::uint64_t seed)
      : pool_(std::move(pool)), batch_(std::min(batch, pool_.size())), rng_(seed) {
    if (pool_.empty()) throw std::invalid_argument("batch sampler: empty sample pool");
    pos_ = pool_.size();
  }

  std::vector<std::size_t> next() {
    if (pos_ + batch_ > pool_.size()) {
      rng_.shuffle(pool_);
      pos_ = 0;
    }
    std::vector<std::size_t> out(pool_.begin() + static_cast<long>(pos_),
                                 pool_.begin() + static_cast<long>(pos_ + batch_));
    pos_ += batch_;
    return out;
  }

 private:
  std::vector<std::size_t> pool_;
  std::size_t batch_;
  Rng rng_;
  std::size_t pos_;
};

inline std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

class CurveLogger {
 public:
  CurveLogger(PhaseLog& log, std::size_t total) : log_(log), total_(total) {}

  void add(const std::string& name, double v) { sums_[name] += v; }

  // Call once per finished step; returns true when an entry was written.
  bool step(std::size_t step) {
    ++count_;
    log_.steps_run = step;
    if (step % log_.interval != 0 && step != total_) return false;
    for (auto& [name, s] : sums_) {
      log_.curves[name].push_back(s / static_cast<double>(count_));
      s = 0.0;
    }
    count_ = 0;
    return true;
  }

  // Flushes a partial interval left by an early stop.
  void finish() {
    if (count_ == 0) return;
    for (auto& [name, s] : sums_) log_.curves[name].push_back(s / static_cast<double>(count_));
    count_ = 0;
  }

 private:
  PhaseLog& log_;
  std::size_t total_;
  std::map<std::string, double> sums_;
  std::size_t count_ = 0;
};

inline void require_finite(double v, std::string_view what, std::size_t step) {
  if (!std::isfinite(v)) {
    throw std::runtime_error("diverged: " + std::string(what) + " is " + std::to_string(v) + " at step " +
                             std::to_string(step));
  }
}

}  // namespace detail

// Inputs a clustering loss may need besides embeddings and centroids.
struct ClusteringContext {
  Tensor inputs;                               // [n, ...] raw batch (locality graph)
  Tensor target;                               // [n, k] target distribution rows
  std::vector<std::size_t> hard_assignments;   // per batch row
  std::vector<MergedPair> merges;              // over batch rows
};

// One clustering loss on a batch of embeddings z [n,d] against centroids
// mu [k,d], batch-mean normalized. Gradients: "features" and, where the loss
// depends on them, "centroids".
inline LossTerm clustering_term(ClusteringLoss loss, const Tensor& z, const Tensor& mu, const ClusteringContext& ctx,
                                const LossSettings& s) {
  LossTerm t;
  const std::size_t n = z.dim(0);
  auto from_embedding = [&](const EmbeddingLoss& e) {
    t.value = e.loss;
    t.grads.emplace("features", e.grad_embeddings);
    t.grads.emplace("centroids", e.grad_centroids);
  };
  switch (loss) {
    case ClusteringLoss::assignment_hardening: {
      const SoftAssignment sa = student_t_assignments(z, mu, s.student_t_nu);
      from_embedding(assignment_hardening_kl(TargetDistribution{ctx.target}, sa, z, mu, Reduction::mean));
      break;
    }
    case ClusteringLoss::kmeans:
      from_embedding(kmeans_loss(z, mu, ctx.hard_assignments, Reduction::mean));
      break;
    case ClusteringLoss::balanced_assignments: {
      const SoftAssignment sa = student_t_assignments(z, mu, s.student_t_nu);
      const LossGrad b = balanced_assignments_loss(sa);
      EmbeddingLoss e = student_t_backward(z, mu, sa, b.grad);
      e.loss = b.loss;
      from_embedding(e);
      break;
    }
    case ClusteringLoss::locality_preserving: {
      if (n < 2) break;
      const GraphSimilarity sim =
          s.locality_sigma ? GraphSimilarity::gaussian(*s.locality_sigma) : GraphSimilarity::binary();
      const LocalityGraph g = knn_graph(ctx.inputs.flattened(), std::min(s.locality_k_nn, n - 1), sim);
      const LossGrad l = locality_preserving_loss(z, g, Reduction::mean);
      t.value = l.loss;
      t.grads.emplace("features", l.grad);
      break;
    }
    case ClusteringLoss::group_sparsity: {
      const auto params = GroupSparsityParams::equal_groups(z.dim(1), s.group_sparsity_groups.value_or(mu.dim(0)),
                                                            s.group_sparsity_lambda);
      const LossGrad l = group_sparsity_loss(z, params, Reduction::mean);
      t.value = l.loss;
      t.grads.emplace("features", l.grad);
      break;
    }
    case ClusteringLoss::cluster_classification: {
      // logits_ij = -||z_i - mu_j||^2, labels are the current hard assignments
      const std::size_t k = mu.dim(0), d = z.dim(1);
      Tensor logits({n, k});
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) logits(i, j) = -squared_distance(z.row(i), mu.row(j));
      }
      const LossGrad c = cluster_classification_loss(logits, ctx.hard_assignments, Reduction::mean);
      Tensor gz = Tensor::like(z), gmu = Tensor::like(mu);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < k; ++j) {
          const double g = c.grad(i, j);
          for (std::size_t a = 0; a < d; ++a) {
            const double diff = z(i, a) - mu(j, a);
            gz(i, a) -= 2.0 * g * diff;
            gmu(j, a) += 2.0 * g * diff;
          }
        }
      }
      t.value = c.loss;
      t.grads.emplace("features", std::move(gz));
      t.grads.emplace("centroids", std::move(gmu));
      break;
    }
    case ClusteringLoss::agglomerative: {
      if (ctx.merges.empty()) break;
      LossGrad a = agglomerative_loss(z, ctx.merges);
      const double scale = 1.0 / static_cast<double>(n);
      t.value = a.loss * scale;
      t.grads.emplace("features", a.grad * scale);
      break;
    }
  }
  if (!t.grads.count("features")) t.grads.emplace("features", Tensor::like(z));
  return t;
}

// Merges whose two sides both meet the batch, re-indexed to batch rows.
inline std::vector<MergedPair> restrict_merges(const std::vector<MergedPair>& merges,
                                               const std::vector<std::size_t>& batch, std::size_t total) {
  std::vector<std::size_t> pos(total, SIZE_MAX);
  for (std::size_t r = 0; r < batch.size(); ++r) pos[batch[r]] = r;
  std::vector<MergedPair> out;
  for (const MergedPair& m : merges) {
    MergedPair r;
    for (std::size_t i : m.a) {
      if (pos[i] != SIZE_MAX) r.a.push_back(pos[i]);
    }
    for (std::size_t i : m.b) {
      if (pos[i] != SIZE_MAX) r.b.push_back(pos[i]);
    }
    if (!r.a.empty() && !r.b.empty()) out.push_back(std::move(r));
  }
  return out;
}

namespace detail {

struct StepTerms {
  double total = 0.0;
  double clustering = 0.0;
  double non_clustering = 0.0;
};

// One optimizer step of alpha * L_c + (1 - alpha) * L_n on a batch. With
// alpha = 0 the clustering losses are not evaluated at all.
inline StepTerms train_step(Autoencoder& ae, nn::SgdMomentum& opt, nn::Parameter* centroids, const Tensor& xb,
                            const PhasePlan& phase, const FeatureSelector& sel, const LossSettings& s, double alpha,
                            Rng& augment_rng, const std::function<ClusteringContext()>& context) {
  const std::size_t n = xb.dim(0);
  const bool selfaug = phase.non_clustering == NonClusteringLoss::self_augmentation;
  const Tensor xin = selfaug ? concat_rows(xb, augment(xb, s.augmentation, augment_rng)) : xb;
  const Autoencoder::FeaturePass pass = ae.forward_features(xin, sel, nn::Mode::train);
  Tensor z = pass.features;
  Tensor z_aug;
  if (selfaug) std::tie(z, z_aug) = split_rows(pass.features, n);

  LossTerm non_clustering;
  if (phase.non_clustering == NonClusteringLoss::reconstruction) {
    const Tensor rec = ae.decoder().forward(pass.latent, nn::Mode::train);
    const LossGrad r = reconstruction_mse(xb, rec);
    const double per_element = 1.0 / static_cast<double>(xb.row_size());
    non_clustering.value = r.loss * per_element;
    non_clustering.grads.emplace("reconstruction", r.grad * per_element);
  } else if (selfaug) {
    const PairGrad p = self_augmentation_loss(z, z_aug, s.augmentation_similarity);
    non_clustering.value = p.loss;
    non_clustering.grads.emplace("features", concat_rows(p.grad_a, p.grad_b));
  }

  LossTerm clustering;
  if (alpha != 0.0 && !phase.clustering.empty()) {
    const ClusteringContext ctx = context();
    for (ClusteringLoss l : phase.clustering) {
      clustering.accumulate(clustering_term(l, z, centroids->value, ctx, s), 1.0);
    }
    if (selfaug) {
      Tensor& g = clustering.grads.at("features");
      g = concat_rows(g, Tensor::like(g));
    }
  }

  const LossTerm total = combine_losses(clustering, non_clustering, alpha);
  Tensor encoder_grad;
  if (auto it = total.grads.find("reconstruction"); it != total.grads.end()) {
    encoder_grad = ae.decoder().backward(it->second);
  }
  std::map<std::size_t, Tensor> injections;
  if (auto it = total.grads.find("features"); it != total.grads.end()) {
    injections = ae.feature_injections(pass, it->second);
  }
  if (!encoder_grad.empty() || !injections.empty()) ae.encoder().backward(encoder_grad, injections);
  if (auto it = total.grads.find("centroids"); it != total.grads.end() && centroids) {
    centroids->grad += it->second;
  }
  opt.step();
  return {total.value, clustering.value, non_clustering.value};
}

}  // namespace detail

struct PretrainResult {
  PhaseLog log;
  std::optional<double> heldout_initial;  // unset when the phase is absent
  std::optional<double> heldout_final;
};

// Non-clustering loss of the held-out split, in eval mode.
inline double heldout_loss(Autoencoder& ae, const Tensor& x, const PhasePlan& phase, const FeatureSelector& sel,
                           const LossSettings& s, std::uint64_t seed) {
  if (phase.non_clustering == NonClusteringLoss::reconstruction) {
    const Tensor rec = ae.reconstruct(x, nn::Mode::eval);
    return reconstruction_mse(x, rec).loss / static_cast<double>(x.row_size());
  }
  Rng rng(seed);
  const Tensor a = ae.extract_features(x, sel, nn::Mode::eval);
  const Tensor b = ae.extract_features(augment(x, s.augmentation, rng), sel, nn::Mode::eval);
  return self_augmentation_loss(a, b, s.augmentation_similarity).loss;
}

// Trains on 90% of the samples with the non-clustering loss alone; the other
// 10% only tracks the held-out loss. Labels never enter.
inline PretrainResult pretrain(const TrainPlan& plan, Autoencoder& ae, const Tensor& samples) {
  PretrainResult result;
  result.log.name = "pretrain";
  result.log.interval = plan.log_interval;
  const PhasePlan* phase = plan.phase("pretrain");
  if (!phase || phase->steps == 0) return result;
  if (phase->non_clustering == NonClusteringLoss::none) {
    throw std::invalid_argument("pretrain: no non-clustering loss configured");
  }
  const std::size_t n = samples.dim(0);
  std::vector<std::size_t> order = detail::iota(n);
  Rng split_rng(derive_seed(plan.seed, stream::holdout_split));
  split_rng.shuffle(order);
  const std::size_t held = n >= 10 ? n / 10 : 0;
  const std::vector<std::size_t> held_idx(order.begin(), order.begin() + static_cast<long>(held));
  const std::vector<std::size_t> train_idx(order.begin() + static_cast<long>(held), order.end());
  const Tensor held_x = held ? samples.gather_rows(held_idx) : Tensor();
  const std::uint64_t held_seed = derive_seed(plan.seed, stream::holdout_augment);
  auto held_loss = [&] { return heldout_loss(ae, held_x, *phase, plan.features, plan.losses, held_seed); };

  nn::SgdMomentum opt(ae.parameters(), plan.optimizer);
  detail::BatchSampler sampler(train_idx, phase->batch_size, derive_seed(plan.seed, stream::pretrain_batches));
  Rng augment_rng(derive_seed(plan.seed, stream::pretrain_augment));
  detail::CurveLogger logger(result.log, phase->steps);
  if (held) {
    result.heldout_initial = held_loss();
    detail::require_finite(*result.heldout_initial, "held-out loss", 0);
  }
  for (std::size_t step = 1; step <= phase->steps; ++step) {
    const Tensor xb = samples.gather_rows(sampler.next());
    const detail::StepTerms t =
        detail::train_step(ae, opt, nullptr, xb, *phase, plan.features, plan.losses, 0.0, augment_rng, {});
    detail::require_finite(t.total, "loss", step);
    logger.add("loss", t.total);
    if (logger.step(step) && held) {
      const double h = held_loss();
      detail::require_finite(h, "held-out loss", step);
      result.log.curves["heldout"].push_back(h);
      result.heldout_final = h;
    }
  }
  return result;
}

// k-means (k-means++ seeding, best of `restarts` by inertia) on the encoded
// features; the centroids seed the clustering layer.
inline ClusterModel init_centroids_from_pretrained(Autoencoder& ae, const Tensor& samples, const FeatureSelector& sel,
                                                   std::size_t k, std::uint64_t seed, std::size_t restarts = 20) {
  const Tensor z = encode_all(ae, samples, sel);
  KmeansOptions opts;
  opts.seed = seed;
  return kmeans_best_of(z, k, restarts, opts);
}

struct FinetuneResult {
  PhaseLog log;
  ClusterModel clusters;            // in-training centroids and assignments
  std::size_t steps_run = 0;
  std::size_t cluster_updates = 0;  // hard update events (alternating policy)
  std::size_t refreshes = 0;        // target/assignment refreshes after step 0
  bool converged = false;           // stopped by the assignment-change tolerance
  std::vector<double> assignment_change;  // fraction changed at each refresh
};

// Fine-tunes encoder, decoder, and (joint policy) centroids on the combined
// loss. Hard assignments and the target distribution are refreshed every
// target_refresh_interval steps; under alternating(P) a k-means update from
// the current centroids runs every P steps as well. Training stops when fewer
// than finetune_tolerance of the hard assignments change between refreshes.
inline FinetuneResult finetune(const TrainPlan& plan, Autoencoder& ae, const ClusterModel& init,
                               const Tensor& samples) {
  const PhasePlan* phase = plan.phase("finetune");
  if (!phase) throw std::invalid_argument("finetune: plan has no finetune phase");
  if (init.centroids.empty() || init.k() != plan.k) {
    throw std::invalid_argument("finetune: centroids must be initialized with k=" + std::to_string(plan.k));
  }
  const std::size_t n = samples.dim(0);
  const bool alternating = plan.policy.kind == ClusterUpdate::alternating;
  const std::size_t P = plan.policy.alternating.frequency_p;
  const auto uses = [&](ClusteringLoss l) {
    return std::find(phase->clustering.begin(), phase->clustering.end(), l) != phase->clustering.end();
  };

  FinetuneResult result;
  result.log.name = "finetune";
  result.log.interval = plan.log_interval;
  nn::Parameter centroids("centroids", init.centroids, /*decay=*/false);
  std::vector<nn::Parameter*> params = ae.parameters();
  if (!alternating) params.push_back(&centroids);
  nn::SgdMomentum opt(params, plan.optimizer);
  detail::BatchSampler sampler(detail::iota(n), phase->batch_size, derive_seed(plan.seed, stream::finetune_batches));
  Rng augment_rng(derive_seed(plan.seed, stream::finetune_augment));

  std::vector<std::size_t> assignments;
  Tensor target;
  std::vector<MergedPair> merges;
  auto refresh = [&](std::size_t step) -> std::optional<double> {
    const Tensor z = encode_all(ae, samples, plan.features);
    if (alternating && step > 0 && step % P == 0) {
      KmeansOptions opts;
      opts.init = KmeansInit::provided;
      opts.initial_centroids = centroids.value;
      opts.stop = plan.policy.alternating.stop;
      opts.transfer_refinement = false;
      centroids.value = kmeans(z, plan.k, opts).centroids;
      ++result.cluster_updates;
    }
    std::vector<std::size_t> fresh = assign_nearest(z, centroids.value);
    std::optional<double> changed;
    if (!assignments.empty()) {
      std::size_t c = 0;
      for (std::size_t i = 0; i < n; ++i) c += fresh[i] != assignments[i];
      changed = static_cast<double>(c) / static_cast<double>(n);
    }
    assignments = std::move(fresh);
    if (uses(ClusteringLoss::assignment_hardening)) {
      target = target_distribution(student_t_assignments(z, centroids.value, plan.losses.student_t_nu)).p;
    }
    if (uses(ClusteringLoss::agglomerative)) {
      // the latest merge step only
      const auto history = agglomerative(z, plan.k, plan.losses.agglomerative_linkage).merges;
      merges.clear();
      if (!history.empty()) merges.push_back(history.back());
    }
    return changed;
  };

  refresh(0);
  detail::CurveLogger logger(result.log, phase->steps);
  for (std::size_t step = 1; step <= phase->steps; ++step) {
    const std::vector<std::size_t> batch = sampler.next();
    const Tensor xb = samples.gather_rows(batch);
    const double alpha = alpha_at(phase->schedule, "finetune", step - 1);
    auto context = [&] {
      ClusteringContext ctx;
      ctx.inputs = xb;
      if (!target.empty()) ctx.target = target.gather_rows(batch);
      for (std::size_t i : batch) ctx.hard_assignments.push_back(assignments[i]);
      if (!merges.empty()) ctx.merges = restrict_merges(merges, batch, n);
      return ctx;
    };
    const detail::StepTerms t = detail::train_step(ae, opt, &centroids, xb, *phase, plan.features, plan.losses,
                                                   alpha, augment_rng, context);
    detail::require_finite(t.total, "loss", step);
    logger.add("loss", t.total);
    logger.add("clustering", t.clustering);
    logger.add("non_clustering", t.non_clustering);
    logger.add("alpha", alpha);
    logger.step(step);
    result.steps_run = step;
    if (step % plan.target_refresh_interval == 0 || (alternating && step % P == 0)) {
      const std::optional<double> changed = refresh(step);
      ++result.refreshes;
      result.assignment_change.push_back(*changed);
      if (*changed < plan.finetune_tolerance) {
        result.converged = true;
        break;
      }
    }
  }
  logger.finish();

  const Tensor z = encode_all(ae, samples, plan.features);
  result.clusters.centroids = centroids.value;
  result.clusters.assignments = assign_nearest(z, centroids.value);
  result.clusters.inertia = detail::inertia_of(z, centroids.value, result.clusters.assignments);
  return result;
}

inline ClusterModel model_from_assignments(const Tensor& z, std::vector<std::size_t> assignments, std::size_t k) {
  ClusterModel m;
  m.centroids = Tensor({k, z.dim(1)});
  m.assignments = std::move(assignments);
  std::vector<std::size_t> counts(k, 0);
  detail::recompute_means(z, m.assignments, m.centroids, counts);
  m.inertia = detail::inertia_of(z, m.centroids, m.assignments);
  return m;
}

// Clusters the final features from scratch; post_training = none returns the
// in-training model unchanged.
inline ClusterModel post_training_recluster(Autoencoder& ae, const Tensor& samples, const TrainPlan& plan,
                                            const ClusterModel& in_training) {
  switch (plan.post_training) {
    case PostTraining::none:
      return in_training;
    case PostTraining::rerun_kmeans: {
      KmeansOptions opts;
      opts.seed = derive_seed(plan.seed, stream::recluster);
      return kmeans_best_of(encode_all(ae, samples, plan.features), plan.k, plan.kmeans_restarts, opts);
    }
    case PostTraining::rerun_agglomerative: {
      const Tensor z = encode_all(ae, samples, plan.features);
      return model_from_assignments(z, agglomerative(z, plan.k, plan.losses.agglomerative_linkage).assignments(),
                                    plan.k);
    }
  }
  throw std::invalid_argument("post_training_recluster: unknown option");
}

// Checkpoint: the autoencoder's DCAE stream followed by
//   "CENT" | k u32 | d u32 | f64 LE x k*d
inline void save_checkpoint(std::ostream& os, Autoencoder& ae, const Tensor& centroids) {
  ae.save(os);
  binary::write_magic(os, "CENT");
  binary::write_u32(os, static_cast<std::uint32_t>(centroids.empty() ? 0 : centroids.dim(0)));
  binary::write_u32(os, static_cast<std::uint32_t>(centroids.empty() ? 0 : centroids.dim(1)));
  for (double v : centroids.values()) binary::write_f64(os, v);
  if (!os) throw std::runtime_error("checkpoint: write failed");
}

inline void save_checkpoint(const std::string& path, Autoencoder& ae, const Tensor& centroids) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  save_checkpoint(os, ae, centroids);
}

// Loads weights into `ae` and returns the centroids (empty if none saved).
inline Tensor load_checkpoint(std::istream& is, Autoencoder& ae) {
  ae.load(is);
  binary::expect_magic(is, "CENT");
  const std::uint32_t k = binary::read_u32(is), d = binary::read_u32(is);
  if ((k == 0) != (d == 0)) throw std::runtime_error("checkpoint: malformed centroid block");
  if (k == 0) return {};
  Tensor c({k, d});
  for (double& v : c.values()) v = binary::read_f64(is);
  if (is.peek() != std::char_traits<char>::eof()) throw std::runtime_error("checkpoint: trailing bytes");
  return c;
}

inline Tensor load_checkpoint(const std::string& path, Autoencoder& ae) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint " + path);
  return load_checkpoint(is, ae);
}

struct Scores {
  double nmi = 0.0;
  double acc = 0.0;
};

inline Scores score(const std::vector<std::size_t>& pred, const LabelVector& truth) {
  const std::vector<long> p(pred.begin(), pred.end());
  return {nmi(p, truth), acc(p, truth)};
}

inline nlohmann::ordered_json phase_json(const PhaseLog& p) {
  nlohmann::ordered_json j;
  j["interval"] = p.interval;
  j["steps"] = p.steps_run;
  for (const auto& [name, curve] : p.curves) j[name] = curve;
  return j;
}

struct RunReport {
  std::optional<double> nmi, acc;  // unset without ground truth
  std::vector<PhaseLog> phases;
  std::vector<std::size_t> cluster_sizes;
  std::uint64_t seed = 0;
  nlohmann::ordered_json config;
  double wall_clock_s = 0.0;

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["nmi"] = nmi ? nlohmann::ordered_json(*nmi) : nlohmann::ordered_json(nullptr);
    j["acc"] = acc ? nlohmann::ordered_json(*acc) : nlohmann::ordered_json(nullptr);
    nlohmann::ordered_json phases_json = nlohmann::ordered_json::object();
    for (const PhaseLog& p : phases) phases_json[p.name] = phase_json(p);
    j["phase_losses"] = phases_json;
    j["cluster_sizes"] = cluster_sizes;
    j["seed"] = seed;
    j["config"] = config;
    j["wall_clock_s"] = wall_clock_s;
    return j;
  }
};

struct CaseStudyResult {
  RunReport report;
  std::unique_ptr<Autoencoder> model;
  ClusterModel in_training;
  ClusterModel final_clusters;
};

// pretrain -> init centroids -> fine-tune -> re-cluster -> metrics. Training
// sees only the sample tensor; labels are read for the final scores.
inline CaseStudyResult run_case_study(const RunConfig& cfg, const Dataset& data) {
  const auto started = std::chrono::steady_clock::now();
  auto in_phase = [](const char* name, auto&& f) -> decltype(f()) {
    try {
      return f();
    } catch (const PhaseError&) {
      throw;
    } catch (const std::exception& e) {
      throw PhaseError(name, e.what());
    }
  };
  const Tensor& samples = data.samples;
  const TrainPlan plan = in_phase("plan", [&] { return TrainPlan::from_config(cfg); });
  Shape sample_shape(samples.shape().begin() + 1, samples.shape().end());
  CaseStudyResult out;
  out.model = in_phase("build", [&] {
    auto ae = std::make_unique<Autoencoder>(autoencoder_spec(cfg, sample_shape), derive_seed(cfg.seed, stream::ae_init));
    ae->validate(plan.features);
    return ae;
  });
  Autoencoder& ae = *out.model;

  const PretrainResult pre = in_phase("pretrain", [&] { return pretrain(plan, ae, samples); });
  const ClusterModel init = in_phase("init_centroids", [&] {
    return init_centroids_from_pretrained(ae, samples, plan.features, plan.k, derive_seed(cfg.seed, stream::centroid_init),
                                          plan.kmeans_restarts);
  });
  FinetuneResult fine = in_phase("finetune", [&] { return finetune(plan, ae, init, samples); });
  out.in_training = fine.clusters;
  out.final_clusters = in_phase("post_training", [&] { return post_training_recluster(ae, samples, plan, fine.clusters); });

  RunReport& r = out.report;
  r.seed = cfg.seed;
  if (plan.phase("pretrain")) r.phases.push_back(pre.log);
  r.phases.push_back(fine.log);
  r.cluster_sizes = out.final_clusters.cluster_sizes();

  nlohmann::ordered_json settings = nlohmann::ordered_json::object();
  for (const auto& [key, value] : cfg.echo) settings[key] = value;
  nlohmann::ordered_json diag;
  diag["samples"] = samples.dim(0);
  diag["feature_dim"] = ae.feature_dim(plan.features);
  if (pre.heldout_initial) {
    diag["heldout_initial"] = *pre.heldout_initial;
    diag["heldout_final"] = pre.heldout_final ? *pre.heldout_final : *pre.heldout_initial;
  }
  diag["init_inertia"] = init.inertia;
  diag["finetune_steps_run"] = fine.steps_run;
  diag["finetune_converged"] = fine.converged;
  diag["cluster_update_events"] = fine.cluster_updates;
  diag["assignment_change"] = fine.assignment_change;
  diag["in_training_cluster_sizes"] = fine.clusters.cluster_sizes();
  if (data.labels) {
    const Scores s_init = score(init.assignments, *data.labels);
    const Scores s_train = score(fine.clusters.assignments, *data.labels);
    const Scores s_final = score(out.final_clusters.assignments, *data.labels);
    diag["pretrain_kmeans"] = {{"nmi", s_init.nmi}, {"acc", s_init.acc}};
    diag["in_training"] = {{"nmi", s_train.nmi}, {"acc", s_train.acc}};
    r.nmi = s_final.nmi;
    r.acc = s_final.acc;
  }
  r.config["settings"] = settings;
  r.config["loss_normalization"] = "batch_mean";
  r.config["reconstruction_normalization"] = "per_element_mean";
  r.config["diagnostics"] = diag;
  r.wall_clock_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return out;
}

}  // namespace deepclust
