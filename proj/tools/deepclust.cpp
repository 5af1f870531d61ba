#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "json.hpp"

#include "deepclust/pipeline.hpp"

namespace fs = std::filesystem;
using namespace deepclust;

namespace {

struct Paths {
  std::string config;
  std::string out;
  std::string checkpoint;
};

std::string out_dir(const Paths& p, const RunConfig& cfg) {
  const std::string dir = p.out.empty() ? cfg.output_dir : p.out;
  fs::create_directories(dir);
  return dir;
}

void write_json(const fs::path& path, const nlohmann::ordered_json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  os << j.dump(2) << "\n";
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

// Model and training plan for a config; samples only, no labels.
struct Session {
  RunConfig cfg;
  TrainPlan plan;
  Tensor samples;
  std::unique_ptr<Autoencoder> ae;

  explicit Session(const std::string& config_path) : cfg(parse_config(config_path)) {
    plan = TrainPlan::from_config(cfg);
    samples = load_dataset(cfg).samples;
    const Shape s(samples.shape().begin() + 1, samples.shape().end());
    ae = std::make_unique<Autoencoder>(autoencoder_spec(cfg, s), derive_seed(cfg.seed, stream::ae_init));
    ae->validate(plan.features);
  }

  Tensor load(const std::string& checkpoint) { return load_checkpoint(checkpoint, *ae); }

  ClusterModel nearest(const Tensor& centroids) {
    const Tensor z = encode_all(*ae, samples, plan.features);
    return model_from_assignments(z, assign_nearest(z, centroids), centroids.dim(0));
  }
};

int cmd_pretrain(const Paths& p) {
  Session s(p.config);
  const fs::path dir = out_dir(p, s.cfg);
  const PretrainResult r = pretrain(s.plan, *s.ae, s.samples);
  save_checkpoint((dir / "pretrained.ckpt").string(), *s.ae, {});
  nlohmann::ordered_json j = phase_json(r.log);
  if (r.heldout_initial) j["heldout_initial"] = *r.heldout_initial;
  if (r.heldout_final) j["heldout_final"] = *r.heldout_final;
  write_json(dir / "pretrain_log.json", j);
  std::cout << "wrote " << (dir / "pretrained.ckpt").string() << "\n";
  return 0;
}

int cmd_finetune(const Paths& p) {
  Session s(p.config);
  const fs::path dir = out_dir(p, s.cfg);
  if (!p.checkpoint.empty()) s.load(p.checkpoint);
  const ClusterModel init = init_centroids_from_pretrained(*s.ae, s.samples, s.plan.features, s.plan.k,
                                                           derive_seed(s.cfg.seed, stream::centroid_init),
                                                           s.plan.kmeans_restarts);
  const FinetuneResult r = finetune(s.plan, *s.ae, init, s.samples);
  save_checkpoint((dir / "finetuned.ckpt").string(), *s.ae, r.clusters.centroids);
  write_labels((dir / "in_training_assignments.csv").string(), r.clusters.assignments);
  nlohmann::ordered_json j = phase_json(r.log);
  j["converged"] = r.converged;
  j["cluster_update_events"] = r.cluster_updates;
  write_json(dir / "finetune_log.json", j);
  std::cout << "wrote " << (dir / "finetuned.ckpt").string() << "\n";
  return 0;
}

int cmd_cluster(const Paths& p) {
  Session s(p.config);
  const fs::path dir = out_dir(p, s.cfg);
  const Tensor centroids = s.load(p.checkpoint);
  ClusterModel in_training;
  if (!centroids.empty()) {
    if (centroids.dim(0) != s.plan.k) {
      throw std::runtime_error("checkpoint has " + std::to_string(centroids.dim(0)) + " centroids, config k=" +
                               std::to_string(s.plan.k));
    }
    in_training = s.nearest(centroids);
  } else if (s.plan.post_training == PostTraining::none) {
    throw std::runtime_error("post_training = none needs a checkpoint with centroids");
  }
  const ClusterModel m = post_training_recluster(*s.ae, s.samples, s.plan, in_training);
  write_labels((dir / "assignments.csv").string(), m.assignments);
  std::cout << "wrote " << (dir / "assignments.csv").string() << "\n";
  return 0;
}

int cmd_export(const Paths& p, const std::string& csv, const std::string& pca) {
  Session s(p.config);
  const Tensor centroids = s.load(p.checkpoint);
  const Tensor z = encode_all(*s.ae, s.samples, s.plan.features);
  std::vector<std::size_t> assignments;
  if (!centroids.empty()) {
    assignments = assign_nearest(z, centroids);
  } else {
    KmeansOptions opts;
    opts.seed = derive_seed(s.cfg.seed, stream::recluster);
    assignments = kmeans_best_of(z, s.plan.k, s.plan.kmeans_restarts, opts).assignments;
  }
  export_embeddings(z, assignments, csv, pca);
  std::cout << "wrote " << csv << " and " << pca << "\n";
  return 0;
}

int cmd_run(const Paths& p) {
  const RunConfig cfg = parse_config(p.config);
  const Dataset data = load_dataset(cfg);
  const fs::path dir = out_dir(p, cfg);
  const CaseStudyResult r = run_case_study(cfg, data);
  write_json(dir / "report.json", r.report.to_json());
  save_checkpoint((dir / "model.ckpt").string(), *r.model, r.in_training.centroids);
  write_labels((dir / "assignments.csv").string(), r.final_clusters.assignments);
  write_labels((dir / "in_training_assignments.csv").string(), r.in_training.assignments);
  std::cout << "wrote " << (dir / "report.json").string();
  if (r.report.nmi) std::cout << " nmi=" << format_double(*r.report.nmi) << " acc=" << format_double(*r.report.acc);
  std::cout << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_path, const std::string& truth_path, std::size_t pred_col,
                 std::size_t truth_col) {
  const LabelVector pred = load_labels(pred_path, pred_col);
  const LabelVector truth = load_labels(truth_path, truth_col);
  std::cout << "nmi=" << format_double(nmi(pred, truth)) << " acc=" << format_double(acc(pred, truth)) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"deep clustering toolkit"};
  app.require_subcommand(1);
  Paths paths;

  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", paths.config, "key = value config file")->required();
    sub->add_option("--out", paths.out, "output directory (default: output_dir from the config)");
  };
  auto* pre = app.add_subcommand("pretrain", "train the autoencoder on the non-clustering loss");
  with_config(pre);
  auto* fine = app.add_subcommand("finetune", "initialize centroids and fine-tune on the combined loss");
  with_config(fine);
  fine->add_option("--checkpoint", paths.checkpoint, "pretrained checkpoint");
  auto* clus = app.add_subcommand("cluster", "re-cluster the features of a trained model");
  with_config(clus);
  clus->add_option("--checkpoint", paths.checkpoint, "trained checkpoint")->required();
  auto* run = app.add_subcommand("run", "full pipeline; writes report.json, model.ckpt, assignments.csv");
  with_config(run);

  std::string pred, truth;
  std::size_t pred_col = 0, truth_col = 0;
  auto* eval = app.add_subcommand("evaluate", "score predicted clusters against true labels");
  eval->add_option("--pred", pred, "predicted labels CSV")->required();
  eval->add_option("--truth", truth, "true labels CSV")->required();
  eval->add_option("--pred-column", pred_col, "column of --pred holding labels");
  eval->add_option("--truth-column", truth_col, "column of --truth holding labels");

  std::string csv, pca;
  auto* exp = app.add_subcommand("export-embeddings", "write per-sample features and a 2-D PCA projection");
  exp->add_option("--config", paths.config, "key = value config file")->required();
  exp->add_option("--checkpoint", paths.checkpoint, "trained checkpoint")->required();
  exp->add_option("--csv", csv, "embedding CSV path")->required();
  exp->add_option("--pca", pca, "PCA CSV path")->required();

  if (argc > 1 && argv[1][0] != '-') {
    bool known = false;
    for (const CLI::App* sub : app.get_subcommands({})) known = known || sub->get_name() == argv[1];
    if (!known) {
      std::cerr << "error: unknown subcommand '" << argv[1] << "'\n\n" << app.help();
      return 2;
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 2;
  }

  try {
    if (*pre) return cmd_pretrain(paths);
    if (*fine) return cmd_finetune(paths);
    if (*clus) return cmd_cluster(paths);
    if (*run) return cmd_run(paths);
    if (*eval) return cmd_evaluate(pred, truth, pred_col, truth_col);
    if (*exp) return cmd_export(paths, csv, pca);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
