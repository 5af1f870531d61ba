#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "deepclust/autoencoder.hpp"
#include "deepclust/clustering.hpp"
#include "deepclust/data.hpp"
#include "deepclust/losses.hpp"
#include "deepclust/nn/optimizer.hpp"

namespace deepclust {

struct ConfigError : std::runtime_error {
  ConfigError(const std::string& where, std::size_t line, const std::string& what)
      : std::runtime_error(where + (line ? ":" + std::to_string(line) : std::string()) + ": " + what),
        line(line) {}
  std::size_t line;  // 0 when the error is not tied to a line
};
struct UnknownKeyError : ConfigError {
  using ConfigError::ConfigError;
};
struct InvalidValueError : ConfigError {
  using ConfigError::ConfigError;
};
struct MissingKeyError : ConfigError {
  using ConfigError::ConfigError;
};
struct DuplicateKeyError : ConfigError {
  using ConfigError::ConfigError;
};
struct IncompatibleOptionsError : ConfigError {
  using ConfigError::ConfigError;
};

enum class DataSource { blobs, idx, csv };
enum class NonClusteringLoss { none, reconstruction, self_augmentation };
enum class ClusteringLoss {
  assignment_hardening,
  kmeans,
  balanced_assignments,
  locality_preserving,
  group_sparsity,
  cluster_classification,
  agglomerative,
};
enum class ClusterUpdate { joint_trainable_centroids, alternating };
enum class PostTraining { none, rerun_kmeans, rerun_agglomerative };

struct DataConfig {
  DataSource source = DataSource::blobs;
  BlobSpec blobs;
  std::string idx_images, idx_labels;
  std::string csv_path;
  std::optional<std::size_t> csv_label_column;
  bool csv_header = false;
};

struct RunConfig {
  DataConfig data;
  std::size_t k = 0;
  std::uint64_t seed = 0;
  std::string output_dir = "out";

  // architecture
  Architecture architecture = Architecture::mlp;
  std::vector<std::size_t> hidden{64, 32};
  std::vector<std::size_t> conv_channels{32, 64, 128};
  std::size_t conv_kernel = 3;
  std::size_t conv_stride = 2;
  std::size_t latent_dim = 10;
  bool batchnorm = false;
  OutputActivation output_activation = OutputActivation::linear;
  FeatureSelector features;

  // losses
  NonClusteringLoss non_clustering = NonClusteringLoss::reconstruction;
  std::vector<ClusteringLoss> clustering{ClusteringLoss::assignment_hardening};
  double student_t_nu = 1.0;
  Similarity augmentation_similarity = Similarity::negative_squared_distance;
  AugmentationSpec augmentation{0.1, 0};
  std::size_t locality_k_nn = 5;
  std::optional<double> locality_sigma;  // unset: binary weights
  std::optional<std::size_t> group_sparsity_groups;  // unset: k groups
  double group_sparsity_lambda = 0.1;
  Linkage agglomerative_linkage = Linkage::average;
  AlphaSchedule alpha;

  // cluster updates
  ClusterUpdate cluster_update = ClusterUpdate::joint_trainable_centroids;
  std::size_t update_frequency_p = 50;
  double update_stop_threshold = 0.001;
  std::size_t update_max_iterations = 300;
  std::size_t target_refresh_interval = 50;
  double finetune_tolerance = 0.001;
  PostTraining post_training = PostTraining::rerun_kmeans;

  // optimization
  nn::SgdSettings optimizer;
  std::size_t batch_size = 256;
  std::size_t pretrain_steps = 1000;
  std::size_t finetune_steps = 2000;
  std::size_t log_interval = 10;
  std::size_t kmeans_restarts = 20;

  // Every key with its resolved value, defaults included.
  std::map<std::string, std::string> echo;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return std::string(s.substr(a, b - a));
}

template <typename E>
struct EnumName {
  std::string_view name;
  E value;
};

// One recognised key: its default (nullopt = required) and how to apply a value.
struct KeySpec {
  std::string name;
  std::optional<std::string> fallback;
  std::function<void(RunConfig&, const std::string&)> apply;  // throws std::invalid_argument
};

inline std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty()) {
    throw std::invalid_argument("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

inline std::size_t to_size(const std::string& v, std::size_t min = 0) {
  const std::uint64_t x = to_u64(v);
  if (x < min) throw std::invalid_argument("must be at least " + std::to_string(min) + ", got " + v);
  return static_cast<std::size_t>(x);
}

inline double to_double(const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || v.empty() || !std::isfinite(out)) {
    throw std::invalid_argument("expected a finite number, got '" + v + "'");
  }
  return out;
}

inline double to_unit(const std::string& v) {
  const double x = to_double(v);
  if (x < 0.0 || x > 1.0) throw std::invalid_argument("must lie in [0,1], got " + v);
  return x;
}

inline double to_positive(const std::string& v) {
  const double x = to_double(v);
  if (!(x > 0.0)) throw std::invalid_argument("must be positive, got " + v);
  return x;
}

inline bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw std::invalid_argument("expected true or false, got '" + v + "'");
}

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

inline std::vector<std::size_t> to_size_list(const std::string& v, std::size_t min) {
  std::vector<std::size_t> out;
  for (const std::string& s : split_list(v)) out.push_back(to_size(s, min));
  return out;
}

template <typename E, std::size_t N>
E to_enum(const std::string& v, const EnumName<E> (&names)[N]) {
  for (const auto& n : names) {
    if (n.name == v) return n.value;
  }
  std::string options;
  for (const auto& n : names) options += (options.empty() ? "" : ", ") + std::string(n.name);
  throw std::invalid_argument("'" + v + "' is not one of " + options);
}

inline constexpr EnumName<DataSource> kDataSources[] = {
    {"blobs", DataSource::blobs}, {"idx", DataSource::idx}, {"csv", DataSource::csv}};
inline constexpr EnumName<Nonlinearity> kNonlinearities[] = {{"none", Nonlinearity::none},
                                                             {"tanh_mix", Nonlinearity::tanh_mix}};
inline constexpr EnumName<Architecture> kArchitectures[] = {{"mlp", Architecture::mlp},
                                                            {"conv", Architecture::conv}};
inline constexpr EnumName<OutputActivation> kOutputs[] = {{"linear", OutputActivation::linear},
                                                          {"sigmoid", OutputActivation::sigmoid}};
inline constexpr EnumName<FeatureMode> kFeatureModes[] = {{"one_layer", FeatureMode::one_layer},
                                                          {"several_layers", FeatureMode::several_layers}};
inline constexpr EnumName<NonClusteringLoss> kNonClustering[] = {
    {"none", NonClusteringLoss::none},
    {"reconstruction", NonClusteringLoss::reconstruction},
    {"self_augmentation", NonClusteringLoss::self_augmentation}};
inline constexpr EnumName<ClusteringLoss> kClustering[] = {
    {"assignment_hardening", ClusteringLoss::assignment_hardening},
    {"kmeans", ClusteringLoss::kmeans},
    {"balanced_assignments", ClusteringLoss::balanced_assignments},
    {"locality_preserving", ClusteringLoss::locality_preserving},
    {"group_sparsity", ClusteringLoss::group_sparsity},
    {"cluster_classification", ClusteringLoss::cluster_classification},
    {"agglomerative", ClusteringLoss::agglomerative}};
inline constexpr EnumName<Similarity> kSimilarities[] = {
    {"negative_squared_distance", Similarity::negative_squared_distance},
    {"cross_entropy", Similarity::cross_entropy}};
inline constexpr EnumName<Linkage> kLinkages[] = {{"average", Linkage::average}, {"single", Linkage::single}};
inline constexpr EnumName<AlphaMode> kAlphaModes[] = {{"pretrain_finetune", AlphaMode::pretrain_finetune},
                                                      {"joint", AlphaMode::joint},
                                                      {"variable", AlphaMode::variable}};
inline constexpr EnumName<ClusterUpdate> kClusterUpdates[] = {
    {"joint_trainable_centroids", ClusterUpdate::joint_trainable_centroids},
    {"alternating", ClusterUpdate::alternating}};
inline constexpr EnumName<PostTraining> kPostTraining[] = {{"none", PostTraining::none},
                                                           {"rerun_kmeans", PostTraining::rerun_kmeans},
                                                           {"rerun_agglomerative", PostTraining::rerun_agglomerative}};

template <typename E, std::size_t N>
std::string_view enum_name(E value, const EnumName<E> (&names)[N]) {
  for (const auto& n : names) {
    if (n.value == value) return n.name;
  }
  return "?";
}

inline const std::vector<KeySpec>& key_specs() {
  using C = RunConfig;
  using S = std::string;
  static const std::vector<KeySpec> specs = {
      {"data", std::nullopt, [](C& c, const S& v) { c.data.source = to_enum(v, kDataSources); }},
      {"k", std::nullopt, [](C& c, const S& v) { c.k = to_size(v, 1); }},
      {"seed", "0", [](C& c, const S& v) { c.seed = to_u64(v); }},
      {"output_dir", "out", [](C& c, const S& v) { c.output_dir = v; }},
      {"blobs_n_per_cluster", "300", [](C& c, const S& v) { c.data.blobs.n_per_cluster = to_size(v, 1); }},
      {"blobs_k", "", [](C& c, const S& v) { c.data.blobs.k = v.empty() ? 0 : to_size(v, 1); }},
      {"blobs_dim", "10", [](C& c, const S& v) { c.data.blobs.dim = to_size(v, 2); }},
      {"blobs_separation", "6",
       [](C& c, const S& v) {
         c.data.blobs.separation = to_double(v);
         if (c.data.blobs.separation < 0) throw std::invalid_argument("must be non-negative");
       }},
      {"blobs_nonlinearity", "tanh_mix",
       [](C& c, const S& v) { c.data.blobs.nonlinearity = to_enum(v, kNonlinearities); }},
      {"blobs_seed", "", [](C& c, const S& v) { c.data.blobs.seed = v.empty() ? c.seed : to_u64(v); }},
      {"idx_images", "", [](C& c, const S& v) { c.data.idx_images = v; }},
      {"idx_labels", "", [](C& c, const S& v) { c.data.idx_labels = v; }},
      {"csv_path", "", [](C& c, const S& v) { c.data.csv_path = v; }},
      {"csv_label_column", "",
       [](C& c, const S& v) {
         if (!v.empty()) c.data.csv_label_column = to_size(v);
       }},
      {"csv_header", "false", [](C& c, const S& v) { c.data.csv_header = to_bool(v); }},
      {"architecture", "mlp", [](C& c, const S& v) { c.architecture = to_enum(v, kArchitectures); }},
      {"hidden", "64,32", [](C& c, const S& v) { c.hidden = to_size_list(v, 1); }},
      {"conv_channels", "32,64,128",
       [](C& c, const S& v) {
         c.conv_channels = to_size_list(v, 1);
         if (c.conv_channels.empty()) throw std::invalid_argument("needs at least one stage");
       }},
      {"conv_kernel", "3", [](C& c, const S& v) { c.conv_kernel = to_size(v, 1); }},
      {"conv_stride", "2", [](C& c, const S& v) { c.conv_stride = to_size(v, 1); }},
      {"latent_dim", "10", [](C& c, const S& v) { c.latent_dim = to_size(v, 1); }},
      {"batchnorm", "false", [](C& c, const S& v) { c.batchnorm = to_bool(v); }},
      {"output_activation", "linear", [](C& c, const S& v) { c.output_activation = to_enum(v, kOutputs); }},
      {"feature_mode", "one_layer", [](C& c, const S& v) { c.features.mode = to_enum(v, kFeatureModes); }},
      {"feature_stages", "", [](C& c, const S& v) { c.features.stages = to_size_list(v, 0); }},
      {"non_clustering_loss", "reconstruction",
       [](C& c, const S& v) { c.non_clustering = to_enum(v, kNonClustering); }},
      {"clustering_loss", "assignment_hardening",
       [](C& c, const S& v) {
         c.clustering.clear();
         for (const S& item : split_list(v)) {
           const ClusteringLoss l = to_enum(item, kClustering);
           if (std::find(c.clustering.begin(), c.clustering.end(), l) != c.clustering.end()) {
             throw std::invalid_argument("'" + item + "' listed twice");
           }
           c.clustering.push_back(l);
         }
         if (c.clustering.empty()) throw std::invalid_argument("needs at least one clustering loss");
       }},
      {"student_t_nu", "1", [](C& c, const S& v) { c.student_t_nu = to_positive(v); }},
      {"augmentation_similarity", "negative_squared_distance",
       [](C& c, const S& v) { c.augmentation_similarity = to_enum(v, kSimilarities); }},
      {"augmentation_noise_sigma", "0.1",
       [](C& c, const S& v) {
         c.augmentation.noise_sigma = to_double(v);
         if (c.augmentation.noise_sigma < 0) throw std::invalid_argument("must be non-negative");
       }},
      {"augmentation_max_shift", "0", [](C& c, const S& v) { c.augmentation.max_shift_pixels = to_size(v); }},
      {"locality_k_nn", "5", [](C& c, const S& v) { c.locality_k_nn = to_size(v, 1); }},
      {"locality_sigma", "",
       [](C& c, const S& v) {
         if (!v.empty()) c.locality_sigma = to_positive(v);
       }},
      {"group_sparsity_groups", "",
       [](C& c, const S& v) {
         if (!v.empty()) c.group_sparsity_groups = to_size(v, 1);
       }},
      {"group_sparsity_lambda", "0.1", [](C& c, const S& v) { c.group_sparsity_lambda = to_positive(v); }},
      {"agglomerative_linkage", "average",
       [](C& c, const S& v) { c.agglomerative_linkage = to_enum(v, kLinkages); }},
      {"alpha_mode", "joint", [](C& c, const S& v) { c.alpha.mode = to_enum(v, kAlphaModes); }},
      {"alpha_constant", "0.5", [](C& c, const S& v) { c.alpha.alpha_constant = to_unit(v); }},
      {"alpha_ramp_start", "0", [](C& c, const S& v) { c.alpha.ramp_start = to_unit(v); }},
      {"alpha_ramp_end", "1", [](C& c, const S& v) { c.alpha.ramp_end = to_unit(v); }},
      {"alpha_ramp_steps", "100", [](C& c, const S& v) { c.alpha.ramp_steps = to_size(v, 1); }},
      {"cluster_update", "joint_trainable_centroids",
       [](C& c, const S& v) { c.cluster_update = to_enum(v, kClusterUpdates); }},
      {"update_frequency_p", "50", [](C& c, const S& v) { c.update_frequency_p = to_size(v, 1); }},
      {"update_stop_threshold", "0.001", [](C& c, const S& v) { c.update_stop_threshold = to_unit(v); }},
      {"update_max_iterations", "300", [](C& c, const S& v) { c.update_max_iterations = to_size(v, 1); }},
      {"target_refresh_interval", "50", [](C& c, const S& v) { c.target_refresh_interval = to_size(v, 1); }},
      {"finetune_tolerance", "0.001", [](C& c, const S& v) { c.finetune_tolerance = to_unit(v); }},
      {"post_training", "rerun_kmeans", [](C& c, const S& v) { c.post_training = to_enum(v, kPostTraining); }},
      {"learning_rate", "0.01", [](C& c, const S& v) { c.optimizer.learning_rate = to_positive(v); }},
      {"momentum", "0.9",
       [](C& c, const S& v) {
         c.optimizer.momentum = to_double(v);
         if (c.optimizer.momentum < 0 || c.optimizer.momentum >= 1) throw std::invalid_argument("must lie in [0,1)");
       }},
      {"l2_coefficient", "0.0001",
       [](C& c, const S& v) {
         c.optimizer.l2_coefficient = to_double(v);
         if (c.optimizer.l2_coefficient < 0) throw std::invalid_argument("must be non-negative");
       }},
      {"batch_size", "256", [](C& c, const S& v) { c.batch_size = to_size(v, 1); }},
      {"pretrain_steps", "1000", [](C& c, const S& v) { c.pretrain_steps = to_size(v); }},
      {"finetune_steps", "2000", [](C& c, const S& v) { c.finetune_steps = to_size(v, 1); }},
      {"log_interval", "10", [](C& c, const S& v) { c.log_interval = to_size(v, 1); }},
      {"kmeans_restarts", "20", [](C& c, const S& v) { c.kmeans_restarts = to_size(v, 1); }},
  };
  return specs;
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& s : detail::key_specs()) out.push_back(s.name);
  return out;
}

// Flat `key = value` text, `#` starts a comment. `where` names the source in
// error messages; relative data paths are resolved against `base_dir`.
inline RunConfig parse_config_text(std::string_view text, const std::string& where = "<config>",
                                   const std::filesystem::path& base_dir = {}) {
  struct Entry {
    std::string value;
    std::size_t line;
  };
  std::map<std::string, Entry> given;
  const auto& specs = detail::key_specs();
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t nl = text.find('\n', start);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(start, nl - start);
    start = nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string trimmed = detail::trim(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) {
      throw InvalidValueError(where, line_no, "expected 'key = value', got '" + trimmed + "'");
    }
    const std::string key = detail::trim(std::string_view(trimmed).substr(0, eq));
    const std::string value = detail::trim(std::string_view(trimmed).substr(eq + 1));
    if (std::none_of(specs.begin(), specs.end(), [&](const detail::KeySpec& s) { return s.name == key; })) {
      throw UnknownKeyError(where, line_no, "unknown key '" + key + "'");
    }
    if (auto it = given.find(key); it != given.end()) {
      throw DuplicateKeyError(where, line_no,
                              "key '" + key + "' already set on line " + std::to_string(it->second.line));
    }
    given.emplace(key, Entry{value, line_no});
    if (start > text.size()) break;
  }

  RunConfig cfg;
  // seed first: blobs_seed defaults to it
  std::vector<const detail::KeySpec*> order;
  for (const auto& s : specs) {
    if (s.name == "seed") order.insert(order.begin(), &s);
    else order.push_back(&s);
  }
  for (const detail::KeySpec* s : order) {
    const auto it = given.find(s->name);
    std::string value;
    std::size_t line = 0;
    if (it != given.end()) {
      value = it->second.value;
      line = it->second.line;
    } else if (s->fallback) {
      value = *s->fallback;
    } else {
      throw MissingKeyError(where, 0, "missing required key '" + s->name + "'");
    }
    try {
      s->apply(cfg, value);
    } catch (const std::invalid_argument& e) {
      throw InvalidValueError(where, line, s->name + ": " + e.what());
    }
    cfg.echo[s->name] = value;
  }

  auto line_of = [&](const std::string& key) -> std::size_t {
    const auto it = given.find(key);
    return it == given.end() ? 0 : it->second.line;
  };
  auto resolve = [&](std::string& path) {
    if (!path.empty() && !base_dir.empty() && std::filesystem::path(path).is_relative()) {
      path = (base_dir / path).lexically_normal().string();
    }
  };
  auto require = [&](bool ok, const std::string& key, const std::string& what) {
    if (!ok) throw IncompatibleOptionsError(where, line_of(key), what);
  };

  switch (cfg.data.source) {
    case DataSource::blobs:
      if (cfg.data.blobs.k == 0) cfg.data.blobs.k = cfg.k;
      break;
    case DataSource::idx:
      if (cfg.data.idx_images.empty()) throw MissingKeyError(where, 0, "data = idx needs idx_images");
      resolve(cfg.data.idx_images);
      resolve(cfg.data.idx_labels);
      break;
    case DataSource::csv:
      if (cfg.data.csv_path.empty()) throw MissingKeyError(where, 0, "data = csv needs csv_path");
      resolve(cfg.data.csv_path);
      break;
  }
  const auto uses = [&](ClusteringLoss l) {
    return std::find(cfg.clustering.begin(), cfg.clustering.end(), l) != cfg.clustering.end();
  };
  require(!(uses(ClusteringLoss::kmeans) && cfg.cluster_update == ClusterUpdate::joint_trainable_centroids),
          "clustering_loss",
          "clustering_loss = kmeans needs hard assignments; use cluster_update = alternating, not "
          "joint_trainable_centroids");
  require(!(cfg.non_clustering == NonClusteringLoss::none && cfg.pretrain_steps > 0), "pretrain_steps",
          "non_clustering_loss = none leaves nothing to pretrain; set pretrain_steps = 0");
  require(!(cfg.architecture == Architecture::mlp && cfg.augmentation.max_shift_pixels > 0 &&
            cfg.non_clustering == NonClusteringLoss::self_augmentation),
          "augmentation_max_shift", "pixel shifts need image input; use architecture = conv");
  require(cfg.latent_dim >= cfg.k, "latent_dim", "latent_dim must be at least k");
  if (cfg.features.mode == FeatureMode::one_layer) {
    require(cfg.features.stages.size() <= 1, "feature_stages", "one_layer takes at most one stage index");
  }
  return cfg;
}

inline RunConfig parse_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot open config file " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config_text(ss.str(), path, std::filesystem::path(path).parent_path());
}

inline AutoencoderSpec autoencoder_spec(const RunConfig& cfg, const Shape& input_shape) {
  AutoencoderSpec s;
  s.architecture = cfg.architecture;
  s.input_shape = input_shape;
  s.hidden = cfg.hidden;
  for (std::size_t ch : cfg.conv_channels) s.conv_stages.push_back({ch, cfg.conv_kernel, cfg.conv_stride});
  s.latent_dim = cfg.latent_dim;
  s.batchnorm = cfg.batchnorm;
  s.output = cfg.output_activation;
  s.validate(cfg.k);
  return s;
}

inline Dataset load_dataset(const RunConfig& cfg) {
  Dataset ds;
  switch (cfg.data.source) {
    case DataSource::blobs:
      ds = synth_blobs(cfg.data.blobs);
      break;
    case DataSource::idx:
      ds = load_idx(cfg.data.idx_images,
                    cfg.data.idx_labels.empty() ? std::nullopt : std::optional<std::string>(cfg.data.idx_labels));
      break;
    case DataSource::csv:
      ds = load_csv(cfg.data.csv_path, {.label_column = cfg.data.csv_label_column, .header = cfg.data.csv_header});
      break;
  }
  ds.validate();
  if (ds.size() < cfg.k) {
    throw std::invalid_argument("dataset has " + std::to_string(ds.size()) + " samples for k=" + std::to_string(cfg.k));
  }
  return ds;
}

}  // namespace deepclust
