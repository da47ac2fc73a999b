#pragma once

#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace fastmoco {

struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Every hyperparameter of a pretraining or evaluation run. Flat key=value
/// text format with '#' comments; unknown keys are rejected and every field
/// is range-checked before any work starts.
struct RunConfig {
  // pipeline and combination plan
  std::string pipeline = "fastmoco";  // fastmoco|sec|encode_only|divide_combine_encode|
                                      // sample_combine_encode|montage
  int divide_m = 2;
  int combine_n = 2;
  std::string combine_op = "mean";       // mean|weighted|beta|max
  std::string combine_stage = "final";   // input|stage1|stage2|stage3|final|proj|pred
  int pairs_used = 0;  // 0 = all C(m^2, n) combinations (6 at the m=2, n=2 default)
  double weighted_gamma = 0.5;
  double beta_alpha = 1.0;
  bool same_view_positive = false;
  std::string multicrop_mode = "off";  // off|extra_full_crop

  // optimization
  double tau = 1.0;
  double ema_alpha = 0.99;
  double lr0 = 0.025;  // warmup ramps from lr0/4, matching the 0.1 -> 0.025 ratio
  int warmup_epochs = 1;
  double weight_decay = 1e-4;
  double sgd_momentum = 0.9;
  double clip_norm = 1.0;
  int batch = 128;
  int epochs = 30;

  // reproducibility and numerics
  std::uint64_t seed = 1;
  bool deterministic = true;
  std::string dtype = "f32";  // f32|f64
  std::string target_bn_mode = "train";  // train|eval
  bool wd_exclude_norm_bias = true;

  // dataset spec
  std::string dataset = "synth";  // synth|cifar10
  std::string data_dir;           // cifar10 root; FASTMOCO_DATA_DIR when empty
  int image_size = 32;
  int synth_train = 512;
  int synth_eval = 256;
  std::uint64_t dataset_seed = 42;

  // outputs
  std::string out_dir = "runs";
  int log_every = 10;
  int checkpoint_every = 0;  // epochs between checkpoints; 0 = final only

  // linear probe (LARS is out of scope; plain SGD with momentum instead)
  double probe_lr = 0.2;
  int probe_epochs = 30;
  int probe_batch = 128;

  int knn_k = 20;
};

/// Key metadata for --help and validation.
struct ConfigKeyInfo {
  std::string key;
  std::string legal;  // human-readable legal range
};

std::vector<ConfigKeyInfo> config_key_infos();

/// Applies one "key=value" assignment; throws config_error for unknown keys
/// or unparsable values.
void config_set(RunConfig& cfg, const std::string& key, const std::string& value);

/// Parses a flat key=value file ('#' comments, blank lines allowed).
RunConfig parse_config_file(const std::string& path);

/// Parses config text (same format as the file).
RunConfig parse_config_text(const std::string& text, const std::string& origin = "<text>");

/// Range-checks every field; throws config_error with the field name.
void validate_config(const RunConfig& cfg);

/// pairs_used with 0 resolved to the full C(m^2, n) combination count.
int resolved_pairs_used(const RunConfig& cfg);

/// Canonical serialization: fixed key order, one key=value per line.
std::string serialize_config(const RunConfig& cfg);

/// FNV-1a hash of the canonical serialization, as 16 hex digits.
std::string config_hash(const RunConfig& cfg);

/// Dataset root: cfg.data_dir, else $FASTMOCO_DATA_DIR, else ".".
std::string resolve_data_dir(const RunConfig& cfg);

/// An ablation matrix: base config overrides plus axis sweeps expanded into
/// a duplicate-free cartesian grid of cells.
struct AblationMatrix {
  RunConfig base;
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;  // key -> values
};

struct AblationCell {
  std::string cell_id;
  RunConfig config;
};

/// Matrix file format: optional `base = <config path>`, `set key = value`
/// lines for base overrides, and `axis key = v1, v2, ...` sweep lines.
AblationMatrix parse_matrix_file(const std::string& path);

/// Cartesian expansion. Each cell gets a seed derived from (base seed,
/// cell id) unless an axis or override pins the seed explicitly.
std::vector<AblationCell> expand_matrix(const AblationMatrix& m);

}  // namespace fastmoco
