#pragma once

#include "fastmoco/config.hpp"
#include "fastmoco/train.hpp"

#include <cstdio>
#include <filesystem>
#include <set>
#include <sstream>
#include <string>

namespace fastmoco {

/// Train and held-out splits per the config's dataset spec. The synthetic
/// splits come from disjoint index ranges of one deterministic generator.
inline std::pair<Dataset, Dataset> load_config_datasets(const RunConfig& cfg) {
  if (cfg.dataset == "synth") {
    auto all = synth_dataset(cfg.synth_train + cfg.synth_eval, cfg.dataset_seed);
    Dataset train, eval;
    train.records.assign(all.records.begin(), all.records.begin() + cfg.synth_train);
    eval.records.assign(all.records.begin() + cfg.synth_train, all.records.end());
    return {std::move(train), std::move(eval)};
  }
  const std::string root = resolve_data_dir(cfg);
  return {load_cifar_dir(root, /*train=*/true), load_cifar_dir(root, /*train=*/false)};
}

inline ChannelStats stats_for(const RunConfig& cfg) {
  return cfg.dataset == "cifar10" ? cifar_stats() : synth_stats();
}

/// Dispatches a pretraining run on the config's dtype; returns run artifacts.
inline PretrainResult run_pretrain(const RunConfig& cfg) {
  validate_config(cfg);
  auto [train, eval] = load_config_datasets(cfg);
  (void)eval;
  if (cfg.dtype == "f64") {
    Rng init = Rng::substream(cfg.seed, {kStreamInit});
    auto model = DualBranch<double>::create(EncoderDef{}, HeadDef{}, cfg.ema_alpha, init);
    return pretrain_on<double>(cfg, train, model);
  }
  Rng init = Rng::substream(cfg.seed, {kStreamInit});
  auto model =
      DualBranch<float>::create(EncoderDef{}, HeadDef{}, static_cast<float>(cfg.ema_alpha), init);
  return pretrain_on<float>(cfg, train, model);
}

struct EvalResult {
  double top1 = 0;
  std::string config_hash_hex;  // of the pretraining run, from the checkpoint
};

namespace detail {

inline std::string hash_hex(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace detail

/// Loads a checkpoint (CRC-verified), restores the frozen online encoder and
/// trains the linear probe on the config's dataset splits.
template <typename S>
EvalResult linear_eval_checkpoint(const std::string& ckpt_path, const RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  Rng dummy(0);
  auto enc = Encoder<S>::create(EncoderDef{}, dummy, /*trainable=*/false);
  restore_encoder(enc, ck);
  auto [train, eval] = load_config_datasets(cfg);
  const auto stats = stats_for(cfg);
  auto train_emb = embed_dataset(enc, train, stats, cfg.image_size);
  auto eval_emb = embed_dataset(enc, eval, stats, cfg.image_size);
  EvalResult res;
  res.top1 = linear_probe_on_embeddings(train_emb, dataset_labels(train), eval_emb,
                                        dataset_labels(eval), cfg.probe_lr, cfg.probe_epochs,
                                        cfg.probe_batch, cfg.seed);
  if (auto h = ck.get_u64("meta.config_hash")) res.config_hash_hex = detail::hash_hex(*h);
  return res;
}

template <typename S>
EvalResult knn_eval_checkpoint(const std::string& ckpt_path, const RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  Rng dummy(0);
  auto enc = Encoder<S>::create(EncoderDef{}, dummy, /*trainable=*/false);
  restore_encoder(enc, ck);
  auto [train, eval] = load_config_datasets(cfg);
  const auto stats = stats_for(cfg);
  auto train_emb = embed_dataset(enc, train, stats, cfg.image_size);
  auto eval_emb = embed_dataset(enc, eval, stats, cfg.image_size);
  EvalResult res;
  res.top1 = knn_probe(train_emb, dataset_labels(train), eval_emb, dataset_labels(eval), cfg.knn_k);
  if (auto h = ck.get_u64("meta.config_hash")) res.config_hash_hex = detail::hash_hex(*h);
  return res;
}

/// Collapse probe over the held-out split: the online contrast vectors
/// (encoder -> projector -> predictor, eval mode) are l2-normalized and their
/// per-dimension spread is measured.
template <typename S>
double collapse_on_eval(const std::string& ckpt_path, const RunConfig& cfg) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  Rng dummy(0);
  auto model = DualBranch<S>::create(EncoderDef{}, HeadDef{}, static_cast<S>(cfg.ema_alpha), dummy);
  restore_model(model, ck);
  auto [train, eval] = load_config_datasets(cfg);
  (void)train;
  const auto stats = stats_for(cfg);
  auto emb = embed_dataset(model.online_encoder, eval, stats, cfg.image_size);
  NoGradGuard ng;
  auto z = model.project_predict(emb, /*training=*/false).second;
  return collapse_metric(z);
}

inline double run_collapse_probe(const std::string& ckpt_path, const RunConfig& cfg) {
  return cfg.dtype == "f64" ? collapse_on_eval<double>(ckpt_path, cfg)
                            : collapse_on_eval<float>(ckpt_path, cfg);
}

inline EvalResult run_linear_eval(const std::string& ckpt_path, const RunConfig& cfg) {
  return cfg.dtype == "f64" ? linear_eval_checkpoint<double>(ckpt_path, cfg)
                            : linear_eval_checkpoint<float>(ckpt_path, cfg);
}

inline EvalResult run_knn(const std::string& ckpt_path, const RunConfig& cfg) {
  return cfg.dtype == "f64" ? knn_eval_checkpoint<double>(ckpt_path, cfg)
                            : knn_eval_checkpoint<float>(ckpt_path, cfg);
}

inline constexpr const char* kResultsHeader = "checkpoint,dataset,split,metric,value,config_hash";

inline void append_result_row(const std::string& ledger_path, const std::string& checkpoint,
                              const std::string& dataset, const std::string& metric, double value,
                              const std::string& hash) {
  char row[512];
  std::snprintf(row, sizeof(row), "%s,%s,eval,%s,%.4f,%s", checkpoint.c_str(), dataset.c_str(),
                metric.c_str(), value, hash.c_str());
  append_csv_row(ledger_path, kResultsHeader, row);
}

// ---------------------------------------------------------------------------
// Ablation harness
// ---------------------------------------------------------------------------

inline constexpr const char* kSummaryHeader =
    "cell_id,pipeline,divide_m,combine_n,combine_stage,combine_op,pairs_used,top1,loss_final,"
    "config_hash";

struct AblateProgress {
  int completed = 0;
  int skipped = 0;
  int failed = 0;
};

/// Executes every cell sequentially, appending one summary row per cell.
/// Cells whose config hash already appears in the summary are skipped, so an
/// interrupted sweep resumes where it stopped. A failing cell is recorded
/// with top1=nan and the sweep continues.
inline AblateProgress run_ablation(const std::vector<AblationCell>& cells,
                                   const std::string& summary_path, bool verbose = true) {
  AblateProgress prog;
  std::set<std::string> done;
  if (std::filesystem::exists(summary_path)) {
    std::istringstream in(read_text_file(summary_path));
    std::string line;
    while (std::getline(in, line)) {
      const auto pos = line.rfind(',');
      if (pos != std::string::npos) done.insert(line.substr(pos + 1));
    }
  }
  for (const auto& cell : cells) {
    const std::string hash = config_hash(cell.config);
    if (done.count(hash)) {
      ++prog.skipped;
      if (verbose) std::printf("[ablate] %s: already done, skipping\n", cell.cell_id.c_str());
      continue;
    }
    if (verbose) std::printf("[ablate] %s: running\n", cell.cell_id.c_str());
    std::fflush(stdout);
    double top1 = std::nan("");
    double loss_final = std::nan("");
    try {
      auto pre = run_pretrain(cell.config);
      loss_final = pre.final_loss;
      top1 = run_linear_eval(pre.checkpoint_path, cell.config).top1;
      ++prog.completed;
    } catch (const std::exception& e) {
      ++prog.failed;
      if (verbose) std::printf("[ablate] %s: FAILED (%s)\n", cell.cell_id.c_str(), e.what());
    }
    char row[768];
    std::snprintf(row, sizeof(row), "%s,%s,%d,%d,%s,%s,%d,%.4f,%.6f,%s", cell.cell_id.c_str(),
                  cell.config.pipeline.c_str(), cell.config.divide_m, cell.config.combine_n,
                  cell.config.combine_stage.c_str(), cell.config.combine_op.c_str(),
                  resolved_pairs_used(cell.config), top1, loss_final, hash.c_str());
    append_csv_row(summary_path, kSummaryHeader, row);
    if (verbose && prog.completed + prog.failed > 0)
      std::printf("[ablate] %s: top1=%.2f\n", cell.cell_id.c_str(), top1);
  }
  return prog;
}

}  // namespace fastmoco
