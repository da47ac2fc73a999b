// Command-line front end: pretraining, linear/k-NN evaluation, the gradient
// oracle suite, ablation sweeps and synthetic dataset generation.

#include "fastmoco/config.hpp"
#include "fastmoco/gradcheck.hpp"
#include "fastmoco/runner.hpp"
#include "fastmoco/train.hpp"
#include "fastmoco/util.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

using fastmoco::RunConfig;

/// Applies --set key=value overrides on top of a parsed config.
void apply_overrides(RunConfig& cfg, const std::vector<std::string>& sets) {
  for (const auto& s : sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos)
      throw fastmoco::config_error("--set expects key=value, got '" + s + "'");
    fastmoco::config_set(cfg, s.substr(0, eq), s.substr(eq + 1));
  }
}

std::string config_ranges_help() {
  std::string out = "Config keys and legal ranges:\n";
  for (const auto& info : fastmoco::config_key_infos())
    out += "  " + info.key + ": " + info.legal + "\n";
  return out;
}

int cmd_pretrain(const std::string& config_path, const std::vector<std::string>& sets) {
  RunConfig cfg;
  if (!config_path.empty()) {
    if (!std::filesystem::exists(config_path)) {
      std::fprintf(stderr, "config file not found: %s\n", config_path.c_str());
      return kExitConfig;
    }
    cfg = fastmoco::parse_config_file(config_path);
  }
  apply_overrides(cfg, sets);
  fastmoco::validate_config(cfg);
  auto res = fastmoco::run_pretrain(cfg);
  std::printf("run dir:    %s\n", res.run_dir.c_str());
  std::printf("checkpoint: %s\n", res.checkpoint_path.c_str());
  std::printf("metrics:    %s\n", res.metrics_path.c_str());
  std::printf("final loss: %.6f over %ld steps\n", res.final_loss, res.steps);
  return kExitOk;
}

RunConfig config_next_to_checkpoint(const std::string& ckpt_path) {
  const auto dir = std::filesystem::path(ckpt_path).parent_path();
  const auto snapshot = dir / "config.txt";
  if (std::filesystem::exists(snapshot)) return fastmoco::parse_config_file(snapshot.string());
  return RunConfig{};
}

int cmd_linear_eval(const std::string& ckpt, const std::vector<std::string>& sets,
                    const std::string& ledger) {
  RunConfig cfg = config_next_to_checkpoint(ckpt);
  apply_overrides(cfg, sets);
  fastmoco::validate_config(cfg);
  auto res = fastmoco::run_linear_eval(ckpt, cfg);
  std::printf("top1: %.2f%%\n", res.top1);
  fastmoco::append_result_row(ledger, ckpt, cfg.dataset, "linear_top1", res.top1,
                              res.config_hash_hex);
  std::printf("appended to %s (config_hash=%s)\n", ledger.c_str(), res.config_hash_hex.c_str());
  return kExitOk;
}

int cmd_knn(const std::string& ckpt, const std::vector<std::string>& sets,
            const std::string& ledger) {
  RunConfig cfg = config_next_to_checkpoint(ckpt);
  apply_overrides(cfg, sets);
  fastmoco::validate_config(cfg);
  auto res = fastmoco::run_knn(ckpt, cfg);
  std::printf("knn top1: %.2f%% (k=%d)\n", res.top1, cfg.knn_k);
  fastmoco::append_result_row(ledger, ckpt, cfg.dataset, "knn_top1", res.top1,
                              res.config_hash_hex);
  return kExitOk;
}

int cmd_gradcheck() {
  const auto reports = fastmoco::run_gradcheck_suite();
  bool ok = true;
  double worst = 0;
  std::string worst_name;
  for (const auto& r : reports) {
    std::printf("%-28s max rel-err %.3e  (tol %.0e)  %s\n", r.name.c_str(), r.max_rel_err, r.tol,
                r.pass ? "ok" : "FAIL");
    if (r.max_rel_err > worst) {
      worst = r.max_rel_err;
      worst_name = r.name;
    }
    ok = ok && r.pass;
  }
  std::printf("%s: worst rel-err %.3e in %s\n", ok ? "PASS" : "FAIL", worst, worst_name.c_str());
  return ok ? kExitOk : kExitRuntime;
}

int cmd_ablate(const std::string& matrix_path, const std::string& out_csv) {
  if (!std::filesystem::exists(matrix_path)) {
    std::fprintf(stderr, "matrix file not found: %s\n", matrix_path.c_str());
    return kExitConfig;
  }
  auto matrix = fastmoco::parse_matrix_file(matrix_path);
  auto cells = fastmoco::expand_matrix(matrix);
  std::printf("%zu cells\n", cells.size());
  auto prog = fastmoco::run_ablation(cells, out_csv);
  std::printf("completed %d, skipped %d, failed %d -> %s\n", prog.completed, prog.skipped,
              prog.failed, out_csv.c_str());
  return prog.failed == 0 ? kExitOk : kExitRuntime;
}

int cmd_synth_data(const std::string& out_dir, int train_n, int test_n, std::uint64_t seed) {
  fastmoco::ensure_dir(out_dir);
  auto all = fastmoco::synth_dataset(train_n + test_n, seed);
  fastmoco::Dataset train, test;
  train.records.assign(all.records.begin(), all.records.begin() + train_n);
  test.records.assign(all.records.begin() + train_n, all.records.end());
  fastmoco::write_cifar_file(out_dir + "/data_batch_1.bin", train);
  fastmoco::write_cifar_file(out_dir + "/test_batch.bin", test);
  std::printf("wrote %d train / %d test records to %s\n", train_n, test_n, out_dir.c_str());
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Momentum-contrast pretraining with combinatorial patches"};
  app.require_subcommand(1);
  app.footer(config_ranges_help());

  std::string config_path, ckpt_path, matrix_path;
  std::string ledger = "results.csv";
  std::string summary = "ablation_summary.csv";
  std::string synth_out = "data";
  std::vector<std::string> sets;
  int synth_train = 512, synth_test = 256;
  std::uint64_t synth_seed = 42;

  auto* pretrain = app.add_subcommand("pretrain", "Self-supervised pretraining run");
  pretrain->add_option("--config", config_path, "config file (key = value lines)");
  pretrain->add_option("--set", sets, "override: key=value (repeatable)");

  auto* lineval = app.add_subcommand("linear-eval", "Linear probe on a frozen checkpoint");
  lineval->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  lineval->add_option("--set", sets, "override: key=value (repeatable)");
  lineval->add_option("--out", ledger, "results ledger CSV (appended)");

  auto* knn = app.add_subcommand("knn", "Cosine k-NN probe on a frozen checkpoint");
  knn->add_option("--checkpoint", ckpt_path, "checkpoint file")->required();
  knn->add_option("--set", sets, "override: key=value (repeatable)");
  knn->add_option("--out", ledger, "results ledger CSV (appended)");

  app.add_subcommand("gradcheck", "Finite-difference oracle suite (f64)");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation matrix");
  ablate->add_option("--matrix", matrix_path, "matrix file")->required();
  ablate->add_option("--out", summary, "summary CSV");

  auto* synth = app.add_subcommand("synth-data", "Write a synthetic dataset in CIFAR-10 layout");
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--train", synth_train, "train record count");
  synth->add_option("--test", synth_test, "test record count");
  synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("pretrain")) return cmd_pretrain(config_path, sets);
    if (app.got_subcommand("linear-eval")) return cmd_linear_eval(ckpt_path, sets, ledger);
    if (app.got_subcommand("knn")) return cmd_knn(ckpt_path, sets, ledger);
    if (app.got_subcommand("gradcheck")) return cmd_gradcheck();
    if (app.got_subcommand("ablate")) return cmd_ablate(matrix_path, summary);
    if (app.got_subcommand("synth-data"))
      return cmd_synth_data(synth_out, synth_train, synth_test, synth_seed);
  } catch (const fastmoco::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitConfig;
}
