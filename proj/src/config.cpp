#include "fastmoco/config.hpp"

#include "fastmoco/patch.hpp"
#include "fastmoco/rng.hpp"

#include <algorithm>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

namespace fastmoco {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw config_error("config key '" + key + "': expected a boolean, got '" + v + "'");
}

template <typename T>
T parse_num(const std::string& v, const std::string& key) {
  std::istringstream ss(v);
  T out;
  ss >> out;
  if (ss.fail() || !ss.eof())
    throw config_error("config key '" + key + "': cannot parse '" + v + "'");
  return out;
}

std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// One table drives set/serialize/help so the three can never drift apart.
struct KeyDef {
  std::string key;
  std::string legal;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

const std::vector<KeyDef>& key_defs() {
  static const std::vector<KeyDef> defs = [] {
    std::vector<KeyDef> d;
    auto add = [&](std::string key, std::string legal, auto setter, auto getter) {
      d.push_back({std::move(key), std::move(legal), setter, getter});
    };
    add("pipeline",
        "fastmoco|sec|encode_only|divide_combine_encode|sample_combine_encode|montage",
        [](RunConfig& c, const std::string& v) { c.pipeline = v; },
        [](const RunConfig& c) { return c.pipeline; });
    add("divide_m", "integer in [1,8], image_size divisible by it",
        [](RunConfig& c, const std::string& v) { c.divide_m = parse_num<int>(v, "divide_m"); },
        [](const RunConfig& c) { return std::to_string(c.divide_m); });
    add("combine_n", "integer in [1, divide_m^2]",
        [](RunConfig& c, const std::string& v) { c.combine_n = parse_num<int>(v, "combine_n"); },
        [](const RunConfig& c) { return std::to_string(c.combine_n); });
    add("combine_op", "mean|weighted|beta|max",
        [](RunConfig& c, const std::string& v) { c.combine_op = v; },
        [](const RunConfig& c) { return c.combine_op; });
    add("combine_stage", "input|stage1|stage2|stage3|final|proj|pred",
        [](RunConfig& c, const std::string& v) { c.combine_stage = v; },
        [](const RunConfig& c) { return c.combine_stage; });
    add("pairs_used", "0 = all combinations, else in [1, C(m^2,n)] with equal patch usage",
        [](RunConfig& c, const std::string& v) { c.pairs_used = parse_num<int>(v, "pairs_used"); },
        [](const RunConfig& c) { return std::to_string(c.pairs_used); });
    add("weighted_gamma", "real in [0.5, 1)",
        [](RunConfig& c, const std::string& v) {
          c.weighted_gamma = parse_num<double>(v, "weighted_gamma");
        },
        [](const RunConfig& c) { return fmt_double(c.weighted_gamma); });
    add("beta_alpha", "positive real",
        [](RunConfig& c, const std::string& v) { c.beta_alpha = parse_num<double>(v, "beta_alpha"); },
        [](const RunConfig& c) { return fmt_double(c.beta_alpha); });
    add("same_view_positive", "true|false",
        [](RunConfig& c, const std::string& v) {
          c.same_view_positive = parse_bool(v, "same_view_positive");
        },
        [](const RunConfig& c) { return c.same_view_positive ? "true" : "false"; });
    add("multicrop_mode", "off|extra_full_crop",
        [](RunConfig& c, const std::string& v) { c.multicrop_mode = v; },
        [](const RunConfig& c) { return c.multicrop_mode; });
    add("tau", "positive real",
        [](RunConfig& c, const std::string& v) { c.tau = parse_num<double>(v, "tau"); },
        [](const RunConfig& c) { return fmt_double(c.tau); });
    add("ema_alpha", "real in (0,1), or 1 to freeze the target at init",
        [](RunConfig& c, const std::string& v) { c.ema_alpha = parse_num<double>(v, "ema_alpha"); },
        [](const RunConfig& c) { return fmt_double(c.ema_alpha); });
    add("lr0", "non-negative real (warmup ramps from lr0/4)",
        [](RunConfig& c, const std::string& v) { c.lr0 = parse_num<double>(v, "lr0"); },
        [](const RunConfig& c) { return fmt_double(c.lr0); });
    add("warmup_epochs", "integer in [0, epochs]",
        [](RunConfig& c, const std::string& v) {
          c.warmup_epochs = parse_num<int>(v, "warmup_epochs");
        },
        [](const RunConfig& c) { return std::to_string(c.warmup_epochs); });
    add("weight_decay", "non-negative real",
        [](RunConfig& c, const std::string& v) {
          c.weight_decay = parse_num<double>(v, "weight_decay");
        },
        [](const RunConfig& c) { return fmt_double(c.weight_decay); });
    add("sgd_momentum", "real in [0,1)",
        [](RunConfig& c, const std::string& v) {
          c.sgd_momentum = parse_num<double>(v, "sgd_momentum");
        },
        [](const RunConfig& c) { return fmt_double(c.sgd_momentum); });
    add("clip_norm", "positive real, or 0 to disable",
        [](RunConfig& c, const std::string& v) { c.clip_norm = parse_num<double>(v, "clip_norm"); },
        [](const RunConfig& c) { return fmt_double(c.clip_norm); });
    add("batch", "positive integer",
        [](RunConfig& c, const std::string& v) { c.batch = parse_num<int>(v, "batch"); },
        [](const RunConfig& c) { return std::to_string(c.batch); });
    add("epochs", "positive integer",
        [](RunConfig& c, const std::string& v) { c.epochs = parse_num<int>(v, "epochs"); },
        [](const RunConfig& c) { return std::to_string(c.epochs); });
    add("seed", "unsigned 64-bit integer",
        [](RunConfig& c, const std::string& v) { c.seed = parse_num<std::uint64_t>(v, "seed"); },
        [](const RunConfig& c) { return std::to_string(c.seed); });
    add("deterministic", "true|false",
        [](RunConfig& c, const std::string& v) { c.deterministic = parse_bool(v, "deterministic"); },
        [](const RunConfig& c) { return c.deterministic ? "true" : "false"; });
    add("dtype", "f32|f64",
        [](RunConfig& c, const std::string& v) { c.dtype = v; },
        [](const RunConfig& c) { return c.dtype; });
    add("target_bn_mode", "train|eval",
        [](RunConfig& c, const std::string& v) { c.target_bn_mode = v; },
        [](const RunConfig& c) { return c.target_bn_mode; });
    add("wd_exclude_norm_bias", "true|false",
        [](RunConfig& c, const std::string& v) {
          c.wd_exclude_norm_bias = parse_bool(v, "wd_exclude_norm_bias");
        },
        [](const RunConfig& c) { return c.wd_exclude_norm_bias ? "true" : "false"; });
    add("dataset", "synth|cifar10",
        [](RunConfig& c, const std::string& v) { c.dataset = v; },
        [](const RunConfig& c) { return c.dataset; });
    add("data_dir", "path (empty = $FASTMOCO_DATA_DIR)",
        [](RunConfig& c, const std::string& v) { c.data_dir = v; },
        [](const RunConfig& c) { return c.data_dir; });
    add("image_size", "positive even integer",
        [](RunConfig& c, const std::string& v) { c.image_size = parse_num<int>(v, "image_size"); },
        [](const RunConfig& c) { return std::to_string(c.image_size); });
    add("synth_train", "positive integer",
        [](RunConfig& c, const std::string& v) { c.synth_train = parse_num<int>(v, "synth_train"); },
        [](const RunConfig& c) { return std::to_string(c.synth_train); });
    add("synth_eval", "positive integer",
        [](RunConfig& c, const std::string& v) { c.synth_eval = parse_num<int>(v, "synth_eval"); },
        [](const RunConfig& c) { return std::to_string(c.synth_eval); });
    add("dataset_seed", "unsigned 64-bit integer",
        [](RunConfig& c, const std::string& v) {
          c.dataset_seed = parse_num<std::uint64_t>(v, "dataset_seed");
        },
        [](const RunConfig& c) { return std::to_string(c.dataset_seed); });
    add("out_dir", "path",
        [](RunConfig& c, const std::string& v) { c.out_dir = v; },
        [](const RunConfig& c) { return c.out_dir; });
    add("log_every", "positive integer (steps)",
        [](RunConfig& c, const std::string& v) { c.log_every = parse_num<int>(v, "log_every"); },
        [](const RunConfig& c) { return std::to_string(c.log_every); });
    add("checkpoint_every", "epochs between checkpoints, 0 = final only",
        [](RunConfig& c, const std::string& v) {
          c.checkpoint_every = parse_num<int>(v, "checkpoint_every");
        },
        [](const RunConfig& c) { return std::to_string(c.checkpoint_every); });
    add("probe_lr", "positive real",
        [](RunConfig& c, const std::string& v) { c.probe_lr = parse_num<double>(v, "probe_lr"); },
        [](const RunConfig& c) { return fmt_double(c.probe_lr); });
    add("probe_epochs", "positive integer",
        [](RunConfig& c, const std::string& v) {
          c.probe_epochs = parse_num<int>(v, "probe_epochs");
        },
        [](const RunConfig& c) { return std::to_string(c.probe_epochs); });
    add("probe_batch", "positive integer",
        [](RunConfig& c, const std::string& v) { c.probe_batch = parse_num<int>(v, "probe_batch"); },
        [](const RunConfig& c) { return std::to_string(c.probe_batch); });
    add("knn_k", "positive integer",
        [](RunConfig& c, const std::string& v) { c.knn_k = parse_num<int>(v, "knn_k"); },
        [](const RunConfig& c) { return std::to_string(c.knn_k); });
    return d;
  }();
  return defs;
}

void fail(const std::string& key, const std::string& why) {
  throw config_error("config key '" + key + "': " + why);
}

template <typename T>
void check_in(const std::string& key, const T& v, const std::set<T>& legal) {
  if (!legal.count(v)) {
    std::string opts;
    for (const auto& o : legal) opts += (opts.empty() ? "" : "|") + o;
    fail(key, "'" + v + "' is not one of " + opts);
  }
}

}  // namespace

std::vector<ConfigKeyInfo> config_key_infos() {
  std::vector<ConfigKeyInfo> out;
  for (const auto& d : key_defs()) out.push_back({d.key, d.legal});
  return out;
}

void config_set(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& d : key_defs())
    if (d.key == key) {
      d.set(cfg, value);
      return;
    }
  throw config_error("unknown config key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw config_error(origin + ":" + std::to_string(lineno) + ": expected key=value");
    config_set(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  return cfg;
}

RunConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

void validate_config(const RunConfig& c) {
  check_in<std::string>("pipeline", c.pipeline,
                        {"fastmoco", "sec", "encode_only", "divide_combine_encode",
                         "sample_combine_encode", "montage"});
  check_in<std::string>("combine_op", c.combine_op, {"mean", "weighted", "beta", "max"});
  check_in<std::string>("combine_stage", c.combine_stage,
                        {"input", "stage1", "stage2", "stage3", "final", "proj", "pred"});
  check_in<std::string>("multicrop_mode", c.multicrop_mode, {"off", "extra_full_crop"});
  check_in<std::string>("dtype", c.dtype, {"f32", "f64"});
  check_in<std::string>("target_bn_mode", c.target_bn_mode, {"train", "eval"});
  check_in<std::string>("dataset", c.dataset, {"synth", "cifar10"});

  if (c.divide_m < 1 || c.divide_m > 8) fail("divide_m", "must be in [1,8]");
  if (c.image_size < 4 || c.image_size % 2 != 0) fail("image_size", "must be a positive even size");
  if (c.image_size % c.divide_m != 0)
    fail("divide_m", "image_size " + std::to_string(c.image_size) + " not divisible by " +
                         std::to_string(c.divide_m));
  const int total = c.divide_m * c.divide_m;
  if (c.combine_n < 1 || c.combine_n > total)
    fail("combine_n", "must be in [1, " + std::to_string(total) + "] for divide_m=" +
                          std::to_string(c.divide_m));
  const auto all = n_choose_k(total, c.combine_n);
  if (c.pairs_used < 0 || c.pairs_used > all)
    fail("pairs_used", "must be 0 (= all) or in [1, " + std::to_string(all) + "]");
  if (c.pairs_used != 0 && c.pairs_used != all &&
      static_cast<std::int64_t>(c.pairs_used) * c.combine_n % total != 0)
    fail("pairs_used", "equal patch usage impossible with pairs_used=" +
                           std::to_string(c.pairs_used));
  if ((c.combine_op == "weighted" || c.combine_op == "beta") && c.combine_n != 2)
    fail("combine_op", c.combine_op + " combining is defined for combine_n=2 only");
  if (c.weighted_gamma < 0.5 || c.weighted_gamma >= 1.0)
    fail("weighted_gamma", "must be in [0.5, 1)");
  if (c.beta_alpha <= 0) fail("beta_alpha", "must be positive");
  if (c.combine_stage != "final" && c.combine_stage != "proj" && c.combine_stage != "pred") {
    // geometry-preserving combine: adjacency is defined on the 2x2 grid
    if (c.divide_m != 2) fail("combine_stage", "stitched combining requires divide_m=2");
    if (c.combine_n != 2 && c.combine_n != 4)
      fail("combine_stage", "stitched combining requires combine_n in {2,4}");
  }
  if (c.pipeline == "divide_combine_encode" || c.pipeline == "sample_combine_encode") {
    if (c.divide_m != 2 || c.combine_n != 2)
      fail("pipeline", c.pipeline + " is defined for divide_m=2, combine_n=2");
  }
  if (c.tau <= 0) fail("tau", "must be positive");
  if (c.ema_alpha <= 0 || c.ema_alpha > 1)
    fail("ema_alpha", "must be in (0,1), or exactly 1 for a frozen target");
  if (c.lr0 < 0) fail("lr0", "must be non-negative");
  if (c.warmup_epochs < 0 || c.warmup_epochs > c.epochs)
    fail("warmup_epochs", "must be in [0, epochs]");
  if (c.weight_decay < 0) fail("weight_decay", "must be non-negative");
  if (c.sgd_momentum < 0 || c.sgd_momentum >= 1) fail("sgd_momentum", "must be in [0,1)");
  if (c.clip_norm < 0) fail("clip_norm", "must be non-negative");
  if (c.batch < 1) fail("batch", "must be positive");
  if (c.epochs < 1) fail("epochs", "must be positive");
  if (c.synth_train < 1) fail("synth_train", "must be positive");
  if (c.synth_eval < 1) fail("synth_eval", "must be positive");
  if (c.log_every < 1) fail("log_every", "must be positive");
  if (c.checkpoint_every < 0) fail("checkpoint_every", "must be non-negative");
  if (c.probe_lr <= 0) fail("probe_lr", "must be positive");
  if (c.probe_epochs < 1) fail("probe_epochs", "must be positive");
  if (c.probe_batch < 1) fail("probe_batch", "must be positive");
  if (c.knn_k < 1) fail("knn_k", "must be positive");
}

int resolved_pairs_used(const RunConfig& cfg) {
  if (cfg.pairs_used != 0) return cfg.pairs_used;
  return static_cast<int>(n_choose_k(cfg.divide_m * cfg.divide_m, cfg.combine_n));
}

std::string serialize_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& d : key_defs()) out += d.key + " = " + d.get(cfg) + "\n";
  return out;
}

std::string config_hash(const RunConfig& cfg) {
  const std::string s = serialize_config(cfg);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string resolve_data_dir(const RunConfig& cfg) {
  if (!cfg.data_dir.empty()) return cfg.data_dir;
  if (const char* env = std::getenv("FASTMOCO_DATA_DIR")) return env;
  return ".";
}

AblationMatrix parse_matrix_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw config_error("cannot open matrix file: " + path);
  AblationMatrix m;
  std::string line;
  int lineno = 0;
  std::set<std::string> seen_axes;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto where = path + ":" + std::to_string(lineno);
    std::istringstream ss(line);
    std::string word;
    ss >> word;
    if (word == "base") {
      std::string eq, file;
      ss >> eq >> file;
      if (eq != "=" || file.empty()) throw config_error(where + ": expected 'base = <path>'");
      m.base = parse_config_file(file);
    } else if (word == "set" || word == "axis") {
      std::string rest;
      std::getline(ss, rest);
      const auto eq = rest.find('=');
      if (eq == std::string::npos) throw config_error(where + ": expected '" + word + " key = value'");
      const std::string key = trim(rest.substr(0, eq));
      const std::string value = trim(rest.substr(eq + 1));
      if (word == "set") {
        config_set(m.base, key, value);
      } else {
        if (seen_axes.count(key)) throw config_error(where + ": duplicate axis '" + key + "'");
        seen_axes.insert(key);
        std::vector<std::string> values;
        std::istringstream vs(value);
        std::string item;
        while (std::getline(vs, item, ',')) {
          item = trim(item);
          if (!item.empty()) values.push_back(item);
        }
        if (values.empty()) throw config_error(where + ": axis '" + key + "' has no values");
        m.axes.emplace_back(key, std::move(values));
      }
    } else {
      throw config_error(where + ": expected 'base', 'set' or 'axis'");
    }
  }
  return m;
}

std::vector<AblationCell> expand_matrix(const AblationMatrix& m) {
  std::vector<AblationCell> cells;
  std::vector<std::size_t> idx(m.axes.size(), 0);
  std::set<std::string> ids;
  for (;;) {
    AblationCell cell;
    cell.config = m.base;
    bool seed_pinned = false;
    std::string id;
    for (std::size_t a = 0; a < m.axes.size(); ++a) {
      const auto& [key, values] = m.axes[a];
      const auto& v = values[idx[a]];
      config_set(cell.config, key, v);
      if (key == "seed") seed_pinned = true;
      id += (id.empty() ? "" : "__") + key + "=" + v;
    }
    cell.cell_id = id.empty() ? "base" : id;
    if (!ids.insert(cell.cell_id).second)
      throw config_error("duplicate ablation cell '" + cell.cell_id + "'");
    if (!seed_pinned) {
      std::uint64_t h = m.base.seed;
      for (unsigned char ch : cell.cell_id) h = mix64(h, ch);
      cell.config.seed = h;
    }
    // grid sweeps routinely produce infeasible corners (e.g. n > m^2); those
    // cells are dropped rather than aborting the whole matrix
    bool feasible = true;
    try {
      validate_config(cell.config);
    } catch (const config_error&) {
      feasible = false;
    }
    if (feasible) cells.push_back(std::move(cell));
    // odometer increment
    std::size_t a = 0;
    for (; a < idx.size(); ++a) {
      if (++idx[a] < m.axes[a].second.size()) break;
      idx[a] = 0;
    }
    if (a == idx.size()) break;
  }
  return cells;
}

}  // namespace fastmoco
