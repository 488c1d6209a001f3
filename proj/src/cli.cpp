// Copyright 2026 The idxshare Authors
// SPDX-License-Identifier: Apache-2.0

#include "idxshare/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>

#include "idxshare/analysis.hpp"
#include "idxshare/data.hpp"
#include "idxshare/model.hpp"
#include "idxshare/pattern.hpp"
#include "idxshare/search.hpp"
#include "idxshare/trainer.hpp"

namespace idxshare::cli {

namespace fs = std::filesystem;

namespace {

// Raised for anything the user can fix by changing flags or config.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

std::pair<std::string, std::string> split_kv(const std::string& text, const std::string& where) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + text + "'");
  auto key = trim(text.substr(0, eq));
  if (key.empty()) throw ConfigError(where + ": empty key");
  return {key, trim(text.substr(eq + 1))};
}

// Merged settings; every lookup is recorded so the run file shows effective
// values, defaults included.
class Settings {
 public:
  void set(const std::string& key, const std::string& value) { raw_[key] = value; }
  bool has(const std::string& key) const { return raw_.count(key) > 0; }

  std::string str(const std::string& key, const std::string& fallback) {
    auto it = raw_.find(key);
    const std::string v = it == raw_.end() ? fallback : it->second;
    resolved_[key] = v;
    return v;
  }
  std::optional<std::string> maybe(const std::string& key) {
    auto it = raw_.find(key);
    if (it == raw_.end()) return std::nullopt;
    resolved_[key] = it->second;
    return it->second;
  }
  std::string required(const std::string& key) {
    auto v = maybe(key);
    if (!v || v->empty()) throw ConfigError("missing required setting '" + key + "'");
    return *v;
  }
  std::size_t size(const std::string& key, std::size_t fallback) {
    auto v = str(key, std::to_string(fallback));
    try {
      std::size_t used = 0;
      if (!v.empty() && v[0] == '-') throw std::invalid_argument(key);
      auto n = std::stoull(v, &used);
      if (used == v.size()) return n;
    } catch (const std::exception&) {
    }
    throw ConfigError("setting '" + key + "' must be a non-negative integer, got '" + v + "'");
  }
  double real(const std::string& key, double fallback) {
    std::ostringstream d;
    d << std::setprecision(17) << fallback;
    auto v = str(key, d.str());
    try {
      std::size_t used = 0;
      double x = std::stod(v, &used);
      if (used == v.size()) return x;
    } catch (const std::exception&) {
    }
    throw ConfigError("setting '" + key + "' must be a number, got '" + v + "'");
  }
  bool flag(const std::string& key, bool fallback) {
    auto v = str(key, fallback ? "true" : "false");
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("setting '" + key + "' must be true or false, got '" + v + "'");
  }
  // Catches typos before any work starts.
  void reject_unused() const {
    for (const auto& [k, v] : raw_) {
      if (!resolved_.count(k)) throw ConfigError("unknown setting '" + k + "' for this command");
    }
  }
  const std::map<std::string, std::string>& resolved() const { return resolved_; }

 private:
  std::map<std::string, std::string> raw_;
  std::map<std::string, std::string> resolved_;
};

struct Flags {
  std::string config, checkpoint, pattern, pattern_file, data, out_dir, similarity, which;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> target_s, keep_f, blocks, count, length;
};

void write_run_file(const fs::path& dir, const std::string& command, const Settings& s) {
  std::ofstream out(dir / (command + ".run.txt"), std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write run file in '" + dir.string() + "'");
  out << "# idxshare run v" << kReportVersion << "\ncommand = " << command << '\n';
  for (const auto& [k, v] : s.resolved()) out << k << " = " << v << '\n';
}

// Inputs only, so reports from different output directories compare equal.
std::string config_block(const Settings& s) {
  std::ostringstream out;
  for (const auto& [k, v] : s.resolved())
    if (k != "out_dir") out << k << " = " << v << '\n';
  return out.str();
}

fs::path prepare_out_dir(Settings& s) {
  fs::path dir = s.str("out_dir", ".");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

ModelConfig model_config(Settings& s, const Dataset& data) {
  ModelConfig c;
  c.n_layers = s.size("n_layers", c.n_layers);
  c.max_len = s.size("max_len", data.length);
  c.d_model = s.size("d_model", c.d_model);
  c.n_heads = s.size("n_heads", c.n_heads);
  c.n_idx_heads = s.size("n_idx_heads", c.n_idx_heads);
  c.d_idx = s.size("d_idx", c.d_idx);
  c.top_k = s.size("top_k", c.top_k);
  c.d_ff = s.size("d_ff", c.d_ff);
  c.vocab_size = s.size("vocab_size", data.vocab_size);
  c.seed = s.size("seed", 0);
  c.validate();
  return c;
}

// --pattern, else --pattern-file (first entry), else uniform stride, else all-F.
Pattern resolve_pattern(Settings& s, std::size_t n_layers) {
  if (auto p = s.maybe("pattern")) return parse_pattern(*p, n_layers);
  if (auto f = s.maybe("pattern_file")) {
    auto ps = read_pattern_file(*f, n_layers);
    if (ps.empty()) throw ConfigError("pattern file '" + *f + "' has no patterns");
    return ps.front();
  }
  if (s.has("stride")) return uniform_interleave(n_layers, s.size("stride", 1));
  return Pattern::all_full(n_layers);
}

CalibrationSet calibration(Settings& s, const Dataset& data) {
  const auto batches = s.size("calib_batches", 2);
  const auto batch_size = s.size("calib_batch_size", 4);
  return make_calibration_set(data, batches, batch_size);
}

void load_settings(Settings& s, const Flags& f) {
  if (!f.config.empty()) {
    for (const auto& [k, v] : read_config_file(f.config)) s.set(k, v);
  }
  for (const auto& kv : f.sets) {
    auto [k, v] = split_kv(kv, "--set");
    s.set(k, v);
  }
  auto put = [&](const char* key, const std::string& v) {
    if (!v.empty()) s.set(key, v);
  };
  put("checkpoint", f.checkpoint);
  put("pattern", f.pattern);
  put("pattern_file", f.pattern_file);
  put("data", f.data);
  put("out_dir", f.out_dir);
  put("similarity", f.similarity);
  put("which", f.which);
  if (f.seed) s.set("seed", std::to_string(*f.seed));
  if (f.target_s) s.set("target_s", std::to_string(*f.target_s));
  if (f.keep_f) s.set("keep_f", std::to_string(*f.keep_f));
  if (f.blocks) s.set("blocks", std::to_string(*f.blocks));
  if (f.count) s.set("count", std::to_string(*f.count));
  if (f.length) s.set("length", std::to_string(*f.length));
}

// ---- commands ------------------------------------------------------------------

int cmd_gen_data(Settings& s, std::ostream& out) {
  CopyTaskConfig task;
  task.length = s.size("length", task.length);
  task.vocab_size = s.size("vocab_size", task.vocab_size);
  const auto count = s.size("count", 64);
  const auto seed = s.size("seed", 0);
  const auto dir = prepare_out_dir(s);
  const auto path = s.str("data", (dir / "data.txt").string());
  s.reject_unused();
  try {
    task.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  write_dataset(path, generate_copy_dataset(task, count, seed));
  write_run_file(dir, "gen-data", s);
  out << "wrote " << count << " records to " << path << '\n';
  return kExitOk;
}

int cmd_train(Settings& s, std::ostream& out) {
  const auto data = read_dataset(s.required("data"));
  const auto mc = model_config(s, data);
  TrainConfig tc(resolve_pattern(s, mc.n_layers));
  tc.dense_steps = s.size("dense_steps", 200);
  tc.warmup_steps = s.size("warmup_steps", 50);
  tc.sparse_steps = s.size("sparse_steps", 200);
  tc.batch_size = s.size("batch_size", tc.batch_size);
  tc.lr_dense = s.real("lr_dense", tc.lr_dense);
  tc.lr_warmup = s.real("lr_warmup", tc.lr_warmup);
  tc.lr_sparse = s.real("lr_sparse", tc.lr_sparse);
  tc.lm_weight = s.real("lm_weight", tc.lm_weight);
  tc.distill_weight = s.real("distill_weight", tc.distill_weight);
  tc.use_cross_layer_loss = s.flag("cross_layer_loss", tc.use_cross_layer_loss);
  tc.seed = mc.seed;
  const auto dir = prepare_out_dir(s);
  s.reject_unused();
  tc.validate(mc.n_layers);

  Model model(mc);
  const auto log = train(model, data, tc);
  save_checkpoint((dir / "model.ckpt").string(), model);
  write_train_log((dir / "train_log.csv").string(), log);
  write_run_file(dir, "train", s);
  out << "trained " << log.rows.size() << " steps; checkpoint " << (dir / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_search_greedy(Settings& s, std::ostream& out) {
  const auto model = load_checkpoint(s.required("checkpoint"));
  const auto data = read_dataset(s.required("data"));
  const auto calib = calibration(s, data);
  const std::size_t n = model.n_layers();
  const auto target = s.size("target_s", n / 2);
  const bool blocked = s.has("blocks");
  const auto blocks = blocked ? s.size("blocks", 1) : 1;
  const auto dir = prepare_out_dir(s);
  s.reject_unused();

  auto r = blocked ? greedy_search_blocked(model, calib, target, blocks) : greedy_search(model, calib, target);
  write_pattern_file((dir / "pattern.txt").string(), {r.pattern},
                     {"greedy search, " + std::to_string(r.evaluations) + " loss evaluations"});
  write_search_trace((dir / "search_trace.csv").string(), r);
  write_run_file(dir, "search-greedy", s);
  out << r.pattern.str() << '\n';
  return kExitOk;
}

int cmd_search_dp(Settings& s, std::ostream& out) {
  const auto dir = prepare_out_dir(s);
  SimilarityMatrix sim;
  if (auto path = s.maybe("similarity")) {
    sim = read_similarity_csv(*path);
  } else {
    const auto model = load_checkpoint(s.required("checkpoint"));
    const auto data = read_dataset(s.required("data"));
    const auto samples = std::min(s.size("samples", 8), data.sequences.size());
    auto rep = similarity_matrix(model, std::span(data.sequences).first(samples));
    write_similarity_csv((dir / "similarity.csv").string(), rep);
    sim = rep.matrix;
  }
  const auto keep = s.size("keep_f", (sim.n + 1) / 2);
  s.reject_unused();
  const auto p = dp_similarity_search(sim, keep);
  std::ostringstream note;
  note << std::setprecision(17) << "similarity search, objective " << similarity_objective(sim, p);
  write_pattern_file((dir / "pattern.txt").string(), {p}, {note.str()});
  write_run_file(dir, "search-dp", s);
  out << p.str() << '\n';
  return kExitOk;
}

int cmd_eval_pattern(Settings& s, std::ostream& out) {
  const auto model = load_checkpoint(s.required("checkpoint"));
  const auto data = read_dataset(s.required("data"));
  const auto pattern = resolve_pattern(s, model.n_layers());
  const auto calib = calibration(s, data);
  const auto dir = prepare_out_dir(s);
  s.reject_unused();

  const double loss = eval_loss(model, calib, pattern);
  std::vector<std::vector<int>> seqs;
  for (const auto& b : calib.batches) seqs.insert(seqs.end(), b.begin(), b.end());
  const double acc = copy_accuracy(model, seqs, pattern);
  const auto cost = cost_model(model.config(), pattern, data.length);

  std::ostringstream report;
  report << std::setprecision(17) << "# idxshare eval report v" << kReportVersion << "\n[config]\n"
         << config_block(s) << "[metrics]\ncalibration_loss = " << loss << "\ncopy_accuracy = " << acc
         << "\n[cost]\n" << format_cost_report(cost);
  std::ofstream f(dir / "eval.txt", std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write eval report");
  f << report.str();
  write_run_file(dir, "eval-pattern", s);
  out << report.str();
  return kExitOk;
}

int cmd_analyze(Settings& s, std::ostream& out) {
  const auto which = s.required("which");
  if (which != "overlap" && which != "similarity") {
    throw ConfigError("analyze: --which must be overlap or similarity, got '" + which + "'");
  }
  const auto model = load_checkpoint(s.required("checkpoint"));
  const auto data = read_dataset(s.required("data"));
  const auto samples = std::min(s.size("samples", 8), data.sequences.size());
  const auto dir = prepare_out_dir(s);
  s.reject_unused();
  auto seqs = std::span(data.sequences).first(samples);
  const auto path = (dir / (which + ".csv")).string();
  if (which == "overlap") {
    write_overlap_csv(path, overlap_matrix(record_indices(model, seqs), model.config().top_k));
  } else {
    write_similarity_csv(path, similarity_matrix(model, seqs));
  }
  write_run_file(dir, "analyze", s);
  out << "wrote " << path << '\n';
  return kExitOk;
}

}  // namespace

std::map<std::string, std::string> read_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::map<std::string, std::string> kv;
  std::string line;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    if (trim(line).empty()) continue;
    auto [k, v] = split_kv(line, path + ":" + std::to_string(no));
    kv[k] = v;
  }
  return kv;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-layer index sharing for sparse attention"};
  app.require_subcommand(1);
  Flags f;

  auto add_common = [&f](CLI::App* sub) {
    sub->add_option("--config", f.config, "flat key=value settings file");
    sub->add_option("--set", f.sets, "override one setting (key=value), repeatable");
    sub->add_option("--seed", f.seed, "run seed");
    sub->add_option("--out-dir", f.out_dir, "output directory");
  };
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic copy-task dataset");
  add_common(gen);
  gen->add_option("--data", f.data, "output dataset path (default <out-dir>/data.txt)");
  gen->add_option("--count", f.count, "number of records");
  gen->add_option("--length", f.length, "tokens per record (even)");

  auto* tr = app.add_subcommand("train", "dense, warm-up and sparse training under a pattern");
  add_common(tr);
  tr->add_option("--data", f.data, "dataset file");
  tr->add_option("--pattern", f.pattern, "F/S pattern string");
  tr->add_option("--pattern-file", f.pattern_file, "pattern file (first entry used)");

  auto* sg = app.add_subcommand("search-greedy", "greedy pattern search on calibration loss");
  add_common(sg);
  sg->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  sg->add_option("--data", f.data, "dataset file (calibration batches taken from the front)");
  sg->add_option("--target-s", f.target_s, "number of S layers");
  sg->add_option("--blocks", f.blocks, "block count for the blocked variant");

  auto* sd = app.add_subcommand("search-dp", "similarity-maximizing pattern search");
  add_common(sd);
  sd->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  sd->add_option("--data", f.data, "dataset file");
  sd->add_option("--similarity", f.similarity, "precomputed similarity CSV");
  sd->add_option("--keep-f", f.keep_f, "number of F layers");

  auto* ev = app.add_subcommand("eval-pattern", "calibration loss, task accuracy and cost of a pattern");
  add_common(ev);
  ev->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  ev->add_option("--data", f.data, "dataset file");
  ev->add_option("--pattern", f.pattern, "F/S pattern string");
  ev->add_option("--pattern-file", f.pattern_file, "pattern file (first entry used)");

  auto* an = app.add_subcommand("analyze", "overlap or similarity matrix");
  add_common(an);
  an->add_option("--checkpoint", f.checkpoint, "model checkpoint");
  an->add_option("--data", f.data, "dataset file");
  an->add_option("which", f.which, "overlap | similarity")->required();

  std::vector<std::string> rev(args.rbegin(), args.rend());
  try {
    app.parse(rev);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    Settings s;
    load_settings(s, f);
    if (gen->parsed()) return cmd_gen_data(s, out);
    if (tr->parsed()) return cmd_train(s, out);
    if (sg->parsed()) return cmd_search_greedy(s, out);
    if (sd->parsed()) return cmd_search_dp(s, out);
    if (ev->parsed()) return cmd_eval_pattern(s, out);
    return cmd_analyze(s, out);
  } catch (const NumericalError& e) {
    err << "numerical error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::invalid_argument& e) {
    // Covers ConfigError, PatternError, ShapeError and config validation.
    err << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace idxshare::cli
