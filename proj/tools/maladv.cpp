// maladv: generate corpora, train detectors, run attack suites and analyses.
//
// Every value a subcommand uses is a key. Keys resolve in this order, later
// sources winning: built-in defaults, --config file, per-subcommand files
// (--hyper, --train-cfg), command-line flags. The resolved set is written to
// <out-dir>/<subcommand>.config, which can be passed back via --config.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "maladv/attack.hpp"
#include "maladv/config.hpp"
#include "maladv/corpus.hpp"
#include "maladv/eval.hpp"
#include "maladv/model.hpp"
#include "maladv/store.hpp"
#include "maladv/train.hpp"

namespace {

using namespace maladv;

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kInternal = 3 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::invalid_config: return kUsage;
    case ErrorCode::shape:
    case ErrorCode::invalid_token: return kInternal;
    default: return kData;
  }
}

/// Common state of one subcommand: its keys, the flags given, the result.
struct Command {
  std::string name;
  std::string config_path;
  std::string seed_text;
  std::string out_dir_text;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
  Fields fields;
  std::map<std::string, std::string> flags;
  CLI::App* app = nullptr;

  void add_flags(const std::map<std::string, std::string>& help) {
    for (const auto& f : fields) {
      if (is_global(f.key)) continue;
      auto it = help.find(f.key);
      app->add_option("--" + f.key, flags[f.key], it == help.end() ? "" : it->second);
    }
  }

  static bool is_global(const std::string& key) { return key == "seed" || key == "out-dir"; }
  bool given(const std::string& key) const { return !is_global(key) && app->count("--" + key) > 0; }

  /// Layered resolution; `extra` files sit between --config and flags.
  KeyValues resolve(const std::vector<std::pair<std::string, const Fields*>>& extra = {}) {
    KeyValues merged;
    if (!config_path.empty()) {
      merged = read_key_values(config_path);
      reject_unknown(merged, {fields}, config_path);
    }
    for (const auto& [key, group] : extra) {
      std::string path = given(key) ? flags[key] : (merged.count(key) ? merged[key] : "");
      if (path.empty()) continue;
      const KeyValues file = read_key_values(path);
      reject_unknown(file, {*group}, path);
      for (const auto& [k, v] : file) merged[k] = v;
    }
    for (const auto& f : fields)
      if (given(f.key)) merged[f.key] = flags[f.key];
    if (!seed_text.empty()) merged["seed"] = seed_text;
    if (!out_dir_text.empty()) merged["out-dir"] = out_dir_text;
    apply_values(fields, merged);
    if (out_dir.empty()) out_dir = ".";
    fs::create_directories(out_dir);
    return merged;
  }

  /// Writes <out-dir>/<name>.config with every resolved key.
  void write_record(const std::vector<std::string>& blanked = {}) const {
    KeyValues out;
    record_values(fields, out);
    for (const auto& k : blanked) out[k] = "";
    write_text(fs::path(out_dir) / (name + ".config"),
               "# maladv " + name + " effective configuration\n" + format_key_values(out));
  }

  fs::path default_path(const std::string& value, const std::string& leaf) const {
    return value.empty() ? fs::path(out_dir) / leaf : fs::path(value);
  }
};

void add_common(Command& c, CLI::App& parent, const std::string& name, const std::string& description) {
  c.name = name;
  c.app = parent.add_subcommand(name, description);
  c.fields.push_back(u64_field("seed", c.seed));
  c.fields.push_back(string_field("out-dir", c.out_dir));
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  for (const auto& part : detail::split(text, ',')) {
    const auto t = detail::trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<AttackKind> parse_kinds(const std::string& text) {
  std::vector<AttackKind> kinds;
  for (const auto& name : split_list(text)) {
    auto k = parse_attack_kind(name);
    if (!k) {
      std::string all;
      for (auto kind : kAllAttackKinds) all += (all.empty() ? "" : ", ") + std::string(to_string(kind));
      throw Error(ErrorCode::invalid_config, "unknown attack '" + name + "'; expected one of: " + all);
    }
    kinds.push_back(*k);
  }
  if (kinds.empty()) throw Error(ErrorCode::invalid_config, "--attack is required");
  return kinds;
}

std::vector<std::size_t> parse_sizes(const std::string& key, const std::string& text) {
  std::vector<std::size_t> out;
  for (const auto& v : split_list(text)) out.push_back(static_cast<std::size_t>(detail::to_u64(key, v)));
  if (out.empty()) throw Error(ErrorCode::invalid_config, key + " must list at least one value");
  return out;
}

std::vector<double> parse_reals(const std::string& key, const std::string& text) {
  std::vector<double> out;
  for (const auto& v : split_list(text)) out.push_back(detail::to_real(key, v));
  if (out.empty()) throw Error(ErrorCode::invalid_config, key + " must list at least one value");
  return out;
}

std::optional<double> parse_eps_step(const std::string& text) {
  if (text == "auto") return std::nullopt;
  return detail::to_real("eps-step", text);
}

std::size_t parse_max_file_size(const std::string& text, const Hyperparams& h) {
  return text == "auto" ? default_max_file_size(h) : static_cast<std::size_t>(detail::to_u64("max-file-size", text));
}

void require(const std::string& value, const std::string& key) {
  if (value.empty()) throw Error(ErrorCode::invalid_config, "--" + key + " is required");
}

std::string model_id_for(const std::string& configured, const std::string& ckpt) {
  return configured == "auto" ? fs::path(ckpt).stem().string() : configured;
}

// ---------------------------------------------------------------------------
// gen-corpus

struct GenCorpus : Command {
  CorpusSpec spec;
  std::string out;

  void setup(CLI::App& parent) {
    add_common(*this, parent, "gen-corpus", "Generate a labelled synthetic PE corpus and its manifest");
    for (auto& f : maladv::fields(spec)) fields.push_back(std::move(f));
    fields.push_back(string_field("out", out));
    add_flags({{"count", "number of files"},
               {"malware-frac", "fraction labelled malware"},
               {"test-frac", "fraction of files, last in generation order, placed in the test split"},
               {"out", "corpus directory (default <out-dir>/corpus)"}});
  }

  int run() {
    resolve();
    spec.seed = seed;
    const fs::path dir = default_path(out, "corpus");
    out = dir.string();
    const auto g = generate_corpus(spec);
    const auto manifest = write_corpus(g, dir);
    write_record();
    std::size_t n_mal = 0, n_test = 0;
    for (const auto& r : g.corpus.manifest.records) {
      n_mal += r.label == Label::malware;
      n_test += r.split == Split::test;
    }
    std::cout << "wrote " << g.corpus.size() << " files (" << n_mal << " malware, " << n_test << " test) to "
              << dir.string() << "\nmanifest " << manifest.string() << '\n';
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// train

struct Train : Command {
  Hyperparams hyper;
  TrainConfig cfg;
  std::string manifest, out, hyper_file, train_file;
  Fields hyper_fields, train_fields;

  void setup(CLI::App& parent) {
    add_common(*this, parent, "train", "Train a detector on the train split of a manifest");
    hyper_fields = maladv::fields(hyper);
    train_fields = maladv::fields(cfg);
    for (const auto& f : hyper_fields) fields.push_back(f);
    for (const auto& f : train_fields) fields.push_back(f);
    fields.push_back(string_field("manifest", manifest));
    fields.push_back(string_field("hyper", hyper_file));
    fields.push_back(string_field("train-cfg", train_file));
    fields.push_back(string_field("out", out));
    add_flags({{"manifest", "dataset manifest"},
               {"hyper", "key=value file of model hyperparameters"},
               {"train-cfg", "key=value file of optimizer settings"},
               {"out", "checkpoint path (default <out-dir>/model.ckpt)"}});
  }

  int run() {
    resolve({{"hyper", &hyper_fields}, {"train-cfg", &train_fields}});
    require(manifest, "manifest");
    hyper.seed = seed;
    cfg.seed = seed;
    hyper.validate();
    cfg.validate();
    const fs::path ckpt = default_path(out, "model.ckpt");
    out = ckpt.string();
    const Corpus corpus = load_corpus(manifest);
    const auto result = train(MalConvModel::initialize(hyper), corpus, cfg);

    std::string log = "# maladv-trainlog v1: epoch,learning_rate,mean_loss,accuracy\n";
    for (const auto& e : result.log) {
      log += std::to_string(e.epoch) + ',' + detail::format_double(e.learning_rate) + ',' +
             detail::format_double(e.mean_loss) + ',' + detail::format_double(e.accuracy) + '\n';
      std::printf("epoch %zu lr %.6g loss %.6f acc %.4f\n", e.epoch, e.learning_rate, e.mean_loss, e.accuracy);
    }
    save_checkpoint(result.model, ckpt);
    write_text(fs::path(out_dir) / "train_log.csv", log);
    write_record({"hyper", "train-cfg"});
    const auto test = corpus.examples(Split::test);
    std::printf("train accuracy %.4f", accuracy(result.model, corpus.examples(Split::train)));
    if (!test.empty()) std::printf(", test accuracy %.4f", accuracy(result.model, test));
    std::printf("\ncheckpoint %s\n", ckpt.string().c_str());
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// attack

struct Attack : Command {
  std::string ckpt, manifest, attack, out;
  std::string budgets = "50,200,500,1000";
  std::string eps_step = "auto";
  std::string eps_ball = "inf";
  std::string max_file_size = "auto";
  std::string model_id = "auto";
  std::size_t num_iter = 10;
  std::size_t candidates = 400;
  std::size_t jobs = 1;
  std::size_t write_adversarial = 1;

  void setup(CLI::App& parent) {
    add_common(*this, parent, "attack", "Run an attack grid against test-split malware");
    fields.push_back(string_field("ckpt", ckpt));
    fields.push_back(string_field("manifest", manifest));
    fields.push_back(string_field("attack", attack));
    fields.push_back(string_field("budgets", budgets));
    fields.push_back(string_field("eps-step", eps_step));
    fields.push_back(string_field("eps-ball", eps_ball));
    fields.push_back(size_field("num-iter", num_iter));
    fields.push_back(size_field("candidates", candidates));
    fields.push_back(string_field("max-file-size", max_file_size));
    fields.push_back(string_field("model-id", model_id));
    fields.push_back(size_field("jobs", jobs));
    fields.push_back(size_field("write-adversarial", write_adversarial));
    fields.push_back(string_field("out", out));
    add_flags({{"ckpt", "victim checkpoint"},
               {"manifest", "dataset manifest"},
               {"attack", "comma-separated attack kinds"},
               {"budgets", "comma-separated append budgets in bytes"},
               {"eps-step", "FGM step size, or 'auto' for the embedding standard deviation"},
               {"eps-ball", "comma-separated slack acceptance radii ('inf' allowed)"},
               {"num-iter", "gradient_append iteration cap"},
               {"candidates", "number of candidates to sample"},
               {"max-file-size", "candidate size cap in bytes, or 'auto'"},
               {"model-id", "label for report rows ('auto' uses the checkpoint name)"},
               {"jobs", "worker threads"},
               {"write-adversarial", "1 to write adversarial files and outcomes, 0 to skip"},
               {"out", "report path (default <out-dir>/report.csv)"}});
  }

  int run() {
    resolve();
    require(ckpt, "ckpt");
    require(manifest, "manifest");
    const auto kinds = parse_kinds(attack);
    const auto budget_list = parse_sizes("budgets", budgets);
    const auto balls = parse_reals("eps-ball", eps_ball);
    const auto step = parse_eps_step(eps_step);
    if (jobs == 0) throw Error(ErrorCode::invalid_config, "jobs must be >= 1");
    const fs::path report_path = default_path(out, "report.csv");
    out = report_path.string();

    const MalConvModel model = load_checkpoint(ckpt);
    const Corpus corpus = load_corpus(manifest);
    std::vector<AttackConfig> grid;
    for (auto kind : kinds) {
      AttackConfig c;
      c.kind = kind;
      c.num_iter = num_iter;
      c.eps_step = step;
      c.seed = seed;
      if (is_append(kind)) {
        for (auto b : budget_list) {
          c.num_bytes = b;
          grid.push_back(c);
        }
      } else {
        for (auto eb : balls) {
          c.eps_ball = eb;
          grid.push_back(c);
        }
      }
    }
    for (const auto& c : grid) c.validate();

    const auto cand = select_candidates(model, corpus, parse_max_file_size(max_file_size, model.hyper), candidates, seed);
    std::cout << "candidates " << cand.size() << " of requested " << candidates << '\n' << std::flush;
    const auto result = run_attack_suite(model, corpus, cand, grid, {model_id_for(model_id, ckpt), jobs});

    write_report(result.report, report_path);
    std::string cand_text = "# maladv-candidates v1: sample,path,score\n";
    for (std::size_t i = 0; i < cand.size(); ++i)
      cand_text += std::to_string(cand.sample_ids[i]) + ',' + corpus.manifest.records[cand.sample_ids[i]].path + ',' +
                   detail::format_double(cand.scores[i]) + '\n';
    write_text(fs::path(out_dir) / "candidates.csv", cand_text);
    if (write_adversarial) write_suite_outputs(result, corpus, out_dir);
    write_record();

    for (const auto& r : result.report.rows)
      std::printf("%-16s budget %5zu eps_ball %-6s SR %6.2f%% (%zu/%zu, %zu excluded)\n",
                  std::string(to_string(r.attack)).c_str(), r.budget, detail::real_text(r.eps_ball).c_str(),
                  100.0 * r.success_rate, r.n_success, r.n_candidates, r.n_excluded);
    std::cout << "report " << report_path.string() << '\n';
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// analyze-pooling

struct AnalyzePooling : Command {
  std::string ckpt, manifest, out;
  std::size_t samples = 200;
  double prefix_frac = 0.25;

  void setup(CLI::App& parent) {
    add_common(*this, parent, "analyze-pooling", "Tabulate where max-pooling selects its windows");
    fields.push_back(string_field("ckpt", ckpt));
    fields.push_back(string_field("manifest", manifest));
    fields.push_back(size_field("samples", samples));
    fields.push_back(real_field("prefix-frac", prefix_frac));
    fields.push_back(string_field("out", out));
    add_flags({{"ckpt", "model checkpoint"},
               {"manifest", "dataset manifest"},
               {"samples", "number of files sampled from the corpus"},
               {"prefix-frac", "leading fraction of the input reported in the summary"},
               {"out", "output directory for the tables (default <out-dir>)"}});
  }

  int run() {
    resolve();
    require(ckpt, "ckpt");
    require(manifest, "manifest");
    if (samples < 2) throw Error(ErrorCode::invalid_config, "samples must be >= 2");
    if (!(prefix_frac > 0 && prefix_frac <= 1)) throw Error(ErrorCode::invalid_config, "prefix-frac must lie in (0, 1]");
    const fs::path dir = out.empty() ? fs::path(out_dir) : fs::path(out);
    out = dir.string();

    const MalConvModel model = load_checkpoint(ckpt);
    const Corpus corpus = load_corpus(manifest);
    std::vector<std::size_t> ids(corpus.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng = derive_rng(seed, {0x706f6f6c});
    std::shuffle(ids.begin(), ids.end(), rng);
    ids.resize(std::min(samples, ids.size()));
    std::sort(ids.begin(), ids.end());
    std::vector<std::span<const std::uint8_t>> picked;
    for (auto i : ids) picked.push_back(corpus.files[i]);

    const auto a = pooling_cdf(model, picked, prefix_frac);
    write_pooling_tables(a, model, dir);
    write_record();
    std::printf("samples %zu, windows %zu, max distinct argmax windows %zu (filters %zu)\n", a.num_samples,
                a.num_windows, *std::max_element(a.distinct_windows.begin(), a.distinct_windows.end()),
                model.hyper.num_filters);
    std::printf("argmax in first %.0f%% of input: %.4f; files shorter than that: %.4f\n", 100 * a.prefix_fraction,
                a.features_in_prefix, a.files_in_prefix);
    return kOk;
  }
};

// ---------------------------------------------------------------------------
// transfer

struct Transfer : Command {
  std::string source, target, manifest, attack, out;
  std::string eps_step = "auto";
  std::string max_file_size = "auto";
  std::size_t budget = 1000;
  std::size_t num_iter = 10;
  std::size_t candidates = 400;
  double eps_ball = std::numeric_limits<double>::infinity();

  void setup(CLI::App& parent) {
    add_common(*this, parent, "transfer", "Replay adversarial samples crafted on one model against another");
    fields.push_back(string_field("source-ckpt", source));
    fields.push_back(string_field("target-ckpt", target));
    fields.push_back(string_field("manifest", manifest));
    fields.push_back(string_field("attack", attack));
    fields.push_back(size_field("budget", budget));
    fields.push_back(string_field("eps-step", eps_step));
    fields.push_back(real_field("eps-ball", eps_ball));
    fields.push_back(size_field("num-iter", num_iter));
    fields.push_back(size_field("candidates", candidates));
    fields.push_back(string_field("max-file-size", max_file_size));
    fields.push_back(string_field("out", out));
    add_flags({{"source-ckpt", "model the samples are crafted against"},
               {"target-ckpt", "model the samples are replayed on"},
               {"manifest", "dataset manifest supplying candidates"},
               {"attack", "attack kind"},
               {"budget", "append budget in bytes"},
               {"out", "report path (default <out-dir>/transfer.csv)"}});
  }

  int run() {
    resolve();
    require(source, "source-ckpt");
    require(target, "target-ckpt");
    require(manifest, "manifest");
    const auto kinds = parse_kinds(attack);
    if (kinds.size() != 1) throw Error(ErrorCode::invalid_config, "transfer takes exactly one attack kind");
    const fs::path report_path = default_path(out, "transfer.csv");
    out = report_path.string();

    const MalConvModel src = load_checkpoint(source);
    const MalConvModel tgt = load_checkpoint(target);
    if (!src.hyper.same_architecture(tgt.hyper))
      throw Error(ErrorCode::incompatible_models, "source and target models have different input contracts");
    const Corpus corpus = load_corpus(manifest);
    AttackConfig cfg;
    cfg.kind = kinds.front();
    cfg.num_bytes = budget;
    cfg.num_iter = num_iter;
    cfg.eps_step = parse_eps_step(eps_step);
    cfg.eps_ball = eps_ball;
    cfg.seed = seed;
    cfg.validate();
    const auto cand = select_candidates(src, corpus, parse_max_file_size(max_file_size, src.hyper), candidates, seed);
    const auto r = transfer_eval(src, tgt, cfg, corpus, cand);
    const auto text = format_transfer_report(r, fs::path(source).stem().string(), fs::path(target).stem().string());
    write_text(report_path, text);
    write_record();
    std::printf("attacked %zu, evaded source %zu, eligible %zu, transferred %zu, rate %.4f\n", r.n_attacked,
                r.n_source_evaded, r.n_eligible, r.n_transfer, r.transfer_rate);
    std::cout << "report " << report_path.string() << '\n';
    return kOk;
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adversarial evaluation of byte-level malware detectors"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, seed_text, out_dir;
  app.add_option("--seed", seed_text, "master seed (default 0)");
  app.add_option("--config", config_path, "key=value file overriding defaults");
  app.add_option("--out-dir", out_dir, "directory for outputs and the effective-config record (default .)");

  GenCorpus gen;
  Train train_cmd;
  Attack attack_cmd;
  AnalyzePooling pooling;
  Transfer transfer;
  gen.setup(app);
  train_cmd.setup(app);
  attack_cmd.setup(app);
  pooling.setup(app);
  transfer.setup(app);
  std::vector<Command*> commands = {&gen, &train_cmd, &attack_cmd, &pooling, &transfer};

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    for (Command* c : commands) {
      if (!c->app->parsed()) continue;
      c->config_path = config_path;
      c->seed_text = seed_text;
      c->out_dir_text = out_dir;
      if (c == &gen) return gen.run();
      if (c == &train_cmd) return train_cmd.run();
      if (c == &attack_cmd) return attack_cmd.run();
      if (c == &pooling) return pooling.run();
      if (c == &transfer) return transfer.run();
    }
  } catch (const maladv::Error& e) {
    std::cerr << "maladv: " << e.what() << '\n';
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "maladv: internal error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
