#pragma once

// Experimental protocol: candidate selection, success-rate tables over an
// attack grid, max-pool location analysis and transferability.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "maladv/attack.hpp"
#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/report.hpp"
#include "maladv/rng.hpp"
#include "maladv/store.hpp"

namespace maladv {

struct CandidateSet {
  std::vector<std::size_t> sample_ids;  // corpus indices, ascending
  std::vector<double> scores;           // victim score of each original
  std::size_t max_file_size = 0;
  std::size_t count = 0;
  std::uint64_t seed = 0;

  std::size_t size() const { return sample_ids.size(); }
};

/// floor(0.472 * max_len): about 990 KB at the full 2 MiB input.
inline std::size_t default_max_file_size(const Hyperparams& h) { return h.max_len * 472 / 1000; }

/// Test-split malware that is smaller than max_file_size and classified as
/// malware, sampled without replacement.
inline CandidateSet select_candidates(const MalConvModel& model, const Corpus& corpus, std::size_t max_file_size,
                                      std::size_t count, std::uint64_t seed) {
  if (corpus.indices(Split::test).empty()) throw Error(ErrorCode::empty_dataset, "test split is empty");
  std::vector<std::pair<std::size_t, double>> eligible;
  for (std::size_t i : corpus.indices(Split::test, Label::malware)) {
    if (corpus.files[i].size() >= max_file_size) continue;
    const double s = score_bytes(corpus.files[i], model);
    if (s > kDecisionThreshold) eligible.emplace_back(i, s);
  }
  if (eligible.empty()) throw Error(ErrorCode::empty_candidates, "no correctly classified malware under the size cap");
  Rng rng = derive_rng(seed, {0x63616e64});
  std::shuffle(eligible.begin(), eligible.end(), rng);
  if (eligible.size() > count) eligible.resize(count);
  std::sort(eligible.begin(), eligible.end());

  CandidateSet set;
  set.max_file_size = max_file_size;
  set.count = count;
  set.seed = seed;
  for (auto [id, s] : eligible) {
    set.sample_ids.push_back(id);
    set.scores.push_back(s);
  }
  return set;
}

inline double success_rate(std::span<const AttackOutcome> outcomes) {
  if (outcomes.empty()) throw Error(ErrorCode::empty_outcomes, "success rate of an empty outcome list");
  const auto n = std::count_if(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.evaded; });
  return static_cast<double>(n) / static_cast<double>(outcomes.size());
}

// ---------------------------------------------------------------------------
// Attack suite

enum class ExclusionReason { too_large, no_slack, parse_error, no_donor, other };

inline const char* to_string(ExclusionReason r) {
  switch (r) {
    case ExclusionReason::too_large: return "too-large";
    case ExclusionReason::no_slack: return "no-slack";
    case ExclusionReason::parse_error: return "parse-error";
    case ExclusionReason::no_donor: return "no-donor";
    case ExclusionReason::other: return "other";
  }
  return "other";
}

inline ExclusionReason exclusion_reason(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_attackable: return ExclusionReason::too_large;
    case ErrorCode::no_slack: return ExclusionReason::no_slack;
    case ErrorCode::not_a_pe:
    case ErrorCode::truncated_file:
    case ErrorCode::bounds:
    case ErrorCode::malformed_sections: return ExclusionReason::parse_error;
    case ErrorCode::no_donor: return ExclusionReason::no_donor;
    default: return ExclusionReason::other;
  }
}

/// Result of one attack on one candidate: an outcome or an exclusion.
struct CandidateRecord {
  std::size_t cell = 0;       // index into the attack grid
  std::size_t sample_id = 0;  // corpus index
  std::optional<AttackOutcome> outcome;
  std::optional<ExclusionReason> excluded;
  std::string detail;
};

struct SuiteOptions {
  std::string model_id = "model";
  std::size_t jobs = 1;
};

struct SuiteResult {
  EvalReport report;
  std::vector<CandidateRecord> records;  // ordered by (cell, candidate)
  std::vector<AttackConfig> grid;        // with eps_step resolved
};

/// Benign training files the model classifies correctly.
inline DonorPool corpus_donor_pool(const MalConvModel& model, const Corpus& corpus) {
  std::vector<std::span<const std::uint8_t>> files;
  for (std::size_t i : corpus.indices(Split::train, Label::benign)) files.push_back(corpus.files[i]);
  return make_donor_pool(files, model);
}

/// Runs every grid cell against every candidate. Per-candidate generators
/// are derived from (cell seed, cell index, sample id), so the result does
/// not depend on `jobs`.
inline SuiteResult run_attack_suite(const MalConvModel& model, const Corpus& corpus, const CandidateSet& candidates,
                                    std::span<const AttackConfig> grid, const SuiteOptions& options = {}) {
  if (candidates.sample_ids.empty()) throw Error(ErrorCode::empty_candidates, "attack suite needs candidates");
  SuiteResult result;
  const double default_eps = default_eps_step(model);
  for (auto cfg : grid) {
    cfg.validate();
    if (!cfg.eps_step) cfg.eps_step = default_eps;
    result.grid.push_back(cfg);
  }

  DonorPool pool;
  const bool need_pool = std::any_of(grid.begin(), grid.end(), [](auto& c) { return c.kind == AttackKind::benign_append; });
  if (need_pool) pool = corpus_donor_pool(model, corpus);

  const std::size_t n_cand = candidates.size();
  result.records.resize(result.grid.size() * n_cand);
  auto run_task = [&](std::size_t task) {
    const std::size_t cell = task / n_cand;
    const std::size_t id = candidates.sample_ids[task % n_cand];
    const auto& cfg = result.grid[cell];
    CandidateRecord& rec = result.records[task];
    rec.cell = cell;
    rec.sample_id = id;
    Rng rng = derive_rng(cfg.seed, {cell, id});
    try {
      rec.outcome = run_attack(corpus.files[id], cfg, model, rng, &pool);
    } catch (const Error& e) {
      rec.excluded = exclusion_reason(e.code());
      rec.detail = e.what();
    }
  };

  const std::size_t total = result.records.size();
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, total));
  if (jobs == 1) {
    for (std::size_t t = 0; t < total; ++t) run_task(t);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::jthread> workers;
    for (std::size_t j = 0; j < jobs; ++j)
      workers.emplace_back([&] {
        for (std::size_t t = next++; t < total; t = next++) run_task(t);
      });
  }

  for (std::size_t cell = 0; cell < result.grid.size(); ++cell) {
    const auto& cfg = result.grid[cell];
    EvalRow row;
    row.attack = cfg.kind;
    row.budget = is_append(cfg.kind) ? cfg.num_bytes : 0;
    row.eps_step = *cfg.eps_step;
    row.eps_ball = cfg.eps_ball;
    row.model_id = options.model_id;
    row.seed = cfg.seed;
    double modified = 0.0, evals = 0.0;
    for (std::size_t c = 0; c < n_cand; ++c) {
      const auto& rec = result.records[cell * n_cand + c];
      if (!rec.outcome) {
        ++row.n_excluded;
        continue;
      }
      ++row.n_candidates;
      row.n_success += rec.outcome->evaded ? 1 : 0;
      modified += static_cast<double>(rec.outcome->modified_indices.size());
      evals += static_cast<double>(rec.outcome->gradient_evals);
    }
    if (row.n_candidates > 0) {
      const auto n = static_cast<double>(row.n_candidates);
      row.success_rate = static_cast<double>(row.n_success) / n;
      row.mean_modified_bytes = modified / n;
      row.mean_gradient_evals = evals / n;
    }
    result.report.rows.push_back(std::move(row));
  }
  return result;
}

/// File name under which an adversarial sample is emitted.
inline std::string adversarial_file_name(const AttackConfig& cfg, std::size_t cell, std::size_t sample_id) {
  std::ostringstream os;
  os << "cell" << cell << '_' << to_string(cfg.kind) << '_' << sample_id << ".exe";
  return os.str();
}

/// Writes outcomes.csv and every adversarial sample under out_dir/adversarial.
inline void write_suite_outputs(const SuiteResult& result, const Corpus& corpus, const fs::path& out_dir) {
  std::ostringstream os;
  os << "# maladv-outcomes v1: cell,attack,budget,eps_ball,sample,path,score_before,score_after,evaded,"
        "modified_bytes,gradient_evals,iterations,oscillating_bytes,excluded,file\n";
  for (const auto& rec : result.records) {
    const auto& cfg = result.grid[rec.cell];
    os << rec.cell << ',' << to_string(cfg.kind) << ',' << (is_append(cfg.kind) ? cfg.num_bytes : 0) << ','
       << detail::format_double(cfg.eps_ball) << ',' << rec.sample_id << ','
       << corpus.manifest.records[rec.sample_id].path << ',';
    if (rec.outcome) {
      const auto& o = *rec.outcome;
      const std::string name = adversarial_file_name(cfg, rec.cell, rec.sample_id);
      write_file(out_dir / "adversarial" / name, o.adversarial_bytes);
      os << detail::format_double(o.score_before) << ',' << detail::format_double(o.score_after) << ','
         << (o.evaded ? 1 : 0) << ',' << o.modified_indices.size() << ',' << o.gradient_evals << ',' << o.iterations
         << ',' << count_oscillating_bytes(o) << ",," << "adversarial/" << name << '\n';
    } else {
      os << ",,,,,,," << to_string(*rec.excluded) << ",\n";
    }
  }
  write_text(out_dir / "outcomes.csv", os.str());
}

// ---------------------------------------------------------------------------
// Max-pool location analysis

struct PoolingAnalysis {
  std::size_t num_windows = 0;
  std::size_t num_samples = 0;
  /// location_cdf[w]: fraction of (sample, filter) argmax entries at window <= w.
  std::vector<double> location_cdf;
  /// size_cdf[w]: fraction of files that fit in windows 0..w; the extra last
  /// entry also counts files longer than max_len.
  std::vector<double> size_cdf;
  std::vector<std::size_t> distinct_windows;  // per sample
  double prefix_fraction = 0.25;
  std::size_t prefix_windows = 0;
  double features_in_prefix = 0.0;  // share of argmax entries in the first prefix_windows
  double files_in_prefix = 0.0;     // share of files shorter than prefix_fraction * max_len
  double files_too_large = 0.0;     // share of files with no room to append (size >= max_len)
};

inline PoolingAnalysis pooling_cdf(const MalConvModel& model, std::span<const std::span<const std::uint8_t>> samples,
                                   double prefix_fraction = 0.25) {
  if (samples.size() < 2) throw Error(ErrorCode::empty_dataset, "pooling analysis needs at least 2 samples");
  const auto& h = model.hyper;
  const std::size_t W = h.num_windows();
  PoolingAnalysis a;
  a.num_windows = W;
  a.num_samples = samples.size();
  a.prefix_fraction = prefix_fraction;
  a.prefix_windows = static_cast<std::size_t>(std::llround(prefix_fraction * static_cast<double>(W)));

  std::vector<std::size_t> loc_hist(W, 0), size_hist(W + 1, 0);
  std::size_t short_files = 0, too_large = 0, in_prefix = 0;
  for (auto s : samples) {
    const auto argmax = maxpool_argmax_bytes(s, model);
    for (auto w : argmax) {
      ++loc_hist[w];
      if (w < a.prefix_windows) ++in_prefix;
    }
    a.distinct_windows.push_back(std::set<std::size_t>(argmax.begin(), argmax.end()).size());
    const std::size_t windows_needed = (s.size() + h.stride - 1) / h.stride;
    size_hist[s.size() > h.max_len ? W : (windows_needed == 0 ? 0 : windows_needed - 1)]++;
    if (static_cast<double>(s.size()) < prefix_fraction * static_cast<double>(h.max_len)) ++short_files;
    if (s.size() >= h.max_len) ++too_large;
  }

  const double n_entries = static_cast<double>(samples.size() * h.num_filters);
  const double n_files = static_cast<double>(samples.size());
  std::size_t acc = 0;
  for (std::size_t w = 0; w < W; ++w) {
    acc += loc_hist[w];
    a.location_cdf.push_back(w + 1 == W ? 1.0 : static_cast<double>(acc) / n_entries);
  }
  acc = 0;
  for (std::size_t w = 0; w <= W; ++w) {
    acc += size_hist[w];
    a.size_cdf.push_back(w == W ? 1.0 : static_cast<double>(acc) / n_files);
  }
  a.features_in_prefix = static_cast<double>(in_prefix) / n_entries;
  a.files_in_prefix = static_cast<double>(short_files) / n_files;
  a.files_too_large = static_cast<double>(too_large) / n_files;
  return a;
}

/// Column-oriented CDF table plus a summary file.
inline void write_pooling_tables(const PoolingAnalysis& a, const MalConvModel& model, const fs::path& out_dir) {
  std::ostringstream cdf;
  cdf << "# maladv-pooling v1: window,byte_offset,size_cdf,location_cdf\n";
  for (std::size_t w = 0; w < a.num_windows; ++w)
    cdf << w << ',' << w * model.hyper.stride << ',' << detail::format_double(a.size_cdf[w]) << ','
        << detail::format_double(a.location_cdf[w]) << '\n';
  cdf << "overflow," << model.hyper.max_len << ',' << detail::format_double(a.size_cdf.back()) << ",1\n";
  write_text(out_dir / "pooling_cdf.csv", cdf.str());

  std::ostringstream summary;
  summary << "num_samples=" << a.num_samples << '\n'
          << "num_windows=" << a.num_windows << '\n'
          << "num_filters=" << model.hyper.num_filters << '\n'
          << "max_distinct_windows=" << *std::max_element(a.distinct_windows.begin(), a.distinct_windows.end()) << '\n'
          << "prefix_fraction=" << detail::format_double(a.prefix_fraction) << '\n'
          << "prefix_windows=" << a.prefix_windows << '\n'
          << "features_in_prefix=" << detail::format_double(a.features_in_prefix) << '\n'
          << "files_in_prefix=" << detail::format_double(a.files_in_prefix) << '\n'
          << "files_too_large=" << detail::format_double(a.files_too_large) << '\n';
  write_text(out_dir / "pooling_summary.txt", summary.str());
}

// ---------------------------------------------------------------------------
// Transferability

struct TransferReport {
  AttackKind attack = AttackKind::fgm_append;
  std::size_t n_attacked = 0;
  std::size_t n_excluded = 0;
  std::size_t n_source_evaded = 0;
  std::size_t n_eligible = 0;  // evaded the source and the original is detected by the target
  std::size_t n_transfer = 0;  // eligible and the adversarial sample also evades the target
  double transfer_rate = 0.0;  // n_transfer / n_eligible, 0 when nothing is eligible
};

/// Crafts samples against `source` and replays the ones that evade it on
/// `target`, counting only originals the target detects.
inline TransferReport transfer_eval(const MalConvModel& source, const MalConvModel& target, const AttackConfig& cfg,
                                    const Corpus& corpus, const CandidateSet& candidates) {
  if (!source.hyper.same_architecture(target.hyper))
    throw Error(ErrorCode::incompatible_models, "source and target models have different input contracts");
  cfg.validate();
  DonorPool pool;
  if (cfg.kind == AttackKind::benign_append) pool = corpus_donor_pool(source, corpus);

  TransferReport r;
  r.attack = cfg.kind;
  for (std::size_t id : candidates.sample_ids) {
    Rng rng = derive_rng(cfg.seed, {0x7866, id});
    std::optional<AttackOutcome> o;
    try {
      o = run_attack(corpus.files[id], cfg, source, rng, &pool);
    } catch (const Error&) {
      ++r.n_excluded;
      continue;
    }
    ++r.n_attacked;
    if (!o->evaded) continue;
    ++r.n_source_evaded;
    if (!(score_bytes(corpus.files[id], target) > kDecisionThreshold)) continue;
    ++r.n_eligible;
    if (score_bytes(o->adversarial_bytes, target) < kDecisionThreshold) ++r.n_transfer;
  }
  if (r.n_eligible > 0) r.transfer_rate = static_cast<double>(r.n_transfer) / static_cast<double>(r.n_eligible);
  return r;
}

inline std::string format_transfer_report(const TransferReport& r, const std::string& source_id,
                                          const std::string& target_id) {
  std::ostringstream os;
  os << "# maladv-transfer v1: attack,source,target,n_attacked,n_excluded,n_source_evaded,n_eligible,n_transfer,"
        "transfer_rate\n"
     << to_string(r.attack) << ',' << source_id << ',' << target_id << ',' << r.n_attacked << ',' << r.n_excluded
     << ',' << r.n_source_evaded << ',' << r.n_eligible << ',' << r.n_transfer << ','
     << detail::format_double(r.transfer_rate) << '\n';
  return os.str();
}

}  // namespace maladv
