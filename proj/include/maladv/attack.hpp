#pragma once

// Evasion attacks against the byte CNN. Gradient-based variants work in
// embedding space and map rows back to bytes with ByteLattice.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "maladv/error.hpp"
#include "maladv/model.hpp"
#include "maladv/pefile.hpp"
#include "maladv/rng.hpp"

namespace maladv {

enum class AttackKind { random_append, benign_append, fgm_append, gradient_append, slack_fgm };

inline constexpr std::array<AttackKind, 5> kAllAttackKinds = {AttackKind::random_append, AttackKind::benign_append,
                                                              AttackKind::fgm_append, AttackKind::gradient_append,
                                                              AttackKind::slack_fgm};

inline std::string_view to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::random_append: return "random_append";
    case AttackKind::benign_append: return "benign_append";
    case AttackKind::fgm_append: return "fgm_append";
    case AttackKind::gradient_append: return "gradient_append";
    case AttackKind::slack_fgm: return "slack_fgm";
  }
  return "unknown";
}

inline std::optional<AttackKind> parse_attack_kind(std::string_view name) {
  for (auto k : kAllAttackKinds)
    if (to_string(k) == name) return k;
  return std::nullopt;
}

inline bool is_append(AttackKind kind) { return kind != AttackKind::slack_fgm; }

struct AttackConfig {
  AttackKind kind = AttackKind::fgm_append;
  std::size_t num_bytes = 500;  // append budget
  std::size_t num_iter = 10;    // gradient_append only
  /// Per-coordinate FGM step; unset means default_eps_step(model).
  std::optional<double> eps_step;
  /// L2 acceptance radius around the original byte's embedding (slack_fgm).
  double eps_ball = std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;

  void validate() const {
    auto fail = [](const std::string& msg) { throw Error(ErrorCode::invalid_config, msg); };
    if (is_append(kind) && num_bytes == 0) fail("num_bytes must be >= 1 for append attacks");
    if (kind == AttackKind::gradient_append && num_iter == 0) fail("num_iter must be >= 1");
    if (eps_step && !(*eps_step > 0)) fail("eps_step must be > 0");
    if (!(eps_ball >= 0)) fail("eps_ball must be >= 0");
  }
};

struct AttackOutcome {
  std::vector<std::uint8_t> adversarial_bytes;
  std::vector<std::size_t> modified_indices;  // ascending
  double score_before = 0.0;
  double score_after = 0.0;
  bool evaded = false;  // score_after < 0.5
  std::size_t gradient_evals = 0;
  std::size_t iterations = 0;    // gradient_append loop count
  bool budget_clipped = false;   // append budget reduced to fit max_len
  std::size_t slack_size = 0;    // |m| for slack_fgm
  /// gradient_append: appended bytes after each iteration, starting with the initial padding.
  std::vector<std::vector<std::uint8_t>> byte_history;
};

/// The 256 byte embeddings as a point set in embedding space.
class ByteLattice {
 public:
  explicit ByteLattice(const MalConvModel& model) : dim_(model.hyper.embed_dim), points_(256 * dim_) {
    for (std::size_t b = 0; b < 256; ++b) {
      const auto row = model.embedding_row(b);
      std::copy(row.begin(), row.end(), points_.begin() + b * dim_);
    }
  }

  std::size_t dim() const { return dim_; }
  std::span<const double> point(std::size_t b) const { return {points_.data() + b * dim_, dim_}; }

  double squared_distance(std::span<const double> v, std::size_t b) const {
    const double* p = points_.data() + b * dim_;
    double s = 0.0;
    for (std::size_t d = 0; d < dim_; ++d) {
      const double diff = v[d] - p[d];
      s += diff * diff;
    }
    return s;
  }

  /// argmin over bytes 0..255 of the L2 distance; ties go to the lowest byte.
  std::uint8_t nearest(std::span<const double> v) const {
    std::size_t best = 0;
    double best_d = squared_distance(v, 0);
    for (std::size_t b = 1; b < 256; ++b) {
      const double d = squared_distance(v, b);
      if (d < best_d) {
        best_d = d;
        best = b;
      }
    }
    return static_cast<std::uint8_t>(best);
  }

  /// Nearest byte to origin + step * direction among bytes lying strictly
  /// ahead of origin along `direction` (unit length). nullopt if none does.
  std::optional<std::uint8_t> nearest_along(std::span<const double> origin, std::span<const double> direction,
                                            double step) const {
    std::vector<double> target(dim_);
    for (std::size_t d = 0; d < dim_; ++d) target[d] = origin[d] + step * direction[d];
    std::optional<std::uint8_t> best;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t b = 0; b < 256; ++b) {
      const double* p = points_.data() + b * dim_;
      double ahead = 0.0;
      for (std::size_t d = 0; d < dim_; ++d) ahead += (p[d] - origin[d]) * direction[d];
      if (!(ahead > 0)) continue;
      const double dist = squared_distance(target, b);
      if (dist < best_d) {
        best_d = dist;
        best = static_cast<std::uint8_t>(b);
      }
    }
    return best;
  }

 private:
  std::size_t dim_;
  std::vector<double> points_;
};

/// Maps every row of `e` to its nearest byte embedding. The padding token
/// is never a candidate.
inline std::vector<std::uint8_t> embedding_mapping(const EmbeddingMatrix& e, const MalConvModel& model) {
  const ByteLattice lattice(model);
  std::vector<std::uint8_t> out(e.rows());
  for (std::size_t i = 0; i < e.rows(); ++i) out[i] = lattice.nearest(e.row(i));
  return out;
}

/// Standard deviation of the byte embedding entries; the default FGM step.
inline double default_eps_step(const MalConvModel& model) {
  const std::size_t n = 256 * model.hyper.embed_dim;
  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += model.embedding[i];
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i) var += (model.embedding[i] - mean) * (model.embedding[i] - mean);
  return std::sqrt(var / static_cast<double>(n));
}

/// Benign files an attacker may borrow bytes from.
struct DonorPool {
  std::vector<std::span<const std::uint8_t>> files;
};

/// Keeps only the files the model classifies as benign.
inline DonorPool make_donor_pool(std::span<const std::span<const std::uint8_t>> benign_files, const MalConvModel& model) {
  DonorPool pool;
  for (auto f : benign_files)
    if (score_bytes(f, model) < kDecisionThreshold) pool.files.push_back(f);
  return pool;
}

namespace detail {

struct AppendPlan {
  std::size_t original = 0;
  std::size_t budget = 0;
  bool clipped = false;
};

inline AppendPlan plan_append(std::size_t original, std::size_t num_bytes, const Hyperparams& h) {
  if (original >= h.max_len)
    throw Error(ErrorCode::not_attackable, "input of " + std::to_string(original) +
                                               " bytes leaves no room below max_len " + std::to_string(h.max_len));
  AppendPlan plan{original, std::min(num_bytes, h.max_len - original), false};
  plan.clipped = plan.budget < num_bytes;
  return plan;
}

inline AttackOutcome append_outcome(std::span<const std::uint8_t> x0, std::vector<std::uint8_t> adv,
                                    const AppendPlan& plan, const MalConvModel& model) {
  AttackOutcome out;
  out.score_before = score_bytes(x0, model);
  out.adversarial_bytes = std::move(adv);
  out.modified_indices.resize(plan.budget);
  for (std::size_t i = 0; i < plan.budget; ++i) out.modified_indices[i] = plan.original + i;
  out.score_after = score_bytes(out.adversarial_bytes, model);
  out.evaded = out.score_after < kDecisionThreshold;
  out.budget_clipped = plan.clipped;
  return out;
}

inline std::vector<std::uint8_t> pad_random(std::span<const std::uint8_t> x0, std::size_t count, Rng& rng) {
  std::vector<std::uint8_t> x(x0.begin(), x0.end());
  x.reserve(x0.size() + count);
  for (std::size_t i = 0; i < count; ++i) x.push_back(random_byte(rng));
  return x;
}

inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

/// One FGM step on row i: e[i] - eps * sign(grad[i]). Returns false when the
/// gradient row is zero and the row does not move.
inline bool fgm_row(const EmbeddingMatrix& e, const GradientMatrix& g, std::size_t i, double eps,
                    std::vector<double>& out) {
  out.resize(e.cols());
  bool moved = false;
  for (std::size_t d = 0; d < e.cols(); ++d) {
    const double s = sign(g(i, d));
    moved |= s != 0.0;
    out[d] = e(i, d) - eps * s;
  }
  return moved;
}

inline double resolve_eps_step(const AttackConfig& cfg, const MalConvModel& model) {
  return cfg.eps_step ? *cfg.eps_step : default_eps_step(model);
}

}  // namespace detail

/// Appends i.i.d. uniform bytes.
inline AttackOutcome random_append(std::span<const std::uint8_t> x0, const AttackConfig& cfg, const MalConvModel& model,
                                   Rng& rng) {
  cfg.validate();
  const auto plan = detail::plan_append(x0.size(), cfg.num_bytes, model.hyper);
  return detail::append_outcome(x0, detail::pad_random(x0, plan.budget, rng), plan, model);
}

/// Appends the leading bytes of one donor drawn uniformly from the pool
/// files long enough to supply the budget.
inline AttackOutcome benign_append(std::span<const std::uint8_t> x0, const DonorPool& pool, const AttackConfig& cfg,
                                   const MalConvModel& model, Rng& rng) {
  cfg.validate();
  const auto plan = detail::plan_append(x0.size(), cfg.num_bytes, model.hyper);
  std::vector<std::span<const std::uint8_t>> eligible;
  for (auto f : pool.files)
    if (f.size() >= plan.budget) eligible.push_back(f);
  if (eligible.empty())
    throw Error(ErrorCode::no_donor, "no benign donor with at least " + std::to_string(plan.budget) + " bytes");
  const auto donor = eligible[std::uniform_int_distribution<std::size_t>(0, eligible.size() - 1)(rng)];
  std::vector<std::uint8_t> x(x0.begin(), x0.end());
  x.insert(x.end(), donor.begin(), donor.begin() + static_cast<std::ptrdiff_t>(plan.budget));
  return detail::append_outcome(x0, std::move(x), plan, model);
}

/// One-shot FGM on randomly initialized appended bytes: a single gradient of
/// the benign-target loss, one signed step, then nearest-byte mapping of the
/// appended rows only.
inline AttackOutcome fgm_append(std::span<const std::uint8_t> x0, const AttackConfig& cfg, const MalConvModel& model,
                                Rng& rng) {
  cfg.validate();
  const auto plan = detail::plan_append(x0.size(), cfg.num_bytes, model.hyper);
  const double eps = detail::resolve_eps_step(cfg, model);
  auto x = detail::pad_random(x0, plan.budget, rng);

  const auto e = embed(tokenize(x, model.hyper), model);
  const auto grad = input_gradient(e, Label::benign, model);
  const ByteLattice lattice(model);
  std::vector<double> row;
  for (std::size_t i = plan.original; i < plan.original + plan.budget; ++i)
    if (detail::fgm_row(e, grad, i, eps, row)) x[i] = lattice.nearest(row);

  auto out = detail::append_outcome(x0, std::move(x), plan, model);
  out.gradient_evals = 1;
  return out;
}

/// Iterative append attack: every iteration recomputes the input gradient
/// and moves each appended byte to the closest byte embedding lying ahead
/// along its negative gradient direction. Stops on evasion or after
/// num_iter iterations.
inline AttackOutcome gradient_append(std::span<const std::uint8_t> x0, const AttackConfig& cfg,
                                     const MalConvModel& model, Rng& rng) {
  cfg.validate();
  const auto plan = detail::plan_append(x0.size(), cfg.num_bytes, model.hyper);
  const double eta = detail::resolve_eps_step(cfg, model);
  auto x = detail::pad_random(x0, plan.budget, rng);
  const ByteLattice lattice(model);
  const std::size_t D = model.hyper.embed_dim;

  std::vector<std::vector<std::uint8_t>> history;
  history.emplace_back(x.begin() + static_cast<std::ptrdiff_t>(plan.original), x.end());
  std::size_t iterations = 0;
  std::vector<double> direction(D);
  while (iterations < cfg.num_iter) {
    ++iterations;
    const auto e = embed(tokenize(x, model.hyper), model);
    const auto grad = input_gradient(e, Label::benign, model);
    for (std::size_t i = plan.original; i < plan.original + plan.budget; ++i) {
      double norm = 0.0;
      for (std::size_t d = 0; d < D; ++d) norm += grad(i, d) * grad(i, d);
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      for (std::size_t d = 0; d < D; ++d) direction[d] = -grad(i, d) / norm;
      if (auto b = lattice.nearest_along(e.row(i), direction, eta)) x[i] = *b;
    }
    history.emplace_back(x.begin() + static_cast<std::ptrdiff_t>(plan.original), x.end());
    if (score_bytes(x, model) < kDecisionThreshold) break;
  }

  auto out = detail::append_outcome(x0, std::move(x), plan, model);
  out.gradient_evals = iterations;
  out.iterations = iterations;
  out.byte_history = std::move(history);
  return out;
}

/// One FGM step over the whole input, applied only at slack indices below
/// max_len. A slack byte takes its mapped value only when that byte's
/// embedding lies within eps_ball (L2) of the original byte's embedding.
inline AttackOutcome slack_fgm(std::span<const std::uint8_t> x0, const AttackConfig& cfg, const MalConvModel& model) {
  cfg.validate();
  const PEFile pe = parse_pe(x0);
  std::vector<std::size_t> m = slack_indices(pe);
  std::erase_if(m, [&](std::size_t idx) { return idx >= model.hyper.max_len; });
  if (m.empty()) throw Error(ErrorCode::no_slack, "no slack bytes below max_len");

  const double eps = detail::resolve_eps_step(cfg, model);
  const auto e = embed(tokenize(x0, model.hyper), model);
  const auto grad = input_gradient(e, Label::benign, model);
  const ByteLattice lattice(model);
  const double ball_sq = cfg.eps_ball * cfg.eps_ball;

  AttackOutcome out;
  out.adversarial_bytes.assign(x0.begin(), x0.end());
  out.slack_size = m.size();
  std::vector<double> row;
  for (std::size_t idx : m) {
    if (!detail::fgm_row(e, grad, idx, eps, row)) continue;
    const std::uint8_t b = lattice.nearest(row);
    if (b == x0[idx]) continue;
    if (lattice.squared_distance(e.row(idx), b) > ball_sq) continue;
    out.adversarial_bytes[idx] = b;
    out.modified_indices.push_back(idx);
  }
  out.score_before = score_bytes(x0, model);
  out.score_after = score_bytes(out.adversarial_bytes, model);
  out.evaded = out.score_after < kDecisionThreshold;
  out.gradient_evals = 1;
  return out;
}

/// Runs the attack named by cfg.kind. benign_append requires a donor pool.
inline AttackOutcome run_attack(std::span<const std::uint8_t> x0, const AttackConfig& cfg, const MalConvModel& model,
                                Rng& rng, const DonorPool* pool = nullptr) {
  switch (cfg.kind) {
    case AttackKind::random_append: return random_append(x0, cfg, model, rng);
    case AttackKind::benign_append:
      if (!pool) throw Error(ErrorCode::no_donor, "benign_append needs a donor pool");
      return benign_append(x0, *pool, cfg, model, rng);
    case AttackKind::fgm_append: return fgm_append(x0, cfg, model, rng);
    case AttackKind::gradient_append: return gradient_append(x0, cfg, model, rng);
    case AttackKind::slack_fgm: return slack_fgm(x0, cfg, model);
  }
  throw Error(ErrorCode::invalid_config, "unknown attack kind");
}

/// Smallest period p in [2, max_period] such that the last repeats * p
/// entries of `trace` cycle with period p without being constant; 0 if none.
inline std::size_t oscillation_period(std::span<const std::uint8_t> trace, std::size_t max_period = 8,
                                      std::size_t repeats = 2) {
  for (std::size_t p = 2; p <= max_period; ++p) {
    const std::size_t window = p * repeats;
    if (window > trace.size()) break;
    const auto tail = trace.subspan(trace.size() - window);
    bool periodic = true;
    for (std::size_t i = p; i < window && periodic; ++i) periodic = tail[i] == tail[i - p];
    const bool constant = std::all_of(tail.begin(), tail.end(), [&](auto v) { return v == tail[0]; });
    if (periodic && !constant) return p;
  }
  return 0;
}

/// Appended positions whose value history ends in a cycle.
inline std::size_t count_oscillating_bytes(const AttackOutcome& outcome, std::size_t max_period = 8,
                                           std::size_t repeats = 2) {
  if (outcome.byte_history.empty()) return 0;
  const std::size_t width = outcome.byte_history.front().size();
  std::vector<std::uint8_t> trace(outcome.byte_history.size());
  std::size_t count = 0;
  for (std::size_t j = 0; j < width; ++j) {
    for (std::size_t t = 0; t < trace.size(); ++t) trace[t] = outcome.byte_history[t][j];
    if (oscillation_period(trace, max_period, repeats) != 0) ++count;
  }
  return count;
}

}  // namespace maladv
