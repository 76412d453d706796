#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "maladv/attack.hpp"

namespace maladv {

/// One (attack, budget or eps) cell of a success-rate table.
struct EvalRow {
  AttackKind attack = AttackKind::random_append;
  std::size_t budget = 0;  // 0 for slack_fgm
  double eps_step = 0.0;
  double eps_ball = std::numeric_limits<double>::infinity();
  std::size_t n_candidates = 0;
  std::size_t n_success = 0;
  double success_rate = 0.0;  // n_success / n_candidates
  double mean_modified_bytes = 0.0;
  double mean_gradient_evals = 0.0;
  std::string model_id;
  std::uint64_t seed = 0;
  std::size_t n_excluded = 0;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

struct EvalReport {
  std::vector<EvalRow> rows;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

}  // namespace maladv
