#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>

#include "maladv/attack.hpp"
#include "test_util.hpp"

using namespace maladv;
using maladv::test::random_bytes;
using maladv::test::tiny_hyper;

namespace {

/// Exhaustive nearest byte with an independent distance loop.
std::uint8_t scan_nearest(std::span<const double> v, const MalConvModel& m) {
  int best = -1;
  double best_d = INFINITY;
  for (int b = 0; b < 256; ++b) {
    double d = 0;
    for (std::size_t k = 0; k < v.size(); ++k) {
      const double diff = v[k] - m.embedding[b * m.hyper.embed_dim + k];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = b;
    }
  }
  return static_cast<std::uint8_t>(best);
}

/// Layout large enough for real PE headers, still cheap to evaluate.
Hyperparams pe_hyper(std::uint64_t seed) {
  Hyperparams h;
  h.max_len = 4096;
  h.embed_dim = 4;
  h.kernel_size = 32;
  h.stride = 32;
  h.num_filters = 6;
  h.hidden_units = 4;
  h.seed = seed;
  return h;
}

std::vector<std::uint8_t> synthetic_pe(std::uint64_t seed, Label label = Label::malware) {
  Rng rng(seed);
  SynthConfig c;
  c.max_sections = 3;
  c.max_payload = 900;
  return generate_synthetic_pe(c, label, rng).bytes;
}

AttackConfig config(AttackKind kind, std::size_t bytes = 16) {
  AttackConfig c;
  c.kind = kind;
  c.num_bytes = bytes;
  return c;
}

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::io;
}

void expect_prefix(const AttackOutcome& o, std::span<const std::uint8_t> x0, std::size_t budget) {
  ASSERT_EQ(o.adversarial_bytes.size(), x0.size() + budget);
  EXPECT_TRUE(std::equal(x0.begin(), x0.end(), o.adversarial_bytes.begin()));
  ASSERT_EQ(o.modified_indices.size(), budget);
  for (std::size_t i = 0; i < budget; ++i) EXPECT_EQ(o.modified_indices[i], x0.size() + i);
  EXPECT_EQ(o.evaded, o.score_after < 0.5);
}

}  // namespace

TEST(AttackKind, NamesRoundTrip) {
  for (auto k : kAllAttackKinds) EXPECT_EQ(parse_attack_kind(to_string(k)), k);
  EXPECT_FALSE(parse_attack_kind("fgm"));
}

TEST(AttackConfig, Validation) {
  auto c = config(AttackKind::random_append, 0);
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::invalid_config);
  c = config(AttackKind::gradient_append);
  c.num_iter = 0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::invalid_config);
  c = config(AttackKind::fgm_append);
  c.eps_step = 0.0;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::invalid_config);
  c = config(AttackKind::slack_fgm, 0);
  c.eps_ball = -1;
  EXPECT_EQ(code_of([&] { c.validate(); }), ErrorCode::invalid_config);
  c.eps_ball = 0;
  EXPECT_NO_THROW(c.validate());
}

TEST(EmbeddingMapping, MatchesExhaustiveScan) {
  const auto m = MalConvModel::initialize(tiny_hyper(31));
  Rng rng(31);
  std::normal_distribution<double> n(0.0, 1.5);
  EmbeddingMatrix e(1000, m.hyper.embed_dim);
  for (auto& v : e.values()) v = n(rng);
  const auto mapped = embedding_mapping(e, m);
  for (std::size_t i = 0; i < e.rows(); ++i) EXPECT_EQ(mapped[i], scan_nearest(e.row(i), m)) << i;
}

TEST(EmbeddingMapping, ExactEmbeddingReturnsItsByte) {
  const auto m = MalConvModel::initialize(tiny_hyper(32));
  std::vector<Token> all(256);
  std::iota(all.begin(), all.end(), Token{0});
  const auto mapped = embedding_mapping(embed(all, m), m);
  for (std::size_t b = 0; b < 256; ++b) EXPECT_EQ(mapped[b], b);
}

TEST(EmbeddingMapping, NeverReturnsPadding) {
  const auto m = MalConvModel::initialize(tiny_hyper(33));
  std::vector<Token> pad(3, kPaddingToken);
  const auto e = embed(pad, m);  // rows exactly at the padding embedding
  for (auto b : embedding_mapping(e, m)) EXPECT_EQ(b, scan_nearest(e.row(0), m));
}

TEST(EmbeddingMapping, TiesGoToLowestByte) {
  auto m = MalConvModel::zeros(tiny_hyper());
  EmbeddingMatrix e(1, m.hyper.embed_dim);
  EXPECT_EQ(embedding_mapping(e, m)[0], 0);
}

TEST(DefaultEpsStep, IsEmbeddingStandardDeviation) {
  const auto m = MalConvModel::initialize(tiny_hyper(34));
  double s = 0, s2 = 0;
  const std::size_t n = 256 * m.hyper.embed_dim;
  for (std::size_t i = 0; i < n; ++i) {
    s += m.embedding[i];
    s2 += static_cast<double>(m.embedding[i]) * m.embedding[i];
  }
  const double mean = s / n;
  EXPECT_NEAR(default_eps_step(m), std::sqrt(s2 / n - mean * mean), 1e-9);
}

TEST(RandomAppend, AppendsAndPreservesPrefix) {
  const auto m = MalConvModel::initialize(tiny_hyper(1));
  const auto x0 = random_bytes(30, 1);
  Rng rng(5);
  const auto o = random_append(x0, config(AttackKind::random_append, 4), m, rng);
  expect_prefix(o, x0, 4);
  EXPECT_EQ(o.gradient_evals, 0u);
  EXPECT_FALSE(o.budget_clipped);
}

TEST(RandomAppend, DeterministicForSeed) {
  const auto m = MalConvModel::initialize(tiny_hyper(1));
  const auto x0 = random_bytes(30, 1);
  Rng a(9), b(9);
  EXPECT_EQ(random_append(x0, config(AttackKind::random_append), m, a).adversarial_bytes,
            random_append(x0, config(AttackKind::random_append), m, b).adversarial_bytes);
}

TEST(RandomAppend, SizeLimits) {
  const auto m = MalConvModel::initialize(tiny_hyper(1));
  Rng rng(1);
  const auto full = random_bytes(m.hyper.max_len, 2);
  EXPECT_EQ(code_of([&] { random_append(full, config(AttackKind::random_append), m, rng); }),
            ErrorCode::not_attackable);
  const auto near_full = random_bytes(m.hyper.max_len - 3, 2);
  const auto o = random_append(near_full, config(AttackKind::random_append, 10), m, rng);
  EXPECT_TRUE(o.budget_clipped);
  expect_prefix(o, near_full, 3);
}

TEST(BenignAppend, CopiesDonorPrefix) {
  const auto m = MalConvModel::initialize(tiny_hyper(2));
  const auto x0 = random_bytes(20, 3);
  const auto donor = random_bytes(40, 4);
  DonorPool pool{{donor}};
  Rng rng(1);
  const auto o = benign_append(x0, pool, config(AttackKind::benign_append, 10), m, rng);
  expect_prefix(o, x0, 10);
  EXPECT_TRUE(std::equal(donor.begin(), donor.begin() + 10, o.adversarial_bytes.begin() + 20));
}

TEST(BenignAppend, NoDonorLongEnough) {
  const auto m = MalConvModel::initialize(tiny_hyper(2));
  const auto x0 = random_bytes(20, 3);
  const auto shorty = random_bytes(5, 4);
  DonorPool pool{{shorty}};
  Rng rng(1);
  EXPECT_EQ(code_of([&] { benign_append(x0, pool, config(AttackKind::benign_append, 10), m, rng); }),
            ErrorCode::no_donor);
  EXPECT_EQ(code_of([&] { run_attack(x0, config(AttackKind::benign_append), m, rng, nullptr); }),
            ErrorCode::no_donor);
}

TEST(DonorPool, KeepsOnlyFilesClassifiedBenign) {
  auto m = MalConvModel::zeros(tiny_hyper());
  const auto f = random_bytes(10, 1);
  std::vector<std::span<const std::uint8_t>> files = {f};
  m.fc_out_bias[0] = 1.0f;
  EXPECT_TRUE(make_donor_pool(files, m).files.empty());
  m.fc_out_bias[0] = -1.0f;
  EXPECT_EQ(make_donor_pool(files, m).files.size(), 1u);
}

TEST(FgmAppend, ZeroGradientKeepsInitialPadding) {
  const auto m = MalConvModel::zeros(tiny_hyper());
  const auto x0 = random_bytes(25, 5);
  Rng a(77), b(77);
  const auto fgm = fgm_append(x0, config(AttackKind::fgm_append, 12), m, a);
  const auto rnd = random_append(x0, config(AttackKind::random_append, 12), m, b);
  EXPECT_EQ(fgm.adversarial_bytes, rnd.adversarial_bytes);
  EXPECT_EQ(fgm.gradient_evals, 1u);
}

TEST(FgmAppend, OneShotStepIsDiscretizedExactly) {
  for (std::uint64_t seed = 40; seed < 45; ++seed) {
    const auto m = MalConvModel::initialize(tiny_hyper(seed));
    const auto x0 = random_bytes(40, seed);
    auto cfg = config(AttackKind::fgm_append, 30);
    Rng a(seed), b(seed);
    const auto o = fgm_append(x0, cfg, m, a);
    expect_prefix(o, x0, 30);
    EXPECT_EQ(o.gradient_evals, 1u);

    // Rebuild the continuous update from the same random start.
    const auto start = random_append(x0, config(AttackKind::random_append, 30), m, b).adversarial_bytes;
    const auto e = embed(tokenize(start, m.hyper), m);
    const auto g = input_gradient(e, Label::benign, m);
    const double eps = default_eps_step(m);
    for (std::size_t i = 40; i < 70; ++i) {
      std::vector<double> row(m.hyper.embed_dim);
      bool moved = false;
      for (std::size_t d = 0; d < row.size(); ++d) {
        const double s = g(i, d) > 0 ? 1 : (g(i, d) < 0 ? -1 : 0);
        moved |= s != 0;
        row[d] = e(i, d) - eps * s;
      }
      EXPECT_EQ(o.adversarial_bytes[i], moved ? scan_nearest(row, m) : start[i]) << "row " << i;
    }
  }
}

TEST(GradientAppend, SingleIteration) {
  const auto m = MalConvModel::initialize(tiny_hyper(50));
  const auto x0 = random_bytes(30, 50);
  auto cfg = config(AttackKind::gradient_append, 20);
  cfg.num_iter = 1;
  Rng a(3), b(3);
  const auto o = gradient_append(x0, cfg, m, a);
  expect_prefix(o, x0, 20);
  EXPECT_EQ(o.iterations, 1u);
  EXPECT_EQ(o.gradient_evals, 1u);
  ASSERT_EQ(o.byte_history.size(), 2u);
  const auto start = random_append(x0, config(AttackKind::random_append, 20), m, b).adversarial_bytes;
  EXPECT_TRUE(std::equal(o.byte_history[0].begin(), o.byte_history[0].end(), start.begin() + 30));
  EXPECT_TRUE(std::equal(o.byte_history[1].begin(), o.byte_history[1].end(), o.adversarial_bytes.begin() + 30));
}

TEST(GradientAppend, StopsAtFirstEvadingIteration) {
  auto m = MalConvModel::zeros(tiny_hyper());
  m.fc_out_bias[0] = -2.0f;  // everything already scores benign
  const auto x0 = random_bytes(30, 51);
  auto cfg = config(AttackKind::gradient_append, 10);
  cfg.num_iter = 7;
  Rng rng(1);
  const auto o = gradient_append(x0, cfg, m, rng);
  EXPECT_EQ(o.iterations, 1u);
  EXPECT_TRUE(o.evaded);
}

TEST(GradientAppend, CostBoundAndMovesAhead) {
  for (std::uint64_t seed = 52; seed < 56; ++seed) {
    auto m = MalConvModel::initialize(tiny_hyper(seed));
    m.fc_out_bias[0] = 50.0f;  // never evades: runs every iteration
    const auto x0 = random_bytes(30, seed);
    auto cfg = config(AttackKind::gradient_append, 15);
    cfg.num_iter = 4;
    Rng rng(seed);
    const auto o = gradient_append(x0, cfg, m, rng);
    EXPECT_EQ(o.iterations, 4u);
    EXPECT_LE(o.gradient_evals, cfg.num_bytes * cfg.num_iter);
    EXPECT_EQ(o.byte_history.size(), 5u);
  }
}

TEST(Oscillation, DetectsPlantedCycles) {
  const std::vector<std::uint8_t> two = {9, 1, 2, 1, 2, 1, 2};
  const std::vector<std::uint8_t> three = {5, 1, 2, 3, 1, 2, 3};
  const std::vector<std::uint8_t> flat = {4, 4, 4, 4, 4};
  const std::vector<std::uint8_t> drift = {1, 2, 3, 4, 5, 6};
  EXPECT_EQ(oscillation_period(two), 2u);
  EXPECT_EQ(oscillation_period(three), 3u);
  EXPECT_EQ(oscillation_period(flat), 0u);
  EXPECT_EQ(oscillation_period(drift), 0u);

  AttackOutcome o;
  o.byte_history = {{1, 7}, {2, 7}, {1, 8}, {2, 9}};
  EXPECT_EQ(count_oscillating_bytes(o), 1u);
}

TEST(SlackFgm, ZeroBallChangesNothing) {
  const auto m = MalConvModel::initialize(pe_hyper(60));
  const auto x0 = synthetic_pe(60);
  auto cfg = config(AttackKind::slack_fgm);
  cfg.eps_ball = 0.0;
  const auto o = slack_fgm(x0, cfg, m);
  EXPECT_TRUE(o.modified_indices.empty());
  EXPECT_EQ(o.adversarial_bytes, x0);
  EXPECT_EQ(o.evaded, o.score_before < 0.5);
  EXPECT_EQ(o.gradient_evals, 1u);
}

TEST(SlackFgm, UnboundedBallModifiesEveryChangedSlackByte) {
  for (std::uint64_t seed = 61; seed < 64; ++seed) {
    const auto m = MalConvModel::initialize(pe_hyper(seed));
    const auto x0 = synthetic_pe(seed);
    const auto pe = parse_pe(x0);
    const auto o = slack_fgm(x0, config(AttackKind::slack_fgm), m);

    const auto e = embed(tokenize(x0, m.hyper), m);
    const auto g = input_gradient(e, Label::benign, m);
    const double eps = default_eps_step(m);
    std::vector<std::size_t> expected;
    for (std::size_t idx : slack_indices(pe)) {
      if (idx >= m.hyper.max_len) continue;
      std::vector<double> row(m.hyper.embed_dim);
      for (std::size_t d = 0; d < row.size(); ++d) row[d] = e(idx, d) - eps * (g(idx, d) > 0 ? 1 : (g(idx, d) < 0 ? -1 : 0));
      const auto b = scan_nearest(row, m);
      if (b != x0[idx]) {
        expected.push_back(idx);
        EXPECT_EQ(o.adversarial_bytes[idx], b);
      }
    }
    EXPECT_EQ(o.modified_indices, expected);
    EXPECT_EQ(o.slack_size, slack_indices(pe).size());
  }
}

TEST(SlackFgm, TouchesOnlySlackAndKeepsStructure) {
  for (std::uint64_t seed = 64; seed < 70; ++seed) {
    const auto m = MalConvModel::initialize(pe_hyper(seed));
    const auto x0 = synthetic_pe(seed);
    const auto pe = parse_pe(x0);
    const auto o = slack_fgm(x0, config(AttackKind::slack_fgm), m);
    const auto slack = slack_indices(pe);
    const std::set<std::size_t> allowed(slack.begin(), slack.end());
    ASSERT_EQ(o.adversarial_bytes.size(), x0.size());
    for (std::size_t i = 0; i < x0.size(); ++i) {
      if (o.adversarial_bytes[i] != x0[i]) {
        EXPECT_TRUE(allowed.count(i)) << i;
      }
    }
    for (auto i : o.modified_indices) EXPECT_TRUE(allowed.count(i));
    const auto after = parse_pe(o.adversarial_bytes);
    EXPECT_EQ(after.sections, pe.sections);
    EXPECT_TRUE(std::equal(x0.begin(), x0.begin() + static_cast<std::ptrdiff_t>(pe.headers_end()),
                           o.adversarial_bytes.begin()));
  }
}

TEST(SlackFgm, ModifiedBytesGrowWithBall) {
  const auto m = MalConvModel::initialize(pe_hyper(70));
  std::size_t previous = 0;
  for (double ball : std::initializer_list<double>{0.0, 0.5, 1.0, 2.0, 3.0, 5.0, INFINITY}) {
    std::size_t total = 0;
    for (std::uint64_t seed = 70; seed < 76; ++seed) {
      auto cfg = config(AttackKind::slack_fgm);
      cfg.eps_ball = ball;
      total += slack_fgm(synthetic_pe(seed), cfg, m).modified_indices.size();
    }
    EXPECT_GE(total, previous) << "ball " << ball;
    previous = total;
  }
  EXPECT_GT(previous, 0u);
}

TEST(SlackFgm, AcceptedBytesLieInsideBall) {
  const auto m = MalConvModel::initialize(pe_hyper(71));
  const auto x0 = synthetic_pe(71);
  auto cfg = config(AttackKind::slack_fgm);
  cfg.eps_ball = 2.0;
  const auto o = slack_fgm(x0, cfg, m);
  const std::size_t D = m.hyper.embed_dim;
  for (auto i : o.modified_indices) {
    double d2 = 0;
    for (std::size_t k = 0; k < D; ++k) {
      const double diff = m.embedding[o.adversarial_bytes[i] * D + k] - m.embedding[x0[i] * D + k];
      d2 += diff * diff;
    }
    EXPECT_LE(std::sqrt(d2), 2.0 + 1e-12);
  }
}

TEST(SlackFgm, Errors) {
  const auto m = MalConvModel::initialize(pe_hyper(72));
  const std::vector<std::uint8_t> junk(600, 0x11);
  EXPECT_EQ(code_of([&] { slack_fgm(junk, config(AttackKind::slack_fgm), m); }), ErrorCode::not_a_pe);

  auto x0 = synthetic_pe(72);
  auto pe = parse_pe(x0);
  for (std::size_t i = 0; i < pe.sections.size(); ++i)  // virtual size = raw size: no slack
    detail::write_u32(x0, pe.section_table_offset() + i * 40 + 8, pe.sections[i].raw_size);
  EXPECT_EQ(code_of([&] { slack_fgm(x0, config(AttackKind::slack_fgm), m); }), ErrorCode::no_slack);

  // Slack that starts beyond max_len cannot influence the model.
  auto h = pe_hyper(72);
  h.max_len = 560;
  const auto small = MalConvModel::initialize(h);
  auto y = synthetic_pe(73);
  const auto first = slack_regions(parse_pe(y)).front();
  ASSERT_GE(first.start, 560u);
  EXPECT_EQ(code_of([&] { slack_fgm(y, config(AttackKind::slack_fgm), small); }), ErrorCode::no_slack);
}
