#include <gtest/gtest.h>

#include <cmath>

#include "hashcl/errors.hpp"
#include "hashcl/history.hpp"
#include "hashcl/rng.hpp"

using namespace hashcl;

namespace {

RoutingDecision pick(std::size_t k_total, std::vector<std::size_t> selected) {
  std::vector<double> s(k_total, 0.0);
  return make_decision_fixed(s, s, std::move(selected));
}

HistoryLedger ledger_with_counts(const std::vector<std::uint64_t>& counts, std::size_t top_k) {
  HistoryLedger ledger(1, counts.size(), top_k);
  for (std::size_t e = 0; e < counts.size(); ++e) {
    for (std::uint64_t i = 0; i < counts[e]; ++i) ledger.update(pick(counts.size(), {e}), 0);
  }
  return ledger;
}

std::vector<std::size_t> protected_vec(const HistoryLedger& ledger, std::size_t layer) {
  const auto s = ledger.protected_set(layer);
  return {s.begin(), s.end()};
}

}  // namespace

TEST(Ledger, UpdateIncrementsSelectedExperts) {
  HistoryLedger ledger(1, 6, 2);
  ledger.update(pick(6, {0, 3}), 0);
  const auto c = ledger.counts(0);
  EXPECT_EQ(std::vector<std::uint64_t>(c.begin(), c.end()),
            (std::vector<std::uint64_t>{1, 0, 0, 1, 0, 0}));
  ledger.update(pick(6, {0, 3}), 0);
  EXPECT_EQ(ledger.counts(0)[0], 2u);
  EXPECT_EQ(ledger.counts(0)[3], 2u);
  EXPECT_EQ(ledger.counts(0)[1], 0u);
}

TEST(Ledger, MatchesIndependentTally) {
  Rng rng(3);
  HistoryLedger ledger(2, 7, 3);
  std::vector<std::vector<std::uint64_t>> tally(2, std::vector<std::uint64_t>(7, 0));
  for (int i = 0; i < 100; ++i) {
    std::vector<double> s(7);
    for (double& v : s) v = rng.normal();
    const auto d = make_decision(s, s, 3);
    const std::size_t layer = rng.index(2);
    ledger.update(d, layer);
    for (auto e : d.selected) ++tally[layer][e];
  }
  for (std::size_t l = 0; l < 2; ++l) {
    const auto c = ledger.counts(l);
    EXPECT_EQ(std::vector<std::uint64_t>(c.begin(), c.end()), tally[l]);
  }
}

TEST(Ledger, TopKAboveExpertCountIsAConfigError) {
  EXPECT_THROW(HistoryLedger(1, 2, 3), ConfigError);
}

TEST(FreezeProtectedSet, EmptyHistoryProtectsNothing) {
  HistoryLedger ledger(1, 4, 2);
  ledger.freeze_protected_set(0);
  EXPECT_TRUE(ledger.protected_set(0).empty());
  ModulatorConfig cfg;
  const std::vector<double> s{0.3, -0.2, 1.0, 0.0};
  EXPECT_EQ(hdr_penalize(s, ledger, 0, cfg), s);
}

TEST(FreezeProtectedSet, TopKByCount) {
  auto ledger = ledger_with_counts({5, 2, 9}, 2);
  ledger.freeze_protected_set(1);
  EXPECT_EQ(protected_vec(ledger, 0), (std::vector<std::size_t>{0, 2}));
}

TEST(FreezeProtectedSet, TiesGoToLowestIndex) {
  auto ledger = ledger_with_counts({3, 3, 1}, 1);
  ledger.freeze_protected_set(1);
  EXPECT_EQ(protected_vec(ledger, 0), (std::vector<std::size_t>{0}));
}

TEST(FreezeProtectedSet, SizeIsCappedByActiveExperts) {
  auto ledger = ledger_with_counts({0, 4, 0, 0}, 3);
  ledger.freeze_protected_set(1);
  EXPECT_EQ(protected_vec(ledger, 0), (std::vector<std::size_t>{1}));
}

TEST(FreezeProtectedSet, DoubleFreezeIsAStateError) {
  auto ledger = ledger_with_counts({1, 2}, 1);
  ledger.freeze_protected_set(1);
  EXPECT_THROW(ledger.freeze_protected_set(1), StateError);
  EXPECT_THROW(ledger.freeze_protected_set(0), StateError);
  EXPECT_NO_THROW(ledger.freeze_protected_set(2));
}

TEST(FreezeProtectedSet, FixedWithinATask) {
  auto ledger = ledger_with_counts({5, 2, 9}, 1);
  ledger.freeze_protected_set(1);
  for (int i = 0; i < 20; ++i) ledger.update(pick(3, {1}), 0);
  EXPECT_EQ(protected_vec(ledger, 0), (std::vector<std::size_t>{2}));
  ModulatorConfig cfg;
  const auto psi = history_penalties(ledger, 0, cfg);
  EXPECT_EQ(psi, (std::vector<double>{0.0, 0.0, 0.4}));
}

TEST(HdrPenalize, StepwiseDeduction) {
  auto ledger = ledger_with_counts({4, 1}, 1);
  ledger.freeze_protected_set(1);
  ModulatorConfig cfg;
  cfg.delta = 0.4;
  const auto out = hdr_penalize(std::vector<double>{1.0, 0.9}, ledger, 0, cfg);
  EXPECT_NEAR(out[0], 0.6, 1e-15);
  EXPECT_EQ(out[1], 0.9);
}

TEST(HdrPenalize, LogarithmicClosedForm) {
  // H = [0, e - 1] is not an integer count, so check the penalty formula at
  // integer counts and the closed form log(1 + H) directly.
  auto ledger = ledger_with_counts({0, 1, 3}, 2);
  ledger.freeze_protected_set(1);
  ModulatorConfig cfg;
  cfg.penalty = PenaltyVariant::logarithmic;
  const auto psi = history_penalties(ledger, 0, cfg);
  EXPECT_EQ(psi[0], 0.0);
  EXPECT_NEAR(psi[1], std::log(2.0), 1e-15);
  EXPECT_NEAR(psi[2], std::log(4.0), 1e-15);
  EXPECT_NEAR(std::log1p(std::exp(1.0) - 1.0), 1.0, 1e-15);
}

TEST(HdrPenalize, PolynomialUsesTheExponent) {
  auto ledger = ledger_with_counts({0, 4}, 1);
  ledger.freeze_protected_set(1);
  ModulatorConfig cfg;
  cfg.penalty = PenaltyVariant::polynomial;
  cfg.poly_exponent = 1.5;
  const auto psi = history_penalties(ledger, 0, cfg);
  EXPECT_EQ(psi[0], 0.0);
  EXPECT_NEAR(psi[1], 8.0, 1e-12);
}

TEST(HdrPenalize, ContinuousPenaltiesAreMonotone) {
  Rng rng(5);
  std::vector<std::uint64_t> counts(8);
  for (auto& c : counts) c = rng.index(30);
  auto ledger = ledger_with_counts(counts, 2);
  ledger.freeze_protected_set(1);
  for (auto variant : {PenaltyVariant::logarithmic, PenaltyVariant::polynomial}) {
    ModulatorConfig cfg;
    cfg.penalty = variant;
    const auto psi = history_penalties(ledger, 0, cfg);
    for (std::size_t a = 0; a < counts.size(); ++a) {
      for (std::size_t b = 0; b < counts.size(); ++b) {
        if (counts[a] >= counts[b]) EXPECT_GE(psi[a], psi[b]);
      }
      if (counts[a] == 0) EXPECT_EQ(psi[a], 0.0);
    }
  }
}

TEST(HdrPenalize, WrongLengthIsADimensionError) {
  HistoryLedger ledger(1, 3, 1);
  EXPECT_THROW(hdr_penalize(std::vector<double>{1.0}, ledger, 0, ModulatorConfig{}),
               DimensionError);
}

TEST(HgmScale, PiecewiseFactor) {
  auto ledger = ledger_with_counts({3, 0}, 1);
  ledger.freeze_protected_set(1);
  ModulatorConfig cfg;
  cfg.alpha_decay = 0.1;
  std::vector<Matrix> g{Matrix(1, 1, 1.0), Matrix(1, 1, 1.0)};
  hgm_scale(g, ledger, 0, cfg);
  EXPECT_EQ(g[0](0, 0), 0.1);
  EXPECT_EQ(g[1](0, 0), 1.0);
}

TEST(HgmScale, InverseAndExponentialFactors) {
  auto ledger = ledger_with_counts({1, 0}, 1);
  ledger.freeze_protected_set(1);
  ModulatorConfig cfg;
  cfg.beta = 1.0;
  cfg.decay = DecayVariant::inverse;
  EXPECT_EQ(hgm_factors(ledger, 0, cfg), (std::vector<double>{0.5, 1.0}));
  cfg.decay = DecayVariant::exponential;
  const auto gamma = hgm_factors(ledger, 0, cfg);
  EXPECT_NEAR(gamma[0], std::exp(-1.0), 1e-15);
  EXPECT_EQ(gamma[1], 1.0);
}

TEST(HgmScale, PreservesDirectionWithFactorInUnitInterval) {
  Rng rng(8);
  std::vector<std::uint64_t> counts(5);
  for (auto& c : counts) c = rng.index(2000);
  auto ledger = ledger_with_counts(counts, 2);
  ledger.freeze_protected_set(1);
  for (auto decay : {DecayVariant::piecewise, DecayVariant::inverse, DecayVariant::exponential}) {
    ModulatorConfig cfg;
    cfg.decay = decay;
    const auto gamma = hgm_factors(ledger, 0, cfg);
    for (double c : gamma) {
      EXPECT_GT(c, 0.0);
      EXPECT_LE(c, 1.0);
    }
  }
}

TEST(RouteObjective, ClosedForms) {
  const std::vector<double> s{0.2, 1.5, -0.3};
  const std::vector<double> zero(3, 0.0);
  EXPECT_EQ(route_objective_value(std::vector<double>{0, 1, 0}, s, zero), -1.5);
  EXPECT_EQ(route_objective_value(std::vector<double>{0.5, 0.5}, std::vector<double>{1, 1},
                                  std::vector<double>{0, 0}),
            -1.0);
}

TEST(RouteObjective, ShiftingPenaltiesShiftsTheValue) {
  Rng rng(9);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(4), psi(4), shifted(4), raw(4);
    for (std::size_t e = 0; e < 4; ++e) {
      s[e] = rng.normal();
      psi[e] = rng.uniform();
      shifted[e] = psi[e] + 0.7;
      raw[e] = rng.normal();
    }
    const auto p = softmax(raw);
    EXPECT_NEAR(route_objective_value(p, s, shifted), route_objective_value(p, s, psi) + 0.7,
                1e-12);
  }
}

TEST(RouteObjective, TopKHdrChoiceIsNoWorseThanOtherUniformSelections) {
  Rng rng(10);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> s(5), psi(5), pen(5);
    for (std::size_t e = 0; e < 5; ++e) {
      s[e] = rng.normal();
      psi[e] = rng.uniform();
      pen[e] = s[e] - psi[e];
    }
    const auto chosen = select_top_k(pen, 2);
    std::vector<double> p(5, 0.0);
    for (auto e : chosen) p[e] = 0.5;
    const double best = route_objective_value(p, s, psi);
    for (std::size_t a = 0; a < 5; ++a) {
      for (std::size_t b = a + 1; b < 5; ++b) {
        std::vector<double> q(5, 0.0);
        q[a] = q[b] = 0.5;
        EXPECT_LE(best, route_objective_value(q, s, psi) + 1e-12);
      }
    }
  }
}

TEST(RouteObjective, OffSimplexIsAnArgumentError) {
  EXPECT_THROW(route_objective_value(std::vector<double>{0.5, 0.6}, std::vector<double>{1, 1},
                                     std::vector<double>{0, 0}),
               ArgumentError);
}

TEST(HistoryRegularizer, ClosedForms) {
  const Matrix a = Matrix::from_rows({{1, 2, 3}});
  EXPECT_EQ(history_regularizer(a, a, 5.0), 0.0);
  const Matrix b = Matrix::from_rows({{3, 2, 3}});
  EXPECT_EQ(history_regularizer(a, b, 0.0), 0.0);
  const Matrix origin(1, 2);
  const Matrix drift = Matrix::from_rows({{0.0, 3.0}});
  EXPECT_EQ(history_regularizer(drift, origin, 2.0), 9.0);
  EXPECT_THROW(history_regularizer(a, origin, 1.0), DimensionError);
}

TEST(ModulatorConfig, Validation) {
  ModulatorConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.alpha_decay = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = ModulatorConfig{};
  cfg.delta = 0.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  EXPECT_THROW(parse_penalty_variant("cubic"), ConfigError);
  EXPECT_EQ(parse_decay_variant(to_string(DecayVariant::inverse)), DecayVariant::inverse);
}
