#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace mpq;

namespace {

PerturbationTable two_layer_table() {
  PerturbationTable t;
  t.layers = {"L1", "L2"};
  t.bits = {2, 4};
  t.values = {{0.5, 0.1}, {0.3, 0.25}};
  return t;
}

const std::vector<LayerSize> kTwoLayers{{"L1", 100}, {"L2", 100}};

MckpInstance single_class(std::vector<double> losses, std::int64_t params = 10) {
  MckpInstance inst;
  MckpClass c{"c", params, {}};
  for (std::size_t j = 0; j < losses.size(); ++j) {
    const int bit = static_cast<int>(j) + 2;
    c.items.push_back({bit, params * bit, -losses[j]});
  }
  inst.classes.push_back(c);
  inst.capacity = params * 100;
  return inst;
}

}  // namespace

TEST(BuildInstance, Arithmetic) {
  const auto inst = build_instance(two_layer_table(), kTwoLayers, 3.0);
  EXPECT_EQ(inst.capacity, 600);
  for (const auto& c : inst.classes) {
    ASSERT_EQ(c.items.size(), 2u);
    EXPECT_EQ(c.items[0].weight, 200);
    EXPECT_EQ(c.items[1].weight, 400);
  }
  EXPECT_EQ(inst.classes[0].items[1].profit, -0.1);
}

TEST(BuildInstance, MaxTargetFitsExactly) {
  const auto inst = build_instance(two_layer_table(), kTwoLayers, 4.0);
  const auto a = greedy_assign(dominance_filter(inst));
  EXPECT_EQ(a.bits(), (std::vector<int>{4, 4}));
  EXPECT_EQ(a.used_bits, inst.capacity);
}

TEST(BuildInstance, BelowMinimumIsInfeasible) {
  EXPECT_THROW(build_instance(two_layer_table(), kTwoLayers, 2.0 - 1e-9), InfeasibleError);
  EXPECT_NO_THROW(build_instance(two_layer_table(), kTwoLayers, 2.0));
}

TEST(BuildInstance, CapacityFloorsFractionalTargets) {
  EXPECT_EQ(capacity_for(3, 2.5), 7);
  // 0.1 * 30 is 3.0000000000000004 in binary; 0.7 * 10 is 7.000000000000001
  EXPECT_EQ(capacity_for(30, 0.1), 3);
  EXPECT_EQ(capacity_for(10, 0.7), 7);
}

TEST(BuildInstance, MissingLayerSize) {
  const std::vector<LayerSize> sizes{{"L1", 100}};
  EXPECT_THROW(build_instance(two_layer_table(), sizes, 3.0), std::invalid_argument);
}

TEST(Dominance, RemovesHeavierAndWorse) {
  const auto f = dominance_filter(single_class({0.5, 0.6, 0.1}));
  ASSERT_EQ(f.classes[0].items.size(), 2u);
  EXPECT_EQ(f.classes[0].items[0].bit, 2);
  EXPECT_EQ(f.classes[0].items[1].bit, 4);
}

TEST(Dominance, DecreasingProfileUnchanged) {
  const auto inst = single_class({0.9, 0.5, 0.2, 0.05});
  const auto f = dominance_filter(inst);
  EXPECT_EQ(f.classes[0].items.size(), 4u);
  EXPECT_TRUE(is_filtered(f));
}

TEST(Dominance, EqualProfitsKeepLowerBit) {
  const auto f = dominance_filter(single_class({0.4, 0.4, 0.1}));
  ASSERT_EQ(f.classes[0].items.size(), 2u);
  EXPECT_EQ(f.classes[0].items[0].bit, 2);
}

TEST(Dominance, SurvivorsStrictlyMonotone) {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 200; ++i) {
    const auto f = dominance_filter(mpq::testing::random_instance(rng, 6, 5));
    EXPECT_TRUE(is_filtered(f));
  }
}

TEST(Dominance, PreservesOptimum) {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 300; ++i) {
    const auto inst = mpq::testing::random_instance(rng, 6, 5);
    EXPECT_NEAR(dp_exact(dominance_filter(inst)).total_delta_loss, dp_exact(inst).total_delta_loss, 1e-12);
  }
}

TEST(Greedy, WorkedExample) {
  const auto inst = dominance_filter(build_instance(two_layer_table(), kTwoLayers, 3.0));
  const auto r = greedy_search(inst);
  ASSERT_EQ(r.promotions.size(), 1u);
  EXPECT_EQ(r.promotions[0].cls, 0u);
  EXPECT_NEAR(r.promotions[0].priority, 0.002, 1e-15);
  EXPECT_EQ(r.assignment.bits(), (std::vector<int>{4, 2}));
  EXPECT_NEAR(r.assignment.total_delta_loss, 0.4, 1e-15);
  EXPECT_EQ(r.assignment.bits(), exhaustive(inst).bits());
  EXPECT_EQ(r.assignment.bits(), dp_exact(inst).bits());
}

TEST(Greedy, AmpleCapacityPromotesEverything) {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 50; ++i) {
    auto inst = dominance_filter(mpq::testing::random_instance(rng, 6, 5));
    std::int64_t max_w = 0;
    for (const auto& c : inst.classes) max_w += c.items.back().weight;
    inst.capacity = max_w;
    const auto a = greedy_assign(inst);
    for (std::size_t c = 0; c < inst.classes.size(); ++c) EXPECT_EQ(a.entries[c].bit, inst.classes[c].items.back().bit);
  }
}

TEST(Greedy, SymmetricTiesGoToLowestIndex) {
  MckpInstance inst;
  for (int c = 0; c < 5; ++c) inst.classes.push_back({"c" + std::to_string(c), 10, {{2, 20, -0.5}, {4, 40, -0.1}}});
  inst.capacity = 5 * 20 + 2 * 20 + 7;  // slack for two promotions of 20 bits
  const auto a = greedy_assign(inst);
  EXPECT_EQ(a.bits(), (std::vector<int>{4, 4, 2, 2, 2}));
}

TEST(Greedy, FeasibleAndMonotone) {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 300; ++i) {
    const auto inst = dominance_filter(mpq::testing::random_instance(rng, 8, 4));
    const auto r = greedy_search(inst);
    EXPECT_LE(r.assignment.used_bits, inst.capacity);
    EXPECT_EQ(r.assignment.entries.size(), inst.classes.size());
    // every promotion strictly lowers the loss after filtering
    for (const auto& p : r.promotions) EXPECT_GT(p.priority, 0.0);
    EXPECT_GE(r.assignment.total_delta_loss, dp_exact(inst).total_delta_loss - 1e-12);
  }
}

TEST(Greedy, ScalingProfitsKeepsDecisions) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 100; ++i) {
    const auto inst = dominance_filter(mpq::testing::random_instance(rng, 8, 4));
    auto scaled = inst;
    for (auto& c : scaled.classes)
      for (auto& it : c.items) it.profit *= 3.7;
    const auto a = greedy_search(inst), b = greedy_search(scaled);
    ASSERT_EQ(a.promotions.size(), b.promotions.size());
    for (std::size_t k = 0; k < a.promotions.size(); ++k) EXPECT_EQ(a.promotions[k].cls, b.promotions[k].cls);
  }
}

TEST(Greedy, RequiresFilteredInstance) {
  EXPECT_THROW(greedy_assign(single_class({0.5, 0.6, 0.1})), std::invalid_argument);
}

TEST(Greedy, InfeasibleStart) {
  auto inst = single_class({0.5, 0.1});
  inst.capacity = 5;
  EXPECT_THROW(greedy_assign(inst), InfeasibleError);
}

TEST(Assignment, DerivedStatistics) {
  const auto inst = dominance_filter(build_instance(two_layer_table(), kTwoLayers, 3.0));
  const auto a = greedy_assign(inst);
  EXPECT_EQ(a.used_bits, 600);
  EXPECT_DOUBLE_EQ(a.avg_bits, 3.0);
  EXPECT_DOUBLE_EQ(a.w_ratio, 32.0 / 3.0);
  EXPECT_EQ(a.bit_of("L2"), 2);
}

TEST(ExactSolvers, SingleClassPicksBestFeasible) {
  auto inst = single_class({0.9, 0.5, 0.2, 0.05});
  inst.capacity = 10 * 4;
  EXPECT_EQ(dp_exact(inst).bits(), (std::vector<int>{4}));
  EXPECT_EQ(exhaustive(inst).bits(), (std::vector<int>{4}));
}

TEST(ExactSolvers, DpMatchesExhaustive) {
  std::mt19937_64 rng(6);
  for (int i = 0; i < 200; ++i) {
    const auto inst = mpq::testing::random_instance(rng, 8, 4, 50);
    ASSERT_LE(inst.capacity, 5000);
    EXPECT_NEAR(dp_exact(inst).total_delta_loss, exhaustive(inst).total_delta_loss, 1e-12);
  }
}

TEST(ExactSolvers, Budgets) {
  MckpInstance big;
  for (int c = 0; c < 12; ++c) {
    const std::int64_t params = 1'000'000 + c;  // coprime sizes defeat the gcd reduction
    MckpClass cls{"c" + std::to_string(c), params, {}};
    for (int b = 1; b <= 8; ++b) cls.items.push_back({b, params * b, -1.0 / b});
    big.classes.push_back(cls);
  }
  big.capacity = 4'000'000LL * 12;
  EXPECT_THROW(dp_exact(big), BudgetError);
  EXPECT_THROW(exhaustive(big), BudgetError);
}

TEST(ExactSolvers, Infeasible) {
  auto inst = single_class({0.5, 0.1});
  inst.capacity = 5;
  EXPECT_THROW(dp_exact(inst), InfeasibleError);
  EXPECT_THROW(exhaustive(inst), InfeasibleError);
}
