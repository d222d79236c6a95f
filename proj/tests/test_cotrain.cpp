#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <random>
#include <set>

#include "criteria.hpp"
#include "qct/cotrain.hpp"

using namespace qct;
using namespace qct::test_support;

TEST(ScheduleTest, EndpointsAreExact) {
  const auto p = schedule_probs(12, 0.2, 0.9);
  ASSERT_EQ(p.size(), 12u);
  EXPECT_EQ(p.front(), 0.2);
  EXPECT_EQ(p.back(), 0.9);
  for (std::size_t i = 1; i < p.size(); ++i) EXPECT_GT(p[i], p[i - 1]);
}

TEST(ScheduleTest, LogLinearInterior) {
  const auto p = schedule_probs(12, 0.2, 0.9);
  // p_l = p_min * (p_max / p_min)^((l - 1) / (L - 1))
  for (std::size_t l = 1; l <= 12; ++l) {
    EXPECT_NEAR(p[l - 1], 0.2 * std::pow(4.5, (l - 1) / 11.0), 1e-15);
  }
  EXPECT_NEAR(p[5], 0.3962, 1e-4);
  // Consecutive ratios are constant.
  for (std::size_t i = 2; i < p.size(); ++i) EXPECT_NEAR(p[i] / p[i - 1], p[1] / p[0], 1e-12);
}

TEST(ScheduleTest, DegenerateAndInvalid) {
  for (double v : schedule_probs(5, 0.5, 0.5)) EXPECT_NEAR(v, 0.5, 1e-15);
  EXPECT_EQ(schedule_probs(1, 0.3, 0.8), std::vector<double>{0.3});
  EXPECT_THROW(schedule_probs(0, 0.2, 0.9), ConfigError);
  EXPECT_THROW(schedule_probs(4, 0.0, 0.9), ConfigError);
  EXPECT_THROW(schedule_probs(4, 0.2, 1.0), ConfigError);
}

TEST(SamplerTest, EmpiricalRatesMatchSchedule) {
  const auto p = schedule_probs(12, 0.2, 0.9);
  const auto base = PrecisionAssignment::uniform(12, 2, 32, 4);
  std::mt19937_64 rng(2024);
  std::vector<std::size_t> hits(12, 0);
  const std::size_t draws = 100000;
  for (std::size_t d = 0; d < draws; ++d) {
    const auto a = sample_precision(p, base, rng);
    for (std::size_t l = 0; l < 12; ++l) {
      ASSERT_TRUE(a.encoder_bits[l] == 1 || a.encoder_bits[l] == 2);
      hits[l] += a.encoder_bits[l] == 1;
    }
    ASSERT_EQ(a.conv_bits, base.conv_bits);
    ASSERT_EQ(a.decoder_bits, 4);
  }
  for (std::size_t l = 0; l < 12; ++l) EXPECT_NEAR(static_cast<double>(hits[l]) / draws, p[l], 0.01) << l;
}

TEST(SamplerTest, BoundaryProbabilities) {
  const auto base = PrecisionAssignment::uniform(2, 2, 32, 4);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto a = sample_precision({0.0, 1.0}, base, rng);
    ASSERT_EQ(a.encoder_bits, (std::vector<int>{2, 1}));
  }
  EXPECT_THROW(sample_precision({0.5}, base, rng), AssignmentError);
}

TEST(SamplerTest, HalfBinaryCountsAndUniformity) {
  std::mt19937_64 rng(6);
  for (std::size_t layers = 1; layers <= 9; ++layers) {
    const auto base = PrecisionAssignment::uniform(layers, 2, 32, 4);
    for (int i = 0; i < 200; ++i) {
      const auto a = sample_half_binary(base, rng);
      ASSERT_EQ(static_cast<std::size_t>(std::count(a.encoder_bits.begin(), a.encoder_bits.end(), 1)),
                (layers + 1) / 2);
    }
  }
  const auto base = PrecisionAssignment::uniform(4, 2, 32, 4);
  std::vector<std::size_t> hits(4, 0);
  for (int i = 0; i < 100000; ++i) {
    const auto a = sample_half_binary(base, rng);
    for (std::size_t l = 0; l < 4; ++l) hits[l] += a.encoder_bits[l] == 1;
  }
  for (std::size_t h : hits) EXPECT_NEAR(h / 1e5, 0.5, 0.02);
}

TEST(KlTest, TwoClassExample) {
  const Tensor t(Shape{1, 2}, {0.0, 0.0});
  const Tensor s(Shape{1, 2}, {std::log(0.25), std::log(0.75)});
  const double expected = 0.5 * std::log(0.5 / 0.25) + 0.5 * std::log(0.5 / 0.75);
  EXPECT_NEAR(kl_regularizer(t, s).item(), expected, 1e-15);
  EXPECT_NEAR(expected, 0.1438, 1e-4);
  EXPECT_NEAR(kl_regularizer(s, s).item(), 0.0, 1e-15);
  EXPECT_THROW(kl_regularizer(Tensor(Shape{1, 3}, {0, 0, 0}), s), ContractError);
}

TEST(KlTest, TeacherReceivesNoGradientStudentMatchesFiniteDifferences) {
  std::mt19937_64 rng(8);
  Tensor teacher = random_tensor({5, 4}, rng);
  Tensor student = random_tensor({5, 4}, rng);
  const GradCheck r = finite_difference_check({&student}, [&] { return kl_regularizer(teacher, student); }, 1e-6);
  EXPECT_EQ(r.pass_rate(), 1.0) << r.worst;
  for (double g : teacher.grad()) EXPECT_EQ(g, 0.0);
}

TEST(LossCombinationTest, Examples) {
  EXPECT_EQ(cotrain_loss(1.0, 2.0, 0.5), 2.0);
  EXPECT_EQ(cotrain_loss(1.0, 2.0, 0.0), 1.0);
  EXPECT_THROW(cotrain_loss(1.0, 2.0, -1.0), ConfigError);
  const LossWeights w{0.5, 1.0, true, true};
  EXPECT_EQ(full_loss(1.0, 2.0, 2.0, 0.5, 0.5, w), 4.0);
  EXPECT_EQ(full_loss(1.0, 2.0, 2.0, 0.5, 0.5, LossWeights{0.5, 0.0, true, true}), 3.0);
  EXPECT_EQ(full_loss(1.0, 2.0, 2.0, 0.5, 0.5, LossWeights{0.5, 1.0, false, false}), 2.0);
  EXPECT_EQ(full_loss(1.0, 2.0, 2.0, 0.5, 0.5, LossWeights{0.5, 1.0, true, false}), 2.5);
  EXPECT_EQ(full_loss(1.0, 2.0, 2.0, 0.5, 0.5, LossWeights{0.5, 0.0, false, false}),
            cotrain_loss(1.0, 2.0, 0.5));
  // A NaN in a disabled term does not leak into the total.
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(full_loss(1.0, 2.0, nan, nan, nan, LossWeights{0.5, 0.0, false, false}), 2.0);
}

TEST(StopGradientTest, KlTermsAddNothingToTheTeacherPath) {
  const StopGradientResult r = stop_gradient_check(tiny_config(), tiny_batch());
  EXPECT_TRUE(r.teacher_copy_untouched);
  EXPECT_TRUE(r.shared_scales_identical);
  EXPECT_TRUE(r.student_receives_gradient);
}

TEST(ReductionTest, ChainIsBitExact) {
  const ReductionResult r = reduction_chain_check(tiny_config(), tiny_batch());
  EXPECT_TRUE(r.full_to_cotrain);
  EXPECT_TRUE(r.cotrain_to_multitask);
  EXPECT_TRUE(r.multitask_to_qat);
}

TEST(TrainStepTest, LoggedDecompositionRecombines) {
  SharedModel m = build_model(tiny_config());
  CoTrainConfig cfg;
  prepare_model(m, cfg);
  TrainState st(3);
  std::set<std::vector<int>> sp_views;
  for (int i = 0; i < 20; ++i) {
    const LossBreakdown b = train_step(m, tiny_batch(), cfg, st);
    const double recombined = b.l_int2 + cfg.lambda1 * (b.l_int1 + b.l_sp) + cfg.lambda2 * (b.omega_int1 + b.omega_sp);
    EXPECT_NEAR(b.total, recombined, 1e-10);
    EXPECT_GE(b.omega_int1, 0.0);
    EXPECT_GE(b.omega_sp, 0.0);
    sp_views.insert(st.last_sp.encoder_bits);
  }
  EXPECT_EQ(st.step, 20);
  // The stochastic-precision view is redrawn every batch.
  EXPECT_GT(sp_views.size(), 1u);
}

TEST(TrainStepTest, ViewsTrainedPerMode) {
  SharedModel m = build_model(tiny_config());
  CoTrainConfig cfg;
  cfg.mode = TrainMode::Qat;
  cfg.bits = 1;
  prepare_model(m, cfg);
  for (const auto& [key, s] : m.scales()) EXPECT_TRUE(key.second == 1 || key.second == 4) << key.first;
  TrainState st(1);
  const LossBreakdown b = train_step(m, tiny_batch(), cfg, st);
  EXPECT_EQ(b.l_int1, 0.0);
  EXPECT_EQ(b.total, b.l_int2);

  SharedModel f = build_model(tiny_config());
  cfg.mode = TrainMode::Float;
  prepare_model(f, cfg);
  EXPECT_TRUE(f.scales().empty());
}

TEST(TrainStepTest, DivergenceLeavesStateUntouched) {
  SharedModel m = build_model(tiny_config());
  CoTrainConfig cfg;
  prepare_model(m, cfg);
  TrainState st(4);
  train_step(m, tiny_batch(), cfg, st);
  Batch bad = tiny_batch();
  bad.features.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto before = flat_values(m);
  const auto rng_before = st.rng;
  EXPECT_THROW(train_step(m, bad, cfg, st), DivergenceError);
  EXPECT_EQ(flat_values(m), before);
  EXPECT_EQ(st.step, 1);
  EXPECT_TRUE(st.rng == rng_before);
}

TEST(ConfigTest, ValidationErrors) {
  CoTrainConfig c;
  c.lambda1 = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = CoTrainConfig{};
  c.p_min = 0.95;
  EXPECT_THROW(c.validate(), ConfigError);
  c = CoTrainConfig{};
  c.mode = TrainMode::Qat;
  c.bits = 3;
  EXPECT_THROW(c.validate(), ConfigError);
}
