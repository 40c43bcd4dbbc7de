#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "hat/training.hpp"
#include "support/oracles.hpp"

using namespace hat;
using hat::testing::max_abs_diff;
using hat::testing::random_example;
using hat::testing::tiny_config;

namespace {

OptimizerConfig published_schedule() {
  OptimizerConfig c;
  c.peak_lr = 3e-5;
  c.warmup_steps = 900;
  c.total_steps = 30000;
  return c;
}

OptimizerConfig quick_opt(std::size_t steps) {
  OptimizerConfig o;
  o.peak_lr = 3e-3;
  o.warmup_steps = 0;
  o.total_steps = steps;
  o.weight_decay = 0.0;
  o.label_smoothing = 0.0;
  o.dropout = 0.0;
  o.batch_size = 8;
  o.valid_interval = steps;
  o.seed = 1;
  return o;
}

std::vector<EncodedExample> dataset(std::size_t n, std::uint64_t seed, std::size_t target_len = 4) {
  std::mt19937_64 rng(seed);
  std::vector<EncodedExample> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_example(rng, 12, 2 + i % 3, target_len));
  return out;
}

Tensor param(double v) { return Tensor({1}, {v}, true); }

// Textbook Adam with decoupled decay on a single scalar.
struct ScalarAdam {
  double m = 0, v = 0;
  int t = 0;
  double step(double p, double g, double lr, const OptimizerConfig& c) {
    ++t;
    p -= lr * c.weight_decay * p;
    m = c.beta1 * m + (1 - c.beta1) * g;
    v = c.beta2 * v + (1 - c.beta2) * g * g;
    const double mh = m / (1 - std::pow(c.beta1, t)), vh = v / (1 - std::pow(c.beta2, t));
    return p - lr * mh / (std::sqrt(vh) + c.epsilon);
  }
};

}  // namespace

TEST(LrSchedule, PaperConstants) {
  const auto c = published_schedule();
  EXPECT_EQ(lr_at(0, c), 0.0);
  EXPECT_DOUBLE_EQ(lr_at(900, c), 3e-5);
  EXPECT_DOUBLE_EQ(lr_at(15450, c), 1.5e-5);
  EXPECT_EQ(lr_at(30000, c), 0.0);
  EXPECT_THROW(lr_at(30001, c), std::out_of_range);
}

TEST(LrSchedule, PiecewiseLinearWithPeakAtWarmup) {
  const auto c = published_schedule();
  double best = 0;
  std::size_t arg = 0;
  for (std::size_t s = 1; s < c.total_steps; ++s) {
    const double lr = lr_at(s, c);
    if (lr > best) best = lr, arg = s;
    if (s == c.warmup_steps) continue;
    const double second = lr_at(s + 1, c) - 2 * lr + lr_at(s - 1, c);
    EXPECT_NEAR(second, 0.0, 1e-18) << s;
  }
  EXPECT_EQ(arg, c.warmup_steps);
}

TEST(OptimizerConfig, JsonRoundTripAndValidation) {
  auto c = published_schedule();
  c.dropout_schedule = {0.0};
  c.selection = Selection::bleu;
  EXPECT_EQ(to_json(optimizer_config_from_json(to_json(c))), to_json(c));
  auto j = to_json(c);
  j["lr"] = 1.0;
  EXPECT_THROW(optimizer_config_from_json(j), std::invalid_argument);
  c.warmup_steps = c.total_steps + 1;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = published_schedule();
  c.label_smoothing = 1.0;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(OptimizerConfig, DropoutScheduleOverridesEarlyEpochs) {
  OptimizerConfig c;
  c.dropout = 0.1;
  c.dropout_schedule = {0.0};
  EXPECT_EQ(c.dropout_for_epoch(0), 0.0);
  EXPECT_EQ(c.dropout_for_epoch(1), 0.1);
}

TEST(LabelSmoothing, ZeroEpsilonIsCrossEntropy) {
  const Tensor logits({2, 3}, {1.0, 2.0, 0.5, -1.0, 0.0, 3.0});
  const std::vector<int> targets{1, 2};
  double expected = 0;
  for (int r = 0; r < 2; ++r) {
    double z = 0;
    for (int v = 0; v < 3; ++v) z += std::exp(logits.values()[r * 3 + v]);
    expected -= logits.values()[r * 3 + targets[r]] - std::log(z);
  }
  EXPECT_NEAR(label_smoothed_ce(logits, targets, 0.0, -1).item(), expected / 2, 1e-14);
}

TEST(LabelSmoothing, UniformLogitsGiveLogV) {
  for (double eps : {0.0, 0.1, 0.5}) {
    const std::vector<int> targets{4, 7, 0};
    EXPECT_NEAR(label_smoothed_ce(Tensor({3, 10}), targets, eps).item(), std::log(10.0), 1e-14);
  }
}

TEST(LabelSmoothing, ThreeClassClosedForm) {
  const double z = std::exp(2.0) + 2.0;
  const double lp0 = 2.0 - std::log(z), lp1 = -std::log(z);
  const double expected = -(0.9 * lp0 + 0.05 * lp1 + 0.05 * lp1);
  const std::vector<int> target{0};
  EXPECT_NEAR(label_smoothed_ce(Tensor({1, 3}, {2, 0, 0}), target, 0.1, -1).item(), expected, 1e-14);
}

TEST(LabelSmoothing, PadIsExcludedFromRowsAndMass) {
  // V = 4 with pad id 0: smoothing goes to the two classes that are neither
  // target nor pad.
  const Tensor logits({2, 4}, {0.3, 1.0, -0.5, 2.0, 5.0, 5.0, 5.0, 5.0});
  const std::vector<int> targets{3, kPadId};
  const auto lsm_t = log_softmax(logits);
  const auto lsm = lsm_t.values();
  const double expected = -(0.8 * lsm[3] + 0.1 * lsm[1] + 0.1 * lsm[2]);
  EXPECT_NEAR(label_smoothed_ce(logits, targets, 0.2).item(), expected, 1e-14);
  const std::vector<int> all_pad{kPadId, kPadId};
  EXPECT_THROW(label_smoothed_ce(logits, all_pad, 0.1), std::invalid_argument);
}

TEST(LabelSmoothing, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(3);
  Tensor logits = hat::testing::random_tensor({4, 6}, rng);
  const std::vector<int> targets{1, 0, 5, 3};
  EXPECT_LT(hat::testing::check_gradients({logits}, [&] { return label_smoothed_ce(logits, targets, 0.1); }), 1e-4);
}

TEST(Adam, ZeroGradientsWithoutDecayLeaveParametersUnchanged) {
  Tensor p({3}, {1.0, -2.0, 0.5}, true);
  const std::vector<NamedTensor> params{{"p", p}};
  auto state = init_train_state(params);
  auto c = published_schedule();
  c.weight_decay = 0.0;
  p.mutable_grad();
  for (int i = 0; i < 5; ++i) adam_step(params, state, c);
  EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()), (std::vector<double>{1.0, -2.0, 0.5}));
  EXPECT_EQ(state.step, 5u);
}

TEST(Adam, SingleStepClosedForm) {
  OptimizerConfig c;
  c.weight_decay = 0.0;
  c.warmup_steps = 0;
  c.total_steps = 10;
  c.peak_lr = 0.01;
  Tensor p({2}, {0.5, 0.5}, true);
  p.mutable_grad()[0] = 0.3;
  p.mutable_grad()[1] = -2e-9;
  const std::vector<NamedTensor> params{{"p", p}};
  auto state = init_train_state(params);
  adam_step(params, state, c);
  const double lr = lr_at(1, c);
  EXPECT_NEAR(p.values()[0], 0.5 - lr * 0.3 / (0.3 + c.epsilon), 1e-15);
  EXPECT_NEAR(p.values()[1], 0.5 + lr * 2e-9 / (2e-9 + c.epsilon), 1e-15);
}

TEST(Adam, MatchesScalarReference) {
  OptimizerConfig c;
  c.beta1 = 0.9;
  c.beta2 = 0.98;
  c.epsilon = 1e-6;
  c.weight_decay = 0.0;
  c.peak_lr = 0.05;
  c.warmup_steps = 3;
  c.total_steps = 40;
  Tensor p = param(2.0);
  const std::vector<NamedTensor> params{{"x", p}};
  auto state = init_train_state(params);
  ScalarAdam ref;
  double x = 2.0;
  for (std::size_t s = 1; s <= 30; ++s) {
    p.zero_grad();
    scale(sum(mul(mul(p, p), p)), 0.25).backward();  // d(x^3/4)/dx
    adam_step(params, state, c);
    x = ref.step(x, 0.75 * x * x, lr_at(s, c), c);
    ASSERT_NEAR(p.values()[0], x, 1e-12) << s;
  }
}

TEST(Adam, DecoupledDecayScalesParameters) {
  OptimizerConfig c;
  c.weight_decay = 0.01;
  c.peak_lr = 0.1;
  c.warmup_steps = 0;
  c.total_steps = 4;
  Tensor p = param(3.0);
  p.mutable_grad();
  const std::vector<NamedTensor> params{{"w", p}};
  auto state = init_train_state(params);
  adam_step(params, state, c);
  EXPECT_DOUBLE_EQ(p.values()[0], 3.0 * (1 - lr_at(1, c) * 0.01));
}

TEST(Adam, AccumulationEqualsAveragedGradient) {
  OptimizerConfig c;
  c.warmup_steps = 0;
  c.total_steps = 5;
  c.peak_lr = 0.01;
  Tensor a = param(1.0), b = param(1.0);
  const std::vector<NamedTensor> pa{{"a", a}}, pb{{"b", b}};
  auto sa = init_train_state(pa), sb = init_train_state(pb);
  scale(sum(mul(a, a)), 3.0).backward();
  scale(sum(a), -1.0).backward();
  adam_step(pa, sa, c, 0.5);
  b.mutable_grad()[0] = (6.0 - 1.0) / 2;
  adam_step(pb, sb, c);
  EXPECT_EQ(a.values()[0], b.values()[0]);
}

TEST(Adam, NonFiniteGradientNamesParameter) {
  OptimizerConfig c;
  Tensor p = param(1.0);
  p.mutable_grad()[0] = std::nan("");
  const std::vector<NamedTensor> params{{"decoder.0.ffn.w1", p}};
  auto state = init_train_state(params);
  try {
    adam_step(params, state, c);
    FAIL() << "expected an error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.0.ffn.w1"), std::string::npos) << e.what();
  }
}

TEST(Train, FrozenBatchLossStrictlyDecreases) {
  const auto data = dataset(8, 5);
  const auto c = tiny_config(ModelMode::hat);
  const auto res = train(c, quick_opt(50), data, data);
  ASSERT_EQ(res.log.size(), 50u);
  for (std::size_t i = 1; i < res.log.size(); ++i)
    EXPECT_LT(res.log[i].train_loss, res.log[i - 1].train_loss) << "step " << res.log[i].step;
}

TEST(Train, BitReproducibleUnderSeed) {
  const auto data = dataset(12, 6);
  auto c = tiny_config(ModelMode::hat);
  auto o = quick_opt(6);
  o.dropout = 0.1;
  o.batch_size = 3;
  o.valid_interval = 2;
  const auto a = train(c, o, data, data), b = train(c, o, data, data);
  ASSERT_EQ(a.log.size(), b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
  const auto pa = a.last_params.named(), pb = b.last_params.named();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(max_abs_diff(pa[i].tensor.values(), pb[i].tensor.values()), 0.0);
  o.seed = 2;
  EXPECT_NE(train(c, o, data, data).log.back().train_loss, a.log.back().train_loss);
}

TEST(Train, AccumulationMatchesLargerBatch) {
  const auto data = dataset(8, 7);  // equal target lengths
  const auto c = tiny_config(ModelMode::plain);
  auto big = quick_opt(3);
  big.batch_size = 4;
  auto split = big;
  split.batch_size = 2;
  split.grad_accum_steps = 2;
  const auto a = train(c, big, data, data), b = train(c, split, data, data);
  const auto pa = a.last_params.named(), pb = b.last_params.named();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_LT(max_abs_diff(pa[i].tensor.values(), pb[i].tensor.values()), 1e-9);
}

TEST(Train, WritesLogAndCheckpoints) {
  const auto dir = std::filesystem::temp_directory_path() / "hat_train_out";
  std::filesystem::remove_all(dir);
  const auto data = dataset(6, 8);
  auto o = quick_opt(4);
  o.valid_interval = 2;
  TrainOptions opts;
  opts.out_dir = dir;
  const auto c = tiny_config(ModelMode::hat);
  const auto res = train(c, o, data, data, opts);
  EXPECT_TRUE(std::filesystem::exists(dir / "best.ckpt"));
  EXPECT_TRUE(std::filesystem::exists(dir / "last.ckpt"));
  std::ifstream log(dir / "train_log.jsonl");
  std::string line;
  std::size_t lines = 0, with_valid = 0;
  while (std::getline(log, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_TRUE(j.contains("step") && j.contains("lr") && j.contains("train_loss"));
    with_valid += j.contains("valid_loss");
    ++lines;
  }
  EXPECT_EQ(lines, 4u);
  EXPECT_EQ(with_valid, 2u);
  const auto best = load_checkpoint(dir / "best.ckpt");
  EXPECT_NEAR(validation_loss(data, best.params, c, o.label_smoothing), res.best_valid_loss, 1e-5);
}

TEST(Train, InitFromCopiesSharedTensors) {
  const auto dir = std::filesystem::temp_directory_path() / "hat_train_init";
  std::filesystem::remove_all(dir);
  const auto data = dataset(6, 9);
  TrainOptions opts;
  opts.out_dir = dir;
  const auto plain = train(tiny_config(ModelMode::plain), quick_opt(3), data, data, opts);
  TrainOptions from;
  from.init_from = dir / "last.ckpt";
  auto o = quick_opt(1);
  o.peak_lr = 1e-12;
  const auto hat_run = train(tiny_config(ModelMode::hat), o, data, data, from);
  EXPECT_FALSE(hat_run.not_initialized.empty());
  EXPECT_LT(max_abs_diff(hat_run.last_params.token_embedding.values(), plain.last_params.token_embedding.values()), 1e-6);
}

TEST(Train, MetricSelectionRecordsMetric) {
  const auto data = dataset(4, 10);
  auto o = quick_opt(2);
  o.selection = Selection::rougeL;
  o.valid_interval = 1;
  const auto res = train(tiny_config(ModelMode::hat), o, data, data);
  ASSERT_TRUE(res.log.back().valid_metric.has_value());
  EXPECT_GE(res.best_metric, 0.0);
  EXPECT_LE(res.best_metric, 1.0);
}

TEST(Masking, RatesAndSplit) {
  std::mt19937_64 rng(11);
  const int mask_id = 4;
  const std::size_t V = 50;
  std::size_t candidates = 0, masked = 0, as_mask = 0, kept = 0, bos_masked = 0;
  for (std::uint64_t i = 0; i < 400; ++i) {
    auto ex = random_example(rng, V, 6, 1);
    for (int& id : ex.source_ids)
      if (id == mask_id) id = 5;
    const auto m = mask_tokens(ex, mask_id, V, 3, i);
    const auto again = mask_tokens(ex, mask_id, V, 3, i);
    EXPECT_EQ(m.positions, again.positions);
    EXPECT_EQ(m.input.source_ids, again.input.source_ids);
    candidates += ex.source_ids.size() - ex.bos_positions.size();
    masked += m.positions.size();
    for (std::size_t k = 0; k < m.positions.size(); ++k) {
      const auto pos = static_cast<std::size_t>(m.positions[k]);
      bos_masked += ex.source_ids[pos] == kBosId;
      EXPECT_EQ(m.labels[k], ex.source_ids[pos]);
      as_mask += m.input.source_ids[pos] == mask_id;
      kept += m.input.source_ids[pos] == ex.source_ids[pos];
    }
  }
  EXPECT_EQ(bos_masked, 0u);
  EXPECT_NEAR(static_cast<double>(masked) / static_cast<double>(candidates), 0.15, 0.03);
  EXPECT_NEAR(static_cast<double>(as_mask) / static_cast<double>(masked), 0.8, 0.05);
  EXPECT_NEAR(static_cast<double>(kept) / static_cast<double>(masked), 0.1, 0.04);
}

TEST(Mlm, LossFallsOnTinyCorpus) {
  const auto c = tiny_config(ModelMode::encoder_only_hat, 12);
  std::vector<EncodedExample> corpus;
  for (int i = 0; i < 16; ++i) {
    EncodedExample ex;
    for (int s = 0; s < 2; ++s) {
      ex.bos_positions.push_back(static_cast<int>(ex.source_ids.size()));
      ex.source_ids.push_back(kBosId);
      for (int k = 0; k < 3; ++k) ex.source_ids.push_back(5 + (i + s + k) % 6);
    }
    ex.segment_ids.assign(ex.source_ids.size(), 0);
    corpus.push_back(ex);
  }
  auto o = quick_opt(60);
  o.valid_interval = 60;
  const auto before = mlm_eval_loss(corpus, init_parameters(c, o.seed), c, 4, 1);
  const auto res = mlm_pretrain(c, o, corpus, corpus, 4, {});
  EXPECT_LT(*res.log.back().valid_loss, before);
}
