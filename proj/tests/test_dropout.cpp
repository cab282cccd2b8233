#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "eas/dataset.h"
#include "eas/partition.h"
#include "eas/trainer.h"

using namespace eas;

namespace {

SearchSpace tiny_space(int classes) {
  SearchSpace s;
  s.units = {UnitConfig{3, 2, 8, 1}, UnitConfig{3, 2, 12, 2}};
  s.depth_choices = {2, 3};
  s.stem.channels = 8;
  s.input_height = s.input_width = 8;
  s.head = {16, classes};
  s.validate();
  return s;
}

SyntheticSpec tiny_data_spec(std::uint64_t seed) {
  SyntheticSpec d;
  d.classes = 6;
  d.superclasses = 3;
  d.samples_per_class = 24;
  d.height = d.width = 8;
  d.seed = seed;
  return d;
}

SuperclassPartition groups_of_two(int groups) {
  SuperclassPartition p;
  for (int t = 0; t < groups; ++t) p.superclasses.push_back({"g" + std::to_string(t), {2 * t, 2 * t + 1}});
  return p;
}

// Plain log-softmax cross-entropy in double, written out independently.
double reference_ce(const std::vector<double>& logits, const std::vector<bool>& keep, int label) {
  double z = 0;
  for (std::size_t c = 0; c < logits.size(); ++c)
    if (keep[c]) z += std::exp(logits[c]);
  return -(logits[static_cast<std::size_t>(label)] - std::log(z));
}

}  // namespace

// ---------------------------------------------------------------------------
// Partition
// ---------------------------------------------------------------------------

TEST(Partition, JsonRoundTripAndLookup) {
  const auto p = SuperclassPartition::contiguous(12, 4);
  EXPECT_EQ(p.classes(1), (std::vector<int>{3, 4, 5}));
  const auto back = SuperclassPartition::from_json(nlohmann::json::parse(p.to_json().dump()));
  EXPECT_EQ(back, p);
  EXPECT_EQ(back.class_to_superclass()[7], 2);
}

TEST(Partition, RejectsOverlapGapsAndUnknownClasses) {
  auto p = SuperclassPartition::contiguous(12, 4);
  p.superclasses[0].classes.push_back(99);
  EXPECT_THROW(p.validate(12), PartitionError);
  p = SuperclassPartition::contiguous(12, 4);
  p.superclasses[1].classes.push_back(0);
  EXPECT_THROW(p.validate(12), PartitionError);
  p = SuperclassPartition::contiguous(12, 4);
  p.superclasses[3].classes.pop_back();
  EXPECT_THROW(p.validate(12), PartitionError);
  EXPECT_THROW(SuperclassPartition::from_json(nlohmann::json::parse(R"({"superclasses":[{"name":1}]})")),
               PartitionError);
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

TEST(Synthetic, SplitSizesFollowFractions) {
  SyntheticSpec s;
  s.samples_per_class = 200;
  s.fractions = {0.8, 0.1};
  const auto d = make_synthetic(s);
  EXPECT_EQ(d.num_classes(), 12);
  EXPECT_EQ(d.train.size(), 12u * 160);
  EXPECT_EQ(d.val.size(), 12u * 20);
  EXPECT_EQ(d.test.size(), 12u * 20);
  for (int c = 0; c < 12; ++c) {
    const int cls[] = {c};
    EXPECT_EQ(d.val.indices_of(cls).size(), 20u);
  }
  EXPECT_EQ(d.train.batch(std::vector<std::size_t>{0, 5}).shape(), (Shape{2, 3, 32, 32}));
}

TEST(Synthetic, DefaultBenchmarkIs200_50_50) {
  const auto d = make_synthetic(SyntheticSpec{});
  EXPECT_EQ(d.train.size(), 12u * 200);
  EXPECT_EQ(d.val.size(), 12u * 50);
  EXPECT_EQ(d.test.size(), 12u * 50);
}

TEST(Synthetic, SameSeedIsIdenticalDifferentSeedIsNot) {
  const auto a = make_synthetic(tiny_data_spec(3)), b = make_synthetic(tiny_data_spec(3)),
             c = make_synthetic(tiny_data_spec(4));
  EXPECT_EQ(a.train.pixels, b.train.pixels);
  EXPECT_EQ(a.test.labels, b.test.labels);
  EXPECT_NE(a.train.pixels, c.train.pixels);
}

TEST(Synthetic, SuperclassStructureIsVisibleInClassMeans) {
  // Classes sharing a superclass should be closer to each other than to
  // classes of another superclass.
  SyntheticSpec s;
  s.samples_per_class = 60;
  const auto d = make_synthetic(s);
  const std::size_t n = d.train.sample_size();
  std::vector<std::vector<double>> mean(12, std::vector<double>(n, 0.0));
  std::vector<int> count(12, 0);
  for (std::size_t i = 0; i < d.train.size(); ++i) {
    const int y = d.train.labels[i];
    for (std::size_t k = 0; k < n; ++k) mean[y][k] += d.train.pixels[i * n + k];
    count[y]++;
  }
  auto dist = [&](int a, int b) {
    double s2 = 0;
    for (std::size_t k = 0; k < n; ++k) {
      const double v = mean[a][k] / count[a] - mean[b][k] / count[b];
      s2 += v * v;
    }
    return s2;
  };
  EXPECT_LT(dist(0, 1), dist(0, 3));
  EXPECT_LT(dist(6, 7), dist(6, 10));
}

TEST(Dataset, PartitionMismatchIsReported) {
  const auto d = make_synthetic(tiny_data_spec(1));
  auto p = SuperclassPartition::contiguous(6, 3);
  EXPECT_NO_THROW(d.check_partition(p));
  p.superclasses[2].classes.push_back(99);
  EXPECT_THROW(d.check_partition(p), PartitionError);
}

TEST(Dataset, DirectoryIngestionReadsPpmClassFolders) {
  namespace fs = std::filesystem;
  const fs::path root = fs::temp_directory_path() / "eas_dir_dataset";
  fs::remove_all(root);
  for (const char* cls : {"beta", "alpha"}) {
    fs::create_directories(root / cls);
    for (int i = 0; i < 10; ++i) {
      std::ofstream f(root / cls / ("img" + std::to_string(i) + ".ppm"), std::ios::binary);
      f << "P6\n# comment\n4 2\n255\n";
      for (int p = 0; p < 8; ++p) {
        const unsigned char rgb[3] = {static_cast<unsigned char>(10 * i), static_cast<unsigned char>(p * 20),
                                      static_cast<unsigned char>(cls[0] == 'a' ? 200 : 30)};
        f.write(reinterpret_cast<const char*>(rgb), 3);
      }
    }
  }
  const auto d = load_image_directory(root, {0.8, 0.1}, 5);
  EXPECT_EQ(d.class_names, (std::vector<std::string>{"alpha", "beta"}));
  EXPECT_EQ(d.train.size(), 16u);
  EXPECT_EQ(d.val.size(), 2u);
  EXPECT_EQ(d.test.size(), 2u);
  EXPECT_EQ(d.train.channels, 3u);
  EXPECT_EQ(d.train.height, 2u);
  EXPECT_EQ(d.train.width, 4u);
  // Standardised with train statistics: the blue channel mean is ~0.
  double blue = 0;
  for (std::size_t s = 0; s < d.train.size(); ++s)
    for (std::size_t p = 0; p < 8; ++p) blue += d.train.pixels[s * 24 + 16 + p];
  EXPECT_NEAR(blue / (16.0 * 8), 0.0, 1e-5);
  const auto again = load_image_directory(root, {0.8, 0.1}, 5);
  EXPECT_EQ(again.test.pixels, d.test.pixels);
  fs::remove_all(root);
  EXPECT_THROW(load_image_directory(root, {0.8, 0.1}, 5), DatasetError);
}

// ---------------------------------------------------------------------------
// Masks and masked cross-entropy
// ---------------------------------------------------------------------------

TEST(SampleMask, ZeroRateKeepsEverythingFullRateKeepsOnlyTarget) {
  const auto p = SuperclassPartition::contiguous(12, 4);
  Rng rng(1);
  const std::vector<int> targets{0, 3, 2};
  const TensorF all = sample_mask(p, targets, 0.0, rng);
  for (float v : all.values()) EXPECT_EQ(v, 1.0f);
  const TensorF only = sample_mask(p, targets, 1.0, rng);
  for (std::size_t n = 0; n < targets.size(); ++n)
    for (int c = 0; c < 12; ++c) EXPECT_EQ(only[n * 12 + c], c / 3 == targets[n] ? 1.0f : 0.0f);
}

TEST(SampleMask, TargetPreservedAndGroupsAtomic) {
  const auto p = groups_of_two(5);
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<int> targets(8);
    for (auto& t : targets) t = static_cast<int>(rng.index(5));
    const TensorF m = sample_mask(p, targets, 0.5, rng);
    for (std::size_t n = 0; n < targets.size(); ++n)
      for (int t = 0; t < 5; ++t) {
        const float a = m[n * 10 + 2 * t], b = m[n * 10 + 2 * t + 1];
        EXPECT_EQ(a, b);
        if (t == targets[n]) {
          EXPECT_EQ(a, 1.0f);
        }
      }
  }
}

TEST(SampleMask, DropFrequencyMatchesRate) {
  const auto p = groups_of_two(10);
  Rng rng(3);
  const int draws = 100000;
  std::vector<int> dropped(10, 0);
  const std::vector<int> target{4};
  for (int i = 0; i < draws; ++i) {
    const TensorF m = sample_mask(p, target, 0.6, rng);
    for (int t = 0; t < 10; ++t) dropped[t] += m[2 * t] == 0.0f;
  }
  for (int t = 0; t < 10; ++t) {
    if (t == 4) {
      EXPECT_EQ(dropped[t], 0);
    } else {
      EXPECT_NEAR(static_cast<double>(dropped[t]) / draws, 0.6, 0.01) << "group " << t;
    }
  }
}

TEST(SampleMask, StreamPositionDoesNotDependOnRate) {
  const auto p = SuperclassPartition::contiguous(12, 4);
  Rng a(4), b(4);
  const std::vector<int> targets{0, 1, 2, 3};
  sample_mask(p, targets, 0.0, a);
  sample_mask(p, targets, 0.9, b);
  EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(MaskedCrossEntropy, AllOnesEqualsStandardCrossEntropy) {
  Rng rng(5);
  Graph<double> g;
  TensorD logits(Shape{3, 7});
  for (auto& v : logits.values()) v = 3.0 * rng.normal();
  const std::vector<int> labels{0, 6, 3};
  const TensorD ones(Shape{3, 7}, 1.0);
  const double got = masked_cross_entropy(g.constant(logits), ones, std::span<const int>(labels)).value().item();
  double want = 0;
  for (std::size_t n = 0; n < 3; ++n) {
    std::vector<double> row(logits.data() + n * 7, logits.data() + n * 7 + 7);
    want += reference_ce(row, std::vector<bool>(7, true), labels[n]);
  }
  EXPECT_NEAR(got, want / 3, 1e-6);
}

TEST(MaskedCrossEntropy, UniformLogitsOverSixRetainedClassesGiveLn6) {
  Graph<double> g;
  const TensorD logits(Shape{1, 12}, 0.25);
  TensorD keep(Shape{1, 12}, 0.0);
  for (int c = 6; c < 12; ++c) keep[c] = 1.0;
  const std::vector<int> label{8};
  EXPECT_NEAR(masked_cross_entropy(g.constant(logits), keep, std::span<const int>(label)).value().item(),
              std::log(6.0), 1e-12);
}

TEST(MaskedCrossEntropy, MatchesRenormalisedSoftmaxOracle) {
  Rng rng(6);
  const auto p = SuperclassPartition::contiguous(12, 4);
  for (int trial = 0; trial < 50; ++trial) {
    Graph<double> g;
    TensorD logits(Shape{4, 12});
    for (auto& v : logits.values()) v = 4.0 * rng.normal();
    std::vector<int> labels(4), targets(4);
    for (int n = 0; n < 4; ++n) {
      labels[n] = static_cast<int>(rng.index(12));
      targets[n] = labels[n] / 3;
    }
    const TensorF maskf = sample_mask(p, targets, 0.5, rng);
    const TensorD keep = maskf.cast<double>();
    const double got = masked_cross_entropy(g.constant(logits), keep, std::span<const int>(labels)).value().item();
    double want = 0;
    for (std::size_t n = 0; n < 4; ++n) {
      std::vector<double> row(logits.data() + n * 12, logits.data() + n * 12 + 12);
      std::vector<bool> k(12);
      for (int c = 0; c < 12; ++c) k[c] = keep[n * 12 + c] != 0.0;
      want += reference_ce(row, k, labels[n]);
    }
    EXPECT_NEAR(got, want / 4, 1e-6);
  }
}

TEST(MaskedCrossEntropy, MaskedOutLabelIsAnError) {
  Graph<double> g;
  TensorD keep(Shape{1, 4}, 1.0);
  keep[2] = 0.0;
  const std::vector<int> label{2};
  EXPECT_THROW(masked_cross_entropy(g.constant(TensorD(Shape{1, 4})), keep, std::span<const int>(label)), MaskError);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST(Schedule, ProgressiveSplitsEpochsIntoFourPhases) {
  const auto s = TrainSchedule::progressive(10);
  ASSERT_EQ(s.phases.size(), 4u);
  EXPECT_EQ(s.total_epochs(), 10);
  EXPECT_EQ(s.phases[0].epochs, 3);
  EXPECT_EQ(s.phases[3].epochs, 2);
  EXPECT_FALSE(s.phases[0].dims.kernel || s.phases[0].dims.depth || s.phases[0].dims.expand);
  EXPECT_TRUE(s.phases[1].dims.kernel && !s.phases[1].dims.depth);
  EXPECT_TRUE(s.phases[3].dims.expand);
  const auto back = TrainSchedule::from_json(s.to_json());
  EXPECT_EQ(back.total_epochs(), 10);
  EXPECT_THROW(DropoutConfig{1.5}.validate(), std::invalid_argument);
}

TEST(TrainSupernet, ZeroRateIsBitIdenticalToNoDropout) {
  const auto data = make_synthetic(tiny_data_spec(7));
  const auto part = SuperclassPartition::contiguous(6, 3);
  const auto space = tiny_space(6);
  TrainSchedule sched = TrainSchedule::progressive(4);
  sched.batch_size = 16;
  sched.eval_per_superclass = 8;
  Rng init(8);
  const Supernet start = Supernet::create(space, init);

  Supernet a = start, b = start;
  const Rng rng(9);
  const auto log_a = train_supernet(a, data, part, sched, DropoutConfig{0.0, true}, rng);
  const auto log_b = train_supernet(b, data, part, sched, DropoutConfig{0.0, false}, rng);
  EXPECT_EQ(a.weights, b.weights);
  EXPECT_EQ(log_a.csv(), log_b.csv());
  EXPECT_NE(a.weights, start.weights);

  // A positive rate must actually change the trajectory.
  Supernet c = start;
  train_supernet(c, data, part, sched, DropoutConfig{0.5, true}, rng);
  EXPECT_NE(c.weights, a.weights);
}

TEST(TrainSupernet, FullRateGivesZeroHeadGradientOutsideTargetSuperclass) {
  const auto space = tiny_space(6);
  const auto part = SuperclassPartition::contiguous(6, 3);
  Rng rng(10);
  const Supernet net = Supernet::create(space, rng);
  TensorF x(Shape{4, 3, 8, 8});
  for (auto& v : x.values()) v = static_cast<float>(rng.normal());
  const std::vector<int> labels{2, 3, 3, 2};  // all superclass 1
  const std::vector<int> targets{1, 1, 1, 1};
  const TensorF keep = sample_mask(part, targets, 1.0, rng);
  Graph<float> g;
  const auto p = bind_weights(g, net.weights, true);
  const auto loss =
      masked_cross_entropy(forward_arch(space, p, g.constant(x), largest_arch(space)), keep, std::span<const int>(labels));
  const auto grads = g.backward(loss);
  const TensorF& w2 = grads.at("head.fc2.w");
  const TensorF& b2 = grads.at("head.fc2.b");
  for (int c = 0; c < 6; ++c) {
    double row = 0;
    for (int h = 0; h < 16; ++h) row += std::abs(w2[c * 16 + h]);
    if (c == 2 || c == 3) {
      EXPECT_GT(row, 0.0) << c;
    } else {
      EXPECT_EQ(row, 0.0) << c;
      EXPECT_EQ(b2[c], 0.0f) << c;
    }
  }
}

TEST(TrainSupernet, LogHasOneRowPerEpochAndCsvHeader) {
  const auto data = make_synthetic(tiny_data_spec(11));
  const auto part = SuperclassPartition::contiguous(6, 3);
  Rng init(12);
  Supernet net = Supernet::create(tiny_space(6), init);
  TrainSchedule sched = TrainSchedule::progressive(4);
  sched.batch_size = 32;
  sched.distill = true;
  int callbacks = 0;
  TrainOptions opts;
  opts.on_epoch = [&](const EpochMetrics&) { ++callbacks; };
  const auto log = train_supernet(net, data, part, sched, DropoutConfig{0.3}, Rng(13), opts);
  ASSERT_EQ(log.epochs.size(), 4u);
  EXPECT_EQ(callbacks, 4);
  EXPECT_EQ(log.epochs[2].phase, "depth");
  EXPECT_EQ(log.epochs[1].superclass_acc.size(), 3u);
  EXPECT_NEAR(log.epochs[0].lr, 0.01, 1e-12);
  EXPECT_EQ(log.csv().substr(0, log.csv().find('\n')), "epoch,phase,loss,lr,val_acc_s0,val_acc_s1,val_acc_s2");
}

TEST(TrainSupernet, NonFiniteLossAbortsWithCheckpoint) {
  const auto data = make_synthetic(tiny_data_spec(14));
  const auto part = SuperclassPartition::contiguous(6, 3);
  Rng init(15);
  Supernet net = Supernet::create(tiny_space(6), init);
  net.weights.at("head.fc2.b")[0] = std::numeric_limits<float>::quiet_NaN();
  TrainOptions opts;
  opts.divergence_checkpoint = std::filesystem::temp_directory_path() / "eas_diverged_test.ckpt";
  std::filesystem::remove(opts.divergence_checkpoint);
  try {
    train_supernet(net, data, part, TrainSchedule::progressive(4), DropoutConfig{}, Rng(16), opts);
    FAIL() << "expected divergence";
  } catch (const TrainingDiverged& e) {
    EXPECT_EQ(e.checkpoint(), opts.divergence_checkpoint);
    EXPECT_TRUE(std::filesystem::exists(e.checkpoint()));
    const auto saved = load_supernet(e.checkpoint());
    EXPECT_TRUE(std::isnan(saved.weights.at("head.fc2.b")[0]));
  }
  std::filesystem::remove(opts.divergence_checkpoint);
}

TEST(TrainSupernet, MismatchedInputsAreRejectedBeforeTraining) {
  const auto data = make_synthetic(tiny_data_spec(17));
  Rng init(18);
  Supernet net = Supernet::create(tiny_space(5), init);
  EXPECT_THROW(train_supernet(net, data, SuperclassPartition::contiguous(6, 3), TrainSchedule::progressive(4),
                              DropoutConfig{}, Rng(0)),
               std::invalid_argument);
  Supernet ok = Supernet::create(tiny_space(6), init);
  auto bad = SuperclassPartition::contiguous(6, 3);
  bad.superclasses[0].classes.push_back(99);
  EXPECT_THROW(train_supernet(ok, data, bad, TrainSchedule::progressive(4), DropoutConfig{}, Rng(0)), PartitionError);
}
