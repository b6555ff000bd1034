#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <tuple>

#include "oracles.hpp"
#include "support.hpp"
#include "vpm/training.hpp"

using namespace vpm;
using vpm::test::check_gradients;
using vpm::test::MiningBatch;
using vpm::test::mining_oracle;
using vpm::test::oracle_distance;
using vpm::test::random_batch;

namespace {

RegionSupervision random_supervision(int p, int h, int w, Rng& rng) {
  RegionSupervision sup{h, w, p, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w)), std::vector<bool>(p, false)};
  std::uniform_int_distribution<int> id(1, p);
  for (auto& l : sup.labels) {
    l = static_cast<std::uint8_t>(id(rng));
    sup.visible[l - 1] = true;
  }
  return sup;
}

Tensor random_maps(int p, int h, int w, Rng& rng) {
  Tensor t = Tensor::uniform({p, h, w}, 0.05, 1.0, rng);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int i = 0; i < p; ++i) s += t.at(i, y, x);
      for (int i = 0; i < p; ++i) t.at(i, y, x) /= s;
    }
  }
  return t;
}

double nll_oracle(const std::vector<double>& logits, int label0) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return -(logits[label0] - mx - std::log(z));
}

// Head output computed with explicit loops over its exposed parameters.
std::vector<double> head_oracle(IdentityHead& head, const Tensor& feature) {
  std::vector<Parameter*> ps;
  head.collect(ps);
  const Tensor &w1 = ps[0]->value(), &b1 = ps[1]->value(), &w2 = ps[2]->value(), &b2 = ps[3]->value();
  std::vector<double> hidden(static_cast<std::size_t>(w1.dim(0)));
  for (int r = 0; r < w1.dim(0); ++r) {
    double s = b1.values()[r];
    for (int c = 0; c < w1.dim(1); ++c) s += w1.at(r, c) * feature.values()[c];
    hidden[r] = s;
  }
  std::vector<double> out(static_cast<std::size_t>(w2.dim(0)));
  for (int r = 0; r < w2.dim(0); ++r) {
    double s = b2.values()[r];
    for (int c = 0; c < w2.dim(1); ++c) s += w2.at(r, c) * hidden[c];
    out[r] = s;
  }
  return out;
}

}  // namespace

TEST(RegionLoss, UniformMapsClosedForm) {
  Rng rng(1);
  const RegionSupervision sup = random_supervision(6, 8, 4, rng);
  const Var maps(Tensor({6, 8, 4}, 1.0 / 6.0));
  EXPECT_NEAR(region_loss(maps, sup).item(), 32.0 * std::log(6.0), 1e-12);
}

TEST(RegionLoss, OneHotMapsGiveZero) {
  Rng rng(2);
  const RegionSupervision sup = random_supervision(3, 4, 2, rng);
  Tensor t({3, 4, 2}, 1e-300);
  for (int y = 0; y < 4; ++y) {
    for (int x = 0; x < 2; ++x) t.at(sup.label(y, x) - 1, y, x) = 1.0;
  }
  EXPECT_NEAR(region_loss(Var(t), sup).item(), 0.0, 1e-12);
}

TEST(RegionLoss, MatchesPixelLoopOracle) {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    const int p = 2 + trial % 5, h = 3 + trial % 4, w = 2 + trial % 3;
    const RegionSupervision sup = random_supervision(p, h, w, rng);
    const Tensor maps = random_maps(p, h, w, rng);
    double oracle = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) oracle -= std::log(maps.at(sup.label(y, x) - 1, y, x));
    }
    EXPECT_NEAR(region_loss(Var(maps), sup).item(), oracle, 1e-10);
  }
}

TEST(RegionLoss, Errors) {
  Rng rng(4);
  RegionSupervision sup = random_supervision(3, 4, 2, rng);
  EXPECT_THROW(region_loss(Var(Tensor({3, 4, 3}, 0.3)), sup), ShapeError);
  sup.labels[0] = 4;
  EXPECT_THROW(region_loss(Var(Tensor({3, 4, 2}, 0.3)), sup), std::out_of_range);
}

TEST(IdentityLoss, MatchesPerHeadOracle) {
  Rng rng(5);
  std::vector<IdentityHead> heads;
  for (int i = 0; i < 2; ++i) heads.emplace_back("h" + std::to_string(i), 4, 3, 5, rng);
  for (int trial = 0; trial < 10; ++trial) {
    const Tensor f = Tensor::randn({2, 4}, 1.0, rng);
    const int label = 1 + trial % 5;
    double oracle = 0.0;
    for (int i = 0; i < 2; ++i) {
      const Tensor fi({4}, std::vector<double>(f.values().begin() + 4 * i, f.values().begin() + 4 * (i + 1)));
      oracle += nll_oracle(head_oracle(heads[i], fi), label - 1);
    }
    EXPECT_NEAR(identity_loss(Var(f), {true, true}, label, heads).item(), oracle, 1e-10);

    const Tensor f0({4}, std::vector<double>(f.values().begin(), f.values().begin() + 4));
    EXPECT_NEAR(identity_loss(Var(f), {true, false}, label, heads).item(), nll_oracle(head_oracle(heads[0], f0), label - 1),
                1e-10);
  }
}

TEST(IdentityLoss, MaskIsNoOpUnderFullVisibility) {
  Rng rng(6);
  std::vector<IdentityHead> heads;
  for (int i = 0; i < 4; ++i) heads.emplace_back("h" + std::to_string(i), 5, 3, 7, rng);
  for (int trial = 0; trial < 100; ++trial) {
    const Var f(Tensor::randn({4, 5}, 1.0, rng));
    const int label = 1 + trial % 7;
    const std::vector<bool> all(4, true);
    EXPECT_EQ(identity_loss(f, all, label, heads, true).item(), identity_loss(f, all, label, heads, false).item());
    const std::vector<bool> some{true, false, true, false};
    const double masked = identity_loss(f, some, label, heads, true).item();
    const double unmasked = identity_loss(f, some, label, heads, false).item();
    EXPECT_GE(masked, 0.0);
    EXPECT_LE(masked, unmasked);
  }
}

TEST(IdentityLoss, Errors) {
  Rng rng(7);
  std::vector<IdentityHead> heads;
  for (int i = 0; i < 2; ++i) heads.emplace_back("h" + std::to_string(i), 3, 2, 4, rng);
  const Var f(Tensor::randn({2, 3}, 1.0, rng));
  EXPECT_THROW(identity_loss(f, {true, true}, 0, heads), std::out_of_range);
  EXPECT_THROW(identity_loss(f, {true, true}, 5, heads), std::out_of_range);
  EXPECT_THROW(identity_loss(f, {false, false}, 1, heads), std::invalid_argument);
  EXPECT_THROW(identity_loss(f, {true}, 1, heads), ShapeError);
}

TEST(MaskedDistance, Examples) {
  const Tensor a({3, 1}, std::vector<double>{0.0, 0.0, 0.0});
  const Tensor b({3, 1}, std::vector<double>{0.7, 2.0, -3.0});
  const Tensor c({3, 1}, std::vector<double>{1.0, 2.0, 3.0});
  const std::vector<int> first{0};
  EXPECT_DOUBLE_EQ(masked_pair_distance(a, b, first), 0.7);
  EXPECT_DOUBLE_EQ(masked_pair_distance(a, c, all_regions(3)), 2.0);
  EXPECT_DOUBLE_EQ(masked_pair_distance(b, b, all_regions(3)), 0.0);
  EXPECT_EQ(shared_regions({true, false, true}, {true, true, false}), (std::vector<int>{0}));
  EXPECT_THROW(masked_pair_distance(a, b, std::vector<int>{}), std::invalid_argument);
  EXPECT_DOUBLE_EQ(masked_pair_distance(Var(a), Var(c), all_regions(3)).item(), 2.0);
}

TEST(TripletLoss, HingeArithmetic) {
  const TripletConfig cfg;  // margin 1
  const std::vector<bool> all{true};
  const TripletInput anchor{Var(Tensor({1, 1}, 0.0)), all};
  const TripletInput pos{Var(Tensor({1, 1}, 0.2)), all};
  const TripletInput neg{Var(Tensor({1, 1}, -0.5)), all};
  EXPECT_NEAR(triplet_loss(anchor, pos, neg, cfg).item(), 0.7, 1e-15);
  const TripletInput same{Var(Tensor({1, 1}, 0.0)), all};
  const TripletInput far{Var(Tensor({1, 1}, 2.0)), all};
  EXPECT_EQ(triplet_loss(anchor, same, far, cfg).item(), 0.0);
}

TEST(TripletLoss, FullVisibilityMatchesUnmaskedOracle) {
  Rng rng(8);
  const TripletConfig cfg;
  for (int trial = 0; trial < 100; ++trial) {
    const int p = 1 + trial % 6;
    MiningBatch b = random_batch(3, p, 4, 3, false, false, rng);
    const double oracle = std::max(0.0, oracle_distance(b, 0, 1, false) - oracle_distance(b, 0, 2, false) + 1.0);
    const TripletInput a{Var(b.features[0]), b.visible[0]}, pp{Var(b.features[1]), b.visible[1]},
        n{Var(b.features[2]), b.visible[2]};
    const double masked = triplet_loss(a, pp, n, cfg, true).item();
    EXPECT_NEAR(masked, oracle, 1e-12);
    EXPECT_EQ(masked, triplet_loss(a, pp, n, cfg, false).item());
    EXPECT_GE(masked, 0.0);
    EXPECT_LE(masked, oracle_distance(b, 0, 1, false) + 1.0 + 1e-12);
  }
}

TEST(TripletLoss, MaskUsesSharedRegionsOnly) {
  // Region 2 differs wildly but is hidden in the anchor.
  const Tensor fa({2, 1}, std::vector<double>{0.0, 0.0});
  const Tensor fp({2, 1}, std::vector<double>{0.1, 50.0});
  const Tensor fn({2, 1}, std::vector<double>{0.4, 0.0});
  const TripletInput a{Var(fa), {true, false}}, p{Var(fp), {true, true}}, n{Var(fn), {true, true}};
  EXPECT_NEAR(triplet_loss(a, p, n, {}, true).item(), 0.1 - 0.4 + 1.0, 1e-12);
  EXPECT_NEAR(triplet_loss(a, p, n, {}, false).item(), (0.1 + 50.0) / 2 - 0.2 + 1.0, 1e-12);
}

TEST(Mining, HandEnumerated) {
  // Ids 1,1,2,2 on a line: 0, 1, 3, 7.
  MiningBatch b;
  for (double x : {0.0, 1.0, 3.0, 7.0}) b.features.push_back(Tensor({1, 1}, x));
  b.labels = {1, 1, 2, 2};
  b.visible.assign(4, {true});
  const auto items = b.items();
  EXPECT_EQ(mine_batch_hard(items), (std::vector<Triplet>{{0, 1, 2}, {1, 0, 2}, {2, 3, 1}, {3, 2, 1}}));
  EXPECT_EQ(mine_all(items).size(), 8u);
}

TEST(Mining, IdenticalImages) {
  MiningBatch b;
  for (int i = 0; i < 4; ++i) b.features.push_back(Tensor({2, 3}, 0.5));
  b.labels = {1, 1, 2, 2};
  b.visible.assign(4, {true, true});
  const auto items = b.items();
  const auto triplets = mine_batch_hard(items);
  ASSERT_EQ(triplets.size(), 4u);
  EXPECT_EQ(triplets[0], (Triplet{0, 1, 2}));  // lowest index on ties
  for (const auto& t : triplets) {
    const TripletInput a{Var(b.features[t.anchor]), b.visible[t.anchor]};
    const TripletInput p{Var(b.features[t.positive]), b.visible[t.positive]};
    const TripletInput n{Var(b.features[t.negative]), b.visible[t.negative]};
    EXPECT_EQ(triplet_loss(a, p, n, {}).item(), 1.0);
  }
}

TEST(Mining, SingleIdentityGivesNothing) {
  Rng rng(9);
  MiningBatch b = random_batch(6, 2, 3, 1, false, false, rng);
  EXPECT_TRUE(mine_batch_hard(b.items()).empty());
  EXPECT_TRUE(mine_all(b.items()).empty());
}

TEST(Mining, DisjointVisibilitySkipsPairs) {
  MiningBatch b;
  for (double x : {0.0, 1.0, 5.0, 2.0}) b.features.push_back(Tensor({2, 1}, x));
  b.labels = {1, 1, 2, 2};
  b.visible = {{true, false}, {false, true}, {true, false}, {true, true}};
  // 0 and 1 share nothing, so anchor 0 has no positive.
  const auto t = mine_batch_hard(b.items());
  for (const auto& tr : t) EXPECT_NE(tr.anchor, 0);
  EXPECT_EQ(t, mining_oracle(b, true));
  EXPECT_EQ(mine_batch_hard(b.items(), false), mining_oracle(b, false));
}

TEST(Mining, MatchesExhaustiveOracle) {
  Rng rng(10);
  int nonempty = 0;
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 2 + trial % 15;  // up to 16
    const bool coarse = trial % 2 == 0, partial = trial % 3 != 0, mask = trial % 4 != 1;
    const MiningBatch b = random_batch(n, 3, 2, 2 + trial % 4, coarse, partial, rng);
    const auto got = mine_batch_hard(b.items(), mask);
    EXPECT_EQ(got, mining_oracle(b, mask)) << "trial " << trial;
    if (!got.empty()) ++nonempty;
  }
  EXPECT_GE(nonempty, 100);
}

TEST(Mining, PermutationInvariant) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 4 + trial % 13;
    const MiningBatch b = random_batch(n, 3, 4, 3, false, trial % 2 == 0, rng);
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    MiningBatch shuffled;
    for (int i : perm) {
      shuffled.features.push_back(b.features[i]);
      shuffled.labels.push_back(b.labels[i]);
      shuffled.visible.push_back(b.visible[i]);
    }
    std::set<std::tuple<int, int, int>> original, mapped;
    for (const auto& t : mine_batch_hard(b.items())) original.insert({t.anchor, t.positive, t.negative});
    for (const auto& t : mine_batch_hard(shuffled.items())) mapped.insert({perm[t.anchor], perm[t.positive], perm[t.negative]});
    EXPECT_EQ(original, mapped);
  }
}

TEST(TotalLoss, Sum) {
  const Var a(Tensor::scalar(1.0)), b(Tensor::scalar(2.0)), c(Tensor::scalar(3.0)), z(Tensor::scalar(0.0));
  EXPECT_EQ(total_loss(a, b, c).item(), 6.0);
  EXPECT_EQ(total_loss(a, b).item(), 3.0);
  EXPECT_EQ(total_loss(z, z, z).item(), 0.0);
}

TEST(Schedule, LearningRateDecaysWithinStage) {
  TrainSchedule s;
  EXPECT_EQ(s.batch_size(), 16);
  EXPECT_EQ(s.lr_at(0), 0.1);
  EXPECT_EQ(s.lr_at(9), 0.1);
  EXPECT_EQ(s.lr_at(10), 0.01);
  EXPECT_EQ(AblationFlags::from_name("mvpm4"), (AblationFlags{false, false, true}));
  EXPECT_EQ(AblationFlags::from_name("mvpm1"), (AblationFlags{true, true, false}));
  EXPECT_THROW(AblationFlags::from_name("mvpm5"), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Gradient checks on a micro-batch

class GradientTest : public ::testing::Test {
 protected:
  void SetUp() override {
    Rng rng(3);
    model_.emplace(vpm::test::tiny_config(), rng);
    const Dataset d = synth_generate(vpm::test::tiny_synth(3, 2));
    const RegionGrid grid = make_region_grid(3, 1, 16, 8);
    for (const auto& s : d.samples) {
      auto prep = prepare_sample(s.image, grid, CropSpec{}, 4, 0.25, rng);
      images_.push_back(prep.image);
      sups_.push_back(prep.sup);
      labels_.push_back(s.identity);
    }
  }

  std::optional<VpmModel> model_;
  std::vector<Tensor> images_;
  std::vector<RegionSupervision> sups_;
  std::vector<int> labels_;
};

TEST_F(GradientTest, RegionLoss) {
  auto params = model_->parameters();
  const auto r = check_gradients([&] { return region_loss(model_->forward(Var(images_[0])).maps, sups_[0]); }, params);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_GT(r.checked, 100u);
}

TEST_F(GradientTest, IdentityLoss) {
  auto params = model_->parameters();
  for (bool mask : {true, false}) {
    const auto r = check_gradients(
        [&] {
          return identity_loss(model_->forward(Var(images_[1])).features, sups_[1].visible, labels_[1], model_->heads(), mask);
        },
        params);
    EXPECT_LT(r.max_rel_error, 1e-4) << mask;
  }
}

TEST_F(GradientTest, TripletLoss) {
  auto params = model_->parameters();
  const TripletConfig cfg{5.0, Mining::kBatchHard};  // keeps the hinge active
  for (bool mask : {true, false}) {
    const auto r = check_gradients(
        [&] {
          const auto a = model_->forward(Var(images_[0])), p = model_->forward(Var(images_[1])),
                     n = model_->forward(Var(images_[2]));
          return triplet_loss({a.features, sups_[0].visible}, {p.features, sups_[1].visible}, {n.features, sups_[2].visible},
                              cfg, mask);
        },
        params);
    EXPECT_LT(r.max_rel_error, 1e-4) << mask;
  }
}

TEST_F(GradientTest, TotalBatchLoss) {
  auto params = model_->parameters();
  const auto r = check_gradients(
      [&] {
        return batch_loss(*model_, std::span<const Tensor>(images_), std::span<const RegionSupervision>(sups_),
                          std::span<const int>(labels_), true, TripletConfig{}, AblationFlags{})
            .total;
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST_F(GradientTest, BatchLossAveragesSamples) {
  const auto pre = batch_loss(*model_, std::span<const Tensor>(images_), std::span<const RegionSupervision>(sups_),
                              std::span<const int>(labels_), false, TripletConfig{}, AblationFlags{});
  double region = 0.0, identity = 0.0;
  for (std::size_t i = 0; i < images_.size(); ++i) {
    const auto out = model_->forward(Var(images_[i]));
    region += region_loss(out.maps, sups_[i]).item();
    identity += identity_loss(out.features, sups_[i].visible, labels_[i], model_->heads()).item();
  }
  const double n = static_cast<double>(images_.size());
  EXPECT_NEAR(pre.region, region / n, 1e-10);
  EXPECT_NEAR(pre.identity, identity / n, 1e-10);
  EXPECT_EQ(pre.triplet, 0.0);
  EXPECT_NEAR(pre.total.item(), region / n + identity / n, 1e-10);
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

TrainOptions tiny_options(int pre, int fin) {
  TrainOptions opt;
  opt.m = 3;
  opt.schedule.pretrain_epochs = pre;
  opt.schedule.finetune_epochs = fin;
  opt.schedule.decay_epoch = 100;
  opt.schedule.batch_identities = 2;
  opt.schedule.images_per_identity = 2;
  opt.seed = 21;
  return opt;
}

}  // namespace

TEST(Train, LossDecreasesAndStagesAreLabelled) {
  const Dataset d = synth_generate(vpm::test::tiny_synth(3, 4));
  Rng rng(1);
  VpmModel model(vpm::test::tiny_config(), rng);
  const auto log = train(model, d, tiny_options(6, 3));
  ASSERT_EQ(log.size(), 9u);
  EXPECT_EQ(log[0].stage, "pretrain");
  EXPECT_EQ(log[6].stage, "finetune");
  for (int i = 0; i < 6; ++i) EXPECT_EQ(log[i].triplet, 0.0);
  EXPECT_LT(log[5].total, log[0].total);
  for (const auto& r : log) {
    EXPECT_GE(r.region, 0.0);
    EXPECT_GE(r.identity, 0.0);
    EXPECT_GE(r.triplet, 0.0);
  }
}

TEST(Train, LargeMarginTripletStaysPositiveAndFalls) {
  const Dataset d = synth_generate(vpm::test::tiny_synth(3, 4));
  Rng rng(2);
  VpmModel model(vpm::test::tiny_config(), rng);
  TrainOptions opt = tiny_options(0, 8);
  opt.triplet.margin = 20.0;
  const auto log = train(model, d, opt);
  for (const auto& r : log) EXPECT_GT(r.triplet, 0.0);
  EXPECT_LT(log.back().triplet, log.front().triplet);
}

TEST(Train, DeterministicForFixedSeed) {
  const Dataset d = synth_generate(vpm::test::tiny_synth(3, 4));
  std::string csv[2];
  std::vector<double> weights[2];
  for (int run = 0; run < 2; ++run) {
    Rng rng(4);
    VpmModel model(vpm::test::tiny_config(), rng);
    const auto log = train(model, d, tiny_options(2, 2));
    std::ostringstream os;
    write_loss_csv(os, log);
    csv[run] = os.str();
    for (Parameter* p : model.parameters()) weights[run].insert(weights[run].end(), p->value().values().begin(), p->value().values().end());
  }
  EXPECT_EQ(csv[0], csv[1]);
  EXPECT_EQ(weights[0], weights[1]);
  EXPECT_EQ(csv[0].substr(0, csv[0].find('\n')), "epoch,stage,L_R,L_ID,L_tri,L");
}

TEST(Train, BaselineTrains) {
  const Dataset d = synth_generate(vpm::test::tiny_synth(3, 4));
  Rng rng(5);
  BaselineModel model(vpm::test::tiny_config(), rng);
  const auto log = train(model, d, tiny_options(2, 2));
  for (const auto& r : log) EXPECT_EQ(r.region, 0.0);
  EXPECT_GT(log.back().identity, 0.0);
}

TEST(Train, RejectsBadInputs) {
  Rng rng(6);
  VpmModel model(vpm::test::tiny_config(3, 1, 3), rng);
  EXPECT_THROW(train(model, synth_generate(vpm::test::tiny_synth(5, 4)), tiny_options(1, 0)), TrainingError);
  TrainOptions opt = tiny_options(1, 0);
  opt.schedule.batch_identities = 4;
  EXPECT_THROW(train(model, synth_generate(vpm::test::tiny_synth(3, 4)), opt), TrainingError);
  SynthSpec wrong = vpm::test::tiny_synth(3, 4);
  wrong.height = 32;
  EXPECT_THROW(train(model, synth_generate(wrong), tiny_options(1, 0)), TrainingError);
}
