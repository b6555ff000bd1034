#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "oracles.hpp"
#include "support.hpp"
#include "vpm/checkpoint.hpp"
#include "vpm/tensor.hpp"

using namespace vpm;
using vpm::test::check_gradients;
using vpm::test::conv_oracle;
using vpm::test::ptrs;

namespace {

double max_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(Tensor, ShapeAndIndexing) {
  Tensor t(Shape{2, 3, 4}, 1.5);
  EXPECT_EQ(t.size(), 24u);
  EXPECT_EQ(t.rank(), 3);
  t.at(1, 2, 3) = 7.0;
  EXPECT_EQ(t[23], 7.0);
  EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor(Shape{2}).item(), ShapeError);
  EXPECT_THROW(t.reshaped({5, 5}), ShapeError);
}

TEST(Conv2d, MatchesNaiveOracle) {
  Rng rng(1);
  for (int stride : {1, 2, 3}) {
    for (int pad : {0, 1, 2}) {
      const Tensor x = Tensor::randn({3, 9, 7}, 1.0, rng);
      const Tensor k = Tensor::randn({4, 3, 3, 3}, 1.0, rng);
      const Tensor b = Tensor::randn({4}, 1.0, rng);
      const Var out = conv2d(Var(x), Var(k), Var(b), stride, pad);
      EXPECT_LT(max_diff(out.value(), conv_oracle(x, k, &b, stride, pad)), 1e-10) << stride << ' ' << pad;
      const Var nobias = conv2d(Var(x), Var(k), stride, pad);
      EXPECT_LT(max_diff(nobias.value(), conv_oracle(x, k, nullptr, stride, pad)), 1e-10);
    }
  }
}

TEST(Conv2d, RejectsBadGeometry) {
  EXPECT_THROW(conv2d(Var(Tensor(Shape{3, 4, 4})), Var(Tensor(Shape{2, 2, 3, 3})), 1, 1), ShapeError);
  EXPECT_THROW(conv2d(Var(Tensor(Shape{3, 4, 4})), Var(Tensor(Shape{2, 3, 3, 3})), 0, 1), std::invalid_argument);
}

TEST(FullyConnected, MatchesMatrixProduct) {
  Rng rng(2);
  const Tensor x = Tensor::randn({5}, 1.0, rng);
  const Tensor w = Tensor::randn({3, 5}, 1.0, rng);
  const Tensor b = Tensor::randn({3}, 1.0, rng);
  const Var y = fully_connected(Var(x), Var(w), Var(b));
  for (int o = 0; o < 3; ++o) {
    double s = b[o];
    for (int i = 0; i < 5; ++i) s += w.at(o, i) * x[i];
    EXPECT_NEAR(y.value()[o], s, 1e-12);
  }
  EXPECT_THROW(fully_connected(Var(x), Var(Tensor(Shape{3, 4})), Var(b)), ShapeError);
}

TEST(Softmax, MatchesOracleAndIsStable) {
  const Var y = softmax(Var(Tensor(Shape{3}, {1.0, 2.0, 3.0})));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  EXPECT_NEAR(y.value()[0], std::exp(1.0) / z, 1e-15);
  EXPECT_NEAR(y.value()[2], std::exp(3.0) / z, 1e-15);
  const Var big = softmax(Var(Tensor(Shape{2}, {1000.0, -1000.0})));
  EXPECT_NEAR(big.value()[0], 1.0, 1e-15);
  EXPECT_TRUE(big.value().all_finite());
}

TEST(CrossEntropy, KnownValues) {
  EXPECT_NEAR(cross_entropy(Var(Tensor(Shape{4}, 0.0)), 2).item(), std::log(4.0), 1e-15);
  EXPECT_NEAR(cross_entropy(Var(Tensor(Shape{2}, {800.0, 0.0})), 0).item(), 0.0, 1e-12);
  EXPECT_THROW(cross_entropy(Var(Tensor(Shape{2})), 2), std::out_of_range);
}

TEST(Ops, ReluGapNormRow) {
  const Var r = relu(Var(Tensor(Shape{3}, {-1.0, 0.0, 2.0})));
  EXPECT_EQ(r.value()[0], 0.0);
  EXPECT_EQ(r.value()[2], 2.0);
  const Var lk = relu(Var(Tensor(Shape{2}, {-2.0, 3.0})), 0.1);
  EXPECT_DOUBLE_EQ(lk.value()[0], -0.2);
  const Var g = global_average_pool(Var(Tensor(Shape{2, 1, 2}, {1.0, 3.0, -2.0, 4.0})));
  EXPECT_DOUBLE_EQ(g.value()[0], 2.0);
  EXPECT_DOUBLE_EQ(g.value()[1], 1.0);
  EXPECT_DOUBLE_EQ(norm(Var(Tensor(Shape{2}, {3.0, 4.0}))).item(), 5.0);
  EXPECT_DOUBLE_EQ(row(Var(Tensor(Shape{2, 2}, {1, 2, 3, 4})), 1).value()[0], 3.0);
  EXPECT_EQ(add_n({}).item(), 0.0);
}

TEST(Backward, RequiresScalar) {
  Parameter p("p", Tensor(Shape{2}, 1.0));
  EXPECT_THROW(backward(scale(p, 2.0)), ShapeError);
}

TEST(Backward, SharedSubgraphAccumulates) {
  Parameter p("p", Tensor::scalar(3.0));
  const Var y = mul(p, p);  // y = p^2
  backward(add(y, y));      // d/dp 2p^2 = 4p
  EXPECT_DOUBLE_EQ(p.grad()[0], 12.0);
}

TEST(GradCheck, ElementwiseAndReductions) {
  Rng rng(3);
  std::vector<Parameter> ps{Parameter("a", Tensor::randn({4}, 1.0, rng)), Parameter("b", Tensor::randn({4}, 1.0, rng))};
  auto params = ptrs(ps);
  const auto& a = ps[0];
  const auto& b = ps[1];
  const auto r = check_gradients(
      [&] {
        Var t = add(mul(a, b), sub(scale(a, 0.5), add_scalar(b, 0.2)));
        t = relu(t, 0.1);
        return add_n({sum(softmax(t)), norm(t), cross_entropy(t, 1), sum(mul(softmax(a), b))});
      },
      params);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.checked, 8u);
}

TEST(GradCheck, ConvGapFc) {
  Rng rng(4);
  std::vector<Parameter> ps{Parameter("x", Tensor::randn({2, 5, 4}, 1.0, rng)),
                            Parameter("k", Tensor::randn({3, 2, 3, 3}, 0.5, rng)),
                            Parameter("kb", Tensor::randn({3}, 0.5, rng)),
                            Parameter("w", Tensor::randn({2, 3}, 0.5, rng)),
                            Parameter("wb", Tensor::randn({2}, 0.5, rng))};
  auto params = ptrs(ps);
  for (int stride : {1, 2}) {
    const auto r = check_gradients(
        [&] {
          const Var y = relu(conv2d(ps[0], ps[1], ps[2], stride, 1), 0.05);
          const Var f = fully_connected(global_average_pool(y), ps[3], ps[4]);
          const Var rr = reshape(y, {3, y.dim(1) * y.dim(2)});
          return add(cross_entropy(f, 0), sum(mul(row(rr, 1), row(rr, 2))));
        },
        params);
    EXPECT_LT(r.max_rel_error, 1e-4) << "stride " << stride;
  }
}

TEST(Sgd, UpdateRuleExamples) {
  Parameter p("p", Tensor::scalar(1.0));
  std::vector<Parameter*> params{&p};
  backward(scale(p, 2.0));  // grad = 2
  sgd_step(params, 0.1);
  EXPECT_DOUBLE_EQ(p.value().item(), 0.8);
  EXPECT_EQ(p.grad()[0], 0.0);

  backward(scale(p, 2.0));
  sgd_step(params, 0.0);
  EXPECT_DOUBLE_EQ(p.value().item(), 0.8);
}

TEST(Sgd, FrozenParameterUnchanged) {
  Parameter p("p", Tensor::scalar(1.0), false);
  Parameter q("q", Tensor::scalar(1.0));
  std::vector<Parameter*> params{&p, &q};
  backward(add(mul(p, q), q));
  sgd_step(params, 0.5);
  EXPECT_EQ(p.value().item(), 1.0);
  EXPECT_DOUBLE_EQ(q.value().item(), 0.0);
}

TEST(Sgd, ConvergesOnQuadraticBowl) {
  Rng rng(5);
  Parameter x("x", Tensor::randn({6}, 3.0, rng));
  const Tensor target = Tensor::randn({6}, 1.0, rng);
  std::vector<Parameter*> params{&x};
  for (int it = 0; it < 200; ++it) {
    const Var d = sub(x, Var(target));
    backward(sum(mul(d, d)));
    sgd_step(params, 0.1);
  }
  for (int i = 0; i < 6; ++i) EXPECT_NEAR(x.value()[i], target[i], 1e-9);
}

TEST(GradClip, ScalesToMaxNorm) {
  Parameter p("p", Tensor(Shape{2}, {0.0, 0.0}));
  std::vector<Parameter*> params{&p};
  backward(sum(mul(Var(Tensor(Shape{2}, {3.0, 4.0})), p)));
  EXPECT_DOUBLE_EQ(grad_norm(params), 5.0);
  scale_grads(params, 0.2);
  EXPECT_DOUBLE_EQ(grad_norm(params), 1.0);
}

TEST(Checkpoint, RoundTripsExactly) {
  Rng rng(6);
  std::vector<Parameter> ps{Parameter("a.weight", Tensor::randn({2, 3}, 1.0, rng)),
                            Parameter("b", Tensor::scalar(-0.0)), Parameter("c", Tensor::randn({1, 2, 2, 1}, 1e-300, rng))};
  auto params = ptrs(ps);
  std::stringstream buf;
  write_checkpoint(buf, snapshot(params));
  const TensorMap back = read_checkpoint(buf);
  ASSERT_EQ(back.size(), 3u);
  for (const auto& p : ps) {
    const Tensor& t = back.at(p.name());
    EXPECT_EQ(t.shape(), p.value().shape());
    for (std::size_t i = 0; i < t.size(); ++i) EXPECT_EQ(std::bit_cast<std::uint64_t>(t[i]), std::bit_cast<std::uint64_t>(p.value()[i]));
  }
  std::vector<Parameter> other{Parameter("a.weight", Tensor(Shape{2, 3})), Parameter("b", Tensor::scalar(5.0)),
                               Parameter("c", Tensor(Shape{1, 2, 2, 1}))};
  auto op = ptrs(other);
  restore(op, back);
  EXPECT_EQ(other[0].value().values()[4], ps[0].value().values()[4]);
}

TEST(Checkpoint, RejectsMismatchAndCorruption) {
  std::vector<Parameter> ps{Parameter("w", Tensor(Shape{2, 2}, 1.0))};
  auto params = ptrs(ps);
  std::stringstream buf;
  write_checkpoint(buf, snapshot(params));
  const std::string bytes = buf.str();

  std::vector<Parameter> wrong{Parameter("w", Tensor(Shape{4}))};
  auto wp = ptrs(wrong);
  std::stringstream again(bytes);
  EXPECT_THROW(restore(wp, read_checkpoint(again)), std::exception);

  std::vector<Parameter> missing{Parameter("v", Tensor(Shape{2, 2}))};
  auto mp = ptrs(missing);
  std::stringstream again2(bytes);
  EXPECT_THROW(restore(mp, read_checkpoint(again2)), std::exception);

  std::stringstream truncated(bytes.substr(0, bytes.size() - 5));
  EXPECT_THROW(read_checkpoint(truncated), FormatError);
  std::stringstream bad("NOTACKPT");
  EXPECT_THROW(read_checkpoint(bad), FormatError);
}
