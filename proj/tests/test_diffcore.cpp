#include "autoassign/diffcore.hpp"
#include "autoassign/gradsuite.hpp"
#include "test_support.hpp"

#include <doctest.h>

#include <cmath>
#include <random>
#include <string>

using namespace autoassign;
using autoassign::testing::random_values;
using autoassign::testing::values;

namespace {

// Straight nested-loop cross-correlation, independent of the im2col path.
Eigen::ArrayXd naive_conv(const Eigen::ArrayXd& in, Index c, Index h, Index w,
                          const Eigen::ArrayXd& k, Index f, Index ks, Index stride, Index pad) {
  const Index oh = (h + 2 * pad - ks) / stride + 1;
  const Index ow = (w + 2 * pad - ks) / stride + 1;
  Eigen::ArrayXd out = Eigen::ArrayXd::Zero(f * oh * ow);
  for (Index fo = 0; fo < f; ++fo)
    for (Index y = 0; y < oh; ++y)
      for (Index x = 0; x < ow; ++x) {
        double acc = 0.0;
        for (Index ci = 0; ci < c; ++ci)
          for (Index i = 0; i < ks; ++i)
            for (Index j = 0; j < ks; ++j) {
              const Index iy = y * stride - pad + i;
              const Index ix = x * stride - pad + j;
              if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
              acc += in((ci * h + iy) * w + ix) * k(((fo * c + ci) * ks + i) * ks + j);
            }
        out((fo * oh + y) * ow + x) = acc;
      }
  return out;
}

double scalar_grad(const std::function<DiffArray(const DiffArray&)>& f, double x) {
  Tape tape;
  const DiffArray v = tape.variable({}, values({x}));
  tape.backward(f(v));
  return tape.grad(v)(0);
}

}  // namespace

TEST_CASE("elementwise forward values and gradients") {
  CHECK(scalar_grad([](const DiffArray& x) { return exp(x); }, 0.0) == 1.0);
  CHECK(exp(DiffArray::scalar(0.0)).item() == 1.0);
  CHECK(sigmoid(DiffArray::scalar(0.0)).item() == 0.5);
  CHECK(scalar_grad([](const DiffArray& x) { return sigmoid(x); }, 0.0) == 0.25);

  Tape tape;
  const DiffArray a = tape.variable({2}, values({2, 3}));
  const DiffArray b = tape.variable({2}, values({4, 5}));
  const DiffArray p = mul(a, b);
  CHECK(p.values()(0) == 8.0);
  CHECK(p.values()(1) == 15.0);
  tape.backward(sum(p));
  CHECK(tape.grad(a)(0) == 4.0);
  CHECK(tape.grad(a)(1) == 5.0);
  CHECK(tape.grad(b)(0) == 2.0);
}

TEST_CASE("elementwise dispatcher covers the tag set") {
  const DiffArray x = DiffArray::constant({2}, values({0.5, 2.0}));
  const DiffArray y = DiffArray::constant({2}, values({1.0, 4.0}));
  CHECK(elementwise(OpTag::kAdd, x, &y).values()(1) == 6.0);
  CHECK(elementwise(OpTag::kDiv, x, &y).values()(1) == 0.5);
  CHECK(elementwise(OpTag::kPower, x, nullptr, 2.0).values()(1) == 4.0);
  CHECK(elementwise(OpTag::kClamp, x, nullptr, 0.0, 1.0).values()(1) == 1.0);
  CHECK(elementwise(OpTag::kNegate, x).values()(0) == -0.5);
  CHECK_THROWS_AS(elementwise(OpTag::kMul, x), DiffError);
  CHECK_THROWS_AS(elementwise(OpTag::kSum, x), DiffError);
}

TEST_CASE("broadcasting follows trailing-dimension alignment") {
  Tape tape;
  const DiffArray m = tape.variable({2, 3}, values({1, 2, 3, 4, 5, 6}));
  const DiffArray row = tape.variable({1, 3}, values({10, 20, 30}));
  const DiffArray col = tape.variable({2, 1}, values({100, 200}));
  const DiffArray out = m + row + col;
  CHECK(out.shape() == Shape{2, 3});
  CHECK(out.values()(5) == 6 + 30 + 200);
  tape.backward(sum(out));
  CHECK((tape.grad(row) == 2.0).all());
  CHECK((tape.grad(col) == 3.0).all());
}

TEST_CASE("shape mismatch names both shapes") {
  const DiffArray a = DiffArray::full({2, 3}, 1.0);
  const DiffArray b = DiffArray::full({3, 2}, 1.0);
  try {
    (void)add(a, b);
    FAIL("expected rejection");
  } catch (const DiffError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[3,2]") != std::string::npos);
  }
}

TEST_CASE("log and div reject out-of-domain inputs") {
  CHECK_THROWS_AS(log(DiffArray::constant({2}, values({1.0, 0.0}))), DiffError);
  CHECK_THROWS_AS(log(DiffArray::scalar(-1.0)), DiffError);
  CHECK_THROWS_AS(div(DiffArray::scalar(1.0), DiffArray::scalar(0.0)), DiffError);
}

TEST_CASE("reductions") {
  SUBCASE("sum") {
    Tape tape;
    const DiffArray x = tape.variable({3}, values({1, 2, 3}));
    const DiffArray s = sum(x);
    CHECK(s.item() == 6.0);
    tape.backward(s);
    CHECK((tape.grad(x) == 1.0).all());
  }
  SUBCASE("max breaks ties to the first index") {
    Tape tape;
    const DiffArray x = tape.variable({3}, values({1, 3, 3}));
    const DiffArray m = max(x);
    CHECK(m.item() == 3.0);
    tape.backward(m);
    CHECK(tape.grad(x)(0) == 0.0);
    CHECK(tape.grad(x)(1) == 1.0);
    CHECK(tape.grad(x)(2) == 0.0);
  }
  SUBCASE("mean") {
    Tape tape;
    const DiffArray x = tape.variable({2}, values({2, 4}));
    const DiffArray m = mean(x);
    CHECK(m.item() == 3.0);
    tape.backward(m);
    CHECK((tape.grad(x) == 0.5).all());
  }
  SUBCASE("axis reductions drop the axis") {
    const DiffArray x = DiffArray::constant({2, 3}, values({1, 5, 2, 7, 0, 4}));
    CHECK(sum(x, 0).shape() == Shape{3});
    CHECK(sum(x, 1).values()(1) == 11.0);
    CHECK(max(x, 0).values()(1) == 5.0);
    CHECK(mean(x, 1).values()(0) == doctest::Approx(8.0 / 3.0));
  }
  SUBCASE("axis out of range") {
    const DiffArray x = DiffArray::full({2, 3}, 1.0);
    CHECK_THROWS_AS(sum(x, 2), DiffError);
    CHECK_THROWS_AS(max(x, -1), DiffError);
  }
}

TEST_CASE("stop_gradient") {
  SUBCASE("detached factor") {
    Tape tape;
    const DiffArray x = tape.variable({}, values({2.0}));
    const DiffArray y = stop_gradient(x) * x;
    CHECK(y.item() == 4.0);
    tape.backward(y);
    CHECK(tape.grad(x)(0) == 2.0);
  }
  SUBCASE("alone gives zero gradient") {
    Tape tape;
    const DiffArray x = tape.variable({3}, values({1, 2, 3}));
    tape.backward(sum(stop_gradient(x) * 2.0) + sum(DiffArray::full({3}, 0.0) * x));
    CHECK((tape.grad(x) == 0.0).all());
  }
  SUBCASE("forward value unchanged") {
    std::mt19937_64 rng(7);
    Tape tape;
    const DiffArray x = tape.variable({5}, random_values(rng, 5));
    const double plain = sum(exp(x) * sigmoid(x)).item();
    const double detached = sum(exp(stop_gradient(x)) * sigmoid(x)).item();
    CHECK(plain == detached);
  }
}

TEST_CASE("shared subexpressions accumulate gradients") {
  // z = y + y*a with y = a*b: dz/da = b + 2ab, dz/db = a + a^2.
  Tape tape;
  const double av = 1.5;
  const double bv = -0.75;
  const DiffArray a = tape.variable({}, values({av}));
  const DiffArray b = tape.variable({}, values({bv}));
  const DiffArray y = a * b;
  const DiffArray z = y + y * a;
  tape.backward(z);
  CHECK(tape.grad(a)(0) == doctest::Approx(bv + 2 * av * bv).epsilon(1e-15));
  CHECK(tape.grad(b)(0) == doctest::Approx(av + av * av).epsilon(1e-15));
}

TEST_CASE("conv2d") {
  SUBCASE("all ones") {
    const DiffArray in = DiffArray::full({1, 3, 3}, 1.0);
    const DiffArray k = DiffArray::full({1, 1, 3, 3}, 1.0);
    const DiffArray out = conv2d(in, k, 1, 0);
    CHECK(out.shape() == Shape{1, 1, 1});
    CHECK(out.item() == 9.0);
  }
  SUBCASE("identity kernel") {
    std::mt19937_64 rng(3);
    const DiffArray in = DiffArray::constant({1, 4, 5}, random_values(rng, 20));
    Eigen::ArrayXd kv = Eigen::ArrayXd::Zero(9);
    kv(4) = 1.0;
    const DiffArray out = conv2d(in, DiffArray::constant({1, 1, 3, 3}, kv), 1, 1);
    CHECK(out.shape() == in.shape());
    CHECK((out.values() == in.values()).all());
  }
  SUBCASE("matches the nested-loop oracle") {
    std::mt19937_64 rng(11);
    for (Index stride : {1, 2}) {
      for (Index pad : {0, 1}) {
        const Eigen::ArrayXd in = random_values(rng, 2 * 5 * 4);
        const Eigen::ArrayXd k = random_values(rng, 3 * 2 * 9);
        const DiffArray out = conv2d(DiffArray::constant({2, 5, 4}, in),
                                     DiffArray::constant({3, 2, 3, 3}, k), stride, pad);
        const Eigen::ArrayXd ref = naive_conv(in, 2, 5, 4, k, 3, 3, stride, pad);
        REQUIRE(out.size() == ref.size());
        CHECK((out.values() - ref).abs().maxCoeff() < 1e-12);
      }
    }
    const Eigen::ArrayXd in = random_values(rng, 16);
    const Eigen::ArrayXd k = random_values(rng, 9);
    const DiffArray out =
        conv2d(DiffArray::constant({1, 4, 4}, in), DiffArray::constant({1, 1, 3, 3}, k), 1, 0);
    CHECK((out.values() - naive_conv(in, 1, 4, 4, k, 1, 3, 1, 0)).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("even kernel") {
    std::mt19937_64 rng(12);
    const Eigen::ArrayXd in = random_values(rng, 2 * 6 * 6);
    const Eigen::ArrayXd k = random_values(rng, 3 * 2 * 4);
    const DiffArray out =
        conv2d(DiffArray::constant({2, 6, 6}, in), DiffArray::constant({3, 2, 2, 2}, k), 2, 0);
    CHECK(out.shape() == Shape{3, 3, 3});
    CHECK((out.values() - naive_conv(in, 2, 6, 6, k, 3, 2, 2, 0)).abs().maxCoeff() < 1e-12);
  }
  SUBCASE("rejects empty output and mismatched kernels") {
    CHECK_THROWS_AS(conv2d(DiffArray::full({1, 2, 2}, 1.0), DiffArray::full({1, 1, 3, 3}, 1.0), 1, 0),
                    DiffError);
    CHECK_THROWS_AS(conv2d(DiffArray::full({1, 4, 4}, 1.0), DiffArray::full({1, 2, 2, 2}, 1.0), 1, 0),
                    DiffError);
    CHECK_THROWS_AS(conv2d(DiffArray::full({1, 4, 4}, 1.0), DiffArray::full({1, 1, 2, 3}, 1.0), 1, 0),
                    DiffError);
  }
}

TEST_CASE("grad_check basics") {
  const std::vector<GradInput> x{{{}, values({3.0})}};
  const auto square = [](std::span<const DiffArray> in) { return in[0] * in[0]; };
  const GradCheckReport r = grad_check(square, x, {.epsilon = 1e-5, .tolerance = 1e-6});
  CHECK(r.passed);
  CHECK(r.worst.analytic == 6.0);
  CHECK(r.worst.numeric == doctest::Approx(6.0).epsilon(1e-6));
}

TEST_CASE("grad_check and detached paths") {
  const std::vector<GradInput> x{{{}, values({2.0})}};
  const auto f = [](std::span<const DiffArray> in) { return stop_gradient(in[0]) * in[0]; };
  SUBCASE("freeze replays the detached value") {
    const GradCheckReport r = grad_check(f, x);
    CHECK(r.passed);
    CHECK(r.excluded == 0);
  }
  SUBCASE("exclude drops inputs feeding a stop_gradient") {
    const GradCheckReport r = grad_check(f, x, {.detached = DetachedPolicy::kExclude});
    CHECK(r.passed);
    CHECK(r.excluded == 1);
    CHECK(r.checked == 0);
  }
  SUBCASE("without freezing the numeric derivative disagrees") {
    // Live detached values make the numeric slope 2x while analytic is x.
    Tape probe;
    const DiffArray v = probe.variable({}, values({2.0}));
    probe.backward(f(std::span<const DiffArray>(&v, 1)));
    CHECK(probe.grad(v)(0) == 2.0);
  }
}

TEST_CASE("grad_check catches a wrong-sign rule") {
  const std::vector<GradInput> x{{{3}, values({0.3, -0.2, 0.9})}};
  const auto f = [](std::span<const DiffArray> in) { return sum(sigmoid(in[0]) * in[0]); };
  CHECK(grad_check(f, x).passed);
  const GradCheckReport bad = grad_check(f, x, {.sign_fault = OpTag::kSigmoid});
  CHECK_FALSE(bad.passed);
  CHECK(bad.max_rel_error > 1e-2);
}

TEST_CASE("non-finite perturbed value is a failing coordinate") {
  // log(x) at x = 1e-6 with epsilon 1e-5 steps below zero.
  const std::vector<GradInput> x{{{}, values({1e-6})}};
  const auto f = [](std::span<const DiffArray> in) { return log(in[0]); };
  const GradCheckReport r = grad_check(f, x);
  CHECK_FALSE(r.passed);
  CHECK(std::isinf(r.max_rel_error));
}

TEST_CASE("randomized gradient checks for every differentiable op") {
  GradSuiteConfig cfg;
  cfg.end_to_end = false;
  const std::vector<GradCase> cases = unit_op_suite(cfg);
  CHECK(cases.size() == 25 * 10);
  for (const GradCase& c : cases) {
    INFO(c.name << " seed " << c.seed << " max rel error " << c.report.max_rel_error);
    CHECK(c.passed());
  }
}

TEST_CASE("a sign fault fails exactly the cases using that op") {
  GradSuiteConfig cfg;
  cfg.seeds = 2;
  cfg.fault_op = OpTag::kSigmoid;
  for (const GradCase& c : unit_op_suite(cfg)) {
    INFO(c.name);
    CHECK(c.passed() == (c.name != "sigmoid"));
  }
  cfg.fault_op = OpTag::kStopGradient;
  CHECK_THROWS(unit_op_suite(cfg));
}

TEST_CASE("forward evaluation is bit-identical across runs") {
  std::mt19937_64 rng(5);
  const Eigen::ArrayXd in = random_values(rng, 2 * 6 * 6);
  const Eigen::ArrayXd k = random_values(rng, 3 * 2 * 9);
  const auto run = [&] {
    Tape tape;
    const DiffArray x = tape.variable({2, 6, 6}, in);
    const DiffArray w = tape.variable({3, 2, 3, 3}, k);
    const DiffArray y = sum(sigmoid(conv2d(x, w, 2, 1)) * exp(mean(x)));
    tape.backward(y);
    return std::make_pair(y.item(), Eigen::ArrayXd(tape.grad(w)));
  };
  const auto a = run();
  const auto b = run();
  CHECK(a.first == b.first);
  CHECK((a.second == b.second).all());
}

TEST_CASE("parameters and sgd") {
  SUBCASE("plain step") {
    Parameter p("w", {1}, values({1.0}));
    p.grad(0) = 1.0;
    Parameter* ps[] = {&p};
    sgd_step(ps, 0.1, 0.0, 0.0);
    CHECK(p.value(0) == doctest::Approx(0.9).epsilon(1e-15));
    CHECK(p.grad(0) == 0.0);
  }
  SUBCASE("momentum unrolls to 1.9x on the second step") {
    Parameter p("w", {1}, values({0.0}));
    Parameter* ps[] = {&p};
    p.grad(0) = 1.0;
    sgd_step(ps, 0.1, 0.9, 0.0);
    const double first = -p.value(0);
    p.grad(0) = 1.0;
    sgd_step(ps, 0.1, 0.9, 0.0);
    const double second = -p.value(0) - first;
    CHECK(second / first == doctest::Approx(1.9).epsilon(1e-12));
  }
  SUBCASE("zero gradient is a fixed point") {
    Parameter p("w", {2}, values({0.3, -0.4}));
    Parameter* ps[] = {&p};
    sgd_step(ps, 0.1, 0.9, 0.0);
    CHECK(p.value(0) == 0.3);
    CHECK(p.value(1) == -0.4);
  }
  SUBCASE("frozen parameters receive no gradient") {
    Parameter live("a", {2}, values({1.0, 2.0}));
    Parameter frozen("b", {2}, values({3.0, 4.0}), false);
    Tape tape;
    const DiffArray y = sum(tape.bind(live) * tape.bind(frozen));
    tape.backward(y);
    CHECK(live.grad(0) == 3.0);
    CHECK((frozen.grad == 0.0).all());
    Parameter* ps[] = {&live, &frozen};
    sgd_step(ps, 1.0, 0.0, 0.0);
    CHECK(frozen.value(0) == 3.0);
  }
}
