#include <cmath>

#include "art/autograd.hpp"
#include "doctest.h"
#include "fd.hpp"

using namespace art;
using art::testing::numeric_gradient;
using art::testing::random_tensor;
using art::testing::relative_error;

namespace {

using UnaryFn = std::function<ag::Var(const ag::Var&)>;

// Scalarizes an op with fixed random weights so every output element matters.
double probe_value(const UnaryFn& op, const Tensor& x, const Tensor& weights) {
  ag::NoGradGuard g;
  ag::Var y = op(ag::Var(x));
  return ag::sum(ag::mul(y, ag::Var(weights))).item();
}

void check_first_order(const UnaryFn& op, const Tensor& x, double tol = 1e-6) {
  std::mt19937_64 rng(7);
  ag::Var probe_out;
  {
    ag::NoGradGuard g;
    probe_out = op(ag::Var(x));
  }
  const Tensor w = random_tensor(probe_out.shape(), rng);
  ag::Var xv(x, true);
  ag::Var loss = ag::sum(ag::mul(op(xv), ag::Var(w)));
  const ag::Var inputs[] = {xv};
  const Tensor analytic = ag::grad(loss, inputs)[0].value();
  const Tensor numeric = numeric_gradient([&](const Tensor& t) { return probe_value(op, t, w); }, x);
  CHECK(relative_error(analytic, numeric) < tol);
}

// d/dx of sum(w2 * grad_x(sum(w1 * op(x))))
void check_second_order(const UnaryFn& op, const Tensor& x, double tol = 1e-5) {
  std::mt19937_64 rng(11);
  ag::Var probe_out;
  {
    ag::NoGradGuard g;
    probe_out = op(ag::Var(x));
  }
  const Tensor w1 = random_tensor(probe_out.shape(), rng);
  const Tensor w2 = random_tensor(x.shape(), rng);
  auto inner = [&](const Tensor& t, bool create) {
    ag::Var tv(t, true);
    ag::Var s = ag::sum(ag::mul(op(tv), ag::Var(w1)));
    const ag::Var ins[] = {tv};
    ag::Var g = ag::grad(s, ins, {}, create)[0];
    return std::pair{tv, g};
  };
  auto [xv, g] = inner(x, true);
  ag::Var outer = ag::sum(ag::mul(g, ag::Var(w2)));
  const ag::Var ins[] = {xv};
  const Tensor analytic = ag::grad(outer, ins)[0].value();
  const Tensor numeric = numeric_gradient(
      [&](const Tensor& t) {
        auto [tv, gt] = inner(t, false);
        return dot(gt.value(), w2);
      },
      x);
  CHECK(relative_error(analytic, numeric) < tol);
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 3, 4}, rng, 0.2, 1.5);
  check_first_order([](const ag::Var& v) { return ag::exp(v); }, x);
  check_first_order([](const ag::Var& v) { return ag::log(v); }, x);
  check_first_order([](const ag::Var& v) { return ag::sqrt(v); }, x);
  check_first_order([](const ag::Var& v) { return ag::square(v); }, x);
  check_first_order([](const ag::Var& v) { return ag::softplus(v, 3.0); }, x);
  check_first_order([](const ag::Var& v) { return ag::sigmoid(v, 2.0); }, x);
  check_first_order([](const ag::Var& v) { return ag::div(ag::shift(v, 1.0), ag::square(v)); }, x);
}

TEST_CASE("broadcasting binary ops reduce gradients to operand shapes") {
  std::mt19937_64 rng(2);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng);
  const ag::Var bias(random_tensor({1, 3, 1, 1}, rng));
  const ag::Var row(random_tensor({5}, rng, 0.5, 2.0));
  check_first_order([&](const ag::Var& v) { return ag::add(v, bias); }, x);
  check_first_order([&](const ag::Var& v) { return ag::mul(v, row); }, x);
  check_first_order([&](const ag::Var& v) { return ag::div(v, row); }, x);
  check_first_order([&](const ag::Var& v) { return ag::sub(bias, v); }, x);
  // gradient with respect to the broadcast operand itself
  const Tensor b = random_tensor({1, 3, 1, 1}, rng);
  const ag::Var xs(x);
  check_first_order([&](const ag::Var& v) { return ag::mul(xs, v); }, b);
}

TEST_CASE("matmul, transpose, reshape and reductions") {
  std::mt19937_64 rng(3);
  const Tensor a = random_tensor({3, 4}, rng);
  const ag::Var b(random_tensor({4, 2}, rng));
  check_first_order([&](const ag::Var& v) { return ag::matmul(v, b); }, a);
  check_first_order([&](const ag::Var& v) { return ag::matmul(ag::transpose(b), ag::transpose(v)); }, a);
  check_first_order([](const ag::Var& v) { return ag::sum_to(ag::reshape(v, {2, 6}), {1, 6}); }, a);
  check_first_order([](const ag::Var& v) { return ag::expand(ag::sum_to(v, {3, 1}), {3, 4}); }, a);
  check_first_order([](const ag::Var& v) { return ag::mean(ag::square(v)); }, a);
}

TEST_CASE("convolution family first order") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({2, 3, 7, 6}, rng);
  const Tensor w = random_tensor({4, 3, 3, 3}, rng);
  for (ag::ConvGeometry geom : {ag::ConvGeometry{1, 1}, ag::ConvGeometry{2, 1}, ag::ConvGeometry{2, 0}}) {
    const ag::Var wv(w), xv(x);
    check_first_order([&](const ag::Var& v) { return ag::conv2d(v, wv, geom); }, x);
    check_first_order([&](const ag::Var& v) { return ag::conv2d(xv, v, geom); }, w);
    ag::Var y;
    {
      ag::NoGradGuard g;
      y = ag::conv2d(xv, wv, geom);
    }
    const Tensor gy = random_tensor(y.shape(), rng);
    check_first_order([&](const ag::Var& v) { return ag::conv2d_input_grad(v, wv, x.shape(), geom); }, gy);
    check_first_order([&](const ag::Var& v) { return ag::conv2d_input_grad(ag::Var(gy), v, x.shape(), geom); }, w);
    check_first_order([&](const ag::Var& v) { return ag::conv2d_weight_grad(v, ag::Var(gy), w.shape(), geom); }, x);
    check_first_order([&](const ag::Var& v) { return ag::conv2d_weight_grad(xv, v, w.shape(), geom); }, gy);
  }
}

TEST_CASE("conv2d matches a direct loop") {
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor({1, 2, 5, 5}, rng);
  const Tensor w = random_tensor({3, 2, 3, 3}, rng);
  ag::NoGradGuard g;
  const Tensor y = ag::conv2d(ag::Var(x), ag::Var(w), {2, 1}).value();
  REQUIRE(y.shape() == Shape{1, 3, 3, 3});
  for (int o = 0; o < 3; ++o)
    for (int oy = 0; oy < 3; ++oy)
      for (int ox = 0; ox < 3; ++ox) {
        double acc = 0;
        for (int c = 0; c < 2; ++c)
          for (int i = 0; i < 3; ++i)
            for (int j = 0; j < 3; ++j) {
              const int iy = oy * 2 - 1 + i, ix = ox * 2 - 1 + j;
              if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
              acc += x[(c * 5 + iy) * 5 + ix] * w[((o * 2 + c) * 3 + i) * 3 + j];
            }
        CHECK(y[(o * 3 + oy) * 3 + ox] == doctest::Approx(acc).epsilon(1e-12));
      }
}

TEST_CASE("softmax family") {
  std::mt19937_64 rng(6);
  const Tensor z = random_tensor({3, 5}, rng, -3, 3);
  check_first_order([](const ag::Var& v) { return ag::logsumexp_rows(v); }, z);
  check_first_order([](const ag::Var& v) { return ag::softmax_rows(v); }, z);
  check_second_order([](const ag::Var& v) { return ag::logsumexp_rows(v); }, z);
}

TEST_CASE("double backward through smooth networks") {
  std::mt19937_64 rng(8);
  const Tensor x = random_tensor({2, 2, 5, 5}, rng);
  const ag::Var w1(random_tensor({3, 2, 3, 3}, rng));
  const ag::Var w2(random_tensor({2, 3, 3, 3}, rng));
  auto net = [&](const ag::Var& v) {
    ag::Var h = ag::softplus(ag::conv2d(v, w1, {1, 1}), 4.0);
    h = ag::softplus(ag::conv2d(h, w2, {2, 1}), 4.0);
    return ag::sum_to(h, {2, 2, 1, 1});
  };
  check_second_order(net, x, 1e-5);
  check_second_order([](const ag::Var& v) { return ag::sqrt(ag::sum(ag::square(v))); }, x);
  check_second_order([](const ag::Var& v) { return ag::div(v, ag::shift(ag::square(v), 1.0)); }, x);
}

TEST_CASE("grad handles unreachable inputs and shared subgraphs") {
  ag::Var a(Tensor({2}, std::vector<double>{1.0, 2.0}), true);
  ag::Var b(Tensor({2}, std::vector<double>{3.0, 4.0}), true);
  ag::Var y = ag::sum(ag::mul(a, a));  // b unused
  const ag::Var ins[] = {a, b};
  auto g = ag::grad(y, ins);
  CHECK(g[0].value()[0] == doctest::Approx(2.0));
  CHECK(g[0].value()[1] == doctest::Approx(4.0));
  CHECK(g[1].value()[0] == 0.0);
  CHECK_FALSE(g[0].requires_grad());
}

TEST_CASE("no-grad mode records nothing") {
  ag::Var a(Tensor({2}, 1.0), true);
  ag::NoGradGuard guard;
  ag::Var y = ag::exp(a);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}

TEST_CASE("shape errors surface as InputError") {
  ag::Var a(Tensor({2, 3}));
  ag::Var b(Tensor({4, 3}));
  CHECK_THROWS_AS(ag::add(a, b), InputError);
  CHECK_THROWS_AS(ag::matmul(a, b), InputError);
  CHECK_THROWS_AS(ag::reshape(a, {5}), InputError);
}
