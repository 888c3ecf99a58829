#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tau/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

using tau::Rng;
using tau::Shape;
using tau::Tensor;

namespace {

using D = Tensor<double>;
using F = Tensor<float>;

// Nudges every element away from the given kink points so central
// differences never straddle a non-smooth point.
std::vector<double> away_from(std::vector<double> v, const std::vector<double>& pts,
                              double margin = 0.05) {
  for (auto& x : v) {
    for (double p : pts) {
      if (std::abs(x - p) < margin) x = p + 2.0 * margin;
    }
  }
  return v;
}

D rand_leaf(const Shape& s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  return D::uniform(s, rng, lo, hi);
}

void check_grad(const char* what, const std::function<D(const D&)>& f, const D& x,
                double tol = 1e-5) {
  auto rep = tau::gradcheck<double>(f, x, 1e-4, tol);
  INFO(what << ": max relative error " << rep.max_rel_err << " (" << rep.worst << ")");
  CHECK(rep.pass);
}

}  // namespace

TEST_CASE("relu matches its definition") {
  D x = D::from_data({3}, {-1.0, 0.0, 2.0});
  D y = tau::relu(x);
  CHECK(y.data() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("x + x doubles values and seeds grad 2 per element") {
  D x = D::from_data({3}, {1.0, -2.0, 0.5}).set_requires_grad(true);
  D y = tau::add(x, x);
  CHECK(y.data() == std::vector<double>{2.0, -4.0, 1.0});
  tau::backward(tau::sum(y));
  CHECK(x.grad() == std::vector<double>{2.0, 2.0, 2.0});
}

TEST_CASE("sigmoid at zero is 0.5 with derivative 0.25") {
  D x = D::scalar(0.0).set_requires_grad(true);
  D y = tau::sigmoid(x);
  CHECK(y.item() == doctest::Approx(0.5));
  tau::backward(tau::sum(y));
  CHECK(x.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("binary ops broadcast scalar, [C], and [C,H,W] against [N,C,H,W]") {
  Rng rng(7);
  D x = rand_leaf({2, 3, 2, 2}, rng);

  SUBCASE("scalar") {
    D s = D::scalar(2.0);
    D y = tau::mul(x, s);
    for (int64_t i = 0; i < x.size(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(2.0 * x.data()[i]));
    }
  }
  SUBCASE("channel vector, including grad accumulation over N*H*W") {
    D b = D::from_data({3}, {1.0, 2.0, 3.0}).set_requires_grad(true);
    D y = tau::add(x, b);
    // element (n, c, h, w) gains b[c]
    CHECK(y.data()[0] == doctest::Approx(x.data()[0] + 1.0));
    CHECK(y.data()[4] == doctest::Approx(x.data()[4] + 2.0));   // c = 1
    CHECK(y.data()[11] == doctest::Approx(x.data()[11] + 3.0)); // c = 2
    tau::backward(tau::sum(y));
    // each channel entry is used N*H*W = 2*2*2 = 8 times
    CHECK(b.grad() == std::vector<double>{8.0, 8.0, 8.0});
  }
  SUBCASE("per-sample [C,H,W] block") {
    Rng r2(8);
    D p = rand_leaf({3, 2, 2}, r2);
    D y = tau::add(x, p);
    CHECK(y.shape() == Shape{2, 3, 2, 2});
    CHECK(y.data()[0] == doctest::Approx(x.data()[0] + p.data()[0]));
    CHECK(y.data()[12] == doctest::Approx(x.data()[12] + p.data()[0]));  // second sample
  }
  SUBCASE("incompatible shapes name both operands") {
    D a = D::zeros({2, 3});
    D b = D::zeros({3, 2});
    CHECK_THROWS_AS(tau::add(a, b), std::invalid_argument);
  }
}

TEST_CASE("checked mode rejects non-finite inputs and log of non-positives") {
  tau::set_checked_mode(true);
  D bad = D::from_data({2}, {1.0, std::nan("")});
  CHECK_THROWS_AS(tau::add(bad, bad), std::runtime_error);
  D zero = D::from_data({1}, {0.0});
  CHECK_THROWS_AS(tau::log(zero), std::runtime_error);
  tau::set_checked_mode(false);
  // off by default: same calls only propagate the values
  D y = tau::add(bad, bad);
  CHECK(std::isnan(y.data()[1]));
}

TEST_CASE("matmul: identity, hand oracle, and finite differences") {
  SUBCASE("identity(3) x M == M") {
    D eye = D::from_data({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Rng rng(3);
    D m = rand_leaf({3, 4}, rng);
    CHECK(tau::matmul(eye, m).data() == m.data());
  }
  SUBCASE("[[1,2],[3,4]] x [[1],[1]] == [[3],[7]]") {
    D a = D::from_data({2, 2}, {1, 2, 3, 4});
    D b = D::from_data({2, 1}, {1, 1});
    CHECK(tau::matmul(a, b).data() == std::vector<double>{3.0, 7.0});
  }
  SUBCASE("inner-extent mismatch throws") {
    CHECK_THROWS_AS(tau::matmul(D::zeros({2, 3}), D::zeros({2, 3})), std::invalid_argument);
  }
  SUBCASE("grad of sum(A*B) w.r.t. A matches central differences") {
    Rng rng(11);
    D b = rand_leaf({4, 3}, rng);
    check_grad("matmul lhs", [&](const D& a) { return tau::sum(tau::matmul(a, b)); },
               rand_leaf({2, 4}, rng));
    D a = rand_leaf({2, 4}, rng);
    check_grad("matmul rhs", [&](const D& w) { return tau::sum(tau::matmul(a, w)); },
               rand_leaf({4, 3}, rng));
  }
}

TEST_CASE("bmm and grouped bmm") {
  Rng rng(12);
  SUBCASE("bmm equals per-slice matmul") {
    D a = rand_leaf({3, 2, 4}, rng);
    D w = rand_leaf({3, 4, 2}, rng);
    D y = tau::bmm(a, w);
    CHECK(y.shape() == Shape{3, 2, 2});
    for (int64_t b = 0; b < 3; ++b) {
      D as = D::from_data({2, 4}, std::vector<double>(a.data().begin() + b * 8,
                                                      a.data().begin() + (b + 1) * 8));
      D ws = D::from_data({4, 2}, std::vector<double>(w.data().begin() + b * 8,
                                                      w.data().begin() + (b + 1) * 8));
      D ys = tau::matmul(as, ws);
      for (int64_t i = 0; i < 4; ++i) {
        CHECK(y.data()[b * 4 + i] == doctest::Approx(ys.data()[i]));
      }
    }
  }
  SUBCASE("grouped weights cycle with b % G") {
    D a = rand_leaf({4, 2, 3}, rng);
    D w = rand_leaf({2, 3, 2}, rng);
    D y = tau::bmm_grouped(a, w);
    CHECK(y.shape() == Shape{4, 2, 2});
    // batches 0 and 2 use group 0, batches 1 and 3 use group 1
    D a0 = D::from_data({1, 2, 3}, std::vector<double>(a.data().begin(), a.data().begin() + 6));
    D w0 = D::from_data({1, 3, 2}, std::vector<double>(w.data().begin(), w.data().begin() + 6));
    D y0 = tau::bmm(a0, w0);
    for (int i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(y0.data()[i]));
  }
  SUBCASE("batch mismatch and indivisible groups throw") {
    CHECK_THROWS_AS(tau::bmm(D::zeros({2, 2, 3}), D::zeros({3, 3, 2})), std::invalid_argument);
    CHECK_THROWS_AS(tau::bmm_grouped(D::zeros({3, 2, 3}), D::zeros({2, 3, 2})),
                    std::invalid_argument);
  }
}

TEST_CASE("softmax values, shift invariance, and slice sums") {
  SUBCASE("uniform slice -> 1/3 each") {
    D y = tau::softmax(D::from_data({3}, {4.0, 4.0, 4.0}), 0);
    for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0));
  }
  SUBCASE("[0, ln 3] -> [0.25, 0.75]") {
    D y = tau::softmax(D::from_data({2}, {0.0, std::log(3.0)}), 0);
    CHECK(y.data()[0] == doctest::Approx(0.25));
    CHECK(y.data()[1] == doctest::Approx(0.75));
  }
  SUBCASE("shift invariance") {
    Rng rng(5);
    D x = rand_leaf({2, 5}, rng);
    D shifted = tau::affine(x, 1.0, 5.0);
    D a = tau::softmax(x, 1);
    D b = tau::softmax(shifted, 1);
    for (int64_t i = 0; i < a.size(); ++i) {
      CHECK(a.data()[i] == doctest::Approx(b.data()[i]).epsilon(1e-6));
    }
  }
  SUBCASE("every slice sums to one, any axis") {
    Rng rng(6);
    D x = rand_leaf({2, 3, 4}, rng, -3.0, 3.0);
    for (int axis = 0; axis < 3; ++axis) {
      D y = tau::softmax(x, axis);
      D s = tau::sum_axes(y, {axis});
      for (double v : s.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("invalid axis throws") {
    CHECK_THROWS_AS(tau::softmax(D::zeros({2, 2}), 2), std::invalid_argument);
  }
}

TEST_CASE("reshape, permute, concat: round trips and routing") {
  Rng rng(9);
  SUBCASE("reshape c,h,w -> c,(h*w) -> back is exact") {
    D x = rand_leaf({3, 4, 5}, rng);
    D y = tau::reshape(tau::reshape(x, {3, 20}), {3, 4, 5});
    CHECK(y.data() == x.data());
    CHECK_THROWS_AS(tau::reshape(x, {3, 21}), std::invalid_argument);
  }
  SUBCASE("permute round trip is exact") {
    D x = rand_leaf({2, 3, 4, 5}, rng);
    D y = tau::permute(tau::permute(x, {0, 2, 3, 1}), {0, 3, 1, 2});
    CHECK(y.data() == x.data());
    CHECK_THROWS_AS(tau::permute(x, {0, 1, 2, 2}), std::invalid_argument);
  }
  SUBCASE("hand-checked 2x3 transpose") {
    D x = D::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    D y = tau::permute(x, {1, 0});
    CHECK(y.shape() == Shape{3, 2});
    CHECK(y.data() == std::vector<double>{1, 4, 2, 5, 3, 6});
  }
  SUBCASE("concat along channel axis") {
    D a = rand_leaf({2, 2, 4, 4}, rng);
    D b = rand_leaf({2, 3, 4, 4}, rng);
    D y = tau::concat<double>({a, b}, 1);
    CHECK(y.shape() == Shape{2, 5, 4, 4});
    // first sample: a's channels then b's channels
    CHECK(y.data()[0] == a.data()[0]);
    CHECK(y.data()[2 * 16] == b.data()[0]);
    CHECK(y.data()[5 * 16] == a.data()[2 * 16]);  // second sample starts with a again
    CHECK_THROWS_AS(tau::concat<double>({a, D::zeros({2, 3, 4, 5})}, 1), std::invalid_argument);
  }
  SUBCASE("concat backward splits an all-ones gradient into all-ones pieces") {
    D a = rand_leaf({2, 2, 2, 2}, rng).set_requires_grad(true);
    D b = rand_leaf({2, 1, 2, 2}, rng).set_requires_grad(true);
    tau::backward(tau::sum(tau::concat<double>({a, b}, 1)));
    CHECK(a.grad() == std::vector<double>(a.data().size(), 1.0));
    CHECK(b.grad() == std::vector<double>(b.data().size(), 1.0));
  }
}

TEST_CASE("reductions") {
  CHECK(tau::sum(D::from_data({3}, {1, 2, 3})).item() == doctest::Approx(6.0));
  CHECK(tau::mean(D::full({2, 3}, 4.25)).item() == doctest::Approx(4.25));

  D x = D::from_data({2, 3}, {1, 2, 3, 4, 5, 6}).set_requires_grad(true);
  tau::backward(tau::sum(x));
  CHECK(x.grad() == std::vector<double>(6, 1.0));

  SUBCASE("axis reductions") {
    D m = D::from_data({2, 3}, {1, 2, 3, 4, 5, 6});
    CHECK(tau::sum_axes(m, {0}).data() == std::vector<double>{5, 7, 9});
    CHECK(tau::sum_axes(m, {1}).data() == std::vector<double>{6, 15});
    D mm = tau::mean_axes(m, {1});
    CHECK(mm.data()[0] == doctest::Approx(2.0));
    CHECK(mm.data()[1] == doctest::Approx(5.0));
    CHECK_THROWS_AS(tau::sum_axes(m, {2}), std::invalid_argument);
    CHECK_THROWS_AS(tau::sum_axes(m, {0, 0}), std::invalid_argument);
  }
  SUBCASE("mean backward distributes 1/count") {
    D m = D::full({4}, 1.0).set_requires_grad(true);
    tau::backward(tau::mean(m));
    CHECK(m.grad() == std::vector<double>(4, 0.25));
  }
}

TEST_CASE("backward: lineage rules") {
  SUBCASE("loss = sum(theta * theta) -> grad 2*theta") {
    D t = D::from_data({3}, {1.0, -2.0, 3.0}).set_requires_grad(true);
    tau::backward(tau::sum(tau::mul(t, t)));
    CHECK(t.grad() == std::vector<double>{2.0, -4.0, 6.0});
  }
  SUBCASE("diamond graph accumulates both branches") {
    Rng rng(42);
    check_grad("diamond",
               [](const D& x) {
                 D f = tau::sum(tau::mul(x, x));
                 D g = tau::sum(tau::sigmoid(x));
                 return tau::add(f, g);
               },
               rand_leaf({5}, rng));
  }
  SUBCASE("non-scalar loss is rejected") {
    D x = D::zeros({2}).set_requires_grad(true);
    CHECK_THROWS_AS(tau::backward(tau::add(x, x)), std::invalid_argument);
  }
  SUBCASE("NoGradGuard suppresses lineage") {
    D x = D::full({2}, 1.0).set_requires_grad(true);
    tau::NoGradGuard ng;
    D y = tau::add(x, x);
    CHECK_FALSE(y.requires_grad());
    CHECK(y.node()->parents.empty());
  }
}

TEST_CASE("gradcheck: quadratic exactness, constant softmax sum, determinism guard") {
  Rng rng(21);
  SUBCASE("f = sum(x^2) passes at tol 1e-6, eps 1e-4") {
    auto rep = tau::gradcheck<double>(
        [](const D& x) { return tau::sum(tau::mul(x, x)); }, rand_leaf({6}, rng), 1e-4, 1e-6);
    CHECK(rep.pass);
  }
  SUBCASE("f = sum(softmax(x)) has ~zero gradient everywhere") {
    D x = rand_leaf({5}, rng);
    D leaf = x.detach().set_requires_grad(true);
    tau::backward(tau::sum(tau::softmax(leaf, 0)));
    for (double g : leaf.grad()) CHECK(g == doctest::Approx(0.0).epsilon(1e-9));
    auto rep = tau::gradcheck<double>(
        [](const D& v) { return tau::sum(tau::softmax(v, 0)); }, x, 1e-4, 1e-6);
    CHECK(rep.pass);
  }
  SUBCASE("non-deterministic f is detected") {
    int calls = 0;
    auto f = [&calls](const D& x) { return tau::scale(tau::sum(x), 1.0 + 0.5 * calls++); };
    CHECK_THROWS_AS(tau::gradcheck<double>(f, rand_leaf({3}, rng), 1e-4, 1e-5),
                    std::runtime_error);
  }
  SUBCASE("probe subsetting limits work but stays seeded") {
    D x = rand_leaf({100}, rng);
    auto rep = tau::gradcheck<double>(
        [](const D& v) { return tau::sum(tau::mul(v, v)); }, x, 1e-4, 1e-5, 10);
    CHECK(rep.probes == 10);
    CHECK(rep.pass);
  }
}

TEST_CASE("every differentiable op passes gradcheck on three random shapes") {
  const std::vector<Shape> shapes = {{7}, {3, 5}, {2, 3, 2, 2}};
  Rng rng(101);
  for (const auto& s : shapes) {
    CAPTURE(tau::shape_str(s));
    D x = rand_leaf(s, rng);
    D partner = rand_leaf(s, rng, 0.5, 1.5);  // safe divisor / log argument

    check_grad("add", [&](const D& v) { return tau::sum(tau::add(v, partner)); }, x);
    check_grad("sub", [&](const D& v) { return tau::sum(tau::sub(partner, v)); }, x);
    check_grad("mul", [&](const D& v) { return tau::sum(tau::mul(v, partner)); }, x);
    check_grad("div lhs", [&](const D& v) { return tau::sum(tau::div(v, partner)); }, x);
    check_grad("div rhs", [&](const D& v) { return tau::sum(tau::div(partner, v)); },
               D::from_data(s, away_from(x.data(), {0.0})));
    check_grad("scale", [](const D& v) { return tau::sum(tau::scale(v, -2.5)); }, x);
    check_grad("affine", [](const D& v) { return tau::sum(tau::affine(v, 1.5, -0.25)); }, x);
    check_grad("relu", [](const D& v) { return tau::sum(tau::relu(v)); },
               D::from_data(s, away_from(x.data(), {0.0})));
    check_grad("sigmoid", [](const D& v) { return tau::sum(tau::sigmoid(v)); }, x);
    check_grad("exp", [](const D& v) { return tau::sum(tau::exp(v)); }, x);
    check_grad("log", [](const D& v) { return tau::sum(tau::log(v)); }, partner);
    check_grad("clamp",
               [](const D& v) { return tau::sum(tau::clamp(v, -0.5, 0.5)); },
               D::from_data(s, away_from(x.data(), {-0.5, 0.5})));
    check_grad("softmax", [](const D& v) {
      // weighted sum so the gradient is not identically zero
      D w = D::from_data(v.shape(), [&] {
        std::vector<double> ws(static_cast<size_t>(tau::numel(v.shape())));
        for (size_t i = 0; i < ws.size(); ++i) ws[i] = 0.1 * static_cast<double>(i + 1);
        return ws;
      }());
      return tau::sum(tau::mul(tau::softmax(v, v.rank() - 1), w));
    }, x);
    check_grad("reshape", [](const D& v) {
      return tau::sum(tau::mul(tau::reshape(v, {v.size()}), tau::reshape(v, {v.size()})));
    }, x);
    check_grad("sum_axes", [](const D& v) {
      D r = tau::sum_axes(v, {0});
      return tau::sum(tau::mul(r, r));
    }, x);
    check_grad("mean_axes", [](const D& v) {
      D r = tau::mean_axes(v, {v.rank() - 1});
      return tau::sum(tau::mul(r, r));
    }, x);
    check_grad("mean", [](const D& v) { return tau::mean(tau::mul(v, v)); }, x);
  }

  // ops with shape constraints of their own
  check_grad("permute", [](const D& v) {
    D p = tau::permute(v, {2, 0, 1});
    return tau::sum(tau::mul(p, p));
  }, rand_leaf({2, 3, 4}, rng));
  check_grad("concat", [](const D& v) {
    D p = tau::concat<double>({v, tau::scale(v, 2.0)}, 1);
    return tau::sum(tau::mul(p, p));
  }, rand_leaf({2, 3, 2}, rng));
  check_grad("bmm lhs", [&](const D& v) {
    Rng r(55);
    D w = D::uniform({3, 4, 2}, r, -1.0, 1.0);
    return tau::sum(tau::bmm(v, w));
  }, rand_leaf({3, 2, 4}, rng));
  check_grad("bmm_grouped weights", [&](const D& v) {
    Rng r(56);
    D a = D::uniform({4, 2, 3}, r, -1.0, 1.0);
    return tau::sum(tau::bmm_grouped(a, v));
  }, rand_leaf({2, 3, 2}, rng));
  check_grad("broadcast channel bias", [&](const D& v) {
    Rng r(57);
    D img = D::uniform({2, 3, 2, 2}, r, -1.0, 1.0);
    return tau::sum(tau::sigmoid(tau::add(img, v)));
  }, rand_leaf({3}, rng));
}

TEST_CASE("autodiff linearity on a random composite") {
  Rng rng(77);
  D x = rand_leaf({6}, rng);
  auto grad_of = [&](const std::function<D(const D&)>& f) {
    D leaf = x.detach().set_requires_grad(true);
    tau::backward(f(leaf));
    return leaf.grad();
  };
  auto f = [](const D& v) { return tau::sum(tau::mul(v, v)); };
  auto g = [](const D& v) { return tau::sum(tau::sigmoid(v)); };
  const double a = 1.75, b = -0.5;
  auto gf = grad_of(f);
  auto gg = grad_of(g);
  auto gh = grad_of([&](const D& v) {
    return tau::add(tau::scale(f(v), a), tau::scale(g(v), b));
  });
  for (size_t i = 0; i < gh.size(); ++i) {
    CHECK(gh[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-12));
  }
}

TEST_CASE("determinism: same seed, same graph -> bit-identical values and grads") {
  auto run = [] {
    Rng rng(2024);
    F x = F::uniform({2, 3, 4, 4}, rng, -1.0, 1.0).set_requires_grad(true);
    F w = F::randn({3}, rng, 0.1).set_requires_grad(true);
    F y = tau::sum(tau::sigmoid(tau::mul(tau::add(x, w), x)));
    tau::backward(y);
    return std::tuple{y.item(), x.grad(), w.grad()};
  };
  auto [y1, gx1, gw1] = run();
  auto [y2, gx2, gw2] = run();
  CHECK(y1 == y2);
  CHECK(gx1 == gx2);
  CHECK(gw1 == gw2);
}

TEST_CASE("rng: splitmix64 sequences are reproducible and shuffle is stable") {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  CHECK(a.uniform() == b.uniform());
  CHECK(a.normal() == b.normal());

  std::vector<int> v1{1, 2, 3, 4, 5, 6}, v2{1, 2, 3, 4, 5, 6};
  Rng s1(5), s2(5);
  s1.shuffle(v1);
  s2.shuffle(v2);
  CHECK(v1 == v2);

  // Box-Muller draws stay sane in bulk
  Rng n(123);
  double m = 0.0, m2 = 0.0;
  const int kDraws = 20000;
  for (int i = 0; i < kDraws; ++i) {
    double z = n.normal();
    m += z;
    m2 += z * z;
  }
  m /= kDraws;
  m2 /= kDraws;
  CHECK(std::abs(m) < 0.05);
  CHECK(std::abs(std::sqrt(m2 - m * m) - 1.0) < 0.05);
}

TEST_CASE("tensor plumbing: item, detach, zero_grad, first_nonfinite") {
  CHECK_THROWS_AS(D::zeros({2}).item(), std::invalid_argument);
  CHECK_THROWS_AS(D::from_data({2, 2}, {1, 2, 3}), std::invalid_argument);

  D x = D::from_data({2}, {1.0, 2.0}).set_requires_grad(true);
  D d = x.detach();
  CHECK_FALSE(d.requires_grad());
  CHECK(d.data() == x.data());
  d.data()[0] = 9.0;  // detached copy owns its storage
  CHECK(x.data()[0] == 1.0);

  tau::backward(tau::sum(tau::mul(x, x)));
  CHECK(x.grad()[0] == 2.0);
  x.zero_grad();
  CHECK(x.grad() == std::vector<double>{0.0, 0.0});

  // NaN born inside the graph (log of a negative, unchecked): the leaf is
  // finite, so the log node is the first non-finite tensor in topo order.
  // requires_grad makes the graph record lineage, as in a training step.
  D neg = D::from_data({2}, {-1.0, 1.0}).set_requires_grad(true);
  D y = tau::add(tau::log(neg), D::scalar(1.0));
  std::string where = tau::first_nonfinite(y);
  CHECK(where.find("log") != std::string::npos);
  CHECK(tau::first_nonfinite(tau::relu(D::zeros({2}))) == "");
}
