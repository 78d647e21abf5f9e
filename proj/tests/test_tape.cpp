#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "relax/tape.hpp"
#include "testutil.hpp"

using namespace relax;
using testutil::fd_gradient;
using testutil::max_rel_error;

TEST_CASE("product forward") {
  Tape t;
  Node x = t.param({2.0});
  Node y = t.param({3.0});
  CHECK(mul(x, y).scalar() == doctest::Approx(6.0));
}

TEST_CASE("sigmoid symmetry and stability") {
  Tape t;
  CHECK(sigmoid(t.input_scalar(0.0)).scalar() == doctest::Approx(0.5));
  // log sigmoid(-40) = -softplus(40) = -40 - softplus(-40), no overflow
  Node ls = neg(softplus(neg(t.input_scalar(-40.0))));
  CHECK(ls.scalar() == doctest::Approx(-40.0).epsilon(1e-12));
  CHECK(std::isfinite(ls.scalar()));
}

TEST_CASE("backward on x^2") {
  Tape t;
  Node x = t.param({3.0});
  Node y = square(x);
  t.backward(y);
  CHECK(t.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("backward on sigmoid at 0") {
  Tape t;
  Node z = t.param({0.0});
  t.backward(sigmoid(z));
  CHECK(t.grad(z)[0] == doctest::Approx(0.25));
}

TEST_CASE("non-scalar backward root rejected") {
  Tape t;
  Node x = t.param({1.0, 2.0});
  CHECK_THROWS_AS(t.backward(x), ContractError);
}

TEST_CASE("non-finite forward raises NumericalError") {
  Tape t;
  Node x = t.input_scalar(1.0);
  Node y = relax::exp(x);
  t.set_value(x, 1e9);
  CHECK_THROWS_AS(t.recompute(), NumericalError);
  (void)y;
}

TEST_CASE("stop_gradient blocks one path") {
  Tape t;
  Node x = t.param({2.0});
  Node y = mul(stop_gradient(x), x);
  CHECK(y.scalar() == doctest::Approx(4.0));
  t.backward(y);
  CHECK(t.grad(x)[0] == doctest::Approx(2.0));

  Tape t2;
  Node x2 = t2.param({2.0});
  Node y2 = stop_gradient(square(x2));
  t2.backward(y2);
  CHECK(t2.grad(x2)[0] == doctest::Approx(0.0));
}

namespace {

// Random compositions of primitives, evaluated both by the tape and by a
// rebuild-from-scratch closure used for finite differences.
struct RandomProgram {
  std::vector<int> ops;
  std::vector<double> consts;

  static RandomProgram make(std::mt19937_64& rng, int depth) {
    RandomProgram p;
    std::uniform_int_distribution<int> op(0, 9);
    std::uniform_real_distribution<double> c(-1.5, 1.5);
    for (int i = 0; i < depth; ++i) {
      p.ops.push_back(op(rng));
      p.consts.push_back(c(rng));
    }
    return p;
  }

  Node build(Tape& t, Node x) const {
    Node cur = x;
    for (std::size_t i = 0; i < ops.size(); ++i) {
      Node k = t.constant(consts[i]);
      switch (ops[i]) {
        case 0: cur = add(cur, k); break;
        case 1: cur = mul(cur, k); break;
        case 2: cur = sigmoid(cur); break;
        case 3: cur = relax::tanh(cur); break;
        case 4: cur = softplus(cur); break;
        case 5: cur = relax::exp(mul(cur, t.constant(0.3))); break;
        case 6: cur = square(cur); break;
        case 7: cur = sub(k, cur); break;
        case 8: cur = relax::log1p(square(cur)); break;
        case 9: cur = softmax(cur); break;
      }
    }
    return sum(cur);
  }
};

}  // namespace

TEST_CASE("random depth-6 compositions match finite differences") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> xd(-1.0, 1.0);
  for (int trial = 0; trial < 60; ++trial) {
    auto prog = RandomProgram::make(rng, 6);
    std::vector<double> x0 = {xd(rng), xd(rng), xd(rng)};

    Tape t;
    Node x = t.param(x0);
    Node root = prog.build(t, x);
    t.backward(root);
    std::vector<double> got = t.grad(x);

    auto f = [&](const std::vector<double>& xv) {
      Tape tt;
      Node xx = tt.param(xv);
      return prog.build(tt, xx).scalar();
    };
    auto want = fd_gradient(f, x0, 1e-4);
    CHECK(max_rel_error(got, want) < 1e-5);
  }
}

TEST_CASE("matvec affine and softmax-logsumexp gradients") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> d(-1.0, 1.0);
  std::vector<double> w0(6), b0(2), x0(3);
  for (auto& v : w0) v = d(rng);
  for (auto& v : b0) v = d(rng);
  for (auto& v : x0) v = d(rng);

  auto build = [](Tape& t, Node w, Node b, Node x) {
    Node h = affine(w, b, x, 2, 3);
    Node p = softmax(h);
    return add(dot(p, relax::log(p)), logsumexp(h));
  };

  Tape t;
  Node w = t.param(w0), b = t.param(b0), x = t.param(x0);
  t.backward(build(t, w, b, x));

  for (int which = 0; which < 3; ++which) {
    std::vector<double>* tgt = which == 0 ? &w0 : which == 1 ? &b0 : &x0;
    auto f = [&](const std::vector<double>& v) {
      Tape tt;
      Node ww = tt.param(which == 0 ? v : w0);
      Node bb = tt.param(which == 1 ? v : b0);
      Node xx = tt.param(which == 2 ? v : x0);
      return build(tt, ww, bb, xx).scalar();
    };
    auto want = fd_gradient(f, *tgt, 1e-5);
    const Vec& got = t.grad(which == 0 ? w : which == 1 ? b : x);
    CHECK(max_rel_error(got, want) < 1e-5);
  }
}

TEST_CASE("backward is linear in the root") {
  std::mt19937_64 rng(3);
  auto prog_f = RandomProgram::make(rng, 4);
  auto prog_g = RandomProgram::make(rng, 4);
  std::vector<double> x0 = {0.3, -0.7};
  double a = 1.7, b = -0.4;

  auto grad_of = [&](double ca, double cb) {
    Tape t;
    Node x = t.param(x0);
    Node root = add(mul(t.constant(ca), prog_f.build(t, x)),
                    mul(t.constant(cb), prog_g.build(t, x)));
    t.backward(root);
    return t.grad(x);
  };
  auto gf = grad_of(1.0, 0.0);
  auto gg = grad_of(0.0, 1.0);
  auto gc = grad_of(a, b);
  for (std::size_t i = 0; i < x0.size(); ++i)
    CHECK(gc[i] == doctest::Approx(a * gf[i] + b * gg[i]).epsilon(1e-10));
}

TEST_CASE("symbolic gradient nodes match numeric backward and recompute") {
  std::mt19937_64 rng(19);
  auto prog = RandomProgram::make(rng, 5);
  std::vector<double> x0 = {0.2, 0.9, -0.4};

  Tape t;
  Node x = t.input(x0);
  Node root = prog.build(t, x);
  Node gsym = gradient_node(root, x);

  t.backward(root);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(gsym.value()[i] == doctest::Approx(t.grad(x)[i]).epsilon(1e-12));

  // Symbolic nodes recompute correctly when the leaf moves.
  std::vector<double> x1 = {-0.8, 0.1, 0.5};
  t.set_value(x, x1);
  t.recompute();
  t.backward(root);
  for (std::size_t i = 0; i < 3; ++i)
    CHECK(gsym.value()[i] == doctest::Approx(t.grad(x)[i]).epsilon(1e-12));
}

TEST_CASE("second-use pattern: d(grad^2)/dparam via single backward") {
  // Square of a gradient expression, differentiated with respect to a
  // parameter that the gradient expression depends on.
  std::vector<double> phi0 = {0.4, -0.6};
  auto build = [](Tape& t, Node phi, Node x) {
    // c(x; phi) = tanh(phi0 * x) + phi1 * x^2
    Node c = add(relax::tanh(mul(slice(phi, 0, 1), x)),
                 mul(slice(phi, 1, 1), square(x)));
    Node dcdx = gradient_node(c, x);
    return square(dcdx);
  };

  Tape t;
  Node phi = t.param(phi0);
  Node x = t.input_scalar(0.7);
  Node gsq = build(t, phi, x);
  t.backward(gsq);
  Vec got = t.grad(phi);

  auto f = [&](const std::vector<double>& p) {
    Tape tt;
    Node pp = tt.param(p);
    Node xx = tt.input_scalar(0.7);
    return build(tt, pp, xx).scalar();
  };
  auto want = fd_gradient(f, phi0, 1e-5);
  CHECK(max_rel_error(got, want) < 1e-4);
}

TEST_CASE("concat and slice round trip with gradients") {
  Tape t;
  Node a = t.param({1.0, 2.0});
  Node b = t.param({3.0});
  Node c = concat(a, b);
  Node root = sum(mul(c, c));
  t.backward(root);
  CHECK(t.grad(a)[0] == doctest::Approx(2.0));
  CHECK(t.grad(a)[1] == doctest::Approx(4.0));
  CHECK(t.grad(b)[0] == doctest::Approx(6.0));

  Node s = slice(c, 1, 2);
  CHECK(s.value()[0] == doctest::Approx(2.0));
  CHECK(s.value()[1] == doctest::Approx(3.0));
}

TEST_CASE("max_index forward only, lowest-index ties") {
  Tape t;
  Node v = t.input({0.5, 2.0, 2.0});
  CHECK(max_index(v).scalar() == doctest::Approx(1.0));
}
