#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "relax/estimators.hpp"
#include "relax/toy.hpp"
#include "testutil.hpp"

using namespace relax;

namespace {

// Exact gradient of E_{p(b|l)}[f(b)] for an independent Bernoulli vector,
// by enumeration: grad_i = sum_b p(b) f(b) (b_i - theta_i).
Vec bernoulli_exact_grad(const BernoulliVector& d,
                         const std::function<double(const Vec&)>& f) {
  std::size_t n = d.dim();
  Vec grad(n, 0.0), theta = d.probs();
  for (std::size_t mask = 0; mask < (std::size_t{1} << n); ++mask) {
    Vec b(n);
    double p = 1.0;
    for (std::size_t i = 0; i < n; ++i) {
      b[i] = (mask >> i) & 1 ? 1.0 : 0.0;
      p *= b[i] > 0.5 ? theta[i] : 1.0 - theta[i];
    }
    double fv = f(b);
    for (std::size_t i = 0; i < n; ++i) grad[i] += p * fv * (b[i] - theta[i]);
  }
  return grad;
}

// grad_j = sum_i theta_i f(i) (delta_ij - theta_j).
Vec categorical_exact_grad(const CategoricalDist& d,
                           const std::function<double(std::size_t)>& f) {
  std::size_t k = d.k();
  Vec theta = d.probs(), grad(k, 0.0);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < k; ++i)
      grad[j] += theta[i] * f(i) * ((i == j ? 1.0 : 0.0) - theta[j]);
  return grad;
}

// Runs the session n times and checks each gradient coordinate against the
// exact value within 4.5 standard errors.
template <class Session>
void check_unbiased(Session& session, const Vec& exact, std::size_t n,
                    std::uint64_t seed) {
  RngStream rng(seed, "train");
  std::size_t dim = exact.size();
  Vec sum(dim, 0.0), sumsq(dim, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    Vec g = session.estimate(rng).gradient();
    for (std::size_t i = 0; i < dim; ++i) {
      sum[i] += g[i];
      sumsq[i] += g[i] * g[i];
    }
  }
  for (std::size_t i = 0; i < dim; ++i) {
    double mean = sum[i] / static_cast<double>(n);
    double var =
        (sumsq[i] / static_cast<double>(n) - mean * mean) *
        static_cast<double>(n) / static_cast<double>(n - 1);
    double se = std::sqrt(std::max(var, 0.0) / static_cast<double>(n));
    INFO("coordinate ", i, " mean ", mean, " exact ", exact[i], " se ", se);
    CHECK(std::abs(mean - exact[i]) <= 4.5 * se + 1e-12);
  }
}

double toy_f1(const Vec& b) { return (b[0] - 0.499) * (b[0] - 0.499); }

Node zero_of(Tape& t, Node z) { return mul(t.constant(0.0), sum(z)); }

}  // namespace

TEST_CASE("reinforce base term matches the hand-computed toy example") {
  // theta = 0.5 (logit 0), b = 1, t = 0.499: f = 0.251001 and the
  // logit-space score is b - theta = 0.5, so g = 0.1255005. In probability
  // space this is the familiar f * 2 = 0.502002 divided through the
  // sigmoid slope 0.25.
  BernoulliVector d{{0.0}};
  Vec b = {1.0};
  GradEstimate e = reinforce(toy_f1(b), bernoulli_score(d, b));
  CHECK(e.gradient()[0] == doctest::Approx(0.1255005).epsilon(1e-12));
  CHECK(e.gradient()[0] * 4.0 == doctest::Approx(0.502002).epsilon(1e-12));
}

TEST_CASE("relax with a zero surrogate reduces bitwise to reinforce") {
  BernoulliVector d{{0.4, -1.1, 0.2}};
  auto f = [](const Vec& b) { return b[0] * 2.0 + b[1] - 0.3 * b[2] + 0.1; };
  BernoulliSession plain(d, f, EstimatorKind::kReinforce);
  BernoulliSession relaxed(d, f, EstimatorKind::kRelax);
  relaxed.make_surrogate<LambdaSurrogate>(
      RelaxedObjective([](Tape& t, Node z) { return zero_of(t, z); }));

  RngStream rng(7, "train");
  for (int i = 0; i < 50; ++i) {
    RelaxedSample s = draw_relaxed(d, rng);
    Vec a = plain.estimate_from(s).gradient();
    Vec b2 = relaxed.estimate_from(s).gradient();
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b2[j]);
  }
}

TEST_CASE("gaussian lax with c = f reduces bitwise to reparameterization") {
  DiagonalGaussian d{{0.5, -0.2}, {0.1, -0.3}};
  auto f = [](const Vec& a) {
    return (a[0] - 3.0) * (a[0] - 3.0) + (a[1] - 3.0) * (a[1] - 3.0);
  };
  RelaxedObjective graph_f = [](Tape& t, Node a) {
    return sum(square(sub(a, broadcast_to(t.constant(3.0), a.size()))));
  };

  GaussianSession lax_s(d, f, EstimatorKind::kLax);
  lax_s.make_surrogate<LambdaSurrogate>(graph_f);
  GaussianSession rep_s(d, f, EstimatorKind::kReparam);
  rep_s.make_surrogate<LambdaSurrogate>(graph_f);

  RngStream rng(11, "train");
  for (int i = 0; i < 50; ++i) {
    GaussianSession::Draw dr = lax_s.draw(rng);
    Vec a = lax_s.estimate_from(dr).gradient();
    Vec b = rep_s.estimate_from(dr).gradient();
    for (std::size_t j = 0; j < a.size(); ++j) CHECK(a[j] == b[j]);
  }
}

TEST_CASE("bernoulli estimators are unbiased against enumeration") {
  BernoulliVector d{{0.3, -0.5}};
  auto f = [](const Vec& b) {
    return (b[0] - 0.2) * (b[0] - 0.2) + 0.7 * b[0] * b[1] + 0.4 * b[1];
  };
  Vec exact = bernoulli_exact_grad(d, f);
  RelaxedObjective relaxed_f = [](Tape& t, Node rb) {
    Node d0 = sub(slice(rb, 0, 1), t.constant(0.2));
    Node prod = mul(slice(rb, 0, 1), slice(rb, 1, 1));
    return add(sum(square(d0)),
               add(mul(t.constant(0.7), sum(prod)),
                   mul(t.constant(0.4), sum(slice(rb, 1, 1)))));
  };
  std::size_t n = 150000;

  SUBCASE("reinforce") {
    BernoulliSession s(d, f, EstimatorKind::kReinforce);
    check_unbiased(s, exact, n, 21);
  }
  SUBCASE("relax with an untrained mlp surrogate") {
    BernoulliSession s(d, f, EstimatorKind::kRelax);
    RngStream init(3, "init");
    s.make_surrogate<MlpSurrogate>(MlpSpec{{2, 8, 1}, Act::kTanh}, init);
    check_unbiased(s, exact, n, 22);
  }
  SUBCASE("dlax with an untrained mlp surrogate") {
    BernoulliSession s(d, f, EstimatorKind::kDlax);
    RngStream init(4, "init");
    s.make_surrogate<MlpSurrogate>(MlpSpec{{2, 8, 1}, Act::kTanh}, init);
    check_unbiased(s, exact, n, 23);
  }
  SUBCASE("rebar configuration") {
    BernoulliSession s(d, f, EstimatorKind::kRebar);
    RngStream init(5, "init");
    s.make_surrogate<StructuredSurrogate>(
        relaxed_f, StructuredSurrogate::Options{0.7, false, true, 0.8, {}},
        init);
    check_unbiased(s, exact, n, 24);
  }
}

TEST_CASE("categorical estimators are unbiased against enumeration") {
  CategoricalDist d{{0.2, -0.4, 0.9}};
  auto f = [](std::size_t b) { return b == 0 ? 1.3 : (b == 1 ? -0.5 : 0.2); };
  Vec exact = categorical_exact_grad(d, f);
  std::size_t n = 150000;

  SUBCASE("reinforce") {
    CategoricalSession s(d, f, EstimatorKind::kReinforce);
    check_unbiased(s, exact, n, 31);
  }
  SUBCASE("relax with an untrained mlp surrogate") {
    CategoricalSession s(d, f, EstimatorKind::kRelax);
    RngStream init(6, "init");
    s.make_surrogate<MlpSurrogate>(MlpSpec{{3, 8, 1}, Act::kTanh}, init);
    check_unbiased(s, exact, n, 32);
  }
  SUBCASE("dlax with an untrained mlp surrogate") {
    CategoricalSession s(d, f, EstimatorKind::kDlax);
    RngStream init(7, "init");
    s.make_surrogate<MlpSurrogate>(MlpSpec{{3, 8, 1}, Act::kTanh}, init);
    check_unbiased(s, exact, n, 33);
  }
}

TEST_CASE("gaussian estimators are unbiased against the closed form") {
  DiagonalGaussian d{{0.5, -0.2}, {0.1, -0.3}};
  auto f = [](const Vec& a) {
    return (a[0] - 3.0) * (a[0] - 3.0) + (a[1] - 3.0) * (a[1] - 3.0);
  };
  // d/dmu_i = 2 (mu_i - 3), d/dlogsigma_i = 2 sigma_i^2.
  Vec exact = {2.0 * (0.5 - 3.0), 2.0 * (-0.2 - 3.0),
               2.0 * std::exp(2.0 * 0.1), 2.0 * std::exp(2.0 * -0.3)};
  RelaxedObjective graph_f = [](Tape& t, Node a) {
    return sum(square(sub(a, broadcast_to(t.constant(3.0), a.size()))));
  };
  std::size_t n = 100000;

  SUBCASE("reinforce") {
    GaussianSession s(d, f, EstimatorKind::kReinforce);
    check_unbiased(s, exact, n, 41);
  }
  SUBCASE("reparameterization") {
    GaussianSession s(d, f, EstimatorKind::kReparam);
    s.make_surrogate<LambdaSurrogate>(graph_f);
    check_unbiased(s, exact, n, 42);
  }
  SUBCASE("lax with an untrained mlp surrogate") {
    GaussianSession s(d, f, EstimatorKind::kLax);
    RngStream init(8, "init");
    s.make_surrogate<MlpSurrogate>(MlpSpec{{2, 8, 1}, Act::kTanh}, init);
    check_unbiased(s, exact, n, 43);
  }
}

TEST_CASE("variance gradient matches finite differences of g^2 under "
          "shared noise") {
  BernoulliVector d{{0.3, -0.5}};
  auto f = [](const Vec& b) { return (b[0] - 0.2) * (b[0] - 0.2) + b[1]; };
  BernoulliSession s(d, f, EstimatorKind::kRelax);
  RngStream init(9, "init");
  MlpSurrogate& surr =
      s.make_surrogate<MlpSurrogate>(MlpSpec{{2, 6, 1}, Act::kTanh}, init);

  RngStream rng(55, "train");
  RelaxedSample sample = draw_relaxed(d, rng);
  GradEstimate est = s.estimate_from(sample);
  std::vector<Node> phi = s.phi_nodes();
  std::vector<Vec> vg = variance_grad(s.tape(), est, phi);
  REQUIRE(vg.size() == 1);

  Vec p0 = s.tape().value(surr.params());
  auto g_sq_at = [&](const Vec& pv) {
    s.tape().set_value(surr.params(), pv);
    s.tape().recompute();
    // Same sample, same estimate structure; only the phi-dependent node
    // values move.
    return est.g_sq();
  };
  Vec fd = testutil::fd_gradient(g_sq_at, p0, 1e-4);
  g_sq_at(p0);  // restore
  CHECK(testutil::max_rel_error(vg[0], fd) < 1e-4);
}

TEST_CASE("variance gradient agrees with a plain backward pass through "
          "g_sq_node") {
  BernoulliVector d{{-0.2, 0.8}};
  auto f = [](const Vec& b) { return 1.5 * b[0] - 0.4 * b[1] + 0.2; };
  BernoulliSession s(d, f, EstimatorKind::kRelax);
  RngStream init(10, "init");
  s.make_surrogate<MlpSurrogate>(MlpSpec{{2, 5, 1}, Act::kTanh}, init);

  RngStream rng(77, "train");
  GradEstimate est = s.estimate(rng);
  std::vector<Node> phi = s.phi_nodes();
  std::vector<Vec> vg = variance_grad(s.tape(), est, phi);

  Node gsq = est.g_sq_node(s.tape());
  CHECK(gsq.scalar() == doctest::Approx(est.g_sq()).epsilon(1e-12));
  s.tape().backward(gsq);
  CHECK(testutil::max_rel_error(vg[0], s.tape().grad(phi[0])) < 1e-10);
}

TEST_CASE("rebar variance gradient in (eta, log lambda) matches finite "
          "differences") {
  BernoulliVector d{{0.6}};
  RelaxedObjective relaxed_f = [](Tape& t, Node rb) {
    return sum(square(sub(rb, t.constant(0.499))));
  };
  BernoulliSession s(d, toy_f1, EstimatorKind::kRebar);
  RngStream init(12, "init");
  StructuredSurrogate& surr = s.make_surrogate<StructuredSurrogate>(
      relaxed_f, StructuredSurrogate::Options{0.5, false, true, 1.0, {}},
      init);

  RngStream rng(99, "train");
  GradEstimate est = s.estimate(rng);
  std::vector<Node> phi = s.phi_nodes();
  std::vector<Vec> vg = variance_grad(s.tape(), est, phi);
  REQUIRE(vg.size() == 2);

  auto fd_for = [&](Node p) {
    Vec p0 = s.tape().value(p);
    auto g_sq_at = [&](const Vec& pv) {
      s.tape().set_value(p, pv);
      s.tape().recompute();
      return est.g_sq();
    };
    Vec fd = testutil::fd_gradient(g_sq_at, p0, 1e-4);
    g_sq_at(p0);
    return fd;
  };
  CHECK(testutil::max_rel_error(vg[0], fd_for(surr.log_lambda())) < 1e-4);
  CHECK(testutil::max_rel_error(vg[1], fd_for(surr.eta())) < 1e-4);
}

TEST_CASE("control-variate combination and direct dependence shift the "
          "base as expected") {
  GradEstimate g = reinforce(2.0, {0.5, -1.0});  // base {1, -2}
  GradEstimate cv = reinforce(0.5, {0.5, -1.0});
  GradEstimate mean = reinforce(0.25, {1.0, 1.0});
  GradEstimate out = apply_control_variate(g, cv, mean);
  CHECK(out.gradient()[0] == doctest::Approx(1.0 - 0.25 + 0.25));
  CHECK(out.gradient()[1] == doctest::Approx(-2.0 + 0.5 + 0.25));

  GradEstimate corrected = direct_dependence_correction(out, {0.1, -0.2});
  CHECK(corrected.gradient()[0] == doctest::Approx(1.1));
  CHECK(corrected.gradient()[1] == doctest::Approx(-1.45));

  CHECK_THROWS_AS(direct_dependence_correction(out, {0.1}), ContractError);
}

TEST_CASE("control variate keeps unbiasedness when its mean is subtracted") {
  // cv = c(b) * score with exact mean correction by enumeration: the
  // combined estimator must still average to the enumeration gradient.
  BernoulliVector d{{0.3, -0.5}};
  auto f = [](const Vec& b) { return (b[0] - 0.2) * (b[0] - 0.2) + b[1]; };
  auto c = [](const Vec& b) { return 0.6 * b[0] - 0.3 * b[1]; };
  Vec exact = bernoulli_exact_grad(d, f);
  Vec cv_mean_grad = bernoulli_exact_grad(d, c);

  std::size_t n = 150000;
  RngStream rng(61, "train");
  Vec sum(2, 0.0), sumsq(2, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    RelaxedSample s = draw_relaxed(d, rng);
    Vec score = bernoulli_score(d, s.b);
    GradEstimate base = reinforce(f(s.b), score);
    GradEstimate cv = reinforce(c(s.b), score);
    GradEstimate mean;
    mean.base = cv_mean_grad;
    Vec g = apply_control_variate(base, cv, mean).gradient();
    for (std::size_t i = 0; i < 2; ++i) {
      sum[i] += g[i];
      sumsq[i] += g[i] * g[i];
    }
  }
  for (std::size_t i = 0; i < 2; ++i) {
    double m = sum[i] / static_cast<double>(n);
    double var = sumsq[i] / static_cast<double>(n) - m * m;
    double se = std::sqrt(var / static_cast<double>(n));
    CHECK(std::abs(m - exact[i]) <= 4.5 * se + 1e-12);
  }
}

TEST_CASE("corrupt relaxed samples are rejected") {
  BernoulliVector d{{0.0}};
  BernoulliSession s(d, toy_f1, EstimatorKind::kRelax);
  RngStream init(1, "init");
  s.make_surrogate<MlpSurrogate>(MlpSpec{{1, 4, 1}, Act::kTanh}, init);
  RelaxedSample bad;
  bad.b = {1.0};
  bad.v = {0.5};
  bad.z = {-0.3};  // H(z) = 0 != b
  bad.z_tilde = {0.3};
  CHECK_THROWS_AS(s.estimate_from(bad), ContractError);

  BernoulliSession no_surr(d, toy_f1, EstimatorKind::kRelax);
  CHECK_THROWS_AS(no_surr.estimate(init), ContractError);
}

TEST_CASE("toy loop drives theta toward the enumerated optimum") {
  ToyConfig cfg;
  cfg.kind = EstimatorKind::kRelax;
  cfg.iters = 5000;
  cfg.seed = 5;
  cfg.log_every = 10;
  std::vector<ToyTraceRow> trace = run_lax_loop(cfg);
  REQUIRE(!trace.empty());
  // target 0.499 < 0.5, so the optimum is theta = 0.
  CHECK(trace.back().theta_prob < 0.25);
  CHECK(trace.back().loss_exact < trace.front().loss_exact);
  CHECK(std::isfinite(trace.back().grad_log_var));
}

TEST_CASE("toy loop also runs with reinforce and rebar") {
  for (EstimatorKind k : {EstimatorKind::kReinforce, EstimatorKind::kRebar}) {
    ToyConfig cfg;
    cfg.kind = k;
    cfg.iters = 400;
    cfg.seed = 2;
    cfg.log_every = 50;
    std::vector<ToyTraceRow> trace = run_lax_loop(cfg);
    CHECK(trace.size() == 8);
    for (const ToyTraceRow& r : trace) {
      CHECK(std::isfinite(r.theta_prob));
      CHECK(std::isfinite(r.grad));
    }
  }
}

TEST_CASE("toy loop validates its configuration") {
  ToyConfig bad_target;
  bad_target.target = 1.2;
  CHECK_THROWS_AS(run_lax_loop(bad_target), ConfigError);
  ToyConfig bad_lr;
  bad_lr.lr = 0.0;
  CHECK_THROWS_AS(run_lax_loop(bad_lr), ConfigError);
  ToyConfig bad_kind;
  bad_kind.kind = EstimatorKind::kReparam;
  CHECK_THROWS_AS(run_lax_loop(bad_kind), ConfigError);
}
