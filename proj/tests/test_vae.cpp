#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "relax/vae.hpp"
#include "testutil.hpp"

using namespace relax;

namespace {

// Enumerates E_q[ELBO] for a one-layer model over all 2^L latents.
double enumerate_expected_elbo(const LinearVae& m, const Vec& x) {
  double e = 0.0;
  Vec lq = m.enc1_logits(x);
  for (std::size_t mask = 0; mask < (std::size_t{1} << m.L); ++mask) {
    Vec b(m.L);
    double q = 1.0;
    for (std::size_t i = 0; i < m.L; ++i) {
      b[i] = (mask >> i) & 1 ? 1.0 : 0.0;
      double p1 = relax::detail::stable_sigmoid(lq[i]);
      q *= b[i] > 0.5 ? p1 : 1.0 - p1;
    }
    e += q * vae_elbo(m, x, b);
  }
  return e;
}

LinearVae small_model(std::uint64_t seed, std::size_t D, std::size_t L,
                      int layers = 1) {
  RngStream rng(seed, "init");
  return LinearVae::init(D, L, layers, rng);
}

}  // namespace

TEST_CASE("symmetric case: all probabilities one half gives -log 2") {
  RngStream rng(0, "init");
  LinearVae m = LinearVae::init(1, 1, 1, rng);
  m.Wq1 = {0.0};
  m.bq1 = {0.0};
  m.Wp1 = {0.0};
  m.bp1 = {0.0};
  m.prior = {0.0};
  CHECK(vae_elbo(m, {1.0}, {1.0}) == doctest::Approx(-std::log(2.0)));
  CHECK(vae_elbo(m, {0.0}, {0.0}) == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("perfect autoencoder with prior matching q approaches zero") {
  RngStream rng(0, "init");
  LinearVae m = LinearVae::init(1, 1, 1, rng);
  m.Wq1 = {0.0};
  m.bq1 = {0.0};   // q(b=1|x) = 0.5
  m.prior = {0.0}; // p(b=1) = 0.5, so prior and q terms cancel
  m.Wp1 = {0.0};
  m.bp1 = {40.0};  // decoder outputs x = 1 almost surely
  double e = vae_elbo(m, {1.0}, {1.0});
  CHECK(e <= 0.0);
  CHECK(e > -1e-6);
}

TEST_CASE("non-binary inputs are rejected") {
  LinearVae m = small_model(1, 2, 2);
  CHECK_THROWS_AS(vae_elbo(m, {0.5, 1.0}, {1.0, 0.0}), ContractError);
  CHECK_THROWS_AS(vae_elbo(m, {0.0, 1.0}, {0.3, 0.0}), ContractError);
}

TEST_CASE("each elbo term is a log-mass bounded above by zero") {
  RngStream rng(3, "train");
  for (int trial = 0; trial < 200; ++trial) {
    Vec bits(4), logits(4);
    for (std::size_t i = 0; i < 4; ++i) {
      bits[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
      logits[i] = 8.0 * (rng.uniform() - 0.5);
    }
    CHECK(relax::detail::log_mass(bits, logits) <= 0.0);
  }
}

TEST_CASE("jensen: expected elbo never exceeds the exact log marginal") {
  for (std::uint64_t seed : {1ull, 2ull, 3ull}) {
    LinearVae m = small_model(seed, 3, 2);
    RngStream rng(seed, "data");
    Vec x(3);
    for (double& v : x) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
    double expected = enumerate_expected_elbo(m, x);
    double marginal_mass = 0.0;
    for (std::size_t mask = 0; mask < 4; ++mask) {
      Vec b = {static_cast<double>(mask & 1),
               static_cast<double>((mask >> 1) & 1)};
      double log_joint =
          relax::detail::log_mass(
              x, relax::detail::affine_num(m.Wp1, m.bp1, b, m.D, m.L)) +
          relax::detail::log_mass(b, m.prior);
      marginal_mass += std::exp(log_joint);
    }
    CHECK(expected <= std::log(marginal_mass) + 1e-9);
  }
}

TEST_CASE("two-layer elbo reduces to one-layer when the top layer is "
          "deterministic") {
  double B = 500.0;
  LinearVae two = small_model(4, 3, 2, 2);
  two.Wq2.assign(two.Wq2.size(), 0.0);
  two.bq2.assign(two.L, B);    // q(b2 = 1 | b1) -> 1
  two.prior.assign(two.L, B);  // p(b2 = 1) -> 1

  LinearVae one = small_model(4, 3, 2, 1);
  one.Wq1 = two.Wq1;
  one.bq1 = two.bq1;
  one.Wp1 = two.Wp1;
  one.bp1 = two.bp1;
  // effective prior over b1: decoder layer 2 evaluated at b2 = ones
  one.prior = relax::detail::affine_num(two.Wp2, two.bp2, Vec(two.L, 1.0),
                                        two.L, two.L);

  Vec ones(two.L, 1.0);
  for (std::size_t mask = 0; mask < 4; ++mask) {
    Vec b1 = {static_cast<double>(mask & 1),
              static_cast<double>((mask >> 1) & 1)};
    for (std::size_t xm = 0; xm < 8; ++xm) {
      Vec x = {static_cast<double>(xm & 1), static_cast<double>((xm >> 1) & 1),
               static_cast<double>((xm >> 2) & 1)};
      CHECK(vae_elbo(two, x, b1, ones) ==
            doctest::Approx(vae_elbo(one, x, b1)).epsilon(1e-9));
    }
  }
}

TEST_CASE("encoder gradient matches finite differences of the enumerated "
          "objective") {
  // Wq1 = 0 so the latent logits are exactly bq1; the estimator's
  // latent-logit gradient is then the gradient in bq1.
  LinearVae m = small_model(7, 2, 2);
  m.Wq1.assign(m.Wq1.size(), 0.0);
  m.bq1 = {0.3, -0.4};
  Vec x = {1.0, 0.0};

  auto neg_expected = [&](const Vec& l) {
    LinearVae mm = m;
    mm.bq1 = l;
    return -enumerate_expected_elbo(mm, x);
  };
  Vec exact = testutil::fd_gradient(neg_expected, m.bq1, 1e-5);

  for (EstimatorKind kind : {EstimatorKind::kReinforce, EstimatorKind::kRelax,
                             EstimatorKind::kRebar}) {
    VaeConfig cfg;
    cfg.kind = kind;
    cfg.latent = 2;
    cfg.surrogate_hidden = 6;
    cfg.seed = 11;
    VaeTrainer trainer(m, cfg);
    RngStream rng(31, "train");
    std::size_t n = 100000;
    Vec sum(2, 0.0), sumsq(2, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      Vec g = trainer.encoder_logit_grad(x, rng);
      for (std::size_t i = 0; i < 2; ++i) {
        sum[i] += g[i];
        sumsq[i] += g[i] * g[i];
      }
    }
    for (std::size_t i = 0; i < 2; ++i) {
      double mean = sum[i] / static_cast<double>(n);
      double var = sumsq[i] / static_cast<double>(n) - mean * mean;
      double se = std::sqrt(var / static_cast<double>(n));
      INFO("estimator ", static_cast<int>(kind), " coord ", i);
      CHECK(std::abs(mean - exact[i]) <= 4.5 * se + 1e-10);
    }
  }
}

TEST_CASE("two-layer encoder gradient is unbiased against enumeration") {
  // Full enumeration over (b1, b2); gradient taken in (bq1, bq2) with both
  // weight matrices zeroed so latent logits equal the biases.
  LinearVae m = small_model(9, 2, 1, 2);
  m.Wq1.assign(m.Wq1.size(), 0.0);
  m.Wq2.assign(m.Wq2.size(), 0.0);
  m.bq1 = {0.2};
  m.bq2 = {-0.3};
  Vec x = {1.0, 0.0};

  auto neg_expected = [&](const Vec& l) {
    LinearVae mm = m;
    mm.bq1 = {l[0]};
    mm.bq2 = {l[1]};
    double total = 0.0;
    for (double b1 : {0.0, 1.0})
      for (double b2 : {0.0, 1.0}) {
        double q1 = relax::detail::stable_sigmoid(mm.enc1_logits(x)[0]);
        double q2 = relax::detail::stable_sigmoid(mm.enc2_logits({b1})[0]);
        double q = (b1 > 0.5 ? q1 : 1 - q1) * (b2 > 0.5 ? q2 : 1 - q2);
        total += q * vae_elbo(mm, x, {b1}, {b2});
      }
    return -total;
  };
  Vec exact = testutil::fd_gradient(neg_expected, {0.2, -0.3}, 1e-5);

  VaeConfig cfg;
  cfg.kind = EstimatorKind::kRelax;
  cfg.layers = 2;
  cfg.latent = 1;
  cfg.surrogate_hidden = 6;
  cfg.seed = 13;
  VaeTrainer trainer(m, cfg);
  RngStream rng(37, "train");
  std::size_t n = 150000;
  Vec sum(2, 0.0), sumsq(2, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    Vec g = trainer.encoder_logit_grad(x, rng);
    for (std::size_t i = 0; i < 2; ++i) {
      sum[i] += g[i];
      sumsq[i] += g[i] * g[i];
    }
  }
  for (std::size_t i = 0; i < 2; ++i) {
    double mean = sum[i] / static_cast<double>(n);
    double var = sumsq[i] / static_cast<double>(n) - mean * mean;
    double se = std::sqrt(var / static_cast<double>(n));
    CHECK(std::abs(mean - exact[i]) <= 4.5 * se + 1e-10);
  }
}

TEST_CASE("dataset loader parses, splits, and validates") {
  const char* path = "vae_test_data.txt";
  {
    std::ofstream out(path);
    for (int i = 0; i < 10; ++i) out << (i % 2) << " 1 0\n";
  }
  BinaryDataset ds = load_binary_dataset(path);
  CHECK(ds.D == 3);
  CHECK(ds.train.size() == 8);
  CHECK(ds.valid.size() == 2);

  {
    std::ofstream out(path);
    out << "0 1\n0 2\n";
  }
  CHECK_THROWS_AS(load_binary_dataset(path), ConfigError);
  {
    std::ofstream out(path);
    out << "0 1\n0 1 1\n";
  }
  CHECK_THROWS_AS(load_binary_dataset(path), ConfigError);
  CHECK_THROWS_AS(load_binary_dataset("no_such_file.txt"), ConfigError);
  std::remove(path);
}

TEST_CASE("synthetic dataset is binary and sized as requested") {
  BinaryDataset ds = make_synthetic_dataset(100, 16, 5);
  CHECK(ds.D == 16);
  CHECK(ds.train.size() + ds.valid.size() == 100);
  for (const Vec& x : ds.train) check_binary(x);
  BinaryDataset again = make_synthetic_dataset(100, 16, 5);
  CHECK(ds.train == again.train);
}

TEST_CASE("optimum proxy equals the empirical log-likelihood bound") {
  std::vector<Vec> xs = {{0, 1}, {0, 1}, {1, 0}, {1, 0}};
  CHECK(enumerated_optimum_proxy(xs) == doctest::Approx(std::log(0.5)));
  std::vector<Vec> uniform = {{0, 0}, {0, 1}, {1, 0}, {1, 1}};
  CHECK(enumerated_optimum_proxy(uniform) ==
        doctest::Approx(std::log(0.25)));
}

TEST_CASE("training improves the elbo and is deterministic") {
  BinaryDataset ds = make_synthetic_dataset(60, 8, 17);
  VaeConfig cfg;
  cfg.kind = EstimatorKind::kRelax;
  cfg.latent = 4;
  cfg.surrogate_hidden = 8;
  cfg.steps = 200;
  cfg.batch = 12;
  cfg.lr = 5e-3;
  cfg.seed = 1;
  cfg.window = 100;

  RngStream init(cfg.seed, "init");
  LinearVae model = LinearVae::init(ds.D, cfg.latent, 1, init);
  std::vector<VaeTraceRow> trace = train_vae(model, ds, cfg);
  REQUIRE(trace.size() >= 2);
  CHECK(trace.back().train_elbo > trace.front().train_elbo);
  CHECK(std::isfinite(trace.back().valid_elbo));
  CHECK(std::isfinite(trace.back().grad_log_var));

  std::vector<VaeTraceRow> again = train_vae(model, ds, cfg);
  CHECK(again.back().train_elbo == trace.back().train_elbo);
  CHECK(again.back().grad_log_var == trace.back().grad_log_var);
}

TEST_CASE("training runs with reinforce and rebar; zero steps is empty") {
  BinaryDataset ds = make_synthetic_dataset(40, 6, 19);
  for (EstimatorKind k : {EstimatorKind::kReinforce, EstimatorKind::kRebar}) {
    VaeConfig cfg;
    cfg.kind = k;
    cfg.latent = 3;
    cfg.steps = 30;
    cfg.batch = 8;
    cfg.seed = 2;
    RngStream init(cfg.seed, "init");
    LinearVae model = LinearVae::init(ds.D, cfg.latent, 1, init);
    std::vector<VaeTraceRow> trace = train_vae(model, ds, cfg);
    CHECK(!trace.empty());
    for (const VaeTraceRow& r : trace) CHECK(std::isfinite(r.train_elbo));
  }

  VaeConfig cfg;
  cfg.steps = 0;
  cfg.latent = 3;
  RngStream init(0, "init");
  LinearVae model = LinearVae::init(ds.D, cfg.latent, 1, init);
  CHECK(train_vae(model, ds, cfg).empty());
}

TEST_CASE("invalid configurations are rejected") {
  BinaryDataset ds = make_synthetic_dataset(20, 4, 23);
  RngStream init(0, "init");
  LinearVae model = LinearVae::init(ds.D, 2, 1, init);

  VaeConfig bad_kind;
  bad_kind.kind = EstimatorKind::kLax;
  CHECK_THROWS_AS(train_vae(model, ds, bad_kind), ConfigError);

  VaeConfig bad_batch;
  bad_batch.batch = 0;
  CHECK_THROWS_AS(train_vae(model, ds, bad_batch), ConfigError);

  VaeConfig bad_lr;
  bad_lr.lr = 0.0;
  CHECK_THROWS_AS(train_vae(model, ds, bad_lr), ConfigError);

  RngStream init2(0, "init");
  CHECK_THROWS_AS(LinearVae::init(4, 2, 3, init2), ConfigError);
}
