#pragma once

// Parametric distributions used by the estimators: Bernoulli vectors and
// categoricals with relaxed (logistic / Gumbel) samplers, conditional
// relaxed resampling given the hard outcome, and a diagonal Gaussian.
//
// Conventions fixed here: the hard map is H(z) = 1[z > 0] for Bernoulli
// (z = 0 maps to 0) and argmax with lowest-index tie-breaking for the
// categorical. All uniform noise is clamped to (delta, 1 - delta) with
// delta = 1e-10 before any log transform.

#include <cmath>
#include <limits>
#include <vector>

#include "relax/errors.hpp"
#include "relax/rng.hpp"
#include "relax/tape.hpp"

namespace relax {

constexpr double kNoiseClamp = 1e-10;

inline double clamp_unit(double u) {
  if (u < kNoiseClamp) return kNoiseClamp;
  if (u > 1.0 - kNoiseClamp) return 1.0 - kNoiseClamp;
  return u;
}

inline Vec clamp_unit(Vec u) {
  for (double& x : u) x = clamp_unit(x);
  return u;
}

inline Vec uniform_vec(RngStream& rng, std::size_t n) {
  Vec u(n);
  for (double& x : u) x = clamp_unit(rng.uniform());
  return u;
}

// ---------------------------------------------------------------------------
// Bernoulli vector, parameterized by logits (theta_i = sigmoid(logit_i)).
// ---------------------------------------------------------------------------

struct BernoulliVector {
  Vec logits;

  std::size_t dim() const { return logits.size(); }

  double prob(std::size_t i) const { return detail::stable_sigmoid(logits[i]); }

  Vec probs() const {
    Vec p(dim());
    for (std::size_t i = 0; i < dim(); ++i) p[i] = prob(i);
    return p;
  }
};

/// z = logit + log(u / (1-u)), b = 1[z > 0]. The marginal of b is
/// Bernoulli(sigmoid(logit)).
inline void bernoulli_relaxed_sample(const BernoulliVector& d, const Vec& u,
                                     Vec& z, Vec& b) {
  if (u.size() != d.dim())
    throw ContractError("bernoulli_relaxed_sample: noise length");
  z.resize(d.dim());
  b.resize(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) {
    double ui = u[i];
    if (!(ui > 0.0 && ui < 1.0))
      throw ContractError("bernoulli_relaxed_sample: u outside (0,1)");
    z[i] = d.logits[i] + std::log(ui) - std::log1p(-ui);
    b[i] = z[i] > 0.0 ? 1.0 : 0.0;
  }
}

/// Conditional relaxed resample z~ with H(z~) = b guaranteed:
/// v' = v(1-theta) for b=0, v*theta + (1-theta) for b=1, then the usual
/// logistic transform.
inline void bernoulli_conditional_relaxed(const BernoulliVector& d,
                                          const Vec& b, const Vec& v,
                                          Vec& z_tilde) {
  if (b.size() != d.dim() || v.size() != d.dim())
    throw ContractError("bernoulli_conditional_relaxed: length");
  z_tilde.resize(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) {
    double theta = d.prob(i);
    double vp = b[i] > 0.5 ? v[i] * theta + (1.0 - theta)
                           : v[i] * (1.0 - theta);
    vp = clamp_unit(vp);
    z_tilde[i] = d.logits[i] + std::log(vp) - std::log1p(-vp);
    // Guard the measure-zero boundary so H(z~) = b holds exactly.
    if (b[i] > 0.5 && z_tilde[i] <= 0.0) z_tilde[i] = kNoiseClamp;
    if (b[i] <= 0.5 && z_tilde[i] > 0.0) z_tilde[i] = 0.0;
  }
}

/// d z~_i / d logit_i with (b, v) held fixed; the Jacobian is diagonal.
inline Vec bernoulli_conditional_jacobian_diag(const BernoulliVector& d,
                                               const Vec& b, const Vec& v) {
  Vec jac(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) {
    double theta = d.prob(i);
    double dtheta = theta * (1.0 - theta);
    double vp, dvp;
    if (b[i] > 0.5) {
      vp = v[i] * theta + (1.0 - theta);
      dvp = (v[i] - 1.0) * dtheta;
    } else {
      vp = v[i] * (1.0 - theta);
      dvp = -v[i] * dtheta;
    }
    vp = clamp_unit(vp);
    jac[i] = 1.0 + dvp / (vp * (1.0 - vp));
  }
  return jac;
}

/// log p(b | logits) as a graph expression differentiable in the logits
/// node. b enters as plain values (held constant).
inline Node bernoulli_log_prob(Node logits, const Vec& b) {
  Tape* t = logits.tape;
  for (double bi : b)
    if (bi != 0.0 && bi != 1.0)
      throw ContractError("bernoulli_log_prob: value outside support");
  Node bn = t->constant(b);
  Node one = t->constant(Vec(b.size(), 1.0));
  // b * log sigmoid(l) + (1-b) * log sigmoid(-l)
  Node lp = sub(neg(mul(bn, softplus(neg(logits)))),
                mul(sub(one, bn), softplus(logits)));
  return sum(lp);
}

/// Closed-form score d log p(b|l) / dl = b - sigmoid(l).
inline Vec bernoulli_score(const BernoulliVector& d, const Vec& b) {
  Vec s(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i) s[i] = b[i] - d.prob(i);
  return s;
}

/// log density of the relaxed z under p(z | logits): independent logistic
/// with location logit_i.
inline Node bernoulli_relaxed_log_prob(Node logits, const Vec& z) {
  Tape* t = logits.tape;
  Node zn = t->constant(z);
  Node w = sub(zn, logits);
  Node two = t->constant(2.0);
  // log logistic pdf = -w - 2 softplus(-w)
  return sum(sub(neg(w), mul(two, softplus(neg(w)))));
}

/// Score of the relaxed density: d/dl log p(z|l) = 1 - 2 sigmoid(l - z).
inline Vec bernoulli_relaxed_score(const BernoulliVector& d, const Vec& z) {
  Vec s(d.dim());
  for (std::size_t i = 0; i < d.dim(); ++i)
    s[i] = 1.0 - 2.0 * detail::stable_sigmoid(d.logits[i] - z[i]);
  return s;
}

// ---------------------------------------------------------------------------
// Categorical over k outcomes, parameterized by logits.
// ---------------------------------------------------------------------------

struct CategoricalDist {
  Vec logits;

  std::size_t k() const { return logits.size(); }

  Vec probs() const {
    Vec p(k());
    double m = logits[0];
    for (double l : logits) m = std::max(m, l);
    double z = 0.0;
    for (std::size_t i = 0; i < k(); ++i) {
      p[i] = std::exp(logits[i] - m);
      z += p[i];
    }
    for (double& x : p) x /= z;
    return p;
  }
};

inline std::size_t hard_argmax(const Vec& z) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < z.size(); ++i)
    if (z[i] > z[best]) best = i;
  return best;
}

/// Gumbel trick: z_i = log theta_i - log(-log u_i); b = argmax(z).
inline void categorical_relaxed_sample(const CategoricalDist& d, const Vec& u,
                                       Vec& z, std::size_t& b) {
  if (u.size() != d.k())
    throw ContractError("categorical_relaxed_sample: noise length");
  Vec p = d.probs();
  z.resize(d.k());
  for (std::size_t i = 0; i < d.k(); ++i)
    z[i] = std::log(std::max(p[i], detail::kLogClamp)) -
           std::log(-std::log(clamp_unit(u[i])));
  b = hard_argmax(z);
}

/// Truncated-Gumbel conditional resample with argmax(z~) = b guaranteed:
/// z~_b = -log(-log v_b); z~_i = -log(-log v_i / theta_i - log v_b), i != b.
inline void categorical_conditional_relaxed(const CategoricalDist& d,
                                            std::size_t b, const Vec& v,
                                            Vec& z_tilde) {
  if (b >= d.k()) throw ContractError("categorical_conditional_relaxed: b");
  if (v.size() != d.k())
    throw ContractError("categorical_conditional_relaxed: noise length");
  Vec p = d.probs();
  z_tilde.resize(d.k());
  double log_vb = std::log(clamp_unit(v[b]));
  for (std::size_t i = 0; i < d.k(); ++i) {
    if (i == b) {
      z_tilde[i] = -std::log(-log_vb);
    } else {
      double ti = std::max(p[i], detail::kLogClamp);
      z_tilde[i] = -std::log(-std::log(clamp_unit(v[i])) / ti - log_vb);
    }
  }
  // Truncation guarantees z~_b is the strict max; nudge on the measure-zero
  // numeric tie so argmax(z~) = b holds exactly.
  if (hard_argmax(z_tilde) != b)
    z_tilde[b] = std::nextafter(z_tilde[hard_argmax(z_tilde)],
                                std::numeric_limits<double>::infinity());
}

/// Jacobian d z~_i / d logit_j with (b, v) fixed; row b is zero.
/// Chain: z~_i depends on theta_i only, and theta depends on all logits
/// through the softmax.
inline std::vector<Vec> categorical_conditional_jacobian(
    const CategoricalDist& d, std::size_t b, const Vec& v) {
  std::size_t k = d.k();
  Vec p = d.probs();
  double log_vb = std::log(clamp_unit(v[b]));
  std::vector<Vec> jac(k, Vec(k, 0.0));
  for (std::size_t i = 0; i < k; ++i) {
    if (i == b) continue;
    double ti = std::max(p[i], detail::kLogClamp);
    double log_vi = std::log(clamp_unit(v[i]));
    double a = -log_vi / ti - log_vb;  // positive
    double dz_dtheta = -(log_vi / (ti * ti)) / a;
    for (std::size_t j = 0; j < k; ++j) {
      double dtheta_dl = p[i] * ((i == j ? 1.0 : 0.0) - p[j]);
      jac[i][j] = dz_dtheta * dtheta_dl;
    }
  }
  return jac;
}

/// Jacobian d z_i / d logit_j of the unconditional Gumbel sample:
/// z_i = log theta_i + g_i, so the Jacobian is delta_ij - theta_j.
inline std::vector<Vec> categorical_relaxed_jacobian(const CategoricalDist& d) {
  std::size_t k = d.k();
  Vec p = d.probs();
  std::vector<Vec> jac(k, Vec(k, 0.0));
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < k; ++j)
      jac[i][j] = (i == j ? 1.0 : 0.0) - p[j];
  return jac;
}

inline Node categorical_log_prob(Node logits, std::size_t b) {
  Tape* t = logits.tape;
  if (b >= logits.size())
    throw ContractError("categorical_log_prob: value outside support");
  Vec onehot(logits.size(), 0.0);
  onehot[b] = 1.0;
  return dot(t->constant(onehot), log_softmax(logits));
}

/// d log p(b|l) / dl = onehot(b) - softmax(l).
inline Vec categorical_score(const CategoricalDist& d, std::size_t b) {
  Vec s = d.probs();
  for (double& x : s) x = -x;
  s[b] += 1.0;
  return s;
}

/// log p(z | logits) for the relaxed sample: product of independent Gumbel
/// densities with locations log theta_i.
inline Node categorical_relaxed_log_prob(Node logits, const Vec& z) {
  Tape* t = logits.tape;
  Node logtheta = log_softmax(logits);
  Node zn = t->constant(z);
  Node w = sub(zn, logtheta);
  return sum(sub(neg(w), relax::exp(neg(w))));
}

/// Score of the relaxed Gumbel-product density with respect to the logits.
inline Vec categorical_relaxed_score(const CategoricalDist& d, const Vec& z) {
  std::size_t k = d.k();
  Vec p = d.probs();
  // d log p / d log theta_i = 1 - exp(log theta_i - z_i)
  Vec g(k);
  for (std::size_t i = 0; i < k; ++i)
    g[i] = 1.0 - std::exp(std::log(std::max(p[i], detail::kLogClamp)) - z[i]);
  // chain through log-softmax: d/dl_j = sum_i g_i (delta_ij - theta_j)
  double total = 0.0;
  for (std::size_t i = 0; i < k; ++i) total += g[i];
  Vec s(k);
  for (std::size_t j = 0; j < k; ++j) s[j] = g[j] - p[j] * total;
  return s;
}

// ---------------------------------------------------------------------------
// Diagonal Gaussian.
// ---------------------------------------------------------------------------

struct DiagonalGaussian {
  Vec mean;
  Vec log_std;
};

/// a = mean + exp(log_std) * eps as a graph expression (mean / log_std are
/// nodes so the sample is differentiable in them).
inline Node gaussian_reparam_sample(Node mean, Node log_std, const Vec& eps) {
  Tape* t = mean.tape;
  return add(mean, mul(relax::exp(log_std), t->constant(eps)));
}

inline Node gaussian_log_prob(Node mean, Node log_std, const Vec& x) {
  Tape* t = mean.tape;
  Node xn = t->constant(x);
  Node diff = sub(xn, mean);
  Node inv_var = relax::exp(mul(t->constant(-2.0), log_std));
  Node half = t->constant(0.5);
  Node quad = mul(half, mul(square(diff), inv_var));
  Node c = t->constant(Vec(x.size(), 0.5 * std::log(2.0 * M_PI)));
  return neg(sum(add(add(quad, log_std), c)));
}

/// Score of the Gaussian in (mean, log_std), concatenated.
inline Vec gaussian_score(const DiagonalGaussian& d, const Vec& x) {
  std::size_t n = d.mean.size();
  Vec s(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    double sd = std::exp(d.log_std[i]);
    double w = (x[i] - d.mean[i]) / sd;
    s[i] = w / sd;
    s[n + i] = w * w - 1.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// The joint relaxed sample consumed by DLAX / RELAX.
// ---------------------------------------------------------------------------

struct RelaxedSample {
  Vec u;        // noise behind z
  Vec v;        // noise behind z_tilde
  Vec z;        // relaxed sample
  Vec b;        // hard outcome (0/1 per-dim for Bernoulli; single index
                // stored at b[0] for categorical)
  Vec z_tilde;  // relaxed sample conditioned on b
};

inline RelaxedSample draw_relaxed(const BernoulliVector& d, RngStream& rng) {
  RelaxedSample s;
  s.u = uniform_vec(rng, d.dim());
  s.v = uniform_vec(rng, d.dim());
  bernoulli_relaxed_sample(d, s.u, s.z, s.b);
  bernoulli_conditional_relaxed(d, s.b, s.v, s.z_tilde);
  return s;
}

inline RelaxedSample draw_relaxed(const CategoricalDist& d, RngStream& rng) {
  RelaxedSample s;
  s.u = uniform_vec(rng, d.k());
  s.v = uniform_vec(rng, d.k());
  std::size_t b;
  categorical_relaxed_sample(d, s.u, s.z, b);
  categorical_conditional_relaxed(d, b, s.v, s.z_tilde);
  s.b = {static_cast<double>(b)};
  return s;
}

}  // namespace relax
