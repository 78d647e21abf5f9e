#pragma once

// The estimator family: REINFORCE, reparameterization, control-variate
// combination, LAX, DLAX, RELAX (REBAR as a configuration), the variance
// gradient for training the surrogate, and the direct parameter-dependence
// correction.
//
// A GradEstimate keeps its phi-dependence symbolic: the estimate is
//   g_i = base_i + sum_terms coeff_term[i, :] . value(term.node)
// where base and all coefficients are constants in phi (scores, f(b), and
// sampled values are frozen there) while each term.node is a surrogate
// expression on the tape. d(g^2)/d phi is then one seeded backward pass.

#include <cmath>
#include <functional>
#include <variant>
#include <vector>

#include "relax/distributions.hpp"
#include "relax/errors.hpp"
#include "relax/optim.hpp"
#include "relax/rng.hpp"
#include "relax/surrogate.hpp"
#include "relax/tape.hpp"

namespace relax {

enum class EstimatorKind { kReinforce, kReparam, kLax, kDlax, kRelax, kRebar };

inline EstimatorKind estimator_kind_from_name(const std::string& name) {
  if (name == "reinforce") return EstimatorKind::kReinforce;
  if (name == "reparam") return EstimatorKind::kReparam;
  if (name == "lax") return EstimatorKind::kLax;
  if (name == "dlax") return EstimatorKind::kDlax;
  if (name == "relax") return EstimatorKind::kRelax;
  if (name == "rebar") return EstimatorKind::kRebar;
  throw ConfigError(
      "unknown estimator '" + name +
      "' (valid: reinforce, reparam, lax, dlax, relax, rebar)");
}

struct GradEstimate {
  /// One phi-dependent expression entering the estimate linearly.
  /// coeff is flat row-major (theta_dim x node_len).
  struct Term {
    Node node;
    Vec coeff;
  };

  Vec base;  // constant part (score terms with f(b) and scores frozen)
  std::vector<Term> terms;

  std::size_t dim() const { return base.size(); }

  void add_term(Node node, Vec coeff) {
    if (coeff.size() != base.size() * node.size())
      throw ContractError("GradEstimate: coefficient shape mismatch");
    terms.push_back({node, std::move(coeff)});
  }

  /// Numeric gradient over theta at the current tape values.
  Vec gradient() const {
    Vec g = base;
    for (const Term& t : terms) {
      const Vec& v = t.node.value();
      std::size_t len = v.size();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = 0.0;
        for (std::size_t d = 0; d < len; ++d) s += t.coeff[i * len + d] * v[d];
        g[i] += s;
      }
    }
    return g;
  }

  /// Sum over coordinates of the squared estimate (the variance objective).
  double g_sq() const {
    double s = 0.0;
    for (double gi : gradient()) s += gi * gi;
    return s;
  }

  /// The variance objective as an explicit scalar node on the tape.
  /// Equivalent to what variance_grad differentiates; used by tests to
  /// cross-check the seeded backward route against a plain backward pass.
  Node g_sq_node(Tape& tape) const {
    Node total{};
    for (std::size_t i = 0; i < dim(); ++i) {
      Node gi = tape.constant(base[i]);
      for (const Term& t : terms) {
        std::size_t len = t.node.size();
        Vec row(t.coeff.begin() + i * len, t.coeff.begin() + (i + 1) * len);
        gi = add(gi, dot(tape.constant(std::move(row)), t.node));
      }
      Node sq = square(gi);
      total = total.valid() ? add(total, sq) : sq;
    }
    return total;
  }
};

/// d(g^2)/d phi for every requested phi node: seed each term's adjoint with
/// 2 * coeff^T g and run one backward pass.
inline std::vector<Vec> variance_grad(Tape& tape, const GradEstimate& est,
                                      std::span<const Node> phi_nodes) {
  Vec g = est.gradient();
  tape.zero_adjoints();
  for (const GradEstimate::Term& t : est.terms) {
    std::size_t len = t.node.size();
    Vec seed(len, 0.0);
    for (std::size_t i = 0; i < g.size(); ++i)
      for (std::size_t d = 0; d < len; ++d)
        seed[d] += 2.0 * g[i] * t.coeff[i * len + d];
    tape.add_adjoint(t.node, seed);
  }
  tape.run_backward();
  std::vector<Vec> out;
  out.reserve(phi_nodes.size());
  for (const Node& p : phi_nodes) out.push_back(tape.adjoint(p));
  return out;
}

/// Score-function estimator: g = f(b) * d log p(b|theta) / d theta, with
/// f(b) held constant.
inline GradEstimate reinforce(double f_value, const Vec& score) {
  GradEstimate e;
  e.base.resize(score.size());
  for (std::size_t i = 0; i < score.size(); ++i)
    e.base[i] = f_value * score[i];
  return e;
}

/// g - cv + cv_mean, termwise.
inline GradEstimate apply_control_variate(const GradEstimate& g,
                                          const GradEstimate& cv,
                                          const GradEstimate& cv_mean) {
  if (cv.dim() != g.dim() || cv_mean.dim() != g.dim())
    throw ContractError("apply_control_variate: length mismatch");
  GradEstimate out = g;
  for (std::size_t i = 0; i < g.dim(); ++i)
    out.base[i] += cv_mean.base[i] - cv.base[i];
  for (const auto& t : cv.terms) {
    Vec negc = t.coeff;
    for (double& c : negc) c = -c;
    out.terms.push_back({t.node, std::move(negc)});
  }
  for (const auto& t : cv_mean.terms) out.terms.push_back(t);
  return out;
}

/// Adds the explicit d f(b, theta)/d theta path (b frozen).
inline GradEstimate direct_dependence_correction(GradEstimate g,
                                                 const Vec& df_dtheta) {
  if (df_dtheta.size() != g.dim())
    throw ContractError("direct_dependence_correction: length mismatch");
  for (std::size_t i = 0; i < g.dim(); ++i) g.base[i] += df_dtheta[i];
  return g;
}

// Jacobian of a sampled vector with respect to theta, stored row-major
// (theta_dim x sample_dim), i.e. entry [i*m + j] = d sample_j / d theta_i.
using Jacobian = Vec;

inline Jacobian diag_jacobian(const Vec& diag) {
  std::size_t m = diag.size();
  Jacobian j(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i) j[i * m + i] = diag[i];
  return j;
}

inline Jacobian dense_jacobian(const std::vector<Vec>& rows_by_sample_dim,
                               std::size_t theta_dim) {
  // input: rows_by_sample_dim[j][i] = d sample_j / d theta_i
  std::size_t m = rows_by_sample_dim.size();
  Jacobian out(theta_dim * m, 0.0);
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t i = 0; i < theta_dim; ++i)
      out[i * m + j] = rows_by_sample_dim[j][i];
  return out;
}

/// LAX: [f(b) - c(b)] * score + d c(b)/d theta. The reparameterization term
/// factors as (dc/db) . (db/dtheta); dc_db stays symbolic in phi while
/// db_dtheta is a constant Jacobian.
inline GradEstimate lax(double f_value, const Vec& score, Node c_b,
                        Node dc_db, const Jacobian& db_dtheta) {
  GradEstimate e = reinforce(f_value, score);
  Vec neg_score = score;
  for (double& s : neg_score) s = -s;
  e.add_term(c_b, std::move(neg_score));
  e.add_term(dc_db, db_dtheta);
  return e;
}

/// Pathwise estimator expressed through the same factorization as LAX so
/// the c = f reduction is arithmetic-identical: g = (df/db) . (db/dtheta).
inline GradEstimate reparam(Node f_b, Node df_db, const Jacobian& db_dtheta) {
  (void)f_b;
  std::size_t m = df_db.size();
  GradEstimate e;
  e.base.assign(db_dtheta.size() / m, 0.0);
  e.add_term(df_db, db_dtheta);
  return e;
}

/// DLAX: f(b) d log p(b)/dtheta - c(z) d log p(z)/dtheta + d c(z)/dtheta.
inline GradEstimate dlax(double f_value, const Vec& score_b,
                         const Vec& score_z, Node c_z, Node dc_dz,
                         const Jacobian& dz_dtheta) {
  GradEstimate e = reinforce(f_value, score_b);
  Vec neg = score_z;
  for (double& s : neg) s = -s;
  e.add_term(c_z, std::move(neg));
  e.add_term(dc_dz, dz_dtheta);
  return e;
}

/// RELAX: [f(b) - c(z~)] d log p(b)/dtheta + d c(z)/dtheta - d c(z~)/dtheta.
inline GradEstimate relax_estimate(double f_value, const Vec& score_b,
                                   Node c_ztilde, Node dc_dz,
                                   const Jacobian& dz_dtheta, Node dc_dztilde,
                                   const Jacobian& dztilde_dtheta) {
  GradEstimate e = reinforce(f_value, score_b);
  Vec neg_score = score_b;
  for (double& s : neg_score) s = -s;
  e.add_term(c_ztilde, std::move(neg_score));
  e.add_term(dc_dz, dz_dtheta);
  Vec neg_jac = dztilde_dtheta;
  for (double& s : neg_jac) s = -s;
  e.add_term(dc_dztilde, std::move(neg_jac));
  return e;
}

// ---------------------------------------------------------------------------
// Reusable single-sample estimation sessions. A session wires distribution,
// surrogate, and tape once; each draw mutates leaves and recomputes, so the
// hot loop performs no graph construction.
// ---------------------------------------------------------------------------

using SurrogateVariant = std::variant<std::monostate, MlpSurrogate,
                                      StructuredSurrogate, LambdaSurrogate>;

namespace detail {

struct BoundSurrogate {
  Node c;      // c(z_leaf), scalar
  Node dc_dz;  // symbolic gradient of c in the leaf

  static BoundSurrogate bind(const SurrogateVariant& s, Node z_leaf) {
    BoundSurrogate out;
    if (std::holds_alternative<MlpSurrogate>(s))
      out.c = std::get<MlpSurrogate>(s)(z_leaf);
    else if (std::holds_alternative<StructuredSurrogate>(s))
      out.c = std::get<StructuredSurrogate>(s)(z_leaf);
    else if (std::holds_alternative<LambdaSurrogate>(s))
      out.c = std::get<LambdaSurrogate>(s)(z_leaf);
    else
      return out;
    out.dc_dz = gradient_node(out.c, z_leaf);
    return out;
  }
};

inline std::vector<Node> phi_nodes_of(const SurrogateVariant& s) {
  if (std::holds_alternative<MlpSurrogate>(s))
    return {std::get<MlpSurrogate>(s).params()};
  if (std::holds_alternative<StructuredSurrogate>(s))
    return std::get<StructuredSurrogate>(s).phi_params();
  return {};
}

inline double surrogate_weight_decay(const SurrogateVariant& s) {
  if (std::holds_alternative<MlpSurrogate>(s))
    return std::get<MlpSurrogate>(s).weight_decay();
  if (std::holds_alternative<StructuredSurrogate>(s))
    return std::get<StructuredSurrogate>(s).residual_weight_decay();
  return 0.0;
}

}  // namespace detail

/// Session for expectations over a Bernoulli vector: REINFORCE / DLAX /
/// RELAX (REBAR via a structured surrogate).
class BernoulliSession {
public:
  using ObjectiveFn = std::function<double(const Vec& b)>;

  BernoulliSession(BernoulliVector dist, ObjectiveFn f, EstimatorKind kind)
      : dist_(std::move(dist)), f_(std::move(f)), kind_(kind) {
    z_leaf_ = tape_.input(Vec(dist_.dim(), 0.0));
    zt_leaf_ = tape_.input(Vec(dist_.dim(), 0.0));
  }

  Tape& tape() { return tape_; }
  BernoulliVector& dist() { return dist_; }
  EstimatorKind kind() const { return kind_; }

  /// Installs the surrogate; must be called before the first sample unless
  /// the estimator is plain REINFORCE.
  template <class S, class... Args>
  S& make_surrogate(Args&&... args) {
    surrogate_.emplace<S>(tape_, std::forward<Args>(args)...);
    at_z_ = detail::BoundSurrogate::bind(surrogate_, z_leaf_);
    at_zt_ = detail::BoundSurrogate::bind(surrogate_, zt_leaf_);
    return std::get<S>(surrogate_);
  }

  std::vector<Node> phi_nodes() const {
    return detail::phi_nodes_of(surrogate_);
  }
  double weight_decay() const {
    return detail::surrogate_weight_decay(surrogate_);
  }

  GradEstimate estimate(RngStream& rng) {
    RelaxedSample s = draw_relaxed(dist_, rng);
    return estimate_from(s);
  }

  GradEstimate estimate_from(const RelaxedSample& s) {
    if (kind_ != EstimatorKind::kReinforce) {
      if (!at_z_.c.valid())
        throw ContractError("BernoulliSession: surrogate not installed");
      for (std::size_t i = 0; i < dist_.dim(); ++i) {
        bool hz = s.z[i] > 0.0, hzt = s.z_tilde[i] > 0.0;
        if (hz != (s.b[i] > 0.5) || hzt != (s.b[i] > 0.5))
          throw ContractError("corrupt relaxed sample: H(z) != b");
      }
      tape_.set_value(z_leaf_, s.z);
      tape_.set_value(zt_leaf_, s.z_tilde);
      tape_.recompute();
    }
    double f = f_(s.b);
    Vec score = bernoulli_score(dist_, s.b);
    switch (kind_) {
      case EstimatorKind::kReinforce:
        return reinforce(f, score);
      case EstimatorKind::kDlax: {
        Vec score_z = bernoulli_relaxed_score(dist_, s.z);
        // dz/dl is the identity for the logistic reparameterization
        return dlax(f, score, score_z, at_z_.c, at_z_.dc_dz,
                    diag_jacobian(Vec(dist_.dim(), 1.0)));
      }
      case EstimatorKind::kRelax:
      case EstimatorKind::kRebar: {
        Vec jt = bernoulli_conditional_jacobian_diag(dist_, s.b, s.v);
        return relax_estimate(f, score, at_zt_.c, at_z_.dc_dz,
                              diag_jacobian(Vec(dist_.dim(), 1.0)),
                              at_zt_.dc_dz, diag_jacobian(jt));
      }
      default:
        throw ContractError("BernoulliSession: estimator needs a discrete "
                            "distribution configuration");
    }
  }

private:
  BernoulliVector dist_;
  ObjectiveFn f_;
  EstimatorKind kind_;
  Tape tape_;
  Node z_leaf_, zt_leaf_;
  SurrogateVariant surrogate_;
  detail::BoundSurrogate at_z_, at_zt_;
};

/// Session for expectations over one categorical variable.
class CategoricalSession {
public:
  using ObjectiveFn = std::function<double(std::size_t b)>;

  CategoricalSession(CategoricalDist dist, ObjectiveFn f, EstimatorKind kind)
      : dist_(std::move(dist)), f_(std::move(f)), kind_(kind) {
    z_leaf_ = tape_.input(Vec(dist_.k(), 0.0));
    zt_leaf_ = tape_.input(Vec(dist_.k(), 0.0));
  }

  Tape& tape() { return tape_; }
  CategoricalDist& dist() { return dist_; }

  template <class S, class... Args>
  S& make_surrogate(Args&&... args) {
    surrogate_.emplace<S>(tape_, std::forward<Args>(args)...);
    at_z_ = detail::BoundSurrogate::bind(surrogate_, z_leaf_);
    at_zt_ = detail::BoundSurrogate::bind(surrogate_, zt_leaf_);
    return std::get<S>(surrogate_);
  }

  std::vector<Node> phi_nodes() const {
    return detail::phi_nodes_of(surrogate_);
  }
  double weight_decay() const {
    return detail::surrogate_weight_decay(surrogate_);
  }

  GradEstimate estimate(RngStream& rng) {
    RelaxedSample s = draw_relaxed(dist_, rng);
    return estimate_from(s);
  }

  GradEstimate estimate_from(const RelaxedSample& s) {
    std::size_t b = static_cast<std::size_t>(s.b[0]);
    if (kind_ != EstimatorKind::kReinforce) {
      if (!at_z_.c.valid())
        throw ContractError("CategoricalSession: surrogate not installed");
      if (hard_argmax(s.z) != b || hard_argmax(s.z_tilde) != b)
        throw ContractError("corrupt relaxed sample: H(z) != b");
      tape_.set_value(z_leaf_, s.z);
      tape_.set_value(zt_leaf_, s.z_tilde);
      tape_.recompute();
    }
    double f = f_(b);
    Vec score = categorical_score(dist_, b);
    switch (kind_) {
      case EstimatorKind::kReinforce:
        return reinforce(f, score);
      case EstimatorKind::kDlax: {
        Vec score_z = categorical_relaxed_score(dist_, s.z);
        return dlax(f, score, score_z, at_z_.c, at_z_.dc_dz,
                    jacobian_rowmajor(categorical_relaxed_jacobian(dist_)));
      }
      case EstimatorKind::kRelax:
      case EstimatorKind::kRebar: {
        auto jt = categorical_conditional_jacobian(dist_, b, s.v);
        return relax_estimate(
            f, score, at_zt_.c, at_z_.dc_dz,
            jacobian_rowmajor(categorical_relaxed_jacobian(dist_)),
            at_zt_.dc_dz, jacobian_rowmajor(jt));
      }
      default:
        throw ContractError("CategoricalSession: estimator needs a discrete "
                            "distribution configuration");
    }
  }

private:
  // rows[i][j] = d z_i / d l_j; wanted [l_i, z_j] row-major.
  static Jacobian jacobian_rowmajor(const std::vector<Vec>& rows) {
    std::size_t k = rows.size();
    Jacobian out(k * k);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) out[j * k + i] = rows[i][j];
    return out;
  }

  CategoricalDist dist_;
  ObjectiveFn f_;
  EstimatorKind kind_;
  Tape tape_;
  Node z_leaf_, zt_leaf_;
  SurrogateVariant surrogate_;
  detail::BoundSurrogate at_z_, at_zt_;
};

/// Session for a diagonal-Gaussian sample: reparameterization and LAX.
/// theta = (mean, log_std) concatenated.
class GaussianSession {
public:
  using ObjectiveFn = std::function<double(const Vec& a)>;

  GaussianSession(DiagonalGaussian dist, ObjectiveFn f, EstimatorKind kind)
      : dist_(std::move(dist)), f_(std::move(f)), kind_(kind) {
    a_leaf_ = tape_.input(Vec(dist_.mean.size(), 0.0));
  }

  Tape& tape() { return tape_; }
  DiagonalGaussian& dist() { return dist_; }

  template <class S, class... Args>
  S& make_surrogate(Args&&... args) {
    surrogate_.emplace<S>(tape_, std::forward<Args>(args)...);
    at_a_ = detail::BoundSurrogate::bind(surrogate_, a_leaf_);
    return std::get<S>(surrogate_);
  }

  std::vector<Node> phi_nodes() const {
    return detail::phi_nodes_of(surrogate_);
  }

  struct Draw {
    Vec eps;
    Vec a;
  };

  Draw draw(RngStream& rng) const {
    std::size_t n = dist_.mean.size();
    Draw d;
    d.eps.resize(n);
    d.a.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      d.eps[i] = rng.normal();
      d.a[i] = dist_.mean[i] + std::exp(dist_.log_std[i]) * d.eps[i];
    }
    return d;
  }

  GradEstimate estimate(RngStream& rng) { return estimate_from(draw(rng)); }

  GradEstimate estimate_from(const Draw& d) {
    std::size_t n = dist_.mean.size();
    Vec score = gaussian_score(dist_, d.a);
    // d a_j / d theta: identity block for the means, diag(std*eps) for the
    // log-stds.
    Jacobian da(2 * n * n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      da[j * n + j] = 1.0;
      da[(n + j) * n + j] = std::exp(dist_.log_std[j]) * d.eps[j];
    }
    switch (kind_) {
      case EstimatorKind::kReinforce:
        return reinforce(f_(d.a), score);
      case EstimatorKind::kLax: {
        if (!at_a_.c.valid())
          throw ContractError("GaussianSession: surrogate not installed");
        tape_.set_value(a_leaf_, d.a);
        tape_.recompute();
        return lax(f_(d.a), score, at_a_.c, at_a_.dc_dz, da);
      }
      case EstimatorKind::kReparam: {
        if (!at_a_.c.valid())
          throw ContractError(
              "GaussianSession: reparam needs f installed as the surrogate");
        tape_.set_value(a_leaf_, d.a);
        tape_.recompute();
        return reparam(at_a_.c, at_a_.dc_dz, da);
      }
      default:
        throw ContractError("GaussianSession: unsupported estimator");
    }
  }

private:
  DiagonalGaussian dist_;
  ObjectiveFn f_;
  EstimatorKind kind_;
  Tape tape_;
  Node a_leaf_;
  SurrogateVariant surrogate_;
  detail::BoundSurrogate at_a_;
};

}  // namespace relax
