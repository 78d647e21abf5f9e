#pragma once

// Policy-gradient estimators for episodic MDPs: A2C, LAX-RL (continuous
// Gaussian policies), and RELAX-RL (discrete policies), plus a CartPole
// simulator, a one-dimensional continuous bandit, rollouts, discounted
// returns, the entropy bonus, and the gradient-variance probe.
//
// Estimator gradients are ascent directions on expected (discounted)
// return; the training loop negates them for the minimizing optimizers.

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "relax/estimators.hpp"
#include "relax/optim.hpp"

namespace relax {

// ---------------------------------------------------------------------------
// Environments
// ---------------------------------------------------------------------------

struct EnvStep {
  Vec state;
  double reward;
  bool done;
};

/// Classic cart-pole balancing task, Euler-integrated with the
/// community-standard constants: gravity 9.8, cart mass 1.0, pole mass 0.1,
/// pole half-length 0.5, force magnitude 10, dt 0.02. Reward 1 per step;
/// failure when |x| > 2.4 or |angle| > 12 degrees; episodes cap at 500.
class CartPole {
public:
  static constexpr std::size_t kStateDim = 4;
  static constexpr int kActions = 2;
  static constexpr int kMaxSteps = 500;

  Vec reset(RngStream& rng) const {
    Vec s(4);
    for (double& v : s) v = 0.1 * rng.uniform() - 0.05;
    return s;
  }

  EnvStep step(const Vec& s, int action) const {
    if (action != 0 && action != 1)
      throw ContractError("CartPole: action must be 0 or 1");
    constexpr double g = 9.8, mc = 1.0, mp = 0.1, half_len = 0.5;
    constexpr double force_mag = 10.0, dt = 0.02;
    constexpr double total_mass = mc + mp, pml = mp * half_len;
    double x = s[0], xd = s[1], th = s[2], thd = s[3];
    double force = action == 1 ? force_mag : -force_mag;
    double costh = std::cos(th), sinth = std::sin(th);
    double temp = (force + pml * thd * thd * sinth) / total_mass;
    double thacc = (g * sinth - costh * temp) /
                   (half_len * (4.0 / 3.0 - mp * costh * costh / total_mass));
    double xacc = temp - pml * thacc * costh / total_mass;
    EnvStep out;
    out.state = {x + dt * xd, xd + dt * xacc, th + dt * thd, thd + dt * thacc};
    out.reward = 1.0;
    double angle_limit = 12.0 * M_PI / 180.0;
    out.done = std::abs(out.state[0]) > 2.4 ||
               std::abs(out.state[2]) > angle_limit;
    return out;
  }
};

/// One-step continuous bandit: a single real action a, reward -(a-3)^2.
class ContinuousBandit {
public:
  static constexpr std::size_t kStateDim = 1;
  static constexpr int kMaxSteps = 1;

  Vec reset(RngStream&) const { return {0.0}; }

  EnvStep step(const Vec&, double action) const {
    return {{0.0}, -(action - 3.0) * (action - 3.0), true};
  }
};

// ---------------------------------------------------------------------------
// Policies
// ---------------------------------------------------------------------------

/// Softmax policy: an MLP from state to action logits, bound to its own
/// tape so per-step scores and logit Jacobians are seeded backward passes.
class DiscretePolicy {
public:
  DiscretePolicy(MlpSpec spec, RngStream& rng) : spec_(std::move(spec)) {
    k_ = spec_.sizes.back();
    s_in_ = tape_.input(Vec(spec_.sizes.front(), 0.0));
    params_ = tape_.param(mlp_init_params(spec_, rng), "policy");
    logits_ = mlp_forward(spec_, params_, s_in_);
  }

  std::size_t k() const { return k_; }
  std::size_t state_dim() const { return spec_.sizes.front(); }
  std::size_t param_count() const { return spec_.param_count(); }
  Tape& tape() { return tape_; }
  Node params() const { return params_; }

  Vec param_values() const { return tape_.value(params_); }
  void set_params(const Vec& p) {
    tape_.set_value(params_, p);
    tape_.recompute();
  }

  Vec logits(const Vec& s) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    return logits_.value();
  }

  Vec probs(const Vec& s) {
    CategoricalDist d{logits(s)};
    return d.probs();
  }

  /// d(seed . logits)/d params at state s.
  Vec backward_logits(const Vec& s, const Vec& seed) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    tape_.zero_adjoints();
    tape_.add_adjoint(logits_, seed);
    tape_.run_backward();
    return tape_.grad(params_);
  }

  /// rows[i] = d logits_i / d params (k rows of length P).
  std::vector<Vec> logits_jacobian(const Vec& s) {
    std::vector<Vec> rows;
    rows.reserve(k_);
    for (std::size_t i = 0; i < k_; ++i) {
      Vec seed(k_, 0.0);
      seed[i] = 1.0;
      rows.push_back(backward_logits(s, seed));
    }
    return rows;
  }

private:
  MlpSpec spec_;
  std::size_t k_;
  Tape tape_;
  Node s_in_, params_, logits_;
};

/// Gaussian policy with an MLP mean and a single global log-std.
/// Parameter layout: [mean-net params..., log_std].
class GaussianPolicy {
public:
  GaussianPolicy(MlpSpec mean_spec, double log_std0, RngStream& rng)
      : spec_(std::move(mean_spec)) {
    if (spec_.sizes.back() != 1)
      throw ContractError("GaussianPolicy: scalar action only");
    s_in_ = tape_.input(Vec(spec_.sizes.front(), 0.0));
    params_ = tape_.param(mlp_init_params(spec_, rng), "policy_mean");
    log_std_ = tape_.param({log_std0}, "policy_log_std");
    mean_ = mlp_forward(spec_, params_, s_in_);
  }

  std::size_t state_dim() const { return spec_.sizes.front(); }
  std::size_t param_count() const { return spec_.param_count() + 1; }
  Tape& tape() { return tape_; }

  Vec param_values() const {
    Vec p = tape_.value(params_);
    p.push_back(tape_.value(log_std_)[0]);
    return p;
  }
  void set_params(const Vec& p) {
    Vec mean_p(p.begin(), p.end() - 1);
    tape_.set_value(params_, mean_p);
    tape_.set_value(log_std_, p.back());
    tape_.recompute();
  }

  double mean(const Vec& s) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    return mean_.scalar();
  }
  double log_std() const { return tape_.value(log_std_)[0]; }
  double std_dev() const { return std::exp(log_std()); }

  /// d mean / d mean-net params at s, with 0 appended for log_std.
  Vec mean_grad(const Vec& s) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    tape_.zero_adjoints();
    tape_.add_adjoint(mean_, Vec{1.0});
    tape_.run_backward();
    Vec g = tape_.grad(params_);
    g.push_back(0.0);
    return g;
  }

private:
  MlpSpec spec_;
  Tape tape_;
  Node s_in_, params_, log_std_, mean_;
};

// ---------------------------------------------------------------------------
// Trajectories
// ---------------------------------------------------------------------------

struct TrajStep {
  Vec state;
  int action = -1;          // discrete action
  double cont_action = 0.0; // continuous action
  double eps = 0.0;         // continuous reparameterization noise
  double reward = 0.0;
  double log_pi = 0.0;
  Vec z, z_tilde, v;        // discrete relaxed pair and conditional noise
};

struct Trajectory {
  std::vector<TrajStep> steps;
  bool discrete = true;

  double total_reward() const {
    double r = 0.0;
    for (const TrajStep& s : steps) r += s.reward;
    return r;
  }
};

/// G_t = sum_{t' >= t} gamma^{t'-t} r_{t'}.
inline Vec discounted_returns(const Vec& rewards, double gamma) {
  if (!(gamma > 0.0 && gamma <= 1.0))
    throw ContractError("discounted_returns: gamma must be in (0, 1]");
  Vec g(rewards.size());
  double acc = 0.0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc = rewards[i] + gamma * acc;
    g[i] = acc;
  }
  return g;
}

/// Rolls one episode of a discrete-action environment, storing the relaxed
/// pair (z, z_tilde) for every step.
template <class Env>
Trajectory rollout(const Env& env, DiscretePolicy& policy, RngStream& rng) {
  Trajectory traj;
  traj.discrete = true;
  Vec s = env.reset(rng);
  for (int t = 0; t < Env::kMaxSteps; ++t) {
    CategoricalDist dist{policy.logits(s)};
    RelaxedSample sample = draw_relaxed(dist, rng);
    TrajStep step;
    step.state = s;
    step.action = static_cast<int>(sample.b[0]);
    step.z = sample.z;
    step.z_tilde = sample.z_tilde;
    step.v = sample.v;
    double lse = dist.logits[0];
    for (double l : dist.logits) lse = std::max(lse, l);
    double acc = 0.0;
    for (double l : dist.logits) acc += std::exp(l - lse);
    step.log_pi = dist.logits[step.action] - (lse + std::log(acc));
    EnvStep out = env.step(s, step.action);
    step.reward = out.reward;
    traj.steps.push_back(std::move(step));
    if (out.done) break;
    s = out.state;
  }
  return traj;
}

/// Rolls one episode of a continuous-action environment.
template <class Env>
Trajectory rollout(const Env& env, GaussianPolicy& policy, RngStream& rng) {
  Trajectory traj;
  traj.discrete = false;
  Vec s = env.reset(rng);
  for (int t = 0; t < Env::kMaxSteps; ++t) {
    double mu = policy.mean(s), sigma = policy.std_dev();
    TrajStep step;
    step.state = s;
    step.eps = rng.normal();
    step.cont_action = mu + sigma * step.eps;
    step.log_pi = -0.5 * step.eps * step.eps - policy.log_std() -
                  0.5 * std::log(2.0 * M_PI);
    EnvStep out = env.step(s, step.cont_action);
    step.reward = out.reward;
    traj.steps.push_back(std::move(step));
    if (out.done) break;
    s = out.state;
  }
  return traj;
}

// ---------------------------------------------------------------------------
// Critics and surrogates
// ---------------------------------------------------------------------------

/// State-value MLP for A2C.
class ValueNet {
public:
  ValueNet(MlpSpec spec, RngStream& rng) : spec_(std::move(spec)) {
    s_in_ = tape_.input(Vec(spec_.sizes.front(), 0.0));
    params_ = tape_.param(mlp_init_params(spec_, rng), "value");
    v_ = mlp_forward(spec_, params_, s_in_);
  }

  std::size_t param_count() const { return spec_.param_count(); }
  Vec param_values() const { return tape_.value(params_); }
  void set_params(const Vec& p) {
    tape_.set_value(params_, p);
    tape_.recompute();
  }

  double value(const Vec& s) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    return v_.scalar();
  }

  Vec value_grad(const Vec& s) {
    tape_.set_value(s_in_, s);
    tape_.recompute();
    tape_.zero_adjoints();
    tape_.add_adjoint(v_, Vec{1.0});
    tape_.run_backward();
    return tape_.grad(params_);
  }

private:
  MlpSpec spec_;
  Tape tape_;
  Node s_in_, params_, v_;
};

/// Action-dependent surrogate c_phi(u, s) where u is the relaxed sample
/// (discrete: z of length k) or the raw action (continuous: length 1). The
/// input is the concatenation (u, s). With the additive flag the form is
/// V_psi(s) + c_hat(u, s): a state-value head plus an action-dependent
/// correction, which trains faster than a monolithic joint net.
class RlSurrogate {
public:
  RlSurrogate(std::size_t action_dim, std::size_t state_dim,
              std::size_t hidden, RngStream& rng, bool additive = false)
      : action_dim_(action_dim), state_dim_(state_dim) {
    std::size_t in = action_dim + state_dim;
    us_in_ = tape_.input(Vec(in, 0.0));
    MlpSpec joint{{in, hidden, hidden, 1}, Act::kRelu};
    joint_params_ = tape_.param(mlp_init_params(joint, rng), "phi_joint");
    Node c = mlp_forward(joint, joint_params_, us_in_);
    if (additive) {
      MlpSpec vs{{state_dim, hidden, 1}, Act::kRelu};
      state_params_ = tape_.param(mlp_init_params(vs, rng), "phi_state");
      c = add(c, mlp_forward(vs, state_params_,
                             slice(us_in_, action_dim, state_dim)));
    }
    c_ = c;
    dc_ = gradient_node(c_, us_in_);
  }

  std::size_t action_dim() const { return action_dim_; }

  std::vector<Node> phi_nodes() const {
    std::vector<Node> out = {joint_params_};
    if (state_params_.valid()) out.push_back(state_params_);
    return out;
  }

  std::vector<Vec> phi_values() const {
    std::vector<Vec> out;
    for (Node p : phi_nodes()) out.push_back(tape_.value(p));
    return out;
  }
  void set_phi_values(const std::vector<Vec>& vs) {
    std::vector<Node> ps = phi_nodes();
    for (std::size_t i = 0; i < ps.size(); ++i) tape_.set_value(ps[i], vs[i]);
    tape_.recompute();
  }

  struct Eval {
    double c;
    Vec dc_du;  // gradient of c in the action part of the input
  };

  Eval eval(const Vec& u, const Vec& s) {
    set_input(u, s);
    const Vec& dc = dc_.value();
    return {c_.scalar(), Vec(dc.begin(), dc.begin() + action_dim_)};
  }

  /// Seeded phi backward at input (u, s): accumulates into `into` the
  /// adjoints of d(c_seed * c + dc_seed . dc)/d phi.
  void accumulate_phi(const Vec& u, const Vec& s, double c_seed,
                      const Vec& dc_seed, std::vector<Vec>& into) {
    set_input(u, s);
    tape_.zero_adjoints();
    if (c_seed != 0.0) tape_.add_adjoint(c_, Vec{c_seed});
    if (!dc_seed.empty()) {
      Vec full(action_dim_ + state_dim_, 0.0);
      std::copy(dc_seed.begin(), dc_seed.end(), full.begin());
      tape_.add_adjoint(dc_, full);
    }
    tape_.run_backward();
    std::vector<Node> ps = phi_nodes();
    for (std::size_t i = 0; i < ps.size(); ++i) {
      const Vec& a = tape_.adjoint(ps[i]);
      for (std::size_t j = 0; j < a.size(); ++j) into[i][j] += a[j];
    }
  }

private:
  void set_input(const Vec& u, const Vec& s) {
    Vec us(action_dim_ + state_dim_);
    std::copy(u.begin(), u.end(), us.begin());
    std::copy(s.begin(), s.end(), us.begin() + action_dim_);
    tape_.set_value(us_in_, us);
    tape_.recompute();
  }

  std::size_t action_dim_, state_dim_;
  Tape tape_;
  Node us_in_, joint_params_, state_params_, c_, dc_;
};

// ---------------------------------------------------------------------------
// Gradient estimators
// ---------------------------------------------------------------------------

struct RlGrad {
  Vec policy;             // ascent direction on expected return (+ entropy)
  Vec value;              // descent direction for the value-net regression
  std::vector<Vec> phi;   // d g^2 / d phi for the surrogate update
  double g_sq = 0.0;
};

namespace detail {

/// d H(pi) / d logits for a softmax head: -pi_j (log pi_j + H).
inline Vec entropy_logit_seed(const Vec& logits) {
  CategoricalDist d{logits};
  Vec p = d.probs(), seed(p.size());
  double h = 0.0;
  for (double pi : p) h -= pi * std::log(std::max(pi, 1e-300));
  for (std::size_t j = 0; j < p.size(); ++j)
    seed[j] = -p[j] * (std::log(std::max(p[j], 1e-300)) + h);
  return seed;
}

}  // namespace detail

/// A2C: sum_t d log pi(a_t|s_t)/d theta * [G_t - V(s_t)] plus the exact
/// entropy-bonus gradient. Also returns the value-net regression gradient
/// on sum_t (V(s_t) - G_t)^2 / T.
inline RlGrad a2c_grad(const Trajectory& traj, DiscretePolicy& policy,
                       ValueNet& value, double gamma,
                       double entropy_weight = 0.0) {
  RlGrad out;
  out.policy.assign(policy.param_count(), 0.0);
  out.value.assign(value.param_count(), 0.0);
  if (traj.steps.empty()) return out;
  Vec rewards;
  for (const TrajStep& s : traj.steps) rewards.push_back(s.reward);
  Vec g = discounted_returns(rewards, gamma);
  double inv_t = 1.0 / static_cast<double>(traj.steps.size());
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const TrajStep& st = traj.steps[t];
    Vec logits = policy.logits(st.state);
    CategoricalDist d{logits};
    Vec seed = categorical_score(d, static_cast<std::size_t>(st.action));
    double adv = g[t] - value.value(st.state);
    for (double& v : seed) v *= adv;
    if (entropy_weight > 0.0) {
      Vec hs = detail::entropy_logit_seed(logits);
      for (std::size_t j = 0; j < seed.size(); ++j)
        seed[j] += entropy_weight * hs[j];
    }
    Vec pg = policy.backward_logits(st.state, seed);
    for (std::size_t i = 0; i < pg.size(); ++i) out.policy[i] += pg[i];

    double err = value.value(st.state) - g[t];
    Vec vg = value.value_grad(st.state);
    for (std::size_t i = 0; i < vg.size(); ++i)
      out.value[i] += 2.0 * err * vg[i] * inv_t;
  }
  for (double gi : out.policy) out.g_sq += gi * gi;
  return out;
}

/// LAX for MDPs with a Gaussian policy:
/// sum_t d log pi/d theta [G_t - c(a_t,s_t)] + d c(a(eps_t,s_t,theta),s_t)/d theta.
inline RlGrad lax_rl_grad(const Trajectory& traj, GaussianPolicy& policy,
                          RlSurrogate& surrogate, double gamma,
                          double entropy_weight = 0.0) {
  if (traj.discrete)
    throw ContractError("lax_rl_grad: discrete trajectory (use relax_rl_grad)");
  RlGrad out;
  std::size_t P = policy.param_count();
  out.policy.assign(P, 0.0);
  for (Node p : surrogate.phi_nodes()) out.phi.emplace_back(p.size(), 0.0);
  if (traj.steps.empty()) return out;

  Vec rewards;
  for (const TrajStep& s : traj.steps) rewards.push_back(s.reward);
  Vec g_t = discounted_returns(rewards, gamma);
  double sigma = policy.std_dev();

  struct Cached {
    Vec score;   // d log pi / d theta
    Vec da;      // d a / d theta
    Vec dc_du;   // surrogate action gradient value
  };
  std::vector<Cached> cache(traj.steps.size());

  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const TrajStep& st = traj.steps[t];
    Vec dmu = policy.mean_grad(st.state);  // log_std slot already zero
    double mu = policy.mean(st.state);
    Cached c;
    c.da = dmu;
    c.da[P - 1] = sigma * st.eps;
    c.score = dmu;
    // Same arithmetic as gaussian_score so the T=1 reduction to single-
    // sample LAX is exact.
    double w = (st.cont_action - mu) / sigma;
    double dlog_dmu = w / sigma;
    for (double& v : c.score) v *= dlog_dmu;
    c.score[P - 1] = w * w - 1.0;

    RlSurrogate::Eval ev = surrogate.eval({st.cont_action}, st.state);
    c.dc_du = ev.dc_du;
    for (std::size_t i = 0; i < P; ++i)
      out.policy[i] += c.score[i] * g_t[t] + (-c.score[i]) * ev.c +
                       c.da[i] * ev.dc_du[0];
    cache[t] = std::move(c);
  }
  if (entropy_weight > 0.0) {
    // Gaussian entropy 0.5 log(2 pi e sigma^2): gradient 1 per step in
    // log_std.
    out.policy[P - 1] +=
        entropy_weight * static_cast<double>(traj.steps.size());
  }
  for (double gi : out.policy) out.g_sq += gi * gi;

  // d g^2 / d phi, replayed per step with the estimate held fixed.
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const TrajStep& st = traj.steps[t];
    const Cached& c = cache[t];
    double c_seed = 0.0, dc_seed = 0.0;
    for (std::size_t i = 0; i < P; ++i) {
      c_seed += -2.0 * out.policy[i] * c.score[i];
      dc_seed += 2.0 * out.policy[i] * c.da[i];
    }
    surrogate.accumulate_phi({st.cont_action}, st.state, c_seed, {dc_seed},
                             out.phi);
  }
  return out;
}

/// RELAX for MDPs with a discrete policy:
/// sum_t d log pi/d theta [G_t - c(z~_t,s_t)]
///       + d c(z_t,s_t)/d theta - d c(z~_t,s_t)/d theta.
inline RlGrad relax_rl_grad(const Trajectory& traj, DiscretePolicy& policy,
                            RlSurrogate& surrogate, double gamma,
                            double entropy_weight = 0.0) {
  if (!traj.discrete || (!traj.steps.empty() && traj.steps[0].z.empty()))
    throw ContractError("relax_rl_grad: trajectory lacks relaxed samples");
  RlGrad out;
  std::size_t P = policy.param_count(), k = policy.k();
  out.policy.assign(P, 0.0);
  for (Node p : surrogate.phi_nodes()) out.phi.emplace_back(p.size(), 0.0);
  if (traj.steps.empty()) return out;

  Vec rewards;
  for (const TrajStep& s : traj.steps) rewards.push_back(s.reward);
  Vec g_t = discounted_returns(rewards, gamma);

  struct Cached {
    Vec score;                 // d log pi / d theta (length P)
    std::vector<Vec> jl;       // d logits_i / d theta (k rows)
    std::vector<Vec> jzt_rows; // d z~_i / d logits_j (k rows)
  };
  std::vector<Cached> cache(traj.steps.size());

  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const TrajStep& st = traj.steps[t];
    Vec logits = policy.logits(st.state);
    CategoricalDist d{logits};
    auto b = static_cast<std::size_t>(st.action);
    Cached c;
    c.jl = policy.logits_jacobian(st.state);
    c.score = policy.backward_logits(st.state, categorical_score(d, b));
    c.jzt_rows = categorical_conditional_jacobian(d, b, st.v);
    std::vector<Vec> jz_rows = categorical_relaxed_jacobian(d);

    RlSurrogate::Eval ez = surrogate.eval(st.z, st.state);
    RlSurrogate::Eval ezt = surrogate.eval(st.z_tilde, st.state);

    double coeff = g_t[t] - ezt.c;
    // dc/dtheta = sum_i dc/dz_i * sum_j dz_i/dl_j * dl_j/dtheta
    Vec dcz_dl(k, 0.0), dczt_dl(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        dcz_dl[j] += ez.dc_du[i] * jz_rows[i][j];
        dczt_dl[j] += ezt.dc_du[i] * c.jzt_rows[i][j];
      }
    for (std::size_t p = 0; p < P; ++p) {
      double acc = c.score[p] * coeff;
      for (std::size_t j = 0; j < k; ++j)
        acc += (dcz_dl[j] - dczt_dl[j]) * c.jl[j][p];
      out.policy[p] += acc;
    }
    if (entropy_weight > 0.0) {
      Vec hg = policy.backward_logits(st.state,
                                      detail::entropy_logit_seed(logits));
      for (std::size_t p = 0; p < P; ++p)
        out.policy[p] += entropy_weight * hg[p];
    }
    cache[t] = std::move(c);
  }
  for (double gi : out.policy) out.g_sq += gi * gi;

  // d g^2 / d phi: for every step, seed the surrogate outputs with the
  // coefficients each node carries in the (fixed) estimate.
  for (std::size_t t = 0; t < traj.steps.size(); ++t) {
    const TrajStep& st = traj.steps[t];
    const Cached& c = cache[t];
    // ghat . J_l rows: u_j = 2 sum_p g_p d l_j / d theta_p
    Vec u(k, 0.0);
    for (std::size_t j = 0; j < k; ++j)
      for (std::size_t p = 0; p < P; ++p)
        u[j] += 2.0 * out.policy[p] * c.jl[j][p];
    // z path: dc(z) enters with + J_l; seed_i = sum_j u_j dz_i/dl_j
    std::vector<Vec> jz_rows =
        categorical_relaxed_jacobian(CategoricalDist{policy.logits(st.state)});
    Vec seed_z(k, 0.0), seed_zt(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t j = 0; j < k; ++j) {
        seed_z[i] += u[j] * jz_rows[i][j];
        seed_zt[i] -= u[j] * c.jzt_rows[i][j];
      }
    surrogate.accumulate_phi(st.z, st.state, 0.0, seed_z, out.phi);
    double c_seed = 0.0;
    for (std::size_t p = 0; p < P; ++p)
      c_seed += -2.0 * out.policy[p] * c.score[p];
    surrogate.accumulate_phi(st.z_tilde, st.state, c_seed, seed_zt, out.phi);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Variance probe and training
// ---------------------------------------------------------------------------

enum class RlEstimator { kA2c, kLaxRl, kRelaxRl };

inline RlEstimator rl_estimator_from_name(const std::string& name) {
  if (name == "a2c") return RlEstimator::kA2c;
  if (name == "lax") return RlEstimator::kLaxRl;
  if (name == "relax") return RlEstimator::kRelaxRl;
  throw ConfigError("unknown rl estimator '" + name +
                    "' (valid: a2c, lax, relax)");
}

/// Mean over parameters of log(sample variance of the per-episode policy
/// gradient), floored at exp(-30). Entropy bonus excluded; the policy is
/// frozen and the probe consumes its own RNG stream.
inline double probe_log_variance(const std::vector<Vec>& grads) {
  if (grads.size() < 2) throw ContractError("variance probe needs n >= 2");
  std::size_t P = grads.front().size(), n = grads.size();
  double acc = 0.0;
  for (std::size_t i = 0; i < P; ++i) {
    double m = 0.0;
    for (const Vec& g : grads) m += g[i];
    m /= static_cast<double>(n);
    double ss = 0.0;
    for (const Vec& g : grads) ss += (g[i] - m) * (g[i] - m);
    double var = ss / static_cast<double>(n - 1);
    acc += std::log(std::max(var, std::exp(-30.0)));
  }
  return acc / static_cast<double>(P);
}

struct RlConfig {
  RlEstimator kind = RlEstimator::kRelaxRl;
  std::string env = "cartpole";
  double gamma = 0.99;
  double entropy = 0.01;
  double lr = 0.003;
  double cv_lr_scale = 1.0;
  long episodes = 2000;
  int probe_every = 10;
  int probe_episodes = 100;
  std::uint64_t seed = 0;
  std::size_t hidden = 10;
  std::size_t surrogate_hidden = 10;
  bool additive_critic = false;
  OptKind opt = OptKind::kRmsProp;
  double solve_threshold = 195.0;
  int solve_window = 100;
  bool stop_on_solve = true;
};

struct RlTraceRow {
  long episode;
  double reward;
  int solved;
};

struct RlProbeRow {
  long episode;
  double mean_log_variance;
};

struct RlResult {
  std::vector<RlTraceRow> trace;
  std::vector<RlProbeRow> probes;
  long solved_episode = -1;
};

/// Discrete-environment training loop (CartPole): A2C or RELAX-RL, one
/// episode per update, RMSProp, periodic variance probes on a dedicated
/// stream.
template <class Env>
RlResult train_rl_discrete(const Env& env, const RlConfig& cfg) {
  if (cfg.kind == RlEstimator::kLaxRl)
    throw ConfigError("rl: lax estimator needs a continuous environment");
  if (cfg.gamma <= 0.0 || cfg.gamma > 1.0)
    throw ConfigError("rl: gamma must be in (0, 1]");
  if (cfg.entropy < 0.0) throw ConfigError("rl: entropy weight must be >= 0");

  RngStream init(cfg.seed, "init");
  MlpSpec pspec{{Env::kStateDim, cfg.hidden, cfg.hidden, Env::kActions},
                Act::kRelu};
  DiscretePolicy policy(pspec, init);
  ValueNet value(MlpSpec{{Env::kStateDim, cfg.hidden, cfg.hidden, 1},
                         Act::kRelu},
                 init);
  RlSurrogate surrogate(Env::kActions, Env::kStateDim, cfg.surrogate_hidden,
                        init, cfg.additive_critic);

  Optimizer popt(cfg.opt, cfg.lr), vopt(cfg.opt, cfg.lr);
  std::vector<Optimizer> phi_opts;
  for (std::size_t i = 0; i < surrogate.phi_nodes().size(); ++i)
    phi_opts.emplace_back(cfg.opt, cfg.lr * cfg.cv_lr_scale);

  RngStream rng(cfg.seed, "train");
  RlResult res;
  std::vector<double> recent;

  auto probe = [&](long episode) {
    RngStream prng(cfg.seed + static_cast<std::uint64_t>(episode), "probe");
    std::vector<Vec> grads;
    for (int e = 0; e < cfg.probe_episodes; ++e) {
      Trajectory tr = rollout(env, policy, prng);
      RlGrad g = cfg.kind == RlEstimator::kA2c
                     ? a2c_grad(tr, policy, value, cfg.gamma, 0.0)
                     : relax_rl_grad(tr, policy, surrogate, cfg.gamma, 0.0);
      grads.push_back(std::move(g.policy));
    }
    res.probes.push_back({episode, probe_log_variance(grads)});
  };

  for (long ep = 0; ep < cfg.episodes; ++ep) {
    Trajectory traj = rollout(env, policy, rng);
    RlGrad g = cfg.kind == RlEstimator::kA2c
                   ? a2c_grad(traj, policy, value, cfg.gamma, cfg.entropy)
                   : relax_rl_grad(traj, policy, surrogate, cfg.gamma,
                                   cfg.entropy);

    Vec p = policy.param_values();
    Vec neg = g.policy;
    for (double& v : neg) v = -v;
    popt.step(p, neg);
    for (double v : p)
      if (!std::isfinite(v)) throw DivergenceError("rl: policy diverged", ep);
    policy.set_params(p);

    if (cfg.kind == RlEstimator::kA2c) {
      Vec vp = value.param_values();
      vopt.step(vp, g.value);
      value.set_params(vp);
    } else {
      std::vector<Vec> pv = surrogate.phi_values();
      for (std::size_t i = 0; i < pv.size(); ++i)
        phi_opts[i].step(pv[i], g.phi[i]);
      surrogate.set_phi_values(pv);
    }

    double reward = traj.total_reward();
    recent.push_back(reward);
    if (static_cast<int>(recent.size()) > cfg.solve_window)
      recent.erase(recent.begin());
    bool solved = false;
    if (static_cast<int>(recent.size()) == cfg.solve_window) {
      double avg = 0.0;
      for (double r : recent) avg += r;
      avg /= static_cast<double>(recent.size());
      solved = avg > cfg.solve_threshold;
    }
    if (solved && res.solved_episode < 0) res.solved_episode = ep;
    res.trace.push_back({ep, reward, solved ? 1 : 0});

    if (cfg.probe_every > 0 && ep % cfg.probe_every == 0) probe(ep);
    if (cfg.stop_on_solve && res.solved_episode >= 0) break;
  }
  return res;
}

/// Continuous bandit training loop: LAX-RL (or score-function A2C with a
/// state-value baseline).
inline RlResult train_rl_bandit(const RlConfig& cfg) {
  if (cfg.kind == RlEstimator::kRelaxRl)
    throw ConfigError("rl: relax estimator needs a discrete environment");
  ContinuousBandit env;
  RngStream init(cfg.seed, "init");
  GaussianPolicy policy(MlpSpec{{1, cfg.hidden, cfg.hidden, 1}, Act::kRelu},
                        0.0, init);
  ValueNet value(MlpSpec{{1, cfg.hidden, 1}, Act::kRelu}, init);
  RlSurrogate surrogate(1, 1, cfg.surrogate_hidden, init,
                        cfg.additive_critic);

  Optimizer popt(cfg.opt, cfg.lr), vopt(cfg.opt, cfg.lr);
  std::vector<Optimizer> phi_opts;
  for (std::size_t i = 0; i < surrogate.phi_nodes().size(); ++i)
    phi_opts.emplace_back(cfg.opt, cfg.lr * cfg.cv_lr_scale);

  RngStream rng(cfg.seed, "train");
  RlResult res;

  for (long ep = 0; ep < cfg.episodes; ++ep) {
    Trajectory traj = rollout(env, policy, rng);
    RlGrad g;
    if (cfg.kind == RlEstimator::kLaxRl) {
      g = lax_rl_grad(traj, policy, surrogate, cfg.gamma, cfg.entropy);
    } else {
      // score-function baseline estimator on the Gaussian policy
      const TrajStep& st = traj.steps[0];
      double adv = st.reward - value.value(st.state);
      double sigma = policy.std_dev();
      Vec dmu = policy.mean_grad(st.state);
      g.policy = dmu;
      for (double& v : g.policy) v *= (st.eps / sigma) * adv;
      g.policy[policy.param_count() - 1] = (st.eps * st.eps - 1.0) * adv;
      double err = value.value(st.state) - st.reward;
      g.value = value.value_grad(st.state);
      for (double& v : g.value) v *= 2.0 * err;
    }

    Vec p = policy.param_values();
    Vec neg = g.policy;
    for (double& v : neg) v = -v;
    popt.step(p, neg);
    for (double v : p)
      if (!std::isfinite(v)) throw DivergenceError("rl: policy diverged", ep);
    policy.set_params(p);

    if (cfg.kind == RlEstimator::kLaxRl) {
      std::vector<Vec> pv = surrogate.phi_values();
      for (std::size_t i = 0; i < pv.size(); ++i)
        phi_opts[i].step(pv[i], g.phi[i]);
      surrogate.set_phi_values(pv);
    } else {
      Vec vp = value.param_values();
      vopt.step(vp, g.value);
      value.set_params(vp);
    }
    res.trace.push_back({ep, traj.total_reward(), 0});
  }
  return res;
}

inline RlResult train_rl(const RlConfig& cfg) {
  if (cfg.env == "cartpole") return train_rl_discrete(CartPole{}, cfg);
  if (cfg.env == "bandit") return train_rl_bandit(cfg);
  throw ConfigError("unknown environment '" + cfg.env +
                    "' (valid: cartpole, bandit)");
}

}  // namespace relax
