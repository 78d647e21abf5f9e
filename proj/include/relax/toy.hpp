#pragma once

// The toy optimization problem: minimize E_{p(b|theta)}[(b - t)^2] over a
// single Bernoulli probability, with joint surrogate training. This is the
// sample -> estimate -> variance-gradient -> dual-update loop shared by all
// the single-variable drivers.

#include <cmath>
#include <deque>
#include <vector>

#include "relax/estimators.hpp"
#include "relax/optim.hpp"

namespace relax {

struct ToyConfig {
  EstimatorKind kind = EstimatorKind::kRelax;
  double target = 0.499;
  double lr = 0.01;          // alpha_1 (theta)
  double cv_lr_scale = 1.0;  // alpha_2 = scale * alpha_1 (phi)
  long iters = 5000;
  std::uint64_t seed = 0;
  double init_logit = 0.0;
  OptKind opt = OptKind::kAdam;
  std::size_t surrogate_hidden = 10;  // one tanh hidden layer
  double rebar_lambda0 = 0.5;
  int log_every = 1;
  std::size_t window = 500;  // sliding window for the log-variance probe
};

struct ToyTraceRow {
  long step;
  double loss_exact;
  double theta_prob;
  double grad;
  double grad_log_var;  // NaN until the window has filled
};

/// Exact loss by enumeration over b in {0, 1}.
inline double toy_exact_loss(double theta_prob, double target) {
  return theta_prob * (1.0 - target) * (1.0 - target) +
         (1.0 - theta_prob) * target * target;
}

/// Sliding-window per-coordinate sample variance, log-averaged over
/// coordinates. Floor at exp(-30) so deterministic estimators stay finite.
class GradVarianceWindow {
public:
  explicit GradVarianceWindow(std::size_t window) : window_(window) {}

  void push(const Vec& g) {
    buf_.push_back(g);
    if (buf_.size() > window_) buf_.pop_front();
  }

  bool full() const { return buf_.size() >= window_; }

  double log_variance() const {
    if (buf_.size() < 2) return std::nan("");
    std::size_t dim = buf_.front().size();
    double acc = 0.0;
    for (std::size_t i = 0; i < dim; ++i) {
      double m = 0.0;
      for (const Vec& g : buf_) m += g[i];
      m /= static_cast<double>(buf_.size());
      double ss = 0.0;
      for (const Vec& g : buf_) ss += (g[i] - m) * (g[i] - m);
      double var = ss / static_cast<double>(buf_.size() - 1);
      acc += std::log(std::max(var, std::exp(-30.0)));
    }
    return acc / static_cast<double>(dim);
  }

private:
  std::size_t window_;
  std::deque<Vec> buf_;
};

/// Algorithm loop: sample, estimate the theta gradient, estimate the
/// variance gradient for phi, and update both with their own step sizes.
inline std::vector<ToyTraceRow> run_lax_loop(const ToyConfig& cfg) {
  if (!(cfg.target > 0.0 && cfg.target < 1.0))
    throw ConfigError("toy: target must lie in (0,1)");
  if (cfg.lr <= 0.0) throw ConfigError("toy: lr must be positive");

  double t = cfg.target;
  BernoulliVector dist{{cfg.init_logit}};
  auto f = [t](const Vec& b) { return (b[0] - t) * (b[0] - t); };

  BernoulliSession session(dist, f, cfg.kind);
  RngStream init_rng(cfg.seed, "init");
  switch (cfg.kind) {
    case EstimatorKind::kReinforce:
      break;
    case EstimatorKind::kRebar: {
      auto relaxed_f = [t](Tape& tape, Node rb) {
        return sum(square(sub(rb, tape.constant(t))));
      };
      StructuredSurrogate::Options opt;
      opt.lambda0 = cfg.rebar_lambda0;
      opt.trainable_eta = true;
      session.make_surrogate<StructuredSurrogate>(relaxed_f, opt, init_rng);
      break;
    }
    case EstimatorKind::kRelax:
    case EstimatorKind::kDlax: {
      MlpSpec spec{{1, cfg.surrogate_hidden, 1}, Act::kTanh};
      session.make_surrogate<MlpSurrogate>(spec, init_rng);
      break;
    }
    default:
      throw ConfigError("toy: estimator must be discrete-capable");
  }

  Optimizer theta_opt(cfg.opt, cfg.lr);
  std::vector<Optimizer> phi_opts;
  std::vector<Node> phi = session.phi_nodes();
  for (std::size_t i = 0; i < phi.size(); ++i)
    phi_opts.emplace_back(cfg.opt, cfg.lr * cfg.cv_lr_scale);

  RngStream rng(cfg.seed, "train");
  GradVarianceWindow window(cfg.window);
  std::vector<ToyTraceRow> trace;
  trace.reserve(static_cast<std::size_t>(cfg.iters / std::max(cfg.log_every, 1)) + 1);

  for (long step = 0; step < cfg.iters; ++step) {
    GradEstimate est = session.estimate(rng);
    Vec g = est.gradient();
    window.push(g);

    if (!phi.empty()) {
      std::vector<Vec> pg = variance_grad(session.tape(), est, phi);
      for (std::size_t i = 0; i < phi.size(); ++i) {
        Vec pv = session.tape().value(phi[i]);
        phi_opts[i].step(pv, pg[i]);
        session.tape().set_value(phi[i], pv);
      }
    }

    theta_opt.step(session.dist().logits, g);
    double logit = session.dist().logits[0];
    if (!std::isfinite(logit) || std::abs(logit) > 1e6)
      throw DivergenceError("toy: theta diverged", step);

    if (step % std::max(cfg.log_every, 1) == 0) {
      double prob = detail::stable_sigmoid(logit);
      trace.push_back({step, toy_exact_loss(prob, t), prob, g[0],
                       window.log_variance()});
    }
  }
  return trace;
}

}  // namespace relax
