#pragma once

// One- and two-layer linear Bernoulli-latent variational autoencoders.
// Decoder and prior gradients are exact backward passes through the ELBO
// graph; encoder gradients use a discrete estimator (REINFORCE / RELAX /
// REBAR) on the latent logits plus the explicit direct-dependence
// correction, then chain to the encoder weights in closed form.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "relax/estimators.hpp"
#include "relax/toy.hpp"  // GradVarianceWindow

namespace relax {

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

struct BinaryDataset {
  std::size_t D = 0;
  std::vector<Vec> train;
  std::vector<Vec> valid;
};

inline void check_binary(const Vec& x) {
  for (double v : x)
    if (v != 0.0 && v != 1.0)
      throw ContractError("expected strictly binary vector");
}

/// One example per line, D space-separated {0,1} tokens. Every fifth line
/// goes to the validation split.
inline BinaryDataset load_binary_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open dataset file '" + path + "'");
  BinaryDataset ds;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    Vec x;
    double v;
    while (ss >> v) {
      if (v != 0.0 && v != 1.0)
        throw ConfigError("dataset '" + path + "': non-binary value");
    x.push_back(v);
    }
    if (ds.D == 0) ds.D = x.size();
    if (x.size() != ds.D)
      throw ConfigError("dataset '" + path + "': ragged row");
    (++row % 5 == 0 ? ds.valid : ds.train).push_back(std::move(x));
  }
  if (ds.train.empty()) throw ConfigError("dataset '" + path + "' is empty");
  return ds;
}

/// Synthetic structured binary data: a few random prototype patterns with
/// independent bit flips.
inline BinaryDataset make_synthetic_dataset(std::size_t n, std::size_t D,
                                            std::uint64_t seed,
                                            std::size_t prototypes = 5,
                                            double flip = 0.05) {
  RngStream rng(seed, "data");
  std::vector<Vec> protos(prototypes, Vec(D));
  for (auto& p : protos)
    for (double& v : p) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  BinaryDataset ds;
  ds.D = D;
  for (std::size_t i = 0; i < n; ++i) {
    Vec x = protos[static_cast<std::size_t>(rng.uniform() * prototypes) %
                   prototypes];
    for (double& v : x)
      if (rng.uniform() < flip) v = 1.0 - v;
    (i % 5 == 4 ? ds.valid : ds.train).push_back(std::move(x));
  }
  return ds;
}

/// Upper bound on the achievable mean train log-likelihood (and hence mean
/// ELBO): the empirical distribution is the best possible model, so the
/// bound is the mean over examples of log(frequency of that example).
inline double enumerated_optimum_proxy(const std::vector<Vec>& xs) {
  double total = 0.0;
  for (const Vec& x : xs) {
    std::size_t count = 0;
    for (const Vec& y : xs) count += (x == y);
    total += std::log(static_cast<double>(count) /
                      static_cast<double>(xs.size()));
  }
  return total / static_cast<double>(xs.size());
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

namespace detail {

/// sum_i bits_i * logits_i - softplus(logits_i): Bernoulli log-mass, valid
/// for binary bits and for relaxed bits in (0,1).
inline double log_mass(const Vec& bits, const Vec& logits) {
  double s = 0.0;
  for (std::size_t i = 0; i < bits.size(); ++i)
    s += bits[i] * logits[i] - stable_softplus(logits[i]);
  return s;
}

inline Vec affine_num(const Vec& w, const Vec& b, const Vec& x,
                      std::size_t rows, std::size_t cols) {
  Vec y(b);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) y[i] += w[i * cols + j] * x[j];
  return y;
}

}  // namespace detail

/// Linear VAE. layers == 1: q(b1|x), p(x|b1), prior p(b1).
/// layers == 2: q(b1|x) q(b2|b1), p(x|b1) p(b1|b2), prior p(b2).
/// All weight matrices are row-major (output x input).
struct LinearVae {
  std::size_t D = 0, L = 0;
  int layers = 1;
  Vec Wq1, bq1, Wq2, bq2;        // encoder
  Vec Wp1, bp1, Wp2, bp2, prior; // decoder and prior

  static LinearVae init(std::size_t D, std::size_t L, int layers,
                        RngStream& rng) {
    if (layers != 1 && layers != 2)
      throw ConfigError("LinearVae: layers must be 1 or 2");
    LinearVae m;
    m.D = D;
    m.L = L;
    m.layers = layers;
    auto fill = [&](Vec& w, std::size_t rows, std::size_t cols) {
      double bound = std::sqrt(6.0 / static_cast<double>(rows + cols));
      w.resize(rows * cols);
      for (double& v : w) v = bound * (2.0 * rng.uniform() - 1.0);
    };
    fill(m.Wq1, L, D);
    m.bq1.assign(L, 0.0);
    fill(m.Wp1, D, L);
    m.bp1.assign(D, 0.0);
    m.prior.assign(L, 0.0);
    if (layers == 2) {
      fill(m.Wq2, L, L);
      m.bq2.assign(L, 0.0);
      fill(m.Wp2, L, L);
      m.bp2.assign(L, 0.0);
    }
    return m;
  }

  std::size_t latent_dim() const { return layers == 2 ? 2 * L : L; }

  Vec enc1_logits(const Vec& x) const {
    return detail::affine_num(Wq1, bq1, x, L, D);
  }
  Vec enc2_logits(const Vec& b1) const {
    return detail::affine_num(Wq2, bq2, b1, L, L);
  }
};

/// Exact single-sample ELBO by direct evaluation:
/// log p(x|b) + log p(b) - log q(b|x), with the chain factorizations for
/// the two-layer model. b2 is ignored for one-layer models.
inline double vae_elbo(const LinearVae& m, const Vec& x, const Vec& b1,
                       const Vec& b2 = {}) {
  check_binary(x);
  check_binary(b1);
  double e = detail::log_mass(x, detail::affine_num(m.Wp1, m.bp1, b1, m.D, m.L));
  if (m.layers == 1) {
    e += detail::log_mass(b1, m.prior);
    e -= detail::log_mass(b1, m.enc1_logits(x));
  } else {
    check_binary(b2);
    e += detail::log_mass(b1, detail::affine_num(m.Wp2, m.bp2, b2, m.L, m.L));
    e += detail::log_mass(b2, m.prior);
    e -= detail::log_mass(b1, m.enc1_logits(x));
    e -= detail::log_mass(b2, m.enc2_logits(b1));
  }
  return e;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

struct VaeConfig {
  EstimatorKind kind = EstimatorKind::kRelax;
  int layers = 1;
  std::size_t latent = 20;
  double lr = 1e-3;
  double cv_lr_scale = 1.0;
  long steps = 2000;
  std::size_t batch = 24;
  std::uint64_t seed = 0;
  OptKind opt = OptKind::kAdam;
  std::size_t surrogate_hidden = 20;   // residual net hidden width (RELAX)
  double surrogate_weight_decay = 1e-3;
  double rebar_lambda0 = 0.5;
  std::size_t window = 500;
};

struct VaeTraceRow {
  long epoch;
  double train_elbo;
  double valid_elbo;
  double grad_log_var;
};

/// Binds one model to a tape: the ELBO over hard latents for exact
/// decoder/prior gradients, plus the surrogate over relaxed latents for the
/// encoder estimator. Leaves are mutated per example; no per-step graph
/// construction.
class VaeTrainer {
public:
  VaeTrainer(LinearVae model, const VaeConfig& cfg)
      : m_(std::move(model)), cfg_(cfg), window_(cfg.window) {
    if (cfg.kind != EstimatorKind::kReinforce &&
        cfg.kind != EstimatorKind::kRelax &&
        cfg.kind != EstimatorKind::kRebar)
      throw ConfigError("vae: estimator must be reinforce, relax, or rebar");
    std::size_t M = m_.latent_dim();
    x_in_ = tape_.input(Vec(m_.D, 0.0));
    b1_in_ = tape_.input(Vec(m_.L, 0.0));
    lq1_in_ = tape_.input(Vec(m_.L, 0.0));
    if (m_.layers == 2) {
      b2_in_ = tape_.input(Vec(m_.L, 0.0));
      lq2_in_ = tape_.input(Vec(m_.L, 0.0));
    }
    Wp1_p_ = tape_.param(m_.Wp1, "Wp1");
    bp1_p_ = tape_.param(m_.bp1, "bp1");
    prior_p_ = tape_.param(m_.prior, "prior");
    if (m_.layers == 2) {
      Wp2_p_ = tape_.param(m_.Wp2, "Wp2");
      bp2_p_ = tape_.param(m_.bp2, "bp2");
    }
    elbo_node_ = build_elbo(b1_in_, b2_in_);

    if (cfg.kind != EstimatorKind::kReinforce) {
      z_in_ = tape_.input(Vec(M, 0.0));
      zt_in_ = tape_.input(Vec(M, 0.0));
      RelaxedObjective neg_relaxed_elbo = [this](Tape&, Node rb) {
        Node rb1 = m_.layers == 2 ? slice(rb, 0, m_.L) : rb;
        Node rb2 = m_.layers == 2 ? slice(rb, m_.L, m_.L) : Node{};
        return neg(build_elbo(rb1, rb2));
      };
      StructuredSurrogate::Options opt;
      opt.lambda0 = cfg.rebar_lambda0;
      if (cfg.kind == EstimatorKind::kRebar) {
        opt.trainable_eta = true;
      } else {
        MlpSpec res{{M, cfg.surrogate_hidden, 1}, Act::kRelu,
                    cfg.surrogate_weight_decay};
        opt.residual = res;
      }
      RngStream init(cfg.seed, "init");
      surrogate_.emplace(tape_, neg_relaxed_elbo, opt, init);
      c_z_ = (*surrogate_)(z_in_);
      dc_dz_ = gradient_node(c_z_, z_in_);
      c_zt_ = (*surrogate_)(zt_in_);
      dc_dzt_ = gradient_node(c_zt_, zt_in_);
      phi_ = surrogate_->phi_params();
    }

    auto add_opt = [&](std::size_t n, double lr) {
      opts_.emplace_back(cfg.opt, lr);
      (void)n;
    };
    add_opt(m_.Wq1.size(), cfg.lr);
    add_opt(m_.bq1.size(), cfg.lr);
    add_opt(m_.Wp1.size(), cfg.lr);
    add_opt(m_.bp1.size(), cfg.lr);
    add_opt(m_.prior.size(), cfg.lr);
    if (m_.layers == 2) {
      add_opt(m_.Wq2.size(), cfg.lr);
      add_opt(m_.bq2.size(), cfg.lr);
      add_opt(m_.Wp2.size(), cfg.lr);
      add_opt(m_.bp2.size(), cfg.lr);
    }
    for (std::size_t i = 0; i < phi_.size(); ++i)
      phi_opts_.emplace_back(cfg.opt, cfg.lr * cfg.cv_lr_scale);
  }

  const LinearVae& model() const { return m_; }
  Tape& tape() { return tape_; }
  Node elbo_node() const { return elbo_node_; }

  /// One update over a batch of examples. Returns the mean batch ELBO of
  /// the hard samples used for the update.
  double step(const std::vector<const Vec*>& batch, RngStream& rng) {
    std::size_t L = m_.L;
    Vec gWq1(m_.Wq1.size(), 0.0), gbq1(L, 0.0);
    Vec gWq2(m_.Wq2.size(), 0.0), gbq2(m_.layers == 2 ? L : 0, 0.0);
    Vec gWp1(m_.Wp1.size(), 0.0), gbp1(m_.D, 0.0), gprior(L, 0.0);
    Vec gWp2(m_.Wp2.size(), 0.0), gbp2(m_.layers == 2 ? L : 0, 0.0);
    std::vector<Vec> gphi;
    for (Node p : phi_) gphi.emplace_back(p.size(), 0.0);
    double elbo_sum = 0.0;
    sync_params();

    for (const Vec* xp : batch) {
      const Vec& x = *xp;
      PerExample ex = estimate_example(x, rng);
      const RelaxedSample& s1 = ex.s1;
      elbo_sum += ex.elbo;
      Vec gl = ex.est.gradient();

      for (std::size_t i = 0; i < L; ++i) {
        gbq1[i] += gl[i];
        for (std::size_t j = 0; j < m_.D; ++j)
          gWq1[i * m_.D + j] += gl[i] * x[j];
      }
      if (m_.layers == 2) {
        for (std::size_t i = 0; i < L; ++i) {
          gbq2[i] += gl[L + i];
          for (std::size_t j = 0; j < L; ++j)
            gWq2[i * L + j] += gl[L + i] * s1.b[j];
        }
      }

      if (!phi_.empty()) {
        std::vector<Vec> vg = variance_grad(tape_, ex.est, phi_);
        for (std::size_t p = 0; p < phi_.size(); ++p)
          for (std::size_t i = 0; i < gphi[p].size(); ++i)
            gphi[p][i] += vg[p][i];
      }

      // Exact decoder/prior gradients of the loss -ELBO.
      tape_.backward(elbo_node_);
      axpy(gWp1, tape_.grad(Wp1_p_), -1.0);
      axpy(gbp1, tape_.grad(bp1_p_), -1.0);
      axpy(gprior, tape_.grad(prior_p_), -1.0);
      if (m_.layers == 2) {
        axpy(gWp2, tape_.grad(Wp2_p_), -1.0);
        axpy(gbp2, tape_.grad(bp2_p_), -1.0);
      }
    }

    double inv = 1.0 / static_cast<double>(batch.size());
    for (Vec* g : {&gWq1, &gbq1, &gWq2, &gbq2, &gWp1, &gbp1, &gprior, &gWp2,
                   &gbp2})
      for (double& v : *g) v *= inv;

    std::size_t oi = 0;
    opts_[oi++].step(m_.Wq1, gWq1);
    opts_[oi++].step(m_.bq1, gbq1);
    opts_[oi++].step(m_.Wp1, gWp1);
    opts_[oi++].step(m_.bp1, gbp1);
    opts_[oi++].step(m_.prior, gprior);
    if (m_.layers == 2) {
      opts_[oi++].step(m_.Wq2, gWq2);
      opts_[oi++].step(m_.bq2, gbq2);
      opts_[oi++].step(m_.Wp2, gWp2);
      opts_[oi++].step(m_.bp2, gbp2);
    }
    for (std::size_t p = 0; p < phi_.size(); ++p) {
      Vec pv = tape_.value(phi_[p]);
      double wd = surrogate_ && surrogate_->residual() &&
                          phi_[p].idx == surrogate_->residual()->params().idx
                      ? surrogate_->residual_weight_decay()
                      : 0.0;
      Vec g = gphi[p];
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] = g[i] * inv + wd * pv[i];
      phi_opts_[p].step(pv, g);
      tape_.set_value(phi_[p], pv);
    }

    Vec flat = gWq1;
    flat.insert(flat.end(), gbq1.begin(), gbq1.end());
    flat.insert(flat.end(), gWq2.begin(), gWq2.end());
    flat.insert(flat.end(), gbq2.begin(), gbq2.end());
    window_.push(flat);
    return elbo_sum * inv;
  }

  double grad_log_var() const { return window_.log_variance(); }

  /// One sample, one example, everything needed for the encoder update.
  struct PerExample {
    RelaxedSample s1, s2;
    Vec lq1, lq2;
    double elbo;
    GradEstimate est;  // gradient of the loss -ELBO in latent-logit space,
                       // direct-dependence correction included
  };

  PerExample estimate_example(const Vec& x, RngStream& rng) {
    std::size_t M = m_.latent_dim();
    PerExample ex;
    ex.lq1 = m_.enc1_logits(x);
    ex.s1 = draw_relaxed(BernoulliVector{ex.lq1}, rng);
    if (m_.layers == 2) {
      ex.lq2 = m_.enc2_logits(ex.s1.b);
      ex.s2 = draw_relaxed(BernoulliVector{ex.lq2}, rng);
    }

    tape_.set_value(x_in_, x);
    tape_.set_value(b1_in_, ex.s1.b);
    tape_.set_value(lq1_in_, ex.lq1);
    if (m_.layers == 2) {
      tape_.set_value(b2_in_, ex.s2.b);
      tape_.set_value(lq2_in_, ex.lq2);
    }
    if (z_in_.valid()) {
      tape_.set_value(z_in_, concat_vec(ex.s1.z, ex.s2.z));
      tape_.set_value(zt_in_, concat_vec(ex.s1.z_tilde, ex.s2.z_tilde));
    }
    tape_.recompute();

    ex.elbo = elbo_node_.scalar();
    double f = -ex.elbo;  // minimized loss
    Vec score = bernoulli_score(BernoulliVector{ex.lq1}, ex.s1.b);
    if (m_.layers == 2) {
      Vec sc2 = bernoulli_score(BernoulliVector{ex.lq2}, ex.s2.b);
      score.insert(score.end(), sc2.begin(), sc2.end());
    }

    ex.est = cfg_.kind == EstimatorKind::kReinforce
                 ? reinforce(f, score)
                 : relax_estimate(
                       f, score, c_zt_, dc_dz_, diag_jacobian(Vec(M, 1.0)),
                       dc_dzt_,
                       diag_jacobian(conditional_jac(ex.s1, ex.s2, ex.lq1,
                                                     ex.lq2)));
    // Direct dependence of f = -ELBO on the encoder logits: +score.
    ex.est = direct_dependence_correction(std::move(ex.est), score);
    return ex;
  }

  /// Single-sample gradient estimate of the loss -ELBO with respect to the
  /// latent logits (used by the enumeration oracles). Decoder/prior values
  /// are taken from the bound model.
  Vec encoder_logit_grad(const Vec& x, RngStream& rng) {
    sync_params();
    return estimate_example(x, rng).est.gradient();
  }

  /// Mean single-sample ELBO over a split, using a fresh probe stream so
  /// evaluation never perturbs training noise.
  double eval_elbo(const std::vector<Vec>& xs) const {
    RngStream rng(cfg_.seed, "probe");
    double total = 0.0;
    for (const Vec& x : xs) {
      Vec lq1 = m_.enc1_logits(x);
      Vec b1(m_.L), b2;
      for (std::size_t i = 0; i < m_.L; ++i)
        b1[i] = rng.uniform() < detail::stable_sigmoid(lq1[i]) ? 1.0 : 0.0;
      if (m_.layers == 2) {
        Vec lq2 = m_.enc2_logits(b1);
        b2.resize(m_.L);
        for (std::size_t i = 0; i < m_.L; ++i)
          b2[i] = rng.uniform() < detail::stable_sigmoid(lq2[i]) ? 1.0 : 0.0;
      }
      total += vae_elbo(m_, x, b1, b2);
    }
    return total / static_cast<double>(xs.size());
  }

private:
  Node build_elbo(Node bb1, Node bb2) {
    auto logmass = [](Node bits, Node logits) {
      return sub(dot(bits, logits), sum(softplus(logits)));
    };
    Node lp1 = affine(Wp1_p_, bp1_p_, bb1, m_.D, m_.L);
    Node e = logmass(x_in_, lp1);
    if (m_.layers == 1) {
      e = add(e, logmass(bb1, prior_p_));
      e = sub(e, logmass(bb1, lq1_in_));
    } else {
      e = add(e, logmass(bb1, affine(Wp2_p_, bp2_p_, bb2, m_.L, m_.L)));
      e = add(e, logmass(bb2, prior_p_));
      e = sub(e, logmass(bb1, lq1_in_));
      e = sub(e, logmass(bb2, lq2_in_));
    }
    return e;
  }

  Vec conditional_jac(const RelaxedSample& s1, const RelaxedSample& s2,
                      const Vec& lq1, const Vec& lq2) const {
    Vec j = bernoulli_conditional_jacobian_diag(BernoulliVector{lq1}, s1.b,
                                                s1.v);
    if (m_.layers == 2) {
      Vec j2 = bernoulli_conditional_jacobian_diag(BernoulliVector{lq2},
                                                   s2.b, s2.v);
      j.insert(j.end(), j2.begin(), j2.end());
    }
    return j;
  }

  static Vec concat_vec(const Vec& a, const Vec& b) {
    Vec out = a;
    out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  static void axpy(Vec& acc, const Vec& g, double scale) {
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += scale * g[i];
  }

  void sync_params() {
    tape_.set_value(Wp1_p_, m_.Wp1);
    tape_.set_value(bp1_p_, m_.bp1);
    tape_.set_value(prior_p_, m_.prior);
    if (m_.layers == 2) {
      tape_.set_value(Wp2_p_, m_.Wp2);
      tape_.set_value(bp2_p_, m_.bp2);
    }
  }

  LinearVae m_;
  VaeConfig cfg_;
  Tape tape_;
  Node x_in_, b1_in_, b2_in_, lq1_in_, lq2_in_, z_in_, zt_in_;
  Node Wp1_p_, bp1_p_, Wp2_p_, bp2_p_, prior_p_;
  Node elbo_node_;
  std::optional<StructuredSurrogate> surrogate_;
  Node c_z_, dc_dz_, c_zt_, dc_dzt_;
  std::vector<Node> phi_;
  std::vector<Optimizer> opts_;
  std::vector<Optimizer> phi_opts_;
  GradVarianceWindow window_;
};

/// Trains for cfg.steps batch updates; emits one row per epoch (one pass
/// over the training split) plus a final row if training ends mid-epoch.
inline std::vector<VaeTraceRow> train_vae(LinearVae model,
                                          const BinaryDataset& data,
                                          const VaeConfig& cfg) {
  if (cfg.batch < 1) throw ConfigError("vae: batch must be >= 1");
  if (cfg.lr <= 0.0) throw ConfigError("vae: lr must be positive");
  if (model.D != data.D) throw ConfigError("vae: model/data dim mismatch");
  for (const Vec& x : data.train) check_binary(x);

  VaeTrainer trainer(std::move(model), cfg);
  RngStream rng(cfg.seed, "train");
  std::vector<VaeTraceRow> trace;
  std::size_t cursor = 0;
  long epoch = 0;
  std::size_t steps_per_epoch =
      std::max<std::size_t>(1, (data.train.size() + cfg.batch - 1) / cfg.batch);

  for (long step = 0; step < cfg.steps; ++step) {
    std::vector<const Vec*> batch;
    for (std::size_t i = 0; i < cfg.batch; ++i) {
      batch.push_back(&data.train[cursor]);
      cursor = (cursor + 1) % data.train.size();
    }
    trainer.step(batch, rng);
    bool epoch_end = (step + 1) % static_cast<long>(steps_per_epoch) == 0;
    if (epoch_end || step + 1 == cfg.steps) {
      trace.push_back({epoch++, trainer.eval_elbo(data.train),
                       data.valid.empty() ? std::nan("")
                                          : trainer.eval_elbo(data.valid),
                       trainer.grad_log_var()});
    }
  }
  return trace;
}

}  // namespace relax
