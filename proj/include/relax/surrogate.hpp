#pragma once

// Control-variate surrogates c_phi: plain MLPs and the structured form
// f(sigma_lambda(z)) + r_rho(z). A surrogate binds to a Tape at
// construction (its phi parameters become tape params) and can then be
// applied to any input node on that tape, so c(z) and c(z_tilde) share one
// set of parameters.

#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include "relax/errors.hpp"
#include "relax/rng.hpp"
#include "relax/tape.hpp"

namespace relax {

enum class Act { kTanh, kRelu };

struct MlpSpec {
  std::vector<std::size_t> sizes;  // input, hidden..., output
  Act act = Act::kTanh;
  double weight_decay = 0.0;

  std::size_t param_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l)
      n += (sizes[l] + 1) * sizes[l + 1];
    return n;
  }
};

/// Uniform fan-based weight init, zero biases. Deterministic given the
/// stream.
inline Vec mlp_init_params(const MlpSpec& spec, RngStream& rng) {
  Vec p(spec.param_count(), 0.0);
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < spec.sizes.size(); ++l) {
    std::size_t fan_in = spec.sizes[l], fan_out = spec.sizes[l + 1];
    double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::size_t i = 0; i < fan_in * fan_out; ++i)
      p[off + i] = bound * (2.0 * rng.uniform() - 1.0);
    off += fan_in * fan_out + fan_out;  // biases stay zero
  }
  return p;
}

/// Forward pass through the MLP given a flat parameter node.
inline Node mlp_forward(const MlpSpec& spec, Node params, Node x) {
  if (x.size() != spec.sizes.front())
    throw ContractError("mlp_forward: input size mismatch");
  if (params.size() != spec.param_count())
    throw ContractError("mlp_forward: param size mismatch");
  Node h = x;
  std::size_t off = 0;
  for (std::size_t l = 0; l + 1 < spec.sizes.size(); ++l) {
    std::size_t in = spec.sizes[l], out = spec.sizes[l + 1];
    Node w = slice(params, off, in * out);
    Node b = slice(params, off + in * out, out);
    off += (in + 1) * out;
    h = affine(w, b, h, out, in);
    bool last = (l + 2 == spec.sizes.size());
    if (!last) h = spec.act == Act::kTanh ? relax::tanh(h) : relu(h);
  }
  return h;
}

/// MLP surrogate bound to a tape. Output must be scalar.
class MlpSurrogate {
public:
  MlpSurrogate(Tape& tape, MlpSpec spec, RngStream& rng)
      : spec_(std::move(spec)) {
    if (spec_.sizes.back() != 1)
      throw ContractError("MlpSurrogate: output must be scalar");
    params_ = tape.param(mlp_init_params(spec_, rng), "phi_mlp");
  }

  MlpSurrogate(Tape& tape, MlpSpec spec, Vec params) : spec_(std::move(spec)) {
    params_ = tape.param(std::move(params), "phi_mlp");
  }

  Node operator()(Node x) const { return mlp_forward(spec_, params_, x); }

  Node params() const { return params_; }
  const MlpSpec& spec() const { return spec_; }
  double weight_decay() const { return spec_.weight_decay; }

private:
  MlpSpec spec_;
  Node params_;
};

/// Builds f at a relaxed (continuous) input, as a graph expression.
using RelaxedObjective = std::function<Node(Tape&, Node relaxed_b)>;

/// Structured surrogate c(z) = eta * f(sigma_lambda(z)) + r_rho(z).
///
/// With no residual and trainable eta this is exactly the two-parameter
/// concrete-relaxation control variate; lambda is trained in log space to
/// stay positive. sigma_lambda is sigmoid(z / lambda) per coordinate for
/// Bernoulli-style inputs and softmax(z / lambda) for categorical ones.
class StructuredSurrogate {
public:
  struct Options {
    double lambda0 = 1.0;
    bool categorical = false;
    bool trainable_eta = false;  // eta fixed at 1 when false
    double eta0 = 1.0;
    std::optional<MlpSpec> residual;
  };

  StructuredSurrogate(Tape& tape, RelaxedObjective base, const Options& opt,
                      RngStream& rng)
      : tape_(&tape), base_(std::move(base)), opt_(opt) {
    if (opt.lambda0 <= 0.0)
      throw ContractError("StructuredSurrogate: lambda must be positive");
    log_lambda_ = tape.param({std::log(opt.lambda0)}, "phi_log_lambda");
    if (opt.trainable_eta) eta_ = tape.param({opt.eta0}, "phi_eta");
    if (opt.residual) {
      residual_.emplace(tape, *opt.residual, rng);
    }
  }

  Node operator()(Node z) const {
    Tape& t = *tape_;
    Node lambda = relax::exp(log_lambda_);
    Node scaled = div(z, broadcast_to(lambda, z.size()));
    Node relaxed = opt_.categorical ? softmax(scaled) : sigmoid(scaled);
    Node c = base_(t, relaxed);
    if (eta_.valid()) c = mul(eta_, c);
    if (residual_) c = add(c, (*residual_)(z));
    return c;
  }

  std::vector<Node> phi_params() const {
    std::vector<Node> out = {log_lambda_};
    if (eta_.valid()) out.push_back(eta_);
    if (residual_) out.push_back(residual_->params());
    return out;
  }

  Node log_lambda() const { return log_lambda_; }
  Node eta() const { return eta_; }
  const std::optional<MlpSurrogate>& residual() const { return residual_; }
  double residual_weight_decay() const {
    return residual_ ? residual_->weight_decay() : 0.0;
  }

private:
  Tape* tape_;
  RelaxedObjective base_;
  Options opt_;
  Node log_lambda_;
  Node eta_;
  std::optional<MlpSurrogate> residual_;
};

/// A fixed graph function used as a surrogate. No trainable phi; exists so
/// the reparameterization route and the c = f reduction identities share
/// the surrogate plumbing.
class LambdaSurrogate {
public:
  LambdaSurrogate(Tape& tape, RelaxedObjective f)
      : tape_(&tape), f_(std::move(f)) {}

  Node operator()(Node x) const { return f_(*tape_, x); }

private:
  Tape* tape_;
  RelaxedObjective f_;
};

/// REBAR configuration: c(z) = eta * f(sigma_lambda(z)), phi = {eta, lambda}.
inline StructuredSurrogate rebar_surrogate(Tape& tape, RelaxedObjective f,
                                           double lambda0, double eta0,
                                           bool categorical, RngStream& rng) {
  StructuredSurrogate::Options opt;
  opt.lambda0 = lambda0;
  opt.eta0 = eta0;
  opt.trainable_eta = true;
  opt.categorical = categorical;
  return StructuredSurrogate(tape, std::move(f), opt, rng);
}

}  // namespace relax
