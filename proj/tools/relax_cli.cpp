// Command-line harness: the three experiment drivers (toy, vae, rl) with
// CSV logging, config-file support (flat key=value; CLI flags win), and
// multi-seed aggregation.
//
// Exit codes: 0 on completion, 2 on configuration errors, 3 on divergence.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "relax/rl.hpp"
#include "relax/toy.hpp"
#include "relax/vae.hpp"

namespace {

using relax::Vec;

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path);
  if (!out) throw relax::ConfigError("cannot open output file '" + path + "'");
  return out;
}

std::string seed_path(const std::string& base, std::uint64_t seed,
                      bool multi) {
  if (!multi) return base;
  std::string stem = base, ext;
  auto dot = base.rfind('.');
  if (dot != std::string::npos && dot > base.rfind('/') + 1) {
    stem = base.substr(0, dot);
    ext = base.substr(dot);
  }
  return stem + "_seed" + std::to_string(seed) + ext;
}

/// Aggregate one metric across seeds, row-aligned by index, truncated to
/// the shortest run: mean plus 25th/75th percentiles.
void write_aggregate(const std::string& base, const std::string& index_name,
                     const std::string& metric_name,
                     const std::vector<std::vector<double>>& index_by_seed,
                     const std::vector<std::vector<double>>& metric_by_seed) {
  std::string stem = base, ext;
  auto dot = base.rfind('.');
  if (dot != std::string::npos && dot > base.rfind('/') + 1) {
    stem = base.substr(0, dot);
    ext = base.substr(dot);
  }
  std::ofstream out = open_out(stem + "_aggregate" + ext);
  out << index_name << ",mean_" << metric_name << ",p25_" << metric_name
      << ",p75_" << metric_name << "\n";
  std::size_t rows = metric_by_seed.front().size();
  for (const auto& m : metric_by_seed) rows = std::min(rows, m.size());
  for (std::size_t r = 0; r < rows; ++r) {
    Vec vals;
    for (const auto& m : metric_by_seed) vals.push_back(m[r]);
    std::sort(vals.begin(), vals.end());
    double mean = 0.0;
    for (double v : vals) mean += v;
    mean /= static_cast<double>(vals.size());
    auto pct = [&](double q) {
      double pos = q * static_cast<double>(vals.size() - 1);
      std::size_t lo = static_cast<std::size_t>(pos);
      double frac = pos - static_cast<double>(lo);
      return lo + 1 < vals.size()
                 ? vals[lo] * (1.0 - frac) + vals[lo + 1] * frac
                 : vals[lo];
    };
    out << fmt(index_by_seed.front()[r]) << ',' << fmt(mean) << ','
        << fmt(pct(0.25)) << ',' << fmt(pct(0.75)) << "\n";
  }
}

/// Divergence aborts the run but still leaves a parseable file: the header
/// plus one final row whose last column carries the "diverged" flag at the
/// step the optimizer blew up.
[[noreturn]] void abort_diverged(const std::string& path,
                                 const std::string& header, int metric_cols,
                                 const relax::DivergenceError& e) {
  std::ofstream out = open_out(path);
  out << header << "\n" << e.step();
  for (int i = 0; i < metric_cols; ++i) out << ',';
  out << "diverged\n";
  throw e;
}

struct CommonArgs {
  std::string estimator = "relax";
  double lr = 0.01;
  double cv_lr_scale = 1.0;
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> seeds;
  std::string out;

  std::vector<std::uint64_t> seed_list() const {
    return seeds.empty() ? std::vector<std::uint64_t>{seed} : seeds;
  }
};

void add_common(CLI::App* cmd, CommonArgs& a, double default_lr) {
  a.lr = default_lr;
  cmd->set_config("--config", "", "flat key=value config file");
  cmd->add_option("--estimator", a.estimator, "gradient estimator");
  cmd->add_option("--lr", a.lr, "learning rate for the model parameters");
  cmd->add_option("--cv-lr-scale", a.cv_lr_scale,
                  "surrogate learning-rate multiplier");
  cmd->add_option("--seed", a.seed, "single RNG seed");
  cmd->add_option("--seeds", a.seeds,
                  "multiple seeds; writes per-seed files plus an aggregate")
      ->delimiter(',');
  cmd->add_option("--out", a.out, "output CSV path")->required();
}

int run_toy(const CommonArgs& common, double target, long iters) {
  relax::ToyConfig cfg;
  cfg.kind = relax::estimator_kind_from_name(common.estimator);
  cfg.target = target;
  cfg.lr = common.lr;
  cfg.cv_lr_scale = common.cv_lr_scale;
  cfg.iters = iters;

  std::vector<std::uint64_t> seeds = common.seed_list();
  bool multi = seeds.size() > 1;
  std::vector<std::vector<double>> steps_by_seed, loss_by_seed;
  for (std::uint64_t seed : seeds) {
    cfg.seed = seed;
    const std::string header =
        "step,loss_exact,theta_prob,grad,grad_log_var_window";
    std::vector<relax::ToyTraceRow> trace;
    try {
      trace = relax::run_lax_loop(cfg);
    } catch (const relax::DivergenceError& e) {
      abort_diverged(seed_path(common.out, seed, multi), header, 4, e);
    }
    std::ofstream out = open_out(seed_path(common.out, seed, multi));
    out << header << "\n";
    std::vector<double> steps, losses;
    for (const relax::ToyTraceRow& r : trace) {
      out << r.step << ',' << fmt(r.loss_exact) << ',' << fmt(r.theta_prob)
          << ',' << fmt(r.grad) << ',';
      if (std::isfinite(r.grad_log_var)) out << fmt(r.grad_log_var);
      out << "\n";
      steps.push_back(static_cast<double>(r.step));
      losses.push_back(r.loss_exact);
    }
    steps_by_seed.push_back(std::move(steps));
    loss_by_seed.push_back(std::move(losses));
    std::cout << "toy seed " << seed
              << ": final loss_exact=" << fmt(trace.back().loss_exact)
              << " theta=" << fmt(trace.back().theta_prob) << "\n";
  }
  if (multi)
    write_aggregate(common.out, "step", "loss_exact", steps_by_seed,
                    loss_by_seed);
  return 0;
}

int run_vae(const CommonArgs& common, const std::string& data_path,
            bool synthetic, std::size_t synth_n, std::size_t synth_d,
            int layers, std::size_t latent, std::size_t batch, long steps) {
  if (synthetic == !data_path.empty())
    throw relax::ConfigError("vae: pass exactly one of --data or --synthetic");
  relax::BinaryDataset data =
      synthetic ? relax::make_synthetic_dataset(synth_n, synth_d, 12345)
                : relax::load_binary_dataset(data_path);

  relax::VaeConfig cfg;
  cfg.kind = relax::estimator_kind_from_name(common.estimator);
  cfg.layers = layers;
  cfg.latent = latent;
  cfg.batch = batch;
  cfg.steps = steps;
  cfg.lr = common.lr;
  cfg.cv_lr_scale = common.cv_lr_scale;

  std::vector<std::uint64_t> seeds = common.seed_list();
  bool multi = seeds.size() > 1;
  std::vector<std::vector<double>> epoch_by_seed, elbo_by_seed;
  for (std::uint64_t seed : seeds) {
    cfg.seed = seed;
    relax::RngStream init(seed, "init");
    relax::LinearVae model =
        relax::LinearVae::init(data.D, cfg.latent, cfg.layers, init);
    const std::string header = "epoch,train_elbo,valid_elbo,grad_log_var";
    std::vector<relax::VaeTraceRow> trace;
    try {
      trace = relax::train_vae(model, data, cfg);
    } catch (const relax::DivergenceError& e) {
      abort_diverged(seed_path(common.out, seed, multi), header, 3, e);
    }
    std::ofstream out = open_out(seed_path(common.out, seed, multi));
    out << header << "\n";
    std::vector<double> epochs, elbos;
    for (const relax::VaeTraceRow& r : trace) {
      out << r.epoch << ',' << fmt(r.train_elbo) << ',';
      if (std::isfinite(r.valid_elbo)) out << fmt(r.valid_elbo);
      out << ',';
      if (std::isfinite(r.grad_log_var)) out << fmt(r.grad_log_var);
      out << "\n";
      epochs.push_back(static_cast<double>(r.epoch));
      elbos.push_back(r.train_elbo);
    }
    epoch_by_seed.push_back(std::move(epochs));
    elbo_by_seed.push_back(std::move(elbos));
    if (!trace.empty())
      std::cout << "vae seed " << seed
                << ": final train_elbo=" << fmt(trace.back().train_elbo)
                << " valid_elbo=" << fmt(trace.back().valid_elbo) << "\n";
  }
  if (multi)
    write_aggregate(common.out, "epoch", "train_elbo", epoch_by_seed,
                    elbo_by_seed);
  return 0;
}

int run_rl(const CommonArgs& common, const std::string& env, double gamma,
           double entropy, long episodes, int probe_every,
           bool additive_critic) {
  relax::RlConfig cfg;
  cfg.kind = relax::rl_estimator_from_name(common.estimator);
  cfg.env = env;
  cfg.gamma = gamma;
  cfg.entropy = entropy;
  cfg.episodes = episodes;
  cfg.probe_every = probe_every;
  cfg.additive_critic = additive_critic;
  cfg.lr = common.lr;
  cfg.cv_lr_scale = common.cv_lr_scale;

  std::vector<std::uint64_t> seeds = common.seed_list();
  bool multi = seeds.size() > 1;
  std::vector<std::vector<double>> ep_by_seed, reward_by_seed;
  for (std::uint64_t seed : seeds) {
    cfg.seed = seed;
    std::string path = seed_path(common.out, seed, multi);
    const std::string header = "episode,reward,solved_flag";
    relax::RlResult res;
    try {
      res = relax::train_rl(cfg);
    } catch (const relax::DivergenceError& e) {
      abort_diverged(path, header, 2, e);
    }
    std::ofstream out = open_out(path);
    out << header << "\n";
    std::vector<double> eps, rewards;
    double best = -std::numeric_limits<double>::infinity();
    for (const relax::RlTraceRow& r : res.trace) {
      out << r.episode << ',' << fmt(r.reward) << ',' << r.solved << "\n";
      eps.push_back(static_cast<double>(r.episode));
      rewards.push_back(r.reward);
      best = std::max(best, r.reward);
    }
    std::string stem = path, ext;
    auto dot = path.rfind('.');
    if (dot != std::string::npos && dot > path.rfind('/') + 1) {
      stem = path.substr(0, dot);
      ext = path.substr(dot);
    }
    std::ofstream probe_out = open_out(stem + "_probe" + ext);
    probe_out << "episode,mean_log_variance\n";
    for (const relax::RlProbeRow& p : res.probes)
      probe_out << p.episode << ',' << fmt(p.mean_log_variance) << "\n";
    ep_by_seed.push_back(std::move(eps));
    reward_by_seed.push_back(std::move(rewards));
    std::cout << "rl seed " << seed << ": best_reward=" << fmt(best)
              << " solved_episode=" << res.solved_episode << "\n";
  }
  if (multi)
    write_aggregate(common.out, "episode", "reward", ep_by_seed,
                    reward_by_seed);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-variance unbiased gradient estimation toolkit"};
  app.require_subcommand(1);

  CommonArgs toy_args, vae_args, rl_args;

  CLI::App* toy = app.add_subcommand("toy", "single-Bernoulli toy problem");
  double target = 0.499;
  long iters = 5000;
  add_common(toy, toy_args, 0.01);
  toy->add_option("--target", target, "objective target t");
  toy->add_option("--iters", iters, "training iterations");

  CLI::App* vae = app.add_subcommand("vae", "linear Bernoulli-latent VAE");
  std::string data_path;
  bool synthetic = false;
  std::size_t synth_n = 100, synth_d = 64, latent = 20, batch = 24;
  int layers = 1;
  long steps = 2000;
  add_common(vae, vae_args, 1e-3);
  vae->add_option("--data", data_path, "binary dataset path");
  vae->add_flag("--synthetic", synthetic, "use the bundled synthetic set");
  vae->add_option("--synthetic-n", synth_n, "synthetic example count");
  vae->add_option("--synthetic-d", synth_d, "synthetic data dimension");
  vae->add_option("--layers", layers, "stochastic layers (1 or 2)");
  vae->add_option("--latent", latent, "latent units per layer");
  vae->add_option("--batch", batch, "batch size");
  vae->add_option("--steps", steps, "training steps");

  CLI::App* rl = app.add_subcommand("rl", "policy-gradient training");
  std::string env = "cartpole";
  double gamma = 0.99, entropy = 0.01;
  long episodes = 2000;
  int probe_every = 10;
  add_common(rl, rl_args, 0.003);
  rl->add_option("--env", env, "environment (cartpole or bandit)");
  rl->add_option("--gamma", gamma, "reward discount");
  rl->add_option("--entropy", entropy, "entropy bonus weight");
  rl->add_option("--episodes", episodes, "training episodes");
  rl->add_option("--probe-every", probe_every,
                 "variance-probe interval in episodes (0 disables)");
  bool additive_critic = false;
  rl->add_flag("--additive-critic", additive_critic,
               "add a state-only head to the surrogate");

  try {
    app.parse(argc, argv);
    if (toy->parsed()) return run_toy(toy_args, target, iters);
    if (vae->parsed())
      return run_vae(vae_args, data_path, synthetic, synth_n, synth_d,
                     layers, latent, batch, steps);
    return run_rl(rl_args, env, gamma, entropy, episodes, probe_every,
                  additive_critic);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const relax::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const relax::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 3;
  }
}
