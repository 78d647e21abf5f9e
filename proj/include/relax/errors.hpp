#pragma once

#include <stdexcept>
#include <string>

namespace relax {

/// Numeric breakdown inside a forward pass (non-finite intermediate).
class NumericalError : public std::runtime_error {
public:
  NumericalError(const std::string& what, std::size_t node_id)
      : std::runtime_error(what + " (node " + std::to_string(node_id) + ")"),
        node_id_(node_id) {}
  std::size_t node_id() const { return node_id_; }

private:
  std::size_t node_id_;
};

/// A caller violated a documented precondition.
class ContractError : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// Training left the numerically sane region (NaN or runaway parameters).
class DivergenceError : public std::runtime_error {
public:
  DivergenceError(const std::string& what, long step)
      : std::runtime_error(what + " (step " + std::to_string(step) + ")"),
        step_(step) {}
  long step() const { return step_; }

private:
  long step_;
};

/// Bad experiment configuration (unknown estimator name, invalid flag value).
class ConfigError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

}  // namespace relax
