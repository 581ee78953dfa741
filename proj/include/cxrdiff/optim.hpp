#pragma once

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "cxrdiff/errors.hpp"

namespace cxrdiff {

enum class OptimizerKind { sgd, adam };

inline OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adam") return OptimizerKind::adam;
  throw config_error("UnknownOptimizer", s);
}

inline std::string optimizer_name(OptimizerKind k) { return k == OptimizerKind::sgd ? "sgd" : "adam"; }

// Plain gradient descent or Adam over one contiguous parameter block. Only
// the block handed to step() is ever written.
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double learning_rate, Eigen::Index size)
      : kind_(kind), lr_(learning_rate) {
    if (kind_ == OptimizerKind::adam) {
      m_ = Eigen::VectorXd::Zero(size);
      v_ = Eigen::VectorXd::Zero(size);
    }
  }

  template <typename Params, typename Grad>
  void step(Params&& params, const Grad& grad) {
    ++t_;
    if (kind_ == OptimizerKind::sgd) {
      params -= lr_ * grad;
      return;
    }
    m_ = beta1_ * m_ + (1 - beta1_) * grad;
    v_ = beta2_ * v_ + (1 - beta2_) * grad.cwiseProduct(grad);
    const double c1 = 1 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1 - std::pow(beta2_, static_cast<double>(t_));
    params -= (lr_ * (m_ / c1).array() / ((v_ / c2).array().sqrt() + eps_)).matrix();
  }

  long steps() const { return t_; }

 private:
  OptimizerKind kind_;
  double lr_;
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
  long t_ = 0;
  Eigen::VectorXd m_, v_;
};

}  // namespace cxrdiff
