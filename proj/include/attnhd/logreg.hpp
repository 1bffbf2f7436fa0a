#pragma once

// Class-weighted, regularised binary logistic regression.
//
// Objective (bias never penalised):
//   L2:  0.5 * ||w||^2 + C * sum_i cw_i * logloss(y_i, w.x_i + b)
//   L1:  ||w||_1       + C * sum_i cw_i * logloss(y_i, w.x_i + b)
// with cw_i = positive_class_weight for y_i = 1 and 1 otherwise.
//
// L2 is minimised with L-BFGS and an Armijo backtracking line search; L1 with
// cyclic coordinate descent using one-dimensional Newton steps on the
// smooth part plus soft thresholding. Both are deterministic.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "attnhd/errors.hpp"

namespace attnhd {

enum class Penalty { L1, L2 };

inline std::string_view penalty_name(Penalty p) { return p == Penalty::L1 ? "l1" : "l2"; }

inline Penalty parse_penalty(std::string_view s) {
  if (s == "l1" || s == "L1") return Penalty::L1;
  if (s == "l2" || s == "L2") return Penalty::L2;
  throw ConfigError("unknown penalty '" + std::string(s) + "'");
}

struct HyperParams {
  Penalty penalty = Penalty::L2;
  double C = 1.0;
  double positive_class_weight = 2.0;
  int max_iterations = 5000;
  double convergence_tol = 1e-6;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(C > 0.0)) throw ConfigError("C must be positive");
    if (!(positive_class_weight > 0.0)) throw ConfigError("positive class weight must be positive");
    if (max_iterations <= 0) throw ConfigError("max_iterations must be positive");
    if (!(convergence_tol > 0.0)) throw ConfigError("convergence tolerance must be positive");
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

// Detector defaults: L2, C = 1, positives weighted 2:1.
inline HyperParams default_l2_params() { return {}; }

// Sparse selection defaults: L1, C = 0.005, positives weighted 5:1.
inline HyperParams default_l1_params() {
  HyperParams hp;
  hp.penalty = Penalty::L1;
  hp.C = 0.005;
  hp.positive_class_weight = 5.0;
  return hp;
}

inline double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

// Training data in solver form. X is n x d; y holds 0/1.
struct LogisticProblem {
  Eigen::MatrixXd X;
  Eigen::VectorXd y;
  Eigen::VectorXd sample_weight;

  LogisticProblem(Eigen::MatrixXd features, const std::vector<int>& labels, double positive_class_weight)
      : X(std::move(features)), y(static_cast<Eigen::Index>(labels.size())),
        sample_weight(static_cast<Eigen::Index>(labels.size())) {
    if (static_cast<std::size_t>(X.rows()) != labels.size()) throw DataError("feature/label count mismatch");
    std::size_t pos = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != 0 && labels[i] != 1) throw DataError("labels must be 0 or 1");
      const auto k = static_cast<Eigen::Index>(i);
      y[k] = labels[i];
      sample_weight[k] = labels[i] == 1 ? positive_class_weight : 1.0;
      pos += static_cast<std::size_t>(labels[i]);
    }
    if (pos == 0 || pos == labels.size()) throw TrainingError("training data contains a single class");
    if (!X.allFinite()) throw DataError("non-finite feature value in training matrix");
  }

  Eigen::Index samples() const { return X.rows(); }
  Eigen::Index features() const { return X.cols(); }
};

// C * sum_i cw_i * logloss at margins z.
inline double data_loss(const LogisticProblem& p, const Eigen::VectorXd& z, double C) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) s += p.sample_weight[i] * softplus(p.y[i] > 0.5 ? -z[i] : z[i]);
  return C * s;
}

inline double penalty_value(Penalty pen, const Eigen::VectorXd& w) {
  return pen == Penalty::L2 ? 0.5 * w.squaredNorm() : w.lpNorm<1>();
}

inline double objective(const LogisticProblem& p, Penalty pen, double C, const Eigen::VectorXd& w, double b) {
  const Eigen::VectorXd z = (p.X * w).array() + b;
  return penalty_value(pen, w) + data_loss(p, z, C);
}

// Gradient of the smooth part (data loss, plus 0.5||w||^2 for L2) with
// respect to (w, b). Returns the objective value of the smooth part.
inline double smooth_gradient(const LogisticProblem& p, Penalty pen, double C, const Eigen::VectorXd& w, double b,
                              Eigen::VectorXd& grad_w, double& grad_b) {
  const Eigen::VectorXd z = (p.X * w).array() + b;
  Eigen::VectorXd r(z.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    const bool pos = p.y[i] > 0.5;
    loss += p.sample_weight[i] * softplus(pos ? -z[i] : z[i]);
    r[i] = C * p.sample_weight[i] * (sigmoid(z[i]) - p.y[i]);
  }
  grad_w = p.X.transpose() * r;
  grad_b = r.sum();
  double f = C * loss;
  if (pen == Penalty::L2) {
    grad_w += w;
    f += 0.5 * w.squaredNorm();
  }
  return f;
}

struct FitResult {
  Eigen::VectorXd weights;
  double bias = 0.0;
  double objective = 0.0;
  int iterations = 0;
  bool converged = false;
  // Objective after every accepted iteration, starting at the initial point.
  std::vector<double> history;
};

namespace detail {

inline bool small_change(double before, double after, double tol) {
  return std::abs(before - after) <= tol * std::max({std::abs(before), std::abs(after), 1.0});
}

}  // namespace detail

inline FitResult fit_l2_lbfgs(const LogisticProblem& p, const HyperParams& hp) {
  constexpr int kMemory = 10;
  constexpr double kArmijo = 1e-4;
  const Eigen::Index d = p.features();
  const Eigen::Index dim = d + 1;  // last coordinate is the bias

  auto eval = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    Eigen::VectorXd gw;
    double gb = 0.0;
    const double f = smooth_gradient(p, Penalty::L2, hp.C, x.head(d), x[d], gw, gb);
    g.resize(dim);
    g.head(d) = gw;
    g[d] = gb;
    return f;
  };

  Eigen::VectorXd x = Eigen::VectorXd::Zero(dim);
  Eigen::VectorXd g;
  double f = eval(x, g);
  FitResult res;
  res.history.push_back(f);

  std::deque<Eigen::VectorXd> S, Y;
  std::deque<double> rho;
  Eigen::VectorXd x_new(dim), g_new(dim), dir(dim);

  for (int it = 1; it <= hp.max_iterations; ++it) {
    res.iterations = it;
    if (g.lpNorm<Eigen::Infinity>() <= 1e-12 * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
    // Two-loop recursion.
    dir = -g;
    std::vector<double> alpha(S.size());
    for (int k = static_cast<int>(S.size()) - 1; k >= 0; --k) {
      alpha[k] = rho[k] * S[k].dot(dir);
      dir -= alpha[k] * Y[k];
    }
    if (!S.empty()) dir *= S.back().dot(Y.back()) / Y.back().squaredNorm();
    for (std::size_t k = 0; k < S.size(); ++k) {
      const double beta = rho[k] * Y[k].dot(dir);
      dir += (alpha[k] - beta) * S[k];
    }
    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      S.clear();
      Y.clear();
      rho.clear();
      dir = -g;
      slope = -g.squaredNorm();
    }
    double step = S.empty() ? std::min(1.0, 1.0 / g.norm()) : 1.0;
    double f_new = f;
    bool accepted = false;
    for (int ls = 0; ls < 60; ++ls) {
      x_new = x + step * dir;
      f_new = eval(x_new, g_new);
      if (std::isfinite(f_new) && f_new <= f + kArmijo * step * slope) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // No descent possible at floating-point resolution.
      res.converged = true;
      break;
    }
    Eigen::VectorXd s = x_new - x;
    Eigen::VectorXd yv = g_new - g;
    const double sy = s.dot(yv);
    if (sy > 1e-12 * s.norm() * yv.norm()) {
      if (static_cast<int>(S.size()) == kMemory) {
        S.pop_front();
        Y.pop_front();
        rho.pop_front();
      }
      S.push_back(std::move(s));
      Y.push_back(std::move(yv));
      rho.push_back(1.0 / sy);
    }
    const double f_old = f;
    x.swap(x_new);
    g.swap(g_new);
    f = f_new;
    res.history.push_back(f);
    if (detail::small_change(f_old, f, hp.convergence_tol)) {
      res.converged = true;
      break;
    }
  }
  res.weights = x.head(d);
  res.bias = x[d];
  res.objective = f;
  return res;
}

inline FitResult fit_l1_cd(const LogisticProblem& p, const HyperParams& hp) {
  constexpr double kArmijo = 0.01;
  const Eigen::Index n = p.samples();
  const Eigen::Index d = p.features();
  const double C = hp.C;

  Eigen::VectorXd w = Eigen::VectorXd::Zero(d);
  double b = 0.0;
  Eigen::VectorXd z = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd r(n), q(n);  // first and second derivative of the loss in z

  auto refresh = [&](Eigen::Index i) {
    const double s = sigmoid(z[i]);
    const double cw = C * p.sample_weight[i];
    r[i] = cw * (s - p.y[i]);
    q[i] = cw * s * (1.0 - s);
  };
  for (Eigen::Index i = 0; i < n; ++i) refresh(i);
  double loss = data_loss(p, z, C);
  double l1 = 0.0;

  auto loss_after = [&](const auto& column, double delta) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double zi = z[i] + delta * column(i);
      s += p.sample_weight[i] * softplus(p.y[i] > 0.5 ? -zi : zi);
    }
    return C * s;
  };

  FitResult res;
  res.history.push_back(loss);
  for (int pass = 1; pass <= hp.max_iterations; ++pass) {
    res.iterations = pass;
    const double before = loss + l1;

    for (Eigen::Index j = 0; j < d; ++j) {
      const auto col = p.X.col(j);
      const double g = r.dot(col);
      const double h = std::max(q.dot(col.cwiseAbs2()), 1e-12);
      const double wj = w[j];
      double dj;
      if (g + 1.0 <= h * wj) {
        dj = -(g + 1.0) / h;
      } else if (g - 1.0 >= h * wj) {
        dj = -(g - 1.0) / h;
      } else {
        dj = -wj;
      }
      if (std::abs(dj) < 1e-14) continue;
      const double model_decrease = g * dj + std::abs(wj + dj) - std::abs(wj);
      double lambda = 1.0;
      for (int ls = 0; ls < 30; ++ls, lambda *= 0.5) {
        const double step = lambda * dj;
        const double new_loss = loss_after([&](Eigen::Index i) { return col[i]; }, step);
        const double change = new_loss - loss + std::abs(wj + step) - std::abs(wj);
        if (change <= kArmijo * lambda * model_decrease) {
          w[j] = wj + step;
          z += step * col;
          for (Eigen::Index i = 0; i < n; ++i) refresh(i);
          l1 += std::abs(w[j]) - std::abs(wj);
          loss = new_loss;
          break;
        }
      }
    }

    // Unpenalised bias: plain Newton step with backtracking.
    {
      const double g = r.sum();
      const double h = std::max(q.sum(), 1e-12);
      const double db = -g / h;
      if (std::abs(db) >= 1e-14) {
        double lambda = 1.0;
        for (int ls = 0; ls < 30; ++ls, lambda *= 0.5) {
          const double step = lambda * db;
          const double new_loss = loss_after([](Eigen::Index) { return 1.0; }, step);
          if (new_loss - loss <= kArmijo * lambda * g * db) {
            b += step;
            z.array() += step;
            for (Eigen::Index i = 0; i < n; ++i) refresh(i);
            loss = new_loss;
            break;
          }
        }
      }
    }

    l1 = w.lpNorm<1>();
    const double after = loss + l1;
    res.history.push_back(after);
    if (detail::small_change(before, after, hp.convergence_tol)) {
      res.converged = true;
      break;
    }
  }
  res.weights = w;
  res.bias = b;
  res.objective = loss + w.lpNorm<1>();
  return res;
}

inline FitResult fit_logistic(const LogisticProblem& p, const HyperParams& hp) {
  hp.validate();
  return hp.penalty == Penalty::L2 ? fit_l2_lbfgs(p, hp) : fit_l1_cd(p, hp);
}

}  // namespace attnhd
