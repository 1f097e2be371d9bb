#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "permsim/learner.hpp"
#include "permsim/rng.hpp"

namespace permsim::learn {

double rbf_kernel(std::span<const double> a, std::span<const double> b,
                  double gamma) {
  if (a.size() != b.size())
    throw std::invalid_argument("rbf_kernel: dimension mismatch");
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    s += d * d;
  }
  return std::exp(-gamma * s);
}

Dataset class_balance_bootstrap(const Dataset& d, std::uint64_t seed) {
  if (d.x.size() != d.y.size())
    throw std::invalid_argument("class_balance_bootstrap: ragged dataset");
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < d.y.size(); ++i)
    (d.y[i] > 0 ? pos : neg).push_back(i);
  if (pos.empty() || neg.empty())
    throw std::invalid_argument("class_balance_bootstrap: single class");
  Dataset out = d;
  if (pos.size() == neg.size()) return out;
  const std::vector<std::size_t>& minority = pos.size() < neg.size() ? pos : neg;
  std::size_t need = (pos.size() < neg.size() ? neg.size() : pos.size()) -
                     minority.size();
  Rng rng(mix_seed(seed, 0xba1a9ceull));
  for (std::size_t i = 0; i < need; ++i) {
    std::size_t pick = minority[rng.uniform_int(minority.size())];
    out.x.push_back(d.x[pick]);
    out.y.push_back(d.y[pick]);
  }
  return out;
}

double PlattParams::probability(double f) const {
  double fApB = f * a + b;
  /* Numerically safe logistic, in the style of the reference sigmoid. */
  if (fApB >= 0)
    return std::exp(-fApB) / (1.0 + std::exp(-fApB));
  return 1.0 / (1.0 + std::exp(fApB));
}

PlattParams fit_platt(const std::vector<double>& decision_values,
                      const std::vector<int>& labels) {
  if (decision_values.size() != labels.size() || decision_values.empty())
    throw std::invalid_argument("fit_platt: bad inputs");
  const std::size_t l = decision_values.size();
  double prior1 = 0, prior0 = 0;
  for (int y : labels) (y > 0 ? prior1 : prior0) += 1.0;

  const int max_iter = 100;
  const double min_step = 1e-10;
  const double sigma = 1e-12;
  const double eps = 1e-5;
  double hi_target = (prior1 + 1.0) / (prior1 + 2.0);
  double lo_target = 1.0 / (prior0 + 2.0);
  std::vector<double> t(l);
  for (std::size_t i = 0; i < l; ++i)
    t[i] = labels[i] > 0 ? hi_target : lo_target;

  double a = 0.0;
  double b = std::log((prior0 + 1.0) / (prior1 + 1.0));
  double fval = 0.0;
  for (std::size_t i = 0; i < l; ++i) {
    double fApB = decision_values[i] * a + b;
    if (fApB >= 0)
      fval += t[i] * fApB + std::log(1 + std::exp(-fApB));
    else
      fval += (t[i] - 1) * fApB + std::log(1 + std::exp(fApB));
  }

  for (int it = 0; it < max_iter; ++it) {
    double h11 = sigma, h22 = sigma, h21 = 0, g1 = 0, g2 = 0;
    for (std::size_t i = 0; i < l; ++i) {
      double fApB = decision_values[i] * a + b;
      double p, q;
      if (fApB >= 0) {
        p = std::exp(-fApB) / (1.0 + std::exp(-fApB));
        q = 1.0 / (1.0 + std::exp(-fApB));
      } else {
        p = 1.0 / (1.0 + std::exp(fApB));
        q = std::exp(fApB) / (1.0 + std::exp(fApB));
      }
      double d2 = p * q;
      h11 += decision_values[i] * decision_values[i] * d2;
      h22 += d2;
      h21 += decision_values[i] * d2;
      double d1 = t[i] - p;
      g1 += decision_values[i] * d1;
      g2 += d1;
    }
    if (std::abs(g1) < eps && std::abs(g2) < eps) break;

    double det = h11 * h22 - h21 * h21;
    double da = -(h22 * g1 - h21 * g2) / det;
    double db = -(-h21 * g1 + h11 * g2) / det;
    double gd = g1 * da + g2 * db;

    double step = 1.0;
    while (step >= min_step) {
      double na = a + step * da;
      double nb = b + step * db;
      double nf = 0.0;
      for (std::size_t i = 0; i < l; ++i) {
        double fApB = decision_values[i] * na + nb;
        if (fApB >= 0)
          nf += t[i] * fApB + std::log(1 + std::exp(-fApB));
        else
          nf += (t[i] - 1) * fApB + std::log(1 + std::exp(fApB));
      }
      if (nf < fval + 0.0001 * step * gd) {
        a = na;
        b = nb;
        fval = nf;
        break;
      }
      step /= 2.0;
    }
    if (step < min_step) break;
  }
  return {a, b};
}

namespace {

/* Row cache for the kernel matrix; counts one evaluation per entry
 * computed.  */
class KernelCache {
 public:
  KernelCache(const Dataset& d, double gamma, std::uint64_t budget)
      : d_(d), gamma_(gamma), budget_(budget) {}

  const std::vector<double>* row(std::size_t i) {
    auto it = rows_.find(i);
    if (it != rows_.end()) return &it->second;
    if (spent_ + d_.size() > budget_) return nullptr;
    spent_ += d_.size();
    std::vector<double> r(d_.size());
    for (std::size_t j = 0; j < d_.size(); ++j)
      r[j] = rbf_kernel(d_.x[i], d_.x[j], gamma_);
    return &rows_.emplace(i, std::move(r)).first->second;
  }

  std::uint64_t spent() const { return spent_; }

 private:
  const Dataset& d_;
  double gamma_;
  std::uint64_t budget_;
  std::uint64_t spent_ = 0;
  std::unordered_map<std::size_t, std::vector<double>> rows_;
};

struct SmoResult {
  std::vector<double> alpha;
  double bias = 0;
  bool converged = false;
  std::uint64_t kernel_evals = 0;
  double dual_objective = 0;
};

/* Maximal-violating-pair SMO on
 *   min 1/2 a'Qa - e'a,  0 <= a <= C,  y'a = 0,  Q_ij = y_i y_j K_ij. */
SmoResult smo_solve(const Dataset& d, double c, double gamma, double tol,
                    std::uint64_t budget) {
  const std::size_t n = d.size();
  SmoResult res;
  res.alpha.assign(n, 0.0);
  std::vector<double> grad(n, -1.0);
  KernelCache cache(d, gamma, budget);

  auto is_up = [&](std::size_t t) {
    return (d.y[t] > 0 && res.alpha[t] < c) || (d.y[t] < 0 && res.alpha[t] > 0);
  };
  auto is_low = [&](std::size_t t) {
    return (d.y[t] < 0 && res.alpha[t] < c) || (d.y[t] > 0 && res.alpha[t] > 0);
  };

  bool out_of_budget = false;
  while (true) {
    double gmax = -std::numeric_limits<double>::infinity();
    double gmin = std::numeric_limits<double>::infinity();
    std::size_t i = n, j = n;
    for (std::size_t t = 0; t < n; ++t) {
      double v = -d.y[t] * grad[t];
      if (is_up(t) && v > gmax) {
        gmax = v;
        i = t;
      }
      if (is_low(t) && v < gmin) {
        gmin = v;
        j = t;
      }
    }
    if (i == n || j == n || gmax - gmin < tol) {
      res.converged = true;
      break;
    }

    const std::vector<double>* ki = cache.row(i);
    const std::vector<double>* kj = cache.row(j);
    if (!ki || !kj) {
      out_of_budget = true;
      break;
    }

    /* Move along alpha_i += y_i*t, alpha_j -= y_j*t, which keeps
     * y'alpha constant.  Curvature along this direction is
     * K_ii + K_jj - 2 K_ij.  */
    double yi = d.y[i], yj = d.y[j];
    double quad = (*ki)[i] + (*kj)[j] - 2.0 * (*ki)[j];
    if (quad <= 0) quad = 1e-12;
    double step = (-yi * grad[i] + yj * grad[j]) / quad;

    double t_lo, t_hi;
    if (yi > 0) {
      t_lo = -res.alpha[i];
      t_hi = c - res.alpha[i];
    } else {
      t_lo = res.alpha[i] - c;
      t_hi = res.alpha[i];
    }
    if (yj > 0) {
      t_lo = std::max(t_lo, res.alpha[j] - c);
      t_hi = std::min(t_hi, res.alpha[j]);
    } else {
      t_lo = std::max(t_lo, -res.alpha[j]);
      t_hi = std::min(t_hi, c - res.alpha[j]);
    }
    step = std::clamp(step, t_lo, t_hi);
    if (step == 0) {
      res.converged = true;
      break;
    }

    res.alpha[i] += yi * step;
    res.alpha[j] -= yj * step;
    double dai = yi * step;
    double daj = -yj * step;
    for (std::size_t t = 0; t < n; ++t)
      grad[t] += d.y[t] * (yi * (*ki)[t] * dai + yj * (*kj)[t] * daj);
  }

  if (out_of_budget) res.converged = false;

  /* Bias: average of -y_t * grad_t over free support vectors; with no
   * free vector, the midpoint of the KKT interval from bounded points. */
  double rho_sum = 0;
  int rho_n = 0;
  double lb = -std::numeric_limits<double>::infinity();
  double ub = std::numeric_limits<double>::infinity();
  for (std::size_t t = 0; t < n; ++t) {
    double v = -d.y[t] * grad[t];
    if (res.alpha[t] > 1e-12 && res.alpha[t] < c - 1e-12) {
      rho_sum += v;
      ++rho_n;
    } else {
      if (is_up(t)) lb = std::max(lb, v);
      if (is_low(t)) ub = std::min(ub, v);
    }
  }
  if (rho_n > 0) {
    res.bias = rho_sum / rho_n;
  } else if (std::isfinite(lb) && std::isfinite(ub)) {
    res.bias = (lb + ub) / 2.0;
  } else if (std::isfinite(lb)) {
    res.bias = lb;
  } else if (std::isfinite(ub)) {
    res.bias = ub;
  } else {
    res.bias = 0.0;
  }

  /* f(a) = 1/2 a'Qa - e'a = 1/2 a'(grad - e) with grad = Qa - e. */
  double obj = 0;
  for (std::size_t t = 0; t < n; ++t)
    obj += 0.5 * res.alpha[t] * (grad[t] - 1.0);
  res.dual_objective = obj;
  res.kernel_evals = cache.spent();
  return res;
}

}  // namespace

double SvmModel::decision_value(std::span<const double> x) const {
  double f = bias;
  for (std::size_t i = 0; i < support_vectors.size(); ++i)
    f += dual_coef[i] * rbf_kernel(support_vectors[i], x, gamma);
  return f;
}

SvmModel train_svm(const Dataset& d, const SvmConfig& cfg) {
  if (d.x.empty() || d.x.size() != d.y.size())
    throw std::invalid_argument("train_svm: empty or ragged dataset");
  for (int y : d.y)
    if (y != 1 && y != -1)
      throw std::invalid_argument("train_svm: labels must be +1/-1");
  double gamma = cfg.gamma > 0
                     ? cfg.gamma
                     : 1.0 / static_cast<double>(d.x[0].size());

  SmoResult smo = smo_solve(d, cfg.c, gamma, cfg.kkt_tol,
                            cfg.max_kernel_evals);

  SvmModel m;
  m.gamma = gamma;
  m.c = cfg.c;
  m.converged = smo.converged;
  m.kernel_evals = smo.kernel_evals;
  m.dual_objective = smo.dual_objective;
  m.bias = smo.bias;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (smo.alpha[i] > 1e-12) {
      m.support_vectors.push_back(d.x[i]);
      m.dual_coef.push_back(smo.alpha[i] * d.y[i]);
    }
  }

  if (cfg.fit_platt && d.size() >= 6) {
    /* Held-out decision values from an internal stratified k-fold. */
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < d.size(); ++i)
      (d.y[i] > 0 ? pos : neg).push_back(i);
    if (!pos.empty() && !neg.empty()) {
      Rng rng(mix_seed(cfg.seed, 0x91a77ull));
      for (auto* v : {&pos, &neg})
        for (std::size_t i = v->size(); i > 1; --i)
          std::swap((*v)[i - 1], (*v)[rng.uniform_int(i)]);
      int folds = std::max(2, cfg.platt_folds);
      std::vector<int> fold_of(d.size(), 0);
      for (std::size_t i = 0; i < pos.size(); ++i)
        fold_of[pos[i]] = static_cast<int>(i % folds);
      for (std::size_t i = 0; i < neg.size(); ++i)
        fold_of[neg[i]] = static_cast<int>(i % folds);

      std::vector<double> dec;
      std::vector<int> lab;
      for (int f = 0; f < folds; ++f) {
        Dataset train;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (fold_of[i] == f) {
            held.push_back(i);
          } else {
            train.x.push_back(d.x[i]);
            train.y.push_back(d.y[i]);
          }
        }
        bool two_class = false, saw_pos = false, saw_neg = false;
        for (int y : train.y) (y > 0 ? saw_pos : saw_neg) = true;
        two_class = saw_pos && saw_neg;
        if (train.x.empty() || held.empty() || !two_class) continue;
        SvmConfig sub = cfg;
        sub.fit_platt = false;
        SvmModel fm = train_svm(train, sub);
        for (std::size_t i : held) {
          dec.push_back(fm.decision_value(d.x[i]));
          lab.push_back(d.y[i]);
        }
      }
      if (!dec.empty()) {
        m.platt = fit_platt(dec, lab);
        m.has_platt = true;
      }
    }
  }
  return m;
}

Prediction predict_proba(const SvmModel& m, std::span<const double> x,
                         double threshold) {
  Prediction p;
  p.decision_value = m.decision_value(x);
  p.label = p.decision_value >= 0 ? Decision::Allow : Decision::Deny;
  double p_allow =
      m.has_platt ? m.platt.probability(p.decision_value)
                  : 1.0 / (1.0 + std::exp(-p.decision_value));
  p.probability = p.label == Decision::Allow ? p_allow : 1.0 - p_allow;
  /* A calibration/sign disagreement lands on the uncertainty floor. */
  if (p.probability < 0.5) p.probability = 0.5;
  p.confidence = p.probability > threshold ? Confidence::High : Confidence::Low;
  return p;
}

GridResult grid_search(const Dataset& d, const HyperGrid& grid,
                       const SvmConfig& base, std::uint64_t seed) {
  if (d.x.empty()) throw std::invalid_argument("grid_search: empty dataset");
  if (grid.folds < 2) throw std::invalid_argument("grid_search: folds < 2");

  std::vector<double> gammas = grid.gamma_values;
  if (gammas.empty()) {
    double inv_d = 1.0 / static_cast<double>(d.x[0].size());
    gammas = {0.01, 0.1, inv_d, 1.0};
  }

  /* One shared seeded fold assignment for every cell. */
  std::vector<std::size_t> order(d.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix_seed(seed, 0x9c1dull));
  for (std::size_t i = order.size(); i > 1; --i)
    std::swap(order[i - 1], order[rng.uniform_int(i)]);
  std::vector<int> fold_of(d.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    fold_of[order[i]] = static_cast<int>(i % grid.folds);

  GridResult res;
  res.best_accuracy = -1;
  for (double c : grid.c_values) {
    for (double g : gammas) {
      GridCell cell;
      cell.c = c;
      cell.gamma = g;
      long correct = 0, total = 0;
      for (int f = 0; f < grid.folds; ++f) {
        Dataset train;
        std::vector<std::size_t> held;
        for (std::size_t i = 0; i < d.size(); ++i) {
          if (fold_of[i] == f) held.push_back(i);
          else {
            train.x.push_back(d.x[i]);
            train.y.push_back(d.y[i]);
          }
        }
        bool saw_pos = false, saw_neg = false;
        for (int y : train.y) (y > 0 ? saw_pos : saw_neg) = true;
        if (held.empty() || !saw_pos || !saw_neg) continue;
        SvmConfig cfg = base;
        cfg.c = c;
        cfg.gamma = g;
        cfg.fit_platt = false;
        SvmModel m = train_svm(train, cfg);
        for (std::size_t i : held) {
          int pred = m.decision_value(d.x[i]) >= 0 ? 1 : -1;
          if (pred == d.y[i]) ++correct;
          ++total;
        }
        ++cell.folds_evaluated;
      }
      cell.mean_accuracy =
          total > 0 ? static_cast<double>(correct) / static_cast<double>(total) : 0;
      if (cell.mean_accuracy > res.best_accuracy) {
        res.best_accuracy = cell.mean_accuracy;
        res.best_c = c;
        res.best_gamma = g;
      }
      res.cells.push_back(cell);
    }
  }
  return res;
}

}  // namespace permsim::learn
