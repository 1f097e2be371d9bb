#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "permsim/core.hpp"
#include "permsim/features.hpp"

namespace permsim::learn {

/* Labels are +1 (Allow) / -1 (Deny). */
struct Dataset {
  std::vector<std::vector<double>> x;
  std::vector<int> y;

  std::size_t size() const { return x.size(); }
};

double rbf_kernel(std::span<const double> a, std::span<const double> b,
                  double gamma);

/* Resamples the minority class with replacement up to the majority
 * count.  Throws if only one class is present.  */
Dataset class_balance_bootstrap(const Dataset& d, std::uint64_t seed);

/* Sigmoid P(allow | f) = 1 / (1 + exp(a*f + b)). */
struct PlattParams {
  double a = 0;
  double b = 0;
  double probability(double f) const;
};

/* Newton fit with prior-corrected targets on held-out decision values. */
PlattParams fit_platt(const std::vector<double>& decision_values,
                      const std::vector<int>& labels);

struct SvmConfig {
  double c = 10.0;
  double gamma = 0;  /* <= 0 resolves to 1/dim at train time */
  double kkt_tol = 1e-3;
  std::uint64_t max_kernel_evals = 40'000'000;
  bool fit_platt = true;
  int platt_folds = 3;
  std::uint64_t seed = 1;
};

struct SvmModel {
  std::vector<std::vector<double>> support_vectors;
  std::vector<double> dual_coef;  /* alpha_i * y_i */
  double bias = 0;
  double gamma = 0;
  double c = 0;
  PlattParams platt;
  bool has_platt = false;
  bool converged = false;
  std::uint64_t kernel_evals = 0;
  double dual_objective = 0;

  double decision_value(std::span<const double> x) const;
};

/* SMO with maximal-violating-pair working set selection, stopping at
 * the KKT tolerance.  If the kernel evaluation budget runs out first
 * the model is returned with converged = false and the spent budget.  */
SvmModel train_svm(const Dataset& d, const SvmConfig& cfg);

enum class Confidence { High, Low };

struct Prediction {
  Decision label = Decision::Deny;
  double probability = 0.5;  /* of the predicted class, in [0.5, 1] */
  Confidence confidence = Confidence::Low;
  double decision_value = 0;
};

/* Label from the decision-value sign, probability through the Platt
 * sigmoid folded onto the predicted class, High confidence iff the
 * probability strictly exceeds the threshold.  */
Prediction predict_proba(const SvmModel& m, std::span<const double> x,
                         double threshold = 0.6);

struct HyperGrid {
  std::vector<double> c_values{0.1, 1, 10, 100};
  std::vector<double> gamma_values;  /* empty: {0.01, 0.1, 1/d, 1} */
  int folds = 5;
};

struct GridCell {
  double c = 0, gamma = 0;
  double mean_accuracy = 0;
  int folds_evaluated = 0;
};

struct GridResult {
  double best_c = 0, best_gamma = 0;
  double best_accuracy = 0;
  std::vector<GridCell> cells;
};

/* Exhaustive k-fold cross-validated accuracy over the grid.  Ties break
 * toward the smaller C, then the smaller gamma.  */
GridResult grid_search(const Dataset& d, const HyperGrid& grid,
                       const SvmConfig& base, std::uint64_t seed);

struct SgdConfig {
  double eta0 = 0.1;
  double lambda = 1e-4;
};

/* Online logistic regression with the decaying step size
 * eta_t = eta0 / (1 + lambda * eta0 * t).  */
class SgdModel {
 public:
  SgdModel(std::size_t dim, SgdConfig cfg) : w_(dim, 0.0), cfg_(cfg) {}

  void update(std::span<const double> x, int y01);
  double probability(std::span<const double> x) const;
  Prediction predict(std::span<const double> x, double threshold = 0.6) const;

  /* Regularized log loss of a single point at the current weights. */
  double point_loss(std::span<const double> x, int y01) const;

  const std::vector<double>& weights() const { return w_; }
  double bias() const { return b_; }
  std::uint64_t steps() const { return t_; }
  void set_weights(std::vector<double> w, double b) {
    w_ = std::move(w);
    b_ = b;
  }

 private:
  std::vector<double> w_;
  double b_ = 0;
  std::uint64_t t_ = 0;
  SgdConfig cfg_;
};

/* Hybrid bootstrap: train on everyone else's labeled rows plus the new
 * user's first k first-use responses; test on the user's scored
 * requests after the k-th prompt.  The paired AOFU-AP baseline is
 * scored on the identical test rows (its own prompts count as correct,
 * which only favors the baseline).  */
struct BootstrapPoint {
  int k = 0;
  long n_test = 0;
  double model_accuracy = 0;
  double aofu_ap_accuracy = 0;
  std::vector<Prediction> predictions;  /* test-row order */
  std::vector<Decision> truths;
};

struct BootstrapOptions {
  std::vector<int> ks{1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12};
  feat::FeatureSet set = feat::FeatureSet::R2A;
  SvmConfig svm;
  int max_test_rows = 200;
  std::uint64_t seed = 1;
  double threshold = 0.6;
  bool keep_predictions = false;
};

std::vector<BootstrapPoint> run_bootstrap_strategy(
    const std::vector<feat::LabeledRow>& global_rows, const Trace& user_trace,
    int user_index, const policy::TruthFn& truth, const BootstrapOptions& opt);

/* Flags users whose predictions sit below the confidence threshold.
 * Rule Any flags on a single low-confidence prediction; Proportion
 * flags when the low share strictly exceeds max_low_share.  Flagged
 * users fall back to prompting, capped per combo.  */
enum class LowConfidenceRule { Any, Proportion };

struct LowConfidenceOptions {
  double threshold = 0.6;
  LowConfidenceRule rule = LowConfidenceRule::Any;
  double max_low_share = 0.0;
  int prompt_cap_per_combo = 2;
};

struct LowConfidenceReport {
  std::set<std::string> flagged;
  std::map<std::string, double> low_share;
  int prompt_cap_per_combo = 2;
};

LowConfidenceReport identify_low_confidence_users(
    const std::map<std::string, std::vector<Prediction>>& per_user,
    const LowConfidenceOptions& opt);

}  // namespace permsim::learn
