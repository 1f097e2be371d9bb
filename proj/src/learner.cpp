#include "permsim/learner.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "permsim/policies.hpp"
#include "permsim/rng.hpp"

namespace permsim::learn {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

void SgdModel::update(std::span<const double> x, int y01) {
  if (x.size() != w_.size())
    throw std::invalid_argument("sgd_update: dimension mismatch");
  if (y01 != 0 && y01 != 1)
    throw std::invalid_argument("sgd_update: label must be 0/1");
  double eta = cfg_.eta0 / (1.0 + cfg_.lambda * cfg_.eta0 *
                                      static_cast<double>(t_));
  double p = sigmoid(b_ + std::inner_product(x.begin(), x.end(), w_.begin(), 0.0));
  double g = p - static_cast<double>(y01);
  for (std::size_t j = 0; j < w_.size(); ++j)
    w_[j] -= eta * (g * x[j] + cfg_.lambda * w_[j]);
  b_ -= eta * g;
  ++t_;
}

double SgdModel::probability(std::span<const double> x) const {
  if (x.size() != w_.size())
    throw std::invalid_argument("sgd probability: dimension mismatch");
  return sigmoid(b_ + std::inner_product(x.begin(), x.end(), w_.begin(), 0.0));
}

Prediction SgdModel::predict(std::span<const double> x, double threshold) const {
  Prediction p;
  double pa = probability(x);
  p.decision_value = b_ + std::inner_product(x.begin(), x.end(), w_.begin(), 0.0);
  p.label = pa >= 0.5 ? Decision::Allow : Decision::Deny;
  p.probability = p.label == Decision::Allow ? pa : 1.0 - pa;
  if (p.probability < 0.5) p.probability = 0.5;
  p.confidence = p.probability > threshold ? Confidence::High : Confidence::Low;
  return p;
}

double SgdModel::point_loss(std::span<const double> x, int y01) const {
  double p = probability(x);
  double eps = 1e-12;
  double ll = y01 == 1 ? -std::log(std::max(p, eps))
                       : -std::log(std::max(1.0 - p, eps));
  double reg = 0;
  for (double w : w_) reg += w * w;
  return ll + 0.5 * cfg_.lambda * reg;
}

std::vector<BootstrapPoint> run_bootstrap_strategy(
    const std::vector<feat::LabeledRow>& global_rows, const Trace& user_trace,
    int user_index, const policy::TruthFn& truth, const BootstrapOptions& opt) {
  if (opt.set == feat::FeatureSet::R1)
    throw std::invalid_argument(
        "run_bootstrap_strategy: user one-hot cannot cover an unseen user");
  feat::EsmCollection first_use = feat::collect_first_use_rows(
      user_trace, user_index, truth,
      opt.ks.empty() ? 12 : *std::max_element(opt.ks.begin(), opt.ks.end()));

  feat::InputSpec spec = feat::input_spec(opt.set, 0);
  std::vector<bool> mask = feat::scaling_mask(spec);

  /* AOFU-AP decisions are independent of k; simulate once. */
  policy::PolicySpec ap;
  ap.kind = policy::PolicyKind::Aofu;
  ap.keying = KeySpec::parse("ap");
  policy::DecisionLog ap_log = policy::simulate_policy(ap, user_trace, truth);

  std::vector<BootstrapPoint> out;
  for (int k : opt.ks) {
    if (k < 0) throw std::invalid_argument("run_bootstrap_strategy: k < 0");
    int kk = std::min<int>(k, static_cast<int>(first_use.rows.size()));
    BootstrapPoint pt;
    pt.k = kk;

    /* Aggregates the deployed model would hold: exactly the first kk
     * prompt responses.  */
    feat::AggregateState frozen;
    std::int64_t t_after = -1;
    for (int i = 0; i < kk; ++i) {
      const feat::LabeledRow& r = first_use.rows[static_cast<std::size_t>(i)];
      frozen.update(r.request, r.label);
      t_after = r.t;
    }

    std::vector<feat::LabeledRow> test_rows = feat::collect_rows_after(
        user_trace, user_index, truth, t_after, frozen);
    if (opt.max_test_rows > 0 &&
        static_cast<int>(test_rows.size()) > opt.max_test_rows) {
      std::vector<feat::LabeledRow> sampled;
      sampled.reserve(static_cast<std::size_t>(opt.max_test_rows));
      double stride = static_cast<double>(test_rows.size()) /
                      static_cast<double>(opt.max_test_rows);
      for (int i = 0; i < opt.max_test_rows; ++i)
        sampled.push_back(test_rows[static_cast<std::size_t>(i * stride)]);
      test_rows = std::move(sampled);
    }
    pt.n_test = static_cast<long>(test_rows.size());
    if (test_rows.empty()) {
      out.push_back(std::move(pt));
      continue;
    }

    Dataset train;
    for (const feat::LabeledRow& r : global_rows) {
      train.x.push_back(feat::build_input(r.x, spec, 0));
      train.y.push_back(r.label == Decision::Allow ? 1 : -1);
    }
    for (int i = 0; i < kk; ++i) {
      const feat::LabeledRow& r = first_use.rows[static_cast<std::size_t>(i)];
      train.x.push_back(feat::build_input(r.x, spec, 0));
      train.y.push_back(r.label == Decision::Allow ? 1 : -1);
    }

    feat::ScalingStats scaling = feat::fit_scaling(train.x, mask);
    for (auto& row : train.x) row = feat::apply_scaling(scaling, row);

    Dataset balanced = class_balance_bootstrap(
        train, mix_seed(opt.seed, static_cast<std::uint64_t>(k)));
    SvmModel model = train_svm(balanced, opt.svm);

    long model_ok = 0, aofu_ok = 0;
    for (const feat::LabeledRow& r : test_rows) {
      std::vector<double> x =
          feat::apply_scaling(scaling, feat::build_input(r.x, spec, 0));
      Prediction pred = predict_proba(model, x, opt.threshold);
      if (pred.label == r.label) ++model_ok;
      if (opt.keep_predictions) {
        pt.predictions.push_back(pred);
        pt.truths.push_back(r.label);
      }
      const policy::DecisionLogEntry& e =
          ap_log.entries[static_cast<std::size_t>(r.ordinal)];
      Decision aofu_d = e.policy_decision == policy::PolicyDecision::Allow
                            ? Decision::Allow
                            : Decision::Deny;
      if (aofu_d == r.label) ++aofu_ok;
    }
    pt.model_accuracy = static_cast<double>(model_ok) / pt.n_test;
    pt.aofu_ap_accuracy = static_cast<double>(aofu_ok) / pt.n_test;
    out.push_back(std::move(pt));
  }
  return out;
}

LowConfidenceReport identify_low_confidence_users(
    const std::map<std::string, std::vector<Prediction>>& per_user,
    const LowConfidenceOptions& opt) {
  LowConfidenceReport rep;
  rep.prompt_cap_per_combo = opt.prompt_cap_per_combo;
  for (const auto& [user, preds] : per_user) {
    if (preds.empty()) {
      rep.low_share[user] = 0.0;
      continue;
    }
    long low = 0;
    for (const Prediction& p : preds)
      if (!(p.probability > opt.threshold)) ++low;
    double share = static_cast<double>(low) / static_cast<double>(preds.size());
    rep.low_share[user] = share;
    bool flag = opt.rule == LowConfidenceRule::Any
                    ? low > 0
                    : share > opt.max_low_share;
    if (flag) rep.flagged.insert(user);
  }
  return rep;
}

}  // namespace permsim::learn
