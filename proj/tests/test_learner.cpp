#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <map>

#include "permsim/learner.hpp"
#include "permsim/rng.hpp"

using namespace permsim;
using namespace permsim::learn;

namespace {

PermissionRequest req(const std::string& app, PermissionType perm, bool vis,
                      const std::string& fg, std::int64_t t,
                      const std::string& user = "u000") {
  PermissionRequest r;
  r.user_id = user;
  r.app_id = app;
  r.permission = perm;
  r.visibility = vis;
  r.foreground_app = fg;
  r.timestamp = t;
  return r;
}

/* Alternating-visibility trace over a few apps; truth allows visible
 * requests and denies background ones.  */
Trace contextual_trace(const std::string& user, int days) {
  Trace t;
  t.user_id = user;
  t.duration_days = days;
  std::int64_t at = 10;
  for (int d = 0; d < days; ++d) {
    for (int i = 0; i < 12; ++i) {
      const char* app = i % 3 == 0 ? "maps" : (i % 3 == 1 ? "chat" : "cam");
      PermissionType perm = i % 3 == 0 ? PermissionType::AccessFineLocation
                            : i % 3 == 1 ? PermissionType::ReadSms
                                         : PermissionType::ReadCallLog;
      bool vis = i % 2 == 0;
      PermissionRequest r =
          req(app, perm, vis, vis ? app : "home",
              static_cast<std::int64_t>(d) * 86400 + at + i * 600, user);
      t.events.push_back({r.timestamp, r});
    }
  }
  return t;
}

policy::TruthFn visibility_truth() {
  return [](const PermissionRequest& r) {
    return r.visibility ? Decision::Allow : Decision::Deny;
  };
}

Prediction pred_with(double probability) {
  Prediction p;
  p.probability = probability;
  p.confidence = probability > 0.6 ? Confidence::High : Confidence::Low;
  return p;
}

}  // namespace

TEST_CASE("class balance bootstrap resamples the minority with replacement") {
  Dataset d;
  for (int i = 0; i < 5; ++i) {
    d.x.push_back({static_cast<double>(i)});
    d.y.push_back(1);
  }
  d.x.push_back({100.0});
  d.y.push_back(-1);
  d.x.push_back({200.0});
  d.y.push_back(-1);

  Dataset out = class_balance_bootstrap(d, 42);
  REQUIRE(out.size() == 10);
  /* original rows come first, untouched */
  for (std::size_t i = 0; i < d.size(); ++i) {
    CHECK(out.x[i] == d.x[i]);
    CHECK(out.y[i] == d.y[i]);
  }
  /* appended rows are copies of minority examples */
  for (std::size_t i = d.size(); i < out.size(); ++i) {
    CHECK(out.y[i] == -1);
    CHECK((out.x[i] == std::vector<double>{100.0} ||
           out.x[i] == std::vector<double>{200.0}));
  }

  Dataset again = class_balance_bootstrap(d, 42);
  CHECK(again.x == out.x);
  CHECK(again.y == out.y);
}

TEST_CASE("class balance bootstrap leaves balanced data alone") {
  Dataset d;
  d.x = {{1.0}, {2.0}};
  d.y = {1, -1};
  Dataset out = class_balance_bootstrap(d, 7);
  CHECK(out.x == d.x);
  CHECK(out.y == d.y);
}

TEST_CASE("class balance bootstrap rejects degenerate input") {
  Dataset single;
  single.x = {{1.0}, {2.0}};
  single.y = {1, 1};
  CHECK_THROWS_AS(class_balance_bootstrap(single, 1), std::invalid_argument);

  Dataset ragged;
  ragged.x = {{1.0}};
  ragged.y = {1, -1};
  CHECK_THROWS_AS(class_balance_bootstrap(ragged, 1), std::invalid_argument);
}

TEST_CASE("sgd first update matches the closed form") {
  SgdModel m(1, SgdConfig{});
  std::vector<double> x{2.0};
  m.update(x, 1);
  /* p = 0.5, g = -0.5, eta = 0.1: w += 0.1 * 0.5 * 2, b += 0.1 * 0.5 */
  CHECK(m.weights()[0] == doctest::Approx(0.1));
  CHECK(m.bias() == doctest::Approx(0.05));
  CHECK(m.steps() == 1);
}

TEST_CASE("sgd step size decays with the schedule") {
  SgdConfig cfg;
  cfg.eta0 = 0.5;
  cfg.lambda = 0.2;
  SgdModel m(1, cfg);
  std::vector<double> zero{0.0};
  /* with x = 0 only the bias moves: b -= eta_t * (p - y) */
  m.update(zero, 0);  /* t=0: eta = 0.5, p = 0.5 -> b = -0.25 */
  CHECK(m.bias() == doctest::Approx(-0.25));
  double p1 = 1.0 / (1.0 + std::exp(0.25));
  double eta1 = 0.5 / (1.0 + 0.2 * 0.5 * 1.0);
  m.update(zero, 0);
  CHECK(m.bias() == doctest::Approx(-0.25 - eta1 * p1));
}

TEST_CASE("sgd gradient matches central finite differences") {
  SgdConfig cfg;
  cfg.lambda = 1e-4;
  std::vector<double> w{0.3, -0.2, 0.7};
  std::vector<double> x{1.2, -0.5, 2.0};
  const double h = 1e-6;

  for (int y : {0, 1}) {
    SgdModel m(3, cfg);
    m.set_weights(w, 0.1);
    double z = 0.1;
    for (int j = 0; j < 3; ++j) z += w[j] * x[j];
    double p = 1.0 / (1.0 + std::exp(-z));

    for (int j = 0; j < 3; ++j) {
      double analytic = (p - y) * x[j] + cfg.lambda * w[j];
      std::vector<double> wp = w, wm = w;
      wp[j] += h;
      wm[j] -= h;
      SgdModel mp(3, cfg), mm(3, cfg);
      mp.set_weights(wp, 0.1);
      mm.set_weights(wm, 0.1);
      double numeric = (mp.point_loss(x, y) - mm.point_loss(x, y)) / (2 * h);
      CHECK(std::abs(numeric - analytic) / std::max(1e-8, std::abs(analytic)) <
            1e-6);
    }

    /* bias gradient, unregularized */
    double analytic_b = p - y;
    SgdModel bp(3, cfg), bm(3, cfg);
    bp.set_weights(w, 0.1 + h);
    bm.set_weights(w, 0.1 - h);
    double numeric_b = (bp.point_loss(x, y) - bm.point_loss(x, y)) / (2 * h);
    CHECK(std::abs(numeric_b - analytic_b) / std::abs(analytic_b) < 1e-6);
  }
}

TEST_CASE("sgd learns a separable rule") {
  SgdModel m(2, SgdConfig{});
  Rng rng(0x5dcull);
  for (int epoch = 0; epoch < 300; ++epoch)
    for (int i = 0; i < 20; ++i) {
      double side = i % 2 == 0 ? 1.0 : -1.0;
      std::vector<double> x{side + rng.normal(0.0, 0.1), rng.normal(0.0, 1.0)};
      m.update(x, side > 0 ? 1 : 0);
    }
  CHECK(m.probability(std::vector<double>{1.0, 0.0}) > 0.9);
  CHECK(m.probability(std::vector<double>{-1.0, 0.0}) < 0.1);

  Prediction pr = m.predict(std::vector<double>{1.0, 0.0});
  CHECK(pr.label == Decision::Allow);
  CHECK(pr.probability > 0.9);
  CHECK(pr.confidence == Confidence::High);
  pr = m.predict(std::vector<double>{-1.0, 0.0});
  CHECK(pr.label == Decision::Deny);
  CHECK(pr.probability > 0.9);
}

TEST_CASE("sgd validates inputs") {
  SgdModel m(2, SgdConfig{});
  std::vector<double> wrong{1.0};
  std::vector<double> ok{1.0, 2.0};
  CHECK_THROWS_AS(m.update(wrong, 1), std::invalid_argument);
  CHECK_THROWS_AS(m.update(ok, 2), std::invalid_argument);
  CHECK_THROWS_AS(m.probability(wrong), std::invalid_argument);
}

TEST_CASE("bootstrap strategy rejects the user one-hot feature set") {
  BootstrapOptions opt;
  opt.set = feat::FeatureSet::R1;
  Trace t = contextual_trace("u000", 2);
  CHECK_THROWS_AS(
      run_bootstrap_strategy({}, t, 0, visibility_truth(), opt),
      std::invalid_argument);
}

TEST_CASE("bootstrap strategy trains on others plus k own prompts") {
  policy::TruthFn truth = visibility_truth();

  std::vector<feat::LabeledRow> global;
  for (int u = 1; u <= 3; ++u) {
    Trace t = contextual_trace("u00" + std::to_string(u), 4);
    feat::EsmCollection c = feat::collect_first_use_rows(t, u, truth, 50);
    for (feat::LabeledRow& r : c.rows) global.push_back(std::move(r));
  }
  REQUIRE(global.size() >= 12);

  Trace user = contextual_trace("u000", 6);
  BootstrapOptions opt;
  opt.ks = {0, 2, 6, 99};
  opt.svm.c = 10.0;
  opt.svm.seed = 5;
  opt.keep_predictions = true;

  std::vector<BootstrapPoint> pts =
      run_bootstrap_strategy(global, user, 0, truth, opt);
  REQUIRE(pts.size() == 4);

  /* six apv combos exist, so k clamps there */
  CHECK(pts[0].k == 0);
  CHECK(pts[1].k == 2);
  CHECK(pts[2].k == 6);
  CHECK(pts[3].k == 6);

  /* k = 0 tests every scored request from the trace start: 6 days of
   * 12 requests each, all revealing, under the default 200-row cap */
  CHECK(pts[0].n_test == 72);
  for (const BootstrapPoint& pt : pts) {
    REQUIRE(pt.n_test > 0);
    CHECK(static_cast<long>(pt.predictions.size()) == pt.n_test);
    CHECK(static_cast<long>(pt.truths.size()) == pt.n_test);
  }

  /* the visibility rule is learnable; AOFU-AP cannot key on it */
  const BootstrapPoint& full = pts[2];
  CHECK(full.model_accuracy >= 0.9);
  CHECK(full.model_accuracy > full.aofu_ap_accuracy);

  std::vector<BootstrapPoint> again =
      run_bootstrap_strategy(global, user, 0, truth, opt);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(again[i].model_accuracy == pts[i].model_accuracy);
    CHECK(again[i].aofu_ap_accuracy == pts[i].aofu_ap_accuracy);
    CHECK(again[i].n_test == pts[i].n_test);
  }
}

TEST_CASE("bootstrap strategy caps test rows by stride sampling") {
  policy::TruthFn truth = visibility_truth();
  std::vector<feat::LabeledRow> global;
  for (int u = 1; u <= 2; ++u) {
    Trace t = contextual_trace("u00" + std::to_string(u), 3);
    feat::EsmCollection c = feat::collect_first_use_rows(t, u, truth, 50);
    for (feat::LabeledRow& r : c.rows) global.push_back(std::move(r));
  }
  Trace user = contextual_trace("u000", 8);

  BootstrapOptions opt;
  opt.ks = {2};
  opt.max_test_rows = 10;
  std::vector<BootstrapPoint> pts =
      run_bootstrap_strategy(global, user, 0, truth, opt);
  REQUIRE(pts.size() == 1);
  CHECK(pts[0].n_test == 10);

  opt.max_test_rows = 0;  /* 0 disables the cap */
  pts = run_bootstrap_strategy(global, user, 0, truth, opt);
  CHECK(pts[0].n_test > 10);
}

TEST_CASE("low confidence rule any flags a single weak prediction") {
  std::map<std::string, std::vector<Prediction>> per_user;
  per_user["steady"] = {pred_with(0.95), pred_with(0.8), pred_with(0.7)};
  per_user["wobbly"] = {pred_with(0.95), pred_with(0.55)};
  per_user["empty"] = {};

  LowConfidenceOptions opt;
  LowConfidenceReport rep = identify_low_confidence_users(per_user, opt);
  CHECK(rep.flagged.count("wobbly") == 1);
  CHECK(rep.flagged.count("steady") == 0);
  CHECK(rep.flagged.count("empty") == 0);
  CHECK(rep.low_share["steady"] == 0.0);
  CHECK(rep.low_share["wobbly"] == doctest::Approx(0.5));
  CHECK(rep.low_share["empty"] == 0.0);
  CHECK(rep.prompt_cap_per_combo == 2);
}

TEST_CASE("probability exactly at the threshold counts as low") {
  std::map<std::string, std::vector<Prediction>> per_user;
  per_user["edge"] = {pred_with(0.6)};
  LowConfidenceReport rep =
      identify_low_confidence_users(per_user, LowConfidenceOptions{});
  CHECK(rep.flagged.count("edge") == 1);
}

TEST_CASE("low confidence proportion rule uses a strict share cutoff") {
  std::map<std::string, std::vector<Prediction>> per_user;
  per_user["quarter"] = {pred_with(0.9), pred_with(0.9), pred_with(0.9),
                         pred_with(0.5)};
  per_user["half"] = {pred_with(0.9), pred_with(0.5)};
  per_user["exact"] = {pred_with(0.9), pred_with(0.9), pred_with(0.9),
                       pred_with(0.5), pred_with(0.5)};

  LowConfidenceOptions opt;
  opt.rule = LowConfidenceRule::Proportion;
  opt.max_low_share = 0.4;
  LowConfidenceReport rep = identify_low_confidence_users(per_user, opt);
  CHECK(rep.flagged.count("quarter") == 0);   /* 0.25 */
  CHECK(rep.flagged.count("half") == 1);      /* 0.50 */
  CHECK(rep.flagged.count("exact") == 0);     /* 0.40, not strictly over */
  CHECK(rep.low_share["exact"] == doctest::Approx(0.4));
}
