#include "permsim/evalharness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "permsim/protocol.hpp"
#include "permsim/rng.hpp"

namespace permsim::eval {

namespace {

using nlohmann::json;

double safe_div(double num, double den) { return den == 0 ? 0.0 : num / den; }

}  // namespace

double ConfusionCounts::accuracy() const {
  return safe_div(static_cast<double>(tp + tn), static_cast<double>(total()));
}

double ConfusionCounts::violation_rate() const {
  return safe_div(static_cast<double>(fp), static_cast<double>(total()));
}

double ConfusionCounts::loss_rate() const {
  return safe_div(static_cast<double>(fn), static_cast<double>(total()));
}

ConfusionCounts score(const policy::DecisionLog& log, PromptScoring prompts) {
  ConfusionCounts c;
  for (const policy::DecisionLogEntry& e : log.entries) {
    if (e.was_prompt) {
      if (prompts == PromptScoring::Exclude) continue;
      /* A prompt is answered by the user, so it matches by definition. */
      if (e.truth == Decision::Allow) ++c.tp;
      else ++c.tn;
      continue;
    }
    bool decided_allow = e.policy_decision == policy::PolicyDecision::Allow;
    bool truth_allow = e.truth == Decision::Allow;
    if (truth_allow && decided_allow) ++c.tp;
    else if (truth_allow) ++c.fn;
    else if (decided_allow) ++c.fp;
    else ++c.tn;
  }
  return c;
}

std::optional<double> auc(const std::vector<double>& scores,
                          const std::vector<int>& labels01) {
  if (scores.size() != labels01.size())
    throw std::invalid_argument("auc: size mismatch");
  std::size_t n = scores.size();
  long np = 0, nn = 0;
  for (int y : labels01) {
    if (y == 1) ++np;
    else if (y == 0) ++nn;
    else throw std::invalid_argument("auc: labels must be 0/1");
  }
  if (np == 0 || nn == 0) return std::nullopt;

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&scores](std::size_t a, std::size_t b) {
    return scores[a] < scores[b];
  });

  double sum_pos_ranks = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
    double avg_rank = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (labels01[idx[k]] == 1) sum_pos_ranks += avg_rank;
    i = j + 1;
  }
  double npd = static_cast<double>(np), nnd = static_cast<double>(nn);
  return (sum_pos_ranks - npd * (npd + 1.0) / 2.0) / (npd * nnd);
}

UserGroup segment_user(double denial_rate) {
  return denial_rate > 0.10 && denial_rate < 0.90 ? UserGroup::Contextual
                                                  : UserGroup::Defaulter;
}

namespace {

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

}  // namespace

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b) {
  if (a.size() != b.size())
    throw std::invalid_argument("wilcoxon_signed_rank: size mismatch");
  std::vector<double> diff;
  for (std::size_t i = 0; i < a.size(); ++i) {
    double d = a[i] - b[i];
    if (d != 0.0) diff.push_back(d);
  }
  WilcoxonResult res;
  res.n_used = static_cast<int>(diff.size());
  if (diff.empty()) return res;

  std::size_t n = diff.size();
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&diff](std::size_t x, std::size_t y) {
    return std::abs(diff[x]) < std::abs(diff[y]);
  });
  std::vector<double> rank(n);
  double tie_term = 0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n &&
           std::abs(diff[idx[j + 1]]) == std::abs(diff[idx[i]]))
      ++j;
    double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    for (std::size_t k = i; k <= j; ++k) rank[idx[k]] = avg;
    i = j + 1;
  }

  double w_plus = 0;
  for (std::size_t k = 0; k < n; ++k)
    if (diff[k] > 0) w_plus += rank[k];
  res.statistic = w_plus;

  double nd = static_cast<double>(n);
  double mu = nd * (nd + 1.0) / 4.0;
  double var = nd * (nd + 1.0) * (2.0 * nd + 1.0) / 24.0 - tie_term / 48.0;
  double sigma = var > 0 ? std::sqrt(var) : 0.0;
  double z = 0;
  if (sigma > 0) {
    double cc = w_plus > mu ? -0.5 : (w_plus < mu ? 0.5 : 0.0);
    z = (w_plus - mu + cc) / sigma;
  }
  res.effect_size_r = std::abs(z) / std::sqrt(nd);

  if (n <= 12) {
    /* Exact two-sided tail over all sign assignments. */
    std::size_t total = std::size_t{1} << n;
    const double eps = 1e-9;
    long le = 0, ge = 0;
    for (std::size_t massb = 0; massb < total; ++massb) {
      double w = 0;
      for (std::size_t k = 0; k < n; ++k)
        if (massb & (std::size_t{1} << k)) w += rank[k];
      if (w <= w_plus + eps) ++le;
      if (w >= w_plus - eps) ++ge;
    }
    double tail = static_cast<double>(std::min(le, ge)) /
                  static_cast<double>(total);
    res.p_value = std::min(1.0, 2.0 * tail);
  } else {
    if (sigma == 0) {
      res.p_value = 1.0;
    } else {
      res.p_value = std::min(1.0, 2.0 * (1.0 - normal_cdf(std::abs(z))));
    }
  }
  return res;
}

double information_gain_bits(const std::vector<double>& values,
                             const std::vector<int>& labels01,
                             int quantile_bins, bool categorical) {
  if (values.size() != labels01.size() || values.empty())
    throw std::invalid_argument("information_gain_bits: bad inputs");

  auto entropy = [](double n0, double n1) {
    double n = n0 + n1;
    if (n == 0) return 0.0;
    double h = 0;
    for (double c : {n0, n1}) {
      if (c > 0) {
        double p = c / n;
        h -= p * std::log2(p);
      }
    }
    return h;
  };

  std::vector<int> bin_of(values.size());
  if (categorical) {
    std::map<double, int> cats;
    for (double v : values) cats.emplace(v, 0);
    int next = 0;
    for (auto& [v, id] : cats) id = next++;
    for (std::size_t i = 0; i < values.size(); ++i)
      bin_of[i] = cats[values[i]];
  } else {
    if (quantile_bins < 2)
      throw std::invalid_argument("information_gain_bits: bins < 2");
    std::vector<double> sorted = values;
    std::sort(sorted.begin(), sorted.end());
    std::vector<double> edges;
    for (int b = 1; b < quantile_bins; ++b) {
      std::size_t pos = static_cast<std::size_t>(
          static_cast<double>(b) * static_cast<double>(sorted.size()) /
          static_cast<double>(quantile_bins));
      pos = std::min(pos, sorted.size() - 1);
      double e = sorted[pos];
      if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    for (std::size_t i = 0; i < values.size(); ++i)
      bin_of[i] = static_cast<int>(
          std::upper_bound(edges.begin(), edges.end(), values[i]) -
          edges.begin());
  }

  double n0 = 0, n1 = 0;
  std::map<int, std::pair<double, double>> joint;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& cell = joint[bin_of[i]];
    if (labels01[i] == 1) {
      ++n1;
      ++cell.second;
    } else {
      ++n0;
      ++cell.first;
    }
  }
  double h_y = entropy(n0, n1);
  double n = n0 + n1;
  double h_cond = 0;
  for (const auto& [bin, cell] : joint)
    h_cond += (cell.first + cell.second) / n * entropy(cell.first, cell.second);
  double ig = h_y - h_cond;
  return ig < 0 ? 0.0 : ig;
}

ProbeReport adversarial_probe(const ProbeModel& pm,
                              const std::vector<ProbeInstance>& instances,
                              const std::vector<std::string>& fg_candidates) {
  if (!pm.model || !pm.scaling)
    throw std::invalid_argument("adversarial_probe: missing model");
  if (fg_candidates.empty())
    throw std::invalid_argument("adversarial_probe: no foreground candidates");

  ProbeReport rep;
  rep.n_instances = static_cast<long>(instances.size());
  rep.cells_per_instance =
      static_cast<long>(kPermissionCount) * 2 * 24 *
      static_cast<long>(fg_candidates.size());

  for (const ProbeInstance& inst : instances) {
    bool flipped = false;
    for (int perm = 0; perm < kPermissionCount; ++perm) {
      for (int vis = 0; vis < 2; ++vis) {
        bool v = vis == 1;
        feat::AggregateQuery q1 = inst.aggregates.a1(
            inst.request.app_id, static_cast<PermissionType>(perm), v);
        for (int hour = 0; hour < 24; ++hour) {
          for (const std::string& fg : fg_candidates) {
            feat::FeatureVector fv = inst.base;
            for (int s = 0; s < kPermissionCount; ++s)
              fv.v[static_cast<std::size_t>(feat::kSlotPerm + s)] = 0.0;
            fv.v[static_cast<std::size_t>(feat::kSlotPerm + perm)] = 1.0;
            fv.v[feat::kSlotVisTrue] = v ? 1.0 : 0.0;
            fv.v[feat::kSlotVisFalse] = v ? 0.0 : 1.0;
            fv.v[feat::kSlotTimeOfDay] = hour + 0.5;
            feat::AggregateQuery q2 = inst.aggregates.a2(
                fg, static_cast<PermissionType>(perm), v);
            fv.v[feat::kSlotA1] = q1.rate;
            fv.v[feat::kSlotA1Valid] = q1.valid ? 1.0 : 0.0;
            fv.v[feat::kSlotA2] = q2.rate;
            fv.v[feat::kSlotA2Valid] = q2.valid ? 1.0 : 0.0;

            std::vector<double> x = feat::apply_scaling(
                *pm.scaling, feat::build_input(fv, pm.spec, inst.user_index));
            learn::Prediction p =
                learn::predict_proba(*pm.model, x, pm.threshold);
            ++rep.n_cells;
            if (p.label == Decision::Allow &&
                p.confidence == learn::Confidence::High) {
              ++rep.allow_high_cells;
              flipped = true;
            }
          }
        }
      }
    }
    if (flipped) ++rep.flipped_instances;
  }
  rep.flip_rate = safe_div(static_cast<double>(rep.flipped_instances),
                           static_cast<double>(rep.n_instances));
  rep.degenerate = rep.n_cells > 0 && rep.allow_high_cells == rep.n_cells;
  return rep;
}

SplitSpec SplitSpec::parse(std::string_view s) {
  SplitSpec spec;
  if (s == "kfold5") {
    spec.kind = SplitKind::KFold5;
  } else if (s == "louo") {
    spec.kind = SplitKind::Louo;
  } else if (s == "chrono20") {
    spec.kind = SplitKind::Chrono20;
  } else if (s.substr(0, 10) == "bootstrap:") {
    spec.kind = SplitKind::Bootstrap;
    spec.bootstrap_k = std::stoi(std::string(s.substr(10)));
    if (spec.bootstrap_k < 0)
      throw std::invalid_argument("bootstrap k must be >= 0");
  } else {
    throw std::invalid_argument("unknown split: " + std::string(s));
  }
  return spec;
}

std::string SplitSpec::name() const {
  switch (kind) {
    case SplitKind::KFold5: return "kfold5";
    case SplitKind::Louo: return "louo";
    case SplitKind::Chrono20: return "chrono20";
    case SplitKind::Bootstrap: return "bootstrap:" + std::to_string(bootstrap_k);
  }
  return "kfold5";
}

double median(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  double hi = v[mid];
  if (v.size() % 2 == 1) return hi;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid) - 1,
                   v.begin() + static_cast<std::ptrdiff_t>(mid));
  return (v[mid - 1] + hi) / 2.0;
}

void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  unsigned hw = std::thread::hardware_concurrency();
  std::size_t workers = threads > 0 ? static_cast<std::size_t>(threads)
                                    : std::max(1u, hw);
  workers = std::min(workers, n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w]() {
      try {
        while (true) {
          std::size_t i = next.fetch_add(1);
          if (i >= n) break;
          fn(i);
        }
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (std::exception_ptr& e : errors)
    if (e) std::rethrow_exception(e);
}

namespace {

policy::TruthFn truth_fn(const synth::Persona& p) {
  return [p](const PermissionRequest& req) {
    return synth::ground_truth_response(p, req);
  };
}

struct MlState {
  std::vector<feat::EsmCollection> per_user;
  std::vector<feat::LabeledRow> pool;          /* all users' rows */
  std::vector<std::size_t> row_user;           /* pool row -> user */
};

MlState collect_all(const std::vector<Trace>& traces,
                    const std::vector<synth::Persona>& personas,
                    const ExperimentConfig& cfg) {
  MlState st;
  st.per_user.resize(traces.size());
  parallel_for(traces.size(), cfg.threads, [&](std::size_t i) {
    st.per_user[i] = feat::collect_esm_rows(
        traces[i], static_cast<int>(i), truth_fn(personas[i]), cfg.esm,
        mix_seed(cfg.seed, mix_seed(0xe5a11ull, i)));
  });
  for (std::size_t i = 0; i < st.per_user.size(); ++i)
    for (const feat::LabeledRow& r : st.per_user[i].rows) {
      st.pool.push_back(r);
      st.row_user.push_back(i);
    }
  return st;
}

struct TrainedFold {
  learn::SvmModel model;
  feat::ScalingStats scaling;
  bool single_class = false;
  Decision constant = Decision::Deny;
};

TrainedFold train_fold(const std::vector<std::vector<double>>& inputs,
                       const std::vector<int>& labels,
                       const std::vector<std::size_t>& train_idx,
                       const std::vector<bool>& mask,
                       const ExperimentConfig& cfg, std::uint64_t seed,
                       bool with_platt) {
  TrainedFold tf;
  learn::Dataset train;
  for (std::size_t i : train_idx) {
    train.x.push_back(inputs[i]);
    train.y.push_back(labels[i]);
  }
  bool saw_pos = false, saw_neg = false;
  for (int y : train.y) (y > 0 ? saw_pos : saw_neg) = true;
  if (!saw_pos || !saw_neg) {
    tf.single_class = true;
    tf.constant = saw_pos ? Decision::Allow : Decision::Deny;
    return tf;
  }
  tf.scaling = feat::fit_scaling(train.x, mask);
  for (auto& r : train.x) r = feat::apply_scaling(tf.scaling, r);
  learn::Dataset balanced =
      learn::class_balance_bootstrap(train, mix_seed(seed, 0xba1ull));
  learn::SvmConfig svm = cfg.svm;
  svm.fit_platt = with_platt;
  svm.seed = seed;
  if (cfg.grid) {
    learn::HyperGrid grid;
    learn::GridResult gr = learn::grid_search(balanced, grid, svm, seed);
    svm.c = gr.best_c;
    svm.gamma = gr.best_gamma;
  }
  tf.model = learn::train_svm(balanced, svm);
  return tf;
}

learn::Prediction fold_predict(const TrainedFold& tf,
                               const std::vector<double>& input,
                               double threshold) {
  if (tf.single_class) {
    learn::Prediction p;
    p.label = tf.constant;
    p.probability = 1.0;
    p.confidence = learn::Confidence::High;
    p.decision_value = tf.constant == Decision::Allow ? 1.0 : -1.0;
    return p;
  }
  std::vector<double> x = feat::apply_scaling(tf.scaling, input);
  return learn::predict_proba(tf.model, x, threshold);
}

struct GroupStats {
  std::vector<double> accuracy, violation, loss, prompts;

  json to_json() const {
    json j;
    j["n_users"] = accuracy.size();
    j["median_accuracy"] = proto::quantize6(median(accuracy));
    double mean = accuracy.empty()
                      ? 0.0
                      : std::accumulate(accuracy.begin(), accuracy.end(), 0.0) /
                            static_cast<double>(accuracy.size());
    j["mean_accuracy"] = proto::quantize6(mean);
    j["median_violation_rate"] = proto::quantize6(median(violation));
    j["median_loss_rate"] = proto::quantize6(median(loss));
    j["median_prompts"] = proto::quantize6(median(prompts));
    return j;
  }
};

void fill_groups(const std::vector<UserReport>& users, json& summary) {
  GroupStats all, ctx, def;
  for (const UserReport& u : users) {
    if (u.n_scored == 0) continue;
    GroupStats& g = u.group == UserGroup::Contextual ? ctx : def;
    for (GroupStats* s : {&all, &g}) {
      s->accuracy.push_back(u.accuracy);
      s->violation.push_back(u.violation_rate);
      s->loss.push_back(u.loss_rate);
      s->prompts.push_back(static_cast<double>(u.prompts));
    }
  }
  summary["overall"] = all.to_json();
  json groups;
  groups["contextual"] = ctx.to_json();
  groups["defaulter"] = def.to_json();
  summary["groups"] = std::move(groups);
}

/* Paired per-user denial rates, visible vs invisible contexts. */
void fill_visibility_wilcoxon(
    const std::vector<std::pair<std::optional<double>, std::optional<double>>>&
        vis_rates,
    json& summary) {
  std::vector<double> visible, invisible;
  for (const auto& [v, iv] : vis_rates) {
    if (v && iv) {
      visible.push_back(*v);
      invisible.push_back(*iv);
    }
  }
  if (visible.size() < 6) {
    summary["visibility_wilcoxon"] = nullptr;
    return;
  }
  WilcoxonResult w = wilcoxon_signed_rank(invisible, visible);
  json j;
  j["statistic"] = proto::quantize6(w.statistic);
  j["p_value"] = proto::quantize6(w.p_value);
  j["effect_size_r"] = proto::quantize6(w.effect_size_r);
  j["n"] = w.n_used;
  summary["visibility_wilcoxon"] = std::move(j);
}

std::vector<RocPoint> roc_points(const std::vector<double>& scores,
                                 const std::vector<int>& labels01) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&scores](std::size_t a, std::size_t b) {
    return scores[a] > scores[b];
  });
  double np = 0, nn = 0;
  for (int y : labels01) (y == 1 ? np : nn) += 1.0;
  std::vector<RocPoint> out;
  if (np == 0 || nn == 0) return out;
  double tp = 0, fp = 0;
  std::size_t i = 0;
  out.push_back({std::numeric_limits<double>::infinity(), 0, 0});
  while (i < idx.size()) {
    double s = scores[idx[i]];
    while (i < idx.size() && scores[idx[i]] == s) {
      if (labels01[idx[i]] == 1) ++tp;
      else ++fp;
      ++i;
    }
    out.push_back({s, fp / nn, tp / np});
  }
  return out;
}

}  // namespace

ExperimentResult run_experiment(const std::vector<Trace>& traces,
                                const std::vector<synth::Persona>& personas,
                                const ExperimentConfig& config) {
  if (traces.size() != personas.size() || traces.empty())
    throw std::invalid_argument("run_experiment: traces/personas mismatch");
  const std::size_t n_users = traces.size();

  ExperimentResult result;
  json summary;
  summary["seed"] = config.seed;
  summary["n_users"] = n_users;

  std::vector<std::pair<std::optional<double>, std::optional<double>>> vis_rates(
      n_users);

  auto vis_rate_pair = [](long vis_deny, long vis_n, long inv_deny, long inv_n) {
    std::pair<std::optional<double>, std::optional<double>> pr;
    if (vis_n > 0)
      pr.first = static_cast<double>(vis_deny) / static_cast<double>(vis_n);
    if (inv_n > 0)
      pr.second = static_cast<double>(inv_deny) / static_cast<double>(inv_n);
    return pr;
  };

  if (config.policy != PolicyChoice::Ml) {
    policy::PolicySpec spec = config.policy_spec;
    if (config.policy == PolicyChoice::Aoi) spec.kind = policy::PolicyKind::Aoi;
    summary["policy"] = spec.name();
    summary["split"] = nullptr;
    summary["features"] = nullptr;

    result.users.resize(n_users);
    parallel_for(n_users, config.threads, [&](std::size_t i) {
      policy::DecisionLog log =
          policy::simulate_policy(spec, traces[i], truth_fn(personas[i]));
      ConfusionCounts c = score(log, config.prompt_scoring);
      UserReport& u = result.users[i];
      u.user = personas[i].user_id;
      u.archetype = std::string(synth::to_string(personas[i].archetype));
      u.n_scored = c.total();
      u.accuracy = c.accuracy();
      u.violation_rate = c.violation_rate();
      u.loss_rate = c.loss_rate();
      u.prompts = log.prompt_count;
      long deny = 0, vis_deny = 0, vis_n = 0, inv_deny = 0, inv_n = 0;
      for (const policy::DecisionLogEntry& e : log.entries) {
        bool d = e.truth == Decision::Deny;
        deny += d;
        if (e.request.visibility) {
          ++vis_n;
          vis_deny += d;
        } else {
          ++inv_n;
          inv_deny += d;
        }
      }
      u.denial_rate = safe_div(static_cast<double>(deny),
                               static_cast<double>(log.entries.size()));
      u.group = segment_user(u.denial_rate);
      vis_rates[i] = vis_rate_pair(vis_deny, vis_n, inv_deny, inv_n);
    });

    fill_groups(result.users, summary);
    fill_visibility_wilcoxon(vis_rates, summary);
    summary["auc"] = nullptr;
    result.summary_json = summary.dump(2) + "\n";
    return result;
  }

  /* ML policy. */
  summary["policy"] = "ml";
  summary["split"] = config.split.name();
  summary["features"] = std::string(feat::to_string(config.features));

  MlState st = collect_all(traces, personas, config);
  summary["n_rows"] = st.pool.size();

  feat::InputSpec spec = feat::input_spec(config.features,
                                          static_cast<int>(n_users));
  std::vector<bool> mask = feat::scaling_mask(spec);

  std::vector<std::vector<double>> inputs;
  std::vector<int> labels;
  inputs.reserve(st.pool.size());
  for (const feat::LabeledRow& r : st.pool) {
    inputs.push_back(feat::build_input(r.x, spec, r.user_index));
    labels.push_back(r.label == Decision::Allow ? 1 : -1);
  }

  /* Denial rates and visibility pairs from the labeled ESM stream. */
  result.users.resize(n_users);
  for (std::size_t i = 0; i < n_users; ++i) {
    UserReport& u = result.users[i];
    u.user = personas[i].user_id;
    u.archetype = std::string(synth::to_string(personas[i].archetype));
    const auto& rows = st.per_user[i].rows;
    long deny = 0, vis_deny = 0, vis_n = 0, inv_deny = 0, inv_n = 0;
    for (const feat::LabeledRow& r : rows) {
      bool d = r.label == Decision::Deny;
      deny += d;
      if (r.request.visibility) {
        ++vis_n;
        vis_deny += d;
      } else {
        ++inv_n;
        inv_deny += d;
      }
    }
    u.denial_rate =
        rows.empty() ? 0.0
                     : static_cast<double>(deny) / static_cast<double>(rows.size());
    u.group = segment_user(u.denial_rate);
    vis_rates[i] = vis_rate_pair(vis_deny, vis_n, inv_deny, inv_n);
  }

  std::vector<std::optional<learn::Prediction>> row_pred(st.pool.size());

  if (config.split.kind == SplitKind::Bootstrap) {
    struct BootOut {
      learn::BootstrapPoint point;
      bool ran = false;
    };
    std::vector<BootOut> boot(n_users);
    parallel_for(n_users, config.threads, [&](std::size_t u) {
      std::vector<feat::LabeledRow> global;
      for (std::size_t j = 0; j < st.pool.size(); ++j)
        if (st.row_user[j] != u) global.push_back(st.pool[j]);
      if (global.empty()) return;
      learn::BootstrapOptions opt;
      opt.ks = {config.split.bootstrap_k};
      opt.set = config.features;
      opt.svm = config.svm;
      opt.svm.fit_platt = false;
      opt.seed = mix_seed(config.seed, mix_seed(0xb0075ull, u));
      opt.threshold = config.threshold;
      opt.keep_predictions = true;
      std::vector<learn::BootstrapPoint> pts = learn::run_bootstrap_strategy(
          global, traces[u], static_cast<int>(u), truth_fn(personas[u]), opt);
      if (!pts.empty()) {
        boot[u].point = std::move(pts.front());
        boot[u].ran = true;
      }
    });

    std::vector<double> pooled_scores;
    std::vector<int> pooled_labels;
    std::vector<double> model_accs, aofu_accs, ctx_model, ctx_aofu;
    for (std::size_t u = 0; u < n_users; ++u) {
      UserReport& rep = result.users[u];
      if (!boot[u].ran || boot[u].point.n_test == 0) {
        rep.n_scored = 0;
        continue;
      }
      const learn::BootstrapPoint& pt = boot[u].point;
      rep.n_scored = pt.n_test;
      rep.accuracy = pt.model_accuracy;
      rep.aofu_ap_accuracy = pt.aofu_ap_accuracy;
      rep.prompts = pt.k;
      long fp = 0, fn = 0;
      for (std::size_t j = 0; j < pt.predictions.size(); ++j) {
        const learn::Prediction& p = pt.predictions[j];
        Decision t = pt.truths[j];
        if (p.label == Decision::Allow && t == Decision::Deny) ++fp;
        if (p.label == Decision::Deny && t == Decision::Allow) ++fn;
        pooled_scores.push_back(p.decision_value);
        pooled_labels.push_back(t == Decision::Allow ? 1 : 0);
      }
      rep.violation_rate = safe_div(static_cast<double>(fp),
                                    static_cast<double>(pt.n_test));
      rep.loss_rate = safe_div(static_cast<double>(fn),
                               static_cast<double>(pt.n_test));
      model_accs.push_back(pt.model_accuracy);
      aofu_accs.push_back(pt.aofu_ap_accuracy);
      if (rep.group == UserGroup::Contextual) {
        ctx_model.push_back(pt.model_accuracy);
        ctx_aofu.push_back(pt.aofu_ap_accuracy);
      }
    }

    auto mean = [](const std::vector<double>& v) {
      return v.empty() ? 0.0
                       : std::accumulate(v.begin(), v.end(), 0.0) /
                             static_cast<double>(v.size());
    };
    json b;
    b["k"] = config.split.bootstrap_k;
    b["model_mean_accuracy"] = proto::quantize6(mean(model_accs));
    b["aofu_ap_mean_accuracy"] = proto::quantize6(mean(aofu_accs));
    b["contextual_model_mean_accuracy"] = proto::quantize6(mean(ctx_model));
    b["contextual_aofu_ap_mean_accuracy"] = proto::quantize6(mean(ctx_aofu));
    b["contextual_n_users"] = ctx_model.size();
    summary["bootstrap"] = std::move(b);

    std::optional<double> a = pooled_scores.empty()
                                  ? std::nullopt
                                  : auc(pooled_scores, pooled_labels);
    summary["auc"] = a ? json(proto::quantize6(*a)) : json(nullptr);
    if (config.emit_roc) result.roc = roc_points(pooled_scores, pooled_labels);
  } else {
    /* Row-level folds: kfold5, louo, chrono20. */
    int n_folds = 0;
    std::vector<int> fold_of(st.pool.size(), 0);
    if (config.split.kind == SplitKind::KFold5) {
      n_folds = 5;
      std::vector<std::size_t> order(st.pool.size());
      std::iota(order.begin(), order.end(), 0);
      Rng rng(mix_seed(config.seed, 0xf01d5ull));
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
      for (std::size_t i = 0; i < order.size(); ++i)
        fold_of[order[i]] = static_cast<int>(i % 5);
    } else if (config.split.kind == SplitKind::Louo) {
      n_folds = static_cast<int>(n_users);
      for (std::size_t j = 0; j < st.pool.size(); ++j)
        fold_of[j] = static_cast<int>(st.row_user[j]);
    } else {
      n_folds = 1;
      std::vector<std::size_t> order(st.pool.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(),
                       [&st](std::size_t a, std::size_t b) {
                         const feat::LabeledRow& ra = st.pool[a];
                         const feat::LabeledRow& rb = st.pool[b];
                         if (ra.t != rb.t) return ra.t < rb.t;
                         if (ra.user_index != rb.user_index)
                           return ra.user_index < rb.user_index;
                         return ra.ordinal < rb.ordinal;
                       });
      std::size_t n_test = static_cast<std::size_t>(std::lround(
          0.2 * static_cast<double>(order.size())));
      for (std::size_t i = 0; i < order.size(); ++i)
        fold_of[order[i]] = (i + n_test >= order.size()) ? 0 : -1;
      /* fold 0 is the chronological tail; -1 is train-only. */
    }

    parallel_for(static_cast<std::size_t>(n_folds), config.threads,
                 [&](std::size_t f) {
                   std::vector<std::size_t> train_idx, test_idx;
                   for (std::size_t j = 0; j < st.pool.size(); ++j) {
                     if (fold_of[j] == static_cast<int>(f)) test_idx.push_back(j);
                     else train_idx.push_back(j);
                   }
                   if (test_idx.empty() || train_idx.empty()) return;
                   TrainedFold tf = train_fold(
                       inputs, labels, train_idx, mask, config,
                       mix_seed(config.seed, mix_seed(0xf01dull, f)), false);
                   for (std::size_t j : test_idx)
                     row_pred[j] = fold_predict(tf, inputs[j], config.threshold);
                 });

    std::vector<double> pooled_scores;
    std::vector<int> pooled_labels;
    std::vector<ConfusionCounts> per_user_counts(n_users);
    for (std::size_t j = 0; j < st.pool.size(); ++j) {
      if (!row_pred[j]) continue;
      const learn::Prediction& p = *row_pred[j];
      Decision t = st.pool[j].label;
      ConfusionCounts& c = per_user_counts[st.row_user[j]];
      if (t == Decision::Allow) {
        if (p.label == Decision::Allow) ++c.tp;
        else ++c.fn;
      } else {
        if (p.label == Decision::Allow) ++c.fp;
        else ++c.tn;
      }
      pooled_scores.push_back(p.decision_value);
      pooled_labels.push_back(t == Decision::Allow ? 1 : 0);
    }
    for (std::size_t i = 0; i < n_users; ++i) {
      UserReport& u = result.users[i];
      const ConfusionCounts& c = per_user_counts[i];
      u.n_scored = c.total();
      u.accuracy = c.accuracy();
      u.violation_rate = c.violation_rate();
      u.loss_rate = c.loss_rate();
      u.prompts = static_cast<long>(st.per_user[i].rows.size());
    }
    std::optional<double> a = pooled_scores.empty()
                                  ? std::nullopt
                                  : auc(pooled_scores, pooled_labels);
    summary["auc"] = a ? json(proto::quantize6(*a)) : json(nullptr);
    if (config.emit_roc) result.roc = roc_points(pooled_scores, pooled_labels);
  }

  /* Information gain of each raw slot against the labels. */
  {
    json ig;
    std::vector<int> y01;
    y01.reserve(st.pool.size());
    for (const feat::LabeledRow& r : st.pool)
      y01.push_back(r.label == Decision::Allow ? 1 : 0);
    if (!st.pool.empty()) {
      for (int s = 0; s < feat::kVectorSlots; ++s) {
        std::vector<double> col;
        col.reserve(st.pool.size());
        for (const feat::LabeledRow& r : st.pool)
          col.push_back(r.x.v[static_cast<std::size_t>(s)]);
        bool categorical = (s >= feat::kSlotVisTrue && s < feat::kSlotTimeOfDay) ||
                           s == feat::kSlotA1Valid || s == feat::kSlotA2Valid;
        ig[std::string(feat::slot_name(s))] = proto::quantize6(
            information_gain_bits(col, y01, 10, categorical));
      }
    }
    summary["information_gain"] = std::move(ig);
  }

  fill_groups(result.users, summary);
  fill_visibility_wilcoxon(vis_rates, summary);

  if (config.emit_probe) {
    /* Chronological 80/20 probe experiment with a calibrated model. */
    std::vector<std::size_t> order(st.pool.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&st](std::size_t a, std::size_t b) {
                       if (st.pool[a].t != st.pool[b].t)
                         return st.pool[a].t < st.pool[b].t;
                       return st.pool[a].user_index < st.pool[b].user_index;
                     });
    std::size_t n_test = static_cast<std::size_t>(
        std::lround(0.2 * static_cast<double>(order.size())));
    std::vector<std::size_t> train_idx(order.begin(),
                                       order.end() - static_cast<std::ptrdiff_t>(n_test));
    std::vector<std::size_t> test_idx(order.end() - static_cast<std::ptrdiff_t>(n_test),
                                      order.end());
    TrainedFold tf = train_fold(inputs, labels, train_idx, mask, config,
                                mix_seed(config.seed, 0x9e0beull), true);
    if (!tf.single_class) {
      std::set<std::string> fgs;
      for (const feat::LabeledRow& r : st.pool)
        fgs.insert(r.request.foreground_app);
      std::vector<std::string> fg_candidates(fgs.begin(), fgs.end());
      if (fg_candidates.size() > 12) fg_candidates.resize(12);

      std::vector<ProbeInstance> instances;
      for (std::size_t j : test_idx) {
        const feat::LabeledRow& r = st.pool[j];
        if (r.label != Decision::Deny) continue;
        ProbeInstance inst;
        inst.base = r.x;
        inst.request = r.request;
        inst.user_index = r.user_index;
        const auto& responses =
            st.per_user[static_cast<std::size_t>(r.user_index)].responses;
        for (int k = 0; k < r.prompt_index; ++k)
          inst.aggregates.update(
              responses[static_cast<std::size_t>(k)].request,
              responses[static_cast<std::size_t>(k)].decision);
        instances.push_back(std::move(inst));
      }
      ProbeModel pm;
      pm.model = &tf.model;
      pm.scaling = &tf.scaling;
      pm.spec = spec;
      pm.threshold = config.threshold;
      result.probe = adversarial_probe(pm, instances, fg_candidates);
      json pj;
      pj["n_instances"] = result.probe->n_instances;
      pj["n_cells"] = result.probe->n_cells;
      pj["cells_per_instance"] = result.probe->cells_per_instance;
      pj["flipped_instances"] = result.probe->flipped_instances;
      pj["allow_high_cells"] = result.probe->allow_high_cells;
      pj["flip_rate"] = proto::quantize6(result.probe->flip_rate);
      pj["degenerate"] = result.probe->degenerate;
      summary["probe"] = std::move(pj);
    }
  }

  result.summary_json = summary.dump(2) + "\n";
  return result;
}

void write_experiment(const ExperimentResult& result, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);

  std::ofstream csv(fs::path(out_dir) / "per_user.csv");
  if (!csv) throw std::runtime_error("cannot write per_user.csv");
  csv << "user,archetype,group,n_scored,denial_rate,accuracy,violation_rate,"
         "loss_rate,prompts,aofu_ap_accuracy\n";
  char buf[64];
  auto f6 = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const UserReport& u : result.users) {
    csv << u.user << ',' << u.archetype << ',' << to_string(u.group) << ','
        << u.n_scored << ',' << f6(u.denial_rate) << ',' << f6(u.accuracy)
        << ',' << f6(u.violation_rate) << ',' << f6(u.loss_rate) << ','
        << u.prompts << ','
        << (u.aofu_ap_accuracy ? f6(*u.aofu_ap_accuracy) : std::string())
        << '\n';
  }
  csv.close();

  std::ofstream sj(fs::path(out_dir) / "summary.json");
  if (!sj) throw std::runtime_error("cannot write summary.json");
  sj << result.summary_json;
  sj.close();

  if (!result.roc.empty()) {
    std::ofstream roc(fs::path(out_dir) / "roc_points.csv");
    if (!roc) throw std::runtime_error("cannot write roc_points.csv");
    roc << "score,fpr,tpr\n";
    for (const RocPoint& p : result.roc) {
      if (std::isinf(p.score)) roc << "inf";
      else roc << f6(p.score);
      roc << ',' << f6(p.fpr) << ',' << f6(p.tpr) << '\n';
    }
  }

  if (result.probe) {
    json pj;
    pj["n_instances"] = result.probe->n_instances;
    pj["n_cells"] = result.probe->n_cells;
    pj["cells_per_instance"] = result.probe->cells_per_instance;
    pj["flipped_instances"] = result.probe->flipped_instances;
    pj["allow_high_cells"] = result.probe->allow_high_cells;
    pj["flip_rate"] = proto::quantize6(result.probe->flip_rate);
    pj["degenerate"] = result.probe->degenerate;
    std::ofstream pf(fs::path(out_dir) / "probe.json");
    if (!pf) throw std::runtime_error("cannot write probe.json");
    pf << pj.dump(2) << "\n";
  }
}

}  // namespace permsim::eval
