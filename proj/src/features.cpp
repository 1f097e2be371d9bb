#include "permsim/features.hpp"

#include <cmath>
#include <stdexcept>

namespace permsim::feat {

namespace {

constexpr double kDaySeconds = 86400.0;

}  // namespace

void BehavioralAccumulator::observe(std::int64_t t, const BehavioralEvent& ev) {
  last_t_ = t;
  if (const auto* w = std::get_if<WebsiteLoaded>(&ev)) {
    ++websites_;
    if (w->https) ++https_;
    if (w->requested_location) ++loc_sites_;
  } else if (std::holds_alternative<Download>(ev)) {
    ++downloads_;
  } else if (const auto* u = std::get_if<ScreenUnlock>(&ev)) {
    if (u->method == UnlockMethod::Pin || u->method == UnlockMethod::Password) {
      ++pin_unlocks_;
      unlock_ms_ += u->duration_ms;
    }
  } else if (const auto* l = std::get_if<ScreenLock>(&ev)) {
    if (l->cause == LockCause::Timeout) ++timeout_locks_;
    else if (l->cause == LockCause::Button) ++button_locks_;
  } else if (std::holds_alternative<AudioCallStart>(ev)) {
    if (open_call_t_ < 0) open_call_t_ = t;
  } else if (std::holds_alternative<AudioCallEnd>(ev)) {
    if (open_call_t_ >= 0) {
      ++calls_;
      call_ms_ += (t - open_call_t_) * 1000;
      open_call_t_ = -1;
    }
  } else if (const auto* r = std::get_if<RingerModeChange>(&ev)) {
    if (ringer_ == RingerMode::Silent) silent_ms_ += (t - ringer_since_) * 1000;
    ringer_ = r->mode;
    ringer_since_ = t;
  }
}

BehavioralProfile BehavioralAccumulator::extract(std::int64_t now) const {
  double days = std::max(1.0, static_cast<double>(now) / kDaySeconds);
  BehavioralProfile p;
  p.websites_loaded = static_cast<double>(websites_) / days;
  p.https_proportion =
      websites_ > 0 ? static_cast<double>(https_) / static_cast<double>(websites_) : 0.0;
  p.location_site_proportion =
      websites_ > 0 ? static_cast<double>(loc_sites_) / static_cast<double>(websites_) : 0.0;
  p.downloads = static_cast<double>(downloads_) / days;
  p.pin_unlocks = static_cast<double>(pin_unlocks_) / days;
  p.unlock_time_avg = static_cast<double>(unlock_ms_) / days;
  std::int64_t locks = timeout_locks_ + button_locks_;
  p.screen_timeout_proportion =
      locks > 0 ? static_cast<double>(timeout_locks_) / static_cast<double>(locks) : 0.0;
  p.call_frequency = static_cast<double>(calls_) / days;
  p.call_time = static_cast<double>(call_ms_) / 1000.0 / days;
  std::int64_t silent = silent_ms_;
  if (ringer_ == RingerMode::Silent && now > ringer_since_)
    silent += (now - ringer_since_) * 1000;
  p.silent_mode_proportion =
      now > 0 ? static_cast<double>(silent) / (static_cast<double>(now) * 1000.0) : 0.0;
  return p;
}

void AggregateState::update(const PermissionRequest& req, Decision d) {
  Key k1{req.app_id, static_cast<int>(req.permission), req.visibility};
  Key k2{req.foreground_app, static_cast<int>(req.permission), req.visibility};
  Counts& c1 = a1_[k1];
  ++c1.total;
  if (d == Decision::Deny) ++c1.deny;
  Counts& c2 = a2_[k2];
  ++c2.total;
  if (d == Decision::Deny) ++c2.deny;
}

AggregateQuery AggregateState::query(const std::map<Key, Counts>& m, const Key& k) {
  auto it = m.find(k);
  if (it == m.end() || it->second.total == 0) return {0.5, false};
  return {static_cast<double>(it->second.deny) /
              static_cast<double>(it->second.total),
          true};
}

AggregateQuery AggregateState::a1(const std::string& app, PermissionType p,
                                  bool vis) const {
  return query(a1_, Key{app, static_cast<int>(p), vis});
}

AggregateQuery AggregateState::a2(const std::string& fg, PermissionType p,
                                  bool vis) const {
  return query(a2_, Key{fg, static_cast<int>(p), vis});
}

std::string_view slot_name(int slot) {
  static constexpr std::array<std::string_view, kVectorSlots> names = {
      "b_websites_loaded", "b_https_proportion", "b_downloads",
      "b_location_site_proportion", "b_pin_unlocks", "b_unlock_time",
      "b_screen_timeout_proportion", "b_call_frequency", "b_call_time",
      "b_silent_mode_proportion", "vis_true", "vis_false",
      "perm_access_wifi_state", "perm_nfc", "perm_read_history_bookmarks",
      "perm_access_fine_location", "perm_access_coarse_location",
      "perm_location_hardware", "perm_read_call_log", "perm_add_voicemail",
      "perm_read_sms", "perm_send_sms", "time_of_day", "a1_rate", "a2_rate",
      "a1_valid", "a2_valid"};
  if (slot < 0 || slot >= kVectorSlots)
    throw std::invalid_argument("slot out of range");
  return names[static_cast<std::size_t>(slot)];
}

FeatureVector extract(const BehavioralProfile& profile,
                      const RuntimeFeatures& runtime,
                      const AggregateState& aggregates,
                      const PermissionRequest& request) {
  FeatureVector fv;
  fv.v[0] = profile.websites_loaded;
  fv.v[1] = profile.https_proportion;
  fv.v[2] = profile.downloads;
  fv.v[3] = profile.location_site_proportion;
  fv.v[4] = profile.pin_unlocks;
  fv.v[5] = profile.unlock_time_avg;
  fv.v[6] = profile.screen_timeout_proportion;
  fv.v[7] = profile.call_frequency;
  fv.v[8] = profile.call_time;
  fv.v[9] = profile.silent_mode_proportion;
  fv.v[kSlotVisTrue] = runtime.visibility ? 1.0 : 0.0;
  fv.v[kSlotVisFalse] = runtime.visibility ? 0.0 : 1.0;
  fv.v[kSlotPerm + static_cast<int>(runtime.permission)] = 1.0;
  fv.v[kSlotTimeOfDay] = runtime.time_of_day;
  AggregateQuery q1 = aggregates.a1(request.app_id, runtime.permission,
                                    runtime.visibility);
  AggregateQuery q2 = aggregates.a2(request.foreground_app, runtime.permission,
                                    runtime.visibility);
  fv.v[kSlotA1] = q1.rate;
  fv.v[kSlotA2] = q2.rate;
  fv.v[kSlotA1Valid] = q1.valid ? 1.0 : 0.0;
  fv.v[kSlotA2Valid] = q2.valid ? 1.0 : 0.0;
  return fv;
}

ScalingStats fit_scaling(const std::vector<std::vector<double>>& rows,
                         const std::vector<bool>& mask) {
  if (rows.empty()) throw std::invalid_argument("fit_scaling: no rows");
  std::size_t d = rows[0].size();
  if (mask.size() != d) throw std::invalid_argument("fit_scaling: mask size");
  ScalingStats s;
  s.mean.assign(d, 0.0);
  s.stdev.assign(d, 0.0);
  s.scaled.assign(mask.begin(), mask.end());
  double n = static_cast<double>(rows.size());
  for (const auto& r : rows) {
    if (r.size() != d) throw std::invalid_argument("fit_scaling: ragged rows");
    for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
  }
  for (std::size_t j = 0; j < d; ++j) s.mean[j] /= n;
  for (const auto& r : rows)
    for (std::size_t j = 0; j < d; ++j) {
      double dv = r[j] - s.mean[j];
      s.stdev[j] += dv * dv;
    }
  for (std::size_t j = 0; j < d; ++j) s.stdev[j] = std::sqrt(s.stdev[j] / n);
  return s;
}

std::vector<double> apply_scaling(const ScalingStats& s,
                                  const std::vector<double>& x) {
  if (x.size() != s.mean.size())
    throw std::invalid_argument("apply_scaling: dimension mismatch");
  std::vector<double> out(x.size());
  for (std::size_t j = 0; j < x.size(); ++j) {
    if (!s.scaled[j]) {
      out[j] = x[j];
    } else if (s.stdev[j] < 1e-12) {
      out[j] = 0.0;
    } else {
      out[j] = (x[j] - s.mean[j]) / s.stdev[j];
    }
  }
  return out;
}

FeatureSet feature_set_from_string(std::string_view s) {
  if (s == "r1") return FeatureSet::R1;
  if (s == "r2b") return FeatureSet::R2B;
  if (s == "r2a") return FeatureSet::R2A;
  if (s == "full") return FeatureSet::Full;
  throw std::invalid_argument("unknown feature set: " + std::string(s));
}

std::string_view to_string(FeatureSet s) {
  switch (s) {
    case FeatureSet::R1: return "r1";
    case FeatureSet::R2B: return "r2b";
    case FeatureSet::R2A: return "r2a";
    case FeatureSet::Full: return "full";
  }
  return "full";
}

InputSpec input_spec(FeatureSet set, int n_users, bool cyclic_time) {
  InputSpec spec;
  spec.cyclic_time = cyclic_time;
  auto add_range = [&spec](int lo, int hi) {
    for (int i = lo; i < hi; ++i) spec.slots.push_back(i);
  };
  switch (set) {
    case FeatureSet::R1:
      add_range(kSlotVisTrue, kSlotTimeOfDay + 1);
      spec.user_onehot = true;
      spec.n_users = n_users;
      break;
    case FeatureSet::R2B:
      add_range(kSlotBehavioral, kSlotBehavioral + 10);
      add_range(kSlotVisTrue, kSlotTimeOfDay + 1);
      break;
    case FeatureSet::R2A:
      add_range(kSlotVisTrue, kSlotTimeOfDay + 1);
      add_range(kSlotA1, kSlotA2Valid + 1);
      break;
    case FeatureSet::Full:
      add_range(0, kVectorSlots);
      break;
  }
  return spec;
}

std::vector<double> build_input(const FeatureVector& fv, const InputSpec& spec,
                                int user_index) {
  std::vector<double> out;
  out.reserve(spec.dim());
  for (int slot : spec.slots) {
    double v = fv.v[static_cast<std::size_t>(slot)];
    if (spec.cyclic_time && slot == kSlotTimeOfDay) {
      double angle = v * (2.0 * 3.14159265358979323846 / 24.0);
      out.push_back(std::sin(angle));
      out.push_back(std::cos(angle));
      continue;
    }
    out.push_back(v);
  }
  if (spec.user_onehot) {
    if (user_index < 0 || user_index >= spec.n_users)
      throw std::invalid_argument("build_input: user index out of range");
    std::vector<double> onehot(static_cast<std::size_t>(spec.n_users), 0.0);
    onehot[static_cast<std::size_t>(user_index)] = 1.0;
    out.insert(out.end(), onehot.begin(), onehot.end());
  }
  return out;
}

std::vector<bool> scaling_mask(const InputSpec& spec) {
  std::vector<bool> mask;
  mask.reserve(spec.dim());
  for (int slot : spec.slots) {
    if (spec.cyclic_time && slot == kSlotTimeOfDay) {
      /* sin/cos pair is already bounded, no z-score on it */
      mask.push_back(false);
      mask.push_back(false);
      continue;
    }
    bool continuous = (slot >= kSlotBehavioral && slot < kSlotBehavioral + 10) ||
                      slot == kSlotTimeOfDay || slot == kSlotA1 || slot == kSlotA2;
    mask.push_back(continuous);
  }
  if (spec.user_onehot)
    for (int i = 0; i < spec.n_users; ++i) mask.push_back(false);
  return mask;
}

namespace {

RuntimeFeatures runtime_of(const PermissionRequest& req) {
  RuntimeFeatures r;
  r.visibility = req.visibility;
  r.permission = req.permission;
  r.time_of_day = static_cast<double>(req.timestamp % 86400) / 3600.0;
  return r;
}

LabeledRow make_row(int user_index, const Trace& trace,
                    const BehavioralAccumulator& acc,
                    const AggregateState& agg, const PermissionRequest& req,
                    int ordinal) {
  LabeledRow row;
  row.user_index = user_index;
  row.user_id = trace.user_id;
  row.t = req.timestamp;
  row.ordinal = ordinal;
  row.x = extract(acc.extract(req.timestamp), runtime_of(req), agg, req);
  row.request = req;
  return row;
}

}  // namespace

EsmCollection collect_esm_rows(const Trace& trace, int user_index,
                               const policy::TruthFn& truth,
                               const policy::EsmSampler::Config& esm,
                               std::uint64_t sampler_seed) {
  EsmCollection out;
  policy::EsmSampler sampler(esm, sampler_seed);
  BehavioralAccumulator acc;
  AggregateState agg;
  std::int64_t day = 0;
  int ordinal = 0;
  int prompt_index = 0;

  /* Snapshots of this day's offered requests, keyed by offer order. */
  std::vector<LabeledRow> day_offers;

  auto close_day = [&]() {
    for (const PermissionRequest& win : sampler.end_of_day()) {
      for (LabeledRow& cand : day_offers) {
        if (cand.request == win) {
          cand.label = truth(win);
          cand.prompt_index = prompt_index++;
          agg.update(win, cand.label);
          out.responses.push_back({win, cand.label, cand.prompt_index});
          out.rows.push_back(cand);
          break;
        }
      }
    }
    day_offers.clear();
  };

  for (const TraceEvent& ev : trace.events) {
    while (ev.t >= (day + 1) * 86400) {
      close_day();
      ++day;
    }
    if (const auto* req = std::get_if<PermissionRequest>(&ev.body)) {
      if (!req->reveals_sensitive_data) continue;
      day_offers.push_back(
          make_row(user_index, trace, acc, agg, *req, ordinal));
      sampler.offer(*req);
      ++ordinal;
    } else {
      acc.observe(ev.t, std::get<BehavioralEvent>(ev.body));
    }
  }
  close_day();
  return out;
}

EsmCollection collect_first_use_rows(const Trace& trace, int user_index,
                                     const policy::TruthFn& truth,
                                     int max_prompts) {
  EsmCollection out;
  policy::PolicyState state(KeySpec::parse("apv"));
  BehavioralAccumulator acc;
  AggregateState agg;
  int ordinal = 0;
  int prompt_index = 0;

  for (const TraceEvent& ev : trace.events) {
    if (const auto* req = std::get_if<PermissionRequest>(&ev.body)) {
      if (!req->reveals_sensitive_data) continue;
      if (prompt_index < max_prompts &&
          state.decide(*req) == policy::PolicyDecision::Prompt) {
        LabeledRow row = make_row(user_index, trace, acc, agg, *req, ordinal);
        row.label = truth(*req);
        row.prompt_index = prompt_index++;
        state.record(*req, row.label);
        agg.update(*req, row.label);
        out.responses.push_back({*req, row.label, row.prompt_index});
        out.rows.push_back(std::move(row));
      }
      ++ordinal;
    } else {
      acc.observe(ev.t, std::get<BehavioralEvent>(ev.body));
    }
  }
  return out;
}

std::vector<LabeledRow> collect_rows_after(const Trace& trace, int user_index,
                                           const policy::TruthFn& truth,
                                           std::int64_t t_after,
                                           const AggregateState& frozen) {
  std::vector<LabeledRow> out;
  BehavioralAccumulator acc;
  int ordinal = 0;
  for (const TraceEvent& ev : trace.events) {
    if (const auto* req = std::get_if<PermissionRequest>(&ev.body)) {
      if (!req->reveals_sensitive_data) continue;
      if (req->timestamp > t_after) {
        LabeledRow row = make_row(user_index, trace, acc, frozen, *req, ordinal);
        row.label = truth(*req);
        out.push_back(std::move(row));
      }
      ++ordinal;
    } else {
      acc.observe(ev.t, std::get<BehavioralEvent>(ev.body));
    }
  }
  return out;
}

}  // namespace permsim::feat
