#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "permsim/core.hpp"
#include "permsim/policies.hpp"

namespace permsim::feat {

/* Per-day normalized behavioral profile.  Counts and durations are
 * divided by elapsed days at extraction; proportions are not.  */
struct BehavioralProfile {
  double websites_loaded = 0;
  double https_proportion = 0;
  double downloads = 0;
  double location_site_proportion = 0;
  double pin_unlocks = 0;
  double unlock_time_avg = 0;  /* ms spent unlocking per day */
  double screen_timeout_proportion = 0;
  double call_frequency = 0;
  double call_time = 0;  /* seconds in calls per day */
  double silent_mode_proportion = 0;
};

/* Streaming accumulator over behavioral events.  observe() must be fed
 * events in timestamp order; extract(now) normalizes by elapsed days
 * (at least one).  */
class BehavioralAccumulator {
 public:
  void observe(std::int64_t t, const BehavioralEvent& ev);
  BehavioralProfile extract(std::int64_t now) const;

 private:
  std::int64_t websites_ = 0, https_ = 0, loc_sites_ = 0;
  std::int64_t downloads_ = 0;
  std::int64_t pin_unlocks_ = 0;
  std::int64_t unlock_ms_ = 0;
  std::int64_t timeout_locks_ = 0, button_locks_ = 0;
  std::int64_t calls_ = 0;
  std::int64_t call_ms_ = 0;
  std::int64_t open_call_t_ = -1;
  RingerMode ringer_ = RingerMode::Normal;
  std::int64_t ringer_since_ = 0;
  std::int64_t silent_ms_ = 0;
  std::int64_t last_t_ = 0;
};

struct RuntimeFeatures {
  bool visibility = false;
  PermissionType permission = PermissionType::AccessWifiState;
  double time_of_day = 0;  /* hours, [0, 24) */
};

struct AggregateQuery {
  double rate = 0.5;  /* cold start default */
  bool valid = false;
};

/* Running denial rates over recorded prompt responses, keyed by
 * app:perm:vis (A1) and foreground:perm:vis (A2).  */
class AggregateState {
 public:
  void update(const PermissionRequest& req, Decision d);
  AggregateQuery a1(const std::string& app, PermissionType p, bool vis) const;
  AggregateQuery a2(const std::string& fg, PermissionType p, bool vis) const;

 private:
  struct Counts {
    std::int64_t deny = 0, total = 0;
  };
  using Key = std::tuple<std::string, int, bool>;
  std::map<Key, Counts> a1_, a2_;

  static AggregateQuery query(const std::map<Key, Counts>& m, const Key& k);
};

/* Fixed slot layout of the serialized feature vector.  One-hot and
 * validity slots pass through scaling untouched.  */
inline constexpr int kSlotBehavioral = 0;   /* 10 slots, profile order */
inline constexpr int kSlotVisTrue = 10;
inline constexpr int kSlotVisFalse = 11;
inline constexpr int kSlotPerm = 12;        /* 10 slots, permission codes */
inline constexpr int kSlotTimeOfDay = 22;
inline constexpr int kSlotA1 = 23;
inline constexpr int kSlotA2 = 24;
inline constexpr int kSlotA1Valid = 25;
inline constexpr int kSlotA2Valid = 26;
inline constexpr int kVectorSlots = 27;

struct FeatureVector {
  std::array<double, kVectorSlots> v{};
};

std::string_view slot_name(int slot);

FeatureVector extract(const BehavioralProfile& profile,
                      const RuntimeFeatures& runtime,
                      const AggregateState& aggregates,
                      const PermissionRequest& request);

/* z-score parameters fit on training rows only; population standard
 * deviation.  Columns whose mask entry is false (one-hots, validity
 * bits) pass through; constant columns scale to zero.  */
struct ScalingStats {
  std::vector<double> mean, stdev;
  std::vector<bool> scaled;
};

ScalingStats fit_scaling(const std::vector<std::vector<double>>& rows,
                         const std::vector<bool>& mask);
std::vector<double> apply_scaling(const ScalingStats& s,
                                  const std::vector<double>& x);

/* Model input assemblies.  R1: runtime slots plus a user one-hot.
 * R2B: runtime plus behavioral.  R2A: runtime plus aggregates.  Full:
 * every slot (the wire format).  */
enum class FeatureSet { R1, R2B, R2A, Full };

FeatureSet feature_set_from_string(std::string_view s);
std::string_view to_string(FeatureSet s);

struct InputSpec {
  std::vector<int> slots;
  bool user_onehot = false;
  int n_users = 0;
  bool cyclic_time = false;  /* hour slot becomes sin/cos of the hour angle */

  std::size_t dim() const {
    std::size_t d = slots.size() +
                    (user_onehot ? static_cast<std::size_t>(n_users) : 0);
    if (cyclic_time)
      for (int s : slots) d += s == kSlotTimeOfDay;
    return d;
  }
};

InputSpec input_spec(FeatureSet set, int n_users, bool cyclic_time = false);
std::vector<double> build_input(const FeatureVector& fv, const InputSpec& spec,
                                int user_index);
std::vector<bool> scaling_mask(const InputSpec& spec);

/* One labeled training/evaluation point. */
struct LabeledRow {
  int user_index = 0;
  std::string user_id;
  std::int64_t t = 0;
  int ordinal = 0;  /* index among the trace's scored requests */
  FeatureVector x;
  Decision label = Decision::Deny;
  PermissionRequest request;
  int prompt_index = 0;
};

struct EsmCollection {
  std::vector<LabeledRow> rows;
  std::vector<PromptResponse> responses;  /* prompt history, in order */
};

/* Replays a trace, offering every scored request to the reservoir
 * sampler and labeling the daily winners with the ground-truth oracle.
 * Feature snapshots are taken at request time; aggregates advance only
 * when a prompt response lands, so no label leaks into its own
 * features.  */
EsmCollection collect_esm_rows(const Trace& trace, int user_index,
                               const policy::TruthFn& truth,
                               const policy::EsmSampler::Config& esm,
                               std::uint64_t sampler_seed);

/* First response per app:perm:vis combo in trace order (the hybrid
 * bootstrap labels), capped at max_prompts.  */
EsmCollection collect_first_use_rows(const Trace& trace, int user_index,
                                     const policy::TruthFn& truth,
                                     int max_prompts);

/* Every scored request strictly after t_after, with aggregates frozen
 * at the supplied state (the model rules after prompting stops).  */
std::vector<LabeledRow> collect_rows_after(const Trace& trace, int user_index,
                                           const policy::TruthFn& truth,
                                           std::int64_t t_after,
                                           const AggregateState& frozen);

}  // namespace permsim::feat
