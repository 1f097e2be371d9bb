#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "permsim/core.hpp"

namespace permsim::policy {

enum class PolicyDecision { Allow, Deny, Prompt };

inline std::string_view to_string(PolicyDecision d) {
  switch (d) {
    case PolicyDecision::Allow: return "allow";
    case PolicyDecision::Deny: return "deny";
    case PolicyDecision::Prompt: return "prompt";
  }
  return "prompt";
}

/* Ask-on-install: everything is allowed at runtime. */
inline PolicyDecision aoi_decide(const PermissionRequest&) {
  return PolicyDecision::Allow;
}

/* Ask-on-first-use memory over a configurable combo keying.  Entries are
 * immutable once recorded.  */
class PolicyState {
 public:
  explicit PolicyState(KeySpec keying) : keying_(keying) {
    if (keying_.empty())
      throw std::invalid_argument("PolicyState: empty keying");
  }

  PolicyDecision decide(const PermissionRequest& req) const {
    auto it = table_.find(combo_key(req, keying_));
    if (it == table_.end()) return PolicyDecision::Prompt;
    return it->second == Decision::Allow ? PolicyDecision::Allow
                                         : PolicyDecision::Deny;
  }

  /* Records the user's answer to a first-use prompt.  A second record
   * for the same combo is a protocol error.  */
  void record(const PermissionRequest& req, Decision d) {
    auto [it, inserted] = table_.emplace(combo_key(req, keying_), d);
    if (!inserted)
      throw std::invalid_argument("record_response: combo already recorded: " +
                                  combo_key_string(it->first));
  }

  const KeySpec& keying() const { return keying_; }
  std::size_t size() const { return table_.size(); }

 private:
  KeySpec keying_;
  std::map<ComboKey, Decision> table_;
};

/* Weighted reservoir sampler for experience-sampling prompts.  Offers
 * arrive all day; at the day boundary at most daily_quota combos are
 * selected with probability proportional to their all-time offer
 * frequency.  A combo that has been prompted per_combo_cap times leaves
 * the pool for good.  */
class EsmSampler {
 public:
  struct Config {
    int daily_quota = 1;
    int per_combo_cap = 3;
  };

  EsmSampler(Config cfg, std::uint64_t seed);

  /* Registers one observed request.  The combo key is app:perm:vis. */
  void offer(const PermissionRequest& req);

  /* Closes the day and emits the selected prompts (earliest request of
   * each winning combo).  Resets day state.  */
  std::vector<PermissionRequest> end_of_day();

  int prompts_today() const { return prompts_today_; }
  int prompt_count(const PermissionRequest& req) const;

 private:
  struct DayEntry {
    double u = 0;          /* one uniform draw per combo per day */
    std::int64_t first_t = 0;
    PermissionRequest first_req;
  };

  Config cfg_;
  std::uint64_t seed_;
  std::uint64_t day_nonce_ = 0;
  bool day_open_ = false;
  int prompts_today_ = 0;
  std::map<ComboKey, std::int64_t> freq_;     /* all-time offer counts */
  std::map<ComboKey, int> prompted_;          /* prompts served per combo */
  std::map<ComboKey, DayEntry> day_;
};

struct DecisionLogEntry {
  PermissionRequest request;
  PolicyDecision policy_decision = PolicyDecision::Prompt;
  Decision truth = Decision::Deny;
  bool was_prompt = false;
};

struct DecisionLog {
  std::string user_id;
  std::string policy_name;
  std::vector<DecisionLogEntry> entries;
  int prompt_count = 0;
};

enum class PolicyKind { Aoi, Aofu };

struct PolicySpec {
  PolicyKind kind = PolicyKind::Aofu;
  KeySpec keying = KeySpec::parse("ap");
  bool include_non_revealing = false;

  std::string name() const {
    return kind == PolicyKind::Aoi ? "aoi" : "aofu-" + keying.code();
  }
  static PolicySpec parse(std::string_view name);
};

using TruthFn = std::function<Decision(const PermissionRequest&)>;

/* Replays the trace through a policy.  Prompts are answered by the
 * ground-truth oracle and recorded; the answer itself is logged as the
 * policy decision with was_prompt set.  Only requests that reveal
 * sensitive data are scored unless include_non_revealing is set.  */
DecisionLog simulate_policy(const PolicySpec& spec, const Trace& trace,
                            const TruthFn& truth);

void write_decision_log_jsonl(const DecisionLog& log, std::ostream& out);

}  // namespace permsim::policy
