#include "permsim/policies.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "json.hpp"

#include "permsim/rng.hpp"

namespace permsim::policy {

namespace {

const KeySpec kApvSpec = KeySpec::parse("apv");

}  // namespace

EsmSampler::EsmSampler(Config cfg, std::uint64_t seed)
    : cfg_(cfg), seed_(seed) {
  if (cfg_.daily_quota < 1)
    throw std::invalid_argument("EsmSampler: daily_quota must be >= 1");
  if (cfg_.per_combo_cap < 1)
    throw std::invalid_argument("EsmSampler: per_combo_cap must be >= 1");
}

void EsmSampler::offer(const PermissionRequest& req) {
  if (!day_open_) {
    prompts_today_ = 0;
    day_open_ = true;
  }
  ComboKey key = combo_key(req, kApvSpec);
  std::int64_t f = ++freq_[key];
  auto pit = prompted_.find(key);
  if (pit != prompted_.end() && pit->second >= cfg_.per_combo_cap) return;

  auto it = day_.find(key);
  if (it == day_.end()) {
    DayEntry e;
    Rng rng(mix_seed(seed_, mix_seed(day_nonce_, fnv1a(combo_key_string(key)))));
    do {
      e.u = rng.uniform();
    } while (e.u <= 0.0);
    e.first_t = req.timestamp;
    e.first_req = req;
    day_.emplace(std::move(key), std::move(e));
  }
  (void)f;
}

std::vector<PermissionRequest> EsmSampler::end_of_day() {
  /* Efraimidis-Espirakis keys u^(1/w) with w = all-time offer frequency;
   * the top daily_quota keys win, which selects each combo with
   * probability proportional to its weight.  */
  struct Candidate {
    double key;
    std::int64_t first_t;
    const ComboKey* combo;
    const PermissionRequest* req;
  };
  std::vector<Candidate> cands;
  cands.reserve(day_.size());
  for (const auto& [combo, entry] : day_) {
    double w = static_cast<double>(freq_.at(combo));
    cands.push_back({std::pow(entry.u, 1.0 / w), entry.first_t, &combo,
                     &entry.first_req});
  }
  std::sort(cands.begin(), cands.end(), [](const Candidate& a, const Candidate& b) {
    if (a.key != b.key) return a.key > b.key;
    return a.first_t < b.first_t;
  });

  std::vector<PermissionRequest> out;
  prompts_today_ = 0;
  for (const Candidate& c : cands) {
    if (prompts_today_ >= cfg_.daily_quota) break;
    out.push_back(*c.req);
    ++prompted_[*c.combo];
    ++prompts_today_;
  }
  day_.clear();
  ++day_nonce_;
  day_open_ = false;
  return out;
}

int EsmSampler::prompt_count(const PermissionRequest& req) const {
  auto it = prompted_.find(combo_key(req, kApvSpec));
  return it == prompted_.end() ? 0 : it->second;
}

PolicySpec PolicySpec::parse(std::string_view name) {
  PolicySpec spec;
  if (name == "aoi") {
    spec.kind = PolicyKind::Aoi;
    return spec;
  }
  if (name.substr(0, 5) == "aofu-") {
    spec.kind = PolicyKind::Aofu;
    spec.keying = KeySpec::parse(name.substr(5));
    return spec;
  }
  throw std::invalid_argument("unknown policy: " + std::string(name));
}

DecisionLog simulate_policy(const PolicySpec& spec, const Trace& trace,
                            const TruthFn& truth) {
  DecisionLog log;
  log.user_id = trace.user_id;
  log.policy_name = spec.name();

  std::optional<PolicyState> state;
  if (spec.kind == PolicyKind::Aofu) state.emplace(spec.keying);

  for (const TraceEvent& ev : trace.events) {
    const auto* req = std::get_if<PermissionRequest>(&ev.body);
    if (!req) continue;
    if (!req->reveals_sensitive_data && !spec.include_non_revealing) continue;

    DecisionLogEntry entry;
    entry.request = *req;
    entry.truth = truth(*req);
    if (spec.kind == PolicyKind::Aoi) {
      entry.policy_decision = PolicyDecision::Allow;
    } else {
      PolicyDecision d = state->decide(*req);
      if (d == PolicyDecision::Prompt) {
        state->record(*req, entry.truth);
        entry.policy_decision = entry.truth == Decision::Allow
                                    ? PolicyDecision::Allow
                                    : PolicyDecision::Deny;
        entry.was_prompt = true;
        ++log.prompt_count;
      } else {
        entry.policy_decision = d;
      }
    }
    log.entries.push_back(std::move(entry));
  }
  return log;
}

void write_decision_log_jsonl(const DecisionLog& log, std::ostream& out) {
  using nlohmann::json;
  /* The combo column uses the policy's own keying; AOI has none, so it
   * falls back to the full apv key.  */
  KeySpec keying = KeySpec::parse("apv");
  PolicySpec spec = PolicySpec::parse(log.policy_name);
  if (spec.kind == PolicyKind::Aofu) keying = spec.keying;
  for (const DecisionLogEntry& e : log.entries) {
    json j;
    j["t"] = e.request.timestamp;
    j["combo"] = combo_key_string(combo_key(e.request, keying));
    j["policy_decision"] = std::string(to_string(e.policy_decision));
    j["truth"] = std::string(permsim::to_string(e.truth));
    j["was_prompt"] = e.was_prompt;
    out << j.dump() << '\n';
  }
}

}  // namespace permsim::policy
