#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <map>
#include <sstream>

#include "permsim/core.hpp"
#include "permsim/policies.hpp"
#include "permsim/synthgen.hpp"

using namespace permsim;
using namespace permsim::policy;

namespace {

PermissionRequest req(const std::string& app, PermissionType perm, bool vis,
                      const std::string& fg, std::int64_t t,
                      bool reveals = true) {
  PermissionRequest r;
  r.user_id = "u000";
  r.app_id = app;
  r.permission = perm;
  r.visibility = vis;
  r.foreground_app = fg;
  r.timestamp = t;
  r.reveals_sensitive_data = reveals;
  return r;
}

Trace trace_of(std::vector<PermissionRequest> requests, int days) {
  Trace t;
  t.user_id = "u000";
  t.duration_days = days;
  for (PermissionRequest& r : requests) {
    std::int64_t at = r.timestamp;
    t.events.push_back({at, std::move(r)});
  }
  return t;
}

}  // namespace

TEST_CASE("aoi allows everything") {
  CHECK(aoi_decide(req("a", PermissionType::ReadSms, false, "b", 0)) ==
        PolicyDecision::Allow);
  CHECK(aoi_decide(req("a", PermissionType::ReadSms, false, "b", 0)) ==
        PolicyDecision::Allow);
  CHECK(aoi_decide(req("x", PermissionType::SendSms, true, "x", 5)) ==
        PolicyDecision::Allow);
}

TEST_CASE("aofu prompts on first use and replays the answer") {
  PolicyState st(KeySpec::parse("ap"));
  PermissionRequest r = req("maps", PermissionType::AccessFineLocation, true,
                            "maps", 0);
  CHECK(st.decide(r) == PolicyDecision::Prompt);
  st.record(r, Decision::Allow);
  CHECK(st.decide(r) == PolicyDecision::Allow);

  /* keying={A,P}: visibility flip maps to the same combo */
  PermissionRequest flipped = r;
  flipped.visibility = false;
  flipped.foreground_app = "other";
  CHECK(st.decide(flipped) == PolicyDecision::Allow);
}

TEST_CASE("record refuses to overwrite a combo") {
  PolicyState st(KeySpec::parse("ap"));
  PermissionRequest r = req("maps", PermissionType::AccessFineLocation, true,
                            "maps", 0);
  st.record(r, Decision::Deny);
  CHECK_THROWS_AS(st.record(r, Decision::Allow), std::invalid_argument);
  CHECK(st.decide(r) == PolicyDecision::Deny);
}

TEST_CASE("apv keying separates visibility variants") {
  PolicyState st(KeySpec::parse("apv"));
  PermissionRequest fgr = req("maps", PermissionType::AccessFineLocation, true,
                              "maps", 0);
  PermissionRequest bg = fgr;
  bg.visibility = false;
  st.record(fgr, Decision::Allow);
  CHECK(st.decide(bg) == PolicyDecision::Prompt);
  st.record(bg, Decision::Deny);
  CHECK(st.decide(fgr) == PolicyDecision::Allow);
  CHECK(st.decide(bg) == PolicyDecision::Deny);
  CHECK(st.size() == 2);
}

TEST_CASE("empty keying is rejected") {
  CHECK_THROWS_AS(PolicyState(KeySpec{}), std::invalid_argument);
}

TEST_CASE("policy spec parses aoi and aofu names") {
  CHECK(PolicySpec::parse("aoi").kind == PolicyKind::Aoi);
  PolicySpec ap = PolicySpec::parse("aofu-ap");
  CHECK(ap.kind == PolicyKind::Aofu);
  CHECK(ap.keying == KeySpec::parse("ap"));
  CHECK(ap.name() == "aofu-ap");
  CHECK(PolicySpec::parse("aofu-a_fpv").keying == KeySpec::parse("a_fpv"));
  CHECK_THROWS_AS(PolicySpec::parse("always"), std::invalid_argument);
  CHECK_THROWS_AS(PolicySpec::parse("aofu-"), std::invalid_argument);
}

TEST_CASE("simulate_policy: defaulter allow under aofu-ap is always right") {
  std::vector<PermissionRequest> rs;
  for (int i = 0; i < 40; ++i)
    rs.push_back(req("app" + std::to_string(i % 3),
                     static_cast<PermissionType>(i % 4), i % 2 == 0, "fg",
                     i * 100));
  Trace t = trace_of(rs, 1);
  TruthFn allow_all = [](const PermissionRequest&) { return Decision::Allow; };
  DecisionLog log = simulate_policy(PolicySpec::parse("aofu-ap"), t, allow_all);
  REQUIRE(log.entries.size() == 40);
  /* 3 apps x 4 perms = 12 combos, but app index i%3 and perm i%4 cycle
   * together with period 12: exactly 12 distinct pairs occur */
  CHECK(log.prompt_count == 12);
  for (const DecisionLogEntry& e : log.entries) {
    if (!e.was_prompt) CHECK(e.policy_decision == PolicyDecision::Allow);
    CHECK(e.truth == Decision::Allow);
  }
}

TEST_CASE("simulate_policy: aoi never prompts, logs allow everywhere") {
  std::vector<PermissionRequest> rs;
  for (int i = 0; i < 10; ++i)
    rs.push_back(req("a", PermissionType::ReadSms, false, "b", i * 10));
  Trace t = trace_of(rs, 1);
  TruthFn deny_all = [](const PermissionRequest&) { return Decision::Deny; };
  DecisionLog log = simulate_policy(PolicySpec::parse("aoi"), t, deny_all);
  CHECK(log.prompt_count == 0);
  REQUIRE(log.entries.size() == 10);
  for (const DecisionLogEntry& e : log.entries) {
    CHECK(e.policy_decision == PolicyDecision::Allow);
    CHECK(e.truth == Decision::Deny);
    CHECK_FALSE(e.was_prompt);
  }
}

TEST_CASE("simulate_policy skips non-revealing requests by default") {
  std::vector<PermissionRequest> rs;
  rs.push_back(req("a", PermissionType::ReadSms, true, "a", 0, false));
  rs.push_back(req("a", PermissionType::ReadSms, true, "a", 10, true));
  Trace t = trace_of(rs, 1);
  TruthFn allow_all = [](const PermissionRequest&) { return Decision::Allow; };

  DecisionLog skip = simulate_policy(PolicySpec::parse("aofu-ap"), t, allow_all);
  CHECK(skip.entries.size() == 1);

  PolicySpec inc = PolicySpec::parse("aofu-ap");
  inc.include_non_revealing = true;
  DecisionLog all = simulate_policy(inc, t, allow_all);
  CHECK(all.entries.size() == 2);
}

TEST_CASE("pure visibility rule: apv exact, ap wrong under mixed visibility") {
  /* one app/perm used under both visibilities; truth = visible */
  std::vector<PermissionRequest> rs;
  for (int i = 0; i < 20; ++i)
    rs.push_back(req("maps", PermissionType::AccessFineLocation, i % 2 == 0,
                     "fg", i * 50));
  Trace t = trace_of(rs, 1);
  TruthFn vis_rule = [](const PermissionRequest& r) {
    return r.visibility ? Decision::Allow : Decision::Deny;
  };

  auto accuracy = [&](const char* policy) {
    DecisionLog log = simulate_policy(PolicySpec::parse(policy), t, vis_rule);
    long ok = 0, scored = 0;
    for (const DecisionLogEntry& e : log.entries) {
      if (e.was_prompt) continue;
      ++scored;
      bool allow = e.policy_decision == PolicyDecision::Allow;
      ok += allow == (e.truth == Decision::Allow);
    }
    return scored ? static_cast<double>(ok) / static_cast<double>(scored) : 1.0;
  };

  CHECK(accuracy("aofu-apv") == 1.0);
  CHECK(accuracy("aofu-ap") < 1.0);
}

TEST_CASE("prompt count equals distinct combos and keying is monotone") {
  std::vector<PermissionRequest> rs;
  std::uint64_t h = 12345;
  for (int i = 0; i < 200; ++i) {
    h = h * 6364136223846793005ull + 1442695040888963407ull;
    std::string app = "app" + std::to_string((h >> 33) % 5);
    PermissionType perm = static_cast<PermissionType>((h >> 13) % 6);
    bool vis = ((h >> 7) & 1) != 0;
    std::string fg = "fg" + std::to_string((h >> 21) % 3);
    rs.push_back(req(app, perm, vis, fg, i * 10));
  }
  Trace t = trace_of(rs, 1);
  TruthFn allow_all = [](const PermissionRequest&) { return Decision::Allow; };

  std::map<std::string, int> prompts;
  for (const char* p : {"aofu-v", "aofu-p", "aofu-ap", "aofu-apv"}) {
    DecisionLog log = simulate_policy(PolicySpec::parse(p), t, allow_all);
    prompts[p] = log.prompt_count;

    KeySpec keying = PolicySpec::parse(p).keying;
    std::map<ComboKey, int> distinct;
    for (const PermissionRequest& r : rs) ++distinct[combo_key(r, keying)];
    CHECK(log.prompt_count == static_cast<int>(distinct.size()));
  }
  CHECK(prompts["aofu-v"] <= prompts["aofu-p"]);
  CHECK(prompts["aofu-p"] <= prompts["aofu-ap"]);
  CHECK(prompts["aofu-ap"] <= prompts["aofu-apv"]);
}

TEST_CASE("simulate_policy is deterministic") {
  synth::PopulationConfig cfg;
  cfg.n_users = 2;
  cfg.duration_days = 5;
  cfg.rng_seed = 3;
  std::vector<synth::Persona> ps = synth::generate_population(cfg);
  Trace t = synth::generate_user_trace(ps[0], cfg, 0);
  TruthFn truth = [&ps](const PermissionRequest& r) {
    return synth::ground_truth_response(ps[0], r);
  };
  DecisionLog a = simulate_policy(PolicySpec::parse("aofu-apv"), t, truth);
  DecisionLog b = simulate_policy(PolicySpec::parse("aofu-apv"), t, truth);
  REQUIRE(a.entries.size() == b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) {
    CHECK(a.entries[i].policy_decision == b.entries[i].policy_decision);
    CHECK(a.entries[i].truth == b.entries[i].truth);
  }
}

TEST_CASE("reservoir: single offer wins the day") {
  EsmSampler s({1, 3}, 17);
  PermissionRequest r = req("maps", PermissionType::AccessFineLocation, true,
                            "maps", 5);
  s.offer(r);
  std::vector<PermissionRequest> win = s.end_of_day();
  REQUIRE(win.size() == 1);
  CHECK(win[0] == r);
  CHECK(s.prompts_today() == 1);

  /* next day opens with a fresh quota */
  PermissionRequest next = req("maps", PermissionType::ReadSms, true, "maps",
                               86400 + 5);
  s.offer(next);
  CHECK(s.prompts_today() == 0);
}

TEST_CASE("reservoir: empty day emits nothing") {
  EsmSampler s({1, 3}, 17);
  CHECK(s.end_of_day().empty());
}

TEST_CASE("reservoir: daily quota of one is never exceeded") {
  EsmSampler s({1, 3}, 99);
  for (int day = 0; day < 50; ++day) {
    for (int i = 0; i < 10; ++i)
      s.offer(req("app" + std::to_string(i), PermissionType::ReadSms, true,
                  "fg", day * 86400 + i));
    CHECK(s.end_of_day().size() <= 1);
    CHECK(s.prompts_today() <= 1);
  }
}

TEST_CASE("reservoir: per-combo cap of three is permanent") {
  EsmSampler s({1, 3}, 5);
  PermissionRequest only = req("solo", PermissionType::ReadSms, true, "fg", 1);
  int prompted = 0;
  for (int day = 0; day < 30; ++day) {
    s.offer(only);
    prompted += static_cast<int>(s.end_of_day().size());
  }
  CHECK(prompted == 3);
  CHECK(s.prompt_count(only) == 3);
}

TEST_CASE("reservoir: weight-3 combo wins about three quarters of days") {
  /* fresh sampler each day so all-time weights stay {3,1} */
  int wins_a = 0, n = 10000;
  for (int day = 0; day < n; ++day) {
    EsmSampler s({1, 3}, static_cast<std::uint64_t>(day));
    PermissionRequest a = req("heavy", PermissionType::ReadSms, true, "fg", 1);
    PermissionRequest b = req("light", PermissionType::ReadSms, true, "fg", 2);
    s.offer(a);
    s.offer(a);
    s.offer(a);
    s.offer(b);
    std::vector<PermissionRequest> win = s.end_of_day();
    REQUIRE(win.size() == 1);
    wins_a += win[0].app_id == "heavy";
  }
  double share = static_cast<double>(wins_a) / n;
  CHECK(share > 0.72);
  CHECK(share < 0.78);
}

TEST_CASE("reservoir emits the earliest request of the winning combo") {
  EsmSampler s({1, 3}, 11);
  PermissionRequest first = req("maps", PermissionType::ReadSms, true, "fg", 3);
  PermissionRequest later = first;
  later.timestamp = 900;
  s.offer(first);
  s.offer(later);
  std::vector<PermissionRequest> win = s.end_of_day();
  REQUIRE(win.size() == 1);
  CHECK(win[0].timestamp == 3);
}

TEST_CASE("decision log jsonl carries the contract fields") {
  std::vector<PermissionRequest> rs;
  rs.push_back(req("maps", PermissionType::AccessFineLocation, true, "maps", 0));
  rs.push_back(req("maps", PermissionType::AccessFineLocation, true, "maps", 10));
  Trace t = trace_of(rs, 1);
  TruthFn allow_all = [](const PermissionRequest&) { return Decision::Allow; };
  DecisionLog log = simulate_policy(PolicySpec::parse("aofu-ap"), t, allow_all);
  std::stringstream ss;
  write_decision_log_jsonl(log, ss);
  std::string line;
  std::getline(ss, line);
  CHECK(line.find("\"t\":0") != std::string::npos);
  CHECK(line.find("\"combo\":\"maps:ACCESS_FINE_LOCATION\"") !=
        std::string::npos);
  CHECK(line.find("\"was_prompt\":true") != std::string::npos);
  CHECK(line.find("\"policy_decision\":") != std::string::npos);
  CHECK(line.find("\"truth\":\"allow\"") != std::string::npos);
  std::getline(ss, line);
  CHECK(line.find("\"was_prompt\":false") != std::string::npos);
  CHECK(line.find("\"policy_decision\":\"allow\"") != std::string::npos);
}
