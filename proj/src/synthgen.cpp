#include "permsim/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

#include "permsim/rng.hpp"

namespace permsim::synth {

namespace {

using nlohmann::json;

constexpr std::int64_t kDaySeconds = 86400;

std::string app_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "app%02d", i);
  return buf;
}

std::string user_name(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "u%03d", i);
  return buf;
}

double sample_range(Rng& rng, const Range& r) {
  return rng.uniform(r.lo, r.hi);
}

/* Shared app catalog: permission sets per app are a population-level
 * property, independent of the user.  */
struct AppCatalog {
  std::vector<std::string> apps;
  std::vector<std::vector<PermissionType>> perms;
  std::vector<std::string> fg_pool;
};

AppCatalog build_catalog(const PopulationConfig& cfg) {
  AppCatalog cat;
  Rng rng(mix_seed(cfg.rng_seed, 0xca7a1055ull));
  /* Skewed permission popularity, roughly matching how often each type
   * shows up in real request streams.  */
  std::vector<double> weights = {8.0, 0.6, 0.8, 4.0, 3.0, 0.5, 1.5, 0.5, 2.0, 1.5};
  for (int i = 0; i < cfg.n_apps; ++i) {
    cat.apps.push_back(app_name(i));
    int k = 1 + static_cast<int>(rng.uniform_int(3));
    std::vector<double> w = weights;
    std::vector<PermissionType> ps;
    for (int j = 0; j < k; ++j) {
      std::size_t idx = rng.weighted_index(w);
      ps.push_back(static_cast<PermissionType>(static_cast<int>(idx)));
      w[idx] = 0.0;
    }
    std::sort(ps.begin(), ps.end());
    cat.perms.push_back(std::move(ps));
  }
  int nfg = std::min(cfg.n_foreground_apps, cfg.n_apps);
  for (int i = 0; i < nfg; ++i) cat.fg_pool.push_back(cat.apps[static_cast<std::size_t>(i)]);
  cat.fg_pool.push_back("app_home");
  return cat;
}

std::vector<int> pick_user_apps(Rng& rng, const PopulationConfig& cfg) {
  int n_pick = std::min(cfg.apps_per_user, cfg.n_apps);
  std::vector<double> w(static_cast<std::size_t>(cfg.n_apps));
  for (int i = 0; i < cfg.n_apps; ++i) w[static_cast<std::size_t>(i)] = 1.0 / (i + 1.0);
  std::vector<int> chosen;
  for (int j = 0; j < n_pick; ++j) {
    std::size_t idx = rng.weighted_index(w);
    chosen.push_back(static_cast<int>(idx));
    w[idx] = 0.0;
  }
  std::sort(chosen.begin(), chosen.end());
  return chosen;
}

}  // namespace

std::string_view to_string(Archetype a) {
  switch (a) {
    case Archetype::DefaulterAllow: return "defaulter_allow";
    case Archetype::DefaulterDeny: return "defaulter_deny";
    case Archetype::Contextual: return "contextual";
  }
  return "contextual";
}

Archetype archetype_from_string(std::string_view s) {
  if (s == "defaulter_allow") return Archetype::DefaulterAllow;
  if (s == "defaulter_deny") return Archetype::DefaulterDeny;
  if (s == "contextual") return Archetype::Contextual;
  throw std::invalid_argument("unknown archetype: " + std::string(s));
}

SensitivityClass app_sensitivity_class(std::string_view app_id) {
  return (fnv1a(app_id) & 1ull) ? SensitivityClass::High : SensitivityClass::Low;
}

std::vector<Persona> generate_population(const PopulationConfig& cfg) {
  if (cfg.n_users < 1) throw std::invalid_argument("n_users must be >= 1");
  if (cfg.fraction_defaulters < 0 || cfg.fraction_defaulters > 1)
    throw std::invalid_argument("fraction_defaulters out of [0,1]");

  int n_def = static_cast<int>(std::lround(cfg.n_users * cfg.fraction_defaulters));
  int n_deny = static_cast<int>(std::lround(n_def * cfg.defaulter_deny_share));

  std::vector<Persona> out;
  out.reserve(static_cast<std::size_t>(cfg.n_users));
  for (int i = 0; i < cfg.n_users; ++i) {
    Rng rng(mix_seed(cfg.rng_seed, mix_seed(0x9e25011aull, static_cast<std::uint64_t>(i))));
    Persona p;
    p.user_id = user_name(i);
    p.noise_seed = rng.next_u64();
    if (i < n_deny) {
      p.archetype = Archetype::DefaulterDeny;
      p.base_allow_bias = -2.0;
      p.noise_rate = sample_range(rng, cfg.def_noise);
    } else if (i < n_def) {
      p.archetype = Archetype::DefaulterAllow;
      p.base_allow_bias = 2.0;
      p.noise_rate = sample_range(rng, cfg.def_noise);
    } else {
      p.archetype = Archetype::Contextual;
      p.base_allow_bias = sample_range(rng, cfg.ctx_bias);
      p.visibility_weight = sample_range(rng, cfg.ctx_visibility_weight);
      p.fg_sensitivity_high = sample_range(rng, cfg.ctx_fg_high);
      p.fg_sensitivity_low = sample_range(rng, cfg.ctx_fg_low);
      p.noise_rate = sample_range(rng, cfg.ctx_noise);
    }
    const BehaviorRanges& br = cfg.behavior;
    BehaviorTargets& b = p.behavior;
    b.websites_per_day = sample_range(rng, br.websites_per_day);
    b.https_proportion = sample_range(rng, br.https_proportion);
    b.location_site_proportion = sample_range(rng, br.location_site_proportion);
    b.downloads_per_day = sample_range(rng, br.downloads_per_day);
    b.pin_unlocks_per_day = sample_range(rng, br.pin_unlocks_per_day);
    b.unlock_ms_per_day = sample_range(rng, br.unlock_ms_per_day);
    b.screen_timeout_proportion = sample_range(rng, br.screen_timeout_proportion);
    b.calls_per_day = sample_range(rng, br.calls_per_day);
    b.call_seconds_per_day = sample_range(rng, br.call_seconds_per_day);
    b.silent_proportion = sample_range(rng, br.silent_proportion);
    out.push_back(std::move(p));
  }
  return out;
}

Decision ground_truth_response(const Persona& persona,
                               const PermissionRequest& request) {
  double score = persona.base_allow_bias;
  if (request.visibility) score += persona.visibility_weight;
  score += app_sensitivity_class(request.foreground_app) == SensitivityClass::High
               ? persona.fg_sensitivity_high
               : persona.fg_sensitivity_low;
  Decision d = score > 0 ? Decision::Allow : Decision::Deny;
  if (persona.noise_rate > 0) {
    std::string key = request.user_id + '|' + request.app_id + '|' +
                      std::string(to_string(request.permission)) + '|' +
                      (request.visibility ? "1" : "0") + '|' +
                      request.foreground_app + '|' +
                      std::to_string(request.timestamp);
    std::uint64_t h = mix_seed(persona.noise_seed, fnv1a(key));
    double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    if (u < persona.noise_rate)
      d = d == Decision::Allow ? Decision::Deny : Decision::Allow;
  }
  return d;
}

Trace generate_user_trace(const Persona& persona, const PopulationConfig& cfg,
                          int user_index) {
  if (cfg.duration_days < 1) throw std::invalid_argument("duration_days must be >= 1");
  AppCatalog cat = build_catalog(cfg);
  Rng rng(mix_seed(cfg.rng_seed,
                   mix_seed(0x77ace5ull, static_cast<std::uint64_t>(user_index))));

  Trace trace;
  trace.user_id = persona.user_id;
  trace.duration_days = cfg.duration_days;

  std::vector<int> my_apps = pick_user_apps(rng, cfg);
  const BehaviorTargets& b = persona.behavior;
  std::int64_t horizon = static_cast<std::int64_t>(cfg.duration_days) * kDaySeconds;

  auto push = [&trace](std::int64_t t, BehavioralEvent ev) {
    trace.events.push_back({t, std::move(ev)});
  };

  for (int day = 0; day < cfg.duration_days; ++day) {
    std::int64_t day0 = static_cast<std::int64_t>(day) * kDaySeconds;
    auto day_t = [&rng, day0]() {
      return day0 + static_cast<std::int64_t>(rng.uniform() * (kDaySeconds - 1));
    };

    std::uint64_t n_web = rng.poisson(b.websites_per_day);
    for (std::uint64_t i = 0; i < n_web; ++i)
      push(day_t(), WebsiteLoaded{rng.bernoulli(b.https_proportion),
                                  rng.bernoulli(b.location_site_proportion)});

    std::uint64_t n_dl = rng.poisson(b.downloads_per_day);
    for (std::uint64_t i = 0; i < n_dl; ++i) push(day_t(), Download{});

    std::uint64_t n_unlock = rng.poisson(b.pin_unlocks_per_day);
    double ms_mean = b.unlock_ms_per_day / std::max(b.pin_unlocks_per_day, 1.0);
    for (std::uint64_t i = 0; i < n_unlock; ++i) {
      std::int64_t t = day_t();
      UnlockMethod m = rng.bernoulli(0.5) ? UnlockMethod::Pin : UnlockMethod::Password;
      std::int64_t dur =
          std::max<std::int64_t>(200, static_cast<std::int64_t>(
                                          rng.normal(ms_mean, 0.25 * ms_mean)));
      push(t, ScreenUnlock{m, dur});
      std::int64_t lock_t = t + 10 + static_cast<std::int64_t>(rng.uniform() * 290);
      LockCause cause = rng.bernoulli(b.screen_timeout_proportion)
                            ? LockCause::Timeout
                            : LockCause::Button;
      if (lock_t < horizon) push(lock_t, ScreenLock{cause});
    }

    std::uint64_t n_call = rng.poisson(b.calls_per_day);
    double call_dur = b.call_seconds_per_day / std::max(b.calls_per_day, 0.25);
    std::int64_t cursor = day0;
    for (std::uint64_t i = 0; i < n_call; ++i) {
      std::int64_t start = cursor + 60 +
                           static_cast<std::int64_t>(
                               rng.uniform() * (kDaySeconds / std::max<double>(n_call, 1)));
      std::int64_t dur =
          std::max<std::int64_t>(5, static_cast<std::int64_t>(call_dur * rng.uniform(0.5, 1.5)));
      std::int64_t end = std::min(start + dur, horizon - 1);
      if (start >= horizon - 1) break;
      if (end <= start) end = start + 1;
      push(start, AudioCallStart{});
      push(end, AudioCallEnd{});
      cursor = end;
    }

    if (b.silent_proportion > 0) {
      push(day0, RingerModeChange{RingerMode::Silent});
      std::int64_t back =
          day0 + static_cast<std::int64_t>(b.silent_proportion * kDaySeconds);
      if (back < day0 + kDaySeconds)
        push(back, RingerModeChange{RingerMode::Normal});
    } else if (day == 0) {
      push(day0, RingerModeChange{RingerMode::Normal});
    }
  }

  /* Permission requests as a Poisson arrival process over the horizon. */
  double rate_per_sec = cfg.request_rate_per_hour / 3600.0;
  if (rate_per_sec > 0) {
    double t = 0;
    while (true) {
      t += rng.exponential(rate_per_sec);
      std::int64_t ti = static_cast<std::int64_t>(t);
      if (ti >= horizon) break;
      int app_idx = my_apps[rng.uniform_int(my_apps.size())];
      const std::vector<PermissionType>& ps =
          cat.perms[static_cast<std::size_t>(app_idx)];
      PermissionRequest req;
      req.user_id = persona.user_id;
      req.app_id = cat.apps[static_cast<std::size_t>(app_idx)];
      req.permission = ps[rng.uniform_int(ps.size())];
      req.visibility = rng.bernoulli(cfg.visible_fraction);
      if (req.visibility && rng.bernoulli(0.8)) {
        req.foreground_app = req.app_id;
      } else {
        std::string fg;
        do {
          fg = cat.fg_pool[rng.uniform_int(cat.fg_pool.size())];
        } while (fg == req.app_id && cat.fg_pool.size() > 1);
        req.foreground_app = fg;
      }
      req.timestamp = ti;
      req.reveals_sensitive_data =
          cfg.non_revealing_fraction <= 0 || !rng.bernoulli(cfg.non_revealing_fraction);
      trace.events.push_back({ti, std::move(req)});
    }
  }

  std::stable_sort(trace.events.begin(), trace.events.end(),
                   [](const TraceEvent& a, const TraceEvent& b) { return a.t < b.t; });
  return trace;
}

std::vector<Trace> generate_traces(const std::vector<Persona>& personas,
                                   const PopulationConfig& cfg) {
  std::vector<Trace> out;
  out.reserve(personas.size());
  for (std::size_t i = 0; i < personas.size(); ++i)
    out.push_back(generate_user_trace(personas[i], cfg, static_cast<int>(i)));
  return out;
}

namespace {

json persona_to_json(const Persona& p) {
  json j;
  j["user"] = p.user_id;
  j["archetype"] = std::string(to_string(p.archetype));
  j["base_allow_bias"] = p.base_allow_bias;
  j["visibility_weight"] = p.visibility_weight;
  j["fg_sensitivity_high"] = p.fg_sensitivity_high;
  j["fg_sensitivity_low"] = p.fg_sensitivity_low;
  j["noise_rate"] = p.noise_rate;
  j["noise_seed"] = p.noise_seed;
  const BehaviorTargets& b = p.behavior;
  j["behavior"] = json{{"websites_per_day", b.websites_per_day},
                       {"https_proportion", b.https_proportion},
                       {"location_site_proportion", b.location_site_proportion},
                       {"downloads_per_day", b.downloads_per_day},
                       {"pin_unlocks_per_day", b.pin_unlocks_per_day},
                       {"unlock_ms_per_day", b.unlock_ms_per_day},
                       {"screen_timeout_proportion", b.screen_timeout_proportion},
                       {"calls_per_day", b.calls_per_day},
                       {"call_seconds_per_day", b.call_seconds_per_day},
                       {"silent_proportion", b.silent_proportion}};
  return j;
}

Persona persona_from_json(const json& j) {
  Persona p;
  p.user_id = j.at("user").get<std::string>();
  p.archetype = archetype_from_string(j.at("archetype").get<std::string>());
  p.base_allow_bias = j.at("base_allow_bias").get<double>();
  p.visibility_weight = j.at("visibility_weight").get<double>();
  p.fg_sensitivity_high = j.at("fg_sensitivity_high").get<double>();
  p.fg_sensitivity_low = j.at("fg_sensitivity_low").get<double>();
  p.noise_rate = j.at("noise_rate").get<double>();
  p.noise_seed = j.at("noise_seed").get<std::uint64_t>();
  const json& b = j.at("behavior");
  p.behavior.websites_per_day = b.at("websites_per_day").get<double>();
  p.behavior.https_proportion = b.at("https_proportion").get<double>();
  p.behavior.location_site_proportion = b.at("location_site_proportion").get<double>();
  p.behavior.downloads_per_day = b.at("downloads_per_day").get<double>();
  p.behavior.pin_unlocks_per_day = b.at("pin_unlocks_per_day").get<double>();
  p.behavior.unlock_ms_per_day = b.at("unlock_ms_per_day").get<double>();
  p.behavior.screen_timeout_proportion = b.at("screen_timeout_proportion").get<double>();
  p.behavior.calls_per_day = b.at("calls_per_day").get<double>();
  p.behavior.call_seconds_per_day = b.at("call_seconds_per_day").get<double>();
  p.behavior.silent_proportion = b.at("silent_proportion").get<double>();
  return p;
}

}  // namespace

void write_personas(const std::vector<Persona>& personas, const std::string& path) {
  json arr = json::array();
  for (const Persona& p : personas) arr.push_back(persona_to_json(p));
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  out << arr.dump(2) << '\n';
}

std::vector<Persona> read_personas(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  json arr = json::parse(in);
  std::vector<Persona> out;
  for (const json& j : arr) out.push_back(persona_from_json(j));
  return out;
}

namespace {

void apply_config_kv(PopulationConfig& cfg, const std::string& key,
                     const std::vector<double>& nums, const std::string& raw) {
  auto num = [&]() {
    if (nums.empty()) throw std::invalid_argument("expected number for " + key);
    return nums[0];
  };
  auto range = [&]() {
    if (nums.size() != 2) throw std::invalid_argument("expected [lo, hi] for " + key);
    return Range{nums[0], nums[1]};
  };
  if (key == "n_users") cfg.n_users = static_cast<int>(num());
  else if (key == "duration_days") cfg.duration_days = static_cast<int>(num());
  else if (key == "fraction_defaulters") cfg.fraction_defaulters = num();
  else if (key == "defaulter_deny_share") cfg.defaulter_deny_share = num();
  else if (key == "request_rate_per_hour") cfg.request_rate_per_hour = num();
  else if (key == "n_apps") cfg.n_apps = static_cast<int>(num());
  else if (key == "n_foreground_apps") cfg.n_foreground_apps = static_cast<int>(num());
  else if (key == "apps_per_user") cfg.apps_per_user = static_cast<int>(num());
  else if (key == "visible_fraction") cfg.visible_fraction = num();
  else if (key == "non_revealing_fraction") cfg.non_revealing_fraction = num();
  else if (key == "rng_seed") cfg.rng_seed = static_cast<std::uint64_t>(num());
  else if (key == "ctx_bias") cfg.ctx_bias = range();
  else if (key == "ctx_visibility_weight") cfg.ctx_visibility_weight = range();
  else if (key == "ctx_fg_high") cfg.ctx_fg_high = range();
  else if (key == "ctx_fg_low") cfg.ctx_fg_low = range();
  else if (key == "ctx_noise") cfg.ctx_noise = range();
  else if (key == "def_noise") cfg.def_noise = range();
  else if (key == "websites_per_day") cfg.behavior.websites_per_day = range();
  else if (key == "https_proportion") cfg.behavior.https_proportion = range();
  else if (key == "location_site_proportion") cfg.behavior.location_site_proportion = range();
  else if (key == "downloads_per_day") cfg.behavior.downloads_per_day = range();
  else if (key == "pin_unlocks_per_day") cfg.behavior.pin_unlocks_per_day = range();
  else if (key == "unlock_ms_per_day") cfg.behavior.unlock_ms_per_day = range();
  else if (key == "screen_timeout_proportion") cfg.behavior.screen_timeout_proportion = range();
  else if (key == "calls_per_day") cfg.behavior.calls_per_day = range();
  else if (key == "call_seconds_per_day") cfg.behavior.call_seconds_per_day = range();
  else if (key == "silent_proportion") cfg.behavior.silent_proportion = range();
  else throw std::invalid_argument("unknown config key: " + key + " (" + raw + ")");
}

void check_population_config(const PopulationConfig& cfg) {
  auto fraction = [](const char* name, double v) {
    if (v < 0 || v > 1)
      throw std::invalid_argument(std::string(name) + " out of [0,1]");
  };
  fraction("fraction_defaulters", cfg.fraction_defaulters);
  fraction("defaulter_deny_share", cfg.defaulter_deny_share);
  fraction("visible_fraction", cfg.visible_fraction);
  fraction("non_revealing_fraction", cfg.non_revealing_fraction);
  if (cfg.request_rate_per_hour < 0)
    throw std::invalid_argument("request_rate_per_hour must be >= 0");
  if (cfg.n_users < 1) throw std::invalid_argument("n_users must be >= 1");
  if (cfg.duration_days < 1)
    throw std::invalid_argument("duration_days must be >= 1");
  if (cfg.n_apps < 1) throw std::invalid_argument("n_apps must be >= 1");
  if (cfg.n_foreground_apps < 1)
    throw std::invalid_argument("n_foreground_apps must be >= 1");
  if (cfg.apps_per_user < 1 || cfg.apps_per_user > cfg.n_apps)
    throw std::invalid_argument("apps_per_user out of [1, n_apps]");
}

PopulationConfig config_from_json(std::istream& in) {
  json j = json::parse(in);
  PopulationConfig cfg;
  for (auto it = j.begin(); it != j.end(); ++it) {
    std::vector<double> nums;
    if (it.value().is_array()) {
      for (const json& v : it.value()) nums.push_back(v.get<double>());
    } else if (it.value().is_number()) {
      nums.push_back(it.value().get<double>());
    }
    apply_config_kv(cfg, it.key(), nums, it.value().dump());
  }
  return cfg;
}

}  // namespace

PopulationConfig load_population_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  if (path.size() > 5 && path.substr(path.size() - 5) == ".json") {
    PopulationConfig cfg = config_from_json(in);
    check_population_config(cfg);
    return cfg;
  }

  PopulationConfig cfg;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    auto trim = [](std::string s) {
      std::size_t a = s.find_first_not_of(" \t\r");
      std::size_t b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = trim(line);
    if (line.empty()) continue;
    std::size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected key = value");
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    std::vector<double> nums;
    if (!val.empty() && val.front() == '[') {
      if (val.back() != ']')
        throw std::invalid_argument("config line " + std::to_string(lineno) +
                                    ": unterminated array");
      std::stringstream ss(val.substr(1, val.size() - 2));
      std::string tok;
      while (std::getline(ss, tok, ',')) nums.push_back(std::stod(trim(tok)));
    } else if (val == "true") {
      nums.push_back(1);
    } else if (val == "false") {
      nums.push_back(0);
    } else {
      nums.push_back(std::stod(val));
    }
    apply_config_kv(cfg, key, nums, val);
  }
  check_population_config(cfg);
  return cfg;
}

}  // namespace permsim::synth
