#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "permsim/core.hpp"

namespace permsim::synth {

enum class Archetype { DefaulterAllow, DefaulterDeny, Contextual };

std::string_view to_string(Archetype a);
Archetype archetype_from_string(std::string_view s);

/* Foreground apps fall into two sensitivity classes derived from a hash
 * of the app id, so every module sees the same classification.  */
enum class SensitivityClass { Low, High };
SensitivityClass app_sensitivity_class(std::string_view app_id);

/* Per-day behavioral targets the generator aims for.  Proportions are
 * dimensionless; the rest are per-day counts or totals.  */
struct BehaviorTargets {
  double websites_per_day = 20;
  double https_proportion = 0.5;
  double location_site_proportion = 0.2;
  double downloads_per_day = 1;
  double pin_unlocks_per_day = 10;
  double unlock_ms_per_day = 15000;
  double screen_timeout_proportion = 0.5;
  double calls_per_day = 2;
  double call_seconds_per_day = 300;
  double silent_proportion = 0.2;
};

struct Persona {
  std::string user_id;
  Archetype archetype = Archetype::Contextual;
  double base_allow_bias = 0;
  double visibility_weight = 0;
  double fg_sensitivity_high = 0;  /* weight when foreground class is High */
  double fg_sensitivity_low = 0;
  double noise_rate = 0;
  std::uint64_t noise_seed = 0;
  BehaviorTargets behavior;
};

struct Range {
  double lo = 0;
  double hi = 0;
};

struct BehaviorRanges {
  Range websites_per_day{5, 60};
  Range https_proportion{0.2, 0.9};
  Range location_site_proportion{0.05, 0.5};
  Range downloads_per_day{0, 4};
  Range pin_unlocks_per_day{3, 30};
  Range unlock_ms_per_day{2000, 60000};
  Range screen_timeout_proportion{0.1, 0.9};
  Range calls_per_day{0.2, 8};
  Range call_seconds_per_day{30, 1800};
  Range silent_proportion{0.0, 0.7};
};

struct PopulationConfig {
  int n_users = 60;
  int duration_days = 14;
  double fraction_defaulters = 0.53;
  double defaulter_deny_share = 0.65;
  double request_rate_per_hour = 2.0;
  int n_apps = 12;
  int n_foreground_apps = 6;
  int apps_per_user = 6;
  double visible_fraction = 0.5765;
  double non_revealing_fraction = 0.0;
  std::uint64_t rng_seed = 1;

  Range ctx_bias{-0.6, 0.2};
  Range ctx_visibility_weight{0.3, 1.0};
  Range ctx_fg_high{-0.8, -0.1};
  Range ctx_fg_low{0.0, 0.4};
  Range ctx_noise{0.02, 0.10};
  Range def_noise{0.0, 0.05};

  BehaviorRanges behavior;
};

/* Flat key=value config loader (TOML subset: scalars, [lo, hi] pairs,
 * comments).  JSON files with the same keys are also accepted.  */
PopulationConfig load_population_config(const std::string& path);

std::vector<Persona> generate_population(const PopulationConfig& config);

/* Deterministic ground truth for one request.  score = base_allow_bias
 * + visibility_weight * [visible] + fg_sensitivity[class(foreground)];
 * Allow iff score > 0, then flipped with probability noise_rate using a
 * draw keyed on the persona seed and the request content, so repeated
 * evaluation of the same request is stable.  */
Decision ground_truth_response(const Persona& persona,
                               const PermissionRequest& request);

Trace generate_user_trace(const Persona& persona, const PopulationConfig& config,
                          int user_index);

/* Convenience: all traces for a population, indexed like the personas. */
std::vector<Trace> generate_traces(const std::vector<Persona>& personas,
                                   const PopulationConfig& config);

void write_personas(const std::vector<Persona>& personas, const std::string& path);
std::vector<Persona> read_personas(const std::string& path);

}  // namespace permsim::synth
