#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "permsim/features.hpp"
#include "permsim/learner.hpp"
#include "permsim/policies.hpp"
#include "permsim/synthgen.hpp"

namespace permsim::eval {

struct ConfusionCounts {
  long tp = 0;  /* truth allow, decided allow */
  long fp = 0;  /* truth deny, decided allow: privacy violation */
  long fn = 0;  /* truth allow, decided deny: functionality loss */
  long tn = 0;

  long total() const { return tp + fp + fn + tn; }
  double accuracy() const;
  double violation_rate() const;
  double loss_rate() const;
};

enum class PromptScoring { Exclude, CountCorrect };

ConfusionCounts score(const policy::DecisionLog& log,
                      PromptScoring prompts = PromptScoring::Exclude);

/* Probability a random positive outranks a random negative; ties count
 * half.  Absent when only one class is present.  */
std::optional<double> auc(const std::vector<double>& scores,
                          const std::vector<int>& labels01);

enum class UserGroup { Contextual, Defaulter };

/* Contextual iff the denial rate lies strictly inside (0.10, 0.90). */
UserGroup segment_user(double denial_rate);

inline std::string_view to_string(UserGroup g) {
  return g == UserGroup::Contextual ? "contextual" : "defaulter";
}

struct WilcoxonResult {
  double statistic = 0;  /* W+: rank sum of positive differences */
  double p_value = 1;
  double effect_size_r = 0;  /* |Z| / sqrt(n) */
  int n_used = 0;            /* pairs after dropping zero differences */
};

/* Paired two-sided test; exact enumeration for n <= 12, otherwise the
 * normal approximation with tie correction and continuity correction. */
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a,
                                    const std::vector<double>& b);

/* Mutual information between one feature column and the binary label,
 * in bits.  Numeric columns are bucketed into quantile bins.  */
double information_gain_bits(const std::vector<double>& values,
                             const std::vector<int>& labels01,
                             int quantile_bins = 10, bool categorical = false);

/* Systematic sweep over the runtime-context cells of deny-labeled
 * instances, looking for any context that flips a denial into a
 * high-confidence Allow.  */
struct ProbeInstance {
  feat::FeatureVector base;
  PermissionRequest request;
  int user_index = 0;
  feat::AggregateState aggregates;  /* state at the instance's time */
};

struct ProbeModel {
  const learn::SvmModel* model = nullptr;
  const feat::ScalingStats* scaling = nullptr;
  feat::InputSpec spec;
  double threshold = 0.6;
};

struct ProbeReport {
  long n_instances = 0;
  long n_cells = 0;          /* 10 * 2 * 24 * F per instance */
  long cells_per_instance = 0;
  long flipped_instances = 0;
  long allow_high_cells = 0;
  double flip_rate = 0;
  bool degenerate = false;   /* constant high-confidence Allow */
};

ProbeReport adversarial_probe(const ProbeModel& pm,
                              const std::vector<ProbeInstance>& instances,
                              const std::vector<std::string>& fg_candidates);

enum class PolicyChoice { Aoi, Aofu, Ml };

enum class SplitKind { KFold5, Louo, Chrono20, Bootstrap };

struct SplitSpec {
  SplitKind kind = SplitKind::KFold5;
  int bootstrap_k = 12;

  static SplitSpec parse(std::string_view s);
  std::string name() const;
};

struct ExperimentConfig {
  PolicyChoice policy = PolicyChoice::Ml;
  policy::PolicySpec policy_spec;  /* for Aoi / Aofu runs */
  feat::FeatureSet features = feat::FeatureSet::R2A;
  SplitSpec split;
  std::uint64_t seed = 1;
  double threshold = 0.6;
  bool grid = false;
  bool emit_roc = false;
  bool emit_probe = false;
  learn::SvmConfig svm;
  policy::EsmSampler::Config esm;
  PromptScoring prompt_scoring = PromptScoring::Exclude;
  int threads = 0;  /* 0: hardware concurrency */
};

struct UserReport {
  std::string user;
  std::string archetype;
  UserGroup group = UserGroup::Defaulter;
  long n_scored = 0;
  double denial_rate = 0;
  double accuracy = 0;
  double violation_rate = 0;
  double loss_rate = 0;
  long prompts = 0;
  std::optional<double> aofu_ap_accuracy;  /* bootstrap split only */
};

struct RocPoint {
  double score = 0, fpr = 0, tpr = 0;
};

struct ExperimentResult {
  std::vector<UserReport> users;
  std::string summary_json;
  std::vector<RocPoint> roc;
  std::optional<ProbeReport> probe;
};

ExperimentResult run_experiment(const std::vector<Trace>& traces,
                                const std::vector<synth::Persona>& personas,
                                const ExperimentConfig& config);

/* Writes per_user.csv, summary.json and the optional roc_points.csv /
 * probe.json under out_dir.  Output is byte-stable for a fixed seed.  */
void write_experiment(const ExperimentResult& result, const std::string& out_dir);

double median(std::vector<double> v);

/* Runs fn(i) for i in [0, n) on a small thread pool; results must be
 * written to disjoint slots.  */
void parallel_for(std::size_t n, int threads,
                  const std::function<void(std::size_t)>& fn);

}  // namespace permsim::eval
