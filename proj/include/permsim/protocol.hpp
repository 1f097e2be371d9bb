#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "permsim/features.hpp"
#include "permsim/learner.hpp"

namespace permsim::proto {

inline constexpr int kSchemaVersion = 1;
inline constexpr std::size_t kMaxMessageBytes = 3072;
inline constexpr std::size_t kMaxUserDayBytes = 6144;
inline constexpr std::size_t kMaxSnapshotBytes = 10240;

/* Rounds to six significant decimal digits; message floats are
 * quantized at construction so encoding round-trips exactly.  */
double quantize6(double v);

/* One scaled feature vector plus its 0/1 label (1 = Allow). */
struct FeaturePoint {
  std::vector<double> x;
  int y = 0;

  bool operator==(const FeaturePoint&) const = default;
};

struct FeatureUploadMsg {
  int schema_version = kSchemaVersion;
  std::string cohort = "c0";  /* shared cohort tag, never a user id */
  std::int64_t client_day = 0;
  std::vector<FeaturePoint> batch;

  bool operator==(const FeatureUploadMsg&) const = default;
};

struct ModelDownloadMsg {
  int schema_version = kSchemaVersion;
  std::int64_t generation = 0;
  std::vector<double> w;
  double bias = 0;
  std::int64_t scaling_version = 0;

  bool operator==(const ModelDownloadMsg&) const = default;
};

FeatureUploadMsg make_upload(std::string cohort, std::int64_t client_day,
                             std::vector<FeaturePoint> batch);

/* Canonical JSON: keys sorted, floats at six significant digits.
 * Throws std::length_error with the measured size when the payload
 * exceeds kMaxMessageBytes.  */
std::string encode(const FeatureUploadMsg& m);
std::string encode(const ModelDownloadMsg& m);

/* Throw std::invalid_argument naming the byte offset on malformed
 * input and on an unknown schema version.  */
FeatureUploadMsg decode_upload(const std::string& bytes);
ModelDownloadMsg decode_download(const std::string& bytes);

struct ServerState {
  learn::SgdModel model;
  std::int64_t generation = 0;
  std::int64_t scaling_version = 1;
  std::deque<FeaturePoint> replay;
  std::size_t replay_cap = 512;

  ServerState(std::size_t dim, learn::SgdConfig cfg) : model(dim, cfg) {}
};

/* Applies the batch, replays the retained buffer once, retains the new
 * points, bumps the generation, and returns the fresh snapshot.  An
 * upload with a stale schema is rejected without touching state.  */
ModelDownloadMsg server_step(ServerState& s, const FeatureUploadMsg& upload);

ModelDownloadMsg snapshot(const ServerState& s);

struct ClientState {
  std::vector<double> w;
  double bias = 0;
  std::int64_t generation = -1;
  std::int64_t scaling_version = 0;
};

/* Returns true when the snapshot was newer and applied; duplicates and
 * regressions are no-ops.  */
bool client_apply(ClientState& c, const ModelDownloadMsg& msg);

learn::Prediction client_predict(const ClientState& c,
                                 std::span<const double> x,
                                 double threshold = 0.6);

struct OnlineRunConfig {
  double bootstrap_fraction = 0.5;  /* of all rows, used for batch init */
  double test_fraction = 0.2;       /* chronological tail held out */
  int bootstrap_epochs = 8;
  int max_points_per_msg = 8;
  learn::SgdConfig sgd;
  feat::FeatureSet set = feat::FeatureSet::Full;
  std::uint64_t seed = 1;
  double threshold = 0.6;
};

struct OnlineRunReport {
  double accuracy = 0;
  long n_total = 0, n_bootstrap = 0, n_stream = 0, n_test = 0;
  std::size_t max_message_bytes = 0;
  std::size_t max_user_day_bytes = 0;
  std::size_t snapshot_bytes = 0;
  std::int64_t final_generation = 0;
  long messages_sent = 0;
};

/* Chronological split: bootstrap head trains the server batch-style,
 * the middle streams through daily per-user syncs, the final tail is
 * scored with the last downloaded snapshot.  Scaling is fit on the
 * bootstrap head only and shared via scaling_version.  */
OnlineRunReport simulate_online_run(const std::vector<feat::LabeledRow>& rows,
                                    const OnlineRunConfig& cfg);

/* The same engine split open so the server half can sit behind a
 * transport.  prepare_online_run sorts and splits the rows and fits the
 * scaler; bootstrap_server builds the batch-initialized server;
 * run_online_stream drives the client side, reaching the server only
 * through sync (upload bytes in, download bytes out).  */
struct OnlinePlan {
  std::vector<const feat::LabeledRow*> ordered;  /* into the caller's rows */
  feat::InputSpec spec;
  feat::ScalingStats scaling;
  long n_total = 0, n_bootstrap = 0, n_stream = 0, n_test = 0;
};

using SyncFn = std::function<std::string(const std::string&)>;

OnlinePlan prepare_online_run(const std::vector<feat::LabeledRow>& rows,
                              const OnlineRunConfig& cfg);
ServerState bootstrap_server(const OnlinePlan& plan, const OnlineRunConfig& cfg);
OnlineRunReport run_online_stream(const OnlinePlan& plan,
                                  const OnlineRunConfig& cfg,
                                  const std::string& initial_snapshot_bytes,
                                  const SyncFn& sync);

/* Length-prefixed framing for the optional local TCP transport: 4-byte
 * big-endian payload length, then the canonical JSON payload.  */
std::string pack_frame(const std::string& payload);

/* Extracts and erases the first complete frame in buf, or nullopt when
 * more bytes are needed.  Throws std::length_error on a frame longer
 * than kMaxSnapshotBytes.  */
std::optional<std::string> try_unpack_frame(std::string& buf);

}  // namespace permsim::proto
