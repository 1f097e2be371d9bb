#include "permsim/protocol.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "json.hpp"

#include "permsim/rng.hpp"

namespace permsim::proto {

namespace {

using nlohmann::json;

}  // namespace

double quantize6(double v) {
  if (v == 0.0 || !std::isfinite(v)) return v == 0.0 ? 0.0 : v;
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return std::strtod(buf, nullptr);
}

FeatureUploadMsg make_upload(std::string cohort, std::int64_t client_day,
                             std::vector<FeaturePoint> batch) {
  FeatureUploadMsg m;
  m.cohort = std::move(cohort);
  m.client_day = client_day;
  m.batch = std::move(batch);
  for (FeaturePoint& p : m.batch) {
    for (double& v : p.x) v = quantize6(v);
    if (p.y != 0 && p.y != 1)
      throw std::invalid_argument("make_upload: label must be 0/1");
  }
  return m;
}

std::string encode(const FeatureUploadMsg& m) {
  json j;
  j["schema"] = m.schema_version;
  j["cohort"] = m.cohort;
  j["day"] = m.client_day;
  json batch = json::array();
  for (const FeaturePoint& p : m.batch) {
    json pt;
    json xs = json::array();
    for (double v : p.x) xs.push_back(quantize6(v));
    pt["x"] = std::move(xs);
    pt["y"] = p.y;
    batch.push_back(std::move(pt));
  }
  j["batch"] = std::move(batch);
  std::string out = j.dump();
  if (out.size() > kMaxMessageBytes)
    throw std::length_error("upload message is " + std::to_string(out.size()) +
                            " bytes, limit " + std::to_string(kMaxMessageBytes));
  return out;
}

std::string encode(const ModelDownloadMsg& m) {
  json j;
  j["schema"] = m.schema_version;
  j["gen"] = m.generation;
  json ws = json::array();
  for (double v : m.w) ws.push_back(quantize6(v));
  j["w"] = std::move(ws);
  j["b"] = quantize6(m.bias);
  j["scaling"] = m.scaling_version;
  std::string out = j.dump();
  if (out.size() > kMaxMessageBytes)
    throw std::length_error("download message is " + std::to_string(out.size()) +
                            " bytes, limit " + std::to_string(kMaxMessageBytes));
  return out;
}

namespace {

json parse_or_throw(const std::string& bytes) {
  try {
    return json::parse(bytes);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("malformed message at byte " +
                                std::to_string(e.byte) + ": " + e.what());
  }
}

void check_schema(const json& j) {
  int v = j.at("schema").get<int>();
  if (v != kSchemaVersion)
    throw std::invalid_argument("unknown schema version " + std::to_string(v));
}

}  // namespace

FeatureUploadMsg decode_upload(const std::string& bytes) {
  json j = parse_or_throw(bytes);
  check_schema(j);
  FeatureUploadMsg m;
  m.schema_version = j.at("schema").get<int>();
  m.cohort = j.at("cohort").get<std::string>();
  m.client_day = j.at("day").get<std::int64_t>();
  for (const json& pt : j.at("batch")) {
    FeaturePoint p;
    for (const json& v : pt.at("x")) p.x.push_back(v.get<double>());
    p.y = pt.at("y").get<int>();
    if (p.y != 0 && p.y != 1)
      throw std::invalid_argument("upload label out of range");
    m.batch.push_back(std::move(p));
  }
  return m;
}

ModelDownloadMsg decode_download(const std::string& bytes) {
  json j = parse_or_throw(bytes);
  check_schema(j);
  ModelDownloadMsg m;
  m.schema_version = j.at("schema").get<int>();
  m.generation = j.at("gen").get<std::int64_t>();
  for (const json& v : j.at("w")) m.w.push_back(v.get<double>());
  m.bias = j.at("b").get<double>();
  m.scaling_version = j.at("scaling").get<std::int64_t>();
  return m;
}

ModelDownloadMsg snapshot(const ServerState& s) {
  ModelDownloadMsg m;
  m.generation = s.generation;
  m.w = s.model.weights();
  for (double& v : m.w) v = quantize6(v);
  m.bias = quantize6(s.model.bias());
  m.scaling_version = s.scaling_version;
  return m;
}

ModelDownloadMsg server_step(ServerState& s, const FeatureUploadMsg& upload) {
  if (upload.schema_version != kSchemaVersion)
    throw std::invalid_argument("server_step: stale schema version " +
                                std::to_string(upload.schema_version));
  for (const FeaturePoint& p : upload.batch) s.model.update(p.x, p.y);
  for (const FeaturePoint& p : s.replay) s.model.update(p.x, p.y);
  for (const FeaturePoint& p : upload.batch) {
    s.replay.push_back(p);
    if (s.replay.size() > s.replay_cap) s.replay.pop_front();
  }
  ++s.generation;
  return snapshot(s);
}

bool client_apply(ClientState& c, const ModelDownloadMsg& msg) {
  if (msg.schema_version != kSchemaVersion)
    throw std::invalid_argument("client_apply: stale schema version");
  if (msg.generation <= c.generation) return false;
  c.w = msg.w;
  c.bias = msg.bias;
  c.generation = msg.generation;
  c.scaling_version = msg.scaling_version;
  return true;
}

learn::Prediction client_predict(const ClientState& c,
                                 std::span<const double> x, double threshold) {
  if (x.size() != c.w.size())
    throw std::invalid_argument("client_predict: dimension mismatch");
  double z = c.bias;
  for (std::size_t i = 0; i < x.size(); ++i) z += c.w[i] * x[i];
  learn::Prediction p;
  p.decision_value = z;
  double pa = z >= 0 ? 1.0 / (1.0 + std::exp(-z))
                     : std::exp(z) / (1.0 + std::exp(z));
  p.label = pa >= 0.5 ? Decision::Allow : Decision::Deny;
  p.probability = p.label == Decision::Allow ? pa : 1.0 - pa;
  if (p.probability < 0.5) p.probability = 0.5;
  p.confidence = p.probability > threshold ? learn::Confidence::High
                                           : learn::Confidence::Low;
  return p;
}

OnlinePlan prepare_online_run(const std::vector<feat::LabeledRow>& rows,
                              const OnlineRunConfig& cfg) {
  if (rows.empty()) throw std::invalid_argument("prepare_online_run: no rows");
  if (cfg.set == feat::FeatureSet::R1)
    throw std::invalid_argument("prepare_online_run: wire format excludes ids");

  OnlinePlan plan;
  plan.ordered.reserve(rows.size());
  for (const feat::LabeledRow& r : rows) plan.ordered.push_back(&r);
  std::stable_sort(plan.ordered.begin(), plan.ordered.end(),
                   [](const feat::LabeledRow* a, const feat::LabeledRow* b) {
                     if (a->t != b->t) return a->t < b->t;
                     if (a->user_index != b->user_index)
                       return a->user_index < b->user_index;
                     return a->ordinal < b->ordinal;
                   });

  plan.n_total = static_cast<long>(plan.ordered.size());
  long n_test = std::lround(cfg.test_fraction * static_cast<double>(plan.n_total));
  n_test = std::clamp<long>(n_test, 0, plan.n_total);
  long n_train = plan.n_total - n_test;
  long n_boot = std::lround(cfg.bootstrap_fraction * static_cast<double>(plan.n_total));
  n_boot = std::clamp(n_boot, static_cast<long>(std::min<long>(1, n_train)), n_train);
  plan.n_bootstrap = n_boot;
  plan.n_stream = n_train - n_boot;
  plan.n_test = n_test;

  plan.spec = feat::input_spec(cfg.set, 0);
  std::vector<bool> mask = feat::scaling_mask(plan.spec);

  std::vector<std::vector<double>> boot_x;
  boot_x.reserve(static_cast<std::size_t>(n_boot));
  for (long i = 0; i < n_boot; ++i)
    boot_x.push_back(feat::build_input(
        plan.ordered[static_cast<std::size_t>(i)]->x, plan.spec, 0));
  plan.scaling = feat::fit_scaling(boot_x, mask);
  return plan;
}

ServerState bootstrap_server(const OnlinePlan& plan, const OnlineRunConfig& cfg) {
  ServerState server(plan.spec.dim(), cfg.sgd);

  std::vector<std::vector<double>> boot_x;
  boot_x.reserve(static_cast<std::size_t>(plan.n_bootstrap));
  for (long i = 0; i < plan.n_bootstrap; ++i)
    boot_x.push_back(feat::apply_scaling(
        plan.scaling, feat::build_input(
                          plan.ordered[static_cast<std::size_t>(i)]->x,
                          plan.spec, 0)));

  std::vector<std::size_t> order(boot_x.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(mix_seed(cfg.seed, 0xb007ull));
  for (int e = 0; e < cfg.bootstrap_epochs; ++e) {
    for (std::size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[rng.uniform_int(i)]);
    for (std::size_t i : order)
      server.model.update(boot_x[i],
                          plan.ordered[i]->label == Decision::Allow ? 1 : 0);
  }
  server.generation = 1;
  return server;
}

OnlineRunReport run_online_stream(const OnlinePlan& plan,
                                  const OnlineRunConfig& cfg,
                                  const std::string& initial_snapshot_bytes,
                                  const SyncFn& sync) {
  OnlineRunReport rep;
  rep.n_total = plan.n_total;
  rep.n_bootstrap = plan.n_bootstrap;
  rep.n_stream = plan.n_stream;
  rep.n_test = plan.n_test;

  std::map<int, ClientState> clients;
  std::map<std::pair<int, std::int64_t>, std::size_t> day_bytes;
  ModelDownloadMsg last_snapshot = decode_download(initial_snapshot_bytes);
  rep.snapshot_bytes = initial_snapshot_bytes.size();

  struct Group {
    std::int64_t day = 0;
    int user = 0;
    std::vector<const feat::LabeledRow*> rows;
  };
  std::map<std::pair<std::int64_t, int>, Group> groups;
  long n_train = plan.n_bootstrap + plan.n_stream;
  for (long i = plan.n_bootstrap; i < n_train; ++i) {
    const feat::LabeledRow* r = plan.ordered[static_cast<std::size_t>(i)];
    std::int64_t day = r->t / 86400;
    Group& g = groups[{day, r->user_index}];
    g.day = day;
    g.user = r->user_index;
    g.rows.push_back(r);
  }

  for (const auto& [key, g] : groups) {
    std::size_t off = 0;
    while (off < g.rows.size()) {
      std::size_t take = std::min<std::size_t>(
          static_cast<std::size_t>(cfg.max_points_per_msg),
          g.rows.size() - off);
      std::vector<FeaturePoint> batch;
      for (std::size_t i = 0; i < take; ++i) {
        const feat::LabeledRow* r = g.rows[off + i];
        FeaturePoint p;
        p.x = feat::apply_scaling(plan.scaling,
                                  feat::build_input(r->x, plan.spec, 0));
        p.y = r->label == Decision::Allow ? 1 : 0;
        batch.push_back(std::move(p));
      }
      off += take;

      FeatureUploadMsg up = make_upload("c0", g.day, std::move(batch));
      std::string up_bytes = encode(up);
      rep.max_message_bytes = std::max(rep.max_message_bytes, up_bytes.size());
      ++rep.messages_sent;

      std::string down_bytes = sync(up_bytes);
      rep.max_message_bytes = std::max(rep.max_message_bytes, down_bytes.size());
      rep.snapshot_bytes = std::max(rep.snapshot_bytes, down_bytes.size());

      ModelDownloadMsg down = decode_download(down_bytes);
      client_apply(clients.try_emplace(g.user).first->second, down);
      if (down.generation > last_snapshot.generation) last_snapshot = down;

      std::size_t& used = day_bytes[{g.user, g.day}];
      used += up_bytes.size() + down_bytes.size();
      rep.max_user_day_bytes = std::max(rep.max_user_day_bytes, used);
    }
  }
  rep.final_generation = last_snapshot.generation;

  /* Score the tail with the final snapshot. */
  ClientState final_client;
  client_apply(final_client, last_snapshot);
  long ok = 0;
  for (long i = n_train; i < rep.n_total; ++i) {
    const feat::LabeledRow* r = plan.ordered[static_cast<std::size_t>(i)];
    std::vector<double> x = feat::apply_scaling(
        plan.scaling, feat::build_input(r->x, plan.spec, 0));
    learn::Prediction p = client_predict(final_client, x, cfg.threshold);
    if (p.label == r->label) ++ok;
  }
  rep.accuracy = rep.n_test > 0
                     ? static_cast<double>(ok) / static_cast<double>(rep.n_test)
                     : 0.0;
  return rep;
}

OnlineRunReport simulate_online_run(const std::vector<feat::LabeledRow>& rows,
                                    const OnlineRunConfig& cfg) {
  OnlinePlan plan = prepare_online_run(rows, cfg);
  ServerState server = bootstrap_server(plan, cfg);
  std::string initial = encode(snapshot(server));
  return run_online_stream(plan, cfg, initial,
                           [&server](const std::string& up_bytes) {
                             FeatureUploadMsg up = decode_upload(up_bytes);
                             return encode(server_step(server, up));
                           });
}

std::string pack_frame(const std::string& payload) {
  if (payload.size() > kMaxSnapshotBytes)
    throw std::length_error("frame payload is " +
                            std::to_string(payload.size()) + " bytes, limit " +
                            std::to_string(kMaxSnapshotBytes));
  std::uint32_t n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(4 + payload.size());
  out.push_back(static_cast<char>((n >> 24) & 0xff));
  out.push_back(static_cast<char>((n >> 16) & 0xff));
  out.push_back(static_cast<char>((n >> 8) & 0xff));
  out.push_back(static_cast<char>(n & 0xff));
  out += payload;
  return out;
}

std::optional<std::string> try_unpack_frame(std::string& buf) {
  if (buf.size() < 4) return std::nullopt;
  std::uint32_t n = 0;
  for (int i = 0; i < 4; ++i)
    n = (n << 8) | static_cast<unsigned char>(buf[static_cast<std::size_t>(i)]);
  if (n > kMaxSnapshotBytes)
    throw std::length_error("frame length " + std::to_string(n) +
                            " exceeds limit " +
                            std::to_string(kMaxSnapshotBytes));
  if (buf.size() < 4 + static_cast<std::size_t>(n)) return std::nullopt;
  std::string payload = buf.substr(4, n);
  buf.erase(0, 4 + static_cast<std::size_t>(n));
  return payload;
}

}  // namespace permsim::proto
