#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <string>
#include <vector>

#include "permsim/features.hpp"
#include "permsim/protocol.hpp"
#include "permsim/rng.hpp"

#include "json.hpp"

using namespace permsim;
using namespace permsim::proto;

namespace {

PermissionRequest req(const std::string& app, PermissionType perm, bool vis,
                      const std::string& fg, std::int64_t t,
                      const std::string& user) {
  PermissionRequest r;
  r.user_id = user;
  r.app_id = app;
  r.permission = perm;
  r.visibility = vis;
  r.foreground_app = fg;
  r.timestamp = t;
  return r;
}

Trace contextual_trace(const std::string& user, int days) {
  Trace t;
  t.user_id = user;
  t.duration_days = days;
  for (int d = 0; d < days; ++d) {
    for (int i = 0; i < 12; ++i) {
      const char* app = i % 3 == 0 ? "maps" : (i % 3 == 1 ? "chat" : "cam");
      PermissionType perm = i % 3 == 0 ? PermissionType::AccessFineLocation
                            : i % 3 == 1 ? PermissionType::ReadSms
                                         : PermissionType::ReadCallLog;
      bool vis = i % 2 == 0;
      PermissionRequest r =
          req(app, perm, vis, vis ? app : "home",
              static_cast<std::int64_t>(d) * 86400 + 10 + i * 600, user);
      t.events.push_back({r.timestamp, r});
    }
  }
  return t;
}

std::vector<feat::LabeledRow> contextual_rows(int users, int days) {
  policy::TruthFn truth = [](const PermissionRequest& r) {
    return r.visibility ? Decision::Allow : Decision::Deny;
  };
  std::vector<feat::LabeledRow> rows;
  for (int u = 0; u < users; ++u) {
    Trace t = contextual_trace("u00" + std::to_string(u), days);
    feat::EsmCollection c = feat::collect_esm_rows(
        t, u, truth, policy::EsmSampler::Config{}, 100 + u);
    for (feat::LabeledRow& r : c.rows) rows.push_back(std::move(r));
  }
  return rows;
}

FeaturePoint point(std::vector<double> x, int y) {
  FeaturePoint p;
  p.x = std::move(x);
  p.y = y;
  return p;
}

}  // namespace

TEST_CASE("quantize6 keeps six significant digits") {
  CHECK(quantize6(0.123456789) == 0.123457);
  CHECK(quantize6(-0.000123456789) == -0.000123457);
  CHECK(quantize6(1234567.89) == 1234570.0);
  CHECK(quantize6(1.0) == 1.0);
  CHECK(quantize6(0.0) == 0.0);
  CHECK(quantize6(-2.5) == -2.5);

  Rng rng(0x9ull);
  for (int i = 0; i < 200; ++i) {
    double v = rng.normal(0.0, 100.0);
    CHECK(quantize6(quantize6(v)) == quantize6(v));
  }
}

TEST_CASE("upload messages round trip through canonical json") {
  FeatureUploadMsg m = make_upload(
      "c0", 17,
      {point({0.123456789, -4.2, 0.0}, 1), point({1e-7, 2.5, -0.75}, 0)});
  /* quantization happened at construction */
  CHECK(m.batch[0].x[0] == 0.123457);

  std::string bytes = encode(m);
  CHECK(decode_upload(bytes) == m);

  /* canonical form sorts keys */
  CHECK(bytes.rfind("{\"batch\":", 0) == 0);
  CHECK(bytes.find("\"cohort\":\"c0\"") != std::string::npos);
  CHECK(bytes.find("\"day\":17") != std::string::npos);
  CHECK(bytes.find("\"schema\":1") != std::string::npos);
  CHECK(encode(m) == bytes);
}

TEST_CASE("download messages round trip through canonical json") {
  ModelDownloadMsg m;
  m.generation = 12;
  m.w = {quantize6(0.5), quantize6(-1.25), quantize6(3.14159265)};
  m.bias = quantize6(-0.001234567);
  m.scaling_version = 2;

  std::string bytes = encode(m);
  CHECK(decode_download(bytes) == m);
  CHECK(bytes.rfind("{\"b\":", 0) == 0);
  CHECK(bytes.find("\"gen\":12") != std::string::npos);
  CHECK(bytes.find("\"scaling\":2") != std::string::npos);
}

TEST_CASE("make_upload validates labels") {
  CHECK_THROWS_AS(make_upload("c0", 0, {point({1.0}, 2)}),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_upload("c0", 0, {point({1.0}, -1)}),
                  std::invalid_argument);
}

TEST_CASE("oversized messages refuse to encode") {
  std::vector<FeaturePoint> batch;
  for (int i = 0; i < 20; ++i) {
    std::vector<double> x(27, 0.123456789);
    batch.push_back(point(std::move(x), i % 2));
  }
  FeatureUploadMsg m = make_upload("c0", 0, std::move(batch));
  CHECK_THROWS_AS(encode(m), std::length_error);

  ModelDownloadMsg d;
  d.w.assign(500, 0.123457);
  CHECK_THROWS_AS(encode(d), std::length_error);
}

TEST_CASE("decoders reject malformed bytes and unknown schemas") {
  CHECK_THROWS_AS(decode_upload("{nope"), std::invalid_argument);
  CHECK_THROWS_AS(decode_download(""), std::invalid_argument);
  CHECK_THROWS_WITH_AS(decode_upload("not json at all"),
                       doctest::Contains("byte"), std::invalid_argument);

  nlohmann::json j;
  j["schema"] = 9;
  j["cohort"] = "c0";
  j["day"] = 0;
  j["batch"] = nlohmann::json::array();
  CHECK_THROWS_AS(decode_upload(j.dump()), std::invalid_argument);

  j["schema"] = 1;
  nlohmann::json pt;
  pt["x"] = {1.0};
  pt["y"] = 3;
  j["batch"].push_back(pt);
  CHECK_THROWS_AS(decode_upload(j.dump()), std::invalid_argument);
}

TEST_CASE("server applies the batch, replays, then retains") {
  ServerState server(1, learn::SgdConfig{});
  learn::SgdModel mirror(1, learn::SgdConfig{});

  FeaturePoint a = point({0.5}, 1);
  FeaturePoint b = point({-1.25}, 0);

  ModelDownloadMsg d1 = server_step(server, make_upload("c0", 0, {a}));
  mirror.update(a.x, a.y);
  CHECK(d1.generation == 1);
  CHECK(server.model.weights()[0] == mirror.weights()[0]);

  ModelDownloadMsg d2 = server_step(server, make_upload("c0", 1, {b}));
  mirror.update(b.x, b.y);  /* the new batch first */
  mirror.update(a.x, a.y);  /* then one replay pass over retained points */
  CHECK(d2.generation == 2);
  CHECK(server.model.weights()[0] == mirror.weights()[0]);
  CHECK(server.model.bias() == mirror.bias());

  REQUIRE(server.replay.size() == 2);
  CHECK(server.replay[0] == a);
  CHECK(server.replay[1] == b);
}

TEST_CASE("replay buffer holds the newest 512 points") {
  ServerState server(1, learn::SgdConfig{});
  CHECK(server.replay_cap == 512);
  for (int step = 0; step < 80; ++step) {
    std::vector<FeaturePoint> batch;
    for (int i = 0; i < 8; ++i)
      batch.push_back(point({static_cast<double>(step * 8 + i)}, 0));
    server_step(server, make_upload("c0", step, std::move(batch)));
  }
  REQUIRE(server.replay.size() == 512);
  /* 640 points seen, the first 128 fell off */
  CHECK(server.replay.front().x[0] == 128.0);
  CHECK(server.replay.back().x[0] == 639.0);
}

TEST_CASE("a stale schema leaves the server untouched") {
  ServerState server(1, learn::SgdConfig{});
  server_step(server, make_upload("c0", 0, {point({1.0}, 1)}));
  std::vector<double> w = server.model.weights();
  std::int64_t gen = server.generation;

  FeatureUploadMsg stale = make_upload("c0", 1, {point({9.0}, 0)});
  stale.schema_version = 0;
  CHECK_THROWS_AS(server_step(server, stale), std::invalid_argument);
  CHECK(server.model.weights() == w);
  CHECK(server.generation == gen);
  CHECK(server.replay.size() == 1);
}

TEST_CASE("clients apply only newer generations") {
  ClientState c;
  CHECK(c.generation == -1);

  ModelDownloadMsg m;
  m.generation = 3;
  m.w = {1.0, 2.0};
  m.bias = 0.5;
  m.scaling_version = 1;
  CHECK(client_apply(c, m));
  CHECK(c.w == m.w);
  CHECK(c.generation == 3);

  /* duplicate and regression are no-ops */
  CHECK_FALSE(client_apply(c, m));
  m.generation = 2;
  m.w = {9.0, 9.0};
  CHECK_FALSE(client_apply(c, m));
  CHECK(c.w == std::vector<double>{1.0, 2.0});

  m.generation = 4;
  CHECK(client_apply(c, m));
  CHECK(c.w == std::vector<double>{9.0, 9.0});

  m.schema_version = 2;
  CHECK_THROWS_AS(client_apply(c, m), std::invalid_argument);
}

TEST_CASE("client predictions are a logistic readout") {
  ClientState c;
  c.w = {1.0, -2.0};
  c.bias = 0.25;
  std::vector<double> x{2.0, 0.5};
  learn::Prediction p = client_predict(c, x);
  double z = 0.25 + 2.0 - 1.0;
  CHECK(p.decision_value == doctest::Approx(z));
  CHECK(p.label == Decision::Allow);
  CHECK(p.probability == doctest::Approx(1.0 / (1.0 + std::exp(-z))));
  CHECK(p.confidence == learn::Confidence::High);

  /* z = 0 sits on the floor with low confidence */
  ClientState zero;
  zero.w = {0.0};
  learn::Prediction q = client_predict(zero, std::vector<double>{5.0});
  CHECK(q.probability == 0.5);
  CHECK(q.confidence == learn::Confidence::Low);

  std::vector<double> wrong{1.0, 2.0, 3.0};
  CHECK_THROWS_AS(client_predict(c, wrong), std::invalid_argument);
}

TEST_CASE("frames pack a big-endian length prefix") {
  std::string frame = pack_frame("hello");
  REQUIRE(frame.size() == 9);
  CHECK(frame[0] == 0);
  CHECK(frame[1] == 0);
  CHECK(frame[2] == 0);
  CHECK(frame[3] == 5);

  /* byte-at-a-time delivery */
  std::string buf;
  for (std::size_t i = 0; i + 1 < frame.size(); ++i) {
    buf.push_back(frame[i]);
    CHECK_FALSE(try_unpack_frame(buf).has_value());
  }
  buf.push_back(frame.back());
  auto got = try_unpack_frame(buf);
  REQUIRE(got.has_value());
  CHECK(*got == "hello");
  CHECK(buf.empty());

  /* two frames in one buffer */
  buf = pack_frame("a") + pack_frame("bc");
  CHECK(*try_unpack_frame(buf) == "a");
  CHECK(*try_unpack_frame(buf) == "bc");
  CHECK_FALSE(try_unpack_frame(buf).has_value());

  /* empty payload is legal */
  buf = pack_frame("");
  CHECK(*try_unpack_frame(buf) == "");
}

TEST_CASE("frames refuse oversized payloads in both directions") {
  std::string big(kMaxSnapshotBytes + 1, 'x');
  CHECK_THROWS_AS(pack_frame(big), std::length_error);

  std::string buf;
  std::uint32_t n = static_cast<std::uint32_t>(kMaxSnapshotBytes) + 1;
  buf.push_back(static_cast<char>((n >> 24) & 0xff));
  buf.push_back(static_cast<char>((n >> 16) & 0xff));
  buf.push_back(static_cast<char>((n >> 8) & 0xff));
  buf.push_back(static_cast<char>(n & 0xff));
  CHECK_THROWS_AS(try_unpack_frame(buf), std::length_error);
}

TEST_CASE("online run is deterministic and stays inside the byte budget") {
  std::vector<feat::LabeledRow> rows = contextual_rows(5, 10);
  REQUIRE(rows.size() >= 30);

  OnlineRunConfig cfg;
  OnlineRunReport a = simulate_online_run(rows, cfg);
  OnlineRunReport b = simulate_online_run(rows, cfg);

  CHECK(a.accuracy == b.accuracy);
  CHECK(a.max_message_bytes == b.max_message_bytes);
  CHECK(a.max_user_day_bytes == b.max_user_day_bytes);
  CHECK(a.final_generation == b.final_generation);
  CHECK(a.messages_sent == b.messages_sent);

  CHECK(a.n_total == static_cast<long>(rows.size()));
  CHECK(a.n_bootstrap + a.n_stream + a.n_test == a.n_total);
  CHECK(a.n_test == std::lround(0.2 * static_cast<double>(rows.size())));
  CHECK(a.messages_sent > 0);
  CHECK(a.max_message_bytes <= kMaxMessageBytes);
  CHECK(a.max_user_day_bytes <= kMaxUserDayBytes);
  CHECK(a.snapshot_bytes <= kMaxSnapshotBytes);
  CHECK(a.final_generation == 1 + a.messages_sent);

  /* the visibility rule is easy for the logistic model */
  CHECK(a.accuracy >= 0.7);
}

TEST_CASE("a fully bootstrapped run streams nothing") {
  std::vector<feat::LabeledRow> rows = contextual_rows(3, 6);
  OnlineRunConfig cfg;
  cfg.bootstrap_fraction = 1.0;
  OnlineRunReport rep = simulate_online_run(rows, cfg);
  CHECK(rep.n_stream == 0);
  CHECK(rep.messages_sent == 0);
  CHECK(rep.final_generation == 1);  /* just the bootstrap snapshot */
  CHECK(rep.n_test > 0);
  CHECK(rep.accuracy > 0.0);
}

TEST_CASE("the split engine equals the one-call runner") {
  std::vector<feat::LabeledRow> rows = contextual_rows(4, 8);
  OnlineRunConfig cfg;

  OnlineRunReport whole = simulate_online_run(rows, cfg);

  OnlinePlan plan = prepare_online_run(rows, cfg);
  ServerState server = bootstrap_server(plan, cfg);
  std::string initial = encode(snapshot(server));
  OnlineRunReport split = run_online_stream(
      plan, cfg, initial, [&server](const std::string& up) {
        return encode(server_step(server, decode_upload(up)));
      });

  CHECK(split.accuracy == whole.accuracy);
  CHECK(split.max_message_bytes == whole.max_message_bytes);
  CHECK(split.max_user_day_bytes == whole.max_user_day_bytes);
  CHECK(split.snapshot_bytes == whole.snapshot_bytes);
  CHECK(split.final_generation == whole.final_generation);
  CHECK(split.messages_sent == whole.messages_sent);
}

TEST_CASE("wire messages never carry user identifiers") {
  std::vector<feat::LabeledRow> rows = contextual_rows(4, 8);
  OnlineRunConfig cfg;
  OnlinePlan plan = prepare_online_run(rows, cfg);
  ServerState server = bootstrap_server(plan, cfg);
  std::string initial = encode(snapshot(server));

  std::vector<std::string> uploads, downloads;
  run_online_stream(plan, cfg, initial,
                    [&](const std::string& up) {
                      uploads.push_back(up);
                      std::string down =
                          encode(server_step(server, decode_upload(up)));
                      downloads.push_back(down);
                      return down;
                    });
  REQUIRE(!uploads.empty());

  for (const std::string& bytes : uploads) {
    CHECK(bytes.find("u00") == std::string::npos);
    nlohmann::json j = nlohmann::json::parse(bytes);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    CHECK(keys == std::vector<std::string>{"batch", "cohort", "day", "schema"});
  }
  for (const std::string& bytes : downloads) {
    CHECK(bytes.find("u00") == std::string::npos);
    nlohmann::json j = nlohmann::json::parse(bytes);
    std::vector<std::string> keys;
    for (auto it = j.begin(); it != j.end(); ++it) keys.push_back(it.key());
    CHECK(keys ==
          std::vector<std::string>{"b", "gen", "scaling", "schema", "w"});
  }
}

TEST_CASE("online run rejects unusable inputs") {
  CHECK_THROWS_AS(simulate_online_run({}, OnlineRunConfig{}),
                  std::invalid_argument);
  std::vector<feat::LabeledRow> rows = contextual_rows(2, 3);
  OnlineRunConfig cfg;
  cfg.set = feat::FeatureSet::R1;
  CHECK_THROWS_AS(simulate_online_run(rows, cfg), std::invalid_argument);
}

TEST_CASE("a single row still produces a coherent report") {
  std::vector<feat::LabeledRow> rows = contextual_rows(1, 1);
  REQUIRE(rows.size() == 1);
  OnlineRunReport rep = simulate_online_run(rows, OnlineRunConfig{});
  CHECK(rep.n_total == 1);
  CHECK(rep.n_bootstrap == 1);
  CHECK(rep.n_stream == 0);
  CHECK(rep.n_test == 0);
  CHECK(rep.accuracy == 0.0);
}
