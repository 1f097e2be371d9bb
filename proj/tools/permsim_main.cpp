#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "permsim/core.hpp"
#include "permsim/evalharness.hpp"
#include "permsim/rng.hpp"
#include "permsim/features.hpp"
#include "permsim/policies.hpp"
#include "permsim/protocol.hpp"
#include "permsim/synthgen.hpp"

namespace fs = std::filesystem;
using namespace permsim;

namespace {

std::vector<Trace> load_traces(const std::string& dir,
                               const std::vector<synth::Persona>& personas) {
  std::vector<Trace> traces;
  traces.reserve(personas.size());
  for (const synth::Persona& p : personas) {
    fs::path path = fs::path(dir) / (p.user_id + ".jsonl");
    if (!fs::exists(path))
      throw std::runtime_error("missing trace file: " + path.string());
    traces.push_back(read_trace_file(path.string()));
  }
  return traces;
}

std::vector<synth::Persona> load_personas_for(const std::string& traces_dir,
                                              const std::string& personas_path) {
  std::string p = personas_path;
  if (p.empty()) p = (fs::path(traces_dir) / "personas.json").string();
  if (!fs::exists(p))
    throw std::runtime_error("personas file not found: " + p);
  return synth::read_personas(p);
}

policy::TruthFn truth_for(const synth::Persona& p) {
  return [p](const PermissionRequest& req) {
    return synth::ground_truth_response(p, req);
  };
}

int run_generate(const std::string& config_path, const std::string& out_dir,
                 std::uint64_t seed_override, bool seed_set) {
  synth::PopulationConfig cfg;
  if (!config_path.empty()) cfg = synth::load_population_config(config_path);
  if (seed_set) cfg.rng_seed = seed_override;

  std::vector<synth::Persona> personas = synth::generate_population(cfg);
  fs::create_directories(out_dir);
  for (std::size_t i = 0; i < personas.size(); ++i) {
    Trace t = synth::generate_user_trace(personas[i], cfg, static_cast<int>(i));
    std::vector<TraceViolation> bad = validate_trace(t);
    if (!bad.empty())
      throw std::runtime_error("generated trace for " + t.user_id +
                               " is invalid: " + bad.front().what);
    write_trace_file(t, (fs::path(out_dir) / (t.user_id + ".jsonl")).string());
  }
  synth::write_personas(personas,
                        (fs::path(out_dir) / "personas.json").string());
  std::cout << "wrote " << personas.size() << " traces ("
            << cfg.duration_days << " days) to " << out_dir << "\n";
  return 0;
}

int run_simulate(const std::string& policy_name, const std::string& traces_dir,
                 const std::string& personas_path, const std::string& out_dir,
                 bool include_non_revealing) {
  policy::PolicySpec spec = policy::PolicySpec::parse(policy_name);
  spec.include_non_revealing = include_non_revealing;
  std::vector<synth::Persona> personas =
      load_personas_for(traces_dir, personas_path);
  std::vector<Trace> traces = load_traces(traces_dir, personas);

  fs::create_directories(out_dir);
  long total_prompts = 0;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    policy::DecisionLog log =
        policy::simulate_policy(spec, traces[i], truth_for(personas[i]));
    total_prompts += log.prompt_count;
    std::ofstream out(fs::path(out_dir) / (traces[i].user_id + ".jsonl"));
    if (!out)
      throw std::runtime_error("cannot write log for " + traces[i].user_id);
    policy::write_decision_log_jsonl(log, out);
  }
  std::cout << spec.name() << ": " << traces.size() << " users, "
            << total_prompts << " prompts, logs in " << out_dir << "\n";
  return 0;
}

int run_evaluate(const eval::ExperimentConfig& cfg,
                 const std::string& traces_dir,
                 const std::string& personas_path, const std::string& out_dir) {
  std::vector<synth::Persona> personas =
      load_personas_for(traces_dir, personas_path);
  std::vector<Trace> traces = load_traces(traces_dir, personas);

  eval::ExperimentResult result = eval::run_experiment(traces, personas, cfg);

  /* Count identity over every scored user; a violation means the
   * harness itself is broken.  */
  for (const eval::UserReport& u : result.users) {
    if (u.n_scored == 0) continue;
    double s = u.accuracy + u.violation_rate + u.loss_rate;
    if (std::abs(s - 1.0) > 1e-9) {
      std::cerr << "invariant violation: rates sum to " << s << " for "
                << u.user << "\n";
      return 2;
    }
  }

  eval::write_experiment(result, out_dir);
  std::cout << "report in " << out_dir << "\n";
  return 0;
}

/* Blocking loopback helpers for the optional TCP transport. */
void write_all(int fd, const std::string& bytes) {
  std::size_t off = 0;
  while (off < bytes.size()) {
    ssize_t n = ::write(fd, bytes.data() + off, bytes.size() - off);
    if (n <= 0) throw std::runtime_error("socket write failed");
    off += static_cast<std::size_t>(n);
  }
}

std::string read_frame(int fd, std::string& buf) {
  char chunk[4096];
  while (true) {
    if (std::optional<std::string> payload = proto::try_unpack_frame(buf))
      return *payload;
    ssize_t n = ::read(fd, chunk, sizeof chunk);
    if (n <= 0) throw std::runtime_error("socket closed mid-frame");
    buf.append(chunk, static_cast<std::size_t>(n));
  }
}

proto::OnlineRunReport run_tcp(const proto::OnlinePlan& plan,
                               const proto::OnlineRunConfig& cfg) {
  int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (lfd < 0) throw std::runtime_error("socket() failed");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  if (::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
      ::listen(lfd, 1) != 0) {
    ::close(lfd);
    throw std::runtime_error("bind/listen failed");
  }
  socklen_t alen = sizeof addr;
  ::getsockname(lfd, reinterpret_cast<sockaddr*>(&addr), &alen);

  std::exception_ptr server_error;
  std::thread server([&]() {
    int cfd = -1;
    try {
      proto::ServerState state = proto::bootstrap_server(plan, cfg);
      cfd = ::accept(lfd, nullptr, nullptr);
      if (cfd < 0) throw std::runtime_error("accept failed");
      write_all(cfd, proto::pack_frame(proto::encode(proto::snapshot(state))));
      std::string buf;
      while (true) {
        std::string up_bytes;
        try {
          up_bytes = read_frame(cfd, buf);
        } catch (const std::runtime_error&) {
          break;  /* client closed: end of stream */
        }
        proto::FeatureUploadMsg up = proto::decode_upload(up_bytes);
        proto::ModelDownloadMsg down = proto::server_step(state, up);
        write_all(cfd, proto::pack_frame(proto::encode(down)));
      }
    } catch (...) {
      server_error = std::current_exception();
    }
    if (cfd >= 0) ::close(cfd);
  });

  proto::OnlineRunReport rep;
  int fd = -1;
  try {
    fd = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd < 0 ||
        ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0)
      throw std::runtime_error("connect failed");
    std::string buf;
    std::string initial = read_frame(fd, buf);
    rep = proto::run_online_stream(
        plan, cfg, initial, [&](const std::string& up_bytes) {
          write_all(fd, proto::pack_frame(up_bytes));
          return read_frame(fd, buf);
        });
  } catch (...) {
    if (fd >= 0) ::close(fd);
    ::close(lfd);
    server.join();
    throw;
  }
  ::close(fd);
  server.join();
  ::close(lfd);
  if (server_error) std::rethrow_exception(server_error);
  return rep;
}

int run_serve_sim(const std::string& traces_dir,
                  const std::string& personas_path,
                  const std::string& schedule, const std::string& transport,
                  const proto::OnlineRunConfig& cfg,
                  const policy::EsmSampler::Config& esm,
                  const std::string& out_path) {
  if (schedule != "daily")
    throw std::runtime_error("unsupported schedule: " + schedule);

  std::vector<synth::Persona> personas =
      load_personas_for(traces_dir, personas_path);
  std::vector<Trace> traces = load_traces(traces_dir, personas);

  std::vector<feat::LabeledRow> rows;
  for (std::size_t i = 0; i < traces.size(); ++i) {
    feat::EsmCollection col = feat::collect_esm_rows(
        traces[i], static_cast<int>(i), truth_for(personas[i]), esm,
        mix_seed(cfg.seed, mix_seed(0xe5a11ull, i)));
    for (feat::LabeledRow& r : col.rows) rows.push_back(std::move(r));
  }
  if (rows.empty()) throw std::runtime_error("no labeled rows collected");

  proto::OnlineRunReport rep;
  if (transport == "tcp") {
    proto::OnlinePlan plan = proto::prepare_online_run(rows, cfg);
    rep = run_tcp(plan, cfg);
  } else {
    rep = proto::simulate_online_run(rows, cfg);
  }

  nlohmann::json j;
  j["accuracy"] = proto::quantize6(rep.accuracy);
  j["n_total"] = rep.n_total;
  j["n_bootstrap"] = rep.n_bootstrap;
  j["n_stream"] = rep.n_stream;
  j["n_test"] = rep.n_test;
  j["messages_sent"] = rep.messages_sent;
  j["max_message_bytes"] = rep.max_message_bytes;
  j["max_user_day_bytes"] = rep.max_user_day_bytes;
  j["snapshot_bytes"] = rep.snapshot_bytes;
  j["final_generation"] = rep.final_generation;
  j["transport"] = transport;
  j["schedule"] = schedule;
  std::string text = j.dump(2) + "\n";
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw std::runtime_error("cannot write " + out_path);
    out << text;
  }
  std::cout << text;

  bool within = rep.max_message_bytes <= proto::kMaxMessageBytes &&
                rep.max_user_day_bytes <= proto::kMaxUserDayBytes &&
                rep.snapshot_bytes <= proto::kMaxSnapshotBytes;
  return within ? 0 : 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"contextual permission policy simulator"};
  app.require_subcommand(1);

  /* generate */
  auto* gen = app.add_subcommand("generate", "synthesize traces and personas");
  std::string gen_config, gen_out;
  std::uint64_t gen_seed = 0;
  gen->add_option("--config", gen_config, "population config (.toml or .json)");
  gen->add_option("--out", gen_out, "output directory")->required();
  CLI::Option* gen_seed_opt =
      gen->add_option("--seed", gen_seed, "override rng_seed");

  /* simulate */
  auto* sim = app.add_subcommand("simulate", "run a policy over traces");
  std::string sim_policy, sim_traces, sim_personas, sim_out;
  bool sim_nonrev = false;
  sim->add_option("--policy", sim_policy, "aoi or aofu-<keying>")->required();
  sim->add_option("--traces", sim_traces, "trace directory")->required();
  sim->add_option("--personas", sim_personas,
                  "personas file (default <traces>/personas.json)");
  sim->add_option("--out", sim_out, "log directory")->required();
  sim->add_flag("--include-non-revealing", sim_nonrev,
                "score requests that reveal no data");

  /* evaluate */
  auto* ev = app.add_subcommand("evaluate", "run an experiment and emit reports");
  std::string ev_traces, ev_personas, ev_policy, ev_features = "r2a";
  std::string ev_split = "kfold5", ev_out;
  std::uint64_t ev_seed = 1;
  double ev_threshold = 0.6, ev_c = 10, ev_gamma = 0;
  bool ev_grid = false, ev_roc = false, ev_probe = false, ev_count = false;
  int ev_threads = 0, ev_quota = 1, ev_cap = 3;
  ev->add_option("--traces", ev_traces, "trace directory")->required();
  ev->add_option("--personas", ev_personas,
                 "personas file (default <traces>/personas.json)");
  ev->add_option("--policy", ev_policy, "aoi, aofu-<keying>, or ml")->required();
  ev->add_option("--features", ev_features, "r1, r2b, r2a, or full");
  ev->add_option("--split", ev_split, "kfold5, louo, chrono20, or bootstrap:k");
  ev->add_option("--seed", ev_seed, "experiment seed");
  ev->add_option("--out", ev_out, "report directory")->required();
  ev->add_option("--threshold", ev_threshold, "confidence threshold");
  ev->add_option("--svm-c", ev_c, "SVM C");
  ev->add_option("--svm-gamma", ev_gamma, "RBF gamma (<= 0: 1/dim)");
  ev->add_flag("--grid", ev_grid, "cross-validated grid search");
  ev->add_flag("--emit-roc", ev_roc, "write roc_points.csv");
  ev->add_flag("--emit-probe", ev_probe, "run the adversarial probe");
  ev->add_flag("--count-prompts-correct", ev_count,
               "score prompted decisions as correct instead of excluding them");
  ev->add_option("--threads", ev_threads, "worker threads (0: all cores)");
  ev->add_option("--esm-quota", ev_quota, "reservoir prompts per day");
  ev->add_option("--esm-cap", ev_cap, "lifetime prompts per combo");

  /* serve-sim */
  auto* srv = app.add_subcommand("serve-sim", "phone/server online-learning run");
  std::string srv_traces, srv_personas, srv_schedule = "daily";
  std::string srv_transport = "inproc", srv_out, srv_features = "full";
  proto::OnlineRunConfig srv_cfg;
  policy::EsmSampler::Config srv_esm;
  srv->add_option("--traces", srv_traces, "trace directory")->required();
  srv->add_option("--personas", srv_personas,
                  "personas file (default <traces>/personas.json)");
  srv->add_option("--schedule", srv_schedule, "sync cadence (daily)");
  srv->add_option("--transport", srv_transport, "inproc or tcp")
      ->check(CLI::IsMember({"inproc", "tcp"}));
  srv->add_option("--seed", srv_cfg.seed, "run seed");
  srv->add_option("--features", srv_features, "wire feature set (r2b, r2a, full)");
  srv->add_option("--bootstrap-fraction", srv_cfg.bootstrap_fraction,
                  "head fraction used to batch-train the server");
  srv->add_option("--test-fraction", srv_cfg.test_fraction,
                  "chronological tail held out for scoring");
  srv->add_option("--max-points", srv_cfg.max_points_per_msg,
                  "feature points per upload message");
  srv->add_option("--out", srv_out, "also write the report JSON here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed())
      return run_generate(gen_config, gen_out, gen_seed,
                          gen_seed_opt->count() > 0);
    if (sim->parsed())
      return run_simulate(sim_policy, sim_traces, sim_personas, sim_out,
                          sim_nonrev);
    if (ev->parsed()) {
      eval::ExperimentConfig cfg;
      if (ev_policy == "ml") {
        cfg.policy = eval::PolicyChoice::Ml;
      } else {
        cfg.policy_spec = policy::PolicySpec::parse(ev_policy);
        cfg.policy = cfg.policy_spec.kind == policy::PolicyKind::Aoi
                         ? eval::PolicyChoice::Aoi
                         : eval::PolicyChoice::Aofu;
      }
      cfg.features = feat::feature_set_from_string(ev_features);
      cfg.split = eval::SplitSpec::parse(ev_split);
      cfg.seed = ev_seed;
      cfg.threshold = ev_threshold;
      cfg.grid = ev_grid;
      cfg.emit_roc = ev_roc;
      cfg.emit_probe = ev_probe;
      cfg.svm.c = ev_c;
      cfg.svm.gamma = ev_gamma;
      cfg.esm.daily_quota = ev_quota;
      cfg.esm.per_combo_cap = ev_cap;
      cfg.prompt_scoring = ev_count ? eval::PromptScoring::CountCorrect
                                    : eval::PromptScoring::Exclude;
      cfg.threads = ev_threads;
      return run_evaluate(cfg, ev_traces, ev_personas, ev_out);
    }
    if (srv->parsed()) {
      srv_cfg.set = feat::feature_set_from_string(srv_features);
      return run_serve_sim(srv_traces, srv_personas, srv_schedule,
                           srv_transport, srv_cfg, srv_esm, srv_out);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
