#include "permsim/core.hpp"

#include <array>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace permsim {

namespace {

constexpr std::array<std::string_view, kPermissionCount> kPermissionNames = {
    "ACCESS_WIFI_STATE",    "NFC",
    "READ_HISTORY_BOOKMARKS", "ACCESS_FINE_LOCATION",
    "ACCESS_COARSE_LOCATION", "LOCATION_HARDWARE",
    "READ_CALL_LOG",        "ADD_VOICEMAIL",
    "READ_SMS",             "SEND_SMS",
};

}  // namespace

std::string_view to_string(PermissionType p) {
  int i = static_cast<int>(p);
  if (i < 0 || i >= kPermissionCount)
    throw std::invalid_argument("permission code out of range");
  return kPermissionNames[static_cast<std::size_t>(i)];
}

PermissionType permission_from_string(std::string_view name) {
  for (int i = 0; i < kPermissionCount; ++i)
    if (kPermissionNames[static_cast<std::size_t>(i)] == name)
      return static_cast<PermissionType>(i);
  throw std::invalid_argument("unknown permission: " + std::string(name));
}

KeySpec KeySpec::parse(std::string_view code) {
  KeySpec spec;
  std::size_t i = 0;
  while (i < code.size()) {
    if (code.substr(i, 3) == "a_f") {
      spec.foreground = true;
      i += 3;
    } else if (code[i] == 'a') {
      spec.app = true;
      ++i;
    } else if (code[i] == 'p') {
      spec.permission = true;
      ++i;
    } else if (code[i] == 'v') {
      spec.visibility = true;
      ++i;
    } else {
      throw std::invalid_argument("bad key spec: " + std::string(code));
    }
  }
  if (spec.empty())
    throw std::invalid_argument("key spec selects no fields");
  return spec;
}

std::string KeySpec::code() const {
  std::string s;
  if (app) s += 'a';
  if (foreground) s += "a_f";
  if (permission) s += 'p';
  if (visibility) s += 'v';
  return s;
}

ComboKey combo_key(const PermissionRequest& req, const KeySpec& spec) {
  if (spec.empty())
    throw std::invalid_argument("combo_key: key spec selects no fields");
  ComboKey key;
  if (spec.app) key.push_back(req.app_id);
  if (spec.foreground) key.push_back(req.foreground_app);
  if (spec.permission) key.emplace_back(to_string(req.permission));
  if (spec.visibility) key.emplace_back(req.visibility ? "true" : "false");
  return key;
}

std::string combo_key_string(const ComboKey& key) {
  std::string s;
  for (std::size_t i = 0; i < key.size(); ++i) {
    if (i) s += ':';
    s += key[i];
  }
  return s;
}

std::vector<TraceViolation> validate_trace(const Trace& trace) {
  std::vector<TraceViolation> out;
  if (trace.duration_days < 1)
    out.push_back({0, "duration_days must be >= 1"});
  std::int64_t prev = 0;
  int open_calls = 0;
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const TraceEvent& ev = trace.events[i];
    if (i > 0 && ev.t < prev)
      out.push_back({i, "timestamp decreases"});
    prev = ev.t;
    if (const auto* req = std::get_if<PermissionRequest>(&ev.body)) {
      if (req->timestamp != ev.t)
        out.push_back({i, "request timestamp differs from event time"});
      if (req->user_id != trace.user_id)
        out.push_back({i, "request user differs from trace owner"});
    } else {
      const auto& be = std::get<BehavioralEvent>(ev.body);
      if (std::holds_alternative<AudioCallStart>(be)) {
        ++open_calls;
      } else if (std::holds_alternative<AudioCallEnd>(be)) {
        if (open_calls == 0)
          out.push_back({i, "call end without open call"});
        else
          --open_calls;
      }
    }
  }
  return out;
}

namespace {

using nlohmann::json;

const char* unlock_method_name(UnlockMethod m) {
  switch (m) {
    case UnlockMethod::Pin: return "pin";
    case UnlockMethod::Password: return "password";
    case UnlockMethod::Pattern: return "pattern";
    case UnlockMethod::None: return "none";
  }
  return "none";
}

UnlockMethod unlock_method_from(const std::string& s) {
  if (s == "pin") return UnlockMethod::Pin;
  if (s == "password") return UnlockMethod::Password;
  if (s == "pattern") return UnlockMethod::Pattern;
  if (s == "none") return UnlockMethod::None;
  throw std::invalid_argument("bad unlock method: " + s);
}

const char* lock_cause_name(LockCause c) {
  switch (c) {
    case LockCause::Timeout: return "timeout";
    case LockCause::Button: return "button";
    case LockCause::App: return "app";
  }
  return "timeout";
}

LockCause lock_cause_from(const std::string& s) {
  if (s == "timeout") return LockCause::Timeout;
  if (s == "button") return LockCause::Button;
  if (s == "app") return LockCause::App;
  throw std::invalid_argument("bad lock cause: " + s);
}

const char* ringer_mode_name(RingerMode m) {
  switch (m) {
    case RingerMode::Silent: return "silent";
    case RingerMode::Normal: return "normal";
    case RingerMode::Loud: return "loud";
  }
  return "normal";
}

RingerMode ringer_mode_from(const std::string& s) {
  if (s == "silent") return RingerMode::Silent;
  if (s == "normal") return RingerMode::Normal;
  if (s == "loud") return RingerMode::Loud;
  throw std::invalid_argument("bad ringer mode: " + s);
}

struct EventLine {
  std::string kind;
  json payload;
};

EventLine event_line(const TraceEvent& ev) {
  if (const auto* req = std::get_if<PermissionRequest>(&ev.body)) {
    json p;
    p["app"] = req->app_id;
    p["perm"] = std::string(to_string(req->permission));
    p["vis"] = req->visibility;
    p["fg"] = req->foreground_app;
    p["reveals"] = req->reveals_sensitive_data;
    return {"perm_request", std::move(p)};
  }
  const auto& be = std::get<BehavioralEvent>(ev.body);
  return std::visit(
      [](const auto& e) -> EventLine {
        using T = std::decay_t<decltype(e)>;
        json p;
        if constexpr (std::is_same_v<T, WebsiteLoaded>) {
          p["https"] = e.https;
          p["req_loc"] = e.requested_location;
          return {"website_loaded", std::move(p)};
        } else if constexpr (std::is_same_v<T, Download>) {
          return {"download", std::move(p)};
        } else if constexpr (std::is_same_v<T, ScreenUnlock>) {
          p["method"] = unlock_method_name(e.method);
          p["duration_ms"] = e.duration_ms;
          return {"screen_unlock", std::move(p)};
        } else if constexpr (std::is_same_v<T, ScreenLock>) {
          p["cause"] = lock_cause_name(e.cause);
          return {"screen_lock", std::move(p)};
        } else if constexpr (std::is_same_v<T, AudioCallStart>) {
          return {"call_start", std::move(p)};
        } else if constexpr (std::is_same_v<T, AudioCallEnd>) {
          return {"call_end", std::move(p)};
        } else {
          p["mode"] = ringer_mode_name(e.mode);
          return {"ringer_mode", std::move(p)};
        }
      },
      be);
}

TraceEvent parse_event(std::int64_t t, const std::string& user,
                       const std::string& kind, const json& p) {
  TraceEvent ev;
  ev.t = t;
  if (kind == "perm_request") {
    PermissionRequest req;
    req.user_id = user;
    req.app_id = p.at("app").get<std::string>();
    req.permission = permission_from_string(p.at("perm").get<std::string>());
    req.visibility = p.at("vis").get<bool>();
    req.foreground_app = p.at("fg").get<std::string>();
    req.timestamp = t;
    req.reveals_sensitive_data = p.at("reveals").get<bool>();
    ev.body = std::move(req);
  } else if (kind == "website_loaded") {
    ev.body = BehavioralEvent{WebsiteLoaded{p.at("https").get<bool>(),
                                            p.at("req_loc").get<bool>()}};
  } else if (kind == "download") {
    ev.body = BehavioralEvent{Download{}};
  } else if (kind == "screen_unlock") {
    ev.body = BehavioralEvent{
        ScreenUnlock{unlock_method_from(p.at("method").get<std::string>()),
                     p.at("duration_ms").get<std::int64_t>()}};
  } else if (kind == "screen_lock") {
    ev.body = BehavioralEvent{
        ScreenLock{lock_cause_from(p.at("cause").get<std::string>())}};
  } else if (kind == "call_start") {
    ev.body = BehavioralEvent{AudioCallStart{}};
  } else if (kind == "call_end") {
    ev.body = BehavioralEvent{AudioCallEnd{}};
  } else if (kind == "ringer_mode") {
    ev.body = BehavioralEvent{
        RingerModeChange{ringer_mode_from(p.at("mode").get<std::string>())}};
  } else {
    throw std::invalid_argument("unknown event kind: " + kind);
  }
  return ev;
}

}  // namespace

void write_trace_jsonl(const Trace& trace, std::ostream& out) {
  json meta;
  meta["t"] = 0;
  meta["user"] = trace.user_id;
  meta["kind"] = "trace_meta";
  meta["payload"] = json{{"duration_days", trace.duration_days}};
  out << meta.dump() << '\n';
  for (const TraceEvent& ev : trace.events) {
    EventLine line = event_line(ev);
    json j;
    j["t"] = ev.t;
    j["user"] = trace.user_id;
    j["kind"] = line.kind;
    j["payload"] = std::move(line.payload);
    out << j.dump() << '\n';
  }
}

Trace read_trace_jsonl(std::istream& in) {
  Trace trace;
  std::string line;
  bool saw_meta = false;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    std::int64_t t = j.at("t").get<std::int64_t>();
    std::string user = j.at("user").get<std::string>();
    std::string kind = j.at("kind").get<std::string>();
    const json& p = j.at("payload");
    if (kind == "trace_meta") {
      trace.user_id = user;
      trace.duration_days = p.at("duration_days").get<int>();
      saw_meta = true;
      continue;
    }
    if (!saw_meta) trace.user_id = user;
    trace.events.push_back(parse_event(t, user, kind, p));
  }
  return trace;
}

void write_trace_file(const Trace& trace, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for write: " + path);
  write_trace_jsonl(trace, out);
}

Trace read_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open for read: " + path);
  return read_trace_jsonl(in);
}

}  // namespace permsim
