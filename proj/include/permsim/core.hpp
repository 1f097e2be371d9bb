#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace permsim {

/* The ten permission types under study.  Codes are stable and used in
 * one-hot feature encodings and on the wire.  */
enum class PermissionType : int {
  AccessWifiState = 0,
  Nfc = 1,
  ReadHistoryBookmarks = 2,
  AccessFineLocation = 3,
  AccessCoarseLocation = 4,
  LocationHardware = 5,
  ReadCallLog = 6,
  AddVoicemail = 7,
  ReadSms = 8,
  SendSms = 9,
};

inline constexpr int kPermissionCount = 10;

std::string_view to_string(PermissionType p);
PermissionType permission_from_string(std::string_view name);

enum class Decision { Allow, Deny };

inline std::string_view to_string(Decision d) {
  return d == Decision::Allow ? "allow" : "deny";
}

enum class UnlockMethod { Pin, Password, Pattern, None };
enum class LockCause { Timeout, Button, App };
enum class RingerMode { Silent, Normal, Loud };

struct WebsiteLoaded {
  bool https = false;
  bool requested_location = false;
};
struct Download {};
struct ScreenUnlock {
  UnlockMethod method = UnlockMethod::None;
  std::int64_t duration_ms = 0;
};
struct ScreenLock {
  LockCause cause = LockCause::Timeout;
};
struct AudioCallStart {};
struct AudioCallEnd {};
struct RingerModeChange {
  RingerMode mode = RingerMode::Normal;
};

using BehavioralEvent =
    std::variant<WebsiteLoaded, Download, ScreenUnlock, ScreenLock,
                 AudioCallStart, AudioCallEnd, RingerModeChange>;

struct PermissionRequest {
  std::string user_id;
  std::string app_id;
  PermissionType permission = PermissionType::AccessWifiState;
  bool visibility = false;  /* requesting app visible to the user */
  std::string foreground_app;
  std::int64_t timestamp = 0;
  bool reveals_sensitive_data = true;

  bool operator==(const PermissionRequest&) const = default;
};

/* A prompt shown to the user and the decision they gave. */
struct PromptResponse {
  PermissionRequest request;
  Decision decision = Decision::Deny;
  int prompt_index = 0;
};

struct TraceEvent {
  std::int64_t t = 0;  /* seconds from trace start */
  std::variant<BehavioralEvent, PermissionRequest> body;
};

struct Trace {
  std::string user_id;
  int duration_days = 1;
  std::vector<TraceEvent> events;  /* non-decreasing t */
};

/* Which request fields participate in a policy key.  At least one field
 * must be selected.  */
struct KeySpec {
  bool app = false;
  bool foreground = false;
  bool permission = false;
  bool visibility = false;

  bool empty() const { return !app && !foreground && !permission && !visibility; }
  bool operator==(const KeySpec&) const = default;

  /* Parse codes like "a", "ap", "apv", "a_fpv".  "a_f" selects the
   * foreground app field.  */
  static KeySpec parse(std::string_view code);
  std::string code() const;
};

using ComboKey = std::vector<std::string>;

/* Projects the selected fields in the fixed order: app, foreground app,
 * permission, visibility.  Throws std::invalid_argument on an empty
 * KeySpec.  */
ComboKey combo_key(const PermissionRequest& req, const KeySpec& spec);

std::string combo_key_string(const ComboKey& key);

struct TraceViolation {
  std::size_t index = 0;  /* offending event index */
  std::string what;
};

/* Structural checks: duration >= 1, non-decreasing timestamps, request
 * timestamps consistent with their event line, request user matching the
 * trace owner, no call end without an open call.  */
std::vector<TraceViolation> validate_trace(const Trace& trace);

/* JSONL round trip.  One object per line: {"t":..., "user":...,
 * "kind":..., "payload":{...}}.  The first line is a trace_meta record
 * carrying duration_days.  */
void write_trace_jsonl(const Trace& trace, std::ostream& out);
Trace read_trace_jsonl(std::istream& in);

void write_trace_file(const Trace& trace, const std::string& path);
Trace read_trace_file(const std::string& path);

}  // namespace permsim
