#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/types.hpp"

namespace ice {

enum class EventKind {
  kLabelSubmitted,
  kLabelEdited,
  kFeatureAdded,
  kFeatureEdited,
  kFeatureRemoved,
  kQueryIssued,
  kSampleDrawn,
  kModelTrained,
};
const char* to_string(EventKind kind);
EventKind parse_event_kind(std::string_view text);

struct SessionEvent {
  std::uint64_t sequence = 0;
  std::int64_t timestamp_ms = 0;
  EventKind kind = EventKind::kLabelSubmitted;
  nlohmann::json payload;
  std::uint64_t digest = 0;  // chained over every earlier record

  friend bool operator==(const SessionEvent&, const SessionEvent&) = default;
};

enum class LabelSource { kSearch, kActiveSample, kReviewEdit, kUniform };
const char* to_string(LabelSource source);
LabelSource parse_label_source(std::string_view text);

struct LabelRecord {
  Label label = Label::kPositive;
  LabelSource source = LabelSource::kSearch;
  std::uint64_t sequence = 0;

  friend bool operator==(const LabelRecord&, const LabelRecord&) = default;
};

using LabelMap = std::map<RowId, LabelRecord>;

struct SplitAssignment {
  double ratio = 0.7;
  std::uint64_t salt = 0;

  // Train iff (hash(row, salt) mod 10^6) < ratio * 10^6.
  bool is_train(RowId row) const;
};

enum class Side { kTrain, kTest };
Side split(RowId row, const SplitAssignment& assignment);

struct SessionConfig {
  std::string session_id;
  std::string dataset_id;
  SplitAssignment split;
  std::uint32_t retrain_threshold = 1;
  std::vector<double> grid{1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
  std::uint32_t folds = 5;
  std::uint64_t fold_salt = 0;
  nlohmann::json initial_features = nlohmann::json::array();  // feature definitions

  nlohmann::json to_json() const;
  static SessionConfig from_json(const nlohmann::json& j);
};

class LogCorruption : public Error {
 public:
  using Error::Error;
};

enum class ReviewFilter { kAll, kFalsePositive, kFalseNegative, kDisagreement };
enum class ReviewSort { kScore, kRecency, kRowId };
ReviewFilter parse_review_filter(std::string_view text);
ReviewSort parse_review_sort(std::string_view text);

struct ReviewRow {
  RowId row = 0;
  LabelRecord record;
  std::optional<double> score;
};

using Predictor = std::function<double(RowId)>;

// Append-only event log of one session, mirrored in memory.
//
// File format: one header record, then one record per event. Each record is
// "<byte length> <body>\n". The header body is "ICESESSION1\t<config json>".
// An event body is "<seq>\t<timestamp ms>\t<kind>\t<digest hex>\t<payload json>"
// where digest = fnv1a64 of the previous digest (hex) followed by the body
// without its digest field. The header's digest seeds the chain.
class Session {
 public:
  // Creates a new log; fails if the file exists.
  static std::unique_ptr<Session> create(const std::filesystem::path& path, SessionConfig config);
  // Reads and verifies an existing log.
  static std::unique_ptr<Session> open(const std::filesystem::path& path);
  // Reads a log without keeping it open for appends.
  static std::vector<SessionEvent> read_events(const std::filesystem::path& path,
                                               SessionConfig* config = nullptr);

  const SessionConfig& config() const { return config_; }
  const std::filesystem::path& path() const { return path_; }

  // Durable (fsync) before returning the sequence number.
  std::uint64_t append(EventKind kind, nlohmann::json payload,
                       std::optional<std::int64_t> timestamp_ms = std::nullopt);

  std::uint64_t latest_sequence() const;
  std::vector<SessionEvent> events() const;
  SessionEvent event(std::uint64_t sequence) const;

  LabelMap current_labels(std::optional<std::uint64_t> at_sequence = std::nullopt) const;
  Side side(RowId row) const { return split(row, config_.split); }

  // One entry per model_trained event: the stored payloads.
  std::vector<nlohmann::json> metrics_history() const;
  std::size_t model_count() const;

  std::vector<ReviewRow> review_query(ReviewFilter filter, ReviewSort sort,
                                      const Predictor* predictor, double threshold = 0.5) const;

 private:
  Session() = default;
  void write_record(const std::string& body);

  SessionConfig config_;
  std::filesystem::path path_;
  int fd_ = -1;
  std::uint64_t chain_ = 0;
  mutable std::shared_mutex mutex_;
  std::mutex write_mutex_;
  std::vector<SessionEvent> events_;

 public:
  ~Session();
  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;
};

// Folds label events (up to at_sequence) into the current label map.
LabelMap fold_labels(const std::vector<SessionEvent>& events,
                     std::optional<std::uint64_t> at_sequence = std::nullopt);

}  // namespace ice
