#include "ice/session.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <sstream>

#include "ice/hash.hpp"

namespace ice {

namespace {

constexpr std::string_view kHeaderMagic = "ICESESSION1";

constexpr std::pair<EventKind, const char*> kKindNames[] = {
    {EventKind::kLabelSubmitted, "label_submitted"}, {EventKind::kLabelEdited, "label_edited"},
    {EventKind::kFeatureAdded, "feature_added"},     {EventKind::kFeatureEdited, "feature_edited"},
    {EventKind::kFeatureRemoved, "feature_removed"}, {EventKind::kQueryIssued, "query_issued"},
    {EventKind::kSampleDrawn, "sample_drawn"},       {EventKind::kModelTrained, "model_trained"},
};

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string event_prefix(std::uint64_t seq, std::int64_t ts, EventKind kind) {
  return std::to_string(seq) + "\t" + std::to_string(ts) + "\t" + to_string(kind);
}

std::uint64_t chain_digest(std::uint64_t prev, const std::string& unsigned_body) {
  return fnv1a64(to_hex(prev) + unsigned_body);
}

std::vector<std::string> split_tabs(std::string_view body, std::size_t max_fields) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (out.size() + 1 < max_fields) {
    const auto tab = body.find('\t', start);
    if (tab == std::string_view::npos) break;
    out.emplace_back(body.substr(start, tab - start));
    start = tab + 1;
  }
  out.emplace_back(body.substr(start));
  return out;
}

void check_payload(EventKind kind, const nlohmann::json& p) {
  auto require = [&](bool ok, const char* what) {
    if (!ok) throw InvalidArgument(std::string(to_string(kind)) + " payload: " + what);
  };
  require(p.is_object(), "must be an object");
  switch (kind) {
    case EventKind::kLabelSubmitted:
    case EventKind::kLabelEdited:
      require(p.contains("row") && p["row"].is_number_unsigned(), "needs an unsigned 'row'");
      require(p.contains("label") && p["label"].is_string(), "needs 'label'");
      parse_label(p["label"].get<std::string>());
      if (p.contains("source")) parse_label_source(p["source"].get<std::string>());
      break;
    case EventKind::kFeatureAdded:
    case EventKind::kFeatureEdited:
      require(p.contains("feature") && p["feature"].is_object(), "needs a 'feature' definition");
      break;
    case EventKind::kFeatureRemoved:
      require(p.contains("id") && p["id"].is_string(), "needs 'id'");
      break;
    case EventKind::kQueryIssued:
      require(p.contains("query") && p["query"].is_string(), "needs 'query'");
      break;
    case EventKind::kSampleDrawn:
      require(p.contains("rows") && p["rows"].is_array(), "needs 'rows'");
      break;
    case EventKind::kModelTrained:
      require(p.contains("version") && p["version"].is_number_unsigned(), "needs 'version'");
      break;
  }
}

struct ParsedLog {
  SessionConfig config;
  std::vector<SessionEvent> events;
  std::uint64_t chain = 0;
  std::uint64_t valid_bytes = 0;
};

ParsedLog parse_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw NotFound("cannot open session log " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  const std::string data = buffer.str();

  ParsedLog log;
  std::size_t pos = 0;
  bool header = true;
  while (pos < data.size()) {
    const auto space = data.find(' ', pos);
    if (space == std::string::npos) throw LogCorruption("truncated record length at byte " + std::to_string(pos));
    std::uint64_t len = 0;
    try {
      len = std::stoull(data.substr(pos, space - pos));
    } catch (const std::exception&) {
      throw LogCorruption("bad record length at byte " + std::to_string(pos));
    }
    if (space + 1 + len + 1 > data.size() || data[space + 1 + len] != '\n') {
      throw LogCorruption("truncated record at byte " + std::to_string(pos));
    }
    const std::string body = data.substr(space + 1, len);
    pos = space + 1 + len + 1;
    if (header) {
      const auto fields = split_tabs(body, 2);
      if (fields.size() != 2 || fields[0] != kHeaderMagic) throw LogCorruption("missing session header");
      try {
        log.config = SessionConfig::from_json(nlohmann::json::parse(fields[1]));
      } catch (const nlohmann::json::exception& e) {
        throw LogCorruption(std::string("bad session header: ") + e.what());
      }
      log.chain = fnv1a64(body);
      header = false;
      continue;
    }
    const auto fields = split_tabs(body, 5);
    if (fields.size() != 5) throw LogCorruption("malformed event record");
    SessionEvent ev;
    try {
      ev.sequence = std::stoull(fields[0]);
      ev.timestamp_ms = std::stoll(fields[1]);
      ev.kind = parse_event_kind(fields[2]);
      ev.digest = from_hex(fields[3]);
      ev.payload = nlohmann::json::parse(fields[4]);
    } catch (const std::exception& e) {
      throw LogCorruption(std::string("malformed event record: ") + e.what());
    }
    if (ev.sequence != log.events.size() + 1) {
      throw LogCorruption("sequence gap at event " + std::to_string(ev.sequence));
    }
    const std::string unsigned_body = fields[0] + "\t" + fields[1] + "\t" + fields[2] + "\t" + fields[4];
    if (chain_digest(log.chain, unsigned_body) != ev.digest) {
      throw LogCorruption("digest mismatch at event " + std::to_string(ev.sequence));
    }
    log.chain = ev.digest;
    log.events.push_back(std::move(ev));
  }
  if (header) throw LogCorruption("empty session log");
  log.valid_bytes = pos;
  return log;
}

void write_all(int fd, const std::string& bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::write(fd, bytes.data() + done, bytes.size() - done);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(std::string("session log write failed: ") + std::strerror(errno));
    }
    done += static_cast<std::size_t>(n);
  }
  if (::fsync(fd) != 0) throw Error(std::string("session log fsync failed: ") + std::strerror(errno));
}

}  // namespace

const char* to_string(EventKind kind) {
  for (const auto& [k, name] : kKindNames) {
    if (k == kind) return name;
  }
  return "?";
}

EventKind parse_event_kind(std::string_view text) {
  for (const auto& [k, name] : kKindNames) {
    if (text == name) return k;
  }
  throw InvalidArgument("unknown event kind '" + std::string(text) + "'");
}

const char* to_string(LabelSource source) {
  switch (source) {
    case LabelSource::kSearch: return "search";
    case LabelSource::kActiveSample: return "active_sample";
    case LabelSource::kReviewEdit: return "review_edit";
    case LabelSource::kUniform: return "uniform";
  }
  return "?";
}

LabelSource parse_label_source(std::string_view text) {
  if (text == "search") return LabelSource::kSearch;
  if (text == "active_sample") return LabelSource::kActiveSample;
  if (text == "review_edit") return LabelSource::kReviewEdit;
  if (text == "uniform") return LabelSource::kUniform;
  throw InvalidArgument("unknown label source '" + std::string(text) + "'");
}

bool SplitAssignment::is_train(RowId row) const {
  return static_cast<double>(hash_row(row, salt) % 1000000ULL) < ratio * 1e6;
}

Side split(RowId row, const SplitAssignment& assignment) {
  return assignment.is_train(row) ? Side::kTrain : Side::kTest;
}

nlohmann::json SessionConfig::to_json() const {
  return {{"session_id", session_id},
          {"dataset_id", dataset_id},
          {"split_ratio", split.ratio},
          {"split_salt", split.salt},
          {"retrain_threshold", retrain_threshold},
          {"grid", grid},
          {"folds", folds},
          {"fold_salt", fold_salt},
          {"initial_features", initial_features}};
}

SessionConfig SessionConfig::from_json(const nlohmann::json& j) {
  SessionConfig c;
  try {
    c.session_id = j.at("session_id").get<std::string>();
    c.dataset_id = j.value("dataset_id", std::string{});
    c.split.ratio = j.value("split_ratio", 0.7);
    c.split.salt = j.value("split_salt", std::uint64_t{0});
    c.retrain_threshold = j.value("retrain_threshold", 1u);
    if (j.contains("grid")) c.grid = j.at("grid").get<std::vector<double>>();
    c.folds = j.value("folds", 5u);
    c.fold_salt = j.value("fold_salt", std::uint64_t{0});
    c.initial_features = j.value("initial_features", nlohmann::json::array());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad session config: ") + e.what());
  }
  if (c.session_id.empty()) throw InvalidArgument("session id must not be empty");
  for (char ch : c.session_id) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_')) {
      throw InvalidArgument("session id may contain only letters, digits, '-' and '_'");
    }
  }
  if (!(c.split.ratio > 0.0 && c.split.ratio <= 1.0)) throw InvalidArgument("split ratio must lie in (0, 1]");
  if (c.retrain_threshold < 1) throw InvalidArgument("retrain threshold must be at least 1");
  if (c.grid.empty()) throw InvalidArgument("trainer grid must not be empty");
  if (c.folds < 2) throw InvalidArgument("fold count must be at least 2");
  return c;
}

std::unique_ptr<Session> Session::create(const std::filesystem::path& path, SessionConfig config) {
  config = SessionConfig::from_json(config.to_json());  // validates
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_APPEND | O_CLOEXEC, 0644);
  if (fd < 0) {
    if (errno == EEXIST) throw Conflict("session log " + path.string() + " already exists");
    throw Error("cannot create session log " + path.string() + ": " + std::strerror(errno));
  }
  std::unique_ptr<Session> s(new Session());
  s->config_ = std::move(config);
  s->path_ = path;
  s->fd_ = fd;
  const std::string header = std::string(kHeaderMagic) + "\t" + s->config_.to_json().dump();
  s->write_record(header);
  s->chain_ = fnv1a64(header);
  return s;
}

std::unique_ptr<Session> Session::open(const std::filesystem::path& path) {
  ParsedLog log = parse_log(path);
  const int fd = ::open(path.c_str(), O_WRONLY | O_APPEND | O_CLOEXEC);
  if (fd < 0) throw Error("cannot open session log " + path.string() + ": " + std::strerror(errno));
  std::unique_ptr<Session> s(new Session());
  s->config_ = std::move(log.config);
  s->path_ = path;
  s->fd_ = fd;
  s->chain_ = log.chain;
  s->events_ = std::move(log.events);
  return s;
}

std::vector<SessionEvent> Session::read_events(const std::filesystem::path& path,
                                               SessionConfig* config) {
  ParsedLog log = parse_log(path);
  if (config) *config = std::move(log.config);
  return std::move(log.events);
}

Session::~Session() {
  if (fd_ >= 0) ::close(fd_);
}

void Session::write_record(const std::string& body) {
  write_all(fd_, std::to_string(body.size()) + " " + body + "\n");
}

std::uint64_t Session::append(EventKind kind, nlohmann::json payload,
                              std::optional<std::int64_t> timestamp_ms) {
  check_payload(kind, payload);
  std::lock_guard write_lock(write_mutex_);
  SessionEvent ev;
  {
    std::shared_lock lock(mutex_);
    ev.sequence = events_.size() + 1;
  }
  ev.timestamp_ms = timestamp_ms.value_or(now_ms());
  ev.kind = kind;
  ev.payload = std::move(payload);
  const std::string prefix = event_prefix(ev.sequence, ev.timestamp_ms, kind);
  const std::string dumped = ev.payload.dump();
  ev.digest = chain_digest(chain_, prefix + "\t" + dumped);
  write_record(prefix + "\t" + to_hex(ev.digest) + "\t" + dumped);
  chain_ = ev.digest;
  std::unique_lock lock(mutex_);
  events_.push_back(std::move(ev));
  return events_.back().sequence;
}

std::uint64_t Session::latest_sequence() const {
  std::shared_lock lock(mutex_);
  return events_.size();
}

std::vector<SessionEvent> Session::events() const {
  std::shared_lock lock(mutex_);
  return events_;
}

SessionEvent Session::event(std::uint64_t sequence) const {
  std::shared_lock lock(mutex_);
  if (sequence < 1 || sequence > events_.size()) {
    throw OutOfRange("no event " + std::to_string(sequence));
  }
  return events_[sequence - 1];
}

LabelMap fold_labels(const std::vector<SessionEvent>& events,
                     std::optional<std::uint64_t> at_sequence) {
  LabelMap labels;
  for (const auto& ev : events) {
    if (at_sequence && ev.sequence > *at_sequence) break;
    if (ev.kind != EventKind::kLabelSubmitted && ev.kind != EventKind::kLabelEdited) continue;
    LabelRecord rec;
    rec.label = parse_label(ev.payload.at("label").get<std::string>());
    rec.source = parse_label_source(ev.payload.value("source", std::string("search")));
    rec.sequence = ev.sequence;
    labels[ev.payload.at("row").get<RowId>()] = rec;
  }
  return labels;
}

LabelMap Session::current_labels(std::optional<std::uint64_t> at_sequence) const {
  std::shared_lock lock(mutex_);
  if (at_sequence && *at_sequence > events_.size()) {
    throw OutOfRange("sequence " + std::to_string(*at_sequence) + " is beyond the log");
  }
  return fold_labels(events_, at_sequence);
}

std::vector<nlohmann::json> Session::metrics_history() const {
  std::shared_lock lock(mutex_);
  std::vector<nlohmann::json> out;
  for (const auto& ev : events_) {
    if (ev.kind == EventKind::kModelTrained) out.push_back(ev.payload);
  }
  return out;
}

std::size_t Session::model_count() const {
  std::shared_lock lock(mutex_);
  return static_cast<std::size_t>(std::count_if(events_.begin(), events_.end(), [](const auto& e) {
    return e.kind == EventKind::kModelTrained;
  }));
}

ReviewFilter parse_review_filter(std::string_view text) {
  if (text == "all" || text.empty()) return ReviewFilter::kAll;
  if (text == "false_positive") return ReviewFilter::kFalsePositive;
  if (text == "false_negative") return ReviewFilter::kFalseNegative;
  if (text == "disagreement") return ReviewFilter::kDisagreement;
  throw InvalidArgument("unknown review filter '" + std::string(text) + "'");
}

ReviewSort parse_review_sort(std::string_view text) {
  if (text == "score") return ReviewSort::kScore;
  if (text == "recency") return ReviewSort::kRecency;
  if (text == "row" || text == "row_id" || text.empty()) return ReviewSort::kRowId;
  throw InvalidArgument("unknown review sort '" + std::string(text) + "'");
}

std::vector<ReviewRow> Session::review_query(ReviewFilter filter, ReviewSort sort,
                                             const Predictor* predictor, double threshold) const {
  const bool needs_model = filter != ReviewFilter::kAll || sort == ReviewSort::kScore;
  if (needs_model && (predictor == nullptr || !*predictor)) {
    throw Unavailable("no model yet: only the 'all' filter without score sorting is available");
  }
  std::vector<ReviewRow> rows;
  for (const auto& [row, rec] : current_labels()) {
    ReviewRow r{row, rec, std::nullopt};
    if (predictor && *predictor) r.score = (*predictor)(row);
    const bool positive = rec.label == Label::kPositive;
    bool keep = true;
    if (filter != ReviewFilter::kAll) {
      const bool predicted_positive = *r.score >= threshold;
      const bool fp = !positive && predicted_positive;
      const bool fn = positive && !predicted_positive;
      keep = (filter == ReviewFilter::kFalsePositive && fp) ||
             (filter == ReviewFilter::kFalseNegative && fn) ||
             (filter == ReviewFilter::kDisagreement && (fp || fn));
    }
    if (keep) rows.push_back(r);
  }
  switch (sort) {
    case ReviewSort::kScore:
      std::stable_sort(rows.begin(), rows.end(),
                       [](const ReviewRow& a, const ReviewRow& b) { return *a.score > *b.score; });
      break;
    case ReviewSort::kRecency:
      std::stable_sort(rows.begin(), rows.end(), [](const ReviewRow& a, const ReviewRow& b) {
        return a.record.sequence > b.record.sequence;
      });
      break;
    case ReviewSort::kRowId:
      break;  // map order
  }
  return rows;
}

}  // namespace ice
