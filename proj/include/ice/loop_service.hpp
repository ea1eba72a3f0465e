#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/column_engine.hpp"
#include "ice/featurizer.hpp"
#include "ice/model_export.hpp"
#include "ice/session.hpp"
#include "ice/text_index.hpp"
#include "ice/trainer.hpp"

namespace ice {

struct ServiceOptions {
  std::filesystem::path session_dir;  // one log file per session
  ScorerOptions scorer;
};

struct LabelInput {
  RowId row = 0;
  Label label = Label::kPositive;
  LabelSource source = LabelSource::kSearch;
};

enum class ScorerState { kIdle, kScoring, kInterrupted };
const char* to_string(ScorerState state);

struct LoopStatus {
  std::string session_id;
  ModelVersion model_version = 0;
  ScorerState scorer = ScorerState::kIdle;
  std::uint32_t pending_labels = 0;
  std::uint32_t retrain_threshold = 1;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
  std::map<ModelVersion, RowId> freshness;
  RowId scorer_cursor = 0;
  std::vector<std::string> features;  // active feature keys
  std::optional<nlohmann::json> latest_metrics;

  nlohmann::json to_json() const;
};

struct SubmitResult {
  std::uint64_t last_sequence = 0;
  bool retrained = false;
  LoopStatus status;
};

enum class SampleStrategy { kScoreRange, kUniformUnlabeled, kSearch };
SampleStrategy parse_sample_strategy(std::string_view text);
const char* to_string(SampleStrategy strategy);

struct SampleRequest {
  SampleStrategy strategy = SampleStrategy::kUniformUnlabeled;
  double lo = 0.0;
  double hi = 1.0;
  std::string query;
  std::size_t count = 10;
  bool exclude_labeled = true;
  std::optional<std::uint64_t> seed;  // default derives from the session log
  // Rows never offered (e.g. a held-out evaluation set).
  std::shared_ptr<const std::unordered_set<RowId>> exclude;

  static SampleRequest from_json(const nlohmann::json& j);
};

struct SampleItem {
  RowId row = 0;
  std::string title;
  double score = 0.5;           // fresh score from the latest model
  ScoreCell stored;             // what the score column held when drawn
  std::optional<Label> prelabel;
  bool moved = false;           // fresh score left the requested range
  std::optional<double> search_score;

  nlohmann::json to_json() const;
};

enum class FeatureAction { kAdd, kEdit, kRemove };

struct FeatureEditRequest {
  FeatureAction action = FeatureAction::kAdd;
  std::string name;  // teacher-facing name; unique within the session
  FeatureKind kind = FeatureKind::kDictionary;
  DictionaryFeature dictionary;
  std::string builtin;
  std::size_t bow_cap = 10000;
  std::string model_session;  // model feature source
  ModelVersion model_version = 0;

  static FeatureEditRequest from_json(const nlohmann::json& j);
};

struct FeatureEditResult {
  std::string key;  // empty for removals
  bool retrained = false;
  LoopStatus status;
};

// A frozen trained model and the features it was trained on.
struct ModelSnapshot {
  LinearModel model;
  std::vector<FeatureDefinition> features;
  nlohmann::json export_doc;
};

struct TrainOutcome {
  std::shared_ptr<const ModelSnapshot> snapshot;
  nlohmann::json payload;  // model_trained event payload
};

class FeatureRegistry;

// Trains the session's family on the train-side labels and computes the
// history entry. Pure given (labels, features, config).
TrainOutcome train_session_model(const SessionConfig& config, const LabelMap& labels,
                                 const std::vector<std::string>& feature_keys,
                                 FeatureRegistry& registry, ModelVersion version,
                                 const std::string& trigger);

struct ReplayReport {
  bool labels_match = false;
  bool features_match = false;
  bool model_count_match = false;
  bool metrics_match = false;
  std::size_t events = 0;
  std::size_t models = 0;
  std::vector<std::string> mismatches;

  bool ok() const { return labels_match && features_match && model_count_match && metrics_match; }
};

class LoopService {
 public:
  LoopService(std::unique_ptr<ColumnEngine> engine, ServiceOptions options);
  ~LoopService();

  ColumnEngine& engine() { return *engine_; }
  FeatureRegistry& registry() { return *registry_; }
  const TextIndex& text_index();

  // Shorthand initial features ({"kind": "bow", "cap": n}, dictionaries,
  // builtins) are resolved into full definitions before the log is written.
  LoopStatus create_session(SessionConfig config);
  // Reopens a session log written earlier and rebuilds its state.
  LoopStatus open_session(const std::filesystem::path& log_path);
  bool has_session(const std::string& session_id) const;
  std::vector<std::string> session_ids() const;

  std::vector<ScoredRow> search(const std::string& query, std::size_t k);
  SubmitResult submit_labels(const std::string& session_id, const std::vector<LabelInput>& labels);
  std::vector<SampleItem> draw_sample(const std::string& session_id, const SampleRequest& request);
  FeatureEditResult feature_edit(const std::string& session_id, const FeatureEditRequest& request);
  LoopStatus status(const std::string& session_id);
  std::vector<nlohmann::json> metrics_history(const std::string& session_id);
  std::vector<ReviewRow> review(const std::string& session_id, ReviewFilter filter, ReviewSort sort,
                                double threshold = 0.5);
  nlohmann::json export_model(const std::string& session_id, ModelVersion version);
  std::shared_ptr<const ModelSnapshot> model(const std::string& session_id,
                                             std::optional<ModelVersion> version = std::nullopt);
  nlohmann::json item(RowId row, const std::string& session_id = {});
  Histogram score_histogram(const std::string& session_id, std::uint32_t bins);
  LabelMap current_labels(const std::string& session_id);
  std::vector<std::string> active_features(const std::string& session_id);

  // Blocks until the session's scorer pass (if any) finishes.
  std::optional<PassReport> wait_for_scoring(const std::string& session_id);
  void interrupt_scoring(const std::string& session_id);
  // Calibrated in-engine probability of one row under a model version.
  double predict(const std::string& session_id, RowId row,
                 std::optional<ModelVersion> version = std::nullopt);

  // Re-executes a session log on this engine and compares the rebuilt state
  // with the one recorded in the log (and with the live session if open).
  ReplayReport replay(const std::filesystem::path& log_path);

  std::string score_column_name(const std::string& session_id) const {
    return "score:" + session_id;
  }

 private:
  struct SessionState;

  SessionState& state(const std::string& session_id);
  FeatureDefinition resolve_feature(const nlohmann::json& spec, const std::string& session_id);
  std::shared_ptr<const BowVocabulary> vocabulary(std::size_t cap);
  bool try_retrain(SessionState& s, const std::string& trigger);
  void start_scoring(SessionState& s);
  LoopStatus status_locked(SessionState& s);
  double predict_snapshot(const ModelSnapshot& snap, const std::vector<std::string>& keys,
                          RowId row) const;

  std::unique_ptr<ColumnEngine> engine_;
  std::unique_ptr<FeatureRegistry> registry_;
  ServiceOptions options_;

  std::mutex index_mutex_;
  std::unique_ptr<TextIndex> index_;
  std::mutex vocab_mutex_;
  std::map<std::size_t, std::shared_ptr<const BowVocabulary>> vocabularies_;

  mutable std::shared_mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<SessionState>> sessions_;
};

}  // namespace ice
