#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <unordered_map>
#include <utility>
#include <variant>
#include <vector>

#include "ice/raw_store.hpp"
#include "ice/types.hpp"

namespace ice {

enum class ValueType { kText, kTokens, kSparse, kFloat, kFloatPair };
enum class ColumnKind { kStored, kLambda, kScore };

using FloatPair = std::pair<double, double>;
// Alternative order matches ValueType.
using Value = std::variant<std::string, TokenList, SparseVector, double, FloatPair>;

inline ValueType type_of(const Value& v) { return static_cast<ValueType>(v.index()); }
const char* to_string(ValueType type);

struct PassState;

class InsufficientMemory : public Error {
 public:
  using Error::Error;
};

// Aggregation results wrapped as a column: one value broadcast to every row,
// stored once.
class ScalarBoard {
 public:
  void publish(const std::string& name, double value);
  double get(std::string_view name) const;
  bool contains(std::string_view name) const;

 private:
  mutable std::shared_mutex mutex_;
  std::map<std::string, double, std::less<>> values_;
};

struct LambdaInputs {
  RowId row = 0;
  std::span<const Value* const> values;  // one per dependency, in order
  const ScalarBoard* scalars = nullptr;

  const Value& operator[](std::size_t i) const { return *values[i]; }
  double scalar(std::string_view name) const { return scalars->get(name); }
};

using LambdaFn = std::function<Value(const LambdaInputs&)>;

struct ColumnDef {
  std::string name;
  ColumnKind kind = ColumnKind::kLambda;
  ValueType type = ValueType::kFloat;
  std::vector<std::string> dependencies;  // lambda only
  std::string function_id;                // names the pure function, for diagnostics
  LambdaFn fn;
  std::string session_id;  // score columns only
};

// One probability/version pair per row, overwritten in place. Stored in a
// single 64-bit atomic so readers never observe a torn pair.
struct ScoreCell {
  float probability = 0.5f;
  ModelVersion version = 0;

  friend bool operator==(const ScoreCell&, const ScoreCell&) = default;
};

struct ScorerOptions {
  RowId check_interval = 1024;           // rows between interrupt checks
  std::optional<RowId> max_rows;         // stop early after this many rows
  std::chrono::microseconds throttle{0};  // sleep per chunk; tests use it to slow a pass
  bool resume = false;  // allow continuing with the column's active version
};

struct PassReport {
  std::string column;
  ModelVersion version = 0;
  RowId start_row = 0;
  RowId next_row = 0;
  RowId rows_scored = 0;
  RowId rows_skipped_dead = 0;
  bool completed = false;    // covered N rows
  bool interrupted = false;  // stopped by a newer pass or an explicit interrupt
  double seconds = 0.0;
  std::string error;  // set when the score function failed

  double rows_per_second() const { return seconds > 0 ? rows_scored / seconds : 0.0; }
};

// Scores the rows [begin, begin + out.size()). A chunk never crosses a shard
// boundary. Outputs are probabilities in [0, 1].
using ScoreBatchFn = std::function<void(RowId begin, std::span<double> out)>;

class ScoreColumn {
 public:
  ScoreColumn(std::string name, std::string session_id, RowId rows);
  ~ScoreColumn();
  ScoreColumn(const ScoreColumn&) = delete;
  ScoreColumn& operator=(const ScoreColumn&) = delete;

  const std::string& name() const { return name_; }
  const std::string& session_id() const { return session_id_; }
  RowId size() const { return rows_; }

  ScoreCell load(RowId row) const;
  void store(RowId row, ScoreCell cell);

  ModelVersion active_version() const { return active_version_.load(); }
  RowId cursor() const { return cursor_.load(); }
  bool scoring() const { return scoring_.load(); }

  // Exact count of rows per model version; sums to size().
  std::map<ModelVersion, RowId> freshness() const;

 private:
  friend class ColumnEngine;

  std::string name_;
  std::string session_id_;
  RowId rows_ = 0;
  std::unique_ptr<std::atomic<std::uint64_t>[]> cells_;
  std::atomic<RowId> cursor_{0};
  std::atomic<ModelVersion> active_version_{0};
  std::atomic<bool> scoring_{false};

  std::mutex pass_mutex_;  // one pass per column
  std::thread worker_;
  std::shared_ptr<PassState> pass_;
};

class ScorerPass {
 public:
  PassReport wait();
  bool done() const;
  void interrupt();

 private:
  friend class ColumnEngine;
  std::shared_ptr<PassState> state_;
  ScoreColumn* column_ = nullptr;
};

// A row as seen by predicates and combiners: values of the aggregation's
// input columns, aligned on rowId.
class RowRef {
 public:
  RowId row() const { return row_; }
  const Value& value(std::size_t input) const { return (*values_[input])[offset_]; }
  double number(std::size_t input) const;
  ScoreCell score(std::size_t input) const { return scores_[input]->load(row_); }

 private:
  friend class ColumnEngine;
  RowId row_ = 0;
  std::size_t offset_ = 0;
  std::vector<const std::vector<Value>*> values_;
  std::vector<const ScoreColumn*> scores_;
};

using RowPredicate = std::function<bool(const RowRef&)>;

enum class CombinerKind { kCount, kSum, kMin, kMax, kHistogram, kReservoir, kCustom };

struct CombinerSpec {
  CombinerKind kind = CombinerKind::kCount;
  std::size_t input = 0;  // which input column feeds sum/min/max/histogram
  double lo = 0.0;        // histogram range
  double hi = 1.0;
  std::uint32_t bins = 10;
  std::size_t k = 1;  // reservoir size
  std::uint64_t seed = 0;
  std::string custom;  // registered custom combiner name
};

struct AggregationSpec {
  std::vector<std::string> columns;  // stored, lambda or score columns
  RowPredicate predicate;            // empty accepts every row
  CombinerSpec combiner;
};

struct Histogram {
  double lo = 0.0;
  double hi = 1.0;
  std::vector<std::uint64_t> counts;
  std::uint64_t below = 0;
  std::uint64_t above = 0;

  friend bool operator==(const Histogram&, const Histogram&) = default;
};

struct AggregateResult {
  std::variant<std::uint64_t, double, Histogram, std::vector<RowId>> value;
  std::uint64_t rows_scanned = 0;
  std::uint64_t rows_matched = 0;
  double coverage = 1.0;  // live rows / N
  std::vector<std::uint32_t> skipped_shards;
  double map_seconds = 0.0;     // per-shard scans
  double reduce_seconds = 0.0;  // merging the shard partials

  std::uint64_t count() const { return std::get<std::uint64_t>(value); }
  double number() const { return std::get<double>(value); }
  const Histogram& histogram() const { return std::get<Histogram>(value); }
  const std::vector<RowId>& rows() const { return std::get<std::vector<RowId>>(value); }
};

// User-supplied fold over doubles. Registration probes associativity and
// commutativity of `merge` and rejects combiners that fail.
struct CustomCombiner {
  double identity = 0.0;
  std::function<double(double, const RowRef&)> fold;
  std::function<double(double, double)> merge;
  bool associative = false;
  bool commutative = false;
};

struct EngineOptions {
  std::uint32_t shard_count = 1;
  std::uint64_t memory_budget_bytes = 0;  // 0: physical memory
  std::uint64_t seed = 0x1ce;              // picks redirect targets for dead-shard reads
};

struct ShardInfo {
  std::uint32_t shard_id = 0;
  std::size_t first_bucket = 0;
  std::size_t bucket_count = 0;
  RowId begin = 0;
  RowId end = 0;
  bool alive = true;
  std::uint64_t resident_bytes = 0;

  RowId rows() const { return end - begin; }
};

struct RowResult {
  std::map<std::string, Value> values;  // score columns read as (probability, version)
  bool recomputed = false;
  std::optional<std::uint32_t> served_by;
};

class ColumnEngine {
 public:
  static std::unique_ptr<ColumnEngine> load_dataset(std::shared_ptr<RawStore> raw,
                                                    const EngineOptions& options);
  ~ColumnEngine();

  RowId size() const { return rows_; }
  const std::string& dataset_id() const { return raw_->manifest().dataset_id; }
  RawStore& raw_store() const { return *raw_; }

  std::uint32_t shard_count() const { return static_cast<std::uint32_t>(shards_.size()); }
  ShardInfo shard_info(std::uint32_t shard) const;
  std::uint32_t shard_of(RowId row) const;
  void set_shard_alive(std::uint32_t shard, bool alive);
  bool shard_alive(std::uint32_t shard) const;

  bool has_column(std::string_view name) const;
  ColumnDef column(std::string_view name) const;
  std::vector<std::string> column_names() const;

  // Registers a lambda column. Rejects unknown dependencies and cycles (a
  // name may not be redefined). Values are computed lazily per shard.
  std::string define_lambda(ColumnDef def);
  ScoreColumn& define_score_column(const std::string& name, const std::string& session_id);
  ScoreColumn& score_column(std::string_view name) const;

  // Computes the column on every live shard now (one worker per shard).
  void materialize(std::string_view name);
  void drop_cache(std::string_view name);
  // Shard-resident values; materializes on first use.
  std::shared_ptr<const std::vector<Value>> shard_values(std::uint32_t shard,
                                                         std::string_view name);

  RowResult get_row(RowId row, const std::vector<std::string>& columns);
  // Value of one row rebuilt from raw bytes plus lambda replay.
  Value recompute(RowId row, std::string_view name) const;

  void register_combiner(const std::string& name, CustomCombiner combiner);
  AggregateResult aggregate(const AggregationSpec& spec);
  std::vector<RowId> reservoir_sample(const std::vector<std::string>& columns,
                                      RowPredicate predicate, std::size_t k,
                                      std::uint64_t seed);

  ScalarBoard& scalars() { return scalars_; }

  // Interrupts any pass running on the column, then scores from its cursor.
  std::shared_ptr<ScorerPass> start_scorer(std::string_view score_column, ModelVersion version,
                                           ScoreBatchFn fn, ScorerOptions options = {});
  PassReport run_scorer(std::string_view score_column, ModelVersion version, ScoreBatchFn fn,
                        ScorerOptions options = {});
  std::map<ModelVersion, RowId> score_freshness(std::string_view score_column) const;

  std::string stats_text() const;

 private:
  struct Shard;

  ColumnEngine(std::shared_ptr<RawStore> raw, const EngineOptions& options);

  const ColumnDef& def(std::string_view name) const;
  void load_stored(Shard& shard);
  std::shared_ptr<const std::vector<Value>> values_locked(Shard& shard, const ColumnDef& def);
  void check_type(const ColumnDef& def, const Value& v) const;
  std::uint32_t pick_redirect_target();

  std::shared_ptr<RawStore> raw_;
  RowId rows_ = 0;
  std::vector<std::unique_ptr<Shard>> shards_;
  std::vector<RowId> shard_starts_;

  mutable std::shared_mutex schema_mutex_;
  std::map<std::string, ColumnDef, std::less<>> columns_;
  std::map<std::string, std::unique_ptr<ScoreColumn>, std::less<>> score_columns_;
  std::map<std::string, CustomCombiner, std::less<>> combiners_;

  ScalarBoard scalars_;
  std::mutex rng_mutex_;
  std::mt19937_64 redirect_rng_;
};

}  // namespace ice
