#include "ice/column_engine.hpp"

#include <unistd.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <condition_variable>
#include <filesystem>
#include <limits>
#include <set>
#include <sstream>

namespace ice {

namespace {

std::uint64_t pack(ScoreCell cell) {
  return (static_cast<std::uint64_t>(cell.version) << 32) |
         std::bit_cast<std::uint32_t>(cell.probability);
}

ScoreCell unpack(std::uint64_t bits) {
  return {std::bit_cast<float>(static_cast<std::uint32_t>(bits & 0xffffffffULL)),
          static_cast<ModelVersion>(bits >> 32)};
}

std::uint64_t value_bytes(const Value& v) {
  std::uint64_t bytes = sizeof(Value);
  std::visit(
      [&](const auto& x) {
        using T = std::decay_t<decltype(x)>;
        if constexpr (std::is_same_v<T, std::string>) {
          if (x.size() > 15) bytes += x.capacity();
        } else if constexpr (std::is_same_v<T, TokenList>) {
          bytes += x.capacity() * sizeof(std::string);
          for (const auto& t : x) {
            if (t.size() > 15) bytes += t.capacity();
          }
        } else if constexpr (std::is_same_v<T, SparseVector>) {
          bytes += x.capacity() * sizeof(SparseEntry);
        }
      },
      v);
  return bytes;
}

std::uint64_t physical_memory() {
  const long pages = sysconf(_SC_PHYS_PAGES);
  const long page = sysconf(_SC_PAGE_SIZE);
  if (pages <= 0 || page <= 0) return std::numeric_limits<std::uint64_t>::max();
  return static_cast<std::uint64_t>(pages) * static_cast<std::uint64_t>(page);
}

// Shewchuk's exactly rounded summation. Partials merge exactly, so the final
// sum does not depend on how rows were split across shards.
class ExactSum {
 public:
  void add(double x) {
    std::size_t i = 0;
    for (double y : partials_) {
      if (std::abs(x) < std::abs(y)) std::swap(x, y);
      const double hi = x + y;
      const double lo = y - (hi - x);
      if (lo != 0.0) partials_[i++] = lo;
      x = hi;
    }
    partials_.resize(i);
    partials_.push_back(x);
  }

  void merge(const ExactSum& other) {
    for (double p : other.partials_) add(p);
  }

  double value() const {
    if (partials_.empty()) return 0.0;
    auto n = partials_.size();
    double hi = partials_[--n];
    double lo = 0.0;
    while (n > 0) {
      const double x = hi;
      const double y = partials_[--n];
      hi = x + y;
      lo = y - (hi - x);
      if (lo != 0.0) break;
    }
    // Round-half-even correction across the remaining partials.
    if (n > 0 && ((lo < 0 && partials_[n - 1] < 0) || (lo > 0 && partials_[n - 1] > 0))) {
      const double y = lo * 2;
      const double x = hi + y;
      if (y == x - hi) hi = x;
    }
    return hi;
  }

 private:
  std::vector<double> partials_;
};

struct Partial {
  std::uint64_t scanned = 0;
  std::uint64_t matched = 0;
  ExactSum sum;
  double min = std::numeric_limits<double>::infinity();
  double max = -std::numeric_limits<double>::infinity();
  Histogram histogram;
  std::vector<RowId> reservoir;
  double custom = 0.0;
};

std::vector<RowId> merge_reservoirs(std::vector<RowId> a, std::uint64_t count_a,
                                    std::vector<RowId> b, std::uint64_t count_b, std::size_t k,
                                    std::mt19937_64& rng) {
  const std::uint64_t total = count_a + count_b;
  const auto out = static_cast<std::size_t>(std::min<std::uint64_t>(k, total));
  // Number of picks from each side follows the hypergeometric law of drawing
  // `out` items without replacement from the union.
  std::uint64_t remaining_a = count_a;
  std::uint64_t remaining_b = count_b;
  std::size_t take_a = 0;
  for (std::size_t t = 0; t < out; ++t) {
    std::uniform_int_distribution<std::uint64_t> pick(0, remaining_a + remaining_b - 1);
    if (pick(rng) < remaining_a) {
      ++take_a;
      --remaining_a;
    } else {
      --remaining_b;
    }
  }
  auto take = [&rng](std::vector<RowId>& from, std::size_t n, std::vector<RowId>& into) {
    for (std::size_t i = 0; i < n; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, from.size() - 1);
      std::swap(from[i], from[pick(rng)]);
      into.push_back(from[i]);
    }
  };
  std::vector<RowId> merged;
  merged.reserve(out);
  take(a, take_a, merged);
  take(b, out - take_a, merged);
  std::sort(merged.begin(), merged.end());
  return merged;
}

}  // namespace

const char* to_string(ValueType type) {
  switch (type) {
    case ValueType::kText: return "text";
    case ValueType::kTokens: return "tokens";
    case ValueType::kSparse: return "sparse";
    case ValueType::kFloat: return "float";
    case ValueType::kFloatPair: return "float_pair";
  }
  return "unknown";
}

void ScalarBoard::publish(const std::string& name, double value) {
  std::unique_lock lock(mutex_);
  values_[name] = value;
}

double ScalarBoard::get(std::string_view name) const {
  std::shared_lock lock(mutex_);
  auto it = values_.find(name);
  if (it == values_.end()) throw NotFound("no broadcast value '" + std::string(name) + "'");
  return it->second;
}

bool ScalarBoard::contains(std::string_view name) const {
  std::shared_lock lock(mutex_);
  return values_.find(name) != values_.end();
}

struct PassState {
  std::mutex mutex;
  std::condition_variable cv;
  bool done = false;
  PassReport report;
  std::atomic<bool> interrupt{false};
};

ScoreColumn::ScoreColumn(std::string name, std::string session_id, RowId rows)
    : name_(std::move(name)),
      session_id_(std::move(session_id)),
      rows_(rows),
      cells_(new std::atomic<std::uint64_t>[rows]) {
  const std::uint64_t initial = pack(ScoreCell{});
  for (RowId r = 0; r < rows; ++r) cells_[r].store(initial, std::memory_order_relaxed);
}

ScoreColumn::~ScoreColumn() {
  std::lock_guard lock(pass_mutex_);
  if (pass_) pass_->interrupt = true;
  if (worker_.joinable()) worker_.join();
}

ScoreCell ScoreColumn::load(RowId row) const {
  return unpack(cells_[row].load(std::memory_order_acquire));
}

void ScoreColumn::store(RowId row, ScoreCell cell) {
  cells_[row].store(pack(cell), std::memory_order_release);
}

std::map<ModelVersion, RowId> ScoreColumn::freshness() const {
  std::map<ModelVersion, RowId> counts;
  if (rows_ == 0) return counts;
  ModelVersion run_version = load(0).version;
  RowId run = 0;
  for (RowId r = 0; r < rows_; ++r) {
    const ModelVersion v = load(r).version;
    if (v != run_version) {
      counts[run_version] += run;
      run_version = v;
      run = 0;
    }
    ++run;
  }
  counts[run_version] += run;
  return counts;
}

PassReport ScorerPass::wait() {
  std::unique_lock lock(state_->mutex);
  state_->cv.wait(lock, [&] { return state_->done; });
  return state_->report;
}

bool ScorerPass::done() const {
  std::lock_guard lock(state_->mutex);
  return state_->done;
}

void ScorerPass::interrupt() { state_->interrupt = true; }

double RowRef::number(std::size_t input) const {
  if (scores_[input] != nullptr) return scores_[input]->load(row_).probability;
  const Value& v = value(input);
  if (const double* d = std::get_if<double>(&v)) return *d;
  throw InvalidArgument("aggregation input is not numeric");
}

struct ColumnEngine::Shard {
  ShardInfo info;
  std::atomic<bool> alive{true};
  mutable std::shared_mutex mutex;  // guards resident and bytes
  std::unordered_map<std::string, std::shared_ptr<const std::vector<Value>>> resident;
  std::unordered_map<std::string, std::uint64_t> bytes;
  std::recursive_mutex materialize_mutex;  // single writer per shard
};

ColumnEngine::ColumnEngine(std::shared_ptr<RawStore> raw, const EngineOptions& options)
    : raw_(std::move(raw)), rows_(raw_->size()), redirect_rng_(options.seed) {}

ColumnEngine::~ColumnEngine() {
  // Scorer threads call back into the engine; stop them first.
  score_columns_.clear();
}

std::unique_ptr<ColumnEngine> ColumnEngine::load_dataset(std::shared_ptr<RawStore> raw,
                                                         const EngineOptions& options) {
  if (options.shard_count == 0) throw InvalidArgument("shard_count must be at least 1");
  std::unique_ptr<ColumnEngine> engine(new ColumnEngine(std::move(raw), options));
  const DatasetManifest& manifest = engine->raw_->manifest();
  const std::size_t buckets = manifest.buckets.size();
  const std::size_t shards = options.shard_count;

  // Contiguous bucket ranges; sizes differ by at most one.
  std::size_t next_bucket = 0;
  for (std::size_t s = 0; s < shards; ++s) {
    auto shard = std::make_unique<Shard>();
    shard->info.shard_id = static_cast<std::uint32_t>(s);
    shard->info.first_bucket = next_bucket;
    shard->info.bucket_count = buckets / shards + (s < buckets % shards ? 1 : 0);
    next_bucket += shard->info.bucket_count;
    shard->info.begin = shard->info.bucket_count == 0
                            ? (shard->info.first_bucket < buckets
                                   ? manifest.buckets[shard->info.first_bucket].start_row_id
                                   : engine->rows_)
                            : manifest.buckets[shard->info.first_bucket].start_row_id;
    shard->info.end =
        shard->info.bucket_count == 0
            ? shard->info.begin
            : manifest.buckets[shard->info.first_bucket + shard->info.bucket_count - 1]
                  .end_row_id();
    engine->shard_starts_.push_back(shard->info.begin);
    engine->shards_.push_back(std::move(shard));
  }

  // Sizing check before anything is loaded.
  const std::uint64_t budget =
      options.memory_budget_bytes ? options.memory_budget_bytes : physical_memory();
  std::vector<std::uint64_t> estimates(shards, 0);
  std::uint64_t total = 0;
  for (std::size_t s = 0; s < shards; ++s) {
    const auto& info = engine->shards_[s]->info;
    std::uint64_t est = 0;
    for (std::size_t b = info.first_bucket; b < info.first_bucket + info.bucket_count; ++b) {
      est += engine->raw_->bucket_file_size(b) +
             manifest.buckets[b].row_count * (manifest.schema.size() * sizeof(Value));
    }
    estimates[s] = est;
    total += est;
  }
  if (total > budget) {
    std::ostringstream report;
    report << "insufficient memory: need ~" << total << " bytes, budget " << budget << "\n";
    for (std::size_t s = 0; s < shards; ++s) {
      report << "  shard " << s << ": rows " << engine->shards_[s]->info.rows() << ", ~"
             << estimates[s] << " bytes\n";
    }
    throw InsufficientMemory(report.str());
  }

  for (const auto& field : manifest.schema) {
    ColumnDef def;
    def.name = field;
    def.kind = ColumnKind::kStored;
    def.type = ValueType::kText;
    def.function_id = "raw:" + field;
    engine->columns_.emplace(field, std::move(def));
  }

  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(shards);
  for (std::size_t s = 0; s < shards; ++s) {
    workers.emplace_back([&, s] {
      try {
        std::lock_guard lock(engine->shards_[s]->materialize_mutex);
        engine->load_stored(*engine->shards_[s]);
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return engine;
}

void ColumnEngine::load_stored(Shard& shard) {
  const DatasetManifest& manifest = raw_->manifest();
  const std::size_t fields = manifest.schema.size();
  std::vector<std::vector<Value>> columns(fields);
  for (auto& c : columns) c.reserve(shard.info.rows());
  for (std::size_t b = shard.info.first_bucket;
       b < shard.info.first_bucket + shard.info.bucket_count; ++b) {
    raw_->for_each_in_bucket(b, [&](RowId, std::string_view bytes) {
      RawRecord rec = parse_raw_record(bytes);
      std::string* parts[] = {&rec.external_id, &rec.url, &rec.title, &rec.body_text};
      for (std::size_t f = 0; f < fields && f < 4; ++f) {
        columns[f].emplace_back(std::in_place_type<std::string>, std::move(*parts[f]));
      }
    });
  }
  std::unique_lock lock(shard.mutex);
  for (std::size_t f = 0; f < fields; ++f) {
    std::uint64_t bytes = 0;
    for (const auto& v : columns[f]) bytes += value_bytes(v);
    shard.bytes[manifest.schema[f]] = bytes;
    shard.resident[manifest.schema[f]] =
        std::make_shared<const std::vector<Value>>(std::move(columns[f]));
  }
}

ShardInfo ColumnEngine::shard_info(std::uint32_t shard) const {
  if (shard >= shards_.size()) throw OutOfRange("no shard " + std::to_string(shard));
  const Shard& s = *shards_[shard];
  ShardInfo info = s.info;
  info.alive = s.alive.load();
  std::shared_lock lock(s.mutex);
  info.resident_bytes = 0;
  for (const auto& [_, b] : s.bytes) info.resident_bytes += b;
  return info;
}

std::uint32_t ColumnEngine::shard_of(RowId row) const {
  if (row >= rows_) {
    throw OutOfRange("row " + std::to_string(row) + " out of range [0, " +
                     std::to_string(rows_) + ")");
  }
  auto it = std::upper_bound(shard_starts_.begin(), shard_starts_.end(), row);
  return static_cast<std::uint32_t>(std::distance(shard_starts_.begin(), it) - 1);
}

void ColumnEngine::set_shard_alive(std::uint32_t shard, bool alive) {
  if (shard >= shards_.size()) throw OutOfRange("no shard " + std::to_string(shard));
  Shard& s = *shards_[shard];
  std::lock_guard materialize(s.materialize_mutex);
  s.alive = alive;
  if (!alive) {
    // A dead machine's memory is gone; nothing may be served from it.
    std::unique_lock lock(s.mutex);
    s.resident.clear();
    s.bytes.clear();
  }
}

bool ColumnEngine::shard_alive(std::uint32_t shard) const {
  if (shard >= shards_.size()) throw OutOfRange("no shard " + std::to_string(shard));
  return shards_[shard]->alive.load();
}

bool ColumnEngine::has_column(std::string_view name) const {
  std::shared_lock lock(schema_mutex_);
  return columns_.find(name) != columns_.end() ||
         score_columns_.find(name) != score_columns_.end();
}

const ColumnDef& ColumnEngine::def(std::string_view name) const {
  std::shared_lock lock(schema_mutex_);
  auto it = columns_.find(name);
  if (it == columns_.end()) throw NotFound("unknown column '" + std::string(name) + "'");
  return it->second;
}

ColumnDef ColumnEngine::column(std::string_view name) const {
  {
    std::shared_lock lock(schema_mutex_);
    auto sc = score_columns_.find(name);
    if (sc != score_columns_.end()) {
      ColumnDef d;
      d.name = sc->second->name();
      d.kind = ColumnKind::kScore;
      d.type = ValueType::kFloatPair;
      d.session_id = sc->second->session_id();
      return d;
    }
  }
  return def(name);
}

std::vector<std::string> ColumnEngine::column_names() const {
  std::shared_lock lock(schema_mutex_);
  std::vector<std::string> names;
  for (const auto& [n, _] : columns_) names.push_back(n);
  for (const auto& [n, _] : score_columns_) names.push_back(n);
  return names;
}

std::string ColumnEngine::define_lambda(ColumnDef d) {
  if (d.kind != ColumnKind::kLambda) throw InvalidArgument("define_lambda needs a lambda column");
  if (d.name.empty()) throw InvalidArgument("column name must not be empty");
  if (!d.fn) throw InvalidArgument("lambda column '" + d.name + "' has no function");
  std::unique_lock lock(schema_mutex_);
  if (columns_.count(d.name) || score_columns_.count(d.name)) {
    // Redefinition could close a cycle; names are immutable once defined.
    throw Conflict("column '" + d.name + "' already defined");
  }
  for (const auto& dep : d.dependencies) {
    if (dep == d.name) throw InvalidArgument("column '" + d.name + "' depends on itself");
    if (score_columns_.count(dep)) {
      throw InvalidArgument("lambda columns cannot depend on score column '" + dep + "'");
    }
    if (!columns_.count(dep)) throw NotFound("unknown dependency '" + dep + "'");
  }
  // Dependencies all predate this column, so the graph stays acyclic.
  std::string name = d.name;
  columns_.emplace(name, std::move(d));
  return name;
}

ScoreColumn& ColumnEngine::define_score_column(const std::string& name,
                                               const std::string& session_id) {
  std::unique_lock lock(schema_mutex_);
  if (columns_.count(name) || score_columns_.count(name)) {
    throw Conflict("column '" + name + "' already defined");
  }
  auto col = std::make_unique<ScoreColumn>(name, session_id, rows_);
  ScoreColumn& ref = *col;
  score_columns_.emplace(name, std::move(col));
  return ref;
}

ScoreColumn& ColumnEngine::score_column(std::string_view name) const {
  std::shared_lock lock(schema_mutex_);
  auto it = score_columns_.find(name);
  if (it == score_columns_.end()) throw NotFound("unknown score column '" + std::string(name) + "'");
  return *it->second;
}

void ColumnEngine::check_type(const ColumnDef& d, const Value& v) const {
  if (type_of(v) != d.type) {
    throw Error("column '" + d.name + "' produced " + to_string(type_of(v)) + ", declared " +
                to_string(d.type));
  }
}

std::shared_ptr<const std::vector<Value>> ColumnEngine::values_locked(Shard& shard,
                                                                      const ColumnDef& d) {
  {
    std::shared_lock lock(shard.mutex);
    auto it = shard.resident.find(d.name);
    if (it != shard.resident.end()) return it->second;
  }
  std::lock_guard materialize(shard.materialize_mutex);
  {
    std::shared_lock lock(shard.mutex);
    auto it = shard.resident.find(d.name);
    if (it != shard.resident.end()) return it->second;
  }
  if (!shard.alive) {
    throw Unavailable("shard " + std::to_string(shard.info.shard_id) + " is dead");
  }
  if (d.kind == ColumnKind::kStored) {
    load_stored(shard);
    std::shared_lock lock(shard.mutex);
    return shard.resident.at(d.name);
  }

  std::vector<std::shared_ptr<const std::vector<Value>>> deps;
  deps.reserve(d.dependencies.size());
  for (const auto& dep : d.dependencies) deps.push_back(values_locked(shard, def(dep)));

  std::vector<Value> out;
  out.reserve(shard.info.rows());
  std::vector<const Value*> inputs(deps.size());
  std::uint64_t bytes = 0;
  for (RowId r = shard.info.begin; r < shard.info.end; ++r) {
    const std::size_t offset = r - shard.info.begin;
    for (std::size_t i = 0; i < deps.size(); ++i) inputs[i] = &(*deps[i])[offset];
    LambdaInputs in{r, inputs, &scalars_};
    Value v = d.fn(in);
    check_type(d, v);
    bytes += value_bytes(v);
    out.push_back(std::move(v));
  }
  auto shared = std::make_shared<const std::vector<Value>>(std::move(out));
  std::unique_lock lock(shard.mutex);
  shard.resident[d.name] = shared;
  shard.bytes[d.name] = bytes;
  return shared;
}

std::shared_ptr<const std::vector<Value>> ColumnEngine::shard_values(std::uint32_t shard,
                                                                     std::string_view name) {
  if (shard >= shards_.size()) throw OutOfRange("no shard " + std::to_string(shard));
  return values_locked(*shards_[shard], def(name));
}

void ColumnEngine::materialize(std::string_view name) {
  const ColumnDef& d = def(name);
  std::vector<std::thread> workers;
  std::vector<std::exception_ptr> errors(shards_.size());
  for (std::size_t s = 0; s < shards_.size(); ++s) {
    if (!shards_[s]->alive) continue;
    workers.emplace_back([&, s] {
      try {
        values_locked(*shards_[s], d);
      } catch (const Unavailable&) {
        // Shard died meanwhile; its rows stay reachable through recompute.
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

void ColumnEngine::drop_cache(std::string_view name) {
  const ColumnDef& d = def(name);
  if (d.kind == ColumnKind::kStored) throw InvalidArgument("stored columns are not caches");
  for (auto& shard : shards_) {
    std::lock_guard materialize(shard->materialize_mutex);
    std::unique_lock lock(shard->mutex);
    shard->resident.erase(d.name);
    shard->bytes.erase(d.name);
  }
}

Value ColumnEngine::recompute(RowId row, std::string_view name) const {
  if (row >= rows_) throw OutOfRange("row " + std::to_string(row) + " out of range");
  const RawRecord rec = raw_->fetch_record(row);
  std::map<std::string, Value, std::less<>> memo;
  std::function<const Value&(const ColumnDef&)> eval = [&](const ColumnDef& d) -> const Value& {
    if (auto it = memo.find(d.name); it != memo.end()) return it->second;
    Value v;
    if (d.kind == ColumnKind::kStored) {
      if (d.name == "external_id") v = rec.external_id;
      else if (d.name == "url") v = rec.url;
      else if (d.name == "title") v = rec.title;
      else if (d.name == "body_text") v = rec.body_text;
      else throw NotFound("stored column '" + d.name + "' not in raw schema");
    } else {
      std::vector<const Value*> inputs;
      for (const auto& dep : d.dependencies) inputs.push_back(&eval(def(dep)));
      v = d.fn(LambdaInputs{row, inputs, &scalars_});
      check_type(d, v);
    }
    return memo.emplace(d.name, std::move(v)).first->second;
  };
  return eval(def(name));
}

std::uint32_t ColumnEngine::pick_redirect_target() {
  std::vector<std::uint32_t> live;
  for (const auto& s : shards_) {
    if (s->alive) live.push_back(s->info.shard_id);
  }
  if (live.empty()) throw Unavailable("no live shard to serve the request");
  std::lock_guard lock(rng_mutex_);
  std::uniform_int_distribution<std::size_t> pick(0, live.size() - 1);
  return live[pick(redirect_rng_)];
}

RowResult ColumnEngine::get_row(RowId row, const std::vector<std::string>& columns) {
  const std::uint32_t owner = shard_of(row);
  for (const auto& c : columns) {
    if (!has_column(c)) throw NotFound("unknown column '" + c + "'");
  }
  std::vector<bool> is_score(columns.size());
  {
    std::shared_lock lock(schema_mutex_);
    for (std::size_t i = 0; i < columns.size(); ++i) is_score[i] = score_columns_.count(columns[i]) > 0;
  }
  RowResult result;
  Shard& shard = *shards_[owner];
  bool served = false;
  if (shard.alive) {
    try {
      const std::size_t offset = row - shard.info.begin;
      for (std::size_t i = 0; i < columns.size(); ++i) {
        const std::string& c = columns[i];
        if (is_score[i]) {
          const ScoreCell cell = score_column(c).load(row);
          result.values[c] = FloatPair{cell.probability, static_cast<double>(cell.version)};
        } else {
          result.values[c] = (*values_locked(shard, def(c)))[offset];
        }
      }
      result.served_by = owner;
      served = true;
    } catch (const Unavailable&) {
      result.values.clear();
    }
  }
  if (!served) {
    result.served_by = pick_redirect_target();
    result.recomputed = true;
    for (std::size_t i = 0; i < columns.size(); ++i) {
      const std::string& c = columns[i];
      if (is_score[i]) {
        // Scores live outside the column graph; only a rescore restores them.
        const ScoreCell fallback{};
        result.values[c] = FloatPair{fallback.probability, static_cast<double>(fallback.version)};
      } else {
        result.values[c] = recompute(row, c);
      }
    }
  }
  return result;
}

void ColumnEngine::register_combiner(const std::string& name, CustomCombiner combiner) {
  if (!combiner.fold || !combiner.merge) throw InvalidArgument("combiner needs fold and merge");
  if (!combiner.associative || !combiner.commutative) {
    throw InvalidArgument("combiner '" + name + "' is not associative and commutative");
  }
  const double probes[] = {combiner.identity, 1.5, -2.25, 3.0, 1024.0, 0.125};
  for (double a : probes) {
    if (combiner.merge(combiner.identity, a) != a) {
      throw InvalidArgument("combiner '" + name + "' identity is not neutral");
    }
    for (double b : probes) {
      if (combiner.merge(a, b) != combiner.merge(b, a)) {
        throw InvalidArgument("combiner '" + name + "' merge is not commutative");
      }
      for (double c : probes) {
        if (combiner.merge(combiner.merge(a, b), c) != combiner.merge(a, combiner.merge(b, c))) {
          throw InvalidArgument("combiner '" + name + "' merge is not associative");
        }
      }
    }
  }
  std::unique_lock lock(schema_mutex_);
  combiners_[name] = std::move(combiner);
}

AggregateResult ColumnEngine::aggregate(const AggregationSpec& spec) {
  const CombinerSpec& c = spec.combiner;
  const bool needs_input = c.kind == CombinerKind::kSum || c.kind == CombinerKind::kMin ||
                           c.kind == CombinerKind::kMax || c.kind == CombinerKind::kHistogram;
  if (needs_input && c.input >= spec.columns.size()) {
    throw InvalidArgument("combiner input index out of range");
  }
  if (c.kind == CombinerKind::kHistogram && (c.bins == 0 || !(c.hi > c.lo))) {
    throw InvalidArgument("histogram needs bins >= 1 and hi > lo");
  }
  if (c.kind == CombinerKind::kReservoir && c.k == 0) {
    throw InvalidArgument("reservoir size must be at least 1");
  }
  CustomCombiner custom;
  if (c.kind == CombinerKind::kCustom) {
    std::shared_lock lock(schema_mutex_);
    auto it = combiners_.find(c.custom);
    if (it == combiners_.end()) throw NotFound("unknown combiner '" + c.custom + "'");
    custom = it->second;
  }

  std::vector<const ScoreColumn*> score_inputs(spec.columns.size(), nullptr);
  std::vector<const ColumnDef*> value_inputs(spec.columns.size(), nullptr);
  {
    std::shared_lock lock(schema_mutex_);
    for (std::size_t i = 0; i < spec.columns.size(); ++i) {
      if (auto it = score_columns_.find(spec.columns[i]); it != score_columns_.end()) {
        score_inputs[i] = it->second.get();
      } else if (auto jt = columns_.find(spec.columns[i]); jt != columns_.end()) {
        value_inputs[i] = &jt->second;
      } else {
        throw NotFound("unknown column '" + spec.columns[i] + "'");
      }
    }
  }

  const std::size_t n = shards_.size();
  std::vector<Partial> partials(n);
  std::vector<char> ran(n, 0);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t s) {
    Shard& shard = *shards_[s];
    Partial& p = partials[s];
    p.custom = custom.identity;
    if (c.kind == CombinerKind::kHistogram) {
      p.histogram.lo = c.lo;
      p.histogram.hi = c.hi;
      p.histogram.counts.assign(c.bins, 0);
    }
    std::vector<std::shared_ptr<const std::vector<Value>>> holders(spec.columns.size());
    RowRef ref;
    ref.values_.assign(spec.columns.size(), nullptr);
    ref.scores_ = score_inputs;
    for (std::size_t i = 0; i < spec.columns.size(); ++i) {
      if (value_inputs[i] != nullptr) {
        holders[i] = values_locked(shard, *value_inputs[i]);
        ref.values_[i] = holders[i].get();
      }
    }
    std::seed_seq seq{static_cast<std::uint32_t>(c.seed),
                      static_cast<std::uint32_t>(c.seed >> 32), static_cast<std::uint32_t>(s)};
    std::mt19937_64 rng(seq);
    for (RowId r = shard.info.begin; r < shard.info.end; ++r) {
      ref.row_ = r;
      ref.offset_ = r - shard.info.begin;
      ++p.scanned;
      if (spec.predicate && !spec.predicate(ref)) continue;
      ++p.matched;
      switch (c.kind) {
        case CombinerKind::kCount:
          break;
        case CombinerKind::kSum:
          p.sum.add(ref.number(c.input));
          break;
        case CombinerKind::kMin:
          p.min = std::min(p.min, ref.number(c.input));
          break;
        case CombinerKind::kMax:
          p.max = std::max(p.max, ref.number(c.input));
          break;
        case CombinerKind::kHistogram: {
          const double x = ref.number(c.input);
          if (x < c.lo) {
            ++p.histogram.below;
          } else if (x > c.hi) {
            ++p.histogram.above;
          } else {
            auto bin = static_cast<std::size_t>((x - c.lo) * c.bins / (c.hi - c.lo));
            if (bin >= c.bins) bin = c.bins - 1;
            ++p.histogram.counts[bin];
          }
          break;
        }
        case CombinerKind::kReservoir:
          if (p.reservoir.size() < c.k) {
            p.reservoir.push_back(r);
          } else {
            std::uniform_int_distribution<std::uint64_t> pick(0, p.matched - 1);
            const std::uint64_t j = pick(rng);
            if (j < c.k) p.reservoir[j] = r;
          }
          break;
        case CombinerKind::kCustom:
          p.custom = custom.fold(p.custom, ref);
          break;
      }
    }
  };

  const auto map_start = std::chrono::steady_clock::now();
  std::vector<std::thread> workers;
  for (std::size_t s = 0; s < n; ++s) {
    if (!shards_[s]->alive || shards_[s]->info.rows() == 0) continue;
    ran[s] = 1;
    workers.emplace_back([&, s] {
      try {
        work(s);
      } catch (const Unavailable&) {
        ran[s] = 0;  // died mid-scan; partial results are discarded
      } catch (...) {
        errors[s] = std::current_exception();
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  // Sequential merge in shard order.
  const auto reduce_start = std::chrono::steady_clock::now();
  AggregateResult result;
  result.map_seconds = std::chrono::duration<double>(reduce_start - map_start).count();
  Partial merged;
  merged.custom = custom.identity;
  if (c.kind == CombinerKind::kHistogram) {
    merged.histogram.lo = c.lo;
    merged.histogram.hi = c.hi;
    merged.histogram.counts.assign(c.bins, 0);
  }
  std::mt19937_64 merge_rng(c.seed ^ 0x9e3779b97f4a7c15ULL);
  RowId live_rows = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (!ran[s]) {
      if (shards_[s]->info.rows() > 0) result.skipped_shards.push_back(static_cast<std::uint32_t>(s));
      continue;
    }
    const Partial& p = partials[s];
    live_rows += shards_[s]->info.rows();
    if (c.kind == CombinerKind::kReservoir) {
      merged.reservoir = merge_reservoirs(std::move(merged.reservoir), merged.matched,
                                          p.reservoir, p.matched, c.k, merge_rng);
    }
    merged.scanned += p.scanned;
    merged.matched += p.matched;
    merged.sum.merge(p.sum);
    merged.min = std::min(merged.min, p.min);
    merged.max = std::max(merged.max, p.max);
    if (c.kind == CombinerKind::kHistogram) {
      for (std::size_t b = 0; b < c.bins; ++b) merged.histogram.counts[b] += p.histogram.counts[b];
      merged.histogram.below += p.histogram.below;
      merged.histogram.above += p.histogram.above;
    }
    if (c.kind == CombinerKind::kCustom) merged.custom = custom.merge(merged.custom, p.custom);
  }
  result.rows_scanned = merged.scanned;
  result.rows_matched = merged.matched;
  result.coverage = rows_ == 0 ? 1.0 : static_cast<double>(live_rows) / static_cast<double>(rows_);
  switch (c.kind) {
    case CombinerKind::kCount: result.value = merged.matched; break;
    case CombinerKind::kSum: result.value = merged.sum.value(); break;
    case CombinerKind::kMin: result.value = merged.min; break;
    case CombinerKind::kMax: result.value = merged.max; break;
    case CombinerKind::kHistogram: result.value = std::move(merged.histogram); break;
    case CombinerKind::kReservoir: result.value = std::move(merged.reservoir); break;
    case CombinerKind::kCustom: result.value = merged.custom; break;
  }
  result.reduce_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - reduce_start).count();
  return result;
}

std::vector<RowId> ColumnEngine::reservoir_sample(const std::vector<std::string>& columns,
                                                  RowPredicate predicate, std::size_t k,
                                                  std::uint64_t seed) {
  AggregationSpec spec;
  spec.columns = columns;
  spec.predicate = std::move(predicate);
  spec.combiner.kind = CombinerKind::kReservoir;
  spec.combiner.k = k;
  spec.combiner.seed = seed;
  return aggregate(spec).rows();
}

std::shared_ptr<ScorerPass> ColumnEngine::start_scorer(std::string_view column_name,
                                                       ModelVersion version, ScoreBatchFn fn,
                                                       ScorerOptions options) {
  ScoreColumn& col = score_column(column_name);
  if (!fn) throw InvalidArgument("scorer needs a score function");
  if (options.check_interval == 0) options.check_interval = 1;
  std::lock_guard lock(col.pass_mutex_);
  const ModelVersion active = col.active_version_.load();
  if (version < active || (version == active && !(options.resume && active > 0))) {
    throw Conflict("stale model version " + std::to_string(version) + " (active " +
                   std::to_string(active) + ")");
  }
  if (col.pass_) col.pass_->interrupt = true;
  if (col.worker_.joinable()) col.worker_.join();

  auto state = std::make_shared<PassState>();
  col.pass_ = state;
  col.active_version_ = version;
  col.scoring_ = true;
  state->report.column = col.name();
  state->report.version = version;
  state->report.start_row = col.cursor_.load();

  col.worker_ = std::thread([this, &col, state, version, fn = std::move(fn), options] {
    PassReport& report = state->report;
    const auto started = std::chrono::steady_clock::now();
    const RowId n = col.rows_;
    const RowId target = options.max_rows ? std::min(*options.max_rows, n) : n;
    RowId processed = 0;
    std::vector<double> buffer;
    while (processed < target) {
      if (state->interrupt) {
        report.interrupted = true;
        break;
      }
      const RowId row = col.cursor_.load();
      const Shard& shard = *shards_[shard_of(row)];
      const RowId len = std::min({shard.info.end - row, target - processed, options.check_interval});
      bool scored = false;
      if (shard.alive) {
        buffer.assign(len, 0.0);
        try {
          fn(row, buffer);
          for (RowId i = 0; i < len; ++i) {
            double p = buffer[i];
            if (!(p >= 0.0)) p = 0.0;  // NaN or negative
            if (p > 1.0) p = 1.0;
            col.store(row + i, ScoreCell{static_cast<float>(p), version});
          }
          scored = true;
        } catch (const Unavailable&) {
        } catch (const std::exception& e) {
          report.error = e.what();
          break;
        }
      }
      if (scored) report.rows_scored += len;
      else report.rows_skipped_dead += len;
      processed += len;
      col.cursor_ = (row + len) % n;
      if (options.throttle.count() > 0) std::this_thread::sleep_for(options.throttle);
    }
    report.next_row = col.cursor_.load();
    report.completed = processed >= n && report.error.empty();
    report.seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    col.scoring_ = false;
    {
      std::lock_guard done_lock(state->mutex);
      state->done = true;
    }
    state->cv.notify_all();
  });

  auto pass = std::make_shared<ScorerPass>();
  pass->state_ = state;
  pass->column_ = &col;
  return pass;
}

PassReport ColumnEngine::run_scorer(std::string_view column_name, ModelVersion version,
                                    ScoreBatchFn fn, ScorerOptions options) {
  return start_scorer(column_name, version, std::move(fn), options)->wait();
}

std::map<ModelVersion, RowId> ColumnEngine::score_freshness(std::string_view column_name) const {
  return score_column(column_name).freshness();
}

std::string ColumnEngine::stats_text() const {
  std::ostringstream out;
  out << "dataset " << dataset_id() << ": " << rows_ << " rows, " << shards_.size()
      << " shards\n";
  for (std::uint32_t s = 0; s < shards_.size(); ++s) {
    const ShardInfo info = shard_info(s);
    out << "shard " << s << (info.alive ? " live" : " dead") << " rows [" << info.begin << ", "
        << info.end << ") buckets " << info.bucket_count << " resident_bytes "
        << info.resident_bytes << "\n";
  }
  std::shared_lock lock(schema_mutex_);
  for (const auto& [name, col] : score_columns_) {
    out << "score " << name << " active v" << col->active_version() << " cursor "
        << col->cursor() << (col->scoring() ? " scoring" : " idle") << "\n";
    for (const auto& [v, count] : col->freshness()) {
      out << "  v" << v << ": " << count << "\n";
    }
  }
  return out.str();
}

}  // namespace ice
