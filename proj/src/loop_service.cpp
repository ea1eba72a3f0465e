#include "ice/loop_service.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>

#include "ice/hash.hpp"

namespace ice {

const char* to_string(ScorerState state) {
  switch (state) {
    case ScorerState::kIdle: return "idle";
    case ScorerState::kScoring: return "scoring";
    case ScorerState::kInterrupted: return "interrupted";
  }
  return "?";
}

SampleStrategy parse_sample_strategy(std::string_view text) {
  if (text == "score_range") return SampleStrategy::kScoreRange;
  if (text == "uniform_unlabeled" || text == "uniform") return SampleStrategy::kUniformUnlabeled;
  if (text == "search") return SampleStrategy::kSearch;
  throw InvalidArgument("unknown sample strategy '" + std::string(text) + "'");
}

const char* to_string(SampleStrategy strategy) {
  switch (strategy) {
    case SampleStrategy::kScoreRange: return "score_range";
    case SampleStrategy::kUniformUnlabeled: return "uniform_unlabeled";
    case SampleStrategy::kSearch: return "search";
  }
  return "?";
}

SampleRequest SampleRequest::from_json(const nlohmann::json& j) {
  SampleRequest r;
  try {
    r.strategy = parse_sample_strategy(j.at("strategy").get<std::string>());
    r.lo = j.value("lo", 0.0);
    r.hi = j.value("hi", 1.0);
    r.query = j.value("query", std::string{});
    r.count = j.value("count", std::size_t{10});
    r.exclude_labeled = j.value("exclude_labeled", true);
    if (j.contains("seed")) r.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad sample request: ") + e.what());
  }
  return r;
}

nlohmann::json SampleItem::to_json() const {
  nlohmann::json j{{"row", row},
                   {"title", title},
                   {"score", score},
                   {"stored_score", stored.probability},
                   {"stored_version", stored.version},
                   {"moved", moved}};
  j["prelabel"] = prelabel ? nlohmann::json(to_string(*prelabel)) : nlohmann::json(nullptr);
  if (search_score) j["search_score"] = *search_score;
  return j;
}

FeatureEditRequest FeatureEditRequest::from_json(const nlohmann::json& j) {
  FeatureEditRequest r;
  try {
    const auto action = j.value("action", std::string("add"));
    if (action == "add") r.action = FeatureAction::kAdd;
    else if (action == "edit") r.action = FeatureAction::kEdit;
    else if (action == "remove") r.action = FeatureAction::kRemove;
    else throw InvalidArgument("unknown feature action '" + action + "'");
    r.name = j.at("name").get<std::string>();
    if (r.action == FeatureAction::kRemove) return r;
    const auto kind = j.value("kind", std::string("dictionary"));
    if (kind == "dictionary") {
      r.kind = FeatureKind::kDictionary;
      nlohmann::json d = j.contains("dictionary") ? j.at("dictionary") : j;
      if (!d.contains("name")) d["name"] = r.name;
      r.dictionary = DictionaryFeature::from_json(d);
    } else if (kind == "model") {
      r.kind = FeatureKind::kModel;
      r.model_session = j.at("session").get<std::string>();
      r.model_version = j.at("version").get<ModelVersion>();
    } else if (kind == "builtin") {
      r.kind = FeatureKind::kBuiltin;
      r.builtin = j.at("function").get<std::string>();
    } else if (kind == "bow") {
      r.kind = FeatureKind::kBow;
      r.bow_cap = j.value("cap", std::size_t{10000});
    } else {
      throw InvalidArgument("unknown feature kind '" + kind + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad feature request: ") + e.what());
  }
  if (r.name.empty()) throw InvalidArgument("feature needs a name");
  return r;
}

nlohmann::json LoopStatus::to_json() const {
  nlohmann::json fresh = nlohmann::json::object();
  for (const auto& [v, n] : freshness) fresh[std::to_string(v)] = n;
  nlohmann::json j{{"session_id", session_id},
                   {"model_version", model_version},
                   {"scorer", to_string(scorer)},
                   {"pending_labels", pending_labels},
                   {"retrain_threshold", retrain_threshold},
                   {"positives", positives},
                   {"negatives", negatives},
                   {"freshness", fresh},
                   {"scorer_cursor", scorer_cursor},
                   {"features", features}};
  j["latest_metrics"] = latest_metrics ? *latest_metrics : nlohmann::json(nullptr);
  return j;
}

namespace {

nlohmann::json metrics_json(const std::vector<double>& scores, const std::vector<int>& labels) {
  const Metrics m = evaluate(scores, labels);
  nlohmann::json curve = nlohmann::json::array();
  for (const auto& p : m.pr_curve) curve.push_back({p.threshold, p.precision, p.recall});
  return {{"auc", m.auc ? nlohmann::json(*m.auc) : nlohmann::json(nullptr)},
          {"recall_at_precision_0.8", m.recall_at_precision(0.8)},
          {"positives", m.positives},
          {"negatives", m.negatives},
          {"pr_curve", curve}};
}

std::uint64_t weights_digest(const LinearModel& m) {
  std::uint64_t h = fnv1a64("");
  auto mix = [&](double v) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    char buf[8];
    std::memcpy(buf, &bits, 8);
    h = fnv1a64(std::string_view(buf, 8), h);
  };
  for (double w : m.weights) mix(w);
  mix(m.bias);
  if (m.calibrator) {
    for (double b : m.calibrator->breakpoints()) mix(b);
    for (double v : m.calibrator->values()) mix(v);
  }
  return h;
}

}  // namespace

TrainOutcome train_session_model(const SessionConfig& config, const LabelMap& labels,
                                 const std::vector<std::string>& feature_keys,
                                 FeatureRegistry& registry, ModelVersion version,
                                 const std::string& trigger) {
  TrainOutcome out;
  if (feature_keys.empty()) return out;

  // Train on a compact coordinate space; relative index order is preserved so
  // sums run in the same order as on the global space.
  std::vector<FeatureIndex> used;
  for (const auto& k : feature_keys) {
    const auto c = registry.coordinates(k);
    used.insert(used.end(), c.begin(), c.end());
  }
  std::sort(used.begin(), used.end());
  used.erase(std::unique(used.begin(), used.end()), used.end());
  std::unordered_map<FeatureIndex, FeatureIndex> local;
  for (std::size_t i = 0; i < used.size(); ++i) local.emplace(used[i], static_cast<FeatureIndex>(i));

  TrainingSet train;
  train.dimension = used.size();
  std::vector<std::pair<SparseVector, int>> test;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
  for (const auto& [row, rec] : labels) {
    const int y = rec.label == Label::kPositive ? 1 : -1;
    (y > 0 ? positives : negatives) += 1;
    SparseVector x = registry.assemble(row, feature_keys);
    if (config.split.is_train(row)) {
      for (auto& e : x) e.index = local.at(e.index);
      train.examples.push_back({row, std::move(x), y});
    } else {
      test.emplace_back(std::move(x), y);
    }
  }
  if (train.positives() == 0 || train.negatives() == 0) return out;

  TrainerFamily family;
  family.grid = config.grid;
  family.folds = config.folds;
  family.fold_salt = config.fold_salt;
  FamilyResult fr = train_family(train, family);

  auto snap = std::make_shared<ModelSnapshot>();
  snap->model.bias = fr.model.bias;
  snap->model.reg_strength = fr.model.reg_strength;
  snap->model.calibrator = fr.model.calibrator;
  snap->model.version = version;
  snap->model.weights.assign(used.empty() ? 0 : used.back() + 1, 0.0);
  for (std::size_t i = 0; i < used.size(); ++i) snap->model.weights[used[i]] = fr.model.weights[i];
  for (const auto& k : feature_keys) snap->features.push_back(registry.get(k));
  snap->export_doc = export_model(snap->model, snap->features, registry.space(),
                                  {registry.engine().dataset_id(), config.session_id});

  // Ranking metrics use raw scores: calibration is a step function and would
  // merge distinct scores into ties.
  std::vector<double> train_scores;
  std::vector<int> train_labels;
  for (const auto& ex : train.examples) {
    train_scores.push_back(sigmoid(fr.model.margin(ex.x)));
    train_labels.push_back(ex.y);
  }
  std::vector<double> test_scores;
  std::vector<int> test_labels;
  for (const auto& [x, y] : test) {
    test_scores.push_back(snap->model.raw_probability(x));
    test_labels.push_back(y);
  }

  nlohmann::json cv{{"grid", fr.report.grid},
                    {"mean_auc", fr.report.mean_auc},
                    {"folds_used", fr.report.folds_used},
                    {"cv_skipped", fr.report.cv_skipped}};
  out.payload = {{"version", version},
                 {"trigger", trigger},
                 {"features", feature_keys},
                 {"reg_strength", fr.model.reg_strength},
                 {"cv", cv},
                 {"weights_digest", to_hex(weights_digest(snap->model))},
                 {"counts", {{"positive", positives}, {"negative", negatives}}},
                 {"train_metrics", metrics_json(train_scores, train_labels)},
                 {"test_metrics", metrics_json(test_scores, test_labels)}};
  out.snapshot = std::move(snap);
  return out;
}

struct LoopService::SessionState {
  std::unique_ptr<Session> log;
  std::mutex owner;  // serializes mutations of this session
  std::vector<std::string> features;           // active keys in definition order
  std::map<std::string, std::string> by_name;  // teacher name -> active key
  std::map<std::string, std::uint32_t> versions_used;  // feature id -> last version
  std::vector<std::shared_ptr<const ModelSnapshot>> models;
  std::uint32_t pending = 0;
  std::shared_ptr<ScorerPass> pass;
  std::string score_column;
};

LoopService::LoopService(std::unique_ptr<ColumnEngine> engine, ServiceOptions options)
    : engine_(std::move(engine)), options_(std::move(options)) {
  registry_ = std::make_unique<FeatureRegistry>(*engine_);
}

LoopService::~LoopService() {
  std::unique_lock lock(sessions_mutex_);
  for (auto& [_, s] : sessions_) {
    if (s->pass) {
      s->pass->interrupt();
      s->pass->wait();
    }
  }
}

const TextIndex& LoopService::text_index() {
  std::lock_guard lock(index_mutex_);
  if (!index_) index_ = std::make_unique<TextIndex>(TextIndex::build(*engine_, kTextColumn));
  return *index_;
}

std::shared_ptr<const BowVocabulary> LoopService::vocabulary(std::size_t cap) {
  std::lock_guard lock(vocab_mutex_);
  auto& v = vocabularies_[cap];
  if (!v) v = std::make_shared<const BowVocabulary>(build_bow_vocabulary(*engine_, cap));
  return v;
}

FeatureDefinition LoopService::resolve_feature(const nlohmann::json& spec,
                                               const std::string& session_id) {
  const auto kind = spec.value("kind", std::string("dictionary"));
  if (kind == "bow" && !spec.contains("vocabulary")) {
    const std::size_t cap = spec.value("cap", std::size_t{10000});
    FeatureDefinition d;
    d.kind = FeatureKind::kBow;
    d.id = spec.value("id", "bow" + std::to_string(cap));
    d.version = 1;
    d.vocabulary = vocabulary(cap);
    return d;
  }
  if (spec.contains("version") && spec.contains("id")) return FeatureDefinition::from_json(spec);
  FeatureEditRequest req = FeatureEditRequest::from_json(spec);
  FeatureDefinition d;
  d.id = session_id + "." + req.name;
  d.version = 1;
  d.kind = req.kind;
  d.dictionary = req.dictionary;
  d.builtin = req.builtin;
  if (req.kind == FeatureKind::kBuiltin) find_builtin(req.builtin);
  if (req.kind == FeatureKind::kModel) {
    d.model = std::make_shared<const ExportedScorer>(export_model(req.model_session, req.model_version));
  }
  if (req.kind == FeatureKind::kBow) d.vocabulary = vocabulary(req.bow_cap);
  return d;
}

LoopStatus LoopService::create_session(SessionConfig config) {
  if (config.dataset_id.empty()) config.dataset_id = engine_->dataset_id();
  if (config.dataset_id != engine_->dataset_id()) {
    throw InvalidArgument("session dataset '" + config.dataset_id + "' is not the loaded dataset '" +
                          engine_->dataset_id() + "'");
  }
  if (config.session_id.find_first_of("/@ \t") != std::string::npos) {
    throw InvalidArgument("session id must not contain '/', '@' or whitespace");
  }
  {
    std::shared_lock lock(sessions_mutex_);
    if (sessions_.count(config.session_id)) {
      throw Conflict("session '" + config.session_id + "' already exists");
    }
  }
  nlohmann::json resolved = nlohmann::json::array();
  for (const auto& spec : config.initial_features) {
    resolved.push_back(resolve_feature(spec, config.session_id).to_json());
  }
  config.initial_features = resolved;
  auto log = Session::create(options_.session_dir / (config.session_id + ".log"), config);
  return open_session(log->path());
}

LoopStatus LoopService::open_session(const std::filesystem::path& log_path) {
  auto st = std::make_unique<SessionState>();
  st->log = Session::open(log_path);
  const SessionConfig& config = st->log->config();
  if (config.dataset_id != engine_->dataset_id()) {
    throw InvalidArgument("session log belongs to dataset '" + config.dataset_id + "'");
  }
  for (const auto& f : config.initial_features) {
    const auto& def = registry_->add(FeatureDefinition::from_json(f));
    st->features.push_back(def.key());
    st->by_name[def.id] = def.key();
    st->versions_used[def.id] = def.version;
  }
  // Rebuild state from the events already in the log.
  for (const auto& ev : st->log->events()) {
    switch (ev.kind) {
      case EventKind::kLabelSubmitted:
      case EventKind::kLabelEdited:
        ++st->pending;
        break;
      case EventKind::kFeatureAdded:
      case EventKind::kFeatureEdited: {
        const auto& def = registry_->add(FeatureDefinition::from_json(ev.payload.at("feature")));
        auto it = st->by_name.find(def.id);
        if (it != st->by_name.end()) {
          std::replace(st->features.begin(), st->features.end(), it->second, def.key());
        } else {
          st->features.push_back(def.key());
        }
        st->by_name[def.id] = def.key();
        st->versions_used[def.id] = def.version;
        break;
      }
      case EventKind::kFeatureRemoved: {
        const auto id = ev.payload.at("id").get<std::string>();
        auto it = st->by_name.find(id);
        if (it != st->by_name.end()) {
          std::erase(st->features, it->second);
          st->by_name.erase(it);
        }
        break;
      }
      case EventKind::kModelTrained: {
        const auto version = ev.payload.at("version").get<ModelVersion>();
        TrainOutcome t = train_session_model(config, st->log->current_labels(ev.sequence - 1),
                                             ev.payload.at("features").get<std::vector<std::string>>(),
                                             *registry_, version, ev.payload.value("trigger", ""));
        if (!t.snapshot) throw LogCorruption("model_trained event without a trainable label set");
        st->models.push_back(t.snapshot);
        st->pending = 0;
        break;
      }
      default:
        break;
    }
  }
  st->score_column = score_column_name(config.session_id);
  const std::string id = config.session_id;
  {
    std::unique_lock lock(sessions_mutex_);
    if (sessions_.count(id)) throw Conflict("session '" + id + "' is already open");
    if (!engine_->has_column(st->score_column)) engine_->define_score_column(st->score_column, id);
    sessions_.emplace(id, std::move(st));
  }
  SessionState& s = state(id);
  std::lock_guard owner(s.owner);
  if (!s.models.empty()) start_scoring(s);
  return status_locked(s);
}

bool LoopService::has_session(const std::string& session_id) const {
  std::shared_lock lock(sessions_mutex_);
  return sessions_.count(session_id) > 0;
}

std::vector<std::string> LoopService::session_ids() const {
  std::shared_lock lock(sessions_mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : sessions_) ids.push_back(id);
  return ids;
}

LoopService::SessionState& LoopService::state(const std::string& session_id) {
  std::shared_lock lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFound("unknown session '" + session_id + "'");
  return *it->second;
}

std::vector<ScoredRow> LoopService::search(const std::string& query, std::size_t k) {
  return text_index().search(query, k);
}

void LoopService::start_scoring(SessionState& s) {
  auto snap = s.models.back();
  std::vector<std::string> keys;
  for (const auto& f : snap->features) keys.push_back(f.key());
  FeatureRegistry* registry = registry_.get();
  ColumnEngine* engine = engine_.get();
  ScoreBatchFn fn = [snap, keys, registry, engine](RowId begin, std::span<double> out) {
    std::vector<SparseVector> vecs;
    registry->assemble_range(engine->shard_of(begin), begin, begin + out.size(), keys, vecs);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = snap->model.predict(vecs[i]);
  };
  s.pass = engine_->start_scorer(s.score_column, snap->model.version, std::move(fn), options_.scorer);
}

bool LoopService::try_retrain(SessionState& s, const std::string& trigger) {
  const ModelVersion version = static_cast<ModelVersion>(s.models.size() + 1);
  TrainOutcome t = train_session_model(s.log->config(), s.log->current_labels(), s.features,
                                       *registry_, version, trigger);
  if (!t.snapshot) return false;
  s.log->append(EventKind::kModelTrained, t.payload);
  s.models.push_back(t.snapshot);
  s.pending = 0;
  start_scoring(s);
  return true;
}

SubmitResult LoopService::submit_labels(const std::string& session_id,
                                        const std::vector<LabelInput>& labels) {
  SessionState& s = state(session_id);
  for (const auto& l : labels) {
    if (l.row >= engine_->size()) {
      throw OutOfRange("row " + std::to_string(l.row) + " does not exist; batch rejected");
    }
  }
  std::lock_guard owner(s.owner);
  SubmitResult result;
  LabelMap current = s.log->current_labels();
  for (const auto& l : labels) {
    const bool edit = current.count(l.row) > 0;
    result.last_sequence = s.log->append(edit ? EventKind::kLabelEdited : EventKind::kLabelSubmitted,
                                         {{"row", l.row},
                                          {"label", to_string(l.label)},
                                          {"source", to_string(l.source)}});
    current[l.row] = LabelRecord{l.label, l.source, result.last_sequence};
    ++s.pending;
  }
  if (s.pending >= s.log->config().retrain_threshold) result.retrained = try_retrain(s, "labels");
  result.status = status_locked(s);
  return result;
}

double LoopService::predict_snapshot(const ModelSnapshot& snap, const std::vector<std::string>& keys,
                                     RowId row) const {
  return snap.model.predict(registry_->assemble(row, keys));
}

std::vector<SampleItem> LoopService::draw_sample(const std::string& session_id,
                                                 const SampleRequest& request) {
  if (request.count < 1) throw InvalidArgument("sample count must be at least 1");
  if (!(request.lo >= 0.0 && request.lo <= request.hi && request.hi <= 1.0)) {
    throw InvalidArgument("score range must satisfy 0 <= lo <= hi <= 1");
  }
  SessionState& s = state(session_id);
  std::lock_guard owner(s.owner);
  const std::shared_ptr<const ModelSnapshot> latest = s.models.empty() ? nullptr : s.models.back();
  if (request.strategy == SampleStrategy::kScoreRange && !latest) {
    throw Unavailable("cold start: no model yet, sample with search or uniform_unlabeled");
  }
  const LabelMap labels = s.log->current_labels();
  auto excluded = [&](RowId r) {
    return (request.exclude_labeled && labels.count(r)) || (request.exclude && request.exclude->count(r));
  };
  const std::uint64_t seed =
      request.seed.value_or(hash_row(s.log->latest_sequence(), s.log->config().split.salt ^ 0x5a5a));

  std::vector<SampleItem> items;
  std::vector<RowId> rows;
  std::map<RowId, double> search_scores;
  if (request.strategy == SampleStrategy::kSearch) {
    if (request.query.empty()) throw InvalidArgument("search sampling needs a query");
    const std::size_t want = request.count + (request.exclude_labeled ? labels.size() : 0) +
                             (request.exclude ? request.exclude->size() : 0);
    for (const auto& hit : text_index().search(request.query, want)) {
      if (excluded(hit.row)) continue;
      rows.push_back(hit.row);
      search_scores[hit.row] = hit.score;
      if (rows.size() == request.count) break;
    }
    s.log->append(EventKind::kQueryIssued, {{"query", request.query}, {"k", request.count}, {"rows", rows}});
  } else {
    RowPredicate pred;
    std::vector<std::string> cols;
    if (request.strategy == SampleStrategy::kScoreRange) {
      cols = {s.score_column};
      const double lo = request.lo;
      const double hi = request.hi;
      pred = [&, lo, hi](const RowRef& r) {
        const double p = r.score(0).probability;
        return p >= lo && p <= hi && !excluded(r.row());
      };
    } else {
      cols = {s.score_column};
      pred = [&](const RowRef& r) { return !excluded(r.row()); };
    }
    rows = engine_->reservoir_sample(cols, pred, request.count, seed);
  }

  std::vector<std::string> keys;
  if (latest) {
    for (const auto& f : latest->features) keys.push_back(f.key());
  }
  ScoreColumn& col = engine_->score_column(s.score_column);
  for (RowId r : rows) {
    SampleItem it;
    it.row = r;
    it.title = std::get<std::string>(engine_->get_row(r, {"title"}).values.at("title"));
    it.stored = col.load(r);
    if (latest) {
      // Displayed scores always come from the latest model.
      it.score = predict_snapshot(*latest, keys, r);
      it.prelabel = it.score >= 0.5 ? Label::kPositive : Label::kNegative;
      if (request.strategy == SampleStrategy::kScoreRange) {
        it.moved = it.score < request.lo || it.score > request.hi;
      }
    } else {
      it.score = it.stored.probability;
    }
    if (auto f = search_scores.find(r); f != search_scores.end()) it.search_score = f->second;
    items.push_back(std::move(it));
  }
  s.log->append(EventKind::kSampleDrawn, {{"strategy", to_string(request.strategy)},
                                          {"lo", request.lo},
                                          {"hi", request.hi},
                                          {"seed", seed},
                                          {"rows", rows}});
  return items;
}

FeatureEditResult LoopService::feature_edit(const std::string& session_id,
                                            const FeatureEditRequest& request) {
  SessionState& s = state(session_id);
  // Model features read another session's export; resolve before locking.
  std::optional<FeatureDefinition> def;
  const std::string id = request.kind == FeatureKind::kBow && request.action != FeatureAction::kRemove
                             ? "bow" + std::to_string(request.bow_cap)
                             : session_id + "." + request.name;
  if (request.action != FeatureAction::kRemove) {
    nlohmann::json spec{{"name", request.name}, {"kind", to_string(request.kind)}};
    if (request.kind == FeatureKind::kDictionary) spec["dictionary"] = request.dictionary.to_json();
    if (request.kind == FeatureKind::kBuiltin) spec["function"] = request.builtin;
    if (request.kind == FeatureKind::kBow) spec["cap"] = request.bow_cap;
    if (request.kind == FeatureKind::kModel) {
      spec["session"] = request.model_session;
      spec["version"] = request.model_version;
    }
    def = resolve_feature(spec, session_id);
  }

  std::lock_guard owner(s.owner);
  FeatureEditResult result;
  const std::string lookup = request.action == FeatureAction::kRemove
                                 ? (s.by_name.count(session_id + "." + request.name)
                                        ? session_id + "." + request.name
                                        : request.name)
                                 : id;
  const bool active = s.by_name.count(lookup) > 0;
  switch (request.action) {
    case FeatureAction::kAdd:
      if (active) throw Conflict("feature '" + request.name + "' already exists; edit it instead");
      break;
    case FeatureAction::kEdit:
      if (!active) throw NotFound("feature '" + request.name + "' is not active");
      break;
    case FeatureAction::kRemove:
      if (!active) throw NotFound("feature '" + request.name + "' is not active");
      if (s.features.size() == 1) throw InvalidArgument("cannot remove the last feature");
      break;
  }

  if (request.action == FeatureAction::kRemove) {
    const std::string key = s.by_name.at(lookup);
    s.log->append(EventKind::kFeatureRemoved, {{"id", lookup}, {"key", key}});
    std::erase(s.features, key);
    s.by_name.erase(lookup);
  } else {
    def->id = lookup;
    def->version = s.versions_used.count(lookup) ? s.versions_used[lookup] + 1 : 1;
    const auto& added = registry_->add(*def);
    s.log->append(request.action == FeatureAction::kAdd ? EventKind::kFeatureAdded
                                                        : EventKind::kFeatureEdited,
                  {{"feature", added.to_json()}});
    if (active) {
      std::replace(s.features.begin(), s.features.end(), s.by_name[lookup], added.key());
    } else {
      s.features.push_back(added.key());
    }
    s.by_name[lookup] = added.key();
    s.versions_used[lookup] = added.version;
    result.key = added.key();
  }
  result.retrained = try_retrain(s, "feature");
  result.status = status_locked(s);
  return result;
}

LoopStatus LoopService::status_locked(SessionState& s) {
  LoopStatus st;
  st.session_id = s.log->config().session_id;
  st.model_version = s.models.empty() ? 0 : s.models.back()->model.version;
  if (s.pass) {
    if (!s.pass->done()) st.scorer = ScorerState::kScoring;
    else if (s.pass->wait().interrupted) st.scorer = ScorerState::kInterrupted;
  }
  st.pending_labels = s.pending;
  st.retrain_threshold = s.log->config().retrain_threshold;
  for (const auto& [_, rec] : s.log->current_labels()) {
    (rec.label == Label::kPositive ? st.positives : st.negatives) += 1;
  }
  st.freshness = engine_->score_freshness(s.score_column);
  st.scorer_cursor = engine_->score_column(s.score_column).cursor();
  st.features = s.features;
  const auto history = s.log->metrics_history();
  if (!history.empty()) st.latest_metrics = history.back();
  return st;
}

LoopStatus LoopService::status(const std::string& session_id) {
  SessionState& s = state(session_id);
  std::lock_guard owner(s.owner);
  return status_locked(s);
}

std::vector<nlohmann::json> LoopService::metrics_history(const std::string& session_id) {
  return state(session_id).log->metrics_history();
}

LabelMap LoopService::current_labels(const std::string& session_id) {
  return state(session_id).log->current_labels();
}

std::vector<std::string> LoopService::active_features(const std::string& session_id) {
  SessionState& s = state(session_id);
  std::lock_guard owner(s.owner);
  return s.features;
}

std::shared_ptr<const ModelSnapshot> LoopService::model(const std::string& session_id,
                                                        std::optional<ModelVersion> version) {
  SessionState& s = state(session_id);
  std::lock_guard owner(s.owner);
  if (s.models.empty()) throw NotFound("session '" + session_id + "' has no trained model");
  if (!version) return s.models.back();
  if (*version < 1 || *version > s.models.size()) {
    throw NotFound("session '" + session_id + "' has no model version " + std::to_string(*version));
  }
  return s.models[*version - 1];
}

std::vector<ReviewRow> LoopService::review(const std::string& session_id, ReviewFilter filter,
                                           ReviewSort sort, double threshold) {
  SessionState& s = state(session_id);
  std::shared_ptr<const ModelSnapshot> latest;
  {
    std::lock_guard owner(s.owner);
    if (!s.models.empty()) latest = s.models.back();
  }
  Predictor predictor;
  if (latest) {
    std::vector<std::string> keys;
    for (const auto& f : latest->features) keys.push_back(f.key());
    predictor = [this, latest, keys](RowId r) { return predict_snapshot(*latest, keys, r); };
  }
  return s.log->review_query(filter, sort, latest ? &predictor : nullptr, threshold);
}

nlohmann::json LoopService::export_model(const std::string& session_id, ModelVersion version) {
  return model(session_id, version)->export_doc;
}

double LoopService::predict(const std::string& session_id, RowId row,
                            std::optional<ModelVersion> version) {
  auto snap = model(session_id, version);
  std::vector<std::string> keys;
  for (const auto& f : snap->features) keys.push_back(f.key());
  return predict_snapshot(*snap, keys, row);
}

std::optional<PassReport> LoopService::wait_for_scoring(const std::string& session_id) {
  SessionState& s = state(session_id);
  std::shared_ptr<ScorerPass> pass;
  {
    std::lock_guard owner(s.owner);
    pass = s.pass;
  }
  if (!pass) return std::nullopt;
  return pass->wait();
}

void LoopService::interrupt_scoring(const std::string& session_id) {
  SessionState& s = state(session_id);
  std::shared_ptr<ScorerPass> pass;
  {
    std::lock_guard owner(s.owner);
    pass = s.pass;
  }
  if (pass) {
    pass->interrupt();
    pass->wait();
  }
}

nlohmann::json LoopService::item(RowId row, const std::string& session_id) {
  std::vector<std::string> cols{"external_id", "url", "title", "body_text"};
  std::vector<std::string> feature_keys;
  if (!session_id.empty()) {
    feature_keys = active_features(session_id);
    cols.push_back(score_column_name(session_id));
    for (const auto& k : feature_keys) cols.push_back(registry_->get(k).column_name());
    cols.push_back(kTokensColumn);
  }
  const RowResult r = engine_->get_row(row, cols);
  nlohmann::json j{{"row", row},
                   {"external_id", std::get<std::string>(r.values.at("external_id"))},
                   {"url", std::get<std::string>(r.values.at("url"))},
                   {"title", std::get<std::string>(r.values.at("title"))},
                   {"body_text", std::get<std::string>(r.values.at("body_text"))},
                   {"recomputed", r.recomputed}};
  if (r.served_by) j["served_by"] = *r.served_by;
  if (!session_id.empty()) {
    const auto& score = std::get<FloatPair>(r.values.at(score_column_name(session_id)));
    j["stored_score"] = score.first;
    j["stored_version"] = static_cast<ModelVersion>(score.second);
    const auto& tokens = std::get<TokenList>(r.values.at(kTokensColumn));
    nlohmann::json features = nlohmann::json::array();
    for (const auto& k : feature_keys) {
      const FeatureDefinition& def = registry_->get(k);
      nlohmann::json f{{"key", k}, {"kind", to_string(def.kind)}};
      nlohmann::json values = nlohmann::json::object();
      for (const auto& e : std::get<SparseVector>(r.values.at(def.column_name()))) {
        values[registry_->space().name(e.index)] = e.value;
      }
      f["values"] = values;
      if (def.kind == FeatureKind::kDictionary) {
        std::vector<std::string> hits;
        for (const auto& t : tokens) {
          if (def.dictionary.entries.count(t)) hits.push_back(t);
        }
        std::sort(hits.begin(), hits.end());
        hits.erase(std::unique(hits.begin(), hits.end()), hits.end());
        f["hits"] = hits;
      }
      features.push_back(f);
    }
    j["features"] = features;
  }
  return j;
}

Histogram LoopService::score_histogram(const std::string& session_id, std::uint32_t bins) {
  SessionState& s = state(session_id);
  AggregationSpec spec;
  spec.columns = {s.score_column};
  spec.combiner.kind = CombinerKind::kHistogram;
  spec.combiner.lo = 0.0;
  spec.combiner.hi = 1.0 + 1e-9;
  spec.combiner.bins = bins;
  return engine_->aggregate(spec).histogram();
}

ReplayReport LoopService::replay(const std::filesystem::path& log_path) {
  SessionConfig config;
  const auto events = Session::read_events(log_path, &config);
  ReplayReport report;
  report.events = events.size();

  std::vector<std::string> features;
  std::map<std::string, std::string> by_name;
  for (const auto& f : config.initial_features) {
    const auto& def = registry_->add(FeatureDefinition::from_json(f));
    features.push_back(def.key());
    by_name[def.id] = def.key();
  }
  std::vector<nlohmann::json> history;
  std::vector<nlohmann::json> recorded;
  std::vector<SessionEvent> prefix;
  for (const auto& ev : events) {
    prefix.push_back(ev);
    switch (ev.kind) {
      case EventKind::kFeatureAdded:
      case EventKind::kFeatureEdited: {
        const auto& def = registry_->add(FeatureDefinition::from_json(ev.payload.at("feature")));
        if (auto it = by_name.find(def.id); it != by_name.end()) {
          std::replace(features.begin(), features.end(), it->second, def.key());
        } else {
          features.push_back(def.key());
        }
        by_name[def.id] = def.key();
        break;
      }
      case EventKind::kFeatureRemoved: {
        const auto id = ev.payload.at("id").get<std::string>();
        if (auto it = by_name.find(id); it != by_name.end()) {
          std::erase(features, it->second);
          by_name.erase(it);
        }
        break;
      }
      case EventKind::kModelTrained: {
        recorded.push_back(ev.payload);
        const auto version = static_cast<ModelVersion>(history.size() + 1);
        TrainOutcome t = train_session_model(config, fold_labels(prefix, ev.sequence - 1), features,
                                             *registry_, version, ev.payload.value("trigger", ""));
        if (!t.snapshot) {
          report.mismatches.push_back("model " + std::to_string(version) + " could not be retrained");
          history.push_back(nullptr);
        } else {
          history.push_back(t.payload);
        }
        break;
      }
      default:
        break;
    }
  }
  report.models = history.size();

  // Compare against the live session when it is open, else the log itself.
  const LabelMap replayed_labels = fold_labels(events);
  LabelMap reference_labels = replayed_labels;
  std::vector<std::string> reference_features = features;
  std::size_t reference_models = recorded.size();
  std::vector<nlohmann::json> reference_history = recorded;
  if (has_session(config.session_id)) {
    SessionState& s = state(config.session_id);
    std::lock_guard owner(s.owner);
    if (s.log->path() == log_path || std::filesystem::equivalent(s.log->path(), log_path)) {
      reference_labels = s.log->current_labels();
      reference_features = s.features;
      reference_models = s.models.size();
      reference_history = s.log->metrics_history();
    }
  }
  report.labels_match = replayed_labels == reference_labels;
  if (!report.labels_match) report.mismatches.push_back("current labels differ");
  report.features_match = features == reference_features;
  if (!report.features_match) report.mismatches.push_back("active feature versions differ");
  report.model_count_match = history.size() == reference_models;
  if (!report.model_count_match) report.mismatches.push_back("model count differs");
  report.metrics_match = history == reference_history;
  if (!report.metrics_match) {
    for (std::size_t i = 0; i < std::min(history.size(), reference_history.size()); ++i) {
      if (history[i] != reference_history[i]) {
        report.mismatches.push_back("metrics entry " + std::to_string(i + 1) + " differs");
      }
    }
    if (history.size() != reference_history.size()) report.mismatches.push_back("history length differs");
  }
  return report;
}

}  // namespace ice
