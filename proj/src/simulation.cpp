#include "ice/simulation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <map>
#include <mutex>
#include <set>

#include "ice/hash.hpp"

namespace ice {

nlohmann::json CorpusSpec::to_json() const {
  return {{"documents", documents},         {"positive_rate", positive_rate},
          {"confuser_rate", confuser_rate}, {"background_words", background_words},
          {"core_words", core_words},       {"shared_words", shared_words},
          {"confuser_words", confuser_words}, {"concept_density", concept_density},
          {"confuser_density", confuser_density}, {"concept_noise", concept_noise},
          {"min_length", min_length},
          {"max_length", max_length},       {"seed", seed}};
}

CorpusSpec CorpusSpec::from_json(const nlohmann::json& j) {
  CorpusSpec c;
  c.documents = j.value("documents", c.documents);
  c.positive_rate = j.value("positive_rate", c.positive_rate);
  c.confuser_rate = j.value("confuser_rate", c.confuser_rate);
  c.background_words = j.value("background_words", c.background_words);
  c.core_words = j.value("core_words", c.core_words);
  c.shared_words = j.value("shared_words", c.shared_words);
  c.confuser_words = j.value("confuser_words", c.confuser_words);
  c.concept_density = j.value("concept_density", c.concept_density);
  c.confuser_density = j.value("confuser_density", c.confuser_density);
  c.concept_noise = j.value("concept_noise", c.concept_noise);
  c.min_length = j.value("min_length", c.min_length);
  c.max_length = j.value("max_length", c.max_length);
  c.seed = j.value("seed", c.seed);
  if (!(c.positive_rate >= 0.0 && c.positive_rate <= 1.0)) throw InvalidArgument("positive_rate must lie in [0, 1]");
  if (c.min_length < 1 || c.max_length < c.min_length) throw InvalidArgument("bad document length range");
  if (c.background_words < 1 || c.core_words < 1 || c.shared_words < 1 || c.confuser_words < 1) {
    throw InvalidArgument("every vocabulary needs at least one word");
  }
  return c;
}

namespace {

// Pronounceable distinct pseudo-words.
std::vector<std::string> make_words(std::size_t count, std::mt19937_64& rng,
                                    std::set<std::string>& used) {
  static constexpr char kConsonants[] = "bcdfghjklmnprstvz";
  static constexpr char kVowels[] = "aeiou";
  std::uniform_int_distribution<int> syllables(2, 4);
  std::uniform_int_distribution<int> consonant(0, sizeof(kConsonants) - 2);
  std::uniform_int_distribution<int> vowel(0, sizeof(kVowels) - 2);
  std::vector<std::string> out;
  while (out.size() < count) {
    std::string w;
    const int n = syllables(rng);
    for (int i = 0; i < n; ++i) {
      w.push_back(kConsonants[consonant(rng)]);
      w.push_back(kVowels[vowel(rng)]);
    }
    if (used.insert(w).second) out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

SyntheticCorpus generate_corpus(const CorpusSpec& spec) {
  std::mt19937_64 rng(spec.seed);
  std::set<std::string> used;
  const auto background = make_words(spec.background_words, rng, used);
  SyntheticCorpus corpus;
  corpus.core_vocabulary = make_words(spec.core_words, rng, used);
  corpus.shared_vocabulary = make_words(spec.shared_words, rng, used);
  const auto confuser = make_words(spec.confuser_words, rng, used);

  std::vector<double> cdf(background.size());
  double total = 0.0;
  for (std::size_t r = 0; r < background.size(); ++r) {
    total += 1.0 / static_cast<double>(r + 1);
    cdf[r] = total;
  }
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto zipf = [&]() -> const std::string& {
    const double u = unit(rng) * total;
    const auto it = std::lower_bound(cdf.begin(), cdf.end(), u);
    return background[std::min<std::size_t>(it - cdf.begin(), background.size() - 1)];
  };
  auto pick = [&](const std::vector<std::string>& words) -> const std::string& {
    return words[std::uniform_int_distribution<std::size_t>(0, words.size() - 1)(rng)];
  };
  std::uniform_int_distribution<std::uint32_t> length(spec.min_length, spec.max_length);

  corpus.records.reserve(spec.documents);
  corpus.positive.reserve(spec.documents);
  for (std::uint64_t i = 0; i < spec.documents; ++i) {
    const bool positive = unit(rng) < spec.positive_rate;
    const bool confusing = !positive && unit(rng) < spec.confuser_rate;
    const std::uint32_t len = length(rng);
    std::vector<std::string> words;
    words.reserve(len);
    for (std::uint32_t t = 0; t < len; ++t) {
      const double u = unit(rng);
      if (positive && u < spec.concept_density) {
        words.push_back(unit(rng) < 0.5 ? pick(corpus.core_vocabulary) : pick(corpus.shared_vocabulary));
      } else if (confusing && u < spec.confuser_density) {
        words.push_back(unit(rng) < 0.5 ? pick(corpus.shared_vocabulary) : pick(confuser));
      } else if (!positive && u > 1.0 - spec.concept_noise) {
        words.push_back(pick(corpus.core_vocabulary));
      } else {
        words.push_back(zipf());
      }
    }
    RawRecord rec;
    rec.external_id = "doc-" + std::to_string(i);
    rec.url = "http://synthetic.example/" + std::to_string(i);
    const std::size_t title_len = std::min<std::size_t>(6, words.size());
    for (std::size_t t = 0; t < words.size(); ++t) {
      std::string& field = t < title_len ? rec.title : rec.body_text;
      if (!field.empty()) field.push_back(' ');
      field += words[t];
    }
    corpus.records.push_back(std::move(rec));
    corpus.positive.push_back(positive);
  }
  // One shared and one core word per query: what a teacher who knows the
  // topic would type first.
  for (std::size_t q = 0; q < std::min(corpus.core_vocabulary.size(), corpus.shared_vocabulary.size()); ++q) {
    corpus.seed_queries.push_back(corpus.shared_vocabulary[q] + " " + corpus.core_vocabulary[q]);
  }
  return corpus;
}

nlohmann::json TeacherReport::to_json() const {
  nlohmann::json rounds_json = nlohmann::json::array();
  for (const auto& r : rounds) {
    rounds_json.push_back({{"labels", r.labels},
                           {"positives", r.positives},
                           {"version", r.version},
                           {"auc", r.auc ? nlohmann::json(*r.auc) : nlohmann::json(nullptr)},
                           {"recall_at_precision", r.recall_at_precision},
                           {"source", r.source}});
  }
  return {{"session_id", session_id},
          {"strategy", strategy},
          {"seed", seed},
          {"labels_to_target", labels_to_target ? nlohmann::json(*labels_to_target) : nlohmann::json(nullptr)},
          {"seconds", seconds},
          {"rounds", rounds_json}};
}

Oracle make_oracle(std::vector<bool> positive, double test_fraction, std::uint64_t salt) {
  Oracle o;
  auto test = std::make_shared<std::unordered_set<RowId>>();
  const SplitAssignment held_out{test_fraction, salt};
  for (RowId r = 0; r < positive.size(); ++r) {
    if (held_out.is_train(r)) test->insert(r);
  }
  o.positive = std::move(positive);
  o.test_rows = std::move(test);
  return o;
}

namespace {

struct Evaluation {
  std::optional<double> auc;
  double recall_at_precision = 0.0;
};

// Feature vectors of the held-out rows, assembled once per feature set.
class HeldOutFeatures {
 public:
  HeldOutFeatures(LoopService& service, const Oracle& oracle, const std::vector<std::string>& keys) {
    ColumnEngine& engine = service.engine();
    for (std::uint32_t s = 0; s < engine.shard_count(); ++s) {
      const ShardInfo info = engine.shard_info(s);
      if (info.rows() == 0) continue;
      std::vector<SparseVector> vecs;
      service.registry().assemble_range(s, info.begin, info.end, keys, vecs);
      for (RowId r = info.begin; r < info.end; ++r) {
        if (!oracle.test_rows->count(r)) continue;
        x_.push_back(std::move(vecs[r - info.begin]));
        y_.push_back(oracle.positive[r] ? 1 : -1);
      }
    }
  }

  Evaluation evaluate_model(const LinearModel& model, double precision) const {
    std::vector<double> scores(x_.size());
    for (std::size_t i = 0; i < x_.size(); ++i) scores[i] = model.raw_probability(x_[i]);
    const Metrics m = evaluate(scores, y_);
    return {m.auc, m.recall_at_precision(precision)};
  }

 private:
  std::vector<SparseVector> x_;
  std::vector<int> y_;
};

std::shared_ptr<const HeldOutFeatures> held_out_for(LoopService& service, const Oracle& oracle,
                                                    const std::vector<std::string>& keys) {
  static std::mutex mutex;
  static std::map<std::pair<const void*, std::string>, std::shared_ptr<const HeldOutFeatures>> cache;
  std::string joined;
  for (const auto& k : keys) joined += k + "|";
  std::lock_guard lock(mutex);
  auto& slot = cache[{oracle.test_rows.get(), joined}];
  if (!slot) slot = std::make_shared<const HeldOutFeatures>(service, oracle, keys);
  return slot;
}

}  // namespace

TeacherReport run_simulated_teacher(LoopService& service, const Oracle& oracle,
                                    const std::vector<std::string>& seed_queries,
                                    const TeacherConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  if (std::none_of(oracle.positive.begin(), oracle.positive.end(), [](bool p) { return p; })) {
    throw InvalidArgument("the corpus has no positives; nothing to learn");
  }
  if (config.strategy != "active" && config.strategy != "uniform") {
    throw InvalidArgument("strategy must be 'active' or 'uniform'");
  }
  if (config.batch_size < 1) throw InvalidArgument("batch size must be at least 1");
  TeacherReport report;
  report.strategy = config.strategy;
  report.seed = config.seed;
  report.session_id = "sim-" + config.strategy + "-" + std::to_string(config.seed);

  SessionConfig sc;
  sc.session_id = report.session_id;
  sc.split = {1.0, config.seed};  // evaluation uses the oracle's held-out rows
  sc.retrain_threshold = static_cast<std::uint32_t>(config.batch_size);
  sc.grid = config.grid;
  sc.folds = config.folds;
  sc.fold_salt = config.seed;
  sc.initial_features = nlohmann::json::array({{{"kind", "bow"}, {"cap", config.bow_cap}}});
  service.create_session(sc);
  const std::string& sid = report.session_id;

  std::size_t next_query = seed_queries.empty() ? 0 : config.seed % seed_queries.size();
  std::uint64_t labeled = 0;
  std::uint64_t positives = 0;
  std::uint64_t negatives = 0;
  std::uint64_t draw = 0;

  while (labeled < config.label_budget) {
    const std::size_t want = static_cast<std::size_t>(
        std::min<std::uint64_t>(config.batch_size, config.label_budget - labeled));
    const LoopStatus st = service.status(sid);
    const bool have_model = st.model_version > 0;
    std::vector<SampleItem> items;
    std::string source;
    LabelSource label_source = LabelSource::kSearch;

    SampleRequest req;
    req.count = want;
    req.exclude = oracle.test_rows;
    req.seed = hash_row(++draw, config.seed);
    if (!have_model && (positives == 0 || negatives > 0) && !seed_queries.empty()) {
      // Cold start: search for positives.
      source = "search";
      req.strategy = SampleStrategy::kSearch;
      for (std::size_t tries = 0; tries < seed_queries.size() && items.empty(); ++tries) {
        req.query = seed_queries[next_query];
        next_query = (next_query + 1) % seed_queries.size();
        items = service.draw_sample(sid, req);
      }
    }
    if (items.empty() && have_model && config.strategy == "active") {
      source = "score_range";
      label_source = LabelSource::kActiveSample;
      req.strategy = SampleStrategy::kScoreRange;
      double lo = config.band_lo;
      double hi = config.band_hi;
      auto exclude = std::make_shared<std::unordered_set<RowId>>(*oracle.test_rows);
      while (items.size() < want) {
        req.lo = std::max(0.0, lo);
        req.hi = std::min(1.0, hi);
        req.count = want - items.size();
        req.exclude = exclude;
        for (auto& it : service.draw_sample(sid, req)) {
          exclude->insert(it.row);
          items.push_back(std::move(it));
        }
        if (req.lo <= 0.0 && req.hi >= 1.0) break;
        lo -= config.band_step;
        hi += config.band_step;
      }
    }
    if (items.empty()) {
      source = "uniform_unlabeled";
      label_source = LabelSource::kUniform;
      req.strategy = SampleStrategy::kUniformUnlabeled;
      req.count = want;
      req.exclude = oracle.test_rows;
      items = service.draw_sample(sid, req);
    }
    if (items.empty()) break;  // nothing left to label

    std::vector<LabelInput> batch;
    for (const auto& it : items) {
      const bool p = oracle.positive[it.row];
      batch.push_back({it.row, p ? Label::kPositive : Label::kNegative, label_source});
      (p ? positives : negatives) += 1;
    }
    labeled += batch.size();
    const SubmitResult res = service.submit_labels(sid, batch);
    if (res.retrained) {
      // Uniform sampling never reads the score column, so its passes are
      // cut short to keep the paired runs cheap.
      if (config.strategy == "active") service.wait_for_scoring(sid);
      else service.interrupt_scoring(sid);
    }

    RoundReport round;
    round.labels = labeled;
    round.positives = positives;
    round.source = source;
    round.version = res.status.model_version;
    if (round.version > 0) {
      auto snap = service.model(sid);
      std::vector<std::string> keys;
      for (const auto& f : snap->features) keys.push_back(f.key());
      const Evaluation ev =
          held_out_for(service, oracle, keys)->evaluate_model(snap->model, config.target_precision);
      round.auc = ev.auc;
      round.recall_at_precision = ev.recall_at_precision;
      if (!report.labels_to_target && ev.recall_at_precision >= config.target_recall) {
        report.labels_to_target = labeled;
      }
    }
    report.rounds.push_back(round);
    if (report.labels_to_target && config.stop_at_target) break;
  }
  service.interrupt_scoring(sid);
  report.seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

ExperimentConfig ExperimentConfig::from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    if (j.contains("corpus")) c.corpus = CorpusSpec::from_json(j.at("corpus"));
    if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("strategies")) c.strategies = j.at("strategies").get<std::vector<std::string>>();
    c.uniform_budget = j.value("uniform_budget", c.uniform_budget);
    c.shards = j.value("shards", c.shards);
    c.test_fraction = j.value("test_fraction", c.test_fraction);
    c.work_dir = j.value("work_dir", std::string{});
    if (j.contains("teacher")) {
      const auto& t = j.at("teacher");
      TeacherConfig& tc = c.teacher;
      tc.label_budget = t.value("label_budget", tc.label_budget);
      tc.batch_size = t.value("batch_size", tc.batch_size);
      tc.band_lo = t.value("band_lo", tc.band_lo);
      tc.band_hi = t.value("band_hi", tc.band_hi);
      tc.band_step = t.value("band_step", tc.band_step);
      tc.bow_cap = t.value("bow_cap", tc.bow_cap);
      if (t.contains("grid")) tc.grid = t.at("grid").get<std::vector<double>>();
      tc.folds = t.value("folds", tc.folds);
      tc.target_precision = t.value("target_precision", tc.target_precision);
      tc.target_recall = t.value("target_recall", tc.target_recall);
      tc.stop_at_target = t.value("stop_at_target", tc.stop_at_target);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad experiment config: ") + e.what());
  }
  if (c.shards < 1) throw InvalidArgument("shards must be at least 1");
  return c;
}

double censored_median(const std::vector<TeacherReport>& runs, std::uint64_t budget) {
  std::vector<double> v;
  for (const auto& r : runs) {
    v.push_back(static_cast<double>(r.labels_to_target.value_or(budget)));
  }
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

nlohmann::json ExperimentReport::to_json() const {
  nlohmann::json runs_json = nlohmann::json::array();
  for (const auto& r : runs) runs_json.push_back(r.to_json());
  return {{"median_active", median_active ? nlohmann::json(*median_active) : nlohmann::json(nullptr)},
          {"median_uniform", median_uniform ? nlohmann::json(*median_uniform) : nlohmann::json(nullptr)},
          {"seconds", seconds},
          {"runs", runs_json}};
}

ExperimentReport run_experiment(const ExperimentConfig& config) {
  const auto started = std::chrono::steady_clock::now();
  std::filesystem::path work = config.work_dir;
  if (work.empty()) work = std::filesystem::temp_directory_path() / "ice-simulation";
  std::filesystem::remove_all(work);
  std::filesystem::create_directories(work);

  SyntheticCorpus corpus = generate_corpus(config.corpus);
  std::vector<bool> truth = corpus.positive;
  const std::string dataset = "synthetic";
  import_items(work / "data", dataset, records_from(std::move(corpus.records)));
  auto raw = RawStore::open(work / "data", dataset);
  EngineOptions eo;
  eo.shard_count = config.shards;
  ServiceOptions so;
  so.session_dir = work / "sessions";
  LoopService service(ColumnEngine::load_dataset(raw, eo), so);
  const Oracle oracle = make_oracle(std::move(truth), config.test_fraction, config.corpus.seed);

  ExperimentReport report;
  std::vector<TeacherReport> active;
  std::vector<TeacherReport> uniform;
  for (std::uint64_t seed : config.seeds) {
    for (const auto& strategy : config.strategies) {
      TeacherConfig tc = config.teacher;
      tc.seed = seed;
      tc.strategy = strategy;
      if (strategy == "uniform") tc.label_budget = config.uniform_budget;
      TeacherReport r = run_simulated_teacher(service, oracle, corpus.seed_queries, tc);
      (strategy == "active" ? active : uniform).push_back(r);
      report.runs.push_back(std::move(r));
    }
  }
  if (!active.empty()) report.median_active = censored_median(active, config.teacher.label_budget);
  if (!uniform.empty()) report.median_uniform = censored_median(uniform, config.uniform_budget);
  report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  return report;
}

}  // namespace ice
