#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/loop_service.hpp"
#include "ice/raw_store.hpp"

namespace ice {

// A lopsided synthetic corpus. Positives draw from a core and a shared
// concept vocabulary; a "confuser" slice of negatives draws from the shared
// vocabulary plus its own, so precision needs the core words.
struct CorpusSpec {
  std::uint64_t documents = 100000;
  double positive_rate = 0.02;
  double confuser_rate = 0.10;  // fraction of negatives
  std::uint32_t background_words = 4000;
  std::uint32_t core_words = 20;
  std::uint32_t shared_words = 20;
  std::uint32_t confuser_words = 20;
  double concept_density = 0.08;   // per-token chance of a concept word in a positive
  double confuser_density = 0.10;  // same, in a confuser
  double concept_noise = 0.001;     // per-token chance of a core word in any negative
  std::uint32_t min_length = 30;
  std::uint32_t max_length = 80;
  std::uint64_t seed = 7;

  nlohmann::json to_json() const;
  static CorpusSpec from_json(const nlohmann::json& j);
};

struct SyntheticCorpus {
  std::vector<RawRecord> records;
  std::vector<bool> positive;  // ground truth per row
  std::vector<std::string> core_vocabulary;
  std::vector<std::string> shared_vocabulary;
  std::vector<std::string> seed_queries;
};

SyntheticCorpus generate_corpus(const CorpusSpec& spec);

struct TeacherConfig {
  std::string strategy = "active";  // active | uniform
  std::uint64_t seed = 1;
  std::uint64_t label_budget = 1000;
  std::size_t batch_size = 20;
  double band_lo = 0.4;
  double band_hi = 0.6;
  double band_step = 0.05;  // widening per side when the band is empty
  std::size_t bow_cap = 10000;
  std::vector<double> grid{1e-3, 1e-2, 1e-1};
  std::uint32_t folds = 3;
  double target_precision = 0.8;
  double target_recall = 0.5;
  bool stop_at_target = true;
};

struct RoundReport {
  std::uint64_t labels = 0;
  std::uint64_t positives = 0;
  ModelVersion version = 0;
  std::optional<double> auc;
  double recall_at_precision = 0.0;
  std::string source;  // search | score_range | uniform_unlabeled
};

struct TeacherReport {
  std::string session_id;
  std::string strategy;
  std::uint64_t seed = 0;
  std::vector<RoundReport> rounds;
  std::optional<std::uint64_t> labels_to_target;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

// Ground truth plus the held-out evaluation rows the teacher never labels.
struct Oracle {
  std::vector<bool> positive;
  std::shared_ptr<const std::unordered_set<RowId>> test_rows;
};

Oracle make_oracle(std::vector<bool> positive, double test_fraction, std::uint64_t salt);

// Drives one session through search seeding, labeling, retraining and
// sampling until the budget is spent (or the target is met).
TeacherReport run_simulated_teacher(LoopService& service, const Oracle& oracle,
                                    const std::vector<std::string>& seed_queries,
                                    const TeacherConfig& config);

struct ExperimentConfig {
  CorpusSpec corpus;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<std::string> strategies{"active", "uniform"};
  TeacherConfig teacher;
  std::uint64_t uniform_budget = 2000;
  std::uint32_t shards = 4;
  double test_fraction = 0.3;
  std::filesystem::path work_dir;

  static ExperimentConfig from_json(const nlohmann::json& j);
};

struct ExperimentReport {
  std::vector<TeacherReport> runs;
  std::optional<double> median_active;
  std::optional<double> median_uniform;
  double seconds = 0.0;

  nlohmann::json to_json() const;
};

// Generates and imports the corpus, loads one engine and runs every
// (strategy, seed) pair on it.
ExperimentReport run_experiment(const ExperimentConfig& config);

// Median of labels-to-target where runs that missed count as their budget.
double censored_median(const std::vector<TeacherReport>& runs, std::uint64_t budget);

}  // namespace ice
