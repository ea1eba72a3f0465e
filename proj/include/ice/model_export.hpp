#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "ice/featurizer.hpp"
#include "ice/trainer.hpp"

namespace ice {

inline constexpr const char* kModelFormat = "ice-model/1";

struct ExportContext {
  std::string dataset_id;
  std::string session_id;
};

// Self-contained model document: feature definitions (with their data),
// weights by coordinate name in coordinate order, bias, reg strength and
// calibrator. Enough to score raw text with no engine.
nlohmann::json export_model(const LinearModel& model, const std::vector<FeatureDefinition>& features,
                            const FeatureSpace& space, const ExportContext& context);

// Scores text from an export document alone.
class ExportedScorer {
 public:
  explicit ExportedScorer(const nlohmann::json& doc);

  double raw_probability(std::span<const std::string> tokens) const;
  double probability(std::span<const std::string> tokens) const;
  double score_text(std::string_view text) const;

  const nlohmann::json& document() const { return doc_; }
  ModelVersion version() const { return version_; }

 private:
  struct Feature {
    FeatureDefinition def;
    std::vector<FeatureIndex> coords;  // positions into weights_
  };

  nlohmann::json doc_;
  ModelVersion version_ = 0;
  std::vector<Feature> features_;
  std::vector<double> weights_;
  double bias_ = 0.0;
  std::optional<IsotonicMap> calibrator_;
};

}  // namespace ice
