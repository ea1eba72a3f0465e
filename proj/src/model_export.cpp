#include "ice/model_export.hpp"

#include <algorithm>
#include <map>

namespace ice {

nlohmann::json export_model(const LinearModel& model, const std::vector<FeatureDefinition>& features,
                            const FeatureSpace& space, const ExportContext& context) {
  std::vector<std::pair<FeatureIndex, std::string>> coords;
  nlohmann::json defs = nlohmann::json::array();
  for (const auto& f : features) {
    defs.push_back(f.to_json());
    for (const auto& name : f.coordinate_names()) {
      const auto index = space.find(name);
      if (!index) throw NotFound("coordinate '" + name + "' is not registered");
      coords.emplace_back(*index, name);
    }
  }
  std::sort(coords.begin(), coords.end());
  nlohmann::json weights = nlohmann::json::array();
  for (const auto& [index, name] : coords) {
    const double w = index < model.weights.size() ? model.weights[index] : 0.0;
    weights.push_back({name, w});
  }
  nlohmann::json doc{
      {"format", kModelFormat},
      {"dataset_id", context.dataset_id},
      {"session_id", context.session_id},
      {"version", model.version},
      {"reg_strength", model.reg_strength},
      {"bias", model.bias},
      {"text", "title + ' ' + body_text, ASCII alphanumeric runs lowercased"},
      {"features", defs},
      {"weights", weights},
  };
  if (model.calibrator) {
    doc["calibrator"] = {{"breakpoints", model.calibrator->breakpoints()},
                         {"values", model.calibrator->values()}};
  } else {
    doc["calibrator"] = nullptr;
  }
  return doc;
}

ExportedScorer::ExportedScorer(const nlohmann::json& doc) : doc_(doc) {
  try {
    if (doc.at("format").get<std::string>() != kModelFormat) {
      throw InvalidArgument("unsupported model format");
    }
    version_ = doc.at("version").get<ModelVersion>();
    bias_ = doc.at("bias").get<double>();
    std::map<std::string, FeatureIndex> position;
    for (const auto& w : doc.at("weights")) {
      position.emplace(w.at(0).get<std::string>(), static_cast<FeatureIndex>(weights_.size()));
      weights_.push_back(w.at(1).get<double>());
    }
    for (const auto& f : doc.at("features")) {
      Feature feature{FeatureDefinition::from_json(f), {}};
      for (const auto& name : feature.def.coordinate_names()) {
        auto it = position.find(name);
        if (it == position.end()) throw InvalidArgument("no weight for coordinate '" + name + "'");
        feature.coords.push_back(it->second);
      }
      features_.push_back(std::move(feature));
    }
    const auto& cal = doc.at("calibrator");
    if (!cal.is_null()) {
      calibrator_ = IsotonicMap(cal.at("breakpoints").get<std::vector<double>>(),
                                cal.at("values").get<std::vector<double>>());
    }
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("bad model document: ") + e.what());
  }
}

double ExportedScorer::raw_probability(std::span<const std::string> tokens) const {
  std::vector<SparseVector> parts;
  parts.reserve(features_.size());
  for (const auto& f : features_) parts.push_back(evaluate_feature(f.def, tokens, f.coords));
  std::vector<const SparseVector*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  double z = bias_;
  for (const auto& e : merge_sparse(ptrs)) z += weights_[e.index] * e.value;
  return sigmoid(z);
}

double ExportedScorer::probability(std::span<const std::string> tokens) const {
  const double raw = raw_probability(tokens);
  return calibrator_ ? (*calibrator_)(raw) : raw;
}

double ExportedScorer::score_text(std::string_view text) const {
  return probability(tokenize(text));
}

}  // namespace ice
