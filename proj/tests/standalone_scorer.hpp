#pragma once

// Scores raw text from an exported model document alone, written against
// the document format without using the library's featurizer or trainer.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace ice::testing {

class StandaloneScorer {
 public:
  explicit StandaloneScorer(const nlohmann::json& doc) : doc_(doc) {
    for (const auto& w : doc.at("weights")) weight_[w.at(0).get<std::string>()] = w.at(1).get<double>();
    for (const auto& f : doc.at("features")) {
      if (f.at("kind") == "model") nested_.emplace(f.at("id").get<std::string>(), StandaloneScorer(f.at("model")));
    }
  }

  static std::vector<std::string> tokens(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
      const unsigned char u = static_cast<unsigned char>(c);
      if (u < 128 && std::isalnum(u)) {
        cur += static_cast<char>(std::tolower(u));
      } else if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
  }

  double probability(const std::string& title, const std::string& body) const {
    return calibrated(raw(tokens(title + " " + body)));
  }

  double raw(const std::vector<std::string>& toks) const {
    double z = doc_.at("bias").get<double>();
    for (const auto& f : doc_.at("features")) {
      const std::string tag = f.at("id").get<std::string>() + "@" + std::to_string(f.at("version").get<int>());
      const std::string kind = f.at("kind");
      if (kind == "dictionary") {
        const auto& d = f.at("dictionary");
        std::set<std::string> entries;
        for (const auto& e : d.at("entries")) entries.insert(e.get<std::string>());
        double total = 0;
        std::set<std::string> seen;
        for (const auto& t : toks) {
          if (entries.count(t)) {
            ++total;
            seen.insert(t);
          }
        }
        for (const auto& m : d.at("modes")) {
          const std::string mode = m;
          const double v = mode == "total" ? total : mode == "distinct" ? seen.size() : (total > 0 ? 1.0 : 0.0);
          z += w("dict:" + tag + ":" + mode) * v;
        }
      } else if (kind == "bow") {
        const auto& voc = f.at("vocabulary");
        const double docs = voc.at("documents").get<double>();
        std::map<std::string, double> df;
        for (const auto& t : voc.at("terms")) df[t.at(0).get<std::string>()] = t.at(1).get<double>();
        std::map<std::string, double> tf;
        for (std::size_t i = 0; i < toks.size(); ++i) {
          if (df.count(toks[i])) tf[toks[i]] += 1;
          if (i + 1 < toks.size()) {
            const std::string bi = toks[i] + " " + toks[i + 1];
            if (df.count(bi)) tf[bi] += 1;
          }
        }
        double norm = 0;
        for (auto& [g, v] : tf) {
          v *= std::log(docs / df[g]);
          norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm > 0) {
          for (const auto& [g, v] : tf) z += w("bow:" + tag + ":" + g) * v / norm;
        }
      } else if (kind == "model") {
        const StandaloneScorer& inner = nested_.at(f.at("id").get<std::string>());
        z += w("model:" + tag) * inner.calibrated(inner.raw(toks));
      } else if (kind == "builtin") {
        const std::string fn = f.at("function");
        double v = 0;
        if (fn == "log_length") {
          v = std::log1p(static_cast<double>(toks.size()));
        } else if (fn == "numeric_fraction" && !toks.empty()) {
          double digits = 0;
          for (const auto& t : toks) {
            digits += std::all_of(t.begin(), t.end(), [](char c) { return c >= '0' && c <= '9'; });
          }
          v = digits / toks.size();
        }
        z += w("builtin:" + tag) * v;
      }
    }
    return 1.0 / (1.0 + std::exp(-z));
  }

  double calibrated(double p) const {
    const auto& cal = doc_.at("calibrator");
    if (cal.is_null()) return p;
    const auto bps = cal.at("breakpoints").get<std::vector<double>>();
    const auto vals = cal.at("values").get<std::vector<double>>();
    std::size_t k = 0;
    while (k + 1 < bps.size() && bps[k + 1] <= p) ++k;
    return vals[k];
  }

 private:
  double w(const std::string& name) const {
    auto it = weight_.find(name);
    return it == weight_.end() ? 0.0 : it->second;
  }

  nlohmann::json doc_;
  std::map<std::string, double> weight_;
  std::map<std::string, StandaloneScorer> nested_;
};

}  // namespace ice::testing
