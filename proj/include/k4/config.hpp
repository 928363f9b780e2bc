#pragma once

// JSON (de)serialisation of detector settings. Unknown keys are rejected so a
// typo never silently falls back to a default.

#include <set>
#include <string>

#include <json.hpp>

#include "k4/core.hpp"
#include "k4/detector.hpp"

namespace k4 {

using Json = nlohmann::ordered_json;

namespace detail {

inline void reject_unknown_keys(const Json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw InvalidInput(where + " must be a JSON object");
  for (const auto& [key, _] : j.items())
    if (!allowed.count(key)) throw InvalidInput("unknown key '" + key + "' in " + where);
}

template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end() && !it->is_null()) out = it->template get<T>();
}

}  // namespace detail

inline Json detector_to_json(const DetectorConfig& c) {
  Json j{{"kind", std::string(to_string(c.kind))}};
  switch (c.kind) {
    case DetectorKind::kGmm:
      j["n_components"] = c.gmm.n_components;
      j["reg"] = c.gmm.reg;
      j["max_iter"] = c.gmm.max_iter;
      j["tol"] = c.gmm.tol;
      j["seed"] = c.gmm.seed;
      break;
    case DetectorKind::kKde:
      j["bandwidth"] = c.kde.bandwidth ? Json(*c.kde.bandwidth) : Json(nullptr);
      break;
    case DetectorKind::kOcsvm:
      j["nu"] = c.ocsvm.nu;
      j["gamma"] = c.ocsvm.gamma ? Json(*c.ocsvm.gamma) : Json(nullptr);
      j["tol"] = c.ocsvm.tol;
      j["max_iter"] = c.ocsvm.max_iter;
      j["cache_mb"] = c.ocsvm.cache_mb;
      break;
    case DetectorKind::kDeepSvdd:
      j["widths"] = c.deepsvdd.widths;
      j["dropout"] = c.deepsvdd.dropout;
      j["nu"] = c.deepsvdd.nu;
      j["epochs"] = c.deepsvdd.epochs;
      j["lr"] = c.deepsvdd.lr;
      j["batch"] = c.deepsvdd.batch;
      j["seed"] = c.deepsvdd.seed;
      break;
  }
  return j;
}

// `default_seed` seeds stochastic detectors whose JSON omits "seed".
inline DetectorConfig detector_from_json(const Json& j, std::uint64_t default_seed = 0) {
  DetectorConfig c;
  if (j.is_string()) {
    c.kind = parse_detector_kind(j.get<std::string>());
    c.gmm.seed = c.deepsvdd.seed = default_seed;
    return c;
  }
  if (!j.is_object() || !j.contains("kind")) throw InvalidInput("detector needs a \"kind\"");
  c.kind = parse_detector_kind(j.at("kind").get<std::string>());
  c.gmm.seed = c.deepsvdd.seed = default_seed;
  const std::string where = "detector '" + std::string(to_string(c.kind)) + "'";
  switch (c.kind) {
    case DetectorKind::kGmm:
      detail::reject_unknown_keys(j, {"kind", "n_components", "reg", "max_iter", "tol", "seed"}, where);
      detail::read_opt(j, "n_components", c.gmm.n_components);
      detail::read_opt(j, "reg", c.gmm.reg);
      detail::read_opt(j, "max_iter", c.gmm.max_iter);
      detail::read_opt(j, "tol", c.gmm.tol);
      detail::read_opt(j, "seed", c.gmm.seed);
      break;
    case DetectorKind::kKde:
      detail::reject_unknown_keys(j, {"kind", "bandwidth"}, where);
      if (auto it = j.find("bandwidth"); it != j.end() && !it->is_null()) c.kde.bandwidth = it->get<double>();
      break;
    case DetectorKind::kOcsvm:
      detail::reject_unknown_keys(j, {"kind", "nu", "gamma", "tol", "max_iter", "cache_mb"}, where);
      detail::read_opt(j, "nu", c.ocsvm.nu);
      if (auto it = j.find("gamma"); it != j.end() && !it->is_null()) c.ocsvm.gamma = it->get<double>();
      detail::read_opt(j, "tol", c.ocsvm.tol);
      detail::read_opt(j, "max_iter", c.ocsvm.max_iter);
      detail::read_opt(j, "cache_mb", c.ocsvm.cache_mb);
      break;
    case DetectorKind::kDeepSvdd:
      detail::reject_unknown_keys(j, {"kind", "widths", "dropout", "nu", "epochs", "lr", "batch", "seed"}, where);
      detail::read_opt(j, "widths", c.deepsvdd.widths);
      detail::read_opt(j, "dropout", c.deepsvdd.dropout);
      detail::read_opt(j, "nu", c.deepsvdd.nu);
      detail::read_opt(j, "epochs", c.deepsvdd.epochs);
      detail::read_opt(j, "lr", c.deepsvdd.lr);
      detail::read_opt(j, "batch", c.deepsvdd.batch);
      detail::read_opt(j, "seed", c.deepsvdd.seed);
      break;
  }
  return c;
}

}  // namespace k4
