#pragma once

// Uniform fit/score front end over the four one-class detectors, plus the
// K4DM binary container:
//
//   "K4DM" | u32 version | u8 kind | u8 has_standardizer | [standardizer] | model
//
// All integers and floats little-endian; floats are IEEE-754 binary64.

#include <optional>
#include <string>
#include <string_view>
#include <variant>

#include "k4/binary_io.hpp"
#include "k4/core.hpp"
#include "k4/detectors/deepsvdd.hpp"
#include "k4/detectors/gmm.hpp"
#include "k4/detectors/kde.hpp"
#include "k4/detectors/ocsvm.hpp"
#include "k4/detectors/standardizer.hpp"

namespace k4 {

enum class DetectorKind : std::uint8_t { kGmm = 1, kKde = 2, kOcsvm = 3, kDeepSvdd = 4 };

inline std::string_view to_string(DetectorKind k) {
  switch (k) {
    case DetectorKind::kGmm: return "gmm";
    case DetectorKind::kKde: return "kde";
    case DetectorKind::kOcsvm: return "ocsvm";
    case DetectorKind::kDeepSvdd: return "deepsvdd";
  }
  return "unknown";
}

inline DetectorKind parse_detector_kind(std::string_view s) {
  if (s == "gmm") return DetectorKind::kGmm;
  if (s == "kde") return DetectorKind::kKde;
  if (s == "ocsvm") return DetectorKind::kOcsvm;
  if (s == "deepsvdd") return DetectorKind::kDeepSvdd;
  throw InvalidInput("unknown detector kind '" + std::string(s) + "'");
}

// Kernel and neural detectors see z-scored features; density models see raw ones.
inline bool standardizes_features(DetectorKind k) { return k == DetectorKind::kOcsvm || k == DetectorKind::kDeepSvdd; }

struct DetectorConfig {
  DetectorKind kind = DetectorKind::kOcsvm;
  GmmConfig gmm;
  KdeConfig kde;
  OcsvmConfig ocsvm;
  DeepSvddConfig deepsvdd;
};

using DetectorModel = std::variant<GmmModel, KdeModel, OcsvmModel, DeepSvddModel>;

inline DetectorKind kind_of(const DetectorModel& m) {
  return static_cast<DetectorKind>(m.index() + 1);
}

inline DetectorModel fit_detector(const Matrix& features, const DetectorConfig& cfg) {
  switch (cfg.kind) {
    case DetectorKind::kGmm: return fit_gmm(features, cfg.gmm);
    case DetectorKind::kKde: return fit_kde(features, cfg.kde);
    case DetectorKind::kOcsvm: return fit_ocsvm(features, cfg.ocsvm);
    case DetectorKind::kDeepSvdd: return fit_deepsvdd(features, cfg.deepsvdd);
  }
  throw InvalidInput("unknown detector kind");
}

// Higher = more anomalous for every kind.
inline std::vector<double> score(const DetectorModel& m, const Matrix& features) {
  return std::visit([&](const auto& model) { return model.score(features); }, m);
}

inline constexpr std::string_view kModelMagic = "K4DM";
inline constexpr std::uint32_t kModelVersion = 1;

struct ModelFile {
  DetectorModel detector;
  std::optional<Standardizer> standardizer;
};

inline std::string encode_model(const ModelFile& f) {
  ByteWriter w;
  w.bytes(kModelMagic);
  w.u32(kModelVersion);
  w.u8(static_cast<std::uint8_t>(kind_of(f.detector)));
  w.u8(f.standardizer ? 1 : 0);
  if (f.standardizer) f.standardizer->serialize(w);
  std::visit([&](const auto& m) { m.serialize(w); }, f.detector);
  return w.take();
}

inline ModelFile decode_model(std::string_view bytes, const std::string& context = "K4DM") {
  ByteReader r(bytes, context);
  if (r.bytes(4) != kModelMagic) r.fail("bad magic (expected K4DM)");
  if (auto v = r.u32(); v != kModelVersion) r.fail("unsupported format version " + std::to_string(v));
  const auto kind = r.u8();
  const bool has_std = r.u8() != 0;
  std::optional<Standardizer> stdz;
  if (has_std) stdz = Standardizer::deserialize(r);
  DetectorModel det;
  switch (kind) {
    case 1: det = GmmModel::deserialize(r); break;
    case 2: det = KdeModel::deserialize(r); break;
    case 3: det = OcsvmModel::deserialize(r); break;
    case 4: det = DeepSvddModel::deserialize(r); break;
    default: r.fail("unknown detector kind tag " + std::to_string(kind));
  }
  r.expect_end();
  return {std::move(det), std::move(stdz)};
}

inline void save_model(const std::filesystem::path& path, const ModelFile& f) { write_file(path, encode_model(f)); }

inline ModelFile load_model(const std::filesystem::path& path) { return decode_model(read_file(path), path.string()); }

}  // namespace k4
