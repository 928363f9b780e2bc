#pragma once

// Synthetic labelled log corpus in the generic "0 |1 " line format: normal
// lines from a fixed set of message templates with random numeric fields, and
// anomalous lines from separate templates injected as contiguous bursts.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "k4/core.hpp"
#include "k4/rng.hpp"

namespace k4 {

struct SyntheticCorpusSpec {
  std::size_t lines = 200'000;
  double anomaly_rate = 0.01;
  std::size_t burst_min = 40;
  std::size_t burst_max = 120;
  // Zipf exponent of normal template frequencies; rarer templates make normal
  // windows vary in composition.
  double zipf_exponent = 1.0;
  std::uint64_t seed = 0;
};

inline const std::vector<std::string>& synthetic_normal_templates() {
  static const std::vector<std::string> t{
      "Receiving block blk_{} src /10.{}.{}.{}:{} dest /10.{}.{}.{}:{}",
      "PacketResponder {} for block blk_{} terminating",
      "Received block blk_{} of size {} from /10.{}.{}.{}",
      "BLOCK* NameSystem.addStoredBlock: blockMap updated: 10.{}.{}.{}:{} is added to blk_{} size {}",
      "Verification succeeded for blk_{}",
      "Deleting block blk_{} file /mnt/hadoop/dfs/data/current/subdir/{}/blk_{}",
      "BLOCK* NameSystem.allocateBlock: /user/root/rand/_temporary/_task_{}_{}_m_{}_{}/part-{}. blk_{}",
      "session opened for user admin {} by uid {}",
      "session closed for user admin {}",
      "connection accepted from 192.168.{}.{} port {}",
      "scheduler heartbeat ok node {} load {}",
      "cache flush completed in {} ms entries {}",
      "job {} submitted to queue default priority {}",
      "job {} finished status success runtime {} s",
      "disk usage on volume {} at {} percent",
      "rotating log segment {} size {} kb",
      "replica sync started for shard {} peers {}",
      "garbage collection pause {} ms heap {} mb",
      "config reload requested by operator {}",
      "checkpoint written to storage tier {} sequence {}",
  };
  return t;
}

inline const std::vector<std::string>& synthetic_anomaly_templates() {
  static const std::vector<std::string> t{
      "replica sync failed for shard {} peers unreachable fatal",
      "checkpoint write error on storage tier {} sequence {} corrupted",
      "config reload aborted by operator {} exception in scheduler",
      "garbage collection overflow heap {} mb fatal error",
      "disk failure on volume {} error code {} block blk_{} lost",
  };
  return t;
}

namespace detail {

inline std::string fill_template(const std::string& tpl, Rng& rng) {
  std::string out;
  out.reserve(tpl.size() + 32);
  for (std::size_t i = 0; i < tpl.size(); ++i) {
    if (tpl[i] == '{' && i + 1 < tpl.size() && tpl[i + 1] == '}') {
      out += std::to_string(rng.below(100000));
      ++i;
    } else {
      out += tpl[i];
    }
  }
  return out;
}

}  // namespace detail

// Returns the corpus text, one "label message" line per line.
inline std::string generate_synthetic_corpus(const SyntheticCorpusSpec& spec, std::size_t* anomalous_lines = nullptr) {
  if (spec.burst_min < 1 || spec.burst_max < spec.burst_min) throw InvalidInput("bad burst length range");
  if (!(spec.anomaly_rate >= 0.0 && spec.anomaly_rate < 1.0)) throw InvalidInput("anomaly_rate must lie in [0, 1)");
  Rng rng(spec.seed);
  const auto& normal = synthetic_normal_templates();
  const auto& anomaly = synthetic_anomaly_templates();

  // Burst placement: split the anomaly budget into bursts, then scatter them
  // over the stream without overlap.
  const auto budget = static_cast<std::size_t>(std::llround(spec.anomaly_rate * static_cast<double>(spec.lines)));
  std::vector<std::size_t> bursts;
  for (std::size_t left = budget; left > 0;) {
    std::size_t b = spec.burst_min + rng.below(spec.burst_max - spec.burst_min + 1);
    b = std::min(b, left);
    bursts.push_back(b);
    left -= b;
  }
  const std::size_t free_lines = spec.lines - budget;
  std::vector<std::size_t> cuts(bursts.size());
  for (auto& c : cuts) c = rng.below(free_lines + 1);
  std::sort(cuts.begin(), cuts.end());
  std::vector<int> burst_template(bursts.size());
  for (auto& t : burst_template) t = static_cast<int>(rng.below(anomaly.size()));

  std::vector<double> cdf(normal.size());
  double acc = 0.0;
  for (std::size_t i = 0; i < normal.size(); ++i) {
    acc += 1.0 / std::pow(static_cast<double>(i + 1), spec.zipf_exponent);
    cdf[i] = acc;
  }
  for (auto& v : cdf) v /= acc;

  std::string out;
  out.reserve(spec.lines * 64);
  std::size_t normal_written = 0, next_burst = 0, n_anomalous = 0;
  auto emit_normal = [&] {
    const double u = rng.uniform();
    const auto t = static_cast<std::size_t>(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    out += "0 ";
    out += detail::fill_template(normal[std::min(t, normal.size() - 1)], rng);
    out += '\n';
    ++normal_written;
  };
  while (normal_written < free_lines || next_burst < bursts.size()) {
    if (next_burst < bursts.size() && cuts[next_burst] == normal_written) {
      for (std::size_t i = 0; i < bursts[next_burst]; ++i) {
        out += "1 ";
        out += detail::fill_template(anomaly[static_cast<std::size_t>(burst_template[next_burst])], rng);
        out += '\n';
        ++n_anomalous;
      }
      ++next_burst;
      continue;
    }
    emit_normal();
  }
  if (anomalous_lines) *anomalous_lines = n_anomalous;
  return out;
}

inline void write_synthetic_corpus(const std::filesystem::path& path, const SyntheticCorpusSpec& spec) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << generate_synthetic_corpus(spec);
  if (!f) throw IoError("write failed for " + path.string());
}

}  // namespace k4
