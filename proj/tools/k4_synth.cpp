// k4-synth — writes a labelled synthetic log corpus in the generic "0 |1 " format.

#include <iostream>

#include <CLI11.hpp>

#include "k4/synthetic.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate a synthetic labelled log corpus"};
  k4::SyntheticCorpusSpec spec;
  std::string out;
  app.add_option("--out", out, "Output file")->required();
  app.add_option("--lines", spec.lines, "Total lines")->capture_default_str();
  app.add_option("--anomaly-rate", spec.anomaly_rate, "Fraction of anomalous lines")->capture_default_str();
  app.add_option("--burst-min", spec.burst_min, "Shortest anomaly burst")->capture_default_str();
  app.add_option("--burst-max", spec.burst_max, "Longest anomaly burst")->capture_default_str();
  app.add_option("--zipf", spec.zipf_exponent, "Zipf exponent of normal template frequencies")->capture_default_str();
  app.add_option("--seed", spec.seed, "Generator seed")->capture_default_str();
  CLI11_PARSE(app, argc, argv);
  try {
    k4::write_synthetic_corpus(out, spec);
  } catch (const std::exception& e) {
    std::cerr << "k4-synth: error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
