#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace kvec {

struct GradCheckRow {
  std::string check;      // layer or loss under test
  std::string parameter;
  double max_rel_error = 0.0;
  double analytic = 0.0;  // at the worst entry
  double numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<GradCheckRow> rows;
  double step = 1e-5;
  double tolerance = 1e-4;

  bool passed() const;
  double max_rel_error() const;
};

struct GradCheckOptions {
  double step = 1e-5;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
};

/// Central-difference checks of every gradient path used in training on
/// a tiny model in 64-bit: embeddings, attention projections, FFN, fusion
/// gates, policy, classifier, baseline, and the l1/l2/l3 losses end to end.
GradCheckReport run_gradcheck(const GradCheckOptions& options = {});

void write_gradcheck_table(std::ostream& out, const GradCheckReport& report);

}  // namespace kvec
