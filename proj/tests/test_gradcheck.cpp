#include <gtest/gtest.h>

#include <set>
#include <sstream>

#include "kvec/gradcheck.hpp"

namespace kvec {
namespace {

TEST(GradCheck, EveryGradientPathPasses) {
  const GradCheckReport report = run_gradcheck();
  std::set<std::string> checks;
  for (const auto& row : report.rows) {
    checks.insert(row.check);
    EXPECT_TRUE(row.passed) << row.check << " " << row.parameter << " " << row.max_rel_error;
  }
  for (const char* c : {"embeddings", "attention", "ffn", "fusion", "policy", "classifier", "baseline",
                        "loss l1", "loss l1+l2", "loss l1+l3", "loss total"})
    EXPECT_TRUE(checks.count(c)) << c;
  EXPECT_TRUE(report.passed());
  EXPECT_LE(report.max_rel_error(), 1e-4);

  std::ostringstream table;
  write_gradcheck_table(table, report);
  EXPECT_NE(table.str().find("fusion"), std::string::npos);
}

TEST(GradCheck, DetectsAnImpossibleTolerance) {
  GradCheckOptions o;
  o.tolerance = 0.0;
  EXPECT_FALSE(run_gradcheck(o).passed());
}

}  // namespace
}  // namespace kvec
