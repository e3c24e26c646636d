#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace cadp {

enum class Precision { kDouble, kFloat };

struct OracleCase {
  std::string name;
  std::string group;  // "op" or "objective"
  double max_relative_error = 0;
  double tolerance = 0;
  bool pass = false;
  std::string detail;  // failure reason beyond the error bound, if any
};

struct OracleSuiteReport {
  Precision precision = Precision::kDouble;
  std::vector<OracleCase> cases;
  bool pass = false;
};

/// Finite-difference checks of every graph operation and every composite
/// objective on a small two-input MLP (no stochastic layers).
///
/// Double runs compare double gradients against double central differences
/// with tolerance 1e-6. Float runs compare float gradients against double
/// central differences of the same function at the same (float-representable)
/// values with tolerance 1e-3. Composite objectives are checked against
/// value-level reimplementations in which stop-gradient quantities (clean
/// predictions, teacher, discriminator for the encoder side) are held fixed.
OracleSuiteReport run_gradient_oracle_suite(Precision precision, std::uint64_t seed = 0);

/// Names of the cases in suite order.
std::vector<std::string> oracle_case_names();

}  // namespace cadp
