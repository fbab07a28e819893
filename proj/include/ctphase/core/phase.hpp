#pragma once

#include <array>
#include <string>
#include <string_view>

#include "ctphase/common/errors.hpp"

namespace ctphase {

// Contrast phase of a CT acquisition: non-contrast, arterial, venous, delay.
enum class Phase : int { N = 0, A = 1, V = 2, D = 3 };

inline constexpr std::array<Phase, 4> kAllPhases = {Phase::N, Phase::A,
                                                    Phase::V, Phase::D};
inline constexpr int kNumPhases = 4;

inline char phase_to_char(Phase p) {
  switch (p) {
    case Phase::N: return 'N';
    case Phase::A: return 'A';
    case Phase::V: return 'V';
    case Phase::D: return 'D';
  }
  throw LookupError("invalid phase enum value");
}

inline std::string phase_to_string(Phase p) { return std::string(1, phase_to_char(p)); }

inline Phase phase_from_char(char c) {
  switch (c) {
    case 'N': return Phase::N;
    case 'A': return Phase::A;
    case 'V': return Phase::V;
    case 'D': return Phase::D;
  }
  throw FormatError(std::string("unknown phase '") + c + "' (expected N, A, V, or D)");
}

inline Phase phase_from_string(std::string_view s) {
  if (s.size() != 1) {
    throw FormatError("phase must be a single character, got \"" + std::string(s) + "\"");
  }
  return phase_from_char(s[0]);
}

}  // namespace ctphase
