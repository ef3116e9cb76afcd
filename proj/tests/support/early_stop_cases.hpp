#pragma once

#include <cstddef>
#include <vector>

namespace sensor::testing {

struct EarlyStopCase {
  std::vector<double> val_loss;
  std::size_t stopped_epoch;
  std::size_t best_epoch;
};

// Patience 3; an epoch improves only on a strictly lower loss.
inline const std::vector<EarlyStopCase>& early_stop_cases() {
  static const std::vector<EarlyStopCase> cases{
      {{1.0, 0.9, 0.95, 0.96, 0.97}, 5, 2},
      {{1.0, 0.9, 0.8, 0.7, 0.6, 0.5}, 6, 6},
      {{0.5, 0.5, 0.5, 0.5}, 4, 1},
      {{0.5, 0.5, 0.4, 0.4, 0.4, 0.4}, 6, 3},
      {{1.0, 1.1, 1.2, 1.3, 0.1}, 4, 1},
      {{1.0, 1.1, 1.2, 0.9, 1.0, 1.0, 1.0}, 7, 4},
      {{2.0}, 1, 1},
      {{2.0, 1.0}, 2, 2},
      {{0.3, 0.2, 0.2, 0.2, 0.2, 0.1}, 5, 2},
      {{0.9, 0.8, 0.8, 0.7, 0.7, 0.7, 0.7}, 7, 4},
      {{1.0, 0.99999, 0.99999, 0.99999, 0.99998}, 5, 5},
      {{3.0, 2.0, 1.0, 1.5, 0.5, 0.6, 0.7, 0.8, 0.1}, 8, 5},
      {{1.0, 2.0, 1.0, 2.0, 1.0}, 4, 1},
      {{0.7, 0.6, 0.65, 0.6, 0.6, 0.55, 0.56, 0.57, 0.58, 0.2}, 5, 2},
      {{5.0, 4.0, 4.0, 3.0, 3.5, 3.5, 2.0, 2.5}, 8, 7},
      {{1.0, 0.9, 0.95, 0.9, 0.96, 0.89, 0.9, 0.9, 0.9}, 5, 2},
      {{0.5, 0.5, 0.6, 0.5, 0.5, 0.7, 0.5, 0.4, 0.5}, 4, 1},
      {{0.4, 0.5, 0.5, 0.6, 0.6, 0.7, 0.5}, 4, 1},
      {{0.5, 0.5, 0.7, 0.6, 0.9, 0.7, 0.6, 0.6, 0.9}, 4, 1},
      {{0.7, 0.4, 0.7, 0.5, 0.8, 0.6, 0.8, 0.7, 0.5, 0.6, 0.5}, 5, 2},
  };
  return cases;
}

}  // namespace sensor::testing
