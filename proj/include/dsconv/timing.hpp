#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace dsconv {

struct TimingSummary {
  double median_ms = 0.0;
  double iqr_ms = 0.0;
  double mean_ms = 0.0;
  double min_ms = 0.0;
  std::size_t repetitions = 0;
  std::vector<double> samples_ms;
};

/// Runs `fn` `warmups` times untimed, then `repetitions` timed runs.
TimingSummary time_callable(const std::function<void()>& fn, std::size_t warmups, std::size_t repetitions);

double median(std::vector<double> v);
/// Interquartile range with linear interpolation between order statistics.
double iqr(std::vector<double> v);
double quantile(std::vector<double> v, double q);

/// Spearman rank correlation (average ranks for ties).
double spearman(std::span<const double> x, std::span<const double> y);

}  // namespace dsconv
