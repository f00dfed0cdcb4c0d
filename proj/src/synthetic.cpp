#include "itermix/synthetic.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "itermix/manifest.hpp"
#include "itermix/rng.hpp"

namespace itermix {

RawSeries synthetic_sines(int steps, double noise_std, double coupling, std::uint64_t seed) {
  if (steps < 8) throw ConfigError("synthetic_sines: need at least 8 steps");
  constexpr double tau = 2.0 * std::numbers::pi;
  Rng rng(seed);
  RawSeries s;
  s.cols = 3;
  s.rows = steps;
  s.feature_names = {"c1", "c2", "c3"};
  s.values.resize(static_cast<std::size_t>(steps) * 3);
  auto at = [&](int r, int c) -> double& { return s.values[static_cast<std::size_t>(r) * 3 + c]; };
  auto relu = [](double v) { return v > 0.0 ? v : 0.0; };

  for (int t = 0; t < steps; ++t) {
    const double x1 = std::sin(tau * t / 24.0) + 0.4 * std::sin(tau * t / 61.0 + 1.0) +
                      noise_std * rng.normal();
    const double x2 = 0.8 * std::sin(tau * t / 24.0 + 0.7) + 0.5 * std::sin(tau * t / 37.0 + 2.1) +
                      noise_std * rng.normal();
    at(t, 0) = x1;
    at(t, 1) = x2;
    const double p1 = at(std::max(0, t - 1), 0);
    const double p2 = at(std::max(0, t - 2), 1);
    at(t, 2) = 0.6 * std::sin(tau * t / 46.0 + 0.3) + 0.3 * std::sin(tau * t / 24.0 + 2.9) +
               coupling * (relu(p1) - 0.8 * relu(-p2)) + noise_std * rng.normal();
  }
  return s;
}

void write_csv(const RawSeries& series, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write csv file: " + path);
  const bool dated = !series.timestamps.empty();
  if (dated) out << "date,";
  for (int j = 0; j < series.cols; ++j) {
    if (j) out << ',';
    out << series.feature_names[j];
  }
  out << '\n';
  for (int r = 0; r < series.rows; ++r) {
    if (dated) out << series.timestamps[r] << ',';
    for (int j = 0; j < series.cols; ++j) {
      if (j) out << ',';
      out << format_double(series.at(r, j));
    }
    out << '\n';
  }
}

}  // namespace itermix
