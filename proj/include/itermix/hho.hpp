#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "itermix/errors.hpp"
#include "itermix/rng.hpp"

namespace itermix::hho {

// Harris Hawks Optimization of a scalar in [lower, upper]; here the scalar
// is the dropout rate and fitness is validation MSE after a short training
// run at that rate.
struct Config {
  int population = 10;  // hawks
  int max_iters = 20;   // sweeps after the initial evaluation
  double lower = 0.0;
  double upper = 0.5;
  int fitness_epochs = 10;
  std::uint64_t seed = 0;
  std::string trace_path;  // when set, rows are streamed out as they happen

  void validate() const;
};

// Must be pure: the same rate always yields the same fitness within a run.
using FitnessFn = std::function<double(double)>;

struct TraceRow {
  int iteration;  // 0 is the initial population
  int hawk;
  double rate;
  double fitness;
  std::string branch;
};

enum class Branch { kExploreRand, kExploreMean, kSoft, kHard, kSoftDive, kHardDive };
inline constexpr int kBranchCount = 6;
const char* branch_name(Branch b);

struct Result {
  double best_rate = 0.0;
  double best_fitness = 0.0;
  std::vector<double> best_trace;  // rabbit fitness after init and after each sweep
  std::vector<TraceRow> rows;      // one row per hawk per evaluation sweep
  std::array<long, kBranchCount> branch_counts{};
};

double clamp(double p, double lower, double upper);

// Escape energy E = 2*E0*(1 - t/t_max) with E0 ~ U(-1,1); |E| >= 1 explores,
// |E| < 1 exploits, and the 0.5 threshold picks soft vs hard maneuvers.
double escape_energy(double e0, int t, int t_max);

// Update rules in pure form: every random draw is a parameter, so tests can
// evaluate the equations point-wise. Results are clamped to the bounds
// where the rule prescribes it.
double explore_step(double p_i, double p_rand, double p_rabbit, double p_mean, double q,
                    double r1, double r2, double r3, double r4, double lower, double upper);
double soft_besiege(double p_i, double p_rabbit, double energy, double r5, double lower = 0.0,
                    double upper = 0.5);
double hard_besiege(double p_i, double p_rabbit, double energy, double lower = 0.0,
                    double upper = 0.5);

// Raw dive candidates (unclamped): soft reuses the soft-besiege form,
// hard pulls toward the rabbit against the population mean.
double soft_dive_candidate(double p_i, double p_rabbit, double energy, double r5);
double hard_dive_candidate(double p_rabbit, double p_mean, double energy);

// Second stage of a dive: keep the candidate when it strictly improves on
// the hawk's current fitness, otherwise take a Levy-perturbed jump. The
// improving path consumes no random draws.
double dive_resolve(double candidate, double f_candidate, double f_current, Rng& rng,
                    double lower, double upper);

// Mantegna's Levy flight, beta = 1.5, step scale 0.01.
double levy_step(Rng& rng);

// Full optimization per the four-branch dispatch on (|E|, r). The rabbit is
// updated once per sweep to the best position evaluated so far; dive
// branches read the sweep-start rabbit. Fitness values are cached on the
// rate quantized to 1e-12, so no rate is ever trained twice.
Result run(const FitnessFn& fitness, const Config& cfg);

}  // namespace itermix::hho
