#include "itermix/hho.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include "itermix/manifest.hpp"

namespace itermix::hho {

void Config::validate() const {
  if (population < 2) throw ConfigError("hho: population must be at least 2");
  if (max_iters < 1) throw ConfigError("hho: max_iters must be at least 1");
  if (!(lower < upper)) throw ConfigError("hho: lower bound must be below upper bound");
  if (fitness_epochs < 1) throw ConfigError("hho: fitness_epochs must be at least 1");
}

const char* branch_name(Branch b) {
  switch (b) {
    case Branch::kExploreRand: return "explore-rand";
    case Branch::kExploreMean: return "explore-mean";
    case Branch::kSoft: return "soft";
    case Branch::kHard: return "hard";
    case Branch::kSoftDive: return "soft-dive";
    case Branch::kHardDive: return "hard-dive";
  }
  return "?";
}

double clamp(double p, double lower, double upper) {
  return std::min(upper, std::max(lower, p));
}

double escape_energy(double e0, int t, int t_max) {
  return 2.0 * e0 * (1.0 - static_cast<double>(t) / static_cast<double>(t_max));
}

double explore_step(double p_i, double p_rand, double p_rabbit, double p_mean, double q,
                    double r1, double r2, double r3, double r4, double lower, double upper) {
  double next;
  if (q >= 0.5)
    next = p_rand - r1 * std::abs(p_rand - 2.0 * r2 * p_i);
  else
    next = (p_rabbit - p_mean) - r3 * (lower + r4 * (upper - lower));
  return clamp(next, lower, upper);
}

double soft_besiege(double p_i, double p_rabbit, double energy, double r5, double lower,
                    double upper) {
  const double jump = 2.0 * (1.0 - r5);
  return clamp(p_rabbit - energy * std::abs(jump * p_rabbit - p_i), lower, upper);
}

double hard_besiege(double p_i, double p_rabbit, double energy, double lower, double upper) {
  return clamp(p_rabbit - energy * std::abs(p_rabbit - p_i), lower, upper);
}

double soft_dive_candidate(double p_i, double p_rabbit, double energy, double r5) {
  const double jump = 2.0 * (1.0 - r5);
  return p_rabbit - energy * std::abs(jump * p_rabbit - p_i);
}

double hard_dive_candidate(double p_rabbit, double p_mean, double energy) {
  return p_rabbit - energy * std::abs(p_rabbit - p_mean);
}

double dive_resolve(double candidate, double f_candidate, double f_current, Rng& rng,
                    double lower, double upper) {
  if (f_candidate < f_current) return candidate;  // strict improvement, no draws
  const double r6 = rng.uniform();
  return clamp(candidate + r6 * levy_step(rng), lower, upper);
}

double levy_step(Rng& rng) {
  constexpr double beta = 1.5;
  // Mantegna's sigma_u for beta = 1.5, evaluated once
  static const double sigma_u = [] {
    const double num = std::tgamma(1.0 + beta) * std::sin(std::numbers::pi * beta / 2.0);
    const double den =
        std::tgamma((1.0 + beta) / 2.0) * beta * std::pow(2.0, (beta - 1.0) / 2.0);
    return std::pow(num / den, 1.0 / beta);
  }();
  const double u = rng.normal() * sigma_u;
  const double v = rng.normal();
  return 0.01 * u / std::pow(std::abs(v), 1.0 / beta);
}

namespace {

class CachedFitness {
 public:
  CachedFitness(const FitnessFn& fn, std::vector<TraceRow>* rows, std::ofstream* stream)
      : fn_(fn), rows_(rows), stream_(stream) {}

  double eval(double rate, int iteration, int hawk, const char* branch, bool trace) {
    const long long key = std::llround(rate * 1e12);
    double fitness;
    auto it = cache_.find(key);
    if (it != cache_.end()) {
      fitness = it->second;
    } else {
      try {
        fitness = fn_(rate);
      } catch (const std::exception& e) {
        throw TuningError("fitness evaluation failed for hawk " + std::to_string(hawk) +
                          " at rate " + format_double(rate) + ": " + e.what());
      }
      cache_.emplace(key, fitness);
    }
    if (trace) {
      rows_->push_back({iteration, hawk, rate, fitness, branch});
      if (stream_ && stream_->is_open()) {
        (*stream_) << iteration << ' ' << hawk << ' ' << format_double(rate) << ' '
                   << format_double(fitness) << ' ' << branch << '\n';
        stream_->flush();
      }
    }
    return fitness;
  }

 private:
  const FitnessFn& fn_;
  std::map<long long, double> cache_;
  std::vector<TraceRow>* rows_;
  std::ofstream* stream_;
};

}  // namespace

Result run(const FitnessFn& fitness, const Config& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  Result res;
  std::ofstream stream;
  if (!cfg.trace_path.empty()) {
    stream.open(cfg.trace_path);
    if (!stream) throw ConfigError("hho: cannot open trace file " + cfg.trace_path);
  }
  CachedFitness cache(fitness, &res.rows, &stream);

  const int h = cfg.population;
  std::vector<double> pos(h), fit(h);
  for (int i = 0; i < h; ++i) pos[i] = rng.uniform(cfg.lower, cfg.upper);
  for (int i = 0; i < h; ++i) fit[i] = cache.eval(pos[i], 0, i, "init", true);

  int best = static_cast<int>(std::min_element(fit.begin(), fit.end()) - fit.begin());
  double rabbit_pos = pos[best], rabbit_fit = fit[best];
  res.best_trace.push_back(rabbit_fit);

  for (int t = 0; t < cfg.max_iters; ++t) {
    // the sweep reads the population as it stood when the sweep began
    const std::vector<double> snap = pos;
    double mean = 0.0;
    for (double p : snap) mean += p;
    mean /= h;

    for (int i = 0; i < h; ++i) {
      const double e0 = rng.uniform(-1.0, 1.0);
      const double energy = escape_energy(e0, t, cfg.max_iters);
      double next;
      Branch branch;
      if (std::abs(energy) >= 1.0) {
        const double q = rng.uniform();
        const double p_rand = snap[rng.index(h)];
        const double r1 = rng.uniform(), r2 = rng.uniform();
        const double r3 = rng.uniform(), r4 = rng.uniform();
        next = explore_step(snap[i], p_rand, rabbit_pos, mean, q, r1, r2, r3, r4, cfg.lower,
                            cfg.upper);
        branch = q >= 0.5 ? Branch::kExploreRand : Branch::kExploreMean;
      } else {
        const double r = rng.uniform();
        if (r >= 0.5 && std::abs(energy) >= 0.5) {
          next = soft_besiege(snap[i], rabbit_pos, energy, rng.uniform(), cfg.lower, cfg.upper);
          branch = Branch::kSoft;
        } else if (r >= 0.5) {
          next = hard_besiege(snap[i], rabbit_pos, energy, cfg.lower, cfg.upper);
          branch = Branch::kHard;
        } else if (std::abs(energy) >= 0.5) {
          const double cand = clamp(soft_dive_candidate(snap[i], rabbit_pos, energy,
                                                        rng.uniform()),
                                    cfg.lower, cfg.upper);
          const double f_cand = cache.eval(cand, t + 1, i, "soft-dive", false);
          next = dive_resolve(cand, f_cand, fit[i], rng, cfg.lower, cfg.upper);
          branch = Branch::kSoftDive;
        } else {
          const double cand = clamp(hard_dive_candidate(rabbit_pos, mean, energy), cfg.lower,
                                    cfg.upper);
          const double f_cand = cache.eval(cand, t + 1, i, "hard-dive", false);
          next = dive_resolve(cand, f_cand, fit[i], rng, cfg.lower, cfg.upper);
          branch = Branch::kHardDive;
        }
      }
      next = clamp(next, cfg.lower, cfg.upper);
      fit[i] = cache.eval(next, t + 1, i, branch_name(branch), true);
      pos[i] = next;
      ++res.branch_counts[static_cast<int>(branch)];
    }

    best = static_cast<int>(std::min_element(fit.begin(), fit.end()) - fit.begin());
    if (fit[best] < rabbit_fit) {
      rabbit_fit = fit[best];
      rabbit_pos = pos[best];
    }
    res.best_trace.push_back(rabbit_fit);
  }

  res.best_rate = rabbit_pos;
  res.best_fitness = rabbit_fit;
  return res;
}

}  // namespace itermix::hho
