#pragma once

// Independent reference computations shared by the unit tests and the acceptance run.

#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "autoirt/irt.hpp"
#include "autoirt/posterior.hpp"

namespace oracle {

struct Answer {
  autoirt::ItemParams params;
  int grade;
};

inline long double logistic3(long double theta, const autoirt::ItemParams& p) {
  const long double z = static_cast<long double>(p.a) * (theta - static_cast<long double>(p.d));
  return static_cast<long double>(p.c) + (1.0L - static_cast<long double>(p.c)) / (1.0L + std::exp(-z));
}

/// Likelihood times Normal(mean, sd) density in linear space, long double.
inline long double unnormalized(long double theta, const std::vector<Answer>& answers, double mean, double sd) {
  const long double z = (theta - mean) / sd;
  long double v = std::exp(-0.5L * z * z);
  for (const auto& a : answers) {
    const long double p = logistic3(theta, a.params);
    v *= a.grade ? p : 1.0L - p;
  }
  return v;
}

struct Quadrature {
  std::vector<double> points;
  std::vector<double> density;  // normalized posterior density
  double mean = 0.0;
};

/// Trapezoid quadrature of the posterior on [lo, hi] with the given step.
inline Quadrature posterior(const std::vector<Answer>& answers, double lo, double hi, double step, double mean,
                            double sd) {
  Quadrature q;
  const int n = static_cast<int>(std::lround((hi - lo) / step));
  std::vector<long double> f(static_cast<std::size_t>(n + 1));
  long double z = 0.0L, m = 0.0L;
  for (int k = 0; k <= n; ++k) {
    const long double t = lo + static_cast<long double>(k) * step;
    f[static_cast<std::size_t>(k)] = unnormalized(t, answers, mean, sd);
    const long double w = (k == 0 || k == n) ? 0.5L : 1.0L;
    z += w * f[static_cast<std::size_t>(k)];
    m += w * f[static_cast<std::size_t>(k)] * t;
  }
  for (int k = 0; k <= n; ++k) {
    q.points.push_back(static_cast<double>(lo + static_cast<long double>(k) * step));
    q.density.push_back(static_cast<double>(f[static_cast<std::size_t>(k)] / (z * step)));
  }
  q.mean = static_cast<double>(m / z);
  return q;
}

struct PosteriorCheck {
  double max_density_error = 0.0;
  double max_mean_error = 0.0;
};

/// Grid posterior (as mass per unit ability) and posterior mean against quadrature at ten times
/// the resolution, over random 10-item sessions.
inline PosteriorCheck grid_vs_quadrature(int sessions, std::uint64_t seed) {
  using namespace autoirt;
  const auto grid = make_grid(-4.0, 4.0, 0.1, PriorSpec::normal(0.0, 1.0));
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  PosteriorCheck out;
  for (int s = 0; s < sessions; ++s) {
    const double theta = normal(rng);
    ItemBank bank;
    std::vector<ItemResponse> responses;
    std::vector<Answer> answers;
    for (int i = 0; i < 10; ++i) {
      const ItemParams p{0.3 + 2.2 * u(rng), 0.3 * u(rng), -2.5 + 5.0 * u(rng)};
      const int g = u(rng) < irf(theta, p) ? 1 : 0;
      const std::string id = "q" + std::to_string(i);
      bank.emplace(id, p);
      responses.push_back({id, Grade(g)});
      answers.push_back({p, g});
    }
    const auto post = compute_posterior(responses, bank, grid);
    const auto q = posterior(answers, -4.0, 4.0, 0.01, 0.0, 1.0);
    for (std::size_t k = 0; k < grid->size(); ++k) {
      const double fine = q.density[k * 10];
      out.max_density_error = std::max(out.max_density_error, std::abs(post.weights[k] / grid->step() - fine));
    }
    out.max_mean_error = std::max(out.max_mean_error, std::abs(posterior_mean(post) - q.mean));
  }
  return out;
}

}  // namespace oracle
