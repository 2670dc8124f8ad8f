// Copyright 2026 The lorafuse Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <exception>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "lorafuse/error.hpp"

namespace lorafuse {

template <class Report>
struct LambdaSweepRow {
  double lambda = 0.0;
  Report metrics;
};

inline void check_lambda_grid(std::span<const double> grid) {
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) {
      throw RangeError("lambda " + std::to_string(grid[i]) + " is outside [0, 1]");
    }
    if (i > 0 && !(grid[i] > grid[i - 1])) throw RangeError("lambda grid must be strictly increasing");
  }
}

/// Evaluates `evaluate(lambda, {1 - lambda, lambda})` for each grid point.
/// With jobs > 1 the points run on worker threads; rows always come back in
/// grid order and the first failure (in grid order) is rethrown.
template <class Evaluate>
auto sweep_lambda(std::span<const double> grid, Evaluate&& evaluate, unsigned jobs = 1) {
  using Report = std::invoke_result_t<Evaluate&, double, std::array<double, 2>>;
  check_lambda_grid(grid);

  std::vector<std::optional<Report>> results(grid.size());
  std::vector<std::exception_ptr> errors(grid.size());
  auto run_one = [&](std::size_t i) {
    try {
      results[i].emplace(evaluate(grid[i], std::array<double, 2>{1.0 - grid[i], grid[i]}));
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (jobs <= 1 || grid.size() <= 1) {
    for (std::size_t i = 0; i < grid.size(); ++i) run_one(i);
  } else {
    const std::size_t n_workers = std::min<std::size_t>(jobs, grid.size());
    std::vector<std::thread> workers;
    for (std::size_t w = 0; w < n_workers; ++w) {
      workers.emplace_back([&, w] {
        for (std::size_t i = w; i < grid.size(); i += n_workers) run_one(i);
      });
    }
    for (auto& t : workers) t.join();
  }

  std::vector<LambdaSweepRow<Report>> rows;
  rows.reserve(grid.size());
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (errors[i]) std::rethrow_exception(errors[i]);
    rows.push_back({grid[i], std::move(*results[i])});
  }
  return rows;
}

template <class Evaluate>
auto sweep_lambda(std::initializer_list<double> grid, Evaluate&& evaluate, unsigned jobs = 1) {
  return sweep_lambda(std::span<const double>(grid.begin(), grid.size()),
                      std::forward<Evaluate>(evaluate), jobs);
}

struct LambdaOptimum {
  double lambda = 0.0;
  double loss = 0.0;
  int evaluations = 0;
  double bracket_width = 0.0;
  bool converged = false;
};

inline constexpr int kLambdaGridPoints = 11;

/// Minimizes loss(lambda) over [0, 1]: an 11-point grid picks the best point
/// (ties go to the smaller lambda), then golden-section search refines the
/// bracket around it until its width is <= tol or the evaluation budget runs
/// out. The returned point is the best one evaluated.
inline LambdaOptimum optimize_lambda(const std::function<double(double)>& loss, double tol = 1e-4,
                                     int budget = 60) {
  if (!(tol > 0.0)) throw RangeError("tolerance must be positive");
  if (budget < 8) throw RangeError("evaluation budget must be at least 8");

  LambdaOptimum best{0.0, std::numeric_limits<double>::infinity(), 0, 1.0, false};
  auto eval = [&](double lambda) {
    const double value = loss(lambda);
    ++best.evaluations;
    if (std::isnan(value)) {
      throw OptimizationError("loss is NaN at lambda = " + std::to_string(lambda), lambda);
    }
    if (value < best.loss || (value == best.loss && lambda < best.lambda)) {
      best.lambda = lambda;
      best.loss = value;
    }
    return value;
  };

  const int grid_points = std::min(kLambdaGridPoints, budget);
  std::vector<double> grid_values;
  for (int i = 0; i < grid_points; ++i) grid_values.push_back(eval(static_cast<double>(i) / (grid_points - 1)));
  const auto arg = static_cast<int>(std::min_element(grid_values.begin(), grid_values.end()) - grid_values.begin());
  const double step = 1.0 / (grid_points - 1);
  double lo = std::max(0.0, (arg - 1) * step);
  double hi = std::min(1.0, (arg + 1) * step);

  const double inv_phi = (std::sqrt(5.0) - 1.0) / 2.0;
  if (hi - lo > tol && best.evaluations + 2 <= budget) {
    double x1 = hi - inv_phi * (hi - lo);
    double x2 = lo + inv_phi * (hi - lo);
    double f1 = eval(x1);
    double f2 = eval(x2);
    while (hi - lo > tol && best.evaluations < budget) {
      // Ties shrink toward the smaller lambda.
      if (f1 <= f2) {
        hi = x2;
        x2 = x1;
        f2 = f1;
        x1 = hi - inv_phi * (hi - lo);
        f1 = eval(x1);
      } else {
        lo = x1;
        x1 = x2;
        f1 = f2;
        x2 = lo + inv_phi * (hi - lo);
        f2 = eval(x2);
      }
    }
  }
  best.bracket_width = hi - lo;
  best.converged = best.bracket_width <= tol;
  return best;
}

}  // namespace lorafuse
