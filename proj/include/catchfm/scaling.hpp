#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "catchfm/common.hpp"

namespace catchfm::scaling {

struct IsoFlopPoint {
  double flops = 0.0;   // C
  double params = 0.0;  // N
  double tokens = 0.0;  // D
  double val_loss = 0.0;
};

struct PowerLawFit {
  double coefficient = 0.0;  // a in Y = a * C^b
  double exponent = 0.0;     // b
  double residual_rms = 0.0;  // in log-log space

  double eval(double c) const;
};

struct IsoFlopMinimum {
  double n_opt = 0.0;
  double loss_min = 0.0;
  double curvature = 0.0;  // alpha of the quadratic in log N
};

// Least-squares parabola L = alpha (log N - log N_opt)^2 + L_min over points
// sharing one compute budget. Errors on fewer than 3 distinct sizes, on
// non-convex fits, and on a vertex outside the sampled range ("no interior
// minimum").
IsoFlopMinimum fit_isoflop_minimum(const std::vector<IsoFlopPoint>& points);

// OLS on (log C, log Y); the exponent is the slope.
PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& pairs);

struct BudgetPlan {
  double params = 0.0;
  double tokens = 0.0;
  int64_t steps = 0;  // at batch 64 x sequence length 2048
};

BudgetPlan plan_budget(double flops, const PowerLawFit& fit_n, const PowerLawFit& fit_d);

// points.csv columns: flops, params, tokens, val_loss
std::vector<IsoFlopPoint> read_points_csv(const std::string& path);
void write_points_csv(const std::vector<IsoFlopPoint>& points, const std::string& path);

struct ScalingFit {
  PowerLawFit n_opt;  // N_opt(C)
  PowerLawFit d_opt;  // D_opt(C)
  std::vector<std::pair<double, IsoFlopMinimum>> minima;  // per budget
};

// group points by budget, locate each parabola minimum, fit both power laws
ScalingFit fit_scaling_laws(const std::vector<IsoFlopPoint>& points);

std::string fit_to_json(const ScalingFit& fit);

}  // namespace catchfm::scaling
