#include "catchfm/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include <Eigen/Dense>

#include <json.hpp>

namespace catchfm::scaling {

using nlohmann::ordered_json;

double PowerLawFit::eval(double c) const {
  if (!(c > 0)) fail("power law evaluated at nonpositive value ", c);
  return coefficient * std::pow(c, exponent);
}

IsoFlopMinimum fit_isoflop_minimum(const std::vector<IsoFlopPoint>& points) {
  std::set<double> distinct;
  for (const auto& p : points) {
    if (!(p.params > 0) || !(p.val_loss > 0)) fail("isoflop points must be positive");
    distinct.insert(p.params);
  }
  if (distinct.size() < 3)
    fail("isoflop fit needs at least 3 distinct model sizes, got ", distinct.size());

  // normal equations for L = a x^2 + b x + c with x = log N
  Eigen::Matrix3d ata = Eigen::Matrix3d::Zero();
  Eigen::Vector3d atb = Eigen::Vector3d::Zero();
  double x_min = 0, x_max = 0;
  bool first = true;
  for (const auto& p : points) {
    double x = std::log(p.params);
    Eigen::Vector3d row(x * x, x, 1.0);
    ata += row * row.transpose();
    atb += row * p.val_loss;
    x_min = first ? x : std::min(x_min, x);
    x_max = first ? x : std::max(x_max, x);
    first = false;
  }
  Eigen::Vector3d coef = ata.ldlt().solve(atb);
  double a = coef(0), b = coef(1), c = coef(2);
  if (!(a > 0)) fail("no interior minimum: isoflop curve is not convex in log N");
  double x_opt = -b / (2.0 * a);
  if (x_opt <= x_min || x_opt >= x_max)
    fail("no interior minimum: vertex exp(", x_opt, ") lies outside the sampled sizes");
  IsoFlopMinimum m;
  m.n_opt = std::exp(x_opt);
  m.loss_min = c - b * b / (4.0 * a);
  m.curvature = a;
  return m;
}

PowerLawFit fit_power_law(const std::vector<std::pair<double, double>>& pairs) {
  std::set<double> distinct;
  for (const auto& [c, y] : pairs) {
    if (!(c > 0) || !(y > 0)) fail("power-law fit requires positive values");
    distinct.insert(c);
  }
  if (distinct.size() < 2)
    fail("power-law fit needs at least 2 distinct budgets, got ", distinct.size());

  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double n = double(pairs.size());
  for (const auto& [c, y] : pairs) {
    double x = std::log(c), v = std::log(y);
    sx += x;
    sy += v;
    sxx += x * x;
    sxy += x * v;
  }
  PowerLawFit fit;
  fit.exponent = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  double intercept = (sy - fit.exponent * sx) / n;
  fit.coefficient = std::exp(intercept);
  double ss = 0;
  for (const auto& [c, y] : pairs) {
    double r = std::log(y) - (intercept + fit.exponent * std::log(c));
    ss += r * r;
  }
  fit.residual_rms = std::sqrt(ss / n);
  return fit;
}

BudgetPlan plan_budget(double flops, const PowerLawFit& fit_n, const PowerLawFit& fit_d) {
  if (!(flops > 0)) fail("compute budget must be positive, got ", flops);
  BudgetPlan plan;
  plan.params = fit_n.eval(flops);
  plan.tokens = fit_d.eval(flops);
  const double tokens_per_step = 64.0 * 2048.0;
  plan.steps = int64_t(std::ceil(plan.tokens / tokens_per_step));
  return plan;
}

std::vector<IsoFlopPoint> read_points_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  std::vector<IsoFlopPoint> points;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::string t = trim(line);
    if (t.empty()) continue;
    if (n == 1 && t.rfind("flops", 0) == 0) continue;
    auto parts = split(t, ',');
    if (parts.size() != 4) fail(path, " line ", n, ": expected flops,params,tokens,val_loss");
    points.push_back({std::stod(parts[0]), std::stod(parts[1]), std::stod(parts[2]),
                      std::stod(parts[3])});
  }
  return points;
}

void write_points_csv(const std::vector<IsoFlopPoint>& points, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open ", path, " for writing");
  out << "flops,params,tokens,val_loss\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%.9g,%.9g,%.9g,%.9g\n", p.flops, p.params, p.tokens,
                  p.val_loss);
    out << buf;
  }
}

ScalingFit fit_scaling_laws(const std::vector<IsoFlopPoint>& points) {
  std::map<double, std::vector<IsoFlopPoint>> by_budget;
  for (const auto& p : points) by_budget[p.flops].push_back(p);
  if (by_budget.size() < 2) fail("scaling fit needs at least 2 compute budgets");

  ScalingFit fit;
  std::vector<std::pair<double, double>> n_pairs, d_pairs;
  for (const auto& [c, group] : by_budget) {
    IsoFlopMinimum m = fit_isoflop_minimum(group);
    fit.minima.emplace_back(c, m);
    n_pairs.emplace_back(c, m.n_opt);
    d_pairs.emplace_back(c, c / (6.0 * m.n_opt));  // D = C / 6N under our convention
  }
  fit.n_opt = fit_power_law(n_pairs);
  fit.d_opt = fit_power_law(d_pairs);
  return fit;
}

std::string fit_to_json(const ScalingFit& fit) {
  ordered_json j;
  j["n_opt"] = {{"coefficient", fit.n_opt.coefficient},
                {"exponent", fit.n_opt.exponent},
                {"residual_rms", fit.n_opt.residual_rms}};
  j["d_opt"] = {{"coefficient", fit.d_opt.coefficient},
                {"exponent", fit.d_opt.exponent},
                {"residual_rms", fit.d_opt.residual_rms}};
  j["minima"] = ordered_json::array();
  for (const auto& [c, m] : fit.minima)
    j["minima"].push_back({{"flops", c},
                           {"n_opt", m.n_opt},
                           {"loss_min", m.loss_min},
                           {"curvature", m.curvature}});
  return j.dump(2);
}

}  // namespace catchfm::scaling
