#pragma once

#include <optional>
#include <string>
#include <vector>

#include "catchfm/common.hpp"

namespace catchfm::metrics {

struct ScoredCohort {
  std::vector<double> scores;
  std::vector<int> labels;  // 0/1

  size_t size() const { return scores.size(); }
  size_t n_positive() const;
  size_t n_negative() const { return size() - n_positive(); }
  double prevalence() const;
  void check() const;          // equal lengths
  void check_two_class() const;  // at least one of each label
};

// Mann-Whitney pairwise concordance, ties counted 0.5
double auroc(const ScoredCohort& cohort);

// average precision (step interpolation over distinct thresholds)
double auprc(const ScoredCohort& cohort);

struct ThresholdRow {
  double threshold = 0.0;
  double fpr = 0.0;
  double tpr = 0.0;          // sensitivity
  double specificity = 0.0;  // 1 - fpr
  double precision = 0.0;
  std::optional<double> relative_risk;  // absent when nothing is flagged
  size_t flagged = 0;
};

// one row per distinct score, descending; "flagged" means score >= threshold
std::vector<ThresholdRow> threshold_sweep(const ScoredCohort& cohort);

// evaluate one fixed threshold (used to carry a validation threshold to test)
ThresholdRow apply_threshold(const ScoredCohort& cohort, double threshold);

// lowest threshold whose specificity still clears the floor
struct OperatingPoint {
  double threshold = 0.0;
  double sensitivity = 0.0;
  double specificity = 0.0;
};
OperatingPoint sensitivity_at_specificity(const ScoredCohort& cohort, double spec_floor = 0.99);

double relative_risk(double precision, double prevalence);

// flag exactly ceil(top_fraction * n) patients; ties broken by score then index
ThresholdRow operational_point(const ScoredCohort& cohort, double top_fraction = 0.001);

// macro-averaged F1 at a threshold
double f1_macro(const ScoredCohort& cohort, double threshold);

struct MetricReport {
  double auroc = 0.0;
  double auprc = 0.0;
  double prevalence = 0.0;
  size_t n = 0, n_positive = 0;
  OperatingPoint sens_at_spec;
  std::optional<ThresholdRow> operational;   // absent when n < 1/top_fraction
  std::vector<ThresholdRow> table;
};

MetricReport evaluate(const ScoredCohort& cohort, double spec_floor = 0.99,
                      double top_fraction = 0.001);

// seeded bootstrap confidence interval for a metric functional
struct BootstrapCI {
  double mean = 0.0, stddev = 0.0, lo = 0.0, hi = 0.0;  // lo/hi: 2.5/97.5 percentiles
};
template <typename Fn>
BootstrapCI bootstrap(const ScoredCohort& cohort, Fn&& metric, int resamples, uint64_t seed) {
  std::vector<double> vals;
  vals.reserve(size_t(resamples));
  Rng root = Rng(seed).sub("bootstrap");
  for (int r = 0; r < resamples; ++r) {
    Rng rng = root.sub(uint64_t(r));
    ScoredCohort sample;
    sample.scores.reserve(cohort.size());
    sample.labels.reserve(cohort.size());
    for (size_t i = 0; i < cohort.size(); ++i) {
      size_t j = size_t(rng.uniform_int(cohort.size()));
      sample.scores.push_back(cohort.scores[j]);
      sample.labels.push_back(cohort.labels[j]);
    }
    if (sample.n_positive() == 0 || sample.n_negative() == 0) continue;
    vals.push_back(metric(sample));
  }
  if (vals.empty()) fail("bootstrap produced no valid resamples");
  BootstrapCI ci;
  for (double v : vals) ci.mean += v;
  ci.mean /= double(vals.size());
  for (double v : vals) ci.stddev += (v - ci.mean) * (v - ci.mean);
  ci.stddev = std::sqrt(ci.stddev / double(vals.size()));
  std::vector<double> sorted = vals;
  std::sort(sorted.begin(), sorted.end());
  auto pct = [&](double q) { return sorted[size_t(q * double(sorted.size() - 1))]; };
  ci.lo = pct(0.025);
  ci.hi = pct(0.975);
  return ci;
}

// scores.csv: patient_id, score, label, split
struct ScoreRow {
  std::string patient_id;
  double score = 0.0;
  int label = 0;
  std::string split;
};
std::vector<ScoreRow> read_scores_csv(const std::string& path);
void write_scores_csv(const std::vector<ScoreRow>& rows, const std::string& path);
ScoredCohort cohort_for_split(const std::vector<ScoreRow>& rows, const std::string& split);

std::string report_to_json(const MetricReport& report);

}  // namespace catchfm::metrics
