#include "catchfm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

namespace catchfm::metrics {

using nlohmann::ordered_json;

size_t ScoredCohort::n_positive() const {
  size_t n = 0;
  for (int l : labels) n += size_t(l != 0);
  return n;
}

double ScoredCohort::prevalence() const {
  return size() == 0 ? 0.0 : double(n_positive()) / double(size());
}

void ScoredCohort::check() const {
  if (scores.size() != labels.size())
    fail("scores/labels length mismatch: ", scores.size(), " vs ", labels.size());
  for (double s : scores)
    if (!std::isfinite(s)) fail("non-finite score");
  for (int l : labels)
    if (l != 0 && l != 1) fail("labels must be 0 or 1");
}

void ScoredCohort::check_two_class() const {
  check();
  size_t pos = n_positive();
  if (pos == 0 || pos == size()) fail("single-class input: ranking metrics are undefined");
}

// ---------------------------------------------------------------------------

double auroc(const ScoredCohort& cohort) {
  cohort.check_two_class();
  const size_t n = cohort.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return cohort.scores[a] < cohort.scores[b]; });

  // midranks over tie groups, then the Mann-Whitney U statistic
  double rank_sum_pos = 0.0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j < n && cohort.scores[order[j]] == cohort.scores[order[i]]) ++j;
    double midrank = 0.5 * double(i + j + 1);  // ranks are 1-based
    for (size_t k = i; k < j; ++k)
      if (cohort.labels[order[k]]) rank_sum_pos += midrank;
    i = j;
  }
  const double np = double(cohort.n_positive()), nn = double(cohort.n_negative());
  double u = rank_sum_pos - np * (np + 1.0) / 2.0;
  return u / (np * nn);
}

double auprc(const ScoredCohort& cohort) {
  cohort.check_two_class();
  const size_t n = cohort.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return cohort.scores[a] > cohort.scores[b]; });

  const double np = double(cohort.n_positive());
  double ap = 0.0;
  size_t tp = 0, flagged = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    size_t tp_group = 0;
    while (j < n && cohort.scores[order[j]] == cohort.scores[order[i]]) {
      tp_group += size_t(cohort.labels[order[j]] != 0);
      ++j;
    }
    size_t prev_tp = tp;
    tp += tp_group;
    flagged += j - i;
    double precision = double(tp) / double(flagged);
    ap += (double(tp) - double(prev_tp)) / np * precision;
    i = j;
  }
  return ap;
}

std::vector<ThresholdRow> threshold_sweep(const ScoredCohort& cohort) {
  cohort.check_two_class();
  const size_t n = cohort.size();
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(),
            [&](size_t a, size_t b) { return cohort.scores[a] > cohort.scores[b]; });
  const double np = double(cohort.n_positive()), nn = double(cohort.n_negative());
  const double prevalence = cohort.prevalence();

  std::vector<ThresholdRow> rows;
  size_t tp = 0, fp = 0;
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    double threshold = cohort.scores[order[i]];
    while (j < n && cohort.scores[order[j]] == threshold) {
      if (cohort.labels[order[j]]) ++tp;
      else ++fp;
      ++j;
    }
    ThresholdRow row;
    row.threshold = threshold;
    row.flagged = tp + fp;
    row.tpr = double(tp) / np;
    row.fpr = double(fp) / nn;
    row.specificity = 1.0 - row.fpr;
    row.precision = double(tp) / double(tp + fp);
    if (row.flagged > 0) row.relative_risk = relative_risk(row.precision, prevalence);
    rows.push_back(row);
    i = j;
  }
  return rows;
}

ThresholdRow apply_threshold(const ScoredCohort& cohort, double threshold) {
  cohort.check_two_class();
  size_t tp = 0, fp = 0;
  for (size_t i = 0; i < cohort.size(); ++i) {
    if (cohort.scores[i] >= threshold) {
      if (cohort.labels[i]) ++tp;
      else ++fp;
    }
  }
  ThresholdRow row;
  row.threshold = threshold;
  row.flagged = tp + fp;
  row.tpr = double(tp) / double(cohort.n_positive());
  row.fpr = double(fp) / double(cohort.n_negative());
  row.specificity = 1.0 - row.fpr;
  row.precision = row.flagged ? double(tp) / double(row.flagged) : 0.0;
  if (row.flagged > 0) row.relative_risk = relative_risk(row.precision, cohort.prevalence());
  return row;
}

OperatingPoint sensitivity_at_specificity(const ScoredCohort& cohort, double spec_floor) {
  cohort.check_two_class();
  if (!(spec_floor > 0.0 && spec_floor < 1.0)) fail("spec_floor must be in (0,1)");
  double needed = 1.0 / (1.0 - spec_floor);
  if (double(cohort.n_negative()) < needed)
    fail("specificity floor ", spec_floor, " needs at least ", size_t(std::ceil(needed)),
         " negatives, got ", cohort.n_negative(),
         ": one false positive already violates the floor");
  auto rows = threshold_sweep(cohort);
  const ThresholdRow* best = nullptr;
  for (const auto& row : rows)
    if (row.specificity >= spec_floor) best = &row;  // rows descend in threshold
  if (!best) fail("no threshold reaches specificity ", spec_floor);
  return {best->threshold, best->tpr, best->specificity};
}

double relative_risk(double precision, double prevalence) {
  if (!(prevalence > 0.0)) fail("relative risk needs positive prevalence");
  return precision / prevalence;
}

ThresholdRow operational_point(const ScoredCohort& cohort, double top_fraction) {
  cohort.check_two_class();
  if (!(top_fraction > 0.0 && top_fraction <= 1.0)) fail("top_fraction must be in (0,1]");
  const size_t n = cohort.size();
  size_t capacity = size_t(std::ceil(top_fraction * double(n)));
  if (double(n) * top_fraction < 1.0)
    fail("operational point needs at least ", size_t(std::ceil(1.0 / top_fraction)),
         " patients, got ", n);
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t(0));
  std::sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    if (cohort.scores[a] != cohort.scores[b]) return cohort.scores[a] > cohort.scores[b];
    return a < b;  // capacity cuts inside a tie group deterministically
  });
  size_t tp = 0, fp = 0;
  for (size_t k = 0; k < capacity; ++k) {
    if (cohort.labels[order[k]]) ++tp;
    else ++fp;
  }
  ThresholdRow row;
  row.threshold = cohort.scores[order[capacity - 1]];
  row.flagged = capacity;
  row.tpr = double(tp) / double(cohort.n_positive());
  row.fpr = double(fp) / double(cohort.n_negative());
  row.specificity = 1.0 - row.fpr;
  row.precision = double(tp) / double(capacity);
  row.relative_risk = relative_risk(row.precision, cohort.prevalence());
  return row;
}

double f1_macro(const ScoredCohort& cohort, double threshold) {
  cohort.check_two_class();
  size_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (size_t i = 0; i < cohort.size(); ++i) {
    bool flag = cohort.scores[i] >= threshold;
    if (flag && cohort.labels[i]) ++tp;
    else if (flag) ++fp;
    else if (cohort.labels[i]) ++fn;
    else ++tn;
  }
  auto f1 = [](double tp_, double fp_, double fn_) {
    double denom = 2.0 * tp_ + fp_ + fn_;
    return denom > 0 ? 2.0 * tp_ / denom : 0.0;
  };
  return 0.5 * (f1(double(tp), double(fp), double(fn)) +
                f1(double(tn), double(fn), double(fp)));
}

MetricReport evaluate(const ScoredCohort& cohort, double spec_floor, double top_fraction) {
  MetricReport r;
  r.auroc = auroc(cohort);
  r.auprc = auprc(cohort);
  r.prevalence = cohort.prevalence();
  r.n = cohort.size();
  r.n_positive = cohort.n_positive();
  r.sens_at_spec = sensitivity_at_specificity(cohort, spec_floor);
  if (double(cohort.size()) * top_fraction >= 1.0)
    r.operational = operational_point(cohort, top_fraction);
  r.table = threshold_sweep(cohort);
  return r;
}

// ---------------------------------------------------------------------------
// csv / json

std::vector<ScoreRow> read_scores_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  std::vector<ScoreRow> rows;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    std::string t = trim(line);
    if (t.empty()) continue;
    if (n == 1 && t.rfind("patient_id", 0) == 0) continue;  // header
    auto parts = split(t, ',');
    if (parts.size() != 4) fail(path, " line ", n, ": expected patient_id,score,label,split");
    ScoreRow r;
    r.patient_id = parts[0];
    r.score = std::stod(parts[1]);
    r.label = std::stoi(parts[2]);
    r.split = trim(parts[3]);
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_scores_csv(const std::vector<ScoreRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open ", path, " for writing");
  out << "patient_id,score,label,split\n";
  char buf[64];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%.9g", r.score);
    out << r.patient_id << ',' << buf << ',' << r.label << ',' << r.split << '\n';
  }
}

ScoredCohort cohort_for_split(const std::vector<ScoreRow>& rows, const std::string& split) {
  ScoredCohort c;
  for (const auto& r : rows) {
    if (split != "all" && r.split != split) continue;
    c.scores.push_back(r.score);
    c.labels.push_back(r.label);
  }
  return c;
}

static ordered_json row_to_json(const ThresholdRow& row) {
  ordered_json j;
  j["threshold"] = row.threshold;
  j["fpr"] = row.fpr;
  j["tpr"] = row.tpr;
  j["specificity"] = row.specificity;
  j["precision"] = row.precision;
  if (row.relative_risk) j["relative_risk"] = *row.relative_risk;
  j["flagged"] = row.flagged;
  return j;
}

std::string report_to_json(const MetricReport& r) {
  ordered_json j;
  j["auroc"] = r.auroc;
  j["auprc"] = r.auprc;
  j["prevalence"] = r.prevalence;
  j["n"] = r.n;
  j["n_positive"] = r.n_positive;
  j["sensitivity_at_specificity"] = {{"threshold", r.sens_at_spec.threshold},
                                     {"sensitivity", r.sens_at_spec.sensitivity},
                                     {"specificity", r.sens_at_spec.specificity}};
  if (r.operational) j["operational_point"] = row_to_json(*r.operational);
  j["threshold_table"] = ordered_json::array();
  for (const auto& row : r.table) j["threshold_table"].push_back(row_to_json(row));
  return j.dump(2);
}

}  // namespace catchfm::metrics
