#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "catchfm/metrics.hpp"

using namespace catchfm;
using namespace catchfm::metrics;

namespace {

// O(n^2) pairwise concordance, the reference for auroc
double auroc_brute(const ScoredCohort& c) {
  double num = 0, pairs = 0;
  for (size_t i = 0; i < c.size(); ++i) {
    if (!c.labels[i]) continue;
    for (size_t j = 0; j < c.size(); ++j) {
      if (c.labels[j]) continue;
      pairs += 1;
      if (c.scores[i] > c.scores[j]) num += 1;
      else if (c.scores[i] == c.scores[j]) num += 0.5;
    }
  }
  return num / pairs;
}

// average precision by naive recount at every distinct threshold
double auprc_brute(const ScoredCohort& c) {
  std::vector<double> thresholds = c.scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  double np = double(c.n_positive());
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    double tp = 0, flagged = 0;
    for (size_t i = 0; i < c.size(); ++i)
      if (c.scores[i] >= t) {
        flagged += 1;
        tp += c.labels[i];
      }
    double recall = tp / np;
    ap += (recall - prev_recall) * (tp / flagged);
    prev_recall = recall;
  }
  return ap;
}

ScoredCohort random_cohort(Rng& rng, size_t n, double prevalence, bool ties) {
  ScoredCohort c;
  for (size_t i = 0; i < n; ++i) {
    double s = rng.uniform();
    if (ties) s = std::floor(s * 12) / 12.0;  // force heavy ties
    c.scores.push_back(s);
    c.labels.push_back(rng.bernoulli(prevalence) ? 1 : 0);
  }
  // guarantee two classes
  c.labels[0] = 1;
  c.labels[n - 1] = 0;
  return c;
}

// pancreatic screening fixture: 452 positives / 28058 negatives,
// 274 positives and 280 negatives at or above threshold 0.204
ScoredCohort screening_cohort_fixture() {
  ScoredCohort c;
  auto push = [&](double s, int l) {
    c.scores.push_back(s);
    c.labels.push_back(l);
  };
  for (int i = 0; i < 274; ++i) push(0.204 + (0.9995 - 0.204) * i / 273.0, 1);
  for (int i = 0; i < 178; ++i) push(0.0005 + (0.2030 - 0.0005) * i / 177.0, 1);
  for (int i = 0; i < 280; ++i) push(0.2045 + (0.90 - 0.2045) * i / 279.0, 0);
  for (int i = 0; i < 27778; ++i) push(0.0001 + (0.2039 - 0.0001) * i / 27777.0, 0);
  return c;
}

}  // namespace

TEST_CASE("auroc on the worked four-point example is exactly 0.75") {
  ScoredCohort c{{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}};
  CHECK(auroc(c) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(auroc_brute(c) == doctest::Approx(0.75).epsilon(1e-15));
}

TEST_CASE("auprc on the worked example is (1 + 2/3) / 2") {
  ScoredCohort c{{0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1}};
  CHECK(auprc(c) == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0).epsilon(1e-15));
}

TEST_CASE("perfect separation scores 1.0; all-equal scores 0.5 auroc") {
  ScoredCohort sep{{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}};
  CHECK(auroc(sep) == 1.0);
  CHECK(auprc(sep) == 1.0);
  ScoredCohort flat{{0.5, 0.5, 0.5, 0.5}, {1, 1, 0, 0}};
  CHECK(auroc(flat) == 0.5);
}

TEST_CASE("single-class input is an error") {
  ScoredCohort c{{0.1, 0.2}, {1, 1}};
  CHECK_THROWS(auroc(c));
  CHECK_THROWS(auprc(c));
}

TEST_CASE("fast implementations agree with brute force to 1e-12, ties included") {
  Rng rng(99);
  for (int trial = 0; trial < 200; ++trial) {
    size_t n = 5 + rng.uniform_int(196);
    auto c = random_cohort(rng, n, 0.1 + 0.5 * rng.uniform(), trial % 2 == 0);
    CHECK(std::abs(auroc(c) - auroc_brute(c)) < 1e-12);
    CHECK(std::abs(auprc(c) - auprc_brute(c)) < 1e-12);
  }
}

TEST_CASE("auroc is invariant under strictly increasing transforms") {
  Rng rng(5);
  auto c = random_cohort(rng, 150, 0.3, false);
  double base_roc = auroc(c), base_pr = auprc(c);
  ScoredCohort warped = c;
  for (auto& s : warped.scores) s = std::exp(3.0 * s) - 0.5;
  CHECK(auroc(warped) == doctest::Approx(base_roc).epsilon(1e-12));
  CHECK(auprc(warped) == doctest::Approx(base_pr).epsilon(1e-12));
}

TEST_CASE("negating scores flips auroc when there are no ties") {
  Rng rng(6);
  ScoredCohort c;
  for (int i = 0; i < 100; ++i) {
    c.scores.push_back(i * 0.01 + rng.uniform() * 0.001);
    c.labels.push_back(rng.bernoulli(0.4) ? 1 : 0);
  }
  c.labels[0] = 1;
  c.labels[99] = 0;
  ScoredCohort neg = c;
  for (auto& s : neg.scores) s = -s;
  CHECK(auroc(c) + auroc(neg) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("random scores at prevalence p give auprc near p on large cohorts") {
  Rng rng(7);
  double p = 0.15;
  double sum = 0;
  int trials = 30;
  for (int t = 0; t < trials; ++t) {
    auto c = random_cohort(rng, 4000, p, false);
    sum += auprc(c);
  }
  CHECK(sum / trials == doctest::Approx(p).epsilon(0.08));
}

TEST_CASE("every sweep row keeps specificity = 1 - fpr and rr = precision/prevalence") {
  Rng rng(8);
  auto c = random_cohort(rng, 300, 0.2, true);
  auto rows = threshold_sweep(c);
  double prev = c.prevalence();
  double last = std::numeric_limits<double>::infinity();
  for (const auto& row : rows) {
    CHECK(row.specificity == 1.0 - row.fpr);
    REQUIRE(row.relative_risk.has_value());
    CHECK(*row.relative_risk == row.precision / prev);  // exact by construction
    CHECK(row.threshold < last);
    last = row.threshold;
  }
}

TEST_CASE("sensitivity at specificity picks the lowest threshold above the floor") {
  ScoredCohort sep;
  for (int i = 0; i < 300; ++i) {
    sep.scores.push_back(i < 30 ? 0.9 + i * 1e-4 : 0.1 + i * 1e-4);
    sep.labels.push_back(i < 30 ? 1 : 0);
  }
  auto op = sensitivity_at_specificity(sep, 0.99);
  CHECK(op.sensitivity == 1.0);

  // with 100 negatives, one false positive is the most the floor allows
  ScoredCohort tight;
  for (int i = 0; i < 100; ++i) {
    tight.scores.push_back(0.001 * i);
    tight.labels.push_back(0);
  }
  tight.scores.push_back(0.5005);  // between negatives, 1 fp at this cut
  tight.labels.push_back(1);
  auto op2 = sensitivity_at_specificity(tight, 0.99);
  CHECK(op2.sensitivity == 1.0);
  CHECK(op2.specificity >= 0.99);
}

TEST_CASE("an unreachable specificity floor errors with an explanation") {
  ScoredCohort c{{0.9, 0.8, 0.7, 0.2}, {1, 1, 0, 0}};  // 2 negatives < 100
  try {
    sensitivity_at_specificity(c, 0.99);
    FAIL("expected an error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("negatives") != std::string::npos);
  }
}

TEST_CASE("pancreatic screening row: sensitivity 0.606, specificity 0.990, rr 31.196") {
  auto c = screening_cohort_fixture();
  REQUIRE(c.size() == 28510);
  REQUIRE(c.n_positive() == 452);
  auto op = sensitivity_at_specificity(c, 0.99);
  CHECK(op.threshold == doctest::Approx(0.204).epsilon(1e-9));
  CHECK(op.sensitivity == doctest::Approx(0.606).epsilon(0.001 / 0.606));
  CHECK(op.specificity == doctest::Approx(0.990).epsilon(0.001 / 0.990));
  auto row = apply_threshold(c, op.threshold);
  REQUIRE(row.relative_risk.has_value());
  CHECK(*row.relative_risk == doctest::Approx(31.196).epsilon(0.02));
}

TEST_CASE("relative risk worked examples") {
  double prev = 452.0 / 28510.0;
  CHECK(relative_risk(0.495, prev) == doctest::Approx(31.196).epsilon(0.02));
  CHECK(relative_risk(prev, prev) == 1.0);
  CHECK(relative_risk(1.0, 0.5) == 2.0);
}

TEST_CASE("operational point flags exactly ceil(fraction * n) patients") {
  Rng rng(10);
  ScoredCohort c = random_cohort(rng, 10000, 0.05, false);
  auto row = operational_point(c, 0.001);
  CHECK(row.flagged == 10);

  // all scores distinct: flagged set is exactly the top 10
  std::vector<double> sorted = c.scores;
  std::sort(sorted.begin(), sorted.end(), std::greater<>());
  CHECK(row.threshold == sorted[9]);

  ScoredCohort tiny{{0.5, 0.6}, {1, 0}};
  CHECK_THROWS(operational_point(tiny, 0.001));
}

TEST_CASE("operational point cuts ties deterministically by index") {
  ScoredCohort c;
  for (int i = 0; i < 2000; ++i) {
    c.scores.push_back(i < 5 ? 0.9 : 0.5);  // 5 high, then a huge tie group
    c.labels.push_back(i < 5 ? 1 : (i % 7 == 0));
  }
  auto row = operational_point(c, 0.001);  // capacity 2
  CHECK(row.flagged == 2);
  CHECK(row.tpr == doctest::Approx(2.0 / double(c.n_positive())));
}

TEST_CASE("top 0.1% of the screening cohort is pure positives: rr 63.075") {
  auto c = screening_cohort_fixture();
  auto row = operational_point(c, 0.001);
  CHECK(row.flagged == 29);  // ceil(0.001 * 28510)
  CHECK(row.precision == 1.0);
  REQUIRE(row.relative_risk.has_value());
  CHECK(*row.relative_risk == doctest::Approx(63.075).epsilon(0.001));
  CHECK(*row.relative_risk >= 10.0);
  CHECK(*row.relative_risk < 100.0);
}

TEST_CASE("bootstrap is seeded and reproducible") {
  Rng rng(12);
  auto c = random_cohort(rng, 400, 0.2, false);
  auto ci1 = bootstrap(c, [](const ScoredCohort& s) { return auroc(s); }, 200, 31);
  auto ci2 = bootstrap(c, [](const ScoredCohort& s) { return auroc(s); }, 200, 31);
  CHECK(ci1.mean == ci2.mean);
  CHECK(ci1.stddev == ci2.stddev);
  CHECK(ci1.lo <= ci1.mean);
  CHECK(ci1.hi >= ci1.mean);
}

TEST_CASE("scores csv round trip and split filtering") {
  std::vector<ScoreRow> rows{{"P1", 0.25, 1, "test"},
                             {"P2", 0.5, 0, "valid"},
                             {"P3", 0.75, 1, "test"}};
  auto path = (std::filesystem::temp_directory_path() / "scores_rt.csv").string();
  write_scores_csv(rows, path);
  auto back = read_scores_csv(path);
  REQUIRE(back.size() == 3);
  CHECK(back[0].patient_id == "P1");
  CHECK(back[0].score == 0.25);
  CHECK(back[2].split == "test");
  auto test_cohort = cohort_for_split(back, "test");
  CHECK(test_cohort.size() == 2);
  auto all = cohort_for_split(back, "all");
  CHECK(all.size() == 3);
}

TEST_CASE("f1 macro on a balanced perfect classifier is 1") {
  ScoredCohort c{{0.9, 0.8, 0.1, 0.2}, {1, 1, 0, 0}};
  CHECK(f1_macro(c, 0.5) == 1.0);
}
