#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "catchfm/cohort.hpp"
#include "catchfm/synthgen.hpp"

using namespace catchfm;
using namespace catchfm::cohort;
using ehr::Gender;
using ehr::make_code;
using ehr::PatientRecord;
using ehr::Visit;

namespace {

Visit visit(int y, int m, int d, const char* system, const char* value) {
  Visit v;
  v.date = Date::from_ymd(y, m, d);
  v.codes.push_back(make_code(system, value));
  return v;
}

PatientRecord patient(const std::string& id, int birth_year, Gender g,
                      std::vector<Visit> visits) {
  PatientRecord p;
  p.patient_id = id;
  p.birth_year = birth_year;
  p.gender = g;
  p.visits = std::move(visits);
  ehr::canonicalize(p);
  return p;
}

// benign visits at a monthly cadence over [from, to]
std::vector<Visit> monthly_history(int from_year, int to_year, int day = 10) {
  std::vector<Visit> visits;
  for (int y = from_year; y <= to_year; ++y)
    for (int m = 1; m <= 12; ++m) visits.push_back(visit(y, m, day, "icd9-diag", "401"));
  return visits;
}

CohortSpec spec_157(CohortKind kind = CohortKind::First) {
  CohortSpec s;
  s.target_cancer = "157";
  s.cohort_kind = kind;
  s.control_ratio = 2;
  return s;
}

}  // namespace

TEST_CASE("a clean-history patient becomes a positive anchored at first occurrence") {
  auto visits = monthly_history(2004, 2009);
  visits.push_back(visit(2010, 5, 1, "icd9-diag", "157.0"));
  visits.push_back(visit(2011, 2, 1, "icd9-diag", "157.0"));  // later repeat is ignored
  auto p = patient("P1", 1950, Gender::Male, visits);
  auto cases = select_cases({p}, spec_157());
  REQUIRE(cases.size() == 1);
  CHECK(cases[0].index_date == Date::from_ymd(2010, 5, 1));
  CHECK(cases[0].label == 1);
}

TEST_CASE("prior other-cancer history excludes first-cohort cases but defines subsequent ones") {
  auto visits = monthly_history(2004, 2009);
  visits.push_back(visit(2008, 3, 1, "icd9-diag", "162"));  // lung first
  visits.push_back(visit(2010, 5, 1, "icd9-diag", "157"));
  auto p = patient("P1", 1950, Gender::Male, visits);

  CHECK(select_cases({p}, spec_157(CohortKind::First)).empty());
  auto subsequent = select_cases({p}, spec_157(CohortKind::Subsequent));
  REQUIRE(subsequent.size() == 1);
  CHECK(subsequent[0].index_date == Date::from_ymd(2010, 5, 1));
}

TEST_CASE("the anchor is always the first target-category code, subcode or not") {
  auto visits = monthly_history(2004, 2009);
  visits.push_back(visit(2008, 3, 1, "icd9-diag", "157.9"));
  visits.push_back(visit(2010, 5, 1, "icd9-diag", "157.0"));
  auto p = patient("P1", 1950, Gender::Male, visits);
  auto first = select_cases({p}, spec_157(CohortKind::First));
  REQUIRE(first.size() == 1);
  CHECK(first[0].index_date == Date::from_ymd(2008, 3, 1));
  // no non-target cancer history, so the subsequent cohort stays empty
  CHECK(select_cases({p}, spec_157(CohortKind::Subsequent)).empty());
}

TEST_CASE("cases need a year of history before the exclusion window") {
  // first visit only 6 months before the window opens
  std::vector<Visit> visits{visit(2009, 1, 10, "icd9-diag", "401"),
                            visit(2010, 5, 1, "icd9-diag", "157")};
  auto p = patient("P1", 1950, Gender::Male, visits);
  CHECK(select_cases({p}, spec_157()).empty());
}

TEST_CASE("history truncation respects both window edges") {
  CohortSpec s = spec_157();
  auto visits = monthly_history(2003, 2010);
  visits.push_back(visit(2010, 6, 1, "icd9-diag", "157"));
  auto p = patient("P1", 1950, Gender::Male, visits);
  auto cases = select_cases({p}, s);
  REQUIRE(cases.size() == 1);
  Date index = cases[0].index_date;
  for (const auto& v : cases[0].history) {
    CHECK(v.date <= s.history_end(index));
    CHECK(v.date >= s.history_start(index));
  }
  // exclusion window rule: nothing within (index - 12mo, index]
  for (const auto& v : cases[0].history) CHECK(index - v.date >= 365);
}

TEST_CASE("a visit exactly six months before index is cut by the 12-month window but kept by the 6-month one") {
  auto visits = monthly_history(2004, 2008);
  Date index = Date::from_ymd(2010, 5, 1);
  Visit at_six_months = visit(2009, 11, 1, "icd9-diag", "401");
  visits.push_back(at_six_months);
  visits.push_back(visit(2010, 5, 1, "icd9-diag", "157"));
  auto p = patient("P1", 1950, Gender::Male, visits);

  CohortSpec s12 = spec_157();
  s12.exclusion_window_months = 12;
  auto c12 = select_cases({p}, s12);
  REQUIRE(c12.size() == 1);
  for (const auto& v : c12[0].history) CHECK(v.date != at_six_months.date);

  CohortSpec s6 = spec_157();
  s6.exclusion_window_months = 6;
  auto c6 = select_cases({p}, s6);
  REQUIRE(c6.size() == 1);
  bool found = false;
  for (const auto& v : c6[0].history) found |= v.date == at_six_months.date;
  CHECK(found);
  CHECK(index == c6[0].index_date);
}

TEST_CASE("the control pool rejects any record with a neoplasm code") {
  auto clean = patient("C1", 1950, Gender::Male, monthly_history(2004, 2010));
  auto dirty_visits = monthly_history(2004, 2010);
  dirty_visits.push_back(visit(2007, 8, 9, "icd9-diag", "200.1"));
  auto dirty = patient("C2", 1950, Gender::Male, dirty_visits);
  std::vector<PatientRecord> all{clean, dirty};
  auto pool = control_pool(all);
  REQUIRE(pool.size() == 1);
  CHECK(pool[0]->patient_id == "C1");
}

TEST_CASE("an exact demographic twin with a same-day visit is selected") {
  auto case_visits = monthly_history(2004, 2009);
  case_visits.push_back(visit(2010, 5, 1, "icd9-diag", "157"));
  auto kase = patient("CASE", 1950, Gender::Female, case_visits);

  auto twin_visits = monthly_history(2004, 2009);
  twin_visits.push_back(visit(2010, 5, 1, "icd9-diag", "401"));  // same index day
  auto twin = patient("TWIN", 1950, Gender::Female, twin_visits);

  // wrong gender, wrong bucket, no same-day visit: all ineligible
  auto off_gender = patient("OG", 1950, Gender::Male, twin_visits);
  auto off_age = patient("OA", 1920, Gender::Female, twin_visits);
  auto off_day_visits = monthly_history(2004, 2009);
  off_day_visits.push_back(visit(2010, 5, 2, "icd9-diag", "401"));
  auto off_day = patient("OD", 1950, Gender::Female, off_day_visits);

  std::vector<PatientRecord> all{kase, twin, off_gender, off_age, off_day};
  auto spec = spec_157();
  auto cases = select_cases(all, spec);
  REQUIRE(cases.size() == 1);
  auto pool = control_pool(all);
  MatchReport report;
  auto controls = match_controls(cases, pool, spec, 7, &report);
  REQUIRE(controls.size() == 1);
  CHECK(controls[0].patient_id == "TWIN");
  CHECK(controls[0].index_date == cases[0].index_date);
  CHECK(controls[0].label == 0);
  REQUIRE(report.unmatched.size() == 1);  // ratio 2, only 1 found
  CHECK(report.unmatched[0].matched == 1);
}

TEST_CASE("random matching accepts the nearest visit within thirty days") {
  auto case_visits = monthly_history(2004, 2009);
  case_visits.push_back(visit(2010, 5, 15, "icd9-diag", "157"));
  auto kase = patient("CASE", 1950, Gender::Female, case_visits);

  auto near_visits = monthly_history(2004, 2010, 25);  // visits on the 25th
  auto near = patient("NEAR", 1931, Gender::Male, near_visits);  // demographics don't matter

  auto far_visits = monthly_history(2004, 2008, 25);  // nothing within 30 days of index
  auto far = patient("FAR", 1950, Gender::Female, far_visits);

  std::vector<PatientRecord> all{kase, near, far};
  auto spec = spec_157();
  spec.matching = Matching::Random;
  spec.control_ratio = 5;
  auto cases = select_cases(all, spec);
  REQUIRE(cases.size() == 1);
  auto controls = match_controls(cases, control_pool(all), spec, 3);
  REQUIRE(controls.size() == 1);
  CHECK(controls[0].patient_id == "NEAR");
  // nearest visit: 2010-05-25 (10 days) beats 2010-04-25 (20 days)
  CHECK(controls[0].index_date == Date::from_ymd(2010, 5, 25));
}

TEST_CASE("controls are consumed without replacement across cases") {
  std::vector<PatientRecord> all;
  for (int i = 0; i < 2; ++i) {
    auto visits = monthly_history(2004, 2009);
    visits.push_back(visit(2010, 5, 1, "icd9-diag", "157"));
    all.push_back(patient(concat("CASE", i), 1950, Gender::Male, visits));
  }
  auto twin_visits = monthly_history(2004, 2009);
  twin_visits.push_back(visit(2010, 5, 1, "icd9-diag", "401"));
  all.push_back(patient("TWIN", 1950, Gender::Male, twin_visits));

  auto spec = spec_157();
  spec.control_ratio = 1;
  auto cases = select_cases(all, spec);
  REQUIRE(cases.size() == 2);
  auto controls = match_controls(cases, control_pool(all), spec, 11);
  CHECK(controls.size() == 1);  // the twin serves only one case
}

TEST_CASE("matching is deterministic in (patients, spec, seed)") {
  auto cfg = [] {
    synth::GeneratorConfig g;
    g.seed = 5;
    g.n_patients = 800;
    g.start_year = 2004;
    g.end_year = 2014;
    g.visit_rate = 8.0;
    for (const char* v : {"401", "272", "466"})
      g.code_pool.push_back({make_code("icd9-diag", v), 1.0});
    g.cancers.push_back({make_code("icd9-diag", "157"), 0.05});
    return g;
  }();
  auto [patients, truths] = synth::generate(cfg);
  auto spec = spec_157();
  auto cases = select_cases(patients, spec);
  REQUIRE(cases.size() >= 10);
  auto pool = control_pool(patients);
  auto c1 = match_controls(cases, pool, spec, 42);
  auto c2 = match_controls(cases, pool, spec, 42);
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) {
    CHECK(c1[i].patient_id == c2[i].patient_id);
    CHECK(c1[i].index_date == c2[i].index_date);
  }
  auto c3 = match_controls(cases, pool, spec, 43);
  bool identical = c1.size() == c3.size();
  if (identical)
    for (size_t i = 0; i < c1.size(); ++i) identical &= c1[i].patient_id == c3[i].patient_id;
  CHECK_FALSE(identical);
}

TEST_CASE("a 62-to-1 matched cohort lands at 1.59% prevalence") {
  // 452 cases, each with exactly 62 eligible twins
  std::vector<CohortExample> cases, controls;
  CohortSpec spec = spec_157();
  spec.control_ratio = 62;
  for (int i = 0; i < 452; ++i) {
    CohortExample e;
    e.patient_id = concat("CASE", i);
    e.index_date = Date::from_ymd(2010, 5, 1);
    e.label = 1;
    cases.push_back(e);
    for (int j = 0; j < 62; ++j) {
      CohortExample c = e;
      c.patient_id = concat("CTRL", i, "_", j);
      c.label = 0;
      controls.push_back(c);
    }
  }
  auto ds = assemble(cases, controls, spec, 1);
  CHECK(ds.positive_rate() == doctest::Approx(452.0 / (452.0 * 63.0)).epsilon(1e-12));
  CHECK(ds.positive_rate() == doctest::Approx(0.0159).epsilon(0.002));
}

TEST_CASE("stratified split puts 10 +- 1 of 100 positives in test") {
  std::vector<CohortExample> cases, controls;
  for (int i = 0; i < 100; ++i) {
    CohortExample e;
    e.patient_id = concat("P", i);
    e.index_date = Date::from_ymd(2010, 1, 1);
    e.label = 1;
    cases.push_back(e);
  }
  for (int i = 0; i < 6000; ++i) {
    CohortExample e;
    e.patient_id = concat("N", i);
    e.index_date = Date::from_ymd(2010, 1, 1);
    e.label = 0;
    controls.push_back(e);
  }
  auto ds = assemble(cases, controls, spec_157(), 9);
  size_t test_pos = 0, valid_pos = 0;
  std::map<Split, size_t> sizes;
  for (size_t i = 0; i < ds.examples.size(); ++i) {
    ++sizes[ds.split[i]];
    if (ds.examples[i].label == 1 && ds.split[i] == Split::Test) ++test_pos;
    if (ds.examples[i].label == 1 && ds.split[i] == Split::Valid) ++valid_pos;
  }
  CHECK(test_pos >= 9);
  CHECK(test_pos <= 11);
  CHECK(valid_pos >= 9);
  CHECK(valid_pos <= 11);
  CHECK(sizes[Split::Test] == 610);
  CHECK(sizes[Split::Valid] == 610);
  // no patient in more than one split: ids are unique by construction here
  std::set<std::string> ids;
  for (const auto& e : ds.examples) CHECK(ids.insert(e.patient_id).second);
}

TEST_CASE("fewer than ten positives cannot be stratified") {
  std::vector<CohortExample> cases(9), controls(100);
  for (size_t i = 0; i < cases.size(); ++i) {
    cases[i].patient_id = concat("P", i);
    cases[i].label = 1;
  }
  for (size_t i = 0; i < controls.size(); ++i) controls[i].patient_id = concat("N", i);
  CHECK_THROWS(assemble(cases, controls, spec_157(), 1));
}

TEST_CASE("controlled and random matching share identical positives") {
  auto cfg = [] {
    synth::GeneratorConfig g;
    g.seed = 12;
    g.n_patients = 600;
    g.start_year = 2004;
    g.end_year = 2014;
    g.visit_rate = 8.0;
    for (const char* v : {"401", "272"})
      g.code_pool.push_back({make_code("icd9-diag", v), 1.0});
    g.cancers.push_back({make_code("icd9-diag", "157"), 0.06});
    return g;
  }();
  auto [patients, truths] = synth::generate(cfg);
  auto controlled = spec_157();
  auto random = spec_157();
  random.matching = Matching::Random;
  auto c1 = select_cases(patients, controlled);
  auto c2 = select_cases(patients, random);
  REQUIRE(c1.size() == c2.size());
  for (size_t i = 0; i < c1.size(); ++i) CHECK(c1[i].patient_id == c2[i].patient_id);
}

TEST_CASE("cohort jsonl round trips") {
  std::vector<CohortExample> cases(12), controls(40);
  for (size_t i = 0; i < cases.size(); ++i) {
    cases[i].patient_id = concat("P", i);
    cases[i].index_date = Date::from_ymd(2010, 2, int(i) + 1);
    cases[i].label = 1;
  }
  for (size_t i = 0; i < controls.size(); ++i) {
    controls[i].patient_id = concat("N", i);
    controls[i].index_date = Date::from_ymd(2010, 3, int(i % 28) + 1);
  }
  auto ds = assemble(cases, controls, spec_157(), 3);
  auto path = (std::filesystem::temp_directory_path() / "cohort_rt.jsonl").string();
  write_cohort(ds, path);
  auto rows = read_cohort(path);
  REQUIRE(rows.size() == ds.examples.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    CHECK(rows[i].patient_id == ds.examples[i].patient_id);
    CHECK(rows[i].index_date == ds.examples[i].index_date);
    CHECK(rows[i].label == ds.examples[i].label);
    CHECK(rows[i].split == ds.split[i]);
  }
}
