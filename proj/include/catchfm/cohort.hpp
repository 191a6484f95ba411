#pragma once

#include <string>
#include <vector>

#include "catchfm/ehr.hpp"

namespace catchfm::cohort {

enum class CohortKind : uint8_t { First, Subsequent };
enum class Matching : uint8_t { Controlled, Random };
enum class Split : uint8_t { Train, Valid, Test };

std::string_view split_name(Split s);
Split split_from_name(std::string_view name);

struct CohortSpec {
  std::string target_cancer = "157";  // 3-digit ICD-9 category
  int exclusion_window_months = 12;   // 6 or 12
  double history_window_years = 5.0;
  CohortKind cohort_kind = CohortKind::First;
  int control_ratio = 62;
  Matching matching = Matching::Controlled;

  void check() const;
  Date history_start(Date index) const;  // index - history window
  Date history_end(Date index) const;    // index - exclusion window (inclusive)
};

struct CohortExample {
  std::string patient_id;
  Date index_date;
  int label = 0;  // 1 = case
  std::vector<ehr::Visit> history;  // visits in [history_start, history_end]
  // source-record snapshot used for matching and encoding
  int birth_year = 0;
  ehr::Gender gender = ehr::Gender::Male;
  Date first_visit;  // over the full record
  Date last_visit;
};

struct CohortDataset {
  CohortSpec spec;
  std::vector<CohortExample> examples;
  std::vector<Split> split;  // parallel to examples

  size_t n_positive() const;
  double positive_rate() const;
};

// Case selection per the clinician rules: index date is the first occurrence
// of the target category; `first` cases have no neoplasm code before it,
// `subsequent` cases have a prior non-target neoplasm and no prior target.
// Patients with under one year of pre-window history, or an empty truncated
// history, are dropped.
std::vector<CohortExample> select_cases(const std::vector<ehr::PatientRecord>& patients,
                                        const CohortSpec& spec);

// Patients with no neoplasm code anywhere, eligible to serve as controls.
std::vector<const ehr::PatientRecord*> control_pool(
    const std::vector<ehr::PatientRecord>& patients);

struct MatchReport {
  struct Shortfall {
    std::string case_id;
    int matched = 0;
  };
  std::vector<Shortfall> unmatched;  // cases with fewer than control_ratio controls
};

// Controlled matching: same 5-year age bucket and gender, a clinical visit on
// the case's index date (which becomes the control's index date), and history
// durations within +-10% of the case's. Random matching relaxes to a visit
// within +-30 days and drops the demographic and duration rules. Controls are
// sampled without replacement across the whole cohort, deterministically per
// (spec, seed).
std::vector<CohortExample> match_controls(const std::vector<CohortExample>& cases,
                                          const std::vector<const ehr::PatientRecord*>& pool,
                                          const CohortSpec& spec, uint64_t seed,
                                          MatchReport* report = nullptr);

// Stratified 80/10/10 split; requires at least 10 positives.
CohortDataset assemble(std::vector<CohortExample> cases, std::vector<CohortExample> controls,
                       const CohortSpec& spec, uint64_t seed);

// cohort.jsonl rows: {patient_id, index_date, label, split}
void write_cohort(const CohortDataset& dataset, const std::string& path);

struct CohortRow {
  std::string patient_id;
  Date index_date;
  int label = 0;
  Split split = Split::Train;
};
std::vector<CohortRow> read_cohort(const std::string& path);

// Rebuild an example's history from the full record (used after reload).
CohortExample make_example(const ehr::PatientRecord& record, Date index_date, int label,
                           const CohortSpec& spec);

}  // namespace catchfm::cohort
