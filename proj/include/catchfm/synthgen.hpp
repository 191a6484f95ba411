#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "catchfm/ehr.hpp"

namespace catchfm::synth {

// A planted risk factor: carriers of risk_code develop the target cancer at
// hazard_multiplier times the base hazard. Carriers emit the code from their
// first visit onward, and onset is deferred past min_lead_months so the
// exclusion window cannot erase the signal.
struct RiskRule {
  ehr::MedicalCode risk_code;
  std::string target_cancer;  // 3-digit ICD-9 category, e.g. "157"
  double hazard_multiplier = 2.0;
  int min_lead_months = 12;
  double carrier_prob = 0.1;
  double emit_prob = 0.25;  // per-visit emission for carriers
};

struct CancerSpec {
  ehr::MedicalCode code;   // icd9-diag, category in [140, 239]
  double base_rate = 0.01;  // lifetime onset probability for a baseline patient
};

struct CodeFreq {
  ehr::MedicalCode code;
  double frequency = 1.0;  // relative draw weight
};

struct GeneratorConfig {
  uint64_t seed = 0;
  int n_patients = 0;
  int start_year = 2006;
  int end_year = 2014;  // exclusive of Dec 31; window is [start, end] calendar years
  std::vector<CodeFreq> code_pool;
  std::vector<CancerSpec> cancers;
  std::vector<RiskRule> risk_rules;
  double visit_rate = 6.0;            // mean visits / patient / year
  double mean_codes_per_visit = 1.6;  // >= 1
  int min_age = 20, max_age = 79;     // uniform age at window start
  double male_fraction = 0.5;

  int total_months() const { return (end_year - start_year + 1) * 12; }
  void check() const;  // throws on invariant violations
};

struct GroundTruth {
  std::string patient_id;
  // cancer category -> first diagnosis date; present iff the cancer occurred
  std::map<std::string, Date> first_diagnosis;
  std::vector<std::string> planted_risk_codes;

  bool has_cancer(const std::string& category) const {
    return first_diagnosis.count(category) > 0;
  }
};

// Deterministic per (config, patient index); emits records in index order.
void generate(const GeneratorConfig& config,
              const std::function<void(ehr::PatientRecord&&, GroundTruth&&)>& sink);

// Convenience form used by tests and small pipelines.
std::pair<std::vector<ehr::PatientRecord>, std::vector<GroundTruth>> generate(
    const GeneratorConfig& config);

struct CorpusStats {
  size_t n_patients = 0;
  size_t n_visits = 0;
  size_t n_codes = 0;
  double avg_visits_per_patient = 0.0;
};

CorpusStats summarize(const std::vector<ehr::PatientRecord>& patients);

// Analytic oracles over the hazard model, enumerated across carrier patterns.
double expected_positive_rate(const GeneratorConfig& config, const std::string& cancer_category);
// AUROC of the Bayes-optimal classifier distinguishing eventual cases from
// never-cancer controls using carrier status alone.
double bayes_oracle_auroc(const GeneratorConfig& config, const std::string& cancer_category);

GeneratorConfig config_from_json(const std::string& json_text);
std::string config_to_json(const GeneratorConfig& config);

std::string truth_to_json(const GroundTruth& truth);
GroundTruth truth_from_json(const std::string& line, size_t line_number);
std::vector<GroundTruth> load_truth(const std::string& path);

}  // namespace catchfm::synth
