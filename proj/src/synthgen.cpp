#include "catchfm/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

namespace catchfm::synth {

using ehr::CodeSystem;
using ehr::Gender;
using ehr::MedicalCode;
using ehr::PatientRecord;
using ehr::Visit;
using ehr::VisitKind;
using nlohmann::json;
using nlohmann::ordered_json;

void GeneratorConfig::check() const {
  if (n_patients < 0) fail("n_patients must be non-negative");
  if (end_year < start_year) fail("invalid year span ", start_year, "..", end_year);
  if (visit_rate <= 0) fail("visit_rate must be positive");
  if (mean_codes_per_visit < 1.0) fail("mean_codes_per_visit must be at least 1");
  if (min_age < 0 || max_age < min_age) fail("invalid age range");
  if (male_fraction < 0 || male_fraction > 1) fail("male_fraction must be in [0,1]");
  if (code_pool.empty()) fail("code_pool is empty");
  for (const auto& cf : code_pool) {
    if (!(cf.frequency > 0) || !std::isfinite(cf.frequency))
      fail("code_pool frequency for ", cf.code.value, " must be positive and finite");
    if (ehr::is_cancer_code(cf.code))
      fail("code_pool must not contain neoplasm codes (", cf.code.value,
           "); cancer codes are emitted only at diagnosis");
  }
  for (const auto& c : cancers) {
    if (!ehr::is_cancer_code(c.code)) fail("cancer code ", c.code.value, " is not in [140,239]");
    if (!(c.base_rate > 0 && c.base_rate < 1)) fail("cancer base_rate must be in (0,1)");
  }
  for (const auto& r : risk_rules) {
    if (!(r.hazard_multiplier > 1)) fail("hazard_multiplier must exceed 1 (rule for ",
                                         r.risk_code.value, ")");
    if (r.min_lead_months < 12) fail("min_lead_months must be at least 12");
    if (r.carrier_prob < 0 || r.carrier_prob >= 1) fail("carrier_prob must be in [0,1)");
    if (!(r.emit_prob > 0 && r.emit_prob <= 1)) fail("emit_prob must be in (0,1]");
    bool known = false;
    for (const auto& c : cancers) known |= ehr::icd9_category(c.code.value) == r.target_cancer;
    if (!known) fail("risk rule targets unknown cancer ", r.target_cancer);
    for (const auto& cf : code_pool)
      if (cf.code == r.risk_code)
        fail("risk code ", r.risk_code.value, " must not appear in the general code_pool");
  }
}

namespace {

struct CancerPlan {
  std::string category;
  MedicalCode code;
  double monthly_hazard = 0.0;  // baseline, multiplied by carried rule hazards
  int onset_start_month = 0;    // max min_lead over rules targeting this cancer
  std::vector<size_t> rule_indices;
};

std::vector<CancerPlan> plan_cancers(const GeneratorConfig& cfg) {
  std::vector<CancerPlan> plans;
  const int months = cfg.total_months();
  for (const auto& c : cfg.cancers) {
    CancerPlan plan;
    plan.category = ehr::icd9_category(c.code.value);
    plan.code = c.code;
    for (size_t i = 0; i < cfg.risk_rules.size(); ++i)
      if (cfg.risk_rules[i].target_cancer == plan.category) {
        plan.rule_indices.push_back(i);
        plan.onset_start_month =
            std::max(plan.onset_start_month, cfg.risk_rules[i].min_lead_months);
      }
    int eligible = std::max(1, months - plan.onset_start_month);
    plan.monthly_hazard = -std::log1p(-c.base_rate) / double(eligible);
    plans.push_back(std::move(plan));
  }
  return plans;
}

}  // namespace

void generate(const GeneratorConfig& cfg,
              const std::function<void(PatientRecord&&, GroundTruth&&)>& sink) {
  cfg.check();
  const int months = cfg.total_months();
  const auto plans = plan_cancers(cfg);

  // categorical CDF over the code pool
  std::vector<double> cdf(cfg.code_pool.size());
  double total = 0.0;
  for (size_t i = 0; i < cfg.code_pool.size(); ++i) {
    total += cfg.code_pool[i].frequency;
    cdf[i] = total;
  }

  Rng root = Rng(cfg.seed).sub("synthgen");
  const double monthly_visit_rate = cfg.visit_rate / 12.0;

  for (int idx = 0; idx < cfg.n_patients; ++idx) {
    Rng rng = root.sub(uint64_t(idx));

    PatientRecord rec;
    rec.patient_id = concat("P", idx);
    int age0 = cfg.min_age + int(rng.uniform_int(uint64_t(cfg.max_age - cfg.min_age + 1)));
    rec.birth_year = cfg.start_year - age0;
    rec.gender = rng.bernoulli(cfg.male_fraction) ? Gender::Male : Gender::Female;

    GroundTruth truth;
    truth.patient_id = rec.patient_id;

    std::vector<bool> carrier(cfg.risk_rules.size(), false);
    for (size_t r = 0; r < cfg.risk_rules.size(); ++r) {
      carrier[r] = rng.bernoulli(cfg.risk_rules[r].carrier_prob);
      if (carrier[r]) truth.planted_risk_codes.push_back(cfg.risk_rules[r].risk_code.value);
    }

    auto draw_code = [&]() {
      double u = rng.uniform() * total;
      size_t i = size_t(std::lower_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
      return cfg.code_pool[std::min(i, cfg.code_pool.size() - 1)].code;
    };
    auto draw_kind = [&]() {
      double u = rng.uniform();
      if (u < 0.65) return VisitKind::Outpatient;
      if (u < 0.85) return VisitKind::Pharmacy;
      return VisitKind::Inpatient;
    };
    auto month_date = [&](int month) {
      int y = cfg.start_year + month / 12;
      int m = month % 12 + 1;
      int d = 1 + int(rng.uniform_int(uint64_t(Date::days_in_month(y, m))));
      return Date::from_ymd(y, m, d);
    };
    auto make_visit = [&](int month, bool enrollment) {
      Visit v;
      v.date = month_date(month);
      v.kind = enrollment ? VisitKind::Outpatient : draw_kind();
      int n_codes = 1 + rng.poisson(cfg.mean_codes_per_visit - 1.0);
      for (int c = 0; c < n_codes; ++c) v.codes.push_back(draw_code());
      for (size_t r = 0; r < cfg.risk_rules.size(); ++r)
        if (carrier[r] && (enrollment || rng.bernoulli(cfg.risk_rules[r].emit_prob)))
          v.codes.push_back(cfg.risk_rules[r].risk_code);
      return v;
    };

    // enrollment visit anchors the history and carries planted codes early
    rec.visits.push_back(make_visit(0, true));
    std::vector<bool> diagnosed(plans.size(), false);

    for (int month = 0; month < months; ++month) {
      int n_visits = rng.poisson(monthly_visit_rate);
      if (month == 0) n_visits = std::max(0, n_visits - 1);
      for (int v = 0; v < n_visits; ++v) rec.visits.push_back(make_visit(month, false));

      for (size_t c = 0; c < plans.size(); ++c) {
        if (diagnosed[c] || month < plans[c].onset_start_month) continue;
        double hazard = plans[c].monthly_hazard;
        for (size_t ri : plans[c].rule_indices)
          if (carrier[ri]) hazard *= cfg.risk_rules[ri].hazard_multiplier;
        if (rng.bernoulli(std::min(hazard, 1.0))) {
          diagnosed[c] = true;
          Visit dx;
          dx.date = month_date(month);
          dx.kind = VisitKind::Inpatient;
          dx.codes.push_back(plans[c].code);
          truth.first_diagnosis[plans[c].category] = dx.date;
          rec.visits.push_back(std::move(dx));
        }
      }
    }

    ehr::canonicalize(rec);
    sink(std::move(rec), std::move(truth));
  }
}

std::pair<std::vector<PatientRecord>, std::vector<GroundTruth>> generate(
    const GeneratorConfig& config) {
  std::vector<PatientRecord> patients;
  std::vector<GroundTruth> truths;
  patients.reserve(config.n_patients);
  truths.reserve(config.n_patients);
  generate(config, [&](PatientRecord&& p, GroundTruth&& t) {
    patients.push_back(std::move(p));
    truths.push_back(std::move(t));
  });
  return {std::move(patients), std::move(truths)};
}

CorpusStats summarize(const std::vector<PatientRecord>& patients) {
  CorpusStats s;
  s.n_patients = patients.size();
  for (const auto& p : patients) {
    s.n_visits += p.visits.size();
    for (const auto& v : p.visits) s.n_codes += v.codes.size();
  }
  s.avg_visits_per_patient = s.n_patients ? double(s.n_visits) / double(s.n_patients) : 0.0;
  return s;
}

// ---------------------------------------------------------------------------
// analytic oracles

namespace {

// per carrier pattern of the rules targeting one cancer:
// (pattern probability, lifetime onset probability)
std::vector<std::pair<double, double>> pattern_table(const GeneratorConfig& cfg,
                                                     const std::string& category) {
  cfg.check();
  const auto plans = plan_cancers(cfg);
  const CancerPlan* plan = nullptr;
  for (const auto& p : plans)
    if (p.category == category) plan = &p;
  if (!plan) fail("no cancer spec for category ", category);
  size_t n_rules = plan->rule_indices.size();
  if (n_rules > 16) fail("too many risk rules to enumerate");
  int eligible = std::max(1, cfg.total_months() - plan->onset_start_month);

  std::vector<std::pair<double, double>> table;
  for (uint64_t mask = 0; mask < (1ull << n_rules); ++mask) {
    double prob = 1.0, mult = 1.0;
    for (size_t b = 0; b < n_rules; ++b) {
      const auto& rule = cfg.risk_rules[plan->rule_indices[b]];
      if (mask >> b & 1) {
        prob *= rule.carrier_prob;
        mult *= rule.hazard_multiplier;
      } else {
        prob *= 1.0 - rule.carrier_prob;
      }
    }
    double onset = 1.0 - std::exp(-plan->monthly_hazard * mult * double(eligible));
    table.emplace_back(prob, onset);
  }
  return table;
}

}  // namespace

double expected_positive_rate(const GeneratorConfig& cfg, const std::string& category) {
  double rate = 0.0;
  for (auto [prob, onset] : pattern_table(cfg, category)) rate += prob * onset;
  return rate;
}

double bayes_oracle_auroc(const GeneratorConfig& cfg, const std::string& category) {
  auto table = pattern_table(cfg, category);
  double p_case = 0.0, p_ctrl = 0.0;
  std::vector<std::pair<double, double>> cases, ctrls;  // (onset score, mass)
  for (auto [prob, onset] : table) {
    cases.emplace_back(onset, prob * onset);
    ctrls.emplace_back(onset, prob * (1.0 - onset));
    p_case += prob * onset;
    p_ctrl += prob * (1.0 - onset);
  }
  if (p_case <= 0 || p_ctrl <= 0) fail("degenerate hazard configuration");
  double auc = 0.0;
  for (auto& [sc, wc] : cases)
    for (auto& [sn, wn] : ctrls) {
      if (sc > sn) auc += wc * wn;
      else if (sc == sn) auc += 0.5 * wc * wn;
    }
  return auc / (p_case * p_ctrl);
}

// ---------------------------------------------------------------------------
// json config / truth

static MedicalCode code_from_json(const json& j) {
  std::optional<std::string> desc;
  if (j.contains("description")) desc = j["description"].get<std::string>();
  return ehr::make_code(j.at("system").get<std::string>(), j.at("value").get<std::string>(), desc);
}

static ordered_json code_to_json(const MedicalCode& c) {
  ordered_json j;
  j["system"] = c.system_name;
  j["value"] = c.value;
  if (c.description) j["description"] = *c.description;
  return j;
}

GeneratorConfig config_from_json(const std::string& text) {
  json j = json::parse(text);
  GeneratorConfig cfg;
  cfg.seed = j.value("seed", uint64_t(0));
  cfg.n_patients = j.value("n_patients", 0);
  cfg.start_year = j.value("start_year", cfg.start_year);
  cfg.end_year = j.value("end_year", cfg.end_year);
  cfg.visit_rate = j.value("visit_rate", cfg.visit_rate);
  cfg.mean_codes_per_visit = j.value("mean_codes_per_visit", cfg.mean_codes_per_visit);
  cfg.min_age = j.value("min_age", cfg.min_age);
  cfg.max_age = j.value("max_age", cfg.max_age);
  cfg.male_fraction = j.value("male_fraction", cfg.male_fraction);
  for (const auto& jc : j.value("code_pool", json::array()))
    cfg.code_pool.push_back({code_from_json(jc), jc.value("frequency", 1.0)});
  for (const auto& jc : j.value("cancers", json::array()))
    cfg.cancers.push_back({code_from_json(jc), jc.value("base_rate", 0.01)});
  for (const auto& jr : j.value("risk_rules", json::array())) {
    RiskRule r;
    r.risk_code = code_from_json(jr.at("risk_code"));
    r.target_cancer = jr.at("target_cancer").get<std::string>();
    r.hazard_multiplier = jr.at("hazard_multiplier").get<double>();
    r.min_lead_months = jr.value("min_lead_months", 12);
    r.carrier_prob = jr.value("carrier_prob", 0.1);
    r.emit_prob = jr.value("emit_prob", 0.25);
    cfg.risk_rules.push_back(std::move(r));
  }
  cfg.check();
  return cfg;
}

std::string config_to_json(const GeneratorConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["n_patients"] = cfg.n_patients;
  j["start_year"] = cfg.start_year;
  j["end_year"] = cfg.end_year;
  j["visit_rate"] = cfg.visit_rate;
  j["mean_codes_per_visit"] = cfg.mean_codes_per_visit;
  j["min_age"] = cfg.min_age;
  j["max_age"] = cfg.max_age;
  j["male_fraction"] = cfg.male_fraction;
  j["code_pool"] = ordered_json::array();
  for (const auto& cf : cfg.code_pool) {
    auto jc = code_to_json(cf.code);
    jc["frequency"] = cf.frequency;
    j["code_pool"].push_back(std::move(jc));
  }
  j["cancers"] = ordered_json::array();
  for (const auto& c : cfg.cancers) {
    auto jc = code_to_json(c.code);
    jc["base_rate"] = c.base_rate;
    j["cancers"].push_back(std::move(jc));
  }
  j["risk_rules"] = ordered_json::array();
  for (const auto& r : cfg.risk_rules) {
    ordered_json jr;
    jr["risk_code"] = code_to_json(r.risk_code);
    jr["target_cancer"] = r.target_cancer;
    jr["hazard_multiplier"] = r.hazard_multiplier;
    jr["min_lead_months"] = r.min_lead_months;
    jr["carrier_prob"] = r.carrier_prob;
    jr["emit_prob"] = r.emit_prob;
    j["risk_rules"].push_back(std::move(jr));
  }
  return j.dump(2);
}

std::string truth_to_json(const GroundTruth& t) {
  ordered_json j;
  j["patient_id"] = t.patient_id;
  j["first_diagnosis"] = ordered_json::object();
  for (const auto& [cat, date] : t.first_diagnosis) j["first_diagnosis"][cat] = date.str();
  j["planted_risk_codes"] = t.planted_risk_codes;
  return j.dump();
}

GroundTruth truth_from_json(const std::string& line, size_t line_number) {
  try {
    json j = json::parse(line);
    GroundTruth t;
    t.patient_id = j.at("patient_id").get<std::string>();
    for (const auto& [cat, date] : j.at("first_diagnosis").items()) {
      auto d = Date::parse(date.get<std::string>());
      if (!d) fail("bad date for ", cat);
      t.first_diagnosis[cat] = *d;
    }
    for (const auto& c : j.value("planted_risk_codes", json::array()))
      t.planted_risk_codes.push_back(c.get<std::string>());
    return t;
  } catch (const std::exception& e) {
    throw ehr::ParseError(line_number, e.what());
  }
}

std::vector<GroundTruth> load_truth(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  std::vector<GroundTruth> out;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    out.push_back(truth_from_json(line, n));
  }
  return out;
}

}  // namespace catchfm::synth
