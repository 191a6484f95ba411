#include "catchfm/cohort.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <unordered_map>

#include <json.hpp>

namespace catchfm::cohort {

using ehr::PatientRecord;
using ehr::Visit;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Valid: return "valid";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_name(std::string_view name) {
  if (name == "train") return Split::Train;
  if (name == "valid") return Split::Valid;
  if (name == "test") return Split::Test;
  fail("unknown split '", name, "'");
}

void CohortSpec::check() const {
  if (!ehr::is_cancer_category(target_cancer))
    fail("target_cancer '", target_cancer, "' is not a neoplasm category (140-239)");
  if (exclusion_window_months != 6 && exclusion_window_months != 12)
    fail("exclusion_window_months must be 6 or 12");
  if (!(history_window_years > 0)) fail("history_window_years must be positive");
  if (control_ratio < 1) fail("control_ratio must be at least 1");
}

Date CohortSpec::history_start(Date index) const {
  return index.add_months(-int(std::lround(history_window_years * 12.0)));
}

Date CohortSpec::history_end(Date index) const {
  return index.add_months(-exclusion_window_months);
}

size_t CohortDataset::n_positive() const {
  size_t n = 0;
  for (const auto& e : examples) n += size_t(e.label);
  return n;
}

double CohortDataset::positive_rate() const {
  return examples.empty() ? 0.0 : double(n_positive()) / double(examples.size());
}

namespace {

std::vector<Visit> truncate_history(const PatientRecord& record, Date index,
                                    const CohortSpec& spec) {
  Date lo = spec.history_start(index), hi = spec.history_end(index);
  std::vector<Visit> out;
  for (const auto& v : record.visits)
    if (v.date >= lo && v.date <= hi) out.push_back(v);
  return out;
}

// at least one year of history before the exclusion window opens
bool has_sufficient_history(const PatientRecord& record, Date index, const CohortSpec& spec) {
  auto first = record.first_visit_date();
  if (!first) return false;
  return *first <= spec.history_end(index).add_months(-12);
}

int age_bucket5(int birth_year, Date at) {
  return std::max(0, at.year() - birth_year) / 5;
}

bool within_band(int32_t value, int32_t reference, double tol = 0.10) {
  return std::abs(double(value) - double(reference)) <= tol * std::abs(double(reference));
}

}  // namespace

CohortExample make_example(const PatientRecord& record, Date index_date, int label,
                           const CohortSpec& spec) {
  CohortExample e;
  e.patient_id = record.patient_id;
  e.index_date = index_date;
  e.label = label;
  e.history = truncate_history(record, index_date, spec);
  e.birth_year = record.birth_year;
  e.gender = record.gender;
  e.first_visit = record.first_visit_date().value_or(index_date);
  e.last_visit = record.last_visit_date().value_or(index_date);
  return e;
}

std::vector<CohortExample> select_cases(const std::vector<PatientRecord>& patients,
                                        const CohortSpec& spec) {
  spec.check();
  std::vector<CohortExample> cases;
  for (const auto& p : patients) {
    std::optional<Date> index;
    for (const auto& v : p.visits) {
      for (const auto& c : v.codes)
        if (c.system == ehr::CodeSystem::Icd9Diag &&
            ehr::icd9_category(c.value) == spec.target_cancer) {
          index = v.date;
          break;
        }
      if (index) break;
    }
    if (!index) continue;

    bool prior_other_cancer = false, prior_target = false;
    for (const auto& v : p.visits) {
      if (v.date >= *index) break;
      for (const auto& c : v.codes) {
        if (!ehr::is_cancer_code(c)) continue;
        if (ehr::icd9_category(c.value) == spec.target_cancer) prior_target = true;
        else prior_other_cancer = true;
      }
    }
    if (prior_target) continue;  // index must be the first target occurrence
    bool eligible = spec.cohort_kind == CohortKind::First ? !prior_other_cancer
                                                          : prior_other_cancer;
    if (!eligible) continue;
    if (!has_sufficient_history(p, *index, spec)) continue;
    CohortExample e = make_example(p, *index, 1, spec);
    if (e.history.empty()) continue;
    cases.push_back(std::move(e));
  }
  return cases;
}

std::vector<const PatientRecord*> control_pool(const std::vector<PatientRecord>& patients) {
  std::vector<const PatientRecord*> pool;
  for (const auto& p : patients) {
    bool clean = !p.visits.empty();
    for (const auto& v : p.visits) {
      for (const auto& c : v.codes)
        if (ehr::is_cancer_code(c)) {
          clean = false;
          break;
        }
      if (!clean) break;
    }
    if (clean) pool.push_back(&p);
  }
  return pool;
}

std::vector<CohortExample> match_controls(const std::vector<CohortExample>& cases,
                                          const std::vector<const PatientRecord*>& pool,
                                          const CohortSpec& spec, uint64_t seed,
                                          MatchReport* report) {
  spec.check();
  // visit-day index over the pool (each patient listed once per day)
  std::unordered_map<int32_t, std::vector<size_t>> by_day;
  for (size_t i = 0; i < pool.size(); ++i) {
    int32_t last = INT32_MIN;
    for (const auto& v : pool[i]->visits) {
      if (v.date.days() != last) by_day[v.date.days()].push_back(i);
      last = v.date.days();
    }
  }

  std::vector<bool> used(pool.size(), false);
  std::vector<CohortExample> controls;
  Rng root = Rng(seed).sub("match_controls");

  for (size_t ci = 0; ci < cases.size(); ++ci) {
    const auto& kase = cases[ci];
    Rng rng = root.sub(uint64_t(ci));
    const int32_t case_to_index = kase.index_date - kase.first_visit;
    const int32_t case_lifetime = kase.last_visit - kase.first_visit;

    std::vector<std::pair<size_t, Date>> eligible;  // (pool index, control index date)
    if (spec.matching == Matching::Controlled) {
      auto it = by_day.find(kase.index_date.days());
      if (it != by_day.end()) {
        for (size_t i : it->second) {
          if (used[i]) continue;
          const PatientRecord& cand = *pool[i];
          if (cand.gender != kase.gender) continue;
          if (age_bucket5(cand.birth_year, kase.index_date) !=
              age_bucket5(kase.birth_year, kase.index_date))
            continue;
          Date first = *cand.first_visit_date(), last = *cand.last_visit_date();
          if (!within_band(kase.index_date - first, case_to_index)) continue;
          if (!within_band(last - first, case_lifetime)) continue;
          eligible.emplace_back(i, kase.index_date);
        }
      }
    } else {
      // nearest visit within +-30 days; earlier date wins a distance tie
      std::unordered_map<size_t, Date> nearest;
      for (int delta = 0; delta <= 30; ++delta) {
        for (int sign : {-1, 1}) {
          if (delta == 0 && sign == 1) continue;
          auto it = by_day.find(kase.index_date.days() + sign * delta);
          if (it == by_day.end()) continue;
          for (size_t i : it->second)
            if (!used[i]) nearest.try_emplace(i, Date(kase.index_date.days() + sign * delta));
        }
      }
      eligible.assign(nearest.begin(), nearest.end());
      std::sort(eligible.begin(), eligible.end(),
                [](const auto& a, const auto& b) { return a.first < b.first; });
    }

    // controls must themselves survive the history rules
    std::erase_if(eligible, [&](const std::pair<size_t, Date>& cand) {
      const PatientRecord& rec = *pool[cand.first];
      if (!has_sufficient_history(rec, cand.second, spec)) return true;
      return truncate_history(rec, cand.second, spec).empty();
    });

    rng.shuffle(eligible);
    int taken = 0;
    for (const auto& [i, index_date] : eligible) {
      if (taken >= spec.control_ratio) break;
      used[i] = true;
      controls.push_back(make_example(*pool[i], index_date, 0, spec));
      ++taken;
    }
    if (taken < spec.control_ratio && report)
      report->unmatched.push_back({kase.patient_id, taken});
  }
  return controls;
}

CohortDataset assemble(std::vector<CohortExample> cases, std::vector<CohortExample> controls,
                       const CohortSpec& spec, uint64_t seed) {
  spec.check();
  if (cases.size() < 10)
    fail("cannot stratify: only ", cases.size(), " positives (need at least 10)");

  CohortDataset ds;
  ds.spec = spec;
  ds.examples.reserve(cases.size() + controls.size());
  for (auto& e : cases) ds.examples.push_back(std::move(e));
  for (auto& e : controls) ds.examples.push_back(std::move(e));
  ds.split.assign(ds.examples.size(), Split::Train);

  Rng root = Rng(seed).sub("assemble");
  auto stratify = [&](std::vector<size_t>& idx, Rng rng) {
    rng.shuffle(idx);
    size_t n = idx.size();
    size_t n_test = size_t(std::lround(0.1 * double(n)));
    size_t n_valid = size_t(std::lround(0.1 * double(n)));
    for (size_t k = 0; k < n; ++k) {
      if (k < n_test) ds.split[idx[k]] = Split::Test;
      else if (k < n_test + n_valid) ds.split[idx[k]] = Split::Valid;
      else ds.split[idx[k]] = Split::Train;
    }
  };
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < ds.examples.size(); ++i)
    (ds.examples[i].label ? pos : neg).push_back(i);
  stratify(pos, root.sub("pos"));
  stratify(neg, root.sub("neg"));
  return ds;
}

void write_cohort(const CohortDataset& dataset, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open ", path, " for writing");
  for (size_t i = 0; i < dataset.examples.size(); ++i) {
    const auto& e = dataset.examples[i];
    ordered_json j;
    j["patient_id"] = e.patient_id;
    j["index_date"] = e.index_date.str();
    j["label"] = e.label;
    j["split"] = std::string(split_name(dataset.split[i]));
    out << j.dump() << '\n';
  }
}

std::vector<CohortRow> read_cohort(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  std::vector<CohortRow> rows;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      json j = json::parse(line);
      CohortRow r;
      r.patient_id = j.at("patient_id").get<std::string>();
      auto d = Date::parse(j.at("index_date").get<std::string>());
      if (!d) fail("bad index_date");
      r.index_date = *d;
      r.label = j.at("label").get<int>();
      r.split = split_from_name(j.at("split").get<std::string>());
      rows.push_back(std::move(r));
    } catch (const std::exception& e) {
      throw ehr::ParseError(n, e.what());
    }
  }
  return rows;
}

}  // namespace catchfm::cohort
