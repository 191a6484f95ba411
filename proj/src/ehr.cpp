#include "catchfm/ehr.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include <json.hpp>

namespace catchfm::ehr {

using nlohmann::json;
using nlohmann::ordered_json;

CodeSystem system_from_name(std::string_view name) {
  if (name == "icd9-diag") return CodeSystem::Icd9Diag;
  if (name == "icd9-proc") return CodeSystem::Icd9Proc;
  if (name == "drug") return CodeSystem::Drug;
  if (name == "order") return CodeSystem::Order;
  return CodeSystem::Other;
}

std::string_view system_canonical_name(CodeSystem s) {
  switch (s) {
    case CodeSystem::Icd9Diag: return "icd9-diag";
    case CodeSystem::Icd9Proc: return "icd9-proc";
    case CodeSystem::Drug: return "drug";
    case CodeSystem::Order: return "order";
    case CodeSystem::Other: return "other";
  }
  return "other";
}

std::string normalize_code_value(std::string_view raw) {
  std::string out;
  out.reserve(raw.size());
  for (char c : raw) {
    if (std::isspace(static_cast<unsigned char>(c))) continue;
    out.push_back(char(std::toupper(static_cast<unsigned char>(c))));
  }
  return out;
}

MedicalCode make_code(std::string_view system, std::string_view value,
                      std::optional<std::string> description) {
  MedicalCode code;
  code.system = system_from_name(system);
  code.system_name = code.system == CodeSystem::Other
                         ? std::string(system)
                         : std::string(system_canonical_name(code.system));
  code.value = normalize_code_value(value);
  code.description = std::move(description);
  if (code.value.empty()) fail("medical code value is empty");
  if (code.system == CodeSystem::Icd9Diag && !is_valid_icd9_diag(code.value))
    fail("invalid ICD-9 diagnosis code '", code.value, "'");
  return code;
}

bool is_valid_icd9_diag(std::string_view v) {
  if (v.size() < 3 || v.size() > 6) return false;
  for (int i = 0; i < 3; ++i)
    if (!std::isdigit(static_cast<unsigned char>(v[i]))) return false;
  if (v.size() == 3) return true;
  if (v[3] != '.') return false;
  if (v.size() == 4) return false;
  for (size_t i = 4; i < v.size(); ++i)
    if (!std::isdigit(static_cast<unsigned char>(v[i]))) return false;
  return true;
}

std::string icd9_category(std::string_view value) {
  return std::string(value.substr(0, 3));
}

bool is_cancer_category(std::string_view category) {
  if (category.size() != 3) return false;
  int v = 0;
  for (char c : category) {
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
    v = v * 10 + (c - '0');
  }
  return v >= 140 && v <= 239;
}

bool is_cancer_code(const MedicalCode& code) {
  return code.system == CodeSystem::Icd9Diag && is_cancer_category(icd9_category(code.value));
}

VisitKind visit_kind_from_name(std::string_view name) {
  if (name == "outpatient") return VisitKind::Outpatient;
  if (name == "inpatient") return VisitKind::Inpatient;
  if (name == "pharmacy") return VisitKind::Pharmacy;
  fail("unknown visit kind '", name, "'");
}

std::string_view visit_kind_name(VisitKind k) {
  switch (k) {
    case VisitKind::Outpatient: return "outpatient";
    case VisitKind::Inpatient: return "inpatient";
    case VisitKind::Pharmacy: return "pharmacy";
  }
  return "outpatient";
}

bool canonicalize(PatientRecord& record) {
  bool moved = false;
  for (auto& visit : record.visits) {
    if (!std::is_sorted(visit.codes.begin(), visit.codes.end())) {
      std::stable_sort(visit.codes.begin(), visit.codes.end());
      moved = true;
    }
  }
  auto by_date_kind = [](const Visit& a, const Visit& b) {
    if (a.date != b.date) return a.date < b.date;
    return a.kind < b.kind;
  };
  if (!std::is_sorted(record.visits.begin(), record.visits.end(), by_date_kind)) {
    std::stable_sort(record.visits.begin(), record.visits.end(), by_date_kind);
    moved = true;
  }
  return moved;
}

void validate(const PatientRecord& record) {
  if (record.patient_id.empty()) fail("patient_id is empty");
  Date birth_floor = Date::from_ymd(record.birth_year, 1, 1);
  for (const auto& visit : record.visits) {
    if (visit.codes.empty())
      fail("patient ", record.patient_id, ": visit ", visit.date.str(), " has no codes");
    if (visit.date < birth_floor)
      fail("patient ", record.patient_id, ": visit ", visit.date.str(),
           " precedes birth year ", record.birth_year);
  }
}

// ---------------------------------------------------------------------------
// buckets

BucketTables BucketTables::defaults() {
  BucketTables t;
  // 5-year sub-buckets within the 0/18/35/50/70/120 reporting bands
  for (int e : {5, 10, 15, 18, 23, 28, 33, 35, 40, 45, 50, 55, 60, 65,
                70, 75, 80, 85, 90, 95, 100, 105, 110, 115, 120})
    t.age_edges.push_back(e);
  t.time_edges = {1, 8, 31, 91, 366};  // same-day, 1-7d, 8-30d, 31-90d, 91-365d, >365d
  t.check();
  return t;
}

void BucketTables::check() const {
  auto strictly_increasing = [](const std::vector<int>& v) {
    for (size_t i = 1; i < v.size(); ++i)
      if (v[i] <= v[i - 1]) return false;
    return v.empty() || v.front() > 0;
  };
  if (!strictly_increasing(age_edges)) fail("age bucket edges must be strictly increasing and positive");
  if (!strictly_increasing(time_edges)) fail("time bucket edges must be strictly increasing and positive");
}

int BucketTables::age_bucket(int age_years) const {
  int a = std::max(age_years, 0);
  auto it = std::upper_bound(age_edges.begin(), age_edges.end(), a);
  return int(it - age_edges.begin());
}

int BucketTables::time_bucket(int gap_days) const {
  int g = std::max(gap_days, 0);
  auto it = std::upper_bound(time_edges.begin(), time_edges.end(), g);
  return int(it - time_edges.begin());
}

std::string BucketTables::age_bucket_name(int bucket) const {
  int lo = bucket == 0 ? 0 : age_edges[bucket - 1];
  if (bucket == int(age_edges.size())) return concat("age:", lo, "+");
  return concat("age:", lo, "-", age_edges[bucket]);
}

std::string BucketTables::time_bucket_name(int bucket) const {
  int lo = bucket == 0 ? 0 : time_edges[bucket - 1];
  if (bucket == int(time_edges.size())) return concat("gap:", lo, "+d");
  return concat("gap:", lo, "-", time_edges[bucket], "d");
}

// ---------------------------------------------------------------------------
// vocabulary

std::string_view token_kind_name(TokenKind k) {
  switch (k) {
    case TokenKind::Special: return "special";
    case TokenKind::AgeBucket: return "age-bucket";
    case TokenKind::Gender: return "gender";
    case TokenKind::TimeBucket: return "time-bucket";
    case TokenKind::Code: return "code";
  }
  return "special";
}

TokenKind token_kind_from_name(std::string_view name) {
  if (name == "special") return TokenKind::Special;
  if (name == "age-bucket") return TokenKind::AgeBucket;
  if (name == "gender") return TokenKind::Gender;
  if (name == "time-bucket") return TokenKind::TimeBucket;
  if (name == "code") return TokenKind::Code;
  fail("unknown token kind '", name, "'");
}

Vocabulary::Vocabulary(const BucketTables& buckets) : buckets_(buckets) {
  buckets_.check();
  push(TokenKind::Special, "[EOS]");
  push(TokenKind::Special, "[PAD]");
  push(TokenKind::Special, "[UNK]");
  age_base_ = size();
  for (int b = 0; b < buckets_.n_age_buckets(); ++b)
    push(TokenKind::AgeBucket, buckets_.age_bucket_name(b));
  gender_base_ = size();
  push(TokenKind::Gender, "gender:male");
  push(TokenKind::Gender, "gender:female");
  time_base_ = size();
  for (int b = 0; b < buckets_.n_time_buckets(); ++b)
    push(TokenKind::TimeBucket, buckets_.time_bucket_name(b));
  code_base_ = size();
}

void Vocabulary::push(TokenKind kind, std::string s) {
  int32_t id = size();
  index_.emplace(s, id);
  strings_.push_back(std::move(s));
  kinds_.push_back(kind);
}

std::string Vocabulary::code_token_string(const MedicalCode& code) {
  return concat(code.system_name, ":", code.value);
}

int32_t Vocabulary::add_code(const MedicalCode& code) {
  std::string s = code_token_string(code);
  auto it = index_.find(s);
  if (it != index_.end()) return it->second;
  int32_t id = size();
  push(TokenKind::Code, std::move(s));
  return id;
}

std::optional<int32_t> Vocabulary::id_of(const std::string& token_string) const {
  auto it = index_.find(token_string);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

const std::string& Vocabulary::lookup(int32_t id) const {
  if (id < 0 || id >= size()) fail("token id ", id, " out of range (V=", size(), ")");
  return strings_[id];
}

TokenKind Vocabulary::kind_of(int32_t id) const {
  if (id < 0 || id >= size()) fail("token id ", id, " out of range (V=", size(), ")");
  return kinds_[id];
}

int32_t Vocabulary::code_id(const MedicalCode& code) const {
  auto it = index_.find(code_token_string(code));
  return it == index_.end() ? kUnk : it->second;
}

void Vocabulary::write_tsv(std::ostream& out) const {
  for (int32_t id = 0; id < size(); ++id)
    out << id << '\t' << token_kind_name(kinds_[id]) << '\t' << strings_[id] << '\n';
}

Vocabulary Vocabulary::read_tsv(std::istream& in) {
  // bucket tables are reconstructed from the age/time token names
  std::string line;
  std::vector<std::pair<TokenKind, std::string>> rows;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 3) fail("vocab.tsv line ", n, ": expected 3 tab-separated fields");
    if (std::stol(parts[0]) != long(rows.size()))
      fail("vocab.tsv line ", n, ": ids must be dense and sorted");
    rows.emplace_back(token_kind_from_name(parts[1]), parts[2]);
  }
  BucketTables buckets;
  auto edge_from = [](const std::string& s) -> std::optional<int> {
    // "age:5-10" -> 10, "age:120+" -> none
    auto dash = s.find('-', s.find(':'));
    if (dash == std::string::npos) return std::nullopt;
    return std::stoi(s.substr(dash + 1));
  };
  for (auto& [kind, s] : rows) {
    if (kind == TokenKind::AgeBucket) {
      if (auto e = edge_from(s)) buckets.age_edges.push_back(*e);
    } else if (kind == TokenKind::TimeBucket) {
      std::string body = s.substr(0, s.size() - 1);  // strip trailing 'd'
      if (auto e = edge_from(body)) buckets.time_edges.push_back(*e);
    }
  }
  Vocabulary v(buckets);
  for (size_t i = 0; i < rows.size(); ++i) {
    auto& [kind, s] = rows[i];
    if (kind != TokenKind::Code) {
      if (size_t(v.size()) <= i && kind != TokenKind::Code)
        fail("vocab.tsv: fixed block mismatch at id ", i);
      if (v.strings_[i] != s) fail("vocab.tsv: token ", i, " '", s, "' does not match fixed block '",
                                   v.strings_[i], "'");
    } else {
      v.push(TokenKind::Code, s);
    }
  }
  return v;
}

Vocabulary build_vocabulary(const std::vector<PatientRecord>& patients,
                            const BucketTables& buckets) {
  Vocabulary v(buckets);
  for (const auto& p : patients)
    for (const auto& visit : p.visits)
      for (const auto& code : visit.codes) v.add_code(code);
  return v;
}

// ---------------------------------------------------------------------------
// JSONL io

static Gender gender_from_name(std::string_view name) {
  if (name == "male") return Gender::Male;
  if (name == "female") return Gender::Female;
  fail("unknown gender '", name, "'");
}

PatientRecord parse_patient_json(const std::string& line, size_t line_number, bool* resorted) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw ParseError(line_number, concat("malformed JSON: ", e.what()));
  }
  try {
    if (!j.contains("patient_id")) fail("missing \"patient_id\"");
    if (!j.contains("birth_year")) fail("missing \"birth_year\"");
    if (!j.contains("gender")) fail("missing \"gender\"");
    if (!j.contains("visits")) fail("missing \"visits\"");
    PatientRecord r;
    r.patient_id = j["patient_id"].get<std::string>();
    r.birth_year = j["birth_year"].get<int>();
    r.gender = gender_from_name(j["gender"].get<std::string>());
    for (const auto& jv : j["visits"]) {
      Visit visit;
      auto date = Date::parse(jv.at("date").get<std::string>());
      if (!date) fail("bad date '", jv.at("date").get<std::string>(), "'");
      visit.date = *date;
      visit.kind = visit_kind_from_name(jv.at("kind").get<std::string>());
      for (const auto& jc : jv.at("codes")) {
        std::optional<std::string> desc;
        if (jc.contains("description")) desc = jc["description"].get<std::string>();
        visit.codes.push_back(
            make_code(jc.at("system").get<std::string>(), jc.at("value").get<std::string>(), desc));
      }
      r.visits.push_back(std::move(visit));
    }
    bool moved = canonicalize(r);
    if (resorted) *resorted = moved;
    validate(r);
    return r;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(line_number, e.what());
  }
}

std::string patient_to_json(const PatientRecord& record) {
  ordered_json j;
  j["patient_id"] = record.patient_id;
  j["birth_year"] = record.birth_year;
  j["gender"] = record.gender == Gender::Male ? "male" : "female";
  j["visits"] = ordered_json::array();
  for (const auto& visit : record.visits) {
    ordered_json jv;
    jv["date"] = visit.date.str();
    jv["kind"] = std::string(visit_kind_name(visit.kind));
    jv["codes"] = ordered_json::array();
    for (const auto& code : visit.codes) {
      ordered_json jc;
      jc["system"] = code.system_name;
      jc["value"] = code.value;
      if (code.description) jc["description"] = *code.description;
      jv["codes"].push_back(std::move(jc));
    }
    j["visits"].push_back(std::move(jv));
  }
  return j.dump();
}

std::optional<PatientRecord> PatientReader::next() {
  std::string line;
  while (std::getline(in_, line)) {
    ++line_;
    if (trim(line).empty()) continue;
    bool resorted = false;
    PatientRecord r = parse_patient_json(line, line_, &resorted);
    if (resorted) ++resort_warnings_;
    return r;
  }
  return std::nullopt;
}

std::vector<PatientRecord> load_patients(const std::string& path, size_t* resort_warnings) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  PatientReader reader(in);
  std::vector<PatientRecord> out;
  while (auto r = reader.next()) out.push_back(std::move(*r));
  if (resort_warnings) *resort_warnings = reader.resort_warnings();
  return out;
}

void write_patients(const std::vector<PatientRecord>& patients, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail("cannot open ", path, " for writing");
  for (const auto& p : patients) out << patient_to_json(p) << '\n';
}

}  // namespace catchfm::ehr
