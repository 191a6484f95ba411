#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "catchfm/common.hpp"

namespace catchfm::ehr {

// ---------------------------------------------------------------------------
// Coding systems. The four NHIRD-style systems are first-class; anything else
// (SNOMED, RxNorm, ...) is carried through verbatim for cross-ontology mapping.

enum class CodeSystem : uint8_t { Icd9Diag, Icd9Proc, Drug, Order, Other };

struct MedicalCode {
  CodeSystem system = CodeSystem::Other;
  std::string system_name;  // canonical string, e.g. "icd9-diag" or "SNOMED"
  std::string value;        // normalized: uppercase, trimmed, decimal kept
  std::optional<std::string> description;

  // stable within-visit order: diagnoses, procedures, drugs, orders, foreign
  friend bool operator<(const MedicalCode& a, const MedicalCode& b) {
    if (a.system != b.system) return a.system < b.system;
    if (a.system_name != b.system_name) return a.system_name < b.system_name;
    return a.value < b.value;
  }
  friend bool operator==(const MedicalCode& a, const MedicalCode& b) {
    return a.system == b.system && a.system_name == b.system_name && a.value == b.value;
  }
};

CodeSystem system_from_name(std::string_view name);
std::string_view system_canonical_name(CodeSystem s);

// uppercase, strip whitespace, keep the decimal point
std::string normalize_code_value(std::string_view raw);

MedicalCode make_code(std::string_view system, std::string_view value,
                      std::optional<std::string> description = std::nullopt);

// "157" or "157.0" style; 3 digits optionally followed by . and 1-2 digits
bool is_valid_icd9_diag(std::string_view value);

// leading 3-digit category, e.g. "157.0" -> "157"
std::string icd9_category(std::string_view value);

// ICD-9 neoplasm chapter: category in [140, 239]
bool is_cancer_code(const MedicalCode& code);
bool is_cancer_category(std::string_view category);

enum class VisitKind : uint8_t { Outpatient, Inpatient, Pharmacy };

VisitKind visit_kind_from_name(std::string_view name);
std::string_view visit_kind_name(VisitKind k);

struct Visit {
  Date date;
  VisitKind kind = VisitKind::Outpatient;
  std::vector<MedicalCode> codes;  // non-empty, canonically ordered
};

enum class Gender : uint8_t { Male, Female };

struct PatientRecord {
  std::string patient_id;
  int birth_year = 0;
  Gender gender = Gender::Male;
  std::vector<Visit> visits;  // sorted ascending by (date, kind)

  std::optional<Date> first_visit_date() const {
    if (visits.empty()) return std::nullopt;
    return visits.front().date;
  }
  std::optional<Date> last_visit_date() const {
    if (visits.empty()) return std::nullopt;
    return visits.back().date;
  }
};

// sort codes within each visit and visits by (date, kind, insertion order);
// returns true if anything moved
bool canonicalize(PatientRecord& record);

// throws if an invariant cannot be restored by canonicalization
void validate(const PatientRecord& record);

// ---------------------------------------------------------------------------
// Demographic / time bucketing shared by vocabulary and tokenizer.

struct BucketTables {
  // ascending; buckets are [0,e1), [e1,e2), ..., [ek,inf)
  std::vector<int> age_edges;
  // ascending day gaps; bucket 0 is [0,e1) i.e. same-day for e1=1
  std::vector<int> time_edges;

  static BucketTables defaults();

  int age_bucket(int age_years) const;
  int time_bucket(int gap_days) const;
  int n_age_buckets() const { return int(age_edges.size()) + 1; }
  int n_time_buckets() const { return int(time_edges.size()) + 1; }
  std::string age_bucket_name(int bucket) const;
  std::string time_bucket_name(int bucket) const;

  void check() const;  // edges strictly increasing, non-negative
};

// ---------------------------------------------------------------------------
// Token vocabulary: dense ids, specials first, then the fixed demographic and
// time blocks, then codes in first-seen order.

enum class TokenKind : uint8_t { Special, AgeBucket, Gender, TimeBucket, Code };

std::string_view token_kind_name(TokenKind k);
TokenKind token_kind_from_name(std::string_view name);

class Vocabulary {
 public:
  static constexpr int32_t kEos = 0;
  static constexpr int32_t kPad = 1;
  static constexpr int32_t kUnk = 2;

  Vocabulary() = default;

  // fixed blocks only (specials, ages, genders, times); codes appended later
  explicit Vocabulary(const BucketTables& buckets);

  int32_t add_code(const MedicalCode& code);  // idempotent
  int32_t size() const { return int32_t(strings_.size()); }

  std::optional<int32_t> id_of(const std::string& token_string) const;
  const std::string& lookup(int32_t id) const;
  TokenKind kind_of(int32_t id) const;

  int32_t code_id(const MedicalCode& code) const;  // kUnk when absent
  int32_t age_token(int bucket) const { return age_base_ + bucket; }
  int32_t gender_token(Gender g) const { return gender_base_ + int(g); }
  int32_t time_token(int bucket) const { return time_base_ + bucket; }

  int n_codes() const { return size() - code_base_; }
  const BucketTables& buckets() const { return buckets_; }

  static std::string code_token_string(const MedicalCode& code);

  void write_tsv(std::ostream& out) const;
  static Vocabulary read_tsv(std::istream& in);

 private:
  void push(TokenKind kind, std::string s);

  BucketTables buckets_;
  std::vector<std::string> strings_;
  std::vector<TokenKind> kinds_;
  std::unordered_map<std::string, int32_t> index_;
  int32_t age_base_ = 0, gender_base_ = 0, time_base_ = 0, code_base_ = 0;
};

Vocabulary build_vocabulary(const std::vector<PatientRecord>& patients,
                            const BucketTables& buckets);

// ---------------------------------------------------------------------------
// Line-delimited JSON patient files.

struct ParseError : std::runtime_error {
  ParseError(size_t line, const std::string& what)
      : std::runtime_error(concat("line ", line, ": ", what)), line_number(line) {}
  size_t line_number;
};

// Streaming single-consumer reader. Records are canonicalized on load; the
// resort counter tracks inputs whose visits arrived out of order.
class PatientReader {
 public:
  explicit PatientReader(std::istream& in) : in_(in) {}
  std::optional<PatientRecord> next();
  size_t resort_warnings() const { return resort_warnings_; }
  size_t line_number() const { return line_; }

 private:
  std::istream& in_;
  size_t line_ = 0;
  size_t resort_warnings_ = 0;
};

PatientRecord parse_patient_json(const std::string& line, size_t line_number,
                                 bool* resorted = nullptr);
std::string patient_to_json(const PatientRecord& record);

std::vector<PatientRecord> load_patients(const std::string& path,
                                         size_t* resort_warnings = nullptr);
void write_patients(const std::vector<PatientRecord>& patients, const std::string& path);

}  // namespace catchfm::ehr
