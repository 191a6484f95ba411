#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <variant>
#include <vector>

#include <Eigen/Core>

#include "catchfm/ehr.hpp"

namespace catchfm::codemap {

// exact mapping table; one target per source, with the table name it came from
struct MappingTable {
  struct Entry {
    std::string target;
    std::string table_name;
  };
  std::unordered_map<std::string, Entry> exact;

  // exact.tsv: source<TAB>target<TAB>table_name
  static MappingTable read_tsv(const std::string& path);
  void write_tsv(const std::string& path) const;
};

// unit-normalized description embeddings for one code universe
class EmbeddingIndex {
 public:
  EmbeddingIndex() = default;
  EmbeddingIndex(std::vector<std::string> codes,
                 Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vectors);

  size_t size() const { return codes_.size(); }
  int dim() const { return int(vectors_.cols()); }
  bool empty() const { return codes_.empty(); }

  std::optional<Eigen::Index> find(const std::string& code) const;
  Eigen::Ref<const Eigen::RowVectorXf> vector(Eigen::Index i) const { return vectors_.row(i); }
  const std::string& code(Eigen::Index i) const { return codes_[size_t(i)]; }

  // exhaustive nearest neighbor by cosine; ties resolved to the
  // lexicographically smallest code
  std::pair<Eigen::Index, double> nearest(Eigen::Ref<const Eigen::RowVectorXf> query) const;

  // embeddings.f32: magic "CFME", u32 count, u32 dim, then per code
  // u16 code length, code bytes, dim x f32
  static EmbeddingIndex read_f32(const std::string& path);
  void write_f32(const std::string& path) const;

 private:
  std::vector<std::string> codes_;
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vectors_;
  std::unordered_map<std::string, Eigen::Index> index_;
};

struct Exact {
  std::string target;
};
struct Soft {
  std::string target;
  double similarity = 0.0;
};
struct Unmapped {};
using MapOutcome = std::variant<Exact, Soft, Unmapped>;

inline constexpr double kDefaultThreshold = 0.98;

// exact entries win unconditionally; otherwise nearest target by cosine,
// accepted only at or above the threshold
MapOutcome map_code(const std::string& source, const MappingTable& table,
                    const EmbeddingIndex& source_index, const EmbeddingIndex& target_index,
                    double threshold = kDefaultThreshold);

struct SystemCoverage {
  size_t distinct_total = 0;
  size_t distinct_exact = 0;
  size_t distinct_soft = 0;
  size_t distinct_unmapped = 0;
  size_t occurrences_total = 0;
  size_t occurrences_dropped = 0;
};

struct CoverageReport {
  std::map<std::string, SystemCoverage> by_system;
  SystemCoverage overall;

  double exact_fraction() const {
    return overall.distinct_total
               ? double(overall.distinct_exact) / double(overall.distinct_total)
               : 0.0;
  }
  double mapped_fraction() const {
    return overall.distinct_total
               ? double(overall.distinct_exact + overall.distinct_soft) /
                     double(overall.distinct_total)
               : 0.0;
  }
};

// Every code is replaced by its mapping or dropped when unmapped; visits that
// lose all codes are dropped. Mapped codes land in the target system given by
// `target_system` (ICD-9 diagnoses for the SNOMED-style use).
std::pair<std::vector<ehr::PatientRecord>, CoverageReport> map_corpus(
    const std::vector<ehr::PatientRecord>& records, const MappingTable& table,
    const EmbeddingIndex& source_index, const EmbeddingIndex& target_index,
    double threshold = kDefaultThreshold, const std::string& target_system = "icd9-diag");

std::string coverage_to_json(const CoverageReport& report);

}  // namespace catchfm::codemap
