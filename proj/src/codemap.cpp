#include "catchfm/codemap.hpp"

#include <cstring>
#include <fstream>

#include <json.hpp>

namespace catchfm::codemap {

using nlohmann::ordered_json;

MappingTable MappingTable::read_tsv(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  MappingTable t;
  std::string line;
  size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    auto parts = split(line, '\t');
    if (parts.size() != 3) fail(path, " line ", n, ": expected source<TAB>target<TAB>table_name");
    auto [it, inserted] = t.exact.emplace(parts[0], Entry{parts[1], parts[2]});
    if (!inserted && it->second.target != parts[1])
      fail(path, " line ", n, ": conflicting targets for source ", parts[0]);
  }
  return t;
}

void MappingTable::write_tsv(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail("cannot open ", path, " for writing");
  std::vector<std::pair<std::string, Entry>> rows(exact.begin(), exact.end());
  std::sort(rows.begin(), rows.end(),
            [](const auto& a, const auto& b) { return a.first < b.first; });
  for (const auto& [src, e] : rows) out << src << '\t' << e.target << '\t' << e.table_name << '\n';
}

EmbeddingIndex::EmbeddingIndex(
    std::vector<std::string> codes,
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vectors)
    : codes_(std::move(codes)), vectors_(std::move(vectors)) {
  if (Eigen::Index(codes_.size()) != vectors_.rows())
    fail("embedding index: ", codes_.size(), " codes vs ", vectors_.rows(), " vectors");
  for (Eigen::Index i = 0; i < vectors_.rows(); ++i) {
    float norm = vectors_.row(i).norm();
    if (!(norm > 0)) fail("zero embedding vector for ", codes_[size_t(i)]);
    vectors_.row(i) /= norm;
  }
  for (size_t i = 0; i < codes_.size(); ++i) {
    if (!index_.emplace(codes_[i], Eigen::Index(i)).second)
      fail("duplicate embedding for code ", codes_[i]);
  }
}

std::optional<Eigen::Index> EmbeddingIndex::find(const std::string& code) const {
  auto it = index_.find(code);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

std::pair<Eigen::Index, double> EmbeddingIndex::nearest(
    Eigen::Ref<const Eigen::RowVectorXf> query) const {
  if (empty()) fail("nearest-neighbor query on an empty index");
  if (query.cols() != vectors_.cols())
    fail("embedding dimension mismatch: query ", query.cols(), " vs index ", vectors_.cols());
  Eigen::VectorXf sims = vectors_ * query.transpose();
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < sims.size(); ++i) {
    if (sims(i) > sims(best) ||
        (sims(i) == sims(best) && codes_[size_t(i)] < codes_[size_t(best)]))
      best = i;
  }
  return {best, double(sims(best))};
}

static constexpr char kMagic[4] = {'C', 'F', 'M', 'E'};

EmbeddingIndex EmbeddingIndex::read_f32(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0) fail(path, ": bad magic");
  auto u32 = [&]() {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) fail(path, ": truncated header");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  };
  uint32_t count = u32(), dim = u32();
  if (dim == 0 || dim > 65536) fail(path, ": implausible embedding dimension ", dim);
  std::vector<std::string> codes;
  codes.reserve(count);
  Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> vecs(count, dim);
  for (uint32_t i = 0; i < count; ++i) {
    unsigned char lenb[2];
    in.read(reinterpret_cast<char*>(lenb), 2);
    if (in.gcount() != 2) fail(path, ": truncated code length for entry ", i);
    uint16_t len = uint16_t(lenb[0]) | uint16_t(uint16_t(lenb[1]) << 8);
    std::string code(len, '\0');
    in.read(code.data(), len);
    if (in.gcount() != len) fail(path, ": truncated code for entry ", i);
    in.read(reinterpret_cast<char*>(vecs.row(i).data()), std::streamsize(dim * sizeof(float)));
    if (size_t(in.gcount()) != dim * sizeof(float)) fail(path, ": truncated vector for ", code);
    codes.push_back(std::move(code));
  }
  return EmbeddingIndex(std::move(codes), std::move(vecs));
}

void EmbeddingIndex::write_f32(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open ", path, " for writing");
  out.write(kMagic, 4);
  auto u32 = [&](uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  u32(uint32_t(codes_.size()));
  u32(uint32_t(vectors_.cols()));
  for (size_t i = 0; i < codes_.size(); ++i) {
    uint16_t len = uint16_t(codes_[i].size());
    unsigned char lenb[2] = {static_cast<unsigned char>(len & 0xff),
                             static_cast<unsigned char>((len >> 8) & 0xff)};
    out.write(reinterpret_cast<const char*>(lenb), 2);
    out.write(codes_[i].data(), len);
    out.write(reinterpret_cast<const char*>(vectors_.row(Eigen::Index(i)).data()),
              std::streamsize(size_t(vectors_.cols()) * sizeof(float)));
  }
}

MapOutcome map_code(const std::string& source, const MappingTable& table,
                    const EmbeddingIndex& source_index, const EmbeddingIndex& target_index,
                    double threshold) {
  auto it = table.exact.find(source);
  if (it != table.exact.end()) return Exact{it->second.target};
  if (source_index.empty() || target_index.empty()) return Unmapped{};
  auto src = source_index.find(source);
  if (!src) return Unmapped{};
  if (source_index.dim() != target_index.dim())
    fail("embedding dimension mismatch: source ", source_index.dim(), " vs target ",
         target_index.dim());
  auto [best, sim] = target_index.nearest(source_index.vector(*src));
  if (sim >= threshold) return Soft{target_index.code(best), sim};
  return Unmapped{};
}

std::pair<std::vector<ehr::PatientRecord>, CoverageReport> map_corpus(
    const std::vector<ehr::PatientRecord>& records, const MappingTable& table,
    const EmbeddingIndex& source_index, const EmbeddingIndex& target_index, double threshold,
    const std::string& target_system) {
  // per-code mapping is stateless, so cache outcomes across the corpus
  std::unordered_map<std::string, MapOutcome> cache;
  auto outcome_for = [&](const std::string& source) -> const MapOutcome& {
    auto it = cache.find(source);
    if (it == cache.end())
      it = cache.emplace(source, map_code(source, table, source_index, target_index, threshold))
               .first;
    return it->second;
  };

  CoverageReport report;
  std::unordered_map<std::string, int> seen;  // "system\tvalue" -> 0 exact / 1 soft / 2 unmapped

  std::vector<ehr::PatientRecord> mapped;
  mapped.reserve(records.size());
  for (const auto& rec : records) {
    ehr::PatientRecord out = rec;
    out.visits.clear();
    for (const auto& visit : rec.visits) {
      ehr::Visit v;
      v.date = visit.date;
      v.kind = visit.kind;
      for (const auto& code : visit.codes) {
        const MapOutcome& m = outcome_for(code.value);
        auto& sys = report.by_system[code.system_name];
        std::string key = concat(code.system_name, "\t", code.value);
        bool first_seen = !seen.count(key);
        ++sys.occurrences_total;
        ++report.overall.occurrences_total;
        int kind;
        if (std::holds_alternative<Exact>(m)) {
          v.codes.push_back(ehr::make_code(target_system, std::get<Exact>(m).target));
          kind = 0;
        } else if (std::holds_alternative<Soft>(m)) {
          v.codes.push_back(ehr::make_code(target_system, std::get<Soft>(m).target));
          kind = 1;
        } else {
          ++sys.occurrences_dropped;
          ++report.overall.occurrences_dropped;
          kind = 2;
        }
        if (first_seen) {
          seen.emplace(key, kind);
          ++sys.distinct_total;
          ++report.overall.distinct_total;
          if (kind == 0) { ++sys.distinct_exact; ++report.overall.distinct_exact; }
          else if (kind == 1) { ++sys.distinct_soft; ++report.overall.distinct_soft; }
          else { ++sys.distinct_unmapped; ++report.overall.distinct_unmapped; }
        }
      }
      if (!v.codes.empty()) out.visits.push_back(std::move(v));
    }
    ehr::canonicalize(out);
    mapped.push_back(std::move(out));
  }
  return {std::move(mapped), std::move(report)};
}

static ordered_json coverage_json(const SystemCoverage& c) {
  ordered_json j;
  j["distinct_total"] = c.distinct_total;
  j["distinct_exact"] = c.distinct_exact;
  j["distinct_soft"] = c.distinct_soft;
  j["distinct_unmapped"] = c.distinct_unmapped;
  j["occurrences_total"] = c.occurrences_total;
  j["occurrences_dropped"] = c.occurrences_dropped;
  return j;
}

std::string coverage_to_json(const CoverageReport& report) {
  ordered_json j;
  j["overall"] = coverage_json(report.overall);
  j["overall"]["exact_fraction"] = report.exact_fraction();
  j["overall"]["mapped_fraction"] = report.mapped_fraction();
  j["by_system"] = ordered_json::object();
  for (const auto& [name, c] : report.by_system) j["by_system"][name] = coverage_json(c);
  return j.dump(2);
}

}  // namespace catchfm::codemap
