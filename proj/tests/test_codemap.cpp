#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "catchfm/codemap.hpp"

using namespace catchfm;
using namespace catchfm::codemap;
using Vectors = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

EmbeddingIndex make_index(const std::vector<std::string>& codes,
                          const std::vector<std::vector<float>>& vecs) {
  Vectors m(Eigen::Index(vecs.size()), Eigen::Index(vecs[0].size()));
  for (size_t i = 0; i < vecs.size(); ++i)
    for (size_t j = 0; j < vecs[i].size(); ++j) m(Eigen::Index(i), Eigen::Index(j)) = vecs[i][j];
  return EmbeddingIndex(codes, std::move(m));
}

ehr::PatientRecord foreign_patient(const std::string& id,
                                   const std::vector<std::string>& codes) {
  ehr::PatientRecord p;
  p.patient_id = id;
  p.birth_year = 1950;
  p.gender = ehr::Gender::Male;
  ehr::Visit v;
  v.date = Date::from_ymd(2010, 1, 1);
  for (const auto& c : codes) v.codes.push_back(ehr::make_code("SNOMED", c));
  p.visits.push_back(v);
  ehr::canonicalize(p);
  return p;
}

}  // namespace

TEST_CASE("exact table entries win unconditionally, embeddings ignored") {
  MappingTable table;
  table.exact["S1"] = {"157", "nlm"};
  // a contradicting embedding pointing elsewhere with perfect similarity
  auto src = make_index({"S1"}, {{1, 0}});
  auto tgt = make_index({"999"}, {{1, 0}});
  auto outcome = map_code("S1", table, src, tgt);
  REQUIRE(std::holds_alternative<Exact>(outcome));
  CHECK(std::get<Exact>(outcome).target == "157");
}

TEST_CASE("identical vectors soft-match at similarity 1") {
  MappingTable table;
  auto src = make_index({"S1"}, {{0.6f, 0.8f}});
  auto tgt = make_index({"401", "250"}, {{0.6f, 0.8f}, {-0.8f, 0.6f}});
  auto outcome = map_code("S1", table, src, tgt);
  REQUIRE(std::holds_alternative<Soft>(outcome));
  CHECK(std::get<Soft>(outcome).target == "401");
  CHECK(std::get<Soft>(outcome).similarity == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("similarity below the 0.98 cutoff stays unmapped") {
  MappingTable table;
  // cos = 0.97 exactly
  float s = 0.97f, c = std::sqrt(1.0f - s * s);
  auto src = make_index({"S1"}, {{1, 0}});
  auto tgt = make_index({"401"}, {{s, c}});
  CHECK(std::holds_alternative<Unmapped>(map_code("S1", table, src, tgt)));
  // at >= 0.98 the same geometry maps
  s = 0.985f;
  c = std::sqrt(1.0f - s * s);
  auto tgt2 = make_index({"401"}, {{s, c}});
  CHECK(std::holds_alternative<Soft>(map_code("S1", table, src, tgt2)));
}

TEST_CASE("raising the threshold never converts unmapped to soft") {
  MappingTable table;
  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    float a = float(rng.normal()), b = float(rng.normal());
    float n = std::sqrt(a * a + b * b);
    auto src = make_index({"S"}, {{a / n, b / n}});
    auto tgt = make_index({"T"}, {{1, 0}});
    bool soft_low = std::holds_alternative<Soft>(map_code("S", table, src, tgt, 0.90));
    bool soft_high = std::holds_alternative<Soft>(map_code("S", table, src, tgt, 0.99));
    if (soft_high) CHECK(soft_low);
  }
}

TEST_CASE("similarity ties resolve to the lexicographically smallest target") {
  MappingTable table;
  auto src = make_index({"S1"}, {{1, 0}});
  auto tgt = make_index({"402", "401", "403"}, {{1, 0}, {1, 0}, {1, 0}});
  auto outcome = map_code("S1", table, src, tgt);
  REQUIRE(std::holds_alternative<Soft>(outcome));
  CHECK(std::get<Soft>(outcome).target == "401");
}

TEST_CASE("dimension mismatches are an error") {
  MappingTable table;
  auto src = make_index({"S1"}, {{1, 0, 0}});
  auto tgt = make_index({"401"}, {{1, 0}});
  CHECK_THROWS(map_code("S1", table, src, tgt));
}

TEST_CASE("unknown sources without table entry or embedding are unmapped") {
  MappingTable table;
  auto src = make_index({"KNOWN"}, {{1, 0}});
  auto tgt = make_index({"401"}, {{1, 0}});
  CHECK(std::holds_alternative<Unmapped>(map_code("MYSTERY", table, src, tgt)));
  EmbeddingIndex empty_src, empty_tgt;
  CHECK(std::holds_alternative<Unmapped>(map_code("ANY", table, empty_src, empty_tgt)));
}

TEST_CASE("zero and duplicate embedding vectors are rejected at load") {
  CHECK_THROWS(make_index({"A"}, {{0, 0}}));
  CHECK_THROWS(make_index({"A", "A"}, {{1, 0}, {0, 1}}));
}

TEST_CASE("map_corpus replaces exact-mapped codes and drops the unmapped") {
  MappingTable table;
  table.exact["S1"] = {"157", "t"};
  table.exact["S2"] = {"401", "t"};
  EmbeddingIndex none_src, none_tgt;
  std::vector<ehr::PatientRecord> records{foreign_patient("P1", {"S1", "S2", "S3"}),
                                          foreign_patient("P2", {"S3"})};
  auto [mapped, report] = map_corpus(records, table, none_src, none_tgt);
  REQUIRE(mapped.size() == 2);
  REQUIRE(mapped[0].visits.size() == 1);
  CHECK(mapped[0].visits[0].codes.size() == 2);
  CHECK(mapped[0].visits[0].codes[0].system == ehr::CodeSystem::Icd9Diag);
  CHECK(mapped[1].visits.empty());  // its only code was dropped, so the visit went too

  CHECK(report.overall.distinct_total == 3);
  CHECK(report.overall.distinct_exact == 2);
  CHECK(report.overall.distinct_unmapped == 1);
  CHECK(report.overall.occurrences_dropped == 2);
  CHECK(report.by_system.at("SNOMED").distinct_total == 3);
}

TEST_CASE("a fully exact-covered corpus maps at 100%, an empty setup at 0%") {
  MappingTable table;
  table.exact["S1"] = {"157", "t"};
  EmbeddingIndex none;
  auto [mapped_full, full] = map_corpus({foreign_patient("P1", {"S1"})}, table, none, none);
  CHECK(full.exact_fraction() == 1.0);
  CHECK(full.overall.occurrences_dropped == 0);

  MappingTable empty_table;
  auto [mapped_none, zero] =
      map_corpus({foreign_patient("P1", {"S1"})}, empty_table, none, none);
  CHECK(zero.mapped_fraction() == 0.0);
  CHECK(mapped_none[0].visits.empty());
}

TEST_CASE("coverage is independent of record order") {
  MappingTable table;
  table.exact["S1"] = {"157", "t"};
  EmbeddingIndex none;
  std::vector<ehr::PatientRecord> records{foreign_patient("A", {"S1", "S2"}),
                                          foreign_patient("B", {"S2", "S3"}),
                                          foreign_patient("C", {"S1"})};
  auto [m1, r1] = map_corpus(records, table, none, none);
  std::reverse(records.begin(), records.end());
  auto [m2, r2] = map_corpus(records, table, none, none);
  CHECK(r1.overall.distinct_exact == r2.overall.distinct_exact);
  CHECK(r1.overall.distinct_unmapped == r2.overall.distinct_unmapped);
  CHECK(r1.overall.occurrences_dropped == r2.overall.occurrences_dropped);
}

TEST_CASE("mapping an already-mapped corpus with the identity table is a no-op") {
  MappingTable identity;
  identity.exact["157"] = {"157", "id"};
  identity.exact["401"] = {"401", "id"};
  ehr::PatientRecord p;
  p.patient_id = "P1";
  p.birth_year = 1950;
  p.gender = ehr::Gender::Female;
  ehr::Visit v;
  v.date = Date::from_ymd(2010, 1, 1);
  v.codes.push_back(ehr::make_code("icd9-diag", "157"));
  v.codes.push_back(ehr::make_code("icd9-diag", "401"));
  p.visits.push_back(v);
  ehr::canonicalize(p);
  EmbeddingIndex none;
  auto [mapped, report] = map_corpus({p}, identity, none, none);
  CHECK(ehr::patient_to_json(mapped[0]) == ehr::patient_to_json(p));
  auto [mapped2, report2] = map_corpus(mapped, identity, none, none);
  CHECK(ehr::patient_to_json(mapped2[0]) == ehr::patient_to_json(p));
}

TEST_CASE("exact tsv and embedding f32 files round trip") {
  MappingTable table;
  table.exact["S1"] = {"157", "nlm"};
  table.exact["S2"] = {"401.0", "cms"};
  auto tsv = (std::filesystem::temp_directory_path() / "exact_rt.tsv").string();
  table.write_tsv(tsv);
  auto back = MappingTable::read_tsv(tsv);
  REQUIRE(back.exact.size() == 2);
  CHECK(back.exact.at("S1").target == "157");
  CHECK(back.exact.at("S2").table_name == "cms");

  auto idx = make_index({"A", "BB"}, {{0.6f, 0.8f}, {1.0f, 0.0f}});
  auto f32 = (std::filesystem::temp_directory_path() / "emb_rt.f32").string();
  idx.write_f32(f32);
  auto idx2 = EmbeddingIndex::read_f32(f32);
  REQUIRE(idx2.size() == 2);
  CHECK(idx2.find("A").has_value());
  CHECK(idx2.find("BB").has_value());
  CHECK((idx2.vector(*idx2.find("A")) - idx.vector(*idx.find("A"))).cwiseAbs().maxCoeff() <
        1e-7f);
}

TEST_CASE("the SNOMED-shaped fixture reports 77.6% exact coverage") {
  // 11598 distinct codes, 8998 exact-mapped, no soft matches above the cutoff
  MappingTable table;
  std::vector<ehr::PatientRecord> records;
  std::vector<std::string> codes;
  for (int i = 0; i < 11598; ++i) {
    std::string code = concat("S", i);
    codes.push_back(code);
    if (i < 8998) table.exact[code] = {concat("40", i % 10), "nlm"};
  }
  for (size_t off = 0; off < codes.size(); off += 12) {
    std::vector<std::string> chunk(codes.begin() + long(off),
                                   codes.begin() + long(std::min(off + 12, codes.size())));
    records.push_back(foreign_patient(concat("P", off / 12), chunk));
  }
  EmbeddingIndex none;
  auto [mapped, report] = map_corpus(records, table, none, none);
  CHECK(report.overall.distinct_total == 11598);
  CHECK(report.overall.distinct_exact == 8998);
  CHECK(report.exact_fraction() == doctest::Approx(8998.0 / 11598.0).epsilon(1e-12));
  CHECK(report.exact_fraction() * 100.0 == doctest::Approx(77.6).epsilon(0.001));
}
