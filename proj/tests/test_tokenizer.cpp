#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "catchfm/tokenizer.hpp"

using namespace catchfm;
using namespace catchfm::ehr;
using namespace catchfm::tok;

namespace {

PatientRecord two_visit_patient() {
  PatientRecord p;
  p.patient_id = "P1";
  p.birth_year = 1960;
  p.gender = Gender::Male;
  Visit v1;
  v1.date = Date::from_ymd(2010, 5, 1);
  v1.codes.push_back(make_code("icd9-diag", "401"));
  v1.codes.push_back(make_code("drug", "D7"));
  Visit v2;
  v2.date = Date::from_ymd(2010, 5, 11);  // 10-day gap
  v2.codes.push_back(make_code("icd9-diag", "250"));
  p.visits = {v1, v2};
  canonicalize(p);
  return p;
}

Vocabulary vocab_for(const PatientRecord& p) {
  return build_vocabulary({p}, BucketTables::defaults());
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("visit positions: demographics at 0, one position per visit, gap token rides along") {
  auto p = two_visit_patient();
  auto v = vocab_for(p);
  auto seq = encode(p, v);
  // [age, gender, c, c, t, c, EOS]
  REQUIRE(seq.ids.size() == 7);
  CHECK(seq.visit_positions == std::vector<int32_t>{0, 0, 1, 1, 1, 2, 2});
  CHECK(seq.ids.back() == Vocabulary::kEos);
  CHECK(v.kind_of(seq.ids[0]) == TokenKind::AgeBucket);
  CHECK(v.kind_of(seq.ids[1]) == TokenKind::Gender);
  CHECK(v.kind_of(seq.ids[4]) == TokenKind::TimeBucket);
  // 10-day gap falls in the 8-30d bucket
  CHECK(v.lookup(seq.ids[4]) == "gap:8-31d");
}

TEST_CASE("permuting codes within a visit changes nothing after canonicalization") {
  auto p = two_visit_patient();
  auto v = vocab_for(p);
  auto seq1 = encode(p, v);
  PatientRecord q = p;
  std::swap(q.visits[0].codes[0], q.visits[0].codes[1]);
  canonicalize(q);
  auto seq2 = encode(q, v);
  CHECK(seq1.ids == seq2.ids);
  CHECK(seq1.visit_positions == seq2.visit_positions);
}

TEST_CASE("unknown codes map to UNK, never to an out-of-vocabulary id") {
  auto p = two_visit_patient();
  auto v = vocab_for(p);
  PatientRecord q = p;
  q.visits[0].codes[0] = make_code("drug", "NEVER_SEEN");
  auto seq = encode(q, v);
  for (int32_t id : seq.ids) CHECK(id < v.size());
  CHECK(std::count(seq.ids.begin(), seq.ids.end(), Vocabulary::kUnk) == 1);
}

TEST_CASE("encode rejects empty histories and too-early anchor dates") {
  auto p = two_visit_patient();
  auto v = vocab_for(p);
  PatientRecord empty = p;
  empty.visits.clear();
  CHECK_THROWS(encode(empty, v));
  CHECK_THROWS(encode(p.patient_id, p.birth_year, p.gender, p.visits, v,
                      Date::from_ymd(2009, 1, 1)));
}

TEST_CASE("truncation keeps demographics, the most recent events, and EOS") {
  // a history long enough to overflow max_len 2048 by construction
  PatientRecord p;
  p.patient_id = "LONG";
  p.birth_year = 1950;
  p.gender = Gender::Female;
  Date d = Date::from_ymd(1990, 1, 1);
  for (int i = 0; i < 1700; ++i) {
    Visit v;
    v.date = d;
    v.codes.push_back(make_code("drug", concat("D", i % 37)));
    v.codes.push_back(make_code("drug", concat("E", i % 11)));
    p.visits.push_back(v);
    d = d.add_days(3);
  }
  canonicalize(p);
  auto vocab = vocab_for(p);

  auto full = encode(p, vocab, 1 << 28);
  REQUIRE(full.ids.size() == 2 + 1700 * 3 - 1 + 1);  // demographics + codes/gaps + EOS

  auto seq = encode(p, vocab, 2048);
  REQUIRE(seq.ids.size() == 2048);
  CHECK(vocab.kind_of(seq.ids[0]) == TokenKind::AgeBucket);
  CHECK(vocab.kind_of(seq.ids[1]) == TokenKind::Gender);
  CHECK(seq.ids.back() == Vocabulary::kEos);
  // middle = most recent 2045 body tokens of the untruncated sequence
  std::vector<int32_t> expected(full.ids.end() - 1 - 2045, full.ids.end() - 1);
  std::vector<int32_t> got(seq.ids.begin() + 2, seq.ids.end() - 1);
  CHECK(got == expected);
}

TEST_CASE("positions are non-decreasing and shared within visits on random records") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    PatientRecord p;
    p.patient_id = "R";
    p.birth_year = 1950 + int(rng.uniform_int(40));
    p.gender = rng.bernoulli(0.5) ? Gender::Male : Gender::Female;
    Date d = Date::from_ymd(2000, 1, 1);
    int n = 1 + int(rng.uniform_int(12));
    for (int i = 0; i < n; ++i) {
      Visit v;
      v.date = d;
      int codes = 1 + int(rng.uniform_int(4));
      for (int c = 0; c < codes; ++c)
        v.codes.push_back(make_code("drug", concat("D", rng.uniform_int(20))));
      p.visits.push_back(v);
      d = d.add_days(1 + int(rng.uniform_int(400)));
    }
    canonicalize(p);
    auto vocab = vocab_for(p);
    auto seq = encode(p, vocab);

    REQUIRE(seq.ids.size() == seq.visit_positions.size());
    for (size_t i = 1; i < seq.visit_positions.size(); ++i)
      CHECK(seq.visit_positions[i] >= seq.visit_positions[i - 1]);
    // visits increment by exactly one
    int32_t max_pos = seq.visit_positions.back();
    CHECK(max_pos == n);
    for (int32_t pos = 1; pos <= max_pos; ++pos)
      CHECK(std::count(seq.visit_positions.begin(), seq.visit_positions.end(), pos) >= 1);
  }
}

TEST_CASE("chunking: 5000 tokens at max 2048 gives 2048/2048/904 and concatenates back") {
  TokenSequence full;
  full.source = "X";
  for (int i = 0; i < 5000; ++i) {
    full.ids.push_back(i % 97);
    full.visit_positions.push_back(i / 3);
  }
  auto chunks = chunk_for_pretraining(full, 2048);
  REQUIRE(chunks.size() == 3);
  CHECK(chunks[0].ids.size() == 2048);
  CHECK(chunks[1].ids.size() == 2048);
  CHECK(chunks[2].ids.size() == 904);
  std::vector<int32_t> cat_ids, cat_pos;
  for (const auto& c : chunks) {
    cat_ids.insert(cat_ids.end(), c.ids.begin(), c.ids.end());
    cat_pos.insert(cat_pos.end(), c.visit_positions.begin(), c.visit_positions.end());
  }
  CHECK(cat_ids == full.ids);
  CHECK(cat_pos == full.visit_positions);
}

TEST_CASE("chunking edge cases: exact fit and empty input") {
  TokenSequence full;
  full.ids.assign(2048, 5);
  full.visit_positions.assign(2048, 0);
  auto chunks = chunk_for_pretraining(full, 2048);
  REQUIRE(chunks.size() == 1);
  CHECK(chunks[0].ids == full.ids);

  TokenSequence empty;
  CHECK(chunk_for_pretraining(empty, 2048).empty());
}

TEST_CASE("shard write/read round-trips ids, positions, and labels") {
  std::vector<TokenSequence> seqs(3);
  Rng rng(5);
  for (size_t s = 0; s < seqs.size(); ++s) {
    int n = 1 + int(rng.uniform_int(50));
    for (int i = 0; i < n; ++i) {
      seqs[s].ids.push_back(int32_t(rng.uniform_int(1000)));
      seqs[s].visit_positions.push_back(int32_t(i / 2));
    }
  }
  seqs[0].label = 1;
  seqs[1].label = 0;  // labeled negative is distinct from unlabeled
  auto path = temp_path("roundtrip.shard");
  write_shard(seqs, path);
  auto back = read_shard(path);
  REQUIRE(back.size() == seqs.size());
  for (size_t s = 0; s < seqs.size(); ++s) {
    CHECK(back[s].ids == seqs[s].ids);
    CHECK(back[s].visit_positions == seqs[s].visit_positions);
    CHECK(back[s].label == seqs[s].label);
  }
}

TEST_CASE("empty shard is a valid header-only file") {
  auto path = temp_path("empty.shard");
  write_shard({}, path);
  CHECK(std::filesystem::file_size(path) == 8);  // magic + count
  CHECK(read_shard(path).empty());
}

TEST_CASE("corrupt shards fail with the offending offset") {
  auto path = temp_path("corrupt.shard");
  {
    std::ofstream out(path, std::ios::binary);
    out.write("CFM1", 4);
    unsigned char count[4] = {1, 0, 0, 0};
    out.write(reinterpret_cast<char*>(count), 4);
    unsigned char len[4] = {200, 0, 0, 0};  // promises 200 tokens, delivers none
    out.write(reinterpret_cast<char*>(len), 4);
  }
  try {
    read_shard(path);
    FAIL("expected a truncation error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("offset") != std::string::npos);
  }

  auto bad_magic = temp_path("badmagic.shard");
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out.write("NOPE", 4);
  }
  CHECK_THROWS(read_shard(bad_magic));
}
