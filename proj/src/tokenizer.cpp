#include "catchfm/tokenizer.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace catchfm::tok {

using ehr::Vocabulary;

TokenSequence encode(const std::string& patient_id, int birth_year, ehr::Gender gender,
                     const std::vector<ehr::Visit>& visits,
                     const Vocabulary& vocab,
                     Date at_date,
                     int max_len,
                     std::optional<int> label) {
  if (visits.empty()) fail("patient ", patient_id, ": cannot encode zero visits");
  if (at_date < visits.front().date)
    fail("patient ", patient_id, ": at_date ", at_date.str(),
         " precedes first visit ", visits.front().date.str());
  if (at_date < visits.back().date)
    fail("patient ", patient_id, ": at_date ", at_date.str(),
         " precedes last visit ", visits.back().date.str());
  if (max_len < 4) fail("max_len must be at least 4");

  const auto& buckets = vocab.buckets();
  int age = at_date.year() - birth_year;

  std::vector<int32_t> body_ids, body_pos;
  for (size_t i = 0; i < visits.size(); ++i) {
    int32_t pos = int32_t(i) + 1;
    for (const auto& code : visits[i].codes) {
      body_ids.push_back(vocab.code_id(code));
      body_pos.push_back(pos);
    }
    if (i + 1 < visits.size()) {
      int gap = visits[i + 1].date - visits[i].date;
      body_ids.push_back(vocab.time_token(buckets.time_bucket(gap)));
      body_pos.push_back(pos);  // the gap token describes the span after visit i
    }
  }

  TokenSequence seq;
  seq.source = patient_id;
  seq.label = label;

  int keep = max_len - 3;  // demographics + EOS are always retained
  size_t start = body_ids.size() > size_t(keep) ? body_ids.size() - size_t(keep) : 0;

  seq.ids.push_back(vocab.age_token(buckets.age_bucket(age)));
  seq.ids.push_back(vocab.gender_token(gender));
  seq.visit_positions.assign(2, 0);
  seq.ids.insert(seq.ids.end(), body_ids.begin() + start, body_ids.end());
  seq.visit_positions.insert(seq.visit_positions.end(), body_pos.begin() + start, body_pos.end());
  seq.ids.push_back(Vocabulary::kEos);
  seq.visit_positions.push_back(body_pos.empty() ? 0 : body_pos.back());
  return seq;
}

TokenSequence encode(const ehr::PatientRecord& record, const Vocabulary& vocab, int max_len) {
  if (record.visits.empty()) fail("patient ", record.patient_id, ": cannot encode zero visits");
  return encode(record.patient_id, record.birth_year, record.gender, record.visits, vocab,
                record.visits.back().date, max_len);
}

std::vector<TokenSequence> chunk_for_pretraining(const TokenSequence& full, int max_len) {
  if (max_len < 2) fail("max_len must be at least 2");
  std::vector<TokenSequence> chunks;
  for (size_t off = 0; off < full.size(); off += size_t(max_len)) {
    size_t len = std::min(size_t(max_len), full.size() - off);
    TokenSequence c;
    c.source = full.source;
    c.ids.assign(full.ids.begin() + off, full.ids.begin() + off + len);
    c.visit_positions.assign(full.visit_positions.begin() + off,
                             full.visit_positions.begin() + off + len);
    chunks.push_back(std::move(c));
  }
  return chunks;
}

// ---------------------------------------------------------------------------
// shard io

static constexpr char kMagic[4] = {'C', 'F', 'M', '1'};

static void put_u32(std::ostream& out, uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

static uint32_t get_u32(std::istream& in, const std::string& path, long long offset) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  if (in.gcount() != 4)
    fail(path, ": truncated shard at offset ", offset);
  return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
}

void write_shard(const std::vector<TokenSequence>& sequences, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open ", path, " for writing");
  out.write(kMagic, 4);
  put_u32(out, uint32_t(sequences.size()));
  for (const auto& seq : sequences) {
    if (seq.ids.size() != seq.visit_positions.size())
      fail("sequence for ", seq.source, ": ids/positions length mismatch");
    put_u32(out, uint32_t(seq.ids.size()));
    put_u32(out, seq.label ? uint32_t(*seq.label) + 1 : 0u);
    for (int32_t id : seq.ids) put_u32(out, uint32_t(id));
    for (int32_t p : seq.visit_positions) put_u32(out, uint32_t(p));
  }
  if (!out) fail("write failed: ", path);
}

std::vector<TokenSequence> read_shard(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, kMagic, 4) != 0)
    fail(path, ": bad magic at offset 0");
  long long offset = 4;
  uint32_t count = get_u32(in, path, offset);
  offset += 4;
  std::vector<TokenSequence> out;
  out.reserve(count);
  for (uint32_t s = 0; s < count; ++s) {
    uint32_t len = get_u32(in, path, offset);
    offset += 4;
    if (len > (1u << 28)) fail(path, ": implausible sequence length at offset ", offset - 4);
    uint32_t label = get_u32(in, path, offset);
    offset += 4;
    TokenSequence seq;
    if (label > 0) seq.label = int(label) - 1;
    seq.ids.resize(len);
    seq.visit_positions.resize(len);
    for (uint32_t i = 0; i < len; ++i, offset += 4) seq.ids[i] = int32_t(get_u32(in, path, offset));
    for (uint32_t i = 0; i < len; ++i, offset += 4)
      seq.visit_positions[i] = int32_t(get_u32(in, path, offset));
    out.push_back(std::move(seq));
  }
  return out;
}

}  // namespace catchfm::tok
