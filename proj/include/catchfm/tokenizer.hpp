#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "catchfm/ehr.hpp"

namespace catchfm::tok {

// One model input: token ids plus the visit position of every token. All
// tokens of a visit share one position; the time token after visit i keeps
// position i; the two demographic tokens sit at position 0; EOS rides on the
// last visit.
struct TokenSequence {
  std::vector<int32_t> ids;
  std::vector<int32_t> visit_positions;
  std::string source;               // patient id
  std::optional<int> label;         // 0/1 for finetuning sequences

  size_t size() const { return ids.size(); }
};

inline constexpr int kDefaultMaxLen = 2048;

// Encode a visit span ending at `at_date` (the cohort index date, or the last
// visit date for pretraining). Truncation keeps the most recent history and
// always retains the two demographic tokens and EOS.
TokenSequence encode(const std::string& patient_id, int birth_year, ehr::Gender gender,
                     const std::vector<ehr::Visit>& visits,
                     const ehr::Vocabulary& vocab,
                     Date at_date,
                     int max_len = kDefaultMaxLen,
                     std::optional<int> label = std::nullopt);

// Whole-record convenience overload; at_date is the last visit date.
TokenSequence encode(const ehr::PatientRecord& record,
                     const ehr::Vocabulary& vocab,
                     int max_len = kDefaultMaxLen);

// Non-overlapping pretraining chunks; concatenation equals the input, no
// demographics are re-prepended and EOS stays where the record put it.
std::vector<TokenSequence> chunk_for_pretraining(const TokenSequence& full, int max_len);

// Shard format: magic "CFM1", u32le sequence count, then per sequence
// u32 length, u32 label+1 (0 = unlabeled), length x u32 ids,
// length x u32 positions.
void write_shard(const std::vector<TokenSequence>& sequences, const std::string& path);
std::vector<TokenSequence> read_shard(const std::string& path);

}  // namespace catchfm::tok
