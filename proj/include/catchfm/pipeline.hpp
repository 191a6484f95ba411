#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "catchfm/cohort.hpp"
#include "catchfm/metrics.hpp"
#include "catchfm/sae.hpp"
#include "catchfm/scaling.hpp"
#include "catchfm/synthgen.hpp"
#include "catchfm/tokenizer.hpp"
#include "catchfm/trainer.hpp"
#include "catchfm/transformer.hpp"

namespace catchfm::pipeline {

inline constexpr const char* kToolVersion = "0.1.0";

uint64_t hash_file(const std::string& path);

// every artifact directory gets exactly one of these
struct RunManifest {
  std::string command;
  std::string tool_version = kToolVersion;
  uint64_t seed = 0;
  uint64_t config_hash = 0;
  std::map<std::string, uint64_t> input_hashes;
  std::vector<std::string> outputs;
  int64_t started_unix = 0;
  int64_t finished_unix = 0;

  void write(const std::filesystem::path& dir) const;
};

class ManifestScope {
 public:
  ManifestScope(std::string command, uint64_t seed, const std::filesystem::path& dir);
  ~ManifestScope();
  void input(const std::string& path);
  void output(const std::string& path);
  void config_hash(uint64_t h) { manifest_.config_hash = h; }

 private:
  RunManifest manifest_;
  std::filesystem::path dir_;
};

// ---------------------------------------------------------------------------
// scale presets

struct PipelineConfig {
  std::string scale = "ci";
  uint64_t seed = 7;
  std::string out_dir;

  synth::GeneratorConfig gen;
  cohort::CohortSpec cohort_spec;
  int model_layers = 2, model_dim = 32, model_heads = 2;
  int max_len = 128;
  double theta_base = 10000.0;
  int64_t pretrain_steps = 40;
  int pretrain_batch = 16;
  double pretrain_lr = 3e-3;
  int finetune_epochs = 2;
  int finetune_batch = 32;
  double finetune_lr = 1e-3;
  size_t pretrain_patient_cap = 300;
  int sae_width_factor = 4;
  int sae_k = 16;
  int sae_epochs = 60;
};

// generator with planted pancreatic risk factors; n_patients filled by caller
synth::GeneratorConfig default_generator(uint64_t seed);

// "ci", "desk", or "table3:<name>" (a named model size on the desk data scale)
PipelineConfig preset(const std::string& scale, uint64_t seed);

// ---------------------------------------------------------------------------

struct PipelineReport {
  // corpus and cohort
  size_t n_patients = 0, n_cases = 0, n_controls = 0;
  double cohort_positive_rate = 0.0;
  double bayes_oracle_auroc = 0.0;  // analytic ceiling from the hazard config
  int vocab_size = 0;
  // training
  size_t pretrain_sequences = 0;
  uint64_t pretrain_tokens = 0;
  double pretrain_final_loss = 0.0, pretrain_initial_loss = 0.0;
  double best_valid_auprc = 0.0;
  // evaluation
  metrics::MetricReport valid, test;
  metrics::ThresholdRow test_at_valid_threshold;
  // interpretability
  double original_test_auroc = 0.0;   // frozen head on true activations
  double sae_probe_test_auroc = 0.0;  // frozen head on reconstructions
  size_t sae_features_with_enrichment = 0;

  std::string to_json() const;
};

PipelineReport run_pipeline(const PipelineConfig& cfg);

// mean/std across seeds of every numeric metric in report.json; any failed
// run or missing metric aborts, partial results stay on disk
struct SweepReport {
  std::vector<uint64_t> seeds;
  std::map<std::string, std::pair<double, double>> metrics;  // name -> (mean, std)
  std::string to_json() const;
};
SweepReport seeds_sweep(const PipelineConfig& base, const std::vector<uint64_t>& seeds,
                        int jobs = 1);

// flatten the numeric leaves of a report for aggregation
std::map<std::string, double> flatten_numeric(const std::string& json_text,
                                              const std::string& prefix = "");

// ---------------------------------------------------------------------------
// IsoFLOP profiling harness (used by the scaling experiments)

struct SweepSize {
  std::string name;
  int layers = 1, dim = 16, heads = 2;
};

// token budget D = C / 6N under the documented convention; trains from
// scratch and reports the token-weighted validation loss
double run_isoflop_point(const std::vector<tok::TokenSequence>& train_corpus,
                         const std::vector<tok::TokenSequence>& valid_corpus,
                         const SweepSize& size, int vocab_size, int max_len, double tokens,
                         double lr, uint64_t seed);

uint64_t sweep_size_params(const SweepSize& size, int vocab_size);

// hidden-state matrix files: magic "CFMH", u32 rows, u32 cols, f32 data
void write_heos(const te::Mat<float>& h, const std::string& path);
te::Mat<float> read_heos(const std::string& path);

}  // namespace catchfm::pipeline
