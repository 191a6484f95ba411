#include "catchfm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstring>
#include <fstream>
#include <functional>
#include <numeric>
#include <set>
#include <thread>
#include <unordered_set>

#include <json.hpp>

namespace catchfm::pipeline {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

uint64_t hash_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot hash missing file ", path);
  uint64_t h = 0xcbf29ce484222325ull;
  char buf[1 << 16];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    h = fnv1a64(std::string_view(buf, size_t(in.gcount())), h);
    if (in.gcount() < std::streamsize(sizeof(buf))) break;
  }
  return h;
}

void RunManifest::write(const fs::path& dir) const {
  ordered_json j;
  j["command"] = command;
  j["tool_version"] = tool_version;
  j["seed"] = seed;
  j["config_hash"] = config_hash;
  j["input_hashes"] = ordered_json::object();
  for (const auto& [path, h] : input_hashes) j["input_hashes"][path] = h;
  j["outputs"] = outputs;
  j["started_unix"] = started_unix;
  j["finished_unix"] = finished_unix;
  std::ofstream out(dir / "manifest.json");
  if (!out) fail("cannot write manifest in ", dir.string());
  out << j.dump(2) << '\n';
}

static int64_t now_unix() {
  return std::chrono::duration_cast<std::chrono::seconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

ManifestScope::ManifestScope(std::string command, uint64_t seed, const fs::path& dir)
    : dir_(dir) {
  fs::create_directories(dir_);
  manifest_.command = std::move(command);
  manifest_.seed = seed;
  manifest_.started_unix = now_unix();
}

ManifestScope::~ManifestScope() {
  manifest_.finished_unix = now_unix();
  try {
    manifest_.write(dir_);
  } catch (...) {
    // manifests are best-effort on unwind
  }
}

void ManifestScope::input(const std::string& path) {
  manifest_.input_hashes[path] = hash_file(path);
}

void ManifestScope::output(const std::string& path) { manifest_.outputs.push_back(path); }

// ---------------------------------------------------------------------------
// presets

synth::GeneratorConfig default_generator(uint64_t seed) {
  using ehr::make_code;
  synth::GeneratorConfig g;
  g.seed = seed;
  g.start_year = 2006;
  g.end_year = 2014;
  g.visit_rate = 6.0;
  g.mean_codes_per_visit = 1.6;
  g.min_age = 25;
  g.max_age = 79;

  struct D { const char* v; double f; };
  // common chronic and ambulatory diagnoses, outside the neoplasm chapter
  for (D d : std::initializer_list<D>{
           {"401", 9}, {"272", 7}, {"285", 3}, {"300", 4}, {"311", 3}, {"327", 1},
           {"466", 5}, {"490", 4}, {"530", 5}, {"535", 2}, {"553", 1}, {"564", 3},
           {"571", 2}, {"599", 4}, {"715", 4}, {"724", 5}, {"780", 6}, {"786", 5},
           {"788", 2}, {"079", 2}, {"009", 1}, {"382", 2}, {"462", 6}, {"477", 3},
           {"692", 2}, {"708", 1}, {"719", 2}, {"729", 2}, {"784", 3}, {"787", 2}})
    g.code_pool.push_back({make_code("icd9-diag", d.v), d.f});
  for (int i = 1; i <= 15; ++i)
    g.code_pool.push_back({make_code("drug", concat("D01", i < 10 ? "0" : "", i)),
                           1.0 + (i % 5)});
  for (int i = 1; i <= 10; ++i)
    g.code_pool.push_back({make_code("order", concat("O20", i < 10 ? "0" : "", i)),
                           1.0 + (i % 3)});
  for (const char* v : {"38.93", "45.13", "81.02", "88.72", "93.94"})
    g.code_pool.push_back({make_code("icd9-proc", v), 1.0});

  // hazard plan calibrated against the analytic oracles: Bayes AUROC ~ 0.963
  // and sensitivity ~ 0.65 at 99% specificity for separating eventual 157
  // cases from cancer-free controls
  g.cancers.push_back({make_code("icd9-diag", "157"), 0.0010});
  g.cancers.push_back({make_code("icd9-diag", "162"), 0.0080});

  auto rule = [&](const char* system, const char* value, double mult, double carrier) {
    synth::RiskRule r;
    r.risk_code = make_code(system, value);
    r.target_cancer = "157";
    r.hazard_multiplier = mult;
    r.min_lead_months = 12;
    r.carrier_prob = carrier;
    r.emit_prob = 0.30;
    return r;
  };
  g.risk_rules.push_back(rule("icd9-diag", "577", 140.0, 0.08));
  g.risk_rules.push_back(rule("icd9-diag", "250", 70.0, 0.08));
  g.risk_rules.push_back(rule("icd9-diag", "251", 35.0, 0.06));
  g.risk_rules.push_back(rule("drug", "D0990", 14.0, 0.12));
  return g;
}

PipelineConfig preset(const std::string& scale, uint64_t seed) {
  PipelineConfig cfg;
  cfg.scale = scale;
  cfg.seed = seed;
  cfg.gen = default_generator(Rng(seed).sub("synth").next_u64());
  cfg.cohort_spec.target_cancer = "157";
  cfg.cohort_spec.cohort_kind = cohort::CohortKind::First;
  cfg.cohort_spec.matching = cohort::Matching::Controlled;

  if (scale == "ci") {
    cfg.gen.n_patients = 3200;
    cfg.cohort_spec.control_ratio = 15;
    // same-day controlled matching starves in a 2.5k-patient pool; the ci
    // smoke run uses the random control group instead
    cfg.cohort_spec.matching = cohort::Matching::Random;
    cfg.model_layers = 2;
    cfg.model_dim = 32;
    cfg.model_heads = 2;
    cfg.max_len = 128;
    cfg.pretrain_steps = 40;
    cfg.pretrain_batch = 16;
    cfg.finetune_epochs = 2;
    cfg.finetune_batch = 32;
    cfg.pretrain_patient_cap = 300;
    cfg.sae_epochs = 40;
    return cfg;
  }
  if (scale == "desk") {
    cfg.gen.n_patients = 50000;
    cfg.cohort_spec.control_ratio = 5;
    cfg.model_layers = 2;
    cfg.model_dim = 64;
    cfg.model_heads = 4;
    cfg.max_len = 256;
    cfg.pretrain_steps = 400;
    cfg.pretrain_batch = 32;
    cfg.finetune_epochs = 5;
    cfg.finetune_batch = 128;
    cfg.pretrain_patient_cap = 12000;
    cfg.sae_epochs = 80;
    return cfg;
  }
  if (scale.rfind("table3:", 0) == 0) {
    std::string name = scale.substr(7);
    model::ModelConfig mc = model::ModelConfig::named(name, /*vocab_size=*/8);
    cfg = preset("desk", seed);
    cfg.scale = scale;
    cfg.model_layers = mc.n_layers;
    cfg.model_dim = mc.d_model;
    cfg.model_heads = mc.n_heads;
    cfg.max_len = 2048;
    return cfg;
  }
  fail("unknown scale '", scale, "' (expected ci, desk, or table3:<name>)");
}

// ---------------------------------------------------------------------------
// stage helpers

namespace {

using Scalar = float;

struct Shards {
  std::vector<tok::TokenSequence> train, valid, test, pretrain;
  std::vector<const cohort::CohortExample*> train_ex, valid_ex, test_ex;
};

ordered_json cohort_spec_json(const cohort::CohortSpec& s) {
  ordered_json j;
  j["target_cancer"] = s.target_cancer;
  j["exclusion_window_months"] = s.exclusion_window_months;
  j["history_window_years"] = s.history_window_years;
  j["cohort_kind"] = s.cohort_kind == cohort::CohortKind::First ? "first" : "subsequent";
  j["control_ratio"] = s.control_ratio;
  j["matching"] = s.matching == cohort::Matching::Controlled ? "controlled" : "random";
  return j;
}

}  // namespace

void write_heos(const te::Mat<float>& h, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open ", path, " for writing");
  out.write("CFMH", 4);
  auto u32 = [&](uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  u32(uint32_t(h.rows()));
  u32(uint32_t(h.cols()));
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    out.write(reinterpret_cast<const char*>(h.row(r).data()),
              std::streamsize(size_t(h.cols()) * sizeof(float)));
}

te::Mat<float> read_heos(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "CFMH", 4) != 0) fail(path, ": bad magic");
  auto u32 = [&]() {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (in.gcount() != 4) fail(path, ": truncated header");
    return uint32_t(b[0]) | uint32_t(b[1]) << 8 | uint32_t(b[2]) << 16 | uint32_t(b[3]) << 24;
  };
  uint32_t rows = u32(), cols = u32();
  te::Mat<float> h(rows, cols);
  for (uint32_t r = 0; r < rows; ++r) {
    in.read(reinterpret_cast<char*>(h.row(r).data()), std::streamsize(cols * sizeof(float)));
    if (size_t(in.gcount()) != cols * sizeof(float)) fail(path, ": truncated row ", r);
  }
  return h;
}

static sae::MatD to_double(const te::Mat<Scalar>& m) {
  sae::MatD out(m.rows(), m.cols());
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) out(r, c) = double(m(r, c));
  return out;
}

PipelineReport run_pipeline(const PipelineConfig& cfg) {
  if (cfg.out_dir.empty()) fail("pipeline needs an output directory");
  fs::path root(cfg.out_dir);
  fs::create_directories(root);
  PipelineReport report;

  // --- synth ---------------------------------------------------------------
  fs::path synth_dir = root / "01_synth";
  std::vector<ehr::PatientRecord> patients;
  std::vector<synth::GroundTruth> truths;
  {
    ManifestScope scope("synth", cfg.seed, synth_dir);
    std::string cfg_json = synth::config_to_json(cfg.gen);
    scope.config_hash(fnv1a64(cfg_json));
    std::ofstream(synth_dir / "gen.json") << cfg_json << '\n';
    std::ofstream pf(synth_dir / "patients.jsonl");
    std::ofstream tf(synth_dir / "truth.jsonl");
    synth::generate(cfg.gen, [&](ehr::PatientRecord&& p, synth::GroundTruth&& t) {
      pf << ehr::patient_to_json(p) << '\n';
      tf << synth::truth_to_json(t) << '\n';
      patients.push_back(std::move(p));
      truths.push_back(std::move(t));
    });
    scope.output("patients.jsonl");
    scope.output("truth.jsonl");
    scope.output("gen.json");
  }
  report.n_patients = patients.size();
  report.bayes_oracle_auroc = synth::bayes_oracle_auroc(cfg.gen, cfg.cohort_spec.target_cancer);

  // --- cohort ----------------------------------------------------------------
  fs::path cohort_dir = root / "02_cohort";
  cohort::CohortDataset dataset;
  {
    ManifestScope scope("cohort", cfg.seed, cohort_dir);
    scope.config_hash(fnv1a64(cohort_spec_json(cfg.cohort_spec).dump()));
    auto cases = cohort::select_cases(patients, cfg.cohort_spec);
    auto pool = cohort::control_pool(patients);
    cohort::MatchReport match_report;
    auto controls = cohort::match_controls(cases, pool, cfg.cohort_spec,
                                           Rng(cfg.seed).sub("match").next_u64(), &match_report);
    report.n_cases = cases.size();
    report.n_controls = controls.size();
    dataset = cohort::assemble(std::move(cases), std::move(controls), cfg.cohort_spec,
                               Rng(cfg.seed).sub("split").next_u64());
    cohort::write_cohort(dataset, (cohort_dir / "cohort.jsonl").string());
    std::ofstream(cohort_dir / "cohort_spec.json") << cohort_spec_json(cfg.cohort_spec).dump(2)
                                                   << '\n';
    ordered_json mj;
    mj["unmatched"] = ordered_json::array();
    for (const auto& u : match_report.unmatched)
      mj["unmatched"].push_back({{"case_id", u.case_id}, {"matched", u.matched}});
    std::ofstream(cohort_dir / "match_report.json") << mj.dump(2) << '\n';
    scope.output("cohort.jsonl");
    scope.output("cohort_spec.json");
    scope.output("match_report.json");
  }
  report.cohort_positive_rate = dataset.positive_rate();

  // --- tokenize --------------------------------------------------------------
  fs::path tok_dir = root / "03_tokens";
  ehr::Vocabulary vocab;
  Shards shards;
  {
    ManifestScope scope("tokenize", cfg.seed, tok_dir);
    vocab = ehr::build_vocabulary(patients, ehr::BucketTables::defaults());
    {
      std::ofstream vf(tok_dir / "vocab.tsv");
      vocab.write_tsv(vf);
    }
    for (size_t i = 0; i < dataset.examples.size(); ++i) {
      const auto& e = dataset.examples[i];
      tok::TokenSequence seq = tok::encode(e.patient_id, e.birth_year, e.gender, e.history,
                                           vocab, e.index_date, cfg.max_len, e.label);
      switch (dataset.split[i]) {
        case cohort::Split::Train:
          shards.train.push_back(std::move(seq));
          shards.train_ex.push_back(&e);
          break;
        case cohort::Split::Valid:
          shards.valid.push_back(std::move(seq));
          shards.valid_ex.push_back(&e);
          break;
        case cohort::Split::Test:
          shards.test.push_back(std::move(seq));
          shards.test_ex.push_back(&e);
          break;
      }
    }
    // pretraining corpus: full histories of patients outside the cohort
    std::unordered_set<std::string> cohort_ids;
    for (const auto& e : dataset.examples) cohort_ids.insert(e.patient_id);
    size_t taken = 0;
    for (const auto& p : patients) {
      if (taken >= cfg.pretrain_patient_cap) break;
      if (cohort_ids.count(p.patient_id) || p.visits.empty()) continue;
      tok::TokenSequence full = tok::encode(p, vocab, /*max_len=*/1 << 28);
      for (auto& chunk : tok::chunk_for_pretraining(full, cfg.max_len))
        shards.pretrain.push_back(std::move(chunk));
      ++taken;
    }
    tok::write_shard(shards.train, (tok_dir / "train.shard").string());
    tok::write_shard(shards.valid, (tok_dir / "valid.shard").string());
    tok::write_shard(shards.test, (tok_dir / "test.shard").string());
    tok::write_shard(shards.pretrain, (tok_dir / "pretrain.shard").string());
    scope.output("vocab.tsv");
    scope.output("train.shard");
    scope.output("valid.shard");
    scope.output("test.shard");
    scope.output("pretrain.shard");
  }
  report.vocab_size = vocab.size();
  report.pretrain_sequences = shards.pretrain.size();

  // --- pretrain ----------------------------------------------------------------
  fs::path pre_dir = root / "04_pretrain";
  model::ModelConfig mc;
  mc.n_layers = cfg.model_layers;
  mc.d_model = cfg.model_dim;
  mc.n_heads = cfg.model_heads;
  mc.max_len = cfg.max_len;
  mc.vocab_size = vocab.size();
  mc.theta_base = cfg.theta_base;
  mc.check();
  model::ModelParameters<Scalar> params =
      model::ModelParameters<Scalar>::init(mc, Rng(cfg.seed).sub("init").next_u64());
  {
    ManifestScope scope("pretrain", cfg.seed, pre_dir);
    train::TrainConfig tc;
    tc.peak_lr = cfg.pretrain_lr;
    tc.batch_size = cfg.pretrain_batch;
    tc.total_steps = cfg.pretrain_steps;
    tc.seed = Rng(cfg.seed).sub("pretrain").next_u64();
    auto stats = train::pretrain(params, shards.pretrain, tc);
    stats.write_csv((pre_dir / "stats.csv").string());
    model::save_checkpoint(params, (pre_dir / "model.ckpt").string(),
                           uint64_t(cfg.pretrain_steps));
    report.pretrain_tokens = stats.tokens_consumed;
    report.pretrain_initial_loss = stats.steps.front().loss;
    report.pretrain_final_loss = stats.steps.back().loss;
    scope.output("model.ckpt");
    scope.output("stats.csv");
  }

  // --- finetune ------------------------------------------------------------------
  fs::path ft_dir = root / "05_finetune";
  std::vector<metrics::ScoreRow> score_rows;
  te::Mat<Scalar> h_train_pos, h_test;
  {
    ManifestScope scope("finetune", cfg.seed, ft_dir);
    train::TrainConfig tc;
    tc.peak_lr = cfg.finetune_lr;
    tc.batch_size = cfg.finetune_batch;
    tc.epochs = cfg.finetune_epochs;
    tc.seed = Rng(cfg.seed).sub("finetune").next_u64();
    auto result = train::finetune(params, shards.train, shards.valid, tc);
    result.stats.write_csv((ft_dir / "stats.csv").string());
    model::save_checkpoint(params, (ft_dir / "model.ckpt").string());
    report.best_valid_auprc = result.best_valid_auprc;

    auto add_scores = [&](const std::vector<tok::TokenSequence>& seqs,
                          const std::vector<const cohort::CohortExample*>& exs,
                          const char* split) {
      auto scores = train::classify_scores(params, seqs);
      for (size_t i = 0; i < seqs.size(); ++i)
        score_rows.push_back({exs[i]->patient_id, scores[i], *seqs[i].label, split});
    };
    add_scores(shards.train, shards.train_ex, "train");
    add_scores(shards.valid, shards.valid_ex, "valid");
    add_scores(shards.test, shards.test_ex, "test");
    metrics::write_scores_csv(score_rows, (ft_dir / "scores.csv").string());

    std::vector<std::vector<int32_t>> tp_tokens, tp_pos, te_tokens, te_pos;
    for (const auto& s : shards.train)
      if (*s.label == 1) {
        tp_tokens.push_back(s.ids);
        tp_pos.push_back(s.visit_positions);
      }
    for (const auto& s : shards.test) {
      te_tokens.push_back(s.ids);
      te_pos.push_back(s.visit_positions);
    }
    h_train_pos = model::export_hidden_eos(params, tp_tokens, tp_pos);
    h_test = model::export_hidden_eos(params, te_tokens, te_pos);
    write_heos(h_train_pos, (ft_dir / "h_eos.f32").string());
    write_heos(h_test, (ft_dir / "h_eos_test.f32").string());
    scope.output("model.ckpt");
    scope.output("stats.csv");
    scope.output("scores.csv");
    scope.output("h_eos.f32");
    scope.output("h_eos_test.f32");
  }

  // --- eval -------------------------------------------------------------------
  fs::path eval_dir = root / "06_eval";
  {
    ManifestScope scope("eval", cfg.seed, eval_dir);
    scope.input((ft_dir / "scores.csv").string());
    auto valid_cohort = metrics::cohort_for_split(score_rows, "valid");
    auto test_cohort = metrics::cohort_for_split(score_rows, "test");
    report.valid = metrics::evaluate(valid_cohort);
    report.test = metrics::evaluate(test_cohort);
    report.test_at_valid_threshold =
        metrics::apply_threshold(test_cohort, report.valid.sens_at_spec.threshold);
    ordered_json j;
    j["valid"] = json::parse(metrics::report_to_json(report.valid));
    j["test"] = json::parse(metrics::report_to_json(report.test));
    j["test_at_validation_threshold"] = {
        {"threshold", report.test_at_valid_threshold.threshold},
        {"sensitivity", report.test_at_valid_threshold.tpr},
        {"specificity", report.test_at_valid_threshold.specificity}};
    std::ofstream(eval_dir / "report.json") << j.dump(2) << '\n';
    scope.output("report.json");
  }

  // --- sae ---------------------------------------------------------------------
  fs::path sae_dir = root / "07_sae";
  {
    ManifestScope scope("sae", cfg.seed, sae_dir);
    sae::MatD acts = to_double(h_train_pos);
    int m = cfg.sae_width_factor * mc.d_model;
    auto trained = sae::sae_train(acts, m, cfg.sae_k, cfg.sae_epochs,
                                  Rng(cfg.seed).sub("sae").next_u64());
    sae::save_sae(trained.params, (sae_dir / "sae.ckpt").string());

    // frozen classifier head on true vs reconstructed test activations
    sae::MatD test_acts = to_double(h_test);
    sae::MatD cls_w = to_double(params.cls_w.v);
    sae::VecD cls_b(2);
    cls_b(0) = double(params.cls_b.v(0, 0));
    cls_b(1) = double(params.cls_b.v(0, 1));
    metrics::ScoredCohort orig, probe;
    for (const auto* e : shards.test_ex) {
      orig.labels.push_back(e->label);
      probe.labels.push_back(e->label);
    }
    orig.scores = sae::probe_scores(test_acts, cls_w, cls_b);
    probe.scores = sae::probe_scores(sae::reconstruct(trained.params, test_acts), cls_w, cls_b);
    report.original_test_auroc = metrics::auroc(orig);
    report.sae_probe_test_auroc = metrics::auroc(probe);

    // code enrichment of the top features over train positives
    std::vector<std::vector<std::string>> patient_codes;
    for (const auto* e : shards.train_ex)
      if (e->label == 1) {
        std::set<std::string> codes;
        for (const auto& v : e->history)
          for (const auto& c : v.codes) codes.insert(ehr::Vocabulary::code_token_string(c));
        patient_codes.emplace_back(codes.begin(), codes.end());
      }
    std::map<std::string, size_t> presence;
    for (const auto& e : dataset.examples) {
      std::set<std::string> codes;
      for (const auto& v : e.history)
        for (const auto& c : v.codes) codes.insert(ehr::Vocabulary::code_token_string(c));
      for (const auto& c : codes) ++presence[c];
    }
    std::vector<std::pair<std::string, double>> base_rates;
    for (const auto& [code, count] : presence)
      base_rates.emplace_back(code, double(count) / double(dataset.examples.size()));
    auto features = sae::top_features(trained.params, acts, patient_codes, base_rates);
    for (const auto& f : features)
      report.sae_features_with_enrichment += size_t(!f.enriched_codes.empty());
    std::ofstream(sae_dir / "features.json") << sae::features_to_json(features) << '\n';
    scope.output("sae.ckpt");
    scope.output("features.json");
  }

  // --- top-level report (deterministic: no timestamps) -------------------------
  {
    ManifestScope scope("pipeline", cfg.seed, root);
    std::ofstream(root / "report.json") << report.to_json() << '\n';
    scope.output("report.json");
  }
  return report;
}

std::string PipelineReport::to_json() const {
  ordered_json j;
  j["corpus"] = {{"n_patients", n_patients},
                 {"n_cases", n_cases},
                 {"n_controls", n_controls},
                 {"cohort_positive_rate", cohort_positive_rate},
                 {"bayes_oracle_auroc", bayes_oracle_auroc},
                 {"vocab_size", vocab_size}};
  j["pretrain"] = {{"sequences", pretrain_sequences},
                   {"tokens", pretrain_tokens},
                   {"initial_loss", pretrain_initial_loss},
                   {"final_loss", pretrain_final_loss}};
  j["finetune"] = {{"best_valid_auprc", best_valid_auprc}};
  j["valid"] = json::parse(metrics::report_to_json(valid));
  j["test"] = json::parse(metrics::report_to_json(test));
  j["test_at_validation_threshold"] = {{"threshold", test_at_valid_threshold.threshold},
                                       {"sensitivity", test_at_valid_threshold.tpr},
                                       {"specificity", test_at_valid_threshold.specificity}};
  j["sae"] = {{"original_test_auroc", original_test_auroc},
              {"probe_test_auroc", sae_probe_test_auroc},
              {"features_with_enrichment", sae_features_with_enrichment}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// seeds sweep

std::map<std::string, double> flatten_numeric(const std::string& json_text,
                                              const std::string& prefix) {
  std::map<std::string, double> out;
  json j = json::parse(json_text);
  std::function<void(const json&, const std::string&)> walk =
      [&](const json& node, const std::string& path) {
        if (node.is_object()) {
          for (const auto& [key, value] : node.items())
            walk(value, path.empty() ? key : path + "." + key);
        } else if (node.is_number()) {
          out[path] = node.get<double>();
        }
        // arrays (threshold tables) are deliberately skipped: their lengths
        // are score-dependent and differ across seeds
      };
  walk(j, prefix);
  return out;
}

SweepReport seeds_sweep(const PipelineConfig& base, const std::vector<uint64_t>& seeds,
                        int jobs) {
  if (seeds.size() < 2) fail("seeds sweep needs at least 2 seeds");
  if (base.out_dir.empty()) fail("seeds sweep needs an output directory");
  std::vector<std::map<std::string, double>> per_seed(seeds.size());
  std::vector<std::string> errors(seeds.size());

  std::atomic<size_t> next{0};
  auto worker = [&]() {
    while (true) {
      size_t i = next.fetch_add(1);
      if (i >= seeds.size()) return;
      try {
        PipelineConfig cfg = base;
        cfg.seed = seeds[i];
        cfg.out_dir = (fs::path(base.out_dir) / concat("seed_", seeds[i])).string();
        PipelineReport rep = run_pipeline(cfg);
        per_seed[i] = flatten_numeric(rep.to_json());
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  int n_threads = std::max(1, std::min<int>(jobs, int(seeds.size())));
  std::vector<std::thread> threads;
  for (int t = 0; t < n_threads; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();

  for (size_t i = 0; i < seeds.size(); ++i)
    if (!errors[i].empty())
      fail("seed ", seeds[i], " failed (partial results preserved in ", base.out_dir,
           "): ", errors[i]);

  SweepReport sweep;
  sweep.seeds = seeds;
  for (const auto& [name, value] : per_seed[0]) {
    double sum = 0, sumsq = 0;
    for (size_t i = 0; i < seeds.size(); ++i) {
      auto it = per_seed[i].find(name);
      if (it == per_seed[i].end())
        fail("metric '", name, "' missing from seed ", seeds[i], " run");
      sum += it->second;
      sumsq += it->second * it->second;
    }
    double mean = sum / double(seeds.size());
    double var = std::max(0.0, sumsq / double(seeds.size()) - mean * mean);
    sweep.metrics[name] = {mean, std::sqrt(var)};
  }
  return sweep;
}

std::string SweepReport::to_json() const {
  ordered_json j;
  j["seeds"] = seeds;
  j["n"] = seeds.size();
  j["metrics"] = ordered_json::object();
  for (const auto& [name, ms] : metrics)
    j["metrics"][name] = {{"mean", ms.first}, {"std", ms.second}};
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// isoflop harness

uint64_t sweep_size_params(const SweepSize& size, int vocab_size) {
  model::ModelConfig mc;
  mc.n_layers = size.layers;
  mc.d_model = size.dim;
  mc.n_heads = size.heads;
  mc.max_len = 1 << 20;
  mc.vocab_size = vocab_size;
  return model::param_count(mc);
}

double run_isoflop_point(const std::vector<tok::TokenSequence>& train_corpus,
                         const std::vector<tok::TokenSequence>& valid_corpus,
                         const SweepSize& size, int vocab_size, int max_len, double tokens,
                         double lr, uint64_t seed) {
  model::ModelConfig mc;
  mc.n_layers = size.layers;
  mc.d_model = size.dim;
  mc.n_heads = size.heads;
  mc.max_len = max_len;
  mc.vocab_size = vocab_size;
  mc.check();

  double mean_len = 0;
  for (const auto& s : train_corpus) mean_len += double(s.size());
  mean_len /= double(train_corpus.size());

  train::TrainConfig tc;
  tc.peak_lr = lr;
  tc.batch_size = 16;
  tc.total_steps = std::max<int64_t>(10, int64_t(std::llround(tokens / (16.0 * mean_len))));
  tc.seed = seed;

  auto params = model::ModelParameters<Scalar>::init(mc, Rng(seed).sub("sweep_init").next_u64());
  train::pretrain(params, train_corpus, tc);
  return train::eval_lm_loss(params, valid_corpus);
}

}  // namespace catchfm::pipeline
