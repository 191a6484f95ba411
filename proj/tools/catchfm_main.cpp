// catchfm: synthetic-EHR cancer risk modeling pipeline.
// Subcommands mirror the pipeline stages; `pipeline` wires them end to end.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>

#include <CLI11.hpp>
#include <json.hpp>

#include "catchfm/codemap.hpp"
#include "catchfm/pipeline.hpp"

namespace fs = std::filesystem;
using namespace catchfm;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

struct GlobalOpts {
  uint64_t seed = 7;
  std::string out_dir = ".";
  int jobs = 1;
  std::string scale = "ci";
};

std::vector<tok::TokenSequence> load_shards_from(const std::string& path) {
  std::vector<tok::TokenSequence> out;
  if (fs::is_directory(path)) {
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(path))
      if (entry.path().extension() == ".shard") files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) fail("no .shard files in ", path);
    for (const auto& f : files) {
      auto seqs = tok::read_shard(f.string());
      out.insert(out.end(), std::make_move_iterator(seqs.begin()),
                 std::make_move_iterator(seqs.end()));
    }
  } else {
    out = tok::read_shard(path);
  }
  return out;
}

model::ModelConfig model_config_from_json_file(const std::string& path, int vocab_size) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  json j = json::parse(in);
  model::ModelConfig mc;
  if (j.contains("name")) {
    mc = model::ModelConfig::named(j["name"].get<std::string>(),
                                   j.value("vocab_size", vocab_size),
                                   j.value("max_len", 2048));
  } else {
    mc.n_layers = j.value("n_layers", 2);
    mc.d_model = j.value("d_model", 128);
    mc.n_heads = j.value("n_heads", 4);
    mc.max_len = j.value("max_len", 2048);
    mc.vocab_size = j.value("vocab_size", vocab_size);
    mc.theta_base = j.value("theta_base", 10000.0);
  }
  if (mc.vocab_size <= 0) fail("model config needs vocab_size (or pass --vocab)");
  mc.check();
  return mc;
}

cohort::CohortSpec cohort_spec_from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open ", path);
  json j = json::parse(in);
  cohort::CohortSpec spec;
  spec.target_cancer = j.value("target_cancer", spec.target_cancer);
  spec.exclusion_window_months = j.value("exclusion_window_months", spec.exclusion_window_months);
  spec.history_window_years = j.value("history_window_years", spec.history_window_years);
  spec.cohort_kind = j.value("cohort_kind", "first") == std::string("subsequent")
                         ? cohort::CohortKind::Subsequent
                         : cohort::CohortKind::First;
  spec.control_ratio = j.value("control_ratio", spec.control_ratio);
  spec.matching = j.value("matching", "controlled") == std::string("random")
                      ? cohort::Matching::Random
                      : cohort::Matching::Controlled;
  spec.check();
  return spec;
}

int run_synth(const GlobalOpts& g, int n_patients, const std::string& out,
              const std::string& truth_out, const std::string& config_path) {
  synth::GeneratorConfig cfg =
      config_path.empty() ? pipeline::default_generator(g.seed) : [&] {
        std::ifstream in(config_path);
        if (!in) fail("cannot open ", config_path);
        std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        return synth::config_from_json(text);
      }();
  if (n_patients > 0) cfg.n_patients = n_patients;
  cfg.seed = g.seed;
  cfg.check();

  pipeline::ManifestScope scope("synth", g.seed, fs::path(out).parent_path().empty()
                                                     ? fs::path(".")
                                                     : fs::path(out).parent_path());
  scope.config_hash(fnv1a64(synth::config_to_json(cfg)));
  std::ofstream pf(out);
  if (!pf) fail("cannot open ", out, " for writing");
  std::ofstream tf(truth_out);
  if (!tf) fail("cannot open ", truth_out, " for writing");
  size_t n = 0;
  synth::generate(cfg, [&](ehr::PatientRecord&& p, synth::GroundTruth&& t) {
    pf << ehr::patient_to_json(p) << '\n';
    tf << synth::truth_to_json(t) << '\n';
    ++n;
  });
  scope.output(out);
  scope.output(truth_out);
  std::cerr << "wrote " << n << " patients to " << out << "\n";
  return 0;
}

int run_cohort(const GlobalOpts& g, const cohort::CohortSpec& spec, const std::string& in,
               const std::string& out) {
  auto patients = ehr::load_patients(in);
  fs::path out_dir = fs::path(out).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("cohort", g.seed, out_dir);
  scope.input(in);

  auto cases = cohort::select_cases(patients, spec);
  auto pool = cohort::control_pool(patients);
  cohort::MatchReport match_report;
  auto controls = cohort::match_controls(cases, pool, spec, g.seed, &match_report);
  auto dataset = cohort::assemble(std::move(cases), std::move(controls), spec, g.seed);
  cohort::write_cohort(dataset, out);

  ordered_json spec_j;
  spec_j["target_cancer"] = spec.target_cancer;
  spec_j["exclusion_window_months"] = spec.exclusion_window_months;
  spec_j["history_window_years"] = spec.history_window_years;
  spec_j["cohort_kind"] = spec.cohort_kind == cohort::CohortKind::First ? "first" : "subsequent";
  spec_j["control_ratio"] = spec.control_ratio;
  spec_j["matching"] =
      spec.matching == cohort::Matching::Controlled ? "controlled" : "random";
  std::ofstream((out_dir / "cohort_spec.json")) << spec_j.dump(2) << '\n';
  ordered_json mj;
  mj["unmatched"] = ordered_json::array();
  for (const auto& u : match_report.unmatched)
    mj["unmatched"].push_back({{"case_id", u.case_id}, {"matched", u.matched}});
  std::ofstream((out_dir / "match_report.json")) << mj.dump(2) << '\n';

  scope.output(out);
  scope.output((out_dir / "cohort_spec.json").string());
  std::cerr << "cohort: " << dataset.n_positive() << " cases, "
            << dataset.examples.size() - dataset.n_positive() << " controls\n";
  return 0;
}

int run_tokenize(const GlobalOpts& g, const std::string& patients_path,
                 const std::string& cohort_path, const std::string& spec_path,
                 const std::string& out_dir, int max_len, size_t pretrain_cap) {
  auto patients = ehr::load_patients(patients_path);
  auto rows = cohort::read_cohort(cohort_path);
  auto spec = cohort_spec_from_file(spec_path);
  fs::create_directories(out_dir);
  pipeline::ManifestScope scope("tokenize", g.seed, out_dir);
  scope.input(patients_path);
  scope.input(cohort_path);

  auto vocab = ehr::build_vocabulary(patients, ehr::BucketTables::defaults());
  {
    std::ofstream vf(fs::path(out_dir) / "vocab.tsv");
    vocab.write_tsv(vf);
  }
  std::map<std::string, const ehr::PatientRecord*> by_id;
  for (const auto& p : patients) by_id[p.patient_id] = &p;

  std::map<cohort::Split, std::vector<tok::TokenSequence>> split_seqs;
  std::set<std::string> cohort_ids;
  for (const auto& row : rows) {
    auto it = by_id.find(row.patient_id);
    if (it == by_id.end()) fail("cohort row references unknown patient ", row.patient_id);
    cohort::CohortExample e = cohort::make_example(*it->second, row.index_date, row.label, spec);
    if (e.history.empty()) fail("patient ", row.patient_id, " has empty history window");
    split_seqs[row.split].push_back(tok::encode(e.patient_id, e.birth_year, e.gender, e.history,
                                                vocab, e.index_date, max_len, e.label));
    cohort_ids.insert(row.patient_id);
  }
  for (auto split : {cohort::Split::Train, cohort::Split::Valid, cohort::Split::Test}) {
    std::string name = concat(cohort::split_name(split), ".shard");
    tok::write_shard(split_seqs[split], (fs::path(out_dir) / name).string());
    scope.output(name);
  }
  std::vector<tok::TokenSequence> pretrain;
  size_t taken = 0;
  for (const auto& p : patients) {
    if (taken >= pretrain_cap) break;
    if (cohort_ids.count(p.patient_id) || p.visits.empty()) continue;
    auto full = tok::encode(p, vocab, 1 << 28);
    for (auto& chunk : tok::chunk_for_pretraining(full, max_len))
      pretrain.push_back(std::move(chunk));
    ++taken;
  }
  tok::write_shard(pretrain, (fs::path(out_dir) / "pretrain.shard").string());
  scope.output("vocab.tsv");
  scope.output("pretrain.shard");
  std::cerr << "tokenized " << rows.size() << " cohort rows, " << pretrain.size()
            << " pretraining chunks, V=" << vocab.size() << "\n";
  return 0;
}

int run_pretrain_cmd(const GlobalOpts& g, const std::string& config_path,
                     const std::string& train_path, const std::string& vocab_path,
                     int64_t steps, const std::string& out_dir) {
  auto sequences = load_shards_from(train_path);
  int vocab_size = 0;
  if (!vocab_path.empty()) {
    std::ifstream vf(vocab_path);
    if (!vf) fail("cannot open ", vocab_path);
    vocab_size = ehr::Vocabulary::read_tsv(vf).size();
  }
  model::ModelConfig mc = model_config_from_json_file(config_path, vocab_size);
  fs::create_directories(out_dir);
  pipeline::ManifestScope scope("pretrain", g.seed, out_dir);
  scope.input(config_path);

  train::TrainConfig tc;
  tc.total_steps = steps;
  tc.seed = g.seed;
  auto params = model::ModelParameters<float>::init(mc, Rng(g.seed).sub("init").next_u64());
  auto stats = train::pretrain(params, sequences, tc);
  model::save_checkpoint(params, (fs::path(out_dir) / "model.ckpt").string(), uint64_t(steps));
  stats.write_csv((fs::path(out_dir) / "stats.csv").string());
  scope.output("model.ckpt");
  scope.output("stats.csv");
  std::cerr << "pretrained " << steps << " steps, final loss "
            << (stats.steps.empty() ? 0.0 : stats.steps.back().loss) << "\n";
  return 0;
}

int run_finetune_cmd(const GlobalOpts& g, const std::string& ckpt, const std::string& tok_dir,
                     const std::string& rows_path, int64_t label_budget,
                     const std::string& out_dir, int epochs) {
  auto train_set = tok::read_shard((fs::path(tok_dir) / "train.shard").string());
  auto valid_set = tok::read_shard((fs::path(tok_dir) / "valid.shard").string());
  auto test_set = tok::read_shard((fs::path(tok_dir) / "test.shard").string());
  model::ModelParameters<float> params;
  model::load_checkpoint(params, ckpt);
  fs::create_directories(out_dir);
  pipeline::ManifestScope scope("finetune", g.seed, out_dir);
  scope.input(ckpt);

  train::TrainConfig tc;
  tc.batch_size = 128;
  tc.epochs = epochs;
  tc.seed = g.seed;
  std::optional<size_t> budget;
  if (label_budget > 0) budget = size_t(label_budget);
  auto result = train::finetune(params, train_set, valid_set, tc, budget);
  model::save_checkpoint(params, (fs::path(out_dir) / "model.ckpt").string());
  result.stats.write_csv((fs::path(out_dir) / "stats.csv").string());

  // patient ids come from cohort.jsonl when provided, else positional
  std::map<cohort::Split, std::vector<std::string>> ids;
  if (!rows_path.empty()) {
    for (const auto& row : cohort::read_cohort(rows_path)) ids[row.split].push_back(row.patient_id);
  }
  std::vector<metrics::ScoreRow> score_rows;
  auto add = [&](std::vector<tok::TokenSequence>& seqs, cohort::Split split, const char* name) {
    auto scores = train::classify_scores(params, seqs);
    for (size_t i = 0; i < seqs.size(); ++i) {
      std::string pid = ids.count(split) && i < ids[split].size() ? ids[split][i]
                                                                  : concat(name, "_", i);
      score_rows.push_back({pid, scores[i], seqs[i].label.value_or(0), name});
    }
  };
  add(train_set, cohort::Split::Train, "train");
  add(valid_set, cohort::Split::Valid, "valid");
  add(test_set, cohort::Split::Test, "test");
  metrics::write_scores_csv(score_rows, (fs::path(out_dir) / "scores.csv").string());

  std::vector<std::vector<int32_t>> tp_tokens, tp_pos, te_tokens, te_pos;
  for (const auto& s : train_set)
    if (s.label.value_or(0) == 1) {
      tp_tokens.push_back(s.ids);
      tp_pos.push_back(s.visit_positions);
    }
  for (const auto& s : test_set) {
    te_tokens.push_back(s.ids);
    te_pos.push_back(s.visit_positions);
  }
  pipeline::write_heos(model::export_hidden_eos(params, tp_tokens, tp_pos),
                       (fs::path(out_dir) / "h_eos.f32").string());
  pipeline::write_heos(model::export_hidden_eos(params, te_tokens, te_pos),
                       (fs::path(out_dir) / "h_eos_test.f32").string());
  scope.output("model.ckpt");
  scope.output("scores.csv");
  scope.output("h_eos.f32");
  scope.output("h_eos_test.f32");
  std::cerr << "finetuned; best valid AUPRC " << result.best_valid_auprc << "\n";
  return 0;
}

int run_eval(const GlobalOpts& g, const std::string& scores_path, const std::string& report_path,
             double spec_floor, double top_fraction) {
  auto rows = metrics::read_scores_csv(scores_path);
  fs::path out_dir = fs::path(report_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("eval", g.seed, out_dir);
  scope.input(scores_path);

  std::set<std::string> splits;
  for (const auto& r : rows) splits.insert(r.split);
  ordered_json j;
  for (const auto& split : splits) {
    auto cohort_split = metrics::cohort_for_split(rows, split);
    j[split] = json::parse(
        metrics::report_to_json(metrics::evaluate(cohort_split, spec_floor, top_fraction)));
  }
  if (splits.count("valid") && splits.count("test")) {
    double thr = j["valid"]["sensitivity_at_specificity"]["threshold"].get<double>();
    auto row = metrics::apply_threshold(metrics::cohort_for_split(rows, "test"), thr);
    j["test_at_validation_threshold"] = {{"threshold", row.threshold},
                                         {"sensitivity", row.tpr},
                                         {"specificity", row.specificity}};
  }
  std::ofstream(report_path) << j.dump(2) << '\n';
  scope.output(report_path);
  return 0;
}

int run_scaling_fit(const GlobalOpts& g, const std::string& points_path,
                    const std::string& out_path) {
  auto points = scaling::read_points_csv(points_path);
  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("scaling-fit", g.seed, out_dir);
  scope.input(points_path);
  auto fit = scaling::fit_scaling_laws(points);
  std::ofstream(out_path) << scaling::fit_to_json(fit) << '\n';
  scope.output(out_path);
  std::cerr << "N_opt exponent " << fit.n_opt.exponent << ", D_opt exponent "
            << fit.d_opt.exponent << "\n";
  return 0;
}

int run_codemap(const GlobalOpts& g, const std::string& in_path, const std::string& exact_path,
                const std::string& emb_path, const std::string& emb_target_path,
                double threshold, const std::string& out_path, const std::string& report_path) {
  auto records = ehr::load_patients(in_path);
  codemap::MappingTable table;
  if (!exact_path.empty()) table = codemap::MappingTable::read_tsv(exact_path);
  codemap::EmbeddingIndex src, tgt;
  if (!emb_path.empty()) src = codemap::EmbeddingIndex::read_f32(emb_path);
  if (!emb_target_path.empty()) tgt = codemap::EmbeddingIndex::read_f32(emb_target_path);

  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("codemap", g.seed, out_dir);
  scope.input(in_path);

  auto [mapped, report] = codemap::map_corpus(records, table, src, tgt, threshold);
  ehr::write_patients(mapped, out_path);
  std::ofstream(report_path) << codemap::coverage_to_json(report) << '\n';
  scope.output(out_path);
  scope.output(report_path);
  std::cerr << "coverage: " << report.mapped_fraction() * 100.0 << "% of distinct codes\n";
  return 0;
}

int run_sae_cmd(const GlobalOpts& g, const std::string& acts_path, int m, int k,
                const std::string& out_path, int epochs) {
  auto h = pipeline::read_heos(acts_path);
  sae::MatD acts(h.rows(), h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    for (Eigen::Index c = 0; c < h.cols(); ++c) acts(r, c) = double(h(r, c));
  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("sae", g.seed, out_dir);
  scope.input(acts_path);
  auto result = sae::sae_train(acts, m, k, epochs, g.seed);
  sae::save_sae(result.params, out_path);
  scope.output(out_path);
  std::cerr << "sae trained; final mse " << result.mse_per_epoch.back() << "\n";
  return 0;
}

int run_sae_features(const GlobalOpts& g, const std::string& sae_path,
                     const std::string& cohort_path, const std::string& spec_path,
                     const std::string& patients_path, const std::string& acts_path,
                     const std::string& out_path) {
  auto params = sae::load_sae(sae_path);
  auto rows = cohort::read_cohort(cohort_path);
  auto spec = cohort_spec_from_file(spec_path);
  auto patients = ehr::load_patients(patients_path);
  auto h = pipeline::read_heos(acts_path);

  std::map<std::string, const ehr::PatientRecord*> by_id;
  for (const auto& p : patients) by_id[p.patient_id] = &p;
  auto codes_of = [&](const cohort::CohortRow& row) {
    auto it = by_id.find(row.patient_id);
    if (it == by_id.end()) fail("cohort row references unknown patient ", row.patient_id);
    auto e = cohort::make_example(*it->second, row.index_date, row.label, spec);
    std::set<std::string> codes;
    for (const auto& v : e.history)
      for (const auto& c : v.codes) codes.insert(ehr::Vocabulary::code_token_string(c));
    return codes;
  };

  // activations align with the train-split positives in cohort order
  std::vector<std::vector<std::string>> patient_codes;
  std::map<std::string, size_t> presence;
  for (const auto& row : rows) {
    auto codes = codes_of(row);
    for (const auto& c : codes) ++presence[c];
    if (row.split == cohort::Split::Train && row.label == 1)
      patient_codes.emplace_back(codes.begin(), codes.end());
  }
  if (Eigen::Index(patient_codes.size()) != h.rows())
    fail("activation rows (", h.rows(), ") do not match train-split positives (",
         patient_codes.size(), ")");
  std::vector<std::pair<std::string, double>> base_rates;
  for (const auto& [code, count] : presence)
    base_rates.emplace_back(code, double(count) / double(rows.size()));

  sae::MatD acts(h.rows(), h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    for (Eigen::Index c = 0; c < h.cols(); ++c) acts(r, c) = double(h(r, c));

  fs::path out_dir = fs::path(out_path).parent_path();
  if (out_dir.empty()) out_dir = ".";
  pipeline::ManifestScope scope("sae-features", g.seed, out_dir);
  scope.input(sae_path);
  scope.input(cohort_path);
  auto features = sae::top_features(params, acts, patient_codes, base_rates);
  std::ofstream(out_path) << sae::features_to_json(features) << '\n';
  scope.output(out_path);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"catchfm: EHR foundation-model cancer screening pipeline"};
  app.require_subcommand(0, 1);
  GlobalOpts g;
  app.add_option("--seed", g.seed, "root seed; all stage seeds derive from it");
  app.add_option("--out-dir", g.out_dir, "artifact directory");
  app.add_option("--jobs", g.jobs, "parallel seed runs for sweep");
  app.add_option("--scale", g.scale, "ci, desk, or table3:<name>");

  // synth
  auto* synth_cmd = app.add_subcommand("synth", "generate a synthetic patient corpus");
  int synth_n = 0;
  std::string synth_out = "patients.jsonl", synth_truth = "truth.jsonl", synth_cfg;
  synth_cmd->add_option("--patients", synth_n, "number of patients");
  synth_cmd->add_option("--out", synth_out, "patients.jsonl path");
  synth_cmd->add_option("--truth", synth_truth, "truth.jsonl path");
  synth_cmd->add_option("--config", synth_cfg, "generator config json");

  // cohort
  auto* cohort_cmd = app.add_subcommand("cohort", "build a case-control cohort");
  cohort::CohortSpec spec;
  std::string cohort_in = "patients.jsonl", cohort_out = "cohort.jsonl";
  std::string cohort_kind = "first", cohort_matching = "controlled";
  cohort_cmd->add_option("--target", spec.target_cancer, "3-digit ICD-9 category");
  cohort_cmd->add_option("--kind", cohort_kind, "first|subsequent");
  cohort_cmd->add_option("--exclusion-months", spec.exclusion_window_months, "6 or 12");
  cohort_cmd->add_option("--history-years", spec.history_window_years, "history window");
  cohort_cmd->add_option("--ratio", spec.control_ratio, "controls per case");
  cohort_cmd->add_option("--matching", cohort_matching, "controlled|random");
  cohort_cmd->add_option("--in", cohort_in, "patients.jsonl");
  cohort_cmd->add_option("--out", cohort_out, "cohort.jsonl");

  // tokenize
  auto* tok_cmd = app.add_subcommand("tokenize", "build vocabulary and token shards");
  std::string tok_patients = "patients.jsonl", tok_cohort = "cohort.jsonl";
  std::string tok_spec = "cohort_spec.json", tok_out = "tokens";
  int tok_max_len = tok::kDefaultMaxLen;
  uint64_t tok_cap = 1ull << 40;
  tok_cmd->add_option("--in", tok_patients, "patients.jsonl");
  tok_cmd->add_option("--cohort", tok_cohort, "cohort.jsonl");
  tok_cmd->add_option("--spec", tok_spec, "cohort_spec.json sidecar");
  tok_cmd->add_option("--out-dir", tok_out, "shard directory");
  tok_cmd->add_option("--max-len", tok_max_len, "sequence cap (default 2048)");
  tok_cmd->add_option("--pretrain-cap", tok_cap, "max patients in the pretraining corpus");

  // pretrain
  auto* pre_cmd = app.add_subcommand("pretrain", "autoregressive pretraining");
  std::string pre_cfg = "model.json", pre_train = "tokens/pretrain.shard", pre_vocab,
              pre_out = "ckpt";
  int64_t pre_steps = 100;
  pre_cmd->add_option("--config", pre_cfg, "model config json");
  pre_cmd->add_option("--train", pre_train, "shard file or directory");
  pre_cmd->add_option("--vocab", pre_vocab, "vocab.tsv (sizes the embedding)");
  pre_cmd->add_option("--steps", pre_steps, "optimizer steps");
  pre_cmd->add_option("--out", pre_out, "checkpoint directory");

  // finetune
  auto* ft_cmd = app.add_subcommand("finetune", "supervised cancer-risk finetuning");
  std::string ft_ckpt = "ckpt/model.ckpt", ft_tok = "tokens", ft_rows, ft_out = "finetune";
  int64_t ft_budget = 0;
  int ft_epochs = 5;
  ft_cmd->add_option("--ckpt", ft_ckpt, "pretrained checkpoint");
  ft_cmd->add_option("--cohort", ft_tok, "token shard directory");
  ft_cmd->add_option("--rows", ft_rows, "cohort.jsonl (patient ids for scores.csv)");
  ft_cmd->add_option("--label-budget", ft_budget, "stratified training-label cap (0 = all)");
  ft_cmd->add_option("--epochs", ft_epochs, "finetuning epochs");
  ft_cmd->add_option("--out", ft_out, "output directory");

  // eval
  auto* eval_cmd = app.add_subcommand("eval", "screening metrics from scores.csv");
  std::string eval_scores = "scores.csv", eval_report = "report.json";
  double eval_floor = 0.99, eval_top = 0.001;
  eval_cmd->add_option("--scores", eval_scores, "scores.csv");
  eval_cmd->add_option("--report", eval_report, "report.json");
  eval_cmd->add_option("--spec-floor", eval_floor, "specificity floor");
  eval_cmd->add_option("--top-fraction", eval_top, "operational flag fraction");

  // scaling-fit
  auto* fit_cmd = app.add_subcommand("scaling-fit", "fit power laws to isoflop points");
  std::string fit_points = "points.csv", fit_out = "fit.json";
  fit_cmd->add_option("--points", fit_points, "points.csv");
  fit_cmd->add_option("--out", fit_out, "fit.json");

  // codemap
  auto* map_cmd = app.add_subcommand("codemap", "cross-ontology code mapping");
  std::string map_in = "foreign.jsonl", map_exact, map_emb, map_emb_tgt;
  std::string map_out = "mapped.jsonl", map_report = "coverage.json";
  double map_threshold = codemap::kDefaultThreshold;
  map_cmd->add_option("--in", map_in, "foreign patients.jsonl");
  map_cmd->add_option("--exact", map_exact, "exact.tsv");
  map_cmd->add_option("--emb", map_emb, "source embeddings .f32");
  map_cmd->add_option("--emb-target", map_emb_tgt, "target embeddings .f32");
  map_cmd->add_option("--threshold", map_threshold, "cosine cutoff (default 0.98)");
  map_cmd->add_option("--out", map_out, "mapped.jsonl");
  map_cmd->add_option("--report", map_report, "coverage.json");

  // sae
  auto* sae_cmd = app.add_subcommand("sae", "train a TopK sparse autoencoder");
  std::string sae_acts = "h_eos.f32", sae_out = "sae.ckpt";
  int sae_m = 512, sae_k = 16, sae_epochs = 60;
  sae_cmd->add_option("--activations", sae_acts, "EOS hidden states .f32");
  sae_cmd->add_option("--m", sae_m, "latent width");
  sae_cmd->add_option("--k", sae_k, "active latents");
  sae_cmd->add_option("--epochs", sae_epochs, "training epochs");
  sae_cmd->add_option("--out", sae_out, "sae checkpoint");

  // sae-features
  auto* feat_cmd = app.add_subcommand("sae-features", "top latent features and enriched codes");
  std::string feat_sae = "sae.ckpt", feat_cohort = "cohort.jsonl",
              feat_spec = "cohort_spec.json", feat_patients = "patients.jsonl",
              feat_acts = "h_eos.f32", feat_out = "features.json";
  feat_cmd->add_option("--sae", feat_sae, "sae checkpoint");
  feat_cmd->add_option("--cohort", feat_cohort, "cohort.jsonl");
  feat_cmd->add_option("--spec", feat_spec, "cohort_spec.json");
  feat_cmd->add_option("--patients", feat_patients, "patients.jsonl");
  feat_cmd->add_option("--activations", feat_acts, "train-positive EOS activations");
  feat_cmd->add_option("--out", feat_out, "features.json");

  // pipeline / sweep
  auto* pipe_cmd = app.add_subcommand("pipeline", "run the full desk-scale reproduction");
  auto* sweep_cmd = app.add_subcommand("sweep", "aggregate pipeline metrics across seeds");
  std::string sweep_seeds = "1,2,3,4,5";
  sweep_cmd->add_option("--seeds", sweep_seeds, "comma-separated seed list");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // prints help, exit 0
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;  // usage error
  }

  std::string command = app.get_subcommands().empty()
                            ? "help"
                            : app.get_subcommands().front()->get_name();
  try {
    if (synth_cmd->parsed())
      return run_synth(g, synth_n, synth_out, synth_truth, synth_cfg);
    if (cohort_cmd->parsed()) {
      spec.cohort_kind = cohort_kind == "subsequent" ? cohort::CohortKind::Subsequent
                                                     : cohort::CohortKind::First;
      spec.matching = cohort_matching == "random" ? cohort::Matching::Random
                                                  : cohort::Matching::Controlled;
      spec.check();
      return run_cohort(g, spec, cohort_in, cohort_out);
    }
    if (tok_cmd->parsed())
      return run_tokenize(g, tok_patients, tok_cohort, tok_spec, tok_out, tok_max_len,
                          size_t(tok_cap));
    if (pre_cmd->parsed())
      return run_pretrain_cmd(g, pre_cfg, pre_train, pre_vocab, pre_steps, pre_out);
    if (ft_cmd->parsed())
      return run_finetune_cmd(g, ft_ckpt, ft_tok, ft_rows, ft_budget, ft_out, ft_epochs);
    if (eval_cmd->parsed()) return run_eval(g, eval_scores, eval_report, eval_floor, eval_top);
    if (fit_cmd->parsed()) return run_scaling_fit(g, fit_points, fit_out);
    if (map_cmd->parsed())
      return run_codemap(g, map_in, map_exact, map_emb, map_emb_tgt, map_threshold, map_out,
                         map_report);
    if (sae_cmd->parsed()) return run_sae_cmd(g, sae_acts, sae_m, sae_k, sae_out, sae_epochs);
    if (feat_cmd->parsed())
      return run_sae_features(g, feat_sae, feat_cohort, feat_spec, feat_patients, feat_acts,
                              feat_out);
    if (pipe_cmd->parsed()) {
      pipeline::PipelineConfig cfg = pipeline::preset(g.scale, g.seed);
      cfg.out_dir = g.out_dir;
      auto report = pipeline::run_pipeline(cfg);
      std::cout << report.to_json() << "\n";
      return 0;
    }
    if (sweep_cmd->parsed()) {
      std::vector<uint64_t> seeds;
      for (const auto& s : split(sweep_seeds, ','))
        if (!trim(s).empty()) seeds.push_back(std::stoull(trim(s)));
      pipeline::PipelineConfig cfg = pipeline::preset(g.scale, g.seed);
      cfg.out_dir = g.out_dir;
      pipeline::ManifestScope scope("sweep", g.seed, g.out_dir);
      auto report = pipeline::seeds_sweep(cfg, seeds, g.jobs);
      std::ofstream(fs::path(g.out_dir) / "sweep_report.json") << report.to_json() << '\n';
      scope.output("sweep_report.json");
      std::cout << report.to_json() << "\n";
      return 0;
    }
    std::cout << app.help();
    return 0;
  } catch (const std::exception& e) {
    ordered_json err;
    err["error"] = e.what();
    err["command"] = command;
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
