#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <vector>

#include "catchfm/metrics.hpp"
#include "catchfm/tokenizer.hpp"
#include "catchfm/transformer.hpp"

namespace catchfm::train {

struct TrainConfig {
  double peak_lr = 1e-5;  // 6e-6 for >= 1b sizes
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double grad_clip_norm = 0.1;
  double warmup_ratio = 0.1, stable_ratio = 0.8, decay_ratio = 0.1;
  int batch_size = 64;    // 128 for finetuning
  int epochs = 5;         // finetuning only
  int64_t total_steps = 0;  // pretraining only
  uint64_t seed = 0;
  int64_t checkpoint_every = 0;      // 0 = only final
  std::string checkpoint_dir;       // empty = no checkpoints
  int early_stop_patience = 2;      // evaluations without AUPRC improvement

  void check() const {
    if (std::abs(warmup_ratio + stable_ratio + decay_ratio - 1.0) > 1e-9)
      fail("schedule ratios must sum to 1");
    if (peak_lr <= 0 || batch_size < 1) fail("invalid train config");
  }
};

struct StepStats {
  int64_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;  // pre-clip
  uint64_t tokens = 0;     // cumulative
  double flops = 0.0;      // cumulative, 6 * N * tokens
};

struct TrainStats {
  std::vector<StepStats> steps;
  uint64_t tokens_consumed = 0;
  double flops = 0.0;

  void write_csv(const std::string& path) const {
    std::ofstream out(path);
    if (!out) fail("cannot open ", path, " for writing");
    out << "step,loss,lr,grad_norm,tokens,flops\n";
    for (const auto& s : steps)
      out << s.step << ',' << s.loss << ',' << s.lr << ',' << s.grad_norm << ',' << s.tokens
          << ',' << s.flops << '\n';
  }
};

struct TrainDivergence : std::runtime_error {
  explicit TrainDivergence(const std::string& what, std::string checkpoint = "")
      : std::runtime_error(what), last_good_checkpoint(std::move(checkpoint)) {}
  std::string last_good_checkpoint;
};

// Warmup-Stable-Decay: linear 0 -> peak over the first 10% of steps, constant
// peak for the middle 80%, linear peak -> 0 over the final 10%.
inline double lr_at(int64_t step, int64_t total_steps, const TrainConfig& cfg) {
  cfg.check();
  if (step < 0 || step >= total_steps)
    fail("step ", step, " out of range [0, ", total_steps, ")");
  double warmup = cfg.warmup_ratio * double(total_steps);
  double decay_start = (cfg.warmup_ratio + cfg.stable_ratio) * double(total_steps);
  double s = double(step);
  if (s < warmup) return cfg.peak_lr * (warmup > 0 ? s / warmup : 1.0);
  if (s < decay_start) return cfg.peak_lr;
  double decay = double(total_steps) - decay_start;
  return cfg.peak_lr * (decay > 0 ? (double(total_steps) - s) / decay : 0.0);
}

// FLOPs convention used throughout: C = 6 * N * D with N = all trainable
// parameters. The convention is fixed here so every consumer is
// self-consistent, the scaling fits included.
inline double flops_for(uint64_t n_params, uint64_t tokens) {
  return 6.0 * double(n_params) * double(tokens);
}

inline double estimate_flops(const model::ModelConfig& config, uint64_t tokens) {
  return flops_for(model::param_count(config), tokens);
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay; norms and biases (1-row tensors) are not
// decayed. Global-norm clipping at cfg.grad_clip_norm.

template <typename S>
class AdamW {
 public:
  AdamW(model::ModelParameters<S>& params, const TrainConfig& cfg) : cfg_(cfg) {
    params.for_each([&](const std::string&, model::Param<S>& p) {
      m_.emplace_back(te::Mat<S>::Zero(p.v.rows(), p.v.cols()));
      v_.emplace_back(te::Mat<S>::Zero(p.v.rows(), p.v.cols()));
    });
  }

  // returns the pre-clip global gradient norm
  double step(model::ModelParameters<S>& params, double lr) {
    double sq = 0.0;
    params.for_each([&](const std::string&, model::Param<S>& p) {
      sq += double(p.g.squaredNorm());
    });
    double norm = std::sqrt(sq);
    S scale_g = S(1);
    if (norm > cfg_.grad_clip_norm && norm > 0.0)
      scale_g = S(cfg_.grad_clip_norm / norm);

    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    size_t i = 0;
    params.for_each([&](const std::string&, model::Param<S>& p) {
      te::Mat<S> g = p.g * scale_g;
      m_[i] = S(cfg_.beta1) * m_[i] + S(1.0 - cfg_.beta1) * g;
      v_[i] = S(cfg_.beta2) * v_[i] + S(1.0 - cfg_.beta2) * g.cwiseProduct(g);
      te::Mat<S> mhat = m_[i] / S(bc1);
      te::Mat<S> vhat = v_[i] / S(bc2);
      p.v.array() -= S(lr) * mhat.array() / (vhat.array().sqrt() + S(cfg_.eps));
      if (p.v.rows() > 1)  // decoupled decay; skip norms and biases
        p.v.array() -= S(lr * cfg_.weight_decay) * p.v.array();
      ++i;
    });
    return norm;
  }

 private:
  TrainConfig cfg_;
  std::vector<te::Mat<S>> m_, v_;
  int64_t t_ = 0;
};

// ---------------------------------------------------------------------------

// token-weighted autoregressive validation loss
template <typename S>
double eval_lm_loss(model::ModelParameters<S>& params,
                    const std::vector<tok::TokenSequence>& sequences) {
  double nll = 0.0;
  uint64_t targets = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) continue;
    auto out = model::forward_lm(params, seq.ids, seq.visit_positions);
    nll += double(out.loss) * double(seq.size() - 1);
    targets += seq.size() - 1;
  }
  if (targets == 0) fail("no prediction targets in validation set");
  return nll / double(targets);
}

template <typename S>
TrainStats pretrain(model::ModelParameters<S>& params,
                    const std::vector<tok::TokenSequence>& sequences, TrainConfig cfg) {
  cfg.check();
  if (sequences.empty()) fail("pretraining needs a non-empty shard set");
  if (cfg.total_steps <= 0) fail("total_steps must be positive");
  const uint64_t n_params = params.n_params();

  AdamW<S> opt(params, cfg);
  TrainStats stats;
  Rng order_rng = Rng(cfg.seed).sub("pretrain_order");
  std::vector<size_t> order(sequences.size());
  std::iota(order.begin(), order.end(), size_t(0));
  order_rng.shuffle(order);
  size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor == order.size()) {
      order_rng.shuffle(order);
      cursor = 0;
    }
    return order[cursor++];
  };

  std::string last_ckpt;
  auto write_ckpt = [&](int64_t step) {
    if (cfg.checkpoint_dir.empty()) return;
    std::filesystem::create_directories(cfg.checkpoint_dir);
    std::string path = cfg.checkpoint_dir + "/pretrain_step" + std::to_string(step) + ".ckpt";
    model::save_checkpoint(params, path, uint64_t(step));
    last_ckpt = path;
  };

  for (int64_t step = 0; step < cfg.total_steps; ++step) {
    params.zero_grads();
    double loss_sum = 0.0;
    try {
      for (int b = 0; b < cfg.batch_size; ++b) {
        const auto& seq = sequences[next_index()];
        te::Tape<S> tape;
        auto bp = model::bind(tape, params, /*with_grad=*/true);
        auto loss = model::lm_loss_graph(tape, params.config, bp, seq.ids, seq.visit_positions);
        tape.backward(loss, S(1.0 / cfg.batch_size));
        loss_sum += double(loss.value()(0, 0));
        stats.tokens_consumed += seq.size();
      }
    } catch (const std::runtime_error& e) {
      write_ckpt(step);  // preserve the last good parameters
      throw TrainDivergence(concat("pretraining diverged at step ", step, ": ", e.what()),
                            last_ckpt);
    }
    double lr = lr_at(step, cfg.total_steps, cfg);
    double gnorm = opt.step(params, lr);
    stats.flops = flops_for(n_params, stats.tokens_consumed);
    stats.steps.push_back({step, loss_sum / cfg.batch_size, lr, gnorm, stats.tokens_consumed,
                           stats.flops});
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0) write_ckpt(step + 1);
  }
  write_ckpt(cfg.total_steps);
  return stats;
}

// stratified subsample of a labeled training set, seeded; keeps the class mix
inline std::vector<size_t> label_budget_subsample(const std::vector<int>& labels,
                                                  size_t budget, uint64_t seed) {
  std::vector<size_t> pos, neg;
  for (size_t i = 0; i < labels.size(); ++i) (labels[i] ? pos : neg).push_back(i);
  if (budget >= labels.size()) {
    std::vector<size_t> all(labels.size());
    std::iota(all.begin(), all.end(), size_t(0));
    return all;
  }
  double rate = double(pos.size()) / double(labels.size());
  size_t keep_pos = size_t(std::lround(double(budget) * rate));
  keep_pos = std::min(keep_pos, pos.size());
  size_t keep_neg = std::min(budget - keep_pos, neg.size());
  Rng rng = Rng(seed).sub("label_budget");
  rng.shuffle(pos);
  rng.shuffle(neg);
  std::vector<size_t> keep(pos.begin(), pos.begin() + long(keep_pos));
  keep.insert(keep.end(), neg.begin(), neg.begin() + long(keep_neg));
  std::sort(keep.begin(), keep.end());
  return keep;
}

struct FinetuneResult {
  TrainStats stats;
  double best_valid_auprc = 0.0;
  int best_epoch = -1;
  std::vector<double> valid_auprc_per_epoch;
};

template <typename S>
std::vector<double> classify_scores(model::ModelParameters<S>& params,
                                    const std::vector<tok::TokenSequence>& sequences) {
  std::vector<double> scores;
  scores.reserve(sequences.size());
  for (const auto& seq : sequences)
    scores.push_back(double(model::forward_classify(params, seq.ids, seq.visit_positions)));
  return scores;
}

template <typename S>
FinetuneResult finetune(model::ModelParameters<S>& params,
                        const std::vector<tok::TokenSequence>& train_set,
                        const std::vector<tok::TokenSequence>& valid_set, TrainConfig cfg,
                        std::optional<size_t> label_budget = std::nullopt) {
  cfg.check();
  if (train_set.empty()) fail("finetuning needs a non-empty training set");
  for (const auto& s : train_set)
    if (!s.label) fail("unlabeled sequence in finetuning set (", s.source, ")");

  std::vector<int> labels;
  labels.reserve(train_set.size());
  for (const auto& s : train_set) labels.push_back(*s.label);
  std::vector<size_t> active(train_set.size());
  std::iota(active.begin(), active.end(), size_t(0));
  if (label_budget) active = label_budget_subsample(labels, *label_budget, cfg.seed);

  size_t n_pos = 0;
  for (size_t i : active) n_pos += size_t(labels[i]);
  if (n_pos == 0 || n_pos == active.size())
    fail("single-class training set (", n_pos, " positives of ", active.size(), ")");

  metrics::ScoredCohort valid_truth;
  for (const auto& s : valid_set) {
    if (!s.label) fail("unlabeled sequence in validation set (", s.source, ")");
    valid_truth.labels.push_back(*s.label);
  }

  const uint64_t n_params = params.n_params();
  AdamW<S> opt(params, cfg);
  FinetuneResult result;
  Rng order_rng = Rng(cfg.seed).sub("finetune_order");

  const int64_t steps_per_epoch =
      int64_t((active.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));
  const int64_t total_steps = steps_per_epoch * cfg.epochs;

  model::ModelParameters<S> best = params;
  int stale = 0;
  int64_t step = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<size_t> order = active;
    order_rng.shuffle(order);
    for (size_t off = 0; off < order.size(); off += size_t(cfg.batch_size)) {
      size_t batch_n = std::min(size_t(cfg.batch_size), order.size() - off);
      params.zero_grads();
      double loss_sum = 0.0;
      try {
        for (size_t b = 0; b < batch_n; ++b) {
          const auto& seq = train_set[order[off + b]];
          te::Tape<S> tape;
          auto bp = model::bind(tape, params, /*with_grad=*/true);
          auto loss = model::classify_loss_graph(tape, params.config, bp, seq.ids,
                                                 seq.visit_positions, *seq.label);
          tape.backward(loss, S(1.0 / double(batch_n)));
          loss_sum += double(loss.value()(0, 0));
          result.stats.tokens_consumed += seq.size();
        }
      } catch (const std::runtime_error& e) {
        throw TrainDivergence(concat("finetuning diverged at step ", step, ": ", e.what()));
      }
      double lr = lr_at(std::min(step, total_steps - 1), total_steps, cfg);
      double gnorm = opt.step(params, lr);
      result.stats.flops = flops_for(n_params, result.stats.tokens_consumed);
      result.stats.steps.push_back({step, loss_sum / double(batch_n), lr, gnorm,
                                    result.stats.tokens_consumed, result.stats.flops});
      ++step;
    }

    if (!valid_set.empty()) {
      valid_truth.scores = classify_scores(params, valid_set);
      double ap = metrics::auprc(valid_truth);
      result.valid_auprc_per_epoch.push_back(ap);
      if (ap > result.best_valid_auprc) {
        result.best_valid_auprc = ap;
        result.best_epoch = epoch;
        best = params;
        stale = 0;
      } else if (++stale >= cfg.early_stop_patience) {
        break;
      }
    }
  }
  if (!valid_set.empty() && result.best_epoch >= 0) params = best;
  return result;
}

}  // namespace catchfm::train
