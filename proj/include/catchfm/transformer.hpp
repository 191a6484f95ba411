#pragma once

#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "catchfm/tensor.hpp"

// Decoder-only transformer with visit-position rotary embeddings: pre-norm
// blocks with parallel attention + MLP residuals, untied LM head, and a
// two-way classifier head on the EOS hidden state.
namespace catchfm::model {

inline constexpr int32_t kEosTokenId = 0;  // matches ehr::Vocabulary::kEos

struct ModelConfig {
  int n_layers = 2;
  int d_model = 128;
  int n_heads = 4;
  int max_len = 2048;
  int vocab_size = 0;
  double theta_base = 10000.0;

  int head_dim() const { return d_model / n_heads; }

  void check() const {
    if (n_layers < 1 || d_model < 2 || n_heads < 1 || max_len < 2 || vocab_size < 4)
      fail("invalid model config");
    if (d_model % n_heads != 0) fail("d_model ", d_model, " not divisible by n_heads ", n_heads);
    if (head_dim() % 2 != 0) fail("head dim ", head_dim(), " must be even for rotary pairs");
  }

  // named configurations from 70m to 2.8b
  static ModelConfig named(const std::string& name, int vocab_size, int max_len = 2048);
};

inline ModelConfig ModelConfig::named(const std::string& name, int vocab_size, int max_len) {
  struct Row { const char* name; int layers, dim, heads; };
  static const Row rows[] = {
      {"70m", 6, 512, 8},    {"120m", 6, 768, 8},   {"160m", 12, 768, 12},
      {"260m", 12, 1024, 16}, {"350m", 20, 1024, 16}, {"410m", 24, 1024, 16},
      {"560m", 22, 1280, 10}, {"720m", 20, 1536, 12}, {"1b", 16, 2048, 8},
      {"1.2b", 20, 2048, 16}, {"1.4b", 24, 2048, 16}, {"2.1b", 24, 2560, 16},
      {"2.8b", 32, 2560, 32},
  };
  for (const auto& r : rows)
    if (name == r.name) {
      ModelConfig c;
      c.n_layers = r.layers;
      c.d_model = r.dim;
      c.n_heads = r.heads;
      c.max_len = max_len;
      c.vocab_size = vocab_size;
      c.check();
      return c;
    }
  fail("unknown model size '", name, "'");
}

inline uint64_t param_count(const ModelConfig& c) {
  uint64_t d = uint64_t(c.d_model), v = uint64_t(c.vocab_size), l = uint64_t(c.n_layers);
  return 2 * v * d                 // embeddings + untied LM head
         + l * (12 * d * d + 13 * d)  // attention, MLP, norms per layer
         + 2 * d                   // final norm
         + 2 * d + 2;              // classifier head
}

template <typename S>
struct Param {
  te::Mat<S> v, g;

  void init_zero(Eigen::Index rows, Eigen::Index cols) {
    v.setZero(rows, cols);
    g.setZero(rows, cols);
  }
  void init_normal(Eigen::Index rows, Eigen::Index cols, double std, Rng& rng) {
    v.resize(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) v(i, j) = S(rng.normal() * std);
    g.setZero(rows, cols);
  }
  void init_ones(Eigen::Index rows, Eigen::Index cols) {
    v.setOnes(rows, cols);
    g.setZero(rows, cols);
  }
};

template <typename S>
struct ModelParameters {
  ModelConfig config;

  Param<S> embed;    // V x d
  Param<S> lm_head;  // d x V
  struct Layer {
    Param<S> ln1_g, ln1_b, ln2_g, ln2_b;
    Param<S> wq, bq, wk, bk, wv, bv, wo, bo;
    Param<S> w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  Param<S> lnf_g, lnf_b;
  Param<S> cls_w;  // d x 2, zero-init so finetuning starts at p = 0.5
  Param<S> cls_b;  // 1 x 2

  static ModelParameters init(const ModelConfig& cfg, uint64_t seed) {
    cfg.check();
    ModelParameters p;
    p.config = cfg;
    Rng rng = Rng(seed).sub("model_init");
    const int d = cfg.d_model;
    const double base_std = 0.02;
    const double out_std = base_std / std::sqrt(2.0 * cfg.n_layers);
    p.embed.init_normal(cfg.vocab_size, d, base_std, rng);
    p.lm_head.init_normal(d, cfg.vocab_size, base_std, rng);
    p.layers.resize(size_t(cfg.n_layers));
    for (auto& l : p.layers) {
      l.ln1_g.init_ones(1, d);
      l.ln1_b.init_zero(1, d);
      l.ln2_g.init_ones(1, d);
      l.ln2_b.init_zero(1, d);
      l.wq.init_normal(d, d, base_std, rng);
      l.bq.init_zero(1, d);
      l.wk.init_normal(d, d, base_std, rng);
      l.bk.init_zero(1, d);
      l.wv.init_normal(d, d, base_std, rng);
      l.bv.init_zero(1, d);
      l.wo.init_normal(d, d, out_std, rng);
      l.bo.init_zero(1, d);
      l.w1.init_normal(d, 4 * d, base_std, rng);
      l.b1.init_zero(1, 4 * d);
      l.w2.init_normal(4 * d, d, out_std, rng);
      l.b2.init_zero(1, d);
    }
    p.lnf_g.init_ones(1, d);
    p.lnf_b.init_zero(1, d);
    p.cls_w.init_zero(d, 2);
    p.cls_b.init_zero(1, 2);
    return p;
  }

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("embed", embed);
    fn("lm_head", lm_head);
    for (size_t i = 0; i < layers.size(); ++i) {
      auto& l = layers[i];
      std::string base = concat("layer", i, ".");
      fn(base + "ln1_g", l.ln1_g); fn(base + "ln1_b", l.ln1_b);
      fn(base + "ln2_g", l.ln2_g); fn(base + "ln2_b", l.ln2_b);
      fn(base + "wq", l.wq); fn(base + "bq", l.bq);
      fn(base + "wk", l.wk); fn(base + "bk", l.bk);
      fn(base + "wv", l.wv); fn(base + "bv", l.bv);
      fn(base + "wo", l.wo); fn(base + "bo", l.bo);
      fn(base + "w1", l.w1); fn(base + "b1", l.b1);
      fn(base + "w2", l.w2); fn(base + "b2", l.b2);
    }
    fn("lnf_g", lnf_g);
    fn("lnf_b", lnf_b);
    fn("cls_w", cls_w);
    fn("cls_b", cls_b);
  }

  uint64_t n_params() {
    uint64_t n = 0;
    for_each([&](const std::string&, Param<S>& p) { n += uint64_t(p.v.size()); });
    return n;
  }

  void zero_grads() {
    for_each([](const std::string&, Param<S>& p) { p.g.setZero(); });
  }
};

// parameter leaves bound to one tape, with or without gradient tracking
template <typename S>
struct BoundParams {
  te::Tensor<S> embed, lm_head;
  struct Layer {
    te::Tensor<S> ln1_g, ln1_b, ln2_g, ln2_b;
    te::Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
    te::Tensor<S> w1, b1, w2, b2;
  };
  std::vector<Layer> layers;
  te::Tensor<S> lnf_g, lnf_b, cls_w, cls_b;
};

template <typename S>
BoundParams<S> bind(te::Tape<S>& tape, ModelParameters<S>& p, bool with_grad) {
  auto leaf = [&](Param<S>& q) {
    return with_grad ? tape.param(q.v, q.g) : tape.external(q.v);
  };
  BoundParams<S> b;
  b.embed = leaf(p.embed);
  b.lm_head = leaf(p.lm_head);
  b.layers.resize(p.layers.size());
  for (size_t i = 0; i < p.layers.size(); ++i) {
    auto& l = p.layers[i];
    auto& o = b.layers[i];
    o.ln1_g = leaf(l.ln1_g); o.ln1_b = leaf(l.ln1_b);
    o.ln2_g = leaf(l.ln2_g); o.ln2_b = leaf(l.ln2_b);
    o.wq = leaf(l.wq); o.bq = leaf(l.bq);
    o.wk = leaf(l.wk); o.bk = leaf(l.bk);
    o.wv = leaf(l.wv); o.bv = leaf(l.bv);
    o.wo = leaf(l.wo); o.bo = leaf(l.bo);
    o.w1 = leaf(l.w1); o.b1 = leaf(l.b1);
    o.w2 = leaf(l.w2); o.b2 = leaf(l.b2);
  }
  b.lnf_g = leaf(p.lnf_g);
  b.lnf_b = leaf(p.lnf_b);
  b.cls_w = leaf(p.cls_w);
  b.cls_b = leaf(p.cls_b);
  return b;
}

// final-norm hidden states, T x d
template <typename S>
te::Tensor<S> hidden_states(te::Tape<S>& tape, const ModelConfig& cfg, const BoundParams<S>& bp,
                            const std::vector<int32_t>& tokens,
                            const std::vector<int32_t>& positions) {
  if (tokens.empty()) fail("empty token sequence");
  if (tokens.size() != positions.size())
    fail("tokens/positions length mismatch: ", tokens.size(), " vs ", positions.size());
  if (int(tokens.size()) > cfg.max_len)
    fail("sequence length ", tokens.size(), " exceeds max_len ", cfg.max_len);

  const Eigen::Index t_len = Eigen::Index(tokens.size());
  const int dh = cfg.head_dim();
  const S inv_sqrt_dh = S(1.0 / std::sqrt(double(dh)));
  auto mask = tape.constant(te::causal_mask<S>(t_len));

  te::Tensor<S> x = te::embedding_rows(bp.embed, tokens);
  for (const auto& l : bp.layers) {
    auto a = te::layer_norm_rows(x, l.ln1_g, l.ln1_b);
    auto q = te::add_rowvec(te::matmul(a, l.wq), l.bq);
    auto k = te::add_rowvec(te::matmul(a, l.wk), l.bk);
    auto v = te::add_rowvec(te::matmul(a, l.wv), l.bv);
    std::vector<te::Tensor<S>> heads;
    heads.reserve(size_t(cfg.n_heads));
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto qh = te::rope_rows(te::col_slice(q, h * dh, dh), positions, cfg.theta_base);
      auto kh = te::rope_rows(te::col_slice(k, h * dh, dh), positions, cfg.theta_base);
      auto vh = te::col_slice(v, h * dh, dh);
      auto scores = te::add(te::scale(te::matmul(qh, te::transpose(kh)), inv_sqrt_dh), mask);
      heads.push_back(te::matmul(te::softmax_rows(scores), vh));
    }
    auto attn = te::add_rowvec(te::matmul(te::concat_cols(heads), l.wo), l.bo);
    auto m = te::layer_norm_rows(x, l.ln2_g, l.ln2_b);
    auto mlp = te::add_rowvec(
        te::matmul(te::gelu(te::add_rowvec(te::matmul(m, l.w1), l.b1)), l.w2), l.b2);
    x = te::add(te::add(x, attn), mlp);
  }
  return te::layer_norm_rows(x, bp.lnf_g, bp.lnf_b);
}

// autoregressive next-token loss graph; loss over zero targets (T = 1) is 0
template <typename S>
te::Tensor<S> lm_loss_graph(te::Tape<S>& tape, const ModelConfig& cfg, const BoundParams<S>& bp,
                            const std::vector<int32_t>& tokens,
                            const std::vector<int32_t>& positions) {
  auto h = hidden_states(tape, cfg, bp, tokens, positions);
  if (tokens.size() < 2) return tape.constant(te::Mat<S>::Zero(1, 1));
  auto logits = te::matmul(te::rows_slice(h, 0, Eigen::Index(tokens.size()) - 1), bp.lm_head);
  std::vector<int32_t> targets(tokens.begin() + 1, tokens.end());
  return te::cross_entropy_rows(logits, targets);
}

template <typename S>
struct LmOutput {
  te::Mat<S> logits;  // T x V
  S loss = S(0);
};

template <typename S>
LmOutput<S> forward_lm(ModelParameters<S>& params, const std::vector<int32_t>& tokens,
                       const std::vector<int32_t>& positions) {
  te::Tape<S> tape;
  auto bp = bind(tape, params, /*with_grad=*/false);
  auto h = hidden_states(tape, params.config, bp, tokens, positions);
  auto logits = te::matmul(h, bp.lm_head);
  LmOutput<S> out;
  out.logits = logits.value();
  if (tokens.size() >= 2) {
    std::vector<int32_t> targets(tokens.begin() + 1, tokens.end());
    auto used = te::rows_slice(logits, 0, Eigen::Index(tokens.size()) - 1);
    out.loss = te::cross_entropy_rows(used, targets).value()(0, 0);
  }
  return out;
}

// classifier loss graph on the EOS hidden state
template <typename S>
te::Tensor<S> classify_loss_graph(te::Tape<S>& tape, const ModelConfig& cfg,
                                  const BoundParams<S>& bp, const std::vector<int32_t>& tokens,
                                  const std::vector<int32_t>& positions, int label) {
  if (tokens.empty() || tokens.back() != kEosTokenId)
    fail("classification input must end with EOS");
  if (label != 0 && label != 1) fail("label must be 0 or 1");
  auto h = hidden_states(tape, cfg, bp, tokens, positions);
  auto h_eos = te::rows_slice(h, Eigen::Index(tokens.size()) - 1, 1);
  auto logits = te::add_rowvec(te::matmul(h_eos, bp.cls_w), bp.cls_b);
  return te::cross_entropy_rows(logits, {int32_t(label)});
}

// probability of the positive class, Softmax(W h_eos + b)[1]
template <typename S>
S forward_classify(ModelParameters<S>& params, const std::vector<int32_t>& tokens,
                   const std::vector<int32_t>& positions) {
  if (tokens.empty() || tokens.back() != kEosTokenId)
    fail("classification input must end with EOS");
  te::Tape<S> tape;
  auto bp = bind(tape, params, /*with_grad=*/false);
  auto h = hidden_states(tape, params.config, bp, tokens, positions);
  auto h_eos = te::rows_slice(h, Eigen::Index(tokens.size()) - 1, 1);
  auto logits = te::add_rowvec(te::matmul(h_eos, bp.cls_w), bp.cls_b);
  auto p = te::softmax_rows(logits);
  return p.value()(0, 1);
}

// EOS hidden states for a batch, one row per sequence
template <typename S>
te::Mat<S> export_hidden_eos(ModelParameters<S>& params,
                             const std::vector<std::vector<int32_t>>& token_batch,
                             const std::vector<std::vector<int32_t>>& position_batch) {
  if (token_batch.size() != position_batch.size()) fail("batch size mismatch");
  te::Mat<S> out(Eigen::Index(token_batch.size()), params.config.d_model);
  for (size_t i = 0; i < token_batch.size(); ++i) {
    te::Tape<S> tape;
    auto bp = bind(tape, params, /*with_grad=*/false);
    auto h = hidden_states(tape, params.config, bp, token_batch[i], position_batch[i]);
    out.row(Eigen::Index(i)) = h.value().row(h.rows() - 1);
  }
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints: u32le header length, JSON header {config, step, rng_state,
// manifest: [{name, shape, offset}]}, then a raw little-endian f32 blob

template <typename S>
void save_checkpoint(ModelParameters<S>& params, const std::string& path, uint64_t step = 0,
                     uint64_t rng_state = 0) {
  nlohmann::ordered_json header;
  header["config"] = {{"n_layers", params.config.n_layers},
                      {"d_model", params.config.d_model},
                      {"n_heads", params.config.n_heads},
                      {"max_len", params.config.max_len},
                      {"vocab_size", params.config.vocab_size},
                      {"theta_base", params.config.theta_base}};
  header["step"] = step;
  header["rng_state"] = rng_state;
  header["manifest"] = nlohmann::ordered_json::array();
  uint64_t offset = 0;
  params.for_each([&](const std::string& name, Param<S>& p) {
    header["manifest"].push_back({{"name", name},
                                  {"shape", {p.v.rows(), p.v.cols()}},
                                  {"offset", offset}});
    offset += uint64_t(p.v.size()) * sizeof(float);
  });
  std::string h = header.dump();

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) fail("cannot open ", tmp, " for writing");
    uint32_t hlen = uint32_t(h.size());
    unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xff),
                             static_cast<unsigned char>((hlen >> 8) & 0xff),
                             static_cast<unsigned char>((hlen >> 16) & 0xff),
                             static_cast<unsigned char>((hlen >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(lenb), 4);
    out.write(h.data(), std::streamsize(h.size()));
    std::vector<float> buf;
    params.for_each([&](const std::string&, Param<S>& p) {
      buf.resize(size_t(p.v.size()));
      for (Eigen::Index i = 0; i < p.v.rows(); ++i)
        for (Eigen::Index j = 0; j < p.v.cols(); ++j)
          buf[size_t(i * p.v.cols() + j)] = float(p.v(i, j));
      out.write(reinterpret_cast<const char*>(buf.data()),
                std::streamsize(buf.size() * sizeof(float)));
    });
    if (!out) fail("write failed: ", tmp);
  }
  std::rename(tmp.c_str(), path.c_str());
}

struct CheckpointInfo {
  ModelConfig config;
  uint64_t step = 0;
  uint64_t rng_state = 0;
};

template <typename S>
CheckpointInfo load_checkpoint(ModelParameters<S>& params, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open checkpoint ", path);
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  if (in.gcount() != 4) fail(path, ": truncated checkpoint header");
  uint32_t hlen = uint32_t(lenb[0]) | uint32_t(lenb[1]) << 8 | uint32_t(lenb[2]) << 16 |
                  uint32_t(lenb[3]) << 24;
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (uint32_t(in.gcount()) != hlen) fail(path, ": truncated checkpoint header");
  nlohmann::json header = nlohmann::json::parse(h);

  CheckpointInfo info;
  const auto& jc = header.at("config");
  info.config.n_layers = jc.at("n_layers").get<int>();
  info.config.d_model = jc.at("d_model").get<int>();
  info.config.n_heads = jc.at("n_heads").get<int>();
  info.config.max_len = jc.at("max_len").get<int>();
  info.config.vocab_size = jc.at("vocab_size").get<int>();
  info.config.theta_base = jc.at("theta_base").get<double>();
  info.step = header.at("step").get<uint64_t>();
  info.rng_state = header.value("rng_state", uint64_t(0));

  params = ModelParameters<S>::init(info.config, 0);
  size_t idx = 0;
  const auto& manifest = header.at("manifest");
  params.for_each([&](const std::string& name, Param<S>& p) {
    const auto& entry = manifest.at(idx++);
    if (entry.at("name").get<std::string>() != name)
      fail(path, ": manifest entry '", entry.at("name").get<std::string>(),
           "' does not match expected '", name, "'");
    auto shape = entry.at("shape");
    if (shape.at(0).get<Eigen::Index>() != p.v.rows() ||
        shape.at(1).get<Eigen::Index>() != p.v.cols())
      fail(path, ": shape mismatch for ", name);
    std::vector<float> buf(size_t(p.v.size()));
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(buf.size() * sizeof(float)));
    if (size_t(in.gcount()) != buf.size() * sizeof(float))
      fail(path, ": truncated blob for ", name);
    for (Eigen::Index i = 0; i < p.v.rows(); ++i)
      for (Eigen::Index j = 0; j < p.v.cols(); ++j)
        p.v(i, j) = S(buf[size_t(i * p.v.cols() + j)]);
    p.g.setZero(p.v.rows(), p.v.cols());
  });
  return info;
}

}  // namespace catchfm::model
