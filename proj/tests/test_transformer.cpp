#include <doctest.h>

#include <filesystem>

#include "catchfm/transformer.hpp"

using namespace catchfm;
using namespace catchfm::model;

namespace {

ModelConfig toy_config(int vocab = 121) {
  ModelConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.n_heads = 2;
  c.max_len = 64;
  c.vocab_size = vocab;
  return c;
}

std::vector<int32_t> ramp_tokens(int n, int vocab) {
  std::vector<int32_t> t;
  for (int i = 0; i < n; ++i) t.push_back(3 + (i * 7) % (vocab - 3));
  return t;
}

std::vector<int32_t> visit_positions_for(int n) {
  std::vector<int32_t> p;
  for (int i = 0; i < n; ++i) p.push_back(i / 3);
  return p;
}

}  // namespace

TEST_CASE("freshly initialized model starts near the uniform loss ln V") {
  for (int vocab : {121, 500}) {
    auto params = ModelParameters<float>::init(toy_config(vocab), 7);
    auto tokens = ramp_tokens(24, vocab);
    auto out = forward_lm(params, tokens, visit_positions_for(24));
    CHECK(double(out.loss) ==
          doctest::Approx(std::log(double(vocab))).epsilon(0.05));
  }
}

TEST_CASE("single-token input has zero prediction targets and zero loss") {
  auto params = ModelParameters<float>::init(toy_config(), 7);
  auto out = forward_lm(params, {5}, {0});
  CHECK(out.loss == 0.0f);
  CHECK(out.logits.rows() == 1);
}

TEST_CASE("logit shape is T x V for every valid T") {
  auto params = ModelParameters<float>::init(toy_config(), 7);
  for (int t : {1, 2, 17, 64}) {
    auto out = forward_lm(params, ramp_tokens(t, 121), visit_positions_for(t));
    CHECK(out.logits.rows() == t);
    CHECK(out.logits.cols() == 121);
  }
  CHECK_THROWS(forward_lm(params, ramp_tokens(65, 121), visit_positions_for(65)));
}

TEST_CASE("out-of-vocabulary token ids are rejected") {
  auto params = ModelParameters<float>::init(toy_config(), 7);
  CHECK_THROWS(forward_lm(params, {5, 121}, {0, 0}));
}

TEST_CASE("tokens sharing a visit share their rotation: equal rows rotate equally") {
  // two tokens with the same embedding and the same visit position must have
  // identical rotated q/k rows
  auto params = ModelParameters<double>::init(toy_config(), 9);
  te::Tape<double> tape;
  te::Mat<double> x(2, 32);
  x.row(0) = te::Mat<double>::Constant(1, 32, 0.3);
  x.row(1) = x.row(0);
  auto rotated = te::rope_rows(tape.constant(x), {5, 5}, 10000.0);
  CHECK((rotated.value().row(0) - rotated.value().row(1)).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("shifting all visit positions leaves the logits invariant") {
  auto params = ModelParameters<double>::init(toy_config(), 21);
  auto tokens = ramp_tokens(18, 121);
  std::vector<int32_t> pos = visit_positions_for(18);
  auto base = forward_lm(params, tokens, pos);
  for (int shift : {1, 5, 40}) {
    std::vector<int32_t> shifted = pos;
    for (auto& p : shifted) p += shift;
    auto moved = forward_lm(params, tokens, shifted);
    double max_diff = (moved.logits - base.logits).cwiseAbs().maxCoeff();
    CHECK(max_diff < 1e-5);
  }
}

TEST_CASE("causality: poking token k only changes logits at indices >= k") {
  auto params = ModelParameters<float>::init(toy_config(), 3);
  auto tokens = ramp_tokens(12, 121);
  auto pos = visit_positions_for(12);
  auto base = forward_lm(params, tokens, pos);
  for (int k : {4, 8, 11}) {
    auto poked = tokens;
    poked[size_t(k)] = (poked[size_t(k)] + 13) % 121;
    auto out = forward_lm(params, poked, pos);
    for (int r = 0; r < k; ++r)
      CHECK((out.logits.row(r) - base.logits.row(r)).cwiseAbs().maxCoeff() == 0.0f);
    CHECK((out.logits.row(k) - base.logits.row(k)).cwiseAbs().maxCoeff() > 0.0f);
  }
}

TEST_CASE("zero classifier head answers exactly 0.5; a large bias saturates") {
  auto params = ModelParameters<float>::init(toy_config(), 4);
  std::vector<int32_t> tokens = ramp_tokens(10, 121);
  tokens.back() = kEosTokenId;
  auto pos = visit_positions_for(10);
  CHECK(forward_classify(params, tokens, pos) == 0.5f);

  params.cls_b.v(0, 1) = 10.0f;
  CHECK(double(forward_classify(params, tokens, pos)) ==
        doctest::Approx(1.0).epsilon(1e-4));
}

TEST_CASE("classification requires a trailing EOS") {
  auto params = ModelParameters<float>::init(toy_config(), 4);
  auto tokens = ramp_tokens(10, 121);  // no EOS
  CHECK_THROWS(forward_classify(params, tokens, visit_positions_for(10)));
}

TEST_CASE("export_hidden_eos is deterministic and permutes with the batch") {
  auto params = ModelParameters<float>::init(toy_config(), 6);
  std::vector<std::vector<int32_t>> tokens;
  std::vector<std::vector<int32_t>> positions;
  for (int s = 0; s < 3; ++s) {
    auto t = ramp_tokens(8 + s, 121);
    t.back() = kEosTokenId;
    tokens.push_back(t);
    positions.push_back(visit_positions_for(8 + s));
  }
  auto h1 = export_hidden_eos(params, tokens, positions);
  auto h2 = export_hidden_eos(params, tokens, positions);
  CHECK(h1.rows() == 3);
  CHECK(h1.cols() == 32);
  CHECK((h1 - h2).cwiseAbs().maxCoeff() == 0.0f);

  std::swap(tokens[0], tokens[2]);
  std::swap(positions[0], positions[2]);
  auto h3 = export_hidden_eos(params, tokens, positions);
  CHECK((h3.row(0) - h1.row(2)).cwiseAbs().maxCoeff() == 0.0f);
  CHECK((h3.row(2) - h1.row(0)).cwiseAbs().maxCoeff() == 0.0f);

  auto single = export_hidden_eos(params, {tokens[0]}, {positions[0]});
  CHECK(single.rows() == 1);
}

TEST_CASE("classifier probability equals softmax of W h_eos + b") {
  auto params = ModelParameters<float>::init(toy_config(), 5);
  Rng rng(44);
  for (Eigen::Index i = 0; i < params.cls_w.v.rows(); ++i)
    for (Eigen::Index j = 0; j < 2; ++j) params.cls_w.v(i, j) = float(rng.normal() * 0.3);
  std::vector<int32_t> tokens = ramp_tokens(9, 121);
  tokens.back() = kEosTokenId;
  auto pos = visit_positions_for(9);
  auto h = export_hidden_eos(params, {tokens}, {pos});
  Eigen::RowVector2f logits = h.row(0) * params.cls_w.v + params.cls_b.v.row(0);
  float m = logits.maxCoeff();
  float p1 = std::exp(logits(1) - m) / (std::exp(logits(0) - m) + std::exp(logits(1) - m));
  CHECK(forward_classify(params, tokens, pos) == doctest::Approx(p1).epsilon(1e-6));
}

TEST_CASE("checkpoints restore the exact forward behavior") {
  auto params = ModelParameters<float>::init(toy_config(), 10);
  auto path = (std::filesystem::temp_directory_path() / "model_rt.ckpt").string();
  save_checkpoint(params, path, 42, 777);

  ModelParameters<float> loaded;
  auto info = load_checkpoint(loaded, path);
  CHECK(info.step == 42);
  CHECK(info.rng_state == 777);
  CHECK(info.config.d_model == 32);

  auto tokens = ramp_tokens(16, 121);
  auto pos = visit_positions_for(16);
  auto a = forward_lm(params, tokens, pos);
  auto b = forward_lm(loaded, tokens, pos);
  CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("param_count matches the allocated parameter total") {
  auto cfg = toy_config();
  auto params = ModelParameters<float>::init(cfg, 3);
  CHECK(params.n_params() == param_count(cfg));

  // the named 160m configuration lands within a factor 1.7 of 1e18 FLOPs
  auto big = ModelConfig::named("160m", 185138);
  double flops = 6.0 * double(param_count(big)) * 629145600.0;
  CHECK(flops < 1.7e18);
  CHECK(flops > 1e18 / 1.7);
}

TEST_CASE("named configs respect head divisibility and rotary pairing") {
  for (const char* name : {"70m", "120m", "160m", "260m", "350m", "410m", "560m", "720m",
                           "1b", "1.2b", "1.4b", "2.1b", "2.8b"}) {
    auto c = ModelConfig::named(name, 1000);
    CHECK(c.d_model % c.n_heads == 0);
    CHECK((c.d_model / c.n_heads) % 2 == 0);
    CHECK(c.max_len == 2048);
  }
  CHECK_THROWS(ModelConfig::named("9000b", 1000));
}
