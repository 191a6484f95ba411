#include <doctest.h>

#include "catchfm/tensor.hpp"

using namespace catchfm;
using namespace catchfm::te;

namespace {

Mat<double> random_mat(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Mat<double> m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal() * scale;
  return m;
}

}  // namespace

TEST_CASE("softmax of uniform logits is 1/V and rows sum to one") {
  Tape<double> tape;
  auto x = tape.constant(Mat<double>::Constant(3, 8, 0.7));
  auto y = softmax_rows(x);
  for (Eigen::Index r = 0; r < 3; ++r) {
    CHECK(y.value().row(r).sum() == doctest::Approx(1.0).epsilon(1e-6));
    for (Eigen::Index c = 0; c < 8; ++c)
      CHECK(y.value()(r, c) == doctest::Approx(1.0 / 8).epsilon(1e-12));
  }
}

TEST_CASE("cross entropy of uniform logits is ln V") {
  Tape<double> tape;
  auto logits = tape.constant(Mat<double>::Zero(5, 121));
  auto loss = cross_entropy_rows(logits, {0, 5, 17, 99, 120});
  CHECK(loss.value()(0, 0) == doctest::Approx(std::log(121.0)).epsilon(1e-12));
}

TEST_CASE("rope at position zero is the identity") {
  Rng rng(3);
  Tape<double> tape;
  Mat<double> v = random_mat(4, 16, rng);
  auto x = tape.constant(v);
  auto y = rope_rows(x, {0, 0, 0, 0}, 10000.0);
  CHECK((y.value() - v).cwiseAbs().maxCoeff() == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("rope preserves pair norms (rotations are isometries)") {
  Rng rng(4);
  Tape<double> tape;
  Mat<double> v = random_mat(6, 32, rng);
  auto y = rope_rows(tape.constant(v), {3, 9, 14, 100, 2005, 77}, 10000.0);
  for (Eigen::Index r = 0; r < 6; ++r)
    for (Eigen::Index k = 0; k < 16; ++k) {
      double before = std::hypot(v(r, k), v(r, k + 16));
      double after = std::hypot(y.value()(r, k), y.value()(r, k + 16));
      CHECK(after == doctest::Approx(before).epsilon(1e-9));
    }
}

TEST_CASE("rope attention scores depend only on position differences") {
  Rng rng(5);
  Tape<double> tape;
  Mat<double> qv = random_mat(1, 24, rng), kv = random_mat(1, 24, rng);
  auto score_at = [&](int pq, int pk) {
    auto q = rope_rows(tape.constant(qv), {pq}, 10000.0);
    auto k = rope_rows(tape.constant(kv), {pk}, 10000.0);
    return (q.value() * k.value().transpose())(0, 0);
  };
  double base = score_at(3, 7);
  for (int shift : {1, 5, 100, 1000})
    CHECK(score_at(3 + shift, 7 + shift) == doctest::Approx(base).epsilon(1e-9));
}

TEST_CASE("rope requires an even feature dimension") {
  Tape<double> tape;
  auto x = tape.constant(Mat<double>::Zero(2, 7));
  CHECK_THROWS(rope_rows(x, {0, 1}, 10000.0));
}

TEST_CASE("shape mismatches raise errors naming the shapes") {
  Tape<double> tape;
  auto a = tape.constant(Mat<double>::Zero(2, 3));
  auto b = tape.constant(Mat<double>::Zero(2, 3));
  try {
    (void)matmul(a, b);
    FAIL("expected shape error");
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("2x3") != std::string::npos);
  }
  CHECK_THROWS(add(a, tape.constant(Mat<double>::Zero(3, 2))));
  CHECK_THROWS(hadamard(a, tape.constant(Mat<double>::Zero(1, 3))));
}

TEST_CASE("non-finite loss is rejected") {
  Tape<double> tape;
  Mat<double> bad(1, 3);
  bad << 1.0, std::numeric_limits<double>::quiet_NaN(), 0.0;
  auto logits = tape.constant(bad);
  CHECK_THROWS(cross_entropy_rows(logits, {0}));
}

TEST_CASE("gradient of a quadratic matches the analytic derivative") {
  Mat<double> x(1, 1), g(1, 1);
  x(0, 0) = 3.0;
  g.setZero();
  auto build = [&](Tape<double>& tape) {
    auto v = tape.param(x, g);
    return hadamard(v, v);  // x^2, scalar
  };
  auto res = grad_check<double>(build, {{"x", &x, &g}}, 1e-5, 1, 99);
  CHECK(g(0, 0) == doctest::Approx(6.0).epsilon(1e-12));
  CHECK(res.max_rel_error < 1e-9);
}

TEST_CASE("backward accumulates across reuse of one tensor") {
  Mat<double> x(1, 2), g(1, 2);
  x << 2.0, 5.0;
  g.setZero();
  Tape<double> tape;
  auto v = tape.param(x, g);
  auto y = add(v, v);  // dy/dx = 2
  auto loss = cross_entropy_rows(y, {0});
  tape.backward(loss);
  // d/dx0 of -log softmax(2x)[0]: 2 * (p0 - 1)
  double p0 = std::exp(4.0) / (std::exp(4.0) + std::exp(10.0));
  CHECK(g(0, 0) == doctest::Approx(2.0 * (p0 - 1.0)).epsilon(1e-9));
}

TEST_CASE("every op passes a finite-difference check on random shapes") {
  Rng rng(17);
  const Eigen::Index t = 5, d = 8;
  Mat<double> a = random_mat(t, d, rng), ga = Mat<double>::Zero(t, d);
  Mat<double> w = random_mat(d, d, rng, 0.4), gw = Mat<double>::Zero(d, d);
  Mat<double> bias = random_mat(1, d, rng, 0.2), gb = Mat<double>::Zero(1, d);
  Mat<double> gain = Mat<double>::Ones(1, d) + random_mat(1, d, rng, 0.1);
  Mat<double> gg = Mat<double>::Zero(1, d);
  std::vector<int32_t> positions{0, 0, 1, 2, 2};
  std::vector<int32_t> targets{1, 3, 0, 2, 7};

  auto build = [&](Tape<double>& tape) {
    auto x = tape.param(a, ga);
    auto wt = tape.param(w, gw);
    auto bt = tape.param(bias, gb);
    auto gt = tape.param(gain, gg);
    auto h = layer_norm_rows(x, gt, bt);
    auto q = rope_rows(add_rowvec(matmul(h, wt), bt), positions, 10000.0);
    auto k = rope_rows(h, positions, 10000.0);
    auto scores = add(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(double(d))),
                      tape.constant(causal_mask<double>(t)));
    auto probs = softmax_rows(scores);
    auto mixed = matmul(probs, gelu(hadamard(h, x)));
    return cross_entropy_rows(mixed, targets);
  };
  auto res = grad_check<double>(build,
                                {{"a", &a, &ga}, {"w", &w, &gw}, {"b", &bias, &gb},
                                 {"gain", &gain, &gg}},
                                1e-5, 24, 1234);
  INFO(res.worst_entry);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("embedding gather routes gradients to the right rows") {
  Rng rng(23);
  Mat<double> table = random_mat(10, 4, rng), gt = Mat<double>::Zero(10, 4);
  std::vector<int32_t> ids{7, 2, 7};
  auto build = [&](Tape<double>& tape) {
    auto e = tape.param(table, gt);
    auto rows = embedding_rows(e, ids);
    return cross_entropy_rows(rows, {0, 1, 2});
  };
  auto res = grad_check<double>(build, {{"table", &table, &gt}}, 1e-5, 40, 7);
  INFO(res.worst_entry);
  CHECK(res.max_rel_error < 1e-6);
  // untouched rows keep zero gradient
  gt.setZero();
  Tape<double> tape;
  auto loss = build(tape);
  tape.backward(loss);
  CHECK(gt.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(gt.row(7).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("embedding rejects out-of-vocabulary ids") {
  Tape<double> tape;
  auto e = tape.constant(Mat<double>::Zero(10, 4));
  CHECK_THROWS(embedding_rows(e, std::vector<int32_t>{10}));
  CHECK_THROWS(embedding_rows(e, std::vector<int32_t>{-1}));
}

TEST_CASE("causal mask blocks gradient and value flow from the future") {
  Rng rng(31);
  const Eigen::Index t = 4, d = 6;
  Mat<double> x = random_mat(t, d, rng);

  auto logits_for = [&](const Mat<double>& input) {
    Tape<double> tape;
    auto xt = tape.constant(input);
    auto scores = add(scale(matmul(xt, transpose(xt)), 0.5),
                      tape.constant(causal_mask<double>(t)));
    return Mat<double>(matmul(softmax_rows(scores), xt).value());
  };
  Mat<double> base = logits_for(x);
  Mat<double> poked = x;
  poked(3, 2) += 1.5;  // last row changes
  Mat<double> after = logits_for(poked);
  // rows 0..2 attend only to indices <= row, so they are bit-identical
  for (Eigen::Index r = 0; r < 3; ++r)
    CHECK((after.row(r) - base.row(r)).cwiseAbs().maxCoeff() == 0.0);
  CHECK((after.row(3) - base.row(3)).cwiseAbs().maxCoeff() > 0.0);
}
