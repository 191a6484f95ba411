#include "catchfm/sae.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <map>
#include <numeric>

#include <json.hpp>

namespace catchfm::sae {

using nlohmann::ordered_json;

void SaeParameters::check() const {
  if (k < 1 || k > m()) fail("k = ", k, " must be in [1, m = ", m(), "]");
  if (w_enc.rows() != m() || w_enc.cols() != d()) fail("w_enc shape mismatch");
  if (b_enc.size() != m() || b_dec.size() != d()) fail("bias shape mismatch");
}

std::vector<int> topk_indices(const VecD& pre, int k) {
  if (k > int(pre.size())) fail("k = ", k, " exceeds latent width m = ", pre.size());
  std::vector<int> idx(size_t(pre.size()));
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
    if (pre(a) != pre(b)) return pre(a) > pre(b);
    return a < b;
  });
  idx.resize(size_t(k));
  return idx;
}

SaeForward sae_forward(const SaeParameters& params, const VecD& h) {
  params.check();
  if (h.size() != params.d())
    fail("activation dimension ", h.size(), " does not match d = ", params.d());
  VecD pre = params.w_enc * (h - params.b_dec) + params.b_enc;
  SaeForward out;
  out.z = VecD::Zero(params.m());
  for (int i : topk_indices(pre, params.k)) out.z(i) = pre(i);
  out.h_hat = params.w_dec * out.z + params.b_dec;
  return out;
}

MatD reconstruct(const SaeParameters& params, const MatD& h) {
  MatD out(h.rows(), h.cols());
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    out.row(r) = sae_forward(params, h.row(r).transpose()).h_hat.transpose();
  return out;
}

MatD encode_sparse(const SaeParameters& params, const MatD& h) {
  MatD out(h.rows(), params.m());
  for (Eigen::Index r = 0; r < h.rows(); ++r)
    out.row(r) = sae_forward(params, h.row(r).transpose()).z.transpose();
  return out;
}

double mse(const SaeParameters& params, const MatD& activations) {
  MatD diff = reconstruct(params, activations) - activations;
  return diff.squaredNorm() / double(diff.size());
}

namespace {

void renormalize_decoder(SaeParameters& p) {
  for (int c = 0; c < p.m(); ++c) {
    double norm = p.w_dec.col(c).norm();
    if (norm > 0) p.w_dec.col(c) /= norm;
  }
}

struct Adam {
  MatD m, v;
  int64_t t = 0;
  void init(Eigen::Index rows, Eigen::Index cols) {
    m.setZero(rows, cols);
    v.setZero(rows, cols);
  }
  void step(MatD& param, const MatD& grad, double lr) {
    const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
    ++t;
    m = b1 * m + (1 - b1) * grad;
    v = b2 * v + (1 - b2) * grad.cwiseProduct(grad);
    double c1 = 1 - std::pow(b1, double(t)), c2 = 1 - std::pow(b2, double(t));
    param.array() -= lr * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
  }
};

}  // namespace

SaeTrainResult sae_train(const MatD& activations, int m, int k, int epochs, uint64_t seed,
                         double lr, int batch_size) {
  const Eigen::Index n = activations.rows(), d = activations.cols();
  if (n < 1 || d < 1) fail("empty activation matrix");
  if (k < 1 || k > m) fail("k = ", k, " must be in [1, m = ", m, "]");

  SaeParameters p;
  p.k = k;
  p.b_dec = activations.colwise().mean().transpose();
  p.b_enc = VecD::Zero(m);
  p.w_dec.resize(d, m);
  Rng rng = Rng(seed).sub("sae_init");
  // decoder atoms start at centered data samples; degenerate draws fall back
  // to random directions
  for (Eigen::Index j = 0; j < m; ++j) {
    VecD sample =
        activations.row(Eigen::Index(rng.uniform_int(uint64_t(n)))).transpose() - p.b_dec;
    if (sample.norm() < 1e-8)
      for (Eigen::Index i = 0; i < d; ++i) sample(i) = rng.normal();
    p.w_dec.col(j) = sample;
  }
  renormalize_decoder(p);
  p.w_enc = p.w_dec.transpose();

  Adam opt_we, opt_be, opt_wd, opt_bd;
  opt_we.init(m, d);
  opt_be.init(m, 1);
  opt_wd.init(d, m);
  opt_bd.init(d, 1);

  SaeTrainResult result;
  std::vector<size_t> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), size_t(0));
  Rng order_rng = Rng(seed).sub("sae_order");

  for (int epoch = 0; epoch < epochs; ++epoch) {
    // stable then linear-decay learning rate; the tail decay settles the
    // dictionary instead of bouncing around it
    double frac = epochs > 1 ? double(epoch) / double(epochs - 1) : 0.0;
    double epoch_lr = frac < 0.5 ? lr : lr * 2.0 * (1.0 - frac);
    order_rng.shuffle(order);
    for (size_t off = 0; off < order.size(); off += size_t(batch_size)) {
      size_t bn = std::min(size_t(batch_size), order.size() - off);
      MatD h(Eigen::Index(bn), d);
      for (size_t i = 0; i < bn; ++i) h.row(Eigen::Index(i)) = activations.row(Eigen::Index(order[off + i]));

      MatD centered = h.rowwise() - p.b_dec.transpose();
      MatD pre = centered * p.w_enc.transpose();
      pre.rowwise() += p.b_enc.transpose();
      MatD z = MatD::Zero(Eigen::Index(bn), m);
      MatD mask = MatD::Zero(Eigen::Index(bn), m);  // selection, not z != 0
      for (Eigen::Index r = 0; r < Eigen::Index(bn); ++r) {
        VecD row = pre.row(r).transpose();
        for (int i : topk_indices(row, k)) {
          z(r, i) = row(i);
          mask(r, i) = 1.0;
        }
      }
      MatD h_hat = z * p.w_dec.transpose();
      h_hat.rowwise() += p.b_dec.transpose();

      MatD g = 2.0 * (h_hat - h) / double(bn * size_t(d));
      MatD g_wdec = g.transpose() * z;                    // d x m
      VecD g_bdec_dec = g.colwise().sum().transpose();    // d
      MatD g_z = g * p.w_dec;                             // n x m
      MatD g_pre = mask.cwiseProduct(g_z);
      MatD g_wenc = g_pre.transpose() * centered;         // m x d
      VecD g_benc = g_pre.colwise().sum().transpose();    // m
      VecD g_bdec = g_bdec_dec - p.w_enc.transpose() * g_benc;

      opt_we.step(p.w_enc, g_wenc, epoch_lr);
      MatD be_m = p.b_enc, bd_m = p.b_dec;
      opt_be.step(be_m, MatD(g_benc), epoch_lr);
      opt_wd.step(p.w_dec, g_wdec, epoch_lr);
      opt_bd.step(bd_m, MatD(g_bdec), epoch_lr);
      p.b_enc = be_m;
      p.b_dec = bd_m;
      renormalize_decoder(p);
    }
    result.mse_per_epoch.push_back(mse(p, activations));
  }
  result.params = std::move(p);
  return result;
}

std::vector<FeatureInfo> top_features(
    const SaeParameters& params, const MatD& positive_activations,
    const std::vector<std::vector<std::string>>& patient_codes,
    const std::vector<std::pair<std::string, double>>& cohort_base_rates, int n_features,
    int top_patients_per_feature, double lift_threshold) {
  params.check();
  const Eigen::Index n = positive_activations.rows();
  if (size_t(n) != patient_codes.size())
    fail("activation rows (", n, ") and patient code lists (", patient_codes.size(),
         ") must align");
  std::vector<FeatureInfo> out;
  if (n == 0) return out;

  MatD z = encode_sparse(params, positive_activations);
  std::map<std::string, double> base;
  for (const auto& [code, rate] : cohort_base_rates) base[code] = rate;

  std::vector<int> by_mean(size_t(params.m()));
  std::iota(by_mean.begin(), by_mean.end(), 0);
  VecD means = z.colwise().mean().transpose();
  std::sort(by_mean.begin(), by_mean.end(), [&](int a, int b) {
    if (means(a) != means(b)) return means(a) > means(b);
    return a < b;
  });

  int n_keep = std::min<int>(n_features, params.m());
  int top_n = int(std::min<Eigen::Index>(top_patients_per_feature, n));
  for (int fi = 0; fi < n_keep; ++fi) {
    int f = by_mean[size_t(fi)];
    FeatureInfo info;
    info.feature = f;
    info.mean_activation = means(f);

    std::vector<size_t> rows(static_cast<size_t>(n));
    std::iota(rows.begin(), rows.end(), size_t(0));
    std::partial_sort(rows.begin(), rows.begin() + top_n, rows.end(), [&](size_t a, size_t b) {
      double za = z(Eigen::Index(a), f), zb = z(Eigen::Index(b), f);
      if (za != zb) return za > zb;
      return a < b;
    });
    rows.resize(size_t(top_n));
    info.top_patients = rows;

    std::map<std::string, int> counts;
    for (size_t r : rows)
      for (const auto& code : patient_codes[r]) ++counts[code];
    int support_floor = std::max(2, top_n / 4);
    for (const auto& [code, count] : counts) {
      auto it = base.find(code);
      if (it == base.end() || !(it->second > 0)) continue;
      double frac = double(count) / double(top_n);
      double lift = frac / it->second;
      if (lift >= lift_threshold && count >= support_floor)
        info.enriched_codes.push_back({code, lift, frac});
    }
    std::sort(info.enriched_codes.begin(), info.enriched_codes.end(),
              [](const auto& a, const auto& b) { return a.lift > b.lift; });
    out.push_back(std::move(info));
  }
  return out;
}

std::vector<double> probe_scores(const MatD& h_hat, const MatD& cls_w, const VecD& cls_b) {
  if (cls_w.rows() != h_hat.cols() || cls_w.cols() != 2 || cls_b.size() != 2)
    fail("classifier head must be d x 2 with a 2-vector bias");
  std::vector<double> scores;
  scores.reserve(size_t(h_hat.rows()));
  for (Eigen::Index r = 0; r < h_hat.rows(); ++r) {
    Eigen::RowVector2d logits = h_hat.row(r) * cls_w + cls_b.transpose();
    double m = logits.maxCoeff();
    double e0 = std::exp(logits(0) - m), e1 = std::exp(logits(1) - m);
    scores.push_back(e1 / (e0 + e1));
  }
  return scores;
}

// ---------------------------------------------------------------------------

void save_sae(const SaeParameters& params, const std::string& path) {
  params.check();
  ordered_json header;
  header["d"] = params.d();
  header["m"] = params.m();
  header["k"] = params.k;
  std::string h = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot open ", path, " for writing");
  out.write("CFMS", 4);
  uint32_t hlen = uint32_t(h.size());
  unsigned char lenb[4] = {static_cast<unsigned char>(hlen & 0xff),
                           static_cast<unsigned char>((hlen >> 8) & 0xff),
                           static_cast<unsigned char>((hlen >> 16) & 0xff),
                           static_cast<unsigned char>((hlen >> 24) & 0xff)};
  out.write(reinterpret_cast<const char*>(lenb), 4);
  out.write(h.data(), std::streamsize(h.size()));
  auto write_block = [&](const double* data, size_t count) {
    std::vector<float> buf(count);
    for (size_t i = 0; i < count; ++i) buf[i] = float(data[i]);
    out.write(reinterpret_cast<const char*>(buf.data()), std::streamsize(count * sizeof(float)));
  };
  MatD we = params.w_enc, wd = params.w_dec;  // row-major copies
  write_block(we.data(), size_t(we.size()));
  write_block(params.b_enc.data(), size_t(params.b_enc.size()));
  write_block(wd.data(), size_t(wd.size()));
  write_block(params.b_dec.data(), size_t(params.b_dec.size()));
  if (!out) fail("write failed: ", path);
}

SaeParameters load_sae(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot open ", path);
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "CFMS", 4) != 0) fail(path, ": bad magic");
  unsigned char lenb[4];
  in.read(reinterpret_cast<char*>(lenb), 4);
  if (in.gcount() != 4) fail(path, ": truncated header");
  uint32_t hlen = uint32_t(lenb[0]) | uint32_t(lenb[1]) << 8 | uint32_t(lenb[2]) << 16 |
                  uint32_t(lenb[3]) << 24;
  std::string h(hlen, '\0');
  in.read(h.data(), hlen);
  if (uint32_t(in.gcount()) != hlen) fail(path, ": truncated header");
  auto header = nlohmann::json::parse(h);
  int d = header.at("d").get<int>(), m = header.at("m").get<int>();
  SaeParameters p;
  p.k = header.at("k").get<int>();
  auto read_block = [&](double* data, size_t count, const char* what) {
    std::vector<float> buf(count);
    in.read(reinterpret_cast<char*>(buf.data()), std::streamsize(count * sizeof(float)));
    if (size_t(in.gcount()) != count * sizeof(float)) fail(path, ": truncated ", what);
    for (size_t i = 0; i < count; ++i) data[i] = double(buf[i]);
  };
  p.w_enc.resize(m, d);
  p.b_enc.resize(m);
  p.w_dec.resize(d, m);
  p.b_dec.resize(d);
  read_block(p.w_enc.data(), size_t(p.w_enc.size()), "w_enc");
  read_block(p.b_enc.data(), size_t(p.b_enc.size()), "b_enc");
  read_block(p.w_dec.data(), size_t(p.w_dec.size()), "w_dec");
  read_block(p.b_dec.data(), size_t(p.b_dec.size()), "b_dec");
  p.check();
  return p;
}

std::string features_to_json(const std::vector<FeatureInfo>& features) {
  ordered_json j = ordered_json::array();
  for (const auto& f : features) {
    ordered_json jf;
    jf["feature"] = f.feature;
    jf["mean_activation"] = f.mean_activation;
    jf["top_patients"] = f.top_patients;
    jf["enriched_codes"] = ordered_json::array();
    for (const auto& c : f.enriched_codes)
      jf["enriched_codes"].push_back(
          {{"code", c.code}, {"lift", c.lift}, {"top_fraction", c.top_fraction}});
    j.push_back(std::move(jf));
  }
  return j.dump(2);
}

}  // namespace catchfm::sae
