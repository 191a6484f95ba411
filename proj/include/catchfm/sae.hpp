#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "catchfm/common.hpp"

namespace catchfm::sae {

using MatD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecD = Eigen::VectorXd;

// TopK sparse autoencoder over EOS hidden states:
//   z = TopK(W_enc (h - b_dec) + b_enc),   h_hat = W_dec z + b_dec
struct SaeParameters {
  MatD w_enc;  // m x d
  VecD b_enc;  // m
  MatD w_dec;  // d x m, unit-norm columns
  VecD b_dec;  // d
  int k = 0;

  int d() const { return int(w_dec.rows()); }
  int m() const { return int(w_dec.cols()); }
  void check() const;
};

struct SaeForward {
  VecD z;      // m, at most k nonzeros
  VecD h_hat;  // d
};

// keeps the k largest pre-activations by signed value; ties -> lowest index
std::vector<int> topk_indices(const VecD& pre, int k);

SaeForward sae_forward(const SaeParameters& params, const VecD& h);

// batch reconstruction, one row per sample
MatD reconstruct(const SaeParameters& params, const MatD& h);
MatD encode_sparse(const SaeParameters& params, const MatD& h);  // N x m latents

struct SaeTrainResult {
  SaeParameters params;
  std::vector<double> mse_per_epoch;  // full-data MSE after each epoch
};

// Adam on the MSE loss; decoder columns are renormalized to unit norm after
// every update. Deterministic per seed.
SaeTrainResult sae_train(const MatD& activations, int m, int k, int epochs, uint64_t seed,
                         double lr = 1e-3, int batch_size = 128);

double mse(const SaeParameters& params, const MatD& activations);

struct FeatureInfo {
  int feature = -1;
  double mean_activation = 0.0;
  std::vector<size_t> top_patients;  // row indices into the activation batch
  struct EnrichedCode {
    std::string code;
    double lift = 0.0;        // presence among top patients / cohort base rate
    double top_fraction = 0.0;
  };
  std::vector<EnrichedCode> enriched_codes;
};

// Features ranked by mean activation over the positive batch. A code counts as
// enriched when its lift over the cohort base rate reaches `lift_threshold`
// and it appears in at least a quarter of the feature's top patients.
std::vector<FeatureInfo> top_features(
    const SaeParameters& params, const MatD& positive_activations,
    const std::vector<std::vector<std::string>>& patient_codes,  // per row, deduplicated
    const std::vector<std::pair<std::string, double>>& cohort_base_rates,
    int n_features = 10, int top_patients_per_feature = 20, double lift_threshold = 2.0);

// probability of the positive class from the frozen classifier head applied
// to reconstructed hidden states
std::vector<double> probe_scores(const MatD& h_hat, const MatD& cls_w, const VecD& cls_b);

void save_sae(const SaeParameters& params, const std::string& path);
SaeParameters load_sae(const std::string& path);

std::string features_to_json(const std::vector<FeatureInfo>& features);

}  // namespace catchfm::sae
