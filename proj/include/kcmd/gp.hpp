#pragma once

// Exact GP regression with an RBF kernel over embedding vectors.
//
// Embeddings are passed as row-major matrices, one embedding per row. The
// GP always works on residuals: the caller subtracts its mean function from
// observed targets and adds it back to predicted means.

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <span>
#include <vector>

#include "kcmd/tensor.hpp"

namespace kcmd::gp {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline constexpr double kVarianceFloor = 1e-12;
inline constexpr double kJitterStart = 1e-8;
inline constexpr double kJitterMax = 1e-4;

struct KernelParams {
  double log_lengthscale = 0.0;
  double log_outputscale = 0.0;
  double log_noise = -2.302585092994046;  // log(0.1)

  double lengthscale() const;
  double outputscale() const;
  double noise() const;
  double noise_variance() const { return noise() * noise(); }
  void validate() const;

  static KernelParams from_values(double lengthscale, double outputscale, double noise);
};

struct GPPosterior {
  double mean = 0.0;
  double variance = 0.0;
};

double rbf(std::span<const double> z1, std::span<const double> z2, const KernelParams& kp);

Matrix gram(const Matrix& Z, const KernelParams& kp, bool with_noise);
// k(query_i, support_j) for every pair.
Matrix cross_kernel(const Matrix& queries, const Matrix& support, const KernelParams& kp);

struct Factorization {
  Eigen::LLT<Matrix> llt;
  double jitter = 0.0;  // diagonal addition actually used
};

// Cholesky with the jitter ladder 1e-8, 1e-7, ... 1e-4.
Factorization factorize(const Matrix& k);

// Predictive distribution of a new (noisy) residual at the query. The
// reported variance includes sigma_n^2, so the empty-support case is the
// prior k(z*, z*) + sigma_n^2.
GPPosterior posterior(const Matrix& support_z, std::span<const double> residuals, std::span<const double> query,
                      const KernelParams& kp);
std::vector<GPPosterior> posterior_batch(const Matrix& support_z, std::span<const double> residuals,
                                         const Matrix& queries, const KernelParams& kp);

struct NlmlTerms {
  double complexity = 0.0;  // 1/2 log|K + s^2 I|
  double data_fit = 0.0;    // 1/2 y^T (K + s^2 I)^-1 y
  double constant = 0.0;    // n/2 log(2 pi)
  double total() const { return complexity + data_fit + constant; }
};

NlmlTerms nlml(const Matrix& support_z, std::span<const double> residuals, const KernelParams& kp);

// --- differentiable path -------------------------------------------------

struct KernelHyper {
  ad::Tensor log_lengthscale;
  ad::Tensor log_outputscale;
  ad::Tensor log_noise;

  static KernelHyper from(const KernelParams& kp, bool requires_grad = true);
  KernelParams values() const;
  void assign(const KernelParams& kp);
  std::vector<ad::Tensor> tensors() const { return {log_lengthscale, log_outputscale, log_noise}; }
};

// Noisy (or noiseless) Gram matrix of the rows of Z, recorded on the tape.
ad::Tensor gram(ad::Tape& tape, const ad::Tensor& z, const KernelHyper& hyper, bool with_noise);

// NLML given the noisy Gram matrix and residual vector. The backward rule is
// the analytic dL/dK = 1/2 (K^-1 - a a^T), dL/dy = a with a = K^-1 y.
ad::Tensor nlml_from_gram(ad::Tape& tape, const ad::Tensor& k_noisy, const ad::Tensor& residuals);

inline ad::Tensor nlml(ad::Tape& tape, const ad::Tensor& z, const ad::Tensor& residuals, const KernelHyper& hyper) {
  return nlml_from_gram(tape, gram(tape, z, hyper, true), residuals);
}

}  // namespace kcmd::gp
