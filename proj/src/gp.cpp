#include "kcmd/gp.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "kcmd/error.hpp"

namespace kcmd::gp {

namespace {

using ConstMap = Eigen::Map<const Matrix>;
using ConstVecMap = Eigen::Map<const Vector>;

Matrix rbf_block(const Matrix& a, const Matrix& b, double lengthscale, double outputscale) {
  const Vector an = a.rowwise().squaredNorm();
  const Vector bn = b.rowwise().squaredNorm();
  Matrix d2 = (-2.0 * a * b.transpose()).eval();
  d2.colwise() += an;
  d2.rowwise() += bn.transpose();
  const double inv = 1.0 / (2.0 * lengthscale * lengthscale);
  return (d2.array().max(0.0) * -inv).exp() * outputscale;
}

// Squared distances computed pairwise (not via the norm expansion) so the
// gradient path sees exact zeros on the diagonal.
Matrix squared_distances(const Matrix& z) {
  const auto n = z.rows();
  Matrix d2(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    d2(i, i) = 0.0;
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double v = (z.row(i) - z.row(j)).squaredNorm();
      d2(i, j) = v;
      d2(j, i) = v;
    }
  }
  return d2;
}

}  // namespace

double KernelParams::lengthscale() const { return std::exp(log_lengthscale); }
double KernelParams::outputscale() const { return std::exp(log_outputscale); }
double KernelParams::noise() const { return std::exp(log_noise); }

void KernelParams::validate() const {
  for (double v : {lengthscale(), outputscale(), noise()}) {
    if (!(v > 0.0) || !std::isfinite(v)) throw DomainError("kernel hyperparameter is not strictly positive and finite");
  }
}

KernelParams KernelParams::from_values(double lengthscale, double outputscale, double noise) {
  KernelParams kp;
  kp.log_lengthscale = std::log(lengthscale);
  kp.log_outputscale = std::log(outputscale);
  kp.log_noise = std::log(noise);
  kp.validate();
  return kp;
}

double rbf(std::span<const double> z1, std::span<const double> z2, const KernelParams& kp) {
  if (z1.size() != z2.size()) {
    throw DimensionError("rbf: embedding sizes differ (" + std::to_string(z1.size()) + " vs " +
                         std::to_string(z2.size()) + ")");
  }
  double d2 = 0.0;
  for (std::size_t i = 0; i < z1.size(); ++i) d2 += (z1[i] - z2[i]) * (z1[i] - z2[i]);
  const double l = kp.lengthscale();
  return kp.outputscale() * std::exp(-d2 / (2.0 * l * l));
}

Matrix gram(const Matrix& z, const KernelParams& kp, bool with_noise) {
  const double l = kp.lengthscale();
  Matrix k = (squared_distances(z).array() * (-1.0 / (2.0 * l * l))).exp() * kp.outputscale();
  if (with_noise) k.diagonal().array() += kp.noise_variance();
  return k;
}

Matrix cross_kernel(const Matrix& queries, const Matrix& support, const KernelParams& kp) {
  if (queries.cols() != support.cols()) throw DimensionError("cross_kernel: embedding sizes differ");
  return rbf_block(queries, support, kp.lengthscale(), kp.outputscale());
}

Factorization factorize(const Matrix& k) {
  Factorization f;
  f.llt.compute(k);
  if (f.llt.info() == Eigen::Success) return f;
  for (double jitter = kJitterStart; jitter <= kJitterMax * 1.0000001; jitter *= 10.0) {
    Matrix kj = k;
    kj.diagonal().array() += jitter;
    f.llt.compute(kj);
    if (f.llt.info() == Eigen::Success) {
      f.jitter = jitter;
      return f;
    }
  }
  throw ConditioningError("Cholesky failed on " + std::to_string(k.rows()) + "x" + std::to_string(k.cols()) +
                          " kernel matrix after jitter up to 1e-4");
}

std::vector<GPPosterior> posterior_batch(const Matrix& support_z, std::span<const double> residuals,
                                         const Matrix& queries, const KernelParams& kp) {
  const auto n = support_z.rows();
  if (static_cast<std::size_t>(n) != residuals.size()) {
    throw DimensionError("posterior: " + std::to_string(n) + " support embeddings but " +
                         std::to_string(residuals.size()) + " residuals");
  }
  const double prior = kp.outputscale() + kp.noise_variance();
  std::vector<GPPosterior> out(static_cast<std::size_t>(queries.rows()), GPPosterior{0.0, prior});
  if (n == 0) return out;
  if (queries.cols() != support_z.cols()) throw DimensionError("posterior: query/support embedding sizes differ");

  const Factorization f = factorize(gram(support_z, kp, true));
  const Vector alpha = f.llt.solve(ConstVecMap(residuals.data(), n));
  const Matrix kq = cross_kernel(queries, support_z, kp);  // q x n
  const Vector mean = kq * alpha;
  // v = L^-1 k^T, variance reduction = |v|^2 per query.
  const Matrix v = f.llt.matrixL().solve(kq.transpose());
  const Vector reduction = v.colwise().squaredNorm().transpose();
  for (Eigen::Index q = 0; q < queries.rows(); ++q) {
    out[q].mean = mean(q);
    out[q].variance = std::max(prior - reduction(q), kVarianceFloor);
  }
  return out;
}

GPPosterior posterior(const Matrix& support_z, std::span<const double> residuals, std::span<const double> query,
                      const KernelParams& kp) {
  if (support_z.rows() > 0 && static_cast<Eigen::Index>(query.size()) != support_z.cols()) {
    throw DimensionError("posterior: query embedding size differs from support");
  }
  const Matrix q = ConstMap(query.data(), 1, static_cast<Eigen::Index>(query.size()));
  return posterior_batch(support_z, residuals, q, kp).front();
}

NlmlTerms nlml(const Matrix& support_z, std::span<const double> residuals, const KernelParams& kp) {
  const auto n = support_z.rows();
  if (n == 0) throw DimensionError("nlml needs at least one support point");
  if (static_cast<std::size_t>(n) != residuals.size()) throw DimensionError("nlml: residual count mismatch");
  const Factorization f = factorize(gram(support_z, kp, true));
  const ConstVecMap y(residuals.data(), n);
  NlmlTerms t;
  t.complexity = f.llt.matrixLLT().diagonal().array().log().sum();
  t.data_fit = 0.5 * y.dot(f.llt.solve(y));
  t.constant = 0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  return t;
}

// --- differentiable path -------------------------------------------------

KernelHyper KernelHyper::from(const KernelParams& kp, bool requires_grad) {
  KernelHyper h;
  h.log_lengthscale = ad::Tensor::scalar(kp.log_lengthscale, requires_grad).named("kernel.log_lengthscale");
  h.log_outputscale = ad::Tensor::scalar(kp.log_outputscale, requires_grad).named("kernel.log_outputscale");
  h.log_noise = ad::Tensor::scalar(kp.log_noise, requires_grad).named("kernel.log_noise");
  return h;
}

KernelParams KernelHyper::values() const {
  KernelParams kp;
  kp.log_lengthscale = log_lengthscale.item();
  kp.log_outputscale = log_outputscale.item();
  kp.log_noise = log_noise.item();
  return kp;
}

void KernelHyper::assign(const KernelParams& kp) {
  log_lengthscale.mutable_data()[0] = kp.log_lengthscale;
  log_outputscale.mutable_data()[0] = kp.log_outputscale;
  log_noise.mutable_data()[0] = kp.log_noise;
}

ad::Tensor gram(ad::Tape& tape, const ad::Tensor& z, const KernelHyper& hyper, bool with_noise) {
  if (z.rank() != 2) throw DimensionError("gram expects an n x d embedding matrix");
  const std::size_t n = z.shape()[0], d = z.shape()[1];
  const Matrix zm = ConstMap(z.data().data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  const KernelParams kp = hyper.values();
  const Matrix d2 = squared_distances(zm);
  const double l2 = kp.lengthscale() * kp.lengthscale();
  Matrix k = (d2.array() * (-1.0 / (2.0 * l2))).exp() * kp.outputscale();
  std::vector<double> kv(k.data(), k.data() + k.size());
  if (with_noise)
    for (std::size_t i = 0; i < n; ++i) kv[i * n + i] += kp.noise_variance();
  ad::Tensor out = ad::Tensor::from({n, n}, std::move(kv));

  return tape.custom(
      {z, hyper.log_lengthscale, hyper.log_outputscale, hyper.log_noise}, out,
      [n, d, zm, k, d2, l2, with_noise, s2 = kp.noise_variance()](const ad::Node& o, std::span<ad::Node* const> in) {
        const ConstMap g(o.grad.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
        const Matrix gk = g.cwiseProduct(k);  // dL/dK_ij * K_ij (noise-free part)
        if (in[0]->requires_grad) {
          // dK_ij/dz_i = -K_ij (z_i - z_j) / l^2 ; symmetric contributions from G and G^T.
          const Matrix w = (gk + gk.transpose()) * (-1.0 / l2);
          const Vector rowsum = w.rowwise().sum();
          Matrix dz = rowsum.asDiagonal() * zm - w * zm;
          for (std::size_t i = 0; i < n * d; ++i) in[0]->grad[i] += dz.data()[i];
        }
        if (in[1]->requires_grad) in[1]->grad[0] += (gk.array() * d2.array()).sum() / l2;
        if (in[2]->requires_grad) in[2]->grad[0] += gk.sum();
        if (in[3]->requires_grad && with_noise) in[3]->grad[0] += g.diagonal().sum() * 2.0 * s2;
      },
      "rbf_gram");
}

ad::Tensor nlml_from_gram(ad::Tape& tape, const ad::Tensor& k_noisy, const ad::Tensor& residuals) {
  if (k_noisy.rank() != 2 || k_noisy.shape()[0] != k_noisy.shape()[1]) throw DimensionError("nlml: K must be square");
  const std::size_t n = k_noisy.shape()[0];
  if (n == 0) throw DimensionError("nlml needs at least one support point");
  if (residuals.size() != n) {
    throw DimensionError("nlml: " + std::to_string(residuals.size()) + " residuals for " + std::to_string(n) +
                         " points");
  }
  const auto ni = static_cast<Eigen::Index>(n);
  const Factorization f = factorize(ConstMap(k_noisy.data().data(), ni, ni));
  const Vector y = ConstVecMap(residuals.data().data(), ni);
  const Vector alpha = f.llt.solve(y);
  const double value = f.llt.matrixLLT().diagonal().array().log().sum() + 0.5 * y.dot(alpha) +
                       0.5 * static_cast<double>(n) * std::log(2.0 * std::numbers::pi);
  ad::Tensor out = ad::Tensor::scalar(value);

  return tape.custom(
      {k_noisy, residuals}, out,
      [ni, f, alpha](const ad::Node& o, std::span<ad::Node* const> in) {
        const double g = o.grad[0];
        if (in[0]->requires_grad) {
          const Matrix kinv = f.llt.solve(Matrix::Identity(ni, ni));
          const Matrix dk = 0.5 * (kinv - alpha * alpha.transpose()) * g;
          for (Eigen::Index i = 0; i < dk.size(); ++i) in[0]->grad[static_cast<std::size_t>(i)] += dk.data()[i];
        }
        if (in[1]->requires_grad)
          for (Eigen::Index i = 0; i < ni; ++i) in[1]->grad[static_cast<std::size_t>(i)] += g * alpha(i);
      },
      "nlml");
}

}  // namespace kcmd::gp
