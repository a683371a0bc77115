#pragma once

#include <Eigen/Cholesky>
#include <optional>
#include <vector>

#include "gibbscs/image.hpp"
#include "gibbscs/prior_model.hpp"
#include "gibbscs/random.hpp"

namespace gibbscs {

// Latent scale index per filter and position (0-based into the scale grid).
class AuxiliaryField {
 public:
  AuxiliaryField(int filters, Eigen::Index rows, Eigen::Index cols);

  int filters() const noexcept { return filters_; }
  Eigen::Index rows() const noexcept { return rows_; }
  Eigen::Index cols() const noexcept { return cols_; }
  Eigen::Index positions() const noexcept { return rows_ * cols_; }

  int& at(int m, Eigen::Index p) { return indices_[m * positions() + p]; }
  int at(int m, Eigen::Index p) const { return indices_[m * positions() + p]; }
  const std::vector<int>& indices() const noexcept { return indices_; }

  // Throws InvalidInput if the shape or any index does not fit the model.
  void check(const PriorModel& model, Eigen::Index rows, Eigen::Index cols) const;

  friend bool operator==(const AuxiliaryField&, const AuxiliaryField&) = default;

 private:
  int filters_;
  Eigen::Index rows_;
  Eigen::Index cols_;
  std::vector<int> indices_;
};

struct SolverOptions {
  enum class Method { kDenseCholesky, kConjugateGradient };

  Method method = Method::kDenseCholesky;
  double cg_tolerance = 1e-8;  // relative residual
  int cg_max_iters = 0;        // 0 means 10 * unknowns
  double ridge = 1e-8;

  // Dense Cholesky up to kDenseLimit unknowns, conjugate gradients above.
  static constexpr Eigen::Index kDenseLimit = 4096;
  static SolverOptions for_unknowns(Eigen::Index unknowns);

  void validate() const;
};

// Measurement rows of the stacked system: y = A x + n, n ~ N(0, noise_variance I).
// `gram`, when given, must equal A^T A and is used instead of recomputing it.
struct MeasurementRows {
  const Matrix* A = nullptr;
  const Vector* y = nullptr;
  double noise_variance = 1.0;
  const Matrix* gram = nullptr;
};

// Gaussian conditional of the image given the auxiliary field: stacked
// operator F = [f_1; ...; f_M; A], diagonal covariance Sigma with prior row
// variances base/delta(z) and noise variance on measurement rows, target
// mu = (0, ..., 0, y). Precision P = F^T Sigma^-1 F + ridge I.
//
// The system references the model and measurement arrays; they must outlive it.
class LinearGaussianSystem {
 public:
  LinearGaussianSystem(const PriorModel& model, const AuxiliaryField& z, Eigen::Index rows,
                       Eigen::Index cols, std::optional<MeasurementRows> measurement,
                       double ridge);

  Eigen::Index rows() const noexcept { return rows_; }
  Eigen::Index cols() const noexcept { return cols_; }
  Eigen::Index unknowns() const noexcept { return rows_ * cols_; }
  double ridge() const noexcept { return ridge_; }
  bool has_measurement() const noexcept { return measurement_.has_value(); }
  const PriorModel& model() const noexcept { return *model_; }
  // Precision (inverse variance) of prior row (m, p).
  double prior_row_precision(int m, Eigen::Index p) const { return row_precision_(m, p); }

  Vector apply_precision(const Vector& x) const;
  Matrix dense_precision() const;
  Vector precision_diagonal() const;
  // F^T Sigma^-1 mu
  Vector rhs() const;
  // F^T Sigma^-1 (mu + eps) + sqrt(ridge) xi with eps_r ~ N(0, Sigma_r), xi ~ N(0, I).
  Vector perturbed_rhs(Rng& rng) const;

 private:
  const PriorModel* model_;
  Eigen::Index rows_;
  Eigen::Index cols_;
  Eigen::MatrixXd row_precision_;  // filters x positions
  std::optional<MeasurementRows> measurement_;
  double ridge_;
};

LinearGaussianSystem build_posterior_system(const PriorModel& model, const AuxiliaryField& z,
                                            Eigen::Index rows, Eigen::Index cols,
                                            const Matrix* A, const Vector* y,
                                            double noise_variance, double ridge,
                                            const Matrix* gram = nullptr);

// Draws from N(P^-1 b, P^-1) by perturb-and-solve. Construction factorizes P
// once (dense) so repeated draws are cheap.
class GaussianSampler {
 public:
  GaussianSampler(const LinearGaussianSystem& system, const SolverOptions& options);

  Vector mean() const;
  Vector draw(Rng& rng) const;
  // CG iterations used by the most recent solve (0 for dense).
  int last_iterations() const noexcept { return last_iterations_; }

 private:
  Vector solve(const Vector& rhs) const;

  const LinearGaussianSystem* system_;
  SolverOptions options_;
  std::optional<Eigen::LLT<Matrix>> llt_;
  Vector inverse_diagonal_;
  mutable int last_iterations_ = 0;
};

// Preconditioned conjugate gradients on the system's precision operator.
// Throws SolverError carrying the final relative residual on non-convergence.
Vector conjugate_gradient(const LinearGaussianSystem& system, const Vector& rhs,
                          const SolverOptions& options, int* iterations = nullptr);

Image sample_x_given_z(const LinearGaussianSystem& system, const SolverOptions& options, Rng& rng);
Image posterior_mean(const LinearGaussianSystem& system, const SolverOptions& options);

AuxiliaryField sample_scales_given_x(const PriorModel& model, const Image& x, Rng& rng);

// Gamma(M/2 + 1, scale 2/||y - A x||^2), residual clamped below at 1e-12.
double sample_noise_precision(const Vector& y, const Matrix& A, const Image& x, Rng& rng);
double sample_noise_precision(Eigen::Index measurements, double residual_sq, Rng& rng);

struct GibbsChainState {
  Image x;
  AuxiliaryField z;
  double noise_precision;
  long iteration;
  Rng rng;
};

struct ChainOptions {
  int iterations = 200;
  int burn_in = 100;
  // Return the final sample instead of the post-burn-in average.
  bool last_sample = false;
  // Start from uniform noise instead of the back-projection A^T y.
  bool random_init = false;
  SolverOptions solver;

  void validate() const;
};

struct IterationRecord {
  long iteration;
  double residual_sq;
  double exponent;
  double noise_precision;
};

struct ChainDiagnostics {
  std::vector<IterationRecord> records;
  // One "iteration,residual_sq,exponent,noise_precision" line per record.
  std::string to_csv() const;
};

struct RestorationResult {
  Image restored;
  GibbsChainState state;
  ChainDiagnostics diagnostics;
};

// Auxiliary-variable Gibbs restoration: z | x, then x | z, y, then the noise
// precision | x, y, repeated `iterations` times.
RestorationResult run_restoration_chain(const PriorModel& model, const Matrix& A,
                                        const Vector& y, Eigen::Index rows, Eigen::Index cols,
                                        const ChainOptions& options, Rng& rng);

// k block-Gibbs sweeps of the prior alone (ridge-regularized) from each image
// of `init`. Images are processed in order from one generator.
std::vector<Image> run_prior_chain(const PriorModel& model, const std::vector<Image>& init,
                                   int k, const SolverOptions& options, Rng& rng);

}  // namespace gibbscs
