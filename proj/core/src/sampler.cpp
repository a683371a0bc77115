#include "gibbscs/sampler.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "gibbscs/errors.hpp"

namespace gibbscs {

namespace {

int wrap(Eigen::Index i, Eigen::Index n) noexcept {
  Eigen::Index r = i % n;
  return static_cast<int>(r < 0 ? r + n : r);
}

// neighbors(p, k) = flat index of position p shifted by footprint offset k.
Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> neighbor_table(
    std::span<const Offset> offsets, Eigen::Index rows, Eigen::Index cols) {
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> table(
      rows * cols, static_cast<Eigen::Index>(offsets.size()));
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) {
      for (size_t k = 0; k < offsets.size(); ++k) {
        table(r * cols + c, static_cast<Eigen::Index>(k)) =
            wrap(r + offsets[k].dr, rows) * static_cast<int>(cols) + wrap(c + offsets[k].dc, cols);
      }
    }
  }
  return table;
}

void check_finite_image(const Image& x, const char* what) {
  if (!x.allFinite()) throw NumericalError(std::string(what) + ": non-finite image value");
}

}  // namespace

// ---------------------------------------------------------------------------

AuxiliaryField::AuxiliaryField(int filters, Eigen::Index rows, Eigen::Index cols)
    : filters_(filters), rows_(rows), cols_(cols),
      indices_(static_cast<size_t>(filters) * static_cast<size_t>(rows * cols), 0) {
  if (filters < 0 || rows < 0 || cols < 0) throw InvalidInput("auxiliary field: negative shape");
}

void AuxiliaryField::check(const PriorModel& model, Eigen::Index rows, Eigen::Index cols) const {
  if (filters_ != model.num_filters() || rows_ != rows || cols_ != cols) {
    throw InvalidInput("auxiliary field shape does not match the model and image");
  }
  for (int v : indices_) {
    if (v < 0 || v >= model.num_scales()) throw InvalidInput("auxiliary field: index out of range");
  }
}

SolverOptions SolverOptions::for_unknowns(Eigen::Index unknowns) {
  SolverOptions o;
  o.method = unknowns <= kDenseLimit ? Method::kDenseCholesky : Method::kConjugateGradient;
  return o;
}

void SolverOptions::validate() const {
  if (!(cg_tolerance > 0.0)) throw InvalidInput("solver: cg tolerance must be positive");
  if (!(ridge >= 0.0) || !std::isfinite(ridge)) throw InvalidInput("solver: ridge must be >= 0");
  if (cg_max_iters < 0) throw InvalidInput("solver: cg_max_iters must be >= 0");
}

// ---------------------------------------------------------------------------

LinearGaussianSystem::LinearGaussianSystem(const PriorModel& model, const AuxiliaryField& z,
                                           Eigen::Index rows, Eigen::Index cols,
                                           std::optional<MeasurementRows> measurement,
                                           double ridge)
    : model_(&model), rows_(rows), cols_(cols), measurement_(measurement), ridge_(ridge) {
  if (rows <= 0 || cols <= 0) throw InvalidInput("posterior system: empty image shape");
  if (model.num_filters() > 0) {
    const int extent = footprint_extent(model.filters().footprint());
    if (rows < extent || cols < extent) {
      throw InvalidInput("posterior system: image smaller than the filter footprint");
    }
  }
  z.check(model, rows, cols);
  if (!(ridge >= 0.0)) throw InvalidInput("posterior system: ridge must be >= 0");
  if (measurement_) {
    const MeasurementRows& meas = *measurement_;
    if (!meas.A || !meas.y) throw InvalidInput("posterior system: measurement needs A and y");
    if (meas.A->cols() != unknowns()) {
      throw InvalidInput("posterior system: A has " + std::to_string(meas.A->cols()) +
                         " columns for " + std::to_string(unknowns()) + " pixels");
    }
    if (meas.y->size() != meas.A->rows()) {
      throw InvalidInput("posterior system: y length does not match A");
    }
    if (!(meas.noise_variance > 0.0) || !std::isfinite(meas.noise_variance)) {
      throw InvalidInput("posterior system: noise variance must be positive");
    }
    if (meas.gram && (meas.gram->rows() != unknowns() || meas.gram->cols() != unknowns())) {
      throw InvalidInput("posterior system: gram matrix has the wrong shape");
    }
  }
  row_precision_.resize(model.num_filters(), unknowns());
  for (int m = 0; m < model.num_filters(); ++m) {
    for (Eigen::Index p = 0; p < unknowns(); ++p) {
      row_precision_(m, p) = model.grid().precision(z.at(m, p));
    }
  }
}

Vector LinearGaussianSystem::apply_precision(const Vector& x) const {
  if (x.size() != unknowns()) throw InvalidInput("apply_precision: size mismatch");
  Vector out = ridge_ * x;
  const Image image = unvec(x, rows_, cols_);
  const auto offsets = model_->filters().offsets();
  for (int m = 0; m < model_->num_filters(); ++m) {
    const auto taps = model_->filters().filter(m);
    Image response = correlate(image, offsets, taps);
    vec(response).array() *= row_precision_.row(m).transpose().array();
    out += vec(correlate_adjoint(response, offsets, taps));
  }
  if (measurement_) {
    const Matrix& A = *measurement_->A;
    out += A.transpose() * (A * x) / measurement_->noise_variance;
  }
  return out;
}

Matrix LinearGaussianSystem::dense_precision() const {
  const Eigen::Index n = unknowns();
  Matrix P(n, n);
  if (measurement_) {
    const double inv_noise = 1.0 / measurement_->noise_variance;
    if (measurement_->gram) {
      P = *measurement_->gram * inv_noise;
    } else {
      P.setZero();
      P.selfadjointView<Eigen::Lower>().rankUpdate(measurement_->A->transpose(), inv_noise);
      P.triangularView<Eigen::StrictlyUpper>() = P.transpose();
    }
  } else {
    P.setZero();
  }
  P.diagonal().array() += ridge_;

  const auto offsets = model_->filters().offsets();
  const auto neighbors = neighbor_table(offsets, rows_, cols_);
  const Eigen::Index taps = static_cast<Eigen::Index>(offsets.size());
  for (int m = 0; m < model_->num_filters(); ++m) {
    const auto f = model_->filters().filter(m);
    for (Eigen::Index p = 0; p < n; ++p) {
      const double d = row_precision_(m, p);
      for (Eigen::Index k = 0; k < taps; ++k) {
        const double a = d * f[k];
        if (a == 0.0) continue;
        double* column = P.col(neighbors(p, k)).data();
        for (Eigen::Index l = 0; l < taps; ++l) column[neighbors(p, l)] += a * f[l];
      }
    }
  }
  return P;
}

Vector LinearGaussianSystem::precision_diagonal() const {
  Vector diag = Vector::Constant(unknowns(), ridge_);
  const auto offsets = model_->filters().offsets();
  const auto neighbors = neighbor_table(offsets, rows_, cols_);
  for (int m = 0; m < model_->num_filters(); ++m) {
    const auto f = model_->filters().filter(m);
    for (Eigen::Index p = 0; p < unknowns(); ++p) {
      for (size_t k = 0; k < offsets.size(); ++k) {
        diag[neighbors(p, static_cast<Eigen::Index>(k))] += row_precision_(m, p) * f[k] * f[k];
      }
    }
  }
  if (measurement_) {
    const double inv_noise = 1.0 / measurement_->noise_variance;
    if (measurement_->gram) {
      diag += measurement_->gram->diagonal() * inv_noise;
    } else {
      diag += measurement_->A->colwise().squaredNorm().transpose() * inv_noise;
    }
  }
  return diag;
}

Vector LinearGaussianSystem::rhs() const {
  if (!measurement_) return Vector::Zero(unknowns());
  return measurement_->A->transpose() * *measurement_->y / measurement_->noise_variance;
}

Vector LinearGaussianSystem::perturbed_rhs(Rng& rng) const {
  std::normal_distribution<double> normal;
  Vector out = Vector::Zero(unknowns());
  const auto offsets = model_->filters().offsets();
  Image weighted(rows_, cols_);
  for (int m = 0; m < model_->num_filters(); ++m) {
    // Sigma^-1 eps for eps ~ N(0, 1/precision) is sqrt(precision) * xi.
    for (Eigen::Index p = 0; p < unknowns(); ++p) {
      weighted.data()[p] = std::sqrt(row_precision_(m, p)) * normal(rng);
    }
    out += vec(correlate_adjoint(weighted, offsets, model_->filters().filter(m)));
  }
  if (measurement_) {
    const double sigma = std::sqrt(measurement_->noise_variance);
    Vector target = *measurement_->y;
    for (Eigen::Index i = 0; i < target.size(); ++i) target[i] += sigma * normal(rng);
    out += measurement_->A->transpose() * target / measurement_->noise_variance;
  }
  if (ridge_ > 0.0) {
    const double s = std::sqrt(ridge_);
    for (Eigen::Index i = 0; i < out.size(); ++i) out[i] += s * normal(rng);
  }
  return out;
}

LinearGaussianSystem build_posterior_system(const PriorModel& model, const AuxiliaryField& z,
                                            Eigen::Index rows, Eigen::Index cols,
                                            const Matrix* A, const Vector* y,
                                            double noise_variance, double ridge,
                                            const Matrix* gram) {
  std::optional<MeasurementRows> meas;
  if (A || y) {
    if (!A || !y) throw InvalidInput("posterior system: A and y must be given together");
    meas = MeasurementRows{A, y, noise_variance, gram};
  }
  return LinearGaussianSystem(model, z, rows, cols, meas, ridge);
}

// ---------------------------------------------------------------------------

Vector conjugate_gradient(const LinearGaussianSystem& system, const Vector& rhs,
                          const SolverOptions& options, int* iterations) {
  const Eigen::Index n = system.unknowns();
  const int max_iters =
      options.cg_max_iters > 0 ? options.cg_max_iters : static_cast<int>(10 * n);
  const Vector inv_diag = system.precision_diagonal().cwiseInverse();

  Vector x = Vector::Zero(n);
  const double rhs_norm = rhs.norm();
  if (rhs_norm == 0.0) {
    if (iterations) *iterations = 0;
    return x;
  }
  Vector r = rhs;
  Vector s = inv_diag.cwiseProduct(r);
  Vector d = s;
  double rs = r.dot(s);
  double rel = 1.0;
  for (int it = 1; it <= max_iters; ++it) {
    const Vector q = system.apply_precision(d);
    const double dq = d.dot(q);
    if (!(dq > 0.0)) {
      throw NotPositiveDefinite("conjugate gradient: precision is not positive definite");
    }
    const double alpha = rs / dq;
    x += alpha * d;
    r -= alpha * q;
    rel = r.norm() / rhs_norm;
    if (rel <= options.cg_tolerance) {
      if (iterations) *iterations = it;
      return x;
    }
    s = inv_diag.cwiseProduct(r);
    const double rs_next = r.dot(s);
    d = s + (rs_next / rs) * d;
    rs = rs_next;
  }
  std::ostringstream msg;
  msg << "conjugate gradient did not converge in " << max_iters
      << " iterations (relative residual " << rel << ")";
  throw SolverError(msg.str(), rel, max_iters);
}

GaussianSampler::GaussianSampler(const LinearGaussianSystem& system,
                                 const SolverOptions& options)
    : system_(&system), options_(options) {
  options_.validate();
  if (options_.method == SolverOptions::Method::kDenseCholesky) {
    llt_.emplace(system.dense_precision());
    if (llt_->info() != Eigen::Success) {
      throw NotPositiveDefinite("Cholesky factorization failed: precision is not positive definite");
    }
  }
}

Vector GaussianSampler::solve(const Vector& rhs) const {
  if (llt_) {
    last_iterations_ = 0;
    return llt_->solve(rhs);
  }
  int iters = 0;
  Vector x = conjugate_gradient(*system_, rhs, options_, &iters);
  last_iterations_ = iters;
  return x;
}

Vector GaussianSampler::mean() const { return solve(system_->rhs()); }

Vector GaussianSampler::draw(Rng& rng) const { return solve(system_->perturbed_rhs(rng)); }

Image sample_x_given_z(const LinearGaussianSystem& system, const SolverOptions& options,
                       Rng& rng) {
  const GaussianSampler sampler(system, options);
  return unvec(sampler.draw(rng), system.rows(), system.cols());
}

Image posterior_mean(const LinearGaussianSystem& system, const SolverOptions& options) {
  const GaussianSampler sampler(system, options);
  return unvec(sampler.mean(), system.rows(), system.cols());
}

// ---------------------------------------------------------------------------

AuxiliaryField sample_scales_given_x(const PriorModel& model, const Image& x, Rng& rng) {
  model.check_image(x);
  check_finite_image(x, "sample_scales_given_x");
  const int scales = model.num_scales();
  AuxiliaryField z(model.num_filters(), x.rows(), x.cols());
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<double> prob(scales);
  for (int m = 0; m < model.num_filters(); ++m) {
    const GmmActivation act(model.weights().row(m), model.grid());
    const Image response = correlate(x, model.filters().offsets(), model.filters().filter(m));
    for (Eigen::Index p = 0; p < response.size(); ++p) {
      const double total = act.responsibilities(response.data()[p], prob);
      if (!std::isfinite(total)) {
        throw NumericalError("sample_scales_given_x: all scale probabilities vanish for filter " +
                             std::to_string(m));
      }
      const double u = uniform(rng);
      double acc = 0.0;
      int pick = scales - 1;
      for (int n = 0; n < scales; ++n) {
        acc += prob[n];
        if (u < acc) {
          pick = n;
          break;
        }
      }
      z.at(m, p) = pick;
    }
  }
  return z;
}

double sample_noise_precision(Eigen::Index measurements, double residual_sq, Rng& rng) {
  const double shape = static_cast<double>(measurements) / 2.0 + 1.0;
  const double scale = 2.0 / std::max(residual_sq, 1e-12);
  std::gamma_distribution<double> gamma(shape, scale);
  return gamma(rng);
}

double sample_noise_precision(const Vector& y, const Matrix& A, const Image& x, Rng& rng) {
  if (A.rows() != y.size() || A.cols() != x.size()) {
    throw InvalidInput("sample_noise_precision: shape mismatch");
  }
  const double residual_sq = (y - A * vec(x)).squaredNorm();
  return sample_noise_precision(y.size(), residual_sq, rng);
}

// ---------------------------------------------------------------------------

void ChainOptions::validate() const {
  if (iterations <= 0) throw InvalidInput("chain: iterations must be positive");
  if (burn_in < 0 || burn_in >= iterations) {
    throw InvalidInput("chain: need iterations > burn_in >= 0");
  }
  solver.validate();
}

std::string ChainDiagnostics::to_csv() const {
  std::ostringstream out;
  out.precision(17);
  out << "iteration,residual_sq,exponent,noise_precision\n";
  for (const auto& r : records) {
    out << r.iteration << ',' << r.residual_sq << ',' << r.exponent << ',' << r.noise_precision
        << '\n';
  }
  return out.str();
}

namespace {

template <class Fn>
auto with_iteration_context(long iteration, Fn&& fn) {
  try {
    return fn();
  } catch (const SolverError& e) {
    throw SolverError("iteration " + std::to_string(iteration) + ": " + e.what(),
                      e.final_residual(), e.iterations());
  } catch (const NotPositiveDefinite& e) {
    throw NotPositiveDefinite("iteration " + std::to_string(iteration) + ": " + e.what());
  }
}

}  // namespace

RestorationResult run_restoration_chain(const PriorModel& model, const Matrix& A,
                                        const Vector& y, Eigen::Index rows, Eigen::Index cols,
                                        const ChainOptions& options, Rng& rng) {
  options.validate();
  if (A.cols() != rows * cols) throw InvalidInput("restoration: A does not match the image shape");
  if (A.rows() != y.size()) throw InvalidInput("restoration: y length does not match A");

  Matrix gram;
  const bool dense = options.solver.method == SolverOptions::Method::kDenseCholesky;
  if (dense) {
    gram.setZero(A.cols(), A.cols());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(A.transpose());
    gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  }

  Image x;
  if (options.random_init) {
    std::uniform_real_distribution<double> uniform(0.0, 1.0);
    x.resize(rows, cols);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = uniform(rng);
  } else {
    x = unvec(A.transpose() * y, rows, cols);
  }
  AuxiliaryField z = sample_scales_given_x(model, x, rng);
  double noise_precision = 1.0;

  ChainDiagnostics diagnostics;
  diagnostics.records.reserve(static_cast<size_t>(options.iterations));
  Vector sum = Vector::Zero(rows * cols);
  long kept = 0;
  for (long it = 1; it <= options.iterations; ++it) {
    z = sample_scales_given_x(model, x, rng);
    x = with_iteration_context(it, [&] {
      const LinearGaussianSystem system = build_posterior_system(
          model, z, rows, cols, &A, &y, 1.0 / noise_precision, options.solver.ridge,
          dense ? &gram : nullptr);
      return sample_x_given_z(system, options.solver, rng);
    });
    check_finite_image(x, "restoration chain");
    const double residual_sq = (y - A * vec(x)).squaredNorm();
    noise_precision = sample_noise_precision(y.size(), residual_sq, rng);
    diagnostics.records.push_back({it, residual_sq, log_prior_exponent(model, x), noise_precision});
    if (it > options.burn_in) {
      sum += vec(x);
      ++kept;
    }
  }

  Image restored = options.last_sample ? x : unvec(sum / static_cast<double>(kept), rows, cols);
  return RestorationResult{std::move(restored),
                           GibbsChainState{std::move(x), std::move(z), noise_precision,
                                           options.iterations, rng},
                           std::move(diagnostics)};
}

std::vector<Image> run_prior_chain(const PriorModel& model, const std::vector<Image>& init,
                                   int k, const SolverOptions& options, Rng& rng) {
  if (k < 1) throw InvalidInput("prior chain: k must be >= 1");
  options.validate();
  std::vector<Image> out;
  out.reserve(init.size());
  for (const Image& start : init) {
    Image x = start;
    for (int step = 1; step <= k; ++step) {
      const AuxiliaryField z = sample_scales_given_x(model, x, rng);
      x = with_iteration_context(step, [&] {
        const LinearGaussianSystem system = build_posterior_system(
            model, z, x.rows(), x.cols(), nullptr, nullptr, 1.0, options.ridge);
        return sample_x_given_z(system, options, rng);
      });
      check_finite_image(x, "prior chain");
    }
    out.push_back(std::move(x));
  }
  return out;
}

}  // namespace gibbscs
