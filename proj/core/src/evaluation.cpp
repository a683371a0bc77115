#include "gibbscs/evaluation.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>
#include <tuple>

#include <json.hpp>

#include "gibbscs/errors.hpp"

namespace gibbscs {

namespace {

void require_same_shape(const Image& a, const Image& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream msg;
    msg << what << ": shape " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
        << b.cols();
    throw InvalidInput(msg.str());
  }
}

}  // namespace

double psnr(const Image& reference, const Image& test, double peak) {
  require_same_shape(reference, test, "psnr");
  if (!(peak > 0.0)) throw InvalidInput("psnr: peak must be positive");
  if (reference.size() == 0) throw InvalidInput("psnr: empty image");
  const double mse = (reference - test).squaredNorm() / static_cast<double>(reference.size());
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(peak * peak / mse));
}

double ssim(const Image& reference, const Image& test, double peak) {
  constexpr int kWindow = 8;
  require_same_shape(reference, test, "ssim");
  if (reference.rows() < kWindow || reference.cols() < kWindow) {
    throw InvalidInput("ssim: images must be at least 8x8");
  }
  const double c1 = (0.01 * peak) * (0.01 * peak);
  const double c2 = (0.03 * peak) * (0.03 * peak);
  const double inv_n = 1.0 / (kWindow * kWindow);
  double total = 0.0;
  long windows = 0;
  for (Eigen::Index r = 0; r + kWindow <= reference.rows(); ++r) {
    for (Eigen::Index c = 0; c + kWindow <= reference.cols(); ++c) {
      const auto a = reference.block(r, c, kWindow, kWindow).array();
      const auto b = test.block(r, c, kWindow, kWindow).array();
      const double mu_a = a.sum() * inv_n;
      const double mu_b = b.sum() * inv_n;
      const double var_a = (a * a).sum() * inv_n - mu_a * mu_a;
      const double var_b = (b * b).sum() * inv_n - mu_b * mu_b;
      const double cov = (a * b).sum() * inv_n - mu_a * mu_b;
      const double num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2);
      const double den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2);
      total += num / den;
      ++windows;
    }
  }
  return total / static_cast<double>(windows);
}

// ---------------------------------------------------------------------------

Histogram::Histogram(double lo, double hi, int bins) {
  if (bins < 1) throw InvalidInput("histogram: need at least one bin");
  if (!(hi > lo) || !std::isfinite(lo) || !std::isfinite(hi)) {
    throw InvalidInput("histogram: range must be finite with hi > lo");
  }
  edges_.resize(static_cast<size_t>(bins) + 1);
  for (int i = 0; i <= bins; ++i) edges_[i] = lo + (hi - lo) * i / bins;
  edges_.back() = hi;
  mass_.assign(static_cast<size_t>(bins), 0.0);
}

int Histogram::bin_of(double value) const noexcept {
  const double lo = edges_.front();
  const double hi = edges_.back();
  const int bins = this->bins();
  if (!(value >= lo)) return 0;
  if (value >= hi) return bins - 1;
  int b = static_cast<int>((value - lo) / (hi - lo) * bins);
  b = std::clamp(b, 0, bins - 1);
  // Correct for rounding in the division against the stored edges.
  while (b > 0 && value < edges_[b]) --b;
  while (b < bins - 1 && value >= edges_[b + 1]) ++b;
  return b;
}

void Histogram::add(double value, double weight) { mass_[bin_of(value)] += weight; }

double Histogram::total() const noexcept {
  return std::accumulate(mass_.begin(), mass_.end(), 0.0);
}

void Histogram::normalize() {
  const double t = total();
  if (t > 0.0) {
    for (double& m : mass_) m /= t;
  }
}

std::string Histogram::to_text() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "bin_center,mass\n";
  for (int i = 0; i < bins(); ++i) {
    out << 0.5 * (edges_[i] + edges_[i + 1]) << ',' << mass_[i] << '\n';
  }
  return out.str();
}

KldResult kld(const Histogram& p, const Histogram& q) {
  if (p.edges() != q.edges()) throw InvalidInput("kld: histograms have different bin edges");
  KldResult result{0.0, 0};
  for (int i = 0; i < p.bins(); ++i) {
    const double pi = p.masses()[i];
    double qi = q.masses()[i];
    if (qi < kKldFloor) {
      qi = kKldFloor;
      ++result.floored_bins;
    }
    if (pi > 0.0) result.nats += pi * std::log(pi / qi);
  }
  return result;
}

double response_range(const PriorModel& model, const std::vector<Image>& images,
                      double quantile) {
  if (images.empty()) throw InvalidInput("response_range: empty batch");
  if (!(quantile > 0.0) || quantile > 1.0) throw InvalidInput("response_range: bad quantile");
  std::vector<double> mags;
  for (const Image& image : images) {
    for (int m = 0; m < model.num_filters(); ++m) {
      const Image r = filter_response(model, image, m);
      for (Eigen::Index p = 0; p < r.size(); ++p) mags.push_back(std::abs(r.data()[p]));
    }
  }
  const size_t k = std::min(mags.size() - 1,
                            static_cast<size_t>(std::ceil(quantile * mags.size())) - 1);
  std::nth_element(mags.begin(), mags.begin() + static_cast<std::ptrdiff_t>(k), mags.end());
  return mags[k];
}

Histogram response_histogram(const PriorModel& model, const std::vector<Image>& images, int bins,
                             double half_range) {
  if (images.empty()) throw InvalidInput("response_histogram: empty batch");
  Histogram hist(-half_range, half_range, bins);
  for (const Image& image : images) {
    for (int m = 0; m < model.num_filters(); ++m) {
      const Image r = filter_response(model, image, m);
      for (Eigen::Index p = 0; p < r.size(); ++p) hist.add(r.data()[p]);
    }
  }
  hist.normalize();
  return hist;
}

// ---------------------------------------------------------------------------

double ActivationFunction::operator()(double t) const {
  switch (kind) {
    case ActivationKind::kRelu: return std::max(0.0, t);
    case ActivationKind::kArctan: return std::atan(t);
    case ActivationKind::kGmm: return gmm_log_activation(t, weights, *grid);
  }
  return 0.0;
}

ActivationFunction ActivationFunction::gmm(const PriorModel& model, int row) {
  if (row < 0 || row >= model.num_filters()) throw InvalidInput("gmm activation: bad row");
  const auto w = model.weights().row(row);
  return {ActivationKind::kGmm, std::vector<double>(w.begin(), w.end()), model.grid()};
}

std::vector<double> activation_spectrum(const ActivationFunction& fn, int samples,
                                        double half_range) {
  if (samples < 64) throw InvalidInput("activation_spectrum: need at least 64 samples");
  if (!(half_range > 0.0)) throw InvalidInput("activation_spectrum: range must be positive");
  std::vector<double> in(static_cast<size_t>(samples));
  for (int i = 0; i < samples; ++i) {
    const double t = -half_range + 2.0 * half_range * i / (samples - 1);
    in[i] = fn(t);
  }
  const int bins = samples / 2 + 1;
  fftw_complex* out = fftw_alloc_complex(static_cast<size_t>(bins));
  fftw_plan plan = fftw_plan_dft_r2c_1d(samples, in.data(), out, FFTW_ESTIMATE);
  fftw_execute(plan);
  std::vector<double> mag(static_cast<size_t>(bins));
  for (int k = 0; k < bins; ++k) mag[k] = std::hypot(out[k][0], out[k][1]);
  fftw_destroy_plan(plan);
  fftw_free(out);
  return mag;
}

double high_band_magnitude(const std::vector<double>& spectrum) {
  if (spectrum.size() < 5) throw InvalidInput("high_band_magnitude: spectrum too short");
  // Bins 1..K-1 are the non-DC frequencies; take the top quarter of them.
  const size_t nondc = spectrum.size() - 1;
  const size_t start = spectrum.size() - std::max<size_t>(1, nondc / 4);
  double sum = 0.0;
  for (size_t k = start; k < spectrum.size(); ++k) sum += spectrum[k];
  return sum / static_cast<double>(spectrum.size() - start);
}

// ---------------------------------------------------------------------------

double lasso_objective(const Matrix& A, const Vector& y, double lambda, const Vector& x) {
  return 0.5 * (A * x - y).squaredNorm() + lambda * x.lpNorm<1>();
}

double spectral_norm_sq(const Matrix& A, int max_iters, double tolerance) {
  Vector v = Vector::Ones(A.cols()) / std::sqrt(static_cast<double>(A.cols()));
  // Perturb the start away from any structured eigenvector.
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] += 1e-3 * std::sin(1.0 + static_cast<double>(i));
  v.normalize();
  double estimate = 0.0;
  for (int it = 0; it < max_iters; ++it) {
    Vector w = A.transpose() * (A * v);
    const double next = v.dot(w);
    const double norm = w.norm();
    if (norm == 0.0) return 0.0;
    v = w / norm;
    if (it > 0 && std::abs(next - estimate) <= tolerance * std::abs(next)) return next;
    estimate = next;
  }
  throw SolverError("power iteration did not converge", std::abs(estimate), max_iters);
}

Vector lasso_ista(const Matrix& A, const Vector& y, double lambda, int iterations,
                  std::vector<double>* objective_trace) {
  if (!(lambda > 0.0)) throw InvalidInput("lasso: lambda must be positive");
  if (iterations < 0) throw InvalidInput("lasso: iterations must be >= 0");
  if (A.rows() != y.size()) throw InvalidInput("lasso: y length does not match A");
  // The Rayleigh quotient approaches ||A||^2 from below; inflate slightly so
  // 1/L stays a valid majorization step.
  const double lipschitz = spectral_norm_sq(A) * 1.001;
  Vector x = Vector::Zero(A.cols());
  if (lipschitz == 0.0) return x;
  const double step = 1.0 / lipschitz;
  const double threshold = lambda * step;
  if (objective_trace) {
    objective_trace->clear();
    objective_trace->reserve(static_cast<size_t>(iterations));
  }
  const Vector aty = A.transpose() * y;
  for (int it = 0; it < iterations; ++it) {
    const Vector grad = A.transpose() * (A * x) - aty;
    x -= step * grad;
    x = x.unaryExpr([threshold](double v) {
      return v > threshold ? v - threshold : (v < -threshold ? v + threshold : 0.0);
    });
    if (objective_trace) objective_trace->push_back(lasso_objective(A, y, lambda, x));
  }
  return x;
}

// ---------------------------------------------------------------------------

namespace {

std::string format_double(double v) {
  std::ostringstream out;
  out << std::setprecision(17) << v;
  return out.str();
}

}  // namespace

RestorationReport build_report(std::vector<ReportRow> rows) {
  std::stable_sort(rows.begin(), rows.end(), [](const ReportRow& a, const ReportRow& b) {
    const double sa = a.snr_db.value_or(std::numeric_limits<double>::infinity());
    const double sb = b.snr_db.value_or(std::numeric_limits<double>::infinity());
    return std::tie(a.image, a.method, a.mr, sa) < std::tie(b.image, b.method, b.mr, sb);
  });
  RestorationReport report;
  report.rows = std::move(rows);
  report.aggregate.count = report.rows.size();
  if (!report.rows.empty()) {
    const double n = static_cast<double>(report.rows.size());
    for (const auto& r : report.rows) {
      report.aggregate.mean_psnr_db += r.psnr_db;
      report.aggregate.mean_ssim += r.ssim;
      report.aggregate.mean_runtime_s += r.runtime_s;
    }
    report.aggregate.mean_psnr_db /= n;
    report.aggregate.mean_ssim /= n;
    report.aggregate.mean_runtime_s /= n;
  }
  return report;
}

std::string RestorationReport::to_csv(bool include_runtime) const {
  std::ostringstream out;
  out << "image,method,mr,snr_db,psnr_db,ssim,operator_seed,noise_seed,chain_seed";
  if (include_runtime) out << ",runtime_s";
  out << '\n';
  for (const auto& r : rows) {
    out << r.image << ',' << r.method << ',' << format_double(r.mr) << ','
        << (r.snr_db ? format_double(*r.snr_db) : std::string("noiseless")) << ','
        << format_double(r.psnr_db) << ',' << format_double(r.ssim) << ',' << r.operator_seed
        << ',' << r.noise_seed << ',' << r.chain_seed;
    if (include_runtime) out << ',' << format_double(r.runtime_s);
    out << '\n';
  }
  return out.str();
}

std::string RestorationReport::summary_json(bool include_runtime) const {
  nlohmann::json doc;
  doc["count"] = aggregate.count;
  doc["mean_psnr_db"] = aggregate.mean_psnr_db;
  doc["mean_ssim"] = aggregate.mean_ssim;
  if (include_runtime) doc["mean_runtime_s"] = aggregate.mean_runtime_s;
  return doc.dump(2) + "\n";
}

}  // namespace gibbscs
