#include "gibbscs/prior_model.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <iterator>
#include <limits>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "gibbscs/errors.hpp"
#include "gibbscs/random.hpp"

namespace gibbscs {

namespace {

constexpr std::array<Offset, 1> kPointOffsets{{{0, 0}}};
constexpr std::array<Offset, 5> kPlusOffsets{{{-1, 0}, {0, -1}, {0, 0}, {0, 1}, {1, 0}}};

template <int R>
constexpr auto square_offsets() {
  std::array<Offset, (2 * R + 1) * (2 * R + 1)> out{};
  int k = 0;
  for (int dr = -R; dr <= R; ++dr) {
    for (int dc = -R; dc <= R; ++dc) out[k++] = Offset{dr, dc};
  }
  return out;
}
constexpr auto kSquare3Offsets = square_offsets<1>();
constexpr auto kSquare5Offsets = square_offsets<2>();

int wrap(long i, long n) noexcept {
  long r = i % n;
  return static_cast<int>(r < 0 ? r + n : r);
}

// out(r, c) += w * src((r + dr) mod R, (c + dc) mod C)
void add_shifted(Image& out, const Image& src, int dr, int dc, double w) {
  const Eigen::Index rows = src.rows();
  const Eigen::Index cols = src.cols();
  const Eigen::Index shift = wrap(dc, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    const double* s = src.data() + wrap(r + dr, rows) * cols;
    double* o = out.data() + r * cols;
    const Eigen::Index head = cols - shift;
    for (Eigen::Index c = 0; c < head; ++c) o[c] += w * s[c + shift];
    for (Eigen::Index c = head; c < cols; ++c) o[c] += w * s[c - head];
  }
}

double log_sum_exp(std::span<const double> values) noexcept {
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : values) peak = std::max(peak, v);
  if (!std::isfinite(peak)) return peak;
  double sum = 0.0;
  for (double v : values) sum += std::exp(v - peak);
  return peak + std::log(sum);
}

}  // namespace

std::span<const Offset> footprint_offsets(Footprint footprint) noexcept {
  switch (footprint) {
    case Footprint::kPoint: return kPointOffsets;
    case Footprint::kPlus5: return kPlusOffsets;
    case Footprint::kSquare3: return kSquare3Offsets;
    case Footprint::kSquare5: return kSquare5Offsets;
  }
  return {};
}

int footprint_radius(Footprint footprint) noexcept {
  switch (footprint) {
    case Footprint::kPoint: return 0;
    case Footprint::kPlus5:
    case Footprint::kSquare3: return 1;
    case Footprint::kSquare5: return 2;
  }
  return 0;
}

std::string_view to_string(Footprint footprint) noexcept {
  switch (footprint) {
    case Footprint::kPoint: return "point";
    case Footprint::kPlus5: return "plus5";
    case Footprint::kSquare3: return "square3";
    case Footprint::kSquare5: return "square5";
  }
  return "?";
}

Footprint parse_footprint(std::string_view name) {
  for (Footprint f : {Footprint::kPoint, Footprint::kPlus5, Footprint::kSquare3,
                      Footprint::kSquare5}) {
    if (to_string(f) == name) return f;
  }
  throw InvalidInput("unknown footprint '" + std::string(name) + "'");
}

Image correlate(const Image& image, std::span<const Offset> offsets,
                std::span<const double> taps) {
  Image out = Image::Zero(image.rows(), image.cols());
  for (size_t k = 0; k < offsets.size(); ++k) {
    if (taps[k] != 0.0) add_shifted(out, image, offsets[k].dr, offsets[k].dc, taps[k]);
  }
  return out;
}

Image correlate_adjoint(const Image& response, std::span<const Offset> offsets,
                        std::span<const double> taps) {
  Image out = Image::Zero(response.rows(), response.cols());
  for (size_t k = 0; k < offsets.size(); ++k) {
    if (taps[k] != 0.0) add_shifted(out, response, -offsets[k].dr, -offsets[k].dc, taps[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------

FilterBank::FilterBank(Footprint footprint, TapMatrix taps)
    : footprint_(footprint), taps_(std::move(taps)) {
  if (taps_.cols() != static_cast<Eigen::Index>(footprint_offsets(footprint_).size())) {
    throw InvalidInput("filter bank: " + std::to_string(taps_.cols()) + " taps per filter, " +
                       std::string(to_string(footprint_)) + " needs " +
                       std::to_string(footprint_offsets(footprint_).size()));
  }
  if (!taps_.allFinite()) throw InvalidInput("filter bank: non-finite tap value");
}

ScaleGrid::ScaleGrid(std::vector<double> scales, double base_variance)
    : scales_(std::move(scales)), base_variance_(base_variance) {
  if (scales_.empty()) throw InvalidInput("scale grid: no scales");
  if (!(base_variance_ > 0.0) || !std::isfinite(base_variance_)) {
    throw InvalidInput("scale grid: base variance must be positive and finite");
  }
  for (size_t n = 0; n < scales_.size(); ++n) {
    const double v = base_variance_ / scales_[n];
    if (!(scales_[n] > 0.0) || !std::isfinite(scales_[n]) || !(v > 0.0) || !std::isfinite(v)) {
      throw InvalidInput("scale grid: scale " + std::to_string(n) + " is not usable");
    }
    if (n > 0 && !(scales_[n] > scales_[n - 1])) {
      throw InvalidInput("scale grid: scales must be strictly ascending");
    }
  }
}

ScaleGrid ScaleGrid::delta1(double base_variance) {
  return ScaleGrid({std::exp(-7.0), std::exp(-3.0), 1.0, std::exp(3.0), std::exp(7.0)},
                   base_variance);
}

ScaleGrid ScaleGrid::delta2(double base_variance) {
  std::vector<double> s;
  for (int e : {-7, -5, -3, -1, 1, 3, 5, 7}) s.push_back(std::exp(static_cast<double>(e)));
  return ScaleGrid(std::move(s), base_variance);
}

MixtureWeights::MixtureWeights(Table weights) : weights_(std::move(weights)) {
  if (weights_.cols() == 0) throw InvalidInput("mixture weights: no scales");
  for (Eigen::Index m = 0; m < weights_.rows(); ++m) {
    if (!weights_.row(m).allFinite() || (weights_.row(m).array() < 0.0).any()) {
      throw InvalidInput("mixture weights: row " + std::to_string(m) + " has a negative entry");
    }
    if (std::abs(weights_.row(m).sum() - 1.0) > 1e-12) {
      throw InvalidInput("mixture weights: row " + std::to_string(m) + " does not sum to one");
    }
  }
}

MixtureWeights MixtureWeights::uniform(int filters, int scales) {
  return MixtureWeights(Table::Constant(filters, scales, 1.0 / scales));
}

MixtureWeights MixtureWeights::from_logits(const Table& logits) {
  if (!logits.allFinite()) throw NumericalError("mixture weights: non-finite logits");
  Table w(logits.rows(), logits.cols());
  for (Eigen::Index m = 0; m < logits.rows(); ++m) {
    const double peak = logits.row(m).maxCoeff();
    w.row(m) = (logits.row(m).array() - peak).exp();
    w.row(m) /= w.row(m).sum();
    // A second pass pulls the row sum to within an ulp or two of one.
    w.row(m) /= w.row(m).sum();
  }
  return MixtureWeights(std::move(w));
}

MixtureWeights::Table MixtureWeights::logits() const {
  // Floored so an underflowed weight maps to a finite logit.
  return weights_.array().max(std::numeric_limits<double>::min()).log();
}

PriorModel::PriorModel(FilterBank filters, ScaleGrid grid, MixtureWeights weights,
                       std::optional<std::string> preset_name)
    : filters_(std::move(filters)),
      grid_(std::move(grid)),
      weights_(std::move(weights)),
      preset_name_(std::move(preset_name)) {
  if (weights_.rows() != filters_.num_filters()) {
    throw InvalidInput("prior model: " + std::to_string(weights_.rows()) + " weight rows for " +
                       std::to_string(filters_.num_filters()) + " filters");
  }
  if (weights_.cols() != grid_.size()) {
    throw InvalidInput("prior model: weight rows do not match the scale grid");
  }
}

int PriorModel::trainable_parameter_count() const noexcept {
  return num_filters() * filters_.taps_per_filter() + num_filters() * num_scales();
}

void PriorModel::check_image(const Image& image) const {
  const int extent = footprint_extent(filters_.footprint());
  if (image.rows() < extent || image.cols() < extent) {
    throw InvalidInput("image " + std::to_string(image.rows()) + "x" +
                       std::to_string(image.cols()) + " is smaller than the " +
                       std::string(to_string(filters_.footprint())) + " footprint");
  }
}

bool operator==(const PriorModel& a, const PriorModel& b) {
  return a.preset_name() == b.preset_name() &&
         a.filters().footprint() == b.filters().footprint() &&
         a.filters().taps() == b.filters().taps() &&
         a.grid().scales() == b.grid().scales() &&
         a.grid().base_variance() == b.grid().base_variance() &&
         a.weights().table() == b.weights().table();
}

// ---------------------------------------------------------------------------

GmmActivation::GmmActivation(std::span<const double> weights, const ScaleGrid& grid) {
  if (static_cast<int>(weights.size()) != grid.size()) {
    throw InvalidInput("activation: weight count does not match the scale grid");
  }
  log_offset_.resize(weights.size());
  precision_.resize(weights.size());
  for (int n = 0; n < grid.size(); ++n) {
    precision_[n] = grid.precision(n);
    log_offset_[n] =
        std::log(weights[n]) - 0.5 * std::log(2.0 * std::numbers::pi * grid.variance(n));
  }
}

double GmmActivation::log_density(double t) const noexcept {
  double terms[32];
  std::vector<double> spill;
  double* buf = terms;
  if (log_offset_.size() > std::size(terms)) {
    spill.resize(log_offset_.size());
    buf = spill.data();
  }
  for (int n = 0; n < size(); ++n) buf[n] = log_component(n, t);
  return log_sum_exp({buf, log_offset_.size()});
}

double GmmActivation::responsibilities(double t, std::span<double> out) const noexcept {
  for (int n = 0; n < size(); ++n) out[n] = log_component(n, t);
  const double total = log_sum_exp(out.first(log_offset_.size()));
  for (int n = 0; n < size(); ++n) out[n] = std::exp(out[n] - total);
  return total;
}

Image filter_response(const PriorModel& model, const Image& image, int m) {
  model.check_image(image);
  if (m < 0 || m >= model.num_filters()) {
    throw InvalidInput("filter index " + std::to_string(m) + " out of range");
  }
  return correlate(image, model.filters().offsets(), model.filters().filter(m));
}

double gmm_log_activation(double t, std::span<const double> weights, const ScaleGrid& grid) {
  return GmmActivation(weights, grid).log_density(t);
}

double log_prior_exponent(const PriorModel& model, const Image& image) {
  model.check_image(image);
  double total = 0.0;
  for (int m = 0; m < model.num_filters(); ++m) {
    const GmmActivation act(model.weights().row(m), model.grid());
    const Image response = correlate(image, model.filters().offsets(), model.filters().filter(m));
    for (Eigen::Index p = 0; p < response.size(); ++p) {
      const double v = act.log_density(response.data()[p]);
      if (!std::isfinite(v)) {
        std::ostringstream msg;
        msg << "log prior exponent: non-finite activation for filter " << m << " at (" <<
            p / response.cols() << ", " << p % response.cols() << ")";
        throw NumericalError(msg.str());
      }
      total += v;
    }
  }
  return total;
}

ExponentGradients exponent_gradients(const PriorModel& model, const Image& image) {
  model.check_image(image);
  const int filters = model.num_filters();
  const int scales = model.num_scales();
  const auto offsets = model.filters().offsets();
  ExponentGradients grads{TapMatrix::Zero(filters, model.filters().taps_per_filter()),
                          MixtureWeights::Table::Zero(filters, scales)};
  std::vector<double> resp(scales);
  for (int m = 0; m < filters; ++m) {
    const GmmActivation act(model.weights().row(m), model.grid());
    const Image response = correlate(image, offsets, model.filters().filter(m));
    // slope(p) = d/dt log mixture at t = response(p)
    Image slope(response.rows(), response.cols());
    Eigen::VectorXd resp_sum = Eigen::VectorXd::Zero(scales);
    for (Eigen::Index p = 0; p < response.size(); ++p) {
      const double t = response.data()[p];
      act.responsibilities(t, resp);
      double s = 0.0;
      for (int n = 0; n < scales; ++n) {
        s -= resp[n] * act.precision(n);
        resp_sum[n] += resp[n];
      }
      slope.data()[p] = s * t;
    }
    const double positions = static_cast<double>(response.size());
    for (int n = 0; n < scales; ++n) {
      grads.logits(m, n) = resp_sum[n] - positions * model.weights().table()(m, n);
    }
    // d/d tap_k = sum_p slope(p) * image(p + offset_k)
    for (size_t k = 0; k < offsets.size(); ++k) {
      const double one = 1.0;
      const Offset off[1] = {offsets[k]};
      const Image shifted = correlate(image, off, {&one, 1});
      grads.taps(m, static_cast<Eigen::Index>(k)) = (slope.array() * shifted.array()).sum();
    }
  }
  return grads;
}

// ---------------------------------------------------------------------------

namespace {

struct PresetSpec {
  std::string_view name;
  Footprint footprint;
  int filters;
  bool wide_grid;
};

constexpr std::array<PresetSpec, 5> kPresets{{
    {"bcnn1", Footprint::kPlus5, 4, false},
    {"bcnn2", Footprint::kSquare3, 4, false},
    {"bcnn3", Footprint::kSquare3, 8, false},
    {"bcnn4", Footprint::kSquare3, 8, true},
    {"bcnn5", Footprint::kSquare5, 24, true},
}};

constexpr double kInitTapStddev = 0.1;

}  // namespace

std::vector<std::string> preset_names() {
  std::vector<std::string> out;
  for (const auto& p : kPresets) out.emplace_back(p.name);
  return out;
}

PriorModel preset_model(std::string_view name, std::uint64_t seed, double base_variance) {
  const auto it = std::find_if(kPresets.begin(), kPresets.end(),
                               [&](const PresetSpec& p) { return p.name == name; });
  if (it == kPresets.end()) throw InvalidInput("unknown preset '" + std::string(name) + "'");

  Rng rng = make_rng(seed, "preset-init");
  std::normal_distribution<double> normal(0.0, kInitTapStddev);
  const int taps = static_cast<int>(footprint_offsets(it->footprint).size());
  TapMatrix bank(it->filters, taps);
  for (Eigen::Index i = 0; i < bank.size(); ++i) bank.data()[i] = normal(rng);
  for (Eigen::Index m = 0; m < bank.rows(); ++m) bank.row(m).array() -= bank.row(m).mean();

  ScaleGrid grid = it->wide_grid ? ScaleGrid::delta2(base_variance) : ScaleGrid::delta1(base_variance);
  MixtureWeights weights = MixtureWeights::uniform(it->filters, grid.size());
  return PriorModel(FilterBank(it->footprint, std::move(bank)), std::move(grid),
                    std::move(weights), std::string(it->name));
}

// ---------------------------------------------------------------------------
// Model file

namespace {

using nlohmann::json;

// Taps are written as a dense (extent x extent) kernel; footprint positions
// outside the support are zero.
json kernel_to_json(const FilterBank& bank, int m) {
  const int radius = footprint_radius(bank.footprint());
  const int extent = 2 * radius + 1;
  std::vector<std::vector<double>> kernel(extent, std::vector<double>(extent, 0.0));
  const auto offsets = bank.offsets();
  const auto taps = bank.filter(m);
  for (size_t k = 0; k < offsets.size(); ++k) {
    kernel[offsets[k].dr + radius][offsets[k].dc + radius] = taps[k];
  }
  return kernel;
}

[[noreturn]] void malformed(const std::string& what) {
  throw MalformedFile("model file: " + what);
}

const json& field(const json& doc, const char* key) {
  const auto it = doc.find(key);
  if (it == doc.end()) malformed(std::string("missing field '") + key + "'");
  return *it;
}

double number(const json& v, const char* what) {
  if (!v.is_number()) malformed(std::string(what) + " is not a number");
  return v.get<double>();
}

}  // namespace

std::string serialize_model(const PriorModel& model) {
  json doc;
  doc["format_version"] = model.format_version();
  doc["preset_name"] = model.preset_name() ? json(*model.preset_name()) : json(nullptr);
  doc["footprint"] = std::string(to_string(model.filters().footprint()));
  doc["num_filters"] = model.num_filters();
  doc["scales"] = model.grid().scales();
  doc["base_variance"] = model.grid().base_variance();
  json weights = json::array();
  for (int m = 0; m < model.num_filters(); ++m) {
    const auto row = model.weights().row(m);
    weights.push_back(std::vector<double>(row.begin(), row.end()));
  }
  doc["weights"] = std::move(weights);
  json taps = json::array();
  for (int m = 0; m < model.num_filters(); ++m) taps.push_back(kernel_to_json(model.filters(), m));
  doc["taps"] = std::move(taps);
  return doc.dump(2) + "\n";
}

PriorModel parse_model(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    malformed(e.what());
  }
  if (!doc.is_object()) malformed("top level is not an object");

  const json& version = field(doc, "format_version");
  if (!version.is_number_integer()) malformed("format_version is not an integer");
  if (version.get<long>() != kModelFormatVersion) {
    throw VersionError("model file: unsupported format_version " +
                           std::to_string(version.get<long>()),
                       version.get<long>());
  }

  try {
    std::optional<std::string> preset;
    const json& name = field(doc, "preset_name");
    if (name.is_string()) {
      preset = name.get<std::string>();
    } else if (!name.is_null()) {
      malformed("preset_name must be a string or null");
    }
    const json& fp = field(doc, "footprint");
    if (!fp.is_string()) malformed("footprint is not a string");
    const Footprint footprint = parse_footprint(fp.get<std::string>());

    const json& nf = field(doc, "num_filters");
    if (!nf.is_number_integer() || nf.get<long>() <= 0) malformed("num_filters must be positive");
    const long filters = nf.get<long>();

    const json& scales_json = field(doc, "scales");
    if (!scales_json.is_array()) malformed("scales is not an array");
    std::vector<double> scales;
    for (const auto& s : scales_json) scales.push_back(number(s, "scale"));
    const double base_variance = number(field(doc, "base_variance"), "base_variance");

    const json& weights_json = field(doc, "weights");
    if (!weights_json.is_array() || static_cast<long>(weights_json.size()) != filters) {
      malformed("weights must have num_filters rows");
    }
    MixtureWeights::Table weights(filters, static_cast<Eigen::Index>(scales.size()));
    for (long m = 0; m < filters; ++m) {
      const json& row = weights_json[m];
      if (!row.is_array() || row.size() != scales.size()) malformed("weight row length mismatch");
      for (size_t n = 0; n < scales.size(); ++n) weights(m, n) = number(row[n], "weight");
    }

    const json& taps_json = field(doc, "taps");
    if (!taps_json.is_array() || static_cast<long>(taps_json.size()) != filters) {
      malformed("taps must have num_filters kernels");
    }
    const int radius = footprint_radius(footprint);
    const int extent = 2 * radius + 1;
    const auto offsets = footprint_offsets(footprint);
    TapMatrix taps(filters, static_cast<Eigen::Index>(offsets.size()));
    for (long m = 0; m < filters; ++m) {
      const json& kernel = taps_json[m];
      if (!kernel.is_array() || static_cast<int>(kernel.size()) != extent) {
        malformed("kernel has wrong row count");
      }
      std::vector<std::vector<double>> dense(extent);
      for (int r = 0; r < extent; ++r) {
        if (!kernel[r].is_array() || static_cast<int>(kernel[r].size()) != extent) {
          malformed("kernel has wrong column count");
        }
        for (int c = 0; c < extent; ++c) dense[r].push_back(number(kernel[r][c], "tap"));
      }
      std::vector<std::vector<bool>> used(extent, std::vector<bool>(extent, false));
      for (size_t k = 0; k < offsets.size(); ++k) {
        taps(m, static_cast<Eigen::Index>(k)) = dense[offsets[k].dr + radius][offsets[k].dc + radius];
        used[offsets[k].dr + radius][offsets[k].dc + radius] = true;
      }
      for (int r = 0; r < extent; ++r) {
        for (int c = 0; c < extent; ++c) {
          if (!used[r][c] && dense[r][c] != 0.0) malformed("non-zero tap outside the footprint");
        }
      }
    }
    return PriorModel(FilterBank(footprint, std::move(taps)),
                      ScaleGrid(std::move(scales), base_variance),
                      MixtureWeights(std::move(weights)), std::move(preset));
  } catch (const InvalidInput& e) {
    malformed(e.what());
  } catch (const json::exception& e) {
    malformed(e.what());
  }
}

void save_model(const PriorModel& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write model file " + path.string());
  out << serialize_model(model);
  if (!out) throw IoError("write failed: " + path.string());
}

PriorModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open model file " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_model(buf.str());
}

}  // namespace gibbscs
