#include "gibbscs/sensing.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "gibbscs/errors.hpp"
#include "gibbscs/random.hpp"

namespace gibbscs {

MeasurementOperator MeasurementOperator::gaussian(Eigen::Index measurements,
                                                  Eigen::Index pixels, std::uint64_t seed) {
  if (pixels <= 0 || measurements <= 0) {
    throw InvalidInput("sensing matrix: dimensions must be positive");
  }
  if (measurements > pixels) {
    throw InvalidInput("sensing matrix: M = " + std::to_string(measurements) + " exceeds N = " +
                       std::to_string(pixels) + " (measurement ratio above 1)");
  }
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0 / std::sqrt(static_cast<double>(measurements)));
  Matrix A(measurements, pixels);
  // Row by row, so a prefix of rows does not depend on N.
  for (Eigen::Index i = 0; i < measurements; ++i) {
    for (Eigen::Index j = 0; j < pixels; ++j) A(i, j) = normal(rng);
  }
  return MeasurementOperator(std::move(A), seed, true);
}

MeasurementOperator MeasurementOperator::from_matrix(Matrix A, std::uint64_t seed) {
  if (!A.allFinite()) throw InvalidInput("sensing matrix: non-finite entry");
  return MeasurementOperator(std::move(A), seed, false);
}

Eigen::Index measurements_for_ratio(double mr, Eigen::Index pixels) {
  if (!(mr > 0.0) || mr > 1.0) {
    throw InvalidInput("measurement ratio must lie in (0, 1], got " + std::to_string(mr));
  }
  return std::max<Eigen::Index>(1, std::llround(mr * static_cast<double>(pixels)));
}

MeasurementOperator make_gaussian_matrix(Eigen::Index measurements, Eigen::Index pixels,
                                         std::uint64_t seed) {
  return MeasurementOperator::gaussian(measurements, pixels, seed);
}

MeasurementRecord measure(const MeasurementOperator& op, const Image& image) {
  if (image.size() != op.pixels()) {
    throw InvalidInput("measure: image has " + std::to_string(image.size()) +
                       " pixels, operator expects " + std::to_string(op.pixels()));
  }
  MeasurementRecord record;
  record.y = op.matrix() * vec(image);
  record.operator_seed = op.seed();
  record.regenerable = op.regenerable();
  record.measurements = op.measurements();
  record.pixels = op.pixels();
  record.image_rows = image.rows();
  record.image_cols = image.cols();
  return record;
}

Vector regenerate_noise(const MeasurementRecord& clean, double snr_db, std::uint64_t seed) {
  if (!std::isfinite(snr_db)) {
    throw InvalidInput("SNR must be finite; use a noiseless record instead");
  }
  const double energy = clean.y.squaredNorm();
  if (!(energy > 0.0)) throw InvalidInput("SNR undefined for an all-zero measurement");
  const double variance =
      energy / (static_cast<double>(clean.y.size()) * std::pow(10.0, snr_db / 10.0));
  Rng rng(derive_seed(seed, "measurement-noise"));
  std::normal_distribution<double> normal(0.0, std::sqrt(variance));
  Vector noise(clean.y.size());
  for (Eigen::Index i = 0; i < noise.size(); ++i) noise[i] = normal(rng);
  return noise;
}

MeasurementRecord add_noise_snr(const MeasurementRecord& record, double snr_db,
                                std::uint64_t seed) {
  if (record.noise) throw InvalidInput("record already carries noise");
  MeasurementRecord noisy = record;
  noisy.y += regenerate_noise(record, snr_db, seed);
  noisy.noise = NoiseInfo{snr_db, seed};
  return noisy;
}

MeasurementOperator operator_for(const MeasurementRecord& record) {
  if (!record.regenerable) throw InvalidInput("record was taken with an explicit matrix");
  return MeasurementOperator::gaussian(record.measurements, record.pixels, record.operator_seed);
}

// ---------------------------------------------------------------------------

namespace {
using nlohmann::json;

[[noreturn]] void malformed(const std::string& what) {
  throw MalformedFile("measurement record: " + what);
}
}  // namespace

std::string serialize_record(const MeasurementRecord& record) {
  if (!record.regenerable) {
    throw InvalidInput("cannot serialize a record taken with an explicit matrix");
  }
  json doc;
  doc["format_version"] = kRecordFormatVersion;
  doc["operator"] = {{"kind", "gaussian"},
                     {"seed", record.operator_seed},
                     {"measurements", record.measurements},
                     {"pixels", record.pixels},
                     {"entry_variance", "1/M"}};
  doc["image"] = {{"rows", record.image_rows}, {"cols", record.image_cols}};
  doc["noise"] = record.noise ? json{{"snr_db", record.noise->snr_db}, {"seed", record.noise->seed}}
                              : json(nullptr);
  doc["true_image"] = record.true_image;
  doc["y"] = std::vector<double>(record.y.data(), record.y.data() + record.y.size());
  return doc.dump(1) + "\n";
}

MeasurementRecord parse_record(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text.begin(), text.end());
  } catch (const json::exception& e) {
    malformed(e.what());
  }
  try {
    if (!doc.is_object()) malformed("top level is not an object");
    const long version = doc.at("format_version").get<long>();
    if (version != kRecordFormatVersion) {
      throw VersionError("measurement record: unsupported format_version " +
                             std::to_string(version),
                         version);
    }
    MeasurementRecord r;
    const json& op = doc.at("operator");
    if (op.at("kind").get<std::string>() != "gaussian") malformed("unknown operator kind");
    r.operator_seed = op.at("seed").get<std::uint64_t>();
    r.measurements = op.at("measurements").get<Eigen::Index>();
    r.pixels = op.at("pixels").get<Eigen::Index>();
    r.image_rows = doc.at("image").at("rows").get<Eigen::Index>();
    r.image_cols = doc.at("image").at("cols").get<Eigen::Index>();
    if (r.image_rows * r.image_cols != r.pixels) malformed("image shape does not match N");
    const json& noise = doc.at("noise");
    if (!noise.is_null()) {
      r.noise = NoiseInfo{noise.at("snr_db").get<double>(), noise.at("seed").get<std::uint64_t>()};
    }
    r.true_image = doc.at("true_image").get<std::string>();
    const auto y = doc.at("y").get<std::vector<double>>();
    if (static_cast<Eigen::Index>(y.size()) != r.measurements) malformed("y length mismatch");
    r.y = Eigen::Map<const Vector>(y.data(), static_cast<Eigen::Index>(y.size()));
    return r;
  } catch (const json::exception& e) {
    malformed(e.what());
  }
}

void save_record(const MeasurementRecord& record, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << serialize_record(record);
  if (!out) throw IoError("write failed: " + path.string());
}

MeasurementRecord load_record(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return parse_record(buf.str());
}

}  // namespace gibbscs
