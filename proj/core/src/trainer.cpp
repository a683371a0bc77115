#include "gibbscs/trainer.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "gibbscs/errors.hpp"

namespace gibbscs {

long grid_patch_count(Eigen::Index rows, Eigen::Index cols, int patch_size, int stride) {
  if (rows < patch_size || cols < patch_size) return 0;
  return ((rows - patch_size) / stride + 1) * ((cols - patch_size) / stride + 1);
}

int stride_for_target(const std::vector<std::pair<Eigen::Index, Eigen::Index>>& sizes,
                      int patch_size, long target) {
  if (patch_size < 1) throw InvalidInput("patch size must be positive");
  int best = patch_size;
  long best_gap = std::numeric_limits<long>::max();
  for (int stride = 1; stride <= patch_size; ++stride) {
    long count = 0;
    for (const auto& [r, c] : sizes) count += grid_patch_count(r, c, patch_size, stride);
    const long gap = std::labs(count - target);
    if (gap < best_gap) {
      best_gap = gap;
      best = stride;
    }
  }
  return best;
}

PatchDataset extract_patches(const std::vector<Image>& images,
                             const std::vector<std::string>& image_ids, int patch_size,
                             int stride) {
  if (patch_size < 1 || stride < 1) throw InvalidInput("patch size and stride must be positive");
  if (images.size() != image_ids.size()) throw InvalidInput("one id per image required");
  PatchDataset ds;
  ds.patch_size = patch_size;
  ds.stride = stride;
  ds.image_ids = image_ids;
  for (size_t i = 0; i < images.size(); ++i) {
    const Image& image = images[i];
    if (image.rows() < patch_size || image.cols() < patch_size) {
      ds.warnings.push_back(image_ids[i] + ": " + std::to_string(image.rows()) + "x" +
                            std::to_string(image.cols()) + " is smaller than the patch");
      continue;
    }
    for (Eigen::Index r = 0; r + patch_size <= image.rows(); r += stride) {
      for (Eigen::Index c = 0; c + patch_size <= image.cols(); c += stride) {
        ds.patches.push_back(image.block(r, c, patch_size, patch_size).cwiseMax(0.0).cwiseMin(1.0));
        ds.locations.push_back({static_cast<int>(i), static_cast<int>(r), static_cast<int>(c)});
      }
    }
  }
  return ds;
}

std::string PatchDataset::manifest_text() const {
  std::ostringstream out;
  out << "image_id,row,col\n";
  for (const auto& loc : locations) {
    out << image_ids[loc.image] << ',' << loc.row << ',' << loc.col << '\n';
  }
  for (const auto& w : warnings) out << "# skipped: " << w << '\n';
  return out.str();
}

namespace {

constexpr const char* kDatasetMagic = "GIBBSCS-PATCHES 1";

void put_le64(std::ostream& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  unsigned char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double get_le64(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

void save_dataset(const PatchDataset& dataset, const std::filesystem::path& patches_path,
                  const std::filesystem::path& manifest_path) {
  std::ofstream out(patches_path, std::ios::binary);
  if (!out) throw IoError("cannot write " + patches_path.string());
  out << kDatasetMagic << ' ' << dataset.size() << ' ' << dataset.patch_size << ' '
      << dataset.stride << '\n';
  for (const Image& p : dataset.patches) {
    for (Eigen::Index i = 0; i < p.size(); ++i) put_le64(out, p.data()[i]);
  }
  if (!out) throw IoError("write failed: " + patches_path.string());

  std::ofstream man(manifest_path, std::ios::binary);
  if (!man) throw IoError("cannot write " + manifest_path.string());
  man << dataset.manifest_text();
  if (!man) throw IoError("write failed: " + manifest_path.string());
}

PatchDataset load_dataset(const std::filesystem::path& patches_path,
                          const std::filesystem::path& manifest_path) {
  std::ifstream in(patches_path, std::ios::binary);
  if (!in) throw IoError("cannot open " + patches_path.string());
  std::string header;
  std::getline(in, header);
  std::istringstream hs(header);
  std::string magic, version;
  size_t count = 0;
  PatchDataset ds;
  hs >> magic >> version >> count >> ds.patch_size >> ds.stride;
  if (!hs || magic + " " + version != kDatasetMagic || ds.patch_size < 1) {
    throw MalformedFile("not a patch dataset: " + patches_path.string());
  }
  const size_t values = static_cast<size_t>(ds.patch_size) * ds.patch_size;
  std::vector<unsigned char> buf(values * 8);
  for (size_t i = 0; i < count; ++i) {
    in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() != static_cast<std::streamsize>(buf.size())) {
      throw MalformedFile("truncated patch dataset: " + patches_path.string());
    }
    Image p(ds.patch_size, ds.patch_size);
    for (size_t k = 0; k < values; ++k) p.data()[k] = get_le64(buf.data() + 8 * k);
    ds.patches.push_back(std::move(p));
  }

  std::ifstream man(manifest_path);
  if (!man) throw IoError("cannot open " + manifest_path.string());
  std::string line;
  std::getline(man, line);
  while (std::getline(man, line)) {
    if (line.rfind("# skipped: ", 0) == 0) {
      ds.warnings.push_back(line.substr(11));
      continue;
    }
    const auto c2 = line.rfind(',');
    const auto c1 = line.rfind(',', c2 - 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw MalformedFile("bad manifest line: " + line);
    }
    const std::string id = line.substr(0, c1);
    auto it = std::find(ds.image_ids.begin(), ds.image_ids.end(), id);
    if (it == ds.image_ids.end()) it = ds.image_ids.insert(ds.image_ids.end(), id);
    ds.locations.push_back({static_cast<int>(it - ds.image_ids.begin()),
                            std::stoi(line.substr(c1 + 1, c2 - c1 - 1)),
                            std::stoi(line.substr(c2 + 1))});
  }
  if (ds.locations.size() != ds.patches.size()) {
    throw MalformedFile("manifest lists " + std::to_string(ds.locations.size()) +
                        " patches, dataset holds " + std::to_string(ds.patches.size()));
  }
  return ds;
}

// ---------------------------------------------------------------------------

void TrainingConfig::validate() const {
  if (!(learning_rate >= 0.0) || learning_rate > 1.0) {
    throw InvalidInput("learning rate must lie in (0, 1]");
  }
  if (batch_size < 1) throw InvalidInput("batch size must be positive");
  if (cd_steps < 1) throw InvalidInput("cd steps must be >= 1");
  if (!(stop_threshold > 0.0)) throw InvalidInput("stop threshold must be positive");
  if (max_epochs < 0) throw InvalidInput("max epochs must be >= 0");
  if (!(holdout_fraction >= 0.0) || holdout_fraction >= 1.0) {
    throw InvalidInput("holdout fraction must lie in [0, 1)");
  }
  if (kld_bins < 1 || kld_chain_steps < 1 || kld_max_patches < 1) {
    throw InvalidInput("KLD evaluation settings must be positive");
  }
  solver.validate();
}

std::string TrainingTrace::to_csv(bool include_wall_time) const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "epoch,parameter_change,data_exponent,model_exponent,heldout_kld";
  if (include_wall_time) out << ",wall_time_s";
  out << '\n';
  for (const auto& e : epochs) {
    out << e.epoch << ',' << e.parameter_change << ',' << e.data_exponent << ','
        << e.model_exponent << ',' << e.heldout_kld;
    if (include_wall_time) out << ',' << e.wall_time_s;
    out << '\n';
  }
  return out.str();
}

namespace {

struct MeanGradient {
  ExponentGradients grad;
  double exponent;
};

MeanGradient mean_gradient(const PriorModel& model, const std::vector<Image>& images) {
  MeanGradient out{{TapMatrix::Zero(model.num_filters(), model.filters().taps_per_filter()),
                    MixtureWeights::Table::Zero(model.num_filters(), model.num_scales())},
                   0.0};
  for (const Image& x : images) {
    const ExponentGradients g = exponent_gradients(model, x);
    out.grad.taps += g.taps;
    out.grad.logits += g.logits;
    out.exponent += log_prior_exponent(model, x);
  }
  const double n = static_cast<double>(images.size());
  out.grad.taps /= n;
  out.grad.logits /= n;
  out.exponent /= n;
  return out;
}

// Squared L2 distance between two models' taps and log-weights.
double parameter_distance_sq(const PriorModel& a, const PriorModel& b) {
  return (a.filters().taps() - b.filters().taps()).squaredNorm() +
         (a.weights().logits() - b.weights().logits()).squaredNorm();
}

}  // namespace

CdStep cd_step(const PriorModel& model, const std::vector<Image>& data,
               const std::vector<Image>& negatives, double learning_rate) {
  if (data.empty() || negatives.empty()) throw InvalidInput("cd_update: empty batch");
  const MeanGradient pos = mean_gradient(model, data);
  const MeanGradient neg = mean_gradient(model, negatives);

  TapMatrix tap_step = learning_rate * (neg.grad.taps - pos.grad.taps);
  // Filters stay zero-mean, so only the zero-mean part of the step is applied.
  // A single-tap filter has no zero-mean part and is left as is.
  const bool centre = tap_step.cols() > 1;
  if (centre) {
    for (Eigen::Index m = 0; m < tap_step.rows(); ++m) tap_step.row(m).array() -= tap_step.row(m).mean();
  }
  const MixtureWeights::Table logit_step = learning_rate * (neg.grad.logits - pos.grad.logits);
  if (!tap_step.allFinite() || !logit_step.allFinite()) {
    throw NumericalError("cd_update: non-finite gradient");
  }
  if ((tap_step.array() == 0.0).all() && (logit_step.array() == 0.0).all()) {
    return CdStep{model, 0.0, pos.exponent, neg.exponent};
  }

  TapMatrix taps = model.filters().taps() - tap_step;
  if (centre) {
    for (Eigen::Index m = 0; m < taps.rows(); ++m) taps.row(m).array() -= taps.row(m).mean();
  }
  MixtureWeights::Table logits = model.weights().logits() - logit_step;
  PriorModel next(FilterBank(model.filters().footprint(), std::move(taps)), model.grid(),
                  MixtureWeights::from_logits(logits), model.preset_name());
  const double norm = std::sqrt(parameter_distance_sq(model, next));
  return CdStep{std::move(next), norm, pos.exponent, neg.exponent};
}

CdStep cd_update(const PriorModel& model, const std::vector<Image>& batch,
                 const TrainingConfig& config, Rng& rng) {
  if (batch.empty()) throw InvalidInput("cd_update: empty batch");
  const std::vector<Image> negatives =
      run_prior_chain(model, batch, config.cd_steps, config.solver, rng);
  return cd_step(model, batch, negatives, config.learning_rate);
}

KldEvaluation evaluate_model_kld(const PriorModel& model, const std::vector<Image>& patches,
                                 int bins, int chain_steps, const SolverOptions& solver,
                                 Rng& rng) {
  if (patches.empty()) throw InvalidInput("KLD evaluation: no patches");
  double half_range = response_range(model, patches, 0.999);
  if (!(half_range > 0.0)) half_range = 1e-6;
  Histogram data = response_histogram(model, patches, bins, half_range);
  const std::vector<Image> samples = run_prior_chain(model, patches, chain_steps, solver, rng);
  Histogram sampled = response_histogram(model, samples, bins, half_range);
  const KldResult r = kld(data, sampled);
  return KldEvaluation{r.nats, r.floored_bins, half_range, std::move(data), std::move(sampled)};
}

TrainingResult train(const PriorModel& initial, const PatchDataset& dataset,
                     const TrainingConfig& config, const EpochObserver& observer) {
  config.validate();
  if (dataset.patches.empty()) throw InvalidInput("train: empty dataset");
  if (config.max_epochs == 0) return TrainingResult{initial, {}, 0};

  // Deterministic held-out split.
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});
  Rng split_rng = make_rng(config.seed, "holdout-split");
  std::shuffle(order.begin(), order.end(), split_rng);
  size_t holdout = config.model_selection
                       ? static_cast<size_t>(std::floor(config.holdout_fraction * dataset.size()))
                       : 0;
  if (config.model_selection && holdout == 0) holdout = std::min<size_t>(1, dataset.size() - 1);
  std::vector<Image> heldout;
  for (size_t i = 0; i < holdout && i < static_cast<size_t>(config.kld_max_patches); ++i) {
    heldout.push_back(dataset.patches[order[i]]);
  }
  std::vector<size_t> train_idx(order.begin() + static_cast<std::ptrdiff_t>(holdout), order.end());
  if (train_idx.empty()) throw InvalidInput("train: no patches left after the held-out split");

  PriorModel model = initial;
  TrainingResult result{initial, {}, 0};
  double best_kld = std::numeric_limits<double>::infinity();
  Rng chain_rng = make_rng(config.seed, "cd-chains");
  std::vector<Image> persistent_chains;

  for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    const PriorModel epoch_start = model;
    Rng shuffle_rng = make_rng(config.seed, "epoch-shuffle", static_cast<std::uint64_t>(epoch));
    std::shuffle(train_idx.begin(), train_idx.end(), shuffle_rng);

    double data_sum = 0.0;
    double model_sum = 0.0;
    int batches = 0;
    for (size_t b = 0; b < train_idx.size(); b += static_cast<size_t>(config.batch_size)) {
      std::vector<Image> batch;
      const size_t end = std::min(train_idx.size(), b + static_cast<size_t>(config.batch_size));
      for (size_t i = b; i < end; ++i) batch.push_back(dataset.patches[train_idx[i]]);

      CdStep step = [&] {
        if (!config.persistent) return cd_update(model, batch, config, chain_rng);
        if (persistent_chains.empty()) persistent_chains = batch;
        persistent_chains =
            run_prior_chain(model, persistent_chains, config.cd_steps, config.solver, chain_rng);
        return cd_step(model, batch, persistent_chains, config.learning_rate);
      }();
      model = std::move(step.model);
      data_sum += step.data_exponent;
      model_sum += step.model_exponent;
      ++batches;
    }

    EpochRecord record{epoch,
                       std::sqrt(parameter_distance_sq(epoch_start, model)),
                       data_sum / batches,
                       model_sum / batches,
                       std::numeric_limits<double>::quiet_NaN(),
                       0.0};
    if (config.model_selection) {
      Rng kld_rng = make_rng(config.seed, "heldout-kld", static_cast<std::uint64_t>(epoch));
      record.heldout_kld = evaluate_model_kld(model, heldout, config.kld_bins,
                                              config.kld_chain_steps, config.solver, kld_rng)
                               .kld;
      if (record.heldout_kld < best_kld) {
        best_kld = record.heldout_kld;
        result.model = model;
        result.selected_epoch = epoch;
      }
    } else {
      result.model = model;
      result.selected_epoch = epoch;
    }
    record.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.trace.epochs.push_back(record);
    if (observer) observer(record);
    if (record.parameter_change < config.stop_threshold) break;
  }
  return result;
}

}  // namespace gibbscs
