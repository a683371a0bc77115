#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "gibbscs/evaluation.hpp"
#include "gibbscs/image.hpp"
#include "gibbscs/prior_model.hpp"
#include "gibbscs/random.hpp"
#include "gibbscs/sampler.hpp"

namespace gibbscs {

struct PatchLocation {
  int image;  // index into PatchDataset::image_ids
  int row;
  int col;
};

struct PatchDataset {
  int patch_size = 20;
  int stride = 20;
  std::vector<Image> patches;
  std::vector<PatchLocation> locations;
  std::vector<std::string> image_ids;
  // One entry per skipped source image.
  std::vector<std::string> warnings;

  std::size_t size() const noexcept { return patches.size(); }
  // "image_id,row,col" per patch, then "# skipped: ..." lines for warnings.
  std::string manifest_text() const;
};

// Uniform grid of patch_size x patch_size crops with the given stride over
// every image, values clamped to [0,1]. Images smaller than a patch are
// skipped and noted in `warnings`.
PatchDataset extract_patches(const std::vector<Image>& images,
                             const std::vector<std::string>& image_ids, int patch_size,
                             int stride);

// Number of grid patches in one rows x cols image.
long grid_patch_count(Eigen::Index rows, Eigen::Index cols, int patch_size, int stride);

// Stride in [1, patch_size] whose total patch count is closest to `target`.
int stride_for_target(const std::vector<std::pair<Eigen::Index, Eigen::Index>>& sizes,
                      int patch_size, long target);

// Binary patch file: a text header line followed by little-endian float64 values.
void save_dataset(const PatchDataset& dataset, const std::filesystem::path& patches_path,
                  const std::filesystem::path& manifest_path);
PatchDataset load_dataset(const std::filesystem::path& patches_path,
                          const std::filesystem::path& manifest_path);

struct TrainingConfig {
  double learning_rate = 0.01;
  int batch_size = 64;
  int cd_steps = 1;
  double stop_threshold = 1e-5;
  int max_epochs = 20;
  std::uint64_t seed = 0;
  SolverOptions solver;
  // Keep negative chains alive across updates instead of restarting at data.
  bool persistent = false;
  // Return the epoch with the lowest held-out KLD rather than the last one.
  bool model_selection = true;
  double holdout_fraction = 0.1;
  int kld_bins = 64;
  int kld_chain_steps = 20;
  int kld_max_patches = 64;

  void validate() const;
};

struct EpochRecord {
  int epoch;
  double parameter_change;   // L2 norm over taps and log-weights
  double data_exponent;      // mean log_prior_exponent per data patch
  double model_exponent;     // mean log_prior_exponent per negative sample
  double heldout_kld;        // NaN when model selection is off
  double wall_time_s;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;
  std::string to_csv(bool include_wall_time = false) const;
};

struct CdStep {
  PriorModel model;
  double update_norm;
  double data_exponent;
  double model_exponent;
};

// Parameter update from explicit positive and negative samples:
// theta <- theta - lr * (<grad>_negative - <grad>_data), taps re-centred to
// zero mean, weights through normalized exponentials. A zero step returns the
// model unchanged.
CdStep cd_step(const PriorModel& model, const std::vector<Image>& data,
               const std::vector<Image>& negatives, double learning_rate);

// CD-k: negatives from cd_steps prior-chain sweeps started at the batch.
CdStep cd_update(const PriorModel& model, const std::vector<Image>& batch,
                 const TrainingConfig& config, Rng& rng);

struct KldEvaluation {
  double kld;
  int floored_bins;
  double half_range;
  Histogram data;
  Histogram model;
};

// Response histogram of `patches` against the histogram of prior-chain
// samples started from them, both under the model's own filters.
KldEvaluation evaluate_model_kld(const PriorModel& model, const std::vector<Image>& patches,
                                 int bins, int chain_steps, const SolverOptions& solver,
                                 Rng& rng);

struct TrainingResult {
  PriorModel model;
  TrainingTrace trace;
  int selected_epoch;  // 0 when the initial model is returned
};

using EpochObserver = std::function<void(const EpochRecord&)>;

TrainingResult train(const PriorModel& initial, const PatchDataset& dataset,
                     const TrainingConfig& config, const EpochObserver& observer = {});

}  // namespace gibbscs
