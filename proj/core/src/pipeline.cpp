#include "gibbscs/pipeline.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "gibbscs/errors.hpp"
#include "gibbscs/evaluation.hpp"
#include "gibbscs/image.hpp"
#include "gibbscs/prior_model.hpp"
#include "gibbscs/random.hpp"
#include "gibbscs/sampler.hpp"
#include "gibbscs/sensing.hpp"
#include "gibbscs/trainer.hpp"

#ifndef GIBBSCS_DEFAULT_DATA_DIR
#define GIBBSCS_DEFAULT_DATA_DIR "data"
#endif

namespace gibbscs {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Manifest and files

std::string serialize_manifest(const RunManifest& m) {
  json doc;
  doc["format_version"] = kManifestFormatVersion;
  doc["command"] = m.command;
  doc["tool_version"] = m.tool_version;
  doc["options"] = m.options.empty() ? json::object() : json::parse(m.options);
  doc["root_seed"] = m.root_seed;
  doc["seeds"] = m.seeds;
  doc["inputs"] = m.inputs;
  doc["outputs"] = m.outputs;
  doc["facts"] = m.facts;
  doc["status"] = m.status;
  if (!m.error.empty()) doc["error"] = m.error;
  doc["wall_time_s"] = m.wall_time_s;
  return doc.dump(2) + "\n";
}

RunManifest parse_manifest(std::string_view text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::exception& e) {
    throw MalformedFile(std::string("manifest: ") + e.what());
  }
  if (!doc.is_object() || !doc.contains("format_version")) {
    throw MalformedFile("manifest: missing format_version");
  }
  const long version = doc["format_version"].get<long>();
  if (version != kManifestFormatVersion) {
    throw VersionError("manifest: unsupported format_version " + std::to_string(version), version);
  }
  try {
    RunManifest m;
    m.command = doc.at("command").get<std::string>();
    m.tool_version = doc.at("tool_version").get<std::string>();
    m.options = doc.at("options").dump();
    m.root_seed = doc.at("root_seed").get<std::uint64_t>();
    m.seeds = doc.at("seeds").get<std::map<std::string, std::uint64_t>>();
    m.inputs = doc.at("inputs").get<std::map<std::string, std::string>>();
    m.outputs = doc.at("outputs").get<std::map<std::string, std::string>>();
    m.facts = doc.at("facts").get<std::map<std::string, std::string>>();
    m.status = doc.at("status").get<std::string>();
    m.error = doc.value("error", std::string());
    m.wall_time_s = doc.at("wall_time_s").get<double>();
    return m;
  } catch (const json::exception& e) {
    throw MalformedFile(std::string("manifest: ") + e.what());
  }
}

namespace {

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace

void save_manifest(const RunManifest& manifest, const fs::path& path) {
  write_text(path, serialize_manifest(manifest));
}

RunManifest load_manifest(const fs::path& path) { return parse_manifest(read_text(path)); }

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::array<char, 1 << 16> buf;
  while (in) {
    in.read(buf.data(), buf.size());
    EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(in.gcount()));
  }
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest;
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest.data(), &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

fs::path data_directory() {
  if (const char* env = std::getenv("GIBBSCS_DATA"); env && *env) return env;
  return GIBBSCS_DEFAULT_DATA_DIR;
}

// ---------------------------------------------------------------------------
// Options

namespace {

struct ExtractOptions {
  std::string images;
  int patch_size = 20;
  int stride = 0;  // 0: derived from target, else patch_size
  long target = 0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ExtractOptions, images, patch_size, stride, target)

struct TrainOptions {
  std::string dataset;
  std::string preset = "bcnn1";
  std::string model;  // initial model file, overrides preset
  double lr = 0.01;
  int batch = 64;
  int cd_steps = 1;
  int max_epochs = 20;
  double stop_threshold = 1e-5;
  bool persistent = false;
  bool no_model_selection = false;
  double holdout = 0.1;
  int kld_bins = 64;
  int kld_chain_steps = 20;
  int kld_max_patches = 64;
  std::string solver = "auto";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainOptions, dataset, preset, model, lr, batch,
                                                cd_steps, max_epochs, stop_threshold, persistent,
                                                no_model_selection, holdout, kld_bins,
                                                kld_chain_steps, kld_max_patches, solver)

struct SampleOptions {
  std::string preset;
  std::string model;
  int rows = 32;
  int cols = 32;
  int sweeps = 50;
  int count = 4;
  std::string solver = "auto";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SampleOptions, preset, model, rows, cols, sweeps,
                                                count, solver)

struct MeasureOptions {
  std::string images;
  std::vector<double> mr = {0.25};
  std::vector<std::string> snr_db = {"noiseless"};
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MeasureOptions, images, mr, snr_db)

struct RestoreOptions {
  std::string preset;
  std::string model;
  std::string images;
  std::string measurements;
  std::vector<double> mr = {0.25};
  std::vector<std::string> snr_db = {"noiseless"};
  int iterations = 200;
  int burn_in = 100;
  bool last_sample = false;
  bool random_init = false;
  std::string solver = "auto";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(RestoreOptions, preset, model, images,
                                                measurements, mr, snr_db, iterations, burn_in,
                                                last_sample, random_init, solver)

struct BaselineOptions {
  std::string images;
  std::string measurements;
  std::vector<double> mr = {0.25};
  std::vector<std::string> snr_db = {"noiseless"};
  std::vector<double> lambda = {1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1};
  int ista_iters = 500;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(BaselineOptions, images, measurements, mr, snr_db,
                                                lambda, ista_iters)

struct EvalOptions {
  std::string restored;
  std::string reference;
  std::string method = "restored";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalOptions, restored, reference, method)

struct KldOptions {
  std::string preset;
  std::string model;
  std::string dataset;
  int chain_steps = 20;
  int max_patches = 0;  // 0: all
  int bins = 64;
  std::string solver = "auto";
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(KldOptions, preset, model, dataset, chain_steps,
                                                max_patches, bins, solver)

struct SpectrumOptions {
  std::vector<std::string> preset;
  std::vector<std::string> model;
  int samples = 1024;
  double half_range = 10.0;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SpectrumOptions, preset, model, samples, half_range)

// ---------------------------------------------------------------------------
// Run bookkeeping

class Run {
 public:
  Run(std::string command, json options, std::uint64_t seed, fs::path out)
      : out_(std::move(out)), start_(std::chrono::steady_clock::now()) {
    manifest_.command = std::move(command);
    options["seed"] = seed;
    options["out"] = out_.string();
    manifest_.options = options.dump();
    manifest_.root_seed = seed;
  }

  const fs::path& out() const noexcept { return out_; }
  std::uint64_t seed() const noexcept { return manifest_.root_seed; }

  void input(const fs::path& path) { manifest_.inputs[path.string()] = sha256_file(path); }
  void fact(const std::string& key, const std::string& value) { manifest_.facts[key] = value; }
  std::uint64_t derive(const std::string& stream, std::uint64_t index = 0) {
    const std::uint64_t s = derive_seed(manifest_.root_seed, stream, index);
    manifest_.seeds[index == 0 ? stream : stream + "#" + std::to_string(index)] = s;
    return s;
  }

  void begin() {
    fs::create_directories(out_);
    save_manifest(manifest_, out_ / "manifest.json");
  }

  fs::path output(const std::string& relative) {
    outputs_.insert(relative);
    const fs::path path = out_ / relative;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    return path;
  }
  void write(const std::string& relative, const std::string& text) {
    write_text(output(relative), text);
  }

  void finish() {
    for (const auto& rel : outputs_) manifest_.outputs[rel] = sha256_file(out_ / rel);
    manifest_.status = "complete";
    save_with_time();
  }
  void fail(const std::string& message) {
    manifest_.status = "failed";
    manifest_.error = message;
    if (fs::exists(out_ / "manifest.json")) save_with_time();
  }
  const RunManifest& manifest() const noexcept { return manifest_; }

 private:
  void save_with_time() {
    manifest_.wall_time_s =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    save_manifest(manifest_, out_ / "manifest.json");
  }

  RunManifest manifest_;
  fs::path out_;
  std::chrono::steady_clock::time_point start_;
  std::set<std::string> outputs_;
};

std::string format_number(double v) {
  std::ostringstream s;
  s << std::setprecision(15) << v;
  return s.str();
}

SolverOptions parse_solver(const std::string& name, Eigen::Index unknowns) {
  if (name == "auto") return SolverOptions::for_unknowns(unknowns);
  SolverOptions o;
  if (name == "cholesky") {
    o.method = SolverOptions::Method::kDenseCholesky;
  } else if (name == "cg") {
    o.method = SolverOptions::Method::kConjugateGradient;
  } else {
    throw InvalidInput("unknown solver '" + name + "' (expected auto, cholesky or cg)");
  }
  return o;
}

void require_dir(const std::string& path, const char* flag) {
  if (path.empty()) throw InvalidInput(std::string(flag) + " is required");
  if (!fs::is_directory(path)) throw IoError(std::string(flag) + ": not a directory: " + path);
}

void validate_ratios(const std::vector<double>& mrs) {
  if (mrs.empty()) throw InvalidInput("--mr: at least one ratio required");
  for (double mr : mrs) {
    if (!(mr > 0.0 && mr <= 1.0)) {
      throw InvalidInput("--mr: measurement ratio " + format_number(mr) + " is outside (0, 1]");
    }
  }
}

// Empty optional for noiseless.
std::vector<std::optional<double>> parse_snrs(const std::vector<std::string>& values) {
  if (values.empty()) throw InvalidInput("--snr-db: at least one level required");
  std::vector<std::optional<double>> out;
  for (const auto& v : values) {
    if (v == "noiseless" || v == "none" || v == "inf") {
      out.emplace_back();
      continue;
    }
    size_t used = 0;
    double snr = 0.0;
    try {
      snr = std::stod(v, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != v.size() || !std::isfinite(snr)) {
      throw InvalidInput("--snr-db: '" + v + "' is neither a number nor 'noiseless'");
    }
    out.emplace_back(snr);
  }
  return out;
}

std::string snr_label(const std::optional<double>& snr) {
  return snr ? "snr" + format_number(*snr) : std::string("noiseless");
}

std::string group_label(double mr, const std::optional<double>& snr) {
  return "mr" + format_number(mr) + "_" + snr_label(snr);
}

PriorModel resolve_model(Run& run, const std::string& preset, const std::string& model_path) {
  fs::path path;
  if (!model_path.empty()) {
    path = model_path;
  } else if (!preset.empty()) {
    path = data_directory() / "models" / (preset + ".json");
    if (!fs::exists(path)) {
      throw IoError("no trained model for preset '" + preset + "' at " + path.string());
    }
  } else {
    throw InvalidInput("either --model or --preset is required");
  }
  run.input(path);
  return load_model(path);
}

struct LoadedImage {
  std::string id;    // file name
  std::string stem;
  Image image;
};

std::vector<LoadedImage> load_directory(Run* run, const fs::path& dir) {
  const auto paths = list_images(dir);
  if (paths.empty()) throw IoError("no .pgm or .png images in " + dir.string());
  std::vector<LoadedImage> images;
  std::vector<std::string> failures;
  for (const auto& p : paths) {
    try {
      images.push_back({p.filename().string(), p.stem().string(), read_image(p)});
      if (run) run->input(p);
    } catch (const IoError& e) {
      failures.push_back(p.string() + " (" + e.what() + ")");
    }
  }
  if (!failures.empty()) {
    std::string msg = "unreadable images:";
    for (const auto& f : failures) msg += "\n  " + f;
    throw IoError(msg);
  }
  return images;
}

PatchDataset load_dataset_dir(Run& run, const std::string& dir) {
  require_dir(dir, "--dataset");
  const fs::path bin = fs::path(dir) / "patches.bin";
  const fs::path csv = fs::path(dir) / "patches.csv";
  run.input(bin);
  run.input(csv);
  return load_dataset(bin, csv);
}

// One measurement to restore: either generated from a ground-truth image or
// loaded from a record file.
struct MeasurementTask {
  std::string stem;
  std::string group;
  double mr = 0.0;
  std::optional<double> snr;
  MeasurementRecord record;
  std::optional<Image> truth;
  std::uint64_t noise_seed = 0;
};

using TaskVisitor = std::function<void(const MeasurementTask&, const MeasurementOperator&)>;

void for_each_generated(Run& run, const std::vector<LoadedImage>& images,
                        const std::vector<double>& mrs,
                        const std::vector<std::optional<double>>& snrs, const TaskVisitor& visit) {
  for (const auto& img : images) {
    const Eigen::Index n = img.image.size();
    for (double mr : mrs) {
      const Eigen::Index m = measurements_for_ratio(mr, n);
      const MeasurementOperator op =
          MeasurementOperator::gaussian(m, n, run.derive("operator:" + img.stem, static_cast<std::uint64_t>(m)));
      MeasurementRecord clean = measure(op, img.image);
      clean.image_rows = img.image.rows();
      clean.image_cols = img.image.cols();
      run.fact("measurements:" + img.stem + ":mr" + format_number(mr), std::to_string(m));
      for (const auto& snr : snrs) {
        MeasurementTask task{img.stem, group_label(mr, snr), mr, snr, clean, img.image, 0};
        if (snr) {
          task.noise_seed = run.derive("noise:" + img.stem + ":" + group_label(mr, snr));
          task.record = add_noise_snr(clean, *snr, task.noise_seed);
        }
        visit(task, op);
      }
    }
  }
}

void for_each_recorded(Run& run, const fs::path& dir, const TaskVisitor& visit) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".json") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no measurement records in " + dir.string());
  for (const auto& f : files) {
    run.input(f);
    MeasurementTask task;
    task.stem = f.stem().string();
    task.record = load_record(f);
    task.mr = static_cast<double>(task.record.measurements) / static_cast<double>(task.record.pixels);
    if (task.record.noise) {
      task.snr = task.record.noise->snr_db;
      task.noise_seed = task.record.noise->seed;
    }
    task.group = group_label(task.mr, task.snr);
    if (!task.record.true_image.empty()) {
      fs::path truth = task.record.true_image;
      if (truth.is_relative()) truth = f.parent_path() / truth;
      task.truth = read_image(truth);
      run.input(truth);
    }
    visit(task, operator_for(task.record));
  }
}

void for_each_task(Run& run, const std::string& images_dir, const std::string& records_dir,
                   const std::vector<double>& mrs, const std::vector<std::optional<double>>& snrs,
                   const TaskVisitor& visit) {
  if (!records_dir.empty()) {
    for_each_recorded(run, records_dir, visit);
  } else {
    for_each_generated(run, load_directory(&run, images_dir), mrs, snrs, visit);
  }
}

void check_sources(const std::string& images, const std::string& measurements) {
  if (images.empty() == measurements.empty()) {
    throw InvalidInput("exactly one of --images or --measurements is required");
  }
  require_dir(images.empty() ? measurements : images,
              images.empty() ? "--measurements" : "--images");
}

// ---------------------------------------------------------------------------
// Commands

void cmd_extract(Run& run, const ExtractOptions& o, std::ostream& out) {
  require_dir(o.images, "--images");
  if (o.patch_size < 1) throw InvalidInput("--patch-size must be positive");
  if (o.stride < 0 || o.target < 0) throw InvalidInput("--stride and --target must be >= 0");
  const auto images = load_directory(&run, o.images);
  run.begin();
  std::vector<Image> pixels;
  std::vector<std::string> ids;
  std::vector<std::pair<Eigen::Index, Eigen::Index>> sizes;
  for (const auto& img : images) {
    pixels.push_back(img.image);
    ids.push_back(img.id);
    sizes.emplace_back(img.image.rows(), img.image.cols());
  }
  int stride = o.stride;
  if (stride == 0) stride = o.target > 0 ? stride_for_target(sizes, o.patch_size, o.target) : o.patch_size;
  const PatchDataset ds = extract_patches(pixels, ids, o.patch_size, stride);
  if (ds.size() == 0) throw InvalidInput("no image is large enough for a " + std::to_string(o.patch_size) + " patch");
  save_dataset(ds, run.output("patches.bin"), run.output("patches.csv"));
  run.fact("patches", std::to_string(ds.size()));
  run.fact("stride", std::to_string(stride));
  for (const auto& w : ds.warnings) out << "warning: skipped " << w << '\n';
  out << "extracted " << ds.size() << " patches (stride " << stride << ")\n";
}

void cmd_train(Run& run, const TrainOptions& o, std::ostream& out, std::ostream& err) {
  TrainingConfig config;
  config.learning_rate = o.lr;
  config.batch_size = o.batch;
  config.cd_steps = o.cd_steps;
  config.max_epochs = o.max_epochs;
  config.stop_threshold = o.stop_threshold;
  config.persistent = o.persistent;
  config.model_selection = !o.no_model_selection;
  config.holdout_fraction = o.holdout;
  config.kld_bins = o.kld_bins;
  config.kld_chain_steps = o.kld_chain_steps;
  config.kld_max_patches = o.kld_max_patches;
  const PatchDataset dataset = load_dataset_dir(run, o.dataset);
  config.solver = parse_solver(o.solver, static_cast<Eigen::Index>(dataset.patch_size) * dataset.patch_size);
  config.seed = run.derive("training");
  config.validate();

  PriorModel initial = [&] {
    if (!o.model.empty()) {
      run.input(o.model);
      return load_model(o.model);
    }
    return preset_model(o.preset, run.derive("preset-init"));
  }();
  run.begin();
  run.fact("trainable_parameters", std::to_string(initial.trainable_parameter_count()));
  run.fact("patches", std::to_string(dataset.size()));

  const TrainingResult result = train(initial, dataset, config, [&](const EpochRecord& e) {
    err << "epoch " << e.epoch << ": change " << e.parameter_change << ", data "
        << e.data_exponent << ", model " << e.model_exponent << ", kld " << e.heldout_kld
        << " (" << std::fixed << std::setprecision(1) << e.wall_time_s << " s)\n"
        << std::defaultfloat << std::setprecision(6);
  });
  save_model(result.model, run.output("model.json"));
  run.write("trace.csv", result.trace.to_csv());
  run.fact("selected_epoch", std::to_string(result.selected_epoch));
  out << "trained " << initial.trainable_parameter_count() << " parameters; selected epoch "
      << result.selected_epoch << '\n';
}

void cmd_sample(Run& run, const SampleOptions& o, std::ostream& out) {
  if (o.rows < 1 || o.cols < 1 || o.count < 1 || o.sweeps < 1) {
    throw InvalidInput("--rows, --cols, --count and --sweeps must be positive");
  }
  const SolverOptions solver = parse_solver(o.solver, static_cast<Eigen::Index>(o.rows) * o.cols);
  const PriorModel model = resolve_model(run, o.preset, o.model);
  model.check_image(Image::Zero(o.rows, o.cols));
  run.begin();
  Rng init_rng = make_rng(run.derive("sample-init"), "init");
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<Image> init;
  for (int i = 0; i < o.count; ++i) {
    Image x(o.rows, o.cols);
    for (Eigen::Index k = 0; k < x.size(); ++k) x.data()[k] = uniform(init_rng);
    init.push_back(std::move(x));
  }
  Rng chain_rng = make_rng(run.derive("sample-chain"), "chain");
  const std::vector<Image> samples = run_prior_chain(model, init, o.sweeps, solver, chain_rng);
  std::ostringstream raw;
  raw << std::setprecision(17);
  for (size_t i = 0; i < samples.size(); ++i) {
    const Image& s = samples[i];
    std::ostringstream name;
    name << "sample_" << std::setw(2) << std::setfill('0') << i;
    const double lo = s.minCoeff();
    const double span = std::max(s.maxCoeff() - lo, 1e-12);
    write_image(run.output(name.str() + ".pgm"), ((s.array() - lo) / span).matrix());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
      for (Eigen::Index c = 0; c < s.cols(); ++c) raw << (c ? "," : "") << s(r, c);
      raw << '\n';
    }
  }
  run.write("samples.txt", raw.str());
  out << "drew " << samples.size() << " samples after " << o.sweeps << " sweeps\n";
}

void cmd_measure(Run& run, const MeasureOptions& o, std::ostream& out) {
  validate_ratios(o.mr);
  const auto snrs = parse_snrs(o.snr_db);
  require_dir(o.images, "--images");
  const auto images = load_directory(&run, o.images);
  run.begin();
  long written = 0;
  for_each_generated(run, images, o.mr, snrs, [&](const MeasurementTask& t, const MeasurementOperator&) {
    MeasurementRecord rec = t.record;
    rec.true_image = fs::absolute(fs::path(o.images) / (t.stem + ".pgm")).string();
    for (const auto& img : images) {
      if (img.stem == t.stem) rec.true_image = fs::absolute(fs::path(o.images) / img.id).string();
    }
    save_record(rec, run.output("measurements/" + t.group + "/" + t.stem + ".json"));
    ++written;
  });
  out << "wrote " << written << " measurement records\n";
}

void cmd_restore(Run& run, const RestoreOptions& o, std::ostream& out, std::ostream& err) {
  if (o.measurements.empty()) validate_ratios(o.mr);
  const auto snrs = parse_snrs(o.snr_db);
  check_sources(o.images, o.measurements);
  ChainOptions chain;
  chain.iterations = o.iterations;
  chain.burn_in = o.burn_in;
  chain.last_sample = o.last_sample;
  chain.random_init = o.random_init;
  chain.validate();
  parse_solver(o.solver, 1);
  const PriorModel model = resolve_model(run, o.preset, o.model);
  run.begin();

  std::vector<ReportRow> rows;
  std::map<std::string, std::string> traces;
  for_each_task(run, o.images, o.measurements, o.mr, snrs, [&](const MeasurementTask& t, const MeasurementOperator& op) {
    const Eigen::Index r = t.record.image_rows;
    const Eigen::Index c = t.record.image_cols;
    ChainOptions opts = chain;
    opts.solver = parse_solver(o.solver, r * c);
    const std::uint64_t chain_seed = run.derive("chain:" + t.stem + ":" + t.group);
    Rng rng(chain_seed);
    const auto start = std::chrono::steady_clock::now();
    const RestorationResult res = run_restoration_chain(model, op.matrix(), t.record.y, r, c, opts, rng);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_image(run.output("restored/" + t.group + "/" + t.stem + ".pgm"), res.restored);
    run.write("traces/" + t.group + "/" + t.stem + ".csv", res.diagnostics.to_csv());
    run.fact("runtime_s:" + t.group + "/" + t.stem, format_number(seconds));
    if (t.truth) {
      ReportRow row{t.stem, "bcnn", t.mr, t.snr, psnr(*t.truth, res.restored), ssim(*t.truth, res.restored),
                    seconds, t.record.operator_seed, t.noise_seed, chain_seed};
      err << t.group << '/' << t.stem << ": " << std::fixed << std::setprecision(2) << row.psnr_db
          << " dB, " << std::setprecision(1) << seconds << " s\n" << std::defaultfloat << std::setprecision(6);
      rows.push_back(row);
    }
  });
  const RestorationReport report = build_report(std::move(rows));
  run.write("report.csv", report.to_csv());
  run.write("summary.json", report.summary_json());
  out << "restored " << report.aggregate.count << " images; mean PSNR " << report.aggregate.mean_psnr_db
      << " dB, mean SSIM " << report.aggregate.mean_ssim << '\n';
}

void cmd_baseline(Run& run, const BaselineOptions& o, std::ostream& out) {
  if (o.measurements.empty()) validate_ratios(o.mr);
  const auto snrs = parse_snrs(o.snr_db);
  check_sources(o.images, o.measurements);
  if (o.lambda.empty()) throw InvalidInput("--lambda: at least one value required");
  for (double l : o.lambda) {
    if (!(l >= 0.0) || !std::isfinite(l)) throw InvalidInput("--lambda must be finite and >= 0");
  }
  if (o.ista_iters < 1) throw InvalidInput("--ista-iters must be positive");
  run.begin();

  std::vector<ReportRow> rows;
  for_each_task(run, o.images, o.measurements, o.mr, snrs, [&](const MeasurementTask& t, const MeasurementOperator& op) {
    const Eigen::Index r = t.record.image_rows;
    const Eigen::Index c = t.record.image_cols;
    const auto start = std::chrono::steady_clock::now();
    // With a reference, the grid value with the best PSNR is kept.
    std::optional<Image> best;
    double best_psnr = -std::numeric_limits<double>::infinity();
    double best_lambda = o.lambda.front();
    for (double lambda : o.lambda) {
      Image x = unvec(lasso_ista(op.matrix(), t.record.y, lambda, o.ista_iters), r, c);
      const double score = t.truth ? psnr(*t.truth, x) : 0.0;
      if (!best || score > best_psnr) {
        best = std::move(x);
        best_psnr = score;
        best_lambda = lambda;
      }
      if (!t.truth) break;
    }
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    write_image(run.output("restored/" + t.group + "/" + t.stem + ".pgm"), *best);
    run.fact("lambda:" + t.group + "/" + t.stem, format_number(best_lambda));
    run.fact("runtime_s:" + t.group + "/" + t.stem, format_number(seconds));
    if (t.truth) {
      rows.push_back({t.stem, "lasso", t.mr, t.snr, best_psnr, ssim(*t.truth, *best), seconds,
                      t.record.operator_seed, t.noise_seed, 0});
    }
  });
  const RestorationReport report = build_report(std::move(rows));
  run.write("report.csv", report.to_csv());
  run.write("summary.json", report.summary_json());
  out << "baseline on " << report.aggregate.count << " images; mean PSNR "
      << report.aggregate.mean_psnr_db << " dB\n";
}

void cmd_eval(Run& run, const EvalOptions& o, std::ostream& out) {
  require_dir(o.restored, "--restored");
  require_dir(o.reference, "--reference");
  const auto restored = list_images(o.restored);
  const auto reference = list_images(o.reference);
  std::set<std::string> a, b;
  for (const auto& p : restored) a.insert(p.filename().string());
  for (const auto& p : reference) b.insert(p.filename().string());
  if (a.empty()) throw IoError("no images in " + o.restored);
  if (a != b) {
    std::string msg = "image names differ between directories:";
    for (const auto& n : a) {
      if (!b.count(n)) msg += "\n  only in " + o.restored + ": " + n;
    }
    for (const auto& n : b) {
      if (!a.count(n)) msg += "\n  only in " + o.reference + ": " + n;
    }
    throw InvalidInput(msg);
  }
  for (const auto& p : restored) run.input(p);
  for (const auto& p : reference) run.input(p);
  run.begin();
  std::vector<ReportRow> rows;
  for (size_t i = 0; i < restored.size(); ++i) {
    const Image test = read_image(restored[i]);
    const Image ref = read_image(reference[i]);
    if (test.rows() != ref.rows() || test.cols() != ref.cols()) {
      throw InvalidInput("size mismatch for " + restored[i].filename().string());
    }
    rows.push_back({restored[i].stem().string(), o.method, 0.0, std::nullopt, psnr(ref, test),
                    ssim(ref, test), 0.0, 0, 0, 0});
  }
  const RestorationReport report = build_report(std::move(rows));
  run.write("report.csv", report.to_csv());
  run.write("summary.json", report.summary_json());
  out << "evaluated " << report.aggregate.count << " pairs; mean PSNR "
      << report.aggregate.mean_psnr_db << " dB, mean SSIM " << report.aggregate.mean_ssim << '\n';
}

void cmd_kld(Run& run, const KldOptions& o, std::ostream& out) {
  if (o.chain_steps < 1 || o.bins < 1 || o.max_patches < 0) {
    throw InvalidInput("--chain-steps and --bins must be positive, --max-patches >= 0");
  }
  const PriorModel model = resolve_model(run, o.preset, o.model);
  const PatchDataset dataset = load_dataset_dir(run, o.dataset);
  const SolverOptions solver = parse_solver(o.solver, static_cast<Eigen::Index>(dataset.patch_size) * dataset.patch_size);
  run.begin();
  std::vector<size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), size_t{0});
  if (o.max_patches > 0 && static_cast<size_t>(o.max_patches) < order.size()) {
    Rng pick(run.derive("kld-subset"));
    std::shuffle(order.begin(), order.end(), pick);
    order.resize(static_cast<size_t>(o.max_patches));
    std::sort(order.begin(), order.end());
  }
  std::vector<Image> patches;
  for (size_t i : order) patches.push_back(dataset.patches[i]);
  Rng rng(run.derive("kld-chain"));
  const KldEvaluation e = evaluate_model_kld(model, patches, o.bins, o.chain_steps, solver, rng);
  json doc;
  doc["kld_nats"] = e.kld;
  doc["floored_bins"] = e.floored_bins;
  doc["half_range"] = e.half_range;
  doc["patches"] = patches.size();
  doc["chain_steps"] = o.chain_steps;
  doc["bins"] = o.bins;
  run.write("kld.json", doc.dump(2) + "\n");
  run.write("data_histogram.txt", e.data.to_text());
  run.write("model_histogram.txt", e.model.to_text());
  out << "KLD " << e.kld << " nats over " << patches.size() << " patches\n";
}

std::string spectrum_text(const std::vector<double>& mag) {
  std::ostringstream s;
  s << std::setprecision(17) << "bin,magnitude\n";
  for (size_t k = 0; k < mag.size(); ++k) s << k << ',' << mag[k] << '\n';
  return s.str();
}

void cmd_spectrum(Run& run, const SpectrumOptions& o, std::ostream& out) {
  if (o.samples < 64) throw InvalidInput("--samples must be at least 64");
  if (!(o.half_range > 0.0) || !std::isfinite(o.half_range)) throw InvalidInput("--half-range must be positive");
  std::vector<std::pair<std::string, PriorModel>> models;
  for (const auto& p : o.preset) models.emplace_back(p, resolve_model(run, p, ""));
  for (const auto& m : o.model) models.emplace_back(fs::path(m).stem().string(), resolve_model(run, "", m));
  run.begin();

  json doc;
  const auto relu = activation_spectrum(ActivationFunction::relu(), o.samples, o.half_range);
  const auto arctan = activation_spectrum(ActivationFunction::arctan(), o.samples, o.half_range);
  run.write("relu.txt", spectrum_text(relu));
  run.write("arctan.txt", spectrum_text(arctan));
  const double relu_hb = high_band_magnitude(relu);
  doc["relu"] = relu_hb;
  doc["arctan"] = high_band_magnitude(arctan);
  bool relu_highest = relu_hb > doc["arctan"].get<double>();
  doc["gmm"] = json::array();
  for (const auto& [name, model] : models) {
    for (int m = 0; m < model.num_filters(); ++m) {
      const auto spec = activation_spectrum(ActivationFunction::gmm(model, m), o.samples, o.half_range);
      run.write("gmm/" + name + "_filter" + std::to_string(m) + ".txt", spectrum_text(spec));
      const double hb = high_band_magnitude(spec);
      relu_highest = relu_highest && relu_hb > hb;
      doc["gmm"].push_back({{"model", name}, {"filter", m}, {"high_band", hb}});
    }
  }
  doc["samples"] = o.samples;
  doc["half_range"] = o.half_range;
  doc["relu_highest"] = relu_highest;
  run.write("spectrum.json", doc.dump(2) + "\n");
  out << "high-band magnitude: relu " << relu_hb << ", arctan " << doc["arctan"].get<double>()
      << "; relu highest: " << (relu_highest ? "yes" : "no") << '\n';
}

// ---------------------------------------------------------------------------
// Dispatch

struct AllOptions {
  std::uint64_t seed = 1;
  std::string out;
  ExtractOptions extract;
  TrainOptions train;
  SampleOptions sample;
  MeasureOptions measure;
  RestoreOptions restore;
  BaselineOptions baseline;
  EvalOptions eval;
  KldOptions kld;
  SpectrumOptions spectrum;
};

void apply_json(AllOptions& all, const json& doc) {
  if (!doc.is_object()) throw InvalidInput("config must be a JSON object");
  try {
    all.seed = doc.value("seed", all.seed);
    all.out = doc.value("out", all.out);
    // Flat keys; each command picks the ones it knows.
    all.extract = doc.get<ExtractOptions>();
    all.train = doc.get<TrainOptions>();
    all.sample = doc.get<SampleOptions>();
    all.measure = doc.get<MeasureOptions>();
    all.restore = doc.get<RestoreOptions>();
    all.baseline = doc.get<BaselineOptions>();
    all.eval = doc.get<EvalOptions>();
    all.kld = doc.get<KldOptions>();
    // spectrum takes lists where the other commands take one model
    json listed = doc;
    for (const char* key : {"preset", "model"}) {
      if (listed.contains(key) && listed[key].is_string()) listed[key] = json::array({listed[key]});
    }
    all.spectrum = listed.get<SpectrumOptions>();
  } catch (const json::exception& e) {
    throw InvalidInput(std::string("config: ") + e.what());
  }
}

// Options recorded in a manifest belong to one command only.
void apply_command_json(AllOptions& all, const std::string& command, const json& doc) {
  try {
    if (command == "extract") all.extract = doc.get<ExtractOptions>();
    else if (command == "train") all.train = doc.get<TrainOptions>();
    else if (command == "sample") all.sample = doc.get<SampleOptions>();
    else if (command == "measure") all.measure = doc.get<MeasureOptions>();
    else if (command == "restore") all.restore = doc.get<RestoreOptions>();
    else if (command == "baseline") all.baseline = doc.get<BaselineOptions>();
    else if (command == "eval") all.eval = doc.get<EvalOptions>();
    else if (command == "kld") all.kld = doc.get<KldOptions>();
    else if (command == "spectrum") all.spectrum = doc.get<SpectrumOptions>();
    else throw InvalidInput("unknown command '" + command + "'");
  } catch (const json::exception& e) {
    throw MalformedFile(std::string("manifest options: ") + e.what());
  }
  all.out = doc.value("out", all.out);
}

json options_json(const AllOptions& all, const std::string& command) {
  if (command == "extract") return all.extract;
  if (command == "train") return all.train;
  if (command == "sample") return all.sample;
  if (command == "measure") return all.measure;
  if (command == "restore") return all.restore;
  if (command == "baseline") return all.baseline;
  if (command == "eval") return all.eval;
  if (command == "kld") return all.kld;
  if (command == "spectrum") return all.spectrum;
  throw InvalidInput("unknown command '" + command + "'");
}

RunManifest execute(const std::string& command, const AllOptions& all, std::ostream& out,
                    std::ostream& err) {
  if (all.out.empty()) throw InvalidInput("--out is required");
  Run run(command, options_json(all, command), all.seed, all.out);
  try {
    if (command == "extract") cmd_extract(run, all.extract, out);
    else if (command == "train") cmd_train(run, all.train, out, err);
    else if (command == "sample") cmd_sample(run, all.sample, out);
    else if (command == "measure") cmd_measure(run, all.measure, out);
    else if (command == "restore") cmd_restore(run, all.restore, out, err);
    else if (command == "baseline") cmd_baseline(run, all.baseline, out);
    else if (command == "eval") cmd_eval(run, all.eval, out);
    else if (command == "kld") cmd_kld(run, all.kld, out);
    else if (command == "spectrum") cmd_spectrum(run, all.spectrum, out);
  } catch (const std::exception& e) {
    run.fail(e.what());
    throw;
  }
  run.finish();
  return run.manifest();
}

int replay(const fs::path& manifest_path, const std::string& out_override, std::ostream& out,
           std::ostream& err) {
  const RunManifest original = load_manifest(manifest_path);
  if (original.status != "complete") {
    throw InvalidInput("cannot replay a run with status '" + original.status + "'");
  }
  AllOptions all;
  apply_command_json(all, original.command, json::parse(original.options));
  all.seed = original.root_seed;
  all.out = out_override.empty() ? all.out + "-replay" : out_override;
  if (fs::weakly_canonical(all.out) == fs::weakly_canonical(manifest_path.parent_path())) {
    throw InvalidInput("replay output directory must differ from the original");
  }
  const RunManifest again = execute(original.command, all, out, err);
  int mismatches = 0;
  for (const auto& [path, sum] : original.outputs) {
    const auto it = again.outputs.find(path);
    if (it == again.outputs.end()) {
      out << "missing  " << path << '\n';
      ++mismatches;
    } else if (it->second != sum) {
      out << "differs  " << path << '\n';
      ++mismatches;
    }
  }
  for (const auto& [path, sum] : again.outputs) {
    if (!original.outputs.count(path)) {
      out << "extra    " << path << '\n';
      ++mismatches;
    }
  }
  out << "replay of " << original.command << ": " << original.outputs.size() << " outputs, "
      << mismatches << " mismatches\n";
  return mismatches == 0 ? 0 : 1;
}

std::optional<std::string> find_config(const std::vector<std::string>& args) {
  for (size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return std::nullopt;
}

void add_solver(CLI::App* cmd, std::string& solver) {
  cmd->add_option("--solver", solver, "Linear solver")
      ->check(CLI::IsMember({"auto", "cholesky", "cg"}))
      ->capture_default_str();
}

void add_chain_model(CLI::App* cmd, std::string& preset, std::string& model) {
  auto* p = cmd->add_option("--preset", preset, "Shipped trained model (bcnn1..bcnn5)");
  auto* m = cmd->add_option("--model", model, "Model file");
  p->excludes(m);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  AllOptions all;
  std::string config_path;
  std::string replay_manifest;
  std::string replay_out;
  try {
    if (const auto config = find_config(args)) {
      json doc;
      try {
        doc = json::parse(read_text(*config));
      } catch (const json::exception& e) {
        throw InvalidInput("config " + *config + ": " + e.what());
      }
      apply_json(all, doc);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(exit_code_for(e));
  }

  CLI::App app{"Bayesian CNN prior for compressed-sensing image restoration", "gibbscs"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);
  app.add_option("--seed", all.seed, "Root seed")->capture_default_str();
  app.add_option("--out", all.out, "Output directory");
  app.add_option("--config", config_path, "JSON file of option defaults; flags override it");

  auto* extract = app.add_subcommand("extract", "Cut training patches from a directory of images");
  extract->add_option("--images", all.extract.images, "Image directory");
  extract->add_option("--patch-size", all.extract.patch_size)->capture_default_str();
  extract->add_option("--stride", all.extract.stride, "0 derives it from --target or uses the patch size");
  extract->add_option("--target", all.extract.target, "Desired patch count");

  auto* train = app.add_subcommand("train", "Fit a prior by contrastive divergence");
  train->add_option("--dataset", all.train.dataset, "Directory written by extract");
  auto* tp = train->add_option("--preset", all.train.preset, "Architecture to initialize")
                 ->check(CLI::IsMember(preset_names()))->capture_default_str();
  train->add_option("--model", all.train.model, "Initial model file")->excludes(tp);
  train->add_option("--lr", all.train.lr)->capture_default_str();
  train->add_option("--batch", all.train.batch)->capture_default_str();
  train->add_option("--cd-steps", all.train.cd_steps)->capture_default_str();
  train->add_option("--max-epochs", all.train.max_epochs)->capture_default_str();
  train->add_option("--stop-threshold", all.train.stop_threshold)->capture_default_str();
  train->add_flag("--persistent", all.train.persistent, "Persistent negative chains");
  train->add_flag("--no-model-selection", all.train.no_model_selection, "Keep the last epoch");
  train->add_option("--holdout", all.train.holdout)->capture_default_str();
  train->add_option("--kld-bins", all.train.kld_bins)->capture_default_str();
  train->add_option("--kld-chain-steps", all.train.kld_chain_steps)->capture_default_str();
  train->add_option("--kld-max-patches", all.train.kld_max_patches)->capture_default_str();
  add_solver(train, all.train.solver);

  auto* sample = app.add_subcommand("sample", "Draw images from a prior");
  add_chain_model(sample, all.sample.preset, all.sample.model);
  sample->add_option("--rows", all.sample.rows)->capture_default_str();
  sample->add_option("--cols", all.sample.cols)->capture_default_str();
  sample->add_option("--sweeps", all.sample.sweeps)->capture_default_str();
  sample->add_option("--count", all.sample.count)->capture_default_str();
  add_solver(sample, all.sample.solver);

  auto* measure = app.add_subcommand("measure", "Take Gaussian measurements of images");
  measure->add_option("--images", all.measure.images, "Image directory");
  measure->add_option("--mr", all.measure.mr, "Measurement ratios");
  measure->add_option("--snr-db", all.measure.snr_db, "SNR levels in dB or 'noiseless'");

  auto* restore = app.add_subcommand("restore", "Gibbs restoration from measurements");
  add_chain_model(restore, all.restore.preset, all.restore.model);
  restore->add_option("--images", all.restore.images, "Ground-truth images to measure");
  restore->add_option("--measurements", all.restore.measurements, "Directory of measurement records");
  restore->add_option("--mr", all.restore.mr, "Measurement ratios");
  restore->add_option("--snr-db", all.restore.snr_db, "SNR levels in dB or 'noiseless'");
  restore->add_option("--iterations", all.restore.iterations)->capture_default_str();
  restore->add_option("--burn-in", all.restore.burn_in)->capture_default_str();
  restore->add_flag("--last-sample", all.restore.last_sample, "Return the final sample");
  restore->add_flag("--random-init", all.restore.random_init, "Start from uniform noise");
  add_solver(restore, all.restore.solver);

  auto* baseline = app.add_subcommand("baseline", "ISTA LASSO restoration");
  baseline->add_option("--images", all.baseline.images, "Ground-truth images to measure");
  baseline->add_option("--measurements", all.baseline.measurements, "Directory of measurement records");
  baseline->add_option("--mr", all.baseline.mr, "Measurement ratios");
  baseline->add_option("--snr-db", all.baseline.snr_db, "SNR levels in dB or 'noiseless'");
  baseline->add_option("--lambda", all.baseline.lambda, "Regularization grid");
  baseline->add_option("--ista-iters", all.baseline.ista_iters)->capture_default_str();

  auto* eval = app.add_subcommand("eval", "PSNR and SSIM of restored images");
  eval->add_option("--restored", all.eval.restored, "Restored image directory");
  eval->add_option("--reference", all.eval.reference, "Reference image directory");
  eval->add_option("--method", all.eval.method)->capture_default_str();

  auto* kld_cmd = app.add_subcommand("kld", "Response-histogram KLD of a model on a dataset");
  add_chain_model(kld_cmd, all.kld.preset, all.kld.model);
  kld_cmd->add_option("--dataset", all.kld.dataset, "Directory written by extract");
  kld_cmd->add_option("--chain-steps", all.kld.chain_steps)->capture_default_str();
  kld_cmd->add_option("--max-patches", all.kld.max_patches, "0 uses every patch");
  kld_cmd->add_option("--bins", all.kld.bins)->capture_default_str();
  add_solver(kld_cmd, all.kld.solver);

  auto* spectrum = app.add_subcommand("spectrum", "Magnitude spectra of activation functions");
  spectrum->add_option("--preset", all.spectrum.preset, "Shipped trained models");
  spectrum->add_option("--model", all.spectrum.model, "Model files");
  spectrum->add_option("--samples", all.spectrum.samples)->capture_default_str();
  spectrum->add_option("--half-range", all.spectrum.half_range)->capture_default_str();

  auto* replay_cmd = app.add_subcommand("replay", "Rerun a command from its manifest and compare outputs");
  replay_cmd->add_option("manifest", replay_manifest, "manifest.json of the original run")->required();
  replay_cmd->add_option("--out", replay_out, "Output directory (default: original + '-replay')");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : static_cast<int>(ExitCode::kArgument);
  }

  try {
    const std::string command = app.get_subcommands().front()->get_name();
    if (command == "replay") return replay(replay_manifest, replay_out, out, err);
    execute(command, all, out, err);
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return static_cast<int>(exit_code_for(e));
  }
}

}  // namespace gibbscs
