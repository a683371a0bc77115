#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>

#include "gibbscs/errors.hpp"
#include "gibbscs/prior_model.hpp"
#include "oracles.hpp"

using namespace gibbscs;

namespace {

PriorModel single_filter(Footprint footprint, std::vector<double> taps, std::vector<double> weights,
                         std::vector<double> scales, double base = 1.0) {
  TapMatrix t(1, static_cast<Eigen::Index>(taps.size()));
  for (size_t k = 0; k < taps.size(); ++k) t(0, static_cast<Eigen::Index>(k)) = taps[k];
  MixtureWeights::Table w(1, static_cast<Eigen::Index>(weights.size()));
  for (size_t n = 0; n < weights.size(); ++n) w(0, static_cast<Eigen::Index>(n)) = weights[n];
  return PriorModel(FilterBank(footprint, t), ScaleGrid(std::move(scales), base), MixtureWeights(w));
}

std::filesystem::path temp_file(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "gibbscs-tests";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_SUITE("prior_model") {

TEST_CASE("footprints have the documented tap counts") {
  CHECK(footprint_offsets(Footprint::kPlus5).size() == 5);
  CHECK(footprint_offsets(Footprint::kSquare3).size() == 9);
  CHECK(footprint_offsets(Footprint::kSquare5).size() == 25);
  CHECK(parse_footprint("square5") == Footprint::kSquare5);
  CHECK_THROWS_AS(parse_footprint("hex7"), InvalidInput);
}

TEST_CASE("filter bank rejects wrong tap counts and non-finite taps") {
  CHECK_THROWS_AS(FilterBank(Footprint::kSquare3, TapMatrix::Zero(2, 5)), InvalidInput);
  TapMatrix bad = TapMatrix::Zero(1, 5);
  bad(0, 2) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(FilterBank(Footprint::kPlus5, bad), InvalidInput);
}

TEST_CASE("scale grid presets and validation") {
  const ScaleGrid d1 = ScaleGrid::delta1();
  REQUIRE(d1.size() == 5);
  const double e1[] = {-7, -3, 0, 3, 7};
  for (int n = 0; n < 5; ++n) CHECK(d1.scales()[n] == std::exp(e1[n]));
  const ScaleGrid d2 = ScaleGrid::delta2();
  REQUIRE(d2.size() == 8);
  const double e2[] = {-7, -5, -3, -1, 1, 3, 5, 7};
  for (int n = 0; n < 8; ++n) CHECK(d2.scales()[n] == std::exp(e2[n]));
  CHECK(d1.variance(0) == doctest::Approx(std::exp(7.0)).epsilon(1e-14));
  CHECK_THROWS_AS(ScaleGrid({1.0, 0.5}, 1.0), InvalidInput);
  CHECK_THROWS_AS(ScaleGrid({-1.0, 0.5}, 1.0), InvalidInput);
  CHECK_THROWS_AS(ScaleGrid({1.0}, 0.0), InvalidInput);
}

TEST_CASE("mixture weights stay on the simplex") {
  MixtureWeights::Table w(1, 3);
  w << 0.5, 0.25, 0.3;
  CHECK_THROWS_AS(MixtureWeights{w}, InvalidInput);
  w << 0.5, -0.25, 0.75;
  CHECK_THROWS_AS(MixtureWeights{w}, InvalidInput);

  MixtureWeights::Table logits(2, 4);
  logits << 800.0, -3.0, 0.0, 1.0, -1e3, -1e3, -1e3, 5.0;
  const MixtureWeights mw = MixtureWeights::from_logits(logits);
  for (int m = 0; m < 2; ++m) {
    CHECK(std::abs(mw.table().row(m).sum() - 1.0) < 1e-12);
    CHECK((mw.table().row(m).array() >= 0.0).all());
  }
  const MixtureWeights back = MixtureWeights::from_logits(mw.logits());
  CHECK((back.table() - mw.table()).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("filter response: zero image and impulse") {
  std::mt19937_64 rng(1);
  const PriorModel model = oracle::random_model(Footprint::kSquare3, 2, ScaleGrid::delta1(), rng);
  CHECK(filter_response(model, Image::Zero(5, 6), 1).cwiseAbs().maxCoeff() == 0.0);

  Image delta = Image::Zero(5, 5);
  delta(0, 0) = 1.0;
  const Image r = filter_response(model, delta, 0);
  // Correlation: out(p) picks image(p + off), so the tap for offset (dr, dc)
  // appears at output position (-dr, -dc).
  const auto offsets = model.filters().offsets();
  const auto taps = model.filters().filter(0);
  for (size_t k = 0; k < offsets.size(); ++k) {
    const int rr = (5 - offsets[k].dr) % 5;
    const int cc = (5 - offsets[k].dc) % 5;
    CHECK(r(rr, cc) == taps[k]);
  }
  CHECK(r.cwiseAbs().sum() == doctest::Approx(model.filters().taps().row(0).cwiseAbs().sum()));
}

TEST_CASE("filter response matches the dense circulant matrix up to 8x8") {
  std::mt19937_64 rng(2);
  for (Footprint fp : {Footprint::kPlus5, Footprint::kSquare3, Footprint::kSquare5}) {
    for (int rows = 5; rows <= 8; ++rows) {
      for (int cols = 5; cols <= 8; ++cols) {
        const PriorModel model = oracle::random_model(fp, 1, ScaleGrid::delta1(), rng);
        const Image x = oracle::random_image(rows, cols, rng, -1, 1);
        const Matrix c = oracle::circulant(rows, cols, model.filters().offsets(), model.filters().filter(0));
        const Vector expect = c * vec(x);
        const Image got = filter_response(model, x, 0);
        CHECK((vec(got) - expect).cwiseAbs().maxCoeff() < 1e-12);
      }
    }
  }
  // 4x4 square3, the smallest shape the footprint allows.
  const PriorModel model = oracle::random_model(Footprint::kSquare3, 1, ScaleGrid::delta1(), rng);
  const Image x = oracle::random_image(4, 4, rng);
  const Matrix c = oracle::circulant(4, 4, model.filters().offsets(), model.filters().filter(0));
  CHECK((vec(filter_response(model, x, 0)) - c * vec(x)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("correlate_adjoint is the transpose of correlate") {
  std::mt19937_64 rng(3);
  const PriorModel model = oracle::random_model(Footprint::kSquare5, 1, ScaleGrid::delta1(), rng);
  const Image x = oracle::random_image(6, 7, rng, -1, 1);
  const Image y = oracle::random_image(6, 7, rng, -1, 1);
  const auto off = model.filters().offsets();
  const auto taps = model.filters().filter(0);
  const double lhs = vec(correlate(x, off, taps)).dot(vec(y));
  const double rhs = vec(x).dot(vec(correlate_adjoint(y, off, taps)));
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("images smaller than the footprint are rejected") {
  std::mt19937_64 rng(4);
  const PriorModel model = oracle::random_model(Footprint::kSquare5, 1, ScaleGrid::delta1(), rng);
  CHECK_THROWS_AS(filter_response(model, Image::Zero(4, 9), 0), InvalidInput);
  CHECK_THROWS_AS(log_prior_exponent(model, Image::Zero(9, 3)), InvalidInput);
}

TEST_CASE("gmm log activation scalar values") {
  const std::vector<double> w1 = {1.0};
  CHECK(gmm_log_activation(0.0, w1, ScaleGrid({1.0}, 1.0)) ==
        doctest::Approx(-0.918939).epsilon(1e-6));
  const std::vector<double> w2 = {0.5, 0.5};
  const ScaleGrid g2({1.0, 4.0}, 1.0);
  CHECK(gmm_log_activation(1.0, w2, g2) == doctest::Approx(-1.74311).epsilon(1e-5));
  CHECK(gmm_log_activation(1.0, w2, g2) ==
        doctest::Approx(oracle::mixture_log_density(1.0, w2, {1.0, 0.25})).epsilon(1e-14));
}

TEST_CASE("gmm log activation is even, monotone in |t| and stable for large t") {
  const ScaleGrid grid = ScaleGrid::delta2();
  const std::vector<double> w = {0.05, 0.1, 0.2, 0.15, 0.1, 0.2, 0.1, 0.1};
  double previous = gmm_log_activation(0.0, w, grid);
  for (double t = 0.01; t <= 1000.0; t *= 1.1) {
    const double v = gmm_log_activation(t, w, grid);
    CHECK(std::isfinite(v));
    CHECK(v == gmm_log_activation(-t, w, grid));
    CHECK(v <= previous);
    previous = v;
  }
  // Large |t|: the widest component dominates.
  const double t = 1000.0;
  const double widest = std::log(w[0]) - 0.5 * std::log(2 * std::numbers::pi * grid.variance(0)) -
                        0.5 * t * t / grid.variance(0);
  CHECK(gmm_log_activation(t, w, grid) == doctest::Approx(widest).epsilon(1e-12));
}

TEST_CASE("log prior exponent: zero image, direct sum and sign symmetry") {
  std::mt19937_64 rng(5);
  const PriorModel model = oracle::random_model(Footprint::kSquare3, 3, ScaleGrid::delta1(), rng);
  double at_zero = 0.0;
  for (int m = 0; m < 3; ++m) at_zero += gmm_log_activation(0.0, model.weights().row(m), model.grid());
  CHECK(log_prior_exponent(model, Image::Zero(4, 5)) == doctest::Approx(20 * at_zero).epsilon(1e-13));

  const Image x = oracle::random_image(6, 6, rng, -1, 1);
  CHECK(log_prior_exponent(model, x) == doctest::Approx(log_prior_exponent(model, (-x).eval())).epsilon(1e-14));
}

TEST_CASE("log prior exponent on a 2x2 image is the sum of four scalar terms") {
  const PriorModel model = single_filter(Footprint::kPoint, {1.7}, {0.3, 0.7}, {0.5, 3.0});
  Image x(2, 2);
  x << 0.1, -0.4, 0.9, 0.25;
  double expect = 0.0;
  for (int i = 0; i < 4; ++i) {
    expect += oracle::mixture_log_density(1.7 * x.data()[i], {0.3, 0.7}, {2.0, 1.0 / 3.0});
  }
  CHECK(log_prior_exponent(model, x) == doctest::Approx(expect).epsilon(1e-13));
}

TEST_CASE("rescaling weight rows then renormalizing leaves the exponent unchanged") {
  std::mt19937_64 rng(6);
  const PriorModel model = oracle::random_model(Footprint::kPlus5, 2, ScaleGrid::delta1(), rng);
  MixtureWeights::Table scaled = model.weights().table() * 3.7;
  for (int m = 0; m < 2; ++m) scaled.row(m) /= scaled.row(m).sum();
  const PriorModel other(model.filters(), model.grid(), MixtureWeights(scaled));
  const Image x = oracle::random_image(5, 5, rng);
  CHECK(log_prior_exponent(other, x) == doctest::Approx(log_prior_exponent(model, x)).epsilon(1e-13));
}

TEST_CASE("non-finite responses raise a numerical error") {
  const PriorModel model = single_filter(Footprint::kPoint, {1.0}, {1.0}, {1.0});
  Image x = Image::Zero(2, 2);
  x(1, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(log_prior_exponent(model, x), NumericalError);
}

TEST_CASE("exponent gradients: zero image has zero tap gradient") {
  std::mt19937_64 rng(7);
  const PriorModel model = oracle::random_model(Footprint::kSquare3, 2, ScaleGrid::delta2(), rng);
  const ExponentGradients g = exponent_gradients(model, Image::Zero(5, 5));
  CHECK(g.taps.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("exponent gradients match central finite differences") {
  std::mt19937_64 rng(8);
  const double h = 1e-5;
  for (int trial = 0; trial < 20; ++trial) {
    const Footprint fp = trial % 2 ? Footprint::kPlus5 : Footprint::kSquare3;
    const int size = 3 + trial % 3;
    const PriorModel model = oracle::random_model(fp, 2, ScaleGrid({0.5, 2.0, 6.0}, 1.0), rng, 0.7);
    const Image x = oracle::random_image(size, size, rng);
    const ExponentGradients g = exponent_gradients(model, x);

    const TapMatrix taps = model.filters().taps();
    for (Eigen::Index i = 0; i < taps.size(); ++i) {
      TapMatrix up = taps, down = taps;
      up.data()[i] += h;
      down.data()[i] -= h;
      const PriorModel mu(FilterBank(fp, up), model.grid(), model.weights());
      const PriorModel md(FilterBank(fp, down), model.grid(), model.weights());
      const double fd = (log_prior_exponent(mu, x) - log_prior_exponent(md, x)) / (2 * h);
      CHECK(std::abs(fd - g.taps.data()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
    const MixtureWeights::Table logits = model.weights().logits();
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      MixtureWeights::Table up = logits, down = logits;
      up.data()[i] += h;
      down.data()[i] -= h;
      const PriorModel mu(model.filters(), model.grid(), MixtureWeights::from_logits(up));
      const PriorModel md(model.filters(), model.grid(), MixtureWeights::from_logits(down));
      const double fd = (log_prior_exponent(mu, x) - log_prior_exponent(md, x)) / (2 * h);
      CHECK(std::abs(fd - g.logits.data()[i]) <= 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
}

TEST_CASE("weight gradients agree for x and -x under uniform weights") {
  std::mt19937_64 rng(9);
  const PriorModel base = oracle::random_model(Footprint::kSquare3, 2, ScaleGrid::delta1(), rng);
  const PriorModel model(base.filters(), base.grid(), MixtureWeights::uniform(2, 5));
  const Image x = oracle::random_image(5, 5, rng, -1, 1);
  const ExponentGradients a = exponent_gradients(model, x);
  const ExponentGradients b = exponent_gradients(model, (-x).eval());
  CHECK((a.logits - b.logits).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("presets match the architecture table") {
  CHECK(preset_model("bcnn1", 1).trainable_parameter_count() == 40);
  CHECK(preset_model("bcnn2", 1).trainable_parameter_count() == 56);
  CHECK(preset_model("bcnn3", 1).trainable_parameter_count() == 112);
  CHECK(preset_model("bcnn4", 1).trainable_parameter_count() == 136);
  CHECK(preset_model("bcnn5", 1).trainable_parameter_count() == 792);

  const PriorModel m = preset_model("bcnn5", 42);
  CHECK(m.filters().footprint() == Footprint::kSquare5);
  CHECK(m.num_filters() == 24);
  CHECK(m.num_scales() == 8);
  CHECK(m.preset_name() == std::optional<std::string>("bcnn5"));
  for (int f = 0; f < m.num_filters(); ++f) {
    CHECK(std::abs(m.filters().taps().row(f).sum()) < 1e-12);
    CHECK(m.weights().table().row(f).sum() == doctest::Approx(1.0));
  }
  CHECK(preset_model("bcnn3", 7) == preset_model("bcnn3", 7));
  CHECK_FALSE(preset_model("bcnn3", 7) == preset_model("bcnn3", 8));
  CHECK_THROWS_AS(preset_model("bcnn6", 1), InvalidInput);
}

TEST_CASE("model files round-trip bit-exactly") {
  std::mt19937_64 rng(10);
  for (Footprint fp : {Footprint::kPoint, Footprint::kPlus5, Footprint::kSquare3, Footprint::kSquare5}) {
    const PriorModel model = oracle::random_model(fp, 3, ScaleGrid::delta2(0.37), rng);
    const auto path = temp_file("roundtrip.json");
    save_model(model, path);
    const PriorModel back = load_model(path);
    CHECK(back == model);
    CHECK(back.filters().taps() == model.filters().taps());
    CHECK(back.weights().table() == model.weights().table());
    CHECK(back.grid().scales() == model.grid().scales());
    CHECK(back.grid().base_variance() == model.grid().base_variance());
  }
  const PriorModel preset = preset_model("bcnn1", 3);
  CHECK(parse_model(serialize_model(preset)) == preset);
  CHECK(parse_model(serialize_model(preset)).preset_name() == preset.preset_name());
}

TEST_CASE("model files: version and malformed errors") {
  const std::string good = serialize_model(preset_model("bcnn2", 1));
  std::string future = good;
  const auto pos = future.find("\"format_version\": 1");
  REQUIRE(pos != std::string::npos);
  future.replace(pos, 19, "\"format_version\": 7");
  CHECK_THROWS_AS(parse_model(future), VersionError);

  CHECK_THROWS_AS(parse_model(good.substr(0, good.size() / 2)), MalformedFile);
  const auto path = temp_file("truncated.json");
  std::ofstream(path) << good.substr(0, good.size() - 40);
  CHECK_THROWS_AS(load_model(path), MalformedFile);
  CHECK_THROWS_AS(load_model(temp_file("does-not-exist.json")), IoError);

  std::string wrong_taps = good;
  const auto nf = wrong_taps.find("\"num_filters\": 4");
  REQUIRE(nf != std::string::npos);
  wrong_taps.replace(nf, 16, "\"num_filters\": 5");
  CHECK_THROWS_AS(parse_model(wrong_taps), MalformedFile);
}

}  // TEST_SUITE
