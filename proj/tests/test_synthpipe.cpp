#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "fd_oracle.hpp"
#include "todsynth/errors.hpp"
#include "todsynth/numerics/ops.hpp"
#include "todsynth/synthpipe.hpp"
#include "toy_fixtures.hpp"

using namespace todsynth;
using fixtures::toy_data;

namespace {

FlowNetConfig tiny_flow() {
  FlowNetConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.depth = 1;
  c.patch = 2;
  c.image_size = 16;
  return c;
}

FeatureMatrix gaussian_rows(std::size_t m, std::size_t d, double mean, double sd, Rng& rng) {
  FeatureMatrix x(m, std::vector<double>(d));
  for (auto& row : x) {
    for (double& v : row) v = mean + sd * rng.normal();
  }
  return x;
}

// Closed form for D = 2: Tr sqrt(M) = sqrt(tr M + 2 sqrt(det M)) when M has
// non-negative eigenvalues.
double frechet_2d(const FeatureMatrix& a, const FeatureMatrix& b) {
  auto stats = [](const FeatureMatrix& x, double mu[2], double cov[4]) {
    const double n = static_cast<double>(x.size());
    mu[0] = mu[1] = 0.0;
    for (const auto& r : x) {
      mu[0] += r[0] / n;
      mu[1] += r[1] / n;
    }
    for (int i = 0; i < 4; ++i) cov[i] = 0.0;
    for (const auto& r : x) {
      const double d0 = r[0] - mu[0], d1 = r[1] - mu[1];
      cov[0] += d0 * d0 / (n - 1);
      cov[1] += d0 * d1 / (n - 1);
      cov[3] += d1 * d1 / (n - 1);
    }
    cov[2] = cov[1];
    cov[0] += 1e-6;
    cov[3] += 1e-6;
  };
  double ma[2], mb[2], ca[4], cb[4];
  stats(a, ma, ca);
  stats(b, mb, cb);
  const double p[4] = {ca[0] * cb[0] + ca[1] * cb[2], ca[0] * cb[1] + ca[1] * cb[3], ca[2] * cb[0] + ca[3] * cb[2],
                       ca[2] * cb[1] + ca[3] * cb[3]};
  const double det = p[0] * p[3] - p[1] * p[2];
  const double tr_sqrt = std::sqrt(p[0] + p[3] + 2.0 * std::sqrt(det));
  const double dm = (ma[0] - mb[0]) * (ma[0] - mb[0]) + (ma[1] - mb[1]) * (ma[1] - mb[1]);
  return dm + ca[0] + ca[3] + cb[0] + cb[3] - 2.0 * tr_sqrt;
}

std::vector<std::uint8_t> mask_of(std::initializer_list<std::uint8_t> labels) {
  std::vector<std::uint8_t> m;
  for (auto l : labels) m.insert(m.end(), 4, l);
  return m;
}

struct SynthRig {
  Dataset masks = toy_data(16, 300, 12);
  Dataset reference = toy_data(16, 400, 40);
  FlowNet flow{tiny_flow(), 17};
  const SegNet& guidance = fixtures::trained_guidance();
  FilterCalibration calib = calibrate_filter(fixtures::trained_guidance(), toy_data(16, 900, 16));

  SynthesisJob job() const {
    SynthesisJob j;
    j.sampler.steps = 5;
    j.sampler.crfm_steps = 2;
    j.seed = 21;
    return j;
  }
};

}  // namespace

TEST_CASE("class_count_filter") {
  const std::vector<std::uint8_t> rare = {5};
  CHECK(class_count_filter(mask_of({1, 2, 3}), rare));
  CHECK_FALSE(class_count_filter(mask_of({0, 1}), rare));
  CHECK(class_count_filter(mask_of({0, 5}), rare));
  CHECK_FALSE(class_count_filter(mask_of({0, 5}), std::vector<std::uint8_t>{}));
  CHECK_FALSE(class_count_filter(mask_of({0, 1, kIgnoreIndex}), rare));
  CHECK(class_count_filter(mask_of({0, 1, 4, kIgnoreIndex}), std::vector<std::uint8_t>{}));
}

TEST_CASE("frechet_distance") {
  Rng rng(3);
  SUBCASE("identical sets") {
    const FeatureMatrix x = gaussian_rows(200, 6, 0.3, 1.2, rng);
    CHECK(std::abs(frechet_distance(x, x)) < 1e-6);
  }
  SUBCASE("1-D Gaussians one unit apart") {
    const FeatureMatrix a = gaussian_rows(100000, 1, 0.0, 1.0, rng);
    const FeatureMatrix b = gaussian_rows(100000, 1, 1.0, 1.0, rng);
    CHECK(frechet_distance(a, b) == doctest::Approx(1.0).epsilon(0.05));
  }
  SUBCASE("1-D closed form with unequal spreads") {
    const FeatureMatrix a = gaussian_rows(100000, 1, 0.5, 2.0, rng);
    const FeatureMatrix b = gaussian_rows(100000, 1, -0.5, 0.5, rng);
    CHECK(frechet_distance(a, b) == doctest::Approx(1.0 + 1.5 * 1.5).epsilon(0.05));
  }
  SUBCASE("2-D matches the 2×2 square-root formula, symmetric") {
    for (int trial = 0; trial < 20; ++trial) {
      FeatureMatrix a = gaussian_rows(50, 2, 0.0, 1.0, rng), b = gaussian_rows(80, 2, 0.5, 0.7, rng);
      for (auto& r : a) r[1] += 0.8 * r[0];
      const double fd = frechet_distance(a, b);
      CHECK(fd == doctest::Approx(frechet_2d(a, b)).epsilon(1e-6));
      CHECK(std::abs(fd - frechet_distance(b, a)) < 1e-6);
      CHECK(fd >= 0.0);
    }
  }
  SUBCASE("errors") {
    FeatureMatrix a = gaussian_rows(10, 3, 0.0, 1.0, rng);
    FeatureMatrix b = gaussian_rows(10, 4, 0.0, 1.0, rng);
    CHECK_THROWS_AS(frechet_distance(a, b), DimensionError);
    CHECK_THROWS_AS(frechet_distance(a, FeatureMatrix{a[0]}), DimensionError);
    b = a;
    b[3][1] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(frechet_distance(a, b), NumericalError);
    b = a;
    b[2].pop_back();
    CHECK_THROWS_AS(frechet_distance(a, b), DimensionError);
  }
}

TEST_CASE("synthesize") {
  SynthRig rig;
  const SynthesisJob job = rig.job();

  SUBCASE("counts and report invariants") {
    const SynthesisResult r = synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, job, &rig.reference);
    CHECK(r.report.generated == 36);
    CHECK(r.report.kept_class_count <= r.report.generated);
    CHECK(r.report.kept <= r.report.kept_class_count);
    CHECK(r.data.size() == r.report.kept);
    CHECK(r.report.filter_order == "class_count,pixel");
    CHECK(r.report.mean_ce.size() == 2);
    CHECK(std::isfinite(r.report.fd_pre));
    CHECK(r.report.fd_pre >= 0.0);
    CHECK(r.report.ignored_fraction >= 0.0);
    CHECK(r.report.ignored_fraction <= 1.0);
    CHECK(r.report.mean_alpha > 0.0);
    for (const auto& s : r.data.samples) {
      for (float v : s.image.data()) CHECK((v >= -1.0f && v <= 1.0f));
      CHECK(s.cond_hist == class_histogram(s.mask, 6));
    }
  }
  SUBCASE("a hundred masks with three seeds give three hundred candidates") {
    SynthesisJob j = job;
    j.sampler.steps = 2;
    j.sampler.crfm_steps = 0;
    j.use_pixel_filter = false;
    const SynthesisResult r = synthesize(rig.flow, rig.guidance, toy_data(16, 310, 100), nullptr, j);
    CHECK(r.report.generated == 300);
    CHECK(std::isnan(r.report.fd_pre));
  }
  SUBCASE("bit-identical output, independent of worker count") {
    const auto dir = std::filesystem::temp_directory_path();
    const SynthesisResult a = synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, job);
    SynthesisJob threaded = job;
    threaded.jobs = 3;
    const SynthesisResult b = synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, threaded);
    write_container(dir / "todsynth_synth_a.tods", a.data);
    write_container(dir / "todsynth_synth_b.tods", b.data);
    CHECK(file_checksum(dir / "todsynth_synth_a.tods") == file_checksum(dir / "todsynth_synth_b.tods"));
  }
  SUBCASE("plain Euler candidates use the documented noise seeds") {
    SynthesisJob j = job;
    j.sampler.crfm_steps = 0;
    j.use_class_count_filter = false;
    j.use_pixel_filter = false;
    const SynthesisResult r = synthesize(rig.flow, rig.guidance, rig.masks, nullptr, j);
    REQUIRE(r.data.size() == 36);
    for (std::size_t i : {0, 4, 35}) {
      const SceneSample& src = rig.masks.samples[i / 3];
      Tensor expect = euler_sample(rig.flow, gaussian_noise({3, 16, 16}, derive_seed(j.seed, "synth-noise", i)),
                                   src.mask, src.cond_hist, j.sampler.steps);
      for (float& v : expect.data()) v = std::clamp(v, -1.0f, 1.0f);
      CHECK(r.data.samples[i].image == expect);
      CHECK(r.data.samples[i].mask == src.mask);
    }
  }
  SUBCASE("the binding filter is named when nothing survives") {
    Dataset two_class = rig.masks;
    for (auto& s : two_class.samples) {
      for (std::size_t p = 0; p < s.mask.size(); ++p) s.mask[p] = p % 2 == 0 ? 0 : 1;
      s.cond_hist = class_histogram(s.mask, 6);
    }
    try {
      synthesize(rig.flow, rig.guidance, two_class, &rig.calib, job);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("class-count") != std::string::npos);
    }
    SynthesisJob strict = job;
    strict.phi = 1e-12;
    try {
      synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, strict);
      FAIL("expected ContractError");
    } catch (const ContractError& e) {
      CHECK(std::string(e.what()).find("pixel filter") != std::string::npos);
    }
  }
  SUBCASE("a separate judge takes over filtering and FD, not rectification") {
    SegTrainConfig tc;
    tc.epochs = 1;
    tc.seed = 8;
    const SegNet weak = train_seg(toy_data(16, 520, 16), SegNetConfig{}, tc);
    SynthesisJob plain = job;
    plain.sampler.crfm_steps = 0;
    // Without rectification the guidance model is never consulted.
    const SynthesisResult a = synthesize(rig.flow, weak, rig.masks, &rig.calib, plain, &rig.reference, &rig.guidance);
    const SynthesisResult b = synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, plain, &rig.reference);
    REQUIRE(a.data.size() == b.data.size());
    for (std::size_t i = 0; i < a.data.size(); ++i) CHECK(a.data.samples[i].mask == b.data.samples[i].mask);
    CHECK(a.report.fd_pre == b.report.fd_pre);
    CHECK(a.report.ignored_fraction == b.report.ignored_fraction);
    // With rectification the weak model steers, so images differ from the judge-steered run.
    const SynthesisResult c = synthesize(rig.flow, weak, rig.masks, &rig.calib, job, &rig.reference, &rig.guidance);
    const SynthesisResult d = synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, job, &rig.reference);
    CHECK(c.report.mean_ce != d.report.mean_ce);
    SegNetConfig three;
    three.classes = 3;
    const SegNet wrong(three, 1);
    CHECK_THROWS_AS(synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, job, nullptr, &wrong), ConfigError);
  }
  SUBCASE("configuration errors") {
    SynthesisJob j = job;
    j.seeds_per_mask = 0;
    CHECK_THROWS_AS(synthesize(rig.flow, rig.guidance, rig.masks, &rig.calib, j), ConfigError);
    CHECK_THROWS_AS(synthesize(rig.flow, rig.guidance, rig.masks, nullptr, job), ContractError);
    CHECK_THROWS_AS(synthesize(rig.flow, rig.guidance, toy_data(32, 1, 2), &rig.calib, job), ConfigError);
  }
}

TEST_CASE("run_downstream") {
  const Dataset real = toy_data(16, 600, 24), val = toy_data(16, 700, 12);
  DownstreamConfig cfg;
  cfg.train.epochs = 1;
  cfg.train.seed = 4;
  const SegMetrics a = run_downstream(real, Dataset{}, val, cfg);
  const SegMetrics b = run_downstream(real, Dataset{real.shape, {}}, val, cfg);
  CHECK(a.miou == b.miou);
  CHECK(a.confusion.counts == b.confusion.counts);
  const SegMetrics direct = evaluate(train_seg(real, cfg.net, cfg.train), val);
  CHECK(a.confusion.counts == direct.confusion.counts);
  DownstreamConfig wrong = cfg;
  wrong.net.classes = 4;
  CHECK_THROWS_AS(run_downstream(real, Dataset{}, val, wrong), ConfigError);
}

TEST_CASE("ablation_sweep rows follow the grid and failures do not stop it") {
  SynthRig rig;
  const Dataset real = toy_data(16, 600, 8), val = toy_data(16, 700, 6);
  SweepInputs in;
  in.real_train = &real;
  in.real_val = &val;
  in.masks = &rig.masks;
  in.guidance = &rig.guidance;
  in.calib = &rig.calib;
  in.flow_for = [&](Scheme s) -> const FlowNet& {
    if (s != Scheme::TriAttention) throw ContractError("no flow model for this scheme");
    return rig.flow;
  };
  in.job = rig.job();
  in.downstream.train.epochs = 1;
  const SweepGrid grid{{Scheme::TriAttention}, {4}, {0, 2, 4, 6}};
  const auto cells = ablation_sweep(grid, in);
  REQUIRE(cells.size() == 4);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(cells[i].ok);
    CHECK(cells[i].id == i);
    CHECK(cells[i].crfm_steps == 2 * i);
    CHECK(std::isfinite(cells[i].fd));
  }
  CHECK_FALSE(cells[3].ok);
  CHECK(cells[3].error.find("crfm_steps") != std::string::npos);

  const auto path = std::filesystem::temp_directory_path() / "todsynth_sweep.csv";
  write_sweep_csv(path, cells);
  std::ifstream f(path);
  std::string line;
  std::getline(f, line);
  CHECK(line == "cell,scheme,steps,crfm_steps,OA,mIoU,mAcc,FD,FD_post,kept,status");
  std::size_t rows = 0;
  while (std::getline(f, line)) ++rows;
  CHECK(rows == 4);

  const auto failed = ablation_sweep(SweepGrid{{Scheme::MaskAdapter}, {4}, {0}}, in);
  REQUIRE(failed.size() == 1);
  CHECK_FALSE(failed[0].ok);
}
