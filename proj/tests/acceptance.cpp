// Acceptance gate. Prints one PASS/FAIL line per criterion and exits non-zero
// if any criterion fails. Pass criterion numbers as arguments to run a subset.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "commands.hpp"
#include "grad_check.hpp"
#include "todsynth/checkpoint.hpp"
#include "todsynth/config.hpp"
#include "todsynth/errors.hpp"
#include "todsynth/flow.hpp"
#include "todsynth/synthpipe.hpp"

using namespace todsynth;
using oracle::Vec;
namespace fs = std::filesystem;

namespace {

struct Clock {
  std::chrono::steady_clock::time_point t0 = std::chrono::steady_clock::now();
  double seconds() const { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); }
};

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& msg) { std::fprintf(stderr, "  .. %s\n", msg.c_str()); }

double median3(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  Rng rng(derive_seed(11, "acceptance-grad"));
  double flow_worst = 0.0, seg_worst = 0.0, prim_worst = 0.0;

  for (int i = 0; i < 50; ++i) {
    FlowNetConfig c;
    c.scheme = static_cast<Scheme>(i % 3);
    c.heads = 1 + rng.below(2);
    c.d_model = c.heads * (4 + 2 * rng.below(3));
    c.depth = 1 + rng.below(2);
    c.image_size = 8;
    c.patch = rng.bernoulli(0.5) ? 2 : 4;
    c.classes = 2 + rng.below(5);
    c.ffn_mult = 2;
    FlowNet net(c, rng.below(1u << 30));
    const Tensor z = oracle::random_tensor({3, 8, 8}, rng), target = oracle::random_tensor({3, 8, 8}, rng);
    std::vector<std::uint8_t> mask(64);
    for (auto& m : mask) m = static_cast<std::uint8_t>(rng.below(c.classes));
    const std::vector<float> cond = class_histogram(mask, c.classes);
    const float t = static_cast<float>(rng.uniform());
    auto loss = [&](Tape& tape) {
      return ops::mse(net.forward(tape, tape.constant(z), mask, cond, t), tape.constant(target));
    };
    flow_worst = std::max(flow_worst, oracle::parameter_gradient_error(net.params(), loss, rng));
  }

  for (int i = 0; i < 50; ++i) {
    SegNetConfig c;
    c.classes = 2 + rng.below(5);
    c.width1 = 3 + rng.below(4);
    c.width2 = 3 + rng.below(4);
    c.width3 = 3 + rng.below(4);
    SegNet net(c, rng.below(1u << 30));
    Tensor img = oracle::random_tensor({3, 8, 8}, rng);
    std::vector<std::uint8_t> mask(64);
    for (auto& m : mask) m = rng.bernoulli(0.05) ? kIgnoreIndex : static_cast<std::uint8_t>(rng.below(c.classes));
    auto loss = [&](Tape& tape) { return segmentation_loss(net.forward(tape, tape.constant(img)), mask); };
    seg_worst = std::max(seg_worst, oracle::parameter_gradient_error(net.params(), loss, rng));

    // Image-space gradient, the one the guidance step differentiates.
    img.set_requires_grad(true);
    {
      Tape tape(Tape::ParamGrads::Ignore);
      tape.backward(segmentation_loss(net.forward(tape, tape.variable(img)), mask));
    }
    Vec analytic, numeric;
    for (int d = 0; d < 4; ++d) {
      const Tensor dir = oracle::random_tensor(img.shape(), rng);
      double a = 0.0;
      for (std::size_t j = 0; j < dir.numel(); ++j) a += static_cast<double>(img.grad()[j]) * dir[j];
      analytic.push_back(a);
      numeric.push_back(oracle::directional_derivative(
          [&](double eps) {
            Tensor x = img;
            for (std::size_t j = 0; j < x.numel(); ++j) x[j] = static_cast<float>(img[j] + eps * dir[j]);
            Tape tape(Tape::ParamGrads::Ignore);
            return static_cast<double>(segmentation_loss(net.forward(tape, tape.constant(x)), mask).value()[0]);
          },
          1e-2));
    }
    const std::vector<float> af(analytic.begin(), analytic.end());
    seg_worst = std::max(seg_worst, oracle::relative_error(af, numeric));
  }

  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t m = 2 + rng.below(4), k = 2 + rng.below(4), n = 2 + rng.below(4);
    auto rt = [&](Shape s, double sc = 1.0) { return oracle::random_tensor(std::move(s), rng, sc); };
    std::vector<std::uint8_t> labels(m);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(n));
    const std::size_t lk = n + 1, d = 4;
    const std::vector<oracle::OpCase> cases = {
        {{rt({m, k}), rt({k, n})},
         [](auto& v) { return ops::matmul(v[0], v[1]); },
         [&](const auto& a) { return oracle::matmul(a[0], a[1], m, k, n); }},
        {{rt({m, n}, 2.0)},
         [](auto& v) { return ops::softmax(v[0], 1); },
         [&](const auto& a) { return oracle::softmax_rows(a[0], m, n); }},
        {{rt({m, n})},
         [](auto& v) { return ops::gelu(v[0]); },
         [](const auto& a) {
           Vec y(a[0].size());
           std::transform(a[0].begin(), a[0].end(), y.begin(), oracle::gelu);
           return y;
         }},
        {{rt({m, n})},
         [](auto& v) { return ops::silu(v[0]); },
         [](const auto& a) {
           Vec y(a[0].size());
           std::transform(a[0].begin(), a[0].end(), y.begin(), oracle::silu);
           return y;
         }},
        {{rt({m, d}), rt({lk, d}), rt({lk, d})},
         [](auto& v) { return ops::attention(v[0], v[1], v[2], 2); },
         [&](const auto& a) { return oracle::attention(a[0], a[1], a[2], m, lk, d, 2); }},
        {{rt({m, n}, 2.0)},
         [&](auto& v) { return ops::cross_entropy(v[0], labels); },
         [&](const auto& a) { return Vec{oracle::cross_entropy(a[0], labels, n)}; }},
        {{rt({2, 5, 6}), rt({3, 2, 3, 3}, 0.5), rt({3})},
         [](auto& v) { return ops::conv2d(v[0], v[1], v[2], 2, 1); },
         [](const auto& a) { return oracle::conv2d(a[0], a[1], a[2], 2, 5, 6, 3, 3, 2, 1); }},
    };
    for (const auto& c : cases) prim_worst = std::max(prim_worst, oracle::op_gradient_error(c, rng));
  }

  Outcome o;
  o.pass = flow_worst < 1e-3 && seg_worst < 1e-3 && prim_worst < 1e-4;
  o.detail = fmt("worst rel err flownet %.2e segnet %.2e (tol 1e-3), primitives %.2e (tol 1e-4)", flow_worst,
                 seg_worst, prim_worst);
  return o;
}

// ---------------------------------------------------------------- 2

Outcome flow_algebra() {
  Rng rng(derive_seed(12, "acceptance-algebra"));
  const Tensor z0 = oracle::random_tensor({3, 8, 8}, rng), z1 = oracle::random_tensor({3, 8, 8}, rng);
  Tensor v(z0.shape());
  for (std::size_t i = 0; i < v.numel(); ++i) v[i] = z1[i] - z0[i];
  auto max_diff = [](const Tensor& a, const Tensor& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
    return m;
  };
  double identity = 0.0;
  for (int i = 1; i <= 100; ++i) {
    const double t = i / 100.0;
    identity = std::max(identity, max_diff(presynth(interpolate(z0, z1, t), t, v), z0));
  }
  double endpoint = 0.0;
  for (std::size_t n : {1, 2, 3, 7, 16, 23, 50, 100})
    endpoint = std::max(endpoint, max_diff(euler_integrate([&](const Tensor&, double) { return v; }, z1, n), z0));
  const bool ends = interpolate(z0, z1, 0.0) == z0 && interpolate(z0, z1, 1.0) == z1;
  return {identity < 1e-6 && endpoint < 1e-6 && ends,
          fmt("presynth(interpolate) max err %.2e over 100 t; constant-field Euler max err %.2e over 8 N", identity,
              endpoint)};
}

// ---------------------------------------------------------------- 3

// Per-coordinate Gaussian target z0 ~ N(mu, s²) with z1 ~ N(0,1); its exact
// velocity is affine in z.
struct GaussianField {
  std::vector<double> mu, s;
  Tensor operator()(const Tensor& z, double t) const {
    Tensor v(z.shape());
    for (std::size_t i = 0; i < z.numel(); ++i) {
      const double var = (1 - t) * (1 - t) * s[i] * s[i] + t * t;
      const double cov = t - (1 - t) * s[i] * s[i];
      v[i] = static_cast<float>(-mu[i] + cov / var * (z[i] - (1 - t) * mu[i]));
    }
    return v;
  }
};

Outcome decomposition() {
  Rng rng(derive_seed(13, "acceptance-decomp"));
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    GaussianField target;
    for (int i = 0; i < 48; ++i) {
      target.mu.push_back(rng.uniform(-1.0, 1.0));
      target.s.push_back(rng.uniform(0.2, 1.5));
    }
    const double a = rng.uniform(0.2, 1.0), w = rng.uniform(1.0, 4.0);
    auto predicted = [&](const Tensor& z, double t) {
      Tensor p(z.shape());
      for (std::size_t i = 0; i < z.numel(); ++i) p[i] = static_cast<float>(a * std::sin(z[i] + w * t));
      return p;
    };
    auto summed = [&](const Tensor& z, double t) {
      const Tensor p = predicted(z, t), q = target(z, t);
      Tensor out(z.shape());
      for (std::size_t i = 0; i < z.numel(); ++i) out[i] = static_cast<float>(p[i] + (static_cast<double>(q[i]) - p[i]));
      return out;
    };
    const Tensor z1 = oracle::random_tensor({3, 4, 4}, rng);
    for (std::size_t n : {1, 4, 16, 23}) {
      const Tensor x = euler_integrate(summed, z1, n), y = euler_integrate(target, z1, n);
      for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(static_cast<double>(x[i]) - y[i]));
    }
  }
  return {worst < 1e-6, fmt("max trajectory deviation %.2e over 10 fields x 4 step counts", worst)};
}

// ---------------------------------------------------------------- 4

Outcome crfm_descent(const SegNet& guidance, const SceneConfig& scene) {
  const SamplerConfig defaults;
  int decreased = 0, evaluated = 0;
  bool noop = true;
  for (int trial = 0; trial < 100; ++trial) {
    Rng rng(derive_seed(14, "acceptance-descent", trial));
    const SceneSample s = generate_scene(scene, derive_seed(14, "descent-scene", trial));
    const double t = rng.uniform(0.05, 1.0);
    const Tensor z1 = oracle::random_tensor(s.image.shape(), rng);
    const Tensor z_t = interpolate(s.image, z1, t);
    Tensor v = oracle::random_tensor(s.image.shape(), rng, 0.5);
    for (std::size_t i = 0; i < v.numel(); ++i) v[i] += z1[i] - s.image[i];

    const Rectification zero = crfm_rectify(v, z_t, t, s.mask, guidance, 0.0);
    noop = noop && zero.v == v;
    const double gn = l2_norm(zero.grad);
    if (gn == 0.0) continue;
    // Same calibration rule as the sampler's adaptive alpha.
    const double alpha = defaults.alpha_ratio * l2_norm(v) / gn;
    const Rectification r = crfm_rectify(v, z_t, t, s.mask, guidance, alpha);
    ++evaluated;
    if (presynth_ce(z_t, t, r.v, s.mask, guidance) < r.ce) ++decreased;
  }
  return {decreased >= 90 && noop,
          fmt("CE decreased in %d of 100 trials (%d with nonzero gradient); alpha=0 bit-exact: %s", decreased,
              evaluated, noop ? "yes" : "no")};
}

// ---------------------------------------------------------------- 5

Outcome metric_oracles() {
  Rng rng(derive_seed(15, "acceptance-metrics"));
  bool exact = true;
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t k = 2 + rng.below(5);
    std::vector<std::vector<std::uint8_t>> pred(1, std::vector<std::uint8_t>(64)), gt = pred;
    for (std::size_t p = 0; p < 64; ++p) {
      gt[0][p] = rng.bernoulli(0.05) ? kIgnoreIndex : static_cast<std::uint8_t>(rng.below(k));
      pred[0][p] = rng.bernoulli(0.6) && gt[0][p] != kIgnoreIndex ? gt[0][p] : static_cast<std::uint8_t>(rng.below(k));
    }
    // Counting oracle: per-pixel tallies, no confusion matrix.
    std::vector<double> tp(k), fp(k), fn(k);
    double correct = 0, total = 0;
    for (std::size_t p = 0; p < 64; ++p) {
      const auto g = gt[0][p], q = pred[0][p];
      if (g == kIgnoreIndex) continue;
      ++total;
      if (g == q) {
        ++correct;
        ++tp[g];
      } else {
        ++fn[g];
        ++fp[q];
      }
    }
    double miou = 0, ni = 0, macc = 0, na = 0;
    for (std::size_t c = 0; c < k; ++c) {
      if (tp[c] + fp[c] + fn[c] > 0) {
        miou += tp[c] / (tp[c] + fp[c] + fn[c]);
        ++ni;
      }
      if (tp[c] + fn[c] > 0) {
        macc += tp[c] / (tp[c] + fn[c]);
        ++na;
      }
    }
    const SegMetrics m = compute_metrics(pred, gt, k);
    exact = exact && m.oa == correct / total && m.miou == miou / ni && m.macc == macc / na;
  }
  const std::vector<std::vector<std::uint8_t>> hp = {{0, 1, 1, 1}}, hg = {{0, 1, 0, 1}};
  const SegMetrics hand = compute_metrics(hp, hg, 2);
  const bool hand_ok = hand.oa == 0.75 && std::abs(hand.miou - 7.0 / 12.0) < 1e-12;

  auto rows = [&](std::size_t n, double mean, double sd) {
    FeatureMatrix x(n, std::vector<double>(1));
    for (auto& r : x) r[0] = mean + sd * rng.normal();
    return x;
  };
  const double fd1 = frechet_distance(rows(100000, 0.0, 1.0), rows(100000, 1.0, 1.0));
  const double fd2 = frechet_distance(rows(100000, 0.5, 2.0), rows(100000, -0.5, 0.5));
  const double closed2 = 1.0 + 1.5 * 1.5;
  FeatureMatrix a(300, std::vector<double>(8)), b(200, std::vector<double>(8));
  for (auto& r : a)
    for (double& v : r) v = rng.normal();
  for (auto& r : b)
    for (double& v : r) v = 0.3 + 0.7 * rng.normal();
  const double self = frechet_distance(a, a);
  const double asym = std::abs(frechet_distance(a, b) - frechet_distance(b, a));
  const double rel1 = std::abs(fd1 - 1.0), rel2 = std::abs(fd2 - closed2) / closed2;

  return {exact && hand_ok && rel1 < 0.05 && rel2 < 0.05 && std::abs(self) < 1e-6 && asym < 1e-6,
          fmt("200 maps exact: %s; 2x2 example: %s; 1-D FD rel err %.3f, %.3f; FD(X,X) %.1e; asymmetry %.1e",
              exact ? "yes" : "no", hand_ok ? "yes" : "no", rel1, rel2, self, asym)};
}

// ---------------------------------------------------------------- 6-8

// Everything the trend criteria need for one seed, built with the same seeds
// and settings the CLI uses for a desk run.
struct SeedRun {
  std::map<std::string, double> miou, fd;
  std::set<std::string> completed;  // schemes that trained and synthesized
};

SeedRun run_seed(std::uint64_t seed, std::size_t sampler_steps) {
  Clock clock;
  RunConfig cfg;
  cfg.seed = seed;
  cfg.finalize();
  const Dataset all = generate_dataset(cfg.scene, derive_seed(cfg.seed, "gen-data"), cfg.data.count);
  const Split split = split_validation(all, derive_seed(cfg.seed, "split"), cfg.data.val_fraction);
  const Dataset masks = subset(split.train, cfg.synth.mask_count);
  const Dataset real = subset(split.train, cfg.downstream.real_count);

  const SegNet g256 = train_seg(split.train, cfg.seg, cfg.seg_train);
  const SegNet g64 = train_seg(subset(split.train, 64), cfg.seg, cfg.seg_train);
  // Post-processing (pixel filter, FD features) always uses the 256-sample
  // model; only the model steering the rectification varies.
  const FilterCalibration calib = calibrate_filter(g256, split.val);
  progress(fmt("seed %llu: guidance models trained (%.0fs)", static_cast<unsigned long long>(seed), clock.seconds()));

  std::map<Scheme, FlowNet> flows;
  for (Scheme s : {Scheme::TriAttention, Scheme::MaskAdapter, Scheme::SiameseMM}) {
    FlowNetConfig mc = cfg.model;
    mc.scheme = s;
    flows.emplace(s, train_flow(split.train, mc, cfg.flow_train));
    progress(fmt("seed %llu: %s flow trained (%.0fs)", static_cast<unsigned long long>(seed), std::string(scheme_name(s)).c_str(),
                 clock.seconds()));
  }

  SeedRun out;
  const DownstreamConfig dc = cfg.downstream_config();
  auto cell = [&](const std::string& key, Scheme scheme, const SegNet& g, std::size_t k) {
    SynthesisJob job = cfg.synthesis_job();
    job.sampler.steps = sampler_steps;
    job.sampler.crfm_steps = k;
    const SynthesisResult r = synthesize(flows.at(scheme), g, masks, &calib, job, &split.train, &g256);
    const SegMetrics m = run_downstream(real, r.data, split.val, dc);
    out.miou[key] = m.miou;
    out.fd[key] = r.report.fd_pre;
    out.completed.insert(std::string(scheme_name(scheme)));
    progress(fmt("seed %llu: %-12s mIoU %.4f FD %.3f kept %zu (%.0fs)", static_cast<unsigned long long>(seed),
                 key.c_str(), m.miou, r.report.fd_pre, r.report.kept, clock.seconds()));
  };
  out.miou["real-only"] = run_downstream(real, Dataset{}, split.val, dc).miou;
  for (std::size_t k : {0u, 2u, 4u, 8u}) cell("tri k=" + std::to_string(k), Scheme::TriAttention, g256, k);
  cell("adapter k=0", Scheme::MaskAdapter, g256, 0);
  cell("siamese k=0", Scheme::SiameseMM, g256, 0);
  cell("tri-g64 k=4", Scheme::TriAttention, g64, 4);
  return out;
}

struct TrendRuns {
  std::vector<SeedRun> seeds;
  double seconds = 0.0;
  std::string error;

  double med_miou(const std::string& k) const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.miou.at(k));
    return median3(v);
  }
  double med_fd(const std::string& k) const {
    std::vector<double> v;
    for (const auto& s : seeds) v.push_back(s.fd.at(k));
    return median3(v);
  }
  std::string per_seed(const std::string& k) const {
    std::string s;
    for (const auto& r : seeds) s += fmt("%s%.4f", s.empty() ? "" : "/", r.miou.at(k));
    return s;
  }
};

const std::size_t kTrendSteps = 16;

TrendRuns trend_runs() {
  TrendRuns t;
  Clock clock;
  try {
    for (std::uint64_t seed : {0u, 1u, 2u}) t.seeds.push_back(run_seed(seed, kTrendSteps));
  } catch (const std::exception& e) {
    t.error = e.what();
  }
  t.seconds = clock.seconds();
  return t;
}

Outcome table4_direction(const TrendRuns& t) {
  if (!t.error.empty()) return {false, "pipeline failed: " + t.error};
  const double m0 = t.med_miou("tri k=0"), m2 = t.med_miou("tri k=2"), m4 = t.med_miou("tri k=4");
  const double f0 = t.med_fd("tri k=0"), f8 = t.med_fd("tri k=8");
  const bool a = m2 > m0 || m4 > m0;
  const bool b = f8 > f0;
  return {a && b, fmt("N=16 median mIoU k=0 %.4f k=2 %.4f k=4 %.4f (a: %s); median FD k=0 %.3f k=8 %.3f (b: %s)", m0,
                      m2, m4, a ? "pass" : "fail", f0, f8, b ? "pass" : "fail")};
}

Outcome table2_direction(const TrendRuns& t) {
  if (!t.error.empty()) return {false, "pipeline failed: " + t.error};
  bool all = true;
  for (const auto& s : t.seeds) all = all && s.completed.size() == 3;
  const double tri = t.med_miou("tri k=0"), ad = t.med_miou("adapter k=0"), sia = t.med_miou("siamese k=0");
  return {all && tri >= ad,
          fmt("median mIoU tri %.4f [%s] adapter %.4f [%s] siamese %.4f; all schemes completed: %s", tri,
              t.per_seed("tri k=0").c_str(), ad, t.per_seed("adapter k=0").c_str(), sia, all ? "yes" : "no")};
}

Outcome guidance_sensitivity(const TrendRuns& t) {
  if (!t.error.empty()) return {false, "pipeline failed: " + t.error};
  const double g256 = t.med_miou("tri k=4"), g64 = t.med_miou("tri-g64 k=4"), base = t.med_miou("tri k=0");
  return {g256 >= g64 && g256 > base && g64 > base,
          fmt("median mIoU guidance-256 %.4f [%s] guidance-64 %.4f [%s] k=0 %.4f [%s]", g256,
              t.per_seed("tri k=4").c_str(), g64, t.per_seed("tri-g64 k=4").c_str(), base,
              t.per_seed("tri k=0").c_str())};
}

// ---------------------------------------------------------------- 9

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "todsynth_acceptance_det";
  fs::remove_all(root);
  const std::vector<std::vector<std::string>> stages = {
      {"gen-data"}, {"train-flow"}, {"train-seg"}, {"synth"}, {"eval"}};
  for (const char* run : {"a", "b"}) {
    for (auto args : stages) {
      args.insert(args.end(), {"--workdir", (root / run).string(), "--seed", "5"});
      std::ostringstream sink;
      const int rc = cli::run(args, sink);
      if (rc != cli::kOk) return {false, fmt("%s failed with exit code %d", args[0].c_str(), rc)};
    }
    progress(fmt("determinism: pipeline run %s done", run));
  }
  std::string differing;
  std::size_t compared = 0;
  for (const char* f : {"real_train.tods", "real_val.tods", "synth.tods", "flow_tri.todw", "guidance.todw",
                        "metrics.json"}) {
    ++compared;
    if (slurp(root / "a" / f) != slurp(root / "b" / f)) differing += std::string(" ") + f;
  }
  fs::remove_all(root);
  return {differing.empty(), differing.empty() ? fmt("%zu artifacts byte-identical across two runs", compared)
                                               : "differing:" + differing};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int id) { return only.empty() || only.count(id) > 0; };

  int failures = 0;
  auto report = [&](int id, const char* name, const Outcome& o, double seconds) {
    std::printf("%s  criterion %d  %-24s %s (%.0fs)\n", o.pass ? "PASS" : "FAIL", id, name, o.detail.c_str(), seconds);
    std::fflush(stdout);
    if (!o.pass) ++failures;
  };
  auto timed = [&](int id, const char* name, auto&& fn) {
    if (!wanted(id)) return;
    Clock c;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    report(id, name, o, c.seconds());
  };

  timed(1, "gradient correctness", gradients);
  timed(2, "flow algebra", flow_algebra);
  timed(3, "residual decomposition", decomposition);
  timed(4, "crfm descent", [] {
    RunConfig cfg;
    cfg.finalize();
    const Dataset data = generate_dataset(cfg.scene, derive_seed(14, "descent-guidance"), 256);
    const SegNet g = train_seg(data, cfg.seg, cfg.seg_train);
    return crfm_descent(g, cfg.scene);
  });
  timed(5, "metric oracles", metric_oracles);

  if (wanted(6) || wanted(7) || wanted(8)) {
    const TrendRuns t = trend_runs();
    std::printf("      shared trend runs over seeds 0,1,2 took %.0fs\n", t.seconds);
    if (wanted(6)) report(6, "crfm step trend", table4_direction(t), t.seconds);
    if (wanted(7)) report(7, "attention schemes", table2_direction(t), 0.0);
    if (wanted(8)) report(8, "guidance sensitivity", guidance_sensitivity(t), 0.0);
  }
  timed(9, "pipeline determinism", determinism);

  std::printf("%d criterion failure(s)\n", failures);
  return failures == 0 ? 0 : 1;
}
