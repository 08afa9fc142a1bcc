#include "commands.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"
#include "todsynth/checkpoint.hpp"
#include "todsynth/config.hpp"
#include "todsynth/errors.hpp"
#include "todsynth/synthpipe.hpp"

namespace todsynth::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string workdir;
};

struct Paths {
  fs::path dir;
  fs::path real_train() const { return dir / "real_train.tods"; }
  fs::path real_val() const { return dir / "real_val.tods"; }
  fs::path flow(Scheme s) const { return dir / ("flow_" + std::string(scheme_name(s)) + ".todw"); }
  fs::path guidance() const { return dir / "guidance.todw"; }
  fs::path synth() const { return dir / "synth.tods"; }
  fs::path synth_report() const { return dir / "synth_report.json"; }
  fs::path trajectory() const { return dir / "trajectory.csv"; }
  fs::path metrics() const { return dir / "metrics.json"; }
  fs::path sweep() const { return dir / "sweep.csv"; }
};

void setup_logging() {
  static bool done = false;
  if (done) return;
  done = true;
  auto logger = spdlog::stderr_color_mt("todsynth");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%l] %v");
  const char* env = std::getenv("TODSYNTH_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
    if (level != "info") spdlog::warn("TODSYNTH_LOG={} not recognised, using info", level);
  }
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.workdir.empty()) cfg.workdir = c.workdir;
  cfg.finalize();
  return cfg;
}

Paths paths_for(const RunConfig& cfg) {
  Paths p{cfg.workdir};
  fs::create_directories(p.dir);
  return p;
}

Dataset load_dataset(const fs::path& p) {
  if (!fs::exists(p)) throw MissingArtifactError("missing container " + p.string() + " (run gen-data first)");
  return read_container(p);
}

FlowNetConfig flow_config(const RunConfig& cfg, Scheme scheme) {
  FlowNetConfig mc = cfg.model;
  mc.scheme = scheme;
  return mc;
}

Checkpoint load_checkpoint_of(const fs::path& p, const std::string& kind, const std::string& config_json) {
  if (!fs::exists(p)) throw MissingArtifactError("missing checkpoint " + p.string());
  Checkpoint ck = read_checkpoint(p);
  if (ck.kind != kind) throw FormatError("checkpoint " + p.string() + " holds a " + ck.kind + ", expected " + kind, 0);
  if (ck.config_json != config_json) {
    throw ConfigError(kind == "flownet" ? "model" : "seg",
                      "checkpoint " + p.string() + " was trained with a different configuration");
  }
  return ck;
}

FlowNet load_flow(const RunConfig& cfg, const Paths& paths, Scheme scheme) {
  const FlowNetConfig mc = flow_config(cfg, scheme);
  const Checkpoint ck = load_checkpoint_of(paths.flow(scheme), "flownet", model_config_json(mc));
  FlowNet net(mc, 0);
  load_parameters(ck, net.params());
  return net;
}

SegNet load_guidance(const RunConfig& cfg, const Paths& paths) {
  const Checkpoint ck = load_checkpoint_of(paths.guidance(), "segnet", seg_config_json(cfg.seg));
  SegNet net(cfg.seg, 0);
  load_parameters(ck, net.params());
  return net;
}

Dataset mask_source(const RunConfig& cfg, const Dataset& train) {
  return cfg.synth.mask_count == 0 ? train : subset(train, cfg.synth.mask_count);
}

void loss_line(std::ostream& out, std::uint64_t step, double loss) {
  out << "step," << step << ",loss," << loss << '\n';
  out.flush();
}

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& common, std::optional<std::size_t> count, std::ostream& out) {
  RunConfig cfg = resolve(common);
  if (count) {
    if (*count == 0) throw ConfigError("data.count", "must be positive");
    cfg.data.count = *count;
  }
  const Paths paths = paths_for(cfg);
  const Dataset all = generate_dataset(cfg.scene, derive_seed(cfg.seed, "gen-data"), cfg.data.count);
  const Split split = split_validation(all, derive_seed(cfg.seed, "split"), cfg.data.val_fraction);
  write_container(paths.real_train(), split.train);
  write_container(paths.real_val(), split.val);
  spdlog::info("wrote {} and {}", paths.real_train().string(), paths.real_val().string());
  out << "train," << split.train.size() << "\nval," << split.val.size() << '\n';
  return kOk;
}

int cmd_train_flow(const Common& common, std::optional<Scheme> scheme_flag, std::optional<std::size_t> steps,
                   bool resume, std::ostream& out) {
  RunConfig cfg = resolve(common);
  if (steps) cfg.flow_train.steps = *steps;
  cfg.flow_train.validate();
  const Scheme scheme = scheme_flag.value_or(cfg.model.scheme);
  const Paths paths = paths_for(cfg);
  const Dataset train = load_dataset(paths.real_train());
  const FlowNetConfig mc = flow_config(cfg, scheme);
  FlowTrainer trainer(FlowNet(mc, derive_seed(cfg.flow_train.seed, "flow-init")), cfg.flow_train);
  if (resume && fs::exists(paths.flow(scheme))) {
    const Checkpoint ck = load_checkpoint_of(paths.flow(scheme), "flownet", model_config_json(mc));
    load_parameters(ck, trainer.net.params());
    load_optimizer(ck, trainer.opt);
    trainer.step = ck.step;
    spdlog::info("resuming {} from step {}", paths.flow(scheme).string(), ck.step);
  }
  const std::uint64_t last = cfg.flow_train.steps;
  spdlog::info("training {} flow model for {} steps on {} scenes", scheme_name(scheme), last, train.size());
  trainer.run(train, cfg.flow_train, last, [&](std::uint64_t step, double loss) {
    if (step % cfg.log_every == 0 || step == last) loss_line(out, step, loss);
  });
  write_checkpoint(paths.flow(scheme),
                   make_checkpoint("flownet", model_config_json(mc), trainer.step, trainer.net.params(), &trainer.opt));
  spdlog::info("wrote {}", paths.flow(scheme).string());
  return kOk;
}

int cmd_train_seg(const Common& common, bool resume, std::ostream& out) {
  const RunConfig cfg = resolve(common);
  const Paths paths = paths_for(cfg);
  const Dataset train = load_dataset(paths.real_train());
  SegTrainer trainer(SegNet(cfg.seg, derive_seed(cfg.seg_train.seed, "seg-init")), cfg.seg_train);
  if (resume && fs::exists(paths.guidance())) {
    const Checkpoint ck = load_checkpoint_of(paths.guidance(), "segnet", seg_config_json(cfg.seg));
    load_parameters(ck, trainer.net.params());
    load_optimizer(ck, trainer.opt);
    trainer.step = ck.step;
    spdlog::info("resuming {} from step {}", paths.guidance().string(), ck.step);
  }
  const std::uint64_t last = trainer.total_steps(train.size(), cfg.seg_train);
  trainer.run(train, cfg.seg_train, last, [&](std::uint64_t step, double loss) {
    if (step % cfg.log_every == 0 || step == last) loss_line(out, step, loss);
  });
  write_checkpoint(paths.guidance(),
                   make_checkpoint("segnet", seg_config_json(cfg.seg), trainer.step, trainer.net.params(), &trainer.opt));
  spdlog::info("wrote {}", paths.guidance().string());
  return kOk;
}

struct SynthFlags {
  std::optional<Scheme> scheme;
  std::optional<std::size_t> steps, crfm_steps;
  std::size_t export_pixmaps = 0;
  std::size_t jobs = 1;
};

int cmd_synth(const Common& common, const SynthFlags& flags, std::ostream& out) {
  RunConfig cfg = resolve(common);
  if (flags.steps) cfg.sampler.steps = *flags.steps;
  if (flags.crfm_steps) cfg.sampler.crfm_steps = *flags.crfm_steps;
  cfg.sampler.validate();
  const Scheme scheme = flags.scheme.value_or(cfg.model.scheme);
  const Paths paths = paths_for(cfg);
  const Dataset train = load_dataset(paths.real_train());
  const Dataset val = load_dataset(paths.real_val());
  const FlowNet flow = load_flow(cfg, paths, scheme);
  const SegNet guidance = load_guidance(cfg, paths);
  const FilterCalibration calib = calibrate_filter(guidance, val);
  const Dataset masks = mask_source(cfg, train);
  SynthesisJob job = cfg.synthesis_job();
  job.jobs = flags.jobs;
  const SynthesisResult res = synthesize(flow, guidance, masks, &calib, job, &train);
  write_container(paths.synth(), res.data);

  // Trajectory of the first candidate, for inspection.
  const SceneSample& first = masks.samples.front();
  const Tensor z1 = gaussian_noise({cfg.scene.channels, cfg.scene.size, cfg.scene.size},
                                   derive_seed(job.seed, "synth-noise", 0));
  crfm_sample(flow, guidance, z1, first.mask, first.cond_hist, job.sampler).log.write_csv(paths.trajectory());

  const auto& r = res.report;
  json report = {{"scheme", std::string(scheme_name(scheme))},
                 {"steps", cfg.sampler.steps},
                 {"crfm_steps", cfg.sampler.crfm_steps},
                 {"masks", masks.size()},
                 {"seeds_per_mask", job.seeds_per_mask},
                 {"generated", r.generated},
                 {"kept_class_count", r.kept_class_count},
                 {"kept", r.kept},
                 {"filter_order", r.filter_order},
                 {"mask_source", "training split"},
                 {"ignored_fraction", r.ignored_fraction},
                 {"FD_pre_filter", number_or_null(r.fd_pre)},
                 {"FD_post_filter", number_or_null(r.fd_post)},
                 {"mean_alpha", r.mean_alpha},
                 {"mean_ce", r.mean_ce},
                 {"warnings", r.warnings},
                 {"seconds", r.seconds}};
  std::ofstream(paths.synth_report()) << report.dump(2) << '\n';
  for (const auto& w : r.warnings) spdlog::warn("{}", w);

  if (flags.export_pixmaps > 0) {
    const fs::path dir = paths.dir / "pixmaps";
    fs::create_directories(dir);
    const std::size_t n = std::min(flags.export_pixmaps, res.data.size());
    for (std::size_t i = 0; i < n; ++i) {
      export_pixmap(res.data.samples[i], (dir / ("synth_" + std::to_string(i))).string(), cfg.scene.classes);
    }
    spdlog::info("exported {} pixmap pairs to {}", n, dir.string());
  }
  out << "generated," << r.generated << "\nkept_class_count," << r.kept_class_count << "\nkept," << r.kept
      << "\nFD," << r.fd_pre << '\n';
  return kOk;
}

int cmd_eval(const Common& common, const std::string& synth_path, bool real_only, std::ostream& out) {
  const RunConfig cfg = resolve(common);
  const Paths paths = paths_for(cfg);
  const Dataset train = load_dataset(paths.real_train());
  const Dataset val = load_dataset(paths.real_val());
  const SegNet guidance = load_guidance(cfg, paths);
  const Dataset real = cfg.downstream.real_count == 0 ? train : subset(train, cfg.downstream.real_count);
  Dataset synth{train.shape, {}};
  if (!real_only) synth = load_dataset(synth_path.empty() ? paths.synth() : fs::path(synth_path));
  const SegMetrics m = run_downstream(real, synth, val, cfg.downstream_config());
  const double fd =
      synth.size() >= 2 ? frechet_distance(extract_features(guidance, synth), extract_features(guidance, train))
                        : std::numeric_limits<double>::quiet_NaN();
  json iou = json::array();
  for (double v : m.iou) iou.push_back(number_or_null(v));
  const json metrics = {{"OA", m.oa},
                        {"mIoU", m.miou},
                        {"mAcc", m.macc},
                        {"FD", number_or_null(fd)},
                        {"per_class_iou", iou},
                        {"train_real", real.size()},
                        {"train_synth", synth.size()},
                        {"val", val.size()}};
  std::ofstream(paths.metrics()) << metrics.dump(2) << '\n';
  out << "OA," << m.oa << "\nmIoU," << m.miou << "\nmAcc," << m.macc << "\nFD," << fd << '\n';
  return kOk;
}

int cmd_sweep(const Common& common, std::size_t jobs, std::ostream& out) {
  const RunConfig cfg = resolve(common);
  const Paths paths = paths_for(cfg);
  const Dataset train = load_dataset(paths.real_train());
  const Dataset val = load_dataset(paths.real_val());
  const SegNet guidance = load_guidance(cfg, paths);
  const FilterCalibration calib = calibrate_filter(guidance, val);
  const Dataset masks = mask_source(cfg, train);
  const Dataset real = cfg.downstream.real_count == 0 ? train : subset(train, cfg.downstream.real_count);
  std::map<Scheme, FlowNet> flows;
  SweepInputs in;
  in.real_train = &real;
  in.real_val = &val;
  in.masks = &masks;
  in.guidance = &guidance;
  in.calib = &calib;
  in.flow_for = [&](Scheme s) -> const FlowNet& {
    auto it = flows.find(s);
    if (it == flows.end()) it = flows.emplace(s, load_flow(cfg, paths, s)).first;
    return it->second;
  };
  in.job = cfg.synthesis_job();
  in.job.jobs = jobs;
  in.downstream = cfg.downstream_config();
  const auto cells = ablation_sweep(cfg.sweep, in);
  write_sweep_csv(paths.sweep(), cells);
  for (const auto& c : cells) {
    if (!c.ok) spdlog::warn("cell {} failed: {}", c.id, c.error);
  }
  out << "cells," << cells.size() << '\n';
  return kOk;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out) {
  CLI::App app{"Mask-conditioned rectified-flow synthesis for segmentation data", "todsynth"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration (defaults when omitted)");
    sub->add_option("--seed", common.seed, "global seed");
    sub->add_option("--workdir", common.workdir, "artifact directory");
  };
  const std::map<std::string, Scheme> schemes = {
      {"tri", Scheme::TriAttention}, {"siamese", Scheme::SiameseMM}, {"adapter", Scheme::MaskAdapter}};

  auto* gen = app.add_subcommand("gen-data", "generate real train/val containers");
  add_common(gen);
  std::optional<std::size_t> count;
  gen->add_option("--count", count, "number of scenes before the split");

  auto* tf = app.add_subcommand("train-flow", "train the flow model");
  add_common(tf);
  std::optional<Scheme> tf_scheme;
  std::optional<std::size_t> tf_steps;
  bool tf_resume = false;
  tf->add_option("--scheme", tf_scheme, "tri|siamese|adapter")->transform(CLI::CheckedTransformer(schemes));
  tf->add_option("--steps", tf_steps, "total optimiser steps");
  tf->add_flag("--resume", tf_resume, "continue from the existing checkpoint");

  auto* ts = app.add_subcommand("train-seg", "train the guidance segmenter on real data");
  add_common(ts);
  bool ts_resume = false;
  ts->add_flag("--resume", ts_resume, "continue from the existing checkpoint");

  auto* sy = app.add_subcommand("synth", "synthesize a dataset from training masks");
  add_common(sy);
  SynthFlags sf;
  sy->add_option("--scheme", sf.scheme, "tri|siamese|adapter")->transform(CLI::CheckedTransformer(schemes));
  sy->add_option("--steps", sf.steps, "sampling steps N");
  sy->add_option("--crfm-steps", sf.crfm_steps, "rectified steps k");
  sy->add_option("--export-pixmaps", sf.export_pixmaps, "write this many image/mask pixmap pairs");
  sy->add_option("--jobs", sf.jobs, "worker threads")->check(CLI::PositiveNumber);

  auto* ev = app.add_subcommand("eval", "train downstream on real + synthetic data and score it");
  add_common(ev);
  std::string synth_path;
  bool real_only = false;
  ev->add_option("--synth", synth_path, "synthetic container (default: workdir/synth.tods)");
  ev->add_flag("--real-only", real_only, "train on real data only");

  auto* sw = app.add_subcommand("sweep", "scheme × N × k ablation table");
  add_common(sw);
  std::size_t sw_jobs = 1;
  sw->add_option("--jobs", sw_jobs, "worker threads")->check(CLI::PositiveNumber);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::ParseError& e) {
    spdlog::error("{}", e.what());
    return kConfigError;
  }

  if (*gen) return cmd_gen_data(common, count, out);
  if (*tf) return cmd_train_flow(common, tf_scheme, tf_steps, tf_resume, out);
  if (*ts) return cmd_train_seg(common, ts_resume, out);
  if (*sy) return cmd_synth(common, sf, out);
  if (*ev) return cmd_eval(common, synth_path, real_only, out);
  return cmd_sweep(common, sw_jobs, out);
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out) {
  setup_logging();
  try {
    return dispatch(args, out);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kConfigError;
  } catch (const NumericalError& e) {
    spdlog::error("numerical failure: {}", e.what());
    return kNumericalError;
  } catch (const MissingArtifactError& e) {
    spdlog::error("missing artifact: {}", e.what());
    return kMissingArtifact;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kFailure;
  }
}

}  // namespace todsynth::cli
