#include <fstream>

#include "todsynth/errors.hpp"
#include "todsynth/synthpipe.hpp"

namespace todsynth {

SegMetrics run_downstream(const Dataset& real_train, const Dataset& synth, const Dataset& real_val,
                          const DownstreamConfig& cfg) {
  if (real_val.empty()) throw ContractError("run_downstream: validation set is empty");
  const std::size_t k = cfg.net.classes;
  for (const Dataset* d : {&real_train, &synth, &real_val}) {
    if (!d->empty() && d->shape.classes != k) {
      throw ConfigError("seg.classes", "dataset has " + std::to_string(d->shape.classes) + " classes, downstream net has " +
                                           std::to_string(k));
    }
  }
  const SegNet net = train_seg(concat_datasets(real_train, synth), cfg.net, cfg.train);
  return evaluate(net, real_val);
}

std::vector<SweepCell> ablation_sweep(const SweepGrid& grid, const SweepInputs& in) {
  if (in.real_train == nullptr || in.real_val == nullptr || in.masks == nullptr || in.guidance == nullptr ||
      !in.flow_for) {
    throw ContractError("ablation_sweep: inputs are incomplete");
  }
  if (grid.schemes.empty() || grid.steps.empty() || grid.crfm_steps.empty()) {
    throw ConfigError("sweep", "every grid axis needs at least one value");
  }
  std::vector<SweepCell> cells;
  for (Scheme scheme : grid.schemes) {
    for (std::size_t n : grid.steps) {
      for (std::size_t k : grid.crfm_steps) {
        SweepCell c;
        c.id = cells.size();
        c.scheme = scheme;
        c.steps = n;
        c.crfm_steps = k;
        try {
          SynthesisJob job = in.job;
          job.sampler.steps = n;
          job.sampler.crfm_steps = k;
          const FlowNet& flow = in.flow_for(scheme);
          const SynthesisResult syn = synthesize(flow, *in.guidance, *in.masks, in.calib, job, in.real_train);
          const SegMetrics m = run_downstream(*in.real_train, syn.data, *in.real_val, in.downstream);
          c.oa = m.oa;
          c.miou = m.miou;
          c.macc = m.macc;
          c.fd = syn.report.fd_pre;
          c.fd_post = syn.report.fd_post;
          c.kept = syn.report.kept;
          c.ok = true;
        } catch (const std::exception& e) {
          c.error = e.what();
        }
        cells.push_back(std::move(c));
      }
    }
  }
  return cells;
}

void write_sweep_csv(const std::filesystem::path& path, std::span<const SweepCell> cells) {
  std::ofstream out(path);
  if (!out) throw MissingArtifactError("cannot write sweep table " + path.string());
  out.precision(9);
  out << "cell,scheme,steps,crfm_steps,OA,mIoU,mAcc,FD,FD_post,kept,status\n";
  for (const auto& c : cells) {
    out << c.id << ',' << scheme_name(c.scheme) << ',' << c.steps << ',' << c.crfm_steps << ',';
    if (c.ok) {
      out << c.oa << ',' << c.miou << ',' << c.macc << ',' << c.fd << ',' << c.fd_post << ',' << c.kept << ",ok\n";
    } else {
      std::string msg = c.error;
      for (char& ch : msg) {
        if (ch == ',' || ch == '\n' || ch == '"') ch = ' ';
      }
      out << ",,,,,," << "error: " << msg << '\n';
    }
  }
}

}  // namespace todsynth
