#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "todsynth/flow.hpp"
#include "todsynth/model.hpp"
#include "todsynth/scenes.hpp"
#include "todsynth/segment.hpp"
#include "todsynth/synthpipe.hpp"

namespace todsynth {

struct DataSettings {
  std::size_t count = 320;  // real scenes before the validation split
  double val_fraction = 0.2;
};

struct SynthSettings {
  std::size_t seeds_per_mask = 3;
  bool class_count_filter = true;
  bool pixel_filter = true;
  double phi = 1.25;
  std::vector<std::uint8_t> rare_set = {5};
  std::size_t mask_count = 64;  // training masks used as layouts; 0 = all
};

struct DownstreamSettings {
  std::size_t real_count = 32;  // real training scenes mixed with synthetic ones; 0 = all
  SegTrainConfig train;
};

// Whole-pipeline configuration. Every stage seed is derived from `seed`.
struct RunConfig {
  std::uint64_t seed = 0;
  SceneConfig scene;
  DataSettings data;
  FlowNetConfig model;  // classes, channels and image_size follow `scene`
  FlowTrainConfig flow_train;
  SegNetConfig seg;     // channels and classes follow `scene`
  SegTrainConfig seg_train;
  SamplerConfig sampler;
  SynthSettings synth;
  DownstreamSettings downstream;
  SweepGrid sweep;
  std::size_t log_every = 50;
  std::string workdir = "run";

  RunConfig();
  // Copies scene-derived fields and stage seeds into the sub-configs and
  // validates everything. Throws ConfigError naming the field.
  void finalize();
  SynthesisJob synthesis_job() const;
  DownstreamConfig downstream_config() const;
};

// Parses a JSON document over the defaults; unknown keys and type mismatches
// throw ConfigError with the dotted path of the field.
RunConfig parse_config(const std::string& text);
// Throws MissingArtifactError if the file does not exist.
RunConfig load_config(const std::filesystem::path& path);
// Canonical JSON echo (parse_config(config_to_json(c)) reproduces c).
std::string config_to_json(const RunConfig& cfg);
std::string model_config_json(const FlowNetConfig& cfg);
std::string seg_config_json(const SegNetConfig& cfg);

}  // namespace todsynth
