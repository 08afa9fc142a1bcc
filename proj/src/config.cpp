#include "todsynth/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "todsynth/errors.hpp"

namespace todsynth {

using nlohmann::json;

namespace {

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

void read(const json& j, const std::string& path, bool& out) {
  if (!j.is_boolean()) throw ConfigError(path, "expected true or false");
  out = j.get<bool>();
}

void read(const json& j, const std::string& path, double& out) {
  if (!j.is_number()) throw ConfigError(path, "expected a number");
  out = j.get<double>();
}

void read(const json& j, const std::string& path, float& out) {
  double d = 0.0;
  read(j, path, d);
  out = static_cast<float>(d);
}

void read(const json& j, const std::string& path, std::uint64_t& out) {
  if (j.is_number_unsigned()) {
    out = j.get<std::uint64_t>();
  } else if (j.is_number_integer() && j.get<std::int64_t>() >= 0) {
    out = static_cast<std::uint64_t>(j.get<std::int64_t>());
  } else {
    throw ConfigError(path, "expected a non-negative integer");
  }
}

void read(const json& j, const std::string& path, std::uint8_t& out) {
  std::uint64_t v = 0;
  read(j, path, v);
  if (v > 255) throw ConfigError(path, "must be at most 255");
  out = static_cast<std::uint8_t>(v);
}

void read(const json& j, const std::string& path, std::string& out) {
  if (!j.is_string()) throw ConfigError(path, "expected a string");
  out = j.get<std::string>();
}

void read(const json& j, const std::string& path, Scheme& out) {
  std::string s;
  read(j, path, s);
  try {
    out = parse_scheme(s);
  } catch (const ConfigError&) {
    throw ConfigError(path, "unknown scheme '" + s + "' (expected tri, siamese or adapter)");
  }
}

void read(const json& j, const std::string& path, std::optional<double>& out) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  double d = 0.0;
  read(j, path, d);
  out = d;
}

template <class T>
void read(const json& j, const std::string& path, std::vector<T>& out) {
  if (!j.is_array()) throw ConfigError(path, "expected an array");
  out.clear();
  for (std::size_t i = 0; i < j.size(); ++i) {
    T v{};
    read(j[i], path + "[" + std::to_string(i) + "]", v);
    out.push_back(std::move(v));
  }
}

// Object reader that rejects keys it was never asked about.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions() > 0) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(join(path_, key), "unknown key");
    }
  }

  template <class T>
  Section& field(const std::string& key, T& out) {
    seen_.insert(key);
    if (j_.contains(key)) read(j_.at(key), join(path_, key), out);
    return *this;
  }
  // Calls fn(Section) if the key is present.
  template <class Fn>
  Section& section(const std::string& key, Fn fn) {
    seen_.insert(key);
    if (j_.contains(key)) {
      Section s(j_.at(key), join(path_, key));
      fn(s);
    }
    return *this;
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string rebase(const ConfigError& e, const std::string& from, const std::string& to) {
  std::string p = e.path();
  if (p.rfind(from, 0) == 0) p = to + p.substr(from.size());
  return p;
}

json scheme_list(const std::vector<Scheme>& s) {
  json a = json::array();
  for (Scheme x : s) a.push_back(std::string(scheme_name(x)));
  return a;
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json train_json(const SegTrainConfig& t) {
  return {{"epochs", t.epochs}, {"batch", t.batch}, {"lr", t.lr}, {"weight_decay", t.weight_decay},
          {"clip", t.clip},     {"augment", t.augment}};
}

void read_train(Section& s, SegTrainConfig& t) {
  s.field("epochs", t.epochs)
      .field("batch", t.batch)
      .field("lr", t.lr)
      .field("weight_decay", t.weight_decay)
      .field("clip", t.clip)
      .field("augment", t.augment);
}

}  // namespace

RunConfig::RunConfig() {
  scene.size = 16;
  model.d_model = 32;
  model.heads = 2;
  model.depth = 2;
  model.patch = 2;
  flow_train.lr = 2e-3;
  seg_train.epochs = 8;
  downstream.train.epochs = 10;
  sweep.schemes = {Scheme::TriAttention};
  sweep.steps = {16};
  sweep.crfm_steps = {0, 2, 4, 8};
}

void RunConfig::finalize() {
  model.classes = seg.classes = scene.classes;
  model.channels = seg.channels = scene.channels;
  model.image_size = scene.size;
  flow_train.seed = derive_seed(seed, "train-flow");
  seg_train.seed = derive_seed(seed, "train-seg");
  downstream.train.seed = derive_seed(seed, "downstream");
  sampler.seed = derive_seed(seed, "synth");

  scene.validate(model.patch);
  model.validate();
  seg.validate();
  flow_train.validate();
  seg_train.validate();
  try {
    downstream.train.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(rebase(e, "seg_train", "downstream"), "invalid downstream training setting");
  }
  sampler.validate();
  if (data.count == 0) throw ConfigError("data.count", "must be positive");
  if (!(data.val_fraction > 0.0 && data.val_fraction < 1.0)) throw ConfigError("data.val_fraction", "must lie in (0, 1)");
  if (synth.seeds_per_mask == 0) throw ConfigError("synth.seeds_per_mask", "must be at least 1");
  if (!(synth.phi > 0.0)) throw ConfigError("synth.phi", "must be positive");
  for (auto r : synth.rare_set) {
    if (r >= scene.classes) throw ConfigError("synth.rare_set", "class " + std::to_string(r) + " does not exist");
  }
  if (sweep.schemes.empty()) throw ConfigError("sweep.schemes", "must not be empty");
  if (sweep.steps.empty()) throw ConfigError("sweep.steps", "must not be empty");
  if (sweep.crfm_steps.empty()) throw ConfigError("sweep.crfm_steps", "must not be empty");
  if (log_every == 0) throw ConfigError("log_every", "must be positive");
  if (workdir.empty()) throw ConfigError("workdir", "must not be empty");
}

SynthesisJob RunConfig::synthesis_job() const {
  SynthesisJob job;
  job.sampler = sampler;
  job.seeds_per_mask = synth.seeds_per_mask;
  job.use_class_count_filter = synth.class_count_filter;
  job.use_pixel_filter = synth.pixel_filter;
  job.phi = synth.phi;
  job.rare_set = synth.rare_set;
  job.seed = sampler.seed;
  return job;
}

DownstreamConfig RunConfig::downstream_config() const { return {seg, downstream.train}; }

RunConfig parse_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  {
    Section root(j, "");
    root.field("seed", c.seed).field("log_every", c.log_every).field("workdir", c.workdir);
    root.section("scene", [&](Section& s) {
      s.field("size", c.scene.size)
          .field("channels", c.scene.channels)
          .field("classes", c.scene.classes)
          .field("colors", c.scene.colors)
          .field("texture", c.scene.texture)
          .field("min_regions", c.scene.min_regions)
          .field("max_regions", c.scene.max_regions)
          .field("rare_classes", c.scene.rare_classes)
          .field("rare_frequency", c.scene.rare_frequency)
          .field("illumination", c.scene.illumination);
    });
    root.section("data", [&](Section& s) { s.field("count", c.data.count).field("val_fraction", c.data.val_fraction); });
    root.section("model", [&](Section& s) {
      s.field("scheme", c.model.scheme)
          .field("d_model", c.model.d_model)
          .field("heads", c.model.heads)
          .field("depth", c.model.depth)
          .field("patch", c.model.patch)
          .field("cond_tokens", c.model.cond_tokens)
          .field("ffn_mult", c.model.ffn_mult);
    });
    root.section("flow_train", [&](Section& s) {
      s.field("steps", c.flow_train.steps)
          .field("batch", c.flow_train.batch)
          .field("lr", c.flow_train.lr)
          .field("weight_decay", c.flow_train.weight_decay)
          .field("clip", c.flow_train.clip);
    });
    root.section("seg", [&](Section& s) {
      s.field("width1", c.seg.width1).field("width2", c.seg.width2).field("width3", c.seg.width3);
    });
    root.section("seg_train", [&](Section& s) { read_train(s, c.seg_train); });
    root.section("sampler", [&](Section& s) {
      s.field("steps", c.sampler.steps)
          .field("crfm_steps", c.sampler.crfm_steps)
          .field("alpha", c.sampler.alpha)
          .field("alpha_ratio", c.sampler.alpha_ratio);
    });
    root.section("synth", [&](Section& s) {
      s.field("seeds_per_mask", c.synth.seeds_per_mask)
          .field("class_count_filter", c.synth.class_count_filter)
          .field("pixel_filter", c.synth.pixel_filter)
          .field("phi", c.synth.phi)
          .field("rare_set", c.synth.rare_set)
          .field("mask_count", c.synth.mask_count);
    });
    root.section("downstream", [&](Section& s) {
      s.field("real_count", c.downstream.real_count);
      s.section("train", [&](Section& t) { read_train(t, c.downstream.train); });
    });
    root.section("sweep", [&](Section& s) {
      s.field("schemes", c.sweep.schemes).field("steps", c.sweep.steps).field("crfm_steps", c.sweep.crfm_steps);
    });
  }
  c.finalize();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifactError("config file not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string model_config_json(const FlowNetConfig& m) {
  return json{{"scheme", std::string(scheme_name(m.scheme))},
              {"d_model", m.d_model},
              {"heads", m.heads},
              {"depth", m.depth},
              {"patch", m.patch},
              {"cond_tokens", m.cond_tokens},
              {"ffn_mult", m.ffn_mult},
              {"classes", m.classes},
              {"channels", m.channels},
              {"image_size", m.image_size}}
      .dump();
}

std::string seg_config_json(const SegNetConfig& s) {
  return json{{"channels", s.channels},
              {"classes", s.classes},
              {"width1", s.width1},
              {"width2", s.width2},
              {"width3", s.width3}}
      .dump();
}

std::string config_to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["log_every"] = c.log_every;
  j["workdir"] = c.workdir;
  j["scene"] = {{"size", c.scene.size},
                {"channels", c.scene.channels},
                {"classes", c.scene.classes},
                {"colors", c.scene.colors},
                {"texture", c.scene.texture},
                {"min_regions", c.scene.min_regions},
                {"max_regions", c.scene.max_regions},
                {"rare_classes", c.scene.rare_classes},
                {"rare_frequency", c.scene.rare_frequency},
                {"illumination", c.scene.illumination}};
  j["data"] = {{"count", c.data.count}, {"val_fraction", c.data.val_fraction}};
  j["model"] = {{"scheme", std::string(scheme_name(c.model.scheme))},
                {"d_model", c.model.d_model},
                {"heads", c.model.heads},
                {"depth", c.model.depth},
                {"patch", c.model.patch},
                {"cond_tokens", c.model.cond_tokens},
                {"ffn_mult", c.model.ffn_mult}};
  j["flow_train"] = {{"steps", c.flow_train.steps},
                     {"batch", c.flow_train.batch},
                     {"lr", c.flow_train.lr},
                     {"weight_decay", c.flow_train.weight_decay},
                     {"clip", c.flow_train.clip}};
  j["seg"] = {{"width1", c.seg.width1}, {"width2", c.seg.width2}, {"width3", c.seg.width3}};
  j["seg_train"] = train_json(c.seg_train);
  j["sampler"] = {{"steps", c.sampler.steps},
                  {"crfm_steps", c.sampler.crfm_steps},
                  {"alpha", optional_number(c.sampler.alpha)},
                  {"alpha_ratio", c.sampler.alpha_ratio}};
  j["synth"] = {{"seeds_per_mask", c.synth.seeds_per_mask},
                {"class_count_filter", c.synth.class_count_filter},
                {"pixel_filter", c.synth.pixel_filter},
                {"phi", c.synth.phi},
                {"rare_set", c.synth.rare_set},
                {"mask_count", c.synth.mask_count}};
  j["downstream"] = {{"real_count", c.downstream.real_count}, {"train", train_json(c.downstream.train)}};
  j["sweep"] = {{"schemes", scheme_list(c.sweep.schemes)}, {"steps", c.sweep.steps}, {"crfm_steps", c.sweep.crfm_steps}};
  return j.dump(2);
}

}  // namespace todsynth
