#include "mnvton/config.hpp"

#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "mnvton/errors.hpp"

namespace mnvton {

using nlohmann::json;

void TaskConfig::validate() const {
  if (height == 0 || width == 0 || frames == 0 || channels == 0 || garment_size == 0) {
    throw ConfigError("task dimensions must be positive");
  }
  if (height % 2 != 0) throw ConfigError("task.height must be even (half-image masks)");
}

ModelConfig RunConfig::model_config() const {
  ModelConfig m;
  m.variant = variant;
  m.d = d;
  m.heads = heads;
  m.blocks = blocks;
  m.patch = patch;
  m.garment_grid = {1, task.garment_size, task.garment_size, task.channels};
  m.target_grid = {task.frames, task.height, task.width, task.channels};
  return m;
}

DiffusionSchedule RunConfig::make_schedule() const {
  return linear_schedule(schedule.T, schedule.beta_start, schedule.beta_end);
}

TrainConfig RunConfig::train_config() const {
  TrainConfig t = train;
  t.seed = seed;
  return t;
}

void RunConfig::validate() const {
  task.validate();
  model_config().validate();
  train.validate();
  (void)make_schedule();
  if (schedule.ddim_steps == 0 || schedule.ddim_steps > schedule.T) {
    throw ConfigError("schedule.ddim_steps must be in [1, T]");
  }
  if (eval.samples == 0) throw ConfigError("eval.samples must be >= 1");
  if (out.empty()) throw ConfigError("out must name a directory");
}

json to_json(const RunConfig& c) {
  json variants = json::array();
  for (BlockVariant v : c.ablation.variants) variants.push_back(std::string(to_string(v)));
  return json{
      {"variant", std::string(to_string(c.variant))},
      {"model", {{"d", c.d}, {"heads", c.heads}, {"blocks", c.blocks}, {"patch", c.patch}}},
      {"schedule",
       {{"T", c.schedule.T},
        {"beta_start", c.schedule.beta_start},
        {"beta_end", c.schedule.beta_end},
        {"ddim_steps", c.schedule.ddim_steps}}},
      {"train",
       {{"lr", c.train.adam.lr},
        {"beta1", c.train.adam.beta1},
        {"beta2", c.train.adam.beta2},
        {"adam_eps", c.train.adam.eps},
        {"max_grad_norm", c.train.adam.max_grad_norm},
        {"steps", c.train.steps},
        {"batch", c.train.batch},
        {"log_interval", c.train.log_interval}}},
      {"task",
       {{"height", c.task.height},
        {"width", c.task.width},
        {"frames", c.task.frames},
        {"channels", c.task.channels},
        {"garment_size", c.task.garment_size}}},
      {"eval", {{"samples", c.eval.samples}, {"seed_base", c.eval.seed_base}}},
      {"ablation", {{"variants", variants}, {"seeds", c.ablation.seeds}}},
      {"seed", c.seed},
      {"out", c.out},
  };
}

namespace {

// Walks one JSON object, consuming known keys and rejecting the rest.
class ObjectReader {
 public:
  ObjectReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + " must be a JSON object");
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_unsigned_v<T>) {
        if (!it->is_number_unsigned()) throw ConfigError(where(key) + " must be a non-negative integer");
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(where(key) + " must be a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(where(key) + " must be a string");
      }
      out = it->get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(where(key) + ": " + e.what());
    }
  }

  const json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown key " + where(it.key().c_str()));
    }
  }

  std::string where(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  ObjectReader root(j, "");
  std::string variant = std::string(to_string(c.variant));
  root.read("variant", variant);
  c.variant = parse_variant(variant);
  root.read("seed", c.seed);
  root.read("out", c.out);
  if (const json* m = root.child("model")) {
    ObjectReader r(*m, "model");
    r.read("d", c.d);
    r.read("heads", c.heads);
    r.read("blocks", c.blocks);
    r.read("patch", c.patch);
    r.finish();
  }
  if (const json* s = root.child("schedule")) {
    ObjectReader r(*s, "schedule");
    r.read("T", c.schedule.T);
    r.read("beta_start", c.schedule.beta_start);
    r.read("beta_end", c.schedule.beta_end);
    r.read("ddim_steps", c.schedule.ddim_steps);
    r.finish();
  }
  if (const json* t = root.child("train")) {
    ObjectReader r(*t, "train");
    r.read("lr", c.train.adam.lr);
    r.read("beta1", c.train.adam.beta1);
    r.read("beta2", c.train.adam.beta2);
    r.read("adam_eps", c.train.adam.eps);
    r.read("max_grad_norm", c.train.adam.max_grad_norm);
    r.read("steps", c.train.steps);
    r.read("batch", c.train.batch);
    r.read("log_interval", c.train.log_interval);
    r.finish();
  }
  if (const json* t = root.child("task")) {
    ObjectReader r(*t, "task");
    r.read("height", c.task.height);
    r.read("width", c.task.width);
    r.read("frames", c.task.frames);
    r.read("channels", c.task.channels);
    r.read("garment_size", c.task.garment_size);
    r.finish();
  }
  if (const json* e = root.child("eval")) {
    ObjectReader r(*e, "eval");
    r.read("samples", c.eval.samples);
    r.read("seed_base", c.eval.seed_base);
    r.finish();
  }
  if (const json* a = root.child("ablation")) {
    ObjectReader r(*a, "ablation");
    std::vector<std::string> names;
    r.read("variants", names);
    if (a->contains("variants")) {
      c.ablation.variants.clear();
      for (const auto& n : names) c.ablation.variants.push_back(parse_variant(n));
    }
    r.read("seeds", c.ablation.seeds);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::string canonical_dump(const json& j, int indent) { return j.dump(indent); }

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string config_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out");
  return fnv1a_hex(canonical_dump(j));
}

std::string budget_hash(const RunConfig& c) {
  json j = to_json(c);
  j.erase("out");
  j.erase("variant");
  j.erase("seed");
  return fnv1a_hex(canonical_dump(j));
}

}  // namespace mnvton
