#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "mnvton/blocks.hpp"
#include "mnvton/diffusion.hpp"
#include "mnvton/model.hpp"

#include <json.hpp>

namespace mnvton {

struct ScheduleConfig {
  std::size_t T = 100;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  std::size_t ddim_steps = 20;
};

struct TaskConfig {
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t frames = 1;
  std::size_t channels = 3;
  std::size_t garment_size = 8;
  void validate() const;
};

struct EvalConfig {
  std::size_t samples = 16;
  std::uint64_t seed_base = 1000000;
};

struct AblationConfig {
  std::vector<BlockVariant> variants = {BlockVariant::MN_V1, BlockVariant::MN_V2, BlockVariant::MN_V3,
                                        BlockVariant::DualNet, BlockVariant::NaiveSplit};
  std::vector<std::uint64_t> seeds = {0, 1, 2, 3, 4};
};

// Everything a run needs. Serialized as JSON with sorted keys; unknown keys
// are rejected on load.
struct RunConfig {
  BlockVariant variant = BlockVariant::MN_V3;
  std::size_t d = 24;
  std::size_t heads = 4;
  std::size_t blocks = 2;
  std::size_t patch = 2;
  ScheduleConfig schedule;
  TrainConfig train;
  TaskConfig task;
  EvalConfig eval;
  AblationConfig ablation;
  std::uint64_t seed = 0;
  std::string out = "run";

  ModelConfig model_config() const;
  DiffusionSchedule make_schedule() const;
  TrainConfig train_config() const;  // train with train.seed = seed
  void validate() const;
};

nlohmann::json to_json(const RunConfig& c);
// ConfigError on unknown keys, wrong types or invalid values.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// FNV-1a 64 over the canonical (sorted-key) JSON, excluding "out". Hex.
std::string config_hash(const RunConfig& c);
// Same, additionally excluding the variant and seed: equal for runs that
// share a budget.
std::string budget_hash(const RunConfig& c);

std::string fnv1a_hex(const std::string& bytes);

// Canonical serialization: sorted keys, shortest round-trip doubles.
std::string canonical_dump(const nlohmann::json& j, int indent = -1);

}  // namespace mnvton
