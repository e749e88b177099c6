#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dubox/dataio.hpp"
#include "dubox/encoding.hpp"
#include "dubox/inference.hpp"
#include "dubox/losses.hpp"
#include "dubox/network.hpp"

namespace dubox {

struct OptimizerConfig {
  double lr = 1e-3;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double clip = 10.0;
  int iterations = 3000;
  int lr_drop_at = 2000;  // lr is multiplied by 0.1 from this iteration on
};

struct RunConfig {
  ModelConfig model;
  EncoderConfig encoder;
  LossConfig loss;
  OptimizerConfig optimizer;
  AugmentConfig augment;
  SynthConfig data;  // used by gen-data
  InferenceConfig inference;
  int batch_size = 16;
  int checkpoint_every = 500;
  std::uint64_t seed = 1;
  std::string dataset;     // dataset directory
  std::string output_dir;  // log and checkpoints

  // Throws ConfigError naming the offending key.
  void validate() const;
  nlohmann::ordered_json to_json() const;
};

// Strict parse: unknown keys and wrong types raise ConfigError with the key
// path (e.g. "optimizer.lr"). Missing keys keep their defaults.
RunConfig parse_run_config(const nlohmann::json& j);

// Relative `dataset` and `output_dir` are resolved against the file's
// directory. Throws IOError if unreadable, ConfigError if invalid.
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace dubox
