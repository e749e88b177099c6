#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dubox/checkpoint.hpp"
#include "dubox/config.hpp"
#include "dubox/dataio.hpp"
#include "dubox/network.hpp"

namespace dubox {

struct TrainLogRow {
  int iter = 0;
  double total = 0;
  double d1_bbox = 0, d1_cls = 0;
  double d2_bbox = 0, d2_cls = 0;
  std::size_t n1 = 0, n2 = 0;  // gate-passing positives per detector
  std::size_t gated1 = 0, gated2 = 0;
};

std::string csv_header();
std::string format_csv_row(const TrainLogRow& row);

// Owns the model and optimiser state of one training run. Every iteration
// draws its batch from an RNG seeded by (seed, iteration), so a resumed run
// continues exactly where an uninterrupted one would be.
class Trainer {
 public:
  // `records` must outlive the trainer.
  Trainer(const RunConfig& cfg, std::span<const DatasetRecord> records);

  // Loads weights, momentum buffers and the iteration counter. Throws
  // ContractError when the checkpoint's model differs from the config.
  void resume(const Checkpoint& ckpt);

  // Runs iteration iteration()+1.
  TrainLogRow step();

  int iteration() const { return iteration_; }
  bool done() const { return iteration_ >= cfg_.optimizer.iterations; }
  double current_lr() const;

  const DuBoxModel<float>& model() const { return model_; }
  DuBoxModel<float>& model() { return model_; }
  Checkpoint checkpoint() const;

 private:
  RunConfig cfg_;
  std::span<const DatasetRecord> records_;
  BatchBalanceTable table_;
  DuBoxModel<float> model_;
  int iteration_ = 0;
};

// Iteration number stored in a training checkpoint header (0 if absent).
int checkpoint_iteration(const Checkpoint& ckpt);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iteration);

struct TrainRunOptions {
  std::filesystem::path output_dir;  // empty: no files written
  std::filesystem::path resume_from;  // empty: fresh start
  std::function<void(const TrainLogRow&)> on_row;
};

// Trains to cfg.optimizer.iterations. With an output directory, appends rows
// to train_log.csv, writes ckpt_<iter>.ckpt every checkpoint_every
// iterations and model.ckpt at the end.
DuBoxModel<float> run_training(const RunConfig& cfg, std::span<const DatasetRecord> records,
                               const TrainRunOptions& options);

}  // namespace dubox
