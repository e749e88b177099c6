#include "dubox/trainer.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "dubox/losses.hpp"
#include "dubox/optim.hpp"
#include "dubox/parallel.hpp"

namespace dubox {

std::string csv_header() { return "iter,total,d1_bbox,d1_cls,d2_bbox,d2_cls,N1,N2,gated1,gated2"; }

std::string format_csv_row(const TrainLogRow& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g,%.9g,%zu,%zu,%zu,%zu", r.iter, r.total,
                r.d1_bbox, r.d1_cls, r.d2_bbox, r.d2_cls, r.n1, r.n2, r.gated1, r.gated2);
  return buf;
}

namespace {

std::mt19937_64 rng_for(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(a), static_cast<std::uint32_t>(b)};
  return std::mt19937_64(seq);
}

}  // namespace

Trainer::Trainer(const RunConfig& cfg, std::span<const DatasetRecord> records)
    : cfg_(cfg), records_(records), table_(make_batch_balance_table(records)), model_(cfg.model) {
  cfg_.validate();
  for (const auto& r : records_) {
    check_model_matches(cfg_.model, cfg_.model.num_classes, r.width(), r.height());
  }
  cfg_.augment.out_w = cfg_.model.input_w;
  cfg_.augment.out_h = cfg_.model.input_h;
}

void Trainer::resume(const Checkpoint& ckpt) {
  if (!(ModelConfig::from_kv(ckpt.header) == cfg_.model)) {
    throw ContractError("resume: checkpoint model differs from the configured model");
  }
  restore_parameters<float>(ckpt, model_.parameters());
  iteration_ = checkpoint_iteration(ckpt);
}

double Trainer::current_lr() const {
  const int next = iteration_ + 1;
  return next >= cfg_.optimizer.lr_drop_at ? cfg_.optimizer.lr * 0.1 : cfg_.optimizer.lr;
}

TrainLogRow Trainer::step() {
  const int iter = iteration_ + 1;
  const std::size_t B = static_cast<std::size_t>(cfg_.batch_size);

  auto rng = rng_for(cfg_.seed, static_cast<std::uint64_t>(iter), 0);
  std::vector<std::size_t> picks(B);
  for (auto& p : picks) p = table_.sample_record(rng);

  std::vector<DatasetRecord> batch(B);
  std::array<std::vector<TargetMaps>, 2> targets{std::vector<TargetMaps>(B), std::vector<TargetMaps>(B)};
  parallel_for(B, [&](std::size_t b) {
    auto local = rng_for(cfg_.seed, static_cast<std::uint64_t>(iter), b + 1);
    batch[b] = augment(records_[picks[b]], cfg_.augment, local);
    for (int d = 1; d <= 2; ++d) {
      const auto grid = HookGrid::for_detector(d, batch[b].width(), batch[b].height());
      targets[static_cast<std::size_t>(d - 1)][b] = encode_targets(batch[b].gts, grid, cfg_.encoder);
    }
  });
  std::vector<const DatasetRecord*> ptrs;
  for (const auto& r : batch) ptrs.push_back(&r);
  const Tensor images = stack_images<float>(ptrs);

  Tape<float> tape;
  CombinedLoss<float> loss;
  {
    TapeScope<float> scope(tape);
    const ForwardResult<float> out = model_.forward(images);
    loss = detection_loss<float>({DetectorPrediction<float>{out.d1.cls, out.d1.bbox},
                                  DetectorPrediction<float>{out.d2.cls, out.d2.bbox}},
                                 targets, cfg_.loss);
  }
  backward(tape, loss.total, model_.parameters());

  SgdOptions opts;
  opts.lr = current_lr();
  opts.momentum = cfg_.optimizer.momentum;
  opts.weight_decay = cfg_.optimizer.weight_decay;
  opts.clip = cfg_.optimizer.clip;
  sgd_step<float>(model_.parameters(), opts);
  iteration_ = iter;

  const auto& s = loss.breakdown.detectors;
  TrainLogRow row;
  row.iter = iter;
  row.total = loss.breakdown.total;
  row.d1_bbox = s[0].bbox_loss;
  row.d1_cls = s[0].cls_loss;
  row.d2_bbox = s[1].bbox_loss;
  row.d2_cls = s[1].cls_loss;
  row.n1 = s[0].positives;
  row.n2 = s[1].positives;
  row.gated1 = s[0].gated_out;
  row.gated2 = s[1].gated_out;
  return row;
}

Checkpoint Trainer::checkpoint() const {
  return model_.to_checkpoint("iteration=" + std::to_string(iteration_) + "\n");
}

int checkpoint_iteration(const Checkpoint& ckpt) {
  std::istringstream in(ckpt.header);
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("iteration=", 0) == 0) {
      try {
        return std::stoi(line.substr(10));
      } catch (const std::exception&) {
        throw ContractError("checkpoint header has a malformed iteration");
      }
    }
  }
  return 0;
}

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int iteration) {
  char name[32];
  std::snprintf(name, sizeof name, "ckpt_%06d.ckpt", iteration);
  return dir / name;
}

DuBoxModel<float> run_training(const RunConfig& cfg, std::span<const DatasetRecord> records,
                               const TrainRunOptions& options) {
  Trainer trainer(cfg, records);
  if (!options.resume_from.empty()) trainer.resume(read_checkpoint(options.resume_from));

  std::ofstream log;
  if (!options.output_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(options.output_dir, ec);
    if (ec) throw IOError("cannot create " + options.output_dir.string() + ": " + ec.message());
    const auto log_path = options.output_dir / "train_log.csv";
    const bool fresh = options.resume_from.empty() || !std::filesystem::exists(log_path);
    if (fresh) {
      log.open(log_path, std::ios::trunc);
      if (log) log << csv_header() << '\n';
    } else {
      // Drop rows past the resume point so numbering continues without gaps
      // or duplicates.
      std::ifstream in(log_path);
      std::vector<std::string> kept;
      std::string line;
      while (std::getline(in, line)) {
        if (kept.empty()) {
          kept.push_back(line);
          continue;
        }
        if (std::stoi(line.substr(0, line.find(','))) <= trainer.iteration()) kept.push_back(line);
      }
      in.close();
      log.open(log_path, std::ios::trunc);
      for (const auto& l : kept) log << l << '\n';
    }
    if (!log) throw IOError("cannot write " + log_path.string());
  }

  while (!trainer.done()) {
    const TrainLogRow row = trainer.step();
    if (log.is_open()) log << format_csv_row(row) << '\n' << std::flush;
    if (options.on_row) options.on_row(row);
    if (!options.output_dir.empty() && row.iter % cfg.checkpoint_every == 0) {
      write_checkpoint(checkpoint_path(options.output_dir, row.iter), trainer.checkpoint());
    }
  }
  if (!options.output_dir.empty()) {
    write_checkpoint(options.output_dir / "model.ckpt", trainer.checkpoint());
  }
  return trainer.model();
}

}  // namespace dubox
