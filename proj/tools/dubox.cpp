// dubox command-line tool: dataset generation, training, evaluation,
// single-image detection and target inspection.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "dubox/checkpoint.hpp"
#include "dubox/config.hpp"
#include "dubox/dataio.hpp"
#include "dubox/errors.hpp"
#include "dubox/inference.hpp"
#include "dubox/inspect.hpp"
#include "dubox/network.hpp"
#include "dubox/parallel.hpp"
#include "dubox/trainer.hpp"

namespace {

using namespace dubox;

constexpr int kExitOk = 0;
constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIO = 3;
constexpr int kExitNumeric = 4;

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    if (c == '\n') {
      out += "\\n";
      continue;
    }
    out += c;
  }
  return out + "\"";
}

int report(const Error& e) {
  std::string line = std::string("dubox: error kind=") + e.kind();
  int code = kExitOther;
  if (const auto* ce = dynamic_cast<const ConfigError*>(&e)) {
    line += " key=" + ce->key_path();
    code = kExitConfig;
  } else if (const auto* fe = dynamic_cast<const FormatError*>(&e)) {
    line += " offset=" + std::to_string(fe->offset());
    code = kExitIO;
  } else if (dynamic_cast<const IOError*>(&e)) {
    code = kExitIO;
  } else if (dynamic_cast<const NumericError*>(&e)) {
    code = kExitNumeric;
  }
  std::cerr << line << " message=" << quote(e.what()) << '\n';
  return code;
}

DuBoxModel<float> load_model(const std::string& path) {
  return DuBoxModel<float>::from_checkpoint(read_checkpoint(path));
}

int cmd_gen_data(const std::string& config, int count, const std::string& out,
                 std::optional<std::uint64_t> seed) {
  RunConfig cfg = load_run_config(config);
  if (seed) cfg.data.seed = *seed;
  if (count < 1) throw ConfigError("--count", "must be >= 1");
  const auto records = generate(cfg.data, static_cast<std::size_t>(count));
  write_dataset(out, cfg.data, records);
  std::size_t boxes = 0;
  for (const auto& r : records) boxes += r.gts.size();
  std::cout << "wrote " << records.size() << " images, " << boxes << " boxes to " << out << '\n';
  return kExitOk;
}

int cmd_train(const std::string& config, const std::string& data, const std::string& out,
              const std::string& loss, const std::string& resume, int iterations, bool quiet) {
  RunConfig cfg = load_run_config(config);
  if (!data.empty()) cfg.dataset = data;
  if (!out.empty()) cfg.output_dir = out;
  if (!loss.empty()) {
    if (loss == "iou") {
      cfg.loss.bbox_loss = BboxLossKind::kIou;
    } else if (loss == "smooth-l1") {
      cfg.loss.bbox_loss = BboxLossKind::kSmoothL1;
    } else {
      throw ConfigError("--loss", "expected iou or smooth-l1");
    }
  }
  if (iterations > 0) cfg.optimizer.iterations = iterations;
  if (cfg.dataset.empty()) throw ConfigError("dataset", "no dataset directory given");
  if (cfg.output_dir.empty()) throw ConfigError("output_dir", "no output directory given");
  cfg.validate();

  const Dataset ds = read_dataset(cfg.dataset);
  std::filesystem::create_directories(cfg.output_dir);
  {
    std::ofstream echo(std::filesystem::path(cfg.output_dir) / "config.json");
    echo << cfg.to_json().dump(2) << '\n';
  }
  TrainRunOptions opts;
  opts.output_dir = cfg.output_dir;
  opts.resume_from = resume;
  const auto start = std::chrono::steady_clock::now();
  opts.on_row = [&](const TrainLogRow& row) {
    if (quiet || (row.iter % 50 != 0 && row.iter != cfg.optimizer.iterations)) return;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "iter %d loss %.4f (d1 %.3f/%.3f d2 %.3f/%.3f) N %zu/%zu  %.0fs\n", row.iter,
                 row.total, row.d1_bbox, row.d1_cls, row.d2_bbox, row.d2_cls, row.n1, row.n2, secs);
  };
  run_training(cfg, ds.records, opts);
  std::cout << "checkpoint " << (std::filesystem::path(cfg.output_dir) / "model.ckpt").string() << '\n';
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint, const std::string& data, const std::string& mode_text,
             const InferenceConfig& inf, bool json, const std::string& dump, double small_side) {
  const EvalMode mode = parse_eval_mode(mode_text);
  const DuBoxModel<float> model = load_model(checkpoint);
  const Dataset ds = read_dataset(data);
  if (ds.records.empty()) throw ContractError("dataset " + data + " is empty");
  check_model_matches(model.config(), ds.meta.num_classes, ds.records.front().width(),
                      ds.records.front().height());
  const ModelPredictor predictor(model);
  const EvalOutput out = evaluate(predictor, ds.records, mode, inf);
  if (!dump.empty()) {
    std::ofstream f(dump, std::ios::trunc);
    if (!f) throw IOError("cannot write " + dump);
    for (std::size_t k = 0; k < out.images.size(); ++k) {
      f << format_prediction(ds.records[k].id, out.images[k].detections) << '\n';
    }
  }
  if (json) {
    std::cout << out.report.to_json() << '\n';
  } else {
    std::cout << "mode " << to_string(mode) << '\n' << out.report.to_text();
  }
  if (small_side > 0) {
    const APReport small = small_object_ap(out.images, small_side);
    if (json) {
      std::cout << small.to_json() << '\n';
    } else {
      std::cout << "small objects (shorter side < " << small_side << " px)\n" << small.to_text();
    }
  }
  return kExitOk;
}

int cmd_detect(const std::string& checkpoint, const std::string& image, double score_threshold,
               double nms_threshold, const std::string& mode_text, const std::string& overlay) {
  const EvalMode mode = parse_eval_mode(mode_text);
  const DuBoxModel<float> model = load_model(checkpoint);
  DatasetRecord rec;
  rec.image = read_dbimg(image);
  rec.id = std::filesystem::path(image).stem().string();
  if (rec.image.dim(0) != 3) throw ContractError("detect: image must have 3 channels");
  check_model_matches(model.config(), model.config().num_classes, rec.width(), rec.height());
  const ModelPredictor predictor(model);
  InferenceConfig inf;
  inf.score_threshold = score_threshold;
  inf.nms_threshold = nms_threshold;
  const auto preds = predict_dataset(predictor, std::span<const DatasetRecord>(&rec, 1), score_threshold);
  const auto dets = finalize(preds.front(), mode, inf);
  std::cout << format_prediction(rec.id, dets) << '\n';
  if (!overlay.empty()) write_dbimg(overlay, draw_detections(rec.image, dets));
  return kExitOk;
}

int cmd_inspect(const std::string& config, const std::string& data, const std::string& id) {
  const RunConfig cfg = load_run_config(config);
  const Dataset ds = read_dataset(data.empty() ? cfg.dataset : data);
  std::cout << describe_targets(ds.by_id(id), cfg.encoder);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dubox: anchor-free dual-scale object detector"};
  app.require_subcommand(1);
  app.fallthrough();  // --threads may follow the subcommand
  int threads = 0;
  app.add_option("--threads", threads, "Worker threads (default: DUBOX_THREADS or all cores)");

  std::string config, out, data, checkpoint, image, mode = "joint", loss, resume, dump, overlay;
  int count = 1000, iterations = 0;
  std::optional<std::uint64_t> seed;
  bool quiet = false, json = false;
  double small_side = 0;
  InferenceConfig inf;
  std::string calibration = "none";
  double detect_threshold = 0.3;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen->add_option("--config", config, "Run config (JSON)")->required();
  gen->add_option("--count", count, "Number of images")->required();
  gen->add_option("--out", out, "Output dataset directory")->required();
  gen->add_option("--seed", seed, "Override data.seed");

  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--config", config, "Run config (JSON)")->required();
  train->add_option("--data", data, "Dataset directory (overrides config)");
  train->add_option("--out", out, "Output directory (overrides config)");
  train->add_option("--loss", loss, "Box loss: iou or smooth-l1");
  train->add_option("--resume", resume, "Checkpoint to resume from");
  train->add_option("--iterations", iterations, "Override optimizer.iterations");
  train->add_flag("--quiet", quiet, "No progress lines on stderr");

  auto* eval = app.add_subcommand("eval", "Evaluate mAP on a dataset");
  eval->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", data, "Dataset directory")->required();
  eval->add_option("--mode", mode, "joint, d1 or d2");
  eval->add_option("--score-threshold", inf.score_threshold, "Minimum class score (default 0.05)");
  eval->add_option("--nms-threshold", inf.nms_threshold, "NMS IoU threshold (default 0.5)");
  eval->add_option("--merge-calibration", calibration, "none or minmax");
  eval->add_option("--dump", dump, "Write final detections as JSONL");
  eval->add_option("--small-objects", small_side, "Also report AP on boxes with shorter side below this");
  eval->add_flag("--json", json, "Print the report as JSON");

  auto* detect = app.add_subcommand("detect", "Detect objects in one DBIMG image");
  detect->add_option("--checkpoint", checkpoint, "Model checkpoint")->required();
  detect->add_option("--image", image, "Input DBIMG file")->required();
  detect->add_option("--score-threshold", detect_threshold, "Minimum class score (default 0.3)");
  detect->add_option("--nms-threshold", inf.nms_threshold, "NMS IoU threshold (default 0.5)");
  detect->add_option("--mode", mode, "joint, d1 or d2");
  detect->add_option("--overlay", overlay, "Write the image with boxes drawn as DBIMG");

  auto* inspect = app.add_subcommand("inspect-targets", "Print encoded targets of one record");
  inspect->add_option("--config", config, "Run config (JSON)")->required();
  inspect->add_option("--data", data, "Dataset directory (overrides config)");
  inspect->add_option("--id", image, "Record id")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "dubox: error kind=UsageError message=" << quote(e.what()) << '\n';
    return kExitConfig;
  }

  try {
    if (threads > 0) set_thread_count(static_cast<std::size_t>(threads));
    if (*gen) return cmd_gen_data(config, count, out, seed);
    if (*train) return cmd_train(config, data, out, loss, resume, iterations, quiet);
    if (*eval) {
      inf.calibration = parse_merge_calibration(calibration);
      return cmd_eval(checkpoint, data, mode, inf, json, dump, small_side);
    }
    if (*detect) return cmd_detect(checkpoint, image, detect_threshold, inf.nms_threshold, mode, overlay);
    if (*inspect) return cmd_inspect(config, data, image);
  } catch (const Error& e) {
    return report(e);
  } catch (const std::filesystem::filesystem_error& e) {
    return report(IOError(e.what()));
  } catch (const std::exception& e) {
    std::cerr << "dubox: error kind=InternalError message=" << quote(e.what()) << '\n';
    return kExitOther;
  }
  return kExitOther;
}
