#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "dubox/checkpoint.hpp"
#include "dubox/config.hpp"
#include "dubox/inspect.hpp"
#include "dubox/trainer.hpp"

namespace dubox {
namespace {

namespace fs = std::filesystem;

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("dubox_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string config_error_path(const std::string& text) {
  try {
    parse_run_config(nlohmann::json::parse(text));
  } catch (const ConfigError& e) {
    return e.key_path();
  }
  return "<no error>";
}

RunConfig small_run(int iterations) {
  RunConfig cfg;
  cfg.model.head_channels = 8;
  cfg.model.backbone_channels = {4, 8, 8, 8, 8, 8};
  cfg.optimizer.lr = 0.01;
  cfg.optimizer.iterations = iterations;
  cfg.optimizer.lr_drop_at = 1000;
  cfg.batch_size = 4;
  cfg.checkpoint_every = 3;
  return cfg;
}

// ---- config ---------------------------------------------------------------

TEST(Config, DefaultsAndPartialOverrides) {
  const RunConfig c = parse_run_config(nlohmann::json::parse(R"({"optimizer": {"lr": 0.02}})"));
  EXPECT_EQ(c.optimizer.lr, 0.02);
  EXPECT_EQ(c.optimizer.momentum, 0.9);
  EXPECT_EQ(c.optimizer.weight_decay, 5e-4);
  EXPECT_EQ(c.optimizer.clip, 10.0);
  EXPECT_EQ(c.loss.epsilon, 0.5);
  EXPECT_EQ(c.loss.ohem_ratio, 3);
  EXPECT_EQ(c.encoder.p1, 10.0);
  EXPECT_EQ(c.encoder.p2, 9.0);
}

TEST(Config, JsonRoundTrip) {
  RunConfig c = small_run(7);
  c.loss.bbox_loss = BboxLossKind::kSmoothL1;
  c.model.residual_source = ResidualSource::kLow;
  c.inference.calibration = MergeCalibration::kMinMax;
  const RunConfig back = parse_run_config(c.to_json());
  EXPECT_EQ(back.to_json().dump(), c.to_json().dump());
}

TEST(Config, UnknownKeysNameTheirPath) {
  EXPECT_EQ(config_error_path(R"({"optimiser": {}})"), "optimiser");
  EXPECT_EQ(config_error_path(R"({"optimizer": {"learning_rate": 0.1}})"), "optimizer.learning_rate");
  EXPECT_EQ(config_error_path(R"({"model": {"depth": 3}})"), "model.depth");
}

TEST(Config, WrongTypesNameTheirPath) {
  EXPECT_EQ(config_error_path(R"({"optimizer": {"lr": "fast"}})"), "optimizer.lr");
  EXPECT_EQ(config_error_path(R"({"batch_size": 2.5})"), "batch_size");
  EXPECT_EQ(config_error_path(R"({"model": {"backbone_channels": [8, "x"]}})"),
            "model.backbone_channels[1]");
  EXPECT_EQ(config_error_path(R"({"model": 3})"), "model");
  EXPECT_EQ(config_error_path(R"({"loss": {"bbox_loss": "l2"}})"), "loss.bbox_loss");
}

TEST(Config, InvalidValuesNameTheirPath) {
  EXPECT_EQ(config_error_path(R"({"optimizer": {"lr": 0}})"), "optimizer.lr");
  EXPECT_EQ(config_error_path(R"({"optimizer": {"momentum": 1.0}})"), "optimizer.momentum");
  EXPECT_EQ(config_error_path(R"({"loss": {"epsilon": 1.0}})"), "loss");
  EXPECT_EQ(config_error_path(R"({"model": {"num_classes": 2}})"), "encoder.num_classes");
  EXPECT_EQ(config_error_path(R"({"batch_size": 0})"), "batch_size");
}

TEST(Config, LoadResolvesRelativePaths) {
  const fs::path dir = scratch_dir("config");
  std::ofstream(dir / "run.json") << R"({"dataset": "data", "output_dir": "/abs/out"})";
  const RunConfig c = load_run_config(dir / "run.json");
  EXPECT_EQ(fs::path(c.dataset), dir / "data");
  EXPECT_EQ(c.output_dir, "/abs/out");
  EXPECT_THROW(load_run_config(dir / "missing.json"), IOError);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "bad.json"), ConfigError);
}

TEST(Config, ShippedDefaultParses) {
  const RunConfig c = load_run_config(fs::path(DUBOX_CONFIG_DIR) / "default.json");
  EXPECT_NO_THROW(c.validate());
  EXPECT_LE(c.optimizer.iterations, 20000);
}

// ---- checkpoint -----------------------------------------------------------

TEST(Checkpoint, ByteLayout) {
  Checkpoint c;
  c.entries.push_back({"w", Shape{2}, {1.0f, 2.0f}});
  const auto bytes = encode_checkpoint(c);
  // magic 7 + version 2 + count 4 + name len 2 + "w" + rank 1 + dim 4 + 8 payload
  ASSERT_EQ(bytes.size(), 7u + 2 + 4 + 2 + 1 + 1 + 4 + 8);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 6), "DBCKPT");
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[7], 1);  // version, little-endian
  EXPECT_EQ(bytes[9], 1);  // entry count
  EXPECT_EQ(bytes[13], 1);  // name length
  EXPECT_EQ(bytes[15], 'w');
  EXPECT_EQ(bytes[16], 1);  // rank
  EXPECT_EQ(bytes[17], 2);  // dim
  float first;
  std::memcpy(&first, bytes.data() + 21, 4);
  EXPECT_EQ(first, 1.0f);
}

TEST(Checkpoint, HeaderTravelsAsReservedEntry) {
  Checkpoint c;
  c.header = "a=1\nb=x\n";
  c.entries.push_back({"w", Shape{1, 1}, {3.5f}});
  const Checkpoint back = decode_checkpoint(encode_checkpoint(c));
  EXPECT_EQ(back.header, c.header);
  ASSERT_EQ(back.entries.size(), 1u);
  EXPECT_EQ(back.entries[0].name, "w");
  EXPECT_EQ(back.entries[0].values, c.entries[0].values);
  EXPECT_EQ(back.find("#header"), nullptr);

  Checkpoint reserved;
  reserved.entries.push_back({"#header", Shape{1}, {65.0f}});
  EXPECT_THROW(encode_checkpoint(reserved), ContractError);
}

TEST(Checkpoint, MalformedBytesReportOffsets) {
  Checkpoint c;
  c.entries.push_back({"w", Shape{2}, {1.0f, 2.0f}});
  auto bytes = encode_checkpoint(c);
  auto offset_of = [](std::span<const std::uint8_t> b) -> std::uint64_t {
    try {
      decode_checkpoint(b);
    } catch (const FormatError& e) {
      return e.offset();
    }
    ADD_FAILURE() << "no FormatError";
    return ~0ull;
  };
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(offset_of(bad), 0u);
  bad = bytes;
  bad[7] = 9;
  EXPECT_EQ(offset_of(bad), 7u);
  EXPECT_EQ(offset_of(std::span(bytes).first(bytes.size() - 2)), 21u);
  bad = bytes;
  bad.push_back(0);
  EXPECT_EQ(offset_of(bad), bytes.size());
  c.entries[0].values.pop_back();
  EXPECT_THROW(encode_checkpoint(c), ShapeError);
}

TEST(Checkpoint, FileRoundTripAndMissingFile) {
  const fs::path dir = scratch_dir("ckpt");
  Checkpoint c;
  c.header = "iteration=4\n";
  c.entries.push_back({"w", Shape{3}, {1.0f, -2.0f, 0.5f}});
  write_checkpoint(dir / "a.ckpt", c);
  const Checkpoint back = read_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.header, c.header);
  EXPECT_EQ(checkpoint_iteration(back), 4);
  EXPECT_EQ(checkpoint_iteration(Checkpoint{}), 0);
  EXPECT_THROW(read_checkpoint(dir / "none.ckpt"), IOError);
  EXPECT_EQ(checkpoint_path(dir, 42).filename(), "ckpt_000042.ckpt");
}

// ---- trainer --------------------------------------------------------------

TEST(Trainer, FiftyIterationsOnAHundredImagesLowerTheLoss) {
  RunConfig cfg;
  cfg.optimizer.lr = 0.01;
  cfg.optimizer.iterations = 50;
  cfg.model.head_channels = 32;
  cfg.model.backbone_channels = {16, 32, 32, 64, 64, 64};
  const auto records = generate(cfg.data, 100);
  const fs::path dir = scratch_dir("train50");
  run_training(cfg, records, {dir, {}, {}});

  std::ifstream log(dir / "train_log.csv");
  std::string line;
  std::getline(log, line);
  EXPECT_EQ(line, csv_header());
  std::vector<double> totals;
  while (std::getline(log, line)) {
    std::stringstream ss(line);
    std::string iter, total;
    std::getline(ss, iter, ',');
    std::getline(ss, total, ',');
    EXPECT_EQ(std::stoi(iter), int(totals.size()) + 1);
    totals.push_back(std::stod(total));
  }
  ASSERT_EQ(totals.size(), 50u);
  const double early = (totals[0] + totals[1] + totals[2] + totals[3] + totals[4]) / 5;
  EXPECT_LT(totals[49], early);
  EXPECT_TRUE(fs::exists(dir / "model.ckpt"));
}

TEST(Trainer, ResumeContinuesExactlyAndWithoutGaps) {
  const RunConfig cfg = small_run(6);
  const auto records = generate(cfg.data, 12);
  const fs::path full = scratch_dir("resume_full"), part = scratch_dir("resume_part");
  run_training(cfg, records, {full, {}, {}});

  // Run to 5, then resume from the iteration-3 checkpoint: rows 4 and 5 are
  // rewritten rather than duplicated.
  RunConfig first = cfg;
  first.optimizer.iterations = 5;
  run_training(first, records, {part, {}, {}});
  run_training(cfg, records, {part, checkpoint_path(part, 3), {}});

  EXPECT_EQ(read_text(part / "train_log.csv"), read_text(full / "train_log.csv"));
  EXPECT_EQ(read_checkpoint(part / "model.ckpt").entries.size(),
            read_checkpoint(full / "model.ckpt").entries.size());
  const auto a = read_checkpoint(part / "model.ckpt"), b = read_checkpoint(full / "model.ckpt");
  for (std::size_t k = 0; k < a.entries.size(); ++k) EXPECT_EQ(a.entries[k].values, b.entries[k].values);
}

TEST(Trainer, ResumeRejectsADifferentModel) {
  RunConfig cfg = small_run(1);
  const auto records = generate(cfg.data, 4);
  Trainer t(cfg, records);
  t.step();
  const Checkpoint ckpt = t.checkpoint();
  cfg.model.head_channels = 16;
  Trainer other(cfg, records);
  EXPECT_THROW(other.resume(ckpt), ContractError);
}

TEST(Trainer, LearningRateDropsOnSchedule) {
  RunConfig cfg = small_run(4);
  cfg.optimizer.lr_drop_at = 3;
  const auto records = generate(cfg.data, 4);
  Trainer t(cfg, records);
  EXPECT_EQ(t.current_lr(), 0.01);
  t.step();
  EXPECT_EQ(t.current_lr(), 0.01);
  t.step();
  EXPECT_NEAR(t.current_lr(), 0.001, 1e-15);
  EXPECT_FALSE(t.done());
}

TEST(Trainer, RejectsDataThatDoesNotFitTheModel) {
  RunConfig cfg = small_run(1);
  SynthConfig other = cfg.data;
  other.width = other.height = 64;
  other.max_side = 48;
  const auto records = generate(other, 2);
  EXPECT_THROW(Trainer(cfg, records), ContractError);
}

// ---- inspect --------------------------------------------------------------

TEST(Inspect, MatchesGoldenDump) {
  SynthConfig data;
  data.seed = 7;
  const DatasetRecord rec = generate_record(data, 3);
  const std::string got = describe_targets(rec, EncoderConfig{});
  const fs::path golden = fs::path(DUBOX_GOLDEN_DIR) / "inspect_targets_seed7_3.txt";
  if (std::getenv("DUBOX_UPDATE_GOLDEN")) std::ofstream(golden) << got;
  EXPECT_EQ(got, read_text(golden));
}

}  // namespace
}  // namespace dubox
