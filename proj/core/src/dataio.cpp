#include "dubox/dataio.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

namespace dubox {

static_assert(std::endian::native == std::endian::little, "DBIMG I/O assumes little-endian");

void DatasetRecord::validate() const {
  if (image.rank() != 3) throw ContractError("record " + id + ": image must be [C,H,W]");
  const double w = width();
  const double h = height();
  for (const auto& gt : gts) {
    const Box& b = gt.box;
    if (b.x1 < 0 || b.y1 < 0 || b.x2 > w || b.y2 > h) {
      throw ContractError("record " + id + ": box " + to_string(b) + " leaves the image");
    }
    if (b.width() < 2 || b.height() < 2) {
      throw ContractError("record " + id + ": box " + to_string(b) + " is smaller than 2 px");
    }
  }
}

void SynthConfig::validate() const {
  if (width <= 0 || height <= 0 || width % 64 != 0 || height % 64 != 0) {
    throw ContractError("synth: image size must be a positive multiple of 64");
  }
  if (num_classes < 1 || num_classes > 3) throw ContractError("synth: num_classes must be 1..3");
  if (min_objects < 1 || max_objects < min_objects) throw ContractError("synth: bad object count range");
  if (!(min_side >= 2) || max_side < min_side || max_side > std::min(width, height)) {
    throw ContractError("synth: bad size range");
  }
  if (!(large_fraction >= 0 && large_fraction <= 1)) throw ContractError("synth: large_fraction in [0,1]");
  if (!(large_area_threshold > 0 && large_area_threshold < 1)) {
    throw ContractError("synth: large_area_threshold in (0,1)");
  }
  if (large_fraction > 0 &&
      max_side * max_side <= large_area_threshold * width * height * 1.05) {
    throw ContractError("synth: max_side too small to produce large objects");
  }
  if (max_attempts < 1) throw ContractError("synth: max_attempts must be positive");
}

nlohmann::ordered_json SynthConfig::to_json() const {
  nlohmann::ordered_json j;
  j["width"] = width;
  j["height"] = height;
  j["num_classes"] = num_classes;
  j["min_objects"] = min_objects;
  j["max_objects"] = max_objects;
  j["min_side"] = min_side;
  j["max_side"] = max_side;
  j["large_fraction"] = large_fraction;
  j["large_area_threshold"] = large_area_threshold;
  j["noise"] = noise;
  j["max_pair_iou"] = max_pair_iou;
  j["max_attempts"] = max_attempts;
  j["seed"] = seed;
  return j;
}

SynthConfig SynthConfig::from_json(const nlohmann::json& j) {
  SynthConfig c;
  c.width = j.value("width", c.width);
  c.height = j.value("height", c.height);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.min_objects = j.value("min_objects", c.min_objects);
  c.max_objects = j.value("max_objects", c.max_objects);
  c.min_side = j.value("min_side", c.min_side);
  c.max_side = j.value("max_side", c.max_side);
  c.large_fraction = j.value("large_fraction", c.large_fraction);
  c.large_area_threshold = j.value("large_area_threshold", c.large_area_threshold);
  c.noise = j.value("noise", c.noise);
  c.max_pair_iou = j.value("max_pair_iou", c.max_pair_iou);
  c.max_attempts = j.value("max_attempts", c.max_attempts);
  c.seed = j.value("seed", c.seed);
  return c;
}

namespace {

struct Color {
  double rgb[3];
};

double color_distance(const Color& a, const Color& b) {
  return std::abs(a.rgb[0] - b.rgb[0]) + std::abs(a.rgb[1] - b.rgb[1]) + std::abs(a.rgb[2] - b.rgb[2]);
}

// Pixel-centre inside test for a shape drawn in the box [x, x+w) x [y, y+h).
struct ShapeSpec {
  ShapeKind kind;
  int x, y, w, h;
  double apex;       // triangle apex x in [x, x+w]
  bool apex_bottom;  // triangle orientation

  bool contains(double px, double py) const {
    switch (kind) {
      case ShapeKind::kRectangle:
        return px >= x && px < x + w && py >= y && py < y + h;
      case ShapeKind::kEllipse: {
        const double rx = w / 2.0, ry = h / 2.0;
        const double dx = (px - (x + rx)) / rx, dy = (py - (y + ry)) / ry;
        return dx * dx + dy * dy <= 1.0;
      }
      case ShapeKind::kTriangle: {
        const double base_y = apex_bottom ? y : y + h;
        const double tip_y = apex_bottom ? y + h : y;
        const double ax = x, ay = base_y, bx = x + w, by = base_y, cx = apex, cy = tip_y;
        auto edge = [](double x0, double y0, double x1, double y1, double qx, double qy) {
          return (x1 - x0) * (qy - y0) - (y1 - y0) * (qx - x0);
        };
        const double e0 = edge(ax, ay, bx, by, px, py);
        const double e1 = edge(bx, by, cx, cy, px, py);
        const double e2 = edge(cx, cy, ax, ay, px, py);
        return (e0 >= 0 && e1 >= 0 && e2 >= 0) || (e0 <= 0 && e1 <= 0 && e2 <= 0);
      }
    }
    return false;
  }
};

// Tight pixel bounding box of the rasterised shape, or a degenerate box.
Box rasterized_box(const ShapeSpec& s, int img_w, int img_h) {
  int minx = img_w, miny = img_h, maxx = -1, maxy = -1;
  for (int py = std::max(0, s.y); py < std::min(img_h, s.y + s.h); ++py) {
    for (int px = std::max(0, s.x); px < std::min(img_w, s.x + s.w); ++px) {
      if (s.contains(px + 0.5, py + 0.5)) {
        minx = std::min(minx, px);
        maxx = std::max(maxx, px);
        miny = std::min(miny, py);
        maxy = std::max(maxy, py);
      }
    }
  }
  if (maxx < 0) return Box{};
  return Box{double(minx), double(miny), double(maxx + 1), double(maxy + 1)};
}

}  // namespace

DatasetRecord generate_record(const SynthConfig& cfg, std::size_t index) {
  cfg.validate();
  std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed & 0xFFFFFFFFu),
                    static_cast<std::uint32_t>(cfg.seed >> 32),
                    static_cast<std::uint32_t>(index & 0xFFFFFFFFu),
                    static_cast<std::uint32_t>(index >> 32)};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int W = cfg.width, H = cfg.height;
  const double image_area = double(W) * H;

  Color background{};
  for (double& c : background.rgb) c = 0.2 + 0.6 * unit(rng);

  DatasetRecord rec;
  rec.id = "img" + std::to_string(index);
  rec.image = Tensor(Shape{3, static_cast<std::size_t>(H), static_cast<std::size_t>(W)});
  auto px = rec.image.data();
  const std::size_t plane = static_cast<std::size_t>(W) * H;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double v = background.rgb[c] + cfg.noise * (2.0 * unit(rng) - 1.0);
      px[c * plane + i] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }

  std::uniform_int_distribution<int> count_dist(cfg.min_objects, cfg.max_objects);
  const int objects = count_dist(rng);
  const bool force_large = unit(rng) < cfg.large_fraction;
  std::vector<Color> used_colors;
  const double log_lo = std::log(cfg.min_side), log_hi = std::log(cfg.max_side);

  for (int k = 0; k < objects; ++k) {
    const bool large = force_large && k == 0;
    const auto kind = static_cast<ShapeKind>(
        std::uniform_int_distribution<int>(0, cfg.num_classes - 1)(rng));
    bool placed = false;
    for (int attempt = 0; attempt < cfg.max_attempts && !placed; ++attempt) {
      int w, h;
      if (large) {
        const double lo = std::sqrt(cfg.large_area_threshold * image_area);
        w = static_cast<int>(lo + (cfg.max_side - lo) * unit(rng));
        h = static_cast<int>(lo + (cfg.max_side - lo) * unit(rng));
      } else {
        const double shorter = std::exp(log_lo + (log_hi - log_lo) * unit(rng));
        const double longer = std::min(cfg.max_side, shorter * (1.0 + unit(rng)));
        const bool wide = unit(rng) < 0.5;
        w = static_cast<int>(std::lround(wide ? longer : shorter));
        h = static_cast<int>(std::lround(wide ? shorter : longer));
      }
      w = std::clamp(w, 2, W);
      h = std::clamp(h, 2, H);
      ShapeSpec spec{kind,
                     std::uniform_int_distribution<int>(0, W - w)(rng),
                     std::uniform_int_distribution<int>(0, H - h)(rng),
                     w,
                     h,
                     0.0,
                     unit(rng) < 0.5};
      spec.apex = spec.x + w * unit(rng);
      const Box tight = rasterized_box(spec, W, H);
      if (tight.width() < 2 || tight.height() < 2) continue;
      if (std::min(tight.width(), tight.height()) < cfg.min_side) continue;
      const double frac = tight.area() / image_area;
      if (large ? frac <= cfg.large_area_threshold : frac > cfg.large_area_threshold) continue;
      bool overlaps = false;
      for (const auto& g : rec.gts) {
        if (iou(g.box, tight) > cfg.max_pair_iou) {
          overlaps = true;
          break;
        }
      }
      if (overlaps) continue;

      Color color{};
      for (int tries = 0; tries < 100; ++tries) {
        for (double& c : color.rgb) c = unit(rng);
        bool ok = color_distance(color, background) >= 0.6;
        for (const auto& u : used_colors) ok = ok && color_distance(color, u) >= 0.3;
        if (ok) break;
      }
      used_colors.push_back(color);
      for (int py = spec.y; py < spec.y + spec.h; ++py) {
        for (int pxl = spec.x; pxl < spec.x + spec.w; ++pxl) {
          if (!spec.contains(pxl + 0.5, py + 0.5)) continue;
          const std::size_t at = static_cast<std::size_t>(py) * W + static_cast<std::size_t>(pxl);
          for (std::size_t c = 0; c < 3; ++c) px[c * plane + at] = static_cast<float>(color.rgb[c]);
        }
      }
      rec.gts.push_back({tight, static_cast<int>(kind)});
      placed = true;
    }
  }
  return rec;
}

std::vector<DatasetRecord> generate(const SynthConfig& cfg, std::size_t count) {
  if (count < 1) throw ContractError("generate: count must be >= 1");
  std::vector<DatasetRecord> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) out.push_back(generate_record(cfg, k));
  return out;
}

// ---- DBIMG --------------------------------------------------------------

namespace {

constexpr char kDbimgMagic[4] = {'D', 'B', 'I', 'M'};
constexpr std::uint8_t kDbimgVersion = 1;

template <typename U>
void put(std::vector<std::uint8_t>& out, U v) {
  const auto* b = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), b, b + sizeof(U));
}

template <typename U>
U get(std::span<const std::uint8_t> in, std::size_t& pos, const char* what) {
  if (in.size() - pos < sizeof(U)) {
    throw FormatError(std::string("DBIMG truncated reading ") + what, pos);
  }
  U v;
  std::memcpy(&v, in.data() + pos, sizeof(U));
  pos += sizeof(U);
  return v;
}

std::vector<std::uint8_t> slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IOError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IOError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IOError("failed writing " + path.string());
}

}  // namespace

std::vector<std::uint8_t> encode_dbimg(const Tensor& image) {
  if (image.rank() != 3) throw ShapeError("DBIMG stores [C,H,W] images");
  std::vector<std::uint8_t> out(kDbimgMagic, kDbimgMagic + 4);
  out.push_back(kDbimgVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.dim(1)));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.dim(2)));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(image.dim(0)));
  const auto* b = reinterpret_cast<const std::uint8_t*>(image.data().data());
  out.insert(out.end(), b, b + image.numel() * sizeof(float));
  return out;
}

Tensor decode_dbimg(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDbimgMagic, 4) != 0) {
    throw FormatError("bad DBIMG magic", 0);
  }
  std::size_t pos = 4;
  const auto version = get<std::uint8_t>(bytes, pos, "version");
  if (version != kDbimgVersion) throw FormatError("unsupported DBIMG version", 4);
  const auto h = get<std::uint32_t>(bytes, pos, "height");
  const auto w = get<std::uint32_t>(bytes, pos, "width");
  const auto c = get<std::uint32_t>(bytes, pos, "channels");
  if (h == 0 || w == 0 || c == 0) throw FormatError("DBIMG with a zero dimension", 5);
  const std::size_t n = std::size_t(h) * w * c;
  if (bytes.size() - pos != n * sizeof(float)) {
    throw FormatError("DBIMG payload holds " + std::to_string(bytes.size() - pos) +
                          " bytes, expected " + std::to_string(n * sizeof(float)),
                      std::min(bytes.size(), pos + n * sizeof(float)));
  }
  std::vector<float> values(n);
  std::memcpy(values.data(), bytes.data() + pos, n * sizeof(float));
  return Tensor(Shape{c, h, w}, std::move(values));
}

void write_dbimg(const std::filesystem::path& path, const Tensor& image) {
  spit(path, encode_dbimg(image));
}

Tensor read_dbimg(const std::filesystem::path& path) { return decode_dbimg(slurp(path)); }

// ---- annotations / dataset ---------------------------------------------

std::string format_annotation(const AnnotationEntry& e) {
  nlohmann::ordered_json j;
  j["id"] = e.id;
  j["image"] = e.image;
  nlohmann::ordered_json boxes = nlohmann::ordered_json::array();
  for (const auto& gt : e.gts) {
    boxes.push_back({gt.box.x1, gt.box.y1, gt.box.x2, gt.box.y2, gt.class_id});
  }
  j["boxes"] = boxes;
  return j.dump();
}

AnnotationEntry parse_annotation(const std::string& line, int num_classes) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(std::string("annotation is not valid JSON: ") + e.what(), e.byte);
  }
  AnnotationEntry entry;
  try {
    entry.id = j.at("id").get<std::string>();
    entry.image = j.at("image").get<std::string>();
    for (const auto& b : j.at("boxes")) {
      if (!b.is_array() || b.size() != 5) throw FormatError("box entry must have 5 numbers", 0);
      const double cls = b[4].get<double>();
      if (cls != std::floor(cls)) throw FormatError("class id must be an integer", 0);
      const int class_id = static_cast<int>(cls);
      if (class_id < 0 || class_id >= num_classes) {
        throw ContractError("annotation " + entry.id + ": class id " + std::to_string(class_id) +
                            " outside [0," + std::to_string(num_classes) + ")");
      }
      entry.gts.push_back(
          {make_box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()),
           class_id});
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed annotation: ") + e.what(), 0);
  }
  return entry;
}

const DatasetRecord& Dataset::by_id(const std::string& id) const {
  for (const auto& r : records) {
    if (r.id == id) return r;
  }
  throw ContractError("dataset has no record '" + id + "'");
}

void write_dataset(const std::filesystem::path& dir, const SynthConfig& meta,
                   std::span<const DatasetRecord> records) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) throw IOError("cannot create " + (dir / "images").string() + ": " + ec.message());
  std::ofstream ann(dir / "annotations.jsonl", std::ios::trunc);
  if (!ann) throw IOError("cannot write " + (dir / "annotations.jsonl").string());
  for (const auto& r : records) {
    const std::string rel = "images/" + r.id + ".dbimg";
    write_dbimg(dir / rel, r.image);
    ann << format_annotation({r.id, rel, r.gts}) << '\n';
  }
  std::ofstream m(dir / "meta.json", std::ios::trunc);
  if (!m) throw IOError("cannot write " + (dir / "meta.json").string());
  m << meta.to_json().dump(2) << '\n';
}

Dataset read_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  {
    std::ifstream m(dir / "meta.json");
    if (!m) throw IOError("cannot open " + (dir / "meta.json").string());
    try {
      ds.meta = SynthConfig::from_json(nlohmann::json::parse(m));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("meta.json: ") + e.what(), 0);
    }
  }
  std::ifstream ann(dir / "annotations.jsonl");
  if (!ann) throw IOError("cannot open " + (dir / "annotations.jsonl").string());
  std::string line;
  while (std::getline(ann, line)) {
    if (line.empty()) continue;
    AnnotationEntry e = parse_annotation(line, ds.meta.num_classes);
    DatasetRecord r;
    r.id = e.id;
    r.gts = std::move(e.gts);
    r.image = read_dbimg(dir / e.image);
    r.validate();
    ds.records.push_back(std::move(r));
  }
  return ds;
}

BatchBalanceTable make_batch_balance_table(std::span<const DatasetRecord> records) {
  std::vector<std::vector<GroundTruth>> gts;
  gts.reserve(records.size());
  for (const auto& r : records) gts.push_back(r.gts);
  return BatchBalanceTable(gts);
}

template <typename T>
BasicTensor<T> stack_images(std::span<const DatasetRecord* const> records) {
  if (records.empty()) throw ContractError("stack_images: empty batch");
  const Shape& first = records.front()->image.shape();
  BasicTensor<T> out(Shape{records.size(), first[0], first[1], first[2]});
  auto dst = out.data();
  const std::size_t per = shape_numel(first);
  for (std::size_t n = 0; n < records.size(); ++n) {
    if (records[n]->image.shape() != first) throw ShapeError("stack_images: mixed image sizes");
    auto src = records[n]->image.data();
    for (std::size_t i = 0; i < per; ++i) dst[n * per + i] = static_cast<T>(src[i]);
  }
  return out;
}

template Tensor stack_images<float>(std::span<const DatasetRecord* const>);
template Tensor64 stack_images<double>(std::span<const DatasetRecord* const>);

}  // namespace dubox
