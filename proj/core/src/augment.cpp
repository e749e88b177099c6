#include <algorithm>
#include <cmath>

#include "dubox/dataio.hpp"

namespace dubox {

namespace {

DatasetRecord blank_like(const DatasetRecord& rec, std::size_t h, std::size_t w) {
  DatasetRecord out;
  out.id = rec.id;
  out.image = Tensor(Shape{rec.image.dim(0), h, w});
  return out;
}

bool keeps_valid_box(const Box& b) { return b.width() >= 2 && b.height() >= 2; }

}  // namespace

DatasetRecord expand(const DatasetRecord& rec, double ratio, int left, int top) {
  if (!(ratio >= 1.0)) throw ContractError("expand: ratio must be >= 1");
  const int W = rec.width(), H = rec.height();
  const int cw = static_cast<int>(std::lround(W * ratio));
  const int ch = static_cast<int>(std::lround(H * ratio));
  if (left < 0 || top < 0 || left + W > cw || top + H > ch) {
    throw ContractError("expand: placement leaves the canvas");
  }
  const std::size_t C = rec.image.dim(0);
  DatasetRecord out = blank_like(rec, static_cast<std::size_t>(ch), static_cast<std::size_t>(cw));
  auto src = rec.image.data();
  auto dst = out.image.data();
  const std::size_t src_plane = std::size_t(W) * H, dst_plane = std::size_t(cw) * ch;
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0;
    for (std::size_t i = 0; i < src_plane; ++i) mean += src[c * src_plane + i];
    const float fill = static_cast<float>(mean / double(src_plane));
    std::fill_n(dst.begin() + static_cast<std::ptrdiff_t>(c * dst_plane), dst_plane, fill);
    for (int y = 0; y < H; ++y) {
      const float* row = &src[c * src_plane + std::size_t(y) * W];
      std::copy(row, row + W, &dst[c * dst_plane + std::size_t(y + top) * cw + std::size_t(left)]);
    }
  }
  for (const auto& g : rec.gts) {
    out.gts.push_back({Box{g.box.x1 + left, g.box.y1 + top, g.box.x2 + left, g.box.y2 + top}, g.class_id});
  }
  return out;
}

DatasetRecord crop(const DatasetRecord& rec, const CropWindow& win) {
  const int W = rec.width(), H = rec.height();
  if (win.w <= 0 || win.h <= 0 || win.x < 0 || win.y < 0 || win.x + win.w > W || win.y + win.h > H) {
    throw ContractError("crop: window outside the image");
  }
  const std::size_t C = rec.image.dim(0);
  DatasetRecord out = blank_like(rec, static_cast<std::size_t>(win.h), static_cast<std::size_t>(win.w));
  auto src = rec.image.data();
  auto dst = out.image.data();
  const std::size_t src_plane = std::size_t(W) * H, dst_plane = std::size_t(win.w) * win.h;
  for (std::size_t c = 0; c < C; ++c) {
    for (int y = 0; y < win.h; ++y) {
      const float* row = &src[c * src_plane + std::size_t(y + win.y) * W + std::size_t(win.x)];
      std::copy(row, row + win.w, &dst[c * dst_plane + std::size_t(y) * win.w]);
    }
  }
  for (const auto& g : rec.gts) {
    const double cx = 0.5 * (g.box.x1 + g.box.x2), cy = 0.5 * (g.box.y1 + g.box.y2);
    if (cx < win.x || cx >= win.x + win.w || cy < win.y || cy >= win.y + win.h) continue;
    const Box b{std::max(g.box.x1, double(win.x)) - win.x, std::max(g.box.y1, double(win.y)) - win.y,
                std::min(g.box.x2, double(win.x + win.w)) - win.x,
                std::min(g.box.y2, double(win.y + win.h)) - win.y};
    if (keeps_valid_box(b)) out.gts.push_back({b, g.class_id});
  }
  return out;
}

DatasetRecord flip_horizontal(const DatasetRecord& rec) {
  const std::size_t C = rec.image.dim(0), H = rec.image.dim(1), W = rec.image.dim(2);
  DatasetRecord out = blank_like(rec, H, W);
  auto src = rec.image.data();
  auto dst = out.image.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < H; ++y) {
      const std::size_t row = (c * H + y) * W;
      for (std::size_t x = 0; x < W; ++x) dst[row + x] = src[row + (W - 1 - x)];
    }
  }
  const double w = double(W);
  for (const auto& g : rec.gts) {
    out.gts.push_back({Box{w - g.box.x2, g.box.y1, w - g.box.x1, g.box.y2}, g.class_id});
  }
  return out;
}

DatasetRecord photometric(const DatasetRecord& rec, double brightness_delta, double contrast) {
  DatasetRecord out;
  out.id = rec.id;
  out.gts = rec.gts;
  out.image = Tensor(rec.image.shape());
  auto src = rec.image.data();
  auto dst = out.image.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = static_cast<float>(std::clamp(src[i] * contrast + brightness_delta, 0.0, 1.0));
  }
  return out;
}

DatasetRecord resize_nearest(const DatasetRecord& rec, int out_w, int out_h) {
  if (out_w <= 0 || out_h <= 0) throw ContractError("resize: output size must be positive");
  const std::size_t C = rec.image.dim(0);
  const int W = rec.width(), H = rec.height();
  if (W == out_w && H == out_h) return rec;
  DatasetRecord out = blank_like(rec, static_cast<std::size_t>(out_h), static_cast<std::size_t>(out_w));
  std::vector<std::size_t> xs(static_cast<std::size_t>(out_w)), ys(static_cast<std::size_t>(out_h));
  for (int x = 0; x < out_w; ++x) {
    xs[std::size_t(x)] = std::min<std::size_t>(std::size_t((x + 0.5) * W / out_w), std::size_t(W - 1));
  }
  for (int y = 0; y < out_h; ++y) {
    ys[std::size_t(y)] = std::min<std::size_t>(std::size_t((y + 0.5) * H / out_h), std::size_t(H - 1));
  }
  auto src = rec.image.data();
  auto dst = out.image.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t y = 0; y < std::size_t(out_h); ++y) {
      for (std::size_t x = 0; x < std::size_t(out_w); ++x) {
        dst[(c * out_h + y) * out_w + x] = src[(c * H + ys[y]) * W + xs[x]];
      }
    }
  }
  const double sx = double(out_w) / W, sy = double(out_h) / H;
  for (const auto& g : rec.gts) {
    const Box b{std::clamp(g.box.x1 * sx, 0.0, double(out_w)), std::clamp(g.box.y1 * sy, 0.0, double(out_h)),
                std::clamp(g.box.x2 * sx, 0.0, double(out_w)), std::clamp(g.box.y2 * sy, 0.0, double(out_h))};
    if (keeps_valid_box(b)) out.gts.push_back({b, g.class_id});
  }
  return out;
}

DatasetRecord augment(const DatasetRecord& rec, const AugmentConfig& cfg, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  DatasetRecord cur = rec;

  if (unit(rng) < cfg.expand_prob) {
    const double ratio = 1.0 + (cfg.max_expand - 1.0) * unit(rng);
    const int cw = static_cast<int>(std::lround(cur.width() * ratio));
    const int ch = static_cast<int>(std::lround(cur.height() * ratio));
    const int left = std::uniform_int_distribution<int>(0, cw - cur.width())(rng);
    const int top = std::uniform_int_distribution<int>(0, ch - cur.height())(rng);
    cur = expand(cur, ratio, left, top);
  }

  if (unit(rng) < cfg.crop_prob) {
    bool cropped = false;
    const int W = cur.width(), H = cur.height();
    for (int attempt = 0; attempt < cfg.crop_attempts && !cropped; ++attempt) {
      const double area = cfg.min_crop_area + (1.0 - cfg.min_crop_area) * unit(rng);
      const double aspect = std::exp(std::log(0.5) + std::log(4.0) * unit(rng));
      const int w = std::clamp(static_cast<int>(W * std::sqrt(area * aspect)), 1, W);
      const int h = std::clamp(static_cast<int>(H * std::sqrt(area / aspect)), 1, H);
      const CropWindow win{std::uniform_int_distribution<int>(0, W - w)(rng),
                           std::uniform_int_distribution<int>(0, H - h)(rng), w, h};
      DatasetRecord candidate = crop(cur, win);
      if (candidate.gts.empty()) continue;
      // Reject windows whose boxes would shrink below 2 px after resizing.
      candidate = resize_nearest(candidate, cfg.out_w, cfg.out_h);
      if (candidate.gts.empty()) continue;
      cur = std::move(candidate);
      cropped = true;
    }
    if (!cropped) return rec;
  }

  if (unit(rng) < cfg.flip_prob) cur = flip_horizontal(cur);
  const double delta = cfg.brightness * (2.0 * unit(rng) - 1.0);
  const double contrast = std::exp(std::log(cfg.contrast_low) +
                                   (std::log(cfg.contrast_high) - std::log(cfg.contrast_low)) * unit(rng));
  cur = photometric(cur, delta, contrast);
  cur = resize_nearest(cur, cfg.out_w, cfg.out_h);
  if (cur.gts.empty()) return rec;
  return cur;
}

}  // namespace dubox
