#include "dubox/inspect.hpp"

#include <cstdio>
#include <sstream>

namespace dubox {

namespace {

std::string fmt(const char* pattern, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, pattern, args...);
  return buf;
}

}  // namespace

std::string describe_targets(const DatasetRecord& rec, const EncoderConfig& cfg) {
  std::ostringstream os;
  os << fmt("record %s (%dx%d), %zu ground truths\n", rec.id.c_str(), rec.width(), rec.height(),
            rec.gts.size());
  const double image_area = double(rec.width()) * rec.height();
  for (std::size_t g = 0; g < rec.gts.size(); ++g) {
    const Box& b = rec.gts[g].box;
    os << fmt("gt %zu: class %d box [%.3f, %.3f, %.3f, %.3f] area_fraction %.4f\n", g,
              rec.gts[g].class_id, b.x1, b.y1, b.x2, b.y2, b.area() / image_area);
  }
  for (int d = 1; d <= 2; ++d) {
    const HookGrid grid = HookGrid::for_detector(d, rec.width(), rec.height());
    const TargetMaps t = encode_targets(rec.gts, grid, cfg);
    os << fmt("detector %d (stride %d, map %dx%d)\n", d, grid.stride, grid.map_w, grid.map_h);
    for (std::size_t g = 0; g < t.ranges.size(); ++g) {
      const PositiveRange& r = t.ranges[g];
      std::size_t owned = 0;
      for (const Hook& h : r.hooks) owned += t.owner[t.index(h.i, h.j)] == static_cast<int>(g);
      os << fmt("  gt %zu: centre (%.4f, %.4f) radius %.4f fallback %s range %zu owned %zu\n", g,
                r.cx, r.cy, r.radius, r.fallback ? "yes" : "no", r.hooks.size(), owned);
      for (const Hook& h : r.hooks) {
        const std::size_t at = t.index(h.i, h.j);
        if (t.owner[at] != static_cast<int>(g)) {
          os << fmt("    hook (%d,%d) owned by gt %d\n", h.i, h.j, t.owner[at]);
          continue;
        }
        const Offsets o = t.offsets_at(h.i, h.j);
        os << fmt("    hook (%d,%d) offsets %.6f %.6f %.6f %.6f bbox_weight %d clamped %s\n", h.i,
                  h.j, o[0], o[1], o[2], o[3], int(t.bbox_weight[at]), t.clamped[at] ? "yes" : "no");
      }
    }
    os << fmt("  positives %zu\n", t.positive_count());
    for (int j = 0; j < grid.map_h; ++j) {
      os << "  ";
      for (int i = 0; i < grid.map_w; ++i) {
        const std::size_t at = t.index(i, j);
        if (!t.positive_mask[at]) {
          os << '.';
        } else if (!t.bbox_weight[at]) {
          os << '#';
        } else {
          os << static_cast<char>('0' + t.owner[at] % 10);
        }
      }
      os << '\n';
    }
  }
  return os.str();
}

}  // namespace dubox
