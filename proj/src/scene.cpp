#include "advperc/scene.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

namespace advperc {

namespace {

std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

/// Deterministic lattice noise in [-1, 1].
double lattice(std::uint64_t key, long x, long y) {
  const auto h = mix64(key ^ mix64(static_cast<std::uint64_t>(x) * 0x632be59bd9b4e019ULL ^
                                   static_cast<std::uint64_t>(y) * 0x85157af5ULL));
  return static_cast<double>(h >> 11) / static_cast<double>(1ULL << 53) * 2.0 - 1.0;
}

double value_noise(std::uint64_t key, double x, double y, double scale) {
  const double fx = x / scale, fy = y / scale;
  const long ix = static_cast<long>(std::floor(fx)), iy = static_cast<long>(std::floor(fy));
  const double tx = fx - static_cast<double>(ix), ty = fy - static_cast<double>(iy);
  const double a = lattice(key, ix, iy), b = lattice(key, ix + 1, iy);
  const double c = lattice(key, ix, iy + 1), d = lattice(key, ix + 1, iy + 1);
  return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty;
}

using Rgb = std::array<double, 3>;

enum class Shape2D { vehicle, pedestrian, rider, sign, light };

struct Item {
  Shape2D kind;
  int w = 0, h = 0;    // footprint extents in px
  int x = 0, y = 0;    // top-left in frame_curr
  int dx = 0, dy = 0;  // frame_curr position minus frame_prev position
  bool dynamic = false;
  Rgb color{};
  std::uint64_t texture_key = 0;
  double distance = 0.0;
};

int seg_class(Shape2D k) {
  switch (k) {
    case Shape2D::vehicle: return seg::kVehicle;
    case Shape2D::pedestrian: return seg::kPedestrian;
    case Shape2D::rider: return seg::kRider;
    default: return seg::kVoid;
  }
}

int det_class(Shape2D k) {
  switch (k) {
    case Shape2D::vehicle: return det::kVehicle;
    case Shape2D::pedestrian: return det::kPedestrian;
    case Shape2D::rider: return det::kRider;
    case Shape2D::sign: return det::kTrafficSign;
    case Shape2D::light: return det::kTrafficLight;
  }
  return 0;
}

/// Whether local pixel (u, v) of the footprint is covered by the shape.
bool covers(const Item& it, int u, int v) {
  const double cu = (it.w - 1) / 2.0, cv = (it.h - 1) / 2.0;
  switch (it.kind) {
    case Shape2D::vehicle:
    case Shape2D::light:
      return true;
    case Shape2D::pedestrian:
    case Shape2D::sign: {
      const double a = it.w / 2.0, b = it.h / 2.0;
      const double nu = (u - cu) / a, nv = (v - cv) / b;
      return nu * nu + nv * nv <= 1.0;
    }
    case Shape2D::rider: {
      const int body_h = std::max(2, static_cast<int>(std::lround(it.h * 0.6)));
      if (v >= body_h) return true;  // bicycle block
      const double a = std::max(1.0, it.w / 3.0), b = body_h / 2.0;
      const double nu = (u - cu) / a, nv = (v - (body_h - 1) / 2.0) / b;
      return nu * nu + nv * nv <= 1.0;
    }
  }
  return false;
}

Rgb shade(const Item& it, int u, int v, double noise_amp) {
  Rgb c = it.color;
  if (it.kind == Shape2D::vehicle && v < it.h / 3) c = {c[0] * 0.5 + 0.2, c[1] * 0.5 + 0.25, c[2] * 0.5 + 0.3};
  if (it.kind == Shape2D::rider && v >= static_cast<int>(std::lround(it.h * 0.6))) c = {0.12, 0.12, 0.14};
  if (it.kind == Shape2D::light && v < it.h / 3) c = {0.95, 0.2, 0.15};
  const double n = noise_amp * lattice(it.texture_key, u, v);
  for (auto& ch : c) ch = std::clamp(ch + n, 0.0, 1.0);
  return c;
}

double quantize8(double v) { return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0; }

bool rects_overlap(int ax, int ay, int aw, int ah, int bx, int by, int bw, int bh, int margin) {
  return ax - margin < bx + bw && bx - margin < ax + aw && ay - margin < by + bh && by - margin < ay + ah;
}

}  // namespace

void SceneParams::validate() const {
  auto check_range = [](const IntRange& r, const char* name) {
    if (r.min > r.max) throw std::invalid_argument(std::string("SceneParams: degenerate range ") + name);
  };
  check_range(object_count, "object_count");
  check_range(prop_count, "prop_count");
  check_range(object_size, "object_size");
  check_range(dx, "dx");
  check_range(dy, "dy");
  if (size < 16) throw std::invalid_argument("SceneParams: size must be at least 16");
  if (object_count.min < 0 || prop_count.min < 0) throw std::invalid_argument("SceneParams: negative count");
  if (object_size.min < 3 || object_size.max > static_cast<int>(size) / 2) {
    throw std::invalid_argument("SceneParams: object_size must lie in [3, size/2]");
  }
  if (!(dynamic_fraction >= 0.0 && dynamic_fraction <= 1.0)) {
    throw std::invalid_argument("SceneParams: dynamic_fraction must lie in [0,1]");
  }
  if (!(texture_scale > 0.0)) throw std::invalid_argument("SceneParams: texture_scale must be positive");
  if (!(noise_amplitude >= 0.0 && noise_amplitude <= 0.02)) {
    throw std::invalid_argument("SceneParams: noise_amplitude must lie in [0,0.02]");
  }
  if (!(frame_noise >= 0.0)) throw std::invalid_argument("SceneParams: frame_noise must be non-negative");
}

std::uint64_t sample_seed(std::uint64_t dataset_seed, std::size_t index) {
  return mix64(mix64(dataset_seed) ^ (static_cast<std::uint64_t>(index) + 1) * 0xd1b54a32d192ed03ULL);
}

int horizon_row(std::size_t size) { return static_cast<int>(std::lround(0.375 * static_cast<double>(size))); }

double background_distance(int row, std::size_t size) {
  const int hz = horizon_row(size);
  if (row <= hz) return 1.0;
  return static_cast<double>(static_cast<int>(size) - 1 - row) / static_cast<double>(static_cast<int>(size) - 1 - hz);
}

Sample generate_scene(const SceneParams& params, std::uint64_t seed) {
  params.validate();
  std::mt19937_64 rng(seed);
  auto uniform = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  auto integer = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };

  const int S = static_cast<int>(params.size);
  const int hz = horizon_row(params.size);
  const double road_center = S / 2.0 + uniform(-0.12, 0.12) * S;
  const double road_top = 0.05 * S, road_bottom = uniform(0.38, 0.48) * S;
  const std::uint64_t bg_key = mix64(seed ^ 0xb5ad4eceda1ce2a9ULL);
  const Rgb sky{uniform(0.5, 0.65), uniform(0.65, 0.78), uniform(0.82, 0.95)};
  const Rgb terrain{uniform(0.25, 0.4), uniform(0.4, 0.55), uniform(0.18, 0.3)};
  const double road_gray = uniform(0.3, 0.42);

  // Background layers.
  const std::size_t N = params.size * params.size;
  std::vector<int> bg_seg(N, seg::kVoid);
  std::vector<Rgb> bg_rgb(N);
  for (int y = 0; y < S; ++y) {
    const double t = y <= hz ? 0.0 : static_cast<double>(y - hz) / (S - 1 - hz);
    const double half = road_top + (road_bottom - road_top) * t;
    const double curb = std::max(1.0, 0.05 * S * t);
    for (int x = 0; x < S; ++x) {
      const std::size_t i = static_cast<std::size_t>(y * S + x);
      const double tex = value_noise(bg_key, x, y, params.texture_scale);
      const double grain = params.noise_amplitude * lattice(bg_key + 1, x, y);
      Rgb c;
      int label = seg::kVoid;
      if (y < hz) {
        const double fade = static_cast<double>(y) / hz;
        c = {sky[0] + 0.1 * fade, sky[1] + 0.05 * fade, sky[2] - 0.05 * fade};
        for (auto& ch : c) ch += 0.03 * tex;
      } else {
        const double off = std::abs(x + 0.5 - road_center);
        if (off <= half) {
          label = seg::kRoad;
          c = {road_gray + 0.05 * tex, road_gray + 0.05 * tex, road_gray + 0.06 * tex};
          const bool dash = ((y - hz) / 4) % 2 == 0;
          if (off <= std::max(0.5, 0.025 * S * t) && dash && y > hz + 1) {
            label = seg::kLane;
            c = {0.9, 0.88, 0.7};
          }
        } else if (off <= half + curb) {
          label = seg::kCurb;
          const bool stripe = ((y - hz) / 3) % 2 == 0;
          c = stripe ? Rgb{0.8, 0.8, 0.78} : Rgb{0.7, 0.25, 0.22};
        } else {
          c = {terrain[0] + 0.08 * tex, terrain[1] + 0.08 * tex, terrain[2] + 0.06 * tex};
        }
      }
      for (auto& ch : c) ch += grain;
      bg_rgb[i] = c;
      bg_seg[i] = label;
    }
  }

  // Foreground items, placed without overlap in both frames.
  std::vector<Item> items;
  const int n_objects = integer(params.object_count.min, params.object_count.max);
  const int n_props = integer(params.prop_count.min, params.prop_count.max);
  auto fits = [&](const Item& c) {
    const int px = c.x - c.dx, py = c.y - c.dy;
    if (c.x < 0 || c.y < 0 || c.x + c.w > S || c.y + c.h > S) return false;
    if (px < 0 || py < 0 || px + c.w > S || py + c.h > S) return false;
    for (const auto& o : items) {
      if (rects_overlap(c.x, c.y, c.w, c.h, o.x, o.y, o.w, o.h, 1)) return false;
      if (rects_overlap(px, py, c.w, c.h, o.x - o.dx, o.y - o.dy, o.w, o.h, 1)) return false;
    }
    return true;
  };
  for (int k = 0; k < n_objects + n_props; ++k) {
    const bool prop = k >= n_objects;
    for (int attempt = 0; attempt < 60; ++attempt) {
      Item it;
      if (prop) {
        it.kind = integer(0, 1) == 0 ? Shape2D::sign : Shape2D::light;
        const int s = std::max(3, params.object_size.min / 2 + integer(0, 2));
        it.w = it.kind == Shape2D::sign ? s : std::max(2, s / 2);
        it.h = it.kind == Shape2D::sign ? s : s + 2;
        it.y = integer(1, std::max(1, hz - it.h - 1));
        it.x = integer(0, S - it.w);
        it.color = it.kind == Shape2D::sign ? Rgb{uniform(0.8, 0.95), uniform(0.7, 0.9), uniform(0.1, 0.25)}
                                            : Rgb{0.1, 0.1, 0.1};
        it.distance = 0.9;
      } else {
        const int r = integer(0, 9);
        it.kind = r < 5 ? Shape2D::vehicle : (r < 8 ? Shape2D::pedestrian : Shape2D::rider);
        const int bottom = integer(hz + 4, S - 1);
        const double depth_t = static_cast<double>(bottom - hz) / (S - 1 - hz);
        const int s = static_cast<int>(std::lround(params.object_size.min +
                                                   (params.object_size.max - params.object_size.min) * depth_t));
        switch (it.kind) {
          case Shape2D::vehicle: it.w = s; it.h = std::max(3, static_cast<int>(std::lround(0.65 * s))); break;
          case Shape2D::pedestrian: it.h = s; it.w = std::max(3, s / 3); break;
          default: it.h = s; it.w = std::max(4, s / 2); break;
        }
        it.y = bottom - it.h + 1;
        const double lane_bias = uniform(-0.35, 0.35) * S;
        it.x = static_cast<int>(std::lround(road_center + lane_bias - it.w / 2.0));
        it.dynamic = uniform(0.0, 1.0) < params.dynamic_fraction;
        if (it.dynamic) {
          it.dx = integer(params.dx.min, params.dx.max);
          it.dy = integer(params.dy.min, params.dy.max);
        }
        it.color = {uniform(0.05, 0.95), uniform(0.05, 0.95), uniform(0.05, 0.95)};
        if (it.kind != Shape2D::vehicle) it.color = {uniform(0.55, 0.85), uniform(0.2, 0.45), uniform(0.3, 0.7)};
        it.distance = std::max(0.0, background_distance(bottom, params.size) - 0.03);
      }
      it.texture_key = mix64(seed + 0x1000 + static_cast<std::uint64_t>(k));
      if (fits(it)) {
        items.push_back(it);
        break;
      }
    }
  }
  std::stable_sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.distance > b.distance; });

  Sample s;
  s.seed = seed;
  s.gt_distance.resize(N);
  s.gt_seg = bg_seg;
  s.gt_motion.assign(N, motion::kStatic);
  s.instance.assign(N, -1);
  for (std::size_t i = 0; i < N; ++i) s.gt_distance[i] = background_distance(static_cast<int>(i) / S, params.size);

  std::vector<Rgb> prev = bg_rgb, curr = bg_rgb;
  for (std::size_t id = 0; id < items.size(); ++id) {
    const auto& it = items[id];
    int x0 = S, y0 = S, x1 = -1, y1 = -1;
    for (int v = 0; v < it.h; ++v) {
      for (int u = 0; u < it.w; ++u) {
        if (!covers(it, u, v)) continue;
        const Rgb c = shade(it, u, v, params.noise_amplitude);
        const auto ci = static_cast<std::size_t>((it.y + v) * S + it.x + u);
        const auto pi = static_cast<std::size_t>((it.y - it.dy + v) * S + it.x - it.dx + u);
        curr[ci] = c;
        prev[pi] = c;
        s.gt_seg[ci] = seg_class(it.kind);
        s.gt_distance[ci] = it.distance;
        s.instance[ci] = static_cast<int>(id);
        if (it.dynamic) s.gt_motion[ci] = motion::kDynamic;
        x0 = std::min(x0, it.x + u);
        x1 = std::max(x1, it.x + u);
        y0 = std::min(y0, it.y + v);
        y1 = std::max(y1, it.y + v);
      }
    }
    Box b;
    b.cls = det_class(it.kind);
    b.cx = static_cast<float>((x0 + x1 + 1) / 2.0 / S);
    b.cy = static_cast<float>((y0 + y1 + 1) / 2.0 / S);
    b.w = static_cast<float>((x1 - x0 + 1) / static_cast<double>(S));
    b.h = static_cast<float>((y1 - y0 + 1) / static_cast<double>(S));
    s.gt_boxes.push_back(b);
  }
  for (auto& d : s.gt_distance) d = static_cast<float>(d);

  std::normal_distribution<double> photo(0.0, 1.0);
  auto pack = [&](const std::vector<Rgb>& img) {
    std::vector<double> data(3 * N);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double n = params.frame_noise > 0.0 ? params.frame_noise * photo(rng) : 0.0;
        data[ch * N + i] = quantize8(img[i][ch] + n);
      }
    }
    return Tensor({1, 3, params.size, params.size}, std::move(data));
  };
  s.frame_prev = pack(prev);
  s.frame_curr = pack(curr);
  return s;
}

Dataset generate_dataset(std::size_t n, const SceneParams& params, std::uint64_t seed, double test_fraction) {
  if (n == 0) throw std::invalid_argument("generate_dataset: n must be positive");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("generate_dataset: test_fraction must lie in [0,1)");
  }
  params.validate();
  Dataset ds;
  ds.params = params;
  ds.seed = seed;
  const auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * test_fraction + 1e-9));
  for (std::size_t i = 0; i < n; ++i) {
    auto sample = generate_scene(params, sample_seed(seed, i));
    (i < n - n_test ? ds.train : ds.test).push_back(std::move(sample));
  }
  return ds;
}

}  // namespace advperc
