#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <json.hpp>
#include <queue>
#include <sstream>
#include <stdexcept>

#include "advperc/scene.hpp"
#include "advperc/config.hpp"

namespace advperc {

namespace {

constexpr char kSampleMagic[8] = {'A', 'P', 'S', 'A', 'M', 'P', 'L', 'E'};
constexpr std::uint32_t kSampleVersion = 1;

template <typename T>
void put(std::ostream& out, T value) {
  out.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get(std::istream& in) {
  T value{};
  in.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!in) throw std::runtime_error("truncated sample file");
  return value;
}

void put_image(std::ostream& out, const Tensor& img) {
  for (double v : img.data()) put<std::uint8_t>(out, static_cast<std::uint8_t>(std::lround(v * 255.0)));
}

Tensor get_image(std::istream& in, std::size_t h, std::size_t w) {
  std::vector<double> data(3 * h * w);
  for (auto& v : data) v = get<std::uint8_t>(in) / 255.0;
  return Tensor({1, 3, h, w}, std::move(data));
}

std::string sample_name(std::size_t index) {
  std::ostringstream name;
  name << "sample_" << std::setw(5) << std::setfill('0') << index << ".bin";
  return name.str();
}

}  // namespace

void save_sample(const Sample& s, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  const std::size_t h = s.height(), w = s.width();
  out.write(kSampleMagic, sizeof(kSampleMagic));
  put<std::uint32_t>(out, kSampleVersion);
  put<std::uint64_t>(out, s.seed);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(h));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(w));
  put_image(out, s.frame_prev);
  put_image(out, s.frame_curr);
  for (double d : s.gt_distance) put<float>(out, static_cast<float>(d));
  for (int v : s.gt_seg) put<std::uint8_t>(out, static_cast<std::uint8_t>(v));
  for (int v : s.gt_motion) put<std::uint8_t>(out, static_cast<std::uint8_t>(v));
  for (int v : s.instance) put<std::int32_t>(out, v);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(s.gt_boxes.size()));
  for (const auto& b : s.gt_boxes) {
    put<std::int32_t>(out, b.cls);
    put<float>(out, static_cast<float>(b.cx));
    put<float>(out, static_cast<float>(b.cy));
    put<float>(out, static_cast<float>(b.w));
    put<float>(out, static_cast<float>(b.h));
  }
  if (!out) throw std::runtime_error("failed writing " + file.string());
}

Sample load_sample(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + file.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kSampleMagic, sizeof(magic)) != 0) {
    throw std::runtime_error(file.string() + ": not a sample file");
  }
  if (get<std::uint32_t>(in) != kSampleVersion) throw std::runtime_error(file.string() + ": unsupported version");
  Sample s;
  s.seed = get<std::uint64_t>(in);
  const std::size_t h = get<std::uint32_t>(in), w = get<std::uint32_t>(in);
  s.frame_prev = get_image(in, h, w);
  s.frame_curr = get_image(in, h, w);
  const std::size_t n = h * w;
  s.gt_distance.resize(n);
  for (auto& d : s.gt_distance) d = get<float>(in);
  s.gt_seg.resize(n);
  for (auto& v : s.gt_seg) v = get<std::uint8_t>(in);
  s.gt_motion.resize(n);
  for (auto& v : s.gt_motion) v = get<std::uint8_t>(in);
  s.instance.resize(n);
  for (auto& v : s.instance) v = get<std::int32_t>(in);
  const auto boxes = get<std::uint32_t>(in);
  for (std::uint32_t k = 0; k < boxes; ++k) {
    Box b;
    b.cls = get<std::int32_t>(in);
    b.cx = get<float>(in);
    b.cy = get<float>(in);
    b.w = get<float>(in);
    b.h = get<float>(in);
    s.gt_boxes.push_back(b);
  }
  return s;
}

void save_dataset(const Dataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "advperc-dataset";
  manifest["version"] = 1;
  manifest["seed"] = ds.seed;
  manifest["params"] = to_json(ds.params);
  auto entries = nlohmann::json::array();
  std::size_t index = 0;
  for (const auto* split : {&ds.train, &ds.test}) {
    for (const auto& s : *split) {
      const auto name = sample_name(index++);
      save_sample(s, dir / name);
      entries.push_back({{"file", name}, {"seed", s.seed}, {"split", split == &ds.train ? "train" : "test"}});
    }
  }
  manifest["samples"] = entries;
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("missing dataset manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(in);
  if (manifest.value("format", "") != "advperc-dataset") throw std::runtime_error("not a dataset manifest");
  Dataset ds;
  ds.seed = manifest.at("seed").get<std::uint64_t>();
  ds.params = scene_params_from_json(manifest.at("params"));
  for (const auto& e : manifest.at("samples")) {
    auto s = load_sample(dir / e.at("file").get<std::string>());
    if (s.seed != e.at("seed").get<std::uint64_t>()) throw std::runtime_error("sample seed does not match manifest");
    (e.at("split").get<std::string>() == "train" ? ds.train : ds.test).push_back(std::move(s));
  }
  return ds;
}

std::vector<std::string> sample_violations(const Sample& s) {
  std::vector<std::string> issues;
  const std::size_t h = s.height(), w = s.width(), n = h * w;
  if (s.gt_seg.size() != n || s.gt_motion.size() != n || s.gt_distance.size() != n || s.instance.size() != n) {
    return {"ground-truth map sizes differ from frame size"};
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (s.gt_motion[i] == motion::kDynamic) {
      const int c = s.gt_seg[i];
      if (c != seg::kVehicle && c != seg::kPedestrian && c != seg::kRider) {
        issues.push_back("dynamic pixel " + std::to_string(i) + " is not a foreground object");
      }
    }
    if (s.gt_distance[i] < 0.0 || s.gt_distance[i] > 1.0) issues.push_back("distance out of range");
    // objects touching the bottom row share the clamped floor distance 0 with the ground
    const double ground = background_distance(static_cast<int>(i / w), h);
    if (s.instance[i] >= 0 && !(s.gt_distance[i] < ground || (ground == 0.0 && s.gt_distance[i] == 0.0))) {
      issues.push_back("object pixel " + std::to_string(i) + " is not nearer than the background it occludes");
    }
  }
  for (std::size_t id = 0; id < s.gt_boxes.size(); ++id) {
    const auto& b = s.gt_boxes[id];
    try {
      validate_box(b);
    } catch (const std::exception& e) {
      issues.push_back(e.what());
      continue;
    }
    // Region to compare: the connected same-class component for segmented classes,
    // the instance footprint otherwise.
    std::size_t seedpix = n;
    for (std::size_t i = 0; i < n && seedpix == n; ++i) {
      if (s.instance[i] == static_cast<int>(id)) seedpix = i;
    }
    if (seedpix == n) {
      issues.push_back("box " + std::to_string(id) + " has no visible pixels");
      continue;
    }
    const int cls = s.gt_seg[seedpix];
    const bool segmented = b.cls == det::kVehicle || b.cls == det::kPedestrian || b.cls == det::kRider;
    std::vector<char> seen(n, 0);
    std::queue<std::size_t> todo;
    todo.push(seedpix);
    seen[seedpix] = 1;
    long x0 = static_cast<long>(w), y0 = static_cast<long>(h), x1 = -1, y1 = -1;
    while (!todo.empty()) {
      const auto i = todo.front();
      todo.pop();
      const long x = static_cast<long>(i % w), y = static_cast<long>(i / w);
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
      const long nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& q : nb) {
        if (q[0] < 0 || q[1] < 0 || q[0] >= static_cast<long>(w) || q[1] >= static_cast<long>(h)) continue;
        const auto j = static_cast<std::size_t>(q[1]) * w + static_cast<std::size_t>(q[0]);
        const bool member = segmented ? s.gt_seg[j] == cls : s.instance[j] == static_cast<int>(id);
        if (!seen[j] && member) {
          seen[j] = 1;
          todo.push(j);
        }
      }
    }
    const double W = static_cast<double>(w), H = static_cast<double>(h);
    const double ex0 = b.cx * W - b.w * W / 2, ex1 = b.cx * W + b.w * W / 2;
    const double ey0 = b.cy * H - b.h * H / 2, ey1 = b.cy * H + b.h * H / 2;
    if (std::abs(ex0 - x0) > 1.0 + 1e-4 || std::abs(ex1 - (x1 + 1)) > 1.0 + 1e-4 || std::abs(ey0 - y0) > 1.0 + 1e-4 ||
        std::abs(ey1 - (y1 + 1)) > 1.0 + 1e-4) {
      issues.push_back("box " + std::to_string(id) + " does not tightly bound its region");
    }
    if (segmented) {
      const int want = b.cls == det::kVehicle ? seg::kVehicle : (b.cls == det::kPedestrian ? seg::kPedestrian : seg::kRider);
      if (cls != want) issues.push_back("box " + std::to_string(id) + " class disagrees with segmentation");
    }
  }
  return issues;
}

}  // namespace advperc
