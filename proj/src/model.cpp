#include "advperc/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <random>
#include <stdexcept>

#include "advperc/config.hpp"
#include "advperc/ops.hpp"

namespace advperc {

namespace {

constexpr std::size_t kDetHidden = 32;

ConvLayer make_conv(std::mt19937_64& rng, std::size_t in, std::size_t out, std::size_t k, int stride,
                    double gain = 1.0, double bias = 0.0) {
  std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / static_cast<double>(in * k * k)));
  std::vector<double> w(out * in * k * k);
  for (auto& v : w) v = normal(rng);
  ConvLayer layer;
  layer.weight = Tensor({out, in, k, k}, std::move(w));
  layer.bias = Tensor::full({out}, bias);
  layer.stride = stride;
  layer.padding = static_cast<int>(k / 2);
  return layer;
}

std::size_t decoder_width(std::size_t encoder_width) { return std::max<std::size_t>(8, encoder_width / 4); }

DenseDecoder make_decoder(std::mt19937_64& rng, const ModelConfig& cfg, std::size_t deep_channels,
                          std::size_t out_channels) {
  DenseDecoder d;
  const auto& ch = cfg.encoder_channels;
  std::size_t width = deep_channels;
  for (std::size_t level = ch.size() - 1; level-- > 0;) {
    const std::size_t out = decoder_width(ch[level]);
    d.blocks.push_back(make_conv(rng, width + ch[level], out, 3, 1));
    width = out;
  }
  d.head = make_conv(rng, width, out_channels, 3, 1, 0.5);
  return d;
}

Tensor apply(const ConvLayer& layer, const Tensor& x) {
  return ops::conv2d(x, layer.weight, layer.bias, layer.stride, layer.padding);
}

// Pointwise head activations commute with nearest upsampling, so they run at half resolution.
Tensor run_decoder(const DenseDecoder& d, const Tensor& deep, const Features& skips, Tensor (*activation)(const Tensor&)) {
  Tensor x = deep;
  for (std::size_t b = 0; b < d.blocks.size(); ++b) {
    const Tensor parts[] = {ops::upsample2x_nearest(x), skips[skips.size() - 2 - b]};
    x = ops::relu(apply(d.blocks[b], ops::concat_channels(parts)));
  }
  return ops::upsample2x_nearest(activation(apply(d.head, x)));
}

template <typename ModelT, typename Out>
void collect(ModelT& m, Out& out) {
  auto layer = [&](const std::string& name, auto& l) {
    out.emplace_back(name + ".weight", &l.weight);
    out.emplace_back(name + ".bias", &l.bias);
  };
  for (std::size_t i = 0; i < m.encoder.size(); ++i) layer("encoder." + std::to_string(i), m.encoder[i]);
  auto decoder = [&](const std::string& name, auto& d) {
    for (std::size_t i = 0; i < d.blocks.size(); ++i) layer(name + ".block" + std::to_string(i), d.blocks[i]);
    layer(name + ".head", d.head);
  };
  decoder("distance", m.distance);
  decoder("segmentation", m.segmentation);
  decoder("motion", m.motion);
  for (std::size_t i = 0; i < m.detection.size(); ++i) layer("detection." + std::to_string(i), m.detection[i]);
}

}  // namespace

void ModelConfig::validate() const {
  if (encoder_channels.empty()) throw std::invalid_argument("ModelConfig: encoder_channels is empty");
  for (auto c : encoder_channels) {
    if (c == 0) throw std::invalid_argument("ModelConfig: zero encoder width");
  }
  const std::size_t factor = std::size_t{1} << encoder_channels.size();
  if (input_size == 0 || input_size % factor != 0) {
    throw std::invalid_argument("ModelConfig: input_size must be divisible by 2^len(encoder_channels)");
  }
  if (seg_classes != static_cast<std::size_t>(seg::kNumClasses)) {
    throw std::invalid_argument("ModelConfig: seg_classes must be 7");
  }
  if (det_classes != static_cast<std::size_t>(det::kNumClasses)) {
    throw std::invalid_argument("ModelConfig: det_classes must be 5");
  }
  if (det_grid != input_size / factor) {
    throw std::invalid_argument("ModelConfig: det_grid must equal the deepest feature size " +
                                std::to_string(input_size / factor));
  }
}

std::vector<std::pair<std::string, Tensor*>> Model::parameters() {
  std::vector<std::pair<std::string, Tensor*>> out;
  collect(*this, out);
  return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::parameters() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  collect(*this, out);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : parameters()) n += t->numel();
  return n;
}

Model Model::trainable() const {
  Model m = *this;
  for (auto& [name, t] : m.parameters()) *t = t->as_leaf();
  return m;
}

Model Model::frozen() const {
  Model m = *this;
  for (auto& [name, t] : m.parameters()) *t = t->detach();
  return m;
}

Model make_model(const ModelConfig& config) {
  config.validate();
  std::mt19937_64 rng(config.seed);
  Model m;
  m.config = config;
  std::size_t in = 3;
  for (auto c : config.encoder_channels) {
    m.encoder.push_back(make_conv(rng, in, c, 3, 2));
    in = c;
  }
  const std::size_t deep = config.encoder_channels.back();
  m.distance = make_decoder(rng, config, deep, 1);
  m.segmentation = make_decoder(rng, config, deep, config.seg_classes);
  m.motion = make_decoder(rng, config, 2 * deep, motion::kNumClasses);
  m.detection.push_back(make_conv(rng, deep, kDetHidden, 3, 1));
  // Objectness starts pessimistic: most cells are empty.
  auto head = make_conv(rng, kDetHidden, det::kChannels, 1, 1, 0.5);
  std::vector<double> bias(det::kChannels, 0.0);
  bias[det::kObjectness] = -2.0;
  head.bias = Tensor({det::kChannels}, bias);
  m.detection.push_back(head);
  return m;
}

Features encode(const Model& model, const Tensor& frame) {
  const auto s = model.config.input_size;
  if (frame.shape() != Shape{1, 3, s, s}) {
    throw TensorError("encode: expected frame " + shape_str({1, 3, s, s}) + ", got " + shape_str(frame.shape()));
  }
  Features f;
  Tensor x = frame;
  for (const auto& layer : model.encoder) {
    x = ops::relu(apply(layer, x));
    f.push_back(x);
  }
  return f;
}

TaskOutputs decode(const Model& model, const Features& prev, const Features& curr) {
  TaskOutputs out;
  const Tensor& deep = curr.back();
  out.distance = run_decoder(model.distance, deep, curr, ops::sigmoid);
  out.segmentation = run_decoder(model.segmentation, deep, curr, ops::channel_softmax);
  const Tensor pair[] = {prev.back(), deep};
  out.motion = run_decoder(model.motion, ops::concat_channels(pair), curr, ops::channel_softmax);
  const Tensor raw = apply(model.detection[1], ops::relu(apply(model.detection[0], deep)));
  const Tensor heads[] = {ops::sigmoid(ops::slice_channels(raw, 0, det::kClassBegin)),
                          ops::channel_softmax(ops::slice_channels(raw, det::kClassBegin, det::kChannels))};
  out.detection = ops::concat_channels(heads);
  return out;
}

TaskOutputs forward(const Model& model, const Tensor& frame_prev, const Tensor& frame_curr) {
  return decode(model, encode(model, frame_prev), encode(model, frame_curr));
}

void check_outputs(const TaskOutputs& o, double tol) {
  auto in_unit = [](const Tensor& t, const char* name) {
    for (double v : t.data()) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::runtime_error(std::string(name) + " output outside [0,1]");
    }
  };
  in_unit(o.distance, "distance");
  in_unit(o.detection, "detection");
  auto normalised = [tol](const Tensor& t, std::size_t begin, std::size_t end, const char* name) {
    const std::size_t c = t.dim(1), hw = t.dim(2) * t.dim(3);
    for (std::size_t p = 0; p < hw; ++p) {
      double total = 0.0;
      for (std::size_t k = begin; k < end; ++k) total += t.at(k * hw + p);
      if (std::abs(total - 1.0) > tol) throw std::runtime_error(std::string(name) + " probabilities do not sum to 1");
    }
    (void)c;
  };
  normalised(o.segmentation, 0, o.segmentation.dim(1), "segmentation");
  normalised(o.motion, 0, o.motion.dim(1), "motion");
  normalised(o.detection, det::kClassBegin, det::kChannels, "detection class");
}

std::vector<int> argmax_channels(const Tensor& probs) {
  const std::size_t c = probs.dim(1), hw = probs.dim(2) * probs.dim(3);
  const auto p = probs.data();
  std::vector<int> labels(hw, 0);
  for (std::size_t q = 0; q < hw; ++q) {
    double best = p[q];
    for (std::size_t k = 1; k < c; ++k) {
      if (p[k * hw + q] > best) {
        best = p[k * hw + q];
        labels[q] = static_cast<int>(k);
      }
    }
  }
  return labels;
}

std::vector<Box> decode_detections(const Tensor& detection, double threshold) {
  const std::size_t g = detection.dim(2), cells = g * g;
  const auto d = detection.data();
  std::vector<Box> boxes;
  for (std::size_t cell = 0; cell < cells; ++cell) {
    const double obj = d[det::kObjectness * cells + cell];
    if (obj < threshold) continue;
    const double row = static_cast<double>(cell / g), col = static_cast<double>(cell % g);
    Box b;
    b.cx = (col + d[(det::kBoxBegin + 0) * cells + cell]) / static_cast<double>(g);
    b.cy = (row + d[(det::kBoxBegin + 1) * cells + cell]) / static_cast<double>(g);
    b.w = d[(det::kBoxBegin + 2) * cells + cell];
    b.h = d[(det::kBoxBegin + 3) * cells + cell];
    b.score = obj;
    double best = -1.0;
    for (int k = 0; k < det::kNumClasses; ++k) {
      const double p = d[(det::kClassBegin + static_cast<std::size_t>(k)) * cells + cell];
      if (p > best) {
        best = p;
        b.cls = k;
      }
    }
    boxes.push_back(b);
  }
  return boxes;
}

void save_checkpoint(const Model& model, const std::filesystem::path& file) {
  nlohmann::json j;
  j["format"] = "advperc-checkpoint";
  j["version"] = 1;
  j["config"] = to_json(model.config);
  auto tensors = nlohmann::json::array();
  for (const auto& [name, t] : model.parameters()) {
    tensors.push_back({{"name", name},
                       {"shape", t->shape()},
                       {"data", std::vector<double>(t->data().begin(), t->data().end())}});
  }
  j["tensors"] = tensors;
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write checkpoint " + file.string());
  out << j.dump() << '\n';
}

Model load_checkpoint(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot read checkpoint " + file.string());
  const auto j = nlohmann::json::parse(in);
  if (j.value("format", "") != "advperc-checkpoint" || j.value("version", 0) != 1) {
    throw std::runtime_error(file.string() + ": not a version 1 checkpoint");
  }
  Model model = make_model(model_config_from_json(j.at("config")));
  const auto& tensors = j.at("tensors");
  auto params = model.parameters();
  if (tensors.size() != params.size()) throw std::runtime_error("checkpoint tensor count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != params[i].first) {
      throw std::runtime_error("checkpoint tensor '" + t.at("name").get<std::string>() + "' where '" +
                               params[i].first + "' was expected");
    }
    const auto shape = t.at("shape").get<Shape>();
    if (shape != params[i].second->shape()) throw std::runtime_error("checkpoint shape mismatch for " + params[i].first);
    *params[i].second = Tensor(shape, t.at("data").get<std::vector<double>>());
  }
  return model;
}

Model load_checkpoint(const std::filesystem::path& file, const ModelConfig& expected) {
  Model model = load_checkpoint(file);
  if (!(model.config == expected)) throw std::runtime_error("checkpoint config does not match the requested model config");
  return model;
}

}  // namespace advperc
