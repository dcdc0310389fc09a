#include "advperc/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

namespace {

void require(bool ok, const std::string& message) {
  if (!ok) throw TensorError(message);
}

struct Planes {
  std::size_t c, hw;
};

Planes check_probs(const Tensor& probs, std::span<const int> labels, std::string_view op) {
  require(probs.defined() && probs.rank() == 4 && probs.dim(0) == 1,
          std::string(op) + ": expected probabilities [1,C,H,W]");
  const Planes p{probs.dim(1), probs.dim(2) * probs.dim(3)};
  require(labels.size() == p.hw, std::string(op) + ": expected " + std::to_string(p.hw) + " labels, got " +
                                     std::to_string(labels.size()));
  for (int l : labels) {
    require(l >= 0 && static_cast<std::size_t>(l) < p.c,
            std::string(op) + ": label " + std::to_string(l) + " out of range [0," + std::to_string(p.c) + ")");
  }
  return p;
}

double log_floored(double p) { return std::log(std::max(p, ops::kProbFloor)); }

}  // namespace

Tensor lovasz_softmax(const Tensor& probs, std::span<const int> labels) {
  const auto [c, hw] = check_probs(probs, labels, "lovasz_softmax");
  const auto p = probs.data();
  // Per-pixel weights d loss / d p_{c,i}, filled while the forward value is computed.
  std::vector<double> dprob(c * hw, 0.0);
  std::vector<std::size_t> order(hw);
  std::vector<double> err(hw);
  std::size_t present = 0;
  double total = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    std::size_t gts = 0;
    for (std::size_t i = 0; i < hw; ++i) gts += labels[i] == static_cast<int>(ci);
    if (gts == 0) continue;
    ++present;
    for (std::size_t i = 0; i < hw; ++i) {
      const double fg = labels[i] == static_cast<int>(ci) ? 1.0 : 0.0;
      err[i] = std::abs(fg - p[ci * hw + i]);
    }
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return err[a] > err[b]; });
    if (branch_trace_active()) {
      for (std::size_t k = 0; k < hw; ++k) note_branch(order[k]);
    }
    double fg_seen = 0.0, bg_seen = 0.0, prev_jaccard = 0.0;
    for (std::size_t k = 0; k < hw; ++k) {
      const std::size_t i = order[k];
      const bool fg = labels[i] == static_cast<int>(ci);
      (fg ? fg_seen : bg_seen) += 1.0;
      const double inter = static_cast<double>(gts) - fg_seen;
      const double uni = static_cast<double>(gts) + bg_seen;
      const double jaccard = 1.0 - inter / uni;
      const double weight = jaccard - prev_jaccard;
      prev_jaccard = jaccard;
      total += err[i] * weight;
      dprob[ci * hw + i] = fg ? -weight : weight;
    }
  }
  const double norm = 1.0 / static_cast<double>(present);
  for (auto& d : dprob) d *= norm;
  return make_op("lovasz_softmax", {1}, {total * norm}, {probs},
                 [dprob = std::move(dprob)](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t i = 0; i < dprob.size(); ++i) gin[0][i] += gout[0] * dprob[i];
                 });
}

Tensor focal_loss(const Tensor& probs, std::span<const int> labels, double gamma) {
  if (!(gamma >= 0.0)) throw TensorError("focal_loss: gamma must be >= 0");
  const auto [c, hw] = check_probs(probs, labels, "focal_loss");
  const auto p = probs.data();
  const double norm = 1.0 / static_cast<double>(hw);
  double acc = 0.0;
  std::vector<double> dprob(hw, 0.0);
  for (std::size_t i = 0; i < hw; ++i) {
    const double pt = p[static_cast<std::size_t>(labels[i]) * hw + i];
    const double q = 1.0 - pt;
    const double lg = log_floored(pt);
    const double mod = gamma == 0.0 ? 1.0 : std::pow(std::max(q, 0.0), gamma);
    acc -= mod * lg;
    if (pt < ops::kProbFloor) continue;  // floored: locally constant
    // d/dp of -(1-p)^g log p = g (1-p)^(g-1) log p - (1-p)^g / p
    const double dmod = (gamma == 0.0 || q <= 0.0) ? 0.0 : gamma * std::pow(q, gamma - 1.0);
    dprob[i] = norm * (dmod * lg - mod / pt);
  }
  if (branch_trace_active()) {
    for (std::size_t i = 0; i < hw; ++i) note_branch(p[static_cast<std::size_t>(labels[i]) * hw + i] < ops::kProbFloor);
  }
  std::vector<std::size_t> index(hw);
  for (std::size_t i = 0; i < hw; ++i) index[i] = static_cast<std::size_t>(labels[i]) * hw + i;
  return make_op("focal_loss", {1}, {acc * norm}, {probs},
                 [dprob = std::move(dprob), index = std::move(index)](std::span<const double> gout,
                                                                      std::span<double* const> gin) {
                   for (std::size_t i = 0; i < index.size(); ++i) gin[0][index[i]] += gout[0] * dprob[i];
                 });
}

namespace {

/// -[t log p + (1-t) log(1-p)] with floors, and its derivative in p.
std::pair<double, double> bce_term(double p, double t) {
  double value = 0.0, deriv = 0.0;
  if (t != 0.0) {
    value -= t * log_floored(p);
    if (p >= ops::kProbFloor) deriv -= t / p;
  }
  if (t != 1.0) {
    value -= (1.0 - t) * log_floored(1.0 - p);
    if (1.0 - p >= ops::kProbFloor) deriv += (1.0 - t) / (1.0 - p);
  }
  return {value, deriv};
}

void trace_bce(std::span<const double> p) {
  if (!branch_trace_active()) return;
  for (double v : p) note_branch((v < ops::kProbFloor ? 1u : 0u) | (1.0 - v < ops::kProbFloor ? 2u : 0u));
}

}  // namespace

Tensor binary_cross_entropy(const Tensor& probs, std::span<const double> targets, ops::Reduction reduction) {
  require(probs.defined() && probs.numel() == targets.size(),
          "binary_cross_entropy: expected " + std::to_string(targets.size()) + " probabilities");
  const auto p = probs.data();
  const double norm = reduction == ops::Reduction::mean ? 1.0 / static_cast<double>(p.size()) : 1.0;
  double acc = 0.0;
  std::vector<double> dprob(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    require(targets[i] >= 0.0 && targets[i] <= 1.0, "binary_cross_entropy: target outside [0,1]");
    const auto [v, d] = bce_term(p[i], targets[i]);
    acc += v;
    dprob[i] = norm * d;
  }
  trace_bce(p);
  return make_op("binary_cross_entropy", {1}, {acc * norm}, {probs},
                 [dprob = std::move(dprob)](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t i = 0; i < dprob.size(); ++i) gin[0][i] += gout[0] * dprob[i];
                 });
}

std::vector<CellTarget> assign_cells(std::span<const Box> boxes, std::size_t grid) {
  std::vector<CellTarget> cells;
  const double g = static_cast<double>(grid);
  for (const auto& box : boxes) {
    validate_box(box);
    if (box.cls < 0 || box.cls >= det::kNumClasses) throw std::invalid_argument("box class out of range");
    CellTarget t;
    t.col = std::min(grid - 1, static_cast<std::size_t>(box.cx * g));
    t.row = std::min(grid - 1, static_cast<std::size_t>(box.cy * g));
    t.tx = box.cx * g - static_cast<double>(t.col);
    t.ty = box.cy * g - static_cast<double>(t.row);
    t.w = box.w;
    t.h = box.h;
    t.cls = box.cls;
    auto same = std::find_if(cells.begin(), cells.end(),
                             [&](const CellTarget& c) { return c.row == t.row && c.col == t.col; });
    if (same != cells.end()) {
      *same = t;
    } else {
      cells.push_back(t);
    }
  }
  return cells;
}

Tensor detection_loss(const Tensor& pred, std::span<const Box> gt_boxes) {
  require(pred.defined() && pred.rank() == 4 && pred.dim(0) == 1 && pred.dim(1) == det::kChannels &&
              pred.dim(2) == pred.dim(3),
          "detection_loss: expected [1,10,G,G] prediction");
  const std::size_t grid = pred.dim(2), cells = grid * grid;
  std::vector<CellTarget> targets;
  try {
    targets = assign_cells(gt_boxes, grid);
  } catch (const std::invalid_argument& e) {
    throw TensorError(std::string("detection_loss: malformed box: ") + e.what());
  }
  const auto p = pred.data();
  auto at = [&](std::size_t ch, std::size_t cell) { return ch * cells + cell; };
  std::vector<double> objectness(cells, 0.0);
  for (const auto& t : targets) objectness[t.row * grid + t.col] = 1.0;

  std::vector<double> dpred(p.size(), 0.0);
  double obj_loss = 0.0;
  for (std::size_t q = 0; q < cells; ++q) {
    const auto [v, d] = bce_term(p[at(det::kObjectness, q)], objectness[q]);
    obj_loss += v;
    dpred[at(det::kObjectness, q)] = d / static_cast<double>(cells);
  }
  const double pos_norm = 1.0 / static_cast<double>(std::max<std::size_t>(1, targets.size()));
  double pos_loss = 0.0;
  for (const auto& t : targets) {
    const std::size_t q = t.row * grid + t.col;
    const double want[4] = {t.tx, t.ty, t.w, t.h};
    for (std::size_t k = 0; k < 4; ++k) {
      const double diff = p[at(det::kBoxBegin + k, q)] - want[k];
      pos_loss += diff * diff;
      dpred[at(det::kBoxBegin + k, q)] = 2.0 * diff * pos_norm;
    }
    const std::size_t cls_index = at(det::kClassBegin + static_cast<std::size_t>(t.cls), q);
    pos_loss -= log_floored(p[cls_index]);
    if (p[cls_index] >= ops::kProbFloor) dpred[cls_index] = -pos_norm / p[cls_index];
  }
  trace_bce(p);
  const double value = obj_loss / static_cast<double>(cells) + pos_loss * pos_norm;
  return make_op("detection_loss", {1}, {value}, {pred},
                 [dpred = std::move(dpred)](std::span<const double> gout, std::span<double* const> gin) {
                   for (std::size_t i = 0; i < dpred.size(); ++i) gin[0][i] += gout[0] * dpred[i];
                 });
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw std::invalid_argument("TrainConfig: batch_size must be positive");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw std::invalid_argument("TrainConfig: learning_rate must be positive");
  }
  if (!(focal_gamma >= 0.0)) throw std::invalid_argument("TrainConfig: focal_gamma must be >= 0");
  if (!(max_grad_norm >= 0.0) || !std::isfinite(max_grad_norm)) {
    throw std::invalid_argument("TrainConfig: max_grad_norm must be >= 0");
  }
  double total = 0.0;
  for (double w : loss_weights) {
    if (!(w >= 0.0) || !std::isfinite(w)) throw std::invalid_argument("TrainConfig: loss weights must be >= 0");
    total += w;
  }
  if (!(total > 0.0)) throw std::invalid_argument("TrainConfig: loss weights sum to zero");
}

std::array<double, 4> TrainConfig::normalized_weights() const {
  validate();
  const double total = std::accumulate(loss_weights.begin(), loss_weights.end(), 0.0);
  std::array<double, 4> w{};
  for (std::size_t i = 0; i < 4; ++i) w[i] = loss_weights[i] / total;
  return w;
}

LossTerms total_train_loss(const TaskOutputs& outputs, const Sample& sample, const TrainConfig& cfg) {
  const auto weights = cfg.normalized_weights();
  LossTerms terms;
  auto term = [&](Task task, auto&& compute) -> Tensor {
    Tensor t;
    try {
      t = compute();
    } catch (const TensorError& e) {
      throw TensorError(std::string("train loss, ") + std::string(to_string(task)) + " term: " + e.what());
    }
    const double v = t.item();
    terms.task[static_cast<std::size_t>(task)] = v;
    return ops::scale(t, weights[static_cast<std::size_t>(task)]);
  };
  const Tensor parts[] = {
      term(Task::distance,
           [&] { return ops::mse(outputs.distance, Tensor(outputs.distance.shape(), sample.gt_distance)); }),
      term(Task::segmentation, [&] { return lovasz_softmax(outputs.segmentation, sample.gt_seg); }),
      term(Task::motion,
           [&] {
             return ops::add(lovasz_softmax(outputs.motion, sample.gt_motion),
                             focal_loss(outputs.motion, sample.gt_motion, cfg.focal_gamma));
           }),
      term(Task::detection, [&] { return detection_loss(outputs.detection, sample.gt_boxes); }),
  };
  terms.total = ops::add(ops::add(parts[0], parts[1]), ops::add(parts[2], parts[3]));
  return terms;
}

}  // namespace advperc
