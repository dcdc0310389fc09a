#include "advperc/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

namespace advperc {

TrainResult train(const Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const std::function<void(std::size_t, const EpochStats&)>& progress) {
  cfg.validate();
  if (dataset.train.empty()) throw std::invalid_argument("train: dataset has no training samples");

  TrainResult result{model.frozen(), {}};
  auto params = result.model.parameters();
  std::vector<std::vector<double>> values, grads;
  for (const auto& [name, t] : params) {
    values.emplace_back(t->data().begin(), t->data().end());
    grads.emplace_back(t->numel(), 0.0);
  }

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i - 1);
      std::swap(order[i - 1], order[pick(rng)]);
    }
    EpochStats stats;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      for (auto& g : grads) std::fill(g.begin(), g.end(), 0.0);
      for (std::size_t k = begin; k < end; ++k) {
        const Sample& sample = dataset.train[order[k]];
        Graph graph;
        GraphScope scope(graph);
        const Model live = result.model.trainable();
        const LossTerms terms = total_train_loss(forward(live, sample.frame_prev, sample.frame_curr), sample, cfg);
        graph.backward(terms.total);
        stats.loss += terms.total.item();
        for (std::size_t t = 0; t < 4; ++t) stats.task[t] += terms.task[t];
        auto live_params = live.parameters();
        for (std::size_t p = 0; p < params.size(); ++p) {
          const auto g = live_params[p].second->grad();
          for (std::size_t i = 0; i < g.size(); ++i) grads[p][i] += g[i];
        }
      }
      const double batch = static_cast<double>(end - begin);
      double sq = 0.0;
      for (const auto& g : grads) {
        for (double v : g) sq += v * v;
      }
      const double norm = std::sqrt(sq) / batch;
      stats.max_grad_norm = std::max(stats.max_grad_norm, norm);
      double step = cfg.learning_rate / batch;
      if (cfg.max_grad_norm > 0.0 && norm > cfg.max_grad_norm) {
        step *= cfg.max_grad_norm / norm;
        ++stats.clipped_batches;
      }
      for (std::size_t p = 0; p < params.size(); ++p) {
        for (std::size_t i = 0; i < values[p].size(); ++i) values[p][i] -= step * grads[p][i];
        try {
          *params[p].second = Tensor(params[p].second->shape(), values[p]);
        } catch (const TensorError& e) {
          throw TensorError("train: epoch " + std::to_string(epoch) + ", parameter " + params[p].first + ": " +
                            e.what());
        }
      }
    }
    const double n = static_cast<double>(order.size());
    stats.loss /= n;
    for (auto& t : stats.task) t /= n;
    result.history.push_back(stats);
    if (progress) progress(epoch, stats);
  }
  return result;
}

}  // namespace advperc
