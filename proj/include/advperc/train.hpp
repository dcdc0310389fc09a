#pragma once

#include <array>
#include <functional>
#include <vector>

#include "advperc/losses.hpp"
#include "advperc/model.hpp"
#include "advperc/scene.hpp"

namespace advperc {

struct EpochStats {
  double loss = 0.0;                // mean weighted total over the epoch
  std::array<double, 4> task{};     // mean unweighted per-task terms, Task order
  double max_grad_norm = 0.0;       // largest batch-mean gradient norm, before clipping
  std::size_t clipped_batches = 0;
};

struct TrainResult {
  Model model;
  std::vector<EpochStats> history;
};

/// Plain minibatch SGD over dataset.train, shuffled per epoch from cfg.seed.
/// `progress` (optional) is called after every epoch.
TrainResult train(const Model& model, const Dataset& dataset, const TrainConfig& cfg,
                  const std::function<void(std::size_t epoch, const EpochStats&)>& progress = {});

}  // namespace advperc
