#pragma once

// Brute-force reference implementations shared by the unit and acceptance tests.
// Each is written from the definition rather than from the production code path.

#include <algorithm>
#include <cmath>
#include <random>
#include <set>
#include <vector>

#include "advperc/losses.hpp"
#include "advperc/metrics.hpp"
#include "advperc/ops.hpp"

namespace advperc::oracle {

inline Tensor random_probs(std::size_t c, std::size_t h, std::size_t w, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(-2.0, 2.0);
  std::vector<double> v(c * h * w);
  for (auto& x : v) x = dist(rng);
  return ops::channel_softmax(Tensor({1, c, h, w}, v));
}

// Lovász extension as the Choquet integral over level sets of the error vector:
// integral over t of Delta({i : m_i >= t}), with Delta(S) = |S| / |G u S|.
inline double lovasz_level_set(const std::vector<double>& m, const std::vector<bool>& fg) {
  std::set<double> levels(m.begin(), m.end());
  double total = 0.0, prev = 0.0;
  for (double t : levels) {
    if (t <= 0.0) continue;
    std::size_t s = 0, uni = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      const bool in_s = m[i] >= t;
      s += in_s;
      uni += in_s || fg[i];
    }
    total += (t - prev) * static_cast<double>(s) / static_cast<double>(uni);
    prev = t;
  }
  return total;
}

inline double lovasz(const Tensor& probs, const std::vector<int>& labels) {
  const std::size_t c = probs.dim(1), hw = labels.size();
  double total = 0.0;
  int present = 0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    std::vector<bool> fg(hw);
    std::vector<double> m(hw);
    bool any = false;
    for (std::size_t i = 0; i < hw; ++i) {
      fg[i] = labels[i] == static_cast<int>(ci);
      any = any || fg[i];
      m[i] = std::abs((fg[i] ? 1.0 : 0.0) - probs.data()[ci * hw + i]);
    }
    if (!any) continue;
    ++present;
    total += lovasz_level_set(m, fg);
  }
  return total / present;
}

/// Worst |lovasz_softmax - oracle| over every 3-class label map of size up to
/// 2x3, with random probabilities; `cases` receives the number of maps tried.
inline double lovasz_enumeration_error(std::uint64_t seed, std::size_t* cases = nullptr) {
  std::mt19937_64 rng(seed);
  std::size_t n_cases = 0;
  double worst = 0.0;
  for (std::size_t h = 1; h <= 2; ++h) {
    for (std::size_t w = 1; w <= 3; ++w) {
      const std::size_t n = h * w;
      std::size_t maps = 1;
      for (std::size_t i = 0; i < n; ++i) maps *= 3;
      for (std::size_t code = 0; code < maps; ++code) {
        std::vector<int> labels(n);
        for (std::size_t i = 0, c = code; i < n; ++i, c /= 3) labels[i] = static_cast<int>(c % 3);
        const auto probs = random_probs(3, h, w, rng);
        worst = std::max(worst, std::abs(lovasz_softmax(probs, labels).item() - lovasz(probs, labels)));
        ++n_cases;
      }
    }
  }
  if (cases) *cases = n_cases;
  return worst;
}

// Class IoU from explicit index sets.
inline double miou_by_sets(const std::vector<int>& pred, const std::vector<int>& ref, int classes) {
  double total = 0.0;
  int present = 0;
  for (int c = 0; c < classes; ++c) {
    std::set<std::size_t> p, r;
    for (std::size_t i = 0; i < pred.size(); ++i) {
      if (pred[i] == c) p.insert(i);
      if (ref[i] == c) r.insert(i);
    }
    std::vector<std::size_t> inter, uni;
    std::set_intersection(p.begin(), p.end(), r.begin(), r.end(), std::back_inserter(inter));
    std::set_union(p.begin(), p.end(), r.begin(), r.end(), std::back_inserter(uni));
    if (uni.empty()) continue;
    ++present;
    total += static_cast<double>(inter.size()) / static_cast<double>(uni.size());
  }
  return total / present;
}

// AP as (1/|GT|) * sum over true-positive ranks of the best precision at that rank or later.
inline double ap(std::vector<Box> preds, const std::vector<Box>& gts, int cls) {
  std::vector<Box> p, g;
  for (const auto& b : preds) {
    if (b.cls == cls) p.push_back(b);
  }
  for (const auto& b : gts) {
    if (b.cls == cls) g.push_back(b);
  }
  std::stable_sort(p.begin(), p.end(), [](const Box& a, const Box& b) { return a.score > b.score; });
  std::vector<int> used(g.size(), 0);
  std::vector<bool> tp(p.size(), false);
  for (std::size_t k = 0; k < p.size(); ++k) {
    int best = -1;
    double best_iou = 0.0;
    for (std::size_t j = 0; j < g.size(); ++j) {
      const double iou = box_iou(p[k], g[j]);
      if (!used[j] && iou >= 0.5 && iou > best_iou) {
        best = static_cast<int>(j);
        best_iou = iou;
      }
    }
    if (best >= 0) {
      used[static_cast<std::size_t>(best)] = 1;
      tp[k] = true;
    }
  }
  std::vector<double> precision(p.size());
  std::size_t hits = 0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    hits += tp[k];
    precision[k] = static_cast<double>(hits) / static_cast<double>(k + 1);
  }
  double total = 0.0;
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (tp[k]) total += *std::max_element(precision.begin() + static_cast<long>(k), precision.end());
  }
  return total / static_cast<double>(g.size());
}

inline double map(const std::vector<Box>& preds, const std::vector<Box>& gts) {
  if (gts.empty()) return preds.empty() ? 1.0 : 0.0;
  double total = 0.0;
  int classes = 0;
  for (int c = 0; c < det::kNumClasses; ++c) {
    if (std::none_of(gts.begin(), gts.end(), [&](const Box& b) { return b.cls == c; })) continue;
    ++classes;
    total += ap(preds, gts, c);
  }
  return total / classes;
}

/// Number of (pred, ref) pairs over all binary 3x3 maps and all 3-class 2x2
/// maps on which miou differs from the set oracle.
inline std::size_t miou_enumeration_mismatches() {
  std::size_t mismatches = 0;
  std::vector<int> pred(9), ref(9);
  for (unsigned a = 0; a < 512; ++a) {
    for (std::size_t i = 0; i < 9; ++i) pred[i] = (a >> i) & 1;
    for (unsigned b = 0; b < 512; ++b) {
      for (std::size_t i = 0; i < 9; ++i) ref[i] = (b >> i) & 1;
      mismatches += miou(pred, ref, 2) != miou_by_sets(pred, ref, 2);
    }
  }
  pred.assign(4, 0);
  ref.assign(4, 0);
  for (int a = 0; a < 81; ++a) {
    for (int i = 0, c = a; i < 4; ++i, c /= 3) pred[static_cast<std::size_t>(i)] = c % 3;
    for (int b = 0; b < 81; ++b) {
      for (int i = 0, c = b; i < 4; ++i, c /= 3) ref[static_cast<std::size_t>(i)] = c % 3;
      mismatches += miou(pred, ref, 3) != miou_by_sets(pred, ref, 3);
    }
  }
  return mismatches;
}

/// Worst |mean_ap - oracle| over random small scenes drawn from a box lattice
/// chosen so that IoU lands on both sides of the 0.5 threshold.
inline double map_enumeration_error(std::uint64_t seed, int trials) {
  std::vector<Box> pool;
  for (double cx : {0.3, 0.35, 0.6}) {
    for (double w : {0.2, 0.3}) pool.push_back({0, cx, 0.5, w, 0.2});
  }
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1), count(0, 3);
  std::uniform_int_distribution<int> cls(0, 1), score(1, 10);
  double worst = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Box> gts, preds;
    for (std::size_t k = count(rng); k > 0; --k) {
      Box b = pool[pick(rng)];
      b.cls = cls(rng);
      gts.push_back(b);
    }
    for (std::size_t k = count(rng); k > 0; --k) {
      Box b = pool[pick(rng)];
      b.cls = cls(rng);
      b.score = score(rng) / 10.0;
      preds.push_back(b);
    }
    worst = std::max(worst, std::abs(mean_ap(preds, gts) - map(preds, gts)));
  }
  return worst;
}

}  // namespace advperc::oracle
