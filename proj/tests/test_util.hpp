#pragma once

// Shared fixtures for the unit tests.

#include "bimag/dataset.hpp"
#include "bimag/magsim.hpp"
#include "bimag/policy.hpp"

namespace testutil {

using namespace bimag;

inline const bimag::Dataset& tiny_dataset() {
  static const bimag::Dataset ds = bimag::generate_dataset(10, 3, bimag::SimConfig{});
  return ds;
}

// Mid-episode sample of the first training episode, grids attached.
inline const bimag::TrainingSample& grid_sample() {
  static const bimag::TrainingSample s = [] {
    const auto& ep = *tiny_dataset().split(bimag::Split::Train).front();
    bimag::TrainingSample x = bimag::make_sample(ep, ep.length() / 2, tiny_dataset().stats);
    bimag::attach_grids(x, ep, bimag::build_workspace(ep.task));
    return x;
  }();
  return s;
}

// Adds N(0, sd) to every parameter so no output is identically zero.
inline void perturb(bimag::Policy& p, double sd, std::uint64_t seed) {
  bimag::Rng rng = bimag::make_rng(seed);
  for (int i = 0; i < p.params().size(); ++i) {
    auto& v = p.params()[i].value;
    for (Eigen::Index k = 0; k < v.size(); ++k) v.data()[k] += sd * bimag::standard_normal(rng);
  }
}

// Random normalized chunks, labels and logits for metric checks; some ground-truth
// rows are exactly stationary and some logit pairs tie.
struct Batch {
  std::vector<ChunkMatrix> preds, gts;
  std::vector<Phase> phases;
  std::vector<int> labels;
  std::vector<Eigen::Vector2d> logits;
  std::vector<std::pair<double, double>> logit_pairs;
  NormStats stats;
};

inline Batch random_batch(bimag::Rng& rng) {
  Batch b;
  const int n = 1 + static_cast<int>(uniform_index(rng, 24));
  for (int d = 0; d < 4; ++d) {
    b.stats.mean[d] = uniform(rng, -2, 2);
    b.stats.std[d] = uniform(rng, 0.5, 5);
  }
  for (int i = 0; i < n; ++i) {
    ChunkMatrix p(kChunk, kActionDim), g(kChunk, kActionDim);
    for (Eigen::Index k = 0; k < p.size(); ++k) {
      p.data()[k] = standard_normal(rng);
      g.data()[k] = standard_normal(rng);
    }
    // stationary ground-truth rows (zero in ticks) must be skipped by direction
    if (uniform01(rng) < 0.2) {
      const int k = static_cast<int>(uniform_index(rng, kChunk));
      for (int d = 0; d < 4; ++d) g(k, d) = -b.stats.mean[d] / b.stats.std[d];
    }
    b.preds.push_back(p);
    b.gts.push_back(g);
    const int label = uniform01(rng) < 0.5 ? 0 : 1;
    b.labels.push_back(label);
    b.phases.push_back(phase_from_index(label));
    double l0 = standard_normal(rng), l1 = standard_normal(rng);
    if (uniform01(rng) < 0.1) l1 = l0;
    b.logits.emplace_back(l0, l1);
    b.logit_pairs.emplace_back(l0, l1);
  }
  return b;
}

}  // namespace testutil
