// SPDX-License-Identifier: Apache-2.0
//
// Iterative edge pruning: score every present edge by activation
// patching, remove those below threshold, repeat until the mask stops
// changing or the step limit is reached. Scores within an iteration are
// computed against the iteration's starting mask, so the per-edge work
// fans out to parallel workers.

#pragma once

#include <string>
#include <vector>

#include "circuitquant/patching.hpp"

namespace cq {

struct PruneConfig {
  double tau = 0.01;              // prune edges with score < tau (ties kept)
  int max_steps = 10;
  double min_change_rate = 0.0;   // stop when removed/present <= this
  ScoreMode mode = ScoreMode::LossDelta;
  double act_floor = 0.0;         // ActDiff scores below this count as 0
  // Elevate each scored edge's source component to FP32 on top of the
  // base policy (the mixed-precision scoring scheme).
  bool per_edge_policy = false;
  PrecisionPolicy base_policy;
  // Score and prune only edges sourced at attention heads; embed- and
  // MLP-sourced edges stay present untouched.
  bool heads_only = false;

  void validate() const;
};

struct EdgeScore {
  int edge = -1;
  double score = 0.0;
  bool kept = true;
};

struct IterationRecord {
  int step = 0;
  int present_before = 0;
  int present_after = 0;
  std::vector<EdgeScore> scores;  // sweep order at this iteration
};

struct CircuitResult {
  std::vector<IterationRecord> iterations;
  std::vector<bool> final_mask;
  // Last score assigned to each edge while it was still present.
  std::vector<double> last_score;
  int steps = 0;
};

// Runs the pruning loop, mutating g's mask. g must be the graph the
// engine was built on.
CircuitResult run_acdc(ComputationalGraph& g, DeltaLEngine& engine,
                       const PruneConfig& cfg);

// Log-uniform threshold grid with exact endpoints.
std::vector<double> threshold_grid(double lo, double hi, int n);

// One CSV per iteration: <prefix>scores_iter<k>.csv with
// edge,src,dst,score,kept rows in sweep order.
void export_scores_csv(const CircuitResult& result, const ComputationalGraph& g,
                       const std::string& prefix);

}  // namespace cq
