// SPDX-License-Identifier: Apache-2.0
//
// Activation patching: run the model on clean input with one edge's
// source contribution replaced by its value from a corrupt run, and
// measure how much the output metric moves. Corrupt activations are
// cached per (item, policy) so edge scoring never recomputes them.

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "circuitquant/model.hpp"

namespace cq {

// --- contrast dataset -----------------------------------------------------

struct ContrastPair {
  std::vector<int> clean;
  std::vector<int> corrupt;
  int answer = 0;
  int distractor = 0;
};

using Dataset = std::vector<ContrastPair>;

// JSONL, one object per line:
// {"clean":[...],"corrupt":[...],"answer":a,"distractor":d}
Dataset load_dataset_jsonl(const std::string& path);
void save_dataset_jsonl(const Dataset& ds, const std::string& path);
// Lengths must equal seq_len, ids must be in vocab, answer != distractor.
void validate_dataset(const Dataset& ds, const ModelConfig& cfg);

// --- output metrics -------------------------------------------------------

enum class Metric { KlDivergence, LogitDiff };

Metric parse_metric(const std::string& name);  // "kl" | "logitdiff"
const char* metric_name(Metric m);

// KL(softmax(clean) || softmax(patched)) over the last-position logits,
// natural log, evaluated in double. Identical inputs give exactly 0.
// Throws on NaN logits.
double metric_kl(std::span<const float> clean_last, std::span<const float> patched_last);

// logits[answer] - logits[distractor] at the last position.
double metric_logit_diff(std::span<const float> logits_last, int answer, int distractor);

// Per-item patched-vs-clean divergence: the KL above, or the absolute
// change in logit difference.
double patched_divergence(Metric m, const Tensor& clean_logits,
                          const Tensor& patched_logits, const ContrastPair& item);

// --- scoring engine -------------------------------------------------------

enum class ScoreMode { LossDelta, ActDiff };

ScoreMode parse_score_mode(const std::string& name);  // "loss" | "act"
const char* score_mode_name(ScoreMode m);

// Owns the per-policy activation caches and evaluates edge scores under
// the current graph mask. Patch sources always come from full-graph runs
// (built once per policy); baselines are runs under the current mask and
// must be refreshed after every mask change. Both build steps run
// sequentially; scoring is read-only and safe from parallel workers.
class DeltaLEngine {
 public:
  DeltaLEngine(const ComputationalGraph& g, const ImageBank& images, Dataset ds,
               Metric metric = Metric::KlDivergence);

  const ComputationalGraph& graph() const { return *graph_; }
  const Dataset& dataset() const { return dataset_; }
  int item_count() const { return static_cast<int>(dataset_.size()); }
  Metric metric() const { return metric_; }

  // Builds full-graph clean and corrupt caches for every item.
  void prepare_policy(const PrecisionPolicy& policy);
  bool prepared(const PrecisionPolicy& policy) const;

  // Recomputes the masked clean and corrupt baseline runs; remembers the
  // mask it saw. Scoring throws if the mask has changed since.
  void refresh_baselines(const PrecisionPolicy& policy);

  // Mean over items of the patched-vs-clean divergence when the edge's
  // source contribution is swapped for its corrupt-run value.
  double delta_l(const Edge& e, const PrecisionPolicy& policy) const;

  // Corrupt-side score: run on corrupt input with the clean activation
  // injected on the edge; mean RMS change of the destination's output
  // relative to the unpatched corrupt run.
  double act_diff(const Edge& e, const PrecisionPolicy& policy) const;

  double score(const Edge& e, const PrecisionPolicy& policy, ScoreMode mode) const;

  // |delta_l at FP32 - delta_l under `low`|: the score error introduced
  // by the low-precision policy for this edge.
  double epsilon_precision(const Edge& e, const PrecisionPolicy& low) const;

  const ActivationCache& clean_cache(int item, const PrecisionPolicy& policy) const;
  const ActivationCache& corrupt_cache(int item, const PrecisionPolicy& policy) const;

 private:
  struct PolicyCaches {
    std::vector<ActivationCache> clean;          // full graph
    std::vector<ActivationCache> corrupt;        // full graph
    std::vector<ActivationCache> base_clean;     // current mask
    std::vector<ActivationCache> base_corrupt;   // current mask
    std::vector<bool> mask_at_refresh;
  };
  const PolicyCaches& caches(const std::string& key) const;
  const PolicyCaches& baselines(const std::string& key) const;  // checks mask

  const ComputationalGraph* graph_;
  const ImageBank* images_;
  Dataset dataset_;
  Metric metric_;
  std::map<std::string, PolicyCaches> caches_;
};

}  // namespace cq
