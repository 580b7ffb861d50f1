// SPDX-License-Identifier: Apache-2.0
//
// Ground-truth evaluation: planted-circuit task generation with
// construction checks, threshold sweeps with pessimistic Pareto AUC,
// faithfulness, incremental weight quantization, and precision ablation.

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "circuitquant/acdc.hpp"

namespace cq {

// --- planted tasks --------------------------------------------------------

// Every preset plants a position-keyed attention circuit: the planted
// head attends from the last position to the content token and copies
// the token's sign into a readout direction that the unembedding reads.
//   standard      robust main head plus an attenuated head whose signal
//                 rides a large carrier and collapses bitwise under FP8
//   underflow     single planted head whose output stays below the FP8
//                 subnormal flush threshold (all-FP8 scores exactly 0)
//   interference  robust head plus a high-amplitude nuisance head that
//                 absorbs the planted residual delta under FP8 addition
//   two_hop       two-layer relay: head (0,0) writes a bridge direction
//                 that head (1,0) reads back into the readout
//   carrier       signal sized to survive the FP8 relative grid but
//                 vanish under the absolute per-tensor 4-bit grid
enum class TaskPreset { Standard, Underflow, Interference, TwoHop, Carrier };

TaskPreset parse_preset(const std::string& name);
const char* preset_name(TaskPreset p);

struct PlantedSpec {
  TaskPreset preset = TaskPreset::Standard;
  uint32_t seed = 1;
  double signal_scale = 1.0;  // multiplies the planted value path
  int items = 6;

  void validate() const;  // throws std::invalid_argument
};

struct PlantedTask {
  TaskPreset preset = TaskPreset::Standard;
  ModelConfig config;
  WeightSet weights;
  Dataset dataset;
  std::vector<int> ground_truth;  // ascending edge indices
  HeadRef planted{0, 0};          // main signal head
  int key_pos = 2;                // content-token position
  double signal_scale = 1.0;
  uint32_t seed_used = 0;         // effective seed after retries
};

// Deterministic for a given spec. Construction checks (logit-diff
// calibration, attention focus, ground-truth faithfulness, and the
// preset's quantization behavior) run on seeded retries; throws when
// every attempt fails, e.g. at signal_scale = 0.
PlantedTask generate_planted(const PlantedSpec& spec);

// weights.bin + dataset.jsonl + task.json under dir (dir must exist).
// load_task revalidates shapes and edge indices, not the construction.
void save_task(const PlantedTask& task, const std::string& dir);
PlantedTask load_task(const std::string& dir);

// --- discovery methods ----------------------------------------------------

// acdc scores everything at FP32; rtn8 runs every component at the low
// precision; pahq keeps attention at the low precision and elevates the
// scored edge's source head to FP32.
enum class Method { Acdc, Rtn8, Pahq };

Method parse_method(const std::string& name);
const char* method_name(Method m);

// Non-elevated precision for pahq: 4 = integer-grid RTN, 8 = FP8 E4M3,
// 16 = BF16. Other methods accept only bits = 8.
PruneConfig method_prune_config(Method m, int bits = 8);
PrecisionPolicy ablation_policy(int bits);

// --- threshold sweeps -----------------------------------------------------

struct RocPoint {
  double tau = 0.0;
  double tpr = 0.0;
  double fpr = 0.0;
  int kept_edges = 0;
};

struct RocCurve {
  std::vector<RocPoint> points;  // one per threshold, ascending tau
  double auc = 0.0;
};

// Full pruning loop per threshold; final masks classified against
// task.ground_truth. Thresholds must be positive and ascending.
RocCurve roc_sweep(const PlantedTask& task, Method method,
                   const std::vector<double>& taus,
                   Metric metric = Metric::LogitDiff, int bits = 8);

// Pessimistic step AUC: Pareto frontier of the points integrated as a
// left step function from (0,0), last TPR carried out to FPR = 1.
double auc_from_points(const std::vector<RocPoint>& points);

// AUC of a fixed score table (score, in_ground_truth), swept over every
// distinct score as a keep-if->= threshold. Equals pairwise concordance
// when all scores are distinct.
double auc_from_scores(const std::vector<std::pair<double, bool>>& table);

void export_roc_csv(const RocCurve& curve, const std::string& path);

// --- circuit quality ------------------------------------------------------

// (M_circuit - M_corrupt) / (M_model - M_corrupt) with M = mean
// logit-diff at FP32; the circuit run patches every non-mask edge with
// its corrupt activation. Throws when |denominator| < 1e-9.
double faithfulness(const PlantedTask& task, const std::vector<bool>& mask);

// Fraction of items with positive logit-diff when every non-mask edge
// is corrupt-patched (FP32 forward).
double task_accuracy(const PlantedTask& task, const std::vector<bool>& mask);

// --- incremental weight quantization --------------------------------------

struct QuantSweepPoint {
  int phase = 0;  // 0 baseline, 1 non-critical heads, 2 critical heads
  std::string label;
  double accuracy = 0.0;
};

// Critical heads are the sources of present mask edges. Phase 1 rounds
// each non-critical head's weights to FP8 whole, in reverse topological
// order; phase 2 rounds the critical heads' weight elements in 10%
// chunks (canonical w_q, w_k, w_v, w_o order). Accuracy is the
// full-model positive-logit-diff fraction after every step, with FP32
// activations throughout (a weight-only experiment).
std::vector<QuantSweepPoint> incremental_quant_sweep(const PlantedTask& task,
                                                     const std::vector<bool>& mask);

void export_quant_sweep_csv(const std::vector<QuantSweepPoint>& curve,
                            const std::string& path);

// --- precision ablation ---------------------------------------------------

struct PrecisionRow {
  int bits = 0;
  double auc = 0.0;       // mean over the suite
  double accuracy = 0.0;  // mean over the suite, tau = 0.01 circuits
};

// pahq sweeps with the non-target precision at 4, 8, and 16 bits.
std::vector<PrecisionRow> precision_ablation(const std::vector<PlantedTask>& suite,
                                             const std::vector<double>& taus);

void export_precision_csv(const std::vector<PrecisionRow>& rows,
                          const std::string& path);

// --- run reports ----------------------------------------------------------

struct RunReport {
  int schema_version = 1;
  std::string command;
  std::string method;
  uint32_t seed = 0;
  std::map<std::string, std::string> config;  // resolved settings
  std::vector<RocPoint> roc;
  double auc = -1.0;  // -1 when the command computes no sweep
  std::vector<int> kept_edges;
  double eps_mean = 0.0;  // FP32-vs-low score error over scored edges
  double eps_max = 0.0;
  double runtime_ms = 0.0;
  uint64_t peak_rss_bytes = 0;
};

std::string report_to_json(const RunReport& r);
RunReport report_from_json(const std::string& text);
void save_report(const RunReport& r, const std::string& path);
RunReport load_report(const std::string& path);

// VmHWM of this process in bytes; 0 when unavailable.
uint64_t current_peak_rss_bytes();

}  // namespace cq
