// SPDX-License-Identifier: Apache-2.0
//
// Dual-precision weight residency: a packed FP8 bank holds every matrix
// at one byte per element, and a small fixed number of FP32 slots hold
// the head bundles (Q/K/V column slices plus the layer's output
// projection) that the current edge needs at full precision. A prefetch
// plan overlaps the next edge's bundle load with the current compute.

#pragma once

#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "circuitquant/assembly.hpp"
#include "circuitquant/model.hpp"

namespace cq {

// FP32 slices staged for one attention head: per-head W_Q/W_K/W_V
// column blocks (D x d_k) and the whole layer's W_O (H*d_k x D).
struct HeadBundle {
  int layer = -1;
  int head = -1;
  Tensor wq, wk, wv;
  Tensor wo;
};

// --- static memory accounting --------------------------------------------

uint64_t weight_elements(const ModelConfig& cfg);       // across all matrices
uint64_t fp32_weight_bytes(const ModelConfig& cfg);     // 4 bytes / element
uint64_t fp8_bank_bytes(const ModelConfig& cfg);        // 1 byte / element
uint64_t bundle_bytes(const ModelConfig& cfg);          // one FP32 head bundle
// Peak resident bytes: bank + `slots` FP32 bundles.
uint64_t dual_precision_peak_bytes(const ModelConfig& cfg, int slots = 2);
double dual_precision_ratio(const ModelConfig& cfg, int slots = 2);

enum class SlotState : uint8_t { Empty, Loading, Ready };

struct StoreTelemetry {
  uint64_t bank_bytes = 0;
  uint64_t slot_capacity_bytes = 0;
  uint64_t peak_bytes = 0;   // bank + resident bundle payloads, high-water
  uint64_t loads = 0;        // bundles copied up from host FP32 masters
  uint64_t hits = 0;         // acquires satisfied without a new load
};

// Device-side weight residency. Thread-safe; acquire blocks while a
// prefetch started by another thread is still in flight.
class WeightStore {
 public:
  WeightStore(const WeightSet& w, int slots = 2);

  std::span<const uint8_t> bank(const std::string& name) const;
  Tensor bank_as_float(const std::string& name) const;

  // Starts loading (layer, head) into a free slot; no-op if resident or
  // already loading. Evicts the least recently used unpinned bundle.
  void prefetch(int layer, int head);
  // Returns the resident bundle, loading it first if needed; pins it
  // until release.
  const HeadBundle* acquire(int layer, int head);
  void release(const HeadBundle* bundle);
  bool resident(int layer, int head) const;
  int slot_count() const { return static_cast<int>(slots_.size()); }
  SlotState slot_state(int slot) const;
  StoreTelemetry telemetry() const;
  const WeightSet& weights() const { return *weights_; }

 private:
  struct Slot {
    SlotState state = SlotState::Empty;
    int pins = 0;
    uint64_t last_use = 0;
    HeadBundle bundle;
  };
  int find_locked(int layer, int head) const;
  int victim_locked();
  void fill_bundle(HeadBundle& b, int layer, int head) const;

  const WeightSet* weights_;
  std::map<std::string, std::vector<uint8_t>> bank_;
  mutable std::mutex mu_;
  mutable std::condition_variable cv_;
  std::vector<Slot> slots_;
  uint64_t use_clock_ = 0;
  mutable StoreTelemetry tele_;
};

// --- per-edge precision --------------------------------------------------

// Elevates the edge's source component on top of `base`: a head source
// becomes the FP32 target head, an MLP source the FP32 target MLP; an
// embed source leaves the base policy unchanged.
PrecisionPolicy policy_for_edge(const Edge& e, const ComputationalGraph& g,
                                const PrecisionPolicy& base);

struct PrefetchAction {
  int step = 0;             // sweep position whose compute overlaps this load
  int layer = -1;
  int head = -1;
  bool already_resident = false;  // consecutive edges share the source bundle
};

// Schedules, at each sweep position t, the bundle the edge at t+1 needs.
// Only head sources need bundles; duplicate consecutive sources dedup.
std::vector<PrefetchAction> make_prefetch_plan(std::span<const Edge> order,
                                               const ComputationalGraph& g);

}  // namespace cq
