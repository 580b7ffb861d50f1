// SPDX-License-Identifier: Apache-2.0
//
// Three-stream execution of an attention step: a load stream moving the
// elevated head's FP32 bundle up in per-component chunks, a low-precision
// compute stream, and a high-precision compute stream gated on the chunk
// it needs. Ops compute real values and then pace themselves to a modeled
// duration, releasing the core, so overlap is measurable in wall-clock
// time even on one CPU. simulate() gives the coarse closed-form makespan
// in which the high stream waits for the whole transfer; the executor is
// chunk-granular, so measured times can undercut the forms slightly.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "circuitquant/model.hpp"
#include "circuitquant/pahq.hpp"

namespace cq {

enum class StreamConfig : uint8_t { None, LoadOnly, ComputeOnly, Both };

StreamConfig parse_stream_config(const std::string& name);
const char* stream_config_name(StreamConfig c);

// Modeled durations for one attention step, in milliseconds. Transfer
// covers the whole bundle (split into four equal chunks); low covers the
// three batched projections plus attention; high covers the elevated
// head's three projections.
struct CostModel {
  double transfer_ms = 5.0;
  double low_ms = 8.0;
  double high_ms = 2.0;
  double overhead_ms = 0.0;

  void validate() const;
};

// Closed-form makespan of one step that has both transfer and high work:
//   none:         transfer + low + high + overhead
//   load-only:    max(transfer, low) + high + overhead
//   compute-only: transfer + max(low, high) + overhead
//   both:         max(low, transfer + high) + overhead
double simulate_step(StreamConfig c, const CostModel& m);
double simulate(StreamConfig c, const CostModel& m, int steps);

struct TraceEvent {
  std::string op;      // "transfer.0".."transfer.3", "low.0".."low.2",
                       // "high.0".."high.2", "assemble.0".."assemble.2",
                       // "attend", "overhead"
  std::string stream;  // "load" | "low" | "high" | "coord"
  int step = 0;
  double begin_ms = 0.0;
  double end_ms = 0.0;
};

struct Timeline {
  std::vector<TraceEvent> events;
  double makespan_ms = 0.0;
};

// Structural checks: events on one stream never overlap, chunk uploads
// are ordered, each high op begins after its chunk lands, attention
// begins after every assemble. Throws std::runtime_error on violation.
void validate_timeline(const Timeline& t);

void export_trace_csv(const Timeline& t, const std::string& path);

class StreamExecutor {
 public:
  StreamExecutor(WeightStore& store, StreamConfig config, CostModel costs);
  ~StreamExecutor();
  StreamExecutor(const StreamExecutor&) = delete;
  StreamExecutor& operator=(const StreamExecutor&) = delete;

  StreamConfig config() const { return config_; }
  const CostModel& costs() const { return costs_; }

  // Runs one attention step to completion. Worker exceptions rethrow
  // here; a stalled dependency trips the watchdog instead of hanging.
  void run_step(AttentionOps& ops);

  // Adapter handed to forward().
  AttentionScheduler scheduler();

  Timeline timeline() const;
  void reset_timeline();

  // Adds up to max_extra_ms of seeded random delay to each op's pacing.
  // Timing noise only: computed values are unaffected.
  void set_jitter(uint32_t seed, double max_extra_ms);
  void set_watchdog_ms(double ms);
  int steps_run() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  StreamConfig config_;
  CostModel costs_;
};

// Runs the same forward under each stream configuration, checks the
// logits agree bitwise, and reports wall-clock against the closed form.
struct AblationRow {
  StreamConfig config = StreamConfig::None;
  double wall_ms = 0.0;
  double predicted_ms = 0.0;
};

std::vector<AblationRow> ablate_stream_configs(WeightStore& store,
                                               const ImageBank& images,
                                               const ComputationalGraph& g,
                                               std::span<const int> tokens,
                                               const PrecisionPolicy& policy,
                                               const CostModel& costs);

}  // namespace cq
