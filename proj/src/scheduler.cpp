// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/scheduler.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <thread>

namespace cq {

StreamConfig parse_stream_config(const std::string& name) {
  if (name == "none") return StreamConfig::None;
  if (name == "load") return StreamConfig::LoadOnly;
  if (name == "compute") return StreamConfig::ComputeOnly;
  if (name == "both") return StreamConfig::Both;
  throw std::invalid_argument("parse_stream_config: unknown config '" + name + "'");
}

const char* stream_config_name(StreamConfig c) {
  switch (c) {
    case StreamConfig::None: return "none";
    case StreamConfig::LoadOnly: return "load";
    case StreamConfig::ComputeOnly: return "compute";
    case StreamConfig::Both: return "both";
  }
  throw std::invalid_argument("stream_config_name: bad config");
}

void CostModel::validate() const {
  for (double v : {transfer_ms, low_ms, high_ms, overhead_ms})
    if (!(v >= 0.0) || !std::isfinite(v))
      throw std::invalid_argument("CostModel: durations must be finite and >= 0");
}

double simulate_step(StreamConfig c, const CostModel& m) {
  m.validate();
  switch (c) {
    case StreamConfig::None:
      return m.transfer_ms + m.low_ms + m.high_ms + m.overhead_ms;
    case StreamConfig::LoadOnly:
      return std::max(m.transfer_ms, m.low_ms) + m.high_ms + m.overhead_ms;
    case StreamConfig::ComputeOnly:
      return m.transfer_ms + std::max(m.low_ms, m.high_ms) + m.overhead_ms;
    case StreamConfig::Both:
      return std::max(m.low_ms, m.transfer_ms + m.high_ms) + m.overhead_ms;
  }
  throw std::invalid_argument("simulate_step: bad config");
}

double simulate(StreamConfig c, const CostModel& m, int steps) {
  if (steps < 1) throw std::invalid_argument("simulate: steps must be >= 1");
  return static_cast<double>(steps) * simulate_step(c, m);
}

// --- executor internals ---------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double ms_between(Clock::time_point a, Clock::time_point b) {
  return std::chrono::duration<double, std::milli>(b - a).count();
}

class Gate {
 public:
  void open() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      open_ = true;
    }
    cv_.notify_all();
  }
  // Returns false on timeout.
  bool wait_ms(double ms) {
    std::unique_lock<std::mutex> lock(mu_);
    return cv_.wait_for(lock, std::chrono::duration<double, std::milli>(ms),
                        [&] { return open_; });
  }

 private:
  std::mutex mu_;
  std::condition_variable cv_;
  bool open_ = false;
};

class Worker {
 public:
  explicit Worker(std::string name) : name_(std::move(name)) {
    thread_ = std::thread([this] { loop(); });
  }
  ~Worker() {
    {
      std::lock_guard<std::mutex> lock(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    thread_.join();
  }
  const std::string& name() const { return name_; }
  void post(std::function<void()> fn) {
    {
      std::lock_guard<std::mutex> lock(mu_);
      q_.push_back(std::move(fn));
    }
    cv_.notify_all();
  }

 private:
  void loop() {
    for (;;) {
      std::function<void()> fn;
      {
        std::unique_lock<std::mutex> lock(mu_);
        cv_.wait(lock, [&] { return stop_ || !q_.empty(); });
        if (q_.empty()) return;  // stop requested and drained
        fn = std::move(q_.front());
        q_.pop_front();
      }
      fn();
    }
  }

  std::string name_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> q_;
  bool stop_ = false;
  std::thread thread_;
};

}  // namespace

struct StreamExecutor::Impl {
  WeightStore* store = nullptr;
  StreamConfig config = StreamConfig::None;
  CostModel costs;

  Worker load{"load"};
  Worker low{"low"};
  Worker high{"high"};

  Clock::time_point epoch = Clock::now();
  mutable std::mutex tl_mu;
  std::vector<TraceEvent> events;

  std::mutex jit_mu;
  std::mt19937 jit_rng{0};
  double jit_max_ms = 0.0;
  bool jitter_on = false;

  double watchdog_ms = 10000.0;
  std::atomic<int> steps{0};

  // Per-step shared state. Gates are poisoned open on error so no task
  // blocks forever; the coordinator rethrows the first error.
  struct StepCtx {
    Gate chunk[4];
    Gate low_done[3];
    Gate high_done[3];
    Gate assembles_done;
    Gate finished;
    std::atomic<int> pending{0};
    std::atomic<int> assembles_left{3};
    std::mutex err_mu;
    std::exception_ptr error;
    const HeadBundle* bundle = nullptr;
  };

  double jitter() {
    std::lock_guard<std::mutex> lock(jit_mu);
    if (!jitter_on || jit_max_ms <= 0.0) return 0.0;
    return jit_max_ms * static_cast<double>((jit_rng() >> 8) * 0x1p-24);
  }

  void record(const std::string& op, const std::string& stream, int step,
              Clock::time_point b, Clock::time_point e) {
    std::lock_guard<std::mutex> lock(tl_mu);
    events.push_back({op, stream, step, ms_between(epoch, b), ms_between(epoch, e)});
  }

  // Runs body, then sleeps out the rest of the modeled duration.
  void paced(const std::string& op, const std::string& stream, int step, double ms,
             const std::function<void()>& body) {
    Clock::time_point t0 = Clock::now();
    body();
    double extra = jitter();
    std::this_thread::sleep_until(
        t0 + std::chrono::duration<double, std::milli>(ms + extra));
    record(op, stream, step, t0, Clock::now());
  }

  void fail(const std::shared_ptr<StepCtx>& ctx) {
    {
      std::lock_guard<std::mutex> lock(ctx->err_mu);
      if (!ctx->error) ctx->error = std::current_exception();
    }
    for (Gate& g : ctx->chunk) g.open();
    for (Gate& g : ctx->low_done) g.open();
    for (Gate& g : ctx->high_done) g.open();
    ctx->assembles_done.open();
  }

  std::function<void()> task(const std::shared_ptr<StepCtx>& ctx,
                             std::function<void()> body) {
    return [this, ctx, body = std::move(body)] {
      try {
        body();
      } catch (...) {
        fail(ctx);
      }
      if (ctx->pending.fetch_sub(1) == 1) ctx->finished.open();
    };
  }

  void await(const std::shared_ptr<StepCtx>& ctx, Gate& g, const char* what) {
    if (!g.wait_ms(watchdog_ms))
      throw std::runtime_error(std::string("StreamExecutor: watchdog expired waiting for ") +
                               what);
    std::lock_guard<std::mutex> lock(ctx->err_mu);
    if (ctx->error) std::rethrow_exception(ctx->error);
  }

  void run_step(AttentionOps& ops) {
    int step = steps.fetch_add(1);
    auto ctx = std::make_shared<StepCtx>();
    bool has_high = ops.target_head.has_value();
    const double tr = costs.transfer_ms / 4.0;
    const double lo = costs.low_ms / 4.0;
    const double hi = costs.high_ms / 3.0;
    const int layer = ops.layer;
    const int head = has_high ? *ops.target_head : -1;

    auto transfer_chunk = [this, ctx, layer, head, tr](int c, const std::string& stream,
                                                        int step_id) {
      paced("transfer." + std::to_string(c), stream, step_id, tr, [&] {
        if (c == 0) store->prefetch(layer, head);  // the real copy
      });
      ctx->chunk[c].open();
    };
    auto high_op = [this, ctx, &ops, layer, head, hi](int c, const std::string& stream,
                                                      int step_id) {
      await(ctx, ctx->chunk[c], "a transfer chunk");
      if (c == 0) ctx->bundle = store->acquire(layer, head);
      paced("high." + std::to_string(c), stream, step_id, hi,
            [&] { ops.high_comp(c, ctx->bundle); });
      ctx->high_done[c].open();
    };
    auto assemble_op = [this, ctx, &ops](int c, const std::string& stream, int step_id) {
      await(ctx, ctx->high_done[c], "a high op");
      // The low op for this component writes the slice being overwritten;
      // it must have fully landed before the FP32 result replaces it.
      await(ctx, ctx->low_done[c], "a low op");
      Clock::time_point t0 = Clock::now();
      ops.assemble_comp(c);
      record("assemble." + std::to_string(c), stream, step_id, t0, Clock::now());
      if (ctx->assembles_left.fetch_sub(1) == 1) ctx->assembles_done.open();
    };
    auto low_op = [this, ctx, &ops, lo](int c, const std::string& stream, int step_id) {
      paced("low." + std::to_string(c), stream, step_id, lo, [&] { ops.low_comp(c); });
      ctx->low_done[c].open();
    };
    auto attend_op = [this, ctx, &ops, lo, has_high](const std::string& stream,
                                                     int step_id) {
      if (has_high) {
        await(ctx, ctx->assembles_done, "head assembly");
        await(ctx, ctx->chunk[3], "the output-projection chunk");
      }
      paced("attend", stream, step_id, lo, [&] { ops.attend_project(ctx->bundle); });
    };

    if (!has_high) {
      ctx->pending.store(4);
      for (int c = 0; c < 3; ++c)
        low.post(task(ctx, [=] { low_op(c, "low", step); }));
      low.post(task(ctx, [=] { attend_op("low", step); }));
    } else {
      switch (config) {
        case StreamConfig::None:
          // Single stream in dependency order.
          ctx->pending.store(14);
          for (int c = 0; c < 4; ++c)
            low.post(task(ctx, [=] { transfer_chunk(c, "low", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { low_op(c, "low", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { high_op(c, "low", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { assemble_op(c, "low", step); }));
          low.post(task(ctx, [=] { attend_op("low", step); }));
          break;
        case StreamConfig::LoadOnly:
          // Transfers overlap; all compute shares the low stream.
          ctx->pending.store(14);
          for (int c = 0; c < 4; ++c)
            load.post(task(ctx, [=] { transfer_chunk(c, "load", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { low_op(c, "low", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { high_op(c, "low", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { assemble_op(c, "low", step); }));
          low.post(task(ctx, [=] { attend_op("low", step); }));
          break;
        case StreamConfig::ComputeOnly: {
          // Blocking transfer on the coordinator, then two compute streams.
          for (int c = 0; c < 4; ++c) transfer_chunk(c, "coord", step);
          ctx->pending.store(10);
          for (int c = 0; c < 3; ++c)
            high.post(task(ctx, [=] { high_op(c, "high", step); }));
          for (int c = 0; c < 3; ++c)
            high.post(task(ctx, [=] { assemble_op(c, "high", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { low_op(c, "low", step); }));
          low.post(task(ctx, [=] { attend_op("low", step); }));
          break;
        }
        case StreamConfig::Both:
          // Full pipeline: load, low, and high streams all live.
          ctx->pending.store(14);
          for (int c = 0; c < 4; ++c)
            load.post(task(ctx, [=] { transfer_chunk(c, "load", step); }));
          for (int c = 0; c < 3; ++c)
            high.post(task(ctx, [=] { high_op(c, "high", step); }));
          for (int c = 0; c < 3; ++c)
            high.post(task(ctx, [=] { assemble_op(c, "high", step); }));
          for (int c = 0; c < 3; ++c)
            low.post(task(ctx, [=] { low_op(c, "low", step); }));
          low.post(task(ctx, [=] { attend_op("low", step); }));
          break;
      }
    }

    if (!ctx->finished.wait_ms(watchdog_ms * 4.0))
      throw std::runtime_error("StreamExecutor: watchdog expired waiting for the step");
    if (ctx->bundle) {
      store->release(ctx->bundle);
      ctx->bundle = nullptr;
    }
    {
      std::lock_guard<std::mutex> lock(ctx->err_mu);
      if (ctx->error) std::rethrow_exception(ctx->error);
    }
    if (costs.overhead_ms > 0.0)
      paced("overhead", "coord", step, costs.overhead_ms, [] {});
  }
};

StreamExecutor::StreamExecutor(WeightStore& store, StreamConfig config, CostModel costs)
    : impl_(std::make_unique<Impl>()), config_(config), costs_(costs) {
  costs.validate();
  impl_->store = &store;
  impl_->config = config;
  impl_->costs = costs;
}

StreamExecutor::~StreamExecutor() = default;

void StreamExecutor::run_step(AttentionOps& ops) { impl_->run_step(ops); }

AttentionScheduler StreamExecutor::scheduler() {
  return [this](AttentionOps& ops) { run_step(ops); };
}

Timeline StreamExecutor::timeline() const {
  std::lock_guard<std::mutex> lock(impl_->tl_mu);
  Timeline t;
  t.events = impl_->events;
  double lo = 0.0, hi = 0.0;
  bool any = false;
  for (const TraceEvent& e : t.events) {
    if (!any) {
      lo = e.begin_ms;
      hi = e.end_ms;
      any = true;
    }
    lo = std::min(lo, e.begin_ms);
    hi = std::max(hi, e.end_ms);
  }
  t.makespan_ms = any ? hi - lo : 0.0;
  return t;
}

void StreamExecutor::reset_timeline() {
  std::lock_guard<std::mutex> lock(impl_->tl_mu);
  impl_->events.clear();
  impl_->epoch = Clock::now();
}

void StreamExecutor::set_jitter(uint32_t seed, double max_extra_ms) {
  std::lock_guard<std::mutex> lock(impl_->jit_mu);
  impl_->jit_rng.seed(seed);
  impl_->jit_max_ms = max_extra_ms;
  impl_->jitter_on = max_extra_ms > 0.0;
}

void StreamExecutor::set_watchdog_ms(double ms) {
  if (!(ms > 0.0)) throw std::invalid_argument("set_watchdog_ms: must be positive");
  impl_->watchdog_ms = ms;
}

int StreamExecutor::steps_run() const { return impl_->steps.load(); }

// --- trace validation -----------------------------------------------------

void validate_timeline(const Timeline& t) {
  const double slack = 1e-6;
  std::map<std::string, std::vector<const TraceEvent*>> by_stream;
  std::map<std::pair<int, std::string>, const TraceEvent*> by_op;
  for (const TraceEvent& e : t.events) {
    if (e.end_ms < e.begin_ms - slack)
      throw std::runtime_error("validate_timeline: event ends before it begins: " + e.op);
    by_stream[e.stream].push_back(&e);
    by_op[{e.step, e.op}] = &e;
  }
  for (auto& [stream, evs] : by_stream) {
    std::sort(evs.begin(), evs.end(),
              [](const TraceEvent* a, const TraceEvent* b) { return a->begin_ms < b->begin_ms; });
    for (size_t i = 1; i < evs.size(); ++i)
      if (evs[i]->begin_ms < evs[i - 1]->end_ms - slack)
        throw std::runtime_error("validate_timeline: overlap on stream " + stream +
                                 " between " + evs[i - 1]->op + " and " + evs[i]->op);
  }
  auto find = [&](int step, const std::string& op) -> const TraceEvent* {
    auto it = by_op.find({step, op});
    return it == by_op.end() ? nullptr : it->second;
  };
  int max_step = -1;
  for (const TraceEvent& e : t.events) max_step = std::max(max_step, e.step);
  for (int s = 0; s <= max_step; ++s) {
    for (int c = 1; c < 4; ++c) {
      const TraceEvent* prev = find(s, "transfer." + std::to_string(c - 1));
      const TraceEvent* cur = find(s, "transfer." + std::to_string(c));
      if (prev && cur && cur->begin_ms < prev->end_ms - slack)
        throw std::runtime_error("validate_timeline: transfer chunks out of order");
    }
    for (int c = 0; c < 3; ++c) {
      const TraceEvent* chunk = find(s, "transfer." + std::to_string(c));
      const TraceEvent* hc = find(s, "high." + std::to_string(c));
      if (chunk && hc && hc->begin_ms < chunk->end_ms - slack)
        throw std::runtime_error("validate_timeline: high op ran before its chunk landed");
      const TraceEvent* as = find(s, "assemble." + std::to_string(c));
      if (hc && as && as->begin_ms < hc->end_ms - slack)
        throw std::runtime_error("validate_timeline: assemble ran before its high op");
      const TraceEvent* at = find(s, "attend");
      if (as && at && at->begin_ms < as->end_ms - slack)
        throw std::runtime_error("validate_timeline: attention ran before assembly");
    }
  }
}

void export_trace_csv(const Timeline& t, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("export_trace_csv: cannot open " + path);
  out << "step,op,stream,begin_ms,end_ms\n";
  for (const TraceEvent& e : t.events)
    out << e.step << "," << e.op << "," << e.stream << "," << e.begin_ms << ","
        << e.end_ms << "\n";
  if (!out) throw std::runtime_error("export_trace_csv: write failed for " + path);
}

// --- ablation -------------------------------------------------------------

std::vector<AblationRow> ablate_stream_configs(WeightStore& store,
                                               const ImageBank& images,
                                               const ComputationalGraph& g,
                                               std::span<const int> tokens,
                                               const PrecisionPolicy& policy,
                                               const CostModel& costs) {
  std::vector<AblationRow> rows;
  Tensor reference;
  for (StreamConfig c : {StreamConfig::None, StreamConfig::LoadOnly,
                         StreamConfig::ComputeOnly, StreamConfig::Both}) {
    StreamExecutor exec(store, c, costs);
    AttentionScheduler sched = exec.scheduler();
    Clock::time_point t0 = Clock::now();
    ActivationCache cache = forward(g, images, tokens, policy, {}, &sched);
    double wall = ms_between(t0, Clock::now());

    double predicted = 0.0;
    for (uint32_t l = 0; l < g.config().n_layers; ++l) {
      bool has_high = policy.target_head && policy.target_head->layer == static_cast<int>(l);
      predicted += has_high ? simulate_step(c, costs) : costs.low_ms + costs.overhead_ms;
    }
    if (reference.empty())
      reference = cache.logits();
    else if (!cache.logits().bitwise_equal(reference))
      throw std::runtime_error("ablate_stream_configs: results diverged across configs");
    rows.push_back({c, wall, predicted});
  }
  return rows;
}

}  // namespace cq
