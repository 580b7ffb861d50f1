// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/pahq.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

#include "circuitquant/numerics.hpp"

namespace cq {

// --- static memory accounting --------------------------------------------

uint64_t weight_elements(const ModelConfig& cfg) { return cfg.param_count(); }

uint64_t fp32_weight_bytes(const ModelConfig& cfg) { return 4 * weight_elements(cfg); }

uint64_t fp8_bank_bytes(const ModelConfig& cfg) { return weight_elements(cfg); }

uint64_t bundle_bytes(const ModelConfig& cfg) {
  uint64_t d = cfg.d_model, dk = cfg.d_k;
  return 4 * (3 * d * dk + d * d);  // Q/K/V column slices + the layer's W_O
}

uint64_t dual_precision_peak_bytes(const ModelConfig& cfg, int slots) {
  if (slots < 1) throw std::invalid_argument("dual_precision_peak_bytes: slots must be >= 1");
  return fp8_bank_bytes(cfg) + static_cast<uint64_t>(slots) * bundle_bytes(cfg);
}

double dual_precision_ratio(const ModelConfig& cfg, int slots) {
  return static_cast<double>(dual_precision_peak_bytes(cfg, slots)) /
         static_cast<double>(fp32_weight_bytes(cfg));
}

// --- weight store ---------------------------------------------------------

WeightStore::WeightStore(const WeightSet& w, int slots) : weights_(&w) {
  if (slots < 1) throw std::invalid_argument("WeightStore: slots must be >= 1");
  w.cfg.validate();
  for_each_matrix(w, [&](const std::string& name, const Tensor& t) {
    std::vector<uint8_t> packed(static_cast<size_t>(t.size()));
    for (int64_t i = 0; i < t.size(); ++i)
      packed[static_cast<size_t>(i)] = encode_f8(static_cast<double>(t.at(i))).bits;
    tele_.bank_bytes += packed.size();
    bank_.emplace(name, std::move(packed));
  });
  slots_.resize(static_cast<size_t>(slots));
  tele_.slot_capacity_bytes = static_cast<uint64_t>(slots) * bundle_bytes(w.cfg);
  tele_.peak_bytes = tele_.bank_bytes;
}

std::span<const uint8_t> WeightStore::bank(const std::string& name) const {
  auto it = bank_.find(name);
  if (it == bank_.end())
    throw std::invalid_argument("WeightStore::bank: unknown matrix " + name);
  return it->second;
}

Tensor WeightStore::bank_as_float(const std::string& name) const {
  std::span<const uint8_t> packed = bank(name);
  const Tensor* master = nullptr;
  for_each_matrix(*weights_, [&](const std::string& n, const Tensor& t) {
    if (n == name) master = &t;
  });
  Tensor out(master->shape());
  for (int64_t i = 0; i < out.size(); ++i)
    out.at(i) = static_cast<float>(decode_f8({packed[static_cast<size_t>(i)]}));
  return out;
}

int WeightStore::find_locked(int layer, int head) const {
  for (size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].state != SlotState::Empty && slots_[i].bundle.layer == layer &&
        slots_[i].bundle.head == head)
      return static_cast<int>(i);
  return -1;
}

int WeightStore::victim_locked() {
  for (size_t i = 0; i < slots_.size(); ++i)
    if (slots_[i].state == SlotState::Empty) return static_cast<int>(i);
  int best = -1;
  for (size_t i = 0; i < slots_.size(); ++i) {
    if (slots_[i].state != SlotState::Ready || slots_[i].pins > 0) continue;
    if (best < 0 || slots_[i].last_use < slots_[static_cast<size_t>(best)].last_use)
      best = static_cast<int>(i);
  }
  if (best < 0) throw std::runtime_error("WeightStore: every slot is pinned or loading");
  return best;
}

void WeightStore::fill_bundle(HeadBundle& b, int layer, int head) const {
  const ModelConfig& cfg = weights_->cfg;
  if (layer < 0 || layer >= static_cast<int>(cfg.n_layers) || head < 0 ||
      head >= static_cast<int>(cfg.n_heads))
    throw std::invalid_argument("WeightStore: head out of range");
  const LayerWeights& lw = weights_->layers[static_cast<size_t>(layer)];
  int64_t d = cfg.d_model, dk = cfg.d_k, c0 = static_cast<int64_t>(head) * dk;
  b.layer = layer;
  b.head = head;
  b.wq = Tensor(d, dk);
  b.wk = Tensor(d, dk);
  b.wv = Tensor(d, dk);
  for (int64_t r = 0; r < d; ++r)
    for (int64_t c = 0; c < dk; ++c) {
      b.wq.at(r, c) = lw.w_q.at(r, c0 + c);
      b.wk.at(r, c) = lw.w_k.at(r, c0 + c);
      b.wv.at(r, c) = lw.w_v.at(r, c0 + c);
    }
  b.wo = lw.w_o;
}

void WeightStore::prefetch(int layer, int head) {
  std::unique_lock<std::mutex> lock(mu_);
  if (find_locked(layer, head) >= 0) return;  // resident or in flight
  int idx = victim_locked();
  Slot& slot = slots_[static_cast<size_t>(idx)];
  slot.state = SlotState::Loading;
  slot.bundle.layer = layer;
  slot.bundle.head = head;
  tele_.loads += 1;
  lock.unlock();

  HeadBundle staged;
  fill_bundle(staged, layer, head);

  lock.lock();
  slot.bundle = std::move(staged);
  slot.state = SlotState::Ready;
  slot.last_use = ++use_clock_;
  uint64_t resident = 0;
  for (const Slot& s : slots_)
    if (s.state != SlotState::Empty) resident += bundle_bytes(weights_->cfg);
  tele_.peak_bytes = std::max(tele_.peak_bytes, tele_.bank_bytes + resident);
  cv_.notify_all();
}

const HeadBundle* WeightStore::acquire(int layer, int head) {
  {
    std::unique_lock<std::mutex> lock(mu_);
    int idx = find_locked(layer, head);
    if (idx >= 0) {
      Slot& slot = slots_[static_cast<size_t>(idx)];
      cv_.wait(lock, [&] { return slot.state == SlotState::Ready; });
      // The waited-on slot can only change identity if evicted, which
      // pinning prevents for other users; re-check.
      if (slot.bundle.layer == layer && slot.bundle.head == head) {
        slot.pins += 1;
        slot.last_use = ++use_clock_;
        tele_.hits += 1;
        return &slot.bundle;
      }
    }
  }
  prefetch(layer, head);
  std::unique_lock<std::mutex> lock(mu_);
  int idx = find_locked(layer, head);
  if (idx < 0) throw std::runtime_error("WeightStore::acquire: load failed");
  Slot& slot = slots_[static_cast<size_t>(idx)];
  cv_.wait(lock, [&] { return slot.state == SlotState::Ready; });
  slot.pins += 1;
  slot.last_use = ++use_clock_;
  return &slot.bundle;
}

void WeightStore::release(const HeadBundle* bundle) {
  std::lock_guard<std::mutex> lock(mu_);
  for (Slot& slot : slots_) {
    if (&slot.bundle == bundle) {
      if (slot.pins <= 0) throw std::runtime_error("WeightStore::release: not pinned");
      slot.pins -= 1;
      cv_.notify_all();
      return;
    }
  }
  throw std::invalid_argument("WeightStore::release: unknown bundle");
}

bool WeightStore::resident(int layer, int head) const {
  std::lock_guard<std::mutex> lock(mu_);
  int idx = find_locked(layer, head);
  return idx >= 0 && slots_[static_cast<size_t>(idx)].state == SlotState::Ready;
}

SlotState WeightStore::slot_state(int slot) const {
  std::lock_guard<std::mutex> lock(mu_);
  return slots_.at(static_cast<size_t>(slot)).state;
}

StoreTelemetry WeightStore::telemetry() const {
  std::lock_guard<std::mutex> lock(mu_);
  return tele_;
}

// --- per-edge precision ---------------------------------------------------

PrecisionPolicy policy_for_edge(const Edge& e, const ComputationalGraph& g,
                                const PrecisionPolicy& base) {
  if (e.src < 0 || e.src >= static_cast<int>(g.nodes().size()))
    throw std::invalid_argument("policy_for_edge: bad edge source");
  PrecisionPolicy p = base;
  p.target_head.reset();
  p.target_mlp.reset();
  const NodeId& src = g.nodes()[static_cast<size_t>(e.src)];
  if (src.kind == NodeKind::Head) p.target_head = HeadRef{src.layer, src.head};
  if (src.kind == NodeKind::Mlp) p.target_mlp = src.layer;
  return p;
}

std::vector<PrefetchAction> make_prefetch_plan(std::span<const Edge> order,
                                               const ComputationalGraph& g) {
  std::vector<PrefetchAction> plan;
  // Model the 2-slot LRU residency the store will actually have.
  std::deque<std::pair<int, int>> resident;
  auto touch = [&](int layer, int head) {
    auto it = std::find(resident.begin(), resident.end(), std::make_pair(layer, head));
    bool was_resident = it != resident.end();
    if (was_resident) resident.erase(it);
    resident.emplace_back(layer, head);
    while (resident.size() > 2) resident.pop_front();
    return was_resident;
  };
  auto head_of = [&](const Edge& e) -> const NodeId* {
    const NodeId& src = g.nodes()[static_cast<size_t>(e.src)];
    return src.kind == NodeKind::Head ? &src : nullptr;
  };
  if (!order.empty()) {
    if (const NodeId* h = head_of(order[0])) touch(h->layer, h->head);
  }
  for (size_t t = 0; t + 1 < order.size(); ++t) {
    const NodeId* nxt = head_of(order[t + 1]);
    if (!nxt) continue;
    bool was = touch(nxt->layer, nxt->head);
    plan.push_back({static_cast<int>(t), nxt->layer, nxt->head, was});
  }
  return plan;
}

}  // namespace cq
