// SPDX-License-Identifier: Apache-2.0
//
// Per-component precision assignment for a forward pass. The default
// head-quantized policy runs attention heads at the low precision, MLPs
// at BF16, embeddings / unembedding / layer norm at FP32, and elevates
// at most one source component (head or MLP) to FP32.

#pragma once

#include <optional>
#include <string>

#include "circuitquant/numerics.hpp"

namespace cq {

struct HeadRef {
  int layer = 0;
  int head = 0;
  friend bool operator==(const HeadRef& a, const HeadRef& b) {
    return a.layer == b.layer && a.head == b.head;
  }
};

enum class NodeKind : uint8_t { Embed, Head, Mlp, Unembed };

struct NodeId {
  NodeKind kind = NodeKind::Embed;
  int layer = -1;
  int head = -1;
  friend bool operator==(const NodeId& a, const NodeId& b) {
    return a.kind == b.kind && a.layer == b.layer && a.head == b.head;
  }
};

struct PrecisionPolicy {
  std::optional<HeadRef> target_head;  // elevated source head, FP32
  std::optional<int> target_mlp;       // layer of an elevated source MLP, FP32
  Precision attention_default = Precision::P8;
  Precision mlp_default = Precision::P16;
  Precision embed_precision = Precision::P32;
  Precision unembed_precision = Precision::P32;
  LowMode low_mode = LowMode::E4m3;

  Precision precision_of(const NodeId& node) const;
  // The output projection runs at FP32 for the whole target layer (the
  // high-precision W_O is fetched with the target head's bundle).
  Precision wo_precision(int layer) const;
  // Stable fingerprint used to key activation caches.
  std::string key() const;

  static PrecisionPolicy all_fp32();
  // Every component at the low precision, including embed and unembed.
  static PrecisionPolicy all_low(LowMode mode = LowMode::E4m3);
  // Head-quantized baseline: no elevated target yet.
  static PrecisionPolicy head_quantized(Precision attention_default = Precision::P8,
                                        LowMode mode = LowMode::E4m3);
};

}  // namespace cq
