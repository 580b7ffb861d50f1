// SPDX-License-Identifier: Apache-2.0
//
// Decoder-only transformer expressed as an explicit computational graph.
// Nodes are embed, attention heads, MLP blocks, and unembed; edges carry
// residual-stream contributions from earlier nodes to later ones. Every
// node recomputes its input as the sum of its unmasked in-edge sources,
// so edges can be removed or patched independently.

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "circuitquant/precision_policy.hpp"
#include "circuitquant/tensor.hpp"

namespace cq {

struct HeadBundle;  // pahq.hpp; FP32 slices staged by the weight store

std::string node_name(const NodeId& node);
NodeId parse_node(const std::string& name);

struct ModelConfig {
  uint32_t n_layers = 1;
  uint32_t n_heads = 1;
  uint32_t d_model = 8;
  uint32_t d_k = 8;
  uint32_t vocab = 16;
  uint32_t seq_len = 8;
  uint32_t batch = 1;
  uint32_t has_mlp = 0;

  void validate() const;  // throws std::invalid_argument
  uint64_t param_count() const;
  friend bool operator==(const ModelConfig& a, const ModelConfig& b) {
    return a.n_layers == b.n_layers && a.n_heads == b.n_heads &&
           a.d_model == b.d_model && a.d_k == b.d_k && a.vocab == b.vocab &&
           a.seq_len == b.seq_len && a.batch == b.batch && a.has_mlp == b.has_mlp;
  }
};

struct Edge {
  int index = -1;  // position in ComputationalGraph::all_edges()
  int src = -1;    // node indices in topological order
  int dst = -1;
};

// Topology plus a mutable presence mask over edges. Node order is
// topological: embed, then per layer all heads followed by the MLP,
// then unembed. Heads of one layer are parallel (no edges between
// them); heads feed the same layer's MLP.
class ComputationalGraph {
 public:
  explicit ComputationalGraph(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const std::vector<NodeId>& nodes() const { return nodes_; }
  int node_index(const NodeId& node) const;  // throws on unknown node
  const std::vector<Edge>& all_edges() const { return edges_; }
  int edge_index(const NodeId& src, const NodeId& dst) const;  // throws
  const std::vector<int>& in_edges(int node) const { return in_edges_.at(node); }

  const std::vector<bool>& mask() const { return mask_; }
  bool present(int edge) const { return mask_.at(edge); }
  void remove_edge(int edge);
  void restore_edge(int edge);
  void reset_mask();
  int present_count() const;

  // Present edges in sweep order: destinations in reverse topological
  // order, sources in reverse topological order within a destination.
  std::vector<Edge> sweep_order() const;

 private:
  ModelConfig cfg_;
  std::vector<NodeId> nodes_;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> in_edges_;  // per dst node, ascending src
  std::map<std::pair<int, int>, int> edge_by_pair_;
  std::vector<bool> mask_;
};

struct LayerWeights {
  Tensor ln1_g, ln1_b;          // (D)
  Tensor w_q, w_k, w_v;          // (D, H*d_k)
  Tensor w_o;                    // (H*d_k, D)
  Tensor ln2_g, ln2_b;           // (D), MLP only
  Tensor w_in;                   // (D, 4D), MLP only
  Tensor w_out;                  // (4D, D), MLP only
};

struct WeightSet {
  ModelConfig cfg;
  Tensor w_e;      // (V, D)
  Tensor w_pos;    // (S, D)
  std::vector<LayerWeights> layers;
  Tensor ln_f_g, ln_f_b;  // (D)
  Tensor w_u;      // (D, V)

  static WeightSet zeros(const ModelConfig& cfg);  // LN gains = 1
};

// Visits every weight matrix in the canonical serialization order with a
// stable name ("w_e", "l0.w_q", "ln_f_g", ...).
void for_each_matrix(const WeightSet& w,
                     const std::function<void(const std::string&, const Tensor&)>& fn);
void for_each_matrix(WeightSet& w,
                     const std::function<void(const std::string&, Tensor&)>& fn);

// --- weight file format ---------------------------------------------------
// Little-endian: magic "PAHQ", u32 version (1), the eight ModelConfig
// fields as u32, all matrices as row-major FP32 in canonical order, then
// a u64 FNV-1a checksum of every preceding byte.

struct WeightIoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct BadMagicError : WeightIoError { using WeightIoError::WeightIoError; };
struct BadVersionError : WeightIoError { using WeightIoError::WeightIoError; };
struct BadShapeError : WeightIoError { using WeightIoError::WeightIoError; };
struct TruncatedError : WeightIoError { using WeightIoError::WeightIoError; };
struct BadChecksumError : WeightIoError { using WeightIoError::WeightIoError; };

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 14695981039346656037ull);
void save_weights(const WeightSet& w, const std::string& path);
WeightSet load_weights(const std::string& path);

// --- quantized weight images ----------------------------------------------

// Eagerly materialized quantized copies of every matrix for each needed
// (precision, low-mode) pair. FP32 requests return the master tensor.
// Integer-grid 4-bit images quantize W_Q/W_K/W_V per head column block
// and W_O per head row block so head slices are independent groups.
class ImageBank {
 public:
  ImageBank(const WeightSet& w, std::vector<std::pair<Precision, LowMode>> needs);
  static ImageBank for_policies(const WeightSet& w,
                                std::span<const PrecisionPolicy> policies);

  const Tensor& get(const std::string& name, Precision p, LowMode mode) const;
  const WeightSet& weights() const { return *weights_; }
  bool has(Precision p, LowMode mode) const;

 private:
  const WeightSet* weights_;
  std::vector<std::pair<Precision, LowMode>> needs_;
  std::map<std::string, Tensor> images_;
};

// --- forward pass ---------------------------------------------------------

struct NodeActivations {
  Tensor out;           // (S, D) residual contribution; unembed: (S, V) logits
  Tensor in;            // (S, D) summed input actually used
  Tensor q, k, v, z;    // (S, d_k), heads only, post-assembly values
};

struct ActivationCache {
  std::vector<NodeActivations> nodes;  // indexed like graph.nodes()
  std::vector<int> tokens;
  std::string policy_key;
  const Tensor& logits() const;  // unembed out
  int unembed_index = -1;
};

struct EdgePatch {
  int edge = -1;
  const Tensor* value = nullptr;  // replaces the source contribution, (S, D)
};

// One attention layer's work split into independently schedulable ops.
// Component indices: 0=Q, 1=K, 2=V.
struct AttentionOps {
  int layer = 0;
  std::optional<int> target_head;  // head needing FP32 in this layer
  // Computes every head's low-precision projection for one component.
  std::function<void(int comp)> low_comp;
  // Computes the target head's FP32 projection for one component; reads
  // slice weights from the bundle when given one, else from the masters.
  std::function<void(int comp, const HeadBundle* bundle)> high_comp;
  // Overwrites the target head's slice with the FP32 result.
  std::function<void(int comp)> assemble_comp;
  // Per-head causal attention + output projection; the bundle, when
  // given, supplies the FP32 W_O for the target layer.
  std::function<void(const HeadBundle* bundle)> attend_project;
};

// Hook for overlap-scheduling the attention phase. The default (null)
// runs ops inline in dependency order with no bundle.
using AttentionScheduler = std::function<void(AttentionOps&)>;

ActivationCache forward(const ComputationalGraph& g, const ImageBank& images,
                        std::span<const int> tokens, const PrecisionPolicy& policy,
                        std::span<const EdgePatch> patches = {},
                        const AttentionScheduler* scheduler = nullptr);

}  // namespace cq
