// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/model.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "circuitquant/assembly.hpp"
#include "circuitquant/kernels.hpp"
#include "circuitquant/pahq.hpp"

namespace cq {

// --- node naming ----------------------------------------------------------

std::string node_name(const NodeId& node) {
  switch (node.kind) {
    case NodeKind::Embed: return "embed";
    case NodeKind::Unembed: return "unembed";
    case NodeKind::Head:
      return "a" + std::to_string(node.layer) + "." + std::to_string(node.head);
    case NodeKind::Mlp: return "m" + std::to_string(node.layer);
  }
  throw std::invalid_argument("node_name: bad kind");
}

NodeId parse_node(const std::string& name) {
  if (name == "embed") return {NodeKind::Embed, -1, -1};
  if (name == "unembed") return {NodeKind::Unembed, -1, -1};
  auto parse_int = [&](const std::string& s) {
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("parse_node: bad node name '" + name + "'");
    return std::stoi(s);
  };
  if (name.size() >= 2 && name[0] == 'a') {
    size_t dot = name.find('.');
    if (dot == std::string::npos)
      throw std::invalid_argument("parse_node: bad node name '" + name + "'");
    return {NodeKind::Head, parse_int(name.substr(1, dot - 1)),
            parse_int(name.substr(dot + 1))};
  }
  if (name.size() >= 2 && name[0] == 'm')
    return {NodeKind::Mlp, parse_int(name.substr(1)), -1};
  throw std::invalid_argument("parse_node: bad node name '" + name + "'");
}

// --- precision policy -----------------------------------------------------

Precision PrecisionPolicy::precision_of(const NodeId& node) const {
  switch (node.kind) {
    case NodeKind::Embed: return embed_precision;
    case NodeKind::Unembed: return unembed_precision;
    case NodeKind::Head:
      if (target_head && target_head->layer == node.layer &&
          target_head->head == node.head)
        return Precision::P32;
      return attention_default;
    case NodeKind::Mlp:
      if (target_mlp && *target_mlp == node.layer) return Precision::P32;
      return mlp_default;
  }
  throw std::invalid_argument("PrecisionPolicy::precision_of: bad kind");
}

Precision PrecisionPolicy::wo_precision(int layer) const {
  if (target_head && target_head->layer == layer) return Precision::P32;
  return attention_default;
}

std::string PrecisionPolicy::key() const {
  std::ostringstream os;
  os << "a" << precision_name(attention_default) << "," << "m"
     << precision_name(mlp_default) << ",e" << precision_name(embed_precision)
     << ",u" << precision_name(unembed_precision) << ","
     << (low_mode == LowMode::E4m3 ? "e4m3" : "rtn4");
  if (target_head)
    os << ",th=a" << target_head->layer << "." << target_head->head;
  if (target_mlp) os << ",tm=m" << *target_mlp;
  return os.str();
}

PrecisionPolicy PrecisionPolicy::all_fp32() {
  PrecisionPolicy p;
  p.attention_default = Precision::P32;
  p.mlp_default = Precision::P32;
  p.embed_precision = Precision::P32;
  p.unembed_precision = Precision::P32;
  return p;
}

PrecisionPolicy PrecisionPolicy::all_low(LowMode mode) {
  PrecisionPolicy p;
  p.attention_default = Precision::P8;
  p.mlp_default = Precision::P8;
  p.embed_precision = Precision::P8;
  p.unembed_precision = Precision::P8;
  p.low_mode = mode;
  return p;
}

PrecisionPolicy PrecisionPolicy::head_quantized(Precision attention_default, LowMode mode) {
  PrecisionPolicy p;
  p.attention_default = attention_default;
  p.low_mode = mode;
  return p;
}

// --- head assembly --------------------------------------------------------

Tensor mixed_assembly(const Tensor& low, const Tensor& high, int target) {
  if (low.rank() != 3) throw std::invalid_argument("mixed_assembly: low must be rank 3");
  if (high.rank() != 2) throw std::invalid_argument("mixed_assembly: high must be rank 2");
  if (target < 0 || target >= low.dim(1))
    throw std::invalid_argument("mixed_assembly: target head out of range");
  if (high.dim(0) != low.dim(0) || high.dim(1) != low.dim(2))
    throw std::invalid_argument("mixed_assembly: slice shape mismatch");
  Tensor out = low;
  for (int64_t i = 0; i < low.dim(0); ++i)
    for (int64_t j = 0; j < low.dim(2); ++j) out.at(i, target, j) = high.at(i, j);
  return out;
}

Tensor concat_heads(const Tensor& heads) {
  if (heads.rank() != 3) throw std::invalid_argument("concat_heads: rank must be 3");
  Tensor out(heads.dim(0), heads.dim(1) * heads.dim(2));
  std::memcpy(out.data(), heads.data(), sizeof(float) * static_cast<size_t>(heads.size()));
  return out;
}

Tensor split_heads(const Tensor& x, int n_heads) {
  if (x.rank() != 2) throw std::invalid_argument("split_heads: rank must be 2");
  if (n_heads <= 0 || x.dim(1) % n_heads != 0)
    throw std::invalid_argument("split_heads: width not divisible by head count");
  Tensor out(x.dim(0), n_heads, x.dim(1) / n_heads);
  std::memcpy(out.data(), x.data(), sizeof(float) * static_cast<size_t>(x.size()));
  return out;
}

// --- config ---------------------------------------------------------------

void ModelConfig::validate() const {
  if (n_layers < 1) throw std::invalid_argument("ModelConfig: n_layers must be >= 1");
  if (n_heads < 1) throw std::invalid_argument("ModelConfig: n_heads must be >= 1");
  if (d_model < 1 || d_k < 1)
    throw std::invalid_argument("ModelConfig: d_model and d_k must be >= 1");
  if (n_heads * d_k != d_model)
    throw std::invalid_argument("ModelConfig: n_heads * d_k must equal d_model");
  if (vocab < 2) throw std::invalid_argument("ModelConfig: vocab must be >= 2");
  if (seq_len < 1) throw std::invalid_argument("ModelConfig: seq_len must be >= 1");
  if (batch != 1) throw std::invalid_argument("ModelConfig: batch must be 1");
  if (has_mlp > 1) throw std::invalid_argument("ModelConfig: has_mlp must be 0 or 1");
}

uint64_t ModelConfig::param_count() const {
  uint64_t d = d_model, v = vocab, s = seq_len;
  uint64_t per_layer = 2 * d + 4 * d * d;  // ln1 + QKVO
  if (has_mlp) per_layer += 2 * d + 8 * d * d;  // ln2 + in/out with 4d hidden
  return v * d + s * d + n_layers * per_layer + 2 * d + d * v;
}

// --- graph ----------------------------------------------------------------

namespace {

// Sequential stage: nodes in the same stage are parallel (no edges
// between them); an edge exists iff stage(src) < stage(dst).
int node_stage(const NodeId& n, const ModelConfig& cfg) {
  switch (n.kind) {
    case NodeKind::Embed: return 0;
    case NodeKind::Head: return 1 + 2 * n.layer;
    case NodeKind::Mlp: return 2 + 2 * n.layer;
    case NodeKind::Unembed: return 1 + 2 * static_cast<int>(cfg.n_layers);
  }
  throw std::invalid_argument("node_stage: bad kind");
}

}  // namespace

ComputationalGraph::ComputationalGraph(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  nodes_.push_back({NodeKind::Embed, -1, -1});
  for (int l = 0; l < static_cast<int>(cfg_.n_layers); ++l) {
    for (int h = 0; h < static_cast<int>(cfg_.n_heads); ++h)
      nodes_.push_back({NodeKind::Head, l, h});
    if (cfg_.has_mlp) nodes_.push_back({NodeKind::Mlp, l, -1});
  }
  nodes_.push_back({NodeKind::Unembed, -1, -1});

  in_edges_.resize(nodes_.size());
  for (int j = 0; j < static_cast<int>(nodes_.size()); ++j) {
    for (int i = 0; i < j; ++i) {
      if (node_stage(nodes_[i], cfg_) >= node_stage(nodes_[j], cfg_)) continue;
      int idx = static_cast<int>(edges_.size());
      edges_.push_back({idx, i, j});
      in_edges_[j].push_back(idx);
      edge_by_pair_[{i, j}] = idx;
    }
  }
  mask_.assign(edges_.size(), true);
}

int ComputationalGraph::node_index(const NodeId& node) const {
  for (int i = 0; i < static_cast<int>(nodes_.size()); ++i)
    if (nodes_[i] == node) return i;
  throw std::invalid_argument("ComputationalGraph::node_index: unknown node " +
                              node_name(node));
}

int ComputationalGraph::edge_index(const NodeId& src, const NodeId& dst) const {
  auto it = edge_by_pair_.find({node_index(src), node_index(dst)});
  if (it == edge_by_pair_.end())
    throw std::invalid_argument("ComputationalGraph::edge_index: no edge " +
                                node_name(src) + "->" + node_name(dst));
  return it->second;
}

void ComputationalGraph::remove_edge(int edge) {
  if (edge < 0 || edge >= static_cast<int>(edges_.size()))
    throw std::invalid_argument("ComputationalGraph::remove_edge: bad edge index");
  mask_[edge] = false;
}

void ComputationalGraph::restore_edge(int edge) {
  if (edge < 0 || edge >= static_cast<int>(edges_.size()))
    throw std::invalid_argument("ComputationalGraph::restore_edge: bad edge index");
  mask_[edge] = true;
}

void ComputationalGraph::reset_mask() { mask_.assign(edges_.size(), true); }

int ComputationalGraph::present_count() const {
  return static_cast<int>(std::count(mask_.begin(), mask_.end(), true));
}

std::vector<Edge> ComputationalGraph::sweep_order() const {
  std::vector<Edge> order;
  for (int j = static_cast<int>(nodes_.size()) - 1; j >= 0; --j) {
    const std::vector<int>& in = in_edges_[j];
    for (auto it = in.rbegin(); it != in.rend(); ++it)
      if (mask_[*it]) order.push_back(edges_[*it]);
  }
  return order;
}

// --- weights --------------------------------------------------------------

WeightSet WeightSet::zeros(const ModelConfig& cfg) {
  cfg.validate();
  WeightSet w;
  w.cfg = cfg;
  int64_t d = cfg.d_model, v = cfg.vocab, s = cfg.seq_len;
  auto ones = [](int64_t n) {
    Tensor t = Tensor::vec(n);
    for (int64_t i = 0; i < n; ++i) t.at(i) = 1.0f;
    return t;
  };
  w.w_e = Tensor(v, d);
  w.w_pos = Tensor(s, d);
  w.layers.resize(cfg.n_layers);
  for (auto& lw : w.layers) {
    lw.ln1_g = ones(d);
    lw.ln1_b = Tensor::vec(d);
    lw.w_q = Tensor(d, d);
    lw.w_k = Tensor(d, d);
    lw.w_v = Tensor(d, d);
    lw.w_o = Tensor(d, d);
    if (cfg.has_mlp) {
      lw.ln2_g = ones(d);
      lw.ln2_b = Tensor::vec(d);
      lw.w_in = Tensor(d, 4 * d);
      lw.w_out = Tensor(4 * d, d);
    }
  }
  w.ln_f_g = ones(d);
  w.ln_f_b = Tensor::vec(d);
  w.w_u = Tensor(d, v);
  return w;
}

namespace {

template <class WS, class Fn>
void visit_matrices(WS& w, Fn&& fn) {
  fn("w_e", w.w_e);
  fn("w_pos", w.w_pos);
  for (size_t l = 0; l < w.layers.size(); ++l) {
    const std::string pre = "l" + std::to_string(l) + ".";
    auto& lw = w.layers[l];
    fn(pre + "ln1_g", lw.ln1_g);
    fn(pre + "ln1_b", lw.ln1_b);
    fn(pre + "w_q", lw.w_q);
    fn(pre + "w_k", lw.w_k);
    fn(pre + "w_v", lw.w_v);
    fn(pre + "w_o", lw.w_o);
    if (w.cfg.has_mlp) {
      fn(pre + "ln2_g", lw.ln2_g);
      fn(pre + "ln2_b", lw.ln2_b);
      fn(pre + "w_in", lw.w_in);
      fn(pre + "w_out", lw.w_out);
    }
  }
  fn("ln_f_g", w.ln_f_g);
  fn("ln_f_b", w.ln_f_b);
  fn("w_u", w.w_u);
}

}  // namespace

void for_each_matrix(const WeightSet& w,
                     const std::function<void(const std::string&, const Tensor&)>& fn) {
  visit_matrices(w, fn);
}

void for_each_matrix(WeightSet& w,
                     const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_matrices(w, fn);
}

// --- weight file IO -------------------------------------------------------

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed) {
  const uint8_t* p = static_cast<const uint8_t*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

constexpr char kMagic[4] = {'P', 'A', 'H', 'Q'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const std::string& buf, size_t off) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i)
    v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[off + i])) << (8 * i);
  return v;
}

uint64_t get_u64(const std::string& buf, size_t off) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[off + i])) << (8 * i);
  return v;
}

constexpr size_t kHeaderBytes = 4 + 4 + 8 * 4;  // magic + version + config

}  // namespace

void save_weights(const WeightSet& w, const std::string& path) {
  w.cfg.validate();
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, kVersion);
  for (uint32_t v : {w.cfg.n_layers, w.cfg.n_heads, w.cfg.d_model, w.cfg.d_k,
                     w.cfg.vocab, w.cfg.seq_len, w.cfg.batch, w.cfg.has_mlp})
    put_u32(buf, v);
  for_each_matrix(w, [&](const std::string&, const Tensor& t) {
    const char* p = reinterpret_cast<const char*>(t.data());
    buf.append(p, sizeof(float) * static_cast<size_t>(t.size()));
  });
  uint64_t sum = fnv1a64(buf.data(), buf.size());
  for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((sum >> (8 * i)) & 0xff));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw WeightIoError("save_weights: cannot open " + path);
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw WeightIoError("save_weights: write failed for " + path);
}

WeightSet load_weights(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw WeightIoError("load_weights: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < 4 || std::memcmp(buf.data(), kMagic, 4) != 0)
    throw BadMagicError("load_weights: bad magic in " + path);
  if (buf.size() < kHeaderBytes)
    throw TruncatedError("load_weights: truncated header in " + path);
  uint32_t version = get_u32(buf, 4);
  if (version != kVersion)
    throw BadVersionError("load_weights: unsupported version " + std::to_string(version));

  ModelConfig cfg;
  uint32_t* fields[8] = {&cfg.n_layers, &cfg.n_heads, &cfg.d_model, &cfg.d_k,
                         &cfg.vocab, &cfg.seq_len, &cfg.batch, &cfg.has_mlp};
  for (int i = 0; i < 8; ++i) *fields[i] = get_u32(buf, 8 + 4 * static_cast<size_t>(i));
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw BadShapeError(std::string("load_weights: ") + e.what());
  }

  WeightSet w = WeightSet::zeros(cfg);
  size_t payload = 0;
  for_each_matrix(static_cast<const WeightSet&>(w),
                  [&](const std::string&, const Tensor& t) {
                    payload += sizeof(float) * static_cast<size_t>(t.size());
                  });
  size_t expect = kHeaderBytes + payload + 8;
  if (buf.size() < expect)
    throw TruncatedError("load_weights: file shorter than header implies in " + path);
  if (buf.size() > expect)
    throw BadShapeError("load_weights: trailing bytes after checksum in " + path);

  uint64_t sum = fnv1a64(buf.data(), buf.size() - 8);
  if (sum != get_u64(buf, buf.size() - 8))
    throw BadChecksumError("load_weights: checksum mismatch in " + path);

  size_t off = kHeaderBytes;
  for_each_matrix(w, [&](const std::string&, Tensor& t) {
    std::memcpy(t.data(), buf.data() + off, sizeof(float) * static_cast<size_t>(t.size()));
    off += sizeof(float) * static_cast<size_t>(t.size());
  });
  return w;
}

// --- image bank -----------------------------------------------------------

namespace {

std::pair<Precision, LowMode> normalize_need(Precision p, LowMode mode) {
  if (p != Precision::P8) return {p, LowMode::E4m3};
  return {p, mode};
}

std::string image_key(const std::string& name, Precision p, LowMode mode) {
  return name + "|" + precision_name(p) +
         (p == Precision::P8 && mode == LowMode::Rtn4 ? "/rtn4" : "");
}

// Quantizes the 4-bit integer-grid image with head slices as separate
// groups for the attention projections.
void quantize_rtn4_matrix(const std::string& name, Tensor& t, const ModelConfig& cfg) {
  int64_t dk = cfg.d_k;
  if (name.ends_with(".w_q") || name.ends_with(".w_k") || name.ends_with(".w_v")) {
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      std::vector<float> tmp(static_cast<size_t>(t.dim(0) * dk));
      for (int64_t r = 0; r < t.dim(0); ++r)
        for (int64_t c = 0; c < dk; ++c)
          tmp[static_cast<size_t>(r * dk + c)] = t.at(r, h * dk + c);
      quantize_rtn(std::span<float>(tmp), 4);
      for (int64_t r = 0; r < t.dim(0); ++r)
        for (int64_t c = 0; c < dk; ++c)
          t.at(r, h * dk + c) = tmp[static_cast<size_t>(r * dk + c)];
    }
    return;
  }
  if (name.ends_with(".w_o")) {
    for (int64_t h = 0; h < cfg.n_heads; ++h) {
      std::span<float> block(t.data() + h * dk * t.dim(1),
                             static_cast<size_t>(dk * t.dim(1)));
      quantize_rtn(block, 4);
    }
    return;
  }
  quantize_rtn(t.flat(), 4);
}

}  // namespace

ImageBank::ImageBank(const WeightSet& w, std::vector<std::pair<Precision, LowMode>> needs)
    : weights_(&w) {
  std::set<std::pair<Precision, LowMode>> uniq;
  for (auto [p, mode] : needs) uniq.insert(normalize_need(p, mode));
  uniq.insert({Precision::P32, LowMode::E4m3});
  needs_.assign(uniq.begin(), uniq.end());

  for (auto [p, mode] : needs_) {
    if (p == Precision::P32) continue;
    for_each_matrix(w, [&](const std::string& name, const Tensor& master) {
      Tensor img = master;
      if (p == Precision::P8 && mode == LowMode::Rtn4)
        quantize_rtn4_matrix(name, img, w.cfg);
      else
        quantize_span(img.flat(), p, mode);
      images_.emplace(image_key(name, p, mode), std::move(img));
    });
  }
}

ImageBank ImageBank::for_policies(const WeightSet& w,
                                  std::span<const PrecisionPolicy> policies) {
  std::vector<std::pair<Precision, LowMode>> needs;
  for (const PrecisionPolicy& pol : policies) {
    needs.emplace_back(pol.attention_default, pol.low_mode);
    needs.emplace_back(pol.mlp_default, pol.low_mode);
    needs.emplace_back(pol.embed_precision, pol.low_mode);
    needs.emplace_back(pol.unembed_precision, pol.low_mode);
  }
  return ImageBank(w, std::move(needs));
}

const Tensor& ImageBank::get(const std::string& name, Precision p, LowMode mode) const {
  auto [np, nm] = normalize_need(p, mode);
  if (np == Precision::P32) {
    const Tensor* found = nullptr;
    for_each_matrix(*weights_, [&](const std::string& n, const Tensor& t) {
      if (n == name) found = &t;
    });
    if (!found) throw std::invalid_argument("ImageBank::get: unknown matrix " + name);
    return *found;
  }
  auto it = images_.find(image_key(name, np, nm));
  if (it == images_.end())
    throw std::invalid_argument("ImageBank::get: no image " + image_key(name, np, nm));
  return it->second;
}

bool ImageBank::has(Precision p, LowMode mode) const {
  auto need = normalize_need(p, mode);
  return std::find(needs_.begin(), needs_.end(), need) != needs_.end();
}

// --- forward pass ---------------------------------------------------------

const Tensor& ActivationCache::logits() const {
  if (unembed_index < 0) throw std::runtime_error("ActivationCache: no logits");
  return nodes[static_cast<size_t>(unembed_index)].out;
}

namespace {

constexpr float kLnEps = 1e-5f;

Tensor sum_inputs(const ComputationalGraph& g, const std::vector<NodeActivations>& acts,
                  const std::map<int, const Tensor*>& patch_map, int v, int64_t s,
                  int64_t d) {
  Tensor in(s, d);
  for (int e : g.in_edges(v)) {
    if (!g.present(e)) continue;
    const Edge& ed = g.all_edges()[static_cast<size_t>(e)];
    const Tensor* src = &acts[static_cast<size_t>(ed.src)].out;
    auto it = patch_map.find(e);
    if (it != patch_map.end()) src = it->second;
    float* dst = in.data();
    const float* sp = src->data();
    for (int64_t i = 0; i < in.size(); ++i) dst[i] += sp[i];
  }
  return in;
}

}  // namespace

ActivationCache forward(const ComputationalGraph& g, const ImageBank& images,
                        std::span<const int> tokens, const PrecisionPolicy& policy,
                        std::span<const EdgePatch> patches,
                        const AttentionScheduler* scheduler) {
  const ModelConfig& cfg = g.config();
  const WeightSet& w = images.weights();
  const int64_t S = cfg.seq_len, D = cfg.d_model, dk = cfg.d_k, V = cfg.vocab;
  const int H = static_cast<int>(cfg.n_heads);
  const LowMode mode = policy.low_mode;
  const Exec exec = Exec::Parallel;

  if (static_cast<int64_t>(tokens.size()) != S)
    throw std::invalid_argument("forward: token count must equal seq_len");
  for (int t : tokens)
    if (t < 0 || t >= static_cast<int>(V))
      throw std::invalid_argument("forward: token id out of range");

  if (policy.target_head &&
      (policy.target_head->layer < 0 ||
       policy.target_head->layer >= static_cast<int>(cfg.n_layers) ||
       policy.target_head->head < 0 || policy.target_head->head >= H))
    throw std::invalid_argument("forward: target head out of range");
  if (policy.target_mlp &&
      (!cfg.has_mlp || *policy.target_mlp < 0 ||
       *policy.target_mlp >= static_cast<int>(cfg.n_layers)))
    throw std::invalid_argument("forward: target mlp out of range");

  std::map<int, const Tensor*> patch_map;
  for (const EdgePatch& p : patches) {
    if (p.edge < 0 || p.edge >= static_cast<int>(g.all_edges().size()))
      throw std::invalid_argument("forward: patch references unknown edge");
    if (!g.present(p.edge))
      throw std::invalid_argument("forward: patch references masked edge " +
                                  std::to_string(p.edge));
    if (p.value == nullptr || p.value->rank() != 2 || p.value->dim(0) != S ||
        p.value->dim(1) != D)
      throw std::invalid_argument("forward: patch value must be (seq_len, d_model)");
    if (!patch_map.emplace(p.edge, p.value).second)
      throw std::invalid_argument("forward: duplicate patch for edge " +
                                  std::to_string(p.edge));
  }

  ActivationCache cache;
  cache.nodes.resize(g.nodes().size());
  cache.tokens.assign(tokens.begin(), tokens.end());
  cache.policy_key = policy.key();
  cache.unembed_index = static_cast<int>(g.nodes().size()) - 1;

  size_t vi = 0;
  const std::vector<NodeId>& nodes = g.nodes();
  while (vi < nodes.size()) {
    const NodeId& node = nodes[vi];
    if (node.kind == NodeKind::Embed) {
      Precision p = policy.precision_of(node);
      const Tensor& we = images.get("w_e", p, mode);
      const Tensor& wp = images.get("w_pos", p, mode);
      Tensor out(S, D);
      for (int64_t i = 0; i < S; ++i)
        for (int64_t j = 0; j < D; ++j)
          out.at(i, j) = we.at(tokens[static_cast<size_t>(i)], j) + wp.at(i, j);
      quantize_tensor(out, p, mode);
      cache.nodes[vi].out = std::move(out);
      ++vi;
      continue;
    }

    if (node.kind == NodeKind::Head) {
      // All heads of this layer form one schedulable step.
      const int l = node.layer;
      const size_t first = vi;
      const LayerWeights& lw = w.layers[static_cast<size_t>(l)];
      const Precision p_low = policy.attention_default;
      std::optional<int> target;
      if (policy.target_head && policy.target_head->layer == l)
        target = policy.target_head->head;

      std::vector<Tensor> xln(static_cast<size_t>(H)), xq(static_cast<size_t>(H));
      for (int h = 0; h < H; ++h) {
        size_t v = first + static_cast<size_t>(h);
        cache.nodes[v].in = sum_inputs(g, cache.nodes, patch_map, static_cast<int>(v), S, D);
        xln[static_cast<size_t>(h)] = Tensor(S, D);
        layer_norm(cache.nodes[v].in, lw.ln1_g.flat(), lw.ln1_b.flat(), kLnEps,
                   xln[static_cast<size_t>(h)], exec);
        xq[static_cast<size_t>(h)] = xln[static_cast<size_t>(h)];
        quantize_tensor(xq[static_cast<size_t>(h)], p_low, mode);
      }

      const std::string pre = "l" + std::to_string(l) + ".";
      const Tensor* low_w[3] = {&images.get(pre + "w_q", p_low, mode),
                                &images.get(pre + "w_k", p_low, mode),
                                &images.get(pre + "w_v", p_low, mode)};
      const Tensor& wo_img = images.get(pre + "w_o", policy.wo_precision(l), mode);

      Tensor low[3] = {Tensor(S, H, dk), Tensor(S, H, dk), Tensor(S, H, dk)};
      Tensor high[3] = {Tensor(S, dk), Tensor(S, dk), Tensor(S, dk)};

      AttentionOps ops;
      ops.layer = l;
      ops.target_head = target;
      ops.low_comp = [&](int c) {
        for (int h = 0; h < H; ++h) {
          Tensor tmp(S, dk);
          matmul_cols(xq[static_cast<size_t>(h)], *low_w[c], h * dk, (h + 1) * dk, tmp,
                      exec);
          quantize_tensor(tmp, p_low, mode);
          for (int64_t i = 0; i < S; ++i)
            for (int64_t j = 0; j < dk; ++j) low[c].at(i, h, j) = tmp.at(i, j);
        }
      };
      ops.high_comp = [&](int c, const HeadBundle* b) {
        const Tensor& x = xln[static_cast<size_t>(*target)];
        if (b) {
          const Tensor& slice = (c == 0 ? b->wq : c == 1 ? b->wk : b->wv);
          matmul(x, slice, high[c], exec);
        } else {
          const Tensor& full = (c == 0 ? lw.w_q : c == 1 ? lw.w_k : lw.w_v);
          matmul_cols(x, full, *target * dk, (*target + 1) * dk, high[c], exec);
        }
      };
      ops.assemble_comp = [&](int c) { low[c] = mixed_assembly(low[c], high[c], *target); };
      ops.attend_project = [&](const HeadBundle* b) {
        for (int h = 0; h < H; ++h) {
          size_t v = first + static_cast<size_t>(h);
          Tensor q(S, dk), k(S, dk), vv(S, dk);
          for (int64_t i = 0; i < S; ++i)
            for (int64_t j = 0; j < dk; ++j) {
              q.at(i, j) = low[0].at(i, h, j);
              k.at(i, j) = low[1].at(i, h, j);
              vv.at(i, j) = low[2].at(i, h, j);
            }
          Tensor z(S, dk);
          causal_attention(q, k, vv, z, nullptr, exec);
          Precision p_h = (target && h == *target) ? Precision::P32 : p_low;
          quantize_tensor(z, p_h, mode);
          Tensor out(S, D);
          if (b && target && h == *target)
            matmul_rows(z, b->wo, static_cast<int64_t>(h) * dk, out, exec);
          else
            matmul_rows(z, wo_img, static_cast<int64_t>(h) * dk, out, exec);
          quantize_tensor(out, p_h, mode);
          cache.nodes[v].q = std::move(q);
          cache.nodes[v].k = std::move(k);
          cache.nodes[v].v = std::move(vv);
          cache.nodes[v].z = std::move(z);
          cache.nodes[v].out = std::move(out);
        }
      };

      if (scheduler && *scheduler) {
        (*scheduler)(ops);
      } else {
        for (int c = 0; c < 3; ++c) ops.low_comp(c);
        if (target) {
          for (int c = 0; c < 3; ++c) {
            ops.high_comp(c, nullptr);
            ops.assemble_comp(c);
          }
        }
        ops.attend_project(nullptr);
      }
      vi += static_cast<size_t>(H);
      continue;
    }

    if (node.kind == NodeKind::Mlp) {
      const LayerWeights& lw = w.layers[static_cast<size_t>(node.layer)];
      Precision p = policy.precision_of(node);
      cache.nodes[vi].in = sum_inputs(g, cache.nodes, patch_map, static_cast<int>(vi), S, D);
      Tensor xln(S, D);
      layer_norm(cache.nodes[vi].in, lw.ln2_g.flat(), lw.ln2_b.flat(), kLnEps, xln, exec);
      quantize_tensor(xln, p, mode);
      const std::string pre = "l" + std::to_string(node.layer) + ".";
      Tensor hidden(S, 4 * D);
      matmul(xln, images.get(pre + "w_in", p, mode), hidden, exec);
      quantize_tensor(hidden, p, mode);
      gelu(hidden, exec);
      quantize_tensor(hidden, p, mode);
      Tensor out(S, D);
      matmul(hidden, images.get(pre + "w_out", p, mode), out, exec);
      quantize_tensor(out, p, mode);
      cache.nodes[vi].out = std::move(out);
      ++vi;
      continue;
    }

    // Unembed.
    {
      Precision p = policy.precision_of(node);
      cache.nodes[vi].in = sum_inputs(g, cache.nodes, patch_map, static_cast<int>(vi), S, D);
      Tensor xln(S, D);
      layer_norm(cache.nodes[vi].in, w.ln_f_g.flat(), w.ln_f_b.flat(), kLnEps, xln, exec);
      quantize_tensor(xln, p, mode);
      Tensor logits(S, V);
      matmul(xln, images.get("w_u", p, mode), logits, exec);
      quantize_tensor(logits, p, mode);
      cache.nodes[vi].out = std::move(logits);
      ++vi;
    }
  }

  return cache;
}

}  // namespace cq
