// SPDX-License-Identifier: Apache-2.0
//
// Planted-circuit tasks and evaluation: task generators with built-in
// construction checks, ROC sweeps over the pruning threshold, circuit
// faithfulness and accuracy, incremental head quantization, precision
// ablations, and run reports.

#include "circuitquant/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "circuitquant/numerics.hpp"
#include "circuitquant/pahq.hpp"

namespace cq {
namespace {

// Thrown by construction checks; generate_planted retries with a fresh seed.
struct ConstructionError : std::runtime_error {
  explicit ConstructionError(const std::string& m) : std::runtime_error(m) {}
};

constexpr int kKeyPos = 2;       // position of the content token
constexpr int kQueryToken = 4;   // token at the final (readout) position
constexpr int kFillerToken = 5;
constexpr int kPoolTokens = 4;   // tokens 0..3 carry labels +1,+1,-1,-1
constexpr double kKeyedScore = 14.0;  // pre-softmax margin of the keyed position
constexpr double kTargetLd = 6.0;     // calibrated mean clean logit diff
constexpr float kLnEps = 1e-5f;       // matches the forward pass
constexpr int kMaxAttempts = 25;
constexpr int kSweepChunks = 10;      // per-head chunks in the quantization sweep

double token_label(int tok) {
  if (tok == 0 || tok == 1) return 1.0;
  if (tok == 2 || tok == 3) return -1.0;
  return 0.0;
}

// --- direction families ---------------------------------------------------

using dvec = std::vector<double>;

double vdot(const dvec& a, const dvec& b) {
  double s = 0.0;
  for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

dvec gauss_vec(std::mt19937& rng, int d) {
  std::normal_distribution<double> g(0.0, 1.0);
  dvec v(static_cast<size_t>(d));
  for (double& x : v) x = g(rng);
  return v;
}

void subtract_mean(dvec& v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  for (double& x : v) x -= m;
}

// Orthogonalize against `basis` (each zero-mean with squared norm d) and
// rescale to squared norm d. Fails when the residual degenerates.
bool orthogonalize(dvec& v, const std::vector<dvec>& basis) {
  const double d = static_cast<double>(v.size());
  subtract_mean(v);
  for (const dvec& b : basis) {
    const double c = vdot(v, b) / d;
    for (size_t i = 0; i < v.size(); ++i) v[i] -= c * b[i];
  }
  const double n = std::sqrt(vdot(v, v));
  if (n < 1e-4 * std::sqrt(d)) return false;
  const double s = std::sqrt(d) / n;
  for (double& x : v) x *= s;
  return true;
}

struct DirSet {
  std::vector<dvec> tok;  // one per vocab entry
  std::vector<dvec> pos;  // one per position
  dvec out;               // readout direction
  dvec bridge;            // inter-layer relay direction
};

DirSet draw_directions(std::mt19937& rng, const ModelConfig& cfg) {
  const int d = static_cast<int>(cfg.d_model);
  std::vector<dvec> basis;
  auto draw = [&]() -> dvec {
    for (int tries = 0; tries < 64; ++tries) {
      dvec v = gauss_vec(rng, d);
      if (orthogonalize(v, basis)) {
        basis.push_back(v);
        return v;
      }
    }
    throw ConstructionError("draw_directions: no orthogonal direction found");
  };
  DirSet ds;
  for (uint32_t i = 0; i < cfg.vocab; ++i) ds.tok.push_back(draw());
  for (uint32_t i = 0; i < cfg.seq_len; ++i) ds.pos.push_back(draw());
  ds.out = draw();
  ds.bridge = draw();
  return ds;
}

// Zero-mean sign-pattern direction orthogonal to `avoid`, squared norm d,
// with every coordinate within a bounded ratio of the largest.
dvec sign_carrier(std::mt19937& rng, const dvec& avoid) {
  const double d = static_cast<double>(avoid.size());
  for (int tries = 0; tries < 64; ++tries) {
    dvec v(avoid.size());
    for (double& x : v) x = (rng() & 1u) ? 1.0 : -1.0;
    subtract_mean(v);
    const double c = vdot(v, avoid) / d;
    for (size_t i = 0; i < v.size(); ++i) v[i] -= c * avoid[i];
    const double n = std::sqrt(vdot(v, v));
    if (n < 1e-4 * std::sqrt(d)) continue;
    const double s = std::sqrt(d) / n;
    double lo = 1e300, hi = 0.0;
    for (double& x : v) {
      x *= s;
      lo = std::min(lo, std::fabs(x));
      hi = std::max(hi, std::fabs(x));
    }
    if (lo >= 0.35 * hi) return v;
  }
  throw ConstructionError("sign_carrier: no flat sign pattern found");
}

// Zero-mean direction orthogonal to `avoid`, squared norm d, dominated by
// one peak coordinate.
dvec peaked_carrier(std::mt19937& rng, const dvec& avoid, int peak) {
  const double d = static_cast<double>(avoid.size());
  for (int tries = 0; tries < 64; ++tries) {
    dvec v = gauss_vec(rng, static_cast<int>(avoid.size()));
    for (double& x : v) x *= 0.15;
    v[static_cast<size_t>(peak)] = 8.0;
    subtract_mean(v);
    const double c = vdot(v, avoid) / d;
    for (size_t i = 0; i < v.size(); ++i) v[i] -= c * avoid[i];
    const double n = std::sqrt(vdot(v, v));
    if (n < 1e-4 * std::sqrt(d)) continue;
    const double s = std::sqrt(d) / n;
    for (double& x : v) x *= s;
    size_t amax = 0;
    for (size_t i = 1; i < v.size(); ++i) {
      if (std::fabs(v[i]) > std::fabs(v[amax])) amax = i;
    }
    if (amax == static_cast<size_t>(peak) && std::fabs(v[amax]) >= 3.0) return v;
  }
  throw ConstructionError("peaked_carrier: no peaked direction found");
}

// --- weight assembly ------------------------------------------------------

void set_embed_rows(WeightSet& w, const DirSet& ds) {
  const int64_t d = w.cfg.d_model;
  for (uint32_t v = 0; v < w.cfg.vocab; ++v) {
    for (int64_t j = 0; j < d; ++j) w.w_e.at(v, j) = static_cast<float>(ds.tok[v][j]);
  }
  for (uint32_t s = 0; s < w.cfg.seq_len; ++s) {
    for (int64_t j = 0; j < d; ++j) w.w_pos.at(s, j) = static_cast<float>(ds.pos[s][j]);
  }
}

// Column `head*d_k + ch` of a (D, H*d_k) projection.
void set_proj_col(Tensor& m, const ModelConfig& cfg, int head, int ch, const dvec& dir,
                  double gain) {
  const int64_t col = static_cast<int64_t>(head) * cfg.d_k + ch;
  for (int64_t j = 0; j < cfg.d_model; ++j) {
    m.at(j, col) = static_cast<float>(gain * dir[static_cast<size_t>(j)]);
  }
}

// Row `head*d_k + ch` of the (H*d_k, D) output projection.
void set_out_row(Tensor& m, const ModelConfig& cfg, int head, int ch, const dvec& dir,
                 double gain) {
  const int64_t row = static_cast<int64_t>(head) * cfg.d_k + ch;
  for (int64_t j = 0; j < cfg.d_model; ++j) {
    m.at(row, j) = static_cast<float>(gain * dir[static_cast<size_t>(j)]);
  }
}

void scale_out_row(Tensor& m, const ModelConfig& cfg, int head, int ch, double f) {
  const int64_t row = static_cast<int64_t>(head) * cfg.d_k + ch;
  for (int64_t j = 0; j < cfg.d_model; ++j) {
    m.at(row, j) = static_cast<float>(static_cast<double>(m.at(row, j)) * f);
  }
}

// Value probe reading the label of whichever pool token sits at the
// attended position: sum_c label(c) * gain * tok_c.
dvec label_probe(const DirSet& ds, double gain) {
  dvec v(ds.out.size(), 0.0);
  for (int c = 0; c < kPoolTokens; ++c) {
    for (size_t j = 0; j < v.size(); ++j) v[j] += token_label(c) * gain * ds.tok[c][j];
  }
  return v;
}

// Label-independent probe: the same amplitude for every pool token.
dvec uniform_probe(const DirSet& ds, double gain) {
  dvec v(ds.out.size(), 0.0);
  for (int c = 0; c < kPoolTokens; ++c) {
    for (size_t j = 0; j < v.size(); ++j) v[j] += gain * ds.tok[c][j];
  }
  return v;
}

// A normalized row of token + position embedding projects onto its own
// position direction with roughly this magnitude.
double keyed_proj(const ModelConfig& cfg) { return cfg.d_model / std::sqrt(2.0); }

// Query/key gain giving pre-softmax score kKeyedScore when both sides
// project with magnitude `proj` onto the keyed direction.
double qk_gain(const ModelConfig& cfg, double proj) {
  return std::sqrt(kKeyedScore * std::sqrt(static_cast<double>(cfg.d_k))) /
         std::max(proj, 1e-9);
}

// Query on the final position, key on the content position: the head
// attends from the readout slot to the content slot.
void keyed_attention(LayerWeights& lw, const ModelConfig& cfg, int head, const DirSet& ds) {
  const double g = qk_gain(cfg, keyed_proj(cfg));
  set_proj_col(lw.w_q, cfg, head, 0, ds.pos[cfg.seq_len - 1], g);
  set_proj_col(lw.w_k, cfg, head, 0, ds.pos[kKeyPos], g);
}

// Small random query/key with a zero value path: the head attends
// somewhere but contributes nothing at any precision.
void decoy_attention(LayerWeights& lw, const ModelConfig& cfg, int head, std::mt19937& rng) {
  std::uniform_real_distribution<double> u(-0.02, 0.02);
  for (uint32_t ch = 0; ch < cfg.d_k; ++ch) {
    const int64_t col = static_cast<int64_t>(head) * cfg.d_k + ch;
    for (int64_t j = 0; j < cfg.d_model; ++j) {
      lw.w_q.at(j, col) = static_cast<float>(u(rng));
      lw.w_k.at(j, col) = static_cast<float>(u(rng));
    }
  }
}

// Value amplitude a keyed head reads at the attended position.
double keyed_value_amp(const ModelConfig& cfg, double gain) {
  return gain * keyed_proj(cfg);
}

// --- dataset --------------------------------------------------------------

Dataset build_dataset(const ModelConfig& cfg, int items) {
  static const int combos[4][2] = {{0, 2}, {0, 3}, {1, 2}, {1, 3}};
  Dataset ds;
  ds.reserve(static_cast<size_t>(items));
  for (int i = 0; i < items; ++i) {
    const int a = combos[i % 4][0];
    const int b = combos[i % 4][1];
    ContrastPair p;
    p.clean.assign(cfg.seq_len, kFillerToken);
    p.clean[kKeyPos] = a;
    p.clean[cfg.seq_len - 1] = kQueryToken;
    p.corrupt = p.clean;
    p.corrupt[kKeyPos] = b;
    p.answer = a;
    p.distractor = b;
    ds.push_back(std::move(p));
  }
  return ds;
}

// --- measurement helpers --------------------------------------------------

ModelConfig preset_config(TaskPreset p) {
  ModelConfig c;
  c.d_model = 24;
  c.vocab = 8;
  c.seq_len = 6;
  c.batch = 1;
  c.has_mlp = 0;
  if (p == TaskPreset::TwoHop) {
    c.n_layers = 2;
    c.n_heads = 2;
    c.d_k = 12;
  } else {
    c.n_layers = 1;
    c.n_heads = 4;
    c.d_k = 6;
  }
  c.validate();
  return c;
}

double last_row_ld(const ActivationCache& cache, const ContrastPair& item) {
  const Tensor& logits = cache.logits();
  return metric_logit_diff(logits.row(logits.dim(0) - 1), item.answer, item.distractor);
}

// Normalize a float row in double precision with the forward pass's
// layer-norm convention.
dvec normalized_row(std::span<const float> x) {
  const double d = static_cast<double>(x.size());
  double mean = 0.0;
  for (float v : x) mean += static_cast<double>(v);
  mean /= d;
  double var = 0.0;
  for (float v : x) {
    const double c = static_cast<double>(v) - mean;
    var += c * c;
  }
  var /= d;
  const double inv = 1.0 / std::sqrt(var + static_cast<double>(kLnEps));
  dvec out(x.size());
  for (size_t i = 0; i < x.size(); ++i) out[i] = (static_cast<double>(x[i]) - mean) * inv;
  return out;
}

// Softmax attention weight from query row `qr` to key row `kr`.
double attn_weight(const ActivationCache& cache, int node, int qr, int kr) {
  const NodeActivations& a = cache.nodes.at(static_cast<size_t>(node));
  const int64_t dk = a.q.dim(1);
  std::vector<double> s(static_cast<size_t>(qr) + 1);
  double mx = -1e300;
  for (int j = 0; j <= qr; ++j) {
    double acc = 0.0;
    for (int64_t c = 0; c < dk; ++c) {
      acc += static_cast<double>(a.q.at(qr, c)) * static_cast<double>(a.k.at(j, c));
    }
    s[static_cast<size_t>(j)] = acc / std::sqrt(static_cast<double>(dk));
    mx = std::max(mx, s[static_cast<size_t>(j)]);
  }
  double z = 0.0;
  for (double v : s) z += std::exp(v - mx);
  return std::exp(s[static_cast<size_t>(kr)] - mx) / z;
}

struct CheckContext {
  const PlantedTask* task = nullptr;
  ComputationalGraph* graph = nullptr;
  const ImageBank* bank = nullptr;
  DeltaLEngine* engine = nullptr;

  double score(const NodeId& src, const NodeId& dst, const PrecisionPolicy& pol) const {
    const int idx = graph->edge_index(src, dst);
    return engine->delta_l(graph->all_edges()[static_cast<size_t>(idx)], pol);
  }
};

NodeId embed_node() { return NodeId{NodeKind::Embed, -1, -1}; }
NodeId unembed_node() { return NodeId{NodeKind::Unembed, -1, -1}; }
NodeId head_node(int layer, int head) { return NodeId{NodeKind::Head, layer, head}; }

void check(bool ok, const std::string& what) {
  if (!ok) throw ConstructionError(what);
}

// Mean clean logit diff must be positive before the readout can be
// calibrated; a zeroed signal path fails here.
double mean_or_fail(const std::vector<double>& xs, double floor, const std::string& what) {
  double m = 0.0;
  for (double x : xs) m += x;
  m /= static_cast<double>(xs.size());
  check(std::fabs(m) >= floor, what);
  return m;
}

// Per-item logit-diff windows shared by every preset: confident clean
// answers, confidently flipped corrupt answers.
void check_ld_windows(const CheckContext& cx, const PrecisionPolicy& fp32) {
  const Dataset& ds = cx.task->dataset;
  for (size_t i = 0; i < ds.size(); ++i) {
    const double lc = last_row_ld(cx.engine->clean_cache(static_cast<int>(i), fp32), ds[i]);
    const double lr = last_row_ld(cx.engine->corrupt_cache(static_cast<int>(i), fp32), ds[i]);
    check(lc >= 3.0 && lc <= 12.0, "clean logit diff outside [3, 12]");
    check(lr <= -3.0, "corrupt logit diff above -3");
  }
}

void check_attention(const CheckContext& cx, const PrecisionPolicy& fp32, const NodeId& head,
                     int qr, int kr) {
  const int node = cx.graph->node_index(head);
  for (size_t i = 0; i < cx.task->dataset.size(); ++i) {
    const double w = attn_weight(cx.engine->clean_cache(static_cast<int>(i), fp32), node, qr, kr);
    check(w > 0.9, "planted head attention below 0.9");
  }
}

std::vector<int> edge_indices(const ComputationalGraph& g,
                              const std::vector<std::pair<NodeId, NodeId>>& pairs) {
  std::vector<int> out;
  out.reserve(pairs.size());
  for (const auto& [s, d] : pairs) out.push_back(g.edge_index(s, d));
  std::sort(out.begin(), out.end());
  return out;
}

// --- readout calibration --------------------------------------------------

struct Projections {
  double out_mean = 0.0;
  double pos_mean = 0.0;
};

// Projections of the normalized unembed input (final row, clean runs)
// onto the readout and final-position directions.
Projections measure_projections(const PlantedTask& t, const ComputationalGraph& g,
                                const ImageBank& bank, const DirSet& ds) {
  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const int un = g.node_index(unembed_node());
  Projections pr;
  for (const ContrastPair& item : t.dataset) {
    const ActivationCache cache = forward(g, bank, item.clean, fp32);
    const Tensor& in = cache.nodes.at(static_cast<size_t>(un)).in;
    const dvec xh = normalized_row(in.row(in.dim(0) - 1));
    pr.out_mean += vdot(xh, ds.out);
    pr.pos_mean += vdot(xh, ds.pos[t.config.seq_len - 1]);
  }
  pr.out_mean /= static_cast<double>(t.dataset.size());
  pr.pos_mean /= static_cast<double>(t.dataset.size());
  return pr;
}

// Readout columns for the pool tokens: +-rho on the readout direction,
// optionally minus a label-independent bias read off the final position
// direction (bias_gain 0 disables it).
void set_readout(WeightSet& w, const DirSet& ds, double rho, double bias_gain) {
  const ModelConfig& cfg = w.cfg;
  const dvec& pos_last = ds.pos[cfg.seq_len - 1];
  for (int c = 0; c < kPoolTokens; ++c) {
    const double lab = token_label(c);
    for (int64_t j = 0; j < cfg.d_model; ++j) {
      w.w_u.at(j, c) = static_cast<float>(
          rho * lab * (ds.out[static_cast<size_t>(j)] - bias_gain * pos_last[static_cast<size_t>(j)]));
    }
  }
}

// --- preset builders ------------------------------------------------------

PrecisionPolicy hq_policy(Precision p, LowMode m) { return PrecisionPolicy::head_quantized(p, m); }

PrecisionPolicy elevated(PrecisionPolicy base, int layer, int head) {
  base.target_head = HeadRef{layer, head};
  return base;
}

// Standard preset: head 0 reads the content token robustly onto the
// readout direction; head 1 carries the same signal at a small amplitude
// next to a strong label-independent carrier, so 8-bit rounding of its
// output absorbs the signal while FP32 still resolves it. Heads 2 and 3
// are inert decoys.
void build_standard(PlantedTask& t, const DirSet& ds, std::mt19937& rng) {
  const ModelConfig& cfg = t.config;
  LayerWeights& lw = t.weights.layers[0];
  const double sc = t.signal_scale;
  const double vamp = keyed_value_amp(cfg, 0.2);

  keyed_attention(lw, cfg, 0, ds);
  set_proj_col(lw.w_v, cfg, 0, 0, label_probe(ds, 0.2 * sc), 1.0);
  set_out_row(lw.w_o, cfg, 0, 0, ds.out, 0.8 / vamp);

  keyed_attention(lw, cfg, 1, ds);
  set_proj_col(lw.w_v, cfg, 1, 0, label_probe(ds, 0.2 * sc), 1.0);
  set_proj_col(lw.w_v, cfg, 1, 1, uniform_probe(ds, 0.2), 1.0);
  const dvec junk = sign_carrier(rng, ds.out);
  set_out_row(lw.w_o, cfg, 1, 0, ds.out, 0.05 / vamp);  // rescaled below
  set_out_row(lw.w_o, cfg, 1, 1, junk, 30.0 / vamp);

  decoy_attention(lw, cfg, 2, rng);
  // Head 3 stays all-zero.

  ComputationalGraph g(cfg);
  {
    std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
    ImageBank bank = ImageBank::for_policies(t.weights, pols);
    Projections pr = measure_projections(t, g, bank, ds);
    mean_or_fail({pr.out_mean}, 1e-6, "standard: no signal reaches the readout");
    set_readout(t.weights, ds, kTargetLd / (2.0 * pr.out_mean), 0.0);

    // Pin the weak readout edge's FP32 patch score: large enough to sit
    // above the low end of the threshold grid, small enough that the
    // robust circuit keeps >= 92% of the logit diff without it.
    DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
    const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
    eng.refresh_baselines(fp32);
    const int bu = g.edge_index(head_node(0, 1), unembed_node());
    const double s0 = eng.delta_l(g.all_edges()[static_cast<size_t>(bu)], fp32);
    check(s0 > 1e-9, "standard: weak head contributes no score");
    scale_out_row(lw.w_o, cfg, 1, 0, 0.012 / s0);
  }

  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const PrecisionPolicy low = PrecisionPolicy::all_low(LowMode::E4m3);
  const PrecisionPolicy hq = hq_policy(Precision::P8, LowMode::E4m3);
  std::vector<PrecisionPolicy> pols = {fp32, low, hq, elevated(hq, 0, 0), elevated(hq, 0, 1)};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
  for (const PrecisionPolicy& p : pols) eng.refresh_baselines(p);
  CheckContext cx{&t, &g, &bank, &eng};

  check_ld_windows(cx, fp32);
  check_attention(cx, fp32, head_node(0, 0), cfg.seq_len - 1, kKeyPos);
  check_attention(cx, fp32, head_node(0, 1), cfg.seq_len - 1, kKeyPos);

  const NodeId e = embed_node(), u = unembed_node();
  const NodeId a = head_node(0, 0), b = head_node(0, 1);
  const NodeId d2 = head_node(0, 2), d3 = head_node(0, 3);

  check(cx.score(e, a, fp32) > 3.5, "standard: robust head score too small");
  check(cx.score(e, a, fp32) == cx.score(a, u, fp32), "standard: robust edge pair not tied");
  const double sb = cx.score(b, u, fp32);
  check(sb >= 0.008 && sb <= 0.02, "standard: weak edge score off target");
  check(cx.score(e, b, fp32) == sb, "standard: weak edge pair not tied");
  for (const NodeId& d : {d2, d3}) {
    check(cx.score(e, d, fp32) == 0.0 && cx.score(d, u, fp32) == 0.0,
          "standard: decoy edge scored nonzero");
  }
  check(cx.score(e, u, fp32) == 0.0, "standard: direct embed edge scored nonzero");

  // The weak channel must vanish exactly under 8-bit rounding and stay
  // recoverable when the weak head runs at FP32.
  for (const PrecisionPolicy& p : {hq, low}) {
    check(cx.score(e, b, p) == 0.0 && cx.score(b, u, p) == 0.0,
          "standard: weak edge survives 8-bit rounding");
    check(cx.score(e, a, p) > 3.5 && cx.score(a, u, p) > 3.5,
          "standard: robust edge lost at 8 bits");
  }
  const double sb_ele = cx.score(b, u, elevated(hq, 0, 1));
  check(sb_ele > 0.004 && sb_ele < 0.05, "standard: elevated weak edge score off target");
  check(cx.score(a, u, elevated(hq, 0, 0)) > 1.0, "standard: elevated robust edge too small");

  t.ground_truth = edge_indices(g, {{e, a}, {a, u}, {b, u}});
  t.planted = HeadRef{0, 1};
}

// Underflow preset: the only signal head writes with every coordinate
// below the FP8 flush-to-zero threshold, so any 8-bit stage erases it
// exactly. A label-independent bias on the readout makes the dead-signal
// answer confidently wrong instead of noise-signed.
void build_underflow(PlantedTask& t, const DirSet& ds, std::mt19937& rng) {
  const ModelConfig& cfg = t.config;
  LayerWeights& lw = t.weights.layers[0];
  const double sc = t.signal_scale;
  const double vamp = keyed_value_amp(cfg, 0.2);
  const double flush_amp = 0.9 * 0x1p-11;  // peak output coordinate, pre-scale

  keyed_attention(lw, cfg, 0, ds);
  set_proj_col(lw.w_v, cfg, 0, 0, label_probe(ds, 0.2 * sc), 1.0);
  set_out_row(lw.w_o, cfg, 0, 0, ds.out, 0.05 / vamp);  // rescaled below

  decoy_attention(lw, cfg, 1, rng);
  // Heads 2 and 3 stay all-zero.

  ComputationalGraph g(cfg);
  const int bn = g.node_index(head_node(0, 0));
  {
    std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
    ImageBank bank = ImageBank::for_policies(t.weights, pols);
    const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
    double peak = 0.0;
    for (const ContrastPair& item : t.dataset) {
      for (const std::vector<int>* toks : {&item.clean, &item.corrupt}) {
        const ActivationCache cache = forward(g, bank, *toks, fp32);
        const Tensor& out = cache.nodes.at(static_cast<size_t>(bn)).out;
        for (int64_t i = 0; i < out.size(); ++i) {
          peak = std::max(peak, std::fabs(static_cast<double>(out.at(i))));
        }
      }
    }
    check(peak > 1e-12, "underflow: planted head writes nothing");
    scale_out_row(lw.w_o, cfg, 0, 0, flush_amp * sc / peak);

    Projections pr = measure_projections(t, g, bank, ds);
    mean_or_fail({pr.out_mean}, 1e-7, "underflow: no signal reaches the readout");
    check(pr.pos_mean > 1.0, "underflow: position direction unreadable");
    // Signal contributes +9 to the clean logit diff, the bias -3, so the
    // flushed model lands at exactly the bias: confidently wrong.
    const double rho = 1.5 * kTargetLd / (2.0 * pr.out_mean);
    const double bias_gain = (0.5 * kTargetLd / (2.0 * rho)) / pr.pos_mean;
    set_readout(t.weights, ds, rho, bias_gain);
  }

  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const PrecisionPolicy low = PrecisionPolicy::all_low(LowMode::E4m3);
  const PrecisionPolicy hq = hq_policy(Precision::P8, LowMode::E4m3);
  const PrecisionPolicy ele = elevated(hq, 0, 0);
  std::vector<PrecisionPolicy> pols = {fp32, low, hq, ele};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
  for (const PrecisionPolicy& p : pols) eng.refresh_baselines(p);
  CheckContext cx{&t, &g, &bank, &eng};

  check_ld_windows(cx, fp32);
  check_attention(cx, fp32, head_node(0, 0), cfg.seq_len - 1, kKeyPos);

  // Every output coordinate sits in the flush-to-zero zone, and the
  // clean-corrupt deltas vanish under FP8 encoding.
  for (size_t i = 0; i < t.dataset.size(); ++i) {
    const Tensor& oc = eng.clean_cache(static_cast<int>(i), fp32).nodes[static_cast<size_t>(bn)].out;
    const Tensor& orr = eng.corrupt_cache(static_cast<int>(i), fp32).nodes[static_cast<size_t>(bn)].out;
    for (int64_t k = 0; k < oc.size(); ++k) {
      check(std::fabs(static_cast<double>(oc.at(k))) < 0.98 * 0x1p-10,
            "underflow: output coordinate above the flush zone");
      const double delta = static_cast<double>(oc.at(k)) - static_cast<double>(orr.at(k));
      check(decode_f8(encode_f8(delta)) == 0.0, "underflow: delta survives FP8 encoding");
    }
  }

  const NodeId e = embed_node(), u = unembed_node(), b = head_node(0, 0);
  const double sb = cx.score(b, u, fp32);
  check(sb > 3.5, "underflow: FP32 misses the planted edge");
  check(cx.score(e, b, fp32) == sb, "underflow: edge pair not tied");
  for (int h = 1; h < 4; ++h) {
    const NodeId d = head_node(0, h);
    check(cx.score(e, d, fp32) == 0.0 && cx.score(d, u, fp32) == 0.0,
          "underflow: decoy edge scored nonzero");
  }
  check(cx.score(e, u, fp32) == 0.0, "underflow: direct embed edge scored nonzero");

  for (const PrecisionPolicy& p : {low, hq}) {
    check(cx.score(e, b, p) == 0.0 && cx.score(b, u, p) == 0.0,
          "underflow: planted edge survives 8-bit rounding");
  }
  // The elevated path runs the planted head entirely at FP32, so its
  // score must reproduce the all-FP32 score bit for bit.
  check(cx.score(b, u, ele) == sb, "underflow: elevated score deviates from FP32");

  // Killing the write path must flip every answer, not merely weaken it.
  {
    WeightSet dead = t.weights;
    for (int64_t j = 0; j < cfg.d_model; ++j) dead.layers[0].w_o.at(0, j) = 0.0f;
    std::vector<PrecisionPolicy> dp = {fp32};
    ImageBank dbank = ImageBank::for_policies(dead, dp);
    for (const ContrastPair& item : t.dataset) {
      const ActivationCache cache = forward(g, dbank, item.clean, fp32);
      check(last_row_ld(cache, item) < -0.5, "underflow: dead signal not confidently wrong");
    }
  }

  t.ground_truth = edge_indices(g, {{e, b}, {b, u}});
  t.planted = HeadRef{0, 0};
}

// Interference preset: a small signal head shares the residual stream
// with a huge label-independent interferer, leaving an FP8 exponent gap
// between the interferer and the signal delta at the dominant coordinate.
void build_interference(PlantedTask& t, const DirSet& ds, std::mt19937& rng) {
  const ModelConfig& cfg = t.config;
  LayerWeights& lw = t.weights.layers[0];
  const double sc = t.signal_scale;
  const double vamp = keyed_value_amp(cfg, 0.2);

  keyed_attention(lw, cfg, 0, ds);
  set_proj_col(lw.w_v, cfg, 0, 0, label_probe(ds, 0.2 * sc), 1.0);
  set_out_row(lw.w_o, cfg, 0, 0, ds.out, 0.1 / vamp);

  int peak = 0;
  for (size_t j = 1; j < ds.out.size(); ++j) {
    if (std::fabs(ds.out[j]) > std::fabs(ds.out[static_cast<size_t>(peak)])) {
      peak = static_cast<int>(j);
    }
  }
  const dvec interf = peaked_carrier(rng, ds.out, peak);
  keyed_attention(lw, cfg, 1, ds);
  set_proj_col(lw.w_v, cfg, 1, 0, uniform_probe(ds, 0.2), 1.0);
  set_out_row(lw.w_o, cfg, 1, 0, interf, 40.0 / vamp);

  decoy_attention(lw, cfg, 2, rng);
  // Head 3 stays all-zero.

  ComputationalGraph g(cfg);
  {
    std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
    ImageBank bank = ImageBank::for_policies(t.weights, pols);
    Projections pr = measure_projections(t, g, bank, ds);
    mean_or_fail({pr.out_mean}, 1e-6, "interference: no signal reaches the readout");
    set_readout(t.weights, ds, kTargetLd / (2.0 * pr.out_mean), 0.0);
  }

  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const PrecisionPolicy hq = hq_policy(Precision::P8, LowMode::E4m3);
  const PrecisionPolicy ele = elevated(hq, 0, 0);
  std::vector<PrecisionPolicy> pols = {fp32, hq, ele};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
  for (const PrecisionPolicy& p : pols) eng.refresh_baselines(p);
  CheckContext cx{&t, &g, &bank, &eng};

  check_ld_windows(cx, fp32);
  check_attention(cx, fp32, head_node(0, 0), cfg.seq_len - 1, kKeyPos);
  check_attention(cx, fp32, head_node(0, 1), cfg.seq_len - 1, kKeyPos);

  // At the dominant coordinate of the signal delta, the interferer must
  // sit at least 6 binades above, and FP8 addition must absorb the delta.
  const int un = g.node_index(unembed_node());
  const int in_ = g.node_index(head_node(0, 1));
  for (size_t i = 0; i < t.dataset.size(); ++i) {
    const auto& cc = eng.clean_cache(static_cast<int>(i), fp32);
    const auto& cr = eng.corrupt_cache(static_cast<int>(i), fp32);
    const Tensor& uc = cc.nodes[static_cast<size_t>(un)].in;
    const Tensor& ur = cr.nodes[static_cast<size_t>(un)].in;
    const int64_t last = uc.dim(0) - 1;
    int64_t jstar = 0;
    double dmax = 0.0;
    for (int64_t j = 0; j < uc.dim(1); ++j) {
      const double d = std::fabs(static_cast<double>(uc.at(last, j)) -
                                 static_cast<double>(ur.at(last, j)));
      if (d > dmax) {
        dmax = d;
        jstar = j;
      }
    }
    const double dj = static_cast<double>(uc.at(last, jstar)) -
                      static_cast<double>(ur.at(last, jstar));
    const double ij = static_cast<double>(cc.nodes[static_cast<size_t>(in_)].out.at(last, jstar));
    check(decode_f8(encode_f8(dj)) != 0.0, "interference: signal delta already flushed");
    check(std::ilogb(ij) - std::ilogb(dj) >= 6, "interference: exponent gap below 6");
    check(add_f8(encode_f8(ij), encode_f8(dj)) == encode_f8(ij),
          "interference: FP8 addition fails to absorb the delta");
  }

  const NodeId e = embed_node(), u = unembed_node();
  const NodeId a = head_node(0, 0), iv = head_node(0, 1);
  check(cx.score(e, a, fp32) > 3.5, "interference: signal head score too small");
  check(cx.score(e, a, fp32) == cx.score(a, u, fp32), "interference: edge pair not tied");
  check(cx.score(e, iv, fp32) < 5e-3 && cx.score(iv, u, fp32) < 5e-3,
        "interference: interferer edge scored high");
  for (int h = 2; h < 4; ++h) {
    const NodeId d = head_node(0, h);
    check(cx.score(e, d, fp32) == 0.0 && cx.score(d, u, fp32) == 0.0,
          "interference: decoy edge scored nonzero");
  }
  check(cx.score(e, u, fp32) == 0.0, "interference: direct embed edge scored nonzero");

  // Elevating the signal head reproduces its FP32 activations bit for bit.
  const int an = g.node_index(a);
  for (size_t i = 0; i < t.dataset.size(); ++i) {
    const auto& f = eng.clean_cache(static_cast<int>(i), fp32).nodes[static_cast<size_t>(an)];
    const auto& h = eng.clean_cache(static_cast<int>(i), ele).nodes[static_cast<size_t>(an)];
    check(std::equal(f.z.data(), f.z.data() + f.z.size(), h.z.data()),
          "interference: elevated z deviates from FP32");
    check(std::equal(f.out.data(), f.out.data() + f.out.size(), h.out.data()),
          "interference: elevated output deviates from FP32");
  }

  t.ground_truth = edge_indices(g, {{e, a}, {a, u}});
  t.planted = HeadRef{0, 0};
}

// Two-hop preset: a first-layer head writes the label onto a relay
// direction; a second-layer head reads it back sign-invariantly (squared
// attention score) and writes the readout. Decoys in both layers.
void build_two_hop(PlantedTask& t, const DirSet& ds, std::mt19937& rng) {
  const ModelConfig& cfg = t.config;
  const double sc = t.signal_scale;
  const double vamp = keyed_value_amp(cfg, 0.2);
  LayerWeights& l0 = t.weights.layers[0];
  LayerWeights& l1 = t.weights.layers[1];

  keyed_attention(l0, cfg, 0, ds);
  set_proj_col(l0.w_v, cfg, 0, 0, label_probe(ds, 0.2 * sc), 1.0);
  set_out_row(l0.w_o, cfg, 0, 0, ds.bridge, 0.8 / vamp);
  decoy_attention(l0, cfg, 1, rng);

  // The relay projects its own bridge content on both query and key, so
  // the final position attends to itself regardless of the label sign.
  const double write = 0.8 * sc;
  const double bridge_proj =
      write * cfg.d_model / std::sqrt(2.0 + write * write);
  const double g1 = qk_gain(cfg, bridge_proj);
  set_proj_col(l1.w_q, cfg, 0, 0, ds.bridge, g1);
  set_proj_col(l1.w_k, cfg, 0, 0, ds.bridge, g1);
  set_proj_col(l1.w_v, cfg, 0, 0, ds.bridge, 0.2);
  set_out_row(l1.w_o, cfg, 0, 0, ds.out, 0.8 / std::max(bridge_proj * 0.2, 1e-9));
  // Layer-1 head 1 stays all-zero.

  ComputationalGraph g(cfg);
  {
    std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
    ImageBank bank = ImageBank::for_policies(t.weights, pols);
    Projections pr = measure_projections(t, g, bank, ds);
    mean_or_fail({pr.out_mean}, 1e-6, "two_hop: no signal reaches the readout");
    set_readout(t.weights, ds, kTargetLd / (2.0 * pr.out_mean), 0.0);
  }

  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const PrecisionPolicy hq = hq_policy(Precision::P8, LowMode::E4m3);
  std::vector<PrecisionPolicy> pols = {fp32, hq, elevated(hq, 0, 0), elevated(hq, 1, 0)};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
  for (const PrecisionPolicy& p : pols) eng.refresh_baselines(p);
  CheckContext cx{&t, &g, &bank, &eng};

  check_ld_windows(cx, fp32);
  check_attention(cx, fp32, head_node(0, 0), cfg.seq_len - 1, kKeyPos);
  check_attention(cx, fp32, head_node(1, 0), cfg.seq_len - 1, cfg.seq_len - 1);

  const NodeId e = embed_node(), u = unembed_node();
  const NodeId a = head_node(0, 0), b = head_node(1, 0);
  const NodeId d0 = head_node(0, 1), d1 = head_node(1, 1);

  check(cx.score(e, a, fp32) > 3.5, "two_hop: write edge score too small");
  check(cx.score(a, b, fp32) > 3.5, "two_hop: relay edge score too small");
  check(cx.score(b, u, fp32) > 3.5, "two_hop: readout edge score too small");

  for (const auto& [s, d] : std::vector<std::pair<NodeId, NodeId>>{
           {e, d0}, {e, d1}, {e, u}, {a, d1}, {d0, b}, {d0, d1}, {d0, u}, {d1, u}}) {
    check(cx.score(s, d, fp32) == 0.0, "two_hop: inert edge scored nonzero");
  }
  check(cx.score(e, b, fp32) < 5e-4, "two_hop: shortcut embed edge scored high");
  check(cx.score(a, u, fp32) < 5e-4, "two_hop: shortcut bridge edge scored high");

  check(cx.score(e, a, hq) > 1.0, "two_hop: write edge lost at 8 bits");
  check(cx.score(a, b, elevated(hq, 0, 0)) > 1.0, "two_hop: elevated relay edge too small");
  check(cx.score(b, u, elevated(hq, 1, 0)) > 1.0, "two_hop: elevated readout edge too small");

  t.ground_truth = edge_indices(g, {{e, a}, {a, b}, {b, u}});
  t.planted = HeadRef{1, 0};
}

// Carrier preset: the planted head writes a tiny label-dependent channel,
// and a dead channel (zero value path) holds a large output-projection row
// that pins the head's 4-bit integer grid. At 4 bits the signal rows fall
// into the grid's deadband and the head's output is exactly zero; 8-bit
// relative rounding keeps the signal alive.
void build_carrier(PlantedTask& t, const DirSet& ds, std::mt19937& rng) {
  const ModelConfig& cfg = t.config;
  LayerWeights& lw = t.weights.layers[0];
  const double sc = t.signal_scale;
  const double sig_half = 0x1p-8;  // target peak half-delta of the signal channel

  keyed_attention(lw, cfg, 0, ds);
  set_proj_col(lw.w_v, cfg, 0, 0, label_probe(ds, 0.0625 * sc), 1.0);
  const dvec junk = peaked_carrier(rng, ds.out, static_cast<int>(rng() % cfg.d_model));
  set_out_row(lw.w_o, cfg, 0, 0, ds.out, 0.02);  // rescaled below
  set_out_row(lw.w_o, cfg, 0, 2, junk, 2.0);     // grid pin: value path is zero

  decoy_attention(lw, cfg, 1, rng);
  // Heads 2 and 3 stay all-zero.

  ComputationalGraph g(cfg);
  const int an = g.node_index(head_node(0, 0));
  {
    std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
    ImageBank bank = ImageBank::for_policies(t.weights, pols);
    const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
    double peak = 0.0;
    for (const ContrastPair& item : t.dataset) {
      const ActivationCache cc = forward(g, bank, item.clean, fp32);
      const ActivationCache cr = forward(g, bank, item.corrupt, fp32);
      const Tensor& oc = cc.nodes.at(static_cast<size_t>(an)).out;
      const Tensor& orr = cr.nodes.at(static_cast<size_t>(an)).out;
      const int64_t last = oc.dim(0) - 1;
      for (int64_t j = 0; j < oc.dim(1); ++j) {
        const double h = 0.5 * std::fabs(static_cast<double>(oc.at(last, j)) -
                                         static_cast<double>(orr.at(last, j)));
        peak = std::max(peak, h);
      }
    }
    check(peak > 1e-12, "carrier: planted head writes nothing");
    scale_out_row(lw.w_o, cfg, 0, 0, sig_half * sc / peak);

    Projections pr = measure_projections(t, g, bank, ds);
    mean_or_fail({pr.out_mean}, 1e-5, "carrier: no signal reaches the readout");
    set_readout(t.weights, ds, kTargetLd / (2.0 * pr.out_mean), 0.0);
  }

  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  const PrecisionPolicy hq4 = hq_policy(Precision::P8, LowMode::Rtn4);
  const PrecisionPolicy hq8 = hq_policy(Precision::P8, LowMode::E4m3);
  const PrecisionPolicy hq16 = hq_policy(Precision::P16, LowMode::E4m3);
  std::vector<PrecisionPolicy> pols = {fp32, hq4, hq8, hq16, elevated(hq4, 0, 0),
                                       elevated(hq8, 0, 0)};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
  for (const PrecisionPolicy& p : pols) eng.refresh_baselines(p);
  CheckContext cx{&t, &g, &bank, &eng};

  check_ld_windows(cx, fp32);
  check_attention(cx, fp32, head_node(0, 0), cfg.seq_len - 1, kKeyPos);

  // The 4-bit image of the output projection must zero the signal row
  // while the grid-pin row stays alive; the pin's value path is zero, so
  // the head's 4-bit output vanishes identically.
  {
    const Tensor& img = bank.get("l0.w_o", Precision::P8, LowMode::Rtn4);
    bool pin_alive = false;
    for (int64_t j = 0; j < cfg.d_model; ++j) {
      check(img.at(0, j) == 0.0f, "carrier: 4-bit image keeps the signal row");
      pin_alive = pin_alive || img.at(2, j) != 0.0f;
    }
    check(pin_alive, "carrier: 4-bit image loses the grid pin");
  }

  const NodeId e = embed_node(), u = unembed_node(), a = head_node(0, 0);
  check(cx.score(e, a, fp32) > 3.5, "carrier: planted edge score too small");
  check(cx.score(e, a, fp32) == cx.score(a, u, fp32), "carrier: edge pair not tied");
  for (int h = 1; h < 4; ++h) {
    const NodeId d = head_node(0, h);
    check(cx.score(e, d, fp32) == 0.0 && cx.score(d, u, fp32) == 0.0,
          "carrier: decoy edge scored nonzero");
  }
  check(cx.score(e, u, fp32) == 0.0, "carrier: direct embed edge scored nonzero");

  check(cx.score(e, a, hq4) == 0.0, "carrier: signal survives 4-bit rounding");
  check(cx.score(e, a, hq8) > 0.05, "carrier: signal lost at 8 bits");
  check(cx.score(e, a, hq16) > 0.05, "carrier: signal lost at 16 bits");
  check(cx.score(a, u, elevated(hq4, 0, 0)) > 1.0, "carrier: elevated readout edge too small");
  check(cx.score(e, a, elevated(hq4, 0, 0)) > 1.0, "carrier: elevated input edge too small");
  check(cx.score(a, u, elevated(hq8, 0, 0)) > 1.0, "carrier: elevated 8-bit edge too small");

  t.ground_truth = edge_indices(g, {{e, a}, {a, u}});
  t.planted = HeadRef{0, 0};
}

PlantedTask build_attempt(const PlantedSpec& spec, uint32_t seed) {
  std::mt19937 rng(seed);
  PlantedTask t;
  t.preset = spec.preset;
  t.signal_scale = spec.signal_scale;
  t.seed_used = seed;
  t.key_pos = kKeyPos;
  t.config = preset_config(spec.preset);
  t.weights = WeightSet::zeros(t.config);
  t.dataset = build_dataset(t.config, spec.items);
  const DirSet ds = draw_directions(rng, t.config);
  set_embed_rows(t.weights, ds);
  switch (spec.preset) {
    case TaskPreset::Standard: build_standard(t, ds, rng); break;
    case TaskPreset::Underflow: build_underflow(t, ds, rng); break;
    case TaskPreset::Interference: build_interference(t, ds, rng); break;
    case TaskPreset::TwoHop: build_two_hop(t, ds, rng); break;
    case TaskPreset::Carrier: build_carrier(t, ds, rng); break;
  }
  // Faithfulness of the planted circuit under the FP32 reference.
  std::vector<bool> mask(ComputationalGraph(t.config).all_edges().size(), false);
  for (int idx : t.ground_truth) mask[static_cast<size_t>(idx)] = true;
  const double f = faithfulness(t, mask);
  if (f < 0.92) throw ConstructionError("planted circuit faithfulness below 0.92");
  return t;
}

// --- circuit runs ----------------------------------------------------------

struct CircuitStats {
  std::vector<double> clean_ld, corrupt_ld, circuit_ld;
};

// Clean, corrupt, and circuit logit diffs at FP32. The circuit run keeps
// the full graph and replaces every absent edge's value with the corrupt
// run's value for that source.
CircuitStats circuit_stats(const PlantedTask& t, const std::vector<bool>& mask) {
  ComputationalGraph g(t.config);
  if (mask.size() != g.all_edges().size()) {
    throw std::invalid_argument("circuit_stats: mask size mismatch");
  }
  std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
  ImageBank bank = ImageBank::for_policies(t.weights, pols);
  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  CircuitStats st;
  for (const ContrastPair& item : t.dataset) {
    const ActivationCache clean = forward(g, bank, item.clean, fp32);
    const ActivationCache corr = forward(g, bank, item.corrupt, fp32);
    std::vector<EdgePatch> patches;
    for (const Edge& e : g.all_edges()) {
      if (!mask[static_cast<size_t>(e.index)]) {
        patches.push_back({e.index, &corr.nodes.at(static_cast<size_t>(e.src)).out});
      }
    }
    const ActivationCache circ = forward(g, bank, item.clean, fp32, patches);
    st.clean_ld.push_back(last_row_ld(clean, item));
    st.corrupt_ld.push_back(last_row_ld(corr, item));
    st.circuit_ld.push_back(last_row_ld(circ, item));
  }
  return st;
}

double mean(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return s / static_cast<double>(xs.size());
}

// --- method plumbing ------------------------------------------------------

ImageBank method_bank(const PlantedTask& t, const PruneConfig& cfg) {
  std::vector<PrecisionPolicy> pols = {cfg.base_policy};
  return ImageBank::for_policies(t.weights, pols);
}

}  // namespace

// --- presets and methods --------------------------------------------------

TaskPreset parse_preset(const std::string& name) {
  if (name == "standard") return TaskPreset::Standard;
  if (name == "underflow") return TaskPreset::Underflow;
  if (name == "interference") return TaskPreset::Interference;
  if (name == "two_hop") return TaskPreset::TwoHop;
  if (name == "carrier") return TaskPreset::Carrier;
  throw std::invalid_argument(
      "parse_preset: expected standard, underflow, interference, two_hop, or carrier");
}

const char* preset_name(TaskPreset p) {
  switch (p) {
    case TaskPreset::Standard: return "standard";
    case TaskPreset::Underflow: return "underflow";
    case TaskPreset::Interference: return "interference";
    case TaskPreset::TwoHop: return "two_hop";
    case TaskPreset::Carrier: return "carrier";
  }
  throw std::invalid_argument("preset_name: unknown preset");
}

Method parse_method(const std::string& name) {
  if (name == "acdc") return Method::Acdc;
  if (name == "rtn8") return Method::Rtn8;
  if (name == "pahq") return Method::Pahq;
  throw std::invalid_argument("parse_method: expected acdc, rtn8, or pahq");
}

const char* method_name(Method m) {
  switch (m) {
    case Method::Acdc: return "acdc";
    case Method::Rtn8: return "rtn8";
    case Method::Pahq: return "pahq";
  }
  throw std::invalid_argument("method_name: unknown method");
}

PrecisionPolicy ablation_policy(int bits) {
  switch (bits) {
    case 4: return PrecisionPolicy::head_quantized(Precision::P8, LowMode::Rtn4);
    case 8: return PrecisionPolicy::head_quantized(Precision::P8, LowMode::E4m3);
    case 16: return PrecisionPolicy::head_quantized(Precision::P16, LowMode::E4m3);
    default: throw std::invalid_argument("ablation_policy: bits must be 4, 8, or 16");
  }
}

PruneConfig method_prune_config(Method m, int bits) {
  if (bits != 4 && bits != 8 && bits != 16) {
    throw std::invalid_argument("method_prune_config: bits must be 4, 8, or 16");
  }
  if (m != Method::Pahq && bits != 8) {
    throw std::invalid_argument("method_prune_config: only pahq varies the bit width");
  }
  PruneConfig cfg;
  cfg.mode = ScoreMode::LossDelta;
  switch (m) {
    case Method::Acdc:
      cfg.per_edge_policy = false;
      cfg.base_policy = PrecisionPolicy::all_fp32();
      break;
    case Method::Rtn8:
      cfg.per_edge_policy = false;
      cfg.base_policy = PrecisionPolicy::all_low(LowMode::E4m3);
      break;
    case Method::Pahq:
      cfg.per_edge_policy = true;
      cfg.base_policy = ablation_policy(bits);
      break;
  }
  return cfg;
}

// --- task generation ------------------------------------------------------

void PlantedSpec::validate() const {
  if (items < 1 || items > 64) throw std::invalid_argument("PlantedSpec: items must be in [1, 64]");
  if (!(signal_scale >= 0.0) || signal_scale > 16.0) {
    throw std::invalid_argument("PlantedSpec: signal_scale must be in [0, 16]");
  }
}

PlantedTask generate_planted(const PlantedSpec& spec) {
  spec.validate();
  std::string last_err = "no attempt ran";
  for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
    const uint32_t seed = spec.seed + 7919u * static_cast<uint32_t>(attempt);
    try {
      return build_attempt(spec, seed);
    } catch (const ConstructionError& e) {
      last_err = e.what();
    }
  }
  throw std::runtime_error(
      "generate_planted: construction checks failed for every seeded attempt: " + last_err);
}

void save_task(const PlantedTask& t, const std::string& dir) {
  std::filesystem::create_directories(dir);
  save_weights(t.weights, dir + "/weights.bin");
  save_dataset_jsonl(t.dataset, dir + "/dataset.jsonl");
  nlohmann::ordered_json j;
  j["schema_version"] = 1;
  j["preset"] = preset_name(t.preset);
  j["seed_used"] = t.seed_used;
  j["signal_scale"] = t.signal_scale;
  j["key_pos"] = t.key_pos;
  j["planted"] = {{"layer", t.planted.layer}, {"head", t.planted.head}};
  j["ground_truth"] = t.ground_truth;
  std::ofstream out(dir + "/task.json");
  if (!out) throw std::runtime_error("save_task: cannot write " + dir + "/task.json");
  out << j.dump(2) << "\n";
}

PlantedTask load_task(const std::string& dir) {
  std::ifstream in(dir + "/task.json");
  if (!in) throw std::runtime_error("load_task: cannot read " + dir + "/task.json");
  nlohmann::json j = nlohmann::json::parse(in);
  if (j.at("schema_version").get<int>() != 1) {
    throw std::runtime_error("load_task: unsupported schema_version");
  }
  PlantedTask t;
  t.preset = parse_preset(j.at("preset").get<std::string>());
  t.seed_used = j.at("seed_used").get<uint32_t>();
  t.signal_scale = j.at("signal_scale").get<double>();
  t.key_pos = j.at("key_pos").get<int>();
  t.planted.layer = j.at("planted").at("layer").get<int>();
  t.planted.head = j.at("planted").at("head").get<int>();
  t.ground_truth = j.at("ground_truth").get<std::vector<int>>();
  t.weights = load_weights(dir + "/weights.bin");
  t.config = t.weights.cfg;
  t.dataset = load_dataset_jsonl(dir + "/dataset.jsonl");
  validate_dataset(t.dataset, t.config);
  const size_t n_edges = ComputationalGraph(t.config).all_edges().size();
  for (int idx : t.ground_truth) {
    if (idx < 0 || static_cast<size_t>(idx) >= n_edges) {
      throw std::runtime_error("load_task: ground-truth edge index out of range");
    }
  }
  return t;
}

// --- ROC ------------------------------------------------------------------

double auc_from_points(const std::vector<RocPoint>& points) {
  if (points.empty()) throw std::invalid_argument("auc_from_points: no points");
  std::vector<RocPoint> ps = points;
  std::sort(ps.begin(), ps.end(), [](const RocPoint& a, const RocPoint& b) {
    return a.fpr != b.fpr ? a.fpr < b.fpr : a.tpr < b.tpr;
  });
  double x = 0.0, y = 0.0, area = 0.0;
  for (const RocPoint& p : ps) {
    if (p.tpr <= y) continue;
    if (p.fpr > x) {
      area += (p.fpr - x) * y;
      x = p.fpr;
    }
    y = p.tpr;
  }
  area += (1.0 - x) * y;
  return area;
}

double auc_from_scores(const std::vector<std::pair<double, bool>>& table) {
  int n_pos = 0, n_neg = 0;
  for (const auto& [s, pos] : table) (pos ? n_pos : n_neg) += 1;
  if (n_pos == 0 || n_neg == 0) {
    throw std::invalid_argument("auc_from_scores: need positives and negatives");
  }
  std::vector<double> cuts;
  cuts.reserve(table.size());
  for (const auto& [s, pos] : table) cuts.push_back(s);
  std::sort(cuts.begin(), cuts.end(), std::greater<>());
  cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
  std::vector<RocPoint> pts;
  for (double cut : cuts) {
    int tp = 0, fp = 0, kept = 0;
    for (const auto& [s, pos] : table) {
      if (s >= cut) {
        kept += 1;
        (pos ? tp : fp) += 1;
      }
    }
    pts.push_back({cut, static_cast<double>(tp) / n_pos, static_cast<double>(fp) / n_neg, kept});
  }
  return auc_from_points(pts);
}

RocCurve roc_sweep(const PlantedTask& t, Method m, const std::vector<double>& taus,
                   Metric metric, int bits) {
  if (taus.empty()) throw std::invalid_argument("roc_sweep: no thresholds");
  const PruneConfig base = method_prune_config(m, bits);
  ComputationalGraph proto(t.config);
  const size_t n_edges = proto.all_edges().size();
  std::vector<bool> is_gt(n_edges, false);
  for (int idx : t.ground_truth) is_gt[static_cast<size_t>(idx)] = true;
  const int n_pos = static_cast<int>(t.ground_truth.size());
  const int n_neg = static_cast<int>(n_edges) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("roc_sweep: degenerate ground truth");

  const ImageBank bank = method_bank(t, base);
  RocCurve curve;
  curve.points.resize(taus.size());
#pragma omp parallel for schedule(dynamic)
  for (int64_t i = 0; i < static_cast<int64_t>(taus.size()); ++i) {
    ComputationalGraph g(t.config);
    DeltaLEngine eng(g, bank, t.dataset, metric);
    PruneConfig pc = base;
    pc.tau = taus[static_cast<size_t>(i)];
    const CircuitResult res = run_acdc(g, eng, pc);
    int tp = 0, fp = 0, kept = 0;
    for (size_t e = 0; e < n_edges; ++e) {
      if (!res.final_mask[e]) continue;
      kept += 1;
      (is_gt[e] ? tp : fp) += 1;
    }
    curve.points[static_cast<size_t>(i)] = {pc.tau, static_cast<double>(tp) / n_pos,
                                            static_cast<double>(fp) / n_neg, kept};
  }
  curve.auc = auc_from_points(curve.points);
  return curve;
}

void export_roc_csv(const RocCurve& curve, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_roc_csv: cannot write " + path);
  out << "tau,tpr,fpr,kept_edges\n";
  out.precision(17);
  for (const RocPoint& p : curve.points) {
    out << p.tau << "," << p.tpr << "," << p.fpr << "," << p.kept_edges << "\n";
  }
}

// --- faithfulness and accuracy --------------------------------------------

double faithfulness(const PlantedTask& t, const std::vector<bool>& mask) {
  const CircuitStats st = circuit_stats(t, mask);
  const double denom = mean(st.clean_ld) - mean(st.corrupt_ld);
  if (std::fabs(denom) < 1e-9) {
    throw std::runtime_error("faithfulness: degenerate clean-corrupt gap");
  }
  return (mean(st.circuit_ld) - mean(st.corrupt_ld)) / denom;
}

double task_accuracy(const PlantedTask& t, const std::vector<bool>& mask) {
  const CircuitStats st = circuit_stats(t, mask);
  int right = 0;
  for (double ld : st.circuit_ld) right += ld > 0.0 ? 1 : 0;
  return static_cast<double>(right) / static_cast<double>(st.circuit_ld.size());
}

// --- incremental quantization sweep ---------------------------------------

namespace {

// Weight elements of one head in a fixed order: W_Q, W_K, W_V column
// blocks, then the W_O row block.
std::vector<float*> head_elements(WeightSet& w, int layer, int head) {
  const ModelConfig& cfg = w.cfg;
  LayerWeights& lw = w.layers[static_cast<size_t>(layer)];
  std::vector<float*> out;
  out.reserve(static_cast<size_t>(4) * cfg.d_k * cfg.d_model);
  for (Tensor* m : {&lw.w_q, &lw.w_k, &lw.w_v}) {
    for (uint32_t ch = 0; ch < cfg.d_k; ++ch) {
      const int64_t col = static_cast<int64_t>(head) * cfg.d_k + ch;
      for (int64_t j = 0; j < cfg.d_model; ++j) out.push_back(&m->at(j, col));
    }
  }
  for (uint32_t ch = 0; ch < cfg.d_k; ++ch) {
    const int64_t row = static_cast<int64_t>(head) * cfg.d_k + ch;
    for (int64_t j = 0; j < cfg.d_model; ++j) out.push_back(&lw.w_o.at(row, j));
  }
  return out;
}

double full_model_accuracy(const ComputationalGraph& g, const ImageBank& bank,
                           const Dataset& ds) {
  const PrecisionPolicy fp32 = PrecisionPolicy::all_fp32();
  int right = 0;
  for (const ContrastPair& item : ds) {
    const ActivationCache cache = forward(g, bank, item.clean, fp32);
    right += last_row_ld(cache, item) > 0.0 ? 1 : 0;
  }
  return static_cast<double>(right) / static_cast<double>(ds.size());
}

}  // namespace

std::vector<QuantSweepPoint> incremental_quant_sweep(const PlantedTask& t,
                                                     const std::vector<bool>& mask) {
  ComputationalGraph g(t.config);
  if (mask.size() != g.all_edges().size()) {
    throw std::invalid_argument("incremental_quant_sweep: mask size mismatch");
  }
  // Heads that source a kept edge are critical; they are quantized last,
  // in small chunks, so accuracy cliffs localize to them.
  std::set<std::pair<int, int>> critical;
  const std::vector<NodeId>& nodes = g.nodes();
  for (const Edge& e : g.all_edges()) {
    if (!mask[static_cast<size_t>(e.index)]) continue;
    const NodeId& src = nodes[static_cast<size_t>(e.src)];
    if (src.kind == NodeKind::Head) critical.insert({src.layer, src.head});
  }

  WeightSet w = t.weights;
  std::vector<PrecisionPolicy> pols = {PrecisionPolicy::all_fp32()};
  // FP32 images read the live weights, so the bank tracks the edits below.
  ImageBank bank = ImageBank::for_policies(w, pols);

  std::vector<QuantSweepPoint> points;
  points.push_back({0, "fp32", full_model_accuracy(g, bank, t.dataset)});

  std::vector<std::pair<int, int>> heads;
  for (uint32_t l = 0; l < t.config.n_layers; ++l) {
    for (uint32_t h = 0; h < t.config.n_heads; ++h) {
      heads.push_back({static_cast<int>(l), static_cast<int>(h)});
    }
  }
  std::reverse(heads.begin(), heads.end());

  for (const auto& [l, h] : heads) {
    if (critical.count({l, h})) continue;
    for (float* p : head_elements(w, l, h)) *p = round_f8(*p);
    std::ostringstream label;
    label << "l" << l << ".h" << h;
    points.push_back({1, label.str(), full_model_accuracy(g, bank, t.dataset)});
  }
  for (const auto& [l, h] : heads) {
    if (!critical.count({l, h})) continue;
    std::vector<float*> elems = head_elements(w, l, h);
    const size_t n = elems.size();
    size_t done = 0;
    for (int step = 1; step <= kSweepChunks; ++step) {
      const size_t hi = static_cast<size_t>(
          std::llround(static_cast<double>(n) * step / kSweepChunks));
      for (; done < hi; ++done) *elems[done] = round_f8(*elems[done]);
      std::ostringstream label;
      label << "l" << l << ".h" << h << " " << step * kSweepChunks << "%";
      points.push_back({2, label.str(), full_model_accuracy(g, bank, t.dataset)});
    }
  }
  return points;
}

void export_quant_sweep_csv(const std::vector<QuantSweepPoint>& points,
                            const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_quant_sweep_csv: cannot write " + path);
  out << "phase,label,accuracy\n";
  out.precision(17);
  for (const QuantSweepPoint& p : points) {
    out << p.phase << "," << p.label << "," << p.accuracy << "\n";
  }
}

// --- precision ablation ---------------------------------------------------

std::vector<PrecisionRow> precision_ablation(const std::vector<PlantedTask>& suite,
                                             const std::vector<double>& taus) {
  if (suite.empty()) throw std::invalid_argument("precision_ablation: empty suite");
  std::vector<PrecisionRow> rows;
  for (int bits : {16, 8, 4}) {
    double auc = 0.0, acc = 0.0;
    for (const PlantedTask& t : suite) {
      auc += roc_sweep(t, Method::Pahq, taus, Metric::LogitDiff, bits).auc;
      const PruneConfig pc = method_prune_config(Method::Pahq, bits);
      ComputationalGraph g(t.config);
      const ImageBank bank = method_bank(t, pc);
      DeltaLEngine eng(g, bank, t.dataset, Metric::LogitDiff);
      const CircuitResult res = run_acdc(g, eng, pc);
      acc += task_accuracy(t, res.final_mask);
    }
    rows.push_back({bits, auc / static_cast<double>(suite.size()),
                    acc / static_cast<double>(suite.size())});
  }
  return rows;
}

void export_precision_csv(const std::vector<PrecisionRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("export_precision_csv: cannot write " + path);
  out << "bits,auc,accuracy\n";
  out.precision(17);
  for (const PrecisionRow& r : rows) {
    out << r.bits << "," << r.auc << "," << r.accuracy << "\n";
  }
}

// --- run reports -----------------------------------------------------------

std::string report_to_json(const RunReport& r) {
  nlohmann::ordered_json j;
  j["schema_version"] = r.schema_version;
  j["command"] = r.command;
  j["method"] = r.method;
  j["seed"] = r.seed;
  j["config"] = r.config;
  nlohmann::ordered_json roc = nlohmann::ordered_json::array();
  for (const RocPoint& p : r.roc) {
    roc.push_back({{"tau", p.tau}, {"tpr", p.tpr}, {"fpr", p.fpr}, {"kept_edges", p.kept_edges}});
  }
  j["roc"] = roc;
  j["auc"] = r.auc;
  j["kept_edges"] = r.kept_edges;
  j["eps_mean"] = r.eps_mean;
  j["eps_max"] = r.eps_max;
  j["runtime_ms"] = r.runtime_ms;
  j["peak_rss_bytes"] = r.peak_rss_bytes;
  return j.dump(2) + "\n";
}

RunReport report_from_json(const std::string& text) {
  nlohmann::json j = nlohmann::json::parse(text);
  if (j.at("schema_version").get<int>() != 1) {
    throw std::runtime_error("report_from_json: unsupported schema_version");
  }
  RunReport r;
  r.schema_version = 1;
  r.command = j.at("command").get<std::string>();
  r.method = j.at("method").get<std::string>();
  r.seed = j.at("seed").get<uint32_t>();
  r.config = j.at("config").get<std::map<std::string, std::string>>();
  for (const auto& p : j.at("roc")) {
    r.roc.push_back({p.at("tau").get<double>(), p.at("tpr").get<double>(),
                     p.at("fpr").get<double>(), p.at("kept_edges").get<int>()});
  }
  r.auc = j.at("auc").get<double>();
  r.kept_edges = j.at("kept_edges").get<std::vector<int>>();
  r.eps_mean = j.at("eps_mean").get<double>();
  r.eps_max = j.at("eps_max").get<double>();
  r.runtime_ms = j.at("runtime_ms").get<double>();
  r.peak_rss_bytes = j.at("peak_rss_bytes").get<uint64_t>();
  return r;
}

void save_report(const RunReport& r, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_report: cannot write " + path);
  out << report_to_json(r);
}

RunReport load_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_report: cannot read " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  return report_from_json(buf.str());
}

uint64_t current_peak_rss_bytes() {
  std::ifstream in("/proc/self/status");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("VmHWM:", 0) == 0) {
      std::istringstream fields(line.substr(6));
      uint64_t kb = 0;
      fields >> kb;
      return kb * 1024;
    }
  }
  return 0;
}

}  // namespace cq
