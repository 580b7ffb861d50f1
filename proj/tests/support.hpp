// SPDX-License-Identifier: Apache-2.0
//
// Shared helpers for the test binaries: deterministic random weights,
// tokens, and contrast datasets. Random values are derived from raw
// mt19937 draws so they do not depend on the standard library's
// distribution implementations.

#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "circuitquant/model.hpp"
#include "circuitquant/patching.hpp"

namespace cqtest {

inline float rnd(std::mt19937& rng) {
  return static_cast<float>((rng() >> 8) * 0x1p-24) - 0.5f;
}

inline void fill_random(cq::Tensor& t, std::mt19937& rng, float scale) {
  for (float& v : t.flat()) v = scale * rnd(rng);
}

inline cq::WeightSet random_weights(const cq::ModelConfig& cfg, uint32_t seed,
                                    float weight_scale = 0.0f) {
  cq::WeightSet w = cq::WeightSet::zeros(cfg);
  std::mt19937 rng(seed);
  float ws = weight_scale > 0.0f
                 ? weight_scale
                 : 0.8f / std::sqrt(static_cast<float>(cfg.d_model));
  fill_random(w.w_e, rng, 1.0f);
  fill_random(w.w_pos, rng, 0.5f);
  for (auto& lw : w.layers) {
    for (float& v : lw.ln1_g.flat()) v = 1.0f + 0.2f * rnd(rng);
    fill_random(lw.ln1_b, rng, 0.1f);
    fill_random(lw.w_q, rng, ws);
    fill_random(lw.w_k, rng, ws);
    fill_random(lw.w_v, rng, ws);
    fill_random(lw.w_o, rng, ws);
    if (cfg.has_mlp) {
      for (float& v : lw.ln2_g.flat()) v = 1.0f + 0.2f * rnd(rng);
      fill_random(lw.ln2_b, rng, 0.1f);
      fill_random(lw.w_in, rng, ws);
      fill_random(lw.w_out, rng, ws);
    }
  }
  for (float& v : w.ln_f_g.flat()) v = 1.0f + 0.2f * rnd(rng);
  fill_random(w.ln_f_b, rng, 0.1f);
  fill_random(w.w_u, rng, 1.0f);
  return w;
}

inline std::vector<int> random_tokens(const cq::ModelConfig& cfg, std::mt19937& rng) {
  std::vector<int> toks(cfg.seq_len);
  for (int& t : toks) t = static_cast<int>(rng() % cfg.vocab);
  return toks;
}

inline cq::Dataset random_dataset(const cq::ModelConfig& cfg, int items, uint32_t seed) {
  std::mt19937 rng(seed);
  cq::Dataset ds;
  for (int i = 0; i < items; ++i) {
    cq::ContrastPair p;
    p.clean = random_tokens(cfg, rng);
    p.corrupt = random_tokens(cfg, rng);
    p.answer = static_cast<int>(rng() % cfg.vocab);
    do {
      p.distractor = static_cast<int>(rng() % cfg.vocab);
    } while (p.distractor == p.answer);
    ds.push_back(std::move(p));
  }
  return ds;
}

}  // namespace cqtest
