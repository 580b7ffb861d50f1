// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/acdc.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <stdexcept>

#include "circuitquant/pahq.hpp"

namespace cq {

void PruneConfig::validate() const {
  if (!(tau >= 0.0)) throw std::invalid_argument("PruneConfig: tau must be >= 0");
  if (max_steps < 1) throw std::invalid_argument("PruneConfig: max_steps must be >= 1");
  if (!(min_change_rate >= 0.0))
    throw std::invalid_argument("PruneConfig: min_change_rate must be >= 0");
  if (!(act_floor >= 0.0))
    throw std::invalid_argument("PruneConfig: act_floor must be >= 0");
}

CircuitResult run_acdc(ComputationalGraph& g, DeltaLEngine& engine,
                       const PruneConfig& cfg) {
  cfg.validate();
  if (&g != &engine.graph())
    throw std::invalid_argument("run_acdc: engine was built on a different graph");

  CircuitResult res;
  res.last_score.assign(g.all_edges().size(), 0.0);
  int t = 0;
  bool keep_going = true;
  do {
    std::vector<Edge> order = g.sweep_order();
    if (cfg.heads_only) {
      std::erase_if(order, [&](const Edge& e) {
        return g.nodes()[static_cast<size_t>(e.src)].kind != NodeKind::Head;
      });
    }
    if (order.empty()) break;

    // Per-edge policies; identical keys share one cache build.
    std::vector<PrecisionPolicy> policies(order.size());
    std::map<std::string, size_t> seen;
    for (size_t i = 0; i < order.size(); ++i) {
      policies[i] = cfg.per_edge_policy ? policy_for_edge(order[i], g, cfg.base_policy)
                                        : cfg.base_policy;
      if (!seen.count(policies[i].key())) {
        engine.refresh_baselines(policies[i]);  // sequential cache build
        seen.emplace(policies[i].key(), i);
      }
    }

    std::vector<double> raw(order.size());
#pragma omp parallel for schedule(dynamic)
    for (int64_t i = 0; i < static_cast<int64_t>(order.size()); ++i) {
      raw[static_cast<size_t>(i)] = engine.score(order[static_cast<size_t>(i)],
                                                 policies[static_cast<size_t>(i)],
                                                 cfg.mode);
    }

    IterationRecord rec;
    rec.step = t;
    rec.present_before = g.present_count();
    int removed = 0;
    for (size_t i = 0; i < order.size(); ++i) {
      double s = raw[i];
      if (cfg.mode == ScoreMode::ActDiff && s < cfg.act_floor) s = 0.0;
      bool keep = !(s < cfg.tau);
      rec.scores.push_back({order[i].index, s, keep});
      res.last_score[static_cast<size_t>(order[i].index)] = s;
      if (!keep) {
        g.remove_edge(order[i].index);
        ++removed;
      }
    }
    rec.present_after = g.present_count();
    res.iterations.push_back(std::move(rec));
    ++t;
    double change_rate =
        static_cast<double>(removed) / static_cast<double>(order.size());
    keep_going = removed > 0 && change_rate > cfg.min_change_rate;
  } while (t < cfg.max_steps && g.present_count() > 0 && keep_going);

  res.final_mask = g.mask();
  res.steps = t;
  return res;
}

std::vector<double> threshold_grid(double lo, double hi, int n) {
  if (!(lo > 0.0) || !(hi > lo))
    throw std::invalid_argument("threshold_grid: need 0 < lo < hi");
  if (n < 2) throw std::invalid_argument("threshold_grid: need n >= 2");
  std::vector<double> grid(static_cast<size_t>(n));
  double llo = std::log(lo), lhi = std::log(hi);
  for (int i = 0; i < n; ++i)
    grid[static_cast<size_t>(i)] =
        std::exp(llo + (lhi - llo) * static_cast<double>(i) / static_cast<double>(n - 1));
  grid.front() = lo;  // exact endpoints
  grid.back() = hi;
  return grid;
}

void export_scores_csv(const CircuitResult& result, const ComputationalGraph& g,
                       const std::string& prefix) {
  for (const IterationRecord& rec : result.iterations) {
    std::string path = prefix + "scores_iter" + std::to_string(rec.step) + ".csv";
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw std::runtime_error("export_scores_csv: cannot open " + path);
    out << "edge,src,dst,score,kept\n";
    for (const EdgeScore& es : rec.scores) {
      const Edge& e = g.all_edges()[static_cast<size_t>(es.edge)];
      out << es.edge << "," << node_name(g.nodes()[static_cast<size_t>(e.src)]) << ","
          << node_name(g.nodes()[static_cast<size_t>(e.dst)]) << "," << es.score << ","
          << (es.kept ? 1 : 0) << "\n";
    }
    if (!out) throw std::runtime_error("export_scores_csv: write failed for " + path);
  }
}

}  // namespace cq
