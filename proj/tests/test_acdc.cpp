// SPDX-License-Identifier: Apache-2.0
//
// The pruning loop is replayed by a serial step-by-step driver that
// shares no code with run_acdc's loop body; masks and recorded scores
// must agree exactly, for any worker count.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <omp.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "circuitquant/acdc.hpp"
#include "circuitquant/pahq.hpp"
#include "support.hpp"

using namespace cq;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_model = 12;
  cfg.d_k = 6;
  cfg.vocab = 9;
  cfg.seq_len = 5;
  cfg.has_mlp = 1;
  return cfg;
}

struct Fixture {
  ModelConfig cfg = tiny_cfg();
  WeightSet w;
  Dataset ds;
  ComputationalGraph g;
  ImageBank images;

  explicit Fixture(uint32_t seed)
      : w(cqtest::random_weights(cfg, seed)),
        ds(cqtest::random_dataset(cfg, 3, seed + 1)),
        g(cfg),
        images(make_bank(w)) {}

  static ImageBank make_bank(const WeightSet& w) {
    std::vector<PrecisionPolicy> pols{PrecisionPolicy::all_fp32(),
                                      PrecisionPolicy::head_quantized()};
    return ImageBank::for_policies(w, pols);
  }
};

// Serial replay: one edge at a time, no parallel fan-out, scores taken
// against the iteration's starting mask by snapshotting it first.
CircuitResult replay_acdc(ComputationalGraph& g, DeltaLEngine& engine,
                          const PruneConfig& cfg) {
  CircuitResult res;
  res.last_score.assign(g.all_edges().size(), 0.0);
  int t = 0;
  while (true) {
    std::vector<Edge> order = g.sweep_order();
    if (order.empty()) break;
    IterationRecord rec;
    rec.step = t;
    rec.present_before = static_cast<int>(order.size());

    std::vector<double> scores;
    for (const Edge& e : order) {
      PrecisionPolicy pol = cfg.per_edge_policy
                                ? policy_for_edge(e, g, cfg.base_policy)
                                : cfg.base_policy;
      engine.refresh_baselines(pol);
      scores.push_back(engine.score(e, pol, cfg.mode));
    }
    int removed = 0;
    for (size_t i = 0; i < order.size(); ++i) {
      double s = scores[i];
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
    res.iterations.push_back(rec);
    ++t;
    bool cont = removed > 0 &&
                static_cast<double>(removed) / rec.present_before > cfg.min_change_rate;
    if (!(t < cfg.max_steps && g.present_count() > 0 && cont)) break;
  }
  res.final_mask = g.mask();
  res.steps = t;
  return res;
}

void check_same(const CircuitResult& a, const CircuitResult& b) {
  CHECK(a.steps == b.steps);
  CHECK(a.final_mask == b.final_mask);
  REQUIRE(a.iterations.size() == b.iterations.size());
  for (size_t i = 0; i < a.iterations.size(); ++i) {
    const IterationRecord& ra = a.iterations[i];
    const IterationRecord& rb = b.iterations[i];
    CHECK(ra.present_before == rb.present_before);
    CHECK(ra.present_after == rb.present_after);
    REQUIRE(ra.scores.size() == rb.scores.size());
    for (size_t j = 0; j < ra.scores.size(); ++j) {
      CHECK(ra.scores[j].edge == rb.scores[j].edge);
      CHECK(ra.scores[j].score == rb.scores[j].score);  // identical doubles
      CHECK(ra.scores[j].kept == rb.scores[j].kept);
    }
  }
}

}  // namespace

TEST_CASE("zero threshold prunes nothing and stops after one step") {
  Fixture f(201);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.tau = 0.0;
  cfg.base_policy = PrecisionPolicy::all_fp32();
  CircuitResult res = run_acdc(f.g, engine, cfg);
  CHECK(res.steps == 1);
  CHECK(f.g.present_count() == static_cast<int>(f.g.all_edges().size()));
  for (const EdgeScore& es : res.iterations[0].scores) {
    CHECK(es.kept);
    CHECK(es.score >= 0.0);
  }
}

TEST_CASE("huge threshold prunes everything in one step") {
  Fixture f(203);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.tau = 1e9;
  cfg.base_policy = PrecisionPolicy::all_fp32();
  CircuitResult res = run_acdc(f.g, engine, cfg);
  CHECK(res.steps == 1);
  CHECK(f.g.present_count() == 0);
  CHECK(res.iterations[0].present_after == 0);
  for (bool m : res.final_mask) CHECK_FALSE(m);
}

TEST_CASE("heads-only sweep leaves embed- and mlp-sourced edges untouched") {
  Fixture f(205);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.tau = 1e9;
  cfg.heads_only = true;
  cfg.base_policy = PrecisionPolicy::all_fp32();
  CircuitResult res = run_acdc(f.g, engine, cfg);
  CHECK(res.steps == 1);
  int head_sourced = 0;
  for (const Edge& e : f.g.all_edges()) {
    const bool from_head = f.g.nodes()[static_cast<size_t>(e.src)].kind == NodeKind::Head;
    head_sourced += from_head ? 1 : 0;
    CHECK(res.final_mask[static_cast<size_t>(e.index)] == !from_head);
  }
  CHECK(head_sourced > 0);
  CHECK(static_cast<int>(res.iterations[0].scores.size()) == head_sourced);
  CHECK(res.iterations[0].present_before == static_cast<int>(f.g.all_edges().size()));
}

TEST_CASE("run_acdc matches the serial replay exactly") {
  for (uint32_t seed : {211u, 223u}) {
    for (bool per_edge : {false, true}) {
      Fixture fa(seed), fb(seed);
      DeltaLEngine ea(fa.g, fa.images, fa.ds, Metric::KlDivergence);
      DeltaLEngine eb(fb.g, fb.images, fb.ds, Metric::KlDivergence);
      PruneConfig cfg;
      cfg.tau = 2e-3;
      cfg.max_steps = 6;
      cfg.per_edge_policy = per_edge;
      cfg.base_policy =
          per_edge ? PrecisionPolicy::head_quantized() : PrecisionPolicy::all_fp32();
      CircuitResult got = run_acdc(fa.g, ea, cfg);
      CircuitResult want = replay_acdc(fb.g, eb, cfg);
      check_same(got, want);
      CHECK(fa.g.mask() == fb.g.mask());
    }
  }
}

TEST_CASE("results are identical for any OpenMP worker count") {
  CircuitResult first;
  std::vector<bool> first_mask;
  for (int threads : {1, 2, 4}) {
    omp_set_num_threads(threads);
    Fixture f(227);
    DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
    PruneConfig cfg;
    cfg.tau = 2e-3;
    cfg.max_steps = 5;
    CircuitResult res = run_acdc(f.g, engine, cfg);
    if (threads == 1) {
      first = res;
      first_mask = f.g.mask();
    } else {
      check_same(res, first);
      CHECK(f.g.mask() == first_mask);
    }
  }
  omp_set_num_threads(4);
}

TEST_CASE("masks shrink monotonically and converged edges clear the bar") {
  Fixture f(229);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.tau = 1e-3;
  cfg.max_steps = 12;
  CircuitResult res = run_acdc(f.g, engine, cfg);
  int prev = static_cast<int>(f.g.all_edges().size());
  for (const IterationRecord& rec : res.iterations) {
    CHECK(rec.present_before == prev);
    CHECK(rec.present_after <= rec.present_before);
    prev = rec.present_after;
  }
  // Loop ended because nothing changed (not the step cap), so every
  // surviving edge scored at or above tau in the last iteration.
  if (res.steps < cfg.max_steps && !res.iterations.empty()) {
    const IterationRecord& last = res.iterations.back();
    CHECK(last.present_before == last.present_after);
    for (const EdgeScore& es : last.scores) CHECK(es.score >= cfg.tau);
  }
}

TEST_CASE("activation-score floor zeroes small scores before the threshold") {
  Fixture f(233);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.mode = ScoreMode::ActDiff;
  cfg.act_floor = 1e9;  // floors every score to zero
  cfg.tau = 1e-12;
  cfg.base_policy = PrecisionPolicy::all_fp32();
  CircuitResult res = run_acdc(f.g, engine, cfg);
  CHECK(f.g.present_count() == 0);
  for (const EdgeScore& es : res.iterations[0].scores) {
    CHECK(es.score == 0.0);
    CHECK_FALSE(es.kept);
  }

  // With tau = 0 the floored scores tie the threshold and are kept.
  Fixture f2(233);
  DeltaLEngine e2(f2.g, f2.images, f2.ds, Metric::KlDivergence);
  cfg.tau = 0.0;
  CircuitResult res2 = run_acdc(f2.g, e2, cfg);
  CHECK(f2.g.present_count() == static_cast<int>(f2.g.all_edges().size()));
  CHECK(res2.steps == 1);
}

TEST_CASE("config validation") {
  PruneConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.tau = -1.0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PruneConfig{};
  cfg.max_steps = 0;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = PruneConfig{};
  cfg.act_floor = -0.5;
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  Fixture fa(241), fb(242);
  DeltaLEngine engine(fa.g, fa.images, fa.ds, Metric::KlDivergence);
  PruneConfig ok;
  CHECK_THROWS_AS((void)run_acdc(fb.g, engine, ok), std::invalid_argument);
}

TEST_CASE("threshold grid: exact endpoints, frozen interior, constant ratio") {
  std::vector<double> grid = threshold_grid(0.001, 3.16, 21);
  REQUIRE(grid.size() == 21);
  CHECK(grid.front() == 0.001);  // exact, not approximate
  CHECK(grid.back() == 3.16);
  CHECK(grid[1] == doctest::Approx(0.0014961817537620622).epsilon(1e-12));
  CHECK(grid[2] == doctest::Approx(0.002238559840290518).epsilon(1e-12));
  CHECK(grid[19] == doctest::Approx(2.112042866486218).epsilon(1e-12));
  for (size_t i = 2; i < grid.size(); ++i) {
    CHECK(grid[i] / grid[i - 1] ==
          doctest::Approx(grid[1] / grid[0]).epsilon(1e-9));
  }
  for (size_t i = 1; i < grid.size(); ++i) CHECK(grid[i] > grid[i - 1]);

  CHECK_THROWS_AS((void)threshold_grid(0.0, 1.0, 5), std::invalid_argument);
  CHECK_THROWS_AS((void)threshold_grid(0.1, 0.1, 5), std::invalid_argument);
  CHECK_THROWS_AS((void)threshold_grid(0.1, 1.0, 1), std::invalid_argument);
}

TEST_CASE("score tables export one CSV per iteration") {
  Fixture f(251);
  DeltaLEngine engine(f.g, f.images, f.ds, Metric::KlDivergence);
  PruneConfig cfg;
  cfg.tau = 2e-3;
  cfg.max_steps = 4;
  CircuitResult res = run_acdc(f.g, engine, cfg);

  std::string prefix = (std::filesystem::temp_directory_path() / "cq_acdc_").string();
  export_scores_csv(res, f.g, prefix);
  for (const IterationRecord& rec : res.iterations) {
    std::string path = prefix + "scores_iter" + std::to_string(rec.step) + ".csv";
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "edge,src,dst,score,kept");
    int rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows == rec.present_before);
    in.close();
    std::filesystem::remove(path);
  }

  // Spot-check one row's naming.
  export_scores_csv(res, f.g, prefix);
  std::ifstream in(prefix + "scores_iter0.csv");
  std::string header, row;
  std::getline(in, header);
  std::getline(in, row);
  CHECK(row.find("->") == std::string::npos);  // src and dst are separate columns
  std::stringstream ss(row);
  std::string field;
  std::vector<std::string> fields;
  while (std::getline(ss, field, ',')) fields.push_back(field);
  REQUIRE(fields.size() == 5);
  CHECK(fields[1] == "m1");  // sweep order: last destination's last source first
  CHECK(fields[2] == "unembed");
  for (const IterationRecord& rec : res.iterations)
    std::filesystem::remove(prefix + "scores_iter" + std::to_string(rec.step) + ".csv");
}
