// SPDX-License-Identifier: Apache-2.0

#include "circuitquant/patching.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <json.hpp>

namespace cq {

// --- dataset --------------------------------------------------------------

Dataset load_dataset_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_dataset_jsonl: cannot open " + path);
  Dataset ds;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    if (!j.is_object() || !j.contains("clean") || !j.contains("corrupt") ||
        !j.contains("answer") || !j.contains("distractor"))
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) +
                               ": missing field");
    ContrastPair p;
    try {
      p.clean = j.at("clean").get<std::vector<int>>();
      p.corrupt = j.at("corrupt").get<std::vector<int>>();
      p.answer = j.at("answer").get<int>();
      p.distractor = j.at("distractor").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error("load_dataset_jsonl: line " + std::to_string(line_no) +
                               ": " + e.what());
    }
    ds.push_back(std::move(p));
  }
  return ds;
}

void save_dataset_jsonl(const Dataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("save_dataset_jsonl: cannot open " + path);
  for (const ContrastPair& p : ds) {
    nlohmann::json j{{"clean", p.clean},
                     {"corrupt", p.corrupt},
                     {"answer", p.answer},
                     {"distractor", p.distractor}};
    out << j.dump() << "\n";
  }
  if (!out) throw std::runtime_error("save_dataset_jsonl: write failed for " + path);
}

void validate_dataset(const Dataset& ds, const ModelConfig& cfg) {
  if (ds.empty()) throw std::invalid_argument("validate_dataset: empty dataset");
  int v = static_cast<int>(cfg.vocab);
  for (size_t i = 0; i < ds.size(); ++i) {
    const ContrastPair& p = ds[i];
    const std::string at = "validate_dataset: item " + std::to_string(i);
    if (p.clean.size() != cfg.seq_len || p.corrupt.size() != cfg.seq_len)
      throw std::invalid_argument(at + ": prompt length must equal seq_len");
    for (int t : p.clean)
      if (t < 0 || t >= v) throw std::invalid_argument(at + ": clean token out of range");
    for (int t : p.corrupt)
      if (t < 0 || t >= v) throw std::invalid_argument(at + ": corrupt token out of range");
    if (p.answer < 0 || p.answer >= v || p.distractor < 0 || p.distractor >= v)
      throw std::invalid_argument(at + ": answer tokens out of range");
    if (p.answer == p.distractor)
      throw std::invalid_argument(at + ": answer equals distractor");
  }
}

// --- metrics --------------------------------------------------------------

Metric parse_metric(const std::string& name) {
  if (name == "kl") return Metric::KlDivergence;
  if (name == "logitdiff") return Metric::LogitDiff;
  throw std::invalid_argument("parse_metric: unknown metric '" + name + "'");
}

const char* metric_name(Metric m) {
  return m == Metric::KlDivergence ? "kl" : "logitdiff";
}

ScoreMode parse_score_mode(const std::string& name) {
  if (name == "loss") return ScoreMode::LossDelta;
  if (name == "act") return ScoreMode::ActDiff;
  throw std::invalid_argument("parse_score_mode: unknown mode '" + name + "'");
}

const char* score_mode_name(ScoreMode m) {
  return m == ScoreMode::LossDelta ? "loss" : "act";
}

namespace {

// log-softmax in double with max subtraction; returns log Z given the max.
double log_sum_exp(std::span<const float> xs, double mx) {
  double s = 0.0;
  for (float x : xs) s += std::exp(static_cast<double>(x) - mx);
  return mx + std::log(s);
}

double max_of(std::span<const float> xs) {
  double mx = -std::numeric_limits<double>::infinity();
  for (float x : xs) mx = std::max(mx, static_cast<double>(x));
  return mx;
}

void check_finite(std::span<const float> xs, const char* fn) {
  for (float x : xs)
    if (std::isnan(x)) throw std::runtime_error(std::string(fn) + ": NaN logits");
}

}  // namespace

double metric_kl(std::span<const float> clean_last, std::span<const float> patched_last) {
  if (clean_last.size() != patched_last.size() || clean_last.empty())
    throw std::invalid_argument("metric_kl: logit vectors must match and be non-empty");
  check_finite(clean_last, "metric_kl");
  check_finite(patched_last, "metric_kl");
  double lse_c = log_sum_exp(clean_last, max_of(clean_last));
  double lse_p = log_sum_exp(patched_last, max_of(patched_last));
  double kl = 0.0;
  for (size_t i = 0; i < clean_last.size(); ++i) {
    double log_p = static_cast<double>(clean_last[i]) - lse_c;
    double log_q = static_cast<double>(patched_last[i]) - lse_p;
    kl += std::exp(log_p) * (log_p - log_q);
  }
  return kl;
}

double metric_logit_diff(std::span<const float> logits_last, int answer, int distractor) {
  if (answer < 0 || distractor < 0 ||
      answer >= static_cast<int>(logits_last.size()) ||
      distractor >= static_cast<int>(logits_last.size()))
    throw std::invalid_argument("metric_logit_diff: token index out of range");
  check_finite(logits_last, "metric_logit_diff");
  return static_cast<double>(logits_last[static_cast<size_t>(answer)]) -
         static_cast<double>(logits_last[static_cast<size_t>(distractor)]);
}

double patched_divergence(Metric m, const Tensor& clean_logits,
                          const Tensor& patched_logits, const ContrastPair& item) {
  int64_t last = clean_logits.dim(0) - 1;
  std::span<const float> c = clean_logits.row(last);
  std::span<const float> p = patched_logits.row(last);
  if (m == Metric::KlDivergence) return metric_kl(c, p);
  return std::abs(metric_logit_diff(p, item.answer, item.distractor) -
                  metric_logit_diff(c, item.answer, item.distractor));
}

// --- engine ---------------------------------------------------------------

DeltaLEngine::DeltaLEngine(const ComputationalGraph& g, const ImageBank& images,
                           Dataset ds, Metric metric)
    : graph_(&g), images_(&images), dataset_(std::move(ds)), metric_(metric) {
  validate_dataset(dataset_, g.config());
}

void DeltaLEngine::prepare_policy(const PrecisionPolicy& policy) {
  const std::string key = policy.key();
  if (caches_.count(key)) return;
  PolicyCaches pc;
  pc.clean.reserve(dataset_.size());
  pc.corrupt.reserve(dataset_.size());
  // Patch sources come from full-graph runs, so a pruned mask never
  // changes what a patch injects; baselines track the mask separately.
  ComputationalGraph full(graph_->config());
  for (const ContrastPair& item : dataset_) {
    pc.clean.push_back(forward(full, *images_, item.clean, policy));
    pc.corrupt.push_back(forward(full, *images_, item.corrupt, policy));
  }
  caches_.emplace(key, std::move(pc));
}

bool DeltaLEngine::prepared(const PrecisionPolicy& policy) const {
  return caches_.count(policy.key()) != 0;
}

void DeltaLEngine::refresh_baselines(const PrecisionPolicy& policy) {
  prepare_policy(policy);
  PolicyCaches& pc = caches_.at(policy.key());
  pc.base_clean.clear();
  pc.base_corrupt.clear();
  for (const ContrastPair& item : dataset_) {
    pc.base_clean.push_back(forward(*graph_, *images_, item.clean, policy));
    pc.base_corrupt.push_back(forward(*graph_, *images_, item.corrupt, policy));
  }
  pc.mask_at_refresh = graph_->mask();
}

const DeltaLEngine::PolicyCaches& DeltaLEngine::caches(const std::string& key) const {
  auto it = caches_.find(key);
  if (it == caches_.end())
    throw std::runtime_error("DeltaLEngine: policy not prepared: " + key);
  return it->second;
}

const DeltaLEngine::PolicyCaches& DeltaLEngine::baselines(const std::string& key) const {
  const PolicyCaches& pc = caches(key);
  if (pc.mask_at_refresh != graph_->mask())
    throw std::runtime_error("DeltaLEngine: baselines stale for mask; call refresh_baselines");
  return pc;
}

const ActivationCache& DeltaLEngine::clean_cache(int item,
                                                 const PrecisionPolicy& policy) const {
  return caches(policy.key()).clean.at(static_cast<size_t>(item));
}

const ActivationCache& DeltaLEngine::corrupt_cache(int item,
                                                   const PrecisionPolicy& policy) const {
  return caches(policy.key()).corrupt.at(static_cast<size_t>(item));
}

double DeltaLEngine::delta_l(const Edge& e, const PrecisionPolicy& policy) const {
  const PolicyCaches& pc = baselines(policy.key());
  double sum = 0.0;
  for (size_t i = 0; i < dataset_.size(); ++i) {
    const Tensor& inject = pc.corrupt[i].nodes[static_cast<size_t>(e.src)].out;
    EdgePatch patch{e.index, &inject};
    ActivationCache run = forward(*graph_, *images_, dataset_[i].clean, policy,
                                  {&patch, 1});
    sum += patched_divergence(metric_, pc.base_clean[i].logits(), run.logits(),
                              dataset_[i]);
  }
  return sum / static_cast<double>(dataset_.size());
}

double DeltaLEngine::act_diff(const Edge& e, const PrecisionPolicy& policy) const {
  const PolicyCaches& pc = baselines(policy.key());
  double sum = 0.0;
  for (size_t i = 0; i < dataset_.size(); ++i) {
    const Tensor& inject = pc.clean[i].nodes[static_cast<size_t>(e.src)].out;
    EdgePatch patch{e.index, &inject};
    ActivationCache run = forward(*graph_, *images_, dataset_[i].corrupt, policy,
                                  {&patch, 1});
    const Tensor& a = run.nodes[static_cast<size_t>(e.dst)].out;
    const Tensor& b = pc.base_corrupt[i].nodes[static_cast<size_t>(e.dst)].out;
    double acc = 0.0;
    for (int64_t k = 0; k < a.size(); ++k) {
      double d = static_cast<double>(a.at(k)) - static_cast<double>(b.at(k));
      acc += d * d;
    }
    sum += std::sqrt(acc / static_cast<double>(a.size()));
  }
  return sum / static_cast<double>(dataset_.size());
}

double DeltaLEngine::score(const Edge& e, const PrecisionPolicy& policy,
                           ScoreMode mode) const {
  return mode == ScoreMode::LossDelta ? delta_l(e, policy) : act_diff(e, policy);
}

double DeltaLEngine::epsilon_precision(const Edge& e, const PrecisionPolicy& low) const {
  return std::abs(delta_l(e, PrecisionPolicy::all_fp32()) - delta_l(e, low));
}

}  // namespace cq
