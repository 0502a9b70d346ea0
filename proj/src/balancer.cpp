#include "pmtl/balancer.hpp"

#include <cmath>

namespace pmtl {

Balancer::Balancer(const BalancerConfig& cfg, uint64_t seed)
    : cfg_(cfg), rng_(seed ^ 0xb5297a4d3f84d5b1ull) {
  if (cfg_.temperature <= 0) throw Error("balancer: temperature must be positive");
  if (cfg_.ema_beta < 0 || cfg_.ema_beta >= 1)
    throw Error("balancer: ema beta must lie in [0,1)");
  if (cfg_.clamp_lo > cfg_.clamp_hi) throw Error("balancer: bad clamp bounds");
}

void Balancer::register_task(const std::string& id, Family family,
                             int64_t dataset_size) {
  for (const auto& t : tasks_)
    if (t.id == id) throw Error("balancer: duplicate task " + id);
  if (dataset_size <= 0) throw Error("balancer: task " + id + " has no samples");
  tasks_.push_back({id, family, dataset_size});
}

size_t Balancer::index_of(const std::string& id) const {
  for (size_t i = 0; i < tasks_.size(); ++i)
    if (tasks_[i].id == id) return i;
  throw Error("balancer: unknown task " + id);
}

void Balancer::update_ema(const std::string& id, double observed_loss) {
  if (!std::isfinite(observed_loss) || observed_loss < 0)
    throw Error("balancer: invalid observed loss for " + id);
  auto& t = tasks_[index_of(id)];
  t.ema = cfg_.ema_beta * t.ema +
          (1.0 - cfg_.ema_beta) * std::max(observed_loss, 1e-8);
}

double Balancer::mean_ema() const {
  double m = 0.0;
  for (const auto& t : tasks_) m += t.ema;
  return m / tasks_.size();
}

std::vector<double> Balancer::probabilities() const {
  if (tasks_.empty()) throw Error("balancer: no registered tasks");
  int64_t total = 0;
  for (const auto& t : tasks_) total += t.dataset_size;
  double me = mean_ema();
  std::vector<double> p(tasks_.size());
  double z = 0.0;
  for (size_t i = 0; i < tasks_.size(); ++i) {
    double freq = static_cast<double>(tasks_[i].dataset_size) / total;
    double score = freq * (tasks_[i].ema / me);
    p[i] = std::pow(score, 1.0 / cfg_.temperature);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

const std::string& Balancer::sample() {
  auto p = probabilities();
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  double u = uni(rng_);
  double acc = 0.0;
  for (size_t i = 0; i < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return tasks_[i].id;
  }
  return tasks_.back().id;
}

double Balancer::dynamic_weight(const std::string& id) const {
  const auto& t = tasks_[index_of(id)];
  if (t.family != Family::Classification && t.family != Family::Detection)
    throw Error("balancer: dynamic weight applies to classification/detection only (" +
                id + ")");
  double w = std::pow(t.ema / mean_ema(), cfg_.gamma);
  return std::min(std::max(w, cfg_.clamp_lo), cfg_.clamp_hi);
}

double Balancer::ema(const std::string& id) const {
  return tasks_[index_of(id)].ema;
}

}  // namespace pmtl
