// Temperature-based task sampling on frequency x loss-EMA scores, plus the
// clamped dynamic loss weight for classification/detection.

#pragma once

#include <random>
#include <string>
#include <vector>

#include "pmtl/heads.hpp"

namespace pmtl {

struct BalancerConfig {
  double temperature = 0.7;
  double ema_beta = 0.98;
  double gamma = 0.5;
  double clamp_lo = 0.25;
  double clamp_hi = 4.0;
};

class Balancer {
 public:
  Balancer(const BalancerConfig& cfg, uint64_t seed);

  void register_task(const std::string& id, Family family, int64_t dataset_size);

  // m_k <- beta m_k + (1-beta) max(loss, 1e-8)
  void update_ema(const std::string& id, double observed_loss);

  // p_k proportional to (f_k * mbar_k)^(1/tau), mbar_k = m_k / mean_j m_j.
  std::vector<double> probabilities() const;
  // One draw fixes a whole task-homogeneous batch.
  const std::string& sample();

  // clamp((m_k / mean_j m_j)^gamma, lo, hi); classification/detection only.
  double dynamic_weight(const std::string& id) const;

  double ema(const std::string& id) const;
  size_t task_count() const { return tasks_.size(); }
  const std::string& task_id(size_t i) const { return tasks_[i].id; }

 private:
  struct TaskState {
    std::string id;
    Family family;
    int64_t dataset_size;
    double ema = 1.0;
  };
  size_t index_of(const std::string& id) const;
  double mean_ema() const;

  BalancerConfig cfg_;
  std::vector<TaskState> tasks_;
  std::mt19937_64 rng_;
};

}  // namespace pmtl
