#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mtr/mttgn.hpp"

namespace mtr {

struct TrainerConfig {
  double alpha = 0.1;    // inner-loop SGD rate
  double beta = 0.01;    // outer rate (adaptive-moment optimizer)
  double gamma1 = 0.1;   // hyper-loop adaptation SGD rate
  double gamma2 = 0.01;  // weight-generating network rate (adaptive-moment)
  std::size_t epochs = 100;
  std::size_t cities_per_iteration = 2;
  // City batches per epoch; 0 derives it from the data so that one epoch
  // roughly covers each source city's training window once.
  std::size_t iterations_per_epoch = 0;
  double support_fraction = 0.5;
  std::size_t query_batch_cap = 64;
  std::size_t episode_window_cap = 128;
  std::uint64_t seed = 1;
  bool reweight = true;    // false: lambda frozen at 1, hyper-loop off (the MAML baseline)
  bool plain_sgd = false;  // test mode: beta/gamma2 updates bypass the adaptive optimizer
  bool exact_outer = false;  // second-order outer gradient; tiny models only
  int detach_depth = 1;      // 0 = full backprop through time
  bool mask_estate = false;  // feature masks applied to source-city replays
  bool mask_community = false;
  bool mask_price = false;
  InvariantProbe* probe = nullptr;

  void validate() const;
};

// Inputs of the weight-generating network for one source instance.
struct WgnInput {
  std::size_t city_index = 0;  // position in the source-city list
  std::vector<double> z;
  std::vector<double> x;
  double y = 0.0;
};

// Sigmoid-output MLP producing per-instance weights in (0,1); the city
// identity enters as a one-hot of size |sources|.
class WeightGeneratingNetwork {
 public:
  WeightGeneratingNetwork(std::size_t n_cities, std::size_t z_dim, std::size_t x_dim,
                          std::size_t h1 = 64, std::size_t h2 = 32);
  ParamStore init_params(std::uint64_t seed) const;
  Var forward(Tape& tape, ParamBinding& params, const WgnInput& input) const;
  std::size_t n_cities() const { return n_cities_; }
  std::size_t in_dim() const { return n_cities_ + z_dim_ + x_dim_ + 1; }

 private:
  std::size_t n_cities_, z_dim_, x_dim_, h1_, h2_;
};

std::vector<double> gen_instance_weights(const WeightGeneratingNetwork& wgn,
                                         const ParamStore& wgn_params,
                                         std::span<const WgnInput> inputs,
                                         InvariantProbe* probe = nullptr);

// One meta-training unit: a contiguous time window of one source city, split
// chronologically into support and query.
struct Episode {
  std::size_t city_index = 0;
  std::vector<std::size_t> event_ids;  // chronological; support then query
  std::size_t support_count = 0;
  std::span<const std::size_t> support() const {
    return std::span(event_ids).first(support_count);
  }
  std::span<const std::size_t> query() const {
    return std::span(event_ids).subspan(support_count);
  }
};

Episode make_episode(const PreparedCity& city, std::size_t city_index, double support_fraction,
                     std::size_t window_cap, std::size_t query_cap, std::mt19937_64& rng);

// -- optimizers --------------------------------------------------------------

struct AdamState {
  GradMap m;
  GradMap v;
  std::size_t t = 0;
};

void sgd_step(ParamStore& params, const GradMap& grad, double lr);
void adam_step(ParamStore& params, const GradMap& grad, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// -- tri-level pieces ---------------------------------------------------------

// One full-batch SGD step on the support set; theta itself is untouched.
ParamStore inner_adapt(const AppraisalModel& model, const ParamStore& theta,
                       const PreparedCity& city, std::span<const std::size_t> support,
                       double alpha, const ReplayOptions& opts);

struct OuterUpdateResult {
  ParamStore theta_next;
  // Per-query-instance loss gradients w.r.t. the adapted parameters,
  // retained for the hyper-loop.
  std::vector<GradMap> instance_grads;
};

OuterUpdateResult outer_update(const AppraisalModel& model, const ParamStore& theta,
                               const ParamStore& theta_prime, const PreparedCity& city,
                               const Episode& episode, std::span<const double> lambdas,
                               const TrainerConfig& cfg, AdamState& outer_state,
                               const ReplayOptions& opts);

struct HyperUpdateResult {
  ParamStore wgn_next;
  std::vector<double> dl_dlambda;  // first-order -beta * <g_n, g_tgt>
};

HyperUpdateResult hyper_update(const AppraisalModel& model, const WeightGeneratingNetwork& wgn,
                               const ParamStore& wgn_params, const ParamStore& theta_next,
                               const PreparedCity& target,
                               std::span<const std::size_t> target_support,
                               std::span<const std::size_t> target_query,
                               const std::vector<GradMap>& instance_grads,
                               std::span<const WgnInput> wgn_inputs, const TrainerConfig& cfg,
                               AdamState& wgn_state, const ReplayOptions& target_opts);

// -- training orchestration ---------------------------------------------------

struct WeightLogRow {
  std::size_t iteration = 0;
  int city_id = 0;
  double mean_lambda = 0.0;
  double sd_lambda = 0.0;
};

struct TrainResult {
  ParamStore theta;
  ParamStore wgn;
  std::vector<WeightLogRow> weight_log;
  std::map<int, double> final_mean_lambda_by_city;  // sweep with the final WGN
  std::vector<std::string> warnings;
};

TrainResult meta_train(const AppraisalModel& model,
                       std::span<const PreparedCity* const> sources, const PreparedCity& target,
                       const TrainerConfig& cfg);

// Picks the SGD step count with minimum validation MAE on the last 20% of the
// target training events, then re-runs that many steps on the full set.
struct AdaptResult {
  ParamStore theta;
  std::vector<double> val_mae_per_step;  // index 0 = before any step
  std::size_t chosen_steps = 0;
};

AdaptResult adapt_to_target(const AppraisalModel& model, const ParamStore& theta_final,
                            const PreparedCity& target, std::size_t max_steps, double alpha,
                            int detach_depth = 1);

}  // namespace mtr
