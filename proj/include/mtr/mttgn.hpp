#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mtr/synth_data.hpp"
#include "mtr/tensor.hpp"

namespace mtr {

// Runtime checks of the training-time invariants: gate coordinates in (0,1],
// per-dimension attention weights summing to 1, instance weights in (0,1).
struct InvariantProbe {
  double max_attention_sum_dev = 0.0;
  double gate_min = std::numeric_limits<double>::infinity();
  double gate_max = -std::numeric_limits<double>::infinity();
  double lambda_min = std::numeric_limits<double>::infinity();
  double lambda_max = -std::numeric_limits<double>::infinity();
  std::size_t n_gates = 0;
  std::size_t n_attention = 0;
  std::size_t n_lambdas = 0;

  void record_gate(std::span<const double> g);
  void record_attention_sum(double per_dim_sum);
  void record_lambda(double l);

  bool gates_in_range() const { return n_gates == 0 || (gate_min > 0.0 && gate_max <= 1.0); }
  bool lambdas_in_range() const {
    return n_lambdas == 0 || (lambda_min > 0.0 && lambda_max < 1.0);
  }
};

struct ReplayOptions {
  // Gradient flows through at most this many most-recent state evolutions;
  // 0 means unlimited (full backprop through time).
  int detach_depth = 1;
  bool mask_estate = false;
  bool mask_community = false;
  bool mask_price = false;
  InvariantProbe* probe = nullptr;
  // Test hook: when set, predictions are replaced by these constants
  // (indexed by predicted event order); state evolution is unaffected.
  const std::vector<double>* prediction_override = nullptr;
};

// A potential transaction to be appraised.
struct AppraisalQuery {
  std::vector<double> estate_attrs;
  int community_id = -1;
  std::int64_t query_time = 0;
};

// Per-community temporal state during a replay.
struct CommunityState {
  std::vector<double> h;  // detached value of the embedding
  Var h_var;              // on-tape handle, valid only within the owning tape
  std::int64_t last_update_time = 0;
  bool ever_updated = false;
  int chain_len = 0;  // evolve steps currently connected on the tape
};

class StateStore {
 public:
  StateStore() = default;
  StateStore(const TemporalEventGraph& graph, std::size_t h_dim);
  CommunityState& at(const TemporalEventGraph& graph, int community_id);
  const std::vector<CommunityState>& states() const { return states_; }
  void detach();  // drop tape handles; keeps the plain values

 private:
  std::vector<CommunityState> states_;  // by community index
};

// Base-model interface the trainer drives: a causal replay over chronological
// events that yields one prediction per requested event.
class AppraisalModel {
 public:
  virtual ~AppraisalModel() = default;
  virtual std::string name() const = 0;
  virtual ParamStore init_params(std::uint64_t seed) const = 0;
  // `events` are indices into city.graph.events(), chronological. Returns a
  // prediction Var for each index >= predict_begin, in order.
  virtual std::vector<Var> replay_predict(Tape& tape, ParamBinding& params,
                                          const PreparedCity& city,
                                          std::span<const std::size_t> events,
                                          std::size_t predict_begin,
                                          const ReplayOptions& opts) const = 0;
};

// Mean absolute error between replayed predictions and true prices for
// events[loss_begin..]; earlier events only evolve state.
Var replay_mean_loss(const AppraisalModel& model, Tape& tape, ParamBinding& params,
                     const PreparedCity& city, std::span<const std::size_t> events,
                     std::size_t loss_begin, const ReplayOptions& opts);

// Per-instance absolute errors, same replay semantics.
std::vector<Var> replay_instance_losses(const AppraisalModel& model, Tape& tape,
                                        ParamBinding& params, const PreparedCity& city,
                                        std::span<const std::size_t> events,
                                        std::size_t loss_begin, const ReplayOptions& opts);

// Plain-value predictions (no gradients) for events[predict_begin..].
std::vector<double> replay_predict_values(const AppraisalModel& model, const PreparedCity& city,
                                          const ParamStore& params,
                                          std::span<const std::size_t> events,
                                          std::size_t predict_begin, const ReplayOptions& opts);

struct MttgnDims {
  std::size_t x_dim = 12;
  std::size_t z_dim = 16;
  std::size_t d_phi = 8;    // time-embedding frequency count
  std::size_t h_dim = 64;   // community state size; also the attention dim
  std::size_t f_h1 = 64;    // feature-integration hidden dims
  std::size_t f_h2 = 16;    //   (the second one is the head input size)
  std::size_t hyper_h1 = 16;
  std::size_t hyper_h2 = 8;

  std::size_t phi_dim() const { return 2 * d_phi + 1; }
  std::size_t gate_in() const { return phi_dim() + x_dim + 1 + h_dim; }
  std::size_t gru_in() const { return x_dim + 1 + z_dim; }
  std::size_t attn_in() const { return x_dim + 2 * h_dim + phi_dim() + 1; }
  std::size_t f_in() const { return x_dim + z_dim + h_dim + 1; }
};

// The multi-task temporal graph network: time-gated GRU state evolution,
// dimensional attentive neighbor aggregation, and a hypernetwork-generated
// per-community output layer.
class MttgnModel : public AppraisalModel {
 public:
  // output_bias_init seeds the output-layer bias generator at the market's
  // price level so training starts from a plausible valuation.
  explicit MttgnModel(MttgnDims dims = {}, bool use_tgn = true, bool use_hyper = true,
                      double output_bias_init = 0.0)
      : dims_(dims), use_tgn_(use_tgn), use_hyper_(use_hyper),
        output_bias_init_(output_bias_init) {}

  std::string name() const override { return "mttgn"; }
  const MttgnDims& dims() const { return dims_; }
  ParamStore init_params(std::uint64_t seed) const override;

  std::vector<Var> replay_predict(Tape& tape, ParamBinding& params, const PreparedCity& city,
                                  std::span<const std::size_t> events,
                                  std::size_t predict_begin,
                                  const ReplayOptions& opts) const override;

  // -- forward pieces (exposed for unit tests and single-query serving) ----

  // [dt_days, cos(w_1 dt_days), sin(w_1 dt_days), ...]; dt must be >= 0.
  Var time_encode(Tape& tape, ParamBinding& params, double dt_seconds) const;

  struct EvolveTrace {
    Var gate;       // exp(-relu(.)) coordinates, in (0,1]
    Var h_tilde;    // gated previous state
  };
  // Applies one transaction event to a community state. Returns the new
  // on-tape embedding; the store entry is updated (value + tape handle).
  Var evolve_state(Tape& tape, ParamBinding& params, const TransactionEvent& event,
                   CommunityState& state, std::span<const double> z_attrs,
                   const ReplayOptions& opts, EvolveTrace* trace = nullptr) const;

  // Refreshed embedding of the query community from its neighbors' states
  // (strict causality: every updated neighbor must predate the query).
  Var refresh_embedding(Tape& tape, ParamBinding& params, const AppraisalQuery& query,
                        StateStore& store, const TemporalEventGraph& graph,
                        const ReplayOptions& opts,
                        std::vector<Var>* attention_weights = nullptr) const;

  // Hypernetwork head: per-community output-layer parameters (W, b).
  std::pair<Var, Var> hyper_head(Tape& tape, ParamBinding& params, Var z) const;

  Var appraise(Tape& tape, ParamBinding& params, const AppraisalQuery& query,
               StateStore& store, const PreparedCity& city, const ReplayOptions& opts) const;

  // Evolves states through the given events without predicting (serving /
  // latency path).
  StateStore build_states(const ParamStore& params, const PreparedCity& city,
                          std::span<const std::size_t> events) const;

  // Single-query forward on plain values, using detached states.
  double appraise_value(const ParamStore& params, const PreparedCity& city, StateStore& store,
                        const AppraisalQuery& query) const;

 private:
  MttgnDims dims_;
  bool use_tgn_;
  bool use_hyper_;
  double output_bias_init_;

  Var mlp2_relu(Tape& tape, ParamBinding& params, const std::string& prefix, Var in) const;
  Var mlp3(Tape& tape, ParamBinding& params, const std::string& prefix, Var in) const;
};

}  // namespace mtr
