#include "mtr/mttgn.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace mtr {

void InvariantProbe::record_gate(std::span<const double> g) {
  for (double v : g) {
    gate_min = std::min(gate_min, v);
    gate_max = std::max(gate_max, v);
  }
  ++n_gates;
}

void InvariantProbe::record_attention_sum(double per_dim_sum) {
  max_attention_sum_dev = std::max(max_attention_sum_dev, std::fabs(per_dim_sum - 1.0));
  ++n_attention;
}

void InvariantProbe::record_lambda(double l) {
  lambda_min = std::min(lambda_min, l);
  lambda_max = std::max(lambda_max, l);
  ++n_lambdas;
}

StateStore::StateStore(const TemporalEventGraph& graph, std::size_t h_dim) {
  states_.resize(graph.communities().size());
  for (auto& s : states_) {
    s.h.assign(h_dim, 0.0);  // no history yet
    s.last_update_time = graph.epoch();
    s.ever_updated = false;
    s.chain_len = 0;
  }
}

CommunityState& StateStore::at(const TemporalEventGraph& graph, int community_id) {
  // community() validates the id; communities are stored in build order
  const Community* base = graph.communities().data();
  const Community* c = &graph.community(community_id);
  return states_[static_cast<std::size_t>(c - base)];
}

void StateStore::detach() {
  for (auto& s : states_) {
    s.h_var = Var{};
    s.chain_len = 0;
  }
}

// ---------------------------------------------------------------------------
// Generic replay helpers

std::vector<Var> replay_instance_losses(const AppraisalModel& model, Tape& tape,
                                        ParamBinding& params, const PreparedCity& city,
                                        std::span<const std::size_t> events,
                                        std::size_t loss_begin, const ReplayOptions& opts) {
  std::vector<Var> preds =
      model.replay_predict(tape, params, city, events, loss_begin, opts);
  std::vector<Var> losses;
  losses.reserve(preds.size());
  for (std::size_t k = 0; k < preds.size(); ++k) {
    const TransactionEvent& ev = city.graph.events()[events[loss_begin + k]];
    Var truth = tape.input(Tensor::scalar(ev.unit_price));
    losses.push_back(tape.abs(tape.sub(preds[k], truth)));
  }
  return losses;
}

Var replay_mean_loss(const AppraisalModel& model, Tape& tape, ParamBinding& params,
                     const PreparedCity& city, std::span<const std::size_t> events,
                     std::size_t loss_begin, const ReplayOptions& opts) {
  std::vector<Var> losses =
      replay_instance_losses(model, tape, params, city, events, loss_begin, opts);
  if (losses.empty()) throw ContractError("replay_mean_loss: no loss events");
  return tape.mean(tape.concat(losses));
}

std::vector<double> replay_predict_values(const AppraisalModel& model, const PreparedCity& city,
                                          const ParamStore& params,
                                          std::span<const std::size_t> events,
                                          std::size_t predict_begin,
                                          const ReplayOptions& opts) {
  Tape tape;
  ParamBinding bind(tape, params, /*differentiable=*/false);
  std::vector<Var> preds = model.replay_predict(tape, bind, city, events, predict_begin, opts);
  std::vector<double> out;
  out.reserve(preds.size());
  for (Var v : preds) out.push_back(tape.value(v).value());
  return out;
}

// ---------------------------------------------------------------------------
// Parameter initialization

namespace {

Tensor init_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(cols));
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = u(rng);
  return t;
}

// For input-scaled layers (x -> W (x / sqrt(d))): unit-range entries keep
// the forward variance of a classic fan-in init while making the effect of
// a fixed-rate SGD step on the layer output independent of the input width.
Tensor init_matrix_unit(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Tensor t = Tensor::zeros({rows, cols});
  for (double& v : t.data) v = u(rng);
  return t;
}

Tensor zero_vec(std::size_t n) { return Tensor::zeros({n}); }

std::vector<double> masked(std::span<const double> v, bool mask) {
  if (!mask) return std::vector<double>(v.begin(), v.end());
  return std::vector<double>(v.size(), 0.0);
}

}  // namespace

ParamStore MttgnModel::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  ParamStore p;
  const MttgnDims& d = dims_;

  // Learnable Fourier frequencies over day-scaled intervals, log-spaced
  // initial periods from one day to two years.
  {
    Tensor freq = Tensor::zeros({d.d_phi});
    for (std::size_t k = 0; k < d.d_phi; ++k) {
      const double frac =
          d.d_phi > 1 ? static_cast<double>(k) / static_cast<double>(d.d_phi - 1) : 0.0;
      const double period_days = std::pow(730.0, frac);
      freq.data[k] = 2.0 * std::numbers::pi / period_days;
    }
    p.add("tgn.time.freq", std::move(freq));
  }

  p.add("tgn.gate.W", init_matrix(rng, d.h_dim, d.gate_in()));
  for (const char* g : {"z", "r", "h"}) {
    p.add(std::string("tgn.gru.W") + g, init_matrix(rng, d.h_dim, d.gru_in()));
    p.add(std::string("tgn.gru.U") + g, init_matrix(rng, d.h_dim, d.h_dim));
    p.add(std::string("tgn.gru.b") + g, zero_vec(d.h_dim));
  }
  p.add("tgn.attn.W1", init_matrix(rng, d.h_dim, d.attn_in()));
  p.add("tgn.attn.W2", init_matrix(rng, d.h_dim, d.h_dim));
  p.add("tgn.attn.W3", init_matrix(rng, d.h_dim, d.h_dim));

  if (use_hyper_) {
    p.add("hyper.W.W1", init_matrix_unit(rng, d.hyper_h1, d.z_dim));
    p.add("hyper.W.b1", zero_vec(d.hyper_h1));
    p.add("hyper.W.W2", init_matrix_unit(rng, d.hyper_h2, d.hyper_h1));
    p.add("hyper.W.b2", zero_vec(d.hyper_h2));
    p.add("hyper.W.W3", init_matrix_unit(rng, d.f_h2, d.hyper_h2));
    p.add("hyper.W.b3", zero_vec(d.f_h2));
    p.add("hyper.b.W1", init_matrix_unit(rng, d.hyper_h1, d.z_dim));
    p.add("hyper.b.b1", zero_vec(d.hyper_h1));
    p.add("hyper.b.W2", init_matrix_unit(rng, d.hyper_h2, d.hyper_h1));
    p.add("hyper.b.b2", zero_vec(d.hyper_h2));
    p.add("hyper.b.W3", init_matrix_unit(rng, 1, d.hyper_h2));
    p.add("hyper.b.b3", Tensor::vector({output_bias_init_}));
  } else {
    // shared output layer for the no-hypernetwork variant
    p.add("head.W", init_matrix_unit(rng, 1, d.f_h2));
    p.add("head.b", Tensor::vector({output_bias_init_}));
  }

  p.add("fi.W1", init_matrix_unit(rng, d.f_h1, d.f_in()));
  p.add("fi.b1", zero_vec(d.f_h1));
  p.add("fi.W2", init_matrix_unit(rng, d.f_h2, d.f_h1));
  p.add("fi.b2", zero_vec(d.f_h2));
  return p;
}

// ---------------------------------------------------------------------------
// Forward pieces

Var MttgnModel::time_encode(Tape& tape, ParamBinding& params, double dt_seconds) const {
  if (dt_seconds < 0.0) {
    throw ContractError("time_encode: negative interval " + std::to_string(dt_seconds) +
                        "s (causality bug)");
  }
  const double dt_days = dt_seconds / 86'400.0;
  Var freq = params("tgn.time.freq");
  Var angle = tape.scale(freq, dt_days);
  Var cosv = tape.cos(angle);
  Var sinv = tape.sin(angle);
  Var dt = tape.input(Tensor::vector({dt_days}));
  const Var parts[] = {dt, cosv, sinv};
  Var packed = tape.concat(parts);  // [dt, cos_1..cos_d, sin_1..sin_d]
  std::vector<std::size_t> interleave;
  interleave.push_back(0);
  for (std::size_t k = 0; k < dims_.d_phi; ++k) {
    interleave.push_back(1 + k);
    interleave.push_back(1 + dims_.d_phi + k);
  }
  return tape.gather(packed, std::move(interleave));
}

Var MttgnModel::evolve_state(Tape& tape, ParamBinding& params, const TransactionEvent& event,
                             CommunityState& state, std::span<const double> z_attrs,
                             const ReplayOptions& opts, EvolveTrace* trace) const {
  if (event.time < state.last_update_time) {
    throw ContractError("evolve_state: out-of-order event at t=" + std::to_string(event.time) +
                        " before state time " + std::to_string(state.last_update_time));
  }
  const double dt = static_cast<double>(event.time - state.last_update_time);
  const double y = opts.mask_price ? 0.0 : event.unit_price;
  const std::vector<double> x = masked(event.estate_attrs, opts.mask_estate);
  const std::vector<double> z = masked(z_attrs, opts.mask_community);

  // previous state: differentiate through at most detach_depth evolutions
  Var h_prev;
  if (state.h_var.tape == &tape &&
      (opts.detach_depth <= 0 || state.chain_len < opts.detach_depth)) {
    h_prev = state.h_var;
  } else {
    h_prev = tape.input(Tensor::vector(state.h));
    state.chain_len = 0;
  }

  Var phi = time_encode(tape, params, dt);
  Var xv = tape.input(Tensor::vector(x));
  Var yv = tape.input(Tensor::vector({y}));
  const Var gate_parts[] = {phi, xv, yv, h_prev};
  Var gate = tape.exp(tape.neg(tape.relu(tape.matvec(params("tgn.gate.W"),
                                                     tape.concat(gate_parts)))));
  Var h_tilde = tape.mul(gate, h_prev);
  if (opts.probe) opts.probe->record_gate(tape.value(gate).data);

  Var zv = tape.input(Tensor::vector(z));
  const Var in_parts[] = {xv, yv, zv};
  Var gin = tape.concat(in_parts);
  Var zg = tape.sigmoid(tape.add(tape.add(tape.matvec(params("tgn.gru.Wz"), gin),
                                          tape.matvec(params("tgn.gru.Uz"), h_tilde)),
                                 params("tgn.gru.bz")));
  Var rg = tape.sigmoid(tape.add(tape.add(tape.matvec(params("tgn.gru.Wr"), gin),
                                          tape.matvec(params("tgn.gru.Ur"), h_tilde)),
                                 params("tgn.gru.br")));
  Var cand = tape.tanh(tape.add(
      tape.add(tape.matvec(params("tgn.gru.Wh"), gin),
               tape.matvec(params("tgn.gru.Uh"), tape.mul(rg, h_tilde))),
      params("tgn.gru.bh")));
  Var ones = tape.input(Tensor::vector(std::vector<double>(dims_.h_dim, 1.0)));
  Var h_new = tape.add(tape.mul(tape.sub(ones, zg), h_tilde), tape.mul(zg, cand));

  state.h = tape.value(h_new).data;
  state.h_var = h_new;
  state.last_update_time = event.time;
  state.ever_updated = true;
  state.chain_len += 1;

  if (trace) {
    trace->gate = gate;
    trace->h_tilde = h_tilde;
  }
  return h_new;
}

Var MttgnModel::refresh_embedding(Tape& tape, ParamBinding& params, const AppraisalQuery& query,
                                  StateStore& store, const TemporalEventGraph& graph,
                                  const ReplayOptions& opts,
                                  std::vector<Var>* attention_weights) const {
  const auto nbrs = graph.neighbors(query.community_id);
  CommunityState& self_state = store.at(graph, query.community_id);

  Var xq = tape.input(Tensor::vector(masked(query.estate_attrs, opts.mask_estate)));
  Var h_i = self_state.h_var.tape == &tape ? self_state.h_var
                                           : tape.input(Tensor::vector(self_state.h));

  std::vector<Var> scores;
  std::vector<Var> neighbor_states;
  scores.reserve(nbrs.size());
  for (const NeighborEntry& nb : nbrs) {
    CommunityState& st = store.at(graph, nb.id);
    if (st.ever_updated && st.last_update_time >= query.query_time) {
      throw ContractError("refresh_embedding: neighbor " + std::to_string(nb.id) +
                          " updated at t=" + std::to_string(st.last_update_time) +
                          " is not strictly before the query at t=" +
                          std::to_string(query.query_time));
    }
    Var h_j = st.h_var.tape == &tape ? st.h_var : tape.input(Tensor::vector(st.h));
    neighbor_states.push_back(h_j);
    const double dt = static_cast<double>(query.query_time - st.last_update_time);
    Var phi = time_encode(tape, params, std::max(dt, 0.0));
    Var dist = tape.input(Tensor::vector({nb.distance_m / graph.epsilon_m()}));
    const Var feat_parts[] = {xq, h_i, h_j, phi, dist};
    Var feat = tape.concat(feat_parts);
    scores.push_back(
        tape.matvec(params("tgn.attn.W2"), tape.tanh(tape.matvec(params("tgn.attn.W1"), feat))));
  }

  // Per-dimension softmax across neighbors. Shifting by the per-dimension max
  // (a constant) leaves values and gradients unchanged.
  Tensor shift = Tensor::zeros({dims_.h_dim});
  for (std::size_t dim = 0; dim < dims_.h_dim; ++dim) {
    double mx = -std::numeric_limits<double>::infinity();
    for (const Var& s : scores) mx = std::max(mx, tape.value(s).data[dim]);
    shift.data[dim] = mx;
  }
  Var shift_v = tape.input(std::move(shift));
  std::vector<Var> exps;
  exps.reserve(scores.size());
  for (const Var& s : scores) exps.push_back(tape.exp(tape.sub(s, shift_v)));
  Var denom = tape.add_n(exps);
  std::vector<Var> ws;
  std::vector<Var> weighted;
  ws.reserve(exps.size());
  weighted.reserve(exps.size());
  for (std::size_t j = 0; j < exps.size(); ++j) {
    Var w = tape.div(exps[j], denom);
    ws.push_back(w);
    if (attention_weights) attention_weights->push_back(w);
    weighted.push_back(tape.mul(w, neighbor_states[j]));
  }
  if (opts.probe) {
    for (std::size_t dim = 0; dim < dims_.h_dim; ++dim) {
      double s = 0.0;
      for (const Var& w : ws) s += tape.value(w).data[dim];
      opts.probe->record_attention_sum(s);
    }
  }
  return tape.relu(tape.matvec(params("tgn.attn.W3"), tape.add_n(weighted)));
}

namespace {

// x -> W (x / sqrt(d)) + b; see init_matrix_unit above
Var scaled_linear(Tape& tape, ParamBinding& params, const std::string& w,
                  const std::string& b, Var in) {
  const double d = static_cast<double>(tape.value(in).numel());
  Var s = tape.scale(in, 1.0 / std::sqrt(d));
  return tape.add(tape.matvec(params(w), s), params(b));
}

}  // namespace

Var MttgnModel::mlp2_relu(Tape& tape, ParamBinding& params, const std::string& prefix,
                          Var in) const {
  Var h1 = tape.relu(scaled_linear(tape, params, prefix + "W1", prefix + "b1", in));
  return tape.relu(scaled_linear(tape, params, prefix + "W2", prefix + "b2", h1));
}

Var MttgnModel::mlp3(Tape& tape, ParamBinding& params, const std::string& prefix, Var in) const {
  Var h2 = mlp2_relu(tape, params, prefix, in);
  return scaled_linear(tape, params, prefix + "W3", prefix + "b3", h2);
}

std::pair<Var, Var> MttgnModel::hyper_head(Tape& tape, ParamBinding& params, Var z) const {
  Var w = mlp3(tape, params, "hyper.W.", z);
  Var b = mlp3(tape, params, "hyper.b.", z);
  return {w, tape.sum(b)};
}

Var MttgnModel::appraise(Tape& tape, ParamBinding& params, const AppraisalQuery& query,
                         StateStore& store, const PreparedCity& city,
                         const ReplayOptions& opts) const {
  const Community& comm = city.graph.community(query.community_id);
  Var zv = tape.input(Tensor::vector(masked(comm.attrs, opts.mask_community)));

  Var h_hat;
  if (use_tgn_) {
    h_hat = refresh_embedding(tape, params, query, store, city.graph, opts);
  } else {
    h_hat = tape.input(Tensor::zeros({dims_.h_dim}));
  }

  Var xq = tape.input(Tensor::vector(masked(query.estate_attrs, opts.mask_estate)));
  Var tq = tape.input(Tensor::vector({city.graph.time_scaled(query.query_time)}));
  const Var f_parts[] = {xq, zv, h_hat, tq};
  Var feat = mlp2_relu(tape, params, "fi.", tape.concat(f_parts));

  if (use_hyper_) {
    auto [w, b] = hyper_head(tape, params, zv);
    return tape.add(tape.dot(w, feat), b);
  }
  Var pre = scaled_linear(tape, params, "head.W", "head.b", feat);  // [1]
  return tape.sum(pre);
}

std::vector<Var> MttgnModel::replay_predict(Tape& tape, ParamBinding& params,
                                            const PreparedCity& city,
                                            std::span<const std::size_t> events,
                                            std::size_t predict_begin,
                                            const ReplayOptions& opts) const {
  const auto& all = city.graph.events();
  for (std::size_t k = 1; k < events.size(); ++k) {
    if (all[events[k - 1]].time > all[events[k]].time) {
      throw ContractError("replay_predict: events are not chronological");
    }
  }

  StateStore store(city.graph, dims_.h_dim);
  tape.reserve(tape.size() + 192 * events.size());
  std::vector<Var> preds;
  preds.reserve(events.size() > predict_begin ? events.size() - predict_begin : 0);

  std::size_t i = 0;
  while (i < events.size()) {
    std::size_t j = i;
    while (j < events.size() && all[events[j]].time == all[events[i]].time) ++j;
    // appraise every predicted event in this timestamp group against states
    // built from strictly earlier events
    for (std::size_t k = i; k < j; ++k) {
      if (k < predict_begin) continue;
      const TransactionEvent& ev = all[events[k]];
      if (opts.prediction_override) {
        preds.push_back(tape.input(
            Tensor::scalar((*opts.prediction_override)[preds.size()])));
        continue;
      }
      AppraisalQuery q{ev.estate_attrs, ev.community_id, ev.time};
      preds.push_back(appraise(tape, params, q, store, city, opts));
    }
    // then evolve with the true observations
    for (std::size_t k = i; k < j; ++k) {
      const TransactionEvent& ev = all[events[k]];
      const Community& comm = city.graph.community(ev.community_id);
      CommunityState& st = store.at(city.graph, ev.community_id);
      evolve_state(tape, params, ev, st, comm.attrs, opts);
    }
    i = j;
  }
  return preds;
}

StateStore MttgnModel::build_states(const ParamStore& params, const PreparedCity& city,
                                    std::span<const std::size_t> events) const {
  Tape tape;
  ParamBinding bind(tape, params, /*differentiable=*/false);
  StateStore store(city.graph, dims_.h_dim);
  ReplayOptions opts;
  for (std::size_t id : events) {
    const TransactionEvent& ev = city.graph.events()[id];
    const Community& comm = city.graph.community(ev.community_id);
    evolve_state(tape, bind, ev, store.at(city.graph, ev.community_id), comm.attrs, opts);
  }
  store.detach();  // the tape dies with this scope
  return store;
}

double MttgnModel::appraise_value(const ParamStore& params, const PreparedCity& city,
                                  StateStore& store, const AppraisalQuery& query) const {
  Tape tape;
  ParamBinding bind(tape, params, /*differentiable=*/false);
  ReplayOptions opts;
  Var y = appraise(tape, bind, query, store, city, opts);
  return tape.value(y).value();
}

}  // namespace mtr
