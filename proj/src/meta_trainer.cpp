#include "mtr/meta_trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace mtr {

void TrainerConfig::validate() const {
  if (!(alpha > 0 && beta > 0 && gamma1 > 0 && gamma2 > 0)) {
    throw ConfigError("trainer: all learning rates must be > 0");
  }
  if (!(support_fraction > 0.0 && support_fraction < 1.0)) {
    throw ConfigError("trainer: support_fraction must be in (0, 1)");
  }
  if (cities_per_iteration < 1) {
    throw ConfigError("trainer: cities_per_iteration must be >= 1");
  }
  if (episode_window_cap < 2) {
    throw ConfigError("trainer: episode_window_cap must be >= 2");
  }
}

// ---------------------------------------------------------------------------
// Weight-generating network

WeightGeneratingNetwork::WeightGeneratingNetwork(std::size_t n_cities, std::size_t z_dim,
                                                 std::size_t x_dim, std::size_t h1,
                                                 std::size_t h2)
    : n_cities_(n_cities), z_dim_(z_dim), x_dim_(x_dim), h1_(h1), h2_(h2) {
  if (n_cities < 1) throw ContractError("wgn: need at least one source city");
}

ParamStore WeightGeneratingNetwork::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  auto mat = [&rng](std::size_t r, std::size_t c) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(c));
    std::uniform_real_distribution<double> u(-bound, bound);
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = u(rng);
    return t;
  };
  ParamStore p;
  p.add("wgn.W1", mat(h1_, in_dim()));
  p.add("wgn.b1", Tensor::zeros({h1_}));
  p.add("wgn.W2", mat(h2_, h1_));
  p.add("wgn.b2", Tensor::zeros({h2_}));
  p.add("wgn.W3", mat(1, h2_));
  p.add("wgn.b3", Tensor::zeros({1}));
  return p;
}

Var WeightGeneratingNetwork::forward(Tape& tape, ParamBinding& params,
                                     const WgnInput& input) const {
  if (input.city_index >= n_cities_) {
    throw ContractError("wgn: city index " + std::to_string(input.city_index) +
                        " outside the one-hot table of size " + std::to_string(n_cities_));
  }
  if (input.z.size() != z_dim_ || input.x.size() != x_dim_) {
    throw ContractError("wgn: attribute dimensions do not match");
  }
  std::vector<double> in(in_dim(), 0.0);
  in[input.city_index] = 1.0;
  std::copy(input.z.begin(), input.z.end(), in.begin() + static_cast<std::ptrdiff_t>(n_cities_));
  std::copy(input.x.begin(), input.x.end(),
            in.begin() + static_cast<std::ptrdiff_t>(n_cities_ + z_dim_));
  in.back() = input.y;

  Var v = tape.input(Tensor::vector(std::move(in)));
  Var a1 = tape.relu(tape.add(tape.matvec(params("wgn.W1"), v), params("wgn.b1")));
  Var a2 = tape.relu(tape.add(tape.matvec(params("wgn.W2"), a1), params("wgn.b2")));
  Var logit = tape.add(tape.sum(tape.matvec(params("wgn.W3"), a2)), tape.sum(params("wgn.b3")));
  // Soft-bound the logit to +-30: near-identity in the working range, but
  // sigmoid(30) still stays strictly inside (0,1) in doubles, so weights can
  // never collapse to exactly 0 or 1 however far the optimizer drifts.
  Var bounded = tape.scale(tape.tanh(tape.scale(logit, 1.0 / 30.0)), 30.0);
  return tape.sigmoid(bounded);
}

std::vector<double> gen_instance_weights(const WeightGeneratingNetwork& wgn,
                                         const ParamStore& wgn_params,
                                         std::span<const WgnInput> inputs,
                                         InvariantProbe* probe) {
  Tape tape;
  ParamBinding bind(tape, wgn_params, /*differentiable=*/false);
  std::vector<double> out;
  out.reserve(inputs.size());
  for (const WgnInput& in : inputs) {
    const double l = tape.value(wgn.forward(tape, bind, in)).value();
    if (probe) probe->record_lambda(l);
    out.push_back(l);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Episodes

Episode make_episode(const PreparedCity& city, std::size_t city_index, double support_fraction,
                     std::size_t window_cap, std::size_t query_cap, std::mt19937_64& rng) {
  const std::size_t n = city.n_train;
  if (n < 2) {
    throw NumericalError("episode: city " + std::to_string(city.city_id) +
                         " has fewer than 2 training events");
  }
  const std::size_t window = std::min(n, window_cap);
  const std::size_t max_start = n - window;
  const std::size_t start =
      max_start == 0 ? 0 : std::uniform_int_distribution<std::size_t>(0, max_start)(rng);

  std::size_t support =
      static_cast<std::size_t>(std::lround(static_cast<double>(window) * support_fraction));
  support = std::clamp<std::size_t>(support, 1, window - 1);
  const std::size_t query = std::min(window - support, query_cap);

  Episode ep;
  ep.city_index = city_index;
  ep.support_count = support;
  ep.event_ids.reserve(support + query);
  for (std::size_t k = 0; k < support + query; ++k) ep.event_ids.push_back(start + k);
  return ep;
}

// ---------------------------------------------------------------------------
// Optimizers

void sgd_step(ParamStore& params, const GradMap& grad, double lr) {
  params.axpy(-lr, grad);
}

void adam_step(ParamStore& params, const GradMap& grad, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
  if (state.t == 0) {
    state.m = zero_grads_like(params);
    state.v = zero_grads_like(params);
  }
  state.t += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (auto& [name, m] : state.m) {
    auto git = grad.find(name);
    if (git == grad.end()) continue;
    const Tensor& g = git->second;
    Tensor& v = state.v.at(name);
    Tensor& p = params.get_mut(name);
    for (std::size_t i = 0; i < g.data.size(); ++i) {
      m.data[i] = beta1 * m.data[i] + (1.0 - beta1) * g.data[i];
      v.data[i] = beta2 * v.data[i] + (1.0 - beta2) * g.data[i] * g.data[i];
      const double mhat = m.data[i] / bc1;
      const double vhat = v.data[i] / bc2;
      p.data[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Tri-level pieces

ParamStore inner_adapt(const AppraisalModel& model, const ParamStore& theta,
                       const PreparedCity& city, std::span<const std::size_t> support,
                       double alpha, const ReplayOptions& opts) {
  if (support.empty()) throw ContractError("inner_adapt: empty support set");
  Tape tape;
  ParamBinding bind(tape, theta);
  Var loss = replay_mean_loss(model, tape, bind, city, support, 0, opts);
  if (!std::isfinite(tape.value(loss).value())) {
    throw NumericalError("inner_adapt: non-finite support loss");
  }
  GradMap grad = tape.backward(loss);
  if (!grad_all_finite(grad)) throw NumericalError("inner_adapt: non-finite gradient");
  ParamStore adapted = theta.snapshot();
  sgd_step(adapted, grad, alpha);
  return adapted;
}

namespace {

GradMap mean_loss_grad(const AppraisalModel& model, const ParamStore& params,
                       const PreparedCity& city, std::span<const std::size_t> events,
                       std::size_t loss_begin, const ReplayOptions& opts) {
  Tape tape;
  ParamBinding bind(tape, params);
  Var loss = replay_mean_loss(model, tape, bind, city, events, loss_begin, opts);
  if (!std::isfinite(tape.value(loss).value())) {
    throw NumericalError("replay: non-finite loss");
  }
  return tape.backward(loss);
}

}  // namespace

OuterUpdateResult outer_update(const AppraisalModel& model, const ParamStore& theta,
                               const ParamStore& theta_prime, const PreparedCity& city,
                               const Episode& episode, std::span<const double> lambdas,
                               const TrainerConfig& cfg, AdamState& outer_state,
                               const ReplayOptions& opts) {
  if (lambdas.size() != episode.query().size()) {
    throw ContractError("outer_update: lambda count does not match the query set");
  }

  // Per-instance gradients at the adapted parameters (first-order: applied to
  // theta without differentiating through the inner step).
  Tape tape;
  ParamBinding bind(tape, theta_prime);
  std::vector<Var> losses = replay_instance_losses(model, tape, bind, city, episode.event_ids,
                                                   episode.support_count, opts);
  OuterUpdateResult out;
  out.instance_grads.reserve(losses.size());
  for (Var l : losses) {
    if (!std::isfinite(tape.value(l).value())) {
      throw NumericalError("outer_update: non-finite instance loss");
    }
    out.instance_grads.push_back(tape.backward(l));
  }

  GradMap total = zero_grads_like(theta_prime);
  for (std::size_t n = 0; n < losses.size(); ++n) {
    grad_axpy(total, lambdas[n], out.instance_grads[n]);
  }
  if (!grad_all_finite(total)) {
    throw NumericalError("outer_update: non-finite instance gradient");
  }

  if (cfg.exact_outer) {
    // Correction through the inner step: grad <- (I - alpha H_support) grad,
    // with the Hessian-vector product taken by central differences around
    // theta. Only sensible for tiny parameter counts.
    double norm = 0.0;
    for (const auto& [k, t] : total) {
      for (double v : t.data) norm = std::max(norm, std::fabs(v));
    }
    if (norm > 0) {
      const double eps = 1e-4 / norm;
      ParamStore plus = theta.snapshot();
      plus.axpy(eps, total);
      ParamStore minus = theta.snapshot();
      minus.axpy(-eps, total);
      GradMap gp = mean_loss_grad(model, plus, city, episode.support(), 0, opts);
      GradMap gm = mean_loss_grad(model, minus, city, episode.support(), 0, opts);
      // total -= alpha * (gp - gm) / (2 eps)
      grad_axpy(total, -cfg.alpha / (2.0 * eps), gp);
      grad_axpy(total, cfg.alpha / (2.0 * eps), gm);
    }
  }

  out.theta_next = theta.snapshot();
  if (cfg.plain_sgd) {
    sgd_step(out.theta_next, total, cfg.beta);
  } else {
    adam_step(out.theta_next, total, outer_state, cfg.beta);
  }
  return out;
}

HyperUpdateResult hyper_update(const AppraisalModel& model, const WeightGeneratingNetwork& wgn,
                               const ParamStore& wgn_params, const ParamStore& theta_next,
                               const PreparedCity& target,
                               std::span<const std::size_t> target_support,
                               std::span<const std::size_t> target_query,
                               const std::vector<GradMap>& instance_grads,
                               std::span<const WgnInput> wgn_inputs, const TrainerConfig& cfg,
                               AdamState& wgn_state, const ReplayOptions& target_opts) {
  if (target_support.empty() || target_query.empty()) {
    throw NumericalError("hyper_update: empty target support or query set");
  }
  if (instance_grads.size() != wgn_inputs.size()) {
    throw ContractError("hyper_update: instance gradients and WGN inputs disagree");
  }

  // (1) adapt theta_next on the target support (SGD, rate gamma1)
  ParamStore theta_pp = theta_next.snapshot();
  sgd_step(theta_pp, mean_loss_grad(model, theta_next, target, target_support, 0, target_opts),
           cfg.gamma1);

  // (2) gradient of the target query loss at the adapted parameters; the
  // support prefix rebuilds the state trajectory
  std::vector<std::size_t> replay_ids(target_support.begin(), target_support.end());
  replay_ids.insert(replay_ids.end(), target_query.begin(), target_query.end());
  GradMap g_tgt = mean_loss_grad(model, theta_pp, target, replay_ids, target_support.size(),
                                 target_opts);

  // (3) first-order dL/dlambda_n = -beta <g_n, g_tgt>
  HyperUpdateResult out;
  out.dl_dlambda.reserve(instance_grads.size());
  for (const GradMap& g_n : instance_grads) {
    out.dl_dlambda.push_back(-cfg.beta * grad_dot(g_n, g_tgt));
  }

  // (4) chain into the WGN parameters through a fresh tape
  Tape tape;
  ParamBinding bind(tape, wgn_params);
  std::vector<Var> terms;
  terms.reserve(wgn_inputs.size());
  for (std::size_t n = 0; n < wgn_inputs.size(); ++n) {
    terms.push_back(tape.scale(wgn.forward(tape, bind, wgn_inputs[n]), out.dl_dlambda[n]));
  }
  Var pseudo_loss = terms.size() == 1 ? terms[0] : tape.add_n(terms);
  GradMap grad = tape.backward(pseudo_loss);
  if (!grad_all_finite(grad)) throw NumericalError("hyper_update: non-finite WGN gradient");

  out.wgn_next = wgn_params.snapshot();
  if (cfg.plain_sgd) {
    sgd_step(out.wgn_next, grad, cfg.gamma2);
  } else {
    adam_step(out.wgn_next, grad, wgn_state, cfg.gamma2);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Orchestration

namespace {

WgnInput make_wgn_input(const PreparedCity& city, std::size_t city_index,
                        const TransactionEvent& ev, const TrainerConfig& cfg) {
  WgnInput in;
  in.city_index = city_index;
  const Community& c = city.graph.community(ev.community_id);
  in.z = cfg.mask_community ? std::vector<double>(c.attrs.size(), 0.0) : c.attrs;
  in.x = cfg.mask_estate ? std::vector<double>(ev.estate_attrs.size(), 0.0) : ev.estate_attrs;
  in.y = cfg.mask_price ? 0.0 : ev.unit_price;
  return in;
}

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sd_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double acc = 0.0;
  for (double x : v) acc += (x - m) * (x - m);
  return std::sqrt(acc / static_cast<double>(v.size() - 1));
}

}  // namespace

TrainResult meta_train(const AppraisalModel& model,
                       std::span<const PreparedCity* const> sources, const PreparedCity& target,
                       const TrainerConfig& cfg) {
  cfg.validate();
  if (sources.empty()) throw ContractError("meta_train: need at least one source city");
  if (target.n_train == 0) throw ContractError("meta_train: target has no training events");

  std::mt19937_64 rng(cfg.seed);
  TrainResult result;
  result.theta = model.init_params(derive_seed(cfg.seed, 0x7e7a));

  const WeightGeneratingNetwork wgn(sources.size(), target.z_dim, target.x_dim);
  result.wgn = wgn.init_params(derive_seed(cfg.seed, 0x579e));

  ReplayOptions source_opts;
  source_opts.detach_depth = cfg.detach_depth;
  source_opts.mask_estate = cfg.mask_estate;
  source_opts.mask_community = cfg.mask_community;
  source_opts.mask_price = cfg.mask_price;
  source_opts.probe = cfg.probe;
  ReplayOptions target_opts;  // masks never apply to the target city
  target_opts.detach_depth = cfg.detach_depth;
  target_opts.probe = cfg.probe;

  // Chronological split of the target training events for the hyper-loop;
  // the split point is re-drawn every iteration so the gamma1 step does not
  // overfit one fixed support prefix.
  const std::vector<std::size_t> target_train = target.train_ids();
  auto draw_target_split = [&](std::mt19937_64& r)
      -> std::pair<std::span<const std::size_t>, std::span<const std::size_t>> {
    if (target_train.size() < 2) return {{}, {}};
    const double lo = std::max(0.15, cfg.support_fraction - 0.2);
    const double hi = std::min(0.85, cfg.support_fraction + 0.2);
    const double frac = std::uniform_real_distribution<double>(lo, hi)(r);
    const std::size_t n = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(static_cast<double>(target_train.size()) * frac)),
        1, target_train.size() - 1);
    return {std::span(target_train).first(n),
            std::span(target_train).subspan(n, std::min(target_train.size() - n,
                                                        cfg.query_batch_cap))};
  };

  AdamState outer_state;
  AdamState wgn_state;
  std::vector<std::size_t> order(sources.size());
  std::iota(order.begin(), order.end(), 0);

  std::size_t iterations = cfg.iterations_per_epoch;
  if (iterations == 0) {
    double mean_train = 0.0;
    for (const PreparedCity* c : sources) mean_train += static_cast<double>(c->n_train);
    mean_train /= static_cast<double>(sources.size());
    iterations = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::lround(
               mean_train / (2.0 * static_cast<double>(cfg.episode_window_cap)))));
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t iter = 0; iter < iterations; ++iter) {
      // sample a batch of source cities without replacement
      for (std::size_t i = order.size(); i > 1; --i) {
        std::uniform_int_distribution<std::size_t> u(0, i - 1);
        std::swap(order[i - 1], order[u(rng)]);
      }
      const std::size_t batch = std::min(cfg.cities_per_iteration, order.size());

      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t ci = order[b];
        const PreparedCity& city = *sources[ci];
        try {
          Episode ep = make_episode(city, ci, cfg.support_fraction, cfg.episode_window_cap,
                                    cfg.query_batch_cap, rng);
          ParamStore theta_prime =
              inner_adapt(model, result.theta, city, ep.support(), cfg.alpha, source_opts);

          std::vector<WgnInput> inputs;
          inputs.reserve(ep.query().size());
          for (std::size_t id : ep.query()) {
            inputs.push_back(make_wgn_input(city, ci, city.graph.events()[id], cfg));
          }
          std::vector<double> lambdas;
          if (cfg.reweight) {
            lambdas = gen_instance_weights(wgn, result.wgn, inputs, cfg.probe);
          } else {
            lambdas.assign(inputs.size(), 1.0);
          }

          OuterUpdateResult outer = outer_update(model, result.theta, theta_prime, city, ep,
                                                 lambdas, cfg, outer_state, source_opts);
          result.theta = std::move(outer.theta_next);

          if (cfg.reweight) {
            auto [tgt_support, tgt_query] = draw_target_split(rng);
            if (tgt_support.empty() || tgt_query.empty()) {
              result.warnings.push_back("epoch " + std::to_string(epoch) +
                                        ": target split too small, hyper-loop skipped");
            } else {
              HyperUpdateResult hyper =
                  hyper_update(model, wgn, result.wgn, result.theta, target, tgt_support,
                               tgt_query, outer.instance_grads, inputs, cfg, wgn_state,
                               target_opts);
              result.wgn = std::move(hyper.wgn_next);
            }
          }

          result.weight_log.push_back(
              {epoch, city.city_id, mean_of(lambdas), sd_of(lambdas)});
        } catch (const NumericalError& err) {
          result.warnings.push_back("epoch " + std::to_string(epoch) + ", city " +
                                    std::to_string(city.city_id) + ": " + err.what());
          std::fprintf(stderr, "[meta_train] %s\n", result.warnings.back().c_str());
        }
      }
    }
  }

  // Final per-city weight sweep with the trained WGN (every source city,
  // strided to at most 512 instances each).
  for (std::size_t ci = 0; ci < sources.size(); ++ci) {
    const PreparedCity& city = *sources[ci];
    const auto& events = city.graph.events();
    if (events.empty()) continue;
    const std::size_t stride = std::max<std::size_t>(1, events.size() / 512);
    std::vector<WgnInput> inputs;
    for (std::size_t id = 0; id < events.size(); id += stride) {
      inputs.push_back(make_wgn_input(city, ci, events[id], cfg));
    }
    std::vector<double> lambdas = cfg.reweight
                                      ? gen_instance_weights(wgn, result.wgn, inputs, nullptr)
                                      : std::vector<double>(inputs.size(), 1.0);
    result.final_mean_lambda_by_city[city.city_id] = mean_of(lambdas);
  }
  return result;
}

AdaptResult adapt_to_target(const AppraisalModel& model, const ParamStore& theta_final,
                            const PreparedCity& target, std::size_t max_steps, double alpha,
                            int detach_depth) {
  const std::vector<std::size_t> train = target.train_ids();
  ReplayOptions opts;
  opts.detach_depth = detach_depth;

  AdaptResult out;
  out.theta = theta_final.snapshot();
  if (train.empty()) return out;  // nothing to adapt on; val curve stays empty

  const std::size_t n_val = std::max<std::size_t>(1, train.size() / 5);
  const std::size_t n_fit = train.size() - n_val;

  auto val_mae = [&](const ParamStore& params) {
    std::vector<double> preds =
        replay_predict_values(model, target, params, train, n_fit, opts);
    double acc = 0.0;
    for (std::size_t k = 0; k < preds.size(); ++k) {
      acc += std::fabs(preds[k] - target.graph.events()[train[n_fit + k]].unit_price);
    }
    return acc / static_cast<double>(preds.size());
  };

  std::span<const std::size_t> fit(train.data(), n_fit);
  ParamStore cur = theta_final.snapshot();
  out.val_mae_per_step.push_back(val_mae(cur));
  std::size_t best_step = 0;
  double best_mae = out.val_mae_per_step[0];

  if (n_fit > 0) {
    for (std::size_t k = 1; k <= max_steps; ++k) {
      sgd_step(cur, mean_loss_grad(model, cur, target, fit, 0, opts), alpha);
      const double mae = val_mae(cur);
      out.val_mae_per_step.push_back(mae);
      if (mae < best_mae) {
        best_mae = mae;
        best_step = k;
      }
    }
  }

  out.chosen_steps = best_step;
  for (std::size_t k = 0; k < best_step; ++k) {
    sgd_step(out.theta, mean_loss_grad(model, out.theta, target, train, 0, opts), alpha);
  }
  return out;
}

}  // namespace mtr
