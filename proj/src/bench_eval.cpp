#include "mtr/bench_eval.hpp"

#include <algorithm>
#include <chrono>
#include <functional>
#include <memory>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mtr {

MetricsReport metrics(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size()) {
    throw ContractError("metrics: length mismatch " + std::to_string(y_true.size()) + " vs " +
                        std::to_string(y_pred.size()));
  }
  if (y_true.empty()) throw ContractError("metrics: empty input");
  MetricsReport r;
  r.n_test = y_true.size();
  double se = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    if (!(y_true[i] > 0.0)) {
      throw ContractError("metrics: y_true[" + std::to_string(i) + "] = " +
                          std::to_string(y_true[i]) + " is not positive");
    }
    const double d = y_pred[i] - y_true[i];
    r.mae += std::fabs(d);
    r.mape_percent += std::fabs(d) / y_true[i];
    se += d * d;
  }
  const double n = static_cast<double>(y_true.size());
  r.mae /= n;
  r.mape_percent = 100.0 * r.mape_percent / n;
  r.rmse = std::sqrt(se / n);
  return r;
}

// ---------------------------------------------------------------------------
// HA

double ha_baseline(const PreparedCity& target, std::span<const std::size_t> train_ids,
                   const AppraisalQuery& query) {
  if (train_ids.empty()) throw ContractError("ha_baseline: empty training set");
  const auto& events = target.graph.events();
  double comm_sum = 0.0;
  std::size_t comm_n = 0;
  double global_sum = 0.0;
  for (std::size_t id : train_ids) {
    const TransactionEvent& e = events[id];
    global_sum += e.unit_price;
    if (e.community_id == query.community_id && e.time < query.query_time) {
      comm_sum += e.unit_price;
      ++comm_n;
    }
  }
  if (comm_n > 0) return comm_sum / static_cast<double>(comm_n);
  return global_sum / static_cast<double>(train_ids.size());
}

// ---------------------------------------------------------------------------
// Ridge

namespace {

std::vector<double> ridge_features(const PreparedCity& city, std::span<const double> x,
                                   int community_id) {
  const Community& c = city.graph.community(community_id);
  std::vector<double> row;
  row.reserve(1 + x.size() + c.attrs.size());
  row.push_back(1.0);
  row.insert(row.end(), x.begin(), x.end());
  row.insert(row.end(), c.attrs.begin(), c.attrs.end());
  return row;
}

}  // namespace

RidgeModel fit_ridge(const PreparedCity& city, std::span<const std::size_t> train_ids,
                     double l2) {
  if (l2 < 0) throw ContractError("ridge: l2 must be >= 0");
  if (train_ids.empty()) throw ContractError("ridge: empty training set");
  const auto& events = city.graph.events();
  const std::size_t d = 1 + city.x_dim + city.z_dim;

  std::vector<std::vector<double>> a(d, std::vector<double>(d + 1, 0.0));
  for (std::size_t id : train_ids) {
    const TransactionEvent& e = events[id];
    const std::vector<double> row = ridge_features(city, e.estate_attrs, e.community_id);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) a[i][j] += row[i] * row[j];
      a[i][d] += row[i] * e.unit_price;
    }
  }
  for (std::size_t i = 1; i < d; ++i) a[i][i] += l2;  // the intercept is unpenalized

  // Gauss-Jordan with partial pivoting.
  for (std::size_t col = 0; col < d; ++col) {
    std::size_t piv = col;
    for (std::size_t r = col + 1; r < d; ++r) {
      if (std::fabs(a[r][col]) > std::fabs(a[piv][col])) piv = r;
    }
    std::swap(a[col], a[piv]);
    if (std::fabs(a[col][col]) < 1e-10) {
      throw NumericalError(
          "ridge: normal matrix is singular; set l2 > 0 to regularize the fit");
    }
    for (std::size_t r = 0; r < d; ++r) {
      if (r == col) continue;
      const double f = a[r][col] / a[col][col];
      for (std::size_t j = col; j <= d; ++j) a[r][j] -= f * a[col][j];
    }
  }
  RidgeModel m;
  m.intercept = a[0][d] / a[0][0];
  m.weights.resize(d - 1);
  for (std::size_t i = 1; i < d; ++i) m.weights[i - 1] = a[i][d] / a[i][i];
  return m;
}

double ridge_predict(const RidgeModel& model, const PreparedCity& city,
                     const AppraisalQuery& query) {
  const std::vector<double> row = ridge_features(city, query.estate_attrs, query.community_id);
  double y = model.intercept;
  for (std::size_t i = 0; i < model.weights.size(); ++i) y += model.weights[i] * row[i + 1];
  return y;
}

// ---------------------------------------------------------------------------
// MLP baseline model

ParamStore MlpModel::init_params(std::uint64_t seed) const {
  std::mt19937_64 rng(seed);
  // unit-range entries; every layer consumes a 1/sqrt(d)-scaled input
  auto mat = [&rng](std::size_t r, std::size_t c) {
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.data) v = u(rng);
    return t;
  };
  const std::size_t in = x_dim_ + z_dim_ + 1;
  ParamStore p;
  p.add("mlp.W1", mat(hidden_, in));
  p.add("mlp.b1", Tensor::zeros({hidden_}));
  p.add("mlp.W2", mat(hidden_, hidden_));
  p.add("mlp.b2", Tensor::zeros({hidden_}));
  p.add("mlp.W3", mat(1, hidden_));
  p.add("mlp.b3", Tensor::vector({output_bias_init_}));
  return p;
}

std::vector<Var> MlpModel::replay_predict(Tape& tape, ParamBinding& params,
                                          const PreparedCity& city,
                                          std::span<const std::size_t> events,
                                          std::size_t predict_begin,
                                          const ReplayOptions& opts) const {
  std::vector<Var> preds;
  preds.reserve(events.size() - std::min(predict_begin, events.size()));
  for (std::size_t k = predict_begin; k < events.size(); ++k) {
    const TransactionEvent& ev = city.graph.events()[events[k]];
    if (opts.prediction_override) {
      preds.push_back(tape.input(Tensor::scalar((*opts.prediction_override)[preds.size()])));
      continue;
    }
    const Community& c = city.graph.community(ev.community_id);
    std::vector<double> in;
    in.reserve(x_dim_ + z_dim_ + 1);
    if (opts.mask_estate) {
      in.insert(in.end(), x_dim_, 0.0);
    } else {
      in.insert(in.end(), ev.estate_attrs.begin(), ev.estate_attrs.end());
    }
    if (opts.mask_community) {
      in.insert(in.end(), z_dim_, 0.0);
    } else {
      in.insert(in.end(), c.attrs.begin(), c.attrs.end());
    }
    in.push_back(city.graph.time_scaled(ev.time));
    Var v = tape.input(Tensor::vector(std::move(in)));
    auto layer = [&](const char* w, const char* b, Var x) {
      const double d = static_cast<double>(tape.value(x).numel());
      return tape.add(tape.matvec(params(w), tape.scale(x, 1.0 / std::sqrt(d))), params(b));
    };
    Var h1 = tape.relu(layer("mlp.W1", "mlp.b1", v));
    Var h2 = tape.relu(layer("mlp.W2", "mlp.b2", h1));
    preds.push_back(tape.sum(layer("mlp.W3", "mlp.b3", h2)));
  }
  return preds;
}

// ---------------------------------------------------------------------------
// Benchmark orchestration

PreparedBenchmark prepare_benchmark(const Benchmark& b) {
  PreparedBenchmark pb;
  pb.config = b.config;
  for (const CityDataset& src : b.sources) {
    pb.sources.push_back(prepare_city(src, src.events.size(), b.config.epsilon_m));
  }
  pb.target = prepare_city(b.target, b.target.n_train, b.config.epsilon_m);
  return pb;
}

std::vector<const PreparedCity*> PreparedBenchmark::source_ptrs(
    std::optional<int> drop_city) const {
  std::vector<const PreparedCity*> out;
  for (const PreparedCity& c : sources) {
    if (drop_city && c.city_id == *drop_city) continue;
    out.push_back(&c);
  }
  if (drop_city && out.size() == sources.size()) {
    throw ConfigError("drop_source: no source city with id " + std::to_string(*drop_city));
  }
  return out;
}

std::string model_kind_name(ModelKind kind) {
  switch (kind) {
    case ModelKind::kMetaTransfer: return "metatransfer";
    case ModelKind::kMamlMttgn: return "maml_mttgn";
    case ModelKind::kFtMttgn: return "ft_mttgn";
    case ModelKind::kMamlMlp: return "maml_mlp";
    case ModelKind::kFtMlp: return "ft_mlp";
    case ModelKind::kMlp: return "mlp";
    case ModelKind::kNoTransfer: return "no_transfer";
    case ModelKind::kHa: return "ha";
    case ModelKind::kRidge: return "ridge";
  }
  return "?";
}

MetricsReport evaluate_on_target(const AppraisalModel& model, const ParamStore& params,
                                 const PreparedCity& target, const std::string& model_name) {
  std::vector<std::size_t> all_ids(target.graph.events().size());
  std::iota(all_ids.begin(), all_ids.end(), 0);
  ReplayOptions opts;
  std::vector<double> preds =
      replay_predict_values(model, target, params, all_ids, target.n_train, opts);
  std::vector<double> truth;
  truth.reserve(preds.size());
  for (std::size_t k = target.n_train; k < all_ids.size(); ++k) {
    truth.push_back(target.graph.events()[k].unit_price);
  }
  MetricsReport r = metrics(truth, preds);
  r.model = model_name;
  return r;
}

namespace {

// FT-* pretraining: per epoch, one adaptive-optimizer step per source city on
// a sampled contiguous window (the pooled multi-city training diet).
ParamStore ft_pretrain(const AppraisalModel& model,
                       std::span<const PreparedCity* const> sources, const RunSettings& s) {
  ParamStore theta = model.init_params(derive_seed(s.trainer.seed, 0xf7));
  std::mt19937_64 rng(derive_seed(s.trainer.seed, 0xf8));
  AdamState opt;
  ReplayOptions opts;
  opts.detach_depth = s.trainer.detach_depth;
  for (std::size_t epoch = 0; epoch < s.trainer.epochs; ++epoch) {
    for (const PreparedCity* city : sources) {
      const std::size_t n = city->n_train;
      if (n < 2) continue;
      const std::size_t window = std::min(n, s.trainer.episode_window_cap);
      const std::size_t start =
          n == window ? 0 : std::uniform_int_distribution<std::size_t>(0, n - window)(rng);
      std::vector<std::size_t> ids(window);
      std::iota(ids.begin(), ids.end(), start);
      Tape tape;
      ParamBinding bind(tape, theta);
      Var loss = replay_mean_loss(model, tape, bind, *city, ids, 0, opts);
      if (!std::isfinite(tape.value(loss).value())) continue;
      adam_step(theta, tape.backward(loss), opt, s.pretrain_rate);
    }
  }
  return theta;
}

MetricsReport eval_per_query(const PreparedCity& target,
                             const std::function<double(const AppraisalQuery&)>& predict,
                             const std::string& name) {
  std::vector<double> truth, preds;
  for (std::size_t id : target.test_ids()) {
    const TransactionEvent& e = target.graph.events()[id];
    AppraisalQuery q{e.estate_attrs, e.community_id, e.time};
    preds.push_back(predict(q));
    truth.push_back(e.unit_price);
  }
  MetricsReport r = metrics(truth, preds);
  r.model = name;
  return r;
}

}  // namespace

namespace {

double train_price_level(const PreparedCity& target) {
  const auto ids = target.train_ids();
  if (ids.empty()) return 0.0;
  double acc = 0.0;
  for (std::size_t id : ids) acc += target.graph.events()[id].unit_price;
  return acc / static_cast<double>(ids.size());
}

}  // namespace

RunOutcome run_model(ModelKind kind, const PreparedBenchmark& bench,
                     const RunSettings& settings) {
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out;
  const PreparedCity& target = bench.target;
  auto train_ids = target.train_ids();
  const double level = train_price_level(target);

  MttgnDims dims = settings.dims;
  dims.x_dim = target.x_dim;
  dims.z_dim = target.z_dim;

  switch (kind) {
    case ModelKind::kHa: {
      out.report = eval_per_query(
          target, [&](const AppraisalQuery& q) { return ha_baseline(target, train_ids, q); },
          "ha");
      break;
    }
    case ModelKind::kRidge: {
      RidgeModel rm = fit_ridge(target, train_ids, settings.ridge_l2);
      out.report = eval_per_query(
          target, [&](const AppraisalQuery& q) { return ridge_predict(rm, target, q); },
          "ridge");
      break;
    }
    case ModelKind::kMlp: {
      MlpModel model(target.x_dim, target.z_dim, 64, level);
      ParamStore init = model.init_params(derive_seed(settings.trainer.seed, 0xa1));
      auto adapted = adapt_to_target(model, init, target, settings.adapt_max_steps,
                                     settings.trainer.alpha, settings.trainer.detach_depth);
      out.report = evaluate_on_target(model, adapted.theta, target, "mlp");
      break;
    }
    case ModelKind::kNoTransfer: {
      MttgnModel model(dims, true, true, level);
      ParamStore init = model.init_params(derive_seed(settings.trainer.seed, 0xa2));
      auto adapted = adapt_to_target(model, init, target, settings.adapt_max_steps,
                                     settings.trainer.alpha, settings.trainer.detach_depth);
      out.report = evaluate_on_target(model, adapted.theta, target, "no_transfer");
      break;
    }
    case ModelKind::kFtMlp:
    case ModelKind::kFtMttgn: {
      auto sources = bench.source_ptrs();
      std::unique_ptr<AppraisalModel> model;
      if (kind == ModelKind::kFtMlp) {
        model = std::make_unique<MlpModel>(target.x_dim, target.z_dim, 64, level);
      } else {
        model = std::make_unique<MttgnModel>(dims, true, true, level);
      }
      ParamStore theta = ft_pretrain(*model, sources, settings);
      auto adapted = adapt_to_target(*model, theta, target, settings.adapt_max_steps,
                                     settings.trainer.alpha, settings.trainer.detach_depth);
      out.report = evaluate_on_target(*model, adapted.theta, target, model_kind_name(kind));
      break;
    }
    case ModelKind::kMamlMlp:
    case ModelKind::kMamlMttgn:
    case ModelKind::kMetaTransfer: {
      auto sources = bench.source_ptrs();
      std::unique_ptr<AppraisalModel> model;
      if (kind == ModelKind::kMamlMlp) {
        model = std::make_unique<MlpModel>(target.x_dim, target.z_dim, 64, level);
      } else {
        model = std::make_unique<MttgnModel>(dims, true, true, level);
      }
      TrainerConfig cfg = settings.trainer;
      cfg.reweight = kind == ModelKind::kMetaTransfer;
      out.train = meta_train(*model, sources, target, cfg);
      auto adapted = adapt_to_target(*model, out.train.theta, target,
                                     settings.adapt_max_steps, cfg.alpha, cfg.detach_depth);
      out.report = evaluate_on_target(*model, adapted.theta, target, model_kind_name(kind));
      break;
    }
  }
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Ablations

std::string variant_name(AblationVariant v) {
  switch (v) {
    case AblationVariant::kFull: return "full";
    case AblationVariant::kNoTgn: return "no_tgn";
    case AblationVariant::kNoHmtl: return "no_hmtl";
    case AblationVariant::kNoReweight: return "no_reweight";
    case AblationVariant::kNoTransfer: return "no_transfer";
  }
  return "?";
}

std::string mask_name(MaskKind m) {
  switch (m) {
    case MaskKind::kNone: return "none";
    case MaskKind::kEstate: return "estate";
    case MaskKind::kCommunity: return "community";
    case MaskKind::kPrice: return "price";
  }
  return "?";
}

std::string replace_name(ReplaceKind r) {
  switch (r) {
    case ReplaceKind::kNone: return "none";
    case ReplaceKind::kTgn: return "tgn";
    case ReplaceKind::kHyper: return "hyper";
    case ReplaceKind::kFi: return "fi";
  }
  return "?";
}

AblationVariant variant_from_name(const std::string& s) {
  for (auto v : {AblationVariant::kFull, AblationVariant::kNoTgn, AblationVariant::kNoHmtl,
                 AblationVariant::kNoReweight, AblationVariant::kNoTransfer}) {
    if (variant_name(v) == s) return v;
  }
  throw ConfigError("unknown ablation variant '" + s + "'");
}

MaskKind mask_from_name(const std::string& s) {
  for (auto m : {MaskKind::kNone, MaskKind::kEstate, MaskKind::kCommunity, MaskKind::kPrice}) {
    if (mask_name(m) == s) return m;
  }
  throw ConfigError("unknown mask '" + s + "'");
}

ReplaceKind replace_from_name(const std::string& s) {
  for (auto r : {ReplaceKind::kNone, ReplaceKind::kTgn, ReplaceKind::kHyper, ReplaceKind::kFi}) {
    if (replace_name(r) == s) return r;
  }
  throw ConfigError("unknown replacement '" + s + "'");
}

void AblationSpec::validate() const {
  if (variant == AblationVariant::kNoTransfer) {
    if (mask != MaskKind::kNone || replace != ReplaceKind::kNone || drop_source) {
      throw ConfigError(
          "ablation: no_transfer has no source-city training; masks, parameter "
          "replacement and source drops do not apply");
    }
  }
}

std::string AblationSpec::label() const {
  std::ostringstream os;
  os << variant_name(variant);
  if (mask != MaskKind::kNone) os << "+mask_" << mask_name(mask);
  if (replace != ReplaceKind::kNone) os << "+repl_" << replace_name(replace);
  if (drop_source) os << "+drop_" << *drop_source;
  return os.str();
}

namespace {

void reinit_group(ParamStore& params, const std::string& prefix, const ParamStore& fresh) {
  for (auto& [name, tensor] : params.entries_mut()) {
    if (name.rfind(prefix, 0) == 0) tensor = fresh.get(name);
  }
}

}  // namespace

RunOutcome run_ablation(const AblationSpec& spec, const PreparedBenchmark& bench,
                        const RunSettings& settings) {
  spec.validate();
  const auto t0 = std::chrono::steady_clock::now();
  RunOutcome out;
  const PreparedCity& target = bench.target;

  MttgnDims dims = settings.dims;
  dims.x_dim = target.x_dim;
  dims.z_dim = target.z_dim;

  const double level = train_price_level(target);
  if (spec.variant == AblationVariant::kNoTransfer) {
    MttgnModel model(dims, true, true, level);
    ParamStore init = model.init_params(derive_seed(settings.trainer.seed, 0xa2));
    auto adapted = adapt_to_target(model, init, target, settings.adapt_max_steps,
                                   settings.trainer.alpha, settings.trainer.detach_depth);
    out.report = evaluate_on_target(model, adapted.theta, target, "mttgn");
  } else {
    MttgnModel model(dims, /*use_tgn=*/spec.variant != AblationVariant::kNoTgn,
                     /*use_hyper=*/spec.variant != AblationVariant::kNoHmtl, level);
    TrainerConfig cfg = settings.trainer;
    cfg.reweight = spec.variant != AblationVariant::kNoReweight;
    cfg.mask_estate = spec.mask == MaskKind::kEstate;
    cfg.mask_community = spec.mask == MaskKind::kCommunity;
    cfg.mask_price = spec.mask == MaskKind::kPrice;

    auto sources = bench.source_ptrs(spec.drop_source);
    out.train = meta_train(model, sources, target, cfg);

    ParamStore theta = out.train.theta;
    if (spec.replace != ReplaceKind::kNone) {
      const ParamStore fresh = model.init_params(derive_seed(cfg.seed, 0x5e9f));
      switch (spec.replace) {
        case ReplaceKind::kTgn: reinit_group(theta, "tgn.", fresh); break;
        case ReplaceKind::kHyper: reinit_group(theta, "hyper.", fresh); break;
        case ReplaceKind::kFi: reinit_group(theta, "fi.", fresh); break;
        case ReplaceKind::kNone: break;
      }
    }
    auto adapted = adapt_to_target(model, theta, target, settings.adapt_max_steps, cfg.alpha,
                                   cfg.detach_depth);
    out.report = evaluate_on_target(model, adapted.theta, target, "mttgn");
  }
  out.report.model = "metatransfer_ablation";
  out.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

// ---------------------------------------------------------------------------
// Latency

LatencyReport latency_probe(const MttgnModel& model, const ParamStore& params,
                            const PreparedCity& target, std::size_t n_queries,
                            std::uint64_t seed) {
  auto train_ids = target.train_ids();
  StateStore store = model.build_states(params, target, train_ids);
  const auto test = target.test_ids();
  if (test.empty()) throw ContractError("latency_probe: no test events to sample queries from");
  std::mt19937_64 rng(seed);

  std::vector<double> samples;
  samples.reserve(n_queries);
  for (std::size_t q = 0; q < n_queries; ++q) {
    const TransactionEvent& e =
        target.graph.events()[test[rng() % test.size()]];
    AppraisalQuery query{e.estate_attrs, e.community_id, e.time};
    const auto a = std::chrono::steady_clock::now();
    volatile double y = model.appraise_value(params, target, store, query);
    (void)y;
    const auto b = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::milli>(b - a).count());
  }
  LatencyReport r;
  r.n_queries = samples.size();
  const double mean = std::accumulate(samples.begin(), samples.end(), 0.0) /
                      static_cast<double>(samples.size());
  r.mean_ms = mean;
  if (samples.size() > 1) {
    double acc = 0;
    for (double s : samples) acc += (s - mean) * (s - mean);
    r.sd_ms = std::sqrt(acc / static_cast<double>(samples.size() - 1));
  }
  return r;
}

// ---------------------------------------------------------------------------
// results.csv

std::string result_csv_header() {
  return "model,variant,mask,replace,drop_source,n_train,seed,mae,mape,rmse,wall_seconds";
}

std::string result_csv_line(const ResultRow& row) {
  std::ostringstream os;
  os << row.model << ',' << row.variant << ',' << row.mask << ',' << row.replace << ','
     << row.drop_source << ',' << row.n_train << ',' << row.seed << ','
     << format_double(row.mae) << ',' << format_double(row.mape) << ','
     << format_double(row.rmse) << ',' << format_double(row.wall_seconds);
  return os.str();
}

}  // namespace mtr
