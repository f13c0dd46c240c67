#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "mtr/checkpoint.hpp"
#include "mtr/mttgn.hpp"
#include "test_support.hpp"

using namespace mtr;
using namespace mtr::testing;

namespace {

Community comm(int id, double lat, double lon, std::vector<double> z) {
  Community c;
  c.id = id;
  c.lat = lat;
  c.lon = lon;
  c.attrs = std::move(z);
  return c;
}

TransactionEvent event(std::vector<double> x, int community_id, std::int64_t t, double y) {
  TransactionEvent e;
  e.estate_attrs = std::move(x);
  e.community_id = community_id;
  e.time = t;
  e.unit_price = y;
  return e;
}

// PreparedCity without any standardization; toy tests want raw numbers.
PreparedCity make_prepared(std::vector<Community> cs, std::vector<TransactionEvent> evs,
                           double epsilon_m, std::size_t n_train) {
  PreparedCity pc;
  pc.city_id = 0;
  pc.x_dim = cs.empty() || evs.empty() ? 1 : evs[0].estate_attrs.size();
  pc.z_dim = cs.empty() ? 1 : cs[0].attrs.size();
  pc.n_train = n_train;
  pc.graph = TemporalEventGraph::build(std::move(cs), std::move(evs), epsilon_m);
  return pc;
}

MttgnDims toy_dims() {
  MttgnDims d;
  d.x_dim = 3;
  d.z_dim = 2;
  d.d_phi = 2;
  d.h_dim = 4;
  d.f_h1 = 4;
  d.f_h2 = 3;
  d.hyper_h1 = 3;
  d.hyper_h2 = 2;
  return d;
}

MttgnDims scalar_dims() {
  MttgnDims d;
  d.x_dim = 1;
  d.z_dim = 1;
  d.d_phi = 1;
  d.h_dim = 1;
  d.f_h1 = 1;
  d.f_h2 = 1;
  d.hyper_h1 = 1;
  d.hyper_h2 = 1;
  return d;
}

void zero_params(ParamStore& p) {
  for (auto& [name, t] : p.entries_mut()) std::fill(t.data.begin(), t.data.end(), 0.0);
}

void randomize_params(ParamStore& p, std::mt19937_64& rng, double scale = 0.4) {
  for (auto& [name, t] : p.entries_mut()) {
    if (name == "tgn.time.freq") continue;  // keep sane frequencies
    for (double& v : t.data) v = urand(rng, -scale, scale);
  }
}

// Forces positive weights along the state-to-prediction path (small GRU
// input weights, positive candidate bias, positive aggregation/head layers)
// so states stay positive and no ReLU in that path goes dead. Tests that
// probe history-dependence need a structurally live network.
void keep_paths_alive(ParamStore& p) {
  auto fill = [](Tensor& t, double base, double step, int mod) {
    for (std::size_t i = 0; i < t.data.size(); ++i) {
      t.data[i] = base + step * static_cast<double>(i % static_cast<std::size_t>(mod));
    }
  };
  for (auto& [name, t] : p.entries_mut()) {
    if (name.starts_with("tgn.gru.W") || name.starts_with("tgn.gru.U")) {
      fill(t, 0.05, 0.01, 3);
    } else if (name == "tgn.gru.bh") {
      fill(t, 0.8, 0.0, 1);
    } else if (name == "tgn.gru.bz" || name == "tgn.gru.br") {
      fill(t, 0.0, 0.0, 1);
    } else if (name == "tgn.attn.W3") {
      fill(t, 0.4, 0.05, 5);
    } else if (name.starts_with("fi.W") ||
               (name.starts_with("hyper.") && name.find(".W", 6) != std::string::npos)) {
      fill(t, 0.3, 0.04, 5);
    } else if (name.ends_with("b1") || name.ends_with("b2")) {
      fill(t, 0.3, 0.03, 4);
    }
  }
}

// Hand-rolled scalar (dimension-1) model: forward of the whole network with
// plain doubles, independent of the tape machinery. One community only, so
// the attention softmax degenerates to weight 1 on the self-loop.
struct ScalarOracle {
  const ParamStore& p;
  double epoch, horizon;

  double get(const std::string& n) const { return p.get(n).data[0]; }
  double getv(const std::string& n, std::size_t i) const { return p.get(n).data[i]; }

  static double relu(double v) { return v > 0 ? v : 0; }
  static double sigm(double v) { return 1.0 / (1.0 + std::exp(-v)); }

  std::array<double, 3> phi(double dt_seconds) const {
    const double d = dt_seconds / 86'400.0;
    const double w = get("tgn.time.freq");
    return {d, std::cos(w * d), std::sin(w * d)};
  }

  double appraise(double x, double z, double h, double t, double t0) const {
    const double h_hat = relu(get("tgn.attn.W3") * h);
    const double t_scaled = horizon > epoch ? (t - epoch) / (horizon - epoch) : 0.0;
    (void)t0;
    const double fin[4] = {x, z, h_hat, t_scaled};
    double a1 = getv("fi.b1", 0);
    for (int i = 0; i < 4; ++i) {
      a1 += getv("fi.W1", static_cast<std::size_t>(i)) * fin[i] / 2.0;  // 1/sqrt(4)
    }
    const double f1 = relu(a1);
    const double f2 = relu(get("fi.W2") * f1 + get("fi.b2"));
    auto hyper = [&](const std::string& pre) {
      const double u1 = relu(get(pre + "W1") * z + get(pre + "b1"));
      const double u2 = relu(get(pre + "W2") * u1 + get(pre + "b2"));
      return get(pre + "W3") * u2 + get(pre + "b3");
    };
    return hyper("hyper.W.") * f2 + hyper("hyper.b.");
  }

  double evolve(double x, double y, double z, double h, double dt_seconds) const {
    const auto ph = phi(dt_seconds);
    const double gin[6] = {ph[0], ph[1], ph[2], x, y, h};
    double pre = 0;
    for (int i = 0; i < 6; ++i) pre += getv("tgn.gate.W", static_cast<std::size_t>(i)) * gin[i];
    const double gate = std::exp(-relu(pre));
    const double ht = gate * h;
    const double in[3] = {x, y, z};
    auto lin = [&](const std::string& w, const std::string& u, const std::string& b,
                   double hh) {
      double acc = get(b);
      for (int i = 0; i < 3; ++i) acc += getv(w, static_cast<std::size_t>(i)) * in[i];
      return acc + get(u) * hh;
    };
    const double zg = sigm(lin("tgn.gru.Wz", "tgn.gru.Uz", "tgn.gru.bz", ht));
    const double rg = sigm(lin("tgn.gru.Wr", "tgn.gru.Ur", "tgn.gru.br", ht));
    const double cand = std::tanh(lin("tgn.gru.Wh", "tgn.gru.Uh", "tgn.gru.bh", rg * ht));
    return (1 - zg) * ht + zg * cand;
  }
};

}  // namespace

TEST_CASE("time_encode layout and endpoints") {
  MttgnModel model;  // default dims, d_phi = 8
  ParamStore p = model.init_params(1);

  {
    Tape t;
    ParamBinding bind(t, p);
    Var phi = model.time_encode(t, bind, 0.0);
    const auto& v = t.value(phi);
    REQUIRE(v.numel() == 17);  // 2 * 8 + 1
    CHECK(v.data[0] == 0.0);
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(v.data[1 + 2 * k] == 1.0);   // cos 0
      CHECK(v.data[2 + 2 * k] == 0.0);   // sin 0
    }
  }
  {
    ParamStore pz = p.snapshot();
    std::fill(pz.get_mut("tgn.time.freq").data.begin(), pz.get_mut("tgn.time.freq").data.end(),
              0.0);
    Tape t;
    ParamBinding bind(t, pz);
    Var phi = model.time_encode(t, bind, 86'400.0);
    const auto& v = t.value(phi);
    CHECK(v.data[0] == 1.0);  // one day
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(v.data[1 + 2 * k] == 1.0);
      CHECK(v.data[2 + 2 * k] == 0.0);
    }
  }
  {
    Tape t;
    ParamBinding bind(t, p);
    CHECK_THROWS_AS(model.time_encode(t, bind, -1.0), ContractError);
  }
}

TEST_CASE("zero gate matrix leaves the previous state untouched") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(3);
  std::fill(p.get_mut("tgn.gate.W").data.begin(), p.get_mut("tgn.gate.W").data.end(), 0.0);

  Tape t;
  ParamBinding bind(t, p);
  CommunityState st;
  st.h = {0.3, -0.7, 1.1, 0.2};
  st.last_update_time = 0;
  TransactionEvent ev = event({0.1, 0.2, 0.3}, 0, 86'400, 5.0);
  MttgnModel::EvolveTrace trace;
  ReplayOptions opts;
  const std::vector<double> z_attrs = {0.5, -0.5};
  model.evolve_state(t, bind, ev, st, z_attrs, opts, &trace);
  for (double g : t.value(trace.gate).data) CHECK(g == 1.0);  // exp(-relu(0)) = 1
  CHECK(t.value(trace.h_tilde).data == std::vector<double>{0.3, -0.7, 1.1, 0.2});
}

TEST_CASE("gate coordinates stay in (0,1] on random inputs") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  std::mt19937_64 rng(17);
  InvariantProbe probe;
  for (int trial = 0; trial < 30; ++trial) {
    ParamStore p = model.init_params(rng());
    randomize_params(p, rng, 1.0);
    Tape t;
    ParamBinding bind(t, p);
    CommunityState st;
    st.h = {urand(rng, -1, 1), urand(rng, -1, 1), urand(rng, -1, 1), urand(rng, -1, 1)};
    st.last_update_time = 0;
    TransactionEvent ev =
        event({urand(rng, -2, 2), urand(rng, -2, 2), urand(rng, -2, 2)}, 0,
              static_cast<std::int64_t>(rng() % 1'000'000), urand(rng, 0.5, 20.0));
    ReplayOptions opts;
    opts.probe = &probe;
    const std::vector<double> z_attrs = {urand(rng, -1, 1), urand(rng, -1, 1)};
    model.evolve_state(t, bind, ev, st, z_attrs, opts);
  }
  CHECK(probe.n_gates == 30);
  CHECK(probe.gates_in_range());
}

TEST_CASE("out-of-order event is a contract violation") {
  MttgnModel model(toy_dims());
  ParamStore p = model.init_params(3);
  Tape t;
  ParamBinding bind(t, p);
  CommunityState st;
  st.h = {0, 0, 0, 0};
  st.last_update_time = 100;
  ReplayOptions opts;
  TransactionEvent ev = event({0, 0, 0}, 0, 99, 1.0);
  const std::vector<double> z_attrs = {0, 0};
  CHECK_THROWS_AS(model.evolve_state(t, bind, ev, st, z_attrs, opts), ContractError);
}

TEST_CASE("scalar GRU evolution matches the hand-rolled oracle") {
  MttgnModel model(scalar_dims());
  ParamStore p = model.init_params(5);
  std::mt19937_64 rng(23);
  randomize_params(p, rng, 0.8);

  ScalarOracle oracle{p, 0.0, 1.0};
  CommunityState st;
  st.h = {0.4};
  st.last_update_time = 0;

  Tape t;
  ParamBinding bind(t, p);
  TransactionEvent ev = event({0.7}, 0, 86'400 * 3, 6.0);
  ReplayOptions opts;
  const std::vector<double> z_attrs = {-0.3};
  Var h_new = model.evolve_state(t, bind, ev, st, z_attrs, opts);
  const double expect = oracle.evolve(0.7, 6.0, -0.3, 0.4, 86'400.0 * 3);
  CHECK(t.value(h_new).data[0] == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("attention over a single neighbor is the identity weight") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(7);
  std::mt19937_64 rng(29);
  randomize_params(p, rng);

  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5})}, {}, 2000.0, 0);
  StateStore store(pc.graph, dims.h_dim);
  store.at(pc.graph, 0).h = {0.2, -0.4, 0.6, 0.8};

  Tape t;
  ParamBinding bind(t, p);
  AppraisalQuery q{{0.1, 0.2, 0.3}, 0, 1000};
  ReplayOptions opts;
  std::vector<Var> ws;
  Var h_hat = model.refresh_embedding(t, bind, q, store, pc.graph, opts, &ws);
  REQUIRE(ws.size() == 1);
  for (double w : t.value(ws[0]).data) CHECK(w == doctest::Approx(1.0).epsilon(1e-15));

  // h_hat == relu(W3 h_i)
  Tape t2;
  ParamBinding bind2(t2, p);
  Var manual = t2.relu(t2.matvec(bind2("tgn.attn.W3"),
                                 t2.input(Tensor::vector(store.at(pc.graph, 0).h))));
  for (std::size_t i = 0; i < dims.h_dim; ++i) {
    CHECK(t.value(h_hat).data[i] == doctest::Approx(t2.value(manual).data[i]).epsilon(1e-12));
  }
}

TEST_CASE("two identical neighbors split the weight evenly") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(11);
  std::mt19937_64 rng(31);
  randomize_params(p, rng);

  // two communities at identical coordinates -> identical p_ij; states left
  // identical as well
  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5}), comm(1, 30.001, 110, {1.0, 0.0}),
                           comm(2, 29.999, 110, {0.0, 1.0})},
                          {}, 2000.0, 0);
  StateStore store(pc.graph, dims.h_dim);
  for (int id : {0, 1, 2}) store.at(pc.graph, id).h = {0.3, 0.3, -0.2, 0.5};

  // neighbors 1 and 2 of community 0 sit at the same distance with the same
  // state and update time; their weights must match, and per-dimension
  // weights must sum to 1 across all three neighbors.
  Tape t;
  ParamBinding bind(t, p);
  AppraisalQuery q{{0.1, 0.2, 0.3}, 0, 1000};
  ReplayOptions opts;
  InvariantProbe probe;
  opts.probe = &probe;
  std::vector<Var> ws;
  model.refresh_embedding(t, bind, q, store, pc.graph, opts, &ws);
  REQUIRE(ws.size() == 3);  // self + two neighbors
  for (std::size_t d = 0; d < dims.h_dim; ++d) {
    CHECK(t.value(ws[1]).data[d] == doctest::Approx(t.value(ws[2]).data[d]).epsilon(1e-12));
  }
  CHECK(probe.max_attention_sum_dev < 1e-9);
}

TEST_CASE("dimensional attention matches a brute-force softmax oracle") {
  MttgnDims dims = toy_dims();
  dims.h_dim = 2;  // 3 neighbors, dimension 2
  MttgnModel model(dims);
  ParamStore p = model.init_params(13);
  std::mt19937_64 rng(37);
  randomize_params(p, rng, 0.8);

  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5}), comm(1, 30.002, 110, {1.0, 0.0}),
                           comm(2, 30, 110.002, {0.0, 1.0})},
                          {}, 2000.0, 0);
  StateStore store(pc.graph, dims.h_dim);
  std::int64_t times[3] = {100, 300, 500};
  for (int id : {0, 1, 2}) {
    auto& st = store.at(pc.graph, id);
    st.h = {urand(rng, -1, 1), urand(rng, -1, 1)};
    st.last_update_time = times[id];
    st.ever_updated = true;
  }

  AppraisalQuery q{{0.4, -0.1, 0.9}, 0, 4000};
  Tape t;
  ParamBinding bind(t, p);
  ReplayOptions opts;
  std::vector<Var> ws;
  model.refresh_embedding(t, bind, q, store, pc.graph, opts, &ws);
  REQUIRE(ws.size() == 3);

  // Brute force: recompute a_ij per neighbor with plain doubles, then softmax
  // independently per dimension.
  auto matvec_plain = [&](const Tensor& m, const std::vector<double>& v) {
    std::vector<double> out(m.shape[0], 0.0);
    for (std::size_t i = 0; i < m.shape[0]; ++i) {
      for (std::size_t j = 0; j < m.shape[1]; ++j) out[i] += m.data[i * m.shape[1] + j] * v[j];
    }
    return out;
  };
  const auto& freqs = p.get("tgn.time.freq").data;
  const auto nbrs = pc.graph.neighbors(0);
  std::vector<std::vector<double>> scores;
  for (const auto& nb : nbrs) {
    const auto& st = store.at(pc.graph, nb.id);
    const double dtd = static_cast<double>(4000 - st.last_update_time) / 86'400.0;
    std::vector<double> feat;
    feat.insert(feat.end(), q.estate_attrs.begin(), q.estate_attrs.end());
    const auto& self = store.at(pc.graph, 0);
    feat.insert(feat.end(), self.h.begin(), self.h.end());
    feat.insert(feat.end(), st.h.begin(), st.h.end());
    feat.push_back(dtd);
    for (double w : freqs) {
      feat.push_back(std::cos(w * dtd));
      feat.push_back(std::sin(w * dtd));
    }
    feat.push_back(nb.distance_m / pc.graph.epsilon_m());
    auto hidden = matvec_plain(p.get("tgn.attn.W1"), feat);
    for (double& h : hidden) h = std::tanh(h);
    scores.push_back(matvec_plain(p.get("tgn.attn.W2"), hidden));
  }
  for (std::size_t d = 0; d < 2; ++d) {
    double denom = 0;
    for (const auto& s : scores) denom += std::exp(s[d]);
    for (std::size_t j = 0; j < scores.size(); ++j) {
      const double expect = std::exp(scores[j][d]) / denom;
      CHECK(t.value(ws[j]).data[d] == doctest::Approx(expect).epsilon(1e-10));
    }
  }
}

TEST_CASE("strict causality is enforced against stale neighbors") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(41);
  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5})}, {}, 2000.0, 0);
  StateStore store(pc.graph, dims.h_dim);
  auto& st = store.at(pc.graph, 0);
  st.ever_updated = true;
  st.last_update_time = 500;
  Tape t;
  ParamBinding bind(t, p);
  ReplayOptions opts;
  AppraisalQuery q{{0, 0, 0}, 0, 500};  // not strictly later
  CHECK_THROWS_AS(model.refresh_embedding(t, bind, q, store, pc.graph, opts), ContractError);
}

TEST_CASE("hypernetwork head determinism and zero behavior") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(43);
  std::mt19937_64 rng(47);
  randomize_params(p, rng);
  keep_paths_alive(p);

  Tape t;
  ParamBinding bind(t, p);
  Var z1 = t.input(Tensor::vector({0.5, -0.5}));
  Var z2 = t.input(Tensor::vector({0.5, -0.5}));
  auto [w1, b1] = model.hyper_head(t, bind, z1);
  auto [w2, b2] = model.hyper_head(t, bind, z2);
  CHECK(t.value(w1).data == t.value(w2).data);
  CHECK(t.value(b1).value() == t.value(b2).value());

  Var z3 = t.input(Tensor::vector({3.0, 2.5}));
  auto [w3, b3] = model.hyper_head(t, bind, z3);
  CHECK(t.value(w3).data != t.value(w1).data);  // generically different

  ParamStore pz = p.snapshot();
  zero_params(pz);
  Tape t2;
  ParamBinding bind2(t2, pz);
  auto [wz, bz] = model.hyper_head(t2, bind2, t2.input(Tensor::vector({0.5, -0.5})));
  for (double v : t2.value(wz).data) CHECK(v == 0.0);
  CHECK(t2.value(bz).value() == 0.0);
}

TEST_CASE("hypernetwork parameter shapes are independent of community count") {
  MttgnModel model(toy_dims());
  ParamStore p = model.init_params(1);
  auto shapes_of = [&](const ParamStore& ps) {
    std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
    for (const auto& [k, v] : ps.entries()) out.emplace_back(k, v.shape);
    return out;
  };
  // the parameter set is created before any city is known; adding a
  // community to a dataset cannot change it
  auto s1 = shapes_of(p);
  auto pc2 = make_prepared({comm(0, 30, 110, {0, 0}), comm(1, 30.001, 110, {1, 1})}, {}, 2000.0,
                           0);
  auto pc3 = make_prepared(
      {comm(0, 30, 110, {0, 0}), comm(1, 30.001, 110, {1, 1}), comm(2, 30.002, 110, {2, 2})},
      {}, 2000.0, 0);
  (void)pc2;
  (void)pc3;
  auto s2 = shapes_of(model.init_params(1));
  CHECK(s1 == s2);
}

TEST_CASE("appraise with all-zero parameters returns zero") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(53);
  zero_params(p);
  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5})},
                          {event({0.1, 0.2, 0.3}, 0, 100, 5.0)}, 2000.0, 1);
  StateStore store(pc.graph, dims.h_dim);
  AppraisalQuery q{{0.4, 0.5, 0.6}, 0, 50};
  CHECK(model.appraise_value(p, pc, store, q) == 0.0);
}

TEST_CASE("single event with zero parameters gives loss |y|") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(59);
  zero_params(p);
  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5})},
                          {event({0.1, 0.2, 0.3}, 0, 100, 7.25)}, 2000.0, 1);
  Tape t;
  ParamBinding bind(t, p);
  const std::size_t evs[] = {0};
  ReplayOptions opts;
  Var loss = replay_mean_loss(model, t, bind, pc, evs, 0, opts);
  CHECK(t.value(loss).value() == 7.25);
}

TEST_CASE("oracle injection drives the loss to zero") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(61);
  auto pc = make_prepared(
      {comm(0, 30, 110, {0.5, -0.5})},
      {event({0.1, 0, 0}, 0, 100, 5.0), event({0, 0.1, 0}, 0, 200, 6.0)}, 2000.0, 2);
  std::vector<double> truth = {5.0, 6.0};
  Tape t;
  ParamBinding bind(t, p);
  const std::size_t evs[] = {0, 1};
  ReplayOptions opts;
  opts.prediction_override = &truth;
  Var loss = replay_mean_loss(model, t, bind, pc, evs, 0, opts);
  CHECK(t.value(loss).value() == 0.0);
}

TEST_CASE("full replay matches the hand-unrolled scalar chain with full BPTT") {
  MttgnModel model(scalar_dims());
  ParamStore p = model.init_params(67);
  std::mt19937_64 rng(71);
  randomize_params(p, rng, 0.7);

  const std::int64_t day = 86'400;
  auto pc = make_prepared({comm(0, 30, 110, {0.6})},
                          {event({0.5}, 0, 0, 6.0), event({-0.4}, 0, 2 * day, 7.0),
                           event({0.9}, 0, 5 * day, 5.5)},
                          2000.0, 3);

  auto manual_loss = [&](const ParamStore& ps) {
    ScalarOracle o{ps, static_cast<double>(pc.graph.epoch()),
                   static_cast<double>(pc.graph.horizon())};
    double h = 0.0;
    std::int64_t t_last = pc.graph.epoch();
    double total = 0.0;
    const double xs[3] = {0.5, -0.4, 0.9};
    const double ys[3] = {6.0, 7.0, 5.5};
    const std::int64_t ts[3] = {0, 2 * day, 5 * day};
    for (int n = 0; n < 3; ++n) {
      const double pred = o.appraise(xs[n], 0.6, h, static_cast<double>(ts[n]),
                                     static_cast<double>(pc.graph.epoch()));
      total += std::fabs(pred - ys[n]);
      h = o.evolve(xs[n], ys[n], 0.6, h, static_cast<double>(ts[n] - t_last));
      t_last = ts[n];
    }
    return total / 3.0;
  };

  ReplayOptions opts;
  opts.detach_depth = 0;  // full unrolling
  Tape t;
  ParamBinding bind(t, p);
  const std::size_t evs[] = {0, 1, 2};
  Var loss = replay_mean_loss(model, t, bind, pc, evs, 0, opts);
  CHECK(t.value(loss).value() == doctest::Approx(manual_loss(p)).epsilon(1e-12));

  GradMap back = t.backward(loss);
  GradMap fd = finite_diff_grad(manual_loss, p, 1e-6);
  CHECK(max_relative_error(back, fd, 1e-4) < 1e-4);
}

TEST_CASE("detach depth 1 differs from full BPTT but losses agree") {
  MttgnModel model(scalar_dims());
  ParamStore p = model.init_params(73);
  std::mt19937_64 rng(79);
  randomize_params(p, rng, 0.7);
  keep_paths_alive(p);
  const std::int64_t day = 86'400;
  auto pc = make_prepared({comm(0, 30, 110, {0.6})},
                          {event({0.5}, 0, 0, 6.0), event({-0.4}, 0, day, 7.0),
                           event({0.9}, 0, 3 * day, 5.5)},
                          2000.0, 3);
  const std::size_t evs[] = {0, 1, 2};

  Tape t1;
  ParamBinding b1(t1, p);
  ReplayOptions full;
  full.detach_depth = 0;
  Var l1 = replay_mean_loss(model, t1, b1, pc, evs, 0, full);
  GradMap g_full = t1.backward(l1);

  Tape t2;
  ParamBinding b2(t2, p);
  ReplayOptions d1;
  d1.detach_depth = 1;
  Var l2 = replay_mean_loss(model, t2, b2, pc, evs, 0, d1);
  GradMap g_d1 = t2.backward(l2);

  // losses are a forward quantity: identical
  CHECK(t1.value(l1).value() == doctest::Approx(t2.value(l2).value()).epsilon(1e-15));
  // gradients differ through the truncated history (generically)
  CHECK(max_relative_error(g_full, g_d1) > 1e-8);
}

TEST_CASE("causality: events at or after the query time never change the prediction") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  std::mt19937_64 rng(83);
  for (int trial = 0; trial < 10; ++trial) {
    ParamStore p = model.init_params(rng());
    randomize_params(p, rng, 0.5);
    std::vector<Community> cs;
    for (int i = 0; i < 4; ++i) {
      cs.push_back(comm(i, 30 + 0.001 * i, 110, {urand(rng, -1, 1), urand(rng, -1, 1)}));
    }
    std::vector<TransactionEvent> evs;
    for (int n = 0; n < 20; ++n) {
      evs.push_back(event({urand(rng, -1, 1), urand(rng, -1, 1), urand(rng, -1, 1)},
                          static_cast<int>(rng() % 4), 1000 * (n + 1), urand(rng, 1.0, 12.0)));
    }
    auto pc = make_prepared(cs, evs, 2000.0, evs.size());

    const std::size_t q = 10 + rng() % 5;
    std::vector<std::size_t> all_ids(pc.graph.events().size());
    for (std::size_t i = 0; i < all_ids.size(); ++i) all_ids[i] = i;

    ReplayOptions opts;
    auto full = replay_predict_values(model, pc, p, all_ids, q, opts);
    const double with_future = full.front();

    std::vector<std::size_t> truncated(all_ids.begin(), all_ids.begin() + q + 1);
    auto cut = replay_predict_values(model, pc, p, truncated, q, opts);
    CHECK(cut.front() == with_future);  // exactly, not approximately
  }
}

TEST_CASE("full-model gradient check on a two-community three-event toy") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(89);
  std::mt19937_64 rng(97);
  randomize_params(p, rng, 0.5);

  const std::int64_t day = 86'400;
  auto pc = make_prepared(
      {comm(0, 30, 110, {0.5, -0.5}), comm(1, 30.005, 110, {-0.3, 0.8})},
      {event({0.5, -0.2, 0.1}, 0, 0, 6.0), event({-0.4, 0.3, 0.7}, 1, 2 * day, 7.5),
       event({0.9, 0.1, -0.6}, 0, 5 * day, 5.0)},
      2000.0, 3);
  const std::size_t evs[] = {0, 1, 2};

  for (int depth : {0, 1}) {
    ReplayOptions opts;
    opts.detach_depth = depth;
    Tape t;
    ParamBinding bind(t, p);
    Var loss = replay_mean_loss(model, t, bind, pc, evs, 0, opts);
    GradMap back = t.backward(loss);
    GradMap fd = finite_diff_grad(
        [&](const ParamStore& s) {
          Tape ft;
          ParamBinding fb(ft, s);
          return ft.value(replay_mean_loss(model, ft, fb, pc, evs, 0, opts)).value();
        },
        p, 1e-5);
    CHECK(max_relative_error(back, fd, 1e-3) < 1e-3);
  }
}

TEST_CASE("masking zeroes the requested feature families") {
  MttgnDims dims = scalar_dims();
  MttgnModel model(dims);
  ParamStore p = model.init_params(101);
  std::mt19937_64 rng(103);
  randomize_params(p, rng, 0.7);
  keep_paths_alive(p);

  auto pc = make_prepared({comm(0, 30, 110, {0.8})},
                          {event({0.5}, 0, 0, 6.0), event({0.7}, 0, 86'400, 7.0)}, 2000.0, 2);
  const std::size_t evs[] = {0, 1};

  auto loss_with = [&](ReplayOptions opts) {
    Tape t;
    ParamBinding bind(t, p);
    return t.value(replay_mean_loss(model, t, bind, pc, evs, 0, opts)).value();
  };
  // masking price must equal feeding y = 0 while keeping the loss target
  ReplayOptions mask;
  mask.mask_price = true;
  auto pc_zero_y_inputs = pc;  // same graph; compare against oracle computed by hand
  ScalarOracle o{p, static_cast<double>(pc.graph.epoch()),
                 static_cast<double>(pc.graph.horizon())};
  double h = 0.0;
  double total = 0.0;
  const double xs[2] = {0.5, 0.7}, ys[2] = {6.0, 7.0};
  const std::int64_t ts[2] = {0, 86'400};
  std::int64_t t_last = pc.graph.epoch();
  for (int n = 0; n < 2; ++n) {
    total += std::fabs(o.appraise(xs[n], 0.8, h, static_cast<double>(ts[n]), 0.0) - ys[n]);
    h = o.evolve(xs[n], /*y masked*/ 0.0, 0.8, h, static_cast<double>(ts[n] - t_last));
    t_last = ts[n];
  }
  CHECK(loss_with(mask) == doctest::Approx(total / 2.0).epsilon(1e-12));
  CHECK(loss_with(ReplayOptions{}) != doctest::Approx(total / 2.0).epsilon(1e-12));
}

TEST_CASE("checkpoint round-trip is bit-exact") {
  MttgnModel model;  // full-size parameters
  ParamStore p = model.init_params(12345);
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "mtr_ckpt_test";
  fs::create_directories(dir);
  const std::string path = (dir / "theta.ckpt").string();
  save_checkpoint(p, path, 0xfeedface);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.fingerprint == 0xfeedface);
  CHECK(ck.params.equals(p));
  CHECK(!fs::exists(path + ".tmp"));  // write-then-rename leaves no temp file

  // byte-identical on re-save
  save_checkpoint(ck.params, (dir / "theta2.ckpt").string(), 0xfeedface);
  std::ifstream a(path, std::ios::binary), b((dir / "theta2.ckpt").string(), std::ios::binary);
  std::string sa((std::istreambuf_iterator<char>(a)), std::istreambuf_iterator<char>());
  std::string sb((std::istreambuf_iterator<char>(b)), std::istreambuf_iterator<char>());
  CHECK(sa == sb);
  fs::remove_all(dir);
}

TEST_CASE("no-tgn variant ignores history entirely") {
  MttgnDims dims = toy_dims();
  MttgnModel model(dims, /*use_tgn=*/false);
  ParamStore p = model.init_params(109);
  std::mt19937_64 rng(113);
  randomize_params(p, rng, 0.5);
  auto pc = make_prepared({comm(0, 30, 110, {0.5, -0.5})},
                          {event({0.1, 0.2, 0.3}, 0, 100, 5.0),
                           event({0.4, 0.5, 0.6}, 0, 200, 9.0)},
                          2000.0, 2);
  std::vector<std::size_t> both = {0, 1};
  std::vector<std::size_t> last_only = {1};
  ReplayOptions opts;
  auto with_history = replay_predict_values(model, pc, p, both, 1, opts);
  auto without = replay_predict_values(model, pc, p, last_only, 0, opts);
  CHECK(with_history.front() == without.front());
}
