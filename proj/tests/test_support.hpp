#pragma once

// Shared helpers for the unit and acceptance suites: random expression
// programs for gradient checking, plus small deterministic RNG utilities.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mtr/mttgn.hpp"
#include "mtr/synth_data.hpp"
#include "mtr/tensor.hpp"

namespace mtr::testing {

inline Community make_comm(int id, double lat, double lon, std::vector<double> z) {
  Community c;
  c.id = id;
  c.lat = lat;
  c.lon = lon;
  c.attrs = std::move(z);
  return c;
}

inline TransactionEvent make_event(std::vector<double> x, int community_id, std::int64_t t,
                                   double y) {
  TransactionEvent e;
  e.estate_attrs = std::move(x);
  e.community_id = community_id;
  e.time = t;
  e.unit_price = y;
  return e;
}

// PreparedCity without standardization, for hand-crafted toy datasets.
inline PreparedCity make_prepared_city(std::vector<Community> cs,
                                       std::vector<TransactionEvent> evs, double epsilon_m,
                                       std::size_t n_train, int city_id = 0) {
  PreparedCity pc;
  pc.city_id = city_id;
  pc.x_dim = evs.empty() ? 1 : evs[0].estate_attrs.size();
  pc.z_dim = cs.empty() ? 1 : cs[0].attrs.size();
  pc.n_train = n_train;
  pc.graph = TemporalEventGraph::build(std::move(cs), std::move(evs), epsilon_m);
  return pc;
}

// Minimal appraisal model for trainer-level oracle tests: y = w.x + b.
class TinyLinearModel : public AppraisalModel {
 public:
  explicit TinyLinearModel(std::size_t x_dim = 1) : x_dim_(x_dim) {}
  std::string name() const override { return "tiny_linear"; }
  ParamStore init_params(std::uint64_t seed) const override {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-0.5, 0.5);
    ParamStore p;
    Tensor w = Tensor::zeros({x_dim_});
    for (double& v : w.data) v = u(rng);
    p.add("lin.w", std::move(w));
    p.add("lin.b", Tensor::scalar(0.0));
    return p;
  }
  std::vector<Var> replay_predict(Tape& t, ParamBinding& params, const PreparedCity& city,
                                  std::span<const std::size_t> events,
                                  std::size_t predict_begin,
                                  const ReplayOptions& opts) const override {
    std::vector<Var> preds;
    for (std::size_t k = predict_begin; k < events.size(); ++k) {
      const auto& ev = city.graph.events()[events[k]];
      std::vector<double> x =
          opts.mask_estate ? std::vector<double>(x_dim_, 0.0) : ev.estate_attrs;
      Var xv = t.input(Tensor::vector(std::move(x)));
      preds.push_back(t.add(t.dot(params("lin.w"), xv), params("lin.b")));
    }
    return preds;
  }

 private:
  std::size_t x_dim_;
};

inline double urand(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline Tensor random_vector(std::mt19937_64& rng, std::size_t n, double lo = -2.0,
                            double hi = 2.0) {
  std::vector<double> v(n);
  for (double& x : v) x = urand(rng, lo, hi);
  return Tensor::vector(std::move(v));
}

inline Tensor random_matrix(std::mt19937_64& rng, std::size_t r, std::size_t c,
                            double lo = -2.0, double hi = 2.0) {
  Tensor t = Tensor::zeros({r, c});
  for (double& x : t.data) x = urand(rng, lo, hi);
  return t;
}

// A frozen straight-line program over the op vocabulary. Structure is decided
// once (using the initial parameter values for kink rejection) and then
// replayed verbatim for both backward() and the finite-difference oracle, so
// a perturbed parameter can never change the graph shape.
struct ExprProgram {
  enum class Kind {
    kParamVec, kParamMat, kAdd, kSub, kMul, kDiv, kNeg, kScale, kMatVec,
    kDot, kConcat2, kRelu, kTanh, kSigmoid, kExp, kAbs, kCos, kSin, kSum,
    kMean, kSoftmax,
  };
  struct Inst {
    Kind kind;
    int a = -1;
    int b = -1;
    double aux = 0.0;
    std::string param;  // for kParam*
  };
  std::vector<Inst> insts;
  int root = -1;  // index of the scalar result

  Var eval(Tape& tape, const ParamStore& params) const {
    std::vector<Var> slots(insts.size());
    for (std::size_t i = 0; i < insts.size(); ++i) {
      const Inst& ins = insts[i];
      switch (ins.kind) {
        case Kind::kParamVec:
        case Kind::kParamMat: slots[i] = tape.param(ins.param, params.get(ins.param)); break;
        case Kind::kAdd: slots[i] = tape.add(slots[ins.a], slots[ins.b]); break;
        case Kind::kSub: slots[i] = tape.sub(slots[ins.a], slots[ins.b]); break;
        case Kind::kMul: slots[i] = tape.mul(slots[ins.a], slots[ins.b]); break;
        case Kind::kDiv: slots[i] = tape.div(slots[ins.a], slots[ins.b]); break;
        case Kind::kNeg: slots[i] = tape.neg(slots[ins.a]); break;
        case Kind::kScale: slots[i] = tape.scale(slots[ins.a], ins.aux); break;
        case Kind::kMatVec: slots[i] = tape.matvec(slots[ins.a], slots[ins.b]); break;
        case Kind::kDot: slots[i] = tape.dot(slots[ins.a], slots[ins.b]); break;
        case Kind::kConcat2: {
          const Var xs[] = {slots[ins.a], slots[ins.b]};
          slots[i] = tape.concat(xs);
          break;
        }
        case Kind::kRelu: slots[i] = tape.relu(slots[ins.a]); break;
        case Kind::kTanh: slots[i] = tape.tanh(slots[ins.a]); break;
        case Kind::kSigmoid: slots[i] = tape.sigmoid(slots[ins.a]); break;
        case Kind::kExp: slots[i] = tape.exp(slots[ins.a]); break;
        case Kind::kAbs: slots[i] = tape.abs(slots[ins.a]); break;
        case Kind::kCos: slots[i] = tape.cos(slots[ins.a]); break;
        case Kind::kSin: slots[i] = tape.sin(slots[ins.a]); break;
        case Kind::kSum: slots[i] = tape.sum(slots[ins.a]); break;
        case Kind::kMean: slots[i] = tape.mean(slots[ins.a]); break;
        case Kind::kSoftmax: slots[i] = tape.softmax(slots[ins.a]); break;
      }
    }
    return slots[static_cast<std::size_t>(root)];
  }

  double operator()(const ParamStore& params) const {
    Tape tape;
    Var r = eval(tape, params);
    return tape.value(r).value();
  }
};

// Builds a random elementary-op composition over 2 vector parameters and one
// matrix parameter. Kink-avoidance: relu/abs operands must clear |v| >= 1e-3
// on the initial values, exp operands are bounded, div denominators are
// bounded away from zero.
inline ExprProgram random_expression(std::mt19937_64& rng, ParamStore& params) {
  using K = ExprProgram::Kind;
  ExprProgram prog;

  const std::size_t dim = 2 + static_cast<std::size_t>(rng() % 4);  // 2..5
  params = ParamStore();
  params.add("v0", random_vector(rng, dim));
  params.add("v1", random_vector(rng, dim));
  params.add("m0", random_matrix(rng, dim, dim, -1.0, 1.0));

  // Track live values alongside program slots so rejection checks can look
  // at real numbers.
  struct Entry {
    int slot;
    std::vector<double> value;
  };
  std::vector<Entry> pool;

  auto push_inst = [&](ExprProgram::Inst ins) {
    prog.insts.push_back(std::move(ins));
    return static_cast<int>(prog.insts.size() - 1);
  };

  int v0 = push_inst({K::kParamVec, -1, -1, 0.0, "v0"});
  int v1 = push_inst({K::kParamVec, -1, -1, 0.0, "v1"});
  int m0 = push_inst({K::kParamMat, -1, -1, 0.0, "m0"});
  pool.push_back({v0, params.get("v0").data});
  pool.push_back({v1, params.get("v1").data});

  auto apply_unary = [&](K kind, const std::vector<double>& in) {
    std::vector<double> out = in;
    for (double& x : out) {
      switch (kind) {
        case K::kNeg: x = -x; break;
        case K::kRelu: x = x > 0 ? x : 0; break;
        case K::kTanh: x = std::tanh(x); break;
        case K::kSigmoid: x = 1.0 / (1.0 + std::exp(-x)); break;
        case K::kExp: x = std::exp(x); break;
        case K::kAbs: x = std::fabs(x); break;
        case K::kCos: x = std::cos(x); break;
        case K::kSin: x = std::sin(x); break;
        default: break;
      }
    }
    if (kind == K::kSoftmax) {
      double mx = *std::max_element(out.begin(), out.end());
      double denom = 0;
      for (double& x : out) {
        x = std::exp(x - mx);
        denom += x;
      }
      for (double& x : out) x /= denom;
    }
    return out;
  };

  const int steps = 3 + static_cast<int>(rng() % 5);
  for (int s = 0; s < steps; ++s) {
    for (int attempt = 0; attempt < 20; ++attempt) {
      const int which = static_cast<int>(rng() % 10);
      const Entry& ea = pool[rng() % pool.size()];
      const Entry& eb = pool[rng() % pool.size()];
      if (which <= 2) {  // binary arithmetic
        if (ea.value.size() != eb.value.size()) continue;
        K kind = which == 0 ? K::kAdd : (which == 1 ? K::kSub : K::kMul);
        std::vector<double> out(ea.value.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
          out[i] = which == 0   ? ea.value[i] + eb.value[i]
                   : which == 1 ? ea.value[i] - eb.value[i]
                                : ea.value[i] * eb.value[i];
        }
        // keep magnitudes tame for later exp()
        bool ok = true;
        for (double x : out) {
          if (std::fabs(x) > 8.0) ok = false;
        }
        if (!ok) continue;
        pool.push_back({push_inst({kind, ea.slot, eb.slot, 0.0, ""}), std::move(out)});
        break;
      } else if (which == 3) {  // div with safe denominator
        if (ea.value.size() != eb.value.size()) continue;
        bool ok = true;
        for (double x : eb.value) {
          if (std::fabs(x) < 0.2) ok = false;
        }
        if (!ok) continue;
        std::vector<double> out(ea.value.size());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = ea.value[i] / eb.value[i];
        pool.push_back({push_inst({K::kDiv, ea.slot, eb.slot, 0.0, ""}), std::move(out)});
        break;
      } else if (which == 4) {  // matvec against m0 (only when dims match)
        if (ea.value.size() != dim) continue;
        const Tensor& m = params.get("m0");
        std::vector<double> out(dim, 0.0);
        for (std::size_t i = 0; i < dim; ++i) {
          for (std::size_t j = 0; j < dim; ++j) out[i] += m.data[i * dim + j] * ea.value[j];
        }
        bool ok = true;
        for (double x : out) {
          if (std::fabs(x) > 8.0) ok = false;
        }
        if (!ok) continue;
        pool.push_back({push_inst({K::kMatVec, m0, ea.slot, 0.0, ""}), std::move(out)});
        break;
      } else if (which == 5) {  // concat
        pool.push_back({push_inst({K::kConcat2, ea.slot, eb.slot, 0.0, ""}), [&] {
                          std::vector<double> out = ea.value;
                          out.insert(out.end(), eb.value.begin(), eb.value.end());
                          return out;
                        }()});
        break;
      } else {  // unary
        static const K unary[] = {K::kNeg, K::kRelu,    K::kTanh,  K::kSigmoid,
                                  K::kExp, K::kAbs,     K::kCos,   K::kSin,
                                  K::kSoftmax, K::kScale};
        K kind = unary[rng() % 10];
        if (kind == K::kRelu || kind == K::kAbs) {
          bool ok = true;
          for (double x : ea.value) {
            if (std::fabs(x) < 1e-3) ok = false;  // reject kink neighborhoods
          }
          if (!ok) continue;
        }
        if (kind == K::kExp) {
          bool ok = true;
          for (double x : ea.value) {
            if (std::fabs(x) > 4.0) ok = false;
          }
          if (!ok) continue;
        }
        if (kind == K::kScale) {
          double c = urand(rng, -1.5, 1.5);
          std::vector<double> out = ea.value;
          for (double& x : out) x *= c;
          pool.push_back({push_inst({K::kScale, ea.slot, -1, c, ""}), std::move(out)});
          break;
        }
        pool.push_back({push_inst({kind, ea.slot, -1, 0.0, ""}), apply_unary(kind, ea.value)});
        break;
      }
    }
  }

  // Scalar root: sum of the means of the last few pool entries.
  int acc = -1;
  const std::size_t tail = std::min<std::size_t>(3, pool.size());
  for (std::size_t k = pool.size() - tail; k < pool.size(); ++k) {
    int red = push_inst({K::kMean, pool[k].slot, -1, 0.0, ""});
    acc = acc < 0 ? red : push_inst({K::kAdd, acc, red, 0.0, ""});
  }
  prog.root = acc;
  return prog;
}

}  // namespace mtr::testing
