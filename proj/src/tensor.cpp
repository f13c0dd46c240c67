#include "mtr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace mtr {

namespace {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> s, std::vector<double> d)
    : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != data.size()) {
    throw ContractError("tensor: shape " + shape_str() + " does not match " +
                        std::to_string(data.size()) + " elements");
  }
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::vector(std::vector<double> v) {
  std::size_t n = v.size();
  return Tensor({n}, std::move(v));
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
  std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ContractError("tensor: rows() on rank-" + std::to_string(rank()));
  return shape[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ContractError("tensor: cols() on rank-" + std::to_string(rank()));
  return shape[1];
}

double Tensor::value() const {
  if (rank() != 0) {
    throw ContractError("tensor: scalar value() on shape " + shape_str());
  }
  return data[0];
}

bool Tensor::all_finite() const {
  return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// ParamStore

Tensor& ParamStore::add(const std::string& name, Tensor value) {
  auto [it, inserted] = params_.emplace(name, std::move(value));
  if (!inserted) throw ContractError("param store: duplicate parameter '" + name + "'");
  return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("param store: unknown parameter '" + name + "'");
  return it->second;
}

Tensor& ParamStore::get_mut(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw ContractError("param store: unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_elements() const {
  std::size_t n = 0;
  for (const auto& [k, v] : params_) n += v.numel();
  return n;
}

void ParamStore::axpy(double a, const GradMap& g) {
  for (const auto& [name, grad] : g) {
    Tensor& p = get_mut(name);
    if (!p.same_shape(grad)) {
      throw ContractError("param store: axpy shape mismatch on '" + name + "' " + p.shape_str() +
                          " vs " + grad.shape_str());
    }
    for (std::size_t i = 0; i < p.data.size(); ++i) p.data[i] += a * grad.data[i];
  }
}

double grad_dot(const GradMap& a, const GradMap& b) {
  double acc = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) continue;
    const Tensor& tb = it->second;
    for (std::size_t i = 0; i < ta.data.size(); ++i) acc += ta.data[i] * tb.data[i];
  }
  return acc;
}

void grad_axpy(GradMap& acc, double a, const GradMap& g) {
  for (const auto& [name, t] : g) {
    auto it = acc.find(name);
    if (it == acc.end()) {
      Tensor scaled = t;
      for (double& v : scaled.data) v *= a;
      acc.emplace(name, std::move(scaled));
    } else {
      for (std::size_t i = 0; i < t.data.size(); ++i) it->second.data[i] += a * t.data[i];
    }
  }
}

bool grad_all_finite(const GradMap& g) {
  for (const auto& [name, t] : g) {
    if (!t.all_finite()) return false;
  }
  return true;
}

GradMap zero_grads_like(const ParamStore& p) {
  GradMap g;
  for (const auto& [name, t] : p.entries()) g.emplace(name, Tensor::zeros(t.shape));
  return g;
}

// ---------------------------------------------------------------------------
// Tape

void Tape::reserve(std::size_t n) {
  nodes_.reserve(n);
  in_pool_.reserve(2 * n);
}

Tape::Node& Tape::node(Var v) { return nodes_[static_cast<std::size_t>(v.id)]; }
const Tape::Node& Tape::cnode(Var v) const { return nodes_[static_cast<std::size_t>(v.id)]; }

void Tape::check_same_tape(Var v, const char* op) const {
  if (!v.valid() || v.tape != this || static_cast<std::size_t>(v.id) >= nodes_.size()) {
    throw ContractError(std::string(op) + ": operand does not belong to this tape");
  }
}

const Tensor& Tape::value(Var v) const {
  check_same_tape(v, "value");
  return cnode(v).value;
}

Var Tape::input(Tensor value) {
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = false;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::param(const std::string& name, const Tensor& value) {
  if (name_index_.count(name)) {
    throw ContractError("tape: parameter '" + name + "' already bound to this tape");
  }
  Node n;
  n.op = Op::kLeaf;
  n.requires_grad = true;
  n.value = value;
  n.name_id = static_cast<std::int32_t>(names_.size());
  names_.push_back(name);
  nodes_.push_back(std::move(n));
  std::int32_t id = static_cast<std::int32_t>(nodes_.size() - 1);
  name_index_.emplace(name, id);
  return Var{this, id};
}

Var Tape::emit(Op op, Tensor value, std::span<const Var> inputs, double aux) {
  Node n;
  n.op = op;
  n.aux = aux;
  n.in_ofs = static_cast<std::uint32_t>(in_pool_.size());
  n.in_cnt = static_cast<std::uint32_t>(inputs.size());
  for (Var v : inputs) {
    in_pool_.push_back(v.id);
    if (cnode(v).requires_grad) n.requires_grad = true;
  }
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Tape::add(Var a, Var b) {
  check_same_tape(a, "add");
  check_same_tape(b, "add");
  const Tensor& ta = cnode(a).value;
  const Tensor& tb = cnode(b).value;
  if (!ta.same_shape(tb)) {
    throw ContractError("add: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += tb.data[i];
  const Var in[] = {a, b};
  return emit(Op::kAdd, std::move(out), in);
}

Var Tape::add_n(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("add_n: no operands");
  check_same_tape(xs[0], "add_n");
  Tensor out = cnode(xs[0]).value;
  for (std::size_t k = 1; k < xs.size(); ++k) {
    check_same_tape(xs[k], "add_n");
    const Tensor& t = cnode(xs[k]).value;
    if (!t.same_shape(out)) {
      throw ContractError("add_n: shape mismatch " + out.shape_str() + " vs " + t.shape_str());
    }
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] += t.data[i];
  }
  return emit(Op::kAddN, std::move(out), xs);
}

Var Tape::sub(Var a, Var b) {
  check_same_tape(a, "sub");
  check_same_tape(b, "sub");
  const Tensor& ta = cnode(a).value;
  const Tensor& tb = cnode(b).value;
  if (!ta.same_shape(tb)) {
    throw ContractError("sub: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] -= tb.data[i];
  const Var in[] = {a, b};
  return emit(Op::kSub, std::move(out), in);
}

Var Tape::mul(Var a, Var b) {
  check_same_tape(a, "mul");
  check_same_tape(b, "mul");
  const Tensor& ta = cnode(a).value;
  const Tensor& tb = cnode(b).value;
  if (!ta.same_shape(tb)) {
    throw ContractError("mul: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] *= tb.data[i];
  const Var in[] = {a, b};
  return emit(Op::kMul, std::move(out), in);
}

Var Tape::div(Var a, Var b) {
  check_same_tape(a, "div");
  check_same_tape(b, "div");
  const Tensor& ta = cnode(a).value;
  const Tensor& tb = cnode(b).value;
  if (!ta.same_shape(tb)) {
    throw ContractError("div: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  Tensor out = ta;
  for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] /= tb.data[i];
  const Var in[] = {a, b};
  return emit(Op::kDiv, std::move(out), in);
}

Var Tape::neg(Var a) {
  check_same_tape(a, "neg");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = -v;
  const Var in[] = {a};
  return emit(Op::kNeg, std::move(out), in);
}

Var Tape::scale(Var a, double c) {
  check_same_tape(a, "scale");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v *= c;
  const Var in[] = {a};
  return emit(Op::kScale, std::move(out), in, c);
}

Var Tape::matvec(Var w, Var x) {
  check_same_tape(w, "matvec");
  check_same_tape(x, "matvec");
  const Tensor& tw = cnode(w).value;
  const Tensor& tx = cnode(x).value;
  if (tw.rank() != 2 || tx.rank() != 1 || tw.cols() != tx.numel()) {
    throw ContractError("matvec: shape mismatch W " + tw.shape_str() + ", x " + tx.shape_str());
  }
  const std::size_t m = tw.rows(), n = tw.cols();
  Tensor out = Tensor::zeros({m});
  const double* wd = tw.data.data();
  const double* xd = tx.data.data();
  // four independent accumulators; fixed summation order, vectorizable
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = wd + i * n;
    double a0 = 0.0, a1 = 0.0, a2 = 0.0, a3 = 0.0;
    std::size_t j = 0;
    for (; j + 4 <= n; j += 4) {
      a0 += row[j] * xd[j];
      a1 += row[j + 1] * xd[j + 1];
      a2 += row[j + 2] * xd[j + 2];
      a3 += row[j + 3] * xd[j + 3];
    }
    double acc = (a0 + a1) + (a2 + a3);
    for (; j < n; ++j) acc += row[j] * xd[j];
    out.data[i] = acc;
  }
  const Var in[] = {w, x};
  return emit(Op::kMatVec, std::move(out), in);
}

Var Tape::dot(Var a, Var b) {
  check_same_tape(a, "dot");
  check_same_tape(b, "dot");
  const Tensor& ta = cnode(a).value;
  const Tensor& tb = cnode(b).value;
  if (ta.rank() != 1 || tb.rank() != 1 || ta.numel() != tb.numel()) {
    throw ContractError("dot: shape mismatch " + ta.shape_str() + " vs " + tb.shape_str());
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < ta.data.size(); ++i) acc += ta.data[i] * tb.data[i];
  const Var in[] = {a, b};
  return emit(Op::kDot, Tensor::scalar(acc), in);
}

Var Tape::concat(std::span<const Var> xs) {
  if (xs.empty()) throw ContractError("concat: no operands");
  std::vector<double> out;
  for (Var v : xs) {
    check_same_tape(v, "concat");
    const Tensor& t = cnode(v).value;
    if (t.rank() > 1) {
      throw ContractError("concat: operand must be scalar or vector, got " + t.shape_str());
    }
    out.insert(out.end(), t.data.begin(), t.data.end());
  }
  return emit(Op::kConcat, Tensor::vector(std::move(out)), xs);
}

Var Tape::relu(Var a) {
  check_same_tape(a, "relu");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  const Var in[] = {a};
  return emit(Op::kRelu, std::move(out), in);
}

Var Tape::tanh(Var a) {
  check_same_tape(a, "tanh");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = std::tanh(v);
  const Var in[] = {a};
  return emit(Op::kTanh, std::move(out), in);
}

Var Tape::sigmoid(Var a) {
  check_same_tape(a, "sigmoid");
  Tensor out = cnode(a).value;
  for (double& v : out.data) {
    if (v >= 0.0) {
      v = 1.0 / (1.0 + std::exp(-v));
    } else {
      const double e = std::exp(v);
      v = e / (1.0 + e);
    }
  }
  const Var in[] = {a};
  return emit(Op::kSigmoid, std::move(out), in);
}

Var Tape::exp(Var a) {
  check_same_tape(a, "exp");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = std::exp(v);
  const Var in[] = {a};
  return emit(Op::kExp, std::move(out), in);
}

Var Tape::abs(Var a) {
  check_same_tape(a, "abs");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = std::fabs(v);
  const Var in[] = {a};
  return emit(Op::kAbs, std::move(out), in);
}

Var Tape::cos(Var a) {
  check_same_tape(a, "cos");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = std::cos(v);
  const Var in[] = {a};
  return emit(Op::kCos, std::move(out), in);
}

Var Tape::sin(Var a) {
  check_same_tape(a, "sin");
  Tensor out = cnode(a).value;
  for (double& v : out.data) v = std::sin(v);
  const Var in[] = {a};
  return emit(Op::kSin, std::move(out), in);
}

Var Tape::gather(Var a, std::vector<std::size_t> indices) {
  check_same_tape(a, "gather");
  const Tensor& t = cnode(a).value;
  if (t.rank() != 1) throw ContractError("gather: expected vector, got " + t.shape_str());
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= t.numel()) {
      throw ContractError("gather: index " + std::to_string(indices[i]) + " out of range for " +
                          t.shape_str());
    }
    out[i] = t.data[indices[i]];
  }
  const Var in[] = {a};
  Var v = emit(Op::kGather, Tensor::vector(std::move(out)), in);
  node(v).indices = std::move(indices);
  return v;
}

Var Tape::sum(Var a) {
  check_same_tape(a, "sum");
  const Tensor& t = cnode(a).value;
  double acc = std::accumulate(t.data.begin(), t.data.end(), 0.0);
  const Var in[] = {a};
  return emit(Op::kSum, Tensor::scalar(acc), in);
}

Var Tape::mean(Var a) {
  check_same_tape(a, "mean");
  const Tensor& t = cnode(a).value;
  if (t.numel() == 0) throw ContractError("mean: empty operand");
  double acc = std::accumulate(t.data.begin(), t.data.end(), 0.0);
  const Var in[] = {a};
  return emit(Op::kMean, Tensor::scalar(acc / static_cast<double>(t.numel())), in);
}

Var Tape::softmax(Var a) {
  check_same_tape(a, "softmax");
  const Tensor& t = cnode(a).value;
  if (t.rank() != 1 || t.numel() == 0) {
    throw ContractError("softmax: expected non-empty vector, got " + t.shape_str());
  }
  const double mx = *std::max_element(t.data.begin(), t.data.end());
  Tensor out = t;
  double denom = 0.0;
  for (double& v : out.data) {
    v = std::exp(v - mx);
    denom += v;
  }
  for (double& v : out.data) v /= denom;
  const Var in[] = {a};
  return emit(Op::kSoftmax, std::move(out), in);
}

void Tape::backward_node(std::int32_t id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  const std::int32_t* in = in_pool_.data() + n.in_ofs;
  auto ensure = [&](std::int32_t child) -> Tensor& {
    Node& c = nodes_[static_cast<std::size_t>(child)];
    return c.grad;
  };
  const std::vector<double>& g = n.grad.data;

  switch (n.op) {
    case Op::kLeaf:
      break;
    case Op::kAdd: {
      Tensor& ga = ensure(in[0]);
      Tensor& gb = ensure(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.data[i] += g[i];
        gb.data[i] += g[i];
      }
      break;
    }
    case Op::kAddN: {
      for (std::uint32_t k = 0; k < n.in_cnt; ++k) {
        Tensor& gk = ensure(in[k]);
        for (std::size_t i = 0; i < g.size(); ++i) gk.data[i] += g[i];
      }
      break;
    }
    case Op::kSub: {
      Tensor& ga = ensure(in[0]);
      Tensor& gb = ensure(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.data[i] += g[i];
        gb.data[i] -= g[i];
      }
      break;
    }
    case Op::kMul: {
      const Tensor& va = nodes_[in[0]].value;
      const Tensor& vb = nodes_[in[1]].value;
      Tensor& ga = ensure(in[0]);
      Tensor& gb = ensure(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        ga.data[i] += g[i] * vb.data[i];
        gb.data[i] += g[i] * va.data[i];
      }
      break;
    }
    case Op::kDiv: {
      const Tensor& va = nodes_[in[0]].value;
      const Tensor& vb = nodes_[in[1]].value;
      Tensor& ga = ensure(in[0]);
      Tensor& gb = ensure(in[1]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double inv = 1.0 / vb.data[i];
        ga.data[i] += g[i] * inv;
        gb.data[i] -= g[i] * va.data[i] * inv * inv;
      }
      break;
    }
    case Op::kNeg: {
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] -= g[i];
      break;
    }
    case Op::kScale: {
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += n.aux * g[i];
      break;
    }
    case Op::kMatVec: {
      const Tensor& vw = nodes_[in[0]].value;
      const Tensor& vx = nodes_[in[1]].value;
      Tensor& gw = ensure(in[0]);
      Tensor& gx = ensure(in[1]);
      const std::size_t m = vw.shape[0], k = vw.shape[1];
      const double* xd = vx.data.data();
      double* gxd = gx.data.data();
      for (std::size_t i = 0; i < m; ++i) {
        const double gi = g[i];
        if (gi == 0.0) continue;
        double* gwrow = gw.data.data() + i * k;
        const double* wrow = vw.data.data() + i * k;
        for (std::size_t j = 0; j < k; ++j) gwrow[j] += gi * xd[j];
        for (std::size_t j = 0; j < k; ++j) gxd[j] += gi * wrow[j];
      }
      break;
    }
    case Op::kDot: {
      const Tensor& va = nodes_[in[0]].value;
      const Tensor& vb = nodes_[in[1]].value;
      Tensor& ga = ensure(in[0]);
      Tensor& gb = ensure(in[1]);
      const double gs = g[0];
      for (std::size_t i = 0; i < va.data.size(); ++i) {
        ga.data[i] += gs * vb.data[i];
        gb.data[i] += gs * va.data[i];
      }
      break;
    }
    case Op::kConcat: {
      std::size_t ofs = 0;
      for (std::uint32_t kk = 0; kk < n.in_cnt; ++kk) {
        Tensor& gk = ensure(in[kk]);
        for (std::size_t i = 0; i < gk.data.size(); ++i) gk.data[i] += g[ofs + i];
        ofs += gk.data.size();
      }
      break;
    }
    case Op::kRelu: {
      const Tensor& va = nodes_[in[0]].value;
      Tensor& ga = ensure(in[0]);
      // subgradient at 0 is 0
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (va.data[i] > 0.0) ga.data[i] += g[i];
      }
      break;
    }
    case Op::kTanh: {
      const Tensor& y = n.value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g[i] * (1.0 - y.data[i] * y.data[i]);
      break;
    }
    case Op::kSigmoid: {
      const Tensor& y = n.value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g[i] * y.data[i] * (1.0 - y.data[i]);
      break;
    }
    case Op::kExp: {
      const Tensor& y = n.value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g[i] * y.data[i];
      break;
    }
    case Op::kAbs: {
      const Tensor& va = nodes_[in[0]].value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (va.data[i] > 0.0) {
          ga.data[i] += g[i];
        } else if (va.data[i] < 0.0) {
          ga.data[i] -= g[i];
        }
      }
      break;
    }
    case Op::kCos: {
      const Tensor& va = nodes_[in[0]].value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] -= g[i] * std::sin(va.data[i]);
      break;
    }
    case Op::kSin: {
      const Tensor& va = nodes_[in[0]].value;
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += g[i] * std::cos(va.data[i]);
      break;
    }
    case Op::kGather: {
      Tensor& ga = ensure(in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[n.indices[i]] += g[i];
      break;
    }
    case Op::kSum: {
      Tensor& ga = ensure(in[0]);
      const double gs = g[0];
      for (double& v : ga.data) v += gs;
      break;
    }
    case Op::kMean: {
      Tensor& ga = ensure(in[0]);
      const double gs = g[0] / static_cast<double>(ga.data.size());
      for (double& v : ga.data) v += gs;
      break;
    }
    case Op::kSoftmax: {
      const Tensor& y = n.value;
      Tensor& ga = ensure(in[0]);
      double gy = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) gy += g[i] * y.data[i];
      for (std::size_t i = 0; i < g.size(); ++i) ga.data[i] += y.data[i] * (g[i] - gy);
      break;
    }
  }
}

GradMap Tape::backward(Var root) {
  check_same_tape(root, "backward");
  if (cnode(root).value.rank() != 0) {
    throw ContractError("backward: root must be scalar, got shape " +
                        cnode(root).value.shape_str());
  }

  ++epoch_;
  topo_scratch_.clear();
  stack_scratch_.clear();

  // Iterative post-order DFS over grad-requiring ancestors of the root.
  if (cnode(root).requires_grad) {
    stack_scratch_.push_back(root.id);
    std::vector<std::int32_t>& stack = stack_scratch_;
    // second visit marker: push node twice; emit on second pop
    std::vector<std::int32_t> emit_stack;
    while (!stack.empty()) {
      std::int32_t id = stack.back();
      stack.pop_back();
      if (id < 0) {  // post marker
        topo_scratch_.push_back(emit_stack.back());
        emit_stack.pop_back();
        continue;
      }
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.visit_epoch == epoch_) continue;
      n.visit_epoch = epoch_;
      emit_stack.push_back(id);
      stack.push_back(-1);
      const std::int32_t* in = in_pool_.data() + n.in_ofs;
      for (std::uint32_t k = 0; k < n.in_cnt; ++k) {
        const Node& c = nodes_[static_cast<std::size_t>(in[k])];
        if (c.requires_grad && c.visit_epoch != epoch_) stack.push_back(in[k]);
      }
    }
  }

  // Zero/allocate grads of every visited node, then seed and sweep. The
  // backward kernels also write into non-visited constant children, so those
  // need zeroed scratch buffers too.
  auto reset_grad = [](Node& n) {
    if (n.grad.data.size() != n.value.data.size()) {
      n.grad = Tensor::zeros(n.value.shape);
    } else {
      std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
  };
  for (std::int32_t id : topo_scratch_) {
    reset_grad(nodes_[static_cast<std::size_t>(id)]);
  }
  for (std::int32_t id : topo_scratch_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    const std::int32_t* in = in_pool_.data() + n.in_ofs;
    for (std::uint32_t k = 0; k < n.in_cnt; ++k) {
      Node& c = nodes_[static_cast<std::size_t>(in[k])];
      if (c.visit_epoch != epoch_) reset_grad(c);
    }
  }

  if (!topo_scratch_.empty()) {
    Node& r = node(root);
    r.grad.data[0] = 1.0;
    for (auto it = topo_scratch_.rbegin(); it != topo_scratch_.rend(); ++it) {
      backward_node(*it);
    }
  }

  GradMap out;
  for (const auto& [name, id] : name_index_) {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.visit_epoch == epoch_ && n.grad.data.size() == n.value.data.size()) {
      out.emplace(name, n.grad);
    } else {
      out.emplace(name, Tensor::zeros(n.value.shape));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

Var ParamBinding::operator()(const std::string& name) {
  auto it = leaves_.find(name);
  if (it != leaves_.end()) return it->second;
  const Tensor& value = store_->get(name);
  Var v = differentiable_ ? tape_->param(name, value) : tape_->input(value);
  leaves_.emplace(name, v);
  return v;
}

GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& params, double step) {
  if (!(step > 0.0)) throw ContractError("finite_diff_grad: step must be > 0");
  GradMap out;
  ParamStore work = params.snapshot();
  for (const auto& [name, tensor] : params.entries()) {
    Tensor g = Tensor::zeros(tensor.shape);
    for (std::size_t i = 0; i < tensor.data.size(); ++i) {
      double saved = work.get(name).data[i];
      work.get_mut(name).data[i] = saved + step;
      const double fp = f(work);
      work.get_mut(name).data[i] = saved - step;
      const double fm = f(work);
      work.get_mut(name).data[i] = saved;
      g.data[i] = (fp - fm) / (2.0 * step);
    }
    out.emplace(name, std::move(g));
  }
  return out;
}

double relative_error(double a, double b, double floor) {
  const double denom = std::max({std::fabs(a), std::fabs(b), floor});
  return std::fabs(a - b) / denom;
}

double max_relative_error(const GradMap& a, const GradMap& b, double floor) {
  double worst = 0.0;
  for (const auto& [name, ta] : a) {
    auto it = b.find(name);
    if (it == b.end()) throw ContractError("max_relative_error: missing key '" + name + "'");
    const Tensor& tb = it->second;
    if (!ta.same_shape(tb)) {
      throw ContractError("max_relative_error: shape mismatch on '" + name + "'");
    }
    for (std::size_t i = 0; i < ta.data.size(); ++i) {
      worst = std::max(worst, relative_error(ta.data[i], tb.data[i], floor));
    }
  }
  return worst;
}

}  // namespace mtr
