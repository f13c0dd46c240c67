#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mtr/common.hpp"

namespace mtr {

// Dense row-major array of 64-bit floats. Rank 0 = scalar, 1 = vector,
// 2 = matrix; nothing higher is needed here.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d);

  static Tensor scalar(double v);
  static Tensor vector(std::vector<double> v);
  static Tensor zeros(std::vector<std::size_t> shape);

  std::size_t rank() const { return shape.size(); }
  std::size_t numel() const { return data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;
  double value() const;  // scalar accessor; throws ContractError on rank != 0
  bool all_finite() const;
  bool same_shape(const Tensor& o) const { return shape == o.shape; }
  bool operator==(const Tensor& o) const = default;
  std::string shape_str() const;
};

class Tape;

// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;
  bool valid() const { return tape != nullptr && id >= 0; }
};

using GradMap = std::map<std::string, Tensor>;

// Named collection of learnable arrays with snapshot/restore semantics.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor value);
  const Tensor& get(const std::string& name) const;
  Tensor& get_mut(const std::string& name);
  bool contains(const std::string& name) const { return params_.count(name) != 0; }
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;

  const std::map<std::string, Tensor>& entries() const { return params_; }
  std::map<std::string, Tensor>& entries_mut() { return params_; }

  ParamStore snapshot() const { return *this; }
  void restore(const ParamStore& snap) { params_ = snap.params_; }

  // this += a * g for every key present in g (keys must exist here).
  void axpy(double a, const GradMap& g);
  bool equals(const ParamStore& o) const { return params_ == o.params_; }

 private:
  std::map<std::string, Tensor> params_;
};

double grad_dot(const GradMap& a, const GradMap& b);
void grad_axpy(GradMap& acc, double a, const GradMap& g);  // acc += a*g
bool grad_all_finite(const GradMap& g);
GradMap zero_grads_like(const ParamStore& p);

// Reverse-mode tape. Built per forward pass (define-by-run); confined to a
// single thread. backward() may be called repeatedly with different roots;
// each call re-seeds and only touches the root's ancestors.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var input(Tensor value);  // constant leaf, no gradient
  Var param(const std::string& name, const Tensor& value);  // differentiable named leaf

  const Tensor& value(Var v) const;
  std::size_t size() const { return nodes_.size(); }
  void reserve(std::size_t n);

  // Gradient of a scalar root w.r.t. every named leaf on this tape.
  // Leaves the root does not reach get zero gradients.
  GradMap backward(Var root);

  // -- forward ops ------------------------------------------------------
  Var add(Var a, Var b);
  Var add_n(std::span<const Var> xs);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);  // element-wise product
  Var div(Var a, Var b);  // element-wise quotient
  Var neg(Var a);
  Var scale(Var a, double c);
  Var matvec(Var w, Var x);  // [m,n] x [n] -> [m]
  Var dot(Var a, Var b);     // [n] . [n] -> scalar
  Var concat(std::span<const Var> xs);  // vectors -> vector
  Var relu(Var a);
  Var tanh(Var a);
  Var sigmoid(Var a);
  Var exp(Var a);
  Var abs(Var a);
  Var cos(Var a);
  Var sin(Var a);
  Var sum(Var a);   // reduce over all elements -> scalar
  Var mean(Var a);  // reduce over all elements -> scalar
  Var softmax(Var a);  // over the single axis of a vector
  Var gather(Var a, std::vector<std::size_t> indices);  // vector reindex

 private:
  enum class Op : std::uint8_t {
    kLeaf, kAdd, kAddN, kSub, kMul, kDiv, kNeg, kScale, kMatVec, kDot,
    kConcat, kRelu, kTanh, kSigmoid, kExp, kAbs, kCos, kSin, kSum, kMean,
    kSoftmax, kGather,
  };

  struct Node {
    Op op = Op::kLeaf;
    bool requires_grad = false;
    std::int32_t name_id = -1;
    std::uint32_t in_ofs = 0;
    std::uint32_t in_cnt = 0;
    double aux = 0.0;
    std::uint32_t visit_epoch = 0;
    Tensor value;
    Tensor grad;
    std::vector<std::size_t> indices;  // kGather only
  };

  Var emit(Op op, Tensor value, std::span<const Var> inputs, double aux = 0.0);
  void backward_node(std::int32_t id);
  Node& node(Var v);
  const Node& cnode(Var v) const;
  void check_same_tape(Var v, const char* op) const;

  std::vector<Node> nodes_;
  std::vector<std::int32_t> in_pool_;
  std::vector<std::string> names_;
  std::map<std::string, std::int32_t> name_index_;
  std::uint32_t epoch_ = 0;
  std::vector<std::int32_t> topo_scratch_;
  std::vector<std::int32_t> stack_scratch_;
};

// Binds a ParamStore to a tape, creating at most one leaf per parameter.
class ParamBinding {
 public:
  ParamBinding(Tape& tape, const ParamStore& store, bool differentiable = true)
      : tape_(&tape), store_(&store), differentiable_(differentiable) {}

  Var operator()(const std::string& name);
  const ParamStore& store() const { return *store_; }
  bool differentiable() const { return differentiable_; }

 private:
  Tape* tape_;
  const ParamStore* store_;
  bool differentiable_;
  std::map<std::string, Var> leaves_;
};

// Central-difference gradient estimate, (f(p+h) - f(p-h)) / 2h per
// coordinate. The verification oracle for backward().
GradMap finite_diff_grad(const std::function<double(const ParamStore&)>& f,
                         const ParamStore& params, double step);

// |a-b| / max(|a|, |b|, floor); the comparison used by all gradient checks.
double relative_error(double a, double b, double floor = 1e-6);
double max_relative_error(const GradMap& a, const GradMap& b, double floor = 1e-6);

}  // namespace mtr
