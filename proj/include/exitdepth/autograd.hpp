#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "exitdepth/tensor.hpp"

namespace exitdepth {

/// A named trainable array with its accumulated gradient.
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;
};

/// Owns parameters with stable addresses, in registration order.
class ParameterStore {
 public:
  Parameter& add(std::string name, Tensor value);
  Parameter& get(const std::string& name);
  const Parameter& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.contains(name); }

  std::size_t size() const noexcept { return params_.size(); }
  /// Total number of scalar values.
  std::size_t scalar_count() const noexcept;
  void zero_grad();
  double grad_norm() const;

  Parameter& operator[](std::size_t i) { return *params_[i]; }
  const Parameter& operator[](std::size_t i) const { return *params_[i]; }

  ParameterStore() = default;
  ParameterStore(const ParameterStore& other);
  ParameterStore& operator=(const ParameterStore& other);
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

 private:
  std::vector<std::unique_ptr<Parameter>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

class Tape;

/// Handle to a value recorded on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  double item() const { return value().item(); }
  Tape& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Records forward operations; replays them in reverse to accumulate gradients.
/// A tape supports exactly one backward pass.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& out_grad)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf bound to a parameter; repeated calls return the same node.
  Var param(Parameter& p);

  /// Accumulates d(loss)/d(param) into every bound parameter's grad.
  void backward(const Var& loss);

  const Tensor& value(int id) const { return nodes_[static_cast<std::size_t>(id)].value; }
  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  /// Gradient buffer of a node, allocated as zeros on first use.
  Tensor& grad(int id);
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Used by op implementations. `fn` may be empty when nothing requires grad.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter* param = nullptr;
  };
  Var push(const char* op, Tensor value, bool requires_grad, BackwardFn fn);

  std::deque<Node> nodes_;  // stable addresses: Var::value() references survive new ops
  std::unordered_map<const Parameter*, int> param_nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Differentiable operations. All inputs must live on the same tape.

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
/// Elementwise product.
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var transpose(const Var& x);
/// x[m x n] + bias[n] on every row.
Var add_bias(const Var& x, const Var& bias);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var log_sigmoid(const Var& x);
/// Row-wise (last axis) softmax.
Var softmax(const Var& x);
Var log_softmax(const Var& x);
Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
/// Rows of `table` selected by ids.
Var embedding_lookup(const Var& table, std::span<const int> ids);
/// Sum over rows of -log softmax(logits[r])[targets[r]].
Var cross_entropy(const Var& logits, std::span<const int> targets);
Var cross_entropy(const Var& logits, int target);
/// out[r] = x[r, cols[r]].
Var pick(const Var& x, std::span<const int> cols);
Var sum(const Var& x);
Var mean(const Var& x);

/// Forward identity; backward multiplies the incoming gradient by gamma.
Var scale_gradient(const Var& x, double gamma);
/// Forward identity; no gradient flows back.
Var stop_gradient(const Var& x);

/// Row i of the output is choices[i]'s row i; all candidates share a shape.
Var select_rows(const std::vector<Var>& candidates, std::span<const int> choice);
Var gather_rows(const Var& x, std::span<const std::size_t> rows);
/// Mean of each [begin, end) row segment: output has one row per segment.
Var segment_mean(const Var& x, std::span<const std::pair<std::size_t, std::size_t>> segments);
Var concat_cols(const std::vector<Var>& parts);

/// Key range [begin, end) a query row may attend to.
struct AttentionSpan {
  std::size_t begin = 0;
  std::size_t end = 0;
};

/// Multi-head attention where query row i sees key/value rows spans[i].
Var attention(const Var& query, const Var& keys, const Var& vals, std::size_t heads,
              std::span<const AttentionSpan> spans);

}  // namespace exitdepth
