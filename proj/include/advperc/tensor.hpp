#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace advperc {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Raised for shape mismatches, non-finite values and misuse of the graph.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  bool has_grad = false;
  std::vector<double> grad;
};
}  // namespace detail

/// Dense row-major array. Copies share storage; data is never mutated after
/// construction, only the gradient buffer is filled in by Graph::backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  std::span<const double> data() const;
  double item() const;
  double at(std::size_t flat) const { return data()[flat]; }

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const double> grad() const;

  /// Same values, no gradient participation.
  Tensor detach() const;
  /// Copy of this tensor marked as a gradient leaf.
  Tensor as_leaf() const;

  const detail::TensorImpl* id() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
  friend class Graph;
};

/// Tape of recorded operations. Activate with GraphScope; while no graph is
/// active, operations compute values only and record nothing.
class Graph {
 public:
  /// grad_in[i] is null when input i does not take part in differentiation.
  using BackwardFn = std::function<void(std::span<const double> grad_out,
                                        std::span<double* const> grad_in)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Builds the output tensor and records it when any input requires grad.
  Tensor record(std::string_view kind, Shape shape, std::vector<double> data,
                std::vector<Tensor> inputs, BackwardFn backward);

  /// Populates grad on every requires_grad tensor that participated.
  void backward(const Tensor& root);

  std::size_t size() const { return records_.size(); }
  bool contains(const Tensor& t) const;

 private:
  struct Record {
    std::string kind;
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };
  std::vector<Record> records_;
  std::unordered_map<const detail::TensorImpl*, std::size_t> producer_;
};

/// RAII activation of a graph on the current thread.
class GraphScope {
 public:
  explicit GraphScope(Graph& graph);
  ~GraphScope();
  GraphScope(const GraphScope&) = delete;
  GraphScope& operator=(const GraphScope&) = delete;

 private:
  Graph* previous_;
};

Graph* active_graph();

/// Number of Graph::backward calls made on this thread. Used to prove the
/// black-box path never differentiates.
std::uint64_t backward_calls();

/// Builds an op output: records on the active graph when an input requires
/// grad, otherwise returns a plain tensor. Throws on non-finite output.
Tensor make_op(std::string_view kind, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, Graph::BackwardFn backward);

/// Piecewise ops (relu masks, probability floors, sort orders) fold their
/// branch decisions into a per-thread signature while a BranchTrace is alive.
/// Two evaluations with equal signatures lie in the same smooth piece.
class BranchTrace {
 public:
  BranchTrace();
  ~BranchTrace();
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;
  std::uint64_t signature() const;

 private:
  bool previous_active_;
  std::uint64_t previous_signature_;
};

void note_branch(std::uint64_t bits);
bool branch_trace_active();

}  // namespace advperc
