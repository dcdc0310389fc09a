#include "advperc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace advperc {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace {

void check_finite(std::span<const double> values, std::string_view what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw TensorError(std::string(what) + ": non-finite value at flat index " +
                        std::to_string(i));
    }
  }
}

thread_local Graph* t_active_graph = nullptr;
thread_local std::uint64_t t_backward_calls = 0;
thread_local bool t_trace_active = false;
thread_local std::uint64_t t_trace_signature = 0;

}  // namespace

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw TensorError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw TensorError("data length " + std::to_string(data.size()) + " does not match shape " +
                      shape_str(shape));
  }
  check_finite(data, "tensor");
  impl_ = std::make_shared<detail::TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({1}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw TensorError("use of undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw TensorError("axis out of range for shape " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return shape_numel(shape()); }

std::span<const double> Tensor::data() const {
  if (!impl_) throw TensorError("use of undefined tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw TensorError("item() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
bool Tensor::has_grad() const { return impl_ && impl_->has_grad; }

std::span<const double> Tensor::grad() const {
  if (!has_grad()) throw TensorError("tensor has no gradient");
  return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data, false); }
Tensor Tensor::as_leaf() const { return Tensor(shape(), impl_->data, true); }

Tensor Graph::record(std::string_view kind, Shape shape, std::vector<double> data,
                     std::vector<Tensor> inputs, BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data), true);
  producer_.emplace(out.id(), records_.size());
  records_.push_back(Record{std::string(kind), std::move(inputs), out, std::move(backward)});
  return out;
}

bool Graph::contains(const Tensor& t) const { return producer_.count(t.id()) != 0; }

void Graph::backward(const Tensor& root) {
  ++t_backward_calls;
  if (!root.defined() || root.numel() != 1) {
    throw TensorError("backward: root must be a scalar tensor");
  }
  auto found = producer_.find(root.id());
  if (found == producer_.end()) throw TensorError("backward: root was not produced on this graph");
  const std::size_t last = found->second;

  auto reset = [](detail::TensorImpl& impl) {
    impl.grad.assign(impl.data.size(), 0.0);
    impl.has_grad = true;
  };
  for (std::size_t r = 0; r <= last; ++r) {
    for (auto& in : records_[r].inputs) {
      if (in.requires_grad()) reset(*in.impl_);
    }
    reset(*records_[r].output.impl_);
  }
  root.impl_->grad[0] = 1.0;

  std::vector<double*> grad_in;
  for (std::size_t r = last + 1; r-- > 0;) {
    auto& rec = records_[r];
    const auto& gout = rec.output.impl_->grad;
    if (std::all_of(gout.begin(), gout.end(), [](double g) { return g == 0.0; })) continue;
    grad_in.clear();
    for (auto& in : rec.inputs) {
      grad_in.push_back(in.requires_grad() ? in.impl_->grad.data() : nullptr);
    }
    rec.backward(gout, grad_in);
  }
  for (std::size_t r = 0; r <= last; ++r) {
    for (auto& in : records_[r].inputs) {
      if (in.requires_grad()) check_finite(in.impl_->grad, "backward of " + records_[r].kind);
    }
  }
}

GraphScope::GraphScope(Graph& graph) : previous_(t_active_graph) { t_active_graph = &graph; }
GraphScope::~GraphScope() { t_active_graph = previous_; }

Graph* active_graph() { return t_active_graph; }

std::uint64_t backward_calls() { return t_backward_calls; }

Tensor make_op(std::string_view kind, Shape shape, std::vector<double> data,
               std::vector<Tensor> inputs, Graph::BackwardFn backward) {
  Graph* graph = t_active_graph;
  const bool participates =
      graph && std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  try {
    if (!participates) return Tensor(std::move(shape), std::move(data), false);
    return graph->record(kind, std::move(shape), std::move(data), std::move(inputs), std::move(backward));
  } catch (const TensorError& e) {
    throw TensorError(std::string(kind) + ": " + e.what());
  }
}

BranchTrace::BranchTrace() : previous_active_(t_trace_active), previous_signature_(t_trace_signature) {
  t_trace_active = true;
  t_trace_signature = 0x9e3779b97f4a7c15ULL;
}

BranchTrace::~BranchTrace() {
  t_trace_active = previous_active_;
  t_trace_signature = previous_signature_;
}

std::uint64_t BranchTrace::signature() const { return t_trace_signature; }

void note_branch(std::uint64_t bits) {
  if (!t_trace_active) return;
  // splitmix64 style mixing keeps the signature order-sensitive
  std::uint64_t z = t_trace_signature ^ (bits + 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  t_trace_signature = z ^ (z >> 31);
}

bool branch_trace_active() { return t_trace_active; }

}  // namespace advperc
