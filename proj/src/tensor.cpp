#include "flashkit/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>

namespace flashkit {

namespace {

std::atomic<std::uint64_t> next_id{1};
thread_local Tape* current_tape = nullptr;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<double> data) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->id = next_id.fetch_add(1, std::memory_order_relaxed);
  return impl;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

std::size_t normalize_axis(long axis, std::size_t rank) {
  const long r = static_cast<long>(rank);
  if (axis < -r || axis >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

void detail::TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
}

void detail::TensorImpl::accumulate(std::span<const double> g) {
  if (g.size() != data.size()) {
    throw DimensionError("gradient size " + std::to_string(g.size()) + " does not match tensor " +
                         to_string(shape));
  }
  if (grad.empty()) {
    grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) grad[i] += g[i];
}

Tensor::Tensor() = default;

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad) {
  if (flashkit::numel(shape) != data.size()) {
    throw DimensionError("shape " + to_string(shape) + " needs " +
                         std::to_string(flashkit::numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_ = make_impl(std::move(shape), std::move(data));
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = flashkit::numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return Tensor({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(flashkit::numel(shape));
  for (auto& v : data) v = dist(rng);
  return Tensor(std::move(shape), std::move(data), requires_grad);
}

std::size_t Tensor::dim(long axis) const { return impl_->shape[normalize_axis(axis, rank())]; }

std::span<double> Tensor::mutable_data() {
  if (!impl_->is_leaf) throw ContractError("in-place mutation of a non-leaf tensor");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + to_string(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw DimensionError("index rank mismatch for " + to_string(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= impl_->shape[axis]) throw DimensionError("index out of range for " + to_string(shape()));
    flat = flat * impl_->shape[axis] + i;
    ++axis;
  }
  return impl_->data[flat];
}

void Tensor::set_requires_grad(bool flag) {
  if (!impl_->is_leaf) throw ContractError("requires_grad can only be set on leaves");
  impl_->requires_grad = flag;
}

std::span<const double> Tensor::grad() const {
  impl_->ensure_grad();
  return impl_->grad;
}

Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data); }

void Tape::record(std::string_view name, std::initializer_list<Tensor> inputs, const Tensor& output,
                  BackwardFn backward) {
  record(name, std::vector<Tensor>(inputs), output, std::move(backward));
}

void Tape::record(std::string_view name, const std::vector<Tensor>& inputs, const Tensor& output,
                  BackwardFn backward) {
  Entry e;
  e.name = std::string(name);
  e.input_ids.reserve(inputs.size());
  for (const auto& t : inputs) e.input_ids.push_back(t.id());
  e.output_id = output.id();
  e.output = output.impl();
  e.backward = std::move(backward);
  entries_.push_back(std::move(e));
}

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward needs a scalar loss, got shape " + to_string(loss.shape()));
  }
  if (!loss.requires_grad()) return;
  NoGradScope replay_without_recording;
  const double one = 1.0;
  loss.impl()->accumulate(std::span<const double>(&one, 1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    auto& out = *it->output;
    if (out.grad.empty()) continue;
    it->backward(out.grad);
    if (!out.retain_grad && !out.is_leaf && it->output.get() != loss.impl().get()) {
      std::vector<double>().swap(out.grad);
    }
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(current_tape) { current_tape = &tape; }
TapeScope::~TapeScope() { current_tape = previous_; }

NoGradScope::NoGradScope() : previous_(current_tape) { current_tape = nullptr; }
NoGradScope::~NoGradScope() { current_tape = previous_; }

Tape* active_tape() noexcept { return current_tape; }

Tape* recording_tape(std::initializer_list<const Tensor*> inputs) noexcept {
  if (current_tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && t->requires_grad()) return current_tape;
  }
  return nullptr;
}

Tape* recording_tape(const std::vector<Tensor>& inputs) noexcept {
  if (current_tape == nullptr) return nullptr;
  for (const auto& t : inputs) {
    if (t.defined() && t.requires_grad()) return current_tape;
  }
  return nullptr;
}

void mark_differentiable(Tensor& out) {
  out.impl()->requires_grad = true;
  out.impl()->is_leaf = false;
}

void accumulate_grad(const Tensor& t, std::span<const double> g) {
  if (t.defined() && t.requires_grad()) t.impl()->accumulate(g);
}

std::span<double> grad_slot(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return {};
  t.impl()->ensure_grad();
  return t.impl()->grad;
}

}  // namespace flashkit
