#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace flashkit {

using Shape = std::vector<std::size_t>;

/// Raised when operand extents are inconsistent with an operation.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API precondition that is not about shapes is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
/// Row-major strides for `shape`.
std::vector<std::size_t> strides_of(const Shape& shape);
/// Maps a possibly negative axis onto [0, rank); throws DimensionError.
std::size_t normalize_axis(long axis, std::size_t rank);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient reaches the node
  bool requires_grad = false;
  bool retain_grad = false;
  bool is_leaf = true;
  std::uint64_t id = 0;

  void accumulate(std::span<const double> g);
  void ensure_grad();
};

}  // namespace detail

/// Dense row-major tensor of doubles.
///
/// Copies share storage. Values are immutable after construction except for
/// leaves, whose data may be updated in place by an optimizer, and for the
/// gradient slot.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0,
                      bool requires_grad = false);

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t numel() const { return impl_->data.size(); }
  std::size_t dim(long axis) const;

  std::span<const double> data() const { return impl_->data; }
  /// In-place access; only legal on leaves (parameters, inputs).
  std::span<double> mutable_data();
  std::vector<double> to_vector() const { return impl_->data; }
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool flag);
  bool is_leaf() const { return impl_->is_leaf; }
  /// Keeps this non-leaf node's gradient alive through backward.
  void retain_grad() { impl_->retain_grad = true; }

  bool has_grad() const { return !impl_->grad.empty(); }
  /// Gradient view; a node never reached by backward reads as zeros.
  std::span<const double> grad() const;
  void zero_grad() { impl_->grad.clear(); }

  /// Fresh leaf holding a copy of the values, detached from any tape.
  Tensor detach() const;

  std::uint64_t id() const { return impl_->id; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Define-by-run record of differentiable operations.
///
/// Entries are appended in execution order, so every input id precedes the
/// entry that consumes it. `backward` replays entries in exact reverse order
/// and accumulates gradients additively into every input that requires them.
class Tape {
 public:
  using BackwardFn = std::function<void(std::span<const double> grad_out)>;

  struct Entry {
    std::string name;
    std::vector<std::uint64_t> input_ids;
    std::uint64_t output_id = 0;
    std::shared_ptr<detail::TensorImpl> output;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::string_view name, std::initializer_list<Tensor> inputs, const Tensor& output,
              BackwardFn backward);
  void record(std::string_view name, const std::vector<Tensor>& inputs, const Tensor& output,
              BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and replays the tape. `loss` must be scalar.
  void backward(const Tensor& loss);

  std::size_t size() const noexcept { return entries_.size(); }
  const std::vector<Entry>& entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::vector<Entry> entries_;
};

/// Installs a tape as the recording target of the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

/// Disables recording on the current thread (forward-only evaluation).
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape() noexcept;

/// Returns the active tape when any input requires a gradient, else nullptr.
/// An op that gets a tape back must mark its output and record an entry.
Tape* recording_tape(std::initializer_list<const Tensor*> inputs) noexcept;
Tape* recording_tape(const std::vector<Tensor>& inputs) noexcept;

/// Marks an op output as a differentiable non-leaf node.
void mark_differentiable(Tensor& out);

/// Adds `g` into the gradient slot of `t` when it requires a gradient.
void accumulate_grad(const Tensor& t, std::span<const double> g);

/// Zero-initialized (on first use) gradient slot of `t` for in-place
/// accumulation by a custom backward rule. Empty when `t` needs no gradient.
std::span<double> grad_slot(const Tensor& t);

}  // namespace flashkit
