#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "vx/error.hpp"

namespace vx {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& s);
std::string shape_str(const Shape& s);
bool same_shape(const Shape& a, const Shape& b);

// Global scalar-allocation meter. Every tensor storage allocation raises
// `live`; destruction lowers it. `peak` is the high-water mark since the
// last reset and is the artifact's hardware-independent stand-in for
// activation memory.
namespace alloc_stats {
long long live_scalars();
long long peak_scalars();
void reset_peak();
}  // namespace alloc_stats

namespace detail {
struct Storage {
  std::vector<double> v;
  explicit Storage(std::size_t n, double fill);
  explicit Storage(std::vector<double> values);
  Storage(const Storage&) = delete;
  Storage& operator=(const Storage&) = delete;
  ~Storage();
};
}  // namespace detail

class Tape;

// Dense row-major double tensor. Copies share storage (cheap value
// semantics); all ops allocate fresh outputs except reshape, which is a
// zero-copy view of the same buffer.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);

  static Tensor scalar(double v);
  static Tensor from_data(Shape shape, std::vector<double> values);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

  bool defined() const { return st_ != nullptr; }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return st_ ? st_->v.size() : 0; }
  std::size_t extent(std::size_t axis) const;

  double* data() { return st_->v.data(); }
  const double* data() const { return st_->v.data(); }
  double item() const;

  Tensor clone() const;

  bool requires_grad() const { return requires_grad_; }
  Tensor& set_requires_grad(bool on = true) {
    requires_grad_ = on;
    return *this;
  }

  // Identity of the underlying buffer; leaves are keyed by it on the tape.
  const void* storage_key() const { return st_.get(); }

 private:
  std::shared_ptr<detail::Storage> st_;
  Shape shape_;
  bool requires_grad_ = false;
  std::uint64_t tape_gen_ = 0;  // generation of the tape node_ refers to
  int node_ = -1;
  friend class Tape;
  friend Tensor reshape(const Tensor&, Shape);
};

// Reverse-mode tape. Construction installs the tape as the active one for
// the current thread; destruction restores the previous. Ops record nodes
// when any differentiable input participates. Single-threaded by contract.
class Tape {
 public:
  using BackwardFn = std::function<std::vector<Tensor>(const Tensor& upstream)>;

  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  // True when t participates in differentiation on this tape.
  bool tracks(const Tensor& t) const;

  // Records one op node. `inputs` lists all tensor inputs in backward-fn
  // order; only tracked ones become parents. `backward` receives the
  // upstream gradient and returns one gradient per input (entries for
  // untracked inputs are ignored and may be empty).
  void record(const char* op, const std::vector<const Tensor*>& inputs,
              Tensor& out, BackwardFn backward);

  // Seeds d(loss)/d(loss)=1 and sweeps the tape once in reverse creation
  // order. `loss` must be a scalar recorded on this tape.
  void backward(const Tensor& loss);

  bool has_grad(const Tensor& t) const;
  // Gradient of the most recent backward() for t; ContractError if absent.
  const Tensor& grad(const Tensor& t) const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    const char* op;
    std::vector<int> parents;  // aligned with inputs; -1 for untracked
    BackwardFn back;
  };

  int ensure_leaf(const Tensor& t);
  int node_of(const Tensor& t) const;  // -1 when not on this tape
  void accumulate(int node, const Tensor& g);

  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;
  std::vector<bool> grad_owned_;
  std::unordered_map<const void*, int> leaf_ids_;
  std::uint64_t gen_;
  Tape* prev_ = nullptr;
};

// Temporarily disables recording on the active tape (evaluation mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  Tape* saved_;
};

// When enabled, every recorded op validates its output for NaN/Inf and
// throws NumericError naming the op. Off by default; the trainer turns it
// on to locate the first offending op after a NaN loss.
void set_nan_check(bool on);
bool nan_check_enabled();

}  // namespace vx
