#include "vx/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>

namespace vx {

namespace {
std::atomic<long long> g_live{0};
std::atomic<long long> g_peak{0};
std::atomic<std::uint64_t> g_tape_gen{0};
thread_local Tape* g_active_tape = nullptr;
bool g_nan_check = false;

void bump_live(long long delta) {
  const long long now = g_live.fetch_add(delta, std::memory_order_relaxed) + delta;
  if (delta > 0) {
    long long prev = g_peak.load(std::memory_order_relaxed);
    while (prev < now &&
           !g_peak.compare_exchange_weak(prev, now, std::memory_order_relaxed)) {
    }
  }
}
}  // namespace

namespace alloc_stats {
long long live_scalars() { return g_live.load(std::memory_order_relaxed); }
long long peak_scalars() { return g_peak.load(std::memory_order_relaxed); }
void reset_peak() { g_peak.store(g_live.load(std::memory_order_relaxed)); }
}  // namespace alloc_stats

std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

bool same_shape(const Shape& a, const Shape& b) { return a == b; }

namespace detail {
Storage::Storage(std::size_t n, double fill) : v(n, fill) {
  bump_live(static_cast<long long>(n));
}
Storage::Storage(std::vector<double> values) : v(std::move(values)) {
  bump_live(static_cast<long long>(v.size()));
}
Storage::~Storage() { bump_live(-static_cast<long long>(v.size())); }
}  // namespace detail

Tensor::Tensor(Shape shape, double fill)
    : st_(std::make_shared<detail::Storage>(numel(shape), fill)),
      shape_(std::move(shape)) {
  for (std::size_t e : shape_) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape_));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t{Shape{}};
  t.data()[0] = v;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  Tensor t;
  t.st_ = std::make_shared<detail::Storage>(std::move(values));
  t.shape_ = std::move(shape);
  return t;
}

std::size_t Tensor::extent(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape_));
  }
  return shape_[axis];
}

double Tensor::item() const {
  if (size() != 1) {
    throw ContractError("item(): tensor has " + std::to_string(size()) +
                        " elements, expected 1");
  }
  return data()[0];
}

Tensor Tensor::clone() const {
  if (!defined()) return Tensor();
  Tensor out(shape_);
  std::copy(st_->v.begin(), st_->v.end(), out.data());
  return out;
}

// ------------------------------ Tape ---------------------------------

Tape::Tape() : gen_(g_tape_gen.fetch_add(1) + 1), prev_(g_active_tape) {
  g_active_tape = this;
}

Tape::~Tape() { g_active_tape = prev_; }

Tape* Tape::active() { return g_active_tape; }

bool Tape::tracks(const Tensor& t) const {
  if (!t.defined()) return false;
  if (t.requires_grad_ && t.node_ < 0) return true;  // untaped leaf
  return t.node_ >= 0 && t.tape_gen_ == gen_;
}

int Tape::ensure_leaf(const Tensor& t) {
  auto it = leaf_ids_.find(t.storage_key());
  if (it != leaf_ids_.end()) return it->second;
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(Node{"leaf", {}, nullptr});
  leaf_ids_.emplace(t.storage_key(), id);
  return id;
}

int Tape::node_of(const Tensor& t) const {
  if (t.node_ >= 0 && t.tape_gen_ == gen_) return t.node_;
  if (t.requires_grad_) {
    auto it = leaf_ids_.find(t.storage_key());
    if (it != leaf_ids_.end()) return it->second;
  }
  return -1;
}

void Tape::record(const char* op, const std::vector<const Tensor*>& inputs,
                  Tensor& out, BackwardFn backward) {
  if (g_nan_check) {
    const double* p = out.data();
    for (std::size_t i = 0, n = out.size(); i < n; ++i) {
      if (!std::isfinite(p[i])) {
        throw NumericError(std::string("non-finite value produced by op '") +
                           op + "'");
      }
    }
  }
  Node node;
  node.op = op;
  node.back = std::move(backward);
  node.parents.reserve(inputs.size());
  for (const Tensor* in : inputs) {
    if (tracks(*in)) {
      const int id = in->node_ >= 0 && in->tape_gen_ == gen_
                         ? in->node_
                         : ensure_leaf(*in);
      node.parents.push_back(id);
    } else {
      node.parents.push_back(-1);
    }
  }
  const int id = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  out.node_ = id;
  out.tape_gen_ = gen_;
  out.requires_grad_ = true;
}

void Tape::accumulate(int node, const Tensor& g) {
  Tensor& slot = grads_[static_cast<std::size_t>(node)];
  if (!slot.defined()) {
    slot = g;  // may alias a forward tensor; cloned before any mutation
    grad_owned_[static_cast<std::size_t>(node)] = false;
    return;
  }
  if (!same_shape(slot.shape(), g.shape())) {
    throw ContractError("gradient shape " + shape_str(g.shape()) +
                        " does not match accumulated " + shape_str(slot.shape()));
  }
  if (!grad_owned_[static_cast<std::size_t>(node)]) {
    slot = slot.clone();
    grad_owned_[static_cast<std::size_t>(node)] = true;
  }
  double* d = slot.data();
  const double* s = g.data();
  for (std::size_t i = 0, n = slot.size(); i < n; ++i) d[i] += s[i];
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " +
                        shape_str(loss.shape()));
  }
  const int lid = node_of(loss);
  if (lid < 0) throw ContractError("backward: loss is not on this tape");

  NoGradGuard eval;  // the sweep itself must not record
  grads_.assign(nodes_.size(), Tensor());
  grad_owned_.assign(nodes_.size(), false);
  grads_[static_cast<std::size_t>(lid)] = Tensor(loss.shape(), 1.0);
  grad_owned_[static_cast<std::size_t>(lid)] = true;

  for (int i = lid; i >= 0; --i) {
    const Node& node = nodes_[static_cast<std::size_t>(i)];
    const Tensor& g = grads_[static_cast<std::size_t>(i)];
    if (!g.defined() || !node.back) continue;
    std::vector<Tensor> parent_grads = node.back(g);
    if (parent_grads.size() != node.parents.size()) {
      throw ContractError(std::string("op '") + node.op +
                          "' returned a wrong number of gradients");
    }
    for (std::size_t j = 0; j < node.parents.size(); ++j) {
      const int p = node.parents[j];
      if (p < 0) continue;
      if (!parent_grads[j].defined()) {
        throw ContractError(std::string("op '") + node.op +
                            "' missing gradient for tracked input");
      }
      accumulate(p, parent_grads[j]);
    }
    // Upstream gradients for interior nodes are dead after use.
    if (i != lid) grads_[static_cast<std::size_t>(i)] = Tensor();
  }
}

bool Tape::has_grad(const Tensor& t) const {
  const int id = node_of(t);
  return id >= 0 && static_cast<std::size_t>(id) < grads_.size() &&
         grads_[static_cast<std::size_t>(id)].defined();
}

const Tensor& Tape::grad(const Tensor& t) const {
  const int id = node_of(t);
  if (id < 0 || static_cast<std::size_t>(id) >= grads_.size() ||
      !grads_[static_cast<std::size_t>(id)].defined()) {
    throw ContractError("no gradient recorded for tensor");
  }
  return grads_[static_cast<std::size_t>(id)];
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }
NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

void set_nan_check(bool on) { g_nan_check = on; }
bool nan_check_enabled() { return g_nan_check; }

}  // namespace vx
