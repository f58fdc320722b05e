#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "arcdog/common.hpp"

namespace arcdog {

using Shape = std::vector<std::int64_t>;

inline std::string format_shape(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? ", " : "") << s[i];
  os << "]";
  return os.str();
}

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) {
    if (d < 0) throw ShapeError("negative dimension in shape " + format_shape(s));
    n *= d;
  }
  return n;
}

/// Bump allocator for the tensors of one training/evaluation step. A batch
/// allocates tens of multi-megabyte buffers that all die together after the
/// optimizer step; carving them out of reused slabs avoids the per-step
/// page-fault and memset cost of fresh heap blocks. reset() recycles the
/// slabs without unmapping them.
class Arena {
 public:
  double* allocate(std::size_t n) {
    n = (n + 7) & ~std::size_t{7};  // keep 64-byte alignment
    while (current_ < slabs_.size()) {
      Slab& s = slabs_[current_];
      if (s.used + n <= s.cap) {
        double* p = s.mem.get() + s.used;
        s.used += n;
        return p;
      }
      ++current_;
      if (current_ < slabs_.size()) slabs_[current_].used = 0;
    }
    const std::size_t cap = std::max(n, kSlabDoubles);
    slabs_.push_back({std::unique_ptr<double[]>(new double[cap]), cap, n});
    current_ = slabs_.size() - 1;
    return slabs_.back().mem.get();
  }

  void reset() {
    for (auto& s : slabs_) s.used = 0;
    current_ = 0;
  }

  static Arena*& active() {
    thread_local Arena* a = nullptr;
    return a;
  }

 private:
  static constexpr std::size_t kSlabDoubles = std::size_t{8} << 20;  // 64 MB slabs
  struct Slab {
    std::unique_ptr<double[]> mem;
    std::size_t cap = 0;
    std::size_t used = 0;
  };
  std::vector<Slab> slabs_;
  std::size_t current_ = 0;
};

/// Routes DataBuf allocations in this scope to the arena. Buffers from the
/// arena must not outlive its reset; anything that escapes a step (loss
/// values, parameter snapshots) is copied to plain doubles or heap buffers.
class ArenaScope {
 public:
  explicit ArenaScope(Arena& a) : prev_(Arena::active()) { Arena::active() = &a; }
  ~ArenaScope() { Arena::active() = prev_; }
  ArenaScope(const ArenaScope&) = delete;
  ArenaScope& operator=(const ArenaScope&) = delete;

 private:
  Arena* prev_;
};

/// Tensor storage: a contiguous double buffer, arena-backed inside an
/// ArenaScope, heap otherwise. Uninitialized on construction unless a fill
/// value is given. Copies are always deep heap copies.
class DataBuf {
 public:
  DataBuf() = default;

  explicit DataBuf(std::size_t n) { init(n, Arena::active()); }

  DataBuf(std::size_t n, double fill) : DataBuf(n) { std::fill_n(ptr_, n, fill); }

  /// Zero-filled buffer; `allow_arena` false forces heap backing (used for
  /// gradients of long-lived tensors like parameters).
  static DataBuf zeros(std::size_t n, bool allow_arena) {
    DataBuf b;
    b.init(n, allow_arena ? Arena::active() : nullptr);
    std::fill_n(b.ptr_, n, 0.0);
    return b;
  }

  /// Wraps an existing vector without copying (always heap-backed).
  static DataBuf adopt(std::vector<double>&& v) {
    DataBuf b;
    b.vec_ = std::make_unique<std::vector<double>>(std::move(v));
    b.ptr_ = b.vec_->data();
    b.size_ = b.vec_->size();
    return b;
  }

  DataBuf(const DataBuf& o) {
    init(o.size_, nullptr);
    std::copy_n(o.ptr_, o.size_, ptr_);
  }
  DataBuf& operator=(const DataBuf& o) {
    if (this != &o) {
      DataBuf tmp(o);
      *this = std::move(tmp);
    }
    return *this;
  }
  DataBuf(DataBuf&&) noexcept = default;
  DataBuf& operator=(DataBuf&&) noexcept = default;

  double* data() { return ptr_; }
  const double* data() const { return ptr_; }
  std::size_t size() const { return size_; }
  bool empty() const { return size_ == 0; }
  bool arena_backed() const { return arena_; }

  double& operator[](std::size_t i) { return ptr_[i]; }
  const double& operator[](std::size_t i) const { return ptr_[i]; }

  double* begin() { return ptr_; }
  double* end() { return ptr_ + size_; }
  const double* begin() const { return ptr_; }
  const double* end() const { return ptr_ + size_; }

 private:
  void init(std::size_t n, Arena* arena) {
    size_ = n;
    if (arena) {
      ptr_ = arena->allocate(n);
      arena_ = true;
    } else {
      heap_.reset(new double[n]);
      ptr_ = heap_.get();
      arena_ = false;
    }
  }

  double* ptr_ = nullptr;
  std::size_t size_ = 0;
  bool arena_ = false;
  std::unique_ptr<double[]> heap_;
  std::unique_ptr<std::vector<double>> vec_;
};

namespace detail {

struct TensorNode {
  Shape shape;
  DataBuf data;
  DataBuf grad;  // sized lazily to match data
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void()> backward_fn;  // accumulates this node's grad into parents

  void ensure_grad() {
    if (grad.size() != data.size()) grad = DataBuf::zeros(data.size(), data.arena_backed());
  }
  bool has_grad() const { return grad.size() == data.size() && !data.empty(); }
};

// Autodiff tape toggle. Ops record backward closures only when enabled;
// evaluation paths (validation, kNN feature extraction) switch it off.
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

/// Dense row-major 64-bit tensor with reverse-mode autodiff. Copies share
/// the underlying node (shallow); use detach() for an independent value.
/// Forward values are immutable by convention once an op has produced them.
class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  explicit Tensor(Shape shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::TensorNode>()) {
    node_->data = DataBuf(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                       format_shape(shape));
    return from_buf(std::move(shape), DataBuf::adopt(std::move(data)), requires_grad);
  }

  static Tensor from_buf(Shape shape, DataBuf data, bool requires_grad = false) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw ShapeError("buffer length " + std::to_string(data.size()) +
                       " does not match shape " + format_shape(shape));
    Tensor t;
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from_data({}, {v}, requires_grad);
  }

  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t dim(std::int64_t i) const { return node_->shape.at(static_cast<std::size_t>(i)); }
  std::int64_t size() const { return static_cast<std::int64_t>(node_->data.size()); }
  bool defined() const { return !node_->shape.empty() || !node_->data.empty(); }

  std::span<double> data() { return {node_->data.data(), node_->data.size()}; }
  std::span<const double> data() const { return {node_->data.data(), node_->data.size()}; }

  double value() const {
    if (size() != 1)
      throw ShapeError("value() requires a single-element tensor, got shape " + format_shape(shape()));
    return node_->data[0];
  }

  double& at(std::initializer_list<std::int64_t> idx) { return node_->data[offset(idx)]; }
  double at(std::initializer_list<std::int64_t> idx) const { return node_->data[offset(idx)]; }

  double& operator()(std::int64_t i, std::int64_t j) {
    return node_->data[static_cast<std::size_t>(i * node_->shape[1] + j)];
  }
  double operator()(std::int64_t i, std::int64_t j) const {
    return node_->data[static_cast<std::size_t>(i * node_->shape[1] + j)];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return node_->has_grad(); }
  std::span<double> grad() {
    node_->ensure_grad();
    return {node_->grad.data(), node_->grad.size()};
  }
  std::span<const double> grad() const {
    if (!has_grad()) throw NumericError("gradient not computed for this tensor");
    return {node_->grad.data(), node_->grad.size()};
  }
  void zero_grad() {
    if (has_grad()) std::fill_n(node_->grad.data(), node_->grad.size(), 0.0);
  }

  /// Deep copy carrying no graph history; always heap-backed, so snapshots
  /// survive arena resets.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;  // DataBuf copy is a deep heap copy
    return t;
  }

  /// Reverse-mode sweep from a scalar output. Accumulates into the .grad of
  /// every reachable tensor with requires_grad.
  void backward() const {
    if (size() != 1)
      throw ShapeError("backward() requires a scalar output, got shape " + format_shape(shape()));
    std::vector<detail::TensorNode*> order;
    topo_sort(order);
    node_->ensure_grad();
    node_->grad[0] = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward_fn && (*it)->has_grad()) (*it)->backward_fn();
    }
  }

  // --- op-author surface ---
  std::shared_ptr<detail::TensorNode> node() const { return node_; }

 private:
  std::size_t offset(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != node_->shape.size())
      throw ShapeError("index rank mismatch for shape " + format_shape(node_->shape));
    std::size_t off = 0;
    std::size_t k = 0;
    for (auto i : idx) {
      off = off * static_cast<std::size_t>(node_->shape[k]) + static_cast<std::size_t>(i);
      ++k;
    }
    return off;
  }

  void topo_sort(std::vector<detail::TensorNode*>& order) const {
    // iterative DFS post-order over parents
    std::unordered_set<detail::TensorNode*> seen;
    std::vector<std::pair<detail::TensorNode*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        detail::TensorNode* p = n->parents[next++].get();
        if (!seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<detail::TensorNode> node_;
};

namespace detail {

/// Throws NumericError if any entry is NaN/Inf. The fast path accumulates
/// |x| — finite inputs keep the sum finite, any NaN/Inf poisons it — and
/// only on failure rescans for a precise message.
inline void check_finite(std::span<const double> v, const char* op) {
  double acc0 = 0.0, acc1 = 0.0, acc2 = 0.0, acc3 = 0.0;
  std::size_t n = v.size();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    acc0 += std::fabs(v[i]);
    acc1 += std::fabs(v[i + 1]);
    acc2 += std::fabs(v[i + 2]);
    acc3 += std::fabs(v[i + 3]);
  }
  for (; i < n; ++i) acc0 += std::fabs(v[i]);
  if (!std::isfinite(acc0 + acc1 + acc2 + acc3)) {
    for (std::size_t j = 0; j < n; ++j) {
      if (!std::isfinite(v[j]))
        throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(j));
    }
    throw NumericError(std::string(op) + ": value overflow");
  }
}

/// Builds an op result node: wires parents and requires_grad, verifies the
/// output is finite. `make_backward`, when grads are wanted, returns the
/// closure that pushes this node's grad into its parents.
inline Tensor op_result(const char* op, Shape shape, DataBuf data,
                        const std::vector<Tensor>& parents,
                        const std::function<std::function<void()>(TensorNode*)>& make_backward) {
  Tensor out = Tensor::from_buf(std::move(shape), std::move(data));
  check_finite(out.data(), op);
  bool needs = false;
  if (grad_mode()) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    auto n = out.node();
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (const auto& p : parents) n->parents.push_back(p.node());
    if (make_backward) n->backward_fn = make_backward(n.get());
  }
  return out;
}

inline void accumulate(TensorNode* dst, std::span<const double> g) {
  dst->ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) dst->grad[i] += g[i];
}

}  // namespace detail

}  // namespace arcdog
