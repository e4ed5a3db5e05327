#include "lfs/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

namespace lfs {

using EigenRowMat =
    Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EigenRowMat>;
using MapConstMat = Eigen::Map<const EigenRowMat>;

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

void check_finite(const std::vector<real>& values, const char* context) {
  for (real v : values) {
    if (!std::isfinite(v)) {
      throw NonFiniteError(std::string(context) +
                           ": non-finite value produced");
    }
  }
}

void TensorNode::ensure_grad() {
  if (grad.empty()) grad.assign(data->size(), real{0});
}

namespace {

std::shared_ptr<TensorNode> make_node(Shape shape, std::vector<real> data,
                                      bool requires_grad) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::make_shared<std::vector<real>>(std::move(data));
  node->requires_grad = requires_grad;
  return node;
}

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw DimensionError("tensor rank must be >= 1");
  for (int64_t e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive");
  }
}

// Accumulate src into dst (same length).
void axpy(std::vector<real>& dst, const std::vector<real>& src) {
  for (size_t i = 0; i < src.size(); ++i) dst[i] += src[i];
}

}  // namespace

Tensor Tensor::wrap(std::shared_ptr<TensorNode> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  validate_shape(shape);
  const int64_t n = shape_numel(shape);
  return wrap(make_node(std::move(shape), std::vector<real>(n, real{0}),
                        requires_grad));
}

Tensor Tensor::full(Shape shape, real value, bool requires_grad) {
  validate_shape(shape);
  const int64_t n = shape_numel(shape);
  return wrap(
      make_node(std::move(shape), std::vector<real>(n, value), requires_grad));
}

Tensor Tensor::from_data(Shape shape, std::vector<real> data,
                         bool requires_grad) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw DimensionError("from_data: " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  return wrap(make_node(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(real value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }
int Tensor::rank() const { return static_cast<int>(node_->shape.size()); }

int64_t Tensor::dim(int axis) const {
  if (axis < 0 || axis >= rank()) throw DimensionError("dim: axis out of range");
  return node_->shape[axis];
}

int64_t Tensor::numel() const { return node_->numel(); }

const std::vector<real>& Tensor::data() const { return *node_->data; }

std::vector<real>& Tensor::mutable_data() { return *node_->data; }

real Tensor::value() const {
  if (numel() != 1) throw DimensionError("value(): tensor is not scalar");
  return (*node_->data)[0];
}

real Tensor::at(std::initializer_list<int64_t> idx) const {
  if (static_cast<int>(idx.size()) != rank())
    throw DimensionError("at(): index rank mismatch");
  int64_t flat = 0;
  int axis = 0;
  for (int64_t i : idx) {
    if (i < 0 || i >= node_->shape[axis])
      throw DimensionError("at(): index out of range");
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return (*node_->data)[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

const std::vector<real>& Tensor::grad() const { return node_->grad; }

void Tensor::zero_grad() { node_->grad.clear(); }

void Tensor::backward() {
  if (numel() != 1)
    throw DimensionError("backward(): root must be a scalar");
  // Iterative post-order topo sort; graphs can be deep through four conv
  // blocks plus the encoder, so recursion is avoided.
  std::vector<TensorNode*> topo;
  std::unordered_set<TensorNode*> done;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node)) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      TensorNode* parent = node->parents[next].get();
      ++next;
      if (!done.count(parent) && parent->requires_grad)
        stack.emplace_back(parent, 0);
    } else {
      done.insert(node);
      topo.push_back(node);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  node_->grad[0] = real{1};
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    TensorNode* node = *it;
    if (node->backward_fn && node->requires_grad && !node->grad.empty())
      node->backward_fn(*node);
  }
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  check_finite(out, "add");
  auto node = make_node(a.shape(), std::move(out),
                        a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr()](TensorNode& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        axpy(pa->grad, n.grad);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        axpy(pb->grad, n.grad);
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  check_finite(out, "sub");
  auto node = make_node(a.shape(), std::move(out),
                        a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr()](TensorNode& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        axpy(pa->grad, n.grad);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i) pb->grad[i] -= n.grad[i];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  check_finite(out, "mul");
  auto node = make_node(a.shape(), std::move(out),
                        a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr()](TensorNode& n) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        const auto& bv2 = *pb->data;
        for (size_t i = 0; i < n.grad.size(); ++i)
          pa->grad[i] += n.grad[i] * bv2[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        const auto& av2 = *pa->data;
        for (size_t i = 0; i < n.grad.size(); ++i)
          pb->grad[i] += n.grad[i] * av2[i];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "div");
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] / bv[i];
  check_finite(out, "div");
  auto node = make_node(a.shape(), std::move(out),
                        a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr()](TensorNode& n) {
      const auto& av2 = *pa->data;
      const auto& bv2 = *pb->data;
      if (pa->requires_grad) {
        pa->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
          pa->grad[i] += n.grad[i] / bv2[i];
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (size_t i = 0; i < n.grad.size(); ++i)
          pb->grad[i] -= n.grad[i] * av2[i] / (bv2[i] * bv2[i]);
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor neg(const Tensor& a) { return scale(a, real{-1}); }

Tensor scale(const Tensor& a, real factor) {
  const auto& av = a.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] * factor;
  check_finite(out, "scale");
  auto node = make_node(a.shape(), std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), factor](TensorNode& n) {
      pa->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[i] += n.grad[i] * factor;
    };
  }
  return Tensor::wrap(node);
}

Tensor exp_elem(const Tensor& a) {
  const auto& av = a.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = std::exp(av[i]);
  check_finite(out, "exp");
  auto node = make_node(a.shape(), std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr()};
    node->backward_fn = [pa = a.node_ptr()](TensorNode& n) {
      pa->ensure_grad();
      const auto& y = *n.data;
      for (size_t i = 0; i < n.grad.size(); ++i)
        pa->grad[i] += n.grad[i] * y[i];
    };
  }
  return Tensor::wrap(node);
}

Tensor relu(const Tensor& a) {
  const auto& av = a.data();
  std::vector<real> out(av.size());
  for (size_t i = 0; i < av.size(); ++i) out[i] = av[i] > 0 ? av[i] : real{0};
  auto node = make_node(a.shape(), std::move(out), a.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr()};
    node->backward_fn = [pa = a.node_ptr()](TensorNode& n) {
      pa->ensure_grad();
      const auto& x = *pa->data;
      for (size_t i = 0; i < n.grad.size(); ++i)
        if (x[i] > 0) pa->grad[i] += n.grad[i];
    };
  }
  return Tensor::wrap(node);
}

Tensor add_rowvec(const Tensor& x, const Tensor& b) {
  if (x.rank() != 2 || b.rank() != 1 || x.dim(1) != b.dim(0))
    throw DimensionError("add_rowvec: want [n,d] + [d], got " +
                         shape_str(x.shape()) + " + " + shape_str(b.shape()));
  const int64_t n = x.dim(0), d = x.dim(1);
  const auto& xv = x.data();
  const auto& bv = b.data();
  std::vector<real> out(xv.size());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] + bv[j];
  check_finite(out, "add_rowvec");
  auto node = make_node(x.shape(), std::move(out),
                        x.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), b.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), pb = b.node_ptr(), n,
                         d](TensorNode& nd) {
      if (px->requires_grad) {
        px->ensure_grad();
        axpy(px->grad, nd.grad);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t j = 0; j < d; ++j) pb->grad[j] += nd.grad[i * d + j];
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) throw DimensionError("scale_by: scale must be scalar");
  const real sv = s.data()[0];
  const auto& xv = x.data();
  std::vector<real> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] * sv;
  check_finite(out, "scale_by");
  auto node = make_node(x.shape(), std::move(out),
                        x.requires_grad() || s.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), s.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), ps = s.node_ptr()](TensorNode& n) {
      if (px->requires_grad) {
        px->ensure_grad();
        const real sv2 = (*ps->data)[0];
        for (size_t i = 0; i < n.grad.size(); ++i)
          px->grad[i] += n.grad[i] * sv2;
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        const auto& xv2 = *px->data;
        real acc = 0;
        for (size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * xv2[i];
        ps->grad[0] += acc;
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != x.numel())
    throw DimensionError("reshape: numel mismatch " + shape_str(x.shape()) +
                         " -> " + shape_str(shape));
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = x.node()->data;  // storage shared, no copy
  node->requires_grad = x.requires_grad();
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr()](TensorNode& n) {
      px->ensure_grad();
      axpy(px->grad, n.grad);
    };
  }
  return Tensor::wrap(node);
}

Tensor transpose(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("transpose: want rank-2 tensor");
  const int64_t n = x.dim(0), m = x.dim(1);
  const auto& xv = x.data();
  std::vector<real> out(xv.size());
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) out[j * n + i] = xv[i * m + j];
  auto node = make_node({m, n}, std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), n, m](TensorNode& nd) {
      px->ensure_grad();
      for (int64_t j = 0; j < m; ++j)
        for (int64_t i = 0; i < n; ++i)
          px->grad[i * m + j] += nd.grad[j * n + i];
    };
  }
  return Tensor::wrap(node);
}

Tensor slice_rows(const Tensor& x, int64_t row0, int64_t row1) {
  if (x.rank() != 2) throw DimensionError("slice_rows: want rank-2 tensor");
  const int64_t n = x.dim(0), m = x.dim(1);
  if (row0 < 0 || row1 > n || row0 >= row1)
    throw DimensionError("slice_rows: bad range");
  const auto& xv = x.data();
  std::vector<real> out(xv.begin() + row0 * m, xv.begin() + row1 * m);
  auto node = make_node({row1 - row0, m}, std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), row0, m](TensorNode& nd) {
      px->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i)
        px->grad[row0 * m + i] += nd.grad[i];
    };
  }
  return Tensor::wrap(node);
}

Tensor slice_cols(const Tensor& x, int64_t col0, int64_t col1) {
  if (x.rank() != 2) throw DimensionError("slice_cols: want rank-2 tensor");
  const int64_t n = x.dim(0), m = x.dim(1);
  if (col0 < 0 || col1 > m || col0 >= col1)
    throw DimensionError("slice_cols: bad range");
  const int64_t w = col1 - col0;
  const auto& xv = x.data();
  std::vector<real> out(n * w);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < w; ++j) out[i * w + j] = xv[i * m + col0 + j];
  auto node = make_node({n, w}, std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), n, m, col0, w](TensorNode& nd) {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < w; ++j)
          px->grad[i * m + col0 + j] += nd.grad[i * w + j];
    };
  }
  return Tensor::wrap(node);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no parts");
  const int64_t m = parts[0].rank() == 2 ? parts[0].dim(1) : -1;
  if (m < 0) throw DimensionError("concat_rows: want rank-2 parts");
  int64_t total = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.rank() != 2 || p.dim(1) != m)
      throw DimensionError("concat_rows: column mismatch");
    total += p.dim(0);
    needs_grad = needs_grad || p.requires_grad();
  }
  std::vector<real> out;
  out.reserve(total * m);
  for (const auto& p : parts)
    out.insert(out.end(), p.data().begin(), p.data().end());
  auto node = make_node({total, m}, std::move(out), needs_grad);
  if (needs_grad) {
    for (const auto& p : parts) node->parents.push_back(p.node_ptr());
    node->backward_fn = [m](TensorNode& nd) {
      int64_t offset = 0;
      for (auto& parent : nd.parents) {
        const int64_t len = parent->numel();
        if (parent->requires_grad) {
          parent->ensure_grad();
          for (int64_t i = 0; i < len; ++i)
            parent->grad[i] += nd.grad[offset + i];
        }
        offset += len;
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  auto cols_of = [](const Tensor& t) -> int64_t {
    return t.rank() == 1 ? 1 : t.dim(1);
  };
  auto rows_of = [](const Tensor& t) -> int64_t { return t.dim(0); };
  const int64_t n = rows_of(parts[0]);
  int64_t total_cols = 0;
  bool needs_grad = false;
  for (const auto& p : parts) {
    if (p.rank() > 2 || rows_of(p) != n)
      throw DimensionError("concat_cols: row mismatch");
    total_cols += cols_of(p);
    needs_grad = needs_grad || p.requires_grad();
  }
  std::vector<real> out(n * total_cols);
  int64_t col = 0;
  for (const auto& p : parts) {
    const int64_t w = cols_of(p);
    const auto& pv = p.data();
    for (int64_t i = 0; i < n; ++i)
      for (int64_t j = 0; j < w; ++j)
        out[i * total_cols + col + j] = pv[i * w + j];
    col += w;
  }
  auto node = make_node({n, total_cols}, std::move(out), needs_grad);
  if (needs_grad) {
    std::vector<int64_t> widths;
    for (const auto& p : parts) {
      node->parents.push_back(p.node_ptr());
      widths.push_back(cols_of(p));
    }
    node->backward_fn = [n, total_cols, widths](TensorNode& nd) {
      int64_t col2 = 0;
      for (size_t k = 0; k < nd.parents.size(); ++k) {
        auto& parent = nd.parents[k];
        const int64_t w = widths[k];
        if (parent->requires_grad) {
          parent->ensure_grad();
          for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < w; ++j)
              parent->grad[i * w + j] += nd.grad[i * total_cols + col2 + j];
        }
        col2 += w;
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError("matmul: want rank-2 tensors");
  const int64_t m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw DimensionError("matmul: inner extents disagree " +
                         shape_str(a.shape()) + " x " + shape_str(b.shape()));
  std::vector<real> out(m * n);
  {
    MapConstMat ma(a.data().data(), m, k);
    MapConstMat mb(b.data().data(), k, n);
    MapMat mo(out.data(), m, n);
    mo.noalias() = ma * mb;
  }
  check_finite(out, "matmul");
  auto node = make_node({m, n}, std::move(out),
                        a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr(), m, k,
                         n](TensorNode& nd) {
      MapConstMat g(nd.grad.data(), m, n);
      if (pa->requires_grad) {
        pa->ensure_grad();
        MapConstMat mb(pb->data->data(), k, n);
        MapMat ga(pa->grad.data(), m, k);
        ga.noalias() += g * mb.transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MapConstMat ma(pa->data->data(), m, k);
        MapMat gb(pb->grad.data(), k, n);
        gb.noalias() += ma.transpose() * g;
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor add_scaled_identity(const Tensor& a, const Tensor& s, real factor) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("add_scaled_identity: want square matrix");
  if (s.numel() != 1)
    throw DimensionError("add_scaled_identity: scale must be scalar");
  const int64_t n = a.dim(0);
  const real add_v = factor * s.data()[0];
  std::vector<real> out = a.data();
  for (int64_t i = 0; i < n; ++i) out[i * n + i] += add_v;
  check_finite(out, "add_scaled_identity");
  auto node = make_node(a.shape(), std::move(out),
                        a.requires_grad() || s.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), s.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), ps = s.node_ptr(), n,
                         factor](TensorNode& nd) {
      if (pa->requires_grad) {
        pa->ensure_grad();
        axpy(pa->grad, nd.grad);
      }
      if (ps->requires_grad) {
        ps->ensure_grad();
        real trace = 0;
        for (int64_t i = 0; i < n; ++i) trace += nd.grad[i * n + i];
        ps->grad[0] += factor * trace;
      }
    };
  }
  return Tensor::wrap(node);
}

namespace {

// Plain Cholesky, row-major lower factor. Throws when a pivot collapses.
std::vector<real> cholesky_lower(const std::vector<real>& a, int64_t n) {
  std::vector<real> ell(n * n, real{0});
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t j = 0; j <= i; ++j) {
      real acc = a[i * n + j];
      for (int64_t k = 0; k < j; ++k) acc -= ell[i * n + k] * ell[j * n + k];
      if (i == j) {
        if (!(acc > real{0}) || !std::isfinite(acc))
          throw SingularityError(
              "spd_solve: matrix is singular or not positive definite");
        ell[i * n + i] = std::sqrt(acc);
      } else {
        ell[i * n + j] = acc / ell[j * n + j];
      }
    }
  }
  return ell;
}

// Solve (L L^T) X = B in place of a copy of B.
std::vector<real> cholesky_solve(const std::vector<real>& ell, int64_t n,
                                 const real* b, int64_t m) {
  std::vector<real> x(b, b + n * m);
  // forward: L Y = B
  for (int64_t i = 0; i < n; ++i) {
    for (int64_t c = 0; c < m; ++c) {
      real acc = x[i * m + c];
      for (int64_t k = 0; k < i; ++k) acc -= ell[i * n + k] * x[k * m + c];
      x[i * m + c] = acc / ell[i * n + i];
    }
  }
  // backward: L^T X = Y
  for (int64_t i = n - 1; i >= 0; --i) {
    for (int64_t c = 0; c < m; ++c) {
      real acc = x[i * m + c];
      for (int64_t k = i + 1; k < n; ++k) acc -= ell[k * n + i] * x[k * m + c];
      x[i * m + c] = acc / ell[i * n + i];
    }
  }
  return x;
}

}  // namespace

Tensor spd_solve(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1))
    throw DimensionError("spd_solve: want square matrix");
  if (b.rank() != 2 || b.dim(0) != a.dim(0))
    throw DimensionError("spd_solve: rhs rows must match matrix");
  const int64_t n = a.dim(0), m = b.dim(1);
  auto ell = std::make_shared<std::vector<real>>(cholesky_lower(a.data(), n));
  std::vector<real> x = cholesky_solve(*ell, n, b.data().data(), m);
  check_finite(x, "spd_solve");
  auto node =
      make_node({n, m}, std::move(x), a.requires_grad() || b.requires_grad());
  if (node->requires_grad) {
    node->parents = {a.node_ptr(), b.node_ptr()};
    node->backward_fn = [pa = a.node_ptr(), pb = b.node_ptr(), ell, n,
                         m](TensorNode& nd) {
      // gB = A^-1 gX;  gA = -gB X^T
      std::vector<real> gb = cholesky_solve(*ell, n, nd.grad.data(), m);
      if (pb->requires_grad) {
        pb->ensure_grad();
        axpy(pb->grad, gb);
      }
      if (pa->requires_grad) {
        pa->ensure_grad();
        MapConstMat mgb(gb.data(), n, m);
        MapConstMat mx(nd.data->data(), n, m);
        MapMat mga(pa->grad.data(), n, n);
        mga.noalias() -= mgb * mx.transpose();
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor row_l2_normalize(const Tensor& x, real eps) {
  if (x.rank() != 2) throw DimensionError("row_l2_normalize: want rank-2");
  const int64_t n = x.dim(0), d = x.dim(1);
  const auto& xv = x.data();
  std::vector<real> out(xv.size());
  auto norms = std::make_shared<std::vector<real>>(n);
  for (int64_t i = 0; i < n; ++i) {
    real sq = 0;
    for (int64_t j = 0; j < d; ++j) sq += xv[i * d + j] * xv[i * d + j];
    const real norm = std::sqrt(sq + eps);
    (*norms)[i] = norm;
    for (int64_t j = 0; j < d; ++j) out[i * d + j] = xv[i * d + j] / norm;
  }
  check_finite(out, "row_l2_normalize");
  auto node = make_node(x.shape(), std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), norms, n, d](TensorNode& nd) {
      px->ensure_grad();
      const auto& y = *nd.data;
      for (int64_t i = 0; i < n; ++i) {
        const real norm = (*norms)[i];
        real dot = 0;
        for (int64_t j = 0; j < d; ++j)
          dot += nd.grad[i * d + j] * y[i * d + j];
        for (int64_t j = 0; j < d; ++j)
          px->grad[i * d + j] +=
              (nd.grad[i * d + j] - y[i * d + j] * dot) / norm;
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Tensor mean_all(const Tensor& x) {
  const auto& xv = x.data();
  real acc = 0;
  for (real v : xv) acc += v;
  const real mean = acc / static_cast<real>(xv.size());
  auto node = make_node({1}, {mean}, x.requires_grad());
  check_finite(*node->data, "mean_all");
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr()](TensorNode& nd) {
      px->ensure_grad();
      const real g = nd.grad[0] / static_cast<real>(px->data->size());
      for (auto& v : px->grad) v += g;
    };
  }
  return Tensor::wrap(node);
}

Tensor sum_all(const Tensor& x) {
  const auto& xv = x.data();
  real acc = 0;
  for (real v : xv) acc += v;
  auto node = make_node({1}, {acc}, x.requires_grad());
  check_finite(*node->data, "sum_all");
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr()](TensorNode& nd) {
      px->ensure_grad();
      const real g = nd.grad[0];
      for (auto& v : px->grad) v += g;
    };
  }
  return Tensor::wrap(node);
}

Tensor mean_per_row(const Tensor& x) {
  if (x.rank() != 2) throw DimensionError("mean_per_row: want rank-2");
  const int64_t n = x.dim(0), m = x.dim(1);
  const auto& xv = x.data();
  std::vector<real> out(n);
  for (int64_t i = 0; i < n; ++i) {
    real acc = 0;
    for (int64_t j = 0; j < m; ++j) acc += xv[i * m + j];
    out[i] = acc / static_cast<real>(m);
  }
  check_finite(out, "mean_per_row");
  auto node = make_node({n}, std::move(out), x.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), n, m](TensorNode& nd) {
      px->ensure_grad();
      for (int64_t i = 0; i < n; ++i) {
        const real g = nd.grad[i] / static_cast<real>(m);
        for (int64_t j = 0; j < m; ++j) px->grad[i * m + j] += g;
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// nn ops
// ---------------------------------------------------------------------------

Tensor masked_softmax_rows(const Tensor& scores, const Tensor& mask) {
  if (scores.rank() != 2) throw DimensionError("masked_softmax_rows: rank-2");
  require_same_shape(scores, mask, "masked_softmax_rows");
  const int64_t n = scores.dim(0), m = scores.dim(1);
  const auto& sv = scores.data();
  const auto& mv = mask.data();
  for (real v : mv)
    if (v != real{0} && v != real{1})
      throw DimensionError("masked_softmax_rows: mask must be binary");
  std::vector<real> out(sv.size(), real{0});
  for (int64_t i = 0; i < n; ++i) {
    real max_v = -std::numeric_limits<real>::infinity();
    bool any = false;
    for (int64_t j = 0; j < m; ++j) {
      if (mv[i * m + j] != real{0}) {
        any = true;
        max_v = std::max(max_v, sv[i * m + j]);
      }
    }
    if (!any)
      throw DegenerateMaskError("masked_softmax_rows: all-zero mask row " +
                                std::to_string(i));
    real denom = 0;
    for (int64_t j = 0; j < m; ++j) {
      if (mv[i * m + j] != real{0}) {
        const real e = std::exp(sv[i * m + j] - max_v);
        out[i * m + j] = e;
        denom += e;
      }
    }
    for (int64_t j = 0; j < m; ++j)
      if (mv[i * m + j] != real{0}) out[i * m + j] /= denom;
  }
  check_finite(out, "masked_softmax_rows");
  auto node = make_node(scores.shape(), std::move(out), scores.requires_grad());
  if (node->requires_grad) {
    node->parents = {scores.node_ptr()};
    node->backward_fn = [ps = scores.node_ptr(), pm = mask.node_ptr(), n,
                         m](TensorNode& nd) {
      ps->ensure_grad();
      const auto& p = *nd.data;
      const auto& mv2 = *pm->data;
      for (int64_t i = 0; i < n; ++i) {
        real dot = 0;
        for (int64_t j = 0; j < m; ++j)
          dot += nd.grad[i * m + j] * p[i * m + j];
        for (int64_t j = 0; j < m; ++j) {
          if (mv2[i * m + j] != real{0}) {
            ps->grad[i * m + j] +=
                p[i * m + j] * (nd.grad[i * m + j] - dot);
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps) {
  if (x.rank() != 2) throw DimensionError("layer_norm: want [n,d]");
  const int64_t n = x.dim(0), d = x.dim(1);
  if (gain.rank() != 1 || gain.dim(0) != d || bias.rank() != 1 ||
      bias.dim(0) != d)
    throw DimensionError("layer_norm: gain/bias must be [d]");
  if (!(eps > 0)) throw DimensionError("layer_norm: eps must be positive");
  const auto& xv = x.data();
  const auto& gv = gain.data();
  const auto& bv = bias.data();
  std::vector<real> out(xv.size());
  auto mean = std::make_shared<std::vector<real>>(n);
  auto inv_std = std::make_shared<std::vector<real>>(n);
  for (int64_t i = 0; i < n; ++i) {
    real mu = 0;
    for (int64_t j = 0; j < d; ++j) mu += xv[i * d + j];
    mu /= static_cast<real>(d);
    real var = 0;
    for (int64_t j = 0; j < d; ++j) {
      const real c = xv[i * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<real>(d);
    const real is = real{1} / std::sqrt(var + eps);
    (*mean)[i] = mu;
    (*inv_std)[i] = is;
    for (int64_t j = 0; j < d; ++j)
      out[i * d + j] = (xv[i * d + j] - mu) * is * gv[j] + bv[j];
  }
  check_finite(out, "layer_norm");
  auto node = make_node(
      x.shape(), std::move(out),
      x.requires_grad() || gain.requires_grad() || bias.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), gain.node_ptr(), bias.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), pg = gain.node_ptr(),
                         pb = bias.node_ptr(), mean, inv_std, n,
                         d](TensorNode& nd) {
      const auto& xv2 = *px->data;
      const auto& gv2 = *pg->data;
      for (int64_t i = 0; i < n; ++i) {
        const real mu = (*mean)[i];
        const real is = (*inv_std)[i];
        // dxhat, plus the two row means needed for dx
        real mean_dxhat = 0, mean_dxhat_xhat = 0;
        for (int64_t j = 0; j < d; ++j) {
          const real xhat = (xv2[i * d + j] - mu) * is;
          const real dxhat = nd.grad[i * d + j] * gv2[j];
          mean_dxhat += dxhat;
          mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= static_cast<real>(d);
        mean_dxhat_xhat /= static_cast<real>(d);
        for (int64_t j = 0; j < d; ++j) {
          const real xhat = (xv2[i * d + j] - mu) * is;
          const real dxhat = nd.grad[i * d + j] * gv2[j];
          if (px->requires_grad) {
            px->ensure_grad();
            px->grad[i * d + j] +=
                is * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
          }
          if (pg->requires_grad) {
            pg->ensure_grad();
            pg->grad[j] += nd.grad[i * d + j] * xhat;
          }
          if (pb->requires_grad) {
            pb->ensure_grad();
            pb->grad[j] += nd.grad[i * d + j];
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: want [n,C]");
  const int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(labels.size()) != n)
    throw DimensionError("cross_entropy: label count mismatch");
  for (int label : labels)
    if (label < 0 || label >= c)
      throw DimensionError("cross_entropy: label out of range");
  const auto& lv = logits.data();
  auto lse = std::make_shared<std::vector<real>>(n);
  real loss = 0;
  for (int64_t i = 0; i < n; ++i) {
    real max_v = lv[i * c];
    for (int64_t j = 1; j < c; ++j) max_v = std::max(max_v, lv[i * c + j]);
    real denom = 0;
    for (int64_t j = 0; j < c; ++j) denom += std::exp(lv[i * c + j] - max_v);
    const real row_lse = max_v + std::log(denom);
    (*lse)[i] = row_lse;
    loss += row_lse - lv[i * c + labels[i]];
  }
  loss /= static_cast<real>(n);
  auto node = make_node({1}, {loss}, logits.requires_grad());
  check_finite(*node->data, "softmax_cross_entropy");
  if (node->requires_grad) {
    node->parents = {logits.node_ptr()};
    node->backward_fn = [pl = logits.node_ptr(), labels, lse, n,
                         c](TensorNode& nd) {
      pl->ensure_grad();
      const auto& lv2 = *pl->data;
      const real g = nd.grad[0] / static_cast<real>(n);
      for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < c; ++j) {
          const real p = std::exp(lv2[i * c + j] - (*lse)[i]);
          const real target = (j == labels[i]) ? real{1} : real{0};
          pl->grad[i * c + j] += g * (p - target);
        }
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// convolution and pooling
// ---------------------------------------------------------------------------

namespace {

int64_t conv_out_extent(int64_t in, int64_t k, int stride, int padding) {
  const int64_t padded = in + 2 * padding;
  if (padded < k)
    throw DimensionError("conv: kernel larger than padded input");
  return (padded - k) / stride + 1;
}

// gather x[ci,h,w] patches into cols[ci*k*k, oh*ow]
void im2col(const real* x, int64_t ci, int64_t h, int64_t w, int64_t k,
            int stride, int padding, int64_t oh, int64_t ow, real* cols) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t di = 0; di < k; ++di) {
      for (int64_t dj = 0; dj < k; ++dj) {
        real* dst = cols + ((c * k + di) * k + dj) * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + di - padding;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride + dj - padding;
            dst[oy * ow + ox] = (iy >= 0 && iy < h && ix >= 0 && ix < w)
                                    ? x[(c * h + iy) * w + ix]
                                    : real{0};
          }
        }
      }
    }
  }
}

// scatter-add cols back into dx
void col2im_add(const real* cols, int64_t ci, int64_t h, int64_t w, int64_t k,
                int stride, int padding, int64_t oh, int64_t ow, real* dx) {
  for (int64_t c = 0; c < ci; ++c) {
    for (int64_t di = 0; di < k; ++di) {
      for (int64_t dj = 0; dj < k; ++dj) {
        const real* src = cols + ((c * k + di) * k + dj) * (oh * ow);
        for (int64_t oy = 0; oy < oh; ++oy) {
          const int64_t iy = oy * stride + di - padding;
          if (iy < 0 || iy >= h) continue;
          for (int64_t ox = 0; ox < ow; ++ox) {
            const int64_t ix = ox * stride + dj - padding;
            if (ix < 0 || ix >= w) continue;
            dx[(c * h + iy) * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding) {
  if (x.rank() != 4) throw DimensionError("conv2d: want x[b,ci,h,w]");
  if (w.rank() != 4) throw DimensionError("conv2d: want w[co,ci,k,k]");
  const int64_t b = x.dim(0), ci = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int64_t co = w.dim(0), k = w.dim(2);
  if (w.dim(1) != ci) throw DimensionError("conv2d: channel mismatch");
  if (w.dim(3) != k) throw DimensionError("conv2d: kernel must be square");
  const int64_t oh = conv_out_extent(h, k, stride, padding);
  const int64_t ow = conv_out_extent(ww, k, stride, padding);
  const int64_t ck2 = ci * k * k;
  const int64_t patch = oh * ow;

  std::vector<real> out(b * co * patch);
  // keep the im2col buffers; the backward pass reuses them for dW
  auto cols = std::make_shared<std::vector<real>>(b * ck2 * patch);
  const auto& xv = x.data();
  const auto& wv = w.data();
  for (int64_t s = 0; s < b; ++s) {
    real* cols_s = cols->data() + s * ck2 * patch;
    im2col(xv.data() + s * ci * h * ww, ci, h, ww, k, stride, padding, oh, ow,
           cols_s);
    MapConstMat mw(wv.data(), co, ck2);
    MapConstMat mc(cols_s, ck2, patch);
    MapMat mo(out.data() + s * co * patch, co, patch);
    mo.noalias() = mw * mc;
  }
  check_finite(out, "conv2d");
  auto node = make_node({b, co, oh, ow}, std::move(out),
                        x.requires_grad() || w.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), w.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), pw = w.node_ptr(), cols, b, ci, h,
                         ww, co, k, stride, padding, oh, ow, ck2,
                         patch](TensorNode& nd) {
      if (pw->requires_grad) pw->ensure_grad();
      if (px->requires_grad) px->ensure_grad();
      std::vector<real> dcols(ck2 * patch);
      for (int64_t s = 0; s < b; ++s) {
        const real* cols_s = cols->data() + s * ck2 * patch;
        MapConstMat g(nd.grad.data() + s * co * patch, co, patch);
        if (pw->requires_grad) {
          MapConstMat mc(cols_s, ck2, patch);
          MapMat gw(pw->grad.data(), co, ck2);
          gw.noalias() += g * mc.transpose();
        }
        if (px->requires_grad) {
          MapConstMat mw(pw->data->data(), co, ck2);
          MapMat mdc(dcols.data(), ck2, patch);
          mdc.noalias() = mw.transpose() * g;
          col2im_add(dcols.data(), ci, h, ww, k, stride, padding, oh, ow,
                     px->grad.data() + s * ci * h * ww);
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& dw, int stride,
                        int padding) {
  if (x.rank() != 3) throw DimensionError("depthwise_conv2d: want x[c,h,w]");
  if (dw.rank() != 3) throw DimensionError("depthwise_conv2d: want dw[c,k,k]");
  const int64_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int64_t k = dw.dim(1);
  if (dw.dim(0) != c) throw DimensionError("depthwise_conv2d: channel mismatch");
  if (dw.dim(2) != k)
    throw DimensionError("depthwise_conv2d: kernel must be square");
  const int64_t oh = conv_out_extent(h, k, stride, padding);
  const int64_t ow = conv_out_extent(w, k, stride, padding);
  const auto& xv = x.data();
  const auto& kv = dw.data();
  std::vector<real> out(c * oh * ow, real{0});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        real acc = 0;
        for (int64_t di = 0; di < k; ++di) {
          const int64_t iy = oy * stride + di - padding;
          if (iy < 0 || iy >= h) continue;
          for (int64_t dj = 0; dj < k; ++dj) {
            const int64_t ix = ox * stride + dj - padding;
            if (ix < 0 || ix >= w) continue;
            acc += xv[(ch * h + iy) * w + ix] * kv[(ch * k + di) * k + dj];
          }
        }
        out[(ch * oh + oy) * ow + ox] = acc;
      }
    }
  }
  check_finite(out, "depthwise_conv2d");
  auto node = make_node({c, oh, ow}, std::move(out),
                        x.requires_grad() || dw.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), dw.node_ptr()};
    node->backward_fn = [px = x.node_ptr(), pk = dw.node_ptr(), c, h, w, k,
                         stride, padding, oh, ow](TensorNode& nd) {
      if (px->requires_grad) px->ensure_grad();
      if (pk->requires_grad) pk->ensure_grad();
      const auto& xv2 = *px->data;
      const auto& kv2 = *pk->data;
      for (int64_t ch = 0; ch < c; ++ch) {
        for (int64_t oy = 0; oy < oh; ++oy) {
          for (int64_t ox = 0; ox < ow; ++ox) {
            const real g = nd.grad[(ch * oh + oy) * ow + ox];
            if (g == real{0}) continue;
            for (int64_t di = 0; di < k; ++di) {
              const int64_t iy = oy * stride + di - padding;
              if (iy < 0 || iy >= h) continue;
              for (int64_t dj = 0; dj < k; ++dj) {
                const int64_t ix = ox * stride + dj - padding;
                if (ix < 0 || ix >= w) continue;
                if (px->requires_grad)
                  px->grad[(ch * h + iy) * w + ix] +=
                      g * kv2[(ch * k + di) * k + dj];
                if (pk->requires_grad)
                  pk->grad[(ch * k + di) * k + dj] +=
                      g * xv2[(ch * h + iy) * w + ix];
              }
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw,
                                const Tensor& pw, int stride, int padding) {
  if (pw.rank() != 2) throw DimensionError("depthwise_separable_conv: pw[co,c]");
  if (pw.dim(1) != x.dim(0))
    throw DimensionError("depthwise_separable_conv: pointwise channel mismatch");
  Tensor mid = depthwise_conv2d(x, dw, stride, padding);
  const int64_t c = mid.dim(0), oh = mid.dim(1), ow = mid.dim(2);
  // 1x1 channel mixing is a plain matrix product over the flattened grid
  Tensor flat = reshape(mid, {c, oh * ow});
  Tensor mixed = matmul(pw, flat);
  return reshape(mixed, {pw.dim(0), oh, ow});
}

Tensor max_pool2d(const Tensor& x) {
  const bool batched = x.rank() == 4;
  if (!batched && x.rank() != 3)
    throw DimensionError("max_pool2d: want [b,c,h,w] or [c,h,w]");
  const Tensor x4 =
      batched ? x : reshape(x, {1, x.dim(0), x.dim(1), x.dim(2)});
  const int64_t b = x4.dim(0), c = x4.dim(1), h = x4.dim(2), w = x4.dim(3);
  if (h < 2 || w < 2) throw DimensionError("max_pool2d: spatial extent < 2");
  const int64_t oh = h / 2, ow = w / 2;
  const auto& xv = x4.data();
  std::vector<real> out(b * c * oh * ow);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  for (int64_t s = 0; s < b; ++s) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const real* plane = xv.data() + (s * c + ch) * h * w;
      for (int64_t oy = 0; oy < oh; ++oy) {
        for (int64_t ox = 0; ox < ow; ++ox) {
          real best = -std::numeric_limits<real>::infinity();
          int64_t best_idx = -1;
          for (int64_t dy = 0; dy < 2; ++dy) {
            for (int64_t dx = 0; dx < 2; ++dx) {
              const int64_t idx = (oy * 2 + dy) * w + ox * 2 + dx;
              if (plane[idx] > best) {  // strict: first occurrence wins ties
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          const int64_t o = ((s * c + ch) * oh + oy) * ow + ox;
          out[o] = best;
          (*argmax)[o] = (s * c + ch) * h * w + best_idx;
        }
      }
    }
  }
  check_finite(out, "max_pool2d");
  auto node =
      make_node({b, c, oh, ow}, std::move(out), x4.requires_grad());
  if (node->requires_grad) {
    node->parents = {x4.node_ptr()};
    node->backward_fn = [px = x4.node_ptr(), argmax](TensorNode& nd) {
      px->ensure_grad();
      for (size_t i = 0; i < nd.grad.size(); ++i)
        px->grad[(*argmax)[i]] += nd.grad[i];
    };
  }
  Tensor out_t = Tensor::wrap(node);
  return batched ? out_t : reshape(out_t, {c, oh, ow});
}

Tensor batch_norm(const Tensor& x, const BatchNormArgs& args) {
  if (x.rank() != 4) throw DimensionError("batch_norm: want [b,c,h,w]");
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (args.gamma.rank() != 1 || args.gamma.dim(0) != c ||
      args.beta.rank() != 1 || args.beta.dim(0) != c)
    throw DimensionError("batch_norm: gamma/beta must be [c]");
  const int64_t per_channel = b * h * w;
  if (args.train && per_channel < 2)
    throw DimensionError("batch_norm: train mode needs b*h*w >= 2");

  auto mean = std::make_shared<std::vector<real>>(c);
  auto inv_std = std::make_shared<std::vector<real>>(c);
  const auto& xv = x.data();
  if (args.train) {
    for (int64_t ch = 0; ch < c; ++ch) {
      real mu = 0;
      for (int64_t s = 0; s < b; ++s) {
        const real* plane = xv.data() + (s * c + ch) * h * w;
        for (int64_t i = 0; i < h * w; ++i) mu += plane[i];
      }
      mu /= static_cast<real>(per_channel);
      real var = 0;
      for (int64_t s = 0; s < b; ++s) {
        const real* plane = xv.data() + (s * c + ch) * h * w;
        for (int64_t i = 0; i < h * w; ++i) {
          const real d = plane[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<real>(per_channel);
      (*mean)[ch] = mu;
      (*inv_std)[ch] = real{1} / std::sqrt(var + args.eps);
      if (args.running_mean && args.running_var) {
        (*args.running_mean)[ch] =
            args.momentum * (*args.running_mean)[ch] + (1 - args.momentum) * mu;
        (*args.running_var)[ch] =
            args.momentum * (*args.running_var)[ch] + (1 - args.momentum) * var;
      }
    }
  } else {
    if (!args.running_mean || !args.running_var)
      throw DimensionError("batch_norm: infer mode needs running moments");
    for (int64_t ch = 0; ch < c; ++ch) {
      (*mean)[ch] = (*args.running_mean)[ch];
      (*inv_std)[ch] =
          real{1} / std::sqrt((*args.running_var)[ch] + args.eps);
    }
  }

  const auto& gv = args.gamma.data();
  const auto& bv = args.beta.data();
  std::vector<real> out(xv.size());
  for (int64_t s = 0; s < b; ++s) {
    for (int64_t ch = 0; ch < c; ++ch) {
      const real mu = (*mean)[ch];
      const real is = (*inv_std)[ch];
      const real g = gv[ch];
      const real bb = bv[ch];
      const real* in_plane = xv.data() + (s * c + ch) * h * w;
      real* out_plane = out.data() + (s * c + ch) * h * w;
      for (int64_t i = 0; i < h * w; ++i)
        out_plane[i] = (in_plane[i] - mu) * is * g + bb;
    }
  }
  check_finite(out, "batch_norm");
  auto node = make_node(x.shape(), std::move(out),
                        x.requires_grad() || args.gamma.requires_grad() ||
                            args.beta.requires_grad());
  if (node->requires_grad) {
    node->parents = {x.node_ptr(), args.gamma.node_ptr(),
                     args.beta.node_ptr()};
    const bool train = args.train;
    node->backward_fn = [px = x.node_ptr(), pg = args.gamma.node_ptr(),
                         pb = args.beta.node_ptr(), mean, inv_std, b, c, h, w,
                         per_channel, train](TensorNode& nd) {
      const auto& xv2 = *px->data;
      const auto& gv2 = *pg->data;
      if (px->requires_grad) px->ensure_grad();
      if (pg->requires_grad) pg->ensure_grad();
      if (pb->requires_grad) pb->ensure_grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        const real mu = (*mean)[ch];
        const real is = (*inv_std)[ch];
        real sum_dy = 0, sum_dy_xhat = 0;
        for (int64_t s = 0; s < b; ++s) {
          const real* gplane = nd.grad.data() + (s * c + ch) * h * w;
          const real* iplane = xv2.data() + (s * c + ch) * h * w;
          for (int64_t i = 0; i < h * w; ++i) {
            sum_dy += gplane[i];
            sum_dy_xhat += gplane[i] * (iplane[i] - mu) * is;
          }
        }
        if (pg->requires_grad) pg->grad[ch] += sum_dy_xhat;
        if (pb->requires_grad) pb->grad[ch] += sum_dy;
        if (px->requires_grad) {
          const real g = gv2[ch];
          if (train) {
            const real inv_n = real{1} / static_cast<real>(per_channel);
            for (int64_t s = 0; s < b; ++s) {
              const real* gplane = nd.grad.data() + (s * c + ch) * h * w;
              const real* iplane = xv2.data() + (s * c + ch) * h * w;
              real* dplane = px->grad.data() + (s * c + ch) * h * w;
              for (int64_t i = 0; i < h * w; ++i) {
                const real xhat = (iplane[i] - mu) * is;
                dplane[i] += g * is *
                             (gplane[i] - sum_dy * inv_n -
                              xhat * sum_dy_xhat * inv_n);
              }
            }
          } else {
            for (int64_t s = 0; s < b; ++s) {
              const real* gplane = nd.grad.data() + (s * c + ch) * h * w;
              real* dplane = px->grad.data() + (s * c + ch) * h * w;
              for (int64_t i = 0; i < h * w; ++i)
                dplane[i] += g * is * gplane[i];
            }
          }
        }
      }
    };
  }
  return Tensor::wrap(node);
}

// ---------------------------------------------------------------------------
// non-graph utilities
// ---------------------------------------------------------------------------

std::vector<int64_t> argsort_desc(const real* row, int64_t m) {
  for (int64_t i = 0; i < m; ++i)
    if (!std::isfinite(row[i]))
      throw NonFiniteError("argsort_desc: non-finite input");
  std::vector<int64_t> idx(m);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [row](int64_t a, int64_t b) { return row[a] > row[b]; });
  return idx;
}

std::vector<int64_t> argsort_desc_row(const Tensor& v) {
  if (v.rank() != 1) throw DimensionError("argsort_desc_row: want rank-1");
  return argsort_desc(v.data().data(), v.dim(0));
}

}  // namespace lfs
