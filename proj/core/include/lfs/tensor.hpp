#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "lfs/errors.hpp"

namespace lfs {

#ifdef LFS_FLOAT32_STORAGE
using real = float;
#else
using real = double;
#endif

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode;

// Dense row-major tensor with an optional reverse-mode tape. Values are
// immutable once an op has produced them; `mutable_data` exists for filling
// leaves (parameters, inputs) before they enter a graph.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, real value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<real> data,
                          bool requires_grad = false);
  static Tensor scalar(real value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  int64_t dim(int axis) const;
  int64_t numel() const;

  const std::vector<real>& data() const;
  std::vector<real>& mutable_data();
  real value() const;  // single-element fetch
  real at(std::initializer_list<int64_t> idx) const;

  bool requires_grad() const;
  // Gradient buffer populated by backward(); empty before the first backward.
  const std::vector<real>& grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar.
  void backward();

  TensorNode* node() const { return node_.get(); }
  std::shared_ptr<TensorNode> node_ptr() const { return node_; }

  static Tensor wrap(std::shared_ptr<TensorNode> node);

 private:
  std::shared_ptr<TensorNode> node_;
};

struct TensorNode {
  Shape shape;
  std::shared_ptr<std::vector<real>> data;
  std::vector<real> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;

  int64_t numel() const { return static_cast<int64_t>(data->size()); }
  void ensure_grad();
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, real factor);
Tensor exp_elem(const Tensor& a);
Tensor relu(const Tensor& a);
// x[n,d] + b[d] broadcast over rows
Tensor add_rowvec(const Tensor& x, const Tensor& b);
// elementwise multiply by a 1-element tensor
Tensor scale_by(const Tensor& x, const Tensor& s);

// ---- shape ----
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // 2-D
Tensor slice_rows(const Tensor& x, int64_t row0, int64_t row1);
Tensor slice_cols(const Tensor& x, int64_t col0, int64_t col1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);  // 1-D parts act as columns

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);
// A[n,n] + factor * s[1] * I
Tensor add_scaled_identity(const Tensor& a, const Tensor& s, real factor);
// X = A^-1 B for symmetric positive-definite A, via Cholesky.
Tensor spd_solve(const Tensor& a, const Tensor& b);
// rows scaled to unit L2 norm (guarded below `eps`)
Tensor row_l2_normalize(const Tensor& x, real eps = 1e-12);

// ---- reductions ----
Tensor mean_all(const Tensor& x);
Tensor sum_all(const Tensor& x);
Tensor mean_per_row(const Tensor& x);  // [n,m] -> [n]

// ---- neural-net ops ----
Tensor masked_softmax_rows(const Tensor& scores, const Tensor& mask);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  real eps = 1e-5);
Tensor softmax_cross_entropy(const Tensor& logits,
                             const std::vector<int>& labels);

// x[b,ci,h,w] (x) w[co,ci,k,k], zero padding
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
// x[c,h,w] (x) dw[c,k,k], one spatial filter per channel
Tensor depthwise_conv2d(const Tensor& x, const Tensor& dw, int stride,
                        int padding);
// depthwise then 1x1 channel mixing: pw[co,c]
Tensor depthwise_separable_conv(const Tensor& x, const Tensor& dw,
                                const Tensor& pw, int stride, int padding);
// window 2, stride 2; gradient routes to the first argmax
Tensor max_pool2d(const Tensor& x);

struct BatchNormArgs {
  Tensor gamma;
  Tensor beta;
  std::vector<real>* running_mean = nullptr;
  std::vector<real>* running_var = nullptr;
  bool train = true;
  real eps = 1e-5;
  real momentum = 0.9;  // running = momentum*running + (1-momentum)*batch
};
Tensor batch_norm(const Tensor& x, const BatchNormArgs& args);

// ---- non-graph utilities ----
// descending stable order, ties by ascending index
std::vector<int64_t> argsort_desc(const real* row, int64_t m);
std::vector<int64_t> argsort_desc_row(const Tensor& v);

void check_finite(const std::vector<real>& values, const char* context);

}  // namespace lfs
