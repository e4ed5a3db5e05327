#pragma once

#include <vector>

#include "lfs/params.hpp"
#include "lfs/tensor.hpp"

namespace lfs {

enum class HeadType { kFrn, kBifrn };

HeadType head_type_from_string(const std::string& s);
std::string head_type_name(HeadType head);

// Learnable scalars of the reconstruction head. `alpha` calibrates the ridge
// penalty (lambda = rows/d * exp(alpha)), `beta` the distance temperature.
// The raw mixture pair is softmax-normalized so the effective weights are
// positive and sum to one.
struct HeadParams {
  Tensor alpha;
  Tensor beta;
  Tensor w_qs_raw;
  Tensor w_sq_raw;
  bool normalize_rows = true;
};

void head_register(ParameterStore& store, HeadType head,
                   const std::string& prefix);
HeadParams head_params_view(ParameterStore& store, HeadType head,
                            const std::string& prefix, bool normalize_rows);

struct ReconResult {
  Tensor recon;     // same shape as target
  Tensor weights;   // [t,n] coefficients
  Tensor residual;  // scalar mean squared error per entry
};

// W = T B^T (B B^T + lambda I)^-1, recon = W B. `lambda` is a scalar tensor
// so the penalty stays differentiable; zero is permitted (tests) and throws
// SingularityError when the normal matrix is not positive definite.
ReconResult ridge_reconstruct(const Tensor& target, const Tensor& basis,
                              const Tensor& lambda);
ReconResult ridge_reconstruct(const Tensor& target, const Tensor& basis,
                              real lambda);

// mean((orig - recon)^2)
Tensor euclidean_recon_distance(const Tensor& orig, const Tensor& recon);

// queries: per-query [r,d] pools; supports: per-class [K*r,d] pools.
// logit(q,c) = -exp(beta) * residual(query q from class c's support pool).
Tensor frn_logits(const std::vector<Tensor>& queries,
                  const std::vector<Tensor>& supports,
                  const HeadParams& head);

// Both directions for one (query pool, support pool) pair.
struct MutualRecon {
  ReconResult query_from_support;
  ReconResult support_from_query;
};
MutualRecon bifrn_mutual_reconstruct(const Tensor& query_pool,
                                     const Tensor& support_pool,
                                     const HeadParams& head);

// logit(q,c) = -exp(beta) * (w_qs * d_qs + w_sq * d_sq), weights softmaxed
// from the raw pair.
Tensor bifrn_logits(const std::vector<Tensor>& queries,
                    const std::vector<Tensor>& supports,
                    const HeadParams& head);

}  // namespace lfs
