#include "lfs/reconstruction.hpp"

namespace lfs {

HeadType head_type_from_string(const std::string& s) {
  if (s == "frn") return HeadType::kFrn;
  if (s == "bifrn") return HeadType::kBifrn;
  throw ValidationError("unknown head type: " + s);
}

std::string head_type_name(HeadType head) {
  return head == HeadType::kFrn ? "frn" : "bifrn";
}

void head_register(ParameterStore& store, HeadType head,
                   const std::string& prefix) {
  store.add(prefix + ".alpha", Tensor::zeros({1}, true));
  store.add(prefix + ".beta", Tensor::zeros({1}, true));
  if (head == HeadType::kBifrn) {
    store.add(prefix + ".w_qs", Tensor::zeros({1}, true));
    store.add(prefix + ".w_sq", Tensor::zeros({1}, true));
  }
}

HeadParams head_params_view(ParameterStore& store, HeadType head,
                            const std::string& prefix, bool normalize_rows) {
  HeadParams out;
  out.alpha = store.tensor(prefix + ".alpha");
  out.beta = store.tensor(prefix + ".beta");
  if (head == HeadType::kBifrn) {
    out.w_qs_raw = store.tensor(prefix + ".w_qs");
    out.w_sq_raw = store.tensor(prefix + ".w_sq");
  }
  out.normalize_rows = normalize_rows;
  return out;
}

ReconResult ridge_reconstruct(const Tensor& target, const Tensor& basis,
                              const Tensor& lambda) {
  if (target.rank() != 2 || basis.rank() != 2 ||
      target.dim(1) != basis.dim(1))
    throw DimensionError("ridge_reconstruct: want [t,d] target, [n,d] basis");
  Tensor gram = matmul(basis, transpose(basis));
  Tensor system = add_scaled_identity(gram, lambda, real{1});
  Tensor rhs = matmul(basis, transpose(target));
  Tensor weights = transpose(spd_solve(system, rhs));
  ReconResult out;
  out.weights = weights;
  out.recon = matmul(weights, basis);
  out.residual = euclidean_recon_distance(target, out.recon);
  return out;
}

ReconResult ridge_reconstruct(const Tensor& target, const Tensor& basis,
                              real lambda) {
  return ridge_reconstruct(target, basis, Tensor::scalar(lambda));
}

Tensor euclidean_recon_distance(const Tensor& orig, const Tensor& recon) {
  if (orig.shape() != recon.shape())
    throw DimensionError("euclidean_recon_distance: shape mismatch");
  Tensor diff = sub(orig, recon);
  return mean_all(mul(diff, diff));
}

namespace {

// lambda = (basis_rows / d) * exp(alpha), kept on the tape
Tensor ridge_lambda(const Tensor& alpha, int64_t basis_rows, int64_t d) {
  return scale(exp_elem(alpha),
               static_cast<real>(basis_rows) / static_cast<real>(d));
}

std::vector<Tensor> maybe_normalize(const std::vector<Tensor>& pools,
                                    bool normalize) {
  if (!normalize) return pools;
  std::vector<Tensor> out;
  out.reserve(pools.size());
  for (const auto& p : pools) out.push_back(row_l2_normalize(p));
  return out;
}

void validate_pools(const std::vector<Tensor>& queries,
                    const std::vector<Tensor>& supports) {
  if (queries.empty() || supports.empty())
    throw DimensionError("reconstruction head: empty query or support set");
  const int64_t r = queries[0].dim(0), d = queries[0].dim(1);
  for (const auto& q : queries)
    if (q.rank() != 2 || q.dim(0) != r || q.dim(1) != d)
      throw DimensionError("reconstruction head: inconsistent query pools");
  for (const auto& s : supports)
    if (s.rank() != 2 || s.dim(1) != d)
      throw DimensionError("reconstruction head: support dim mismatch");
}

// One solve per class against every query pool stacked row-wise.
// Returns the distance matrix [num_queries, num_classes].
Tensor query_from_support_distances(const std::vector<Tensor>& queries,
                                    const std::vector<Tensor>& supports,
                                    const Tensor& alpha) {
  const int64_t nq = static_cast<int64_t>(queries.size());
  const int64_t r = queries[0].dim(0), d = queries[0].dim(1);
  Tensor stacked = nq == 1 ? queries[0] : concat_rows(queries);
  Tensor stacked_t = transpose(stacked);
  std::vector<Tensor> dist_cols;
  dist_cols.reserve(supports.size());
  for (const auto& basis : supports) {
    Tensor lambda = ridge_lambda(alpha, basis.dim(0), d);
    Tensor gram = matmul(basis, transpose(basis));
    Tensor system = add_scaled_identity(gram, lambda, real{1});
    Tensor coef = transpose(spd_solve(system, matmul(basis, stacked_t)));
    Tensor diff = sub(stacked, matmul(coef, basis));
    Tensor sq = mul(diff, diff);
    dist_cols.push_back(mean_per_row(reshape(sq, {nq, r * d})));
  }
  return dist_cols.size() == 1 ? reshape(dist_cols[0], {nq, 1})
                               : concat_cols(dist_cols);
}

// One solve per query against every class pool stacked row-wise; needs equal
// support rows per class. Returns [num_queries, num_classes].
Tensor support_from_query_distances(const std::vector<Tensor>& queries,
                                    const std::vector<Tensor>& supports,
                                    const Tensor& alpha) {
  const int64_t n = supports[0].dim(0);
  for (const auto& s : supports)
    if (s.dim(0) != n)
      throw DimensionError(
          "bifrn: support pools must share row count for the reverse pass");
  const int64_t c = static_cast<int64_t>(supports.size());
  const int64_t r = queries[0].dim(0), d = queries[0].dim(1);
  Tensor targets = c == 1 ? supports[0] : concat_rows(supports);
  Tensor targets_t = transpose(targets);
  std::vector<Tensor> dist_rows;
  dist_rows.reserve(queries.size());
  for (const auto& basis : queries) {
    Tensor lambda = ridge_lambda(alpha, r, d);
    Tensor gram = matmul(basis, transpose(basis));
    Tensor system = add_scaled_identity(gram, lambda, real{1});
    Tensor coef = transpose(spd_solve(system, matmul(basis, targets_t)));
    Tensor diff = sub(targets, matmul(coef, basis));
    Tensor sq = mul(diff, diff);
    dist_rows.push_back(reshape(mean_per_row(reshape(sq, {c, n * d})), {1, c}));
  }
  return dist_rows.size() == 1 ? dist_rows[0] : concat_rows(dist_rows);
}

Tensor temper_logits(const Tensor& distances, const Tensor& beta) {
  return neg(scale_by(distances, exp_elem(beta)));
}

}  // namespace

Tensor frn_logits(const std::vector<Tensor>& queries,
                  const std::vector<Tensor>& supports,
                  const HeadParams& head) {
  validate_pools(queries, supports);
  auto q = maybe_normalize(queries, head.normalize_rows);
  auto s = maybe_normalize(supports, head.normalize_rows);
  Tensor dists = query_from_support_distances(q, s, head.alpha);
  return temper_logits(dists, head.beta);
}

MutualRecon bifrn_mutual_reconstruct(const Tensor& query_pool,
                                     const Tensor& support_pool,
                                     const HeadParams& head) {
  Tensor q = head.normalize_rows ? row_l2_normalize(query_pool) : query_pool;
  Tensor s =
      head.normalize_rows ? row_l2_normalize(support_pool) : support_pool;
  const int64_t d = q.dim(1);
  MutualRecon out;
  out.query_from_support =
      ridge_reconstruct(q, s, ridge_lambda(head.alpha, s.dim(0), d));
  out.support_from_query =
      ridge_reconstruct(s, q, ridge_lambda(head.alpha, q.dim(0), d));
  return out;
}

Tensor bifrn_logits(const std::vector<Tensor>& queries,
                    const std::vector<Tensor>& supports,
                    const HeadParams& head) {
  validate_pools(queries, supports);
  if (!head.w_qs_raw.defined() || !head.w_sq_raw.defined())
    throw ValidationError("bifrn_logits: mixture parameters missing");
  auto q = maybe_normalize(queries, head.normalize_rows);
  auto s = maybe_normalize(supports, head.normalize_rows);
  Tensor d_qs = query_from_support_distances(q, s, head.alpha);
  Tensor d_sq = support_from_query_distances(q, s, head.alpha);
  Tensor e_qs = exp_elem(head.w_qs_raw);
  Tensor e_sq = exp_elem(head.w_sq_raw);
  Tensor total = add(e_qs, e_sq);
  Tensor mixed = add(scale_by(d_qs, div(e_qs, total)),
                     scale_by(d_sq, div(e_sq, total)));
  return temper_logits(mixed, head.beta);
}

}  // namespace lfs
