#include "slora/linalg.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "slora/ops.h"

namespace slora {

namespace {

constexpr double kJacobiTol = 1e-10;
constexpr int kMaxSweeps = 100;

// One-sided Jacobi on the columns of an m x n_cols matrix held column-wise:
// cols[p*m ... p*m+m) is column p. vr accumulates the right rotations
// (row p is the p-th right singular vector of the original matrix).
void jacobi_onesided(std::vector<double>& cols, std::vector<double>& vr,
                     int64_t n_cols, int64_t m, const std::string& src) {
  bool converged = false;
  for (int sweep = 0; sweep < kMaxSweeps && !converged; ++sweep) {
    double worst = 0.0;
    for (int64_t p = 0; p < n_cols - 1; ++p) {
      for (int64_t q = p + 1; q < n_cols; ++q) {
        double* cp = cols.data() + p * m;
        double* cq = cols.data() + q * m;
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
#pragma omp simd reduction(+ : alpha, beta, gamma)
        for (int64_t i = 0; i < m; ++i) {
          alpha += cp[i] * cp[i];
          beta += cq[i] * cq[i];
          gamma += cp[i] * cq[i];
        }
        if (alpha == 0.0 || beta == 0.0) continue;
        const double rel = std::abs(gamma) / std::sqrt(alpha * beta);
        worst = std::max(worst, rel);
        if (rel <= kJacobiTol) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
#pragma omp simd
        for (int64_t i = 0; i < m; ++i) {
          const double xp = cp[i], xq = cq[i];
          cp[i] = c * xp - s * xq;
          cq[i] = s * xp + c * xq;
        }
        double* wp = vr.data() + p * n_cols;
        double* wq = vr.data() + q * n_cols;
#pragma omp simd
        for (int64_t i = 0; i < n_cols; ++i) {
          const double xp = wp[i], xq = wq[i];
          wp[i] = c * xp - s * xq;
          wq[i] = s * xp + c * xq;
        }
      }
    }
    converged = worst <= kJacobiTol;
  }
  if (!converged)
    fail("svd: no convergence after ", kMaxSweeps, " sweeps",
         src.empty() ? "" : (" for " + src));
}

// Full SVD of w (any shape) via the one-sided sweep; transposes internally so
// the rotation side is the smaller dimension.
SvdFull svd_core(const Tensor<double>& w) {
  SLORA_CHECK(w.defined() && w.ndim() == 2, "svd: expected a 2-d matrix");
  const int64_t rows = w.dim(0), colsn = w.dim(1);
  const bool flip = rows < colsn;  // run on w^T, then swap u/v
  const int64_t m = flip ? colsn : rows;   // long side
  const int64_t n = flip ? rows : colsn;   // rotation side
  std::vector<double> cols((size_t)(n * m));
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < colsn; ++j) {
      const double val = w.data()[i * colsn + j];
      if (flip)
        cols[(size_t)(i * m + j)] = val;   // column i of w^T
      else
        cols[(size_t)(j * m + i)] = val;   // column j of w
    }
  std::vector<double> vr((size_t)(n * n), 0.0);
  for (int64_t p = 0; p < n; ++p) vr[(size_t)(p * n + p)] = 1.0;
  jacobi_onesided(cols, vr, n, m, "");

  std::vector<double> sigma((size_t)n);
  for (int64_t p = 0; p < n; ++p) {
    double ss = 0.0;
    for (int64_t i = 0; i < m; ++i) {
      const double v = cols[(size_t)(p * m + i)];
      ss += v * v;
    }
    sigma[(size_t)p] = std::sqrt(ss);
  }
  std::vector<int64_t> order((size_t)n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    return sigma[(size_t)a] > sigma[(size_t)b];
  });

  // long-side vectors (normalized columns) and short-side vectors (vr rows)
  Tensor<double> lv = Tensor<double>::zeros({m, n});
  Tensor<double> sv = Tensor<double>::zeros({n, n});
  std::vector<double> s_sorted((size_t)n);
  for (int64_t r = 0; r < n; ++r) {
    const int64_t p = order[(size_t)r];
    const double sg = sigma[(size_t)p];
    s_sorted[(size_t)r] = sg;
    const double inv = sg > 0.0 ? 1.0 / sg : 0.0;
    for (int64_t i = 0; i < m; ++i)
      lv.data()[i * n + r] = cols[(size_t)(p * m + i)] * inv;
    for (int64_t i = 0; i < n; ++i)
      sv.data()[i * n + r] = vr[(size_t)(p * n + i)];
  }

  SvdFull full;
  full.s = std::move(s_sorted);
  if (flip) {
    full.u = std::move(sv);  // rows x r
    full.v = std::move(lv);  // cols x r
  } else {
    full.u = std::move(lv);
    full.v = std::move(sv);
  }
  // sign convention: first nonzero entry of each right singular vector > 0
  const int64_t r_all = (int64_t)full.s.size();
  for (int64_t r = 0; r < r_all; ++r) {
    double lead = 0.0;
    for (int64_t i = 0; i < colsn; ++i) {
      const double e = full.v.data()[i * r_all + r];
      if (std::abs(e) > 1e-12) {
        lead = e;
        break;
      }
    }
    if (lead < 0.0) {
      for (int64_t i = 0; i < colsn; ++i) full.v.data()[i * r_all + r] *= -1.0;
      for (int64_t i = 0; i < rows; ++i) full.u.data()[i * r_all + r] *= -1.0;
    }
  }
  return full;
}

}  // namespace

SvdFull svd_full(const Tensor<double>& w) { return svd_core(w); }

SvdFactors<double> svd_topk(const Tensor<double>& w, int64_t k,
                            const std::string& source_id) {
  SLORA_CHECK(w.defined() && w.ndim() == 2, "svd_topk: expected a 2-d matrix");
  const int64_t rank_max = std::min(w.dim(0), w.dim(1));
  SLORA_CHECK(k >= 1 && k <= rank_max, "svd_topk: rank ", k,
              " outside [1, ", rank_max, "] for ", shape_str(w.shape()),
              source_id.empty() ? "" : (" (" + source_id + ")"));
  SvdFull full = svd_core(w);
  const int64_t m = w.dim(0), n = w.dim(1);
  const int64_t r_all = (int64_t)full.s.size();
  SvdFactors<double> f;
  f.rank_k = k;
  f.source_id = source_id;
  f.singular_values.assign(full.s.begin(), full.s.begin() + k);
  f.w_a = Tensor<double>::zeros({m, k});
  f.w_b = Tensor<double>::zeros({k, n});
  for (int64_t r = 0; r < k; ++r) {
    const double sq = std::sqrt(full.s[(size_t)r]);
    for (int64_t i = 0; i < m; ++i)
      f.w_a.data()[i * k + r] = full.u.data()[i * r_all + r] * sq;
    for (int64_t j = 0; j < n; ++j)
      f.w_b.data()[r * n + j] = sq * full.v.data()[j * r_all + r];
  }
  return f;
}

SvdFactors<float> to_float(const SvdFactors<double>& f) {
  SvdFactors<float> g;
  g.rank_k = f.rank_k;
  g.source_id = f.source_id;
  g.singular_values = f.singular_values;
  g.w_a = Tensor<float>::zeros(f.w_a.shape());
  g.w_b = Tensor<float>::zeros(f.w_b.shape());
  for (int64_t i = 0; i < f.w_a.numel(); ++i)
    g.w_a.data()[i] = (float)f.w_a.data()[i];
  for (int64_t i = 0; i < f.w_b.numel(); ++i)
    g.w_b.data()[i] = (float)f.w_b.data()[i];
  return g;
}

template <typename S>
Tensor<S> estimator_apply(const Tensor<S>& x, const SvdFactors<S>& f) {
  SLORA_CHECK(f.w_a.defined() && f.w_b.defined(),
              "estimator_apply: factors not initialized");
  return ops::matmul<S>(nullptr, ops::matmul<S>(nullptr, x, f.w_a), f.w_b);
}

template <typename S>
std::vector<double> col_l2_norms(const Tensor<S>& x) {
  SLORA_CHECK(x.defined() && x.ndim() == 2, "col_l2_norms: expected 2-d");
  const int64_t rows = x.dim(0), cols = x.dim(1);
  std::vector<double> out((size_t)cols, 0.0);
#pragma omp parallel for schedule(static)
  for (int64_t j = 0; j < cols; ++j) {
    double acc = 0.0;
    for (int64_t t = 0; t < rows; ++t) {
      const double v = double(x.data()[t * cols + j]);
      acc += v * v;
    }
    out[(size_t)j] = std::sqrt(acc);
  }
  return out;
}

std::vector<int64_t> topk_indices(const std::vector<double>& scores,
                                  int64_t k) {
  const int64_t n = (int64_t)scores.size();
  SLORA_CHECK(k >= 0 && k <= n, "topk_indices: k ", k, " outside [0, ", n,
              "]");
  std::vector<int64_t> idx((size_t)n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](int64_t a, int64_t b) {
    return scores[(size_t)a] > scores[(size_t)b];
  });
  idx.resize((size_t)k);
  std::sort(idx.begin(), idx.end());
  return idx;
}

template Tensor<float> estimator_apply<float>(const Tensor<float>&,
                                              const SvdFactors<float>&);
template Tensor<double> estimator_apply<double>(const Tensor<double>&,
                                                const SvdFactors<double>&);
template std::vector<double> col_l2_norms<float>(const Tensor<float>&);
template std::vector<double> col_l2_norms<double>(const Tensor<double>&);

}  // namespace slora
