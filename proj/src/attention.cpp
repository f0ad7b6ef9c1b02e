#include <cmath>
#include <cstring>
#include <limits>
#include <memory>

#include "slora/flops.h"
#include "slora/kernels.h"
#include "slora/ops.h"

namespace slora::ops {

namespace {

// Rotation angles are derived in double and applied in S.
template <typename S>
void rope_rotate(const S* src, S* dst, const std::vector<int32_t>& positions,
                 int64_t rows, int64_t d_model, int64_t n_heads, double theta,
                 bool inverse) {
  const int64_t dh = d_model / n_heads;
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < rows; ++t) {
    const double pos = double(positions[t]);
    const S* xr = src + t * d_model;
    S* yr = dst + t * d_model;
    for (int64_t h = 0; h < n_heads; ++h) {
      const int64_t base = h * dh;
      for (int64_t p = 0; p < dh / 2; ++p) {
        const double freq = std::pow(theta, -2.0 * double(p) / double(dh));
        const S c = S(std::cos(pos * freq));
        const S s = S(std::sin(pos * freq));
        const S x0 = xr[base + 2 * p];
        const S x1 = xr[base + 2 * p + 1];
        if (!inverse) {
          yr[base + 2 * p] = x0 * c - x1 * s;
          yr[base + 2 * p + 1] = x0 * s + x1 * c;
        } else {
          yr[base + 2 * p] = x0 * c + x1 * s;
          yr[base + 2 * p + 1] = -x0 * s + x1 * c;
        }
      }
    }
  }
}

}  // namespace

template <typename S>
Tensor<S> rope(Tape<S>* tape, const Tensor<S>& x,
               const std::vector<int32_t>& positions, int64_t n_heads,
               double theta) {
  SLORA_CHECK(x.defined() && x.ndim() == 2, "rope: expected a 2-d tensor");
  const int64_t rows = x.dim(0), d_model = x.dim(1);
  SLORA_CHECK((int64_t)positions.size() == rows, "rope: ", positions.size(),
              " positions for ", rows, " rows");
  SLORA_CHECK(n_heads > 0 && d_model % n_heads == 0 &&
                  (d_model / n_heads) % 2 == 0,
              "rope: d_model ", d_model, " must split into ", n_heads,
              " heads of even size");
  const bool track = tape && x.requires_grad();
  Tensor<S> out = Tensor<S>::zeros(x.shape());
  out.set_requires_grad(track);
  rope_rotate(x.data(), out.data(), positions, rows, d_model, n_heads, theta,
              false);
  if (track) {
    Tensor<S> cx = x, co = out;
    std::vector<int32_t> pos = positions;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      std::vector<S> tmp((size_t)(rows * d_model));
      rope_rotate(co.grad(), tmp.data(), pos, rows, d_model, n_heads, theta,
                  true);
      S* gx = cx.grad();
      const int64_t n = rows * d_model;
#pragma omp parallel for simd schedule(static)
      for (int64_t i = 0; i < n; ++i) gx[i] += tmp[(size_t)i];
    });
  }
  return out;
}

namespace {

template <typename S>
void copy_head_in(const S* src, S* dst, int64_t b, int64_t h, int64_t seq,
                  int64_t d_model, int64_t dh) {
  for (int64_t i = 0; i < seq; ++i)
    std::memcpy(dst + i * dh, src + (b * seq + i) * d_model + h * dh,
                sizeof(S) * (size_t)dh);
}

template <typename S>
void add_head_out(const S* src, S* dst, int64_t b, int64_t h, int64_t seq,
                  int64_t d_model, int64_t dh) {
  for (int64_t i = 0; i < seq; ++i) {
    S* drow = dst + (b * seq + i) * d_model + h * dh;
    const S* srow = src + i * dh;
    for (int64_t j = 0; j < dh; ++j) drow[j] += srow[j];
  }
}

}  // namespace

template <typename S>
Tensor<S> attention(Tape<S>* tape, const Tensor<S>& q, const Tensor<S>& k,
                    const Tensor<S>& v, int64_t batch, int64_t seq_len,
                    int64_t n_heads, bool causal, std::vector<S>* probs_out) {
  SLORA_CHECK(q.defined() && q.ndim() == 2, "attention: q must be 2-d");
  SLORA_CHECK(q.shape() == k.shape() && q.shape() == v.shape(),
              "attention: q/k/v shapes disagree, ", shape_str(q.shape()), " ",
              shape_str(k.shape()), " ", shape_str(v.shape()));
  const int64_t rows = q.dim(0), d_model = q.dim(1);
  SLORA_CHECK(rows == batch * seq_len, "attention: ", rows,
              " rows but batch*seq_len = ", batch * seq_len);
  SLORA_CHECK(d_model % n_heads == 0, "attention: d_model ", d_model,
              " not divisible by ", n_heads, " heads");
  const int64_t dh = d_model / n_heads;
  const S inv_sqrt = S(1.0 / std::sqrt(double(dh)));
  const bool track = tape && (q.requires_grad() || k.requires_grad() ||
                              v.requires_grad());
  Tensor<S> out = Tensor<S>::zeros(q.shape());
  out.set_requires_grad(track);
  auto probs = std::make_shared<std::vector<S>>(
      (size_t)(batch * n_heads * seq_len * seq_len));

  std::vector<S> qb((size_t)(seq_len * dh)), kb((size_t)(seq_len * dh)),
      vb((size_t)(seq_len * dh)), kt((size_t)(dh * seq_len)),
      ob((size_t)(seq_len * dh));
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t h = 0; h < n_heads; ++h) {
      copy_head_in(q.data(), qb.data(), b, h, seq_len, d_model, dh);
      copy_head_in(k.data(), kb.data(), b, h, seq_len, d_model, dh);
      copy_head_in(v.data(), vb.data(), b, h, seq_len, d_model, dh);
      kernels::transpose(kb.data(), kt.data(), seq_len, dh);
      S* p = probs->data() + (b * n_heads + h) * seq_len * seq_len;
      kernels::gemm(qb.data(), kt.data(), p, seq_len, dh, seq_len, false);
      for (int64_t i = 0; i < seq_len; ++i) {
        S* prow = p + i * seq_len;
        for (int64_t j = 0; j < seq_len; ++j)
          prow[j] = causal && j > i
                        ? -std::numeric_limits<S>::infinity()
                        : prow[j] * inv_sqrt;
        S mx = prow[0];
        for (int64_t j = 1; j < seq_len; ++j) mx = std::max(mx, prow[j]);
        double sum = 0.0;
        for (int64_t j = 0; j < seq_len; ++j) {
          double e = std::exp(double(prow[j]) - double(mx));
          prow[j] = S(e);
          sum += e;
        }
        const S inv = S(1.0 / sum);
        for (int64_t j = 0; j < seq_len; ++j) prow[j] = prow[j] * inv;
      }
      kernels::gemm(p, vb.data(), ob.data(), seq_len, seq_len, dh, false);
      add_head_out(ob.data(), out.data(), b, h, seq_len, d_model, dh);
    }
  }
  if (probs_out) *probs_out = *probs;

  if (track) {
    const auto bwd_attr = flops::bwd_input_attr(flops::current());
    Tensor<S> cq = q, ck = k, cv = v, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      flops::Scope sc(bwd_attr);
      std::vector<S> dob((size_t)(seq_len * dh)), qb2((size_t)(seq_len * dh)),
          kb2((size_t)(seq_len * dh)), vb2((size_t)(seq_len * dh)),
          pt((size_t)(seq_len * seq_len)), dp((size_t)(seq_len * seq_len)),
          ds((size_t)(seq_len * seq_len)), vt((size_t)(dh * seq_len)),
          tmp((size_t)(seq_len * dh)), dst_t((size_t)(seq_len * seq_len));
      for (int64_t b = 0; b < batch; ++b) {
        for (int64_t h = 0; h < n_heads; ++h) {
          copy_head_in(co.grad(), dob.data(), b, h, seq_len, d_model, dh);
          copy_head_in(cq.data(), qb2.data(), b, h, seq_len, d_model, dh);
          copy_head_in(ck.data(), kb2.data(), b, h, seq_len, d_model, dh);
          copy_head_in(cv.data(), vb2.data(), b, h, seq_len, d_model, dh);
          const S* p = probs->data() + (b * n_heads + h) * seq_len * seq_len;
          if (cv.requires_grad()) {
            kernels::transpose(p, pt.data(), seq_len, seq_len);
            kernels::gemm(pt.data(), dob.data(), tmp.data(), seq_len, seq_len,
                          dh, false);
            add_head_out(tmp.data(), cv.grad(), b, h, seq_len, d_model, dh);
          }
          if (cq.requires_grad() || ck.requires_grad()) {
            kernels::transpose(vb2.data(), vt.data(), seq_len, dh);
            kernels::gemm(dob.data(), vt.data(), dp.data(), seq_len, dh,
                          seq_len, false);
            for (int64_t i = 0; i < seq_len; ++i) {
              const S* prow = p + i * seq_len;
              const S* dprow = dp.data() + i * seq_len;
              S* dsrow = ds.data() + i * seq_len;
              double dot = 0.0;
              for (int64_t j = 0; j < seq_len; ++j)
                dot += double(dprow[j]) * double(prow[j]);
              for (int64_t j = 0; j < seq_len; ++j)
                dsrow[j] = prow[j] * (dprow[j] - S(dot)) * inv_sqrt;
            }
            if (cq.requires_grad()) {
              kernels::gemm(ds.data(), kb2.data(), tmp.data(), seq_len,
                            seq_len, dh, false);
              add_head_out(tmp.data(), cq.grad(), b, h, seq_len, d_model, dh);
            }
            if (ck.requires_grad()) {
              kernels::transpose(ds.data(), dst_t.data(), seq_len, seq_len);
              kernels::gemm(dst_t.data(), qb2.data(), tmp.data(), seq_len,
                            seq_len, dh, false);
              add_head_out(tmp.data(), ck.grad(), b, h, seq_len, d_model, dh);
            }
          }
        }
      }
    });
  }
  return out;
}

template Tensor<float> rope<float>(Tape<float>*, const Tensor<float>&,
                                   const std::vector<int32_t>&, int64_t,
                                   double);
template Tensor<double> rope<double>(Tape<double>*, const Tensor<double>&,
                                     const std::vector<int32_t>&, int64_t,
                                     double);
template Tensor<float> attention<float>(Tape<float>*, const Tensor<float>&,
                                        const Tensor<float>&,
                                        const Tensor<float>&, int64_t, int64_t,
                                        int64_t, bool, std::vector<float>*);
template Tensor<double> attention<double>(Tape<double>*, const Tensor<double>&,
                                          const Tensor<double>&,
                                          const Tensor<double>&, int64_t,
                                          int64_t, int64_t, bool,
                                          std::vector<double>*);

}  // namespace slora::ops
