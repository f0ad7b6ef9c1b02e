#include "slora/ops.h"

#include <atomic>
#include <cmath>
#include <cstring>
#include <limits>

#include "slora/flops.h"
#include "slora/kernels.h"

namespace slora::ops {

namespace {

std::atomic<int64_t> g_degenerate_rows{0};

template <typename S>
void check_2d(const Tensor<S>& t, const char* name) {
  SLORA_CHECK(t.defined() && t.ndim() == 2, name, ": expected a 2-d tensor");
}

template <typename S>
bool want_tape(Tape<S>* tape, std::initializer_list<const Tensor<S>*> ins) {
  if (!tape) return false;
  for (const Tensor<S>* t : ins)
    if ((*t).requires_grad()) return true;
  return false;
}

template <typename S>
Tensor<S> make_out(Shape shape, bool track) {
  Tensor<S> out = Tensor<S>::zeros(std::move(shape));
  out.set_requires_grad(track);
  return out;
}

// Numerically safe row softmax; returns false (and zeros the row) when every
// entry is -inf.
template <typename S>
bool softmax_row(S* row, int64_t n) {
  S mx = row[0];
  for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  if (mx == -std::numeric_limits<S>::infinity()) {
    std::fill(row, row + n, S(0));
    return false;
  }
  double sum = 0.0;
  for (int64_t j = 0; j < n; ++j) {
    double e = std::exp(double(row[j]) - double(mx));
    row[j] = S(e);
    sum += e;
  }
  const S inv = S(1.0 / sum);
  for (int64_t j = 0; j < n; ++j) row[j] = row[j] * inv;
  return true;
}

}  // namespace

int64_t softmax_degenerate_rows() { return g_degenerate_rows.load(); }
void reset_softmax_degenerate_rows() { g_degenerate_rows.store(0); }

template <typename S>
Tensor<S> matmul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  SLORA_CHECK(a.dim(1) == b.dim(0), "matmul: inner dims disagree, ",
              shape_str(a.shape()), " x ", shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = want_tape(tape, {&a, &b});
  Tensor<S> out = make_out<S>({m, n}, track);
  kernels::gemm(a.data(), b.data(), out.data(), m, k, n, false);
  if (track) {
    const auto bwd_in = flops::bwd_input_attr(flops::current());
    const auto bwd_w = flops::bwd_weight_attr(flops::current());
    Tensor<S> ca = a, cb = b, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      if (ca.requires_grad()) {
        flops::Scope sc(bwd_in);
        std::vector<S> bt((size_t)(k * n));
        kernels::transpose(cb.data(), bt.data(), k, n);
        kernels::gemm(co.grad(), bt.data(), ca.grad(), m, n, k, true);
      }
      if (cb.requires_grad()) {
        flops::Scope sc(bwd_w);
        std::vector<S> at((size_t)(m * k));
        kernels::transpose(ca.data(), at.data(), m, k);
        kernels::gemm(at.data(), co.grad(), cb.grad(), k, m, n, true);
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> add(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  SLORA_CHECK(a.shape() == b.shape(), "add: shape mismatch, ",
              shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const bool track = want_tape(tape, {&a, &b});
  Tensor<S> out = make_out<S>(a.shape(), track);
  const int64_t n = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (track) {
    Tensor<S> ca = a, cb = b, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      if (ca.requires_grad()) {
        S* ga = ca.grad();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i];
      }
      if (cb.requires_grad()) {
        S* gb = cb.grad();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul(Tape<S>* tape, const Tensor<S>& a, const Tensor<S>& b) {
  SLORA_CHECK(a.shape() == b.shape(), "mul: shape mismatch, ",
              shape_str(a.shape()), " vs ", shape_str(b.shape()));
  const bool track = want_tape(tape, {&a, &b});
  Tensor<S> out = make_out<S>(a.shape(), track);
  const int64_t n = a.numel();
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (track) {
    Tensor<S> ca = a, cb = b, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      if (ca.requires_grad()) {
        S* ga = ca.grad();
        const S* vb = cb.data();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * vb[i];
      }
      if (cb.requires_grad()) {
        S* gb = cb.grad();
        const S* va = ca.data();
#pragma omp parallel for simd schedule(static)
        for (int64_t i = 0; i < n; ++i) gb[i] += g[i] * va[i];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scale(Tape<S>* tape, const Tensor<S>& a, S alpha) {
  const bool track = want_tape(tape, {&a});
  Tensor<S> out = make_out<S>(a.shape(), track);
  const int64_t n = a.numel();
  const S* pa = a.data();
  S* po = out.data();
#pragma omp parallel for simd schedule(static)
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * alpha;
  if (track) {
    Tensor<S> ca = a, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* ga = ca.grad();
#pragma omp parallel for simd schedule(static)
      for (int64_t i = 0; i < n; ++i) ga[i] += g[i] * alpha;
    });
  }
  return out;
}

template <typename S>
Tensor<S> sum_all(Tape<S>* tape, const Tensor<S>& x) {
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>({1}, track);
  double acc = 0.0;
  const S* px = x.data();
  const int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) acc += double(px[i]);
  out.data()[0] = S(acc);
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S g = co.grad()[0];
      S* gx = cx.grad();
#pragma omp parallel for simd schedule(static)
      for (int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> silu(Tape<S>* tape, const Tensor<S>& x) {
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>(x.shape(), track);
  const int64_t n = x.numel();
  const S* px = x.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i) {
    const S sig = S(1) / (S(1) + std::exp(-px[i]));
    po[i] = px[i] * sig;
  }
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      const S* vx = cx.data();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n; ++i) {
        const S sig = S(1) / (S(1) + std::exp(-vx[i]));
        gx[i] += g[i] * sig * (S(1) + vx[i] * (S(1) - sig));
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> rmsnorm(Tape<S>* tape, const Tensor<S>& x, const Tensor<S>& gain,
                  S eps) {
  check_2d(x, "rmsnorm");
  SLORA_CHECK(gain.defined() && gain.ndim() == 1 && gain.dim(0) == x.dim(1),
              "rmsnorm: gain shape ", shape_str(gain.shape()),
              " does not match input ", shape_str(x.shape()));
  const int64_t rows = x.dim(0), d = x.dim(1);
  const bool track = want_tape(tape, {&x, &gain});
  Tensor<S> out = make_out<S>(x.shape(), track);
  auto inv_rms = std::make_shared<std::vector<S>>((size_t)rows);
  const S* px = x.data();
  const S* pg = gain.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < rows; ++t) {
    const S* xr = px + t * d;
    double ss = 0.0;
    for (int64_t j = 0; j < d; ++j) ss += double(xr[j]) * double(xr[j]);
    const S inv = S(1.0 / std::sqrt(ss / double(d) + double(eps)));
    (*inv_rms)[t] = inv;
    S* orow = po + t * d;
#pragma omp simd
    for (int64_t j = 0; j < d; ++j) orow[j] = xr[j] * pg[j] * inv;
  }
  if (track) {
    Tensor<S> cx = x, cg = gain, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      const S* vx = cx.data();
      const S* vg = cg.data();
      if (cx.requires_grad()) {
        S* gx = cx.grad();
#pragma omp parallel for schedule(static)
        for (int64_t t = 0; t < rows; ++t) {
          const S* xr = vx + t * d;
          const S* gr = g + t * d;
          const S inv = (*inv_rms)[t];
          double dot = 0.0;
          for (int64_t j = 0; j < d; ++j)
            dot += double(gr[j]) * double(vg[j]) * double(xr[j]);
          const S coef = S(dot) * inv * inv * inv / S(d);
          S* gxr = gx + t * d;
#pragma omp simd
          for (int64_t j = 0; j < d; ++j)
            gxr[j] += gr[j] * vg[j] * inv - xr[j] * coef;
        }
      }
      if (cg.requires_grad()) {
        S* gg = cg.grad();
#pragma omp parallel for schedule(static)
        for (int64_t j = 0; j < d; ++j) {
          double acc = 0.0;
          for (int64_t t = 0; t < rows; ++t)
            acc += double(g[t * d + j]) * double(vx[t * d + j]) *
                   double((*inv_rms)[t]);
          gg[j] += S(acc);
        }
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> softmax_rows(Tape<S>* tape, const Tensor<S>& x,
                       const Tensor<S>* additive_mask) {
  check_2d(x, "softmax_rows");
  if (additive_mask)
    SLORA_CHECK(additive_mask->shape() == x.shape(),
                "softmax_rows: mask shape ", shape_str(additive_mask->shape()),
                " does not match input ", shape_str(x.shape()));
  const int64_t rows = x.dim(0), n = x.dim(1);
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>(x.shape(), track);
  const S* px = x.data();
  const S* pm = additive_mask ? additive_mask->data() : nullptr;
  S* po = out.data();
  int64_t degenerate = 0;
#pragma omp parallel for schedule(static) reduction(+ : degenerate)
  for (int64_t t = 0; t < rows; ++t) {
    S* orow = po + t * n;
    const S* xr = px + t * n;
    if (pm) {
      const S* mr = pm + t * n;
      for (int64_t j = 0; j < n; ++j) orow[j] = xr[j] + mr[j];
    } else {
      std::memcpy(orow, xr, sizeof(S) * (size_t)n);
    }
    if (!softmax_row(orow, n)) ++degenerate;
  }
  g_degenerate_rows += degenerate;
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      const S* y = co.data();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t t = 0; t < rows; ++t) {
        const S* yr = y + t * n;
        const S* gr = g + t * n;
        double dot = 0.0;
        for (int64_t j = 0; j < n; ++j) dot += double(gr[j]) * double(yr[j]);
        S* gxr = gx + t * n;
#pragma omp simd
        for (int64_t j = 0; j < n; ++j) gxr[j] += yr[j] * (gr[j] - S(dot));
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> cross_entropy_masked(Tape<S>* tape, const Tensor<S>& logits,
                               const std::vector<int32_t>& targets,
                               const std::vector<uint8_t>& mask) {
  check_2d(logits, "cross_entropy_masked");
  const int64_t rows = logits.dim(0), vocab = logits.dim(1);
  SLORA_CHECK((int64_t)targets.size() == rows && (int64_t)mask.size() == rows,
              "cross_entropy_masked: targets/mask length must equal ", rows,
              ", got ", targets.size(), "/", mask.size());
  int64_t n_masked = 0;
  for (int64_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    ++n_masked;
    SLORA_CHECK(targets[t] >= 0 && targets[t] < vocab,
                "cross_entropy_masked: target ", targets[t], " at position ",
                t, " outside vocab ", vocab);
  }
  SLORA_CHECK(n_masked > 0, "cross_entropy_masked: no masked positions");
  const bool track = want_tape(tape, {&logits});
  auto lse = std::make_shared<std::vector<double>>((size_t)rows, 0.0);
  const S* px = logits.data();
  double total = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : total)
  for (int64_t t = 0; t < rows; ++t) {
    if (!mask[t]) continue;
    const S* row = px + t * vocab;
    double mx = double(row[0]);
    for (int64_t j = 1; j < vocab; ++j) mx = std::max(mx, double(row[j]));
    double sum = 0.0;
    for (int64_t j = 0; j < vocab; ++j) sum += std::exp(double(row[j]) - mx);
    const double l = mx + std::log(sum);
    (*lse)[t] = l;
    total += l - double(row[targets[t]]);
  }
  Tensor<S> out = make_out<S>({1}, track);
  out.data()[0] = S(total / double(n_masked));
  if (track) {
    Tensor<S> cx = logits, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S gscale = co.grad()[0] / S(n_masked);
      const S* v = cx.data();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t t = 0; t < rows; ++t) {
        if (!mask[t]) continue;
        const S* row = v + t * vocab;
        S* grow = gx + t * vocab;
        const double l = (*lse)[t];
#pragma omp simd
        for (int64_t j = 0; j < vocab; ++j)
          grow[j] += gscale * S(std::exp(double(row[j]) - l));
        grow[targets[t]] -= gscale;
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> embedding_lookup(Tape<S>* tape, const Tensor<S>& table,
                           const std::vector<int32_t>& ids) {
  check_2d(table, "embedding_lookup");
  const int64_t vocab = table.dim(0), d = table.dim(1);
  const int64_t rows = (int64_t)ids.size();
  for (int64_t t = 0; t < rows; ++t)
    SLORA_CHECK(ids[t] >= 0 && ids[t] < vocab, "embedding_lookup: id ",
                ids[t], " at position ", t, " outside vocab ", vocab);
  const bool track = want_tape(tape, {&table});
  Tensor<S> out = make_out<S>({rows, d}, track);
  const S* pt = table.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < rows; ++t)
    std::memcpy(po + t * d, pt + (int64_t)ids[t] * d, sizeof(S) * (size_t)d);
  if (track) {
    Tensor<S> ct = table, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* gt = ct.grad();
      // sequential: duplicate ids must accumulate in a fixed order
      for (int64_t t = 0; t < rows; ++t) {
        S* dst = gt + (int64_t)ids[t] * d;
        const S* src = g + t * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> gather_rows(Tape<S>* tape, const Tensor<S>& x,
                      const std::vector<int64_t>& rows) {
  check_2d(x, "gather_rows");
  const int64_t total = x.dim(0), d = x.dim(1);
  const int64_t n = (int64_t)rows.size();
  for (int64_t i = 0; i < n; ++i)
    SLORA_CHECK(rows[i] >= 0 && rows[i] < total, "gather_rows: row ", rows[i],
                " outside [0, ", total, ")");
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>({n, d}, track);
  const S* px = x.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(po + i * d, px + rows[i] * d, sizeof(S) * (size_t)d);
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* gx = cx.grad();
      for (int64_t i = 0; i < n; ++i) {
        S* dst = gx + rows[i] * d;
        const S* src = g + i * d;
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scatter_rows(Tape<S>* tape, const Tensor<S>& x,
                       const std::vector<int64_t>& rows, int64_t total_rows) {
  check_2d(x, "scatter_rows");
  const int64_t n = x.dim(0), d = x.dim(1);
  SLORA_CHECK((int64_t)rows.size() == n, "scatter_rows: ", rows.size(),
              " indices for ", n, " rows");
  for (int64_t i = 0; i < n; ++i)
    SLORA_CHECK(rows[i] >= 0 && rows[i] < total_rows, "scatter_rows: row ",
                rows[i], " outside [0, ", total_rows, ")");
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>({total_rows, d}, track);
  const S* px = x.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t i = 0; i < n; ++i)
    std::memcpy(po + rows[i] * d, px + i * d, sizeof(S) * (size_t)d);
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t i = 0; i < n; ++i) {
        S* dst = gx + i * d;
        const S* src = g + rows[i] * d;
#pragma omp simd
        for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> gather_cols(Tape<S>* tape, const Tensor<S>& x,
                      const std::vector<int64_t>& cols) {
  check_2d(x, "gather_cols");
  const int64_t rows = x.dim(0), total = x.dim(1);
  const int64_t n = (int64_t)cols.size();
  for (int64_t j = 0; j < n; ++j)
    SLORA_CHECK(cols[j] >= 0 && cols[j] < total, "gather_cols: col ", cols[j],
                " outside [0, ", total, ")");
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>({rows, n}, track);
  const S* px = x.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < rows; ++t) {
    const S* src = px + t * total;
    S* dst = po + t * n;
    for (int64_t j = 0; j < n; ++j) dst[j] = src[cols[j]];
  }
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t t = 0; t < rows; ++t) {
        S* dst = gx + t * total;
        const S* src = g + t * n;
        for (int64_t j = 0; j < n; ++j) dst[cols[j]] += src[j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> scatter_cols(Tape<S>* tape, const Tensor<S>& x,
                       const std::vector<int64_t>& cols, int64_t total_cols) {
  check_2d(x, "scatter_cols");
  const int64_t rows = x.dim(0), n = x.dim(1);
  SLORA_CHECK((int64_t)cols.size() == n, "scatter_cols: ", cols.size(),
              " indices for ", n, " cols");
  for (int64_t j = 0; j < n; ++j)
    SLORA_CHECK(cols[j] >= 0 && cols[j] < total_cols, "scatter_cols: col ",
                cols[j], " outside [0, ", total_cols, ")");
  const bool track = want_tape(tape, {&x});
  Tensor<S> out = make_out<S>({rows, total_cols}, track);
  const S* px = x.data();
  S* po = out.data();
#pragma omp parallel for schedule(static)
  for (int64_t t = 0; t < rows; ++t) {
    const S* src = px + t * n;
    S* dst = po + t * total_cols;
    for (int64_t j = 0; j < n; ++j) dst[cols[j]] = src[j];
  }
  if (track) {
    Tensor<S> cx = x, co = out;
    tape->record([=]() mutable {
      if (!co.has_grad()) return;
      const S* g = co.grad();
      S* gx = cx.grad();
#pragma omp parallel for schedule(static)
      for (int64_t t = 0; t < rows; ++t) {
        S* dst = gx + t * n;
        const S* src = g + t * total_cols;
        for (int64_t j = 0; j < n; ++j) dst[j] += src[cols[j]];
      }
    });
  }
  return out;
}

GradCheckResult grad_check(
    const std::function<Tensor<double>(Tape<double>*,
                                       std::vector<Tensor<double>>&)>& fn,
    std::vector<Tensor<double>> inputs, double eps) {
  // Tensor handles share grad storage, so a caller may pass inputs that still
  // hold gradients from an earlier backward; start from a clean slate.
  for (Tensor<double>& in : inputs) in.drop_grad();
  Tape<double> tape;
  Tensor<double> loss = fn(&tape, inputs);
  SLORA_CHECK(loss.numel() == 1, "grad_check: fn must return a scalar loss");
  tape.backward(loss);
  GradCheckResult res;
  for (Tensor<double>& in : inputs) {
    if (!in.requires_grad()) continue;
    in.ensure_grad();
    std::vector<double> analytic(in.grad(), in.grad() + in.numel());
    for (int64_t i = 0; i < in.numel(); ++i) {
      const double saved = in.data()[i];
      in.data()[i] = saved + eps;
      Tape<double> t1;
      const double up = fn(&t1, inputs).data()[0];
      in.data()[i] = saved - eps;
      Tape<double> t2;
      const double dn = fn(&t2, inputs).data()[0];
      in.data()[i] = saved;
      const double numeric = (up - dn) / (2.0 * eps);
      const double a = analytic[(size_t)i];
      const double abs_err = std::abs(a - numeric);
      const double rel =
          abs_err / std::max({std::abs(a), std::abs(numeric), 1e-6});
      res.max_abs_err = std::max(res.max_abs_err, abs_err);
      res.max_rel_err = std::max(res.max_rel_err, rel);
    }
  }
  return res;
}

#define SLORA_INSTANTIATE_OPS(S)                                              \
  template Tensor<S> matmul<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&); \
  template Tensor<S> add<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);    \
  template Tensor<S> mul<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&);    \
  template Tensor<S> scale<S>(Tape<S>*, const Tensor<S>&, S);                 \
  template Tensor<S> sum_all<S>(Tape<S>*, const Tensor<S>&);                  \
  template Tensor<S> silu<S>(Tape<S>*, const Tensor<S>&);                     \
  template Tensor<S> rmsnorm<S>(Tape<S>*, const Tensor<S>&, const Tensor<S>&, \
                                S);                                           \
  template Tensor<S> softmax_rows<S>(Tape<S>*, const Tensor<S>&,              \
                                     const Tensor<S>*);                       \
  template Tensor<S> cross_entropy_masked<S>(Tape<S>*, const Tensor<S>&,      \
                                             const std::vector<int32_t>&,     \
                                             const std::vector<uint8_t>&);    \
  template Tensor<S> embedding_lookup<S>(Tape<S>*, const Tensor<S>&,          \
                                         const std::vector<int32_t>&);        \
  template Tensor<S> gather_rows<S>(Tape<S>*, const Tensor<S>&,               \
                                    const std::vector<int64_t>&);             \
  template Tensor<S> scatter_rows<S>(Tape<S>*, const Tensor<S>&,              \
                                     const std::vector<int64_t>&, int64_t);   \
  template Tensor<S> gather_cols<S>(Tape<S>*, const Tensor<S>&,               \
                                    const std::vector<int64_t>&);             \
  template Tensor<S> scatter_cols<S>(Tape<S>*, const Tensor<S>&,              \
                                     const std::vector<int64_t>&, int64_t);

SLORA_INSTANTIATE_OPS(float)
SLORA_INSTANTIATE_OPS(double)

}  // namespace slora::ops
