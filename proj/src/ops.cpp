#include "rft/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace rft {
namespace {

using MatRM =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using CMapV = Eigen::Map<const Eigen::VectorXf>;
using MapV = Eigen::Map<Eigen::VectorXf>;

void check_same_shape(const TensorPtr& a, const TensorPtr& b,
                      const char* op) {
  if (a->shape() != b->shape()) {
    throw ShapeError(std::string(op) + ": shape " + a->shape().str() +
                     " does not match " + b->shape().str());
  }
}

bool any_needs_grad(std::initializer_list<const TensorPtr*> ts) {
  for (const TensorPtr* t : ts) {
    if ((*t)->needs_grad()) return true;
  }
  return false;
}

const float* grad_or_null(const TensorPtr& t) {
  return t->has_grad() ? t->grad().data() : nullptr;
}

// Unpacks [N,C,H,W] patches into a [C*kh*kw, Ho*Wo] column matrix for one
// example, zero-filling out-of-range positions.
void im2col(const float* in, int C, int H, int W, int kh, int kw, int ph,
            int pw, int Ho, int Wo, float* col) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        float* dst =
            col + ((static_cast<size_t>(c) * kh + ki) * kw + kj) *
                      (static_cast<size_t>(Ho) * Wo);
        for (int y = 0; y < Ho; ++y) {
          int iy = y + ki - ph;
          float* row = dst + static_cast<size_t>(y) * Wo;
          if (iy < 0 || iy >= H) {
            std::fill(row, row + Wo, 0.0f);
            continue;
          }
          const float* src = in + (static_cast<size_t>(c) * H + iy) * W;
          for (int x = 0; x < Wo; ++x) {
            int ix = x + kj - pw;
            row[x] = (ix >= 0 && ix < W) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

// Scatter-adds a column matrix back onto the input layout of one example.
void col2im_add(const float* col, int C, int H, int W, int kh, int kw, int ph,
                int pw, int Ho, int Wo, float* din) {
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const float* src =
            col + ((static_cast<size_t>(c) * kh + ki) * kw + kj) *
                      (static_cast<size_t>(Ho) * Wo);
        for (int y = 0; y < Ho; ++y) {
          int iy = y + ki - ph;
          if (iy < 0 || iy >= H) continue;
          const float* row = src + static_cast<size_t>(y) * Wo;
          float* dst = din + (static_cast<size_t>(c) * H + iy) * W;
          for (int x = 0; x < Wo; ++x) {
            int ix = x + kj - pw;
            if (ix >= 0 && ix < W) dst[ix] += row[x];
          }
        }
      }
    }
  }
}

}  // namespace

TensorPtr conv2d(Tape& tape, const TensorPtr& input, const TensorPtr& kernel,
                 const TensorPtr& bias, Padding padding) {
  const Shape& is = input->shape();
  const Shape& ks = kernel->shape();
  if (is.rank() != 4 || ks.rank() != 4) {
    throw ShapeError("conv2d expects input [N,C,H,W] and kernel [F,C,kh,kw], "
                     "got " + is.str() + " and " + ks.str());
  }
  const int N = is.dim(0), C = is.dim(1), H = is.dim(2), W = is.dim(3);
  const int F = ks.dim(0), kh = ks.dim(2), kw = ks.dim(3);
  if (ks.dim(1) != C) {
    throw ShapeError("conv2d: kernel channel count in " + ks.str() +
                     " does not match input " + is.str());
  }
  if (bias->shape() != Shape{F}) {
    throw ShapeError("conv2d: bias shape " + bias->shape().str() +
                     " does not match filter count " + std::to_string(F));
  }
  int ph = 0, pw = 0, Ho = 0, Wo = 0;
  if (padding == Padding::kSame) {
    ph = (kh - 1) / 2;
    pw = (kw - 1) / 2;
    Ho = H;
    Wo = W;
  } else {
    if (kh > H || kw > W) {
      throw ShapeError("conv2d: kernel " + ks.str() +
                       " exceeds input extent " + is.str());
    }
    Ho = H - kh + 1;
    Wo = W - kw + 1;
  }

  const int ckk = C * kh * kw;
  const std::int64_t in_stride = static_cast<std::int64_t>(C) * H * W;
  const std::int64_t out_stride = static_cast<std::int64_t>(F) * Ho * Wo;

  auto out = Tensor::zeros(Shape{N, F, Ho, Wo});
  {
    std::vector<float> col(static_cast<size_t>(ckk) * Ho * Wo);
    CMapM k_mat(kernel->data().data(), F, ckk);
    CMapV b_vec(bias->data().data(), F);
    for (int n = 0; n < N; ++n) {
      im2col(input->data().data() + n * in_stride, C, H, W, kh, kw, ph, pw,
             Ho, Wo, col.data());
      CMapM col_mat(col.data(), ckk, Ho * Wo);
      MapM out_mat(out->data().data() + n * out_stride, F, Ho * Wo);
      out_mat.noalias() = k_mat * col_mat;
      out_mat.colwise() += b_vec;
    }
  }

  if (!any_needs_grad({&input, &kernel, &bias})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    std::vector<float> col(static_cast<size_t>(ckk) * Ho * Wo);
    std::vector<float> dcol;
    if (input->needs_grad()) dcol.resize(col.size());
    CMapM k_mat(kernel->data().data(), F, ckk);
    for (int n = 0; n < N; ++n) {
      CMapM g_mat(g + n * out_stride, F, Ho * Wo);
      if (bias->needs_grad()) {
        // fixed-order accumulation keeps reruns byte-identical
        float* db = bias->grad().data();
        for (int f = 0; f < F; ++f) {
          double acc = 0.0;
          const float* row = g + n * out_stride +
                             static_cast<std::int64_t>(f) * Ho * Wo;
          for (int i = 0; i < Ho * Wo; ++i) acc += row[i];
          db[f] += static_cast<float>(acc);
        }
      }
      if (kernel->needs_grad()) {
        im2col(input->data().data() + n * in_stride, C, H, W, kh, kw, ph, pw,
               Ho, Wo, col.data());
        CMapM col_mat(col.data(), ckk, Ho * Wo);
        MapM dk(kernel->grad().data(), F, ckk);
        dk.noalias() += g_mat * col_mat.transpose();
      }
      if (input->needs_grad()) {
        MapM dcol_mat(dcol.data(), ckk, Ho * Wo);
        dcol_mat.noalias() = k_mat.transpose() * g_mat;
        col2im_add(dcol.data(), C, H, W, kh, kw, ph, pw, Ho, Wo,
                   input->grad().data() + n * in_stride);
      }
    }
  });
  return out;
}

TensorPtr maxpool2x2(Tape& tape, const TensorPtr& input) {
  const Shape& is = input->shape();
  if (is.rank() != 4) {
    throw ShapeError("maxpool2x2 expects [N,C,H,W], got " + is.str());
  }
  const int N = is.dim(0), C = is.dim(1), H = is.dim(2), W = is.dim(3);
  if (H % 2 != 0 || W % 2 != 0) {
    throw ShapeError("maxpool2x2 requires even spatial extent, got " +
                     is.str());
  }
  const int Ho = H / 2, Wo = W / 2;
  auto out = Tensor::zeros(Shape{N, C, Ho, Wo});
  auto argmax = std::make_shared<std::vector<std::int64_t>>(
      static_cast<size_t>(out->numel()));

  const float* in = input->data().data();
  float* o = out->data().data();
  std::int64_t p = 0;
  for (std::int64_t nc = 0; nc < static_cast<std::int64_t>(N) * C; ++nc) {
    const float* plane = in + nc * H * W;
    for (int y = 0; y < Ho; ++y) {
      for (int x = 0; x < Wo; ++x, ++p) {
        std::int64_t base = static_cast<std::int64_t>(2 * y) * W + 2 * x;
        std::int64_t best = base;
        float v = plane[base];
        const std::int64_t cand[3] = {base + 1, base + W, base + W + 1};
        for (std::int64_t idx : cand) {
          if (plane[idx] > v) {
            v = plane[idx];
            best = idx;
          }
        }
        o[p] = v;
        (*argmax)[static_cast<size_t>(p)] = nc * H * W + best;
      }
    }
  }

  if (!input->needs_grad()) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    float* di = input->grad().data();
    for (std::int64_t i = 0; i < out->numel(); ++i) {
      di[(*argmax)[static_cast<size_t>(i)]] += g[i];
    }
  });
  return out;
}

TensorPtr dense(Tape& tape, const TensorPtr& input, const TensorPtr& weight,
                const TensorPtr& bias) {
  const Shape& is = input->shape();
  const Shape& ws = weight->shape();
  if (is.rank() != 2 || ws.rank() != 2 || is.dim(1) != ws.dim(0)) {
    throw ShapeError("dense: input " + is.str() + " incompatible with weight " +
                     ws.str());
  }
  const int N = is.dim(0), D = is.dim(1), U = ws.dim(1);
  if (bias->shape() != Shape{U}) {
    throw ShapeError("dense: bias shape " + bias->shape().str() +
                     " does not match unit count " + std::to_string(U));
  }

  auto out = Tensor::zeros(Shape{N, U});
  {
    CMapM x(input->data().data(), N, D);
    CMapM w(weight->data().data(), D, U);
    CMapV b(bias->data().data(), U);
    MapM o(out->data().data(), N, U);
    o.noalias() = x * w;
    o.rowwise() += b.transpose();
  }

  if (!any_needs_grad({&input, &weight, &bias})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    CMapM g(out->grad().data(), N, U);
    if (weight->needs_grad()) {
      CMapM x(input->data().data(), N, D);
      MapM dw(weight->grad().data(), D, U);
      dw.noalias() += x.transpose() * g;
    }
    if (bias->needs_grad()) {
      // fixed-order accumulation keeps reruns byte-identical
      float* db = bias->grad().data();
      const float* gp = out->grad().data();
      for (int u = 0; u < U; ++u) {
        double acc = 0.0;
        for (int i = 0; i < N; ++i) acc += gp[static_cast<std::size_t>(i) * U + u];
        db[u] += static_cast<float>(acc);
      }
    }
    if (input->needs_grad()) {
      CMapM w(weight->data().data(), D, U);
      MapM dx(input->grad().data(), N, D);
      dx.noalias() += g * w.transpose();
    }
  });
  return out;
}

TensorPtr relu(Tape& tape, const TensorPtr& input) {
  auto out = Tensor::zeros(input->shape());
  const float* in = input->data().data();
  float* o = out->data().data();
  const std::int64_t n = input->numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = in[i] > 0.0f ? in[i] : 0.0f;

  if (!input->needs_grad()) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    const float* ov = out->data().data();
    float* di = input->grad().data();
    for (std::int64_t i = 0; i < n; ++i) {
      if (ov[i] > 0.0f) di[i] += g[i];
    }
  });
  return out;
}

BatchNormOut batchnorm(Tape& tape, const TensorPtr& input,
                       const TensorPtr& gamma, const TensorPtr& beta,
                       BatchNormState& state, BnMode mode, float momentum,
                       float eps) {
  const Shape& is = input->shape();
  if (is.rank() != 2 && is.rank() != 4) {
    throw ShapeError("batchnorm expects [N,U] or [N,C,H,W], got " + is.str());
  }
  const int N = is.dim(0);
  const int C = is.dim(1);
  const std::int64_t spatial =
      is.rank() == 4 ? static_cast<std::int64_t>(is.dim(2)) * is.dim(3) : 1;
  const std::int64_t m = static_cast<std::int64_t>(N) * spatial;
  if (gamma->shape() != Shape{C} || beta->shape() != Shape{C}) {
    throw ShapeError("batchnorm: gamma " + gamma->shape().str() + " / beta " +
                     beta->shape().str() + " must match feature count " +
                     std::to_string(C));
  }
  if (state.running_mean.empty()) {
    state.running_mean.assign(static_cast<size_t>(C), 0.0f);
    state.running_var.assign(static_cast<size_t>(C), 0.0f);
  }
  const bool use_batch_stats = mode != BnMode::kEval;
  if (!use_batch_stats && state.batches_seen == 0) {
    throw TrainingError(
        "batchnorm: eval mode requested before any batch statistics were "
        "recorded");
  }

  // Per-feature element offsets: feature c of example n occupies the
  // contiguous block at ((n*C)+c)*spatial.
  auto feature_ptr = [&](const float* base, int n, int c) {
    return base + (static_cast<std::int64_t>(n) * C + c) * spatial;
  };

  std::vector<float> mean(static_cast<size_t>(C));
  std::vector<float> inv_std(static_cast<size_t>(C));
  if (use_batch_stats) {
    const float* in = input->data().data();
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = feature_ptr(in, n, c);
        for (std::int64_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double mu = s / static_cast<double>(m);
      double sq = 0.0;
      for (int n = 0; n < N; ++n) {
        const float* p = feature_ptr(in, n, c);
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double d = p[i] - mu;
          sq += d * d;
        }
      }
      const double var = sq / static_cast<double>(m);
      mean[static_cast<size_t>(c)] = static_cast<float>(mu);
      inv_std[static_cast<size_t>(c)] =
          static_cast<float>(1.0 / std::sqrt(var + eps));
      if (mode == BnMode::kTrain) {
        auto& rm = state.running_mean[static_cast<size_t>(c)];
        auto& rv = state.running_var[static_cast<size_t>(c)];
        rm = momentum * rm + (1.0f - momentum) * static_cast<float>(mu);
        rv = momentum * rv + (1.0f - momentum) * static_cast<float>(var);
      }
    }
    if (mode == BnMode::kTrain) state.batches_seen++;
  } else {
    for (int c = 0; c < C; ++c) {
      mean[static_cast<size_t>(c)] = state.running_mean[static_cast<size_t>(c)];
      inv_std[static_cast<size_t>(c)] = static_cast<float>(
          1.0 / std::sqrt(static_cast<double>(
                              state.running_var[static_cast<size_t>(c)]) +
                          eps));
    }
  }

  auto normalized = Tensor::zeros(is);
  auto out = Tensor::zeros(is);
  {
    const float* in = input->data().data();
    float* z = normalized->data().data();
    float* o = out->data().data();
    const float* gm = gamma->data().data();
    const float* bt = beta->data().data();
    for (int n = 0; n < N; ++n) {
      for (int c = 0; c < C; ++c) {
        const std::int64_t off =
            (static_cast<std::int64_t>(n) * C + c) * spatial;
        const float mu = mean[static_cast<size_t>(c)];
        const float is_c = inv_std[static_cast<size_t>(c)];
        const float gc = gm[c], bc = bt[c];
        for (std::int64_t i = 0; i < spatial; ++i) {
          const float zv = (in[off + i] - mu) * is_c;
          z[off + i] = zv;
          o[off + i] = gc * zv + bc;
        }
      }
    }
  }

  if (!any_needs_grad({&input, &gamma, &beta})) return {out, normalized};
  out->mark_needs_grad();
  normalized->mark_needs_grad();
  auto inv_std_saved = std::make_shared<std::vector<float>>(std::move(inv_std));
  tape.record({out, normalized}, [=]() {
    const float* g_out = grad_or_null(out);
    const float* g_z = grad_or_null(normalized);
    if (!g_out && !g_z) return;
    const float* z = normalized->data().data();
    const float* gm = gamma->data().data();
    const std::vector<float>& istd = *inv_std_saved;

    if ((gamma->needs_grad() || beta->needs_grad()) && g_out) {
      float* dg = gamma->needs_grad() ? gamma->grad().data() : nullptr;
      float* db = beta->needs_grad() ? beta->grad().data() : nullptr;
      for (int c = 0; c < C; ++c) {
        double sg = 0.0, sb = 0.0;
        for (int n = 0; n < N; ++n) {
          const std::int64_t off =
              (static_cast<std::int64_t>(n) * C + c) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            sg += static_cast<double>(g_out[off + i]) * z[off + i];
            sb += g_out[off + i];
          }
        }
        if (dg) dg[c] += static_cast<float>(sg);
        if (db) db[c] += static_cast<float>(sb);
      }
    }

    if (!input->needs_grad()) return;
    float* di = input->grad().data();
    for (int c = 0; c < C; ++c) {
      const float gc = gm[c];
      const float is_c = istd[static_cast<size_t>(c)];
      if (use_batch_stats) {
        // z depends on the batch mean and variance, so the chain rule picks
        // up the two correction sums.
        double s1 = 0.0, s2 = 0.0;
        for (int n = 0; n < N; ++n) {
          const std::int64_t off =
              (static_cast<std::int64_t>(n) * C + c) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const float gt = (g_out ? gc * g_out[off + i] : 0.0f) +
                             (g_z ? g_z[off + i] : 0.0f);
            s1 += gt;
            s2 += static_cast<double>(gt) * z[off + i];
          }
        }
        const float c1 = static_cast<float>(s1 / static_cast<double>(m));
        const float c2 = static_cast<float>(s2 / static_cast<double>(m));
        for (int n = 0; n < N; ++n) {
          const std::int64_t off =
              (static_cast<std::int64_t>(n) * C + c) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const float gt = (g_out ? gc * g_out[off + i] : 0.0f) +
                             (g_z ? g_z[off + i] : 0.0f);
            di[off + i] += is_c * (gt - c1 - z[off + i] * c2);
          }
        }
      } else {
        // Running statistics are constants; the map is elementwise affine.
        for (int n = 0; n < N; ++n) {
          const std::int64_t off =
              (static_cast<std::int64_t>(n) * C + c) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const float gt = (g_out ? gc * g_out[off + i] : 0.0f) +
                             (g_z ? g_z[off + i] : 0.0f);
            di[off + i] += is_c * gt;
          }
        }
      }
    }
  });
  return {out, normalized};
}

TensorPtr softmax_cross_entropy(Tape& tape, const TensorPtr& logits,
                                const std::vector<int>& labels) {
  const Shape& ls = logits->shape();
  if (ls.rank() != 2) {
    throw ShapeError("softmax_cross_entropy expects logits [N,K], got " +
                     ls.str());
  }
  const int N = ls.dim(0), K = ls.dim(1);
  if (static_cast<int>(labels.size()) != N) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for batch of " + std::to_string(N));
  }
  for (int i = 0; i < N; ++i) {
    if (labels[i] < 0 || labels[i] >= K) {
      throw Error("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                  " at row " + std::to_string(i) + " outside [0," +
                  std::to_string(K) + ")");
    }
  }

  auto probs = std::make_shared<std::vector<float>>(
      static_cast<size_t>(N) * K);
  const float* x = logits->data().data();
  double loss_sum = 0.0;
  for (int i = 0; i < N; ++i) {
    const float* row = x + static_cast<std::int64_t>(i) * K;
    float* p = probs->data() + static_cast<std::int64_t>(i) * K;
    float mx = row[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double denom = 0.0;
    for (int k = 0; k < K; ++k) {
      const double e = std::exp(static_cast<double>(row[k]) - mx);
      p[k] = static_cast<float>(e);
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int k = 0; k < K; ++k) p[k] *= inv;
    loss_sum -= std::log(static_cast<double>(p[labels[i]]) + 1e-45);
  }
  auto out = Tensor::from_scalar(static_cast<float>(loss_sum / N));

  if (!logits->needs_grad()) return out;
  out->mark_needs_grad();
  auto labels_saved = std::make_shared<std::vector<int>>(labels);
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float g = out->grad()[0];
    float* dl = logits->grad().data();
    const float* p = probs->data();
    const float inv_n = 1.0f / static_cast<float>(N);
    for (int i = 0; i < N; ++i) {
      const std::int64_t off = static_cast<std::int64_t>(i) * K;
      for (int k = 0; k < K; ++k) {
        float v = p[off + k];
        if (k == (*labels_saved)[static_cast<size_t>(i)]) v -= 1.0f;
        dl[off + k] += g * v * inv_n;
      }
    }
  });
  return out;
}

TensorPtr reshape(Tape& tape, const TensorPtr& input, Shape shape) {
  if (shape.numel() != input->numel()) {
    throw ShapeError("reshape: " + input->shape().str() + " has " +
                     std::to_string(input->numel()) + " elements, target " +
                     shape.str());
  }
  if (!input->needs_grad()) return input->detached()->reshaped_view(shape);

  auto out = input->detached()->reshaped_view(std::move(shape));
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    float* di = input->grad().data();
    const std::int64_t n = input->numel();
    for (std::int64_t i = 0; i < n; ++i) di[i] += g[i];
  });
  return out;
}

TensorPtr add(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "add");
  auto out = Tensor::zeros(a->shape());
  const float* av = a->data().data();
  const float* bv = b->data().data();
  float* o = out->data().data();
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = av[i] + bv[i];

  if (!any_needs_grad({&a, &b})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    if (a->needs_grad()) {
      float* da = a->grad().data();
      for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (b->needs_grad()) {
      float* db = b->grad().data();
      for (std::int64_t i = 0; i < n; ++i) db[i] += g[i];
    }
  });
  return out;
}

TensorPtr sub(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "sub");
  auto out = Tensor::zeros(a->shape());
  const float* av = a->data().data();
  const float* bv = b->data().data();
  float* o = out->data().data();
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = av[i] - bv[i];

  if (!any_needs_grad({&a, &b})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    if (a->needs_grad()) {
      float* da = a->grad().data();
      for (std::int64_t i = 0; i < n; ++i) da[i] += g[i];
    }
    if (b->needs_grad()) {
      float* db = b->grad().data();
      for (std::int64_t i = 0; i < n; ++i) db[i] -= g[i];
    }
  });
  return out;
}

TensorPtr mul(Tape& tape, const TensorPtr& a, const TensorPtr& b) {
  check_same_shape(a, b, "mul");
  auto out = Tensor::zeros(a->shape());
  const float* av = a->data().data();
  const float* bv = b->data().data();
  float* o = out->data().data();
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = av[i] * bv[i];

  if (!any_needs_grad({&a, &b})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    const float* av2 = a->data().data();
    const float* bv2 = b->data().data();
    if (a->needs_grad()) {
      float* da = a->grad().data();
      for (std::int64_t i = 0; i < n; ++i) da[i] += g[i] * bv2[i];
    }
    if (b->needs_grad()) {
      float* db = b->grad().data();
      for (std::int64_t i = 0; i < n; ++i) db[i] += g[i] * av2[i];
    }
  });
  return out;
}

TensorPtr scale(Tape& tape, const TensorPtr& a, float factor) {
  auto out = Tensor::zeros(a->shape());
  const float* av = a->data().data();
  float* o = out->data().data();
  const std::int64_t n = a->numel();
  for (std::int64_t i = 0; i < n; ++i) o[i] = factor * av[i];

  if (!a->needs_grad()) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    float* da = a->grad().data();
    for (std::int64_t i = 0; i < n; ++i) da[i] += factor * g[i];
  });
  return out;
}

TensorPtr sum_all(Tape& tape, const TensorPtr& a) {
  const float* av = a->data().data();
  const std::int64_t n = a->numel();
  double s = 0.0;
  for (std::int64_t i = 0; i < n; ++i) s += av[i];
  auto out = Tensor::from_scalar(static_cast<float>(s));

  if (!a->needs_grad()) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float g = out->grad()[0];
    float* da = a->grad().data();
    for (std::int64_t i = 0; i < n; ++i) da[i] += g;
  });
  return out;
}

TensorPtr feature_mean_sq_diff(Tape& tape, const TensorPtr& a,
                               const TensorPtr& b) {
  check_same_shape(a, b, "feature_mean_sq_diff");
  const Shape& s = a->shape();
  if (s.rank() != 2 && s.rank() != 4) {
    throw ShapeError("feature_mean_sq_diff expects [N,U] or [N,C,H,W], got " +
                     s.str());
  }
  const int N = s.dim(0), C = s.dim(1);
  const std::int64_t spatial =
      s.rank() == 4 ? static_cast<std::int64_t>(s.dim(2)) * s.dim(3) : 1;
  const std::int64_t m = static_cast<std::int64_t>(N) * spatial;
  const float inv_m = 1.0f / static_cast<float>(m);

  auto out = Tensor::zeros(Shape{C});
  {
    const float* av = a->data().data();
    const float* bv = b->data().data();
    float* o = out->data().data();
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int n = 0; n < N; ++n) {
        const std::int64_t off =
            (static_cast<std::int64_t>(n) * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const double d = static_cast<double>(av[off + i]) - bv[off + i];
          acc += d * d;
        }
      }
      o[c] = static_cast<float>(acc / static_cast<double>(m));
    }
  }

  if (!any_needs_grad({&a, &b})) return out;
  out->mark_needs_grad();
  tape.record({out}, [=]() {
    if (!out->has_grad()) return;
    const float* g = out->grad().data();
    const float* av = a->data().data();
    const float* bv = b->data().data();
    float* da = a->needs_grad() ? a->grad().data() : nullptr;
    float* db = b->needs_grad() ? b->grad().data() : nullptr;
    for (int c = 0; c < C; ++c) {
      const float coef = 2.0f * g[c] * inv_m;
      for (int n = 0; n < N; ++n) {
        const std::int64_t off =
            (static_cast<std::int64_t>(n) * C + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const float d = coef * (av[off + i] - bv[off + i]);
          if (da) da[off + i] += d;
          if (db) db[off + i] -= d;
        }
      }
    }
  });
  return out;
}

void sgd_step(std::span<float> param, std::span<const float> grad,
              std::span<float> velocity, float learning_rate, float momentum) {
  if (param.size() != grad.size() || param.size() != velocity.size()) {
    throw ShapeError("sgd_step: param/grad/velocity sizes differ");
  }
  for (size_t i = 0; i < param.size(); ++i) {
    velocity[i] = momentum * velocity[i] + grad[i];
    param[i] -= learning_rate * velocity[i];
  }
}

SgdOptimizer::SgdOptimizer(std::vector<TensorPtr> params, float learning_rate,
                           float momentum)
    : params_(std::move(params)),
      learning_rate_(learning_rate),
      momentum_(momentum) {
  velocities_.reserve(params_.size());
  for (const auto& p : params_) {
    velocities_.emplace_back(static_cast<size_t>(p->numel()), 0.0f);
  }
}

void SgdOptimizer::step() {
  for (size_t i = 0; i < params_.size(); ++i) {
    sgd_step(params_[i]->data(), params_[i]->grad(), velocities_[i],
             learning_rate_, momentum_);
  }
}

void SgdOptimizer::zero_grad() {
  for (auto& p : params_) p->zero_grad();
}

}  // namespace rft
