#include "dtlab/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>
#include <unordered_set>

namespace dtlab {

namespace {

thread_local int g_no_grad_depth = 0;

[[noreturn]] void fail(const std::string& msg) {
  throw std::invalid_argument(msg);
}

void check(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// Grow-only scratch buffers for the conv lowering. Graphs are confined to one
// worker (single-writer model), so thread_local is safe.
thread_local std::vector<float> g_col_buf;
thread_local std::vector<float> g_out_buf;
thread_local std::vector<float> g_dcol_buf;

float* scratch(std::vector<float>& buf, size_t n) {
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

// col is (C*3, B*L) row-major; column index b*L + l holds input[b, c, l+t-1]
// for row c*3 + t, zero outside the signal.
void im2col_1d(const float* in, int64_t B, int64_t C, int64_t L, float* col) {
  const int64_t N = B * L;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t t = 0; t < 3; ++t) {
      float* row = col + (c * 3 + t) * N;
      for (int64_t b = 0; b < B; ++b) {
        const float* src = in + (b * C + c) * L;
        float* dst = row + b * L;
        if (t == 0) {
          dst[0] = 0.0f;
          std::memcpy(dst + 1, src, (L - 1) * sizeof(float));
        } else if (t == 1) {
          std::memcpy(dst, src, L * sizeof(float));
        } else {
          std::memcpy(dst, src + 1, (L - 1) * sizeof(float));
          dst[L - 1] = 0.0f;
        }
      }
    }
  }
}

void col2im_1d(const float* col, int64_t B, int64_t C, int64_t L, float* din) {
  const int64_t N = B * L;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t t = 0; t < 3; ++t) {
      const float* row = col + (c * 3 + t) * N;
      const int64_t shift = t - 1;
      for (int64_t b = 0; b < B; ++b) {
        const float* src = row + b * L;
        float* dst = din + (b * C + c) * L;
        const int64_t lo = std::max<int64_t>(0, -shift);
        const int64_t hi = std::min<int64_t>(L, L - shift);
        for (int64_t l = lo; l < hi; ++l) dst[l + shift] += src[l];
      }
    }
  }
}

// col is (C*9, B*H*W) row-major; row (c*3 + dy)*3 + dx holds
// input[b, c, h+dy-1, w+dx-1], zero outside the image.
void im2col_2d(const float* in, int64_t B, int64_t C, int64_t H, int64_t W,
               float* col) {
  const int64_t S = H * W;
  const int64_t N = B * S;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t dy = 0; dy < 3; ++dy) {
      for (int64_t dx = 0; dx < 3; ++dx) {
        float* row = col + ((c * 3 + dy) * 3 + dx) * N;
        for (int64_t b = 0; b < B; ++b) {
          const float* plane = in + (b * C + c) * S;
          for (int64_t h = 0; h < H; ++h) {
            float* dst = row + b * S + h * W;
            const int64_t sh = h + dy - 1;
            if (sh < 0 || sh >= H) {
              std::memset(dst, 0, W * sizeof(float));
              continue;
            }
            const float* src = plane + sh * W;
            if (dx == 0) {
              dst[0] = 0.0f;
              std::memcpy(dst + 1, src, (W - 1) * sizeof(float));
            } else if (dx == 1) {
              std::memcpy(dst, src, W * sizeof(float));
            } else {
              std::memcpy(dst, src + 1, (W - 1) * sizeof(float));
              dst[W - 1] = 0.0f;
            }
          }
        }
      }
    }
  }
}

void col2im_2d(const float* col, int64_t B, int64_t C, int64_t H, int64_t W,
               float* din) {
  const int64_t S = H * W;
  const int64_t N = B * S;
  for (int64_t c = 0; c < C; ++c) {
    for (int64_t dy = 0; dy < 3; ++dy) {
      for (int64_t dx = 0; dx < 3; ++dx) {
        const float* row = col + ((c * 3 + dy) * 3 + dx) * N;
        const int64_t xshift = dx - 1;
        for (int64_t b = 0; b < B; ++b) {
          float* plane = din + (b * C + c) * S;
          for (int64_t h = 0; h < H; ++h) {
            const int64_t sh = h + dy - 1;
            if (sh < 0 || sh >= H) continue;
            const float* src = row + b * S + h * W;
            float* dst = plane + sh * W;
            const int64_t lo = std::max<int64_t>(0, -xshift);
            const int64_t hi = std::min<int64_t>(W, W - xshift);
            for (int64_t w = lo; w < hi; ++w) dst[w + xshift] += src[w];
          }
        }
      }
    }
  }
}

void sgemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k,
           float alpha, const float* a, int64_t lda, const float* b,
           int64_t ldb, float beta, float* c, int64_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m),
              static_cast<int>(n), static_cast<int>(k), alpha, a,
              static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
              static_cast<int>(ldc));
}

}  // namespace

int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

Tensor Tensor::make(Shape shape) {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  int64_t n = shape_numel(shape);
  check(n >= 0, "tensor: negative extent in shape " + shape_str(shape));
  t.impl_->shape = std::move(shape);
  t.impl_->values.resize(static_cast<size_t>(n));
  return t;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t = make(std::move(shape));
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, float value, bool requires_grad) {
  Tensor t = make(std::move(shape));
  std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<float> values,
                           bool requires_grad) {
  int64_t n = shape_numel(shape);
  check(static_cast<int64_t>(values.size()) == n,
        "tensor: " + std::to_string(values.size()) +
            " values for shape " + shape_str(shape));
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = std::move(shape);
  t.impl_->values = std::move(values);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(float value) { return from_values({}, {value}); }

std::span<float> Tensor::mutable_grad() {
  if (impl_->grad.empty()) impl_->grad.resize(impl_->values.size(), 0.0f);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad.empty()) {
    impl_->grad.resize(impl_->values.size(), 0.0f);
  } else {
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
  }
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_ = std::make_shared<TensorImpl>();
  t.impl_->shape = impl_->shape;
  t.impl_->values = impl_->values;
  return t;
}

float Tensor::item() const {
  check(numel() == 1, "item: tensor has " + std::to_string(numel()) +
                          " elements, expected 1");
  return impl_->values[0];
}

void Tensor::attach_node(std::vector<Tensor> parents,
                         std::function<void()> backward_fn) {
  impl_->node = std::make_unique<GraphNode>();
  impl_->node->parents = std::move(parents);
  impl_->node->backward_fn = std::move(backward_fn);
  impl_->requires_grad = true;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }

bool grad_enabled() { return g_no_grad_depth == 0; }

namespace {

bool wants_node(std::initializer_list<const Tensor*> inputs) {
  if (!grad_enabled()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

}  // namespace

Tensor conv(const Tensor& input, const Tensor& weights, const Tensor& bias,
            int dims) {
  check(dims == 1 || dims == 2, "conv: dims must be 1 or 2");
  const size_t want_rank = static_cast<size_t>(dims) + 2;
  check(input.rank() == want_rank,
        "conv: input rank " + std::to_string(input.rank()) + " for " +
            std::to_string(dims) + "d, expected batch+channel+" +
            std::to_string(dims) + " spatial axes");
  check(weights.rank() == want_rank,
        "conv: weights rank " + std::to_string(weights.rank()) +
            ", expected " + std::to_string(want_rank));
  for (size_t ax = 2; ax < want_rank; ++ax) {
    check(weights.extent(ax) == 3,
          "conv: weights spatial axis " + std::to_string(ax) + " has extent " +
              std::to_string(weights.extent(ax)) + ", expected 3");
  }
  check(input.extent(1) == weights.extent(1),
        "conv: input channel axis has " + std::to_string(input.extent(1)) +
            " channels but weights expect " + std::to_string(weights.extent(1)));
  check(bias.rank() == 1 && bias.extent(0) == weights.extent(0),
        "conv: bias shape " + shape_str(bias.shape()) +
            " does not match filter count " + std::to_string(weights.extent(0)));

  const int64_t B = input.extent(0);
  const int64_t Cin = input.extent(1);
  const int64_t Cout = weights.extent(0);
  const int64_t H = dims == 2 ? input.extent(2) : 1;
  const int64_t W = dims == 2 ? input.extent(3) : input.extent(2);
  const int64_t S = H * W;
  const int64_t KS = dims == 2 ? 9 : 3;
  const int64_t K = Cin * KS;
  const int64_t N = B * S;

  Shape out_shape = input.shape();
  out_shape[1] = Cout;
  Tensor out = Tensor::make(std::move(out_shape));

  float* col = scratch(g_col_buf, static_cast<size_t>(K * N));
  if (dims == 1) {
    im2col_1d(input.values().data(), B, Cin, W, col);
  } else {
    im2col_2d(input.values().data(), B, Cin, H, W, col);
  }
  float* tmp = scratch(g_out_buf, static_cast<size_t>(Cout * N));
  sgemm(false, false, Cout, N, K, 1.0f, weights.values().data(), K, col, N,
        0.0f, tmp, N);
  float* dst = out.mutable_values().data();
  const float* bsrc = bias.values().data();
  for (int64_t b = 0; b < B; ++b) {
    for (int64_t co = 0; co < Cout; ++co) {
      const float* src = tmp + co * N + b * S;
      float* o = dst + (b * Cout + co) * S;
      const float bv = bsrc[co];
      for (int64_t s = 0; s < S; ++s) o[s] = src[s] + bv;
    }
  }

  if (wants_node({&input, &weights, &bias})) {
    TensorImpl* out_impl = out.impl();
    Tensor in_ = input, w_ = weights, b_ = bias;
    int d = dims;
    out.attach_node({input, weights, bias}, [out_impl, in_, w_, b_, d, B, Cin,
                                             Cout, H, W, S, K, N]() mutable {
      const float* dout = out_impl->grad.data();
      // Pack dout into (Cout, B*S) once for both gemms.
      float* dtmp = scratch(g_out_buf, static_cast<size_t>(Cout * N));
      for (int64_t b = 0; b < B; ++b)
        for (int64_t co = 0; co < Cout; ++co)
          std::memcpy(dtmp + co * N + b * S, dout + (b * Cout + co) * S,
                      S * sizeof(float));
      if (b_.requires_grad()) {
        std::span<float> db = b_.mutable_grad();
        for (int64_t co = 0; co < Cout; ++co) {
          double acc = 0.0;
          const float* row = dtmp + co * N;
          for (int64_t n = 0; n < N; ++n) acc += row[n];
          db[static_cast<size_t>(co)] += static_cast<float>(acc);
        }
      }
      const bool need_dw = w_.requires_grad();
      const bool need_din = in_.requires_grad();
      if (!need_dw && !need_din) return;
      float* col = scratch(g_col_buf, static_cast<size_t>(K * N));
      if (need_dw) {
        if (d == 1) {
          im2col_1d(in_.values().data(), B, Cin, W, col);
        } else {
          im2col_2d(in_.values().data(), B, Cin, H, W, col);
        }
        sgemm(false, true, Cout, K, N, 1.0f, dtmp, N, col, N, 1.0f,
              w_.mutable_grad().data(), K);
      }
      if (need_din) {
        float* dcol = scratch(g_dcol_buf, static_cast<size_t>(K * N));
        sgemm(true, false, K, N, Cout, 1.0f, w_.values().data(), K, dtmp, N,
              0.0f, dcol, N);
        if (d == 1) {
          col2im_1d(dcol, B, Cin, W, in_.mutable_grad().data());
        } else {
          col2im_2d(dcol, B, Cin, H, W, in_.mutable_grad().data());
        }
      }
    });
  }
  return out;
}

Tensor relu(const Tensor& input) {
  Tensor out = Tensor::make(input.shape());
  const auto src = input.values();
  auto dst = out.mutable_values();
  for (size_t i = 0; i < src.size(); ++i) dst[i] = src[i] > 0.0f ? src[i] : 0.0f;
  if (wants_node({&input})) {
    TensorImpl* out_impl = out.impl();
    Tensor in_ = input;
    out.attach_node({input}, [out_impl, in_]() mutable {
      const std::vector<float>& dout = out_impl->grad;
      const std::vector<float>& v = out_impl->values;
      std::span<float> din = in_.mutable_grad();
      for (size_t i = 0; i < dout.size(); ++i)
        if (v[i] > 0.0f) din[i] += dout[i];
    });
  }
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  check(a.rank() == b.rank() && a.rank() >= 3,
        "concat_channels: ranks " + std::to_string(a.rank()) + " vs " +
            std::to_string(b.rank()));
  check(a.extent(0) == b.extent(0),
        "concat_channels: batch axis " + std::to_string(a.extent(0)) + " vs " +
            std::to_string(b.extent(0)));
  for (size_t ax = 2; ax < a.rank(); ++ax) {
    check(a.extent(ax) == b.extent(ax),
          "concat_channels: spatial axis " + std::to_string(ax) + " mismatch (" +
              std::to_string(a.extent(ax)) + " vs " +
              std::to_string(b.extent(ax)) + ")");
  }
  const int64_t B = a.extent(0);
  const int64_t Ca = a.extent(1), Cb = b.extent(1);
  int64_t S = 1;
  for (size_t ax = 2; ax < a.rank(); ++ax) S *= a.extent(ax);

  Shape out_shape = a.shape();
  out_shape[1] = Ca + Cb;
  Tensor out = Tensor::make(std::move(out_shape));
  float* dst = out.mutable_values().data();
  const float* pa = a.values().data();
  const float* pb = b.values().data();
  for (int64_t i = 0; i < B; ++i) {
    std::memcpy(dst + i * (Ca + Cb) * S, pa + i * Ca * S,
                Ca * S * sizeof(float));
    std::memcpy(dst + (i * (Ca + Cb) + Ca) * S, pb + i * Cb * S,
                Cb * S * sizeof(float));
  }
  if (wants_node({&a, &b})) {
    TensorImpl* out_impl = out.impl();
    Tensor a_ = a, b_ = b;
    out.attach_node({a, b}, [out_impl, a_, b_, B, Ca, Cb, S]() mutable {
      const float* dout = out_impl->grad.data();
      if (a_.requires_grad()) {
        float* da = a_.mutable_grad().data();
        for (int64_t i = 0; i < B; ++i) {
          const float* src = dout + i * (Ca + Cb) * S;
          float* d = da + i * Ca * S;
          for (int64_t j = 0; j < Ca * S; ++j) d[j] += src[j];
        }
      }
      if (b_.requires_grad()) {
        float* db = b_.mutable_grad().data();
        for (int64_t i = 0; i < B; ++i) {
          const float* src = dout + (i * (Ca + Cb) + Ca) * S;
          float* d = db + i * Cb * S;
          for (int64_t j = 0; j < Cb * S; ++j) d[j] += src[j];
        }
      }
    });
  }
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "add: shape " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor out = Tensor::make(a.shape());
  const auto va = a.values();
  const auto vb = b.values();
  auto dst = out.mutable_values();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] + vb[i];
  if (wants_node({&a, &b})) {
    TensorImpl* out_impl = out.impl();
    Tensor a_ = a, b_ = b;
    out.attach_node({a, b}, [out_impl, a_, b_]() mutable {
      const std::vector<float>& dout = out_impl->grad;
      if (a_.requires_grad()) {
        std::span<float> da = a_.mutable_grad();
        for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i];
      }
      if (b_.requires_grad()) {
        std::span<float> db = b_.mutable_grad();
        for (size_t i = 0; i < dout.size(); ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check(a.shape() == b.shape(), "mul: shape " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
  Tensor out = Tensor::make(a.shape());
  const auto va = a.values();
  const auto vb = b.values();
  auto dst = out.mutable_values();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] * vb[i];
  if (wants_node({&a, &b})) {
    TensorImpl* out_impl = out.impl();
    Tensor a_ = a, b_ = b;
    out.attach_node({a, b}, [out_impl, a_, b_]() mutable {
      const std::vector<float>& dout = out_impl->grad;
      if (a_.requires_grad()) {
        std::span<float> da = a_.mutable_grad();
        const auto vb2 = b_.values();
        for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * vb2[i];
      }
      if (b_.requires_grad()) {
        std::span<float> db = b_.mutable_grad();
        const auto va2 = a_.values();
        for (size_t i = 0; i < dout.size(); ++i) db[i] += dout[i] * va2[i];
      }
    });
  }
  return out;
}

Tensor scale(const Tensor& a, float c) {
  Tensor out = Tensor::make(a.shape());
  const auto va = a.values();
  auto dst = out.mutable_values();
  for (size_t i = 0; i < dst.size(); ++i) dst[i] = va[i] * c;
  if (wants_node({&a})) {
    TensorImpl* out_impl = out.impl();
    Tensor a_ = a;
    out.attach_node({a}, [out_impl, a_, c]() mutable {
      const std::vector<float>& dout = out_impl->grad;
      std::span<float> da = a_.mutable_grad();
      for (size_t i = 0; i < dout.size(); ++i) da[i] += dout[i] * c;
    });
  }
  return out;
}

Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (float v : a.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  if (wants_node({&a})) {
    TensorImpl* out_impl = out.impl();
    Tensor a_ = a;
    out.attach_node({a}, [out_impl, a_]() mutable {
      const float g = out_impl->grad[0];
      std::span<float> da = a_.mutable_grad();
      for (size_t i = 0; i < da.size(); ++i) da[i] += g;
    });
  }
  return out;
}

Tensor cross_entropy_per_position(const Tensor& logits, const Labels& target) {
  check(logits.rank() >= 3, "cross_entropy: logits rank " +
                                std::to_string(logits.rank()) +
                                ", expected (batch, class, positions...)");
  check(logits.extent(1) == 2,
        "cross_entropy: class axis has extent " +
            std::to_string(logits.extent(1)) + ", expected 2");
  Shape want = logits.shape();
  want.erase(want.begin() + 1);
  check(target.shape == want, "cross_entropy: target shape " +
                                  shape_str(target.shape) +
                                  " does not match positions " + shape_str(want));
  for (int32_t v : target.values) {
    check(v == 0 || v == 1,
          "cross_entropy: target value " + std::to_string(v) + " not in {0,1}");
  }
  const int64_t B = logits.extent(0);
  int64_t S = 1;
  for (size_t ax = 2; ax < logits.rank(); ++ax) S *= logits.extent(ax);
  const int64_t P = B * S;
  const float* lv = logits.values().data();

  double total = 0.0;
  for (int64_t b = 0; b < B; ++b) {
    const float* l0 = lv + b * 2 * S;
    const float* l1 = l0 + S;
    const int32_t* y = target.values.data() + b * S;
    for (int64_t s = 0; s < S; ++s) {
      const double a = l0[s], c = l1[s];
      const double m = a > c ? a : c;
      const double lse = m + std::log(std::exp(a - m) + std::exp(c - m));
      total += lse - (y[s] == 0 ? a : c);
    }
  }
  Tensor out = Tensor::scalar(static_cast<float>(total / static_cast<double>(P)));

  if (wants_node({&logits})) {
    TensorImpl* out_impl = out.impl();
    Tensor logits_ = logits;
    std::vector<int32_t> y = target.values;
    out.attach_node({logits}, [out_impl, logits_, y = std::move(y), B, S,
                               P]() mutable {
      const float g = out_impl->grad[0] / static_cast<float>(P);
      const float* lv = logits_.values().data();
      float* dl = logits_.mutable_grad().data();
      for (int64_t b = 0; b < B; ++b) {
        const float* l0 = lv + b * 2 * S;
        const float* l1 = l0 + S;
        float* d0 = dl + b * 2 * S;
        float* d1 = d0 + S;
        const int32_t* yb = y.data() + b * S;
        for (int64_t s = 0; s < S; ++s) {
          const float m = l0[s] > l1[s] ? l0[s] : l1[s];
          const float e0 = std::exp(l0[s] - m);
          const float e1 = std::exp(l1[s] - m);
          const float p0 = e0 / (e0 + e1);
          d0[s] += g * (p0 - (yb[s] == 0 ? 1.0f : 0.0f));
          d1[s] += g * ((1.0f - p0) - (yb[s] == 1 ? 1.0f : 0.0f));
        }
      }
    });
  }
  return out;
}

void backward(const Tensor& loss) {
  check(loss.defined() && loss.numel() == 1,
        "backward: loss must be a defined scalar");
  check(loss.node() != nullptr, "backward: loss has no graph");

  // Post-order DFS to topologically sort the reachable graph.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  struct Frame {
    TensorImpl* t;
    size_t next = 0;
  };
  std::vector<Frame> stack;
  stack.push_back({loss.impl()});
  seen.insert(loss.impl());
  while (!stack.empty()) {
    Frame& f = stack.back();
    GraphNode* node = f.t->node.get();
    if (node && f.next < node->parents.size()) {
      TensorImpl* p = node->parents[f.next++].impl();
      if (p->node && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p});
      }
    } else {
      order.push_back(f.t);
      stack.pop_back();
    }
  }

  // Interior gradients are per-pass workspace: reset them so a repeated
  // backward accumulates only into the leaves.
  for (TensorImpl* t : order)
    std::fill(t->grad.begin(), t->grad.end(), 0.0f);

  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    if (t->grad.empty()) continue;  // no gradient reached this node
    t->node->backward_fn();
  }
}

}  // namespace dtlab
