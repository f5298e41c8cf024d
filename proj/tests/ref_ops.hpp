// Independent double-precision reference implementations used as oracles for
// the float32 engine: direct loops, no graph, no shared code with src/.
#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

namespace refop {

using dvec = std::vector<double>;

inline dvec conv1d(const dvec& in, int64_t B, int64_t Cin, int64_t L,
                   const dvec& w, int64_t Cout, const dvec& bias) {
  dvec out(static_cast<size_t>(B * Cout * L), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t l = 0; l < L; ++l) {
        double acc = bias[co];
        for (int64_t ci = 0; ci < Cin; ++ci)
          for (int64_t t = 0; t < 3; ++t) {
            int64_t src = l + t - 1;
            if (src < 0 || src >= L) continue;
            acc += in[(b * Cin + ci) * L + src] * w[(co * Cin + ci) * 3 + t];
          }
        out[(b * Cout + co) * L + l] = acc;
      }
  return out;
}

inline dvec conv2d(const dvec& in, int64_t B, int64_t Cin, int64_t H, int64_t W,
                   const dvec& w, int64_t Cout, const dvec& bias) {
  dvec out(static_cast<size_t>(B * Cout * H * W), 0.0);
  for (int64_t b = 0; b < B; ++b)
    for (int64_t co = 0; co < Cout; ++co)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t x = 0; x < W; ++x) {
          double acc = bias[co];
          for (int64_t ci = 0; ci < Cin; ++ci)
            for (int64_t dy = 0; dy < 3; ++dy)
              for (int64_t dx = 0; dx < 3; ++dx) {
                int64_t sh = h + dy - 1, sw = x + dx - 1;
                if (sh < 0 || sh >= H || sw < 0 || sw >= W) continue;
                acc += in[((b * Cin + ci) * H + sh) * W + sw] *
                       w[((co * Cin + ci) * 3 + dy) * 3 + dx];
              }
          out[((b * Cout + co) * H + h) * W + x] = acc;
        }
  return out;
}

inline dvec relu(const dvec& in) {
  dvec out(in.size());
  for (size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
  return out;
}

inline dvec add(const dvec& a, const dvec& b) {
  dvec out(a.size());
  for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline dvec concat_channels(const dvec& a, int64_t B, int64_t Ca, const dvec& b,
                            int64_t Cb, int64_t S) {
  dvec out(static_cast<size_t>(B * (Ca + Cb) * S));
  for (int64_t i = 0; i < B; ++i) {
    for (int64_t j = 0; j < Ca * S; ++j) out[i * (Ca + Cb) * S + j] = a[i * Ca * S + j];
    for (int64_t j = 0; j < Cb * S; ++j)
      out[(i * (Ca + Cb) + Ca) * S + j] = b[i * Cb * S + j];
  }
  return out;
}

// Mean over batch and positions of -log softmax(logits)[target].
inline double cross_entropy(const dvec& logits, const std::vector<int32_t>& y,
                            int64_t B, int64_t S) {
  double total = 0.0;
  for (int64_t b = 0; b < B; ++b)
    for (int64_t s = 0; s < S; ++s) {
      const double l0 = logits[(b * 2 + 0) * S + s];
      const double l1 = logits[(b * 2 + 1) * S + s];
      const double m = l0 > l1 ? l0 : l1;
      const double lse = m + std::log(std::exp(l0 - m) + std::exp(l1 - m));
      total += lse - (y[b * S + s] == 0 ? l0 : l1);
    }
  return total / static_cast<double>(B * S);
}

inline double weighted_sum(const dvec& v, const dvec& coeff) {
  double acc = 0.0;
  for (size_t i = 0; i < v.size(); ++i) acc += v[i] * coeff[i];
  return acc;
}

}  // namespace refop
