#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <functional>

#include "dtlab/rng.hpp"
#include "dtlab/tensor.hpp"
#include "ref_ops.hpp"

using namespace dtlab;

namespace {

Tensor rand_tensor(const Shape& shape, Rng& rng, float lo, float hi,
                   bool requires_grad = false) {
  Tensor t = Tensor::zeros(shape, requires_grad);
  for (float& v : t.mutable_values()) v = rng.uniform(lo, hi);
  return t;
}

refop::dvec to_dvec(const Tensor& t) {
  refop::dvec out(t.values().begin(), t.values().end());
  return out;
}

// Central finite differences on the double-precision reference function,
// compared against the float32 analytic gradients.
double max_fd_error(
    std::vector<Tensor>& inputs,
    const std::function<Tensor(const std::vector<Tensor>&)>& f_float,
    const std::function<double(const std::vector<refop::dvec>&)>& f_ref,
    double eps = 1e-3) {
  Tensor loss = f_float(inputs);
  backward(loss);
  std::vector<refop::dvec> xs;
  xs.reserve(inputs.size());
  for (const Tensor& t : inputs) xs.push_back(to_dvec(t));
  double worst = 0.0;
  for (size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].requires_grad()) continue;
    REQUIRE(inputs[i].has_grad());
    for (size_t j = 0; j < xs[i].size(); ++j) {
      const double v = xs[i][j];
      xs[i][j] = v + eps;
      const double up = f_ref(xs);
      xs[i][j] = v - eps;
      const double down = f_ref(xs);
      xs[i][j] = v;
      const double fd = (up - down) / (2.0 * eps);
      const double an = inputs[i].grad()[j];
      const double err =
          std::abs(an - fd) / std::max({1.0, std::abs(an), std::abs(fd)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("conv1d identity kernel under zero padding") {
  Tensor x = Tensor::from_values({1, 1, 3}, {1, 2, 3});
  Tensor w = Tensor::from_values({1, 1, 3}, {0, 1, 0});
  Tensor b = Tensor::zeros({1});
  Tensor out = conv(x, w, b, 1);
  CHECK(out.shape() == Shape{1, 1, 3});
  CHECK(out.values()[0] == 1.0f);
  CHECK(out.values()[1] == 2.0f);
  CHECK(out.values()[2] == 3.0f);
}

TEST_CASE("conv on all-zero input yields the per-channel bias") {
  Rng rng(7);
  Tensor x = Tensor::zeros({2, 3, 5});
  Tensor w = rand_tensor({4, 3, 3}, rng, -1.0f, 1.0f);
  Tensor b = Tensor::from_values({4}, {0.5f, -1.25f, 2.0f, 0.0f});
  Tensor out = conv(x, w, b, 1);
  for (int64_t i = 0; i < 2; ++i)
    for (int64_t co = 0; co < 4; ++co)
      for (int64_t l = 0; l < 5; ++l)
        CHECK(out.values()[(i * 4 + co) * 5 + l] == b.values()[co]);
}

TEST_CASE("conv rejects shape mismatches with an axis diagnostic") {
  Tensor x = Tensor::zeros({1, 2, 4});
  Tensor w = Tensor::zeros({3, 5, 3});
  Tensor b = Tensor::zeros({3});
  CHECK_THROWS_WITH_AS(conv(x, w, b, 1),
                       doctest::Contains("channel axis"), std::invalid_argument);
  Tensor w5 = Tensor::zeros({3, 2, 5});
  CHECK_THROWS_WITH_AS(conv(x, w5, b, 1),
                       doctest::Contains("spatial axis"), std::invalid_argument);
  Tensor bbad = Tensor::zeros({4});
  CHECK_THROWS_AS(conv(x, w, bbad, 1), std::invalid_argument);
  CHECK_THROWS_AS(conv(Tensor::zeros({1, 2, 4, 4}), w, b, 1),
                  std::invalid_argument);
}

TEST_CASE("conv1d gradients match the finite-difference oracle") {
  Rng rng(11);
  for (int inst = 0; inst < 20; ++inst) {
    const int64_t B = 1 + rng.uniform_int(0, 1);
    const int64_t Cin = 1 + rng.uniform_int(0, 2);
    const int64_t Cout = 1 + rng.uniform_int(0, 2);
    const int64_t L = 3 + rng.uniform_int(0, 3);
    std::vector<Tensor> in{
        rand_tensor({B, Cin, L}, rng, -1.0f, 1.0f, true),
        rand_tensor({Cout, Cin, 3}, rng, -1.0f, 1.0f, true),
        rand_tensor({Cout}, rng, -1.0f, 1.0f, true),
        rand_tensor({B, Cout, L}, rng, -1.0f, 1.0f)};  // probe coefficients
    auto f = [](const std::vector<Tensor>& v) {
      return sum(mul(conv(v[0], v[1], v[2], 1), v[3]));
    };
    auto g = [&](const std::vector<refop::dvec>& v) {
      return refop::weighted_sum(refop::conv1d(v[0], B, Cin, L, v[1], Cout, v[2]),
                                 v[3]);
    };
    CHECK(max_fd_error(in, f, g) < 1e-3);
  }
}

TEST_CASE("conv2d gradients match the finite-difference oracle") {
  Rng rng(13);
  // The 2-channel 4x4 case, plus randomized shapes.
  for (int inst = 0; inst < 20; ++inst) {
    const int64_t B = 1;
    const int64_t Cin = inst == 0 ? 2 : 1 + rng.uniform_int(0, 1);
    const int64_t Cout = inst == 0 ? 2 : 1 + rng.uniform_int(0, 1);
    const int64_t H = inst == 0 ? 4 : 3 + rng.uniform_int(0, 1);
    const int64_t W = inst == 0 ? 4 : 3 + rng.uniform_int(0, 1);
    std::vector<Tensor> in{
        rand_tensor({B, Cin, H, W}, rng, -1.0f, 1.0f, true),
        rand_tensor({Cout, Cin, 3, 3}, rng, -1.0f, 1.0f, true),
        rand_tensor({Cout}, rng, -1.0f, 1.0f, true),
        rand_tensor({B, Cout, H, W}, rng, -1.0f, 1.0f)};
    auto f = [](const std::vector<Tensor>& v) {
      return sum(mul(conv(v[0], v[1], v[2], 2), v[3]));
    };
    auto g = [&](const std::vector<refop::dvec>& v) {
      return refop::weighted_sum(
          refop::conv2d(v[0], B, Cin, H, W, v[1], Cout, v[2]), v[3]);
    };
    CHECK(max_fd_error(in, f, g) < 1e-3);
  }
}

TEST_CASE("relu forward") {
  Tensor x = Tensor::from_values({1, 1, 3}, {-1, 0, 2});
  Tensor out = relu(x);
  CHECK(out.values()[0] == 0.0f);
  CHECK(out.values()[1] == 0.0f);
  CHECK(out.values()[2] == 2.0f);
}

TEST_CASE("relu blocks gradient on all-negative input") {
  Tensor x = Tensor::zeros({1, 1, 4}, true);
  for (float& v : x.mutable_values()) v = -2.0f;
  Tensor loss = sum(relu(x));
  backward(loss);
  Tensor rectified = relu(x);
  for (float v : rectified.values()) CHECK(v == 0.0f);
  for (float g : x.grad()) CHECK(g == 0.0f);
}

TEST_CASE("relu gradients away from zero") {
  Rng rng(17);
  for (int inst = 0; inst < 20; ++inst) {
    Tensor x = Tensor::zeros({2, 2, 5}, true);
    for (float& v : x.mutable_values()) {
      v = rng.uniform(0.1f, 1.0f) * (rng.bit() ? 1.0f : -1.0f);
    }
    std::vector<Tensor> in{x, rand_tensor({2, 2, 5}, rng, -1.0f, 1.0f)};
    auto f = [](const std::vector<Tensor>& v) {
      return sum(mul(relu(v[0]), v[1]));
    };
    auto g = [](const std::vector<refop::dvec>& v) {
      return refop::weighted_sum(refop::relu(v[0]), v[1]);
    };
    CHECK(max_fd_error(in, f, g) < 1e-4);
  }
}

TEST_CASE("concat_channels shapes and round trip") {
  Rng rng(19);
  Tensor a = rand_tensor({2, 8, 6}, rng, -1.0f, 1.0f);
  Tensor b = rand_tensor({2, 3, 6}, rng, -1.0f, 1.0f);
  Tensor out = concat_channels(a, b);
  CHECK(out.shape() == Shape{2, 11, 6});
  // Slicing the result back recovers the inputs bit-exactly.
  for (int64_t i = 0; i < 2; ++i) {
    CHECK(std::memcmp(out.values().data() + i * 11 * 6,
                      a.values().data() + i * 8 * 6, 8 * 6 * 4) == 0);
    CHECK(std::memcmp(out.values().data() + (i * 11 + 8) * 6,
                      b.values().data() + i * 3 * 6, 3 * 6 * 4) == 0);
  }
  CHECK_THROWS_WITH_AS(concat_channels(a, Tensor::zeros({2, 3, 7})),
                       doctest::Contains("spatial axis"), std::invalid_argument);
}

TEST_CASE("concat_channels routes gradient back to both inputs") {
  Tensor a = Tensor::zeros({1, 2, 3}, true);
  Tensor b = Tensor::zeros({1, 1, 3}, true);
  backward(sum(concat_channels(a, b)));
  for (float g : a.grad()) CHECK(g == 1.0f);
  for (float g : b.grad()) CHECK(g == 1.0f);
}

TEST_CASE("add basics") {
  Rng rng(23);
  Tensor x = rand_tensor({1, 2, 4}, rng, -1.0f, 1.0f);
  Tensor zero = Tensor::zeros({1, 2, 4});
  Tensor out = add(x, zero);
  CHECK(std::memcmp(out.values().data(), x.values().data(), 8 * 4) == 0);
  Tensor neg = scale(x, -1.0f);
  Tensor cancelled = add(x, neg);
  for (float v : cancelled.values()) CHECK(v == 0.0f);
  CHECK_THROWS_AS(add(x, Tensor::zeros({1, 2, 5})), std::invalid_argument);
}

TEST_CASE("add/mul/sum gradients match the finite-difference oracle") {
  Rng rng(29);
  for (int inst = 0; inst < 20; ++inst) {
    std::vector<Tensor> in{rand_tensor({2, 3, 4}, rng, -1.0f, 1.0f, true),
                           rand_tensor({2, 3, 4}, rng, -1.0f, 1.0f, true),
                           rand_tensor({2, 3, 4}, rng, -1.0f, 1.0f)};
    auto f = [](const std::vector<Tensor>& v) {
      return sum(mul(add(v[0], v[1]), v[2]));
    };
    auto g = [](const std::vector<refop::dvec>& v) {
      return refop::weighted_sum(refop::add(v[0], v[1]), v[2]);
    };
    CHECK(max_fd_error(in, f, g) < 1e-3);
  }
}

TEST_CASE("concat gradients match the finite-difference oracle") {
  Rng rng(31);
  for (int inst = 0; inst < 20; ++inst) {
    std::vector<Tensor> in{rand_tensor({2, 2, 3}, rng, -1.0f, 1.0f, true),
                           rand_tensor({2, 3, 3}, rng, -1.0f, 1.0f, true),
                           rand_tensor({2, 5, 3}, rng, -1.0f, 1.0f)};
    auto f = [](const std::vector<Tensor>& v) {
      return sum(mul(concat_channels(v[0], v[1]), v[2]));
    };
    auto g = [](const std::vector<refop::dvec>& v) {
      return refop::weighted_sum(refop::concat_channels(v[0], 2, 2, v[1], 3, 3),
                                 v[2]);
    };
    CHECK(max_fd_error(in, f, g) < 1e-3);
  }
}

TEST_CASE("cross entropy at zero logits is ln 2") {
  Tensor logits = Tensor::zeros({2, 2, 5});
  Labels y{{2, 5}, std::vector<int32_t>(10, 1)};
  CHECK(cross_entropy_per_position(logits, y).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-6));
}

TEST_CASE("cross entropy under a 20-logit margin is tiny and non-negative") {
  Tensor logits = Tensor::zeros({1, 2, 4});
  Labels y{{1, 4}, {1, 0, 1, 0}};
  auto v = logits.mutable_values();
  for (int64_t s = 0; s < 4; ++s) {
    v[(y.values[s] == 0 ? 0 : 4) + s] = 20.0f;  // favor the target by 20
  }
  const float loss = cross_entropy_per_position(logits, y).item();
  CHECK(loss >= 0.0f);
  CHECK(loss < 1e-8f);
}

TEST_CASE("cross entropy matches the independent scalar formula") {
  Rng rng(37);
  for (int inst = 0; inst < 20; ++inst) {
    Tensor logits = rand_tensor({1, 2, 4}, rng, -3.0f, 3.0f, true);
    Labels y{{1, 4}, {}};
    for (int i = 0; i < 4; ++i) y.values.push_back(rng.bit());
    const double expect =
        refop::cross_entropy(to_dvec(logits), y.values, 1, 4);
    CHECK(cross_entropy_per_position(logits, y).item() ==
          doctest::Approx(expect).epsilon(1e-5));

    std::vector<Tensor> in{logits};
    auto f = [&](const std::vector<Tensor>& v) {
      return cross_entropy_per_position(v[0], y);
    };
    auto g = [&](const std::vector<refop::dvec>& v) {
      return refop::cross_entropy(v[0], y.values, 1, 4);
    };
    CHECK(max_fd_error(in, f, g) < 1e-3);
  }
}

TEST_CASE("cross entropy rejects non-binary targets") {
  Tensor logits = Tensor::zeros({1, 2, 3});
  Labels y{{1, 3}, {0, 2, 1}};
  CHECK_THROWS_WITH_AS(cross_entropy_per_position(logits, y),
                       doctest::Contains("not in {0,1}"), std::invalid_argument);
}

TEST_CASE("backward computes d(x*x)/dx = 2x and accumulates on repeat") {
  Tensor x = Tensor::from_values({}, {3.0f}, true);
  Tensor loss = mul(x, x);
  backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(6.0f));
  backward(loss);  // repeated call without reset accumulates
  CHECK(x.grad()[0] == doctest::Approx(12.0f));
  x.zero_grad();
  CHECK(x.grad()[0] == 0.0f);
}

TEST_CASE("backward rejects non-scalar and graph-free losses") {
  Tensor x = Tensor::zeros({1, 1, 3}, true);
  CHECK_THROWS_AS(backward(relu(x)), std::invalid_argument);
  CHECK_THROWS_AS(backward(Tensor::scalar(1.0f)), std::invalid_argument);
}

TEST_CASE("unreached parameters keep a zero gradient") {
  Tensor used = Tensor::from_values({}, {2.0f}, true);
  Tensor unused = Tensor::from_values({}, {5.0f}, true);
  unused.zero_grad();
  backward(mul(used, used));
  CHECK(used.grad()[0] == doctest::Approx(4.0f));
  CHECK(unused.grad()[0] == 0.0f);
}

TEST_CASE("detach preserves values, is idempotent, and blocks gradients") {
  Rng rng(41);
  Tensor w = rand_tensor({1, 1, 3}, rng, -1.0f, 1.0f, true);
  Tensor x = rand_tensor({1, 1, 5}, rng, -1.0f, 1.0f);
  Tensor mid = conv(x, w, Tensor::zeros({1}), 1);
  Tensor cut = mid.detach();
  CHECK(std::memcmp(cut.values().data(), mid.values().data(), 5 * 4) == 0);
  CHECK(cut.node() == nullptr);
  CHECK_FALSE(cut.requires_grad());
  Tensor cut2 = cut.detach();
  CHECK(std::memcmp(cut2.values().data(), cut.values().data(), 5 * 4) == 0);
  CHECK(cut2.node() == nullptr);

  // A graph whose only path to parameters crosses a detach yields no gradient.
  w.zero_grad();
  Tensor probe = rand_tensor({1, 1, 5}, rng, -1.0f, 1.0f);
  CHECK_THROWS_AS(backward(sum(mul(cut, probe))), std::invalid_argument);
  Tensor w2 = rand_tensor({1, 1, 3}, rng, -1.0f, 1.0f, true);
  backward(sum(conv(cut, w2, Tensor::zeros({1}, true), 1)));
  for (float g : w.grad()) CHECK(g == 0.0f);
}

TEST_CASE("no-grad regions record no graph") {
  Tensor w = Tensor::full({1, 1, 3}, 0.5f, true);
  Tensor x = Tensor::full({1, 1, 4}, 1.0f);
  NoGradGuard ng;
  Tensor out = conv(x, w, Tensor::zeros({1}, true), 1);
  CHECK(out.node() == nullptr);
  CHECK_FALSE(out.requires_grad());
}

TEST_CASE("forward evaluation is deterministic within a build") {
  Rng rng(43);
  Tensor x = rand_tensor({2, 3, 4, 4}, rng, -1.0f, 1.0f);
  Tensor w = rand_tensor({5, 3, 3, 3}, rng, -1.0f, 1.0f);
  Tensor b = rand_tensor({5}, rng, -1.0f, 1.0f);
  Tensor out1 = conv(x, w, b, 2);
  Tensor out2 = conv(x, w, b, 2);
  CHECK(std::memcmp(out1.values().data(), out2.values().data(),
                    out1.numel() * 4) == 0);
}
