#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <limits>

#include "brltm/tensor.hpp"

using namespace brltm;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, Rng& rng, bool grad = true, double scale = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = scale * rng.normal();
  return T(std::move(shape), std::move(v), grad);
}

// Reduces an op output to a scalar with fixed random weights so that every
// output element contributes a distinct gradient.
T weighted_sum(const T& y, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> w(y.numel());
  for (auto& x : w) x = rng.normal();
  return sum(mul(y, T(y.shape(), w)));
}

// Central differences on `probes` random elements of each input.
double max_fd_error(std::vector<T> inputs, const std::function<T(const std::vector<T>&)>& f,
                    std::size_t probes = 24, double h = 1e-5) {
  auto loss = [&] { return weighted_sum(f(inputs), 123).item(); };
  for (auto& x : inputs) x.zero_grad();
  weighted_sum(f(inputs), 123).backward();
  Rng pick(5);
  double worst = 0.0;
  for (auto& x : inputs) {
    if (!x.requires_grad()) continue;
    const std::vector<double> analytic(x.grad().begin(), x.grad().end());
    for (std::size_t k = 0; k < probes; ++k) {
      const auto i = pick.uniform_int(x.numel());
      auto v = x.mutable_values();
      const double orig = v[i];
      v[i] = orig + h;
      const double up = loss();
      v[i] = orig - h;
      const double down = loss();
      v[i] = orig;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-5}));
    }
  }
  return worst;
}

constexpr double kFdTol = 1e-4;

}  // namespace

TEST(Tensor, ConstructionChecksShape) {
  EXPECT_THROW(T({2, 2}, {1, 2, 3}), ShapeError);
  EXPECT_EQ(T::zeros({2, 3}).numel(), 6u);
  EXPECT_THROW(T::zeros({2}).item(), ShapeError);
}

TEST(Matmul, Examples) {
  const T m({2, 2}, {1.5, -2, 0.25, 7});
  const T id({2, 2}, {1, 0, 0, 1});
  const auto p = matmul(id, m);
  EXPECT_EQ(std::vector<double>(p.values().begin(), p.values().end()),
            std::vector<double>(m.values().begin(), m.values().end()));
  const auto q = matmul(T({2, 2}, {1, 2, 3, 4}), T({2, 1}, {1, 1}));
  EXPECT_EQ(q.shape(), (Shape{2, 1}));
  EXPECT_EQ(q[0], 3);
  EXPECT_EQ(q[1], 7);
}

TEST(Matmul, ShapeErrorNamesBothShapes) {
  try {
    matmul(T::zeros({2, 3}), T::zeros({2, 3}));
    FAIL();
  } catch (const ShapeError& e) {
    EXPECT_NE(std::string(e.what()).find("[2,3] x [2,3]"), std::string::npos) << e.what();
  }
  EXPECT_THROW(matmul(T::zeros({2, 2, 3}), T::zeros({3, 3, 1})), ShapeError);
}

TEST(Matmul, GradientsMatchFiniteDifferences) {
  Rng rng(1);
  EXPECT_LT(max_fd_error({random_tensor({3, 4}, rng), random_tensor({4, 2}, rng)},
                         [](const auto& x) { return matmul(x[0], x[1]); }),
            kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 3, 4}, rng), random_tensor({2, 4, 5}, rng)},
                         [](const auto& x) { return matmul(x[0], x[1]); }),
            kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 3, 4}, rng), random_tensor({4, 5}, rng)},
                         [](const auto& x) { return matmul(x[0], x[1]); }),
            kFdTol);
}

TEST(ElementwiseOps, GradientsMatchFiniteDifferences) {
  Rng rng(2);
  auto a = [&] { return random_tensor({3, 5}, rng); };
  EXPECT_LT(max_fd_error({a(), a()}, [](const auto& x) { return add(x[0], x[1]); }), kFdTol);
  EXPECT_LT(max_fd_error({a(), random_tensor({5}, rng)}, [](const auto& x) { return add(x[0], x[1]); }), kFdTol);
  EXPECT_LT(max_fd_error({a(), a()}, [](const auto& x) { return mul(x[0], x[1]); }), kFdTol);
  EXPECT_LT(max_fd_error({a()}, [](const auto& x) { return scale(x[0], -0.7); }), kFdTol);
  EXPECT_LT(max_fd_error({a()}, [](const auto& x) { return gelu(x[0]); }), kFdTol);
  EXPECT_LT(max_fd_error({a()}, [](const auto& x) { return sigmoid(x[0]); }), kFdTol);
}

TEST(StructuralOps, GradientsMatchFiniteDifferences) {
  Rng rng(3);
  EXPECT_LT(max_fd_error({random_tensor({2, 3, 4}, rng)}, [](const auto& x) { return transpose(x[0]); }), kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 6}, rng)}, [](const auto& x) { return reshape(x[0], {3, 4}); }), kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 3}, rng), random_tensor({2, 2}, rng)},
                         [](const auto& x) { return concat<double>({x[0], x[1]}, 1); }),
            kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({4, 5}, rng)}, [](const auto& x) { return slice(x[0], 1, 1, 4); }), kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({3, 8}, rng)}, [](const auto& x) { return split_heads(x[0], 2); }), kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 3, 4}, rng)}, [](const auto& x) { return merge_heads(x[0]); }), kFdTol);
  const std::vector<std::int32_t> ids = {2, 0, 2, 1};
  EXPECT_LT(max_fd_error({random_tensor({3, 4}, rng)},
                         [&](const auto& x) { return gather_rows(x[0], std::span<const std::int32_t>(ids)); }),
            kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({3, 4}, rng)}, [](const auto& x) { return mean(x[0]); }), kFdTol);
}

TEST(StructuralOps, Values) {
  const T a({2, 3}, {1, 2, 3, 4, 5, 6});
  const auto t = transpose(a);
  EXPECT_EQ(t.shape(), (Shape{3, 2}));
  EXPECT_EQ(std::vector<double>(t.values().begin(), t.values().end()), (std::vector<double>{1, 4, 2, 5, 3, 6}));
  const auto s = slice(a, 1, 1, 3);
  EXPECT_EQ(std::vector<double>(s.values().begin(), s.values().end()), (std::vector<double>{2, 3, 5, 6}));
  const auto c = concat<double>({a, a}, 0);
  EXPECT_EQ(c.shape(), (Shape{4, 3}));
  const auto h = split_heads(T({2, 4}, {1, 2, 3, 4, 5, 6, 7, 8}), 2);
  EXPECT_EQ(h.shape(), (Shape{2, 2, 2}));
  EXPECT_EQ(std::vector<double>(h.values().begin(), h.values().end()), (std::vector<double>{1, 2, 5, 6, 3, 4, 7, 8}));
  const auto m = merge_heads(h);
  EXPECT_EQ(std::vector<double>(m.values().begin(), m.values().end()), (std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8}));
  const std::vector<std::int32_t> bad = {3};
  EXPECT_THROW(gather_rows(a, std::span<const std::int32_t>(bad)), RangeError);
}

TEST(Softmax, Properties) {
  const auto u = softmax(T({1, 4}, {3, 3, 3, 3}));
  for (double x : u.values()) EXPECT_DOUBLE_EQ(x, 0.25);
  Rng rng(4);
  const auto x = random_tensor({5, 7}, rng, false, 3.0);
  const auto shifted = add(x, T::full({7}, 11.5));
  const auto a = softmax(x), b = softmax(shifted);
  for (std::size_t i = 0; i < a.numel(); ++i) {
    EXPECT_NEAR(a[i], b[i], 1e-12);
    EXPECT_GE(a[i], 0.0);
  }
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0;
    for (std::size_t c = 0; c < 7; ++c) s += a[r * 7 + c];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  const double inf = std::numeric_limits<double>::infinity();
  const auto m = softmax(T({1, 2}, {0, -inf}));
  EXPECT_EQ(m[0], 1.0);
  EXPECT_EQ(m[1], 0.0);
  EXPECT_THROW(softmax(T({1, 2}, {-inf, -inf})), ContractError);
  EXPECT_NEAR(softmax(T({1, 2}, {1000, 0}))[0], 1.0, 1e-15);
}

TEST(Softmax, AxisAndGradients) {
  Rng rng(5);
  const auto x = random_tensor({3, 4}, rng, false);
  const auto c = softmax(x, 0);
  for (std::size_t col = 0; col < 4; ++col) {
    double s = 0;
    for (std::size_t r = 0; r < 3; ++r) s += c[r * 4 + col];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_LT(max_fd_error({random_tensor({3, 5}, rng)}, [](const auto& v) { return softmax(v[0]); }), kFdTol);
  EXPECT_LT(max_fd_error({random_tensor({2, 3, 5}, rng)}, [](const auto& v) { return softmax(v[0], 1); }), kFdTol);
  const double inf = std::numeric_limits<double>::infinity();
  EXPECT_LT(max_fd_error({T({2, 3}, {0.1, -inf, 0.3, 0.4, 0.5, -inf}, true)},
                         [](const auto& v) { return softmax(v[0]); }, 4),
            kFdTol);
}

TEST(Gelu, Identities) {
  EXPECT_EQ(gelu(T::scalar(0.0))[0], 0.0);
  EXPECT_NEAR(gelu(T::scalar(10.0))[0], 10.0, 1e-6);
  Rng rng(6);
  for (int i = 0; i < 200; ++i) {
    const double x = 5.0 * rng.normal();
    EXPECT_NEAR(gelu(T::scalar(x))[0] - gelu(T::scalar(-x))[0], x, 1e-12);
  }
  // x * Phi(x) at x = 1: Phi(1) = 0.841344746068543.
  EXPECT_NEAR(gelu(T::scalar(1.0))[0], 0.841344746068543, 1e-14);
}

TEST(LayerNorm, StandardizesAndDifferentiates) {
  const auto ones = T::full({4}, 1.0), zeros = T::zeros({4});
  const auto flat = layer_norm(T::full({2, 4}, 3.5), ones, zeros);
  for (double x : flat.values()) EXPECT_EQ(x, 0.0);
  Rng rng(7);
  const auto x = random_tensor({6, 8}, rng, false, 4.0);
  const auto y = layer_norm(x, T::full({8}, 1.0), T::zeros({8}));
  for (std::size_t r = 0; r < 6; ++r) {
    double m = 0, v = 0;
    for (std::size_t c = 0; c < 8; ++c) m += y[r * 8 + c] / 8;
    for (std::size_t c = 0; c < 8; ++c) v += (y[r * 8 + c] - m) * (y[r * 8 + c] - m) / 8;
    EXPECT_NEAR(m, 0.0, 1e-6);
    EXPECT_NEAR(v, 1.0, 1e-6);
  }
  EXPECT_LT(max_fd_error({random_tensor({3, 6}, rng), random_tensor({6}, rng), random_tensor({6}, rng)},
                         [](const auto& v) { return layer_norm(v[0], v[1], v[2]); }),
            kFdTol);
  EXPECT_THROW(layer_norm(x, T::full({7}, 1.0), T::zeros({8})), ShapeError);
}

TEST(CrossEntropy, Examples) {
  const std::vector<std::int32_t> t = {2, -100, 0};
  const auto uniform = cross_entropy(T::zeros({3, 6}), std::span<const std::int32_t>(t), -100);
  EXPECT_NEAR(uniform.item(), std::log(6.0), 1e-15);
  const std::vector<std::int32_t> t1 = {1};
  const double l20 = cross_entropy(T({1, 3}, {0, 20, 0}), std::span<const std::int32_t>(t1), -100).item();
  const double l10 = cross_entropy(T({1, 3}, {0, 10, 0}), std::span<const std::int32_t>(t1), -100).item();
  EXPECT_LT(l20, 1e-8);
  EXPECT_LT(l20, l10);
  const std::vector<std::int32_t> none = {-100, -100};
  EXPECT_THROW(cross_entropy(T::zeros({2, 3}), std::span<const std::int32_t>(none), -100), ContractError);
  const std::vector<std::int32_t> out_of_range = {3};
  EXPECT_THROW(cross_entropy(T::zeros({1, 3}), std::span<const std::int32_t>(out_of_range), -100), RangeError);
}

TEST(CrossEntropy, MatchesNaiveSummation) {
  Rng rng(8);
  const std::size_t R = 7, V = 11;
  const auto logits = random_tensor({R, V}, rng, true, 3.0);
  std::vector<std::int32_t> t(R);
  for (auto& x : t) x = static_cast<std::int32_t>(rng.uniform_int(V));
  t[3] = -100;
  double naive = 0.0;
  int n = 0;
  for (std::size_t r = 0; r < R; ++r) {
    if (t[r] == -100) continue;
    double z = 0.0;
    for (std::size_t c = 0; c < V; ++c) z += std::exp(logits[r * V + c]);
    naive += -(logits[r * V + static_cast<std::size_t>(t[r])] - std::log(z));
    ++n;
  }
  naive /= n;
  EXPECT_NEAR(cross_entropy(logits, std::span<const std::int32_t>(t), -100).item(), naive, 1e-10);
  EXPECT_LT(max_fd_error({logits},
                         [&](const auto& v) { return cross_entropy(v[0], std::span<const std::int32_t>(t), -100); }),
            kFdTol);
}

TEST(BceWithLogits, ValuesAndGradients) {
  const std::vector<int> y = {1, 0, 1};
  const T z({3}, {0.0, 50.0, -50.0}, true);
  const double expected = (std::log(2.0) + 50.0 + 50.0) / 3.0;
  EXPECT_NEAR(bce_with_logits(z, std::span<const int>(y)).item(), expected, 1e-12);
  Rng rng(9);
  EXPECT_LT(max_fd_error({random_tensor({3}, rng)},
                         [&](const auto& v) { return bce_with_logits(v[0], std::span<const int>(y)); }),
            kFdTol);
}

TEST(Backward, Contracts) {
  const T w({3}, {1.5, -2.0, 4.0}, true);
  const T x({3}, {0.5, 3.0, -1.0});
  auto loss = sum(mul(w, x));
  loss.backward();
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(w.grad()[i], x[i]);
  EXPECT_THROW(loss.backward(), ContractError);
  EXPECT_THROW(mul(w, x).backward(), ContractError);

  const T v({2}, {1.0, 2.0}, true);
  auto c = add(scale(sum(v), 0.0), T::scalar(3.0));
  c.backward();
  for (double g : v.grad()) EXPECT_EQ(g, 0.0);
}

TEST(Backward, AccumulatesAcrossGraphs) {
  const T w({2}, {1.0, 2.0}, true);
  sum(w).backward();
  sum(scale(w, 2.0)).backward();
  EXPECT_EQ(w.grad()[0], 3.0);
  EXPECT_EQ(w.grad()[1], 3.0);
}

TEST(Dropout, RateScaleAndEvalIdentity) {
  const auto x = T::full({1000000}, 1.0);
  Rng rng(10);
  const double rate = 0.1;
  const auto y = dropout(x, rate, rng, true);
  std::size_t zeros = 0;
  for (double v : y.values()) {
    if (v == 0.0) ++zeros;
    else EXPECT_DOUBLE_EQ(v, 1.0 / (1.0 - rate));
  }
  EXPECT_NEAR(static_cast<double>(zeros) / 1e6, rate, 0.01);
  const auto e = dropout(x, rate, rng, false);
  EXPECT_EQ(e.node(), x.node());
  Rng a(3), b(3);
  const auto d1 = dropout(x, 0.3, a, true), d2 = dropout(x, 0.3, b, true);
  EXPECT_TRUE(std::equal(d1.values().begin(), d1.values().end(), d2.values().begin()));
}
