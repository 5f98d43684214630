#include "doctest.h"

#include <cmath>
#include <random>

#include "bubbleformer/gradcheck.hpp"
#include "bubbleformer/ops.hpp"
#include "bubbleformer/parallel.hpp"

#include <xmmintrin.h>

#include <stdexcept>
#include <string>
#include <vector>

using namespace bubbleformer;

namespace {

Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = u(rng);
  return t;
}

// Weighted sum with fixed pseudo-random weights so every output coordinate matters.
Var<double> probe(Var<double> y, std::uint64_t seed = 99) {
  auto w = random_tensor(y.shape(), seed);
  return sum(mul(y, y.tape().constant(w)));
}

// Independent normal CDF via series expansion of erf, no std::erf.
double phi_series(double x) {
  const double z = x / std::sqrt(2.0);
  double term = z, total = z;
  for (int n = 1; n < 200; ++n) {
    term *= -z * z / n;
    total += term / (2 * n + 1);
  }
  return 0.5 * (1.0 + 2.0 / std::sqrt(M_PI) * total);
}

}  // namespace

TEST_CASE("matmul small cases") {
  Tape<double> tape;
  auto eye = tape.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  auto m = tape.constant(Tensor<double>({2, 2}, {1, 2, 3, 4}));
  CHECK(matmul(eye, m).value() == m.value());
  auto z = tape.constant(Tensor<double>({2, 1}, {0, 0}));
  CHECK(matmul(eye, z).value() == Tensor<double>({2, 1}, {0, 0}));
  CHECK_THROWS_AS(matmul(m, tape.constant(Tensor<double>({3, 1}))), ShapeError);
}

TEST_CASE("matmul gradients") {
  auto b = random_tensor({4, 2}, 2);
  auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> a) { return probe(matmul(a, t.constant(b))); },
      random_tensor({3, 4}, 1));
  CHECK(r.max_relative_error < 1e-4);
  auto a = random_tensor({3, 4}, 3);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> x) { return probe(matmul(t.constant(a), x)); },
      random_tensor({4, 2}, 4));
  CHECK(r.max_relative_error < 1e-4);
  // batched, shared left and paired
  auto bb = random_tensor({2, 3, 4, 2}, 5);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> x) { return probe(matmul(x, t.constant(bb))); },
      random_tensor({2, 3, 3, 4}, 6));
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> x) { return probe(matmul(t.constant(a), x)); }, bb);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("softmax") {
  Tape<double> tape;
  auto y = softmax_lastdim(tape.constant(Tensor<double>({2}, {0, 0})));
  CHECK(y.value()[0] == doctest::Approx(0.5));
  auto s = softmax_lastdim(tape.constant(Tensor<double>({2}, {1000, 0})));
  CHECK(std::abs(s.value()[0] - 1.0) < 1e-12);
  CHECK(std::abs(s.value()[1]) < 1e-12);
  auto rows = softmax_lastdim(tape.constant(random_tensor({6, 7}, 8, -5, 5)));
  for (std::size_t r = 0; r < 6; ++r) {
    double total = 0;
    for (std::size_t j = 0; j < 7; ++j) total += rows.value()[r * 7 + j];
    CHECK(std::abs(total - 1.0) < 1e-6);
  }
  auto res = finite_difference_check([](Tape<double>&, Var<double> x) { return probe(softmax_lastdim(x)); },
                                     random_tensor({5}, 9));
  CHECK(res.max_relative_error < 1e-4);
}

TEST_CASE("gelu") {
  Tape<double> tape;
  auto y = gelu(tape.constant(Tensor<double>({3}, {0.0, 3.0, -10.0})));
  CHECK(y.value()[0] == 0.0);
  CHECK(std::abs(y.value()[1] - 3.0 * phi_series(3.0)) < 1e-9);
  CHECK(y.value()[1] == doctest::Approx(2.99595).epsilon(1e-5));
  CHECK(std::abs(y.value()[2]) < 1e-10);
  auto r = finite_difference_check([](Tape<double>&, Var<double> x) { return probe(gelu(x)); },
                                   random_tensor({10}, 10, -3, 3));
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("layer_normalize") {
  Tape<double> tape;
  auto g = tape.constant(Tensor<double>::ones({3}));
  auto b = tape.constant(Tensor<double>::zeros({3}));
  auto y = layer_normalize(tape.constant(Tensor<double>({3}, {5, 5, 5})), g, b);
  for (double v : y.value().data()) CHECK(v == 0.0);
  auto y2 = layer_normalize(tape.constant(Tensor<double>({2}, {1, -1})),
                            tape.constant(Tensor<double>::ones({2})), tape.constant(Tensor<double>::zeros({2})));
  CHECK(y2.value()[0] == doctest::Approx(1.0).epsilon(1e-4));
  CHECK(y2.value()[1] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK_THROWS_AS(layer_normalize(tape.constant(Tensor<double>({2, 4})), g, b), ShapeError);

  auto gain = random_tensor({8}, 11, 0.5, 1.5), bias = random_tensor({8}, 12);
  auto x = random_tensor({2, 8}, 13);
  auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) {
        return probe(layer_normalize(v, t.constant(gain), t.constant(bias)));
      },
      x);
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(layer_normalize(t.constant(x), v, t.constant(bias))); },
      gain);
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(layer_normalize(t.constant(x), t.constant(gain), v)); },
      bias);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("strided_patch_conv") {
  Tape<double> tape;
  auto ones = strided_patch_conv(tape.constant(Tensor<double>::ones({1, 2, 2})),
                                 tape.constant(Tensor<double>::ones({1, 1, 2, 2})));
  CHECK(ones.shape() == Shape{1, 1, 1});
  CHECK(ones.value()[0] == 4.0);

  auto x = random_tensor({2, 4, 4}, 14);
  Tensor<double> delta({1, 2, 2, 2});
  delta.at({0, 1, 0, 0}) = 1.0;
  auto sub = strided_patch_conv(tape.constant(x), tape.constant(delta));
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) CHECK(sub.value().at({0, i, j}) == x.at({1, 2 * i, 2 * j}));

  CHECK_THROWS_AS(strided_patch_conv(tape.constant(Tensor<double>({1, 3, 4})), tape.constant(Tensor<double>({1, 1, 2, 2}))),
                  ShapeError);

  auto k = random_tensor({3, 2, 2, 2}, 15);
  auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(strided_patch_conv(v, t.constant(k))); }, x);
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(strided_patch_conv(t.constant(x), v)); }, k);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("transposed_patch_conv is the adjoint") {
  Tape<double> tape;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = random_tensor({1, 4, 4}, 100 + seed);
    auto y = random_tensor({1, 2, 2}, 200 + seed);
    auto k = random_tensor({1, 1, 2, 2}, 300 + seed);
    auto cx = strided_patch_conv(tape.constant(x), tape.constant(k));
    auto ty = transposed_patch_conv(tape.constant(y), tape.constant(k));
    CHECK(std::abs(dot(cx.value(), y) - dot(x, ty.value())) < 1e-10);
  }
  // multi-channel, batched
  auto x = random_tensor({2, 3, 6, 4}, 400);
  auto y = random_tensor({2, 5, 3, 2}, 401);
  auto k = random_tensor({5, 3, 2, 2}, 402);
  auto cx = strided_patch_conv(tape.constant(x), tape.constant(k));
  auto ty = transposed_patch_conv(tape.constant(y), tape.constant(k));
  CHECK(std::abs(dot(cx.value(), y) - dot(x, ty.value())) < 1e-10);

  // delta kernel -> scaled nearest-neighbour upsample on the (0,0) corner of each block
  Tensor<double> delta({1, 1, 2, 2});
  delta.at({0, 0, 0, 0}) = 2.0;
  delta.at({0, 0, 0, 1}) = 2.0;
  delta.at({0, 0, 1, 0}) = 2.0;
  delta.at({0, 0, 1, 1}) = 2.0;
  auto small = random_tensor({1, 2, 3}, 403);
  auto up = transposed_patch_conv(tape.constant(small), tape.constant(delta));
  CHECK(up.shape() == Shape{1, 4, 6});
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 6; ++j) CHECK(up.value().at({0, i, j}) == 2.0 * small.at({0, i / 2, j / 2}));

  auto kk = random_tensor({2, 3, 2, 2}, 404);
  auto xin = random_tensor({2, 3, 2}, 405);
  auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(transposed_patch_conv(v, t.constant(kk))); }, xin);
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(transposed_patch_conv(t.constant(xin), v)); }, kk);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("reverse mode basics") {
  Tape<double> tape;
  auto x = tape.leaf(Tensor<double>({3}, {1, -2, 4}), true);
  tape.backward(sum(x));
  for (double g : tape.grad(x.id()).data()) CHECK(g == 1.0);

  Tape<double> t2;
  auto y = t2.leaf(Tensor<double>({3}, {1, -2, 4}), true);
  t2.backward(sum(mul(y, y)));  // fan-out: y used twice
  CHECK(t2.grad(y.id()) == Tensor<double>({3}, {2, -4, 8}));

  CHECK_THROWS_AS(t2.backward(y), ShapeError);
}

TEST_CASE("non-finite values are surfaced") {
  Tape<double> tape;
  CHECK_THROWS_AS(tape.constant(Tensor<double>({1}, {std::nan("")})), NumericalError);
  auto big = tape.constant(Tensor<double>({1}, {1e300}));
  CHECK_THROWS_AS(mul(big, big), NumericalError);
}

TEST_CASE("finite_difference_check") {
  auto sq = [](const Tensor<double>& x) { return x[0] * x[0]; };
  Tensor<double> x({1}, {3.0});
  auto r = finite_difference_check(sq, x, Tensor<double>({1}, {6.0}));
  CHECK(r.max_relative_error < 1e-6);
  auto constant = finite_difference_check([](Tape<double>& t, Var<double>) { return t.constant(Tensor<double>::scalar(2.0)); },
                                          random_tensor({4}, 20));
  CHECK(constant.max_relative_error < 1e-12);
  auto w = random_tensor({4, 3}, 21);
  auto chain = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(softmax_lastdim(matmul(v, t.constant(w)))); },
      random_tensor({2, 4}, 22));
  CHECK(chain.max_relative_error < 1e-4);
}

TEST_CASE("remaining differentiable ops") {
  auto x = random_tensor({3, 4}, 30);
  auto checks = std::vector<std::pair<const char*, ScalarGraph>>{
      {"add", [&](Tape<double>& t, Var<double> v) { return probe(add(v, t.constant(x))); }},
      {"sub", [&](Tape<double>& t, Var<double> v) { return probe(sub(t.constant(x), v)); }},
      {"scale", [&](Tape<double>&, Var<double> v) { return probe(scale(v, 1.7)); }},
      {"transpose", [&](Tape<double>&, Var<double> v) { return probe(transpose_last2(v)); }},
      {"permute", [&](Tape<double>&, Var<double> v) { return probe(permute(reshape(v, {3, 2, 2}), {2, 0, 1})); }},
      {"slice", [&](Tape<double>&, Var<double> v) { return probe(slice_lastdim(v, 1, 2)); }},
      {"mean", [&](Tape<double>&, Var<double> v) { return mean(mul(v, v)); }},
      {"add_bias", [&](Tape<double>& t, Var<double> v) {
         return probe(add_bias(t.constant(x), slice_lastdim(reshape(v, {12}), 0, 4)));
       }},
      {"channel_bias", [&](Tape<double>&, Var<double> v) {
         return probe(add_channel_bias(reshape(v, {1, 3, 2, 2}), slice_lastdim(reshape(v, {12}), 0, 3)));
       }},
      {"mul_scalar", [&](Tape<double>& t, Var<double> v) {
         return probe(mul_scalar(t.constant(x), slice_lastdim(reshape(v, {12}), 5, 1)));
       }},
  };
  for (auto& [name, f] : checks) {
    CAPTURE(name);
    CHECK(finite_difference_check(f, x).max_relative_error < 1e-4);
  }
}

TEST_CASE("conditioning and frequency scaling ops") {
  auto x = random_tensor({5, 4}, 40);
  auto gamma = random_tensor({4}, 41), beta = random_tensor({4}, 42);
  auto r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(channel_affine(v, t.constant(gamma), t.constant(beta))); }, x);
  CHECK(r.max_relative_error < 1e-4);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(channel_affine(t.constant(x), v, t.constant(beta))); }, gamma);
  CHECK(r.max_relative_error < 1e-4);

  // relative bias: gradients w.r.t. scores and table
  const std::vector<int> buckets = {0, 1, 2, 3, 0, 1, 2, 3, 0};
  auto scores = random_tensor({2, 2, 3, 3}, 43);
  auto table = random_tensor({4, 2}, 44);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) { return probe(softmax_lastdim(add_relative_bias(t.constant(scores), v, buckets))); },
      table);
  CHECK(r.max_relative_error < 1e-4);

  // attention_frequency_scale on valid softmax rows
  Tape<double> tape;
  auto w = softmax_lastdim(tape.constant(random_tensor({3, 5}, 45)));
  auto one = tape.constant(Tensor<double>::scalar(1.0));
  auto zero = tape.constant(Tensor<double>::scalar(0.0));
  auto same = attention_frequency_scale(w, one, one);
  CHECK(same.value() == w.value());
  auto lowpass = attention_frequency_scale(w, one, zero);
  for (double v : lowpass.value().data()) CHECK(v == doctest::Approx(0.2));
  auto guarded = attention_frequency_scale(tape.constant(Tensor<double>({2}, {0.5, 0.5})), zero, one);
  CHECK(guarded.value()[0] == 0.5);
  CHECK(guarded.value()[1] == 0.5);
  auto mixed = attention_frequency_scale(w, tape.constant(Tensor<double>::scalar(1.3)), tape.constant(Tensor<double>::scalar(0.6)));
  for (std::size_t row = 0; row < 3; ++row) {
    double s = 0;
    for (std::size_t j = 0; j < 5; ++j) s += mixed.value()[row * 5 + j];
    CHECK(std::abs(s - 1.0) < 1e-5);
  }

  auto logits = random_tensor({3, 5}, 46);
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) {
        return probe(attention_frequency_scale(softmax_lastdim(v), t.constant(Tensor<double>::scalar(1.2)),
                                               t.constant(Tensor<double>::scalar(0.7))));
      },
      logits);
  CHECK(r.max_relative_error < 1e-4);
  auto omegas = Tensor<double>({2}, {1.2, 0.7});
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) {
        auto ww = softmax_lastdim(t.constant(logits));
        return probe(attention_frequency_scale(ww, slice_lastdim(v, 0, 1), slice_lastdim(v, 1, 1)));
      },
      omegas);
  CHECK(r.max_relative_error < 1e-4);

  // feature_frequency_scale
  auto tokens = random_tensor({2, 3, 4}, 47);
  auto id = feature_frequency_scale(tape.constant(tokens), one, one);
  CHECK(id.value() == tokens);
  auto flat = feature_frequency_scale(tape.constant(Tensor<double>({3, 2}, 2.5)), tape.constant(Tensor<double>::scalar(0.4)),
                                      tape.constant(Tensor<double>::scalar(7.0)));
  for (double v : flat.value().data()) CHECK(v == doctest::Approx(1.0));
  auto no_dc = feature_frequency_scale(tape.constant(tokens), zero, one);
  for (std::size_t c = 0; c < 4; ++c) {
    double m = 0;
    for (std::size_t p = 0; p < 6; ++p) m += no_dc.value()[p * 4 + c];
    CHECK(std::abs(m) < 1e-12);
  }
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) {
        return probe(feature_frequency_scale(v, t.constant(Tensor<double>::scalar(0.3)), t.constant(Tensor<double>::scalar(1.9))));
      },
      tokens);
  CHECK(r.max_relative_error < 1e-4);
  auto thetas = Tensor<double>({2}, {0.3, 1.9});
  r = finite_difference_check(
      [&](Tape<double>& t, Var<double> v) {
        return probe(feature_frequency_scale(t.constant(tokens), slice_lastdim(v, 0, 1), slice_lastdim(v, 1, 1)));
      },
      thetas);
  CHECK(r.max_relative_error < 1e-4);
}

TEST_CASE("mac counter") {
  MacCounts counts;
  {
    MacScope scope(counts);
    Tape<float> tape;
    matmul(tape.constant(Tensor<float>({2, 3, 4})), tape.constant(Tensor<float>({4, 5})));
  }
  CHECK(counts.matmul == 2u * 3u * 4u * 5u);
  CHECK(active_mac_counts() == nullptr);
}

TEST_CASE("parallel_for") {
  std::vector<int> hits(37, 0);
  parallel_for(hits.size(), [&](std::size_t i) { hits[i] += int(i); }, 4);
  for (std::size_t i = 0; i < hits.size(); ++i) CHECK(hits[i] == int(i));

  // The exception of the smallest failing index wins.
  CHECK_THROWS_WITH(parallel_for(
                        20,
                        [](std::size_t i) {
                          if (i % 7 == 3) throw std::runtime_error(std::to_string(i));
                        },
                        3),
                    "3");
  parallel_for(0, [](std::size_t) { FAIL("called"); });
}

TEST_CASE("flush_denormals reaches worker threads") {
  const unsigned saved = _mm_getcsr();
  volatile float tiny = 1e-30f;
  CHECK(tiny * 1e-10f > 0.0f);  // 1e-40 is subnormal
  flush_denormals();
  std::vector<float> seen(4, -1.0f);
  parallel_for(seen.size(), [&](std::size_t i) { seen[i] = tiny * 1e-10f; }, 4);
  for (float v : seen) CHECK(v == 0.0f);
  _mm_setcsr(saved);
}
