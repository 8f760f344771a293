#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "crania/gradcheck.hpp"
#include "crania/ops.hpp"
#include "crania/optim.hpp"
#include "crania/rng.hpp"
#include "crania/tensor.hpp"

using crania::Reduction;
using crania::Rng;
using crania::Tape;
using crania::Tensor;

namespace {

template <typename T>
T dot(const Tensor<T>& a, const Tensor<T>& b) {
  REQUIRE(a.values().size() == b.values().size());
  T acc = T(0);
  for (std::size_t i = 0; i < a.values().size(); ++i)
    acc += a.values()[i] * b.values()[i];
  return acc;
}

void fill(Tensor<double>& t, Rng& rng, double lo, double hi) {
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
}

}  // namespace

TEST_CASE("tensor shape and scalar basics") {
  Tensor<float> t({2, 3});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<float>({2, 0}), crania::numeric_error);
  CHECK_THROWS_AS(
      Tensor<float>::from_values({2, 2}, {1.0f, 2.0f, 3.0f}),
      crania::numeric_error);
  auto s = Tensor<float>::scalar(3.5f);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 3.5f);
  CHECK_THROWS_AS(t.item(), crania::numeric_error);
}

TEST_CASE("gradients accumulate across backward passes until zeroed") {
  auto x = Tensor<double>::from_values({3}, {1.0, -2.0, 3.0});
  x.set_requires_grad(true);
  x.zero_grad();

  Tape<double> tape;
  auto loss = crania::sum_all(&tape, x);
  tape.backward(loss);
  CHECK(x.grad()[0] == 1.0);

  Tape<double> tape2;
  auto loss2 = crania::sum_all(&tape2, x);
  tape2.backward(loss2);
  CHECK(x.grad()[0] == 2.0);  // second pass adds on top

  x.zero_grad();
  CHECK(x.grad()[0] == 0.0);
}

TEST_CASE("interior nodes do not double-count across repeated backward") {
  auto x = Tensor<double>::from_values({2}, {0.5, -0.25});
  x.set_requires_grad(true);
  x.zero_grad();
  Tape<double> tape;
  auto y = crania::add(&tape, x, x);       // interior node
  auto loss = crania::sum_all(&tape, y);   // d loss / dx = 2
  tape.backward(loss);
  tape.backward(loss);
  CHECK(x.grad()[0] == Catch::Approx(4.0));  // 2 per pass, twice
}

TEST_CASE("backward validates the loss tensor") {
  Tape<double> tape;
  auto x = Tensor<double>::from_values({2}, {1.0, 2.0});
  CHECK_THROWS_AS(tape.backward(x), crania::numeric_error);  // not a scalar on tape
  auto s = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(tape.backward(s), crania::numeric_error);  // not recorded
}

TEST_CASE("finite differences confirm every op gradient") {
  const auto cases = crania::run_gradient_suite();
  REQUIRE(!cases.empty());
  for (const auto& c : cases) {
    INFO(c.name << ": max rel err " << c.max_rel_err << " (analytic "
                << c.analytic << ", numeric " << c.numeric << ")");
    CHECK(c.passed);
  }
}

TEST_CASE("the checker rejects a broken backward") {
  // A custom op y = 2x whose recorded backward drops the factor of two must
  // trip the finite-difference comparison; this guards the checker itself.
  auto broken_double = [](Tape<double>* tape,
                          const std::vector<Tensor<double>>& in) {
    const auto& x = in[0];
    Tensor<double> y(x.shape());
    for (std::size_t i = 0; i < y.values().size(); ++i)
      y.values()[i] = 2.0 * x.values()[i];
    if (crania::grad_needed(tape, {&x})) {
      y.set_requires_grad(true);
      Tensor<double> xc = x, yc = y;
      tape->record("broken_double", {x}, y, [=](Tape<double>& tp) mutable {
        const auto& dy = tp.adj(yc);
        auto& dx = tp.adj(xc);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy[i];  // wrong
      });
    }
    return crania::sum_all(tape, y);
  };
  Rng rng(7);
  Tensor<double> x({4});
  fill(x, rng, -1, 1);
  const auto rep = crania::check_gradients<double>({x}, broken_double);
  CHECK(rep.max_rel_err > 0.1);
}

TEST_CASE("transposed convolution is the adjoint of convolution") {
  // <conv(x, w), u> == <x, conv_transpose(u, w)> with shared weight memory,
  // for every stride/padding combination the networks use.
  Rng rng(11);
  int tested = 0;
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      for (int k : {3, 4}) {
        const std::int64_t D = 6, A = 2, B = 3;
        const std::int64_t od = crania::detail::conv_out_extent(D, k, stride, pad);
        if (od < 1) continue;
        // A strided convolution that crops its input has a smaller adjoint
        // domain; the identity is only meaningful when extents round-trip.
        if (crania::detail::tconv_out_extent(od, k, stride, pad) != D) continue;
        ++tested;
        Tensor<double> x({1, B, D, D, D}), w({A, B, k, k, k});
        Tensor<double> zero_a({A}), zero_b({B});
        fill(x, rng, -1, 1);
        fill(w, rng, -1, 1);
        auto y = crania::conv3d<double>(nullptr, x, w, zero_a, stride, pad);
        Tensor<double> u(y.shape());
        fill(u, rng, -1, 1);
        auto v = crania::conv_transpose3d<double>(nullptr, u, w, zero_b, stride, pad);
        REQUIRE(v.same_shape(x));
        INFO("stride " << stride << " pad " << pad << " k " << k);
        CHECK(dot(y, u) == Catch::Approx(dot(x, v)).epsilon(1e-10));
      }
    }
  }
  CHECK(tested >= 4);  // both network geometries (k3 s1 p1, k4 s2 p1) included
}

TEST_CASE("transposed convolution undoes the stride-2 extent map") {
  // (n-1)*2 - 2 + 4 == 2n: kernel 4, stride 2, padding 1 doubles extents.
  for (std::int64_t n : {3, 6, 12, 45, 90}) {
    CHECK(crania::detail::tconv_out_extent(n, 4, 2, 1) == 2 * n);
    CHECK(crania::detail::conv_out_extent(2 * n, 4, 2, 1) == n);
  }
  // Kernel 3, stride 2, padding 1 halves even extents exactly.
  for (std::int64_t n : {6, 12, 24, 90, 180}) {
    CHECK(crania::detail::conv_out_extent(n, 3, 2, 1) == n / 2);
  }
}

TEST_CASE("convolution matches a hand-worked example") {
  // 1x1x1 kernel at stride 1: a pure per-voxel scale plus bias.
  auto x = Tensor<double>::from_values({1, 1, 1, 2, 2}, {1, 2, 3, 4});
  auto w = Tensor<double>::from_values({1, 1, 1, 1, 1}, {2.5});
  auto b = Tensor<double>::from_values({1}, {0.5});
  auto y = crania::conv3d<double>(nullptr, x, w, b, 1, 0);
  CHECK(y.values() == std::vector<double>{3.0, 5.5, 8.0, 10.5});

  // 3x3 kernel, padding 1, single bright pixel: the output stamps the
  // flipped kernel around that pixel.
  Tensor<double> x2({1, 1, 3, 3});
  x2.values()[4] = 1.0;  // center
  Tensor<double> w2({1, 1, 3, 3});
  for (int i = 0; i < 9; ++i) w2.values()[static_cast<std::size_t>(i)] = i + 1;
  Tensor<double> b2({1});
  auto y2 = crania::conv2d<double>(nullptr, x2, w2, b2, 1, 1);
  CHECK(y2.values() ==
        std::vector<double>{9, 8, 7, 6, 5, 4, 3, 2, 1});
}

TEST_CASE("batch norm normalizes per channel in training mode") {
  Rng rng(3);
  Tensor<double> x({4, 2, 5});
  fill(x, rng, -3, 7);
  auto gamma = Tensor<double>::from_values({2}, {1.0, 1.0});
  Tensor<double> beta({2});
  Tensor<double> rm({2}), rv({2}, 1.0);
  auto y = crania::batch_norm<double>(nullptr, x, gamma, beta, rm, rv, true);
  for (std::int64_t c = 0; c < 2; ++c) {
    double sum = 0, sumsq = 0;
    for (std::int64_t n = 0; n < 4; ++n)
      for (std::int64_t i = 0; i < 5; ++i) {
        const double v = y.values()[static_cast<std::size_t>((n * 2 + c) * 5 + i)];
        sum += v;
        sumsq += v * v;
      }
    CHECK(sum / 20 == Catch::Approx(0.0).margin(1e-12));
    CHECK(sumsq / 20 == Catch::Approx(1.0).epsilon(1e-3));  // eps shrinks it
  }
  // Running stats blend with momentum 0.1 toward batch mean / unbiased var.
  double mu0 = 0;
  for (std::int64_t n = 0; n < 4; ++n)
    for (std::int64_t i = 0; i < 5; ++i)
      mu0 += x.values()[static_cast<std::size_t>((n * 2 + 0) * 5 + i)];
  mu0 /= 20;
  CHECK(rm.values()[0] == Catch::Approx(0.1 * mu0).margin(1e-12));
}

TEST_CASE("batch norm eval mode uses the running statistics") {
  auto x = Tensor<double>::from_values({1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  auto gamma = Tensor<double>::from_values({1}, {2.0});
  auto beta = Tensor<double>::from_values({1}, {1.0});
  auto rm = Tensor<double>::from_values({1}, {2.0});
  auto rv = Tensor<double>::from_values({1}, {4.0});
  auto y = crania::batch_norm<double>(nullptr, x, gamma, beta, rm, rv, false,
                                      0.0);
  // y = 2*(x-2)/2 + 1 = x - 1
  CHECK(y.values()[0] == Catch::Approx(0.0));
  CHECK(y.values()[3] == Catch::Approx(3.0));
  CHECK(rm.values()[0] == 2.0);  // eval must not touch the stats
}

TEST_CASE("instance norm normalizes each sample and channel separately") {
  Rng rng(5);
  Tensor<double> x({2, 3, 4, 4});
  fill(x, rng, -2, 9);
  auto gamma = Tensor<double>::from_values({3}, {1.0, 1.0, 1.0});
  Tensor<double> beta({3});
  auto y = crania::instance_norm<double>(nullptr, x, gamma, beta);
  for (std::int64_t g = 0; g < 6; ++g) {
    double sum = 0;
    for (std::int64_t i = 0; i < 16; ++i)
      sum += y.values()[static_cast<std::size_t>(g * 16 + i)];
    CHECK(sum / 16 == Catch::Approx(0.0).margin(1e-12));
  }
}

TEST_CASE("nearest resampling uses half-pixel centers") {
  // 2 -> 4 doubles each sample; 4 -> 2 picks the two cell centers.
  auto x = Tensor<double>::from_values({1, 1, 1, 2}, {10.0, 20.0});
  auto up = crania::nn_resample2d<double>(nullptr, x, 1, 4);
  CHECK(up.values() == std::vector<double>{10, 10, 20, 20});
  auto x2 = Tensor<double>::from_values({1, 1, 1, 4}, {1.0, 2.0, 3.0, 4.0});
  // Output centers 0.5 and 1.5 map to source coordinates 1.0 and 3.0, which
  // fall in source cells 1 and 3 — the same rule the voxel downsampler uses.
  auto down = crania::nn_resample2d<double>(nullptr, x2, 1, 2);
  CHECK(down.values() == std::vector<double>{2.0, 4.0});
  auto same = crania::nn_resample2d<double>(nullptr, x2, 1, 4);
  CHECK(same.values() == x2.values());
  CHECK_THROWS_AS(crania::nn_upsample2d<double>(nullptr, x2, 1, 3),
                  crania::numeric_error);
}

TEST_CASE("l1 loss values and reductions") {
  auto p = Tensor<double>::from_values({2, 2}, {1.0, -1.0, 0.5, 2.0});
  auto t = Tensor<double>::from_values({2, 2}, {0.0, 1.0, 0.5, -1.0});
  auto sum = crania::l1_loss<double>(nullptr, p, t, Reduction::sum);
  CHECK(sum.item() == Catch::Approx(1 + 2 + 0 + 3));
  auto mean = crania::l1_loss<double>(nullptr, p, t, Reduction::mean);
  CHECK(mean.item() == Catch::Approx(6.0 / 4.0));
  CHECK(crania::parse_reduction("sum") == Reduction::sum);
  CHECK(crania::parse_reduction("mean") == Reduction::mean);
  CHECK_THROWS_AS(crania::parse_reduction("max"), crania::config_error);
}

TEST_CASE("slice and concat round values through unchanged") {
  Tensor<double> x({1, 2, 3, 2, 2});
  for (std::size_t i = 0; i < x.values().size(); ++i)
    x.values()[i] = static_cast<double>(i);
  auto s1 = crania::slice_depth<double>(nullptr, x, 1);
  CHECK(s1.dim(2) == 2);
  CHECK(s1.values()[0] == 4.0);   // n0 c0 d1 h0 w0
  CHECK(s1.values()[4] == 16.0);  // n0 c1 d1 h0 w0
  auto back = crania::concat<double>(
      nullptr,
      {crania::slice_depth<double>(nullptr, x, 0), s1,
       crania::slice_depth<double>(nullptr, x, 2)},
      1);
  CHECK(back.dim(1) == 6);
  CHECK_THROWS_AS(crania::slice_depth<double>(nullptr, x, 3),
                  crania::numeric_error);
}

TEST_CASE("adam first step follows the closed form") {
  auto t = Tensor<double>::from_values({3}, {1.0, 2.0, 3.0});
  crania::Parameter<double> p("p", t);
  CHECK(p.value.grad().size() == 3);  // allocated up front
  p.value.grad() = {0.5, -0.2, 0.0};
  const double lr = 1e-2, eps = 1e-8;
  crania::adam_step<double>({&p}, lr, 0.9, 0.999, eps);
  // After bias correction the first update is -lr * g / (|g| + eps).
  CHECK(p.value.values()[0] ==
        Catch::Approx(1.0 - lr * 0.5 / (0.5 + eps)).epsilon(1e-12));
  CHECK(p.value.values()[1] ==
        Catch::Approx(2.0 + lr * 0.2 / (0.2 + eps)).epsilon(1e-12));
  CHECK(p.value.values()[2] == 3.0);  // zero gradient moves nothing
  CHECK(p.step_count == 1);
  CHECK(p.value.grad()[0] == 0.0);  // gradients cleared by the step
  CHECK_THROWS_AS(crania::adam_step<double>({&p}, 0.0), crania::config_error);
}

TEST_CASE("adam converges on a quadratic") {
  auto t = Tensor<double>::from_values({1}, {5.0});
  crania::Parameter<double> p("p", t);
  for (int i = 0; i < 4000; ++i) {
    const double x = p.value.values()[0];
    p.value.grad()[0] += 2 * (x - 1.5);  // d/dx (x-1.5)^2
    crania::adam_step<double>({&p}, 1e-2);
  }
  CHECK(p.value.values()[0] == Catch::Approx(1.5).margin(1e-3));
}

TEST_CASE("squeeze excitation validates its reduction shape") {
  Tensor<double> x({1, 4, 2, 2}), w1({3, 4}), w2({4, 3});
  CHECK_THROWS_AS(crania::squeeze_excitation<double>(nullptr, x, w1, w2),
                  crania::numeric_error);  // 3 does not divide 4
}
