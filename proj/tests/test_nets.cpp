#include <catch2/catch_amalgamated.hpp>

#include <set>
#include <string>
#include <vector>

#include "crania/nets.hpp"

using crania::NetConfig;
using crania::Rng;
using crania::ShapeCompletionNet3D;
using crania::Tape;
using crania::Tensor;
using crania::UpsamplerNet2D;
using crania::UpsamplerVariant;

namespace {

NetConfig desk_config(UpsamplerVariant v = UpsamplerVariant::nn) {
  NetConfig cfg;
  cfg.c = 8;
  cfg.L = 24;
  cfg.H = 64;
  cfg.variant = v;
  cfg.se_ratio = 4;
  return cfg;
}

Tensor<float> random_volume(std::int64_t l, Rng& rng) {
  Tensor<float> x({1, 1, l, l, l});
  for (auto& v : x.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  return x;
}

}  // namespace

TEST_CASE("config validation rejects inconsistent settings") {
  NetConfig cfg = desk_config();
  CHECK_NOTHROW(cfg.validate());
  NetConfig bad = cfg;
  bad.c = 1;
  CHECK_THROWS_AS(bad.validate(), crania::config_error);
  bad = cfg;
  bad.L = 22;  // not a multiple of 4
  CHECK_THROWS_AS(bad.validate(), crania::config_error);
  bad = cfg;
  bad.H = 24;
  CHECK_THROWS_AS(bad.validate(), crania::config_error);
  bad = cfg;
  bad.se_ratio = 3;
  CHECK_THROWS_AS(bad.validate(), crania::config_error);
  CHECK_THROWS_AS(crania::parse_variant("bilinear"), crania::config_error);
}

TEST_CASE("completion net traces the desk-scale extents") {
  Rng rng(5);
  ShapeCompletionNet3D<float> net(desk_config(), rng);
  Tensor<float> x = random_volume(24, rng);
  std::vector<std::int64_t> trace;
  auto y = net.forward(nullptr, x, false, &trace);
  CHECK(trace == std::vector<std::int64_t>{24, 24, 12, 6, 6, 12, 24, 24});
  REQUIRE(y.shape() == std::vector<std::int64_t>({1, 1, 24, 24, 24}));
  float lo = 1.0f, hi = 0.0f;
  for (float v : y.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo > 0.0f);  // sigmoid keeps the output strictly inside (0,1)
  CHECK(hi < 1.0f);
}

TEST_CASE("completion net rejects wrong input shapes") {
  Rng rng(5);
  ShapeCompletionNet3D<float> net(desk_config(), rng);
  Tensor<float> wrong_spatial({1, 1, 20, 20, 20});
  CHECK_THROWS_AS(net.forward(nullptr, wrong_spatial, false),
                  crania::numeric_error);
  Tensor<float> wrong_channels({1, 2, 24, 24, 24});
  CHECK_THROWS_AS(net.forward(nullptr, wrong_channels, false),
                  crania::numeric_error);
}

TEST_CASE("upsampler nn variant traces L, geometric mid, H") {
  Rng rng(9);
  NetConfig cfg = desk_config(UpsamplerVariant::nn);
  CHECK(cfg.nn_mid() == 39);  // round(sqrt(24*64))
  UpsamplerNet2D<float> net(cfg, rng);
  Tensor<float> x({2, 2, 24, 24});
  for (auto& v : x.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  std::vector<std::int64_t> trace;
  auto y = net.forward(nullptr, x, false, &trace);
  CHECK(trace == std::vector<std::int64_t>{24, 39, 64});
  REQUIRE(y.shape() == std::vector<std::int64_t>({2, 1, 64, 64}));
  float lo = 1.0f, hi = 0.0f;
  for (float v : y.values()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo > 0.0f);
  CHECK(hi < 1.0f);
}

TEST_CASE("upsampler transposed variant doubles twice then resamples") {
  Rng rng(9);
  UpsamplerNet2D<float> net(desk_config(UpsamplerVariant::transposed), rng);
  Tensor<float> x({1, 2, 24, 24});
  for (auto& v : x.values()) v = rng.uniform(0, 1) < 0.5f ? 1.0f : 0.0f;
  std::vector<std::int64_t> trace;
  auto y = net.forward(nullptr, x, false, &trace);
  CHECK(trace == std::vector<std::int64_t>{24, 48, 96, 64});
  REQUIRE(y.shape() == std::vector<std::int64_t>({1, 1, 64, 64}));
}

TEST_CASE("upsampler rejects wrong channel count") {
  Rng rng(9);
  UpsamplerNet2D<float> net(desk_config(), rng);
  Tensor<float> x({1, 1, 24, 24});
  CHECK_THROWS_AS(net.forward(nullptr, x, false), crania::numeric_error);
}

TEST_CASE("full-scale extent arithmetic holds without allocating at scale") {
  // The full deployment scale is L=180, H=512; check the pure extent math.
  using crania::detail::conv_out_extent;
  using crania::detail::tconv_out_extent;
  CHECK(conv_out_extent(180, 3, 1, 1) == 180);
  CHECK(conv_out_extent(180, 3, 2, 1) == 90);
  CHECK(conv_out_extent(90, 3, 2, 1) == 45);
  CHECK(tconv_out_extent(45, 4, 2, 1) == 90);
  CHECK(tconv_out_extent(90, 4, 2, 1) == 180);
  NetConfig full;
  full.c = 64;
  full.L = 180;
  full.H = 512;
  full.se_ratio = 8;
  CHECK_NOTHROW(full.validate());
  CHECK(full.nn_mid() == 304);  // round(sqrt(180*512))
}

TEST_CASE("parameter counts are config-determined and variant-ordered") {
  Rng rng_a(1), rng_b(2);
  NetConfig cfg = desk_config();
  ShapeCompletionNet3D<float> a(cfg, rng_a), b(cfg, rng_b);
  CHECK(crania::parameter_count(a) == crania::parameter_count(b));

  UpsamplerNet2D<float> nn_net(desk_config(UpsamplerVariant::nn), rng_a);
  UpsamplerNet2D<float> tc_net(desk_config(UpsamplerVariant::transposed), rng_a);
  CHECK(crania::parameter_count(nn_net) < crania::parameter_count(tc_net));

  // Doubling the width roughly quadruples the count (conv terms dominate).
  NetConfig wide = cfg;
  wide.c = 16;
  ShapeCompletionNet3D<float> w(wide, rng_a);
  const double ratio = static_cast<double>(crania::parameter_count(w)) /
                       static_cast<double>(crania::parameter_count(a));
  CHECK(ratio > 3.0);
  CHECK(ratio < 4.5);
}

TEST_CASE("parameter names are unique across both networks") {
  Rng rng(3);
  ShapeCompletionNet3D<float> net3(desk_config(), rng);
  UpsamplerNet2D<float> net2(desk_config(UpsamplerVariant::transposed), rng);
  std::set<std::string> names;
  std::size_t count = 0;
  for (auto* p : net3.parameters()) {
    names.insert(p->name);
    ++count;
  }
  for (auto* p : net2.parameters()) {
    names.insert(p->name);
    ++count;
  }
  for (auto& [name, tensor] : net3.buffers()) {
    names.insert(name);
    ++count;
  }
  for (auto& [name, tensor] : net2.buffers()) {
    names.insert(name);
    ++count;
  }
  CHECK(names.size() == count);
}

TEST_CASE("identical seeds build identical networks") {
  NetConfig cfg = desk_config();
  Rng rng_a(42), rng_b(42);
  ShapeCompletionNet3D<float> a(cfg, rng_a), b(cfg, rng_b);
  auto pa = a.parameters();
  auto pb = b.parameters();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK(pa[i]->name == pb[i]->name);
    CHECK(pa[i]->value.values() == pb[i]->value.values());
  }
  Rng data_rng(7);
  Tensor<float> x = random_volume(24, data_rng);
  auto ya = a.forward(nullptr, x, false);
  auto yb = b.forward(nullptr, x, false);
  CHECK(ya.values() == yb.values());  // bit-identical
}

TEST_CASE("slice loss reaches the first 3D conv through the 2D path") {
  // The 2D loss alone must backpropagate through the depth slice into every
  // trainable layer of the 3D network.
  NetConfig cfg;
  cfg.c = 4;
  cfg.L = 8;
  cfg.H = 16;
  cfg.se_ratio = 2;
  Rng rng(13);
  ShapeCompletionNet3D<float> net3(cfg, rng);
  UpsamplerNet2D<float> net2(cfg, rng);
  Tensor<float> x = random_volume(8, rng);

  Tape<float> tape;
  auto completed = net3.forward(&tape, x, true);
  auto pred_slice = crania::slice_depth(&tape, completed, 3);
  Tensor<float> defect_slice({1, 1, 8, 8});
  for (auto& v : defect_slice.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  auto both = crania::concat<float>(&tape, {pred_slice, defect_slice}, 1);
  auto up = net2.forward(&tape, both, true);
  Tensor<float> target({1, 1, 16, 16});
  for (auto& v : target.values()) v = rng.bernoulli(0.5) ? 1.0f : 0.0f;
  auto loss = crania::l1_loss(&tape, up, target, crania::Reduction::sum);
  tape.backward(loss);

  for (auto* p : net3.parameters()) {
    double norm = 0;
    for (float g : p->value.grad()) norm += static_cast<double>(g) * g;
    INFO(p->name);
    CHECK(norm > 0.0);
  }
}
