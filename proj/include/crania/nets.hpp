#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crania/layers.hpp"

namespace crania {

enum class UpsamplerVariant { nn, transposed };

inline UpsamplerVariant parse_variant(const std::string& s) {
  if (s == "nn") return UpsamplerVariant::nn;
  if (s == "transposed") return UpsamplerVariant::transposed;
  throw config_error("unknown upsampler variant '" + s +
                     "' (expected nn or transposed)");
}

inline std::string variant_name(UpsamplerVariant v) {
  return v == UpsamplerVariant::nn ? "nn" : "transposed";
}

struct NetConfig {
  std::int64_t c = 8;        // channel width
  std::int64_t L = 24;       // low (completion) resolution
  std::int64_t H = 64;       // high (output) resolution
  UpsamplerVariant variant = UpsamplerVariant::nn;
  std::int64_t se_ratio = 4;

  void validate() const {
    if (c < 2) throw config_error("NetConfig: c must be >= 2");
    if (L < 4 || L % 4 != 0)
      throw config_error(
          "NetConfig: L must be a positive multiple of 4 (two stride-2 stages)");
    if (H <= L) throw config_error("NetConfig: H must exceed L");
    if (se_ratio < 1 || c % se_ratio != 0)
      throw config_error("NetConfig: se_ratio must divide c");
  }

  /// Intermediate size of the two-stage nearest-neighbor upsampling path:
  /// the geometric mean of L and H, so both stages share the same scale.
  std::int64_t nn_mid() const {
    return std::llround(std::sqrt(static_cast<double>(L) *
                                  static_cast<double>(H)));
  }
};

/// 3D encoder-decoder that completes a downsampled defective skull.
/// Stage sequence: conv(s1) -> conv(s2) -> conv(s2), each with batch norm and
/// relu; four residual blocks; two stride-2 transposed convs with batch norm
/// and relu; a final conv with sigmoid. Spatial trace L -> L -> L/2 -> L/4 ->
/// L/4 -> L/2 -> L -> L.
template <typename T>
class ShapeCompletionNet3D {
 public:
  ShapeCompletionNet3D(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::int64_t c = cfg.c;
    enc1_ = Conv3dLayer<T>("c3.enc1.conv", 1, c, 3, 1, 1, rng);
    bn1_ = BatchNormLayer<T>("c3.enc1.bn", c);
    enc2_ = Conv3dLayer<T>("c3.enc2.conv", c, c, 3, 2, 1, rng);
    bn2_ = BatchNormLayer<T>("c3.enc2.bn", c);
    enc3_ = Conv3dLayer<T>("c3.enc3.conv", c, c, 3, 2, 1, rng);
    bn3_ = BatchNormLayer<T>("c3.enc3.bn", c);
    for (int i = 0; i < 4; ++i)
      blocks_[static_cast<std::size_t>(i)] =
          ResBlock3d<T>("c3.rb" + std::to_string(i + 1), c, rng);
    dec1_ = ConvTranspose3dLayer<T>("c3.dec1.tconv", c, c, 4, 2, 1, rng);
    dbn1_ = BatchNormLayer<T>("c3.dec1.bn", c);
    dec2_ = ConvTranspose3dLayer<T>("c3.dec2.tconv", c, c, 4, 2, 1, rng);
    dbn2_ = BatchNormLayer<T>("c3.dec2.bn", c);
    head_ = Conv3dLayer<T>("c3.head.conv", c, 1, 3, 1, 1, rng);
  }

  /// x: [B,1,L,L,L] occupancy. Returns [B,1,L,L,L] probabilities. When
  /// `trace` is given, appends the spatial extent after every stage group.
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training,
                    std::vector<std::int64_t>* trace = nullptr) {
    if (x.rank() != 5 || x.dim(1) != 1)
      throw numeric_error("ShapeCompletionNet3D: input must be [B,1,L,L,L]");
    for (int a = 2; a < 5; ++a)
      if (x.dim(a) != cfg_.L)
        throw numeric_error(
            "ShapeCompletionNet3D: input spatial extent does not match L");
    auto note = [&](const Tensor<T>& t) {
      if (trace) trace->push_back(t.dim(2));
    };
    note(x);
    Tensor<T> h = relu(tape, bn1_.forward(tape, enc1_.forward(tape, x), training));
    note(h);
    h = relu(tape, bn2_.forward(tape, enc2_.forward(tape, h), training));
    note(h);
    h = relu(tape, bn3_.forward(tape, enc3_.forward(tape, h), training));
    note(h);
    for (auto& rb : blocks_) h = rb.forward(tape, h);
    note(h);
    h = relu(tape, dbn1_.forward(tape, dec1_.forward(tape, h), training));
    note(h);
    h = relu(tape, dbn2_.forward(tape, dec2_.forward(tape, h), training));
    note(h);
    h = sigmoid(tape, head_.forward(tape, h));
    note(h);
    return h;
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    enc1_.collect(out);
    bn1_.collect(out);
    enc2_.collect(out);
    bn2_.collect(out);
    enc3_.collect(out);
    bn3_.collect(out);
    for (auto& rb : blocks_) rb.collect(out);
    dec1_.collect(out);
    dbn1_.collect(out);
    dec2_.collect(out);
    dbn2_.collect(out);
    head_.collect(out);
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> out;
    bn1_.collect_buffers(out);
    bn2_.collect_buffers(out);
    bn3_.collect_buffers(out);
    dbn1_.collect_buffers(out);
    dbn2_.collect_buffers(out);
    return out;
  }

  const NetConfig& config() const { return cfg_; }

 private:
  NetConfig cfg_;
  Conv3dLayer<T> enc1_, enc2_, enc3_, head_;
  BatchNormLayer<T> bn1_, bn2_, bn3_, dbn1_, dbn2_;
  std::array<ResBlock3d<T>, 4> blocks_;
  ConvTranspose3dLayer<T> dec1_, dec2_;
};

/// 2D decoder that super-resolves one completed slice, conditioned on the
/// matching slice of the defective skull at high resolution (2 channels in).
/// Stage sequence: conv -> batch norm -> relu; four (SE -> residual block)
/// pairs; two upsampling stages; final conv with sigmoid.
///
/// Upsampling variants:
///   nn:         nearest L -> mid -> H, each followed by instance norm + relu
///               (mid = round(sqrt(L*H)))
///   transposed: two stride-2 transposed convs L -> 2L -> 4L, each with batch
///               norm + relu, then nearest resampling to H.
template <typename T>
class UpsamplerNet2D {
 public:
  UpsamplerNet2D(const NetConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const std::int64_t c = cfg.c;
    stem_ = Conv2dLayer<T>("u2.stem.conv", 2, c, 3, 1, 1, rng);
    stem_bn_ = BatchNormLayer<T>("u2.stem.bn", c);
    for (int i = 0; i < 4; ++i) {
      const std::string tag = std::to_string(i + 1);
      se_[static_cast<std::size_t>(i)] =
          SELayer<T>("u2.se" + tag, c, cfg.se_ratio, rng);
      blocks_[static_cast<std::size_t>(i)] =
          ResBlock2d<T>("u2.rb" + tag, c, rng);
    }
    if (cfg.variant == UpsamplerVariant::nn) {
      up1_norm_ = InstanceNormLayer<T>("u2.up1.norm", c);
      up2_norm_ = InstanceNormLayer<T>("u2.up2.norm", c);
    } else {
      up1_tc_ = ConvTranspose2dLayer<T>("u2.up1.tconv", c, c, 4, 2, 1, rng);
      up1_bn_ = BatchNormLayer<T>("u2.up1.bn", c);
      up2_tc_ = ConvTranspose2dLayer<T>("u2.up2.tconv", c, c, 4, 2, 1, rng);
      up2_bn_ = BatchNormLayer<T>("u2.up2.bn", c);
    }
    head_ = Conv2dLayer<T>("u2.head.conv", c, 1, 3, 1, 1, rng);
  }

  /// x: [B,2,L,L]. Returns [B,1,H,H] probabilities. When `trace` is given,
  /// appends the spatial extent of the input and after each upsampling stage.
  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training,
                    std::vector<std::int64_t>* trace = nullptr) {
    if (x.rank() != 4 || x.dim(1) != 2)
      throw numeric_error("UpsamplerNet2D: input must be [B,2,L,L]");
    if (x.dim(2) != cfg_.L || x.dim(3) != cfg_.L)
      throw numeric_error(
          "UpsamplerNet2D: input spatial extent does not match L");
    auto note = [&](const Tensor<T>& t) {
      if (trace) trace->push_back(t.dim(2));
    };
    note(x);
    Tensor<T> h =
        relu(tape, stem_bn_.forward(tape, stem_.forward(tape, x), training));
    for (std::size_t i = 0; i < 4; ++i) {
      h = se_[i].forward(tape, h);
      h = blocks_[i].forward(tape, h);
    }
    if (cfg_.variant == UpsamplerVariant::nn) {
      const std::int64_t mid = cfg_.nn_mid();
      h = relu(tape,
               up1_norm_.forward(tape, nn_upsample2d(tape, h, mid, mid)));
      note(h);
      h = relu(tape,
               up2_norm_.forward(tape, nn_upsample2d(tape, h, cfg_.H, cfg_.H)));
      note(h);
    } else {
      h = relu(tape, up1_bn_.forward(tape, up1_tc_.forward(tape, h), training));
      note(h);
      h = relu(tape, up2_bn_.forward(tape, up2_tc_.forward(tape, h), training));
      note(h);
      if (h.dim(2) != cfg_.H || h.dim(3) != cfg_.H) {
        h = nn_resample2d(tape, h, cfg_.H, cfg_.H);
        note(h);
      }
    }
    return sigmoid(tape, head_.forward(tape, h));
  }

  std::vector<Parameter<T>*> parameters() {
    std::vector<Parameter<T>*> out;
    stem_.collect(out);
    stem_bn_.collect(out);
    for (std::size_t i = 0; i < 4; ++i) {
      se_[i].collect(out);
      blocks_[i].collect(out);
    }
    if (cfg_.variant == UpsamplerVariant::nn) {
      up1_norm_.collect(out);
      up2_norm_.collect(out);
    } else {
      up1_tc_.collect(out);
      up1_bn_.collect(out);
      up2_tc_.collect(out);
      up2_bn_.collect(out);
    }
    head_.collect(out);
    return out;
  }

  std::vector<NamedBuffer<T>> buffers() {
    std::vector<NamedBuffer<T>> out;
    stem_bn_.collect_buffers(out);
    if (cfg_.variant == UpsamplerVariant::transposed) {
      up1_bn_.collect_buffers(out);
      up2_bn_.collect_buffers(out);
    }
    return out;
  }

  const NetConfig& config() const { return cfg_; }

 private:
  NetConfig cfg_;
  Conv2dLayer<T> stem_, head_;
  BatchNormLayer<T> stem_bn_, up1_bn_, up2_bn_;
  std::array<SELayer<T>, 4> se_;
  std::array<ResBlock2d<T>, 4> blocks_;
  InstanceNormLayer<T> up1_norm_, up2_norm_;
  ConvTranspose2dLayer<T> up1_tc_, up2_tc_;
};

template <typename Net>
std::int64_t parameter_count(Net& net) {
  std::int64_t total = 0;
  for (const auto* p : net.parameters()) total += p->value.numel();
  return total;
}

}  // namespace crania
