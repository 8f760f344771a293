#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "crania/ops.hpp"
#include "crania/optim.hpp"
#include "crania/rng.hpp"

namespace crania {

template <typename T>
using NamedBuffer = std::pair<std::string, Tensor<T>>;

namespace detail {

/// He-uniform fill: bound = sqrt(6 / fan_in) with fan_in = dim(1) * kernel
/// elements, the layout-agnostic convention (conv weights store in-channels
/// on axis 1, transposed weights store out-channels there).
template <typename T>
void he_uniform(Tensor<T>& w, Rng& rng) {
  std::int64_t fan_in = w.rank() >= 2 ? w.dim(1) : w.dim(0);
  for (int a = 2; a < w.rank(); ++a) fan_in *= w.dim(a);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
}

}  // namespace detail

template <typename T>
struct Conv3dLayer {
  Parameter<T> w, b;
  int stride = 1, padding = 1;

  Conv3dLayer() = default;
  Conv3dLayer(const std::string& name, std::int64_t cin, std::int64_t cout,
              int k, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    Tensor<T> wt({cout, cin, k, k, k});
    detail::he_uniform(wt, rng);
    w = Parameter<T>(name + ".w", wt);
    b = Parameter<T>(name + ".b", Tensor<T>({cout}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv3d(tape, x, w.value, b.value, stride, padding);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct ConvTranspose3dLayer {
  Parameter<T> w, b;
  int stride = 2, padding = 1;

  ConvTranspose3dLayer() = default;
  ConvTranspose3dLayer(const std::string& name, std::int64_t cin,
                       std::int64_t cout, int k, int stride_, int padding_,
                       Rng& rng)
      : stride(stride_), padding(padding_) {
    Tensor<T> wt({cin, cout, k, k, k});
    detail::he_uniform(wt, rng);
    w = Parameter<T>(name + ".w", wt);
    b = Parameter<T>(name + ".b", Tensor<T>({cout}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv_transpose3d(tape, x, w.value, b.value, stride, padding);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct Conv2dLayer {
  Parameter<T> w, b;
  int stride = 1, padding = 1;

  Conv2dLayer() = default;
  Conv2dLayer(const std::string& name, std::int64_t cin, std::int64_t cout,
              int k, int stride_, int padding_, Rng& rng)
      : stride(stride_), padding(padding_) {
    Tensor<T> wt({cout, cin, k, k});
    detail::he_uniform(wt, rng);
    w = Parameter<T>(name + ".w", wt);
    b = Parameter<T>(name + ".b", Tensor<T>({cout}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv2d(tape, x, w.value, b.value, stride, padding);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct ConvTranspose2dLayer {
  Parameter<T> w, b;
  int stride = 2, padding = 1;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(const std::string& name, std::int64_t cin,
                       std::int64_t cout, int k, int stride_, int padding_,
                       Rng& rng)
      : stride(stride_), padding(padding_) {
    Tensor<T> wt({cin, cout, k, k});
    detail::he_uniform(wt, rng);
    w = Parameter<T>(name + ".w", wt);
    b = Parameter<T>(name + ".b", Tensor<T>({cout}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return conv_transpose2d(tape, x, w.value, b.value, stride, padding);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w);
    out.push_back(&b);
  }
};

template <typename T>
struct BatchNormLayer {
  Parameter<T> gamma, beta;
  Tensor<T> running_mean, running_var;
  std::string name;

  BatchNormLayer() = default;
  BatchNormLayer(const std::string& name_, std::int64_t ch) : name(name_) {
    gamma = Parameter<T>(name + ".gamma", Tensor<T>({ch}, T(1)));
    beta = Parameter<T>(name + ".beta", Tensor<T>({ch}));
    running_mean = Tensor<T>({ch});
    running_var = Tensor<T>({ch}, T(1));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x, bool training) {
    return batch_norm(tape, x, gamma.value, beta.value, running_mean,
                      running_var, training);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
  void collect_buffers(std::vector<NamedBuffer<T>>& out) {
    out.emplace_back(name + ".running_mean", running_mean);
    out.emplace_back(name + ".running_var", running_var);
  }
};

template <typename T>
struct InstanceNormLayer {
  Parameter<T> gamma, beta;

  InstanceNormLayer() = default;
  InstanceNormLayer(const std::string& name, std::int64_t ch) {
    gamma = Parameter<T>(name + ".gamma", Tensor<T>({ch}, T(1)));
    beta = Parameter<T>(name + ".beta", Tensor<T>({ch}));
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return instance_norm(tape, x, gamma.value, beta.value);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
  }
};

/// Channel attention over 2D feature maps; ratio must divide the channels.
template <typename T>
struct SELayer {
  Parameter<T> w1, w2;

  SELayer() = default;
  SELayer(const std::string& name, std::int64_t ch, std::int64_t ratio,
          Rng& rng) {
    if (ratio < 1 || ch % ratio != 0)
      throw config_error("SELayer " + name +
                         ": ratio must be >= 1 and divide the channel count");
    const std::int64_t reduced = ch / ratio;
    Tensor<T> w1t({reduced, ch}), w2t({ch, reduced});
    detail::he_uniform(w1t, rng);
    detail::he_uniform(w2t, rng);
    w1 = Parameter<T>(name + ".w1", w1t);
    w2 = Parameter<T>(name + ".w2", w2t);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    return squeeze_excitation(tape, x, w1.value, w2.value);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    out.push_back(&w1);
    out.push_back(&w2);
  }
};

/// Residual block: two (conv -> instance norm -> relu) units plus identity.
template <typename T>
struct ResBlock3d {
  Conv3dLayer<T> conv1, conv2;
  InstanceNormLayer<T> norm1, norm2;

  ResBlock3d() = default;
  ResBlock3d(const std::string& name, std::int64_t ch, Rng& rng)
      : conv1(name + ".conv1", ch, ch, 3, 1, 1, rng),
        conv2(name + ".conv2", ch, ch, 3, 1, 1, rng),
        norm1(name + ".norm1", ch),
        norm2(name + ".norm2", ch) {}

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    Tensor<T> h = relu(tape, norm1.forward(tape, conv1.forward(tape, x)));
    h = relu(tape, norm2.forward(tape, conv2.forward(tape, h)));
    return add(tape, x, h);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    norm1.collect(out);
    conv2.collect(out);
    norm2.collect(out);
  }
};

template <typename T>
struct ResBlock2d {
  Conv2dLayer<T> conv1, conv2;
  InstanceNormLayer<T> norm1, norm2;

  ResBlock2d() = default;
  ResBlock2d(const std::string& name, std::int64_t ch, Rng& rng)
      : conv1(name + ".conv1", ch, ch, 3, 1, 1, rng),
        conv2(name + ".conv2", ch, ch, 3, 1, 1, rng),
        norm1(name + ".norm1", ch),
        norm2(name + ".norm2", ch) {}

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& x) const {
    Tensor<T> h = relu(tape, norm1.forward(tape, conv1.forward(tape, x)));
    h = relu(tape, norm2.forward(tape, conv2.forward(tape, h)));
    return add(tape, x, h);
  }
  void collect(std::vector<Parameter<T>*>& out) {
    conv1.collect(out);
    norm1.collect(out);
    conv2.collect(out);
    norm2.collect(out);
  }
};

}  // namespace crania
