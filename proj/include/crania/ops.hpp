#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "crania/tensor.hpp"

namespace crania {

enum class Reduction { sum, mean };

inline Reduction parse_reduction(const std::string& s) {
  if (s == "sum") return Reduction::sum;
  if (s == "mean") return Reduction::mean;
  throw config_error("unknown reduction '" + s + "' (expected sum or mean)");
}

namespace detail {

inline void check(bool ok, const char* msg) {
  if (!ok) throw numeric_error(msg);
}

inline std::int64_t conv_out_extent(std::int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::int64_t tconv_out_extent(std::int64_t in, int k, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + k;
}

// Valid range [lo, hi) of the strided-side index s for one kernel offset k,
// such that the large-side index l = s*stride - pad + k stays in [0, n_large).
inline void strided_range(std::int64_t n_large, std::int64_t n_small, int k,
                          int stride, int pad, std::int64_t& lo,
                          std::int64_t& hi) {
  std::int64_t num = pad - k;
  lo = num <= 0 ? 0 : (num + stride - 1) / stride;
  hi = (n_large - 1 + pad - k) / stride + 1;
  if (hi > n_small) hi = n_small;
  if (hi < lo) hi = lo;
}

// The three kernels below share one index relation between a strided "small"
// plane and a dense "large" plane: l = s*stride - pad + k per axis. A forward
// convolution gathers (small=output), its input gradient scatters, and a
// transposed convolution is the same scatter with input and output swapped,
// which makes it the exact adjoint. The weight gradient is the paired dot
// product. Loop order is fixed, so results are bit-reproducible.

struct PlaneGeom3 {
  std::int64_t sd, sh, sw;  // small extents
  std::int64_t ld, lh, lw;  // large extents
  int stride, pad;
};

template <typename T>
void plane_gather3(const PlaneGeom3& g, T* small, const T* large, int kd,
                   int kh, int kw, T wv) {
  std::int64_t dlo, dhi, hlo, hhi, wlo, whi;
  strided_range(g.ld, g.sd, kd, g.stride, g.pad, dlo, dhi);
  strided_range(g.lh, g.sh, kh, g.stride, g.pad, hlo, hhi);
  strided_range(g.lw, g.sw, kw, g.stride, g.pad, wlo, whi);
  const std::int64_t shift = kw - g.pad;  // i*stride + shift >= 0 on [wlo, whi)
  for (std::int64_t sd = dlo; sd < dhi; ++sd) {
    const std::int64_t ld = sd * g.stride - g.pad + kd;
    for (std::int64_t sh = hlo; sh < hhi; ++sh) {
      const std::int64_t lh = sh * g.stride - g.pad + kh;
      const T* lrow = large + (ld * g.lh + lh) * g.lw;
      T* srow = small + (sd * g.sh + sh) * g.sw;
      if (g.stride == 1) {
        for (std::int64_t i = wlo; i < whi; ++i) srow[i] += wv * lrow[i + shift];
      } else {
        for (std::int64_t i = wlo; i < whi; ++i)
          srow[i] += wv * lrow[i * g.stride + shift];
      }
    }
  }
}

template <typename T>
void plane_scatter3(const PlaneGeom3& g, const T* small, T* large, int kd,
                    int kh, int kw, T wv) {
  std::int64_t dlo, dhi, hlo, hhi, wlo, whi;
  strided_range(g.ld, g.sd, kd, g.stride, g.pad, dlo, dhi);
  strided_range(g.lh, g.sh, kh, g.stride, g.pad, hlo, hhi);
  strided_range(g.lw, g.sw, kw, g.stride, g.pad, wlo, whi);
  const std::int64_t shift = kw - g.pad;
  for (std::int64_t sd = dlo; sd < dhi; ++sd) {
    const std::int64_t ld = sd * g.stride - g.pad + kd;
    for (std::int64_t sh = hlo; sh < hhi; ++sh) {
      const std::int64_t lh = sh * g.stride - g.pad + kh;
      T* lrow = large + (ld * g.lh + lh) * g.lw;
      const T* srow = small + (sd * g.sh + sh) * g.sw;
      if (g.stride == 1) {
        for (std::int64_t i = wlo; i < whi; ++i) lrow[i + shift] += wv * srow[i];
      } else {
        for (std::int64_t i = wlo; i < whi; ++i)
          lrow[i * g.stride + shift] += wv * srow[i];
      }
    }
  }
}

template <typename T>
T plane_dot3(const PlaneGeom3& g, const T* small, const T* large, int kd,
             int kh, int kw) {
  std::int64_t dlo, dhi, hlo, hhi, wlo, whi;
  strided_range(g.ld, g.sd, kd, g.stride, g.pad, dlo, dhi);
  strided_range(g.lh, g.sh, kh, g.stride, g.pad, hlo, hhi);
  strided_range(g.lw, g.sw, kw, g.stride, g.pad, wlo, whi);
  const std::int64_t shift = kw - g.pad;
  T acc = T(0);
  for (std::int64_t sd = dlo; sd < dhi; ++sd) {
    const std::int64_t ld = sd * g.stride - g.pad + kd;
    for (std::int64_t sh = hlo; sh < hhi; ++sh) {
      const std::int64_t lh = sh * g.stride - g.pad + kh;
      const T* lrow = large + (ld * g.lh + lh) * g.lw;
      const T* srow = small + (sd * g.sh + sh) * g.sw;
      if (g.stride == 1) {
        for (std::int64_t i = wlo; i < whi; ++i) acc += srow[i] * lrow[i + shift];
      } else {
        for (std::int64_t i = wlo; i < whi; ++i)
          acc += srow[i] * lrow[i * g.stride + shift];
      }
    }
  }
  return acc;
}

// 2D variant: a degenerate depth axis of extent 1 keeps one code path.
// Callers pass kd = pad so the depth relation 0*stride - pad + kd lands on
// plane 0 and the depth range is exactly [0, 1).
inline PlaneGeom3 lift2d(std::int64_t sh, std::int64_t sw, std::int64_t lh,
                         std::int64_t lw, int stride, int pad) {
  return PlaneGeom3{1, sh, sw, 1, lh, lw, stride, pad};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d / conv_transpose3d
//
// conv3d:           x[N,Ci,D,H,W], w[Co,Ci,k,k,k], b[Co]
// conv_transpose3d: x[N,Ci,D,H,W], w[Ci,Co,k,k,k], b[Co]
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv3d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, int stride, int padding) {
  detail::check(x.rank() == 5, "conv3d: input must be [N,C,D,H,W]");
  detail::check(w.rank() == 5, "conv3d: weight must be [Co,Ci,k,k,k]");
  const std::int64_t batch = x.dim(0), cin = x.dim(1);
  const std::int64_t cout = w.dim(0);
  detail::check(w.dim(1) == cin, "conv3d: weight channel mismatch");
  const int k = static_cast<int>(w.dim(2));
  detail::check(w.dim(3) == k && w.dim(4) == k, "conv3d: kernel must be cubic");
  detail::check(stride >= 1 && padding >= 0, "conv3d: bad stride/padding");
  detail::check(b.rank() == 1 && b.dim(0) == cout, "conv3d: bias shape mismatch");
  const std::int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t OD = detail::conv_out_extent(D, k, stride, padding);
  const std::int64_t OH = detail::conv_out_extent(H, k, stride, padding);
  const std::int64_t OW = detail::conv_out_extent(W, k, stride, padding);
  detail::check(OD >= 1 && OH >= 1 && OW >= 1, "conv3d: empty output");

  Tensor<T> out({batch, cout, OD, OH, OW});
  const detail::PlaneGeom3 geom{OD, OH, OW, D, H, W, stride, padding};
  const std::int64_t in_plane = D * H * W, out_plane = OD * OH * OW;
  const std::int64_t wk = static_cast<std::int64_t>(k) * k * k;
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t co = 0; co < cout; ++co) {
      T* oplane = op + (n * cout + co) * out_plane;
      const T bias = b.values()[static_cast<std::size_t>(co)];
      for (std::int64_t i = 0; i < out_plane; ++i) oplane[i] = bias;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xplane = xp + (n * cin + ci) * in_plane;
        const T* wkernel = wp + (co * cin + ci) * wk;
        for (int kd = 0; kd < k; ++kd)
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw)
              detail::plane_gather3(geom, oplane, xplane, kd, kh, kw,
                                    wkernel[(kd * k + kh) * k + kw]);
      }
    }
  }

  if (grad_needed(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record("conv3d", {x, w, b}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dxplane = dx.data() + (n * cin + ci) * in_plane;
            for (std::int64_t co = 0; co < cout; ++co) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* wkernel = wc.values().data() + (co * cin + ci) * wk;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw)
                    detail::plane_scatter3(geom, doplane, dxplane, kd, kh, kw,
                                           wkernel[(kd * k + kh) * k + kw]);
            }
          }
      }
      if (wc.requires_grad()) {
        auto& dw = tp.adj(wc);
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dwkernel = dw.data() + (co * cin + ci) * wk;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* xplane = xc.values().data() + (n * cin + ci) * in_plane;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw)
                    dwkernel[(kd * k + kh) * k + kw] +=
                        detail::plane_dot3(geom, doplane, xplane, kd, kh, kw);
            }
          }
      }
      if (bc.requires_grad()) {
        auto& db = tp.adj(bc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T* doplane = dop + (n * cout + co) * out_plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < out_plane; ++i) acc += doplane[i];
            db[static_cast<std::size_t>(co)] += acc;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose3d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  detail::check(x.rank() == 5, "conv_transpose3d: input must be [N,C,D,H,W]");
  detail::check(w.rank() == 5, "conv_transpose3d: weight must be [Ci,Co,k,k,k]");
  const std::int64_t batch = x.dim(0), cin = x.dim(1);
  detail::check(w.dim(0) == cin, "conv_transpose3d: weight channel mismatch");
  const std::int64_t cout = w.dim(1);
  const int k = static_cast<int>(w.dim(2));
  detail::check(w.dim(3) == k && w.dim(4) == k,
                "conv_transpose3d: kernel must be cubic");
  detail::check(stride >= 1 && padding >= 0, "conv_transpose3d: bad stride/padding");
  detail::check(b.rank() == 1 && b.dim(0) == cout,
                "conv_transpose3d: bias shape mismatch");
  const std::int64_t D = x.dim(2), H = x.dim(3), W = x.dim(4);
  const std::int64_t OD = detail::tconv_out_extent(D, k, stride, padding);
  const std::int64_t OH = detail::tconv_out_extent(H, k, stride, padding);
  const std::int64_t OW = detail::tconv_out_extent(W, k, stride, padding);
  detail::check(OD >= 1 && OH >= 1 && OW >= 1, "conv_transpose3d: empty output");

  Tensor<T> out({batch, cout, OD, OH, OW});
  // The input is the strided (small) side; writes land on the output grid.
  const detail::PlaneGeom3 geom{D, H, W, OD, OH, OW, stride, padding};
  const std::int64_t in_plane = D * H * W, out_plane = OD * OH * OW;
  const std::int64_t wk = static_cast<std::int64_t>(k) * k * k;
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n) {
    for (std::int64_t co = 0; co < cout; ++co) {
      T* oplane = op + (n * cout + co) * out_plane;
      const T bias = b.values()[static_cast<std::size_t>(co)];
      for (std::int64_t i = 0; i < out_plane; ++i) oplane[i] = bias;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xplane = xp + (n * cin + ci) * in_plane;
        const T* wkernel = wp + (ci * cout + co) * wk;
        for (int kd = 0; kd < k; ++kd)
          for (int kh = 0; kh < k; ++kh)
            for (int kw = 0; kw < k; ++kw)
              detail::plane_scatter3(geom, xplane, oplane, kd, kh, kw,
                                     wkernel[(kd * k + kh) * k + kw]);
      }
    }
  }

  if (grad_needed(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record("conv_transpose3d", {x, w, b}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dxplane = dx.data() + (n * cin + ci) * in_plane;
            for (std::int64_t co = 0; co < cout; ++co) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* wkernel = wc.values().data() + (ci * cout + co) * wk;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw)
                    detail::plane_gather3(geom, dxplane, doplane, kd, kh, kw,
                                          wkernel[(kd * k + kh) * k + kw]);
            }
          }
      }
      if (wc.requires_grad()) {
        auto& dw = tp.adj(wc);
        for (std::int64_t ci = 0; ci < cin; ++ci)
          for (std::int64_t co = 0; co < cout; ++co) {
            T* dwkernel = dw.data() + (ci * cout + co) * wk;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* xplane = xc.values().data() + (n * cin + ci) * in_plane;
              const T* doplane = dop + (n * cout + co) * out_plane;
              for (int kd = 0; kd < k; ++kd)
                for (int kh = 0; kh < k; ++kh)
                  for (int kw = 0; kw < k; ++kw)
                    dwkernel[(kd * k + kh) * k + kw] +=
                        detail::plane_dot3(geom, xplane, doplane, kd, kh, kw);
            }
          }
      }
      if (bc.requires_grad()) {
        auto& db = tp.adj(bc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T* doplane = dop + (n * cout + co) * out_plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < out_plane; ++i) acc += doplane[i];
            db[static_cast<std::size_t>(co)] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// conv2d / conv_transpose2d: the plane kernels on a single depth plane.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w,
                 const Tensor<T>& b, int stride, int padding) {
  detail::check(x.rank() == 4, "conv2d: input must be [N,C,H,W]");
  detail::check(w.rank() == 4, "conv2d: weight must be [Co,Ci,k,k]");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  detail::check(w.dim(1) == cin, "conv2d: weight channel mismatch");
  const int k = static_cast<int>(w.dim(2));
  detail::check(w.dim(3) == k, "conv2d: kernel must be square");
  const std::int64_t H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = detail::conv_out_extent(H, k, stride, padding);
  const std::int64_t OW = detail::conv_out_extent(W, k, stride, padding);
  detail::check(OH >= 1 && OW >= 1, "conv2d: empty output");

  Tensor<T> out({batch, cout, OH, OW});
  const detail::PlaneGeom3 geom = detail::lift2d(OH, OW, H, W, stride, padding);
  const std::int64_t in_plane = H * W, out_plane = OH * OW;
  const std::int64_t wk = static_cast<std::int64_t>(k) * k;
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t co = 0; co < cout; ++co) {
      T* oplane = op + (n * cout + co) * out_plane;
      const T bias = b.values()[static_cast<std::size_t>(co)];
      for (std::int64_t i = 0; i < out_plane; ++i) oplane[i] = bias;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xplane = xp + (n * cin + ci) * in_plane;
        const T* wkernel = wp + (co * cin + ci) * wk;
        for (int kh = 0; kh < k; ++kh)
          for (int kw = 0; kw < k; ++kw)
            detail::plane_gather3(geom, oplane, xplane, padding, kh, kw,
                                  wkernel[kh * k + kw]);
      }
    }

  if (grad_needed(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record("conv2d", {x, w, b}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dxplane = dx.data() + (n * cin + ci) * in_plane;
            for (std::int64_t co = 0; co < cout; ++co) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* wkernel = wc.values().data() + (co * cin + ci) * wk;
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw)
                  detail::plane_scatter3(geom, doplane, dxplane, padding, kh, kw,
                                         wkernel[kh * k + kw]);
            }
          }
      }
      if (wc.requires_grad()) {
        auto& dw = tp.adj(wc);
        for (std::int64_t co = 0; co < cout; ++co)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dwkernel = dw.data() + (co * cin + ci) * wk;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* xplane = xc.values().data() + (n * cin + ci) * in_plane;
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw)
                  dwkernel[kh * k + kw] +=
                      detail::plane_dot3(geom, doplane, xplane, padding, kh, kw);
            }
          }
      }
      if (bc.requires_grad()) {
        auto& db = tp.adj(bc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T* doplane = dop + (n * cout + co) * out_plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < out_plane; ++i) acc += doplane[i];
            db[static_cast<std::size_t>(co)] += acc;
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> conv_transpose2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding) {
  detail::check(x.rank() == 4, "conv_transpose2d: input must be [N,C,H,W]");
  detail::check(w.rank() == 4, "conv_transpose2d: weight must be [Ci,Co,k,k]");
  const std::int64_t batch = x.dim(0), cin = x.dim(1);
  detail::check(w.dim(0) == cin, "conv_transpose2d: weight channel mismatch");
  const std::int64_t cout = w.dim(1);
  const int k = static_cast<int>(w.dim(2));
  detail::check(w.dim(3) == k, "conv_transpose2d: kernel must be square");
  const std::int64_t H = x.dim(2), W = x.dim(3);
  const std::int64_t OH = detail::tconv_out_extent(H, k, stride, padding);
  const std::int64_t OW = detail::tconv_out_extent(W, k, stride, padding);
  detail::check(OH >= 1 && OW >= 1, "conv_transpose2d: empty output");

  Tensor<T> out({batch, cout, OH, OW});
  const detail::PlaneGeom3 geom = detail::lift2d(H, W, OH, OW, stride, padding);
  const std::int64_t in_plane = H * W, out_plane = OH * OW;
  const std::int64_t wk = static_cast<std::int64_t>(k) * k;
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t co = 0; co < cout; ++co) {
      T* oplane = op + (n * cout + co) * out_plane;
      const T bias = b.values()[static_cast<std::size_t>(co)];
      for (std::int64_t i = 0; i < out_plane; ++i) oplane[i] = bias;
      for (std::int64_t ci = 0; ci < cin; ++ci) {
        const T* xplane = xp + (n * cin + ci) * in_plane;
        const T* wkernel = wp + (ci * cout + co) * wk;
        for (int kh = 0; kh < k; ++kh)
          for (int kw = 0; kw < k; ++kw)
            detail::plane_scatter3(geom, xplane, oplane, padding, kh, kw,
                                   wkernel[kh * k + kw]);
      }
    }

  if (grad_needed(tape, {&x, &w, &b})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, bc = b, oc = out;
    tape->record("conv_transpose2d", {x, w, b}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t ci = 0; ci < cin; ++ci) {
            T* dxplane = dx.data() + (n * cin + ci) * in_plane;
            for (std::int64_t co = 0; co < cout; ++co) {
              const T* doplane = dop + (n * cout + co) * out_plane;
              const T* wkernel = wc.values().data() + (ci * cout + co) * wk;
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw)
                  detail::plane_gather3(geom, dxplane, doplane, padding, kh, kw,
                                        wkernel[kh * k + kw]);
            }
          }
      }
      if (wc.requires_grad()) {
        auto& dw = tp.adj(wc);
        for (std::int64_t ci = 0; ci < cin; ++ci)
          for (std::int64_t co = 0; co < cout; ++co) {
            T* dwkernel = dw.data() + (ci * cout + co) * wk;
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* xplane = xc.values().data() + (n * cin + ci) * in_plane;
              const T* doplane = dop + (n * cout + co) * out_plane;
              for (int kh = 0; kh < k; ++kh)
                for (int kw = 0; kw < k; ++kw)
                  dwkernel[kh * k + kw] +=
                      detail::plane_dot3(geom, xplane, doplane, padding, kh, kw);
            }
          }
      }
      if (bc.requires_grad()) {
        auto& db = tp.adj(bc);
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T* doplane = dop + (n * cout + co) * out_plane;
            T acc = T(0);
            for (std::int64_t i = 0; i < out_plane; ++i) acc += doplane[i];
            db[static_cast<std::size_t>(co)] += acc;
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization. batch_norm reduces over batch and spatial axes per channel;
// instance_norm reduces over spatial axes per (sample, channel). Both accept
// any rank >= 3 in [N, C, spatial...] layout.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> batch_norm(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& gamma,
                     const Tensor<T>& beta, Tensor<T>& running_mean,
                     Tensor<T>& running_var, bool training, T eps = T(1e-5),
                     T momentum = T(0.1)) {
  detail::check(x.rank() >= 3, "batch_norm: input must be [N,C,spatial...]");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  detail::check(batch >= 1, "batch_norm: zero-size batch");
  detail::check(gamma.numel() == ch && beta.numel() == ch,
                "batch_norm: gamma/beta length must equal channels");
  detail::check(running_mean.numel() == ch && running_var.numel() == ch,
                "batch_norm: running stats length must equal channels");
  std::int64_t spatial = 1;
  for (int a = 2; a < x.rank(); ++a) spatial *= x.dim(a);
  const std::int64_t per_channel = batch * spatial;

  std::vector<T> mean(static_cast<std::size_t>(ch)),
      invstd(static_cast<std::size_t>(ch));
  const T* xp = x.values().data();
  if (training) {
    for (std::int64_t c = 0; c < ch; ++c) {
      T sum = T(0);
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* p = xp + (n * ch + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) sum += p[i];
      }
      const T mu = sum / static_cast<T>(per_channel);
      T var = T(0);
      for (std::int64_t n = 0; n < batch; ++n) {
        const T* p = xp + (n * ch + c) * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
          const T d = p[i] - mu;
          var += d * d;
        }
      }
      var /= static_cast<T>(per_channel);
      mean[static_cast<std::size_t>(c)] = mu;
      invstd[static_cast<std::size_t>(c)] = T(1) / std::sqrt(var + eps);
      // Running stats track the unbiased variance.
      const T unbiased = per_channel > 1
                             ? var * static_cast<T>(per_channel) /
                                   static_cast<T>(per_channel - 1)
                             : var;
      auto& rm = running_mean.values()[static_cast<std::size_t>(c)];
      auto& rv = running_var.values()[static_cast<std::size_t>(c)];
      rm = (T(1) - momentum) * rm + momentum * mu;
      rv = (T(1) - momentum) * rv + momentum * unbiased;
    }
  } else {
    for (std::int64_t c = 0; c < ch; ++c) {
      mean[static_cast<std::size_t>(c)] =
          running_mean.values()[static_cast<std::size_t>(c)];
      invstd[static_cast<std::size_t>(c)] =
          T(1) / std::sqrt(running_var.values()[static_cast<std::size_t>(c)] + eps);
    }
  }

  Tensor<T> out(x.shape());
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t c = 0; c < ch; ++c) {
      const T mu = mean[static_cast<std::size_t>(c)];
      const T is = invstd[static_cast<std::size_t>(c)];
      const T g = gamma.values()[static_cast<std::size_t>(c)];
      const T bt = beta.values()[static_cast<std::size_t>(c)];
      const T* p = xp + (n * ch + c) * spatial;
      T* q = op + (n * ch + c) * spatial;
      for (std::int64_t i = 0; i < spatial; ++i)
        q[i] = (p[i] - mu) * is * g + bt;
    }

  if (grad_needed(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    tape->record("batch_norm", {x, gamma, beta}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      const T* xv = xc.values().data();
      for (std::int64_t c = 0; c < ch; ++c) {
        const T mu = mean[static_cast<std::size_t>(c)];
        const T is = invstd[static_cast<std::size_t>(c)];
        const T g = gc.values()[static_cast<std::size_t>(c)];
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::int64_t n = 0; n < batch; ++n) {
          const T* dy = dop + (n * ch + c) * spatial;
          const T* p = xv + (n * ch + c) * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            sum_dy += dy[i];
            sum_dy_xhat += dy[i] * (p[i] - mu) * is;
          }
        }
        if (gc.requires_grad()) tp.adj(gc)[static_cast<std::size_t>(c)] += sum_dy_xhat;
        if (bc.requires_grad()) tp.adj(bc)[static_cast<std::size_t>(c)] += sum_dy;
        if (xc.requires_grad()) {
          auto& dx = tp.adj(xc);
          if (training) {
            const T inv_m = T(1) / static_cast<T>(per_channel);
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* dy = dop + (n * ch + c) * spatial;
              const T* p = xv + (n * ch + c) * spatial;
              T* dxp = dx.data() + (n * ch + c) * spatial;
              for (std::int64_t i = 0; i < spatial; ++i) {
                const T xhat = (p[i] - mu) * is;
                dxp[i] += g * is *
                          (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
              }
            }
          } else {
            for (std::int64_t n = 0; n < batch; ++n) {
              const T* dy = dop + (n * ch + c) * spatial;
              T* dxp = dx.data() + (n * ch + c) * spatial;
              for (std::int64_t i = 0; i < spatial; ++i) dxp[i] += g * is * dy[i];
            }
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> instance_norm(Tape<T>* tape, const Tensor<T>& x,
                        const Tensor<T>& gamma, const Tensor<T>& beta,
                        T eps = T(1e-5)) {
  detail::check(x.rank() >= 3, "instance_norm: input must be [N,C,spatial...]");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  detail::check(gamma.numel() == ch && beta.numel() == ch,
                "instance_norm: gamma/beta length must equal channels");
  std::int64_t spatial = 1;
  for (int a = 2; a < x.rank(); ++a) spatial *= x.dim(a);
  detail::check(spatial >= 1, "instance_norm: empty spatial extent");

  const std::int64_t groups = batch * ch;
  std::vector<T> mean(static_cast<std::size_t>(groups)),
      invstd(static_cast<std::size_t>(groups));
  const T* xp = x.values().data();
  for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
    const T* p = xp + gidx * spatial;
    T sum = T(0);
    for (std::int64_t i = 0; i < spatial; ++i) sum += p[i];
    const T mu = sum / static_cast<T>(spatial);
    T var = T(0);
    for (std::int64_t i = 0; i < spatial; ++i) {
      const T d = p[i] - mu;
      var += d * d;
    }
    var /= static_cast<T>(spatial);
    mean[static_cast<std::size_t>(gidx)] = mu;
    invstd[static_cast<std::size_t>(gidx)] = T(1) / std::sqrt(var + eps);
  }

  Tensor<T> out(x.shape());
  T* op = out.values().data();
  for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
    const std::int64_t c = gidx % ch;
    const T mu = mean[static_cast<std::size_t>(gidx)];
    const T is = invstd[static_cast<std::size_t>(gidx)];
    const T g = gamma.values()[static_cast<std::size_t>(c)];
    const T bt = beta.values()[static_cast<std::size_t>(c)];
    const T* p = xp + gidx * spatial;
    T* q = op + gidx * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) q[i] = (p[i] - mu) * is * g + bt;
  }

  if (grad_needed(tape, {&x, &gamma, &beta})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gamma, bc = beta, oc = out;
    tape->record("instance_norm", {x, gamma, beta}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      const T* dop = dout.data();
      const T* xv = xc.values().data();
      const T inv_m = T(1) / static_cast<T>(spatial);
      for (std::int64_t gidx = 0; gidx < groups; ++gidx) {
        const std::int64_t c = gidx % ch;
        const T mu = mean[static_cast<std::size_t>(gidx)];
        const T is = invstd[static_cast<std::size_t>(gidx)];
        const T g = gc.values()[static_cast<std::size_t>(c)];
        const T* dy = dop + gidx * spatial;
        const T* p = xv + gidx * spatial;
        T sum_dy = T(0), sum_dy_xhat = T(0);
        for (std::int64_t i = 0; i < spatial; ++i) {
          sum_dy += dy[i];
          sum_dy_xhat += dy[i] * (p[i] - mu) * is;
        }
        if (gc.requires_grad()) tp.adj(gc)[static_cast<std::size_t>(c)] += sum_dy_xhat;
        if (bc.requires_grad()) tp.adj(bc)[static_cast<std::size_t>(c)] += sum_dy;
        if (xc.requires_grad()) {
          T* dxp = tp.adj(xc).data() + gidx * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) {
            const T xhat = (p[i] - mu) * is;
            dxp[i] += g * is *
                      (dy[i] - sum_dy * inv_m - xhat * sum_dy_xhat * inv_m);
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Element-wise ops.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.values().data();
  T* q = out.values().data();
  const std::size_t n = x.values().size();
  for (std::size_t i = 0; i < n; ++i) q[i] = p[i] > T(0) ? p[i] : T(0);
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("relu", {x}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      auto& dx = tp.adj(xc);
      const T* xv = xc.values().data();
      // Subgradient 0 at the kink.
      for (std::size_t i = 0; i < dx.size(); ++i)
        if (xv[i] > T(0)) dx[i] += dout[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(Tape<T>* tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  const T* p = x.values().data();
  T* q = out.values().data();
  const std::size_t n = x.values().size();
  for (std::size_t i = 0; i < n; ++i) q[i] = T(1) / (T(1) + std::exp(-p[i]));
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("sigmoid", {x}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      auto& dx = tp.adj(xc);
      const T* y = oc.values().data();
      for (std::size_t i = 0; i < dx.size(); ++i)
        dx[i] += dout[i] * y[i] * (T(1) - y[i]);
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(Tape<T>* tape, const Tensor<T>& a, const Tensor<T>& b) {
  detail::check(a.same_shape(b), "add: shape mismatch");
  Tensor<T> out(a.shape());
  const T* pa = a.values().data();
  const T* pb = b.values().data();
  T* q = out.values().data();
  const std::size_t n = a.values().size();
  for (std::size_t i = 0; i < n; ++i) q[i] = pa[i] + pb[i];
  if (grad_needed(tape, {&a, &b})) {
    out.set_requires_grad(true);
    Tensor<T> ac = a, bc = b, oc = out;
    tape->record("add", {a, b}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      if (ac.requires_grad()) {
        auto& da = tp.adj(ac);
        for (std::size_t i = 0; i < da.size(); ++i) da[i] += dout[i];
      }
      if (bc.requires_grad()) {
        auto& db = tp.adj(bc);
        for (std::size_t i = 0; i < db.size(); ++i) db[i] += dout[i];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation building blocks.
// ---------------------------------------------------------------------------

/// y[n,co] = sum_ci x[n,ci] * w[co,ci]
template <typename T>
Tensor<T> linear(Tape<T>* tape, const Tensor<T>& x, const Tensor<T>& w) {
  detail::check(x.rank() == 2, "linear: input must be [N,C]");
  detail::check(w.rank() == 2, "linear: weight must be [Co,Ci]");
  const std::int64_t batch = x.dim(0), cin = x.dim(1), cout = w.dim(0);
  detail::check(w.dim(1) == cin, "linear: weight shape mismatch");
  Tensor<T> out({batch, cout});
  const T* xp = x.values().data();
  const T* wp = w.values().data();
  T* op = out.values().data();
  for (std::int64_t n = 0; n < batch; ++n)
    for (std::int64_t co = 0; co < cout; ++co) {
      T acc = T(0);
      for (std::int64_t ci = 0; ci < cin; ++ci)
        acc += xp[n * cin + ci] * wp[co * cin + ci];
      op[n * cout + co] = acc;
    }
  if (grad_needed(tape, {&x, &w})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, wc = w, oc = out;
    tape->record("linear", {x, w}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        const T* wp2 = wc.values().data();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T dy = dout[static_cast<std::size_t>(n * cout + co)];
            for (std::int64_t ci = 0; ci < cin; ++ci)
              dx[static_cast<std::size_t>(n * cin + ci)] += dy * wp2[co * cin + ci];
          }
      }
      if (wc.requires_grad()) {
        auto& dw = tp.adj(wc);
        const T* xp2 = xc.values().data();
        for (std::int64_t n = 0; n < batch; ++n)
          for (std::int64_t co = 0; co < cout; ++co) {
            const T dy = dout[static_cast<std::size_t>(n * cout + co)];
            for (std::int64_t ci = 0; ci < cin; ++ci)
              dw[static_cast<std::size_t>(co * cin + ci)] += dy * xp2[n * cin + ci];
          }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> global_avg_pool2d(Tape<T>* tape, const Tensor<T>& x) {
  detail::check(x.rank() == 4, "global_avg_pool2d: input must be [N,C,H,W]");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  const std::int64_t spatial = x.dim(2) * x.dim(3);
  Tensor<T> out({batch, ch});
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t g = 0; g < batch * ch; ++g) {
    T acc = T(0);
    const T* p = xp + g * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) acc += p[i];
    op[g] = acc / static_cast<T>(spatial);
  }
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("global_avg_pool2d", {x}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      auto& dx = tp.adj(xc);
      const T inv = T(1) / static_cast<T>(spatial);
      for (std::int64_t g = 0; g < batch * ch; ++g) {
        const T dy = dout[static_cast<std::size_t>(g)] * inv;
        T* p = dx.data() + g * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) p[i] += dy;
      }
    });
  }
  return out;
}

/// y[n,c,h,w] = x[n,c,h,w] * gate[n,c]
template <typename T>
Tensor<T> scale_channels2d(Tape<T>* tape, const Tensor<T>& x,
                           const Tensor<T>& gate) {
  detail::check(x.rank() == 4, "scale_channels2d: input must be [N,C,H,W]");
  detail::check(gate.rank() == 2 && gate.dim(0) == x.dim(0) &&
                    gate.dim(1) == x.dim(1),
                "scale_channels2d: gate must be [N,C]");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  const std::int64_t spatial = x.dim(2) * x.dim(3);
  Tensor<T> out(x.shape());
  const T* xp = x.values().data();
  const T* gp = gate.values().data();
  T* op = out.values().data();
  for (std::int64_t g = 0; g < batch * ch; ++g) {
    const T gv = gp[g];
    const T* p = xp + g * spatial;
    T* q = op + g * spatial;
    for (std::int64_t i = 0; i < spatial; ++i) q[i] = p[i] * gv;
  }
  if (grad_needed(tape, {&x, &gate})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, gc = gate, oc = out;
    tape->record("scale_channels2d", {x, gate}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      if (xc.requires_grad()) {
        auto& dx = tp.adj(xc);
        const T* gp2 = gc.values().data();
        for (std::int64_t g = 0; g < batch * ch; ++g) {
          const T gv = gp2[g];
          const T* dy = dout.data() + g * spatial;
          T* p = dx.data() + g * spatial;
          for (std::int64_t i = 0; i < spatial; ++i) p[i] += dy[i] * gv;
        }
      }
      if (gc.requires_grad()) {
        auto& dg = tp.adj(gc);
        const T* xv = xc.values().data();
        for (std::int64_t g = 0; g < batch * ch; ++g) {
          const T* dy = dout.data() + g * spatial;
          const T* p = xv + g * spatial;
          T acc = T(0);
          for (std::int64_t i = 0; i < spatial; ++i) acc += dy[i] * p[i];
          dg[static_cast<std::size_t>(g)] += acc;
        }
      }
    });
  }
  return out;
}

/// Channel attention: global pool -> w1 -> relu -> w2 -> sigmoid -> gate.
/// w1 is [C/r, C] and w2 is [C, C/r]; no biases.
template <typename T>
Tensor<T> squeeze_excitation(Tape<T>* tape, const Tensor<T>& x,
                             const Tensor<T>& w1, const Tensor<T>& w2) {
  detail::check(x.rank() == 4, "squeeze_excitation: input must be [N,C,H,W]");
  const std::int64_t ch = x.dim(1);
  detail::check(w1.rank() == 2 && w1.dim(1) == ch,
                "squeeze_excitation: w1 must be [C/r, C]");
  const std::int64_t reduced = w1.dim(0);
  detail::check(reduced >= 1 && ch % reduced == 0,
                "squeeze_excitation: reduction must divide channels");
  detail::check(w2.rank() == 2 && w2.dim(0) == ch && w2.dim(1) == reduced,
                "squeeze_excitation: w2 must be [C, C/r]");
  Tensor<T> pooled = global_avg_pool2d(tape, x);
  Tensor<T> hidden = relu(tape, linear(tape, pooled, w1));
  Tensor<T> gate = sigmoid(tape, linear(tape, hidden, w2));
  return scale_channels2d(tape, x, gate);
}

// ---------------------------------------------------------------------------
// Nearest-neighbor resampling with half-pixel centering. The gradient of an
// output cell accumulates into its source cell.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> nn_resample2d(Tape<T>* tape, const Tensor<T>& x, std::int64_t th,
                        std::int64_t tw) {
  detail::check(x.rank() == 4, "nn_resample2d: input must be [N,C,H,W]");
  detail::check(th >= 1 && tw >= 1, "nn_resample2d: empty target");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  const std::int64_t H = x.dim(2), W = x.dim(3);
  std::vector<std::int64_t> src_h(static_cast<std::size_t>(th)),
      src_w(static_cast<std::size_t>(tw));
  for (std::int64_t i = 0; i < th; ++i)
    src_h[static_cast<std::size_t>(i)] = (2 * i + 1) * H / (2 * th);
  for (std::int64_t j = 0; j < tw; ++j)
    src_w[static_cast<std::size_t>(j)] = (2 * j + 1) * W / (2 * tw);

  Tensor<T> out({batch, ch, th, tw});
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t g = 0; g < batch * ch; ++g) {
    const T* p = xp + g * H * W;
    T* q = op + g * th * tw;
    for (std::int64_t i = 0; i < th; ++i) {
      const T* row = p + src_h[static_cast<std::size_t>(i)] * W;
      T* orow = q + i * tw;
      for (std::int64_t j = 0; j < tw; ++j)
        orow[j] = row[src_w[static_cast<std::size_t>(j)]];
    }
  }
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("nn_resample2d", {x}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      auto& dx = tp.adj(xc);
      for (std::int64_t g = 0; g < batch * ch; ++g) {
        T* p = dx.data() + g * H * W;
        const T* dy = dout.data() + g * th * tw;
        for (std::int64_t i = 0; i < th; ++i) {
          T* row = p + src_h[static_cast<std::size_t>(i)] * W;
          const T* dyrow = dy + i * tw;
          for (std::int64_t j = 0; j < tw; ++j)
            row[src_w[static_cast<std::size_t>(j)]] += dyrow[j];
        }
      }
    });
  }
  return out;
}

/// Upsample-only contract: the target may not shrink either axis.
template <typename T>
Tensor<T> nn_upsample2d(Tape<T>* tape, const Tensor<T>& x, std::int64_t th,
                        std::int64_t tw) {
  detail::check(x.rank() == 4, "nn_upsample2d: input must be [N,C,H,W]");
  detail::check(th >= x.dim(2) && tw >= x.dim(3),
                "nn_upsample2d: target smaller than input");
  return nn_resample2d(tape, x, th, tw);
}

// ---------------------------------------------------------------------------
// Losses and reductions.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> l1_loss(Tape<T>* tape, const Tensor<T>& pred, const Tensor<T>& target,
                  Reduction reduction) {
  detail::check(pred.same_shape(target), "l1_loss: shape mismatch");
  const T* pp = pred.values().data();
  const T* tp_ = target.values().data();
  const std::size_t n = pred.values().size();
  T acc = T(0);
  for (std::size_t i = 0; i < n; ++i) acc += std::abs(pp[i] - tp_[i]);
  const T scale =
      reduction == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
  Tensor<T> out = Tensor<T>::scalar(acc * scale);
  if (grad_needed(tape, {&pred, &target})) {
    out.set_requires_grad(true);
    Tensor<T> pc = pred, tc = target, oc = out;
    tape->record("l1_loss", {pred, target}, out, [=](Tape<T>& tp2) mutable {
      const T dy = tp2.adj(oc)[0] * scale;
      const T* pv = pc.values().data();
      const T* tv = tc.values().data();
      // sign(0) = 0 by the subgradient convention.
      if (pc.requires_grad()) {
        auto& dp = tp2.adj(pc);
        for (std::size_t i = 0; i < dp.size(); ++i) {
          const T d = pv[i] - tv[i];
          dp[i] += d > T(0) ? dy : (d < T(0) ? -dy : T(0));
        }
      }
      if (tc.requires_grad()) {
        auto& dt = tp2.adj(tc);
        for (std::size_t i = 0; i < dt.size(); ++i) {
          const T d = pv[i] - tv[i];
          dt[i] -= d > T(0) ? dy : (d < T(0) ? -dy : T(0));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(Tape<T>* tape, const Tensor<T>& x) {
  const T* p = x.values().data();
  T acc = T(0);
  for (std::size_t i = 0; i < x.values().size(); ++i) acc += p[i];
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("sum_all", {x}, out, [=](Tape<T>& tp) mutable {
      const T dy = tp.adj(oc)[0];
      auto& dx = tp.adj(xc);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += dy;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

/// Extracts depth plane d of a [N,C,D,H,W] tensor as [N,C,H,W].
template <typename T>
Tensor<T> slice_depth(Tape<T>* tape, const Tensor<T>& x, std::int64_t d) {
  detail::check(x.rank() == 5, "slice_depth: input must be [N,C,D,H,W]");
  detail::check(d >= 0 && d < x.dim(2), "slice_depth: depth index out of range");
  const std::int64_t batch = x.dim(0), ch = x.dim(1);
  const std::int64_t D = x.dim(2), plane = x.dim(3) * x.dim(4);
  Tensor<T> out({batch, ch, x.dim(3), x.dim(4)});
  const T* xp = x.values().data();
  T* op = out.values().data();
  for (std::int64_t g = 0; g < batch * ch; ++g) {
    const T* p = xp + (g * D + d) * plane;
    T* q = op + g * plane;
    for (std::int64_t i = 0; i < plane; ++i) q[i] = p[i];
  }
  if (grad_needed(tape, {&x})) {
    out.set_requires_grad(true);
    Tensor<T> xc = x, oc = out;
    tape->record("slice_depth", {x}, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      auto& dx = tp.adj(xc);
      for (std::int64_t g = 0; g < batch * ch; ++g) {
        T* p = dx.data() + (g * D + d) * plane;
        const T* dy = dout.data() + g * plane;
        for (std::int64_t i = 0; i < plane; ++i) p[i] += dy[i];
      }
    });
  }
  return out;
}

/// Concatenates tensors along an axis; all other extents must agree.
template <typename T>
Tensor<T> concat(Tape<T>* tape, const std::vector<Tensor<T>>& xs, int axis) {
  detail::check(!xs.empty(), "concat: needs at least one tensor");
  const int rank = xs[0].rank();
  detail::check(axis >= 0 && axis < rank, "concat: axis out of range");
  std::int64_t axis_total = 0;
  for (const auto& t : xs) {
    detail::check(t.rank() == rank, "concat: rank mismatch");
    for (int a = 0; a < rank; ++a)
      if (a != axis)
        detail::check(t.dim(a) == xs[0].dim(a), "concat: extent mismatch");
    axis_total += t.dim(axis);
  }
  std::vector<std::int64_t> shape = xs[0].shape();
  shape[static_cast<std::size_t>(axis)] = axis_total;
  Tensor<T> out(shape);

  std::int64_t outer = 1, inner = 1;
  for (int a = 0; a < axis; ++a) outer *= shape[static_cast<std::size_t>(a)];
  for (int a = axis + 1; a < rank; ++a) inner *= shape[static_cast<std::size_t>(a)];

  T* op = out.values().data();
  const std::int64_t out_stride = axis_total * inner;
  std::int64_t offset = 0;
  for (const auto& t : xs) {
    const std::int64_t block = t.dim(axis) * inner;
    const T* p = t.values().data();
    for (std::int64_t o = 0; o < outer; ++o) {
      T* dst = op + o * out_stride + offset;
      const T* src = p + o * block;
      for (std::int64_t i = 0; i < block; ++i) dst[i] = src[i];
    }
    offset += block;
  }

  bool any_grad = false;
  for (const auto& t : xs) any_grad |= t.requires_grad();
  if (tape && any_grad) {
    out.set_requires_grad(true);
    std::vector<Tensor<T>> xsc = xs;
    Tensor<T> oc = out;
    tape->record("concat", xs, out, [=](Tape<T>& tp) mutable {
      const auto& dout = tp.adj(oc);
      std::int64_t off = 0;
      for (auto& t : xsc) {
        const std::int64_t block = t.dim(axis) * inner;
        if (t.requires_grad()) {
          auto& dt = tp.adj(t);
          for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = dout.data() + o * out_stride + off;
            T* dst = dt.data() + o * block;
            for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        off += block;
      }
    });
  }
  return out;
}

}  // namespace crania
