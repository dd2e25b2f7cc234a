#include "lightdarts/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>

#include "lightdarts/error.hpp"

namespace lightdarts {
namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMatrix>;
using MutMap = Eigen::Map<RowMatrix>;

void require_rank(const Var& x, std::size_t rank, const char* op) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " input, got shape " +
                     shape_string(x.shape()));
  }
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
}

void accumulate(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

struct ConvGeometry {
  std::size_t n, c, h, w;       // input
  std::size_t co, cig, kh, kw;  // kernel
  std::size_t ho, wo;           // output
  Conv2dOptions opt;

  // Each padded input plane is split into stride x stride phase planes of
  // hq x wq, so every tap reads a contiguous run of a single phase plane.
  std::size_t hq() const { return (h + 2 * opt.padding + opt.stride - 1) / opt.stride; }
  std::size_t wq() const { return (w + 2 * opt.padding + opt.stride - 1) / opt.stride; }
  std::size_t phase_plane() const { return hq() * wq(); }
  std::size_t plane_block() const { return opt.stride * opt.stride * phase_plane(); }
  // Outputs are computed on rows of width wq; columns >= wo are discarded.
  std::size_t wide_length() const { return (ho - 1) * wq() + wo; }

  std::size_t tap_offset(std::size_t ki, std::size_t kj) const {
    const std::size_t s = opt.stride, r = ki * opt.dilation, q = kj * opt.dilation;
    return ((r % s) * s + q % s) * phase_plane() + (r / s) * wq() + q / s;
  }
};

// Phase planes of every input channel of sample n.
void phase_planes(const Tensor& x, const ConvGeometry& g, std::size_t n, std::vector<double>& out) {
  const std::size_t s = g.opt.stride, p = g.opt.padding, wq = g.wq();
  out.assign(g.c * g.plane_block(), 0.0);
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* src = x.data() + (n * g.c + ch) * g.h * g.w;
    double* block = out.data() + ch * g.plane_block();
    if (s == 1) {
      for (std::size_t i = 0; i < g.h; ++i) std::copy_n(src + i * g.w, g.w, block + (i + p) * wq + p);
      continue;
    }
    for (std::size_t i = 0; i < g.h; ++i) {
      const std::size_t pi = i + p;
      double* row = block + ((pi % s) * s) * g.phase_plane() + (pi / s) * wq;
      for (std::size_t j = 0; j < g.w; ++j) {
        const std::size_t pj = j + p;
        row[(pj % s) * g.phase_plane() + pj / s] = src[i * g.w + j];
      }
    }
  }
}

// Dot product with eight fixed partial sums, so the loop vectorizes while the
// result stays independent of the instruction set.
double lane_dot(const double* a, const double* b, std::size_t len) {
  constexpr std::size_t kLanes = 8;
  using Lanes = Eigen::Array<double, kLanes, 1>;
  Lanes lanes = Lanes::Zero();
  std::size_t i = 0;
  for (; i + kLanes <= len; i += kLanes) lanes += Eigen::Map<const Lanes>(a + i) * Eigen::Map<const Lanes>(b + i);
  for (std::size_t l = 0; i + l < len; ++l) lanes[l] += a[i + l] * b[i + l];
  double acc = 0.0;
  for (std::size_t l = 0; l < kLanes; ++l) acc += lanes[l];
  return acc;
}

// acc[i] += sum_t weights[t] * sources[t][i] for i < len. Works on blocks of
// outputs so the partial sums stay in registers across all terms; each output
// still sums its terms in index order.
void blocked_mac(double* acc, std::size_t len, const double* const* sources, const double* weights,
                 std::size_t count) {
  constexpr std::size_t kBlock = 16;
  using Block = Eigen::Array<double, kBlock, 1>;
  std::size_t i0 = 0;
  for (; i0 + kBlock <= len; i0 += kBlock) {
    Block r = Eigen::Map<const Block>(acc + i0);
    for (std::size_t t = 0; t < count; ++t) r += weights[t] * Eigen::Map<const Block>(sources[t] + i0);
    Eigen::Map<Block>(acc + i0) = r;
  }
  for (std::size_t i = i0; i < len; ++i) {
    double r = acc[i];
    for (std::size_t t = 0; t < count; ++t) r += weights[t] * sources[t][i];
    acc[i] = r;
  }
}

// Scratch buffers reused across calls; the tape is single-threaded.
std::vector<double>& conv_scratch(std::size_t slot) {
  thread_local std::vector<double> buffers[3];
  return buffers[slot];
}

// Inverse of phase_planes for gradients: accumulates the interior into dx.
void unphase_add(const std::vector<double>& phased, const ConvGeometry& g, std::size_t n, Tensor& dx) {
  const std::size_t s = g.opt.stride, p = g.opt.padding, wq = g.wq();
  for (std::size_t ch = 0; ch < g.c; ++ch) {
    const double* block = phased.data() + ch * g.plane_block();
    double* dst = dx.data() + (n * g.c + ch) * g.h * g.w;
    if (s == 1) {
      for (std::size_t i = 0; i < g.h; ++i) {
        const double* row = block + (i + p) * wq + p;
        for (std::size_t j = 0; j < g.w; ++j) dst[i * g.w + j] += row[j];
      }
      continue;
    }
    for (std::size_t i = 0; i < g.h; ++i) {
      const std::size_t pi = i + p;
      const double* row = block + ((pi % s) * s) * g.phase_plane() + (pi / s) * wq;
      for (std::size_t j = 0; j < g.w; ++j) {
        const std::size_t pj = j + p;
        dst[i * g.w + j] += row[(pj % s) * g.phase_plane() + pj / s];
      }
    }
  }
}

}  // namespace

std::size_t conv_output_size(std::size_t in, std::size_t kernel, const Conv2dOptions& opt) {
  const std::size_t span = opt.dilation * (kernel - 1) + 1;
  if (in + 2 * opt.padding < span) return 0;
  return (in + 2 * opt.padding - span) / opt.stride + 1;
}

Var conv2d(Var input, Var kernel, const Conv2dOptions& opt) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d kernel");
  if (opt.stride < 1 || opt.dilation < 1 || opt.groups < 1) {
    throw ShapeError("conv2d: stride, dilation and groups must be >= 1");
  }
  const Tensor& x = input.value();
  const Tensor& k = kernel.value();
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), k.dim(0), k.dim(1), k.dim(2), k.dim(3), 0, 0, opt};
  if (g.c % opt.groups != 0 || g.co % opt.groups != 0) {
    throw ShapeError("conv2d: input channels " + std::to_string(g.c) + " and output channels " +
                     std::to_string(g.co) + " must both be divisible by groups " + std::to_string(opt.groups));
  }
  if (g.cig != g.c / opt.groups) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(g.cig) + " input channels per group, input " +
                     shape_string(x.shape()) + " with groups " + std::to_string(opt.groups) + " provides " +
                     std::to_string(g.c / opt.groups));
  }
  g.ho = conv_output_size(g.h, g.kh, opt);
  g.wo = conv_output_size(g.w, g.kw, opt);
  if (g.ho == 0 || g.wo == 0) {
    throw ShapeError("conv2d: kernel " + shape_string(k.shape()) + " does not fit input " + shape_string(x.shape()));
  }

  const std::size_t in_plane = g.h * g.w;
  const std::size_t out_plane = g.ho * g.wo;
  const std::size_t cog = g.co / opt.groups;
  const bool pointwise = g.kh == 1 && g.kw == 1 && opt.padding == 0 && opt.stride == 1 && opt.groups == 1;

  Tensor out = Tensor::uninitialized({g.n, g.co, g.ho, g.wo});
  if (pointwise) {
    ConstMap km(k.data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(g.c));
    for (std::size_t n = 0; n < g.n; ++n) {
      ConstMap xm(x.data() + n * g.c * in_plane, static_cast<Eigen::Index>(g.c), static_cast<Eigen::Index>(in_plane));
      MutMap om(out.data() + n * g.co * out_plane, static_cast<Eigen::Index>(g.co),
                static_cast<Eigen::Index>(out_plane));
      om.noalias() = km * xm;
    }
  } else {
    std::vector<double>& phased = conv_scratch(0);
    std::vector<double>& wide = conv_scratch(2);
    const std::size_t len = g.wide_length(), wq = g.wq(), taps = g.kh * g.kw;
    std::vector<std::size_t> offsets(taps);
    for (std::size_t t = 0; t < taps; ++t) offsets[t] = g.tap_offset(t / g.kw, t % g.kw);
    std::vector<const double*> sources(g.cig * taps);
    wide.resize(len);
    for (std::size_t n = 0; n < g.n; ++n) {
      phase_planes(x, g, n, phased);
      for (std::size_t oc = 0; oc < g.co; ++oc) {
        const std::size_t grp = oc / cog;
        for (std::size_t ci = 0; ci < g.cig; ++ci) {
          const double* block = phased.data() + (grp * g.cig + ci) * g.plane_block();
          for (std::size_t t = 0; t < taps; ++t) sources[ci * taps + t] = block + offsets[t];
        }
        std::fill(wide.begin(), wide.end(), 0.0);
        blocked_mac(wide.data(), len, sources.data(), k.data() + oc * g.cig * taps, g.cig * taps);
        double* op = out.data() + (n * g.co + oc) * out_plane;
        for (std::size_t oh = 0; oh < g.ho; ++oh) std::copy_n(wide.data() + oh * wq, g.wo, op + oh * g.wo);
      }
    }
  }

  const Tensor* xin = &x;
  const Tensor* kin = &k;
  return input.tape().record(
      std::move(out), {input, kernel},
      [g, xin, kin, pointwise, in_plane, out_plane, cog](const Tensor& dy, std::span<Tensor* const> grads) {
        Tensor* dx = grads[0];
        Tensor* dk = grads[1];
        if (pointwise) {
          ConstMap km(kin->data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(g.c));
          for (std::size_t n = 0; n < g.n; ++n) {
            ConstMap dym(dy.data() + n * g.co * out_plane, static_cast<Eigen::Index>(g.co),
                         static_cast<Eigen::Index>(out_plane));
            if (dx) {
              MutMap dxm(dx->data() + n * g.c * in_plane, static_cast<Eigen::Index>(g.c),
                         static_cast<Eigen::Index>(in_plane));
              dxm.noalias() += km.transpose() * dym;
            }
            if (dk) {
              ConstMap xm(xin->data() + n * g.c * in_plane, static_cast<Eigen::Index>(g.c),
                          static_cast<Eigen::Index>(in_plane));
              MutMap dkm(dk->data(), static_cast<Eigen::Index>(g.co), static_cast<Eigen::Index>(g.c));
              dkm.noalias() += dym * xm.transpose();
            }
          }
          return;
        }
        if (!dx && !dk) return;
        std::vector<double>& phased = conv_scratch(0);
        std::vector<double>& phased_grad = conv_scratch(1);
        std::vector<double>& go_ext = conv_scratch(2);
        const std::size_t len = g.wide_length(), wq = g.wq(), taps = g.kh * g.kw, pp = g.phase_plane();
        const std::size_t phases = g.opt.stride * g.opt.stride;
        std::vector<std::size_t> offsets(taps);
        std::size_t lead = 0;
        for (std::size_t t = 0; t < taps; ++t) {
          offsets[t] = g.tap_offset(t / g.kw, t % g.kw);
          lead = std::max(lead, offsets[t] % pp);
        }
        // The input gradient is gathered per phase plane:
        // grad[j] += sum_t w_t * go[j - offset_t], with go zero-extended by
        // `lead` on the left so every shifted read stays in bounds.
        std::vector<std::vector<std::size_t>> phase_taps(phases);
        for (std::size_t t = 0; t < taps; ++t) phase_taps[offsets[t] / pp].push_back(t);
        std::vector<const double*> sources(taps);
        std::vector<double> weights(taps);
        go_ext.assign(lead + std::max(pp, len), 0.0);
        double* go = go_ext.data() + lead;
        for (std::size_t n = 0; n < g.n; ++n) {
          if (dk) phase_planes(*xin, g, n, phased);
          if (dx) phased_grad.assign(g.c * g.plane_block(), 0.0);
          for (std::size_t oc = 0; oc < g.co; ++oc) {
            const std::size_t grp = oc / cog;
            const double* gp = dy.data() + (n * g.co + oc) * out_plane;
            for (std::size_t oh = 0; oh < g.ho; ++oh) std::copy_n(gp + oh * g.wo, g.wo, go + oh * wq);
            for (std::size_t ci = 0; ci < g.cig; ++ci) {
              const std::size_t block = (grp * g.cig + ci) * g.plane_block();
              const std::size_t k_offset = (oc * g.cig + ci) * taps;
              if (dk) {
                for (std::size_t t = 0; t < taps; ++t) {
                  (*dk)[k_offset + t] += lane_dot(go, phased.data() + block + offsets[t], len);
                }
              }
              if (!dx) continue;
              for (std::size_t ph = 0; ph < phases; ++ph) {
                const std::vector<std::size_t>& list = phase_taps[ph];
                if (list.empty()) continue;
                for (std::size_t i = 0; i < list.size(); ++i) {
                  sources[i] = go - offsets[list[i]] % pp;
                  weights[i] = (*kin)[k_offset + list[i]];
                }
                blocked_mac(phased_grad.data() + block + ph * pp, pp, sources.data(), weights.data(), list.size());
              }
            }
          }
          if (dx) unphase_add(phased_grad, g, n, *dx);
        }
      });
}

Var pool2d(Var input, PoolKind kind, std::size_t window, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "pool2d");
  if (window < 1 || stride < 1 || padding >= window) {
    throw ShapeError("pool2d: need window >= 1, stride >= 1 and padding < window");
  }
  const Tensor& x = input.value();
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Conv2dOptions geom{stride, padding, 1, 1};
  const std::size_t ho = conv_output_size(h, window, geom);
  const std::size_t wo = conv_output_size(w, window, geom);
  if (ho == 0 || wo == 0) throw ShapeError("pool2d: window does not fit input " + shape_string(x.shape()));

  Tensor out = Tensor::uninitialized({n, c, ho, wo});
  // For max: in-plane index of the winner. For avg: in-bounds count.
  std::vector<std::uint32_t> aux(out.size());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    const double* ip = x.data() + plane * h * w;
    for (std::size_t oh = 0; oh < ho; ++oh) {
      const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * stride) - static_cast<std::ptrdiff_t>(padding);
      const std::size_t hlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h0, 0));
      const std::size_t hhi = static_cast<std::size_t>(
          std::min<std::ptrdiff_t>(h0 + static_cast<std::ptrdiff_t>(window), static_cast<std::ptrdiff_t>(h)));
      for (std::size_t ow = 0; ow < wo; ++ow) {
        const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * stride) - static_cast<std::ptrdiff_t>(padding);
        const std::size_t wlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(w0, 0));
        const std::size_t whi = static_cast<std::size_t>(
            std::min<std::ptrdiff_t>(w0 + static_cast<std::ptrdiff_t>(window), static_cast<std::ptrdiff_t>(w)));
        const std::size_t o = (plane * ho + oh) * wo + ow;
        if (kind == PoolKind::avg) {
          double s = 0.0;
          for (std::size_t i = hlo; i < hhi; ++i) {
            for (std::size_t j = wlo; j < whi; ++j) s += ip[i * w + j];
          }
          const std::size_t count = (hhi - hlo) * (whi - wlo);
          out[o] = s / static_cast<double>(count);
          aux[o] = static_cast<std::uint32_t>(count);
        } else {
          double best = -std::numeric_limits<double>::infinity();
          double second = -std::numeric_limits<double>::infinity();
          std::size_t arg = 0;
          for (std::size_t i = hlo; i < hhi; ++i) {
            for (std::size_t j = wlo; j < whi; ++j) {
              const double v = ip[i * w + j];
              if (v > best) {
                second = best;
                best = v;
                arg = i * w + j;
              } else if (v > second) {
                second = v;
              }
            }
          }
          out[o] = best;
          aux[o] = static_cast<std::uint32_t>(arg);
          if (std::isfinite(second)) margin = std::min(margin, best - second);
        }
      }
    }
  }
  if (kind == PoolKind::max) input.tape().note_kink(margin);

  return input.tape().record(
      std::move(out), {input},
      [kind, aux = std::move(aux), n, c, h, w, ho, wo, window, stride, padding](const Tensor& dy,
                                                                                 std::span<Tensor* const> grads) {
        Tensor* dx = grads[0];
        if (!dx) return;
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < dy.size(); ++o) (*dx)[o / (ho * wo) * h * w + aux[o]] += dy[o];
          return;
        }
        for (std::size_t plane = 0; plane < n * c; ++plane) {
          double* dp = dx->data() + plane * h * w;
          for (std::size_t oh = 0; oh < ho; ++oh) {
            const std::ptrdiff_t h0 = static_cast<std::ptrdiff_t>(oh * stride) - static_cast<std::ptrdiff_t>(padding);
            const std::size_t hlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(h0, 0));
            const std::size_t hhi = static_cast<std::size_t>(
                std::min<std::ptrdiff_t>(h0 + static_cast<std::ptrdiff_t>(window), static_cast<std::ptrdiff_t>(h)));
            for (std::size_t ow = 0; ow < wo; ++ow) {
              const std::ptrdiff_t w0 = static_cast<std::ptrdiff_t>(ow * stride) - static_cast<std::ptrdiff_t>(padding);
              const std::size_t wlo = static_cast<std::size_t>(std::max<std::ptrdiff_t>(w0, 0));
              const std::size_t whi = static_cast<std::size_t>(
                  std::min<std::ptrdiff_t>(w0 + static_cast<std::ptrdiff_t>(window), static_cast<std::ptrdiff_t>(w)));
              const std::size_t o = (plane * ho + oh) * wo + ow;
              const double g = dy[o] / static_cast<double>(aux[o]);
              for (std::size_t i = hlo; i < hhi; ++i) {
                for (std::size_t j = wlo; j < whi; ++j) dp[i * w + j] += g;
              }
            }
          }
        }
      });
}

Var elementwise_max(Var a, Var b) {
  require_same_shape(a, b, "elementwise_max");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Tensor out = Tensor::uninitialized(av.shape());
  std::vector<bool> from_a(av.size());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < av.size(); ++i) {
    from_a[i] = av[i] >= bv[i];
    out[i] = from_a[i] ? av[i] : bv[i];
    margin = std::min(margin, std::abs(av[i] - bv[i]));
  }
  a.tape().note_kink(margin);
  return a.tape().record(std::move(out), {a, b},
                         [from_a = std::move(from_a)](const Tensor& dy, std::span<Tensor* const> grads) {
                           for (std::size_t i = 0; i < dy.size(); ++i) {
                             Tensor* target = from_a[i] ? grads[0] : grads[1];
                             if (target) (*target)[i] += dy[i];
                           }
                         });
}

Var relu(Var x) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::uninitialized(xv.shape());
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    margin = std::min(margin, std::abs(xv[i]));
  }
  x.tape().note_kink(margin);
  const Tensor* xin = &xv;
  return x.tape().record(std::move(out), {x}, [xin](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    const double* xp = xin->data();
    const double* gp = dy.data();
    double* dst = grads[0]->data();
    for (std::size_t i = 0; i < dy.size(); ++i) dst[i] += xp[i] > 0.0 ? gp[i] : 0.0;
  });
}

Var add(Var a, Var b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape().record(std::move(out), {a, b}, [](const Tensor& dy, std::span<Tensor* const> grads) {
    for (Tensor* g : grads) {
      if (g) accumulate(*g, dy);
    }
  });
}

Var add_n(std::span<const Var> terms) {
  if (terms.empty()) throw ShapeError("add_n: no terms");
  Tensor out = terms[0].value();
  for (std::size_t k = 1; k < terms.size(); ++k) {
    require_same_shape(terms[0], terms[k], "add_n");
    accumulate(out, terms[k].value());
  }
  return terms[0].tape().record(std::move(out), terms, [](const Tensor& dy, std::span<Tensor* const> grads) {
    for (Tensor* g : grads) {
      if (g) accumulate(*g, dy);
    }
  });
}

Var scale(Var x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape().record(std::move(out), {x}, [factor](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < dy.size(); ++i) (*grads[0])[i] += factor * dy[i];
  });
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(std::move(out), {x}, [](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < dy.size(); ++i) (*grads[0])[i] += dy[i];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record(Tensor(Shape{}, s), {x}, [](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (double& g : grads[0]->values()) g += dy[0];
  });
}

Var dot_constant(Var x, const Tensor& weights) {
  if (x.value().size() != weights.size()) {
    throw ShapeError("dot_constant: shape mismatch " + shape_string(x.shape()) + " vs " +
                     shape_string(weights.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < weights.size(); ++i) s += x.value()[i] * weights[i];
  return x.tape().record(Tensor(Shape{}, s), {x}, [weights](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t i = 0; i < weights.size(); ++i) (*grads[0])[i] += dy[0] * weights[i];
  });
}

namespace {

void check_rows(const Var& logits, const char* op) {
  require_rank(logits, 2, op);
  if (logits.value().dim(0) == 0) throw ShapeError(std::string(op) + ": empty batch");
  if (logits.value().dim(1) == 0) throw ShapeError(std::string(op) + ": zero classes");
}

Tensor softmax_rows(const Tensor& x) {
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    double* o = out.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t k = 0; k < cols; ++k) {
      o[k] = std::exp(in[k] - mx);
      z += o[k];
    }
    for (std::size_t k = 0; k < cols; ++k) o[k] /= z;
  }
  return out;
}

}  // namespace

Var softmax(Var logits) {
  check_rows(logits, "softmax");
  Tensor out = softmax_rows(logits.value());
  const std::size_t rows = out.dim(0), cols = out.dim(1);
  return logits.tape().record(out, {logits}, [out, rows, cols](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* p = out.data() + r * cols;
      const double* g = dy.data() + r * cols;
      double inner = 0.0;
      for (std::size_t k = 0; k < cols; ++k) inner += p[k] * g[k];
      double* dx = grads[0]->data() + r * cols;
      for (std::size_t k = 0; k < cols; ++k) dx[k] += p[k] * (g[k] - inner);
    }
  });
}

Var log_softmax(Var logits) {
  check_rows(logits, "log_softmax");
  const Tensor& x = logits.value();
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  Tensor out = Tensor::uninitialized(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t k = 0; k < cols; ++k) z += std::exp(in[k] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t k = 0; k < cols; ++k) out[r * cols + k] = in[k] - lse;
  }
  return logits.tape().record(out, {logits}, [out, rows, cols](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      double total = 0.0;
      for (std::size_t k = 0; k < cols; ++k) total += dy[r * cols + k];
      for (std::size_t k = 0; k < cols; ++k) {
        (*grads[0])[r * cols + k] += dy[r * cols + k] - std::exp(out[r * cols + k]) * total;
      }
    }
  });
}

Var cross_entropy(Var logits, std::span<const int> labels) {
  check_rows(logits, "cross_entropy");
  const Tensor& x = logits.value();
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  if (labels.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(rows) +
                     " rows");
  }
  std::vector<int> targets(labels.begin(), labels.end());
  for (int t : targets) {
    if (t < 0 || static_cast<std::size_t>(t) >= cols) throw ShapeError("cross_entropy: label out of range");
  }
  Tensor probs = softmax_rows(x);
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * cols;
    const double mx = *std::max_element(in, in + cols);
    double z = 0.0;
    for (std::size_t k = 0; k < cols; ++k) z += std::exp(in[k] - mx);
    loss += mx + std::log(z) - in[targets[r]];
  }
  loss /= static_cast<double>(rows);
  return logits.tape().record(
      Tensor(Shape{}, loss), {logits},
      [probs = std::move(probs), targets = std::move(targets), rows, cols](const Tensor& dy,
                                                                          std::span<Tensor* const> grads) {
        if (!grads[0]) return;
        const double s = dy[0] / static_cast<double>(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t k = 0; k < cols; ++k) {
            const double onehot = static_cast<int>(k) == targets[r] ? 1.0 : 0.0;
            (*grads[0])[r * cols + k] += s * (probs[r * cols + k] - onehot);
          }
        }
      });
}

Var linear(Var x, Var weight, Var bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  require_rank(bias, 1, "linear bias");
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const std::size_t n = xv.dim(0), d = xv.dim(1), o = wv.dim(0);
  if (n == 0) throw ShapeError("linear: empty batch");
  if (wv.dim(1) != d || bias.value().dim(0) != o) {
    throw ShapeError("linear: input " + shape_string(xv.shape()) + ", weight " + shape_string(wv.shape()) +
                     ", bias " + shape_string(bias.shape()) + " do not agree");
  }
  const auto N = static_cast<Eigen::Index>(n), D = static_cast<Eigen::Index>(d), O = static_cast<Eigen::Index>(o);
  Tensor out = Tensor::uninitialized({n, o});
  MutMap om(out.data(), N, O);
  om.noalias() = ConstMap(xv.data(), N, D) * ConstMap(wv.data(), O, D).transpose();
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t k = 0; k < o; ++k) out[r * o + k] += bias.value()[k];
  }
  const Tensor* xin = &xv;
  const Tensor* win = &wv;
  return x.tape().record(std::move(out), {x, weight, bias},
                         [xin, win, N, D, O](const Tensor& dy, std::span<Tensor* const> grads) {
                           ConstMap dym(dy.data(), N, O);
                           if (grads[0]) MutMap(grads[0]->data(), N, D).noalias() += dym * ConstMap(win->data(), O, D);
                           if (grads[1]) {
                             MutMap(grads[1]->data(), O, D).noalias() += dym.transpose() * ConstMap(xin->data(), N, D);
                           }
                           if (grads[2]) {
                             for (Eigen::Index r = 0; r < N; ++r) {
                               for (Eigen::Index k = 0; k < O; ++k) (*grads[2])[static_cast<std::size_t>(k)] += dym(r, k);
                             }
                           }
                         });
}

Var concat_channels(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  for (const Var& p : parts) require_rank(p, 4, "concat_channels");
  const Shape& s0 = parts[0].shape();
  std::size_t total = 0;
  std::vector<std::size_t> channels;
  for (const Var& p : parts) {
    const Shape& s = p.shape();
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3]) {
      throw ShapeError("concat_channels: " + shape_string(s) + " does not match " + shape_string(s0) +
                       " outside the channel axis");
    }
    channels.push_back(s[1]);
    total += s[1];
  }
  const std::size_t n = s0[0], plane = s0[2] * s0[3];
  Tensor out = Tensor::uninitialized({n, total, s0[2], s0[3]});
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
      const double* src = parts[k].value().data() + b * channels[k] * plane;
      std::copy(src, src + channels[k] * plane, out.data() + (b * total + offset) * plane);
      offset += channels[k];
    }
  }
  return parts[0].tape().record(
      std::move(out), parts, [channels, n, total, plane](const Tensor& dy, std::span<Tensor* const> grads) {
        for (std::size_t b = 0; b < n; ++b) {
          std::size_t offset = 0;
          for (std::size_t k = 0; k < grads.size(); ++k) {
            if (grads[k]) {
              const double* src = dy.data() + (b * total + offset) * plane;
              double* dst = grads[k]->data() + b * channels[k] * plane;
              for (std::size_t i = 0; i < channels[k] * plane; ++i) dst[i] += src[i];
            }
            offset += channels[k];
          }
        }
      });
}

Var slice_channels(Var x, std::size_t begin, std::size_t count) {
  require_rank(x, 4, "slice_channels");
  const Shape& s = x.shape();
  if (begin + count > s[1] || count == 0) {
    throw ShapeError("slice_channels: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                     ") outside " + std::to_string(s[1]) + " channels");
  }
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  Tensor out = Tensor::uninitialized({n, count, s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b) {
    const double* src = x.value().data() + (b * c + begin) * plane;
    std::copy(src, src + count * plane, out.data() + b * count * plane);
  }
  return x.tape().record(std::move(out), {x},
                         [n, c, begin, count, plane](const Tensor& dy, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (std::size_t b = 0; b < n; ++b) {
                             const double* src = dy.data() + b * count * plane;
                             double* dst = grads[0]->data() + (b * c + begin) * plane;
                             for (std::size_t i = 0; i < count * plane; ++i) dst[i] += src[i];
                           }
                         });
}

Var global_avg_pool(Var x) {
  require_rank(x, 4, "global_avg_pool");
  const Shape& s = x.shape();
  const std::size_t rows = s[0] * s[1], plane = s[2] * s[3];
  Tensor out = Tensor::uninitialized({s[0], s[1]});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* p = x.value().data() + r * plane;
    double acc = 0.0;
    for (std::size_t i = 0; i < plane; ++i) acc += p[i];
    out[r] = acc / static_cast<double>(plane);
  }
  return x.tape().record(std::move(out), {x}, [rows, plane](const Tensor& dy, std::span<Tensor* const> grads) {
    if (!grads[0]) return;
    for (std::size_t r = 0; r < rows; ++r) {
      const double g = dy[r] / static_cast<double>(plane);
      double* dst = grads[0]->data() + r * plane;
      for (std::size_t i = 0; i < plane; ++i) dst[i] += g;
    }
  });
}

Var subsample2(Var x, std::size_t offset) {
  require_rank(x, 4, "subsample2");
  if (offset > 1) throw ShapeError("subsample2: offset must be 0 or 1");
  const Shape& s = x.shape();
  const std::size_t rows = s[0] * s[1], h = s[2], w = s[3];
  const std::size_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  Tensor out({s[0], s[1], ho, wo});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* src = x.value().data() + r * h * w;
    double* dst = out.data() + r * ho * wo;
    for (std::size_t i = 0; i < ho; ++i) {
      const std::size_t si = 2 * i + offset;
      if (si >= h) continue;
      for (std::size_t j = 0; j < wo; ++j) {
        const std::size_t sj = 2 * j + offset;
        if (sj < w) dst[i * wo + j] = src[si * w + sj];
      }
    }
  }
  return x.tape().record(std::move(out), {x},
                         [rows, h, w, ho, wo, offset](const Tensor& dy, std::span<Tensor* const> grads) {
                           if (!grads[0]) return;
                           for (std::size_t r = 0; r < rows; ++r) {
                             const double* src = dy.data() + r * ho * wo;
                             double* dst = grads[0]->data() + r * h * w;
                             for (std::size_t i = 0; i < ho; ++i) {
                               const std::size_t si = 2 * i + offset;
                               if (si >= h) continue;
                               for (std::size_t j = 0; j < wo; ++j) {
                                 const std::size_t sj = 2 * j + offset;
                                 if (sj < w) dst[si * w + sj] += src[i * wo + j];
                               }
                             }
                           }
                         });
}

Var zeros(Tape& tape, Shape shape) { return tape.constant(Tensor(std::move(shape))); }

Var weighted_sum(std::span<const Var> terms, Var weights, std::size_t row) {
  require_rank(weights, 2, "weighted_sum weights");
  if (weights.value().dim(1) != terms.size()) {
    throw ShapeError("weighted_sum: weights " + shape_string(weights.shape()) + " do not cover " +
                     std::to_string(terms.size()) + " terms");
  }
  std::vector<std::size_t> columns(terms.size());
  for (std::size_t i = 0; i < columns.size(); ++i) columns[i] = i;
  return weighted_sum(terms, columns, weights, row);
}

Var weighted_sum(std::span<const Var> terms, std::span<const std::size_t> columns, Var weights, std::size_t row) {
  if (terms.empty()) throw ShapeError("weighted_sum: no terms");
  if (columns.size() != terms.size()) throw ShapeError("weighted_sum: one column per term required");
  require_rank(weights, 2, "weighted_sum weights");
  const Tensor& wv = weights.value();
  const std::size_t k = wv.dim(1);
  if (row >= wv.dim(0)) {
    throw ShapeError("weighted_sum: row " + std::to_string(row) + " outside weights " + shape_string(wv.shape()));
  }
  for (std::size_t col : columns) {
    if (col >= k) throw ShapeError("weighted_sum: column " + std::to_string(col) + " outside weights");
  }
  for (std::size_t i = 1; i < terms.size(); ++i) require_same_shape(terms[0], terms[i], "weighted_sum");
  Tensor out(terms[0].shape());
  const double* wr = wv.data() + row * k;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    const double* t = terms[i].value().data();
    const double wt = wr[columns[i]];
    for (std::size_t j = 0; j < out.size(); ++j) out[j] += wt * t[j];
  }
  std::vector<Var> inputs(terms.begin(), terms.end());
  inputs.push_back(weights);
  std::vector<const Tensor*> values;
  for (const Var& t : terms) values.push_back(&t.value());
  std::vector<std::size_t> cols(columns.begin(), columns.end());
  const Tensor* win = &wv;
  return weights.tape().record(
      std::move(out), inputs,
      [values = std::move(values), cols = std::move(cols), win, row, k](const Tensor& dy,
                                                                        std::span<Tensor* const> grads) {
        const double* wr = win->data() + row * k;
        const std::size_t m = cols.size();
        for (std::size_t i = 0; i < m; ++i) {
          if (grads[i]) {
            double* dst = grads[i]->data();
            const double wt = wr[cols[i]];
            for (std::size_t j = 0; j < dy.size(); ++j) dst[j] += wt * dy[j];
          }
        }
        if (Tensor* dw = grads[m]) {
          for (std::size_t i = 0; i < m; ++i) {
            const double* t = values[i]->data();
            double acc = 0.0;
            for (std::size_t j = 0; j < dy.size(); ++j) acc += t[j] * dy[j];
            (*dw)[row * k + cols[i]] += acc;
          }
        }
      });
}

Var channel_norm(Var x, Var scale, Var shift, const NormStatistics* frozen, NormStatistics* observed) {
  require_rank(x, 4, "channel_norm");
  const Shape& s = x.shape();
  const std::size_t n = s[0], c = s[1], plane = s[2] * s[3];
  if (n == 0) throw ShapeError("channel_norm: empty batch");
  if (scale.value().size() != c || shift.value().size() != c) {
    throw ShapeError("channel_norm: " + std::to_string(c) + " channels but scale " +
                     shape_string(scale.shape()) + " and shift " + shape_string(shift.shape()));
  }
  const double count = static_cast<double>(n * plane);
  const Tensor& xv = x.value();
  std::vector<double> mean(c), inv_std(c);
  if (frozen) {
    if (frozen->mean.size() != c || frozen->var.size() != c) {
      throw ShapeError("channel_norm: frozen statistics do not match " + std::to_string(c) + " channels");
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      mean[ch] = frozen->mean[ch];
      inv_std[ch] = 1.0 / std::sqrt(frozen->var[ch] + kNormEpsilon);
    }
  } else {
    std::vector<double> var(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      double acc = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xv.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) acc += p[i];
      }
      mean[ch] = acc / count;
      double sq = 0.0;
      for (std::size_t b = 0; b < n; ++b) {
        const double* p = xv.data() + (b * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) {
          const double d = p[i] - mean[ch];
          sq += d * d;
        }
      }
      var[ch] = sq / count;
      inv_std[ch] = 1.0 / std::sqrt(var[ch] + kNormEpsilon);
    }
    if (observed) *observed = NormStatistics{mean, var};
  }

  Tensor out = Tensor::uninitialized(s);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * plane;
      const double g = scale.value()[ch], beta = shift.value()[ch];
      for (std::size_t i = 0; i < plane; ++i) {
        out[base + i] = g * ((xv[base + i] - mean[ch]) * inv_std[ch]) + beta;
      }
    }
  }
  const Tensor* gin = &scale.value();
  const Tensor* xin = &xv;
  const bool batch_stats = frozen == nullptr;
  return x.tape().record(
      std::move(out), {x, scale, shift},
      [mean = std::move(mean), inv_std = std::move(inv_std), xin, gin, n, c, plane, count, batch_stats](
          const Tensor& dy, std::span<Tensor* const> grads) {
        const Tensor& xv = *xin;
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double mu = mean[ch], is = inv_std[ch];
          double dbeta = 0.0, dgamma = 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              dbeta += dy[base + i];
              dgamma += dy[base + i] * ((xv[base + i] - mu) * is);
            }
          }
          if (grads[1]) (*grads[1])[ch] += dgamma;
          if (grads[2]) (*grads[2])[ch] += dbeta;
          if (!grads[0]) continue;
          const double k = (*gin)[ch] * inv_std[ch];
          const double mean_dy = batch_stats ? dbeta / count : 0.0;
          const double mean_dy_xh = batch_stats ? dgamma / count : 0.0;
          for (std::size_t b = 0; b < n; ++b) {
            const std::size_t base = (b * c + ch) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
              (*grads[0])[base + i] += k * (dy[base + i] - mean_dy - ((xv[base + i] - mu) * is) * mean_dy_xh);
            }
          }
        }
      });
}

}  // namespace lightdarts
