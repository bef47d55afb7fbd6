#include "petsr/tiny_denoiser.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

#include "petsr/phantom.hpp"
#include "petsr/psrg_io.hpp"
#include "petsr/rng.hpp"

namespace petsr {

std::string_view conditioning_name(Conditioning c) { return c == Conditioning::attention ? "attention" : "concat"; }

Conditioning parse_conditioning(std::string_view name) {
  if (name == "attention") return Conditioning::attention;
  if (name == "concat") return Conditioning::concat;
  throw ConfigError("unknown conditioning '" + std::string(name) + "' (expected attention|concat)");
}

// ---------------------------------------------------------------------------
// Parameter layout
// ---------------------------------------------------------------------------

struct TinyNetwork::Layout {
  struct Block {
    std::size_t w = 0, b = 0, fan_in = 0;
  };
  Block temb_mlp, temb1, temb2;
  Block conv_in, enc1, enc2, enc3;
  Block cond1, q1, k1, v1, o1, cond2, q, k, v, o;
  std::size_t relbias1 = 0, relbias = 0;
  Block dec, out;
  std::size_t total = 0;
  std::vector<Block> blocks;  // every weight block, for initialization

  explicit Layout(const TinyArch& a) {
    const std::size_t c1 = a.width1, c2 = a.width2, e = a.temb_dim;
    const std::size_t cin = a.conditioning == Conditioning::concat ? 2 : 1;
    auto add = [&](std::size_t n_out, std::size_t fan_in) {
      Block blk{total, total + n_out * fan_in, fan_in};
      total += n_out * fan_in + n_out;
      blocks.push_back(blk);
      return blk;
    };
    temb_mlp = add(e, e);
    temb1 = add(c1, e);
    temb2 = add(c2, e);
    conv_in = add(c1, cin * 9);
    enc1 = add(c1, c1 * 9);
    enc2 = add(c2, c1 * 9);
    enc3 = add(c2, c2 * 9);
    if (a.conditioning == Conditioning::attention) {
      const std::size_t nbias = static_cast<std::size_t>(a.heads) * a.window * a.window;
      cond1 = add(c1, 9);
      q1 = add(c1, c1);
      k1 = add(c1, c1);
      v1 = add(c1, c1);
      o1 = add(c1, c1);
      relbias1 = total;
      total += nbias;
      cond2 = add(c2, c1 * 9);
      q = add(c2, c2);
      k = add(c2, c2);
      v = add(c2, c2);
      o = add(c2, c2);
      relbias = total;
      total += nbias;
    }
    dec = add(c1, (c1 + c2) * 9);
    out = add(1, c1 * 9);
  }
};

namespace {

void validate_arch(const TinyArch& a) {
  if (a.width1 == 0 || a.width2 == 0 || a.temb_dim < 2 || a.temb_dim % 2 != 0) {
    throw ConfigError("tiny denoiser: widths must be positive and temb_dim even");
  }
  if (a.conditioning == Conditioning::attention) {
    if (a.heads == 0 || a.width1 % a.heads != 0 || a.width2 % a.heads != 0) {
      throw ConfigError("tiny denoiser: heads must divide width1 and width2");
    }
    if (a.window == 0 || a.window % 2 == 0) throw ConfigError("tiny denoiser: window must be odd");
  }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

float sigmoid(float x) { return 1.0f / (1.0f + std::exp(-x)); }

void silu_forward(const Tensor& in, Tensor& out) {
  out = Tensor(in.c, in.h, in.w);
  for (std::size_t i = 0; i < in.v.size(); ++i) out.v[i] = in.v[i] * sigmoid(in.v[i]);
}

// dIn = dOut * silu'(pre)
Tensor silu_backward(const Tensor& pre, const Tensor& dout) {
  Tensor d(pre.c, pre.h, pre.w);
  for (std::size_t i = 0; i < pre.v.size(); ++i) {
    const float s = sigmoid(pre.v[i]);
    d.v[i] = dout.v[i] * s * (1.0f + pre.v[i] * (1.0f - s));
  }
  return d;
}

// 3x3 "same" convolution, zero padding. W[co][ci][ky][kx].
void conv3_forward(const float* W, const float* bias, const Tensor& in, std::uint32_t cout, Tensor& out) {
  const std::uint32_t h = in.h, w = in.w, cin = in.c;
  out = Tensor(cout, h, w);
  for (std::uint32_t co = 0; co < cout; ++co) {
    float* o = out.ch(co);
    std::fill(o, o + out.plane(), bias[co]);
    for (std::uint32_t ci = 0; ci < cin; ++ci) {
      const float* src = in.ch(ci);
      const float* k = W + (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const float wv = k[ky * 3 + kx];
          const std::uint32_t x0 = dx < 0 ? 1u : 0u;
          const std::uint32_t x1 = dx > 0 ? w - 1 : w;
          for (std::uint32_t y = 0; y < h; ++y) {
            const int sy = static_cast<int>(y) + dy;
            if (sy < 0 || sy >= static_cast<int>(h)) continue;
            const float* srow = src + static_cast<std::size_t>(sy) * w + dx;
            float* orow = o + static_cast<std::size_t>(y) * w;
#pragma omp simd
            for (std::uint32_t x = x0; x < x1; ++x) orow[x] += wv * srow[x];
          }
        }
      }
    }
  }
}

// Accumulates dW, db and (optionally) dIn.
void conv3_backward(const float* W, const Tensor& in, const Tensor& dout, float* dW, float* db, Tensor* din) {
  const std::uint32_t h = in.h, w = in.w, cin = in.c, cout = dout.c;
  if (din) *din = Tensor(cin, h, w);
  for (std::uint32_t co = 0; co < cout; ++co) {
    const float* go = dout.ch(co);
    float bsum = 0.0f;
#pragma omp simd reduction(+ : bsum)
    for (std::size_t i = 0; i < dout.plane(); ++i) bsum += go[i];
    db[co] += bsum;
    for (std::uint32_t ci = 0; ci < cin; ++ci) {
      const float* src = in.ch(ci);
      float* gsrc = din ? din->ch(ci) : nullptr;
      const std::size_t kofs = (static_cast<std::size_t>(co) * cin + ci) * 9;
      for (int ky = 0; ky < 3; ++ky) {
        const int dy = ky - 1;
        for (int kx = 0; kx < 3; ++kx) {
          const int dx = kx - 1;
          const float wv = W[kofs + ky * 3 + kx];
          const std::uint32_t x0 = dx < 0 ? 1u : 0u;
          const std::uint32_t x1 = dx > 0 ? w - 1 : w;
          float acc = 0.0f;
          for (std::uint32_t y = 0; y < h; ++y) {
            const int sy = static_cast<int>(y) + dy;
            if (sy < 0 || sy >= static_cast<int>(h)) continue;
            const float* srow = src + static_cast<std::size_t>(sy) * w + dx;
            const float* grow = go + static_cast<std::size_t>(y) * w;
            float racc = 0.0f;
#pragma omp simd reduction(+ : racc)
            for (std::uint32_t x = x0; x < x1; ++x) racc += grow[x] * srow[x];
            acc += racc;
            if (gsrc) {
              float* drow = gsrc + static_cast<std::size_t>(sy) * w + dx;
#pragma omp simd
              for (std::uint32_t x = x0; x < x1; ++x) drow[x] += wv * grow[x];
            }
          }
          dW[kofs + ky * 3 + kx] += acc;
        }
      }
    }
  }
}

// Pointwise (1x1) linear map over channels. W[co][ci].
void pw_forward(const float* W, const float* bias, const Tensor& in, std::uint32_t cout, Tensor& out) {
  out = Tensor(cout, in.h, in.w);
  const std::size_t n = in.plane();
  for (std::uint32_t co = 0; co < cout; ++co) {
    float* o = out.ch(co);
    std::fill(o, o + n, bias[co]);
    for (std::uint32_t ci = 0; ci < in.c; ++ci) {
      const float wv = W[static_cast<std::size_t>(co) * in.c + ci];
      const float* s = in.ch(ci);
#pragma omp simd
      for (std::size_t i = 0; i < n; ++i) o[i] += wv * s[i];
    }
  }
}

void pw_backward(const float* W, const Tensor& in, const Tensor& dout, float* dW, float* db, Tensor* din) {
  const std::size_t n = in.plane();
  if (din) *din = Tensor(in.c, in.h, in.w);
  for (std::uint32_t co = 0; co < dout.c; ++co) {
    const float* g = dout.ch(co);
    float bsum = 0.0f;
#pragma omp simd reduction(+ : bsum)
    for (std::size_t i = 0; i < n; ++i) bsum += g[i];
    db[co] += bsum;
    for (std::uint32_t ci = 0; ci < in.c; ++ci) {
      const float* s = in.ch(ci);
      float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
      for (std::size_t i = 0; i < n; ++i) acc += g[i] * s[i];
      dW[static_cast<std::size_t>(co) * in.c + ci] += acc;
      if (din) {
        const float wv = W[static_cast<std::size_t>(co) * in.c + ci];
        float* d = din->ch(ci);
#pragma omp simd
        for (std::size_t i = 0; i < n; ++i) d[i] += wv * g[i];
      }
    }
  }
}

void dense_forward(const float* W, const float* bias, std::span<const float> in, std::size_t nout,
                   std::vector<float>& out) {
  out.assign(nout, 0.0f);
  for (std::size_t o = 0; o < nout; ++o) {
    float acc = bias[o];
    for (std::size_t i = 0; i < in.size(); ++i) acc += W[o * in.size() + i] * in[i];
    out[o] = acc;
  }
}

void dense_backward(const float* W, std::span<const float> in, std::span<const float> dout, float* dW, float* db,
                    std::vector<float>* din) {
  if (din) din->assign(in.size(), 0.0f);
  for (std::size_t o = 0; o < dout.size(); ++o) {
    db[o] += dout[o];
    for (std::size_t i = 0; i < in.size(); ++i) {
      dW[o * in.size() + i] += dout[o] * in[i];
      if (din) (*din)[i] += W[o * in.size() + i] * dout[o];
    }
  }
}

Tensor avgpool2(const Tensor& in) {
  Tensor out(in.c, in.h / 2, in.w / 2);
  for (std::uint32_t c = 0; c < in.c; ++c) {
    const float* s = in.ch(c);
    float* o = out.ch(c);
    for (std::uint32_t y = 0; y < out.h; ++y) {
      for (std::uint32_t x = 0; x < out.w; ++x) {
        const std::size_t i = static_cast<std::size_t>(2 * y) * in.w + 2 * x;
        o[static_cast<std::size_t>(y) * out.w + x] = 0.25f * (s[i] + s[i + 1] + s[i + in.w] + s[i + in.w + 1]);
      }
    }
  }
  return out;
}

Tensor avgpool2_backward(const Tensor& dout, std::uint32_t h, std::uint32_t w) {
  Tensor din(dout.c, h, w);
  for (std::uint32_t c = 0; c < dout.c; ++c) {
    const float* g = dout.ch(c);
    float* d = din.ch(c);
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) {
        d[static_cast<std::size_t>(y) * w + x] = 0.25f * g[static_cast<std::size_t>(y / 2) * dout.w + x / 2];
      }
    }
  }
  return din;
}

Tensor upsample2(const Tensor& in) {
  Tensor out(in.c, in.h * 2, in.w * 2);
  for (std::uint32_t c = 0; c < in.c; ++c) {
    const float* s = in.ch(c);
    float* o = out.ch(c);
    for (std::uint32_t y = 0; y < out.h; ++y) {
      for (std::uint32_t x = 0; x < out.w; ++x) {
        o[static_cast<std::size_t>(y) * out.w + x] = s[static_cast<std::size_t>(y / 2) * in.w + x / 2];
      }
    }
  }
  return out;
}

Tensor upsample2_backward(const Tensor& dout) {
  Tensor din(dout.c, dout.h / 2, dout.w / 2);
  for (std::uint32_t c = 0; c < dout.c; ++c) {
    const float* g = dout.ch(c);
    float* d = din.ch(c);
    for (std::uint32_t y = 0; y < dout.h; ++y) {
      for (std::uint32_t x = 0; x < dout.w; ++x) {
        d[static_cast<std::size_t>(y / 2) * din.w + x / 2] += g[static_cast<std::size_t>(y) * dout.w + x];
      }
    }
  }
  return din;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  Tensor out(a.c + b.c, a.h, a.w);
  std::copy(a.v.begin(), a.v.end(), out.v.begin());
  std::copy(b.v.begin(), b.v.end(), out.v.begin() + static_cast<std::ptrdiff_t>(a.v.size()));
  return out;
}

void add_channel_bias(Tensor& t, const std::vector<float>& bias) {
  for (std::uint32_t c = 0; c < t.c; ++c) {
    float* p = t.ch(c);
    const float b = bias[c];
    for (std::size_t i = 0; i < t.plane(); ++i) p[i] += b;
  }
}

std::vector<float> channel_sums(const Tensor& t) {
  std::vector<float> s(t.c, 0.0f);
  for (std::uint32_t c = 0; c < t.c; ++c) {
    const float* p = t.ch(c);
    float acc = 0.0f;
#pragma omp simd reduction(+ : acc)
    for (std::size_t i = 0; i < t.plane(); ++i) acc += p[i];
    s[c] = acc;
  }
  return s;
}

std::vector<float> timestep_embedding(std::uint32_t t, std::uint32_t dim) {
  std::vector<float> e(dim);
  const std::uint32_t half = dim / 2;
  for (std::uint32_t i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    const double arg = static_cast<double>(t) * freq;
    e[i] = static_cast<float>(std::sin(arg));
    e[i + half] = static_cast<float>(std::cos(arg));
  }
  return e;
}

// Windowed cross-attention: for every pixel p and head h,
//   a_o = softmax_o(<q_h(p), k_h(p+o)> / sqrt(dh) + bias[h][o]) over in-bounds o,
//   out_h(p) = sum_o a_o v_h(p+o).
void attention_forward(const Tensor& q, const Tensor& k, const Tensor& v, const float* relbias, std::uint32_t heads,
                       std::uint32_t window, Tensor& out, std::vector<float>& weights) {
  const std::uint32_t h = q.h, w = q.w, dh = q.c / heads;
  const int r = static_cast<int>(window / 2);
  const std::size_t nwin = static_cast<std::size_t>(window) * window;
  const std::size_t plane = q.plane();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  out = Tensor(q.c, h, w);
  weights.assign(heads * plane * nwin, 0.0f);
  std::vector<float> scores(nwin);
  for (std::uint32_t hd = 0; hd < heads; ++hd) {
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        float smax = -1e30f;
        for (int oy = -r; oy <= r; ++oy) {
          for (int ox = -r; ox <= r; ++ox) {
            const std::size_t o = static_cast<std::size_t>((oy + r) * static_cast<int>(window) + (ox + r));
            const int yy = static_cast<int>(y) + oy, xx = static_cast<int>(x) + ox;
            if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) {
              scores[o] = -1e30f;
              continue;
            }
            const std::size_t pk = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
            float s = 0.0f;
            for (std::uint32_t d = 0; d < dh; ++d) {
              const std::size_t ch = static_cast<std::size_t>(hd) * dh + d;
              s += q.v[ch * plane + p] * k.v[ch * plane + pk];
            }
            scores[o] = s * scale + relbias[hd * nwin + o];
            smax = std::max(smax, scores[o]);
          }
        }
        float z = 0.0f;
        float* a = weights.data() + (hd * plane + p) * nwin;
        for (std::size_t o = 0; o < nwin; ++o) {
          a[o] = scores[o] <= -1e29f ? 0.0f : std::exp(scores[o] - smax);
          z += a[o];
        }
        for (std::size_t o = 0; o < nwin; ++o) a[o] /= z;
        for (int oy = -r; oy <= r; ++oy) {
          for (int ox = -r; ox <= r; ++ox) {
            const std::size_t o = static_cast<std::size_t>((oy + r) * static_cast<int>(window) + (ox + r));
            if (a[o] == 0.0f) continue;
            const std::size_t pk = static_cast<std::size_t>(static_cast<int>(y) + oy) * w +
                                   static_cast<std::size_t>(static_cast<int>(x) + ox);
            for (std::uint32_t d = 0; d < dh; ++d) {
              const std::size_t ch = static_cast<std::size_t>(hd) * dh + d;
              out.v[ch * plane + p] += a[o] * v.v[ch * plane + pk];
            }
          }
        }
      }
    }
  }
}

void attention_backward(const Tensor& q, const Tensor& k, const Tensor& v, const std::vector<float>& weights,
                        std::uint32_t heads, std::uint32_t window, const Tensor& dout, Tensor& dq, Tensor& dk,
                        Tensor& dv, float* drelbias) {
  const std::uint32_t h = q.h, w = q.w, dh = q.c / heads;
  const int r = static_cast<int>(window / 2);
  const std::size_t nwin = static_cast<std::size_t>(window) * window;
  const std::size_t plane = q.plane();
  const float scale = 1.0f / std::sqrt(static_cast<float>(dh));
  dq = Tensor(q.c, h, w);
  dk = Tensor(k.c, h, w);
  dv = Tensor(v.c, h, w);
  std::vector<float> da(nwin), ds(nwin);
  std::vector<std::ptrdiff_t> keys(nwin);
  for (std::uint32_t hd = 0; hd < heads; ++hd) {
    for (std::uint32_t y = 0; y < h; ++y) {
      for (std::uint32_t x = 0; x < w; ++x) {
        const std::size_t p = static_cast<std::size_t>(y) * w + x;
        const float* a = weights.data() + (hd * plane + p) * nwin;
        float dot_a = 0.0f;
        for (int oy = -r; oy <= r; ++oy) {
          for (int ox = -r; ox <= r; ++ox) {
            const std::size_t o = static_cast<std::size_t>((oy + r) * static_cast<int>(window) + (ox + r));
            const int yy = static_cast<int>(y) + oy, xx = static_cast<int>(x) + ox;
            if (yy < 0 || xx < 0 || yy >= static_cast<int>(h) || xx >= static_cast<int>(w)) {
              keys[o] = -1;
              da[o] = 0.0f;
              continue;
            }
            const std::size_t pk = static_cast<std::size_t>(yy) * w + static_cast<std::size_t>(xx);
            keys[o] = static_cast<std::ptrdiff_t>(pk);
            float s = 0.0f;
            for (std::uint32_t d = 0; d < dh; ++d) {
              const std::size_t ch = static_cast<std::size_t>(hd) * dh + d;
              const float g = dout.v[ch * plane + p];
              s += g * v.v[ch * plane + pk];
              dv.v[ch * plane + pk] += a[o] * g;
            }
            da[o] = s;
            dot_a += a[o] * s;
          }
        }
        for (std::size_t o = 0; o < nwin; ++o) {
          if (keys[o] < 0) continue;
          ds[o] = a[o] * (da[o] - dot_a);
          drelbias[hd * nwin + o] += ds[o];
          const auto pk = static_cast<std::size_t>(keys[o]);
          for (std::uint32_t d = 0; d < dh; ++d) {
            const std::size_t ch = static_cast<std::size_t>(hd) * dh + d;
            dq.v[ch * plane + p] += ds[o] * scale * k.v[ch * plane + pk];
            dk.v[ch * plane + pk] += ds[o] * scale * q.v[ch * plane + p];
          }
        }
      }
    }
  }
}

Tensor add_tensors(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.v.size(); ++i) out.v[i] += b.v[i];
  return out;
}

void accumulate(Tensor& into, const Tensor& add) {
  for (std::size_t i = 0; i < into.v.size(); ++i) into.v[i] += add.v[i];
}

}  // namespace

// ---------------------------------------------------------------------------
// Network
// ---------------------------------------------------------------------------

std::size_t parameter_count(const TinyArch& arch) {
  validate_arch(arch);
  return TinyNetwork::Layout(arch).total;
}

TinyNetwork::TinyNetwork(const TinyArch& arch) : arch_(arch) {
  validate_arch(arch);
  layout_ = std::make_shared<const Layout>(arch);
  n_params_ = layout_->total;
}

Tensor TinyNetwork::forward(std::span<const float> params, const Tensor& x, const Tensor& cond, std::uint32_t t,
                            Cache* cache) const {
  if (params.size() != n_params_) throw ConfigError("tiny denoiser: parameter count mismatch");
  if (x.c != 1 || x.h % 2 != 0 || x.w % 2 != 0) throw GeometryError("tiny denoiser: input must be 1 x even x even");
  if (cond.c != 1 || cond.h != x.h || cond.w != x.w) throw GeometryError("tiny denoiser: condition grid mismatch");
  const Layout& L = *layout_;
  const float* P = params.data();
  const std::uint32_t c1 = arch_.width1, c2 = arch_.width2;

  Cache local;
  Cache& C = cache ? *cache : local;
  C.t = t;
  C.x = x;
  C.cond = cond;

  C.temb = timestep_embedding(t, arch_.temb_dim);
  dense_forward(P + L.temb_mlp.w, P + L.temb_mlp.b, C.temb, arch_.temb_dim, C.temb_pre);
  C.temb_hidden.resize(C.temb_pre.size());
  for (std::size_t i = 0; i < C.temb_pre.size(); ++i) C.temb_hidden[i] = C.temb_pre[i] * sigmoid(C.temb_pre[i]);
  dense_forward(P + L.temb1.w, P + L.temb1.b, C.temb_hidden, c1, C.tb1);
  dense_forward(P + L.temb2.w, P + L.temb2.b, C.temb_hidden, c2, C.tb2);

  C.input = arch_.conditioning == Conditioning::concat ? concat_channels(x, cond) : x;
  conv3_forward(P + L.conv_in.w, P + L.conv_in.b, C.input, c1, C.a1);
  add_channel_bias(C.a1, C.tb1);
  silu_forward(C.a1, C.h1);
  conv3_forward(P + L.enc1.w, P + L.enc1.b, C.h1, c1, C.a1b);
  silu_forward(C.a1b, C.s1);

  if (arch_.conditioning == Conditioning::attention) {
    conv3_forward(P + L.cond1.w, P + L.cond1.b, cond, c1, C.ga);
    silu_forward(C.ga, C.g1);
    pw_forward(P + L.q1.w, P + L.q1.b, C.s1, c1, C.q1);
    pw_forward(P + L.k1.w, P + L.k1.b, C.g1, c1, C.k1);
    pw_forward(P + L.v1.w, P + L.v1.b, C.g1, c1, C.v1);
    attention_forward(C.q1, C.k1, C.v1, P + L.relbias1, arch_.heads, arch_.window, C.attn1_out, C.attn1_w);
    Tensor proj;
    pw_forward(P + L.o1.w, P + L.o1.b, C.attn1_out, c1, proj);
    C.b1 = add_tensors(C.s1, proj);
  } else {
    C.b1 = C.s1;
  }

  C.p1 = avgpool2(C.b1);
  conv3_forward(P + L.enc2.w, P + L.enc2.b, C.p1, c2, C.a2);
  add_channel_bias(C.a2, C.tb2);
  silu_forward(C.a2, C.h2);
  conv3_forward(P + L.enc3.w, P + L.enc3.b, C.h2, c2, C.a2b);
  silu_forward(C.a2b, C.s2);

  if (arch_.conditioning == Conditioning::attention) {
    C.gp = avgpool2(C.g1);
    conv3_forward(P + L.cond2.w, P + L.cond2.b, C.gp, c2, C.gb);
    silu_forward(C.gb, C.g2);
    pw_forward(P + L.q.w, P + L.q.b, C.s2, c2, C.q);
    pw_forward(P + L.k.w, P + L.k.b, C.g2, c2, C.k);
    pw_forward(P + L.v.w, P + L.v.b, C.g2, c2, C.v);
    attention_forward(C.q, C.k, C.v, P + L.relbias, arch_.heads, arch_.window, C.attn_out, C.attn_w);
    Tensor proj;
    pw_forward(P + L.o.w, P + L.o.b, C.attn_out, c2, proj);
    C.b2 = add_tensors(C.s2, proj);
  } else {
    C.b2 = C.s2;
  }

  C.up = upsample2(C.b2);
  C.cat = concat_channels(C.up, C.b1);
  conv3_forward(P + L.dec.w, P + L.dec.b, C.cat, c1, C.d1);
  silu_forward(C.d1, C.hd);
  Tensor out;
  conv3_forward(P + L.out.w, P + L.out.b, C.hd, 1, out);
  return out;
}

void TinyNetwork::backward(std::span<const float> params, const Cache& C, const Tensor& dout,
                           std::span<float> grads) const {
  if (grads.size() != n_params_) throw ConfigError("tiny denoiser: gradient buffer size mismatch");
  const Layout& L = *layout_;
  const float* P = params.data();
  float* G = grads.data();
  const std::uint32_t c1 = arch_.width1, c2 = arch_.width2;

  Tensor d_hd;
  conv3_backward(P + L.out.w, C.hd, dout, G + L.out.w, G + L.out.b, &d_hd);
  Tensor d_d1 = silu_backward(C.d1, d_hd);
  Tensor d_cat;
  conv3_backward(P + L.dec.w, C.cat, d_d1, G + L.dec.w, G + L.dec.b, &d_cat);

  // Split concat gradient: first c2 channels -> upsample, rest -> skip.
  Tensor d_up(c2, C.up.h, C.up.w);
  Tensor d_b1(c1, C.b1.h, C.b1.w);
  std::copy(d_cat.v.begin(), d_cat.v.begin() + static_cast<std::ptrdiff_t>(d_up.v.size()), d_up.v.begin());
  std::copy(d_cat.v.begin() + static_cast<std::ptrdiff_t>(d_up.v.size()), d_cat.v.end(), d_b1.v.begin());

  Tensor d_b2 = upsample2_backward(d_up);
  Tensor d_s2 = d_b2;
  Tensor d_g1;

  if (arch_.conditioning == Conditioning::attention) {
    Tensor d_attn;
    pw_backward(P + L.o.w, C.attn_out, d_b2, G + L.o.w, G + L.o.b, &d_attn);
    Tensor dq, dk, dv;
    attention_backward(C.q, C.k, C.v, C.attn_w, arch_.heads, arch_.window, d_attn, dq, dk, dv, G + L.relbias);
    Tensor d_s2_q, d_g2_k, d_g2_v;
    pw_backward(P + L.q.w, C.s2, dq, G + L.q.w, G + L.q.b, &d_s2_q);
    pw_backward(P + L.k.w, C.g2, dk, G + L.k.w, G + L.k.b, &d_g2_k);
    pw_backward(P + L.v.w, C.g2, dv, G + L.v.w, G + L.v.b, &d_g2_v);
    accumulate(d_s2, d_s2_q);
    Tensor d_g2 = add_tensors(d_g2_k, d_g2_v);
    Tensor d_gb = silu_backward(C.gb, d_g2);
    Tensor d_gp;
    conv3_backward(P + L.cond2.w, C.gp, d_gb, G + L.cond2.w, G + L.cond2.b, &d_gp);
    d_g1 = avgpool2_backward(d_gp, C.g1.h, C.g1.w);
  }

  Tensor d_a2b = silu_backward(C.a2b, d_s2);
  Tensor d_h2;
  conv3_backward(P + L.enc3.w, C.h2, d_a2b, G + L.enc3.w, G + L.enc3.b, &d_h2);
  Tensor d_a2 = silu_backward(C.a2, d_h2);
  const std::vector<float> d_tb2 = channel_sums(d_a2);
  Tensor d_p1;
  conv3_backward(P + L.enc2.w, C.p1, d_a2, G + L.enc2.w, G + L.enc2.b, &d_p1);
  accumulate(d_b1, avgpool2_backward(d_p1, C.b1.h, C.b1.w));
  Tensor d_s1 = d_b1;
  if (arch_.conditioning == Conditioning::attention) {
    Tensor d_attn;
    pw_backward(P + L.o1.w, C.attn1_out, d_b1, G + L.o1.w, G + L.o1.b, &d_attn);
    Tensor dq, dk, dv;
    attention_backward(C.q1, C.k1, C.v1, C.attn1_w, arch_.heads, arch_.window, d_attn, dq, dk, dv, G + L.relbias1);
    Tensor d_s1_q, d_g1_k, d_g1_v;
    pw_backward(P + L.q1.w, C.s1, dq, G + L.q1.w, G + L.q1.b, &d_s1_q);
    pw_backward(P + L.k1.w, C.g1, dk, G + L.k1.w, G + L.k1.b, &d_g1_k);
    pw_backward(P + L.v1.w, C.g1, dv, G + L.v1.w, G + L.v1.b, &d_g1_v);
    accumulate(d_s1, d_s1_q);
    accumulate(d_g1, d_g1_k);
    accumulate(d_g1, d_g1_v);
    Tensor d_ga = silu_backward(C.ga, d_g1);
    conv3_backward(P + L.cond1.w, C.cond, d_ga, G + L.cond1.w, G + L.cond1.b, nullptr);
  }
  Tensor d_a1b = silu_backward(C.a1b, d_s1);
  Tensor d_h1;
  conv3_backward(P + L.enc1.w, C.h1, d_a1b, G + L.enc1.w, G + L.enc1.b, &d_h1);
  Tensor d_a1 = silu_backward(C.a1, d_h1);
  const std::vector<float> d_tb1 = channel_sums(d_a1);
  conv3_backward(P + L.conv_in.w, C.input, d_a1, G + L.conv_in.w, G + L.conv_in.b, nullptr);

  std::vector<float> d_hidden1, d_hidden2;
  dense_backward(P + L.temb1.w, C.temb_hidden, d_tb1, G + L.temb1.w, G + L.temb1.b, &d_hidden1);
  dense_backward(P + L.temb2.w, C.temb_hidden, d_tb2, G + L.temb2.w, G + L.temb2.b, &d_hidden2);
  std::vector<float> d_pre(C.temb_pre.size());
  for (std::size_t i = 0; i < d_pre.size(); ++i) {
    const float s = sigmoid(C.temb_pre[i]);
    d_pre[i] = (d_hidden1[i] + d_hidden2[i]) * s * (1.0f + C.temb_pre[i] * (1.0f - s));
  }
  dense_backward(P + L.temb_mlp.w, C.temb, d_pre, G + L.temb_mlp.w, G + L.temb_mlp.b, nullptr);
}

double TinyNetwork::loss_and_grad(std::span<const float> params, const Tensor& x, const Tensor& cond, std::uint32_t t,
                                  const Tensor& target, std::span<float> grads, double weight) const {
  Cache cache;
  const bool want_grad = !grads.empty();
  Tensor out = forward(params, x, cond, t, want_grad ? &cache : nullptr);
  const std::size_t n = out.v.size();
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(out.v[i]) - target.v[i];
    loss += d * d;
  }
  loss /= static_cast<double>(n);
  if (want_grad) {
    Tensor dout(1, out.h, out.w);
    const double s = 2.0 * weight / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      dout.v[i] = static_cast<float>(s * (static_cast<double>(out.v[i]) - target.v[i]));
    }
    backward(params, cache, dout, grads);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

TinyDenoiserWeights init_weights(const TinyArch& arch, std::uint64_t seed) {
  validate_arch(arch);
  const TinyNetwork::Layout layout(arch);
  TinyDenoiserWeights w;
  w.arch = arch;
  w.params.assign(layout.total, 0.0f);
  Rng rng(seed);
  for (std::size_t bi = 0; bi < layout.blocks.size(); ++bi) {
    const auto& blk = layout.blocks[bi];
    // Output layer starts small so the initial prediction is close to zero.
    const double gain = bi + 1 == layout.blocks.size() ? 0.1 : 1.0;
    const double stddev = gain / std::sqrt(static_cast<double>(blk.fan_in));
    for (std::size_t i = blk.w; i < blk.b; ++i) w.params[i] = static_cast<float>(stddev * rng.normal());
  }
  return w;
}

namespace {

struct ByteWriter {
  std::string buf;
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
  }
  void f32(float f) { u32(std::bit_cast<std::uint32_t>(f)); }
  void f64(double d) { u64(std::bit_cast<std::uint64_t>(d)); }
};

struct ByteReader {
  const std::string& buf;
  std::size_t pos = 0;
  void need(std::size_t n) const {
    if (pos + n > buf.size()) throw IoError("weights file truncated");
  }
  std::uint64_t uint(int bytes) {
    need(static_cast<std::size_t>(bytes));
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  std::uint32_t u32() { return static_cast<std::uint32_t>(uint(4)); }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(uint(8)); }
};

}  // namespace

std::string serialize_weights(const TinyDenoiserWeights& w) {
  ByteWriter out;
  out.buf = "PSDW";
  out.u32(TinyDenoiserWeights::kVersion);
  out.u32(static_cast<std::uint32_t>(w.arch.conditioning));
  out.u32(w.arch.width1);
  out.u32(w.arch.width2);
  out.u32(w.arch.heads);
  out.u32(w.arch.window);
  out.u32(w.arch.temb_dim);
  out.u32(static_cast<std::uint32_t>(w.params.size()));
  out.f64(w.transform.s_scale);
  out.f64(w.transform.kappa);
  out.u32(w.train_steps);
  out.f64(w.beta_min);
  out.f64(w.beta_max);
  for (float p : w.params) out.f32(p);
  return out.buf;
}

TinyDenoiserWeights deserialize_weights(const std::string& bytes) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "PSDW") != 0) throw IoError("not a PSDW weights blob");
  ByteReader in{bytes, 4};
  if (in.u32() != TinyDenoiserWeights::kVersion) throw IoError("unsupported PSDW version");
  TinyDenoiserWeights w;
  const std::uint32_t cond = in.u32();
  if (cond > 1) throw IoError("unknown conditioning tag in weights");
  w.arch.conditioning = static_cast<Conditioning>(cond);
  w.arch.width1 = in.u32();
  w.arch.width2 = in.u32();
  w.arch.heads = in.u32();
  w.arch.window = in.u32();
  w.arch.temb_dim = in.u32();
  const std::uint32_t count = in.u32();
  w.transform.s_scale = in.f64();
  w.transform.kappa = in.f64();
  w.train_steps = in.u32();
  w.beta_min = in.f64();
  w.beta_max = in.f64();
  if (count != parameter_count(w.arch)) throw IoError("weights parameter count does not match architecture");
  w.params.resize(count);
  for (auto& p : w.params) p = in.f32();
  if (in.pos != bytes.size()) throw IoError("trailing bytes in weights blob");
  return w;
}

void save_weights(const std::filesystem::path& path, const TinyDenoiserWeights& w) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open weights file for writing: " + path.string());
  const std::string bytes = serialize_weights(w);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

TinyDenoiserWeights load_weights(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open weights file: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_weights(bytes);
}

// ---------------------------------------------------------------------------
// Denoiser adapter
// ---------------------------------------------------------------------------

namespace {

Tensor to_tensor(const GridImage& img) {
  Tensor t(1, static_cast<std::uint32_t>(img.height()), static_cast<std::uint32_t>(img.width()));
  for (std::size_t i = 0; i < img.size(); ++i) t.v[i] = static_cast<float>(img[i]);
  return t;
}

}  // namespace

TinyDenoiser::TinyDenoiser(TinyDenoiserWeights weights)
    : weights_(std::move(weights)),
      net_(weights_.arch),
      sched_(make_schedule(weights_.train_steps, weights_.beta_min, weights_.beta_max)) {
  if (weights_.params.size() != net_.parameter_count()) throw ConfigError("tiny denoiser: weights size mismatch");
}

GridImage TinyDenoiser::predict(const GridImage& x_t, std::uint32_t t, const GridImage& condition) const {
  if (x_t.width() != condition.width() || x_t.height() != condition.height()) {
    throw GeometryError("tiny denoiser: condition grid does not match x_t");
  }
  const Tensor out = net_.forward(weights_.params, to_tensor(x_t), to_tensor(condition), t);
  GridImage eps = GridImage::like(x_t);
  for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = out.v[i];
  eps.require_finite("tiny denoiser output");
  return eps;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

struct PreparedCase {
  Tensor x0;
  Tensor cond;
};

// Crop at (oy, ox) with optional flips.
Tensor crop_flip(const Tensor& src, std::uint32_t oy, std::uint32_t ox, std::uint32_t size, bool flip_y, bool flip_x) {
  Tensor out(1, size, size);
  for (std::uint32_t y = 0; y < size; ++y) {
    const std::uint32_t sy = oy + (flip_y ? size - 1 - y : y);
    for (std::uint32_t x = 0; x < size; ++x) {
      const std::uint32_t sx = ox + (flip_x ? size - 1 - x : x);
      out.v[static_cast<std::size_t>(y) * size + x] = src.v[static_cast<std::size_t>(sy) * src.w + sx];
    }
  }
  return out;
}

}  // namespace

TrainingResult train_tiny_denoiser(const std::vector<TrainingCase>& cases, const TinyArch& arch,
                                   const TrainingConfig& cfg) {
  if (cases.empty()) throw ConfigError("training: no training cases");
  if (cfg.batch == 0 || cfg.log_every == 0) throw ConfigError("training: batch and log_every must be positive");
  const std::size_t grid = cases.front().activity.width();
  for (const auto& c : cases) {
    if (c.activity.width() != grid || c.activity.height() != grid || c.anatomy.width() != grid ||
        c.anatomy.height() != grid) {
      throw ConfigError("training: all cases must share one square grid size");
    }
  }
  const std::uint32_t crop = cfg.crop == 0 || cfg.crop >= grid ? static_cast<std::uint32_t>(grid) : cfg.crop;
  if (crop % 2 != 0) throw ConfigError("training: crop size must be even");

  std::vector<GridImage> activities;
  activities.reserve(cases.size());
  for (const auto& c : cases) activities.push_back(c.activity);
  const TransformParams transform = calibrate_transform(activities, cfg.s_scale);

  std::vector<PreparedCase> data;
  data.reserve(cases.size());
  for (const auto& c : cases) {
    const GridImage x0 = to_model_space(c.activity, transform);
    PreparedCase pc{to_tensor(x0), to_tensor(c.anatomy)};
    data.push_back(std::move(pc));
  }

  const NoiseSchedule sched = make_schedule(cfg.train_steps_T, cfg.beta_min, cfg.beta_max);
  TinyNetwork net(arch);
  TinyDenoiserWeights weights = init_weights(arch, Rng(cfg.seed).derive(1).next_u64());
  weights.transform = transform;
  weights.train_steps = cfg.train_steps_T;
  weights.beta_min = cfg.beta_min;
  weights.beta_max = cfg.beta_max;
  TinyDenoiserWeights last_good = weights;

  const std::size_t n = weights.params.size();
  std::vector<float> grads(n);
  std::vector<double> m(n, 0.0), v(n, 0.0);
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  const std::uint32_t warmup = std::min<std::uint32_t>(100, std::max<std::uint32_t>(1, cfg.steps / 10));

  Rng rng = Rng(cfg.seed).derive(2);
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();

  TrainingResult result;
  double interval_loss = 0.0;
  std::uint32_t interval_count = 0;

  for (std::uint32_t step = 1; step <= cfg.steps; ++step) {
    std::fill(grads.begin(), grads.end(), 0.0f);
    double batch_loss = 0.0;
    for (std::uint32_t b = 0; b < cfg.batch; ++b) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(static_cast<std::uint32_t>(i))]);
        cursor = 0;
      }
      const PreparedCase& pc = data[order[cursor++]];
      const std::uint32_t span = static_cast<std::uint32_t>(grid) - crop + 1;
      const std::uint32_t oy = rng.below(span);
      const std::uint32_t ox = rng.below(span);
      const bool fy = rng.below(2) == 1;
      const bool fx = rng.below(2) == 1;
      const std::uint32_t t = 1 + rng.below(sched.steps());
      const bool drop = rng.uniform() < cfg.cond_dropout;

      const Tensor x0 = crop_flip(pc.x0, oy, ox, crop, fy, fx);
      Tensor cond = drop ? Tensor(1, crop, crop) : crop_flip(pc.cond, oy, ox, crop, fy, fx);
      Tensor noise(1, crop, crop);
      for (float& e : noise.v) e = static_cast<float>(rng.normal());
      const double ab = sched.alpha_bar(t);
      const auto sa = static_cast<float>(std::sqrt(ab));
      const auto sb = static_cast<float>(std::sqrt(1.0 - ab));
      Tensor xt(1, crop, crop);
      for (std::size_t i = 0; i < xt.v.size(); ++i) xt.v[i] = sa * x0.v[i] + sb * noise.v[i];
      batch_loss += net.loss_and_grad(weights.params, xt, cond, t, noise, grads, 1.0 / cfg.batch);
    }
    batch_loss /= cfg.batch;

    if (!std::isfinite(batch_loss)) {
      throw TrainingFailure("training diverged at step " + std::to_string(step) + " (non-finite loss)", last_good);
    }

    double gnorm2 = 0.0;
    for (float g : grads) gnorm2 += static_cast<double>(g) * g;
    const double gnorm = std::sqrt(gnorm2);
    const double clip = cfg.grad_clip > 0.0 && gnorm > cfg.grad_clip ? cfg.grad_clip / gnorm : 1.0;

    const double progress = static_cast<double>(step - 1) / std::max<std::uint32_t>(1, cfg.steps - 1);
    double lr = cfg.learning_rate * (0.1 + 0.9 * 0.5 * (1.0 + std::cos(3.141592653589793 * progress)));
    if (step <= warmup) lr *= static_cast<double>(step) / warmup;
    const double bc1 = 1.0 - std::pow(beta1, step);
    const double bc2 = 1.0 - std::pow(beta2, step);
    for (std::size_t i = 0; i < n; ++i) {
      const double g = grads[i] * clip;
      m[i] = beta1 * m[i] + (1.0 - beta1) * g;
      v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
      const double update = lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + adam_eps);
      weights.params[i] = static_cast<float>(weights.params[i] - update);
    }

    interval_loss += batch_loss;
    ++interval_count;
    if (step % cfg.log_every == 0 || step == cfg.steps) {
      result.loss_log.emplace_back(step, interval_loss / interval_count);
      interval_loss = 0.0;
      interval_count = 0;
      last_good = weights;
    }
  }
  result.weights = std::move(weights);
  return result;
}

std::vector<TrainingCase> load_cases(const std::filesystem::path& manifest, std::string_view split) {
  const auto entries = read_manifest(manifest);
  const auto root = manifest.parent_path();
  std::vector<TrainingCase> cases;
  for (const auto& e : entries) {
    if (e.split != split) continue;
    cases.push_back({read_grid(root / e.activity), read_grid(root / e.anatomy)});
  }
  return cases;
}

TrainingResult train_tiny_denoiser(const std::filesystem::path& manifest, const TinyArch& arch,
                                   const TrainingConfig& cfg) {
  return train_tiny_denoiser(load_cases(manifest, "train"), arch, cfg);
}

void write_loss_log(const std::filesystem::path& path, const std::vector<std::pair<std::uint32_t, double>>& log) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot open loss log for writing: " + path.string());
  out << "step,loss\n";
  out.precision(9);
  for (const auto& [step, loss] : log) out << step << ',' << loss << '\n';
  if (!out) throw IoError("write failed: " + path.string());
}

DenoisingScore denoising_score(const Denoiser& denoiser, const TransformParams& transform,
                               const std::vector<TrainingCase>& cases, std::uint32_t t, std::uint64_t seed) {
  DenoisingScore score;
  std::size_t count = 0;
  const Rng base(seed);
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const GridImage x0 = to_model_space(cases[i].activity, transform);
    Rng rng = base.derive(i);
    GridImage noise = GridImage::like(x0);
    for (double& e : noise.values()) e = rng.normal();
    const GridImage xt = add_noise(x0, t, denoiser.schedule(), noise);
    const GridImage eps = denoiser.predict(xt, t, cases[i].anatomy);
    for (std::size_t p = 0; p < eps.size(); ++p) {
      score.mse += (eps[p] - noise[p]) * (eps[p] - noise[p]);
      score.zero_baseline += noise[p] * noise[p];
    }
    count += eps.size();
  }
  if (count > 0) {
    score.mse /= static_cast<double>(count);
    score.zero_baseline /= static_cast<double>(count);
  }
  return score;
}

}  // namespace petsr
