#include "uslseg/nn/layers.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

#include "uslseg/errors.hpp"

namespace uslseg::nn {

namespace {

using MatRM = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<MatRM>;
using CMapRM = Eigen::Map<const MatRM>;

void im2col(const float* img, int ch, int h, int w, int k, int stride, int pad, int oh, int ow, float* col) {
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < ch; ++c) {
    const float* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          float* dst = row + static_cast<std::size_t>(oy) * ow;
          if (iy < 0 || iy >= h) {
            std::fill_n(dst, ow, 0.0f);
            continue;
          }
          const float* src = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            dst[ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0f;
          }
        }
      }
    }
  }
}

void col2im(const float* col, int ch, int h, int w, int k, int stride, int pad, int oh, int ow, float* img) {
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  for (int c = 0; c < ch; ++c) {
    float* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const float* row = col + (static_cast<std::size_t>(c) * k * k + ky * k + kx) * cols;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = row + static_cast<std::size_t>(oy) * ow;
          float* dst = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

struct Taps {
  std::vector<int> i0, i1;
  std::vector<float> frac;
};

Taps bilinear_taps(int in, int out) {
  Taps t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.frac.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int i = 0; i < out; ++i) {
    double src = (i + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.i0[i] = lo;
    t.i1[i] = std::min(lo + 1, in - 1);
    t.frac[i] = static_cast<float>(src - lo);
  }
  return t;
}

}  // namespace

std::vector<Param*> Module::params() {
  std::vector<Param*> out;
  collect_params(out);
  return out;
}

std::vector<Buffer> Module::buffers() {
  std::vector<Buffer> out;
  collect_buffers(out);
  return out;
}

void Module::zero_grad() {
  for (Param* p : params()) p->zero_grad();
}

void kaiming_normal(std::vector<float>& w, int fan_out, Rng& rng) {
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / static_cast<float>(fan_out)));
  for (auto& v : w) v = dist(rng);
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad, bool bias, Rng& rng)
    : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(pad), has_bias_(bias) {
  const std::size_t fan = static_cast<std::size_t>(in_ch) * kernel * kernel;
  weight_.name = name + ".weight";
  weight_.value.resize(fan * out_ch);
  weight_.grad.assign(weight_.value.size(), 0.0f);
  kaiming_normal(weight_.value, out_ch * kernel * kernel, rng);
  if (has_bias_) {
    bias_.name = name + ".bias";
    bias_.value.assign(out_ch, 0.0f);
    bias_.grad.assign(out_ch, 0.0f);
    bias_.decay = false;
  }
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c() != in_) throw ShapeError("conv " + weight_.name + ": expected " + std::to_string(in_) + " channels, got " + x.shape_str());
  input_ = x;
  const int oh = out_size(x.h()), ow = out_size(x.w());
  Tensor y(x.n(), out_, oh, ow);
  const int kdim = in_ * k_ * k_;
  const bool direct = (k_ == 1 && stride_ == 1 && pad_ == 0);
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(kdim) * oh * ow);
  CMapRM wmat(weight_.value.data(), out_, kdim);
  for (int i = 0; i < x.n(); ++i) {
    const float* cptr = x.sample(i);
    if (!direct) {
      im2col(x.sample(i), in_, x.h(), x.w(), k_, stride_, pad_, oh, ow, col.data());
      cptr = col.data();
    }
    CMapRM cmat(cptr, kdim, static_cast<Eigen::Index>(oh) * ow);
    MapRM ymat(y.sample(i), out_, static_cast<Eigen::Index>(oh) * ow);
    ymat.noalias() = wmat * cmat;
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) ymat.row(o).array() += bias_.value[o];
    }
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, bool input_grad) {
  const Tensor& x = input_;
  const int oh = grad_out.h(), ow = grad_out.w();
  const int kdim = in_ * k_ * k_;
  const bool direct = (k_ == 1 && stride_ == 1 && pad_ == 0);
  Tensor dx = input_grad ? Tensor(x.n(), x.c(), x.h(), x.w()) : Tensor();
  std::vector<float> col(direct ? 0 : static_cast<std::size_t>(kdim) * oh * ow);
  std::vector<float> dcol(direct ? 0 : col.size());
  CMapRM wmat(weight_.value.data(), out_, kdim);
  MapRM dw(weight_.grad.data(), out_, kdim);
  for (int i = 0; i < x.n(); ++i) {
    const float* cptr = x.sample(i);
    if (!direct) {
      im2col(x.sample(i), in_, x.h(), x.w(), k_, stride_, pad_, oh, ow, col.data());
      cptr = col.data();
    }
    CMapRM cmat(cptr, kdim, static_cast<Eigen::Index>(oh) * ow);
    CMapRM gmat(grad_out.sample(i), out_, static_cast<Eigen::Index>(oh) * ow);
    dw.noalias() += gmat * cmat.transpose();
    if (has_bias_) {
      const Eigen::Index cols = gmat.cols();
      for (int o = 0; o < out_; ++o) {
        const float* g = grad_out.sample(i) + o * cols;
        float s = 0.0f;
        for (Eigen::Index j = 0; j < cols; ++j) s += g[j];
        bias_.grad[o] += s;
      }
    }
    if (!input_grad) continue;
    if (direct) {
      MapRM dxmat(dx.sample(i), kdim, static_cast<Eigen::Index>(oh) * ow);
      dxmat.noalias() = wmat.transpose() * gmat;
    } else {
      MapRM dcmat(dcol.data(), kdim, static_cast<Eigen::Index>(oh) * ow);
      dcmat.noalias() = wmat.transpose() * gmat;
      col2im(dcol.data(), in_, x.h(), x.w(), k_, stride_, pad_, oh, ow, dx.sample(i));
    }
  }
  return dx;
}

// ---------------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(std::string name, int channels) : channels_(channels), name_(std::move(name)) {
  gamma_.name = name_ + ".gamma";
  gamma_.value.assign(channels, 1.0f);
  gamma_.grad.assign(channels, 0.0f);
  gamma_.decay = false;
  beta_.name = name_ + ".beta";
  beta_.value.assign(channels, 0.0f);
  beta_.grad.assign(channels, 0.0f);
  beta_.decay = false;
  running_mean_.assign(channels, 0.0f);
  running_var_.assign(channels, 1.0f);
}

void BatchNorm2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
}

void BatchNorm2d::collect_buffers(std::vector<Buffer>& out) {
  out.push_back({name_ + ".running_mean", &running_mean_});
  out.push_back({name_ + ".running_var", &running_var_});
}

Tensor BatchNorm2d::forward(const Tensor& x, bool train) {
  if (x.c() != channels_) throw ShapeError("batchnorm " + name_ + ": channel mismatch " + x.shape_str());
  Tensor y(x.n(), x.c(), x.h(), x.w());
  const std::size_t plane = x.plane();
  last_train_ = train;
  inv_std_.assign(channels_, 0.0f);
  if (train) {
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    const double count = static_cast<double>(x.n()) * plane;
    for (int c = 0; c < channels_; ++c) {
      double sum = 0.0;
      for (int i = 0; i < x.n(); ++i) {
        const float* p = x.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) sum += p[j];
      }
      const double mean = sum / count;
      double sq = 0.0;
      for (int i = 0; i < x.n(); ++i) {
        const float* p = x.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          const double d = p[j] - mean;
          sq += d * d;
        }
      }
      const double var = sq / count;
      const float inv = static_cast<float>(1.0 / std::sqrt(var + eps_));
      inv_std_[c] = inv;
      const float m = static_cast<float>(mean);
      for (int i = 0; i < x.n(); ++i) {
        const float* p = x.channel(i, c);
        float* h = xhat_.channel(i, c);
        float* o = y.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) {
          h[j] = (p[j] - m) * inv;
          o[j] = h[j] * gamma_.value[c] + beta_.value[c];
        }
      }
      const double unbiased = count > 1 ? sq / (count - 1) : var;
      running_mean_[c] = static_cast<float>((1 - momentum_) * running_mean_[c] + momentum_ * mean);
      running_var_[c] = static_cast<float>((1 - momentum_) * running_var_[c] + momentum_ * unbiased);
    }
  } else {
    for (int c = 0; c < channels_; ++c) {
      const float inv = 1.0f / std::sqrt(running_var_[c] + eps_);
      inv_std_[c] = inv;
      const float scale = gamma_.value[c] * inv;
      const float shift = beta_.value[c] - running_mean_[c] * scale;
      for (int i = 0; i < x.n(); ++i) {
        const float* p = x.channel(i, c);
        float* o = y.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) o[j] = p[j] * scale + shift;
      }
    }
  }
  return y;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  Tensor dx(grad_out.n(), grad_out.c(), grad_out.h(), grad_out.w());
  const std::size_t plane = grad_out.plane();
  if (!last_train_) {
    for (int c = 0; c < channels_; ++c) {
      const float s = gamma_.value[c] * inv_std_[c];
      for (int i = 0; i < grad_out.n(); ++i) {
        const float* g = grad_out.channel(i, c);
        float* d = dx.channel(i, c);
        for (std::size_t j = 0; j < plane; ++j) d[j] = g[j] * s;
      }
    }
    return dx;
  }
  const double count = static_cast<double>(grad_out.n()) * plane;
  for (int c = 0; c < channels_; ++c) {
    double sum_g = 0.0, sum_gx = 0.0;
    for (int i = 0; i < grad_out.n(); ++i) {
      const float* g = grad_out.channel(i, c);
      const float* h = xhat_.channel(i, c);
      for (std::size_t j = 0; j < plane; ++j) {
        sum_g += g[j];
        sum_gx += static_cast<double>(g[j]) * h[j];
      }
    }
    gamma_.grad[c] += static_cast<float>(sum_gx);
    beta_.grad[c] += static_cast<float>(sum_g);
    const float k = gamma_.value[c] * inv_std_[c];
    const float mean_g = static_cast<float>(sum_g / count);
    const float mean_gx = static_cast<float>(sum_gx / count);
    for (int i = 0; i < grad_out.n(); ++i) {
      const float* g = grad_out.channel(i, c);
      const float* h = xhat_.channel(i, c);
      float* d = dx.channel(i, c);
      for (std::size_t j = 0; j < plane; ++j) d[j] = k * (g[j] - mean_g - h[j] * mean_gx);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- ReLU / pooling

Tensor ReLU::forward(const Tensor& x) {
  out_ = x;
  for (auto& v : out_.data) v = v > 0.0f ? v : 0.0f;
  return out_;
}

Tensor ReLU::backward(const Tensor& grad_out) const {
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (out_.data[i] <= 0.0f) dx.data[i] = 0.0f;
  return dx;
}

Tensor MaxPool2d::forward(const Tensor& x) {
  in_shape_ = x.shape;
  const int oh = (x.h() + 2 * pad_ - k_) / stride_ + 1;
  const int ow = (x.w() + 2 * pad_ - k_) / stride_ + 1;
  Tensor y(x.n(), x.c(), oh, ow);
  argmax_.assign(y.size(), -1);
  std::size_t o = 0;
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const float* p = x.channel(i, c);
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          int arg = -1;
          for (int ky = 0; ky < k_; ++ky) {
            const int iy = oy * stride_ - pad_ + ky;
            if (iy < 0 || iy >= x.h()) continue;
            for (int kx = 0; kx < k_; ++kx) {
              const int ix = ox * stride_ - pad_ + kx;
              if (ix < 0 || ix >= x.w()) continue;
              const float v = p[iy * x.w() + ix];
              if (v > best) {
                best = v;
                arg = iy * x.w() + ix;
              }
            }
          }
          y.data[o] = best;
          argmax_[o] = arg;
        }
      }
    }
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) const {
  Tensor dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
  std::size_t o = 0;
  for (int i = 0; i < grad_out.n(); ++i) {
    for (int c = 0; c < grad_out.c(); ++c) {
      float* d = dx.channel(i, c);
      for (std::size_t j = 0; j < grad_out.plane(); ++j, ++o) d[argmax_[o]] += grad_out.data[o];
    }
  }
  return dx;
}

Tensor global_avg_pool(const Tensor& x) {
  Tensor y(x.n(), x.c(), 1, 1);
  const std::size_t plane = x.plane();
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const float* p = x.channel(i, c);
      double s = 0.0;
      for (std::size_t j = 0; j < plane; ++j) s += p[j];
      y.at(i, c, 0, 0) = static_cast<float>(s / plane);
    }
  }
  return y;
}

Tensor global_avg_pool_backward(const Tensor& grad_out, int h, int w) {
  Tensor dx(grad_out.n(), grad_out.c(), h, w);
  const float inv = 1.0f / static_cast<float>(h * w);
  for (int i = 0; i < grad_out.n(); ++i) {
    for (int c = 0; c < grad_out.c(); ++c) {
      const float g = grad_out.at(i, c, 0, 0) * inv;
      std::fill_n(dx.channel(i, c), dx.plane(), g);
    }
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(std::string name, int in_features, int out_features, bool bias, Rng& rng)
    : in_(in_features), out_(out_features), has_bias_(bias) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_features));
  std::uniform_real_distribution<float> dist(-bound, bound);
  weight_.name = name + ".weight";
  weight_.value.resize(static_cast<std::size_t>(in_features) * out_features);
  for (auto& v : weight_.value) v = dist(rng);
  weight_.grad.assign(weight_.value.size(), 0.0f);
  if (has_bias_) {
    bias_.name = name + ".bias";
    bias_.value.resize(out_features);
    for (auto& v : bias_.value) v = dist(rng);
    bias_.grad.assign(out_features, 0.0f);
    bias_.decay = false;
  }
}

void Linear::collect_params(std::vector<Param*>& out) {
  out.push_back(&weight_);
  if (has_bias_) out.push_back(&bias_);
}

Tensor Linear::forward(const Tensor& x) {
  if (x.sample_size() != static_cast<std::size_t>(in_))
    throw ShapeError("linear " + weight_.name + ": expected " + std::to_string(in_) + " features, got " + x.shape_str());
  input_ = x;
  Tensor y(x.n(), out_, 1, 1);
  CMapRM xm(x.data.data(), x.n(), in_);
  CMapRM wm(weight_.value.data(), out_, in_);
  MapRM ym(y.data.data(), x.n(), out_);
  ym.noalias() = xm * wm.transpose();
  if (has_bias_) {
    for (int i = 0; i < x.n(); ++i)
      for (int o = 0; o < out_; ++o) ym(i, o) += bias_.value[o];
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  Tensor dx(input_.n(), input_.c(), input_.h(), input_.w());
  CMapRM xm(input_.data.data(), input_.n(), in_);
  CMapRM wm(weight_.value.data(), out_, in_);
  CMapRM gm(grad_out.data.data(), grad_out.n(), out_);
  MapRM dw(weight_.grad.data(), out_, in_);
  dw.noalias() += gm.transpose() * xm;
  if (has_bias_) {
    for (int i = 0; i < grad_out.n(); ++i)
      for (int o = 0; o < out_; ++o) bias_.grad[o] += gm(i, o);
  }
  MapRM dxm(dx.data.data(), input_.n(), in_);
  dxm.noalias() = gm * wm;
  return dx;
}

// ---------------------------------------------------------------- resampling

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
  const Taps ty = bilinear_taps(x.h(), out_h);
  const Taps tx = bilinear_taps(x.w(), out_w);
  Tensor y(x.n(), x.c(), out_h, out_w);
  for (int i = 0; i < x.n(); ++i) {
    for (int c = 0; c < x.c(); ++c) {
      const float* p = x.channel(i, c);
      float* o = y.channel(i, c);
      for (int oy = 0; oy < out_h; ++oy) {
        const float* r0 = p + static_cast<std::size_t>(ty.i0[oy]) * x.w();
        const float* r1 = p + static_cast<std::size_t>(ty.i1[oy]) * x.w();
        const float fy = ty.frac[oy];
        for (int ox = 0; ox < out_w; ++ox) {
          const float fx = tx.frac[ox];
          const float top = r0[tx.i0[ox]] + (r0[tx.i1[ox]] - r0[tx.i0[ox]]) * fx;
          const float bot = r1[tx.i0[ox]] + (r1[tx.i1[ox]] - r1[tx.i0[ox]]) * fx;
          o[static_cast<std::size_t>(oy) * out_w + ox] = top + (bot - top) * fy;
        }
      }
    }
  }
  return y;
}

Tensor upsample_bilinear_backward(const Tensor& grad_out, int in_h, int in_w) {
  const Taps ty = bilinear_taps(in_h, grad_out.h());
  const Taps tx = bilinear_taps(in_w, grad_out.w());
  Tensor dx(grad_out.n(), grad_out.c(), in_h, in_w);
  for (int i = 0; i < grad_out.n(); ++i) {
    for (int c = 0; c < grad_out.c(); ++c) {
      const float* g = grad_out.channel(i, c);
      float* d = dx.channel(i, c);
      for (int oy = 0; oy < grad_out.h(); ++oy) {
        float* r0 = d + static_cast<std::size_t>(ty.i0[oy]) * in_w;
        float* r1 = d + static_cast<std::size_t>(ty.i1[oy]) * in_w;
        const float fy = ty.frac[oy];
        for (int ox = 0; ox < grad_out.w(); ++ox) {
          const float v = g[static_cast<std::size_t>(oy) * grad_out.w() + ox];
          const float fx = tx.frac[ox];
          r0[tx.i0[ox]] += v * (1 - fy) * (1 - fx);
          r0[tx.i1[ox]] += v * (1 - fy) * fx;
          r1[tx.i0[ox]] += v * fy * (1 - fx);
          r1[tx.i1[ox]] += v * fy * fx;
        }
      }
    }
  }
  return dx;
}

float sigmoid(float z) {
  if (z >= 0) return 1.0f / (1.0f + std::exp(-z));
  const float e = std::exp(z);
  return e / (1.0f + e);
}

Tensor sigmoid(const Tensor& z) {
  Tensor p = z;
  for (auto& v : p.data) v = sigmoid(v);
  return p;
}

void add_inplace(Tensor& dst, const Tensor& src) {
  if (!dst.same_shape(src)) throw ShapeError("add: " + dst.shape_str() + " vs " + src.shape_str());
  for (std::size_t i = 0; i < dst.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace uslseg::nn
