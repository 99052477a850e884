#include <doctest.h>

#include <cmath>
#include <random>

#include "oracles.hpp"
#include "uslseg/nn/layers.hpp"
#include "uslseg/nn/optim.hpp"
#include "uslseg/nn/resnet.hpp"

using namespace uslseg;

namespace {

Tensor random_tensor(std::mt19937_64& rng, int n, int c, int h, int w) {
  std::normal_distribution<float> d(0.0f, 1.0f);
  Tensor t(n, c, h, w);
  for (auto& v : t.data) v = d(rng);
  return t;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a.data[i]) * b.data[i];
  return s;
}

// Direct convolution loop, zero padding.
Tensor conv_oracle(const Tensor& x, const std::vector<float>& w, const std::vector<float>& b, int out, int k, int stride,
                   int pad) {
  const int oh = (x.h() + 2 * pad - k) / stride + 1, ow = (x.w() + 2 * pad - k) / stride + 1;
  Tensor y(x.n(), out, oh, ow);
  for (int n = 0; n < x.n(); ++n)
    for (int o = 0; o < out; ++o)
      for (int r = 0; r < oh; ++r)
        for (int c = 0; c < ow; ++c) {
          double s = b.empty() ? 0.0 : b[o];
          for (int ci = 0; ci < x.c(); ++ci)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const int yy = r * stride - pad + ky, xx = c * stride - pad + kx;
                if (yy < 0 || xx < 0 || yy >= x.h() || xx >= x.w()) continue;
                s += w[((o * x.c() + ci) * k + ky) * k + kx] * x.at(n, ci, yy, xx);
              }
          y.at(n, o, r, c) = static_cast<float>(s);
        }
  return y;
}

}  // namespace

TEST_CASE("convolution matches a direct loop") {
  std::mt19937_64 rng(1);
  for (auto [k, stride, pad] : {std::tuple{3, 1, 1}, std::tuple{3, 2, 1}, std::tuple{1, 1, 0}, std::tuple{7, 2, 3}}) {
    nn::Conv2d conv("c", 3, 5, k, stride, pad, true, rng);
    for (auto& v : conv.bias().value) v = std::normal_distribution<float>(0, 1)(rng);
    const Tensor x = random_tensor(rng, 2, 3, 9, 11);
    const Tensor y = conv.forward(x);
    const Tensor ref = conv_oracle(x, conv.weight().value, conv.bias().value, 5, k, stride, pad);
    REQUIRE(y.same_shape(ref));
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-4));
  }
}

TEST_CASE("convolution gradients match central differences") {
  std::mt19937_64 rng(2);
  nn::Conv2d conv("c", 2, 3, 3, 2, 1, true, rng);
  Tensor x = random_tensor(rng, 2, 2, 7, 6);
  const Tensor y0 = conv.forward(x);
  const Tensor g = random_tensor(rng, y0.n(), y0.c(), y0.h(), y0.w());
  conv.zero_grad();
  conv.forward(x);
  const Tensor dx = conv.backward(g);
  auto objective = [&] { return dot(conv.forward(x), g); };
  const double h = 1e-2;
  for (std::size_t i = 0; i < x.size(); i += 5) {
    const float keep = x.data[i];
    x.data[i] = keep + h;
    const double up = objective();
    x.data[i] = keep - h;
    const double dn = objective();
    x.data[i] = keep;
    CHECK(dx.data[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(2e-3));
  }
  auto& w = conv.weight();
  for (std::size_t i = 0; i < w.value.size(); i += 3) {
    const float keep = w.value[i];
    w.value[i] = keep + h;
    const double up = objective();
    w.value[i] = keep - h;
    const double dn = objective();
    w.value[i] = keep;
    CHECK(w.grad[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(2e-3));
  }
}

TEST_CASE("batch norm training gradients match central differences") {
  std::mt19937_64 rng(3);
  nn::BatchNorm2d bn("bn", 3);
  for (auto& v : bn.gamma().value) v = 0.5f + std::uniform_real_distribution<float>(0, 1)(rng);
  Tensor x = random_tensor(rng, 4, 3, 3, 3);
  const Tensor g = random_tensor(rng, 4, 3, 3, 3);
  bn.forward(x, true);
  const Tensor dx = bn.backward(g);
  auto objective = [&] { return dot(bn.forward(x, true), g); };
  const double h = 1e-2;
  for (std::size_t i = 0; i < x.size(); i += 4) {
    const float keep = x.data[i];
    x.data[i] = keep + h;
    const double up = objective();
    x.data[i] = keep - h;
    const double dn = objective();
    x.data[i] = keep;
    CHECK(dx.data[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(5e-3).scale(1.0));
  }
}

TEST_CASE("batch norm eval mode uses running statistics") {
  nn::BatchNorm2d bn("bn", 1);
  Tensor x(2, 1, 1, 2);
  x.data = {1, 2, 3, 4};
  bn.forward(x, true);
  const auto bufs = bn.buffers();
  REQUIRE(bufs.size() == 2);
  CHECK((*bufs[0].values)[0] == doctest::Approx(0.25));                  // 0.9*0 + 0.1*2.5
  CHECK((*bufs[1].values)[0] == doctest::Approx(0.9 + 0.1 * 5.0 / 3.0));  // unbiased variance
  const Tensor y = bn.forward(x, false);
  CHECK(y.data[0] == doctest::Approx((1 - 0.25) / std::sqrt(0.9 + 0.1 * 5.0 / 3.0 + 1e-5)).epsilon(1e-5));
}

TEST_CASE("bilinear upsampling and its backward are adjoint") {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor(rng, 2, 3, 7, 5);
  const Tensor y = nn::upsample_bilinear(x, 28, 19);
  const Tensor g = random_tensor(rng, 2, 3, 28, 19);
  const Tensor gx = nn::upsample_bilinear_backward(g, 7, 5);
  CHECK(dot(y, g) == doctest::Approx(dot(x, gx)).epsilon(1e-5));
}

TEST_CASE("bilinear upsampling of a constant stays constant and same size is identity") {
  Tensor c(1, 1, 3, 4, 0.25f);
  for (float v : nn::upsample_bilinear(c, 17, 9).data) CHECK(v == doctest::Approx(0.25f));
  std::mt19937_64 rng(5);
  const Tensor x = random_tensor(rng, 1, 2, 6, 6);
  CHECK(nn::upsample_bilinear(x, 6, 6).data == x.data);
}

TEST_CASE("linear layer gradients match central differences") {
  std::mt19937_64 rng(6);
  nn::Linear fc("fc", 4, 3, true, rng);
  Tensor x = random_tensor(rng, 2, 4, 1, 1);
  const Tensor g = random_tensor(rng, 2, 3, 1, 1);
  fc.zero_grad();
  fc.forward(x);
  const Tensor dx = fc.backward(g);
  const double h = 1e-2;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = x.data[i];
    x.data[i] = keep + h;
    const double up = dot(fc.forward(x), g);
    x.data[i] = keep - h;
    const double dn = dot(fc.forward(x), g);
    x.data[i] = keep;
    CHECK(dx.data[i] == doctest::Approx((up - dn) / (2 * h)).epsilon(1e-3));
  }
}

TEST_CASE("max pooling routes gradients to the argmax") {
  Tensor x(1, 1, 4, 4);
  for (int i = 0; i < 16; ++i) x.data[i] = static_cast<float>(i);
  nn::MaxPool2d pool(3, 2, 1);
  const Tensor y = pool.forward(x);
  REQUIRE(y.h() == 2);
  CHECK(y.data == std::vector<float>{5, 7, 13, 15});
  const Tensor dx = pool.backward(Tensor(1, 1, 2, 2, 1.0f));
  double total = 0;
  for (float v : dx.data) total += v;
  CHECK(total == 4.0);
  CHECK(dx.data[15] == 1.0f);
}

TEST_CASE("backbone stage shapes follow the downsampling schedule") {
  nn::Rng rng(7);
  nn::BackboneConfig cfg{8, {1, 1, 1, 1}, 1, 5};
  nn::ResNet net(cfg, rng);
  const auto outs = net.forward(Tensor(1, 3, 224, 224, 0.5f), false);
  REQUIRE(outs.size() == 4);
  CHECK(outs[0].shape == std::array<int, 4>{1, 32, 56, 56});
  CHECK(outs[1].shape == std::array<int, 4>{1, 64, 28, 28});
  CHECK(outs[2].shape == std::array<int, 4>{1, 128, 14, 14});
  CHECK(outs[3].shape == std::array<int, 4>{1, 256, 14, 14});
  cfg.final_stage_stride = 2;
  nn::ResNet strided(cfg, rng);
  CHECK(strided.forward(Tensor(1, 3, 224, 224, 0.5f), false)[3].h() == 7);
}

TEST_CASE("sgd applies momentum and decoupled decay flags") {
  nn::Param p{"w", {1.0f}, {0.5f}, true};
  nn::Param q{"b", {1.0f}, {0.5f}, false};
  nn::Sgd sgd({&p, &q}, {0.1, 0.9, 0.01});
  sgd.step(0.1);
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * (0.5 + 0.01)));
  CHECK(q.value[0] == doctest::Approx(1.0 - 0.1 * 0.5));
  sgd.step(0.1);
  const double v2 = 0.9 * 0.51 + 0.5 + 0.01 * (1.0 - 0.1 * 0.51);
  CHECK(p.value[0] == doctest::Approx(1.0 - 0.1 * 0.51 - 0.1 * v2));
}

TEST_CASE("learning rate schedules hit their endpoints") {
  CHECK(nn::cosine_lr(0.1, 0, 100) == doctest::Approx(0.1));
  CHECK(nn::cosine_lr(0.1, 50, 100) == doctest::Approx(0.05));
  CHECK(nn::poly_lr(0.01, 0, 100) == doctest::Approx(0.01));
  CHECK(nn::poly_lr(0.01, 50, 100) == doctest::Approx(0.01 * std::pow(0.5, 0.9)));
}

TEST_CASE("weights round-trip through the binary blob") {
  nn::Rng rng(8);
  nn::BackboneConfig cfg{4, {1, 1, 1, 1}, 1, 5};
  nn::ResNet a(cfg, rng), b(cfg, rng);
  a.forward(Tensor(2, 3, 64, 64, 0.3f), true);  // moves running stats
  const auto dir = oracle::temp_dir("weights");
  nn::save_weights(a, dir / "w.bin");
  nn::load_weights(b, dir / "w.bin");
  const auto pa = a.params(), pb = b.params();
  REQUIRE(pa.size() == pb.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->value == pb[i]->value);
  const auto ba = a.buffers(), bb = b.buffers();
  for (std::size_t i = 0; i < ba.size(); ++i) CHECK(*ba[i].values == *bb[i].values);
  std::filesystem::remove_all(dir);
}
