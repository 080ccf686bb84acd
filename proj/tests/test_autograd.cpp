#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "msgdn/autograd.hpp"
#include "test_support.hpp"

using namespace msgdn;
using namespace msgdn::autograd;
using msgdn::testing::grad_check;
using msgdn::testing::sample_coords;

TEST_CASE("elementwise ops forward values") {
  Tensor4 a(1, 1, 1, 3);
  a.data = {-1.0, 0.0, 2.0};
  Tensor4 b(1, 1, 1, 3);
  b.data = {0.5, -2.0, 1.5};
  Var va = Var::leaf(a), vb = Var::leaf(b);

  CHECK(add(va, vb).value().data == std::vector<double>{-0.5, -2.0, 3.5});
  CHECK(sub(va, vb).value().data == std::vector<double>{-1.5, 2.0, 0.5});
  CHECK(mul(va, vb).value().data == std::vector<double>{-0.5, 0.0, 3.0});
  CHECK(relu(va).value().data == std::vector<double>{0.0, 0.0, 2.0});
  CHECK(leaky_relu(va, 0.1).value().data == std::vector<double>{-0.1, 0.0, 2.0});
  CHECK(scale(va, 2.0).value().data == std::vector<double>{-2.0, 0.0, 4.0});
  CHECK(mean_all(va).value().data[0] == doctest::Approx(1.0 / 3.0));
  CHECK(mean_abs(va).value().data[0] == doctest::Approx(1.0));
  CHECK(mean_square(va).value().data[0] == doctest::Approx(5.0 / 3.0));
}

TEST_CASE("softplus matches naive formula and stays finite at extremes") {
  Tensor4 x(1, 1, 1, 4);
  x.data = {-3.0, 0.0, 4.0, 1e4};
  Var v = Var::leaf(x);
  const std::vector<double> out = softplus(v).value().data;
  CHECK(out[0] == doctest::Approx(std::log(1.0 + std::exp(-3.0))));
  CHECK(out[1] == doctest::Approx(std::log(2.0)));
  CHECK(out[2] == doctest::Approx(std::log(1.0 + std::exp(4.0))));
  CHECK(out[3] == doctest::Approx(1e4));
  CHECK(std::isfinite(out[3]));
}

TEST_CASE("conv2d matches hand computation on a 1x1 kernel") {
  Tensor4 x(1, 2, 2, 2);
  x.data = {1, 2, 3, 4, 5, 6, 7, 8};
  Tensor4 w(1, 2, 1, 1);
  w.data = {2.0, -1.0};
  Tensor4 b(1, 1, 1, 1);
  b.data = {0.5};
  Var out = conv2d(Var::leaf(x), Var::leaf(w), Var::leaf(b), 1, 0);
  // out = 2*plane0 - plane1 + 0.5
  CHECK(out.value().data == std::vector<double>{-2.5, -1.5, -0.5, 0.5});
}

TEST_CASE("conv2d stride and padding shapes") {
  Rng rng(7);
  Tensor4 x = Tensor4::randn(2, 3, 8, 10, rng);
  Tensor4 w = Tensor4::randn(4, 3, 3, 3, rng);
  Tensor4 b = Tensor4::zeros(1, 4, 1, 1);
  Var same = conv2d(Var::leaf(x), Var::leaf(w), Var::leaf(b), 1, 1);
  CHECK(same.value().h == 8);
  CHECK(same.value().w == 10);
  Var down = conv2d(Var::leaf(x), Var::leaf(w), Var::leaf(b), 2, 1);
  CHECK(down.value().h == 4);
  CHECK(down.value().w == 5);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(11);
  Tensor4 xv = Tensor4::randn(2, 3, 5, 6, rng);
  Tensor4 wv = Tensor4::randn(4, 3, 3, 3, rng, 0.3);
  Tensor4 bv = Tensor4::randn(1, 4, 1, 1, rng, 0.1);
  Var x = Var::leaf(xv, true), w = Var::leaf(wv, true), b = Var::leaf(bv, true);
  auto loss = [&] { return mean_square(conv2d(x, w, b, 1, 1)); };

  auto cw = grad_check(w, loss, sample_coords(wv.size(), 20, rng));
  CHECK(cw.max_rel_err < 1e-6);
  auto cx = grad_check(x, loss, sample_coords(xv.size(), 20, rng));
  CHECK(cx.max_rel_err < 1e-6);
  auto cb = grad_check(b, loss, {0, 1, 2, 3});
  CHECK(cb.max_rel_err < 1e-6);

  auto strided = [&] { return mean_square(conv2d(x, w, b, 2, 1)); };
  auto cs = grad_check(w, strided, sample_coords(wv.size(), 20, rng));
  CHECK(cs.max_rel_err < 1e-6);
}

TEST_CASE("conv_transpose2x inverts shapes and differentiates") {
  Rng rng(13);
  Tensor4 xv = Tensor4::randn(1, 3, 4, 5, rng);
  Tensor4 wv = Tensor4::randn(3, 2, 2, 2, rng, 0.4);
  Tensor4 bv = Tensor4::zeros(1, 2, 1, 1);
  Var x = Var::leaf(xv, true), w = Var::leaf(wv, true), b = Var::leaf(bv, true);
  Var up = conv_transpose2x(x, w, b);
  CHECK(up.value().h == 8);
  CHECK(up.value().w == 10);
  CHECK(up.value().c == 2);
  auto loss = [&] { return mean_square(conv_transpose2x(x, w, b)); };
  CHECK(grad_check(w, loss, sample_coords(wv.size(), 16, rng)).max_rel_err < 1e-6);
  CHECK(grad_check(x, loss, sample_coords(xv.size(), 16, rng)).max_rel_err < 1e-6);
}

TEST_CASE("maxpool2x2 picks maxima and routes gradients") {
  Tensor4 x(1, 1, 2, 4);
  x.data = {1, 5, 2, 2, 3, 0, 2, 7};
  Var v = Var::leaf(x, true);
  Var pooled = maxpool2x2(v);
  CHECK(pooled.value().data == std::vector<double>{5, 7});
  backward(mean_all(pooled));
  CHECK(v.grad().data == std::vector<double>{0, 0.5, 0, 0, 0, 0, 0, 0.5});
}

TEST_CASE("bilinear upsample doubles size, preserves constants, differentiates") {
  Rng rng(17);
  Tensor4 c = Tensor4::full(1, 2, 3, 3, 0.7);
  Var vc = Var::leaf(c);
  Var up = upsample_bilinear2x(vc);
  CHECK(up.value().h == 6);
  for (double v : up.value().data) CHECK(v == doctest::Approx(0.7));

  Tensor4 xv = Tensor4::randn(1, 2, 3, 4, rng);
  Var x = Var::leaf(xv, true);
  auto loss = [&] { return mean_square(upsample_bilinear2x(x)); };
  CHECK(grad_check(x, loss, sample_coords(xv.size(), 12, rng)).max_rel_err < 1e-6);
}

TEST_CASE("reflect_pad_br mirrors and folds gradients back") {
  Tensor4 x(1, 1, 2, 3);
  x.data = {1, 2, 3, 4, 5, 6};
  Var v = Var::leaf(x, true);
  Var padded = reflect_pad_br(v, 3, 4);
  // rows: (1 2 3 2), (4 5 6 5), mirror of row 0: (1 2 3 2)
  CHECK(padded.value().data ==
        std::vector<double>{1, 2, 3, 2, 4, 5, 6, 5, 1, 2, 3, 2});
  Rng rng(3);
  auto loss = [&] { return mean_square(reflect_pad_br(v, 3, 4)); };
  CHECK(grad_check(v, loss, {0, 1, 2, 3, 4, 5}).max_rel_err < 1e-6);
}

TEST_CASE("concat, crop, embed, reshape round trips") {
  Rng rng(19);
  Tensor4 av = Tensor4::randn(1, 2, 3, 3, rng);
  Tensor4 bv = Tensor4::randn(1, 1, 3, 3, rng);
  Var a = Var::leaf(av, true), b = Var::leaf(bv, true);
  Var cat = concat_channels({a, b});
  CHECK(cat.value().c == 3);
  auto loss = [&] { return mean_square(concat_channels({a, b})); };
  CHECK(grad_check(a, loss, sample_coords(av.size(), 10, rng)).max_rel_err < 1e-6);
  CHECK(grad_check(b, loss, sample_coords(bv.size(), 6, rng)).max_rel_err < 1e-6);

  Var cropped = crop_spatial(a, 1, 0, 2, 2);
  CHECK(cropped.value().h == 2);
  CHECK(cropped.value().at(0, 0, 0, 0) == av.at(0, 0, 1, 0));
  Var embedded = embed_spatial(cropped, 3, 3, 1, 0);
  CHECK(embedded.value().at(0, 0, 0, 0) == 0.0);
  CHECK(embedded.value().at(0, 0, 1, 0) == av.at(0, 0, 1, 0));

  Var reshaped = reshape(a, 1, 1, 2, 9);
  CHECK(reshaped.value().data == av.data);
}

TEST_CASE("matmul and transpose against hand matrices") {
  Tensor4 a(1, 1, 2, 3);
  a.data = {1, 2, 3, 4, 5, 6};
  Tensor4 b(1, 1, 3, 2);
  b.data = {7, 8, 9, 10, 11, 12};
  Var out = matmul(Var::leaf(a), Var::leaf(b));
  CHECK(out.value().data == std::vector<double>{58, 64, 139, 154});
  Var t = transpose_mat(Var::leaf(a));
  CHECK(t.value().data == std::vector<double>{1, 4, 2, 5, 3, 6});

  Rng rng(23);
  Tensor4 av = Tensor4::randn(2, 1, 4, 3, rng);
  Tensor4 bv = Tensor4::randn(2, 1, 3, 5, rng);
  Var va = Var::leaf(av, true), vb = Var::leaf(bv, true);
  auto loss = [&] { return mean_square(matmul(va, vb)); };
  CHECK(grad_check(va, loss, sample_coords(av.size(), 12, rng)).max_rel_err < 1e-6);
  CHECK(grad_check(vb, loss, sample_coords(bv.size(), 12, rng)).max_rel_err < 1e-6);
}

TEST_CASE("softmax rows sum to one and gradients check out") {
  Rng rng(29);
  Tensor4 xv = Tensor4::randn(1, 1, 4, 6, rng, 2.0);
  Var x = Var::leaf(xv, true);
  Var sm = softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double sum = 0.0;
    for (int c = 0; c < 6; ++c) sum += sm.value().at(0, 0, r, c);
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-12));
  }
  // weight rows so the scalar depends asymmetrically on the softmax output
  Tensor4 wv = Tensor4::randn(1, 1, 4, 6, rng);
  Var w = Var::leaf(wv);
  auto loss = [&] { return mean_all(mul(softmax_lastdim(x), w)); };
  CHECK(grad_check(x, loss, sample_coords(xv.size(), 18, rng)).max_rel_err < 1e-5);
}

TEST_CASE("broadcast ops and batchnorm building blocks differentiate") {
  Rng rng(31);
  Tensor4 xv = Tensor4::randn(2, 3, 4, 4, rng);
  Tensor4 sv = Tensor4::randn(1, 3, 1, 1, rng);
  Var x = Var::leaf(xv, true), s = Var::leaf(sv, true);

  auto loss_sub = [&] { return mean_square(sub_bcast(x, s)); };
  CHECK(grad_check(x, loss_sub, sample_coords(xv.size(), 10, rng)).max_rel_err < 1e-6);
  CHECK(grad_check(s, loss_sub, {0, 1, 2}).max_rel_err < 1e-6);

  auto loss_mul = [&] { return mean_square(mul_bcast(x, s)); };
  CHECK(grad_check(x, loss_mul, sample_coords(xv.size(), 10, rng)).max_rel_err < 1e-5);
  CHECK(grad_check(s, loss_mul, {0, 1, 2}).max_rel_err < 1e-5);

  // Weight the normalized output; plain mean_square of a normalization is
  // nearly scale-invariant and finite differences would only see noise.
  Tensor4 wv = Tensor4::randn(2, 3, 4, 4, rng);
  Var w = Var::leaf(wv);
  auto loss_norm = [&] {
    Var mu = channel_mean(x);
    Var centered = sub_bcast(x, mu);
    Var var = channel_mean(square(centered));
    return mean_square(mul(mul_bcast(centered, rsqrt_eps(var, 1e-5)), w));
  };
  CHECK(grad_check(x, loss_norm, sample_coords(xv.size(), 10, rng)).max_rel_err < 5e-5);
}

TEST_CASE("no-grad mode records nothing") {
  Tensor4 xv = Tensor4::full(1, 1, 2, 2, 1.0);
  Var x = Var::leaf(xv, true);
  Var y;
  {
    NoGradGuard guard;
    y = mean_square(x);
  }
  CHECK(y.value().data[0] == doctest::Approx(1.0));
  CHECK_FALSE(y.requires_grad());
  CHECK_THROWS(backward(y));
}

TEST_CASE("backward accumulates over shared subexpressions") {
  Tensor4 xv = Tensor4::full(1, 1, 1, 1, 3.0);
  Var x = Var::leaf(xv, true);
  Var y = mul(x, x);  // d/dx = 2x = 6
  backward(mean_all(y));
  CHECK(x.grad().data[0] == doctest::Approx(6.0));
}

TEST_CASE("forward passes are bitwise deterministic") {
  Rng rng(37);
  Tensor4 xv = Tensor4::randn(2, 4, 16, 16, rng);
  Tensor4 wv = Tensor4::randn(8, 4, 3, 3, rng);
  Tensor4 bv = Tensor4::randn(1, 8, 1, 1, rng);
  Var x = Var::leaf(xv), w = Var::leaf(wv), b = Var::leaf(bv);
  Tensor4 first = relu(conv2d(x, w, b, 1, 1)).value();
  Tensor4 second = relu(conv2d(x, w, b, 1, 1)).value();
  CHECK(first == second);
}

#ifdef _OPENMP
#include <omp.h>
TEST_CASE("results do not depend on the thread count") {
  Rng rng(41);
  Tensor4 xv = Tensor4::randn(2, 5, 20, 20, rng);
  Tensor4 wv = Tensor4::randn(7, 5, 3, 3, rng);
  Tensor4 bv = Tensor4::randn(1, 7, 1, 1, rng);

  const int saved = omp_get_max_threads();
  auto forward_backward = [&] {
    Var x = Var::leaf(xv, true), w = Var::leaf(wv, true), b = Var::leaf(bv, true);
    Var loss = mean_square(relu(conv2d(x, w, b, 2, 1)));
    backward(loss);
    return std::make_pair(loss.value(), w.grad());
  };
  omp_set_num_threads(1);
  auto single = forward_backward();
  omp_set_num_threads(std::max(2, saved));
  auto multi = forward_backward();
  omp_set_num_threads(saved);
  CHECK(single.first == multi.first);
  CHECK(single.second == multi.second);
}
#endif
