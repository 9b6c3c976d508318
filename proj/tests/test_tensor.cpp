#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "voxattention/attention.hpp"
#include "voxattention/ops.hpp"

using namespace vox;
using testutil::conv3d_oracle;
using testutil::random_tensor;

TEST_CASE("row-major linearization and shape bookkeeping") {
  auto t = Tensor<double>::from({2, 3, 4}, [] {
    std::vector<double> v(24);
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
    return v;
  }());
  CHECK(t.at({0, 0, 0}) == 0.0);
  CHECK(t.at({1, 2, 3}) == 23.0);
  CHECK(t.at({1, 0, 2}) == 14.0);  // ((1*3+0)*4+2)
  CHECK(t.numel() == 24);
}

TEST_CASE("conv3d matches the nested-loop oracle on random input") {
  auto x = random_tensor<double>({2, 2, 6, 5, 7}, 11);
  auto w = random_tensor<double>({3, 2, 4, 4, 4}, 12);
  auto b = random_tensor<double>({3}, 13);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      auto out = conv3d(x, w, b, stride, pad);
      int64_t Ho, Wo, Do;
      auto ref = conv3d_oracle(std::vector<double>(x.data().begin(), x.data().end()), 2, 2, 6, 5,
                               7, std::vector<double>(w.data().begin(), w.data().end()), 3, 4,
                               std::vector<double>(b.data().begin(), b.data().end()), stride, pad,
                               Ho, Wo, Do);
      REQUIRE(out.shape() == Shape{2, 3, Ho, Wo, Do});
      for (int64_t i = 0; i < out.numel(); ++i)
        CHECK(testutil::rel_err(out.data()[i], ref[static_cast<size_t>(i)]) < 1e-12);
    }
  }
}

TEST_CASE("conv3d shape trace and hand values") {
  SUBCASE("32^3 stride-2 pad-1 gives 16^3 with 64 channels") {
    auto x = Tensor<float>::zeros({1, 1, 32, 32, 32});
    auto w = Tensor<float>::zeros({64, 1, 4, 4, 4});
    auto b = Tensor<float>::zeros({64});
    auto out = conv3d(x, w, b, 2, 1);
    CHECK(out.shape() == Shape{1, 64, 16, 16, 16});
  }
  SUBCASE("all-ones 4^3 kernel over all-ones 4^3 input sums 64 entries") {
    auto x = Tensor<double>::full({1, 1, 4, 4, 4}, 1.0);
    auto w = Tensor<double>::full({1, 1, 4, 4, 4}, 1.0);
    auto b = Tensor<double>::zeros({1});
    auto out = conv3d(x, w, b, 1, 0);
    REQUIRE(out.numel() == 1);
    CHECK(out.item() == doctest::Approx(64.0).epsilon(1e-14));
  }
  SUBCASE("delta kernel at the corner crops the input") {
    auto x = random_tensor<double>({1, 1, 6, 6, 6}, 5);
    auto w = Tensor<double>::zeros({1, 1, 4, 4, 4});
    w.at({0, 0, 0, 0, 0}) = 1.0;
    auto b = Tensor<double>::zeros({1});
    auto out = conv3d(x, w, b, 1, 0);
    REQUIRE(out.shape() == Shape{1, 1, 3, 3, 3});
    for (int64_t i = 0; i < 3; ++i)
      for (int64_t j = 0; j < 3; ++j)
        for (int64_t k = 0; k < 3; ++k)
          CHECK(out.at({0, 0, i, j, k}) == x.at({0, 0, i, j, k}));
  }
  SUBCASE("channel mismatch raises a dimension error") {
    auto x = Tensor<float>::zeros({1, 2, 8, 8, 8});
    auto w = Tensor<float>::zeros({4, 3, 4, 4, 4});
    auto b = Tensor<float>::zeros({4});
    CHECK_THROWS_AS(conv3d(x, w, b, 2, 1), Error);
  }
  SUBCASE("non-positive output extent raises a configuration error") {
    auto x = Tensor<float>::zeros({1, 1, 2, 2, 2});
    auto w = Tensor<float>::zeros({1, 1, 4, 4, 4});
    auto b = Tensor<float>::zeros({1});
    CHECK_THROWS_AS(conv3d(x, w, b, 1, 0), Error);
  }
}

TEST_CASE("deconv3d output extents follow (H-1)*s - 2p + k") {
  SUBCASE("1x256x1^3 stride 1 pad 0 -> 1x256x4^3") {
    auto x = Tensor<float>::zeros({1, 256, 1, 1, 1});
    auto w = Tensor<float>::zeros({256, 256, 4, 4, 4});
    auto b = Tensor<float>::zeros({256});
    CHECK(deconv3d(x, w, b, 1, 0).shape() == Shape{1, 256, 4, 4, 4});
  }
  SUBCASE("1x128x8^3 stride 2 pad 1 -> 1x64x16^3") {
    auto x = Tensor<float>::zeros({1, 128, 8, 8, 8});
    auto w = Tensor<float>::zeros({128, 64, 4, 4, 4});
    auto b = Tensor<float>::zeros({64});
    CHECK(deconv3d(x, w, b, 2, 1).shape() == Shape{1, 64, 16, 16, 16});
  }
}

TEST_CASE("deconv3d and conv3d are adjoint: <deconv(x,w),y> == <x,conv(y,w)>") {
  for (uint64_t seed : {1u, 2u, 3u}) {
    auto x = random_tensor<double>({1, 3, 3, 3, 3}, seed);
    auto w = random_tensor<double>({3, 2, 4, 4, 4}, seed + 100);
    auto zero_co = Tensor<double>::zeros({2});
    auto zero_ci = Tensor<double>::zeros({3});
    const int stride = 2, pad = 1;
    auto dx = deconv3d(x, w, zero_co, stride, pad);  // (1,2,6,6,6)
    auto y = random_tensor<double>({1, 2, 6, 6, 6}, seed + 200);
    auto cy = conv3d(y, w, zero_ci, stride, pad);  // weight read as (Co=3? no:(3,2,..))
    // conv expects weight (Co,Ci,k^3): here w maps y's 2 channels... adjointness
    // pairs deconv (Ci=3 -> Co=2) with conv (Ci=2 -> Co=3) sharing w as (3,2,k^3).
    double lhs = 0, rhs = 0;
    for (int64_t i = 0; i < dx.numel(); ++i) lhs += dx.data()[i] * y.data()[i];
    for (int64_t i = 0; i < x.numel(); ++i) rhs += x.data()[i] * cy.data()[i];
    CHECK(testutil::rel_err(lhs, rhs) < 1e-10);
  }
}

TEST_CASE("dense applies an affine map over the last axis") {
  SUBCASE("identity weight with zero bias is identity") {
    auto x = random_tensor<double>({3, 4}, 7);
    auto w = Tensor<double>::zeros({4, 4});
    for (int64_t i = 0; i < 4; ++i) w.at({i, i}) = 1.0;
    auto b = Tensor<double>::zeros({4});
    auto out = dense(x, w, b);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(out.data()[i] == x.data()[i]);
  }
  SUBCASE("hand matrix multiply") {
    auto x = Tensor<double>::from({1, 2}, {1.0, 2.0});
    auto w = Tensor<double>::from({2, 2}, {1.0, 1.0, 1.0, -1.0});
    auto b = Tensor<double>::zeros({2});
    auto out = dense(x, w, b);
    CHECK(out.at({0, 0}) == doctest::Approx(3.0));
    CHECK(out.at({0, 1}) == doctest::Approx(-1.0));
  }
  SUBCASE("broadcasts over leading axes") {
    auto x = random_tensor<double>({2, 3, 5}, 9);
    auto w = random_tensor<double>({4, 5}, 10);
    auto b = random_tensor<double>({4}, 11);
    auto out = dense(x, w, b);
    REQUIRE(out.shape() == Shape{2, 3, 4});
    for (int64_t r = 0; r < 2; ++r)
      for (int64_t c = 0; c < 3; ++c)
        for (int64_t o = 0; o < 4; ++o) {
          double acc = b.at({o});
          for (int64_t i = 0; i < 5; ++i) acc += x.at({r, c, i}) * w.at({o, i});
          CHECK(testutil::rel_err(out.at({r, c, o}), acc) < 1e-12);
        }
  }
  SUBCASE("dimension mismatch raises") {
    auto x = Tensor<float>::zeros({2, 3});
    auto w = Tensor<float>::zeros({4, 5});
    auto b = Tensor<float>::zeros({4});
    CHECK_THROWS_AS(dense(x, w, b), Error);
  }
}

TEST_CASE("batchnorm3d") {
  SUBCASE("training mode standardizes each channel") {
    auto x = random_tensor<double>({2, 3, 4, 4, 4}, 21, -2.0, 5.0);
    auto gamma = Tensor<double>::full({3}, 1.0);
    auto beta = Tensor<double>::zeros({3});
    auto rm = Tensor<double>::zeros({3});
    auto rv = Tensor<double>::full({3}, 1.0);
    auto out = batchnorm3d(x, gamma, beta, rm, rv, true);
    const int64_t S = 64, B = 2;
    for (int64_t c = 0; c < 3; ++c) {
      double m = 0, v = 0;
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < S; ++i) m += out.data()[(b * 3 + c) * S + i];
      m /= static_cast<double>(B * S);
      for (int64_t b = 0; b < B; ++b)
        for (int64_t i = 0; i < S; ++i) {
          const double d = out.data()[(b * 3 + c) * S + i] - m;
          v += d * d;
        }
      v /= static_cast<double>(B * S);
      CHECK(std::fabs(m) < 1e-5);
      CHECK(std::fabs(v - 1.0) < 1e-4);
    }
  }
  SUBCASE("constant channel maps to zeros in training mode") {
    auto x = Tensor<double>::full({2, 1, 2, 2, 2}, 3.25);
    auto gamma = Tensor<double>::full({1}, 1.0);
    auto beta = Tensor<double>::zeros({1});
    auto rm = Tensor<double>::zeros({1});
    auto rv = Tensor<double>::full({1}, 1.0);
    auto out = batchnorm3d(x, gamma, beta, rm, rv, true);
    for (int64_t i = 0; i < out.numel(); ++i) CHECK(std::fabs(out.data()[i]) < 1e-12);
  }
  SUBCASE("eval mode with unit running stats is the identity") {
    auto x = random_tensor<double>({1, 2, 3, 3, 3}, 23);
    auto gamma = Tensor<double>::full({2}, 1.0);
    auto beta = Tensor<double>::zeros({2});
    auto rm = Tensor<double>::zeros({2});
    auto rv = Tensor<double>::full({2}, 1.0);
    auto out = batchnorm3d(x, gamma, beta, rm, rv, false);
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK(testutil::rel_err(out.data()[i], x.data()[i]) < 1e-5);
  }
}

TEST_CASE("activations") {
  SUBCASE("softmax hand values and normalization") {
    auto s = softmax(Tensor<double>::from({2}, {0.0, 0.0}), 0);
    CHECK(s.at({0}) == doctest::Approx(0.5));
    CHECK(s.at({1}) == doctest::Approx(0.5));
    auto s2 = softmax(Tensor<double>::from({2}, {0.0, std::log(3.0)}), 0);
    CHECK(s2.at({0}) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(s2.at({1}) == doctest::Approx(0.75).epsilon(1e-12));
  }
  SUBCASE("softmax rows are a distribution on random input, any axis") {
    auto x = random_tensor<double>({3, 4, 5}, 31, -10.0, 10.0);
    for (int axis = 0; axis < 3; ++axis) {
      auto y = softmax(x, axis);
      for (int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] >= 0.0);
      // sum along axis must be 1
      auto s = sum_axis(y, axis);
      for (int64_t i = 0; i < s.numel(); ++i) CHECK(std::fabs(s.data()[i] - 1.0) < 1e-6);
    }
  }
  SUBCASE("leaky_relu and sigmoid point values") {
    auto lr = leaky_relu(Tensor<double>::from({1}, {-1.0}), 0.2);
    CHECK(lr.item() == doctest::Approx(-0.2));
    auto sg = sigmoid(Tensor<double>::from({1}, {0.0}));
    CHECK(sg.item() == doctest::Approx(0.5));
  }
}

TEST_CASE("multi_head_attention") {
  Rng rng(404);
  const int64_t d = 8;
  AttentionBlockParams<double> p;
  p.wq = Tensor<double>::uniform({d, d}, rng, -0.4, 0.4);
  p.bq = Tensor<double>::uniform({d}, rng, -0.1, 0.1);
  p.wk = Tensor<double>::uniform({d, d}, rng, -0.4, 0.4);
  p.bk = Tensor<double>::uniform({d}, rng, -0.1, 0.1);
  p.wv = Tensor<double>::uniform({d, d}, rng, -0.4, 0.4);
  p.bv = Tensor<double>::uniform({d}, rng, -0.1, 0.1);
  p.wo = Tensor<double>::uniform({d, d}, rng, -0.4, 0.4);
  p.bo = Tensor<double>::uniform({d}, rng, -0.1, 0.1);

  SUBCASE("single token attends only to itself") {
    auto x = random_tensor<double>({1, d}, 51);
    Tensor<double> maps;
    auto out = multi_head_attention(x, p, 2, &maps);
    REQUIRE(maps.shape() == Shape{2, 1, 1});
    CHECK(maps.at({0, 0, 0}) == doctest::Approx(1.0));
    CHECK(maps.at({1, 0, 0}) == doctest::Approx(1.0));
    // output equals W_O * (V projection) + b_O
    auto v = dense(x, p.wv, p.bv);
    auto expect = dense(v, p.wo, p.bo);
    for (int64_t i = 0; i < d; ++i)
      CHECK(testutil::rel_err(out.at({0, i}), expect.at({0, i})) < 1e-12);
  }
  SUBCASE("identical rows give uniform attention") {
    auto row = random_tensor<double>({1, d}, 52);
    auto x = Tensor<double>::zeros({4, d});
    for (int64_t s = 0; s < 4; ++s)
      for (int64_t i = 0; i < d; ++i) x.at({s, i}) = row.at({0, i});
    Tensor<double> maps;
    multi_head_attention(x, p, 2, &maps);
    for (int64_t h = 0; h < 2; ++h)
      for (int64_t a = 0; a < 4; ++a)
        for (int64_t b = 0; b < 4; ++b)
          CHECK(maps.at({h, a, b}) == doctest::Approx(0.25).epsilon(1e-12));
  }
  SUBCASE("S=2, d=2, one head matches a direct reference computation") {
    AttentionBlockParams<double> q;
    q.wq = Tensor<double>::from({2, 2}, {0.3, -0.1, 0.2, 0.5});
    q.bq = Tensor<double>::from({2}, {0.01, -0.02});
    q.wk = Tensor<double>::from({2, 2}, {-0.2, 0.4, 0.1, 0.3});
    q.bk = Tensor<double>::from({2}, {0.0, 0.05});
    q.wv = Tensor<double>::from({2, 2}, {0.6, 0.2, -0.3, 0.1});
    q.bv = Tensor<double>::from({2}, {0.1, 0.0});
    q.wo = Tensor<double>::from({2, 2}, {1.0, -0.5, 0.25, 0.75});
    q.bo = Tensor<double>::from({2}, {-0.05, 0.02});
    auto x = Tensor<double>::from({2, 2}, {0.8, -0.4, 0.3, 0.9});
    auto out = multi_head_attention(x, q, 1);

    // reference: explicit Q,K,V, scores, softmax, context, output projection
    auto matvec = [](const Tensor<double>& w, const Tensor<double>& b, double a0, double a1,
                     double& o0, double& o1) {
      o0 = w.at({0, 0}) * a0 + w.at({0, 1}) * a1 + b.at({0});
      o1 = w.at({1, 0}) * a0 + w.at({1, 1}) * a1 + b.at({1});
    };
    double Q[2][2], K[2][2], V[2][2];
    for (int s = 0; s < 2; ++s) {
      matvec(q.wq, q.bq, x.at({s, 0}), x.at({s, 1}), Q[s][0], Q[s][1]);
      matvec(q.wk, q.bk, x.at({s, 0}), x.at({s, 1}), K[s][0], K[s][1]);
      matvec(q.wv, q.bv, x.at({s, 0}), x.at({s, 1}), V[s][0], V[s][1]);
    }
    const double inv_sqrt_d = 1.0 / std::sqrt(2.0);
    for (int s = 0; s < 2; ++s) {
      double sc[2];
      for (int t = 0; t < 2; ++t)
        sc[t] = (Q[s][0] * K[t][0] + Q[s][1] * K[t][1]) * inv_sqrt_d;
      const double mx = std::max(sc[0], sc[1]);
      const double e0 = std::exp(sc[0] - mx), e1 = std::exp(sc[1] - mx);
      const double a0 = e0 / (e0 + e1), a1 = e1 / (e0 + e1);
      const double c0 = a0 * V[0][0] + a1 * V[1][0];
      const double c1 = a0 * V[0][1] + a1 * V[1][1];
      double o0, o1;
      matvec(q.wo, q.bo, c0, c1, o0, o1);
      CHECK(testutil::rel_err(out.at({s, 0}), o0) < 1e-13);
      CHECK(testutil::rel_err(out.at({s, 1}), o1) < 1e-13);
    }
  }
  SUBCASE("empty sequence raises") {
    auto x = Tensor<double>::zeros({0, d});
    CHECK_THROWS_AS(multi_head_attention(x, p, 2), Error);
  }
}

TEST_CASE("attention_block preserves shape and exports maps from stacked blocks") {
  Rng rng(7000);
  const int64_t d = 256;
  auto make_block = [&]() {
    AttentionBlockParams<float> p;
    auto u = [&](Shape s, float b) { return Tensor<float>::uniform(std::move(s), rng, -b, b); };
    p.wq = u({d, d}, 0.05f);
    p.bq = Tensor<float>::zeros({d});
    p.wk = u({d, d}, 0.05f);
    p.bk = Tensor<float>::zeros({d});
    p.wv = u({d, d}, 0.05f);
    p.bv = Tensor<float>::zeros({d});
    p.wo = u({d, d}, 0.05f);
    p.bo = Tensor<float>::zeros({d});
    p.ln1_gamma = Tensor<float>::full({d}, 1.0f);
    p.ln1_beta = Tensor<float>::zeros({d});
    p.ln2_gamma = Tensor<float>::full({d}, 1.0f);
    p.ln2_beta = Tensor<float>::zeros({d});
    p.ff1_weight = u({4 * d, d}, 0.05f);
    p.ff1_bias = Tensor<float>::zeros({4 * d});
    p.ff2_weight = u({d, 4 * d}, 0.02f);
    p.ff2_bias = Tensor<float>::zeros({d});
    return p;
  };
  auto x = random_tensor<float>({4, d}, 99);
  Tensor<float> cur = x;
  for (int blk = 0; blk < 3; ++blk) {
    Tensor<float> maps;
    cur = attention_block(cur, make_block(), 8, &maps);
    REQUIRE(cur.shape() == Shape{4, d});
    REQUIRE(maps.shape() == Shape{8, 4, 4});
    for (int64_t h = 0; h < 8; ++h)
      for (int64_t r = 0; r < 4; ++r) {
        double row = 0;
        for (int64_t c = 0; c < 4; ++c) row += maps.at({h, r, c});
        CHECK(std::fabs(row - 1.0) < 1e-5);
      }
  }
}

TEST_CASE("structural ops") {
  SUBCASE("transpose swaps axes") {
    auto x = random_tensor<double>({2, 3, 4, 5}, 61);
    auto y = transpose(x, 1, 2);
    REQUIRE(y.shape() == Shape{2, 4, 3, 5});
    for (int64_t a = 0; a < 2; ++a)
      for (int64_t b = 0; b < 3; ++b)
        for (int64_t c = 0; c < 4; ++c)
          for (int64_t d = 0; d < 5; ++d) CHECK(y.at({a, c, b, d}) == x.at({a, b, c, d}));
  }
  SUBCASE("concat then slice round-trips") {
    auto a = random_tensor<double>({2, 3}, 62);
    auto b = random_tensor<double>({2, 2}, 63);
    auto c = concat<double>({a, b}, 1);
    REQUIRE(c.shape() == Shape{2, 5});
    auto back = slice(c, 1, 3, 2);
    for (int64_t i = 0; i < back.numel(); ++i) CHECK(back.data()[i] == b.data()[i]);
  }
  SUBCASE("sum_axis removes the axis") {
    auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
    auto s0 = sum_axis(x, 0);
    CHECK(s0.at({0}) == 4.0);
    CHECK(s0.at({1}) == 6.0);
    auto s1 = sum_axis(x, 1);
    CHECK(s1.at({0}) == 3.0);
    CHECK(s1.at({1}) == 7.0);
  }
}

TEST_CASE("task kernels") {
  SUBCASE("voxel_max_union takes the pointwise maximum") {
    auto parts = Tensor<double>::from({2, 2}, {0.7, 0.1, 0.7, 0.5});
    auto u = voxel_max_union(parts);
    CHECK(u.at({0}) == 0.7);
    CHECK(u.at({1}) == 0.5);
  }
  SUBCASE("transform_activation exponentiates the scale slots") {
    auto raw = Tensor<double>::from({6}, {0.0, 1.0, -1.0, 0.25, -0.25, 2.0});
    auto t = transform_activation(raw);
    CHECK(t.at({0}) == doctest::Approx(1.0));
    CHECK(t.at({1}) == doctest::Approx(std::exp(1.0)));
    CHECK(t.at({2}) == doctest::Approx(std::exp(-1.0)));
    CHECK(t.at({3}) == doctest::Approx(0.25));
    CHECK(t.at({5}) == doctest::Approx(2.0));
  }
  SUBCASE("grid_sample identity transform reproduces the input") {
    auto occ = random_tensor<double>({1, 8, 8, 8}, 71, 0.0, 1.0);
    auto params = Tensor<double>::from({6}, {1, 1, 1, 0, 0, 0});
    auto out = grid_sample_transform(occ, params);
    for (int64_t i = 0; i < out.numel(); ++i)
      CHECK(testutil::rel_err(out.data()[i], occ.data()[i]) < 1e-12);
  }
  SUBCASE("grid_sample rejects non-positive scales") {
    auto occ = Tensor<double>::zeros({1, 4, 4, 4});
    auto params = Tensor<double>::from({6}, {0.0, 1, 1, 0, 0, 0});
    CHECK_THROWS_AS(grid_sample_transform(occ, params), Error);
  }
  SUBCASE("half-scale centered cube lands in the central region") {
    const int64_t R = 32;
    auto occ = Tensor<double>::full({1, R, R, R}, 1.0);
    auto params = Tensor<double>::from({6}, {0.5, 0.5, 0.5, 0, 0, 0});
    auto out = grid_sample_transform(occ, params);
    // deep inside the scaled cube: fully occupied
    CHECK(out.at({0, 16, 16, 16}) == doctest::Approx(1.0));
    // well outside: empty
    CHECK(out.at({0, 2, 2, 2}) == doctest::Approx(0.0));
    // mass conservation up to boundary effects: volume about (0.5)^3
    double total = 0;
    for (int64_t i = 0; i < out.numel(); ++i) total += out.data()[i];
    CHECK(total == doctest::Approx(R * R * R / 8.0).epsilon(0.05));
  }
}

TEST_CASE("kernels are bitwise deterministic across repeated evaluation") {
  auto x = random_tensor<float>({2, 3, 6, 6, 6}, 81);
  auto w = random_tensor<float>({4, 3, 4, 4, 4}, 82);
  auto b = random_tensor<float>({4}, 83);
  auto o1 = conv3d(x, w, b, 2, 1);
  auto o2 = conv3d(x, w, b, 2, 1);
  for (int64_t i = 0; i < o1.numel(); ++i) CHECK(o1.data()[i] == o2.data()[i]);
  auto s1 = softmax(x, 2);
  auto s2 = softmax(x, 2);
  for (int64_t i = 0; i < s1.numel(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
}
