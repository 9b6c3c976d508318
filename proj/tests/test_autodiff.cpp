#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "voxattention/attention.hpp"
#include "voxattention/gradcheck.hpp"
#include "voxattention/ops.hpp"
#include "voxattention/optim.hpp"

using namespace vox;
using testutil::random_tensor;

namespace {

// reduce to a scalar with fixed random coefficients so every output element
// influences the loss
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& t, uint64_t seed) {
  auto coeff = random_tensor<T>(t.shape(), seed);
  return sum(mul(t, coeff));
}

}  // namespace

TEST_CASE("gradient doubles exactly when backward runs twice without clearing") {
  auto x = random_tensor<double>({3, 3}, 1);
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  std::vector<double> g1(x.grad().begin(), x.grad().end());
  tape.backward(loss);
  for (size_t i = 0; i < g1.size(); ++i) CHECK(x.grad()[i] == 2.0 * g1[i]);
}

TEST_CASE("gradients accumulate additively into shared inputs") {
  auto x = Tensor<double>::from({1}, {3.0});
  x.set_requires_grad(true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = add(mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1 = 7
  tape.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("no recording happens outside a tape scope") {
  auto x = random_tensor<double>({2, 2}, 2);
  x.set_requires_grad(true);
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
  CHECK(y.is_leaf());
}

TEST_CASE("elementwise and structural kernels pass central-difference checks (f64)") {
  const double h = 1e-5, tol = 1e-6;
  auto check = [&](const char* name, std::vector<Tensor<double>> inputs,
                   std::function<Tensor<double>()> f) {
    auto rep = grad_check<double>(f, inputs, h);
    INFO(name << " worst at " << rep.worst_location);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < tol);
  };

  auto a = random_tensor<double>({3, 4}, 10);
  auto b = random_tensor<double>({3, 4}, 11);
  check("add", {a, b}, [&] { return weighted_sum(add(a, b), 500); });
  check("sub", {a, b}, [&] { return weighted_sum(sub(a, b), 501); });
  check("mul", {a, b}, [&] { return weighted_sum(mul(a, b), 502); });
  check("scale", {a}, [&] { return weighted_sum(scale(a, 2.5), 503); });
  check("exp", {a}, [&] { return weighted_sum(exp(a), 504); });
  check("square", {a}, [&] { return weighted_sum(square(a), 505); });
  auto pos = random_tensor<double>({3, 4}, 12, 0.5, 2.0);
  check("log", {pos}, [&] { return weighted_sum(log(pos), 506); });
  check("reshape", {a}, [&] { return weighted_sum(reshape(a, {2, 6}), 507); });
  auto t4 = random_tensor<double>({2, 3, 2, 2}, 13);
  check("transpose", {t4}, [&] { return weighted_sum(transpose(t4, 1, 3), 508); });
  check("concat", {a, b}, [&] { return weighted_sum(concat<double>({a, b}, 0), 509); });
  check("slice", {a}, [&] { return weighted_sum(slice(a, 1, 1, 2), 510); });
  check("sum_axis", {t4}, [&] { return weighted_sum(sum_axis(t4, 2), 511); });
  check("mean_axis", {t4}, [&] { return weighted_sum(mean_axis(t4, 0), 512); });
  check("leaky_relu", {a}, [&] { return weighted_sum(leaky_relu(a, 0.2), 513); });
  check("sigmoid", {a}, [&] { return weighted_sum(sigmoid(a), 514); });
  check("softmax", {a}, [&] { return weighted_sum(softmax(a, 1), 515); });

  auto m1 = random_tensor<double>({3, 5}, 14);
  auto m2 = random_tensor<double>({5, 2}, 15);
  check("matmul", {m1, m2}, [&] { return weighted_sum(matmul(m1, m2), 516); });
  auto bm1 = random_tensor<double>({2, 3, 4}, 16);
  auto bm2 = random_tensor<double>({2, 4, 2}, 17);
  check("bmm", {bm1, bm2}, [&] { return weighted_sum(bmm(bm1, bm2), 517); });
  auto bm3 = random_tensor<double>({2, 5, 4}, 18);
  check("bmm_t", {bm1, bm3}, [&] { return weighted_sum(bmm(bm1, bm3, true), 518); });

  auto gm = random_tensor<double>({4}, 19, 0.5, 1.5);
  auto bt = random_tensor<double>({4}, 20);
  auto xr = random_tensor<double>({3, 4}, 21);
  check("layernorm", {xr, gm, bt}, [&] { return weighted_sum(layernorm(xr, gm, bt), 519); });
}

TEST_CASE("dense gradient matches central differences to 1e-6 (f64)") {
  auto x = random_tensor<double>({3, 5}, 30);
  auto w = random_tensor<double>({4, 5}, 31);
  auto b = random_tensor<double>({4}, 32);
  auto rep = grad_check<double>([&] { return weighted_sum(dense(x, w, b), 520); }, {x, w, b}, 1e-5);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("conv3d on 1x1x5x5x5 passes the finite-difference check to 1e-6") {
  auto x = random_tensor<double>({1, 1, 5, 5, 5}, 33);
  auto w = random_tensor<double>({2, 1, 4, 4, 4}, 34);
  auto b = random_tensor<double>({2}, 35);
  auto rep = grad_check<double>(
      [&] { return weighted_sum(conv3d(x, w, b, 1, 1), 521); }, {x, w, b}, 1e-5);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("deconv3d passes the finite-difference check to 1e-6") {
  auto x = random_tensor<double>({1, 2, 3, 3, 3}, 36);
  auto w = random_tensor<double>({2, 2, 4, 4, 4}, 37);
  auto b = random_tensor<double>({2}, 38);
  auto rep = grad_check<double>(
      [&] { return weighted_sum(deconv3d(x, w, b, 2, 1), 522); }, {x, w, b}, 1e-5);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("batchnorm3d training-mode gradient matches central differences") {
  auto x = random_tensor<double>({2, 2, 2, 2, 2}, 39);
  auto gm = random_tensor<double>({2}, 40, 0.5, 1.5);
  auto bt = random_tensor<double>({2}, 41);
  auto rep = grad_check<double>(
      [&] {
        auto rm = Tensor<double>::zeros({2});
        auto rv = Tensor<double>::full({2}, 1.0);
        return weighted_sum(batchnorm3d(x, gm, bt, rm, rv, true), 523);
      },
      {x, gm, bt}, 1e-5);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-6);
}

TEST_CASE("task kernels pass finite-difference checks") {
  SUBCASE("bce_weighted") {
    auto o = random_tensor<double>({2, 2, 8}, 42, 0.15, 0.85);
    auto t = Tensor<double>::zeros({2, 2, 8});
    Rng rng(43);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.next_bernoulli(0.5) ? 1.0 : 0.0;
    auto mask = Tensor<double>::from({2, 2}, {1.0, 0.0, 1.0, 1.0});
    auto rep = grad_check<double>([&] { return bce_weighted(o, t, mask, 0.6); }, {o}, 1e-6);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < 1e-6);
  }
  SUBCASE("grid_sample_transform w.r.t. occupancy and parameters") {
    auto occ = random_tensor<double>({1, 6, 6, 6}, 44, 0.0, 1.0);
    auto params = Tensor<double>::from({6}, {0.7, 0.55, 0.8, 0.05, -0.04, 0.08});
    auto rep = grad_check<double>(
        [&] { return weighted_sum(grid_sample_transform(occ, params), 524); }, {occ, params},
        1e-6);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < 1e-4);
  }
  SUBCASE("voxel_max_union routes gradient to the first maximal part") {
    auto parts = Tensor<double>::from({2, 2}, {0.7, 0.1, 0.7, 0.5});
    parts.set_requires_grad(true);
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto u = voxel_max_union(parts);
    tape.backward(sum(u));
    CHECK(parts.grad()[0] == 1.0);  // tie at 0.7 goes to part 0
    CHECK(parts.grad()[1] == 0.0);
    CHECK(parts.grad()[2] == 0.0);
    CHECK(parts.grad()[3] == 1.0);
  }
  SUBCASE("transform_activation") {
    auto raw = random_tensor<double>({2, 6}, 45, -0.6, 0.6);
    auto rep = grad_check<double>(
        [&] { return weighted_sum(transform_activation(raw), 525); }, {raw}, 1e-6);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < 1e-6);
  }
}

TEST_CASE("attention block gradient on a (2,8) input matches differences to 1e-5") {
  Rng rng(46);
  const int64_t d = 8;
  AttentionBlockParams<double> p;
  auto u = [&](Shape s, double b) { return Tensor<double>::uniform(std::move(s), rng, -b, b); };
  p.wq = u({d, d}, 0.4);
  p.bq = u({d}, 0.1);
  p.wk = u({d, d}, 0.4);
  p.bk = u({d}, 0.1);
  p.wv = u({d, d}, 0.4);
  p.bv = u({d}, 0.1);
  p.wo = u({d, d}, 0.4);
  p.bo = u({d}, 0.1);
  p.ln1_gamma = u({d}, 0.2);
  for (auto& v : p.ln1_gamma.data()) v += 1.0;
  p.ln1_beta = u({d}, 0.1);
  p.ln2_gamma = u({d}, 0.2);
  for (auto& v : p.ln2_gamma.data()) v += 1.0;
  p.ln2_beta = u({d}, 0.1);
  p.ff1_weight = u({4 * d, d}, 0.3);
  p.ff1_bias = u({4 * d}, 0.1);
  p.ff2_weight = u({d, 4 * d}, 0.3);
  p.ff2_bias = u({d}, 0.1);

  auto x = random_tensor<double>({2, d}, 47);
  auto rep = grad_check<double>(
      [&] { return weighted_sum(attention_block(x, p, 2), 526); },
      {x, p.wq, p.wk, p.wv, p.wo, p.ln1_gamma, p.ff1_weight, p.ff2_bias}, 1e-5);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-5);
}

TEST_CASE("f32 kernels stay within 1e-3 of central differences") {
  auto x = random_tensor<float>({1, 1, 5, 5, 5}, 48);
  auto w = random_tensor<float>({2, 1, 4, 4, 4}, 49);
  auto b = random_tensor<float>({2}, 50);
  auto rep = grad_check<float>(
      [&] { return weighted_sum(conv3d(x, w, b, 2, 1), 527); }, {x, w, b}, 1e-2f);
  CHECK(rep.all_finite);
  CHECK(rep.max_rel_error < 1e-3);
}

TEST_CASE("adam optimizer") {
  SUBCASE("first step moves by about -lr*sign(g)") {
    ParameterStore<double> store;
    auto p = store.create("w", Tensor<double>::from({2}, {1.0, -2.0}));
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto loss = sum(mul(p, Tensor<double>::from({2}, {3.0, -0.5})));
    tape.backward(loss);  // grads: (3.0, -0.5)
    AdamState<double> adam;
    adam.lr = 0.001;
    adam_step(store, adam, 0);
    CHECK(store.get("w").value.data()[0] == doctest::Approx(1.0 - 0.001).epsilon(1e-6));
    CHECK(store.get("w").value.data()[1] == doctest::Approx(-2.0 + 0.001).epsilon(1e-6));
    CHECK_FALSE(store.get("w").value.has_grad());  // cleared afterwards
  }
  SUBCASE("frozen parameters are bitwise unchanged") {
    ParameterStore<double> store;
    auto p = store.create("w", Tensor<double>::from({2}, {1.5, -0.25}));
    store.get("w").frozen = true;
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(p, p)));
    AdamState<double> adam;
    adam_step(store, adam, 0);
    CHECK(store.get("w").value.data()[0] == 1.5);
    CHECK(store.get("w").value.data()[1] == -0.25);
  }
  SUBCASE("unfrozen parameter without gradient raises an invariant error") {
    ParameterStore<double> store;
    store.create("w", Tensor<double>::from({1}, {1.0}));
    AdamState<double> adam;
    CHECK_THROWS_AS(adam_step(store, adam, 0), Error);
  }
  SUBCASE("learning-rate schedule: epoch 50 with ratio 0.8 every 50 gives 0.0008") {
    AdamState<double> adam;
    adam.lr = 0.001;
    adam.decay_ratio = 0.8;
    adam.decay_every = 50;
    CHECK(adam.effective_lr(49) == doctest::Approx(0.001));
    CHECK(adam.effective_lr(50) == doctest::Approx(0.0008));
    CHECK(adam.effective_lr(100) == doctest::Approx(0.00064));
  }
  SUBCASE("scaling the loss leaves the first-step update direction unchanged") {
    for (double factor : {1.0, 7.5}) {
      ParameterStore<double> store;
      auto p = store.create("w", Tensor<double>::from({3}, {0.4, -0.3, 0.9}));
      Tape<double> tape;
      TapeScope<double> scope(tape);
      auto loss = scale(sum(mul(p, Tensor<double>::from({3}, {1.0, -2.0, 0.5}))), factor);
      tape.backward(loss);
      AdamState<double> adam;
      adam_step(store, adam, 0);
      CHECK(store.get("w").value.data()[0] < 0.4);
      CHECK(store.get("w").value.data()[1] > -0.3);
      CHECK(store.get("w").value.data()[2] < 0.9);
    }
  }
}

TEST_CASE("grad_check flags non-finite computations") {
  auto x = Tensor<double>::from({1}, {0.0});
  auto rep = grad_check<double>([&] { return log(x); }, {x}, 1e-6);
  CHECK_FALSE(rep.all_finite);
  CHECK_FALSE(rep.worst_location.empty());
}
