#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "test_util.hpp"
#include "voxattention/gradcheck.hpp"
#include "voxattention/losses.hpp"

using namespace vox;
using testutil::random_tensor;

namespace {

// random orthogonal matrix from composed Givens rotations
Tensor<double> random_rotation(int64_t d, Rng& rng) {
  Tensor<double> q = Tensor<double>::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) q.at({i, i}) = 1.0;
  for (int round = 0; round < 3; ++round)
    for (int64_t i = 0; i + 1 < d; ++i) {
      const double theta = rng.uniform(0.0, 6.283185307179586);
      const double c = std::cos(theta), s = std::sin(theta);
      for (int64_t col = 0; col < d; ++col) {
        const double a = q.at({i, col}), b = q.at({i + 1, col});
        q.at({i, col}) = c * a - s * b;
        q.at({i + 1, col}) = s * a + c * b;
      }
    }
  return q;
}

std::vector<Tensor<double>> block_partition(int64_t d, int parts) {
  std::vector<Tensor<double>> bank;
  const int64_t chunk = d / parts;
  for (int p = 0; p < parts; ++p) {
    Tensor<double> m = Tensor<double>::zeros({d, d});
    const int64_t lo = chunk * p;
    const int64_t hi = p == parts - 1 ? d : chunk * (p + 1);
    for (int64_t i = lo; i < hi; ++i) m.at({i, i}) = 1.0;
    bank.push_back(std::move(m));
  }
  return bank;
}

}  // namespace

TEST_CASE("loss_pi") {
  SUBCASE("exact block partition of the identity scores zero") {
    auto bank = block_partition(16, 4);
    CHECK(loss_pi(bank).item() < 1e-12);
  }
  SUBCASE("d=2, both projections the identity: 0 + (2+2) + 2 = 6") {
    Tensor<double> eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    CHECK(loss_pi<double>({eye, eye}).item() == doctest::Approx(6.0).epsilon(1e-10));
  }
  SUBCASE("degenerate partition P1=I, P2=0 is also a minimizer") {
    Tensor<double> eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
    Tensor<double> zero = Tensor<double>::zeros({2, 2});
    CHECK(loss_pi<double>({eye, zero}).item() == doctest::Approx(0.0).epsilon(1e-10));
  }
  SUBCASE("invariant under simultaneous orthogonal conjugation") {
    Rng rng(1234);
    for (int trial = 0; trial < 20; ++trial) {
      const int64_t d = 8;
      std::vector<Tensor<double>> bank;
      for (int p = 0; p < 3; ++p) bank.push_back(random_tensor<double>({d, d}, 100 + trial * 3 + p));
      Tensor<double> q = random_rotation(d, rng);
      Tensor<double> qt = transpose(q, 0, 1);
      std::vector<Tensor<double>> conj;
      for (const auto& p : bank) conj.push_back(matmul(matmul(q, p), qt));
      const double a = loss_pi(bank).item();
      const double b = loss_pi(conj).item();
      CHECK(testutil::rel_err(a, b) < 1e-8);
    }
  }
  SUBCASE("non-negative on random banks and zero only at partitions") {
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<Tensor<double>> bank;
      for (int p = 0; p < 2; ++p) bank.push_back(random_tensor<double>({6, 6}, 300 + trial * 2 + p));
      CHECK(loss_pi(bank).item() >= 0.0);
    }
  }
  SUBCASE("gradient matches central differences") {
    std::vector<Tensor<double>> bank;
    for (int p = 0; p < 2; ++p) bank.push_back(random_tensor<double>({4, 4}, 400 + p));
    auto rep = grad_check<double>([&] { return loss_pi(bank); }, bank, 1e-5);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < 1e-6);
  }
}

TEST_CASE("loss_part evaluates the asymmetric cross entropy") {
  auto mask = Tensor<double>::full({1, 1}, 1.0);
  SUBCASE("t=1, o -> 1 vanishes") {
    auto o = Tensor<double>::from({1, 1, 1}, {1.0 - 1e-9});
    auto t = Tensor<double>::from({1, 1, 1}, {1.0});
    CHECK(loss_part(o, t, mask, 0.6).item() < 1e-6);
  }
  SUBCASE("gamma=0.6, t=1, o=0.5 gives -2*0.6*ln(0.5)") {
    auto o = Tensor<double>::from({1, 1, 1}, {0.5});
    auto t = Tensor<double>::from({1, 1, 1}, {1.0});
    CHECK(loss_part(o, t, mask, 0.6).item() ==
          doctest::Approx(-2.0 * 0.6 * std::log(0.5)).epsilon(1e-10));
    CHECK(loss_part(o, t, mask, 0.6).item() == doctest::Approx(0.8318).epsilon(1e-4));
  }
  SUBCASE("gamma=0.6, t=0, o=0.5 gives -2*0.4*ln(0.5)") {
    auto o = Tensor<double>::from({1, 1, 1}, {0.5});
    auto t = Tensor<double>::from({1, 1, 1}, {0.0});
    CHECK(loss_part(o, t, mask, 0.6).item() == doctest::Approx(0.5545).epsilon(1e-4));
  }
  SUBCASE("absent parts are masked out of the mean") {
    auto o = Tensor<double>::from({1, 2, 2}, {0.5, 0.5, 0.9999, 0.0001});
    auto t = Tensor<double>::from({1, 2, 2}, {1.0, 0.0, 0.0, 1.0});
    auto m = Tensor<double>::from({1, 2}, {1.0, 0.0});
    const double expect = (-2.0 * 0.6 * std::log(0.5) + -2.0 * 0.4 * std::log(0.5)) / 2.0;
    CHECK(loss_part(o, t, m, 0.6).item() == doctest::Approx(expect).epsilon(1e-10));
  }
  SUBCASE("gradient matches central differences") {
    auto o = random_tensor<double>({2, 2, 6}, 37, 0.2, 0.8);
    auto t = Tensor<double>::zeros({2, 2, 6});
    Rng rng(38);
    for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.next_bernoulli(0.4) ? 1.0 : 0.0;
    auto m = Tensor<double>::from({2, 2}, {1.0, 1.0, 0.0, 1.0});
    auto rep = grad_check<double>([&] { return loss_part(o, t, m, 0.6); }, {o}, 1e-6);
    CHECK(rep.all_finite);
    CHECK(rep.max_rel_error < 1e-6);
  }
}

TEST_CASE("loss_trans") {
  SUBCASE("exact prediction scores zero") {
    auto p = random_tensor<double>({2, 3, 6}, 50);
    auto m = Tensor<double>::full({2, 3}, 1.0);
    CHECK(loss_trans(p, p, m).item() == 0.0);
  }
  SUBCASE("a single 0.1 offset on one parameter gives 0.01") {
    auto gt = Tensor<double>::zeros({1, 1, 6});
    auto pred = Tensor<double>::zeros({1, 1, 6});
    pred.at({0, 0, 0}) = 0.1;
    auto m = Tensor<double>::full({1, 1}, 1.0);
    CHECK(loss_trans(pred, gt, m).item() == doctest::Approx(0.01).epsilon(1e-12));
  }
  SUBCASE("absent parts contribute nothing") {
    auto gt = Tensor<double>::zeros({1, 2, 6});
    auto pred = Tensor<double>::full({1, 2, 6}, 123.0);
    auto m = Tensor<double>::from({1, 2}, {0.0, 0.0});
    CHECK(loss_trans(pred, gt, m).item() == 0.0);
  }
  SUBCASE("summed over parts, averaged over batch") {
    auto gt = Tensor<double>::zeros({2, 2, 6});
    auto pred = Tensor<double>::full({2, 2, 6}, 1.0);
    auto m = Tensor<double>::full({2, 2}, 1.0);
    // per item: 2 parts * 6 params * 1; mean over 2 items = 12
    CHECK(loss_trans(pred, gt, m).item() == doctest::Approx(12.0));
  }
}

TEST_CASE("loss_ac") {
  SUBCASE("identical layer outputs cost nothing") {
    auto v = random_tensor<double>({2, 3, 4}, 60);
    CHECK(loss_ac<double>({v, v, v}).item() == 0.0);
  }
  SUBCASE("a constant offset of one gives 1.0 per pair") {
    auto v = random_tensor<double>({2, 3, 4}, 61);
    auto w = add_scalar(v, 1.0);
    CHECK(loss_ac<double>({v, w}).item() == doctest::Approx(1.0).epsilon(1e-12));
    // three layers -> three unordered pairs
    auto u = add_scalar(v, 2.0);
    CHECK(loss_ac<double>({v, w, u}).item() == doctest::Approx(1.0 + 4.0 + 1.0).epsilon(1e-12));
  }
  SUBCASE("single layer returns zero") {
    auto v = random_tensor<double>({2, 3, 4}, 62);
    CHECK(loss_ac<double>({v}).item() == 0.0);
  }
}

TEST_CASE("loss_shape") {
  SUBCASE("perfect assembly is near zero") {
    auto t = Tensor<double>::from({1, 1, 4}, {1, 0, 1, 0});
    auto o = Tensor<double>::from({1, 1, 4}, {1 - 1e-9, 1e-9, 1 - 1e-9, 1e-9});
    CHECK(loss_shape(o, t, 0.6).item() < 1e-6);
  }
  SUBCASE("uniform 0.5 output on mixed targets is the weighted mean of the two constants") {
    auto t = Tensor<double>::from({1, 1, 4}, {1, 1, 0, 0});
    auto o = Tensor<double>::full({1, 1, 4}, 0.5);
    const double on = -2.0 * 0.6 * std::log(0.5);
    const double off = -2.0 * 0.4 * std::log(0.5);
    CHECK(loss_shape(o, t, 0.6).item() == doctest::Approx(0.5 * on + 0.5 * off).epsilon(1e-12));
  }
  SUBCASE("gradient flows through assembly into the transform translation") {
    auto canonical = Tensor<double>::zeros({1, 8, 8, 8});
    for (int64_t x = 2; x < 6; ++x)
      for (int64_t y = 2; y < 6; ++y)
        for (int64_t z = 2; z < 6; ++z) canonical.at({0, x, y, z}) = 1.0;
    auto params = Tensor<double>::from({6}, {0.6, 0.6, 0.6, 0.1, 0.0, 0.0});
    params.set_requires_grad(true);
    auto target = Tensor<double>::zeros({1, 8, 8, 8});
    for (int64_t x = 1; x < 5; ++x)
      for (int64_t y = 2; y < 6; ++y)
        for (int64_t z = 2; z < 6; ++z) target.at({0, x, y, z}) = 1.0;
    Tape<double> tape;
    TapeScope<double> scope(tape);
    auto placed = grid_sample_transform(canonical, params);
    auto loss = loss_shape(reshape(placed, {1, 1, 512}), reshape(target, {1, 1, 512}), 0.6);
    tape.backward(loss);
    CHECK(params.grad()[3] != 0.0);  // translation x sees the mismatch
  }
}

TEST_CASE("stage_loss composition") {
  // small synthetic inputs for all terms
  auto bank = block_partition(8, 2);
  auto part_out = random_tensor<double>({1, 2, 8}, 70, 0.2, 0.8);
  auto part_tgt = Tensor<double>::zeros({1, 2, 8});
  part_tgt.at({0, 0, 0}) = 1.0;
  auto part_mask = Tensor<double>::full({1, 2}, 1.0);
  auto tp = random_tensor<double>({1, 2, 6}, 71);
  auto tg = random_tensor<double>({1, 2, 6}, 72);
  auto tm = Tensor<double>::full({1, 2}, 1.0);
  auto ac1 = random_tensor<double>({1, 2, 4}, 73);
  auto ac2 = random_tensor<double>({1, 2, 4}, 74);
  auto assembled = random_tensor<double>({1, 1, 16}, 75, 0.2, 0.8);
  auto shape_tgt = Tensor<double>::zeros({1, 1, 16});

  StageLossInputs<double> in;
  in.bank = &bank;
  in.part_output = part_out;
  in.part_target = part_tgt;
  in.part_mask = part_mask;
  in.trans_pred = tp;
  in.trans_gt = tg;
  in.trans_mask = tm;
  in.ac_vectors = {ac1, ac2};
  in.ac_active = true;
  in.assembled = assembled;
  in.shape_target = shape_tgt;

  LossWeights<double> w;  // defaults 1,1,10,1,10

  SUBCASE("stage 2 with w_ac = 0 reduces to the weighted transformation loss") {
    LossWeights<double> w2 = w;
    w2.w_ac = 0.0;
    w2.w_trans = 1.0;
    StageLossReport rep;
    auto total = stage_loss(2, in, w2, rep);
    CHECK(total.item() == doctest::Approx(loss_trans(tp, tg, tm).item()).epsilon(1e-12));
    CHECK(rep.loss_ac == 0.0);
  }
  SUBCASE("stage 3 totals the five weighted terms") {
    StageLossReport rep;
    auto total = stage_loss(3, in, w, rep);
    const double manual = 1.0 * rep.loss_pi + 1.0 * rep.loss_part + 10.0 * rep.loss_trans +
                          1.0 * rep.loss_ac + 10.0 * rep.loss_shape;
    CHECK(testutil::rel_err(rep.total, manual) < 1e-6);
    CHECK(total.item() == doctest::Approx(rep.total));
  }
  SUBCASE("stage 1 uses only the reconstruction pair") {
    StageLossReport rep;
    stage_loss(1, in, w, rep);
    CHECK(rep.loss_trans == 0.0);
    CHECK(rep.loss_shape == 0.0);
    CHECK(testutil::rel_err(rep.total, rep.loss_pi + rep.loss_part) < 1e-6);
  }
  SUBCASE("scaling every weight scales the total") {
    StageLossReport rep1, rep5;
    stage_loss(3, in, w, rep1);
    LossWeights<double> w5 = w;
    w5.w_pi *= 5;
    w5.w_part *= 5;
    w5.w_trans *= 5;
    w5.w_ac *= 5;
    w5.w_shape *= 5;
    stage_loss(3, in, w5, rep5);
    CHECK(testutil::rel_err(rep5.total, 5.0 * rep1.total) < 1e-9);
  }
  SUBCASE("missing inputs for an active term raise a state error") {
    StageLossInputs<double> incomplete;
    incomplete.bank = &bank;
    StageLossReport rep;
    CHECK_THROWS_AS(stage_loss(1, incomplete, w, rep), Error);
  }
}
