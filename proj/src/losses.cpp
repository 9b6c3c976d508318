#include "voxattention/losses.hpp"

#include <iostream>

namespace vox {

template <typename T>
Tensor<T> loss_pi(const std::vector<Tensor<T>>& bank) {
  require(!bank.empty(), ErrorKind::dimension, "loss_pi: empty projection bank");
  const int64_t d = bank[0].dim(0);
  for (const auto& p : bank)
    require(p.ndim() == 2 && p.dim(0) == d && p.dim(1) == d, ErrorKind::dimension,
            "loss_pi: projections must be square matrices of equal size");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  // projection residual and ordered cross terms
  for (size_t i = 0; i < bank.size(); ++i) {
    for (size_t j = 0; j < bank.size(); ++j) {
      if (i == j) {
        auto resid = sub(matmul(bank[i], bank[i]), bank[i]);
        total = add(total, sum(square(resid)));
      } else {
        total = add(total, sum(square(matmul(bank[i], bank[j]))));
      }
    }
  }
  // sum-to-identity residual
  Tensor<T> acc = bank[0];
  for (size_t i = 1; i < bank.size(); ++i) acc = add(acc, bank[i]);
  Tensor<T> eye = Tensor<T>::zeros({d, d});
  for (int64_t i = 0; i < d; ++i) eye.at({i, i}) = T(1);
  total = add(total, sum(square(sub(acc, eye))));
  return total;
}

template <typename T>
Tensor<T> loss_part(const Tensor<T>& output, const Tensor<T>& target, const Tensor<T>& present,
                    T gamma) {
  require(output.ndim() >= 2, ErrorKind::dimension, "loss_part: expected (B,N_p,...) output");
  require(present.ndim() == 2 && present.dim(0) == output.dim(0) &&
              present.dim(1) == output.dim(1),
          ErrorKind::dimension, "loss_part: present mask must be (B,N_p)");
  return bce_weighted(output, target, present, gamma);
}

template <typename T>
Tensor<T> loss_trans(const Tensor<T>& pred, const Tensor<T>& gt, const Tensor<T>& present) {
  require(pred.shape() == gt.shape(), ErrorKind::dimension, "loss_trans: shape mismatch");
  require(pred.ndim() == 3 && pred.dim(2) == 6, ErrorKind::dimension,
          "loss_trans: expected (B,N_p,6)");
  const int64_t B = pred.dim(0), P = pred.dim(1);
  require(present.ndim() == 2 && present.dim(0) == B && present.dim(1) == P,
          ErrorKind::dimension, "loss_trans: present mask must be (B,N_p)");
  Tensor<T> mask6 = Tensor<T>::zeros({B, P, 6});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t p = 0; p < P; ++p)
      for (int64_t k = 0; k < 6; ++k)
        mask6.at({b, p, k}) = present.at({b, p});
  return scale(sum(mul(square(sub(pred, gt)), mask6)), T(1) / static_cast<T>(B));
}

template <typename T>
Tensor<T> loss_ac(const std::vector<Tensor<T>>& ac_vectors) {
  require(!ac_vectors.empty(), ErrorKind::dimension, "loss_ac: no attention outputs");
  if (ac_vectors.size() == 1) {
    std::cerr << "warning: attention consistency loss needs at least two feature layers; "
                 "returning 0\n";
    return Tensor<T>::scalar(T(0));
  }
  for (size_t i = 1; i < ac_vectors.size(); ++i)
    require(ac_vectors[i].shape() == ac_vectors[0].shape(), ErrorKind::dimension,
            "loss_ac: layer outputs must share a shape");
  Tensor<T> total = Tensor<T>::scalar(T(0));
  for (size_t i = 0; i < ac_vectors.size(); ++i)
    for (size_t j = i + 1; j < ac_vectors.size(); ++j)
      total = add(total, mean(square(sub(ac_vectors[i], ac_vectors[j]))));
  return total;
}

template <typename T>
Tensor<T> loss_shape(const Tensor<T>& assembled, const Tensor<T>& target, T gamma) {
  require(assembled.shape() == target.shape(), ErrorKind::dimension, "loss_shape: shape mismatch");
  return bce_weighted(assembled, target, Tensor<T>(), gamma);
}

template <typename T>
Tensor<T> stage_loss(int stage, const StageLossInputs<T>& inputs, const LossWeights<T>& weights,
                     StageLossReport& report) {
  require(stage >= 1 && stage <= 3, ErrorKind::config, "stage_loss: stage must be 1, 2 or 3");
  report = StageLossReport{};
  report.stage = stage;
  const bool use_recon = stage == 1 || stage == 3;
  const bool use_trans = stage == 2 || stage == 3;
  Tensor<T> total = Tensor<T>::scalar(T(0));

  if (use_recon) {
    require(inputs.bank != nullptr, ErrorKind::state, "stage_loss: projection bank missing");
    require(inputs.part_output.defined() && inputs.part_target.defined() &&
                inputs.part_mask.defined(),
            ErrorKind::state, "stage_loss: part reconstruction inputs missing");
    auto pi = loss_pi(*inputs.bank);
    auto part = loss_part(inputs.part_output, inputs.part_target, inputs.part_mask, weights.gamma);
    report.loss_pi = static_cast<double>(pi.item());
    report.loss_part = static_cast<double>(part.item());
    total = add(total, add(scale(pi, weights.w_pi), scale(part, weights.w_part)));
  }
  if (use_trans) {
    require(inputs.trans_pred.defined() && inputs.trans_gt.defined() &&
                inputs.trans_mask.defined(),
            ErrorKind::state, "stage_loss: transformation inputs missing");
    auto trans = loss_trans(inputs.trans_pred, inputs.trans_gt, inputs.trans_mask);
    report.loss_trans = static_cast<double>(trans.item());
    total = add(total, scale(trans, weights.w_trans));
    if (inputs.ac_active && weights.w_ac != T(0)) {
      require(!inputs.ac_vectors.empty(), ErrorKind::state,
              "stage_loss: consistency term active but no attention outputs given");
      auto ac = loss_ac(inputs.ac_vectors);
      report.loss_ac = static_cast<double>(ac.item());
      total = add(total, scale(ac, weights.w_ac));
    }
  }
  if (stage == 3) {
    require(inputs.assembled.defined() && inputs.shape_target.defined(), ErrorKind::state,
            "stage_loss: assembled shape inputs missing");
    auto shp = loss_shape(inputs.assembled, inputs.shape_target, weights.gamma);
    report.loss_shape = static_cast<double>(shp.item());
    total = add(total, scale(shp, weights.w_shape));
  }
  report.total = static_cast<double>(total.item());
  return total;
}

#define VOX_INSTANTIATE_LOSSES(T)                                                          \
  template Tensor<T> loss_pi<T>(const std::vector<Tensor<T>>&);                            \
  template Tensor<T> loss_part<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T); \
  template Tensor<T> loss_trans<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);  \
  template Tensor<T> loss_ac<T>(const std::vector<Tensor<T>>&);                            \
  template Tensor<T> loss_shape<T>(const Tensor<T>&, const Tensor<T>&, T);                 \
  template Tensor<T> stage_loss<T>(int, const StageLossInputs<T>&, const LossWeights<T>&,  \
                                   StageLossReport&);

VOX_INSTANTIATE_LOSSES(float)
VOX_INSTANTIATE_LOSSES(double)

}  // namespace vox
