#include "voxattention/gradcheck.hpp"

#include <cmath>

namespace vox {

namespace {

double rel_error(double a, double b) {
  const double scale = std::max({1.0, std::fabs(a), std::fabs(b)});
  return std::fabs(a - b) / scale;
}

}  // namespace

template <typename T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f, std::vector<Tensor<T>> inputs,
                           T h, int64_t max_coords) {
  GradCheckReport report;
  for (auto& in : inputs) {
    in.set_requires_grad(true);
    in.zero_grad();
  }

  // reverse-mode pass
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f();
    require(loss.numel() == 1, ErrorKind::dimension, "grad_check: f must be scalar-valued");
    tape.backward(loss);
  }

  NoGradScope<T> no_grad;
  for (size_t k = 0; k < inputs.size(); ++k) {
    auto& in = inputs[k];
    const int64_t n = in.numel();
    int64_t step = 1;
    if (max_coords > 0 && n > max_coords) step = n / max_coords;
    const bool have_grad = in.has_grad();
    for (int64_t i = 0; i < n; i += step) {
      const T saved = in.data()[static_cast<size_t>(i)];
      in.data()[static_cast<size_t>(i)] = saved + h;
      const double fp = static_cast<double>(f().item());
      in.data()[static_cast<size_t>(i)] = saved - h;
      const double fm = static_cast<double>(f().item());
      in.data()[static_cast<size_t>(i)] = saved;
      const double fd = (fp - fm) / (2.0 * static_cast<double>(h));
      const double ad = have_grad ? static_cast<double>(in.grad()[static_cast<size_t>(i)]) : 0.0;
      const std::string loc = "input[" + std::to_string(k) + "][" + std::to_string(i) + "]";
      if (!std::isfinite(fd) || !std::isfinite(ad)) {
        report.all_finite = false;
        report.worst_location = loc;
        continue;
      }
      const double err = rel_error(ad, fd);
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_location = loc;
      }
    }
  }
  return report;
}

template GradCheckReport grad_check<float>(const std::function<Tensor<float>()>&,
                                           std::vector<Tensor<float>>, float, int64_t);
template GradCheckReport grad_check<double>(const std::function<Tensor<double>()>&,
                                            std::vector<Tensor<double>>, double, int64_t);

}  // namespace vox
