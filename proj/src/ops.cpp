#include "voxattention/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>

namespace vox {

namespace {

template <typename T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapRM = Eigen::Map<MatRM<T>>;
template <typename T>
using CMapRM = Eigen::Map<const MatRM<T>>;
template <typename T>
using VecMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
template <typename T>
using CVecMap = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;

template <typename T>
bool recording(std::initializer_list<const Tensor<T>*> inputs) {
  if (!Tape<T>::active()) return false;
  for (const auto* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

template <typename T>
void mark_interior(Tensor<T>& out) {
  out.node()->requires_grad = true;
  out.node()->leaf = false;
}

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

// splits shape into [outer, n, inner] around axis
void axis_split(const Shape& s, int axis, int64_t& outer, int64_t& n, int64_t& inner) {
  require(axis >= 0 && axis < static_cast<int>(s.size()), ErrorKind::dimension,
          "axis out of range for shape " + shape_str(s));
  outer = 1;
  inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  n = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
}

template <typename T>
Tensor<T> elementwise_unary(const Tensor<T>& a, auto fwd, auto dfd) {
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* pa = a.data().data();
  T* po = out.data().data();
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on, dfd] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += dfd(an->value[i], on->value[i]) * go[i];
    });
  }
  return out;
}

}  // namespace

// ---- elementwise -----------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          "add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] + b.data()[i];
  if (recording<T>({&a, &b})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record([an, bn, on] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      for (const NodePtr<T>& in : {an, bn}) {
        if (!detail::wants_grad(in)) continue;
        auto g = detail::pass_adjoint_accum<T>(in);
        for (size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          "sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] - b.data()[i];
  if (recording<T>({&a, &b})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record([an, bn, on] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      if (detail::wants_grad(an)) {
        auto g = detail::pass_adjoint_accum<T>(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += go[i];
      }
      if (detail::wants_grad(bn)) {
        auto g = detail::pass_adjoint_accum<T>(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] -= go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), ErrorKind::dimension,
          "mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) out.data()[i] = a.data()[i] * b.data()[i];
  if (recording<T>({&a, &b})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record([an, bn, on] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      if (detail::wants_grad(an)) {
        auto g = detail::pass_adjoint_accum<T>(an);
        for (size_t i = 0; i < g.size(); ++i) g[i] += bn->value[i] * go[i];
      }
      if (detail::wants_grad(bn)) {
        auto g = detail::pass_adjoint_accum<T>(bn);
        for (size_t i = 0; i < g.size(); ++i) g[i] += an->value[i] * go[i];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return elementwise_unary(
      a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return elementwise_unary(
      a, [c](T x) { return x + c; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return elementwise_unary(
      a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---- structure -------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  require(shape_numel(shape) == a.numel(), ErrorKind::dimension,
          "reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out = Tensor<T>::from(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

namespace {

// copy with axes p,q swapped; dims split as [outer][P][mid][Q][inner]
template <typename T>
void swapped_copy(const T* src, T* dst, int64_t outer, int64_t P, int64_t mid, int64_t Q,
                  int64_t inner, bool add) {
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < P; ++i)
      for (int64_t m = 0; m < mid; ++m)
        for (int64_t j = 0; j < Q; ++j) {
          const T* s = src + ((((o * P + i) * mid + m) * Q + j) * inner);
          T* d = dst + ((((o * Q + j) * mid + m) * P + i) * inner);
          if (add)
            for (int64_t k = 0; k < inner; ++k) d[k] += s[k];
          else
            std::memcpy(d, s, sizeof(T) * static_cast<size_t>(inner));
        }
}

}  // namespace

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, int axis0, int axis1) {
  const Shape& s = a.shape();
  const int nd = a.ndim();
  require(axis0 >= 0 && axis0 < nd && axis1 >= 0 && axis1 < nd && axis0 != axis1,
          ErrorKind::dimension, "transpose: bad axes for shape " + shape_str(s));
  const int p = std::min(axis0, axis1), q = std::max(axis0, axis1);
  int64_t outer = 1, mid = 1, inner = 1;
  for (int i = 0; i < p; ++i) outer *= s[static_cast<size_t>(i)];
  for (int i = p + 1; i < q; ++i) mid *= s[static_cast<size_t>(i)];
  for (int i = q + 1; i < nd; ++i) inner *= s[static_cast<size_t>(i)];
  const int64_t P = s[static_cast<size_t>(p)], Q = s[static_cast<size_t>(q)];
  Shape out_shape = s;
  std::swap(out_shape[static_cast<size_t>(p)], out_shape[static_cast<size_t>(q)]);
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  swapped_copy(a.data().data(), out.data().data(), outer, P, mid, Q, inner, false);
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on, outer, P, mid, Q, inner] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      // inverse swap: go has [outer][Q][mid][P][inner]
      swapped_copy(go.data(), ga.data(), outer, Q, mid, P, inner, true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  require(!parts.empty(), ErrorKind::dimension, "concat: no inputs");
  const Shape& s0 = parts[0].shape();
  int64_t outer, n0, inner;
  axis_split(s0, axis, outer, n0, inner);
  int64_t total = 0;
  for (const auto& p : parts) {
    require(p.ndim() == parts[0].ndim(), ErrorKind::dimension, "concat: rank mismatch");
    for (int i = 0; i < p.ndim(); ++i)
      require(i == axis || p.dim(i) == s0[static_cast<size_t>(i)], ErrorKind::dimension,
              "concat: shape mismatch on non-concat axis");
    total += p.dim(axis);
  }
  Shape out_shape = s0;
  out_shape[static_cast<size_t>(axis)] = total;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  T* po = out.data().data();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t np = p.dim(axis);
    const T* ps = p.data().data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(po + (o * total + off) * inner, ps + o * np * inner,
                  sizeof(T) * static_cast<size_t>(np * inner));
    off += np;
  }
  bool rec = false;
  for (const auto& p : parts) rec = rec || recording<T>({&p});
  if (rec) {
    mark_interior(out);
    std::vector<NodePtr<T>> in_nodes;
    std::vector<int64_t> lens;
    for (const auto& p : parts) {
      in_nodes.push_back(p.node());
      lens.push_back(p.dim(axis));
    }
    NodePtr<T> on = out.node();
    Tape<T>::active()->record([in_nodes, lens, on, outer, inner, total] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      int64_t off2 = 0;
      for (size_t k = 0; k < in_nodes.size(); ++k) {
        const int64_t np = lens[k];
        if (detail::wants_grad(in_nodes[k])) {
          auto g = detail::pass_adjoint_accum<T>(in_nodes[k]);
          for (int64_t o = 0; o < outer; ++o) {
            const T* src = go.data() + (o * total + off2) * inner;
            T* dst = g.data() + o * np * inner;
            for (int64_t i = 0; i < np * inner; ++i) dst[i] += src[i];
          }
        }
        off2 += np;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int64_t start, int64_t length) {
  int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  require(start >= 0 && length >= 1 && start + length <= n, ErrorKind::dimension,
          "slice: window out of range");
  Shape out_shape = a.shape();
  out_shape[static_cast<size_t>(axis)] = length;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* ps = a.data().data();
  T* po = out.data().data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(po + o * length * inner, ps + (o * n + start) * inner,
                sizeof(T) * static_cast<size_t>(length * inner));
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on, outer, n, inner, start, length] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = go.data() + o * length * inner;
        T* dst = ga.data() + (o * n + start) * inner;
        for (int64_t i = 0; i < length * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return out;
}

// ---- reductions ------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> out = Tensor<T>::scalar(acc);
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, int axis) {
  int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Shape out_shape;
  for (int i = 0; i < a.ndim(); ++i)
    if (i != axis) out_shape.push_back(a.dim(i));
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  const T* ps = a.data().data();
  T* po = out.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t k = 0; k < n; ++k) {
      const T* src = ps + (o * n + k) * inner;
      T* dst = po + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on, outer, n, inner] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t k = 0; k < n; ++k) {
          T* dst = ga.data() + (o * n + k) * inner;
          const T* src = go.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, int axis) {
  return scale(sum_axis(a, axis), T(1) / static_cast<T>(a.dim(axis)));
}

// ---- linear algebra --------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.ndim() == 2 && b.ndim() == 2 && a.dim(1) == b.dim(0), ErrorKind::dimension,
          "matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  Tensor<T> out = Tensor<T>::zeros({M, N});
  CMapRM<T> A(a.data().data(), M, K), B(b.data().data(), K, N);
  MapRM<T> O(out.data().data(), M, N);
  O.noalias() = A * B;
  if (recording<T>({&a, &b})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record([an, bn, on, M, K, N] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      CMapRM<T> G(go.data(), M, N);
      if (detail::wants_grad(an)) {
        auto ga = detail::pass_adjoint_accum<T>(an);
        MapRM<T> GA(ga.data(), M, K);
        CMapRM<T> B(bn->value.data(), K, N);
        GA.noalias() += G * B.transpose();
      }
      if (detail::wants_grad(bn)) {
        auto gb = detail::pass_adjoint_accum<T>(bn);
        MapRM<T> GB(gb.data(), K, N);
        CMapRM<T> A(an->value.data(), M, K);
        GB.noalias() += A.transpose() * G;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b) {
  require(a.ndim() == 3 && b.ndim() == 3 && a.dim(0) == b.dim(0), ErrorKind::dimension,
          "bmm: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t Bt = a.dim(0), M = a.dim(1), K = a.dim(2);
  const int64_t N = transpose_b ? b.dim(1) : b.dim(2);
  require(transpose_b ? b.dim(2) == K : b.dim(1) == K, ErrorKind::dimension,
          "bmm: inner dimension mismatch");
  Tensor<T> out = Tensor<T>::zeros({Bt, M, N});
  for (int64_t i = 0; i < Bt; ++i) {
    CMapRM<T> A(a.data().data() + i * M * K, M, K);
    MapRM<T> O(out.data().data() + i * M * N, M, N);
    if (transpose_b) {
      CMapRM<T> Bm(b.data().data() + i * N * K, N, K);
      O.noalias() = A * Bm.transpose();
    } else {
      CMapRM<T> Bm(b.data().data() + i * K * N, K, N);
      O.noalias() = A * Bm;
    }
  }
  if (recording<T>({&a, &b})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), bn = b.node(), on = out.node();
    Tape<T>::active()->record([an, bn, on, Bt, M, K, N, transpose_b] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      for (int64_t i = 0; i < Bt; ++i) {
        CMapRM<T> G(go.data() + i * M * N, M, N);
        if (detail::wants_grad(an)) {
          auto ga = detail::pass_adjoint_accum<T>(an);
          MapRM<T> GA(ga.data() + i * M * K, M, K);
          if (transpose_b) {
            CMapRM<T> Bm(bn->value.data() + i * N * K, N, K);
            GA.noalias() += G * Bm;
          } else {
            CMapRM<T> Bm(bn->value.data() + i * K * N, K, N);
            GA.noalias() += G * Bm.transpose();
          }
        }
        if (detail::wants_grad(bn)) {
          auto gb = detail::pass_adjoint_accum<T>(bn);
          CMapRM<T> A(an->value.data() + i * M * K, M, K);
          if (transpose_b) {
            MapRM<T> GB(gb.data() + i * N * K, N, K);
            GB.noalias() += G.transpose() * A;
          } else {
            MapRM<T> GB(gb.data() + i * K * N, K, N);
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(x.ndim() >= 1 && weight.ndim() == 2 && bias.ndim() == 1, ErrorKind::dimension,
          "dense: bad ranks");
  const int64_t f_in = x.dim(x.ndim() - 1);
  const int64_t f_out = weight.dim(0);
  require(weight.dim(1) == f_in, ErrorKind::dimension,
          "dense: weight expects " + std::to_string(weight.dim(1)) + " inputs, got " +
              std::to_string(f_in));
  require(bias.dim(0) == f_out, ErrorKind::dimension, "dense: bias length mismatch");
  const int64_t rows = x.numel() / f_in;
  Shape out_shape = x.shape();
  out_shape.back() = f_out;
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  CMapRM<T> X(x.data().data(), rows, f_in), W(weight.data().data(), f_out, f_in);
  CVecMap<T> Bv(bias.data().data(), f_out);
  MapRM<T> O(out.data().data(), rows, f_out);
  O.noalias() = X * W.transpose();
  O.rowwise() += Bv.transpose();
  if (recording<T>({&x, &weight, &bias})) {
    mark_interior(out);
    NodePtr<T> xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    Tape<T>::active()->record([xn, wn, bn, on, rows, f_in, f_out] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      CMapRM<T> G(go.data(), rows, f_out);
      if (detail::wants_grad(xn)) {
        auto gx = detail::pass_adjoint_accum<T>(xn);
        MapRM<T> GX(gx.data(), rows, f_in);
        CMapRM<T> W(wn->value.data(), f_out, f_in);
        GX.noalias() += G * W;
      }
      if (detail::wants_grad(wn)) {
        auto gw = detail::pass_adjoint_accum<T>(wn);
        MapRM<T> GW(gw.data(), f_out, f_in);
        CMapRM<T> X(xn->value.data(), rows, f_in);
        GW.noalias() += G.transpose() * X;
      }
      if (detail::wants_grad(bn)) {
        auto gb = detail::pass_adjoint_accum<T>(bn);
        VecMap<T> GB(gb.data(), f_out);
        GB.noalias() += G.colwise().sum().transpose();
      }
    });
  }
  return out;
}

// ---- activations / normalization -------------------------------------------

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return elementwise_unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return elementwise_unary(
      a,
      [](T x) {
        // evaluate on the non-overflowing side
        if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  int64_t outer, n, inner;
  axis_split(a.shape(), axis, outer, n, inner);
  Tensor<T> out = Tensor<T>::zeros(a.shape());
  const T* ps = a.data().data();
  T* po = out.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const T* lane = ps + o * n * inner + i;
      T* dst = po + o * n * inner + i;
      T mx = lane[0];
      for (int64_t k = 1; k < n; ++k) mx = std::max(mx, lane[k * inner]);
      T denom = 0;
      for (int64_t k = 0; k < n; ++k) {
        const T e = std::exp(lane[k * inner] - mx);
        dst[k * inner] = e;
        denom += e;
      }
      const T inv = T(1) / denom;
      for (int64_t k = 0; k < n; ++k) dst[k * inner] *= inv;
    }
  if (recording<T>({&a})) {
    mark_interior(out);
    NodePtr<T> an = a.node(), on = out.node();
    Tape<T>::active()->record([an, on, outer, n, inner] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t i = 0; i < inner; ++i) {
          const int64_t base = o * n * inner + i;
          T dot = 0;
          for (int64_t k = 0; k < n; ++k) dot += go[base + k * inner] * on->value[base + k * inner];
          for (int64_t k = 0; k < n; ++k) {
            const T y = on->value[base + k * inner];
            ga[base + k * inner] += y * (go[base + k * inner] - dot);
          }
        }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  require(x.ndim() >= 1 && gamma.ndim() == 1 && beta.ndim() == 1, ErrorKind::dimension,
          "layernorm: bad ranks");
  const int64_t f = x.dim(x.ndim() - 1);
  require(gamma.dim(0) == f && beta.dim(0) == f, ErrorKind::dimension,
          "layernorm: scale/shift length mismatch");
  const int64_t rows = x.numel() / f;
  Tensor<T> out = Tensor<T>::zeros(x.shape());
  std::vector<T> inv_std(static_cast<size_t>(rows));
  std::vector<T> mu(static_cast<size_t>(rows));
  const T* px = x.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  T* po = out.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * f;
    T m = 0;
    for (int64_t i = 0; i < f; ++i) m += row[i];
    m /= static_cast<T>(f);
    T v = 0;
    for (int64_t i = 0; i < f; ++i) {
      const T d = row[i] - m;
      v += d * d;
    }
    v /= static_cast<T>(f);
    const T istd = T(1) / std::sqrt(v + eps);
    mu[static_cast<size_t>(r)] = m;
    inv_std[static_cast<size_t>(r)] = istd;
    T* orow = po + r * f;
    for (int64_t i = 0; i < f; ++i) orow[i] = pg[i] * (row[i] - m) * istd + pb[i];
  }
  if (recording<T>({&x, &gamma, &beta})) {
    mark_interior(out);
    NodePtr<T> xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape<T>::active()->record([xn, gn, bn, on, rows, f, mu, inv_std] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      const bool want_x = detail::wants_grad(xn);
      const bool want_g = detail::wants_grad(gn);
      const bool want_b = detail::wants_grad(bn);
      std::span<T> gx, gg, gb;
      if (want_x) gx = detail::pass_adjoint_accum<T>(xn);
      if (want_g) gg = detail::pass_adjoint_accum<T>(gn);
      if (want_b) gb = detail::pass_adjoint_accum<T>(bn);
      for (int64_t r = 0; r < rows; ++r) {
        const T m = mu[static_cast<size_t>(r)], istd = inv_std[static_cast<size_t>(r)];
        const T* xrow = xn->value.data() + r * f;
        const T* grow = go.data() + r * f;
        if (want_g || want_b) {
          for (int64_t i = 0; i < f; ++i) {
            if (want_g) gg[static_cast<size_t>(i)] += grow[i] * (xrow[i] - m) * istd;
            if (want_b) gb[static_cast<size_t>(i)] += grow[i];
          }
        }
        if (want_x) {
          T sum_gh = 0, sum_ghx = 0;
          for (int64_t i = 0; i < f; ++i) {
            const T gh = grow[i] * gn->value[static_cast<size_t>(i)];
            const T xh = (xrow[i] - m) * istd;
            sum_gh += gh;
            sum_ghx += gh * xh;
          }
          const T invf = T(1) / static_cast<T>(f);
          for (int64_t i = 0; i < f; ++i) {
            const T gh = grow[i] * gn->value[static_cast<size_t>(i)];
            const T xh = (xrow[i] - m) * istd;
            gx[static_cast<size_t>(r * f + i)] += istd * (gh - invf * sum_gh - xh * invf * sum_ghx);
          }
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                      Tensor<T>& running_mean, Tensor<T>& running_var, bool training, T momentum,
                      T eps) {
  require(x.ndim() == 5, ErrorKind::dimension, "batchnorm3d: expected (B,C,H,W,D)");
  const int64_t B = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3) * x.dim(4);
  require(gamma.numel() == C && beta.numel() == C && running_mean.numel() == C &&
              running_var.numel() == C,
          ErrorKind::dimension, "batchnorm3d: per-channel tensor length mismatch");
  const int64_t m = B * S;
  require(!training || m >= 2, ErrorKind::dimension,
          "batchnorm3d: training mode needs at least 2 samples per channel");

  std::vector<T> mu(static_cast<size_t>(C)), istd(static_cast<size_t>(C));
  const T* px = x.data().data();
  if (training) {
    for (int64_t c = 0; c < C; ++c) {
      T acc = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* base = px + (b * C + c) * S;
        for (int64_t i = 0; i < S; ++i) acc += base[i];
      }
      const T mean_c = acc / static_cast<T>(m);
      T var_acc = 0;
      for (int64_t b = 0; b < B; ++b) {
        const T* base = px + (b * C + c) * S;
        for (int64_t i = 0; i < S; ++i) {
          const T d = base[i] - mean_c;
          var_acc += d * d;
        }
      }
      const T var_c = var_acc / static_cast<T>(m);
      mu[static_cast<size_t>(c)] = mean_c;
      istd[static_cast<size_t>(c)] = T(1) / std::sqrt(var_c + eps);
      const T unbiased = var_acc / static_cast<T>(m - 1);
      running_mean.data()[static_cast<size_t>(c)] =
          momentum * running_mean.data()[static_cast<size_t>(c)] + (T(1) - momentum) * mean_c;
      running_var.data()[static_cast<size_t>(c)] =
          momentum * running_var.data()[static_cast<size_t>(c)] + (T(1) - momentum) * unbiased;
    }
  } else {
    for (int64_t c = 0; c < C; ++c) {
      mu[static_cast<size_t>(c)] = running_mean.data()[static_cast<size_t>(c)];
      istd[static_cast<size_t>(c)] =
          T(1) / std::sqrt(running_var.data()[static_cast<size_t>(c)] + eps);
    }
  }

  Tensor<T> out = Tensor<T>::zeros(x.shape());
  T* po = out.data().data();
  const T* pg = gamma.data().data();
  const T* pb = beta.data().data();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const T* base = px + (b * C + c) * S;
      T* obase = po + (b * C + c) * S;
      const T g = pg[c], bb = pb[c], mc = mu[static_cast<size_t>(c)],
              ic = istd[static_cast<size_t>(c)];
      for (int64_t i = 0; i < S; ++i) obase[i] = g * (base[i] - mc) * ic + bb;
    }

  if (recording<T>({&x, &gamma, &beta})) {
    mark_interior(out);
    NodePtr<T> xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out.node();
    Tape<T>::active()->record([xn, gn, bn, on, B, C, S, m, mu, istd, training] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      const bool want_x = detail::wants_grad(xn);
      const bool want_g = detail::wants_grad(gn);
      const bool want_b = detail::wants_grad(bn);
      std::span<T> gx, gg, gb;
      if (want_x) gx = detail::pass_adjoint_accum<T>(xn);
      if (want_g) gg = detail::pass_adjoint_accum<T>(gn);
      if (want_b) gb = detail::pass_adjoint_accum<T>(bn);
      for (int64_t c = 0; c < C; ++c) {
        const T mc = mu[static_cast<size_t>(c)], ic = istd[static_cast<size_t>(c)];
        const T g = gn->value[static_cast<size_t>(c)];
        T sum_g = 0, sum_gx = 0;
        for (int64_t b = 0; b < B; ++b) {
          const T* xbase = xn->value.data() + (b * C + c) * S;
          const T* gbase = go.data() + (b * C + c) * S;
          for (int64_t i = 0; i < S; ++i) {
            sum_g += gbase[i];
            sum_gx += gbase[i] * (xbase[i] - mc) * ic;
          }
        }
        if (want_g) gg[static_cast<size_t>(c)] += sum_gx;
        if (want_b) gb[static_cast<size_t>(c)] += sum_g;
        if (want_x) {
          if (training) {
            const T invm = T(1) / static_cast<T>(m);
            for (int64_t b = 0; b < B; ++b) {
              const T* xbase = xn->value.data() + (b * C + c) * S;
              const T* gbase = go.data() + (b * C + c) * S;
              T* dst = gx.data() + (b * C + c) * S;
              for (int64_t i = 0; i < S; ++i) {
                const T xh = (xbase[i] - mc) * ic;
                dst[i] += g * ic * (gbase[i] - invm * sum_g - xh * invm * sum_gx);
              }
            }
          } else {
            for (int64_t b = 0; b < B; ++b) {
              const T* gbase = go.data() + (b * C + c) * S;
              T* dst = gx.data() + (b * C + c) * S;
              for (int64_t i = 0; i < S; ++i) dst[i] += g * ic * gbase[i];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- convolution -----------------------------------------------------------

namespace {

struct ConvGeom {
  int64_t C;        // channels of the "image" side
  int64_t H, W, D;  // image extents
  int64_t Ho, Wo, Do;  // column-grid extents
  int k, stride, pad;
  int64_t rows() const { return C * k * k * k; }
  int64_t cols() const { return Ho * Wo * Do; }
};

// cols(r,m) = img[c, ho*s-p+a, wo*s-p+b, do*s-p+e], zero outside
template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const int64_t M = g.cols();
  for (int64_t c = 0; c < g.C; ++c)
    for (int a = 0; a < g.k; ++a)
      for (int b = 0; b < g.k; ++b)
        for (int e = 0; e < g.k; ++e) {
          T* row = cols + (((c * g.k + a) * g.k + b) * g.k + e) * M;
          int64_t mi = 0;
          for (int64_t ho = 0; ho < g.Ho; ++ho) {
            const int64_t h = ho * g.stride - g.pad + a;
            const bool h_ok = h >= 0 && h < g.H;
            for (int64_t wo = 0; wo < g.Wo; ++wo) {
              const int64_t w = wo * g.stride - g.pad + b;
              const bool hw_ok = h_ok && w >= 0 && w < g.W;
              const T* src = img + ((c * g.H + h) * g.W + w) * g.D;
              for (int64_t dd = 0; dd < g.Do; ++dd, ++mi) {
                const int64_t d = dd * g.stride - g.pad + e;
                row[mi] = (hw_ok && d >= 0 && d < g.D) ? src[d] : T(0);
              }
            }
          }
        }
}

// img[c, ho*s-p+a, ...] += cols(r,m), skipping out-of-bounds entries
template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
  const int64_t M = g.cols();
  for (int64_t c = 0; c < g.C; ++c)
    for (int a = 0; a < g.k; ++a)
      for (int b = 0; b < g.k; ++b)
        for (int e = 0; e < g.k; ++e) {
          const T* row = cols + (((c * g.k + a) * g.k + b) * g.k + e) * M;
          int64_t mi = 0;
          for (int64_t ho = 0; ho < g.Ho; ++ho) {
            const int64_t h = ho * g.stride - g.pad + a;
            const bool h_ok = h >= 0 && h < g.H;
            for (int64_t wo = 0; wo < g.Wo; ++wo) {
              const int64_t w = wo * g.stride - g.pad + b;
              const bool hw_ok = h_ok && w >= 0 && w < g.W;
              T* dst = img + ((c * g.H + h) * g.W + w) * g.D;
              for (int64_t dd = 0; dd < g.Do; ++dd, ++mi) {
                const int64_t d = dd * g.stride - g.pad + e;
                if (hw_ok && d >= 0 && d < g.D) dst[d] += row[mi];
              }
            }
          }
        }
}

template <typename T>
std::vector<T>& scratch_a() {
  static thread_local std::vector<T> buf;
  return buf;
}
template <typename T>
std::vector<T>& scratch_b() {
  static thread_local std::vector<T> buf;
  return buf;
}

}  // namespace

template <typename T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                 int padding) {
  require(x.ndim() == 5 && weight.ndim() == 5 && bias.ndim() == 1, ErrorKind::dimension,
          "conv3d: expected x (B,C,H,W,D), weight (Co,Ci,k,k,k), bias (Co)");
  require(stride >= 1 && padding >= 0, ErrorKind::config, "conv3d: bad stride/padding");
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), D = x.dim(4);
  const int64_t Co = weight.dim(0);
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(1) == Ci, ErrorKind::dimension,
          "conv3d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
              std::to_string(Ci));
  require(weight.dim(3) == k && weight.dim(4) == k, ErrorKind::dimension,
          "conv3d: kernel must be cubic");
  require(bias.dim(0) == Co, ErrorKind::dimension, "conv3d: bias length mismatch");
  const int64_t Ho = (H + 2 * padding - k) / stride + 1;
  const int64_t Wo = (W + 2 * padding - k) / stride + 1;
  const int64_t Do = (D + 2 * padding - k) / stride + 1;
  require(H + 2 * padding >= k && Ho >= 1 && Wo >= 1 && Do >= 1, ErrorKind::config,
          "conv3d: non-positive output extent");

  const ConvGeom g{Ci, H, W, D, Ho, Wo, Do, k, stride, padding};
  const int64_t K = g.rows(), M = g.cols();
  Tensor<T> out = Tensor<T>::zeros({B, Co, Ho, Wo, Do});
  auto& cols = scratch_a<T>();
  cols.resize(static_cast<size_t>(K * M));
  CMapRM<T> Wm(weight.data().data(), Co, K);
  CVecMap<T> Bv(bias.data().data(), Co);
  for (int64_t bi = 0; bi < B; ++bi) {
    im2col(x.data().data() + bi * Ci * H * W * D, g, cols.data());
    CMapRM<T> Cm(cols.data(), K, M);
    MapRM<T> Om(out.data().data() + bi * Co * M, Co, M);
    Om.noalias() = Wm * Cm;
    Om.colwise() += Bv;
  }

  if (recording<T>({&x, &weight, &bias})) {
    mark_interior(out);
    NodePtr<T> xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    Tape<T>::active()->record([xn, wn, bn, on, g, B, Ci, Co, K, M] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      const int64_t img_sz = Ci * g.H * g.W * g.D;
      if (detail::wants_grad(bn)) {
        auto gb = detail::pass_adjoint_accum<T>(bn);
        for (int64_t bi = 0; bi < B; ++bi)
          for (int64_t c = 0; c < Co; ++c) {
            const T* base = go.data() + (bi * Co + c) * M;
            T acc = 0;
            for (int64_t i = 0; i < M; ++i) acc += base[i];
            gb[static_cast<size_t>(c)] += acc;
          }
      }
      const bool want_w = detail::wants_grad(wn);
      const bool want_x = detail::wants_grad(xn);
      if (!want_w && !want_x) return;
      auto& cols = scratch_a<T>();
      cols.resize(static_cast<size_t>(K * M));
      for (int64_t bi = 0; bi < B; ++bi) {
        CMapRM<T> G(go.data() + bi * Co * M, Co, M);
        if (want_w) {
          im2col(xn->value.data() + bi * img_sz, g, cols.data());
          CMapRM<T> Cm(cols.data(), K, M);
          auto gw = detail::pass_adjoint_accum<T>(wn);
          MapRM<T> GW(gw.data(), Co, K);
          GW.noalias() += G * Cm.transpose();
        }
        if (want_x) {
          auto& colsg = scratch_b<T>();
          colsg.resize(static_cast<size_t>(K * M));
          CMapRM<T> Wm(wn->value.data(), Co, K);
          MapRM<T> CG(colsg.data(), K, M);
          CG.noalias() = Wm.transpose() * G;
          auto gx = detail::pass_adjoint_accum<T>(xn);
          col2im_add(colsg.data(), g, gx.data() + bi * img_sz);
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> deconv3d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride,
                   int padding) {
  require(x.ndim() == 5 && weight.ndim() == 5 && bias.ndim() == 1, ErrorKind::dimension,
          "deconv3d: expected x (B,C,H,W,D), weight (Ci,Co,k,k,k), bias (Co)");
  require(stride >= 1 && padding >= 0, ErrorKind::config, "deconv3d: bad stride/padding");
  const int64_t B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3), D = x.dim(4);
  require(weight.dim(0) == Ci, ErrorKind::dimension,
          "deconv3d: weight expects " + std::to_string(weight.dim(0)) + " input channels, got " +
              std::to_string(Ci));
  const int64_t Co = weight.dim(1);
  const int k = static_cast<int>(weight.dim(2));
  require(weight.dim(3) == k && weight.dim(4) == k, ErrorKind::dimension,
          "deconv3d: kernel must be cubic");
  require(bias.dim(0) == Co, ErrorKind::dimension, "deconv3d: bias length mismatch");
  const int64_t Ho = (H - 1) * stride - 2 * padding + k;
  const int64_t Wo = (W - 1) * stride - 2 * padding + k;
  const int64_t Do = (D - 1) * stride - 2 * padding + k;
  require(Ho >= 1 && Wo >= 1 && Do >= 1, ErrorKind::config, "deconv3d: non-positive output extent");

  // column grid runs over the *input* spatial positions, image side is the output
  const ConvGeom g{Co, Ho, Wo, Do, H, W, D, k, stride, padding};
  const int64_t K = g.rows(), Mi = H * W * D, out_sz = Co * Ho * Wo * Do;
  Tensor<T> out = Tensor<T>::zeros({B, Co, Ho, Wo, Do});
  auto& cols = scratch_a<T>();
  cols.resize(static_cast<size_t>(K * Mi));
  CMapRM<T> Wm(weight.data().data(), Ci, K);
  for (int64_t bi = 0; bi < B; ++bi) {
    CMapRM<T> X(x.data().data() + bi * Ci * Mi, Ci, Mi);
    MapRM<T> Cm(cols.data(), K, Mi);
    Cm.noalias() = Wm.transpose() * X;
    T* obase = out.data().data() + bi * out_sz;
    col2im_add(cols.data(), g, obase);
    for (int64_t c = 0; c < Co; ++c) {
      const T bv = bias.data()[static_cast<size_t>(c)];
      T* dst = obase + c * Ho * Wo * Do;
      for (int64_t i = 0; i < Ho * Wo * Do; ++i) dst[i] += bv;
    }
  }

  if (recording<T>({&x, &weight, &bias})) {
    mark_interior(out);
    NodePtr<T> xn = x.node(), wn = weight.node(), bn = bias.node(), on = out.node();
    Tape<T>::active()->record([xn, wn, bn, on, g, B, Ci, Co, K, Mi, out_sz] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      const int64_t So = g.H * g.W * g.D;  // output spatial size
      if (detail::wants_grad(bn)) {
        auto gb = detail::pass_adjoint_accum<T>(bn);
        for (int64_t bi = 0; bi < B; ++bi)
          for (int64_t c = 0; c < Co; ++c) {
            const T* base = go.data() + bi * out_sz + c * So;
            T acc = 0;
            for (int64_t i = 0; i < So; ++i) acc += base[i];
            gb[static_cast<size_t>(c)] += acc;
          }
      }
      const bool want_w = detail::wants_grad(wn);
      const bool want_x = detail::wants_grad(xn);
      if (!want_w && !want_x) return;
      auto& cols = scratch_a<T>();
      cols.resize(static_cast<size_t>(K * Mi));
      for (int64_t bi = 0; bi < B; ++bi) {
        // gradient of the scatter: gather the output adjoint back into columns
        im2col(go.data() + bi * out_sz, g, cols.data());
        CMapRM<T> Cm(cols.data(), K, Mi);
        if (want_x) {
          auto gx = detail::pass_adjoint_accum<T>(xn);
          MapRM<T> GX(gx.data() + bi * Ci * Mi, Ci, Mi);
          CMapRM<T> Wm(wn->value.data(), Ci, K);
          GX.noalias() += Wm * Cm;
        }
        if (want_w) {
          auto gw = detail::pass_adjoint_accum<T>(wn);
          MapRM<T> GW(gw.data(), Ci, K);
          CMapRM<T> X(xn->value.data() + bi * Ci * Mi, Ci, Mi);
          GW.noalias() += X * Cm.transpose();
        }
      }
    });
  }
  return out;
}

// ---- task-specific kernels ---------------------------------------------------

template <typename T>
Tensor<T> bce_weighted(const Tensor<T>& output, const Tensor<T>& target, const Tensor<T>& mask,
                       T gamma) {
  require(output.shape() == target.shape(), ErrorKind::dimension,
          "bce: output/target shape mismatch");
  require(!target.requires_grad(), ErrorKind::unsupported, "bce: target must be constant");
  const int64_t n = output.numel();
  int64_t block = n;
  int64_t n_mask = 1;
  if (mask.defined()) {
    n_mask = mask.numel();
    require(n_mask > 0 && n % n_mask == 0, ErrorKind::dimension,
            "bce: mask must tile the output evenly");
    block = n / n_mask;
  }
  const T* po = output.data().data();
  const T* pt = target.data().data();
  const T* pm = mask.defined() ? mask.data().data() : nullptr;
  const T lo = T(1e-7), hi = T(1) - T(1e-7);
  double acc = 0.0, weight_sum = 0.0;
  for (int64_t j = 0; j < n_mask; ++j) {
    const T mj = pm ? pm[j] : T(1);
    if (mj == T(0)) continue;
    weight_sum += static_cast<double>(mj) * static_cast<double>(block);
    const T* ob = po + j * block;
    const T* tb = pt + j * block;
    double local = 0.0;
    for (int64_t i = 0; i < block; ++i) {
      const T o = std::clamp(ob[i], lo, hi);
      const T t = tb[i];
      if (t == T(1))
        local += static_cast<double>(gamma * std::log(o));
      else if (t == T(0))
        local += static_cast<double>((T(1) - gamma) * std::log(T(1) - o));
      else
        local += static_cast<double>(gamma * t * std::log(o) +
                                     (T(1) - gamma) * (T(1) - t) * std::log(T(1) - o));
    }
    acc += static_cast<double>(mj) * local;
  }
  const double denom = std::max(1.0, weight_sum);
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(-2.0 * acc / denom));
  if (recording<T>({&output})) {
    mark_interior(out);
    NodePtr<T> on = output.node(), mn = mask.defined() ? mask.node() : nullptr,
               tn = target.node(), rn = out.node();
    Tape<T>::active()->record([on, mn, tn, rn, n_mask, block, gamma, denom, lo, hi] {
      bool live;
      auto go = detail::pass_adjoint<T>(rn, live);
      if (!live || !detail::wants_grad(on)) return;
      auto g = detail::pass_adjoint_accum<T>(on);
      const T seed = go[0];
      const T inv = static_cast<T>(-2.0 / denom);
      for (int64_t j = 0; j < n_mask; ++j) {
        const T mj = mn ? mn->value[static_cast<size_t>(j)] : T(1);
        if (mj == T(0)) continue;
        for (int64_t i = 0; i < block; ++i) {
          const size_t idx = static_cast<size_t>(j * block + i);
          const T o = std::clamp(on->value[idx], lo, hi);
          const T t = tn->value[idx];
          const T d = gamma * t / o - (T(1) - gamma) * (T(1) - t) / (T(1) - o);
          g[idx] += seed * inv * mj * d;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> grid_sample_transform(const Tensor<T>& occupancy, const Tensor<T>& params) {
  require(occupancy.ndim() == 4 && occupancy.dim(0) == 1, ErrorKind::dimension,
          "grid_sample_transform: occupancy must be (1,R,R,R)");
  require(params.numel() == 6, ErrorKind::dimension, "grid_sample_transform: params must have 6 entries");
  const int64_t R = occupancy.dim(1);
  require(occupancy.dim(2) == R && occupancy.dim(3) == R, ErrorKind::dimension,
          "grid_sample_transform: occupancy must be cubic");
  const T* pp = params.data().data();
  for (int a = 0; a < 3; ++a)
    require(pp[a] > T(0), ErrorKind::config, "grid_sample_transform: non-positive scale");

  Tensor<T> out = Tensor<T>::zeros(occupancy.shape());
  const T* occ = occupancy.data().data();
  T* po = out.data().data();
  const T Rt = static_cast<T>(R);

  auto sample_voxel = [&](int64_t fx, int64_t fy, int64_t fz) -> T {
    if (fx < 0 || fy < 0 || fz < 0 || fx >= R || fy >= R || fz >= R) return T(0);
    return occ[(fx * R + fy) * R + fz];
  };

  for (int64_t ix = 0; ix < R; ++ix)
    for (int64_t iy = 0; iy < R; ++iy)
      for (int64_t iz = 0; iz < R; ++iz) {
        const T w[3] = {(static_cast<T>(ix) + T(0.5)) / Rt, (static_cast<T>(iy) + T(0.5)) / Rt,
                        (static_cast<T>(iz) + T(0.5)) / Rt};
        T u[3];
        for (int a = 0; a < 3; ++a) {
          const T c = (w[a] - T(0.5) - pp[3 + a]) / pp[a] + T(0.5);
          u[a] = c * Rt - T(0.5);
        }
        const int64_t f[3] = {static_cast<int64_t>(std::floor(u[0])),
                              static_cast<int64_t>(std::floor(u[1])),
                              static_cast<int64_t>(std::floor(u[2]))};
        const T fr[3] = {u[0] - static_cast<T>(f[0]), u[1] - static_cast<T>(f[1]),
                         u[2] - static_cast<T>(f[2])};
        T acc = 0;
        for (int dx = 0; dx < 2; ++dx)
          for (int dy = 0; dy < 2; ++dy)
            for (int dz = 0; dz < 2; ++dz) {
              const T wgt = (dx ? fr[0] : T(1) - fr[0]) * (dy ? fr[1] : T(1) - fr[1]) *
                            (dz ? fr[2] : T(1) - fr[2]);
              if (wgt != T(0)) acc += wgt * sample_voxel(f[0] + dx, f[1] + dy, f[2] + dz);
            }
        po[(ix * R + iy) * R + iz] = acc;
      }

  if (recording<T>({&occupancy, &params})) {
    mark_interior(out);
    NodePtr<T> qn = occupancy.node(), pn = params.node(), on = out.node();
    Tape<T>::active()->record([qn, pn, on, R] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live) return;
      const bool want_q = detail::wants_grad(qn);
      const bool want_p = detail::wants_grad(pn);
      if (!want_q && !want_p) return;
      std::span<T> gq, gp;
      if (want_q) gq = detail::pass_adjoint_accum<T>(qn);
      if (want_p) gp = detail::pass_adjoint_accum<T>(pn);
      const T* pp = pn->value.data();
      const T* occ = qn->value.data();
      const T Rt = static_cast<T>(R);
      auto in_bounds = [R](int64_t fx, int64_t fy, int64_t fz) {
        return fx >= 0 && fy >= 0 && fz >= 0 && fx < R && fy < R && fz < R;
      };
      for (int64_t ix = 0; ix < R; ++ix)
        for (int64_t iy = 0; iy < R; ++iy)
          for (int64_t iz = 0; iz < R; ++iz) {
            const T gout = go[static_cast<size_t>((ix * R + iy) * R + iz)];
            if (gout == T(0)) continue;
            const T w[3] = {(static_cast<T>(ix) + T(0.5)) / Rt,
                            (static_cast<T>(iy) + T(0.5)) / Rt,
                            (static_cast<T>(iz) + T(0.5)) / Rt};
            T u[3], c[3];
            for (int a = 0; a < 3; ++a) {
              c[a] = (w[a] - T(0.5) - pp[3 + a]) / pp[a] + T(0.5);
              u[a] = c[a] * Rt - T(0.5);
            }
            const int64_t f[3] = {static_cast<int64_t>(std::floor(u[0])),
                                  static_cast<int64_t>(std::floor(u[1])),
                                  static_cast<int64_t>(std::floor(u[2]))};
            const T fr[3] = {u[0] - static_cast<T>(f[0]), u[1] - static_cast<T>(f[1]),
                             u[2] - static_cast<T>(f[2])};
            T dacc_du[3] = {0, 0, 0};
            for (int dx = 0; dx < 2; ++dx)
              for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                  const int64_t vx = f[0] + dx, vy = f[1] + dy, vz = f[2] + dz;
                  const T wx = dx ? fr[0] : T(1) - fr[0];
                  const T wy = dy ? fr[1] : T(1) - fr[1];
                  const T wz = dz ? fr[2] : T(1) - fr[2];
                  const bool ok = in_bounds(vx, vy, vz);
                  const T v = ok ? occ[(vx * R + vy) * R + vz] : T(0);
                  if (want_q && ok) gq[static_cast<size_t>((vx * R + vy) * R + vz)] += gout * wx * wy * wz;
                  if (want_p) {
                    dacc_du[0] += (dx ? T(1) : T(-1)) * wy * wz * v;
                    dacc_du[1] += wx * (dy ? T(1) : T(-1)) * wz * v;
                    dacc_du[2] += wx * wy * (dz ? T(1) : T(-1)) * v;
                  }
                }
            if (want_p) {
              for (int a = 0; a < 3; ++a) {
                // u = (c)*R - 0.5 with c = (w-0.5-t)/s + 0.5
                const T du_dt = -Rt / pp[a];
                const T du_ds = -Rt * (c[a] - T(0.5)) / pp[a];
                gp[static_cast<size_t>(a)] += gout * dacc_du[a] * du_ds;
                gp[static_cast<size_t>(3 + a)] += gout * dacc_du[a] * du_dt;
              }
            }
          }
    });
  }
  return out;
}

template <typename T>
Tensor<T> voxel_max_union(const Tensor<T>& parts) {
  require(parts.ndim() >= 2, ErrorKind::dimension, "voxel_max_union: need a part axis");
  const int64_t P = parts.dim(0);
  const int64_t V = parts.numel() / P;
  Shape out_shape(parts.shape().begin() + 1, parts.shape().end());
  Tensor<T> out = Tensor<T>::zeros(out_shape);
  std::vector<int32_t> winner(static_cast<size_t>(V), 0);
  const T* ps = parts.data().data();
  T* po = out.data().data();
  for (int64_t i = 0; i < V; ++i) {
    T best = ps[i];
    int32_t bi = 0;
    for (int64_t p = 1; p < P; ++p) {
      const T v = ps[p * V + i];
      if (v > best) {  // strict: ties keep the lowest part index
        best = v;
        bi = static_cast<int32_t>(p);
      }
    }
    po[i] = best;
    winner[static_cast<size_t>(i)] = bi;
  }
  if (recording<T>({&parts})) {
    mark_interior(out);
    NodePtr<T> an = parts.node(), on = out.node();
    Tape<T>::active()->record([an, on, winner = std::move(winner), V] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (int64_t i = 0; i < V; ++i)
        ga[static_cast<size_t>(winner[static_cast<size_t>(i)] * V + i)] += go[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> transform_activation(const Tensor<T>& raw) {
  require(raw.ndim() >= 1 && raw.dim(raw.ndim() - 1) == 6, ErrorKind::dimension,
          "transform_activation: last axis must have 6 entries");
  Tensor<T> out = Tensor<T>::zeros(raw.shape());
  const int64_t rows = raw.numel() / 6;
  const T* ps = raw.data().data();
  T* po = out.data().data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t i = 0; i < 6; ++i)
      po[r * 6 + i] = i < 3 ? std::exp(ps[r * 6 + i]) : ps[r * 6 + i];
  if (recording<T>({&raw})) {
    mark_interior(out);
    NodePtr<T> an = raw.node(), on = out.node();
    Tape<T>::active()->record([an, on, rows] {
      bool live;
      auto go = detail::pass_adjoint<T>(on, live);
      if (!live || !detail::wants_grad(an)) return;
      auto ga = detail::pass_adjoint_accum<T>(an);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t i = 0; i < 6; ++i) {
          const size_t idx = static_cast<size_t>(r * 6 + i);
          ga[idx] += (i < 3 ? on->value[idx] : T(1)) * go[idx];
        }
    });
  }
  return out;
}

// ---- explicit instantiations -------------------------------------------------

#define VOX_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                         \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                   \
  template Tensor<T> log<T>(const Tensor<T>&);                                                   \
  template Tensor<T> square<T>(const Tensor<T>&);                                                \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                        \
  template Tensor<T> transpose<T>(const Tensor<T>&, int, int);                                   \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, int);                              \
  template Tensor<T> slice<T>(const Tensor<T>&, int, int64_t, int64_t);                          \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                   \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                  \
  template Tensor<T> sum_axis<T>(const Tensor<T>&, int);                                         \
  template Tensor<T> mean_axis<T>(const Tensor<T>&, int);                                        \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> bmm<T>(const Tensor<T>&, const Tensor<T>&, bool);                           \
  template Tensor<T> dense<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);             \
  template Tensor<T> leaky_relu<T>(const Tensor<T>&, T);                                         \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                               \
  template Tensor<T> softmax<T>(const Tensor<T>&, int);                                          \
  template Tensor<T> layernorm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);      \
  template Tensor<T> batchnorm3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,        \
                                    Tensor<T>&, Tensor<T>&, bool, T, T);                         \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);  \
  template Tensor<T> deconv3d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int,      \
                                 int);                                                           \
  template Tensor<T> bce_weighted<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);   \
  template Tensor<T> grid_sample_transform<T>(const Tensor<T>&, const Tensor<T>&);               \
  template Tensor<T> voxel_max_union<T>(const Tensor<T>&);                                       \
  template Tensor<T> transform_activation<T>(const Tensor<T>&);

VOX_INSTANTIATE_OPS(float)
VOX_INSTANTIATE_OPS(double)

}  // namespace vox
