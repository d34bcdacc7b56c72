#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "uvlm/common.hpp"

namespace uvlm {

using Shape = std::vector<int>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

namespace detail {

template <class Real>
struct TensorNode {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until backward reaches this node
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backward_fn;  // absent on leaves
  const char* op = "leaf";

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), Real(0));
  }
};

}  // namespace detail

// Dense row-major tensor with reverse-mode autodiff. Value-semantics handle
// to a shared node; copies alias the same storage. The scalar type is a
// template parameter: the model stack runs float, gradient checking runs the
// same op code instantiated at double.
template <class Real>
class TensorT {
 public:
  using Node = detail::TensorNode<Real>;

  TensorT() = default;
  explicit TensorT(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static TensorT zeros(Shape shape, bool requires_grad = false) {
    return filled(std::move(shape), Real(0), requires_grad);
  }

  static TensorT filled(Shape shape, Real value, bool requires_grad = false) {
    auto n = std::make_shared<Node>();
    n->data.assign(size_t(shape_numel(shape)), value);
    n->shape = std::move(shape);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT from_data(Shape shape, std::vector<Real> values, bool requires_grad = false) {
    if (int64_t(values.size()) != shape_numel(shape))
      throw InvalidArgument("tensor: data length " + std::to_string(values.size()) +
                            " does not match shape " + shape_str(shape));
    for (Real v : values)
      if (!std::isfinite(double(v))) throw NumericFault("tensor", "non-finite value in input data");
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(values);
    n->requires_grad = requires_grad;
    return TensorT(std::move(n));
  }

  static TensorT scalar(Real value, bool requires_grad = false) {
    return from_data({1}, {value}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return int(node_->shape.size()); }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int64_t size() const { return int64_t(node_->data.size()); }
  int rows() const { return rank() == 1 ? 1 : dim(0); }
  int cols() const { return rank() == 1 ? dim(0) : dim(rank() - 1); }

  std::vector<Real>& data() { return node_->data; }
  const std::vector<Real>& data() const { return node_->data; }
  std::vector<Real>& grad() { return node_->grad; }
  const std::vector<Real>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  Real item() const {
    if (size() != 1) throw InvalidArgument("item: tensor is not scalar, shape " + shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() { node_->grad.clear(); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& handle() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

using Tensor = TensorT<float>;

namespace detail {

template <class Real>
void check_finite(const std::vector<Real>& v, const char* op) {
  for (Real x : v)
    if (!std::isfinite(double(x))) throw NumericFault(op, "non-finite value produced");
}

// Builds an op result node. Graph edges are recorded only when some input
// requires grad; otherwise the result is a plain constant.
template <class Real>
TensorT<Real> make_result(const char* op, Shape shape, std::vector<Real> data,
                          std::vector<TensorT<Real>> inputs,
                          std::function<void(TensorNode<Real>&)> backward) {
  check_finite(data, op);
  auto n = std::make_shared<TensorNode<Real>>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (const auto& t : inputs) n->parents.push_back(t.handle());
    n->backward_fn = std::move(backward);
  }
  return TensorT<Real>(std::move(n));
}

template <class Real>
void add_into(std::vector<Real>& dst, const std::vector<Real>& src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

template <class Real>
TensorT<Real> add(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() != b.shape())
    throw InvalidArgument("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<Real> out(a.data());
  detail::add_into(out, b.data());
  auto an = a.handle();
  auto bn = b.handle();
  return detail::make_result<Real>(
      "add", a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<Real>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          detail::add_into(an->grad, self.grad);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          detail::add_into(bn->grad, self.grad);
        }
      });
}

template <class Real>
TensorT<Real> mul(const TensorT<Real>& a, const TensorT<Real>& b) {
  if (a.shape() != b.shape())
    throw InvalidArgument("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<Real> out(a.data());
  const auto& bd = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bd[i];
  auto an = a.handle();
  auto bn = b.handle();
  return detail::make_result<Real>(
      "mul", a.shape(), std::move(out), {a, b}, [an, bn](detail::TensorNode<Real>& self) {
        if (an->requires_grad) {
          an->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i] * bn->data[i];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i] * an->data[i];
        }
      });
}

template <class Real>
TensorT<Real> scale(const TensorT<Real>& x, Real c) {
  std::vector<Real> out(x.data());
  for (Real& v : out) v *= c;
  auto xn = x.handle();
  return detail::make_result<Real>(
      "scale", x.shape(), std::move(out), {x}, [xn, c](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += c * self.grad[i];
      });
}

// M x N plus a length-N bias row added to every row.
template <class Real>
TensorT<Real> add_bias(const TensorT<Real>& x, const TensorT<Real>& bias) {
  if (x.rank() != 2 || bias.rank() != 1 || x.dim(1) != bias.dim(0))
    throw InvalidArgument("add_bias: need MxN and N, got " + shape_str(x.shape()) + " and " +
                          shape_str(bias.shape()));
  int m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(x.data());
  const auto& bd = bias.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(i) * n + j] += bd[size_t(j)];
  auto xn = x.handle();
  auto bn = bias.handle();
  return detail::make_result<Real>(
      "add_bias", x.shape(), std::move(out), {x, bias}, [xn, bn, m, n](detail::TensorNode<Real>& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          detail::add_into(xn->grad, self.grad);
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) bn->grad[size_t(j)] += self.grad[size_t(i) * n + j];
        }
      });
}

template <class Real>
TensorT<Real> matmul(const TensorT<Real>& a, const TensorT<Real>& b, bool transpose_b = false) {
  if (a.rank() != 2 || b.rank() != 2)
    throw InvalidArgument("matmul: rank-2 operands required, got " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1);
  int n = transpose_b ? b.dim(0) : b.dim(1);
  int bk = transpose_b ? b.dim(1) : b.dim(0);
  if (bk != k)
    throw InvalidArgument("matmul: inner dimension mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()) + (transpose_b ? " (transposed)" : ""));
  std::vector<Real> out(size_t(m) * n, Real(0));
  const Real* A = a.data().data();
  const Real* B = b.data().data();
  if (!transpose_b) {
    for (int i = 0; i < m; ++i) {
      Real* orow = out.data() + size_t(i) * n;
      const Real* arow = A + size_t(i) * k;
      for (int p = 0; p < k; ++p) {
        Real av = arow[p];
        const Real* brow = B + size_t(p) * n;
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
  } else {
    for (int i = 0; i < m; ++i) {
      const Real* arow = A + size_t(i) * k;
      Real* orow = out.data() + size_t(i) * n;
      for (int j = 0; j < n; ++j) {
        const Real* brow = B + size_t(j) * k;
        Real acc = 0;
        for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
        orow[j] = acc;
      }
    }
  }
  auto an = a.handle();
  auto bn = b.handle();
  return detail::make_result<Real>(
      "matmul", {m, n}, std::move(out), {a, b},
      [an, bn, m, n, k, transpose_b](detail::TensorNode<Real>& self) {
        const Real* G = self.grad.data();
        if (an->requires_grad) {
          an->ensure_grad();
          Real* dA = an->grad.data();
          const Real* B = bn->data.data();
          if (!transpose_b) {
            // dA += G * B^T
            for (int i = 0; i < m; ++i)
              for (int p = 0; p < k; ++p) {
                const Real* grow = G + size_t(i) * n;
                const Real* brow = B + size_t(p) * n;
                Real acc = 0;
                for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
                dA[size_t(i) * k + p] += acc;
              }
          } else {
            // dA += G * B
            for (int i = 0; i < m; ++i) {
              const Real* grow = G + size_t(i) * n;
              Real* darow = dA + size_t(i) * k;
              for (int j = 0; j < n; ++j) {
                Real gv = grow[j];
                const Real* brow = B + size_t(j) * k;
                for (int p = 0; p < k; ++p) darow[p] += gv * brow[p];
              }
            }
          }
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          Real* dB = bn->grad.data();
          const Real* A = an->data.data();
          if (!transpose_b) {
            // dB += A^T * G
            for (int i = 0; i < m; ++i) {
              const Real* arow = A + size_t(i) * k;
              const Real* grow = G + size_t(i) * n;
              for (int p = 0; p < k; ++p) {
                Real av = arow[p];
                Real* drow = dB + size_t(p) * n;
                for (int j = 0; j < n; ++j) drow[j] += av * grow[j];
              }
            }
          } else {
            // dB += G^T * A
            for (int i = 0; i < m; ++i) {
              const Real* arow = A + size_t(i) * k;
              const Real* grow = G + size_t(i) * n;
              for (int j = 0; j < n; ++j) {
                Real gv = grow[j];
                Real* drow = dB + size_t(j) * k;
                for (int p = 0; p < k; ++p) drow[p] += gv * arow[p];
              }
            }
          }
        }
      });
}

template <class Real>
TensorT<Real> transpose(const TensorT<Real>& x) {
  if (x.rank() != 2) throw InvalidArgument("transpose: rank-2 required, got " + shape_str(x.shape()));
  int m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(size_t(m) * n);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(j) * m + i] = x.data()[size_t(i) * n + j];
  auto xn = x.handle();
  return detail::make_result<Real>(
      "transpose", {n, m}, std::move(out), {x}, [xn, m, n](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) xn->grad[size_t(i) * n + j] += self.grad[size_t(j) * m + i];
      });
}

template <class Real>
TensorT<Real> sum(const TensorT<Real>& x) {
  double acc = 0;
  for (Real v : x.data()) acc += double(v);
  auto xn = x.handle();
  return detail::make_result<Real>(
      "sum", {1}, {Real(acc)}, {x}, [xn](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        Real g = self.grad[0];
        for (Real& v : xn->grad) v += g;
      });
}

// Column-wise mean across rows: MxN -> N. Token pooling.
template <class Real>
TensorT<Real> mean_rows(const TensorT<Real>& x) {
  if (x.rank() != 2) throw InvalidArgument("mean_rows: rank-2 required, got " + shape_str(x.shape()));
  int m = x.dim(0), n = x.dim(1);
  std::vector<Real> out(size_t(n), Real(0));
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) out[size_t(j)] += x.data()[size_t(i) * n + j];
  for (Real& v : out) v /= Real(m);
  auto xn = x.handle();
  return detail::make_result<Real>(
      "mean_rows", {n}, std::move(out), {x}, [xn, m, n](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        Real inv = Real(1) / Real(m);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) xn->grad[size_t(i) * n + j] += self.grad[size_t(j)] * inv;
      });
}

// Exact-erf GeLU: x * Phi(x).
template <class Real>
TensorT<Real> gelu(const TensorT<Real>& x) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  std::vector<Real> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    double v = double(x.data()[i]);
    out[i] = Real(0.5 * v * (1.0 + std::erf(v * inv_sqrt2)));
  }
  auto xn = x.handle();
  return detail::make_result<Real>(
      "gelu", x.shape(), std::move(out), {x}, [xn](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        constexpr double inv_sqrt2 = 0.7071067811865475244;
        constexpr double inv_sqrt2pi = 0.3989422804014326779;
        for (size_t i = 0; i < self.grad.size(); ++i) {
          double v = double(xn->data[i]);
          double phi = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
          double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
          xn->grad[i] += self.grad[i] * Real(phi + v * pdf);
        }
      });
}

// Row-wise layer normalization with learned gain and bias.
template <class Real>
TensorT<Real> layernorm(const TensorT<Real>& x, const TensorT<Real>& gain, const TensorT<Real>& bias,
                        Real eps = Real(1e-5)) {
  int m = x.rows(), n = x.cols();
  if (x.rank() > 2 || gain.rank() != 1 || bias.rank() != 1 || gain.dim(0) != n || bias.dim(0) != n)
    throw InvalidArgument("layernorm: need MxN with N gain/bias, got " + shape_str(x.shape()) + ", " +
                          shape_str(gain.shape()) + ", " + shape_str(bias.shape()));
  std::vector<Real> out(x.data().size());
  auto xhat = std::make_shared<std::vector<Real>>(x.data().size());
  auto inv_std = std::make_shared<std::vector<Real>>(size_t(m));
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data().data() + size_t(i) * n;
    double mean = 0;
    for (int j = 0; j < n; ++j) mean += double(row[j]);
    mean /= n;
    double var = 0;
    for (int j = 0; j < n; ++j) {
      double d = double(row[j]) - mean;
      var += d * d;
    }
    var /= n;
    double istd = 1.0 / std::sqrt(var + double(eps));
    (*inv_std)[size_t(i)] = Real(istd);
    for (int j = 0; j < n; ++j) {
      Real xh = Real((double(row[j]) - mean) * istd);
      (*xhat)[size_t(i) * n + j] = xh;
      out[size_t(i) * n + j] = xh * gain.data()[size_t(j)] + bias.data()[size_t(j)];
    }
  }
  auto xn = x.handle();
  auto gn = gain.handle();
  auto bn = bias.handle();
  return detail::make_result<Real>(
      "layernorm", x.shape(), std::move(out), {x, gain, bias},
      [xn, gn, bn, xhat, inv_std, m, n](detail::TensorNode<Real>& self) {
        const Real* G = self.grad.data();
        if (gn->requires_grad) {
          gn->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
              gn->grad[size_t(j)] += G[size_t(i) * n + j] * (*xhat)[size_t(i) * n + j];
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) bn->grad[size_t(j)] += G[size_t(i) * n + j];
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          for (int i = 0; i < m; ++i) {
            double mean_dy = 0, mean_dy_xhat = 0;
            for (int j = 0; j < n; ++j) {
              double dyh = double(G[size_t(i) * n + j]) * double(gn->data[size_t(j)]);
              mean_dy += dyh;
              mean_dy_xhat += dyh * double((*xhat)[size_t(i) * n + j]);
            }
            mean_dy /= n;
            mean_dy_xhat /= n;
            for (int j = 0; j < n; ++j) {
              double dyh = double(G[size_t(i) * n + j]) * double(gn->data[size_t(j)]);
              double xh = double((*xhat)[size_t(i) * n + j]);
              xn->grad[size_t(i) * n + j] +=
                  Real(double((*inv_std)[size_t(i)]) * (dyh - mean_dy - xh * mean_dy_xhat));
            }
          }
        }
      });
}

template <class Real>
TensorT<Real> softmax_rows(const TensorT<Real>& x) {
  int m = x.rows(), n = x.cols();
  if (x.rank() > 2) throw InvalidArgument("softmax_rows: rank-2 max, got " + shape_str(x.shape()));
  std::vector<Real> out(x.data().size());
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data().data() + size_t(i) * n;
    Real* orow = out.data() + size_t(i) * n;
    double mx = double(row[0]);
    for (int j = 1; j < n; ++j) mx = std::max(mx, double(row[j]));
    double z = 0;
    for (int j = 0; j < n; ++j) {
      double e = std::exp(double(row[j]) - mx);
      orow[j] = Real(e);
      z += e;
    }
    double inv = 1.0 / z;
    for (int j = 0; j < n; ++j) orow[j] = Real(double(orow[j]) * inv);
  }
  auto xn = x.handle();
  return detail::make_result<Real>(
      "softmax", x.shape(), std::move(out), {x}, [xn, m, n](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const Real* y = self.data.data() + size_t(i) * n;
          const Real* dy = self.grad.data() + size_t(i) * n;
          double dot = 0;
          for (int j = 0; j < n; ++j) dot += double(dy[j]) * double(y[j]);
          for (int j = 0; j < n; ++j)
            xn->grad[size_t(i) * n + j] += Real(double(y[j]) * (double(dy[j]) - dot));
        }
      });
}

// Gather rows of an embedding table: (VxD, ids[L]) -> LxD.
template <class Real>
TensorT<Real> embedding(const TensorT<Real>& table, const std::vector<int>& ids) {
  if (table.rank() != 2) throw InvalidArgument("embedding: table must be rank-2");
  int v = table.dim(0), d = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw InvalidArgument("embedding: id " + std::to_string(id) + " out of range [0," +
                            std::to_string(v) + ")");
  int l = int(ids.size());
  std::vector<Real> out(size_t(l) * d);
  for (int i = 0; i < l; ++i)
    std::copy_n(table.data().data() + size_t(ids[size_t(i)]) * d, d, out.data() + size_t(i) * d);
  auto tn = table.handle();
  return detail::make_result<Real>(
      "embedding", {l, d}, std::move(out), {table}, [tn, ids, d](detail::TensorNode<Real>& self) {
        if (!tn->requires_grad) return;
        tn->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
          const Real* g = self.grad.data() + i * size_t(d);
          Real* dst = tn->grad.data() + size_t(ids[i]) * d;
          for (int j = 0; j < d; ++j) dst[j] += g[j];
        }
      });
}

// x (SxD) plus the first S rows of a positional table (PxD).
template <class Real>
TensorT<Real> add_positional(const TensorT<Real>& x, const TensorT<Real>& pos) {
  if (x.rank() != 2 || pos.rank() != 2 || x.dim(1) != pos.dim(1))
    throw InvalidArgument("add_positional: incompatible shapes " + shape_str(x.shape()) + " and " +
                          shape_str(pos.shape()));
  int s = x.dim(0), d = x.dim(1);
  if (s > pos.dim(0))
    throw InvalidArgument("add_positional: sequence length " + std::to_string(s) +
                          " exceeds table rows " + std::to_string(pos.dim(0)));
  std::vector<Real> out(x.data());
  for (size_t i = 0; i < size_t(s) * d; ++i) out[i] += pos.data()[i];
  auto xn = x.handle();
  auto pn = pos.handle();
  return detail::make_result<Real>(
      "add_positional", x.shape(), std::move(out), {x, pos}, [xn, pn, s, d](detail::TensorNode<Real>& self) {
        if (xn->requires_grad) {
          xn->ensure_grad();
          detail::add_into(xn->grad, self.grad);
        }
        if (pn->requires_grad) {
          pn->ensure_grad();
          for (size_t i = 0; i < size_t(s) * d; ++i) pn->grad[i] += self.grad[i];
        }
      });
}

// Stack inputs along the row axis. Rank-1 inputs count as single rows.
template <class Real>
TensorT<Real> concat_rows(const std::vector<TensorT<Real>>& parts) {
  if (parts.empty()) throw InvalidArgument("concat_rows: no inputs");
  int d = parts[0].cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw InvalidArgument("concat_rows: column mismatch");
    total += p.rows();
  }
  std::vector<Real> out;
  out.reserve(size_t(total) * d);
  std::vector<std::pair<std::shared_ptr<detail::TensorNode<Real>>, size_t>> spans;
  size_t off = 0;
  for (const auto& p : parts) {
    out.insert(out.end(), p.data().begin(), p.data().end());
    spans.emplace_back(p.handle(), off);
    off += p.data().size();
  }
  return detail::make_result<Real>(
      "concat_rows", {total, d}, std::move(out), parts, [spans](detail::TensorNode<Real>& self) {
        for (const auto& [pn, off] : spans) {
          if (!pn->requires_grad) continue;
          pn->ensure_grad();
          for (size_t i = 0; i < pn->data.size(); ++i) pn->grad[i] += self.grad[off + i];
        }
      });
}

// Rows scaled to unit L2 norm (epsilon-guarded).
template <class Real>
TensorT<Real> l2_normalize_rows(const TensorT<Real>& x) {
  int m = x.rows(), n = x.cols();
  std::vector<Real> out(x.data().size());
  auto inv_norm = std::make_shared<std::vector<Real>>(size_t(m));
  for (int i = 0; i < m; ++i) {
    const Real* row = x.data().data() + size_t(i) * n;
    double sq = 1e-12;
    for (int j = 0; j < n; ++j) sq += double(row[j]) * double(row[j]);
    double inv = 1.0 / std::sqrt(sq);
    (*inv_norm)[size_t(i)] = Real(inv);
    for (int j = 0; j < n; ++j) out[size_t(i) * n + j] = Real(double(row[j]) * inv);
  }
  auto xn = x.handle();
  return detail::make_result<Real>(
      "l2_normalize", x.shape(), std::move(out), {x}, [xn, inv_norm, m, n](detail::TensorNode<Real>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int i = 0; i < m; ++i) {
          const Real* y = self.data.data() + size_t(i) * n;
          const Real* dy = self.grad.data() + size_t(i) * n;
          double dot = 0;
          for (int j = 0; j < n; ++j) dot += double(dy[j]) * double(y[j]);
          double inv = double((*inv_norm)[size_t(i)]);
          for (int j = 0; j < n; ++j)
            xn->grad[size_t(i) * n + j] += Real(inv * (double(dy[j]) - double(y[j]) * dot));
        }
      });
}

// Multi-head scaled dot-product attention over packed SxD q/k/v. Heads are
// contiguous column slices. With causal=true position i attends to j <= i.
template <class Real>
TensorT<Real> attention(const TensorT<Real>& q, const TensorT<Real>& k, const TensorT<Real>& v,
                        int n_heads, bool causal) {
  if (q.rank() != 2 || k.shape() != q.shape() || v.shape() != q.shape())
    throw InvalidArgument("attention: q/k/v must share an SxD shape");
  int s = q.dim(0), d = q.dim(1);
  if (n_heads <= 0 || d % n_heads != 0)
    throw InvalidArgument("attention: head count " + std::to_string(n_heads) +
                          " does not divide width " + std::to_string(d));
  int hd = d / n_heads;
  double inv_sqrt = 1.0 / std::sqrt(double(hd));
  auto probs = std::make_shared<std::vector<Real>>(size_t(n_heads) * s * s, Real(0));
  std::vector<Real> out(size_t(s) * d, Real(0));
  std::vector<double> scores(static_cast<size_t>(s));
  for (int h = 0; h < n_heads; ++h) {
    int hoff = h * hd;
    Real* P = probs->data() + size_t(h) * s * s;
    for (int i = 0; i < s; ++i) {
      int jmax = causal ? i + 1 : s;
      const Real* qi = q.data().data() + size_t(i) * d + hoff;
      double mx = -1e300;
      for (int j = 0; j < jmax; ++j) {
        const Real* kj = k.data().data() + size_t(j) * d + hoff;
        double acc = 0;
        for (int c = 0; c < hd; ++c) acc += double(qi[c]) * double(kj[c]);
        acc *= inv_sqrt;
        scores[size_t(j)] = acc;
        mx = std::max(mx, acc);
      }
      double z = 0;
      for (int j = 0; j < jmax; ++j) {
        double e = std::exp(scores[size_t(j)] - mx);
        P[size_t(i) * s + j] = Real(e);
        z += e;
      }
      double inv_z = 1.0 / z;
      Real* orow = out.data() + size_t(i) * d + hoff;
      for (int j = 0; j < jmax; ++j) {
        Real p = Real(double(P[size_t(i) * s + j]) * inv_z);
        P[size_t(i) * s + j] = p;
        const Real* vj = v.data().data() + size_t(j) * d + hoff;
        for (int c = 0; c < hd; ++c) orow[c] += p * vj[c];
      }
    }
  }
  auto qn = q.handle();
  auto kn = k.handle();
  auto vn = v.handle();
  return detail::make_result<Real>(
      "attention", q.shape(), std::move(out), {q, k, v},
      [qn, kn, vn, probs, s, d, n_heads, hd, inv_sqrt, causal](detail::TensorNode<Real>& self) {
        bool need_q = qn->requires_grad, need_k = kn->requires_grad, need_v = vn->requires_grad;
        if (need_q) qn->ensure_grad();
        if (need_k) kn->ensure_grad();
        if (need_v) vn->ensure_grad();
        std::vector<double> dscores(static_cast<size_t>(s));
        for (int h = 0; h < n_heads; ++h) {
          int hoff = h * hd;
          const Real* P = probs->data() + size_t(h) * s * s;
          for (int i = 0; i < s; ++i) {
            int jmax = causal ? i + 1 : s;
            const Real* go = self.grad.data() + size_t(i) * d + hoff;
            // dV and dA
            double dot = 0;
            for (int j = 0; j < jmax; ++j) {
              const Real* vj = vn->data.data() + size_t(j) * d + hoff;
              double da = 0;
              for (int c = 0; c < hd; ++c) da += double(go[c]) * double(vj[c]);
              dscores[size_t(j)] = da;
              dot += da * double(P[size_t(i) * s + j]);
              if (need_v) {
                Real* dv = vn->grad.data() + size_t(j) * d + hoff;
                Real p = P[size_t(i) * s + j];
                for (int c = 0; c < hd; ++c) dv[c] += p * go[c];
              }
            }
            if (!need_q && !need_k) continue;
            // softmax backward, then distribute through Q.K^T/sqrt(hd)
            const Real* qi = qn->data.data() + size_t(i) * d + hoff;
            for (int j = 0; j < jmax; ++j) {
              double ds = double(P[size_t(i) * s + j]) * (dscores[size_t(j)] - dot) * inv_sqrt;
              const Real* kj = kn->data.data() + size_t(j) * d + hoff;
              if (need_q) {
                Real* dq = qn->grad.data() + size_t(i) * d + hoff;
                for (int c = 0; c < hd; ++c) dq[c] += Real(ds * double(kj[c]));
              }
              if (need_k) {
                Real* dk = kn->grad.data() + size_t(j) * d + hoff;
                for (int c = 0; c < hd; ++c) dk[c] += Real(ds * double(qi[c]));
              }
            }
          }
        }
      });
}

// Mean negative log-likelihood over masked positions. logits: LxV, targets and
// mask: length L. Gradient flows only through masked-in rows.
template <class Real>
TensorT<Real> masked_cross_entropy(const TensorT<Real>& logits, const std::vector<int>& targets,
                                   const std::vector<uint8_t>& mask) {
  if (logits.rank() != 2) throw InvalidArgument("masked_cross_entropy: logits must be LxV");
  int l = logits.dim(0), v = logits.dim(1);
  if (int(targets.size()) != l || int(mask.size()) != l)
    throw InvalidArgument("masked_cross_entropy: length mismatch: logits rows " + std::to_string(l) +
                          ", targets " + std::to_string(targets.size()) + ", mask " +
                          std::to_string(mask.size()));
  int64_t nmask = 0;
  for (uint8_t m : mask) nmask += (m != 0);
  if (nmask == 0) throw InvalidArgument("masked_cross_entropy: mask selects no positions");
  for (int i = 0; i < l; ++i)
    if (mask[size_t(i)] && (targets[size_t(i)] < 0 || targets[size_t(i)] >= v))
      throw InvalidArgument("masked_cross_entropy: target id " + std::to_string(targets[size_t(i)]) +
                            " out of range [0," + std::to_string(v) + ") at position " +
                            std::to_string(i));
  auto probs = std::make_shared<std::vector<Real>>(size_t(l) * v, Real(0));
  double total = 0;
  for (int i = 0; i < l; ++i) {
    if (!mask[size_t(i)]) continue;
    const Real* row = logits.data().data() + size_t(i) * v;
    double mx = double(row[0]);
    for (int j = 1; j < v; ++j) mx = std::max(mx, double(row[j]));
    double z = 0;
    for (int j = 0; j < v; ++j) z += std::exp(double(row[j]) - mx);
    double lse = mx + std::log(z);
    total += lse - double(row[targets[size_t(i)]]);
    double inv_z = 1.0 / z;
    Real* prow = probs->data() + size_t(i) * v;
    for (int j = 0; j < v; ++j) prow[j] = Real(std::exp(double(row[j]) - mx) * inv_z);
  }
  Real loss = Real(total / double(nmask));
  auto ln = logits.handle();
  return detail::make_result<Real>(
      "masked_cross_entropy", {1}, {loss}, {logits},
      [ln, probs, targets, mask, l, v, nmask](detail::TensorNode<Real>& self) {
        if (!ln->requires_grad) return;
        ln->ensure_grad();
        Real g = self.grad[0] / Real(nmask);
        for (int i = 0; i < l; ++i) {
          if (!mask[size_t(i)]) continue;
          const Real* prow = probs->data() + size_t(i) * v;
          Real* drow = ln->grad.data() + size_t(i) * v;
          for (int j = 0; j < v; ++j) drow[j] += g * prow[j];
          drow[targets[size_t(i)]] -= g;
        }
      });
}

// Weighted sum of scalar tensors; combines per-example losses into one batch
// loss without building a deep add chain.
template <class Real>
TensorT<Real> weighted_sum(const std::vector<TensorT<Real>>& terms, const std::vector<Real>& weights) {
  if (terms.empty() || terms.size() != weights.size())
    throw InvalidArgument("weighted_sum: need matching non-empty terms and weights");
  double acc = 0;
  for (size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].size() != 1) throw InvalidArgument("weighted_sum: all terms must be scalar");
    acc += double(weights[i]) * double(terms[i].item());
  }
  std::vector<std::shared_ptr<detail::TensorNode<Real>>> nodes;
  nodes.reserve(terms.size());
  for (const auto& t : terms) nodes.push_back(t.handle());
  auto w = std::make_shared<std::vector<Real>>(weights);
  return detail::make_result<Real>(
      "weighted_sum", {1}, {Real(acc)}, terms, [nodes, w](detail::TensorNode<Real>& self) {
        for (size_t i = 0; i < nodes.size(); ++i) {
          if (!nodes[i]->requires_grad) continue;
          nodes[i]->ensure_grad();
          nodes[i]->grad[0] += self.grad[0] * (*w)[i];
        }
      });
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

// Accumulates gradients of `loss` into every reachable tensor that requires
// grad. Gradients add onto whatever is already present; call zero_grad()
// between optimizer steps.
template <class Real>
void backward(const TensorT<Real>& loss) {
  if (loss.size() != 1)
    throw InvalidArgument("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  using Node = detail::TensorNode<Real>;
  if (!loss.requires_grad()) return;  // nothing in the graph is trainable

  // iterative post-order DFS
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(loss.node(), 0);
  visited.insert(loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  // interior grads are scratch for this pass; only leaves accumulate across calls
  for (Node* n : topo)
    if (n->backward_fn) n->grad.assign(n->data.size(), Real(0));
  loss.node()->ensure_grad();
  loss.node()->grad[0] += Real(1);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

}  // namespace uvlm
