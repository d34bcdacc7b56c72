#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uvlm/common.hpp"
#include "uvlm/tensor.hpp"

namespace uvlm::gradcheck {

// Central-difference verification of the reverse pass. Runs the double
// instantiation of the op set so the step size is not drowned by rounding
// noise; the float build shares every line of op code with it.
using T = TensorT<double>;

struct CaseResult {
  std::string op;
  std::string name;
  double max_rel_err = 0.0;
  int n_elements = 0;
};

struct Battery {
  std::vector<CaseResult> cases;
  double worst = 0.0;
  int total() const { return int(cases.size()); }
  bool all_below(double tol) const { return worst < tol; }
};

inline double rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1.0, std::abs(analytic) + std::abs(numeric));
}

// Evaluates one randomized case: builds the loss twice per element for the
// numeric estimate and once with autodiff, then reports the worst mismatch.
inline CaseResult run_case(const std::string& op, const std::string& name,
                           const std::vector<Shape>& shapes,
                           const std::function<T(std::vector<T>&)>& build, uint64_t seed,
                           double value_scale = 1.0, double h = 1e-3) {
  Rng rng(seed);
  std::vector<std::vector<double>> base;
  base.reserve(shapes.size());
  for (const auto& sh : shapes) {
    std::vector<double> vals(size_t(shape_numel(sh)));
    for (auto& v : vals) v = value_scale * rng.normal();
    base.push_back(std::move(vals));
  }

  auto eval = [&](size_t ti, size_t ei, double delta) {
    std::vector<T> inputs;
    inputs.reserve(shapes.size());
    for (size_t i = 0; i < shapes.size(); ++i) {
      std::vector<double> vals = base[i];
      if (i == ti) vals[ei] += delta;
      inputs.push_back(T::from_data(shapes[i], std::move(vals), false));
    }
    return build(inputs).item();
  };

  std::vector<T> inputs;
  inputs.reserve(shapes.size());
  for (size_t i = 0; i < shapes.size(); ++i)
    inputs.push_back(T::from_data(shapes[i], base[i], true));
  T loss = build(inputs);
  backward(loss);

  CaseResult r{op, name, 0.0, 0};
  for (size_t ti = 0; ti < shapes.size(); ++ti) {
    for (size_t ei = 0; ei < base[ti].size(); ++ei) {
      double numeric = (eval(ti, ei, h) - eval(ti, ei, -h)) / (2.0 * h);
      double analytic = inputs[ti].has_grad() ? inputs[ti].grad()[ei] : 0.0;
      r.max_rel_err = std::max(r.max_rel_err, rel_err(analytic, numeric));
      ++r.n_elements;
    }
  }
  return r;
}

namespace detail {

// Fixed random projection turning a tensor-valued op into a scalar loss so
// every output element influences the gradient.
inline std::function<T(std::vector<T>&)> project(uint64_t wseed,
                                                 std::function<T(std::vector<T>&)> op,
                                                 Shape out_shape) {
  std::vector<double> w(size_t(shape_numel(out_shape)));
  Rng wrng(wseed);
  for (auto& v : w) v = wrng.normal();
  return [op = std::move(op), w = std::move(w), out_shape](std::vector<T>& in) {
    T weights = T::from_data(out_shape, w, false);
    return sum(mul(op(in), weights));
  };
}

}  // namespace detail

// The full randomized battery over every differentiable primitive plus a few
// composite graphs. Deterministic in `seed`.
inline Battery run_battery(uint64_t seed = 2024) {
  Battery b;
  auto push = [&](CaseResult r) {
    b.worst = std::max(b.worst, r.max_rel_err);
    b.cases.push_back(std::move(r));
  };
  auto cs = [&](int i) { return mix_seed(seed, uint64_t(i)); };
  int id = 0;

  // elementwise pairs
  for (Shape sh : {Shape{3, 4}, Shape{7}, Shape{2, 5}, Shape{1, 6}}) {
    for (int s = 0; s < 2; ++s) {
      push(run_case("add", "add " + shape_str(sh), {sh, sh},
                    detail::project(cs(id), [](std::vector<T>& in) { return add(in[0], in[1]); }, sh),
                    cs(id + 1)));
      id += 2;
      push(run_case("mul", "mul " + shape_str(sh), {sh, sh},
                    detail::project(cs(id), [](std::vector<T>& in) { return mul(in[0], in[1]); }, sh),
                    cs(id + 1)));
      id += 2;
    }
  }

  for (double c : {0.5, -2.0, 3.25, -0.125}) {
    Shape sh{2, 3};
    push(run_case("scale", "scale by " + std::to_string(c), {sh},
                  detail::project(cs(id), [c](std::vector<T>& in) { return scale(in[0], c); }, sh),
                  cs(id + 1)));
    id += 2;
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 3}, {4, 4}, {1, 5}, {5, 2}}) {
    push(run_case("add_bias", "add_bias " + std::to_string(m) + "x" + std::to_string(n),
                  {Shape{m, n}, Shape{n}},
                  detail::project(cs(id), [](std::vector<T>& in) { return add_bias(in[0], in[1]); },
                                  Shape{m, n}),
                  cs(id + 1)));
    id += 2;
  }

  for (auto [m, k, n] : std::vector<std::array<int, 3>>{
           {2, 3, 4}, {1, 5, 2}, {4, 4, 4}, {3, 1, 3}}) {
    push(run_case("matmul", "matmul " + std::to_string(m) + "x" + std::to_string(k) + "x" +
                                std::to_string(n),
                  {Shape{m, k}, Shape{k, n}},
                  detail::project(cs(id), [](std::vector<T>& in) { return matmul(in[0], in[1]); },
                                  Shape{m, n}),
                  cs(id + 1)));
    id += 2;
    push(run_case("matmul", "matmul_t " + std::to_string(m) + "x" + std::to_string(k) + "x" +
                                std::to_string(n),
                  {Shape{m, k}, Shape{n, k}},
                  detail::project(cs(id),
                                  [](std::vector<T>& in) { return matmul(in[0], in[1], true); },
                                  Shape{m, n}),
                  cs(id + 1)));
    id += 2;
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 3}, {4, 1}, {3, 5}}) {
    push(run_case("transpose", "transpose " + std::to_string(m) + "x" + std::to_string(n),
                  {Shape{m, n}},
                  detail::project(cs(id), [](std::vector<T>& in) { return transpose(in[0]); },
                                  Shape{n, m}),
                  cs(id + 1)));
    id += 2;
  }

  for (Shape sh : {Shape{4}, Shape{2, 3}, Shape{5, 5}}) {
    push(run_case("sum", "sum " + shape_str(sh), {sh},
                  [](std::vector<T>& in) { return sum(in[0]); }, cs(id)));
    id += 1;
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 4}, {5, 3}, {1, 6}, {7, 2}}) {
    push(run_case("mean_rows", "mean_rows " + std::to_string(m) + "x" + std::to_string(n),
                  {Shape{m, n}},
                  detail::project(cs(id), [](std::vector<T>& in) { return mean_rows(in[0]); },
                                  Shape{n}),
                  cs(id + 1)));
    id += 2;
  }

  for (int s = 0; s < 4; ++s) {
    Shape sh{3, 4};
    push(run_case("gelu", "gelu case " + std::to_string(s), {sh},
                  detail::project(cs(id), [](std::vector<T>& in) { return gelu(in[0]); }, sh),
                  cs(id + 1), 1.5));
    id += 2;
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 4}, {3, 6}, {1, 5}, {4, 3}}) {
    for (int s = 0; s < 2; ++s) {
      push(run_case("layernorm",
                    "layernorm " + std::to_string(m) + "x" + std::to_string(n) + " case " +
                        std::to_string(s),
                    {Shape{m, n}, Shape{n}, Shape{n}},
                    detail::project(cs(id),
                                    [](std::vector<T>& in) {
                                      return layernorm(in[0], in[1], in[2]);
                                    },
                                    Shape{m, n}),
                    cs(id + 1)));
      id += 2;
    }
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 5}, {4, 3}, {1, 7}, {3, 3}}) {
    push(run_case("softmax", "softmax " + std::to_string(m) + "x" + std::to_string(n),
                  {Shape{m, n}},
                  detail::project(cs(id), [](std::vector<T>& in) { return softmax_rows(in[0]); },
                                  Shape{m, n}),
                  cs(id + 1), 2.0));
    id += 2;
  }

  for (int s = 0; s < 4; ++s) {
    int v = 5, d = 3;
    Rng idrng(cs(id));
    std::vector<int> ids;
    for (int i = 0; i < 6; ++i) ids.push_back(int(idrng.below(uint32_t(v))));
    push(run_case("embedding", "embedding case " + std::to_string(s), {Shape{v, d}},
                  detail::project(cs(id + 1),
                                  [ids](std::vector<T>& in) { return embedding(in[0], ids); },
                                  Shape{int(ids.size()), d}),
                  cs(id + 2)));
    id += 3;
  }

  for (auto [s_len, p_len] : std::vector<std::pair<int, int>>{{2, 4}, {3, 3}, {1, 5}}) {
    int d = 4;
    push(run_case("add_positional",
                  "add_positional s=" + std::to_string(s_len) + " p=" + std::to_string(p_len),
                  {Shape{s_len, d}, Shape{p_len, d}},
                  detail::project(cs(id),
                                  [](std::vector<T>& in) { return add_positional(in[0], in[1]); },
                                  Shape{s_len, d}),
                  cs(id + 1)));
    id += 2;
  }

  for (int s = 0; s < 3; ++s) {
    int d = 3;
    push(run_case("concat_rows", "concat_rows case " + std::to_string(s),
                  {Shape{2, d}, Shape{d}, Shape{3, d}},
                  detail::project(cs(id),
                                  [](std::vector<T>& in) {
                                    return concat_rows<double>({in[0], in[1], in[2]});
                                  },
                                  Shape{6, d}),
                  cs(id + 1)));
    id += 2;
  }

  for (auto [m, n] : std::vector<std::pair<int, int>>{{2, 4}, {3, 5}, {1, 6}, {4, 4}}) {
    push(run_case("l2_normalize", "l2_normalize " + std::to_string(m) + "x" + std::to_string(n),
                  {Shape{m, n}},
                  detail::project(cs(id),
                                  [](std::vector<T>& in) { return l2_normalize_rows(in[0]); },
                                  Shape{m, n}),
                  cs(id + 1)));
    id += 2;
  }

  for (bool causal : {false, true}) {
    for (int heads : {1, 2, 4}) {
      for (auto [s_len, d] : std::vector<std::pair<int, int>>{{3, 4}, {4, 8}}) {
        if (d % heads != 0) continue;
        push(run_case("attention",
                      std::string("attention ") + (causal ? "causal" : "full") + " h=" +
                          std::to_string(heads) + " s=" + std::to_string(s_len),
                      {Shape{s_len, d}, Shape{s_len, d}, Shape{s_len, d}},
                      detail::project(cs(id),
                                      [heads, causal](std::vector<T>& in) {
                                        return attention(in[0], in[1], in[2], heads, causal);
                                      },
                                      Shape{s_len, d}),
                      cs(id + 1)));
        id += 2;
      }
    }
  }

  for (int s = 0; s < 8; ++s) {
    int l = 3 + (s % 3), v = 4 + (s % 4);
    Rng trng(cs(id));
    std::vector<int> targets;
    std::vector<uint8_t> mask;
    for (int i = 0; i < l; ++i) {
      targets.push_back(int(trng.below(uint32_t(v))));
      mask.push_back(uint8_t(trng.below(2)));
    }
    mask[size_t(l - 1)] = 1;  // at least one position in the loss
    push(run_case("masked_cross_entropy",
                  "masked_ce l=" + std::to_string(l) + " v=" + std::to_string(v), {Shape{l, v}},
                  [targets, mask](std::vector<T>& in) {
                    return masked_cross_entropy(in[0], targets, mask);
                  },
                  cs(id + 1), 2.0));
    id += 2;
  }

  for (int s = 0; s < 2; ++s) {
    std::vector<double> w = {0.7, -1.3, 2.0};
    push(run_case("weighted_sum", "weighted_sum case " + std::to_string(s),
                  {Shape{1}, Shape{1}, Shape{1}},
                  [w](std::vector<T>& in) {
                    return weighted_sum<double>({in[0], in[1], in[2]}, w);
                  },
                  cs(id)));
    id += 1;
  }

  // composite graphs: a bias-gelu MLP and a pre-norm attention block
  for (int s = 0; s < 3; ++s) {
    int m = 2, d_in = 5, d_h = 6, d_out = 3;
    push(run_case("composite", "mlp chain case " + std::to_string(s),
                  {Shape{m, d_in}, Shape{d_in, d_h}, Shape{d_h}, Shape{d_h, d_out}, Shape{d_out}},
                  detail::project(cs(id),
                                  [](std::vector<T>& in) {
                                    T h = gelu(add_bias(matmul(in[0], in[1]), in[2]));
                                    return add_bias(matmul(h, in[3]), in[4]);
                                  },
                                  Shape{m, d_out}),
                  cs(id + 1), 0.8));
    id += 2;
  }
  for (int s = 0; s < 3; ++s) {
    int s_len = 4, d = 8, v = 5;
    std::vector<int> targets = {1, 3, 0, 2};
    std::vector<uint8_t> mask = {0, 1, 1, 1};
    push(run_case("composite", "attention block case " + std::to_string(s),
                  {Shape{s_len, d}, Shape{d}, Shape{d}, Shape{d, v}},
                  [targets, mask](std::vector<T>& in) {
                    T ln = layernorm(in[0], in[1], in[2]);
                    T att = add(attention(ln, ln, ln, 2, true), in[0]);
                    return masked_cross_entropy(matmul(att, in[3]), targets, mask);
                  },
                  cs(id), 0.9));
    id += 1;
  }

  return b;
}

inline std::string format_report(const Battery& b, double tol) {
  std::map<std::string, std::pair<double, int>> by_op;
  for (const auto& c : b.cases) {
    auto& e = by_op[c.op];
    e.first = std::max(e.first, c.max_rel_err);
    e.second += 1;
  }
  std::ostringstream os;
  os << std::left << std::setw(22) << "op" << std::setw(8) << "cases" << "max rel err\n";
  for (const auto& [op, e] : by_op) {
    os << std::setw(22) << op << std::setw(8) << e.second << std::scientific
       << std::setprecision(3) << e.first << std::defaultfloat << "\n";
  }
  os << "total cases: " << b.total() << ", worst: " << std::scientific << std::setprecision(3)
     << b.worst << std::defaultfloat << (b.all_below(tol) ? " (pass)" : " (FAIL)") << "\n";
  return os.str();
}

}  // namespace uvlm::gradcheck
