#include "r2m/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "r2m/numeric.hpp"

namespace r2m {

const Tensor& Var::value() const { return tape->value(*this); }

Var Tape::constant(Tensor value) { return leaf(std::move(value), false); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back({std::move(value), {}, requires_grad && recording_, false, {}});
  return {this, nodes_.size() - 1};
}

Var Tape::param(const ParamSet& params, const std::string& name) {
  if (auto it = params_.find(name); it != params_.end()) return {this, it->second};
  const auto& e = params.entry(name);
  Var v = leaf(e.value, e.trainable);
  params_.emplace(name, v.id);
  return v;
}

Var Tape::frozen_param(const ParamSet& params, const std::string& name) {
  return constant(params.get(name));
}

Var Tape::record(Tensor value, const std::vector<Var>& inputs, Backward fn) {
  bool needs = false;
  if (recording_) {
    for (const auto& in : inputs) {
      if (in.tape != this) throw std::invalid_argument("tape: operand from another tape");
      needs = needs || nodes_[in.id].requires_grad;
    }
  }
  nodes_.push_back({std::move(value), {}, needs, false, needs ? std::move(fn) : Backward{}});
  return {this, nodes_.size() - 1};
}

Tensor& Tape::grad_slot(Var v) {
  auto& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape, 0.0);
    n.has_grad = true;
  }
  return n.grad;
}

void Tape::backward(Var loss) {
  if (!recording_) throw std::logic_error("tape: backward() on a non-recording tape");
  if (nodes_[loss.id].value.size() != 1) throw std::invalid_argument("tape: loss must be scalar");
  for (auto& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor{};
  }
  if (!nodes_[loss.id].requires_grad) return;
  grad_slot(loss).data[0] = 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    auto& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    n.backward(*this, n.grad);
  }
}

const Tensor* Tape::grad(Var v) const {
  const auto& n = nodes_[v.id];
  return n.has_grad ? &n.grad : nullptr;
}

GradMap Tape::param_grads() const {
  GradMap out;
  for (const auto& [name, id] : params_) {
    if (nodes_[id].has_grad) out.emplace(name, nodes_[id].grad);
  }
  return out;
}

namespace ad {
namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape) +
                                " vs " + shape_string(b.shape));
  }
}

Tensor as_matrix(const Tensor& t) {
  Tensor m = t;
  m.shape = {t.rows(), t.cols()};
  return m;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
  Tensor out = as_matrix(a);
  for (auto& x : out.data) x = f(x);
  return out;
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out;
  gemm(a.value(), false, b.value(), false, out);
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) gemm(g, false, t.value(b), true, t.grad_slot(a), true);
    if (t.requires_grad(b)) gemm(t.value(a), true, g, false, t.grad_slot(b), true);
  });
}

Var matmul_bt(Var a, Var b) {
  Tape& t = *a.tape;
  Tensor out;
  gemm(a.value(), false, b.value(), true, out);
  return t.record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) gemm(g, false, t.value(b), false, t.grad_slot(a), true);
    if (t.requires_grad(b)) gemm(g, true, t.value(a), false, t.grad_slot(b), true);
  });
}

Var transpose(Var a) {
  const Tensor& av = a.value();
  Tensor out = Tensor::matrix(av.cols(), av.rows());
  for (std::size_t i = 0; i < av.rows(); ++i)
    for (std::size_t j = 0; j < av.cols(); ++j) out.at(j, i) = av.at(i, j);
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    Tensor& ga = t.grad_slot(a);
    for (std::size_t i = 0; i < ga.rows(); ++i)
      for (std::size_t j = 0; j < ga.cols(); ++j) ga.at(i, j) += g.at(j, i);
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = as_matrix(a.value());
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    for (Var v : {a, b}) {
      if (!t.requires_grad(v)) continue;
      auto& gv = t.grad_slot(v).data;
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += g.data[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = as_matrix(a.value());
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_slot(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_slot(b).data;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= g.data[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = as_matrix(a.value());
  const auto& bv = b.value().data;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= bv[i];
  return a.tape->record(std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_slot(a).data;
      const auto& bv = t.value(b).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i] * bv[i];
    }
    if (t.requires_grad(b)) {
      auto& gb = t.grad_slot(b).data;
      const auto& av = t.value(a).data;
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g.data[i] * av[i];
    }
  });
}

Var add_row(Var a, Var bias) {
  const Tensor& av = a.value();
  const Tensor& bv = bias.value();
  if (bv.size() != av.cols()) throw std::invalid_argument("add_row: bias width mismatch");
  Tensor out = as_matrix(av);
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out.at(r, c) += bv.data[c];
  return a.tape->record(std::move(out), {a, bias}, [a, bias](Tape& t, const Tensor& g) {
    if (t.requires_grad(a)) {
      auto& ga = t.grad_slot(a).data;
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i];
    }
    if (t.requires_grad(bias)) {
      auto& gb = t.grad_slot(bias).data;
      const std::size_t cols = g.cols();
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < cols; ++c) gb[c] += g.data[r * cols + c];
    }
  });
}

Var scale(Var a, double s) {
  Tensor out = map(a.value(), [s](double x) { return x * s; });
  return a.tape->record(std::move(out), {a}, [a, s](Tape& t, const Tensor& g) {
    auto& ga = t.grad_slot(a).data;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * g.data[i];
  });
}

Var add_scalar(Var a, double c) {
  Tensor out = map(a.value(), [c](double x) { return x + c; });
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    auto& ga = t.grad_slot(a).data;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i];
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var a) {
  Tensor out = map(a.value(), [](double x) {
    return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
  });
  return a.tape->record(std::move(out), {a}, [a](Tape& t, const Tensor& g) {
    const auto& av = t.value(a).data;
    auto& ga = t.grad_slot(a).data;
    for (std::size_t i = 0; i < ga.size(); ++i) {
      const double x = av[i];
      const double th = std::tanh(kGeluC * (x + kGeluA * x * x * x));
      const double d = 0.5 * (1.0 + th) +
                       0.5 * x * (1.0 - th * th) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
      ga[i] += g.data[i] * d;
    }
  });
}

Var tanh(Var a) {
  Tensor out = map(a.value(), [](double x) { return std::tanh(x); });
  const Var y{a.tape, a.tape->size()};
  return a.tape->record(std::move(out), {a}, [a, y](Tape& t, const Tensor& g) {
    const auto& yv = t.value(y).data;
    auto& ga = t.grad_slot(a).data;
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g.data[i] * (1.0 - yv[i] * yv[i]);
  });
}

Var embedding(Var table, const std::vector<int>& ids) {
  const Tensor& tv = table.value();
  const std::size_t d = tv.cols();
  Tensor out = Tensor::matrix(ids.size(), d);
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw std::invalid_argument("embedding: id " + std::to_string(ids[r]) + " out of range");
    }
    auto src = tv.row_span(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row_span(r).begin());
  }
  return table.tape->record(std::move(out), {table}, [table, ids](Tape& t, const Tensor& g) {
    Tensor& gt = t.grad_slot(table);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      auto dst = gt.row_span(static_cast<std::size_t>(ids[r]));
      auto src = g.row_span(r);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
    }
  });
}

Var layer_norm(Var x, Var gamma, Var beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  if (gamma.value().size() != cols || beta.value().size() != cols) {
    throw std::invalid_argument("layer_norm: affine width mismatch");
  }
  Tensor xhat = Tensor::matrix(rows, cols);
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = xv.row_span(r);
    double mu = 0.0;
    for (double v : row) mu += v;
    mu /= static_cast<double>(cols);
    double var = 0.0;
    for (double v : row) var += (v - mu) * (v - mu);
    var /= static_cast<double>(cols);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < cols; ++c) xhat.at(r, c) = (row[c] - mu) * inv_std[r];
  }
  Tensor out = xhat;
  const auto& gv = gamma.value().data;
  const auto& bv = beta.value().data;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) out.at(r, c) = out.at(r, c) * gv[c] + bv[c];
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t,
                                                                            const Tensor& g) {
        const std::size_t rows = xhat.rows(), cols = xhat.cols();
        if (t.requires_grad(gamma)) {
          auto& gg = t.grad_slot(gamma).data;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gg[c] += g.at(r, c) * xhat.at(r, c);
        }
        if (t.requires_grad(beta)) {
          auto& gb = t.grad_slot(beta).data;
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) gb[c] += g.at(r, c);
        }
        if (t.requires_grad(x)) {
          const auto& gv = t.value(gamma).data;
          Tensor& gx = t.grad_slot(x);
          std::vector<double> gh(cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              gh[c] = g.at(r, c) * gv[c];
              m1 += gh[c];
              m2 += gh[c] * xhat.at(r, c);
            }
            m1 /= static_cast<double>(cols);
            m2 /= static_cast<double>(cols);
            for (std::size_t c = 0; c < cols; ++c) {
              gx.at(r, c) += inv_std[r] * (gh[c] - m1 - xhat.at(r, c) * m2);
            }
          }
        }
      });
}

Var softmax_rows(Var x, bool causal) {
  const Tensor& xv = x.value();
  const std::size_t rows = xv.rows(), cols = xv.cols();
  Tensor out = Tensor::matrix(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t valid = causal ? std::min(cols, r + 1) : cols;
    auto p = softmax(xv.row_span(r).first(valid));
    std::copy(p.begin(), p.end(), out.row_span(r).begin());
  }
  const Var y{x.tape, x.tape->size()};
  return x.tape->record(std::move(out), {x}, [x, y](Tape& t, const Tensor& g) {
    const Tensor& yv = t.value(y);
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < yv.cols(); ++c) dot += g.at(r, c) * yv.at(r, c);
      for (std::size_t c = 0; c < yv.cols(); ++c) gx.at(r, c) += yv.at(r, c) * (g.at(r, c) - dot);
    }
  });
}

Var log_softmax_rows(Var x) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::matrix(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto p = log_softmax(xv.row_span(r));
    std::copy(p.begin(), p.end(), out.row_span(r).begin());
  }
  const Var y{x.tape, x.tape->size()};
  return x.tape->record(std::move(out), {x}, [x, y](Tape& t, const Tensor& g) {
    const Tensor& yv = t.value(y);
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < yv.rows(); ++r) {
      double gs = 0.0;
      for (std::size_t c = 0; c < yv.cols(); ++c) gs += g.at(r, c);
      for (std::size_t c = 0; c < yv.cols(); ++c) {
        gx.at(r, c) += g.at(r, c) - std::exp(yv.at(r, c)) * gs;
      }
    }
  });
}

Var slice_rows(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (begin > end || end > xv.rows()) throw std::invalid_argument("slice_rows: bad range");
  const std::size_t cols = xv.cols();
  Tensor out = Tensor::matrix(end - begin, cols);
  std::copy(xv.data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
            xv.data.begin() + static_cast<std::ptrdiff_t>(end * cols), out.data.begin());
  return x.tape->record(std::move(out), {x}, [x, begin, cols](Tape& t, const Tensor& g) {
    auto& gx = t.grad_slot(x).data;
    for (std::size_t i = 0; i < g.size(); ++i) gx[begin * cols + i] += g.data[i];
  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  const Tensor& xv = x.value();
  if (begin > end || end > xv.cols()) throw std::invalid_argument("slice_cols: bad range");
  Tensor out = Tensor::matrix(xv.rows(), end - begin);
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = begin; c < end; ++c) out.at(r, c - begin) = xv.at(r, c);
  return x.tape->record(std::move(out), {x}, [x, begin](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) gx.at(r, begin + c) += g.at(r, c);
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no operands");
  const std::size_t rows = parts[0].value().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.value().cols();
  }
  Tensor out = Tensor::matrix(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    const Tensor& pv = p.value();
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < pv.cols(); ++c) out.at(r, off + c) = pv.at(r, c);
    off += pv.cols();
  }
  return parts[0].tape->record(std::move(out), parts, [parts](Tape& t, const Tensor& g) {
    std::size_t off = 0;
    for (const auto& p : parts) {
      const std::size_t pc = t.value(p).cols();
      if (t.requires_grad(p)) {
        Tensor& gp = t.grad_slot(p);
        for (std::size_t r = 0; r < gp.rows(); ++r)
          for (std::size_t c = 0; c < pc; ++c) gp.at(r, c) += g.at(r, off + c);
      }
      off += pc;
    }
  });
}

Var gather(Var x, std::size_t row_offset, const std::vector<int>& cols) {
  const Tensor& xv = x.value();
  if (row_offset + cols.size() > xv.rows()) throw std::invalid_argument("gather: rows exceeded");
  Tensor out = Tensor::matrix(cols.size(), 1);
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= xv.cols()) {
      throw std::invalid_argument("gather: column out of range");
    }
    out.data[r] = xv.at(row_offset + r, static_cast<std::size_t>(cols[r]));
  }
  return x.tape->record(std::move(out), {x}, [x, row_offset, cols](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < cols.size(); ++r) {
      gx.at(row_offset + r, static_cast<std::size_t>(cols[r])) += g.data[r];
    }
  });
}

Var stack_scalars(const std::vector<Var>& scalars) {
  if (scalars.empty()) throw std::invalid_argument("stack_scalars: no operands");
  Tensor out = Tensor::matrix(1, scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i].value().size() != 1) throw std::invalid_argument("stack_scalars: non-scalar");
    out.data[i] = scalars[i].value().data[0];
  }
  return scalars[0].tape->record(std::move(out), scalars, [scalars](Tape& t, const Tensor& g) {
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      if (t.requires_grad(scalars[i])) t.grad_slot(scalars[i]).data[0] += g.data[i];
    }
  });
}

Var entry(Var x, std::size_t r, std::size_t c) {
  const Tensor& xv = x.value();
  if (r >= xv.rows() || c >= xv.cols()) throw std::invalid_argument("entry: out of range");
  return x.tape->record(Tensor::scalar(xv.at(r, c)), {x}, [x, r, c](Tape& t, const Tensor& g) {
    t.grad_slot(x).at(r, c) += g.data[0];
  });
}

Var sum(Var x) {
  double s = 0.0;
  for (double v : x.value().data) s += v;
  return x.tape->record(Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    for (auto& v : t.grad_slot(x).data) v += g.data[0];
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  return scale(sum(x), 1.0 / n);
}

Var mean_rows(Var x) {
  const Tensor& xv = x.value();
  if (xv.rows() == 0) throw std::invalid_argument("mean_rows: empty");
  const double inv = 1.0 / static_cast<double>(xv.rows());
  Tensor out = Tensor::matrix(1, xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r)
    for (std::size_t c = 0; c < xv.cols(); ++c) out.data[c] += xv.at(r, c);
  for (auto& v : out.data) v *= inv;
  return x.tape->record(std::move(out), {x}, [x, inv](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad_slot(x);
    for (std::size_t r = 0; r < gx.rows(); ++r)
      for (std::size_t c = 0; c < gx.cols(); ++c) gx.at(r, c) += inv * g.data[c];
  });
}

}  // namespace ad
}  // namespace r2m
