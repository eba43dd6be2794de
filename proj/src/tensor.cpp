#include "dplm/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>
#include <unordered_set>

namespace dplm {

namespace {

thread_local int no_grad_depth = 0;

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using StridedMat = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using ConstStridedMat = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

ConstMapMat cmat(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return ConstMapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

MapMat as_mat(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MapMat(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

// Adds src into parent grad if that parent participates in differentiation.
template <typename F>
void accumulate(detail::Node& parent, F&& fill) {
  if (!parent.requires_grad) return;
  parent.ensure_grad();
  fill(parent.grad);
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

NoGradGuard::NoGradGuard() { ++no_grad_depth; }
NoGradGuard::~NoGradGuard() { --no_grad_depth; }
bool grad_enabled() { return no_grad_depth == 0; }

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (auto d : shape) {
    if (d == 0) throw ShapeError("tensor dimensions must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(data);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::randn(Shape shape, double stddev, std::mt19937_64& rng, bool requires_grad) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> data(shape_numel(shape));
  for (auto& x : data) x = dist(rng);
  return from(std::move(shape), std::move(data), requires_grad);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
  return node_->value[0];
}

Tensor Tensor::detach() const { return from(shape(), node_->value, false); }

Tensor make_result(Shape shape, std::vector<double> value, std::vector<Tensor> inputs,
                   std::function<void(detail::Node&)> backward) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  if (grad_enabled()) {
    bool any = std::any_of(inputs.begin(), inputs.end(),
                           [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      node->requires_grad = true;
      node->parents.reserve(inputs.size());
      for (auto& t : inputs) node->parents.push_back(t.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor(std::move(node));
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  detail::Node* root = loss.node();
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents before children).
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  root->ensure_grad();
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward) (*it)->backward(**it);
  }
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n);
  as_mat(out, m, n).noalias() = cmat(a.node()->value, m, k) * cmat(b.node()->value, k, n);
  return make_result({m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    auto g = cmat(self.grad, m, n);
    accumulate(pa, [&](std::vector<double>& ga) {
      as_mat(ga, m, k).noalias() += g * cmat(pb.value, k, n).transpose();
    });
    accumulate(pb, [&](std::vector<double>& gb) {
      as_mat(gb, k, n).noalias() += cmat(pa.value, m, k).transpose() * g;
    });
  });
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  std::vector<double> out(m * n);
  as_mat(out, n, m) = cmat(a.node()->value, m, n).transpose();
  return make_result({n, m}, std::move(out), {a}, [m, n](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& ga) {
      as_mat(ga, m, n) += cmat(self.grad, n, m).transpose();
    });
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  return make_result(std::move(shape), a.node()->value, {a}, [](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& ga) {
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
  });
}

// ---- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    for (auto& p : self.parents) {
      accumulate(*p, [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      });
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(*self.parents[1], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    });
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return make_result(a.shape(), std::move(out), {a, b}, [](detail::Node& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    accumulate(pa, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    });
    accumulate(pb, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    });
  });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * factor;
  return make_result(a.shape(), std::move(out), {a}, [factor](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * factor;
    });
  });
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_rank(x, 2, "add_bias");
  if (bias.numel() != x.dim(1) || bias.rank() != 1) {
    throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                     shape_str(x.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(x.data().begin(), x.data().end());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] += bias.data()[c];
  }
  return make_result(x.shape(), std::move(out), {x, bias}, [m, n](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
    accumulate(*self.parents[1], [&](std::vector<double>& g) {
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
      }
    });
  });
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  return make_result({}, {s}, {a}, [](detail::Node& self) {
    const double g0 = self.grad[0];
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      for (auto& x : g) x += g0;
    });
  });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor softmax(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw ShapeError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(x.shape()));
  }
  const auto& shape = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t n = shape[axis];
  const auto& in = x.node()->value;
  std::vector<double> out(in.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t j = 0; j < inner; ++j) {
      const std::size_t base = o * n * inner + j;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, in[base + i * inner]);
      double z = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        out[base + i * inner] = std::exp(in[base + i * inner] - mx);
        z += out[base + i * inner];
      }
      for (std::size_t i = 0; i < n; ++i) out[base + i * inner] /= z;
    }
  }
  return make_result(shape, out, {x}, [outer, inner, n](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      const auto& y = self.value;
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t j = 0; j < inner; ++j) {
          const std::size_t base = o * n * inner + j;
          double dot = 0.0;
          for (std::size_t i = 0; i < n; ++i) dot += self.grad[base + i * inner] * y[base + i * inner];
          for (std::size_t i = 0; i < n; ++i) {
            const std::size_t idx = base + i * inner;
            g[idx] += y[idx] * (self.grad[idx] - dot);
          }
        }
      }
    });
  });
}

Tensor gelu(const Tensor& x) {
  const auto& in = x.node()->value;
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    out[i] = 0.5 * in[i] * (1.0 + std::erf(in[i] / std::numbers::sqrt2));
  }
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    accumulate(p, [&](std::vector<double>& g) {
      constexpr double inv_sqrt_2pi = 0.3989422804014327;
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = p.value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
        g[i] += self.grad[i] * (cdf + v * pdf);
      }
    });
  });
}

Tensor softplus(const Tensor& x) {
  const auto& in = x.node()->value;
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    const double v = in[i];
    out[i] = v > 0.0 ? v + std::log1p(std::exp(-v)) : std::log1p(std::exp(v));
  }
  return make_result(x.shape(), std::move(out), {x}, [](detail::Node& self) {
    auto& p = *self.parents[0];
    accumulate(p, [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = p.value[i];
        const double sig = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
        g[i] += self.grad[i] * sig;
      }
    });
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 2, "layer_norm");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (gamma.numel() != n || beta.numel() != n) {
    throw ShapeError("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                     shape_str(beta.shape()) + " do not match " + shape_str(x.shape()));
  }
  const auto& in = x.node()->value;
  std::vector<double> xhat(in.size()), inv_std(m), out(in.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = in.data() + r * n;
    double mu = 0.0;
    for (std::size_t c = 0; c < n; ++c) mu += row[c];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t c = 0; c < n; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < n; ++c) {
      xhat[r * n + c] = (row[c] - mu) * inv_std[r];
      out[r * n + c] = xhat[r * n + c] * gamma.data()[c] + beta.data()[c];
    }
  }
  return make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](detail::Node& self) {
        auto& px = *self.parents[0];
        auto& pg = *self.parents[1];
        auto& pb = *self.parents[2];
        const auto& gy = self.grad;
        accumulate(pg, [&](std::vector<double>& g) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += gy[r * n + c] * xhat[r * n + c];
        });
        accumulate(pb, [&](std::vector<double>& g) {
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < n; ++c) g[c] += gy[r * n + c];
        });
        accumulate(px, [&](std::vector<double>& g) {
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t r = 0; r < m; ++r) {
            double mean_d = 0.0, mean_dx = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = gy[r * n + c] * pg.value[c];
              mean_d += d;
              mean_dx += d * xhat[r * n + c];
            }
            mean_d *= inv_n;
            mean_dx *= inv_n;
            for (std::size_t c = 0; c < n; ++c) {
              const double d = gy[r * n + c] * pg.value[c];
              g[r * n + c] += inv_std[r] * (d - mean_d - xhat[r * n + c] * mean_dx);
            }
          }
        });
      });
}

Tensor dropout(const Tensor& x, double p, std::mt19937_64& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = u(rng) < p ? 0.0 : keep_scale;
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](detail::Node& self) {
    accumulate(*self.parents[0], [&](std::vector<double>& g) {
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * mask[i];
    });
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "cross_entropy");
  const std::size_t rows = logits.dim(0), vocab = logits.dim(1);
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_str(logits.shape()));
  }
  const auto& in = logits.node()->value;
  std::vector<double> probs(in.size());
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] >= vocab) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(targets[r]) +
                              " out of range for " + std::to_string(vocab) + " classes");
    }
    const double* row = in.data() + r * vocab;
    const double mx = *std::max_element(row, row + vocab);
    double z = 0.0;
    for (std::size_t c = 0; c < vocab; ++c) {
      probs[r * vocab + c] = std::exp(row[c] - mx);
      z += probs[r * vocab + c];
    }
    for (std::size_t c = 0; c < vocab; ++c) probs[r * vocab + c] /= z;
    total += -(row[targets[r]] - mx - std::log(z));
  }
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  return make_result(
      {}, {total / static_cast<double>(rows)}, {logits},
      [rows, vocab, probs = std::move(probs), tgt = std::move(tgt)](detail::Node& self) {
        const double g0 = self.grad[0] / static_cast<double>(rows);
        accumulate(*self.parents[0], [&](std::vector<double>& g) {
          for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t c = 0; c < vocab; ++c) g[r * vocab + c] += g0 * probs[r * vocab + c];
            g[r * vocab + tgt[r]] -= g0;
          }
        });
      });
}

// ---- indexing ----------------------------------------------------------------

Tensor gather_rows(const Tensor& table, std::span<const std::size_t> indices) {
  require_rank(table, 2, "gather_rows");
  const std::size_t rows = table.dim(0), n = table.dim(1);
  if (indices.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<double> out(indices.size() * n);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows) {
      throw std::out_of_range("gather_rows: index " + std::to_string(indices[i]) +
                              " out of range for " + shape_str(table.shape()));
    }
    std::copy_n(table.data().begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n,
                out.begin() + static_cast<std::ptrdiff_t>(i * n));
  }
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  const std::size_t count = idx.size();
  return make_result({count, n}, std::move(out), {table},
                     [n, idx = std::move(idx)](detail::Node& self) {
                       accumulate(*self.parents[0], [&](std::vector<double>& g) {
                         for (std::size_t i = 0; i < idx.size(); ++i)
                           for (std::size_t c = 0; c < n; ++c) g[idx[i] * n + c] += self.grad[i * n + c];
                       });
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  for (const auto& p : parts) {
    if (p.rank() == 0) throw ShapeError("concat_rows: scalar input");
  }
  const std::size_t n = parts[0].shape().back();
  std::size_t rows = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    if (p.rank() > 2 || p.shape().back() != n || (p.rank() == 2 && p.dim(1) != n)) {
      throw ShapeError("concat_rows: " + shape_str(p.shape()) + " incompatible with width " +
                       std::to_string(n));
    }
    offsets.push_back(rows * n);
    rows += p.numel() / n;
  }
  std::vector<double> out;
  out.reserve(rows * n);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  return make_result({rows, n}, std::move(out), parts, [offsets](detail::Node& self) {
    for (std::size_t k = 0; k < self.parents.size(); ++k) {
      accumulate(*self.parents[k], [&](std::vector<double>& g) {
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[offsets[k] + i];
      });
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rank() == 2 ? parts[0].dim(0) : 1;
  std::vector<std::size_t> widths, offsets;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const std::size_t r = p.rank() == 2 ? p.dim(0) : 1;
    if (p.rank() > 2 || r != rows) {
      throw ShapeError("concat_cols: " + shape_str(p.shape()) + " incompatible with " +
                       std::to_string(rows) + " rows");
    }
    widths.push_back(p.numel() / rows);
    offsets.push_back(total);
    total += widths.back();
  }
  std::vector<double> out(rows * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(parts[k].data().begin() + static_cast<std::ptrdiff_t>(r * widths[k]), widths[k],
                  out.begin() + static_cast<std::ptrdiff_t>(r * total + offsets[k]));
    }
  }
  Shape shape = parts[0].rank() == 2 ? Shape{rows, total} : Shape{total};
  return make_result(std::move(shape), std::move(out), parts,
                     [rows, total, widths, offsets](detail::Node& self) {
                       for (std::size_t k = 0; k < self.parents.size(); ++k) {
                         accumulate(*self.parents[k], [&](std::vector<double>& g) {
                           for (std::size_t r = 0; r < rows; ++r)
                             for (std::size_t c = 0; c < widths[k]; ++c)
                               g[r * widths[k] + c] += self.grad[r * total + offsets[k] + c];
                         });
                       }
                     });
}

// ---- attention -------------------------------------------------------------------

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t batch,
                 std::size_t seq, std::size_t heads, std::span<const std::uint8_t> key_mask) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  require_rank(q, 2, "attention");
  const std::size_t d = q.dim(1);
  if (q.dim(0) != batch * seq || key_mask.size() != batch * seq) {
    throw ShapeError("attention: " + shape_str(q.shape()) + " does not hold " +
                     std::to_string(batch) + "x" + std::to_string(seq) + " tokens");
  }
  if (heads == 0 || d % heads != 0) {
    throw ShapeError("attention: width " + std::to_string(d) + " not divisible by " +
                     std::to_string(heads) + " heads");
  }
  const std::size_t dh = d / heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto S = static_cast<Eigen::Index>(seq);
  const auto Dh = static_cast<Eigen::Index>(dh);
  const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));

  std::vector<double> probs(batch * heads * seq * seq);
  std::vector<double> out(batch * seq * d, 0.0);
  const auto& qv = q.node()->value;
  const auto& kv = k.node()->value;
  const auto& vv = v.node()->value;

  for (std::size_t b = 0; b < batch; ++b) {
    const std::uint8_t* mask = key_mask.data() + b * seq;
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t off = b * seq * d + h * dh;
      ConstStridedMat Qh(qv.data() + off, S, Dh, stride);
      ConstStridedMat Kh(kv.data() + off, S, Dh, stride);
      ConstStridedMat Vh(vv.data() + off, S, Dh, stride);
      MapMat P(probs.data() + (b * heads + h) * seq * seq, S, S);
      P.noalias() = Qh * Kh.transpose();
      for (std::size_t i = 0; i < seq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          if (mask[j]) mx = std::max(mx, P(i, j) * inv_scale);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          const double e = mask[j] ? std::exp(P(i, j) * inv_scale - mx) : 0.0;
          P(i, j) = e;
          z += e;
        }
        for (std::size_t j = 0; j < seq; ++j) P(i, j) /= z;
      }
      StridedMat(out.data() + off, S, Dh, stride).noalias() = P * Vh;
    }
  }

  return make_result(
      q.shape(), std::move(out), {q, k, v},
      [batch, seq, heads, d, dh, inv_scale, probs = std::move(probs)](detail::Node& self) {
        auto& pq = *self.parents[0];
        auto& pk = *self.parents[1];
        auto& pv = *self.parents[2];
        for (auto* p : {&pq, &pk, &pv}) {
          if (p->requires_grad) p->ensure_grad();
        }
        const auto S = static_cast<Eigen::Index>(seq);
        const auto Dh = static_cast<Eigen::Index>(dh);
        const Eigen::OuterStride<> stride(static_cast<Eigen::Index>(d));
        RowMat dP(S, S);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = b * seq * d + h * dh;
            ConstMapMat P(probs.data() + (b * heads + h) * seq * seq, S, S);
            ConstStridedMat dO(self.grad.data() + off, S, Dh, stride);
            ConstStridedMat Qh(pq.value.data() + off, S, Dh, stride);
            ConstStridedMat Kh(pk.value.data() + off, S, Dh, stride);
            ConstStridedMat Vh(pv.value.data() + off, S, Dh, stride);
            if (pv.requires_grad) {
              StridedMat(pv.grad.data() + off, S, Dh, stride).noalias() += P.transpose() * dO;
            }
            if (!pq.requires_grad && !pk.requires_grad) continue;
            dP.noalias() = dO * Vh.transpose();
            for (Eigen::Index i = 0; i < S; ++i) {
              const double dot = dP.row(i).dot(P.row(i));
              for (Eigen::Index j = 0; j < S; ++j) dP(i, j) = P(i, j) * (dP(i, j) - dot) * inv_scale;
            }
            if (pq.requires_grad) {
              StridedMat(pq.grad.data() + off, S, Dh, stride).noalias() += dP * Kh;
            }
            if (pk.requires_grad) {
              StridedMat(pk.grad.data() + off, S, Dh, stride).noalias() += dP.transpose() * Qh;
            }
          }
        }
      });
}

}  // namespace dplm
