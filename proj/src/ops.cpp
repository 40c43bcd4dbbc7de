#include <algorithm>
#include <cmath>
#include <numbers>

#include "hat/tensor.hpp"

namespace hat {
namespace {

using BackwardFn = std::function<void(Node&)>;

Tensor make_result(Shape shape, std::vector<double> values, std::initializer_list<Tensor> inputs,
                   BackwardFn fn) {
  Tensor out(std::move(shape), std::move(values));
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const auto& t : inputs) node.parents.push_back(t.node());
    node.backward_fn = std::move(fn);
  }
  return out;
}

std::size_t normalize_axis(int axis, std::size_t rank) {
  const int r = static_cast<int>(rank);
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw DimensionError("axis " + std::to_string(axis) + " out of range");
  return static_cast<std::size_t>(axis);
}

// True when `suffix` equals the trailing axes of `full`.
bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename Op, typename GradA, typename GradB>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, const char* name, Op op, GradA ga,
                        GradB gb) {
  if (!is_suffix(a.shape(), b.shape()))
    throw DimensionError(std::string(name) + ": cannot broadcast " + shape_str(b.shape()) +
                         " onto " + shape_str(a.shape()));
  const std::size_t n = a.numel();
  const std::size_t m = b.numel();
  const auto av = a.values();
  const auto bv = b.values();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = op(av[i], bv[i % m]);
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(a.shape(), std::move(out), {a, b}, [pa, pb, n, m, ga, gb](Node& self) {
    const auto& g = self.grad;
    if (pa->requires_grad) {
      auto& dst = pa->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) dst[i] += ga(g[i], pa->value[i], pb->value[i % m]);
    }
    if (pb->requires_grad) {
      auto& dst = pb->grad_buffer();
      for (std::size_t i = 0; i < n; ++i) dst[i % m] += gb(g[i], pa->value[i], pb->value[i % m]);
    }
  });
}

template <typename F, typename D>
Tensor unary(const Tensor& x, F f, D dfdx) {
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x}, [px, dfdx](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] += self.grad[i] * dfdx(px->value[i], self.value[i]);
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto mismatch = [&] {
    return DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
  };
  if (a.rank() < 2 || b.rank() < 2) throw mismatch();
  const std::size_t m = a.dim(-2), k = a.dim(-1), kb = b.dim(-2), n = b.dim(-1);
  if (k != kb) throw mismatch();
  const Shape batch_a(a.shape().begin(), a.shape().end() - 2);
  const Shape batch_b(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (batch_a == batch_b || batch_b.empty())
    batch = batch_a;
  else if (batch_a.empty())
    batch = batch_b;
  else
    throw mismatch();
  const std::size_t nb = shape_numel(batch);
  const bool bcast_a = batch_a.empty() && !batch.empty();
  const bool bcast_b = batch_b.empty() && !batch.empty();

  std::vector<double> out(nb * m * n, 0.0);
  const double* A = a.values().data();
  const double* B = b.values().data();
  for (std::size_t t = 0; t < nb; ++t) {
    const double* At = A + (bcast_a ? 0 : t * m * k);
    const double* Bt = B + (bcast_b ? 0 : t * k * n);
    double* Ct = out.data() + t * m * n;
    for (std::size_t i = 0; i < m; ++i) {
      double* row = Ct + i * n;
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = At[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = Bt + p * n;
        for (std::size_t j = 0; j < n; ++j) row[j] += aip * brow[j];
      }
    }
  }
  Shape shape = batch;
  shape.push_back(m);
  shape.push_back(n);
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return make_result(std::move(shape), std::move(out), {a, b},
                     [pa, pb, nb, m, k, n, bcast_a, bcast_b](Node& self) {
                       const double* G = self.grad.data();
                       if (pa->requires_grad) {
                         double* dA = pa->grad_buffer().data();
                         const double* B = pb->value.data();
                         for (std::size_t t = 0; t < nb; ++t) {
                           double* dAt = dA + (bcast_a ? 0 : t * m * k);
                           const double* Bt = B + (bcast_b ? 0 : t * k * n);
                           const double* Gt = G + t * m * n;
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               double acc = 0.0;
                               const double* brow = Bt + p * n;
                               const double* grow = Gt + i * n;
                               for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
                               dAt[i * k + p] += acc;
                             }
                         }
                       }
                       if (pb->requires_grad) {
                         double* dB = pb->grad_buffer().data();
                         const double* A = pa->value.data();
                         for (std::size_t t = 0; t < nb; ++t) {
                           double* dBt = dB + (bcast_b ? 0 : t * k * n);
                           const double* At = A + (bcast_a ? 0 : t * m * k);
                           const double* Gt = G + t * m * n;
                           for (std::size_t i = 0; i < m; ++i)
                             for (std::size_t p = 0; p < k; ++p) {
                               const double aip = At[i * k + p];
                               if (aip == 0.0) continue;
                               double* drow = dBt + p * n;
                               const double* grow = Gt + i * n;
                               for (std::size_t j = 0; j < n; ++j) drow[j] += aip * grow[j];
                             }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return broadcast_binary(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor scale(const Tensor& a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t r = a.dim(-2), c = a.dim(-1);
  const std::size_t nb = a.numel() / (r * c);
  const auto av = a.values();
  std::vector<double> out(av.size());
  for (std::size_t t = 0; t < nb; ++t)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[t * r * c + j * r + i] = av[t * r * c + i * c + j];
  Shape shape = a.shape();
  std::swap(shape[shape.size() - 1], shape[shape.size() - 2]);
  Node* pa = a.node().get();
  return make_result(std::move(shape), std::move(out), {a}, [pa, nb, r, c](Node& self) {
    auto& dst = pa->grad_buffer();
    for (std::size_t t = 0; t < nb; ++t)
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j)
          dst[t * r * c + i * c + j] += self.grad[t * r * c + j * r + i];
  });
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " +
                         shape_str(shape));
  Node* pa = a.node().get();
  std::vector<double> values(a.values().begin(), a.values().end());
  return make_result(std::move(shape), std::move(values), {a}, [pa](Node& self) {
    auto& dst = pa->grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += self.grad[i];
  });
}

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  const std::size_t ax = normalize_axis(axis, first.size());
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == ax) || s[i] == first[i];
    if (!ok)
      throw DimensionError("concat: " + shape_str(s) + " incompatible with " + shape_str(first));
    total += s[ax];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= first[i];
  for (std::size_t i = ax + 1; i < first.size(); ++i) inner *= first[i];

  Shape shape = first;
  shape[ax] = total;
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t w = p.shape()[ax] * inner;
    const auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * w), w,
                  out.begin() + static_cast<std::ptrdiff_t>(o * total * inner + offset));
    widths.push_back(w);
    offset += w;
  }

  Tensor result(std::move(shape), std::move(out));
  bool needs = std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    auto& node = *result.node();
    node.requires_grad = true;
    for (const auto& p : parts) node.parents.push_back(p.node());
    const std::size_t row = total * inner;
    node.backward_fn = [widths, outer, row](Node& self) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < self.parents.size(); ++k) {
        Node* p = self.parents[k].get();
        const std::size_t w = widths[k];
        if (p->requires_grad) {
          auto& dst = p->grad_buffer();
          for (std::size_t o = 0; o < outer; ++o)
            for (std::size_t i = 0; i < w; ++i) dst[o * w + i] += self.grad[o * row + off + i];
        }
        off += w;
      }
    };
  }
  return result;
}

Tensor gather_rows(const Tensor& x, std::span<const int> rows) {
  if (x.rank() != 2) throw DimensionError("gather_rows expects a matrix, got " + shape_str(x.shape()));
  if (rows.empty()) throw DimensionError("gather_rows with no indices");
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<std::size_t> idx(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || static_cast<std::size_t>(rows[i]) >= n)
      throw std::out_of_range("row index " + std::to_string(rows[i]) + " out of range for " +
                              shape_str(x.shape()));
    idx[i] = static_cast<std::size_t>(rows[i]);
  }
  const auto xv = x.values();
  std::vector<double> out(rows.size() * d);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  Node* px = x.node().get();
  return make_result({rows.size(), d}, std::move(out), {x}, [px, idx, d](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) dst[idx[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor embedding(const Tensor& table, std::span<const int> ids) { return gather_rows(table, ids); }

Tensor dropout(const Tensor& x, double p, bool train, const CounterRng& rng, std::uint64_t stream) {
  if (p < 0.0 || p >= 1.0) throw std::invalid_argument("dropout probability must be in [0, 1)");
  if (!train || p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.numel());
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = rng.uniform(stream, i) >= p ? keep_scale : 0.0;
  return mul(x, Tensor(x.shape(), std::move(mask)));
}

Tensor log(const Tensor& x) {
  return unary(
      x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor exp(const Tensor& x) {
  return unary(
      x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor masked_fill(const Tensor& x, std::span<const std::uint8_t> mask, double value) {
  const std::size_t m = mask.size();
  if (m == 0 || x.numel() % m != 0)
    throw DimensionError("masked_fill: mask of " + std::to_string(m) + " entries does not tile " +
                         shape_str(x.shape()));
  const auto xv = x.values();
  std::vector<double> out(xv.begin(), xv.end());
  std::vector<std::uint8_t> fill(mask.begin(), mask.end());
  for (std::size_t i = 0; i < out.size(); ++i)
    if (fill[i % m]) out[i] = value;
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x}, [px, fill, m](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t i = 0; i < dst.size(); ++i)
      if (!fill[i % m]) dst[i] += self.grad[i];
  });
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = normalize_axis(axis, x.rank());
  const Shape& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s[i];
  for (std::size_t i = ax + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[ax];
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= z;
    }
  Node* px = x.node().get();
  return make_result(s, std::move(out), {x}, [px, outer, inner, n](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * n * inner + in;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j)
          dot += self.grad[base + j * inner] * self.value[base + j * inner];
        for (std::size_t j = 0; j < n; ++j) {
          const std::size_t i = base + j * inner;
          dst[i] += self.value[i] * (self.grad[i] - dot);
        }
      }
  });
}

Tensor log_softmax(const Tensor& x) {
  const std::size_t n = x.dim(-1);
  const std::size_t rows = x.numel() / n;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lse;
  }
  Node* px = x.node().get();
  return make_result(x.shape(), std::move(out), {x}, [px, rows, n](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < n; ++j) gsum += self.grad[r * n + j];
      for (std::size_t j = 0; j < n; ++j) {
        const std::size_t i = r * n + j;
        dst[i] += self.grad[i] - std::exp(self.value[i]) * gsum;
      }
    }
  });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v / std::numbers::sqrt2)); },
      [](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v / std::numbers::sqrt2));
        const double pdf = std::exp(-0.5 * v * v) / std::sqrt(2.0 * std::numbers::pi);
        return cdf + v * pdf;
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  if (eps <= 0.0) throw std::invalid_argument("layer_norm eps must be positive");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d})
    throw DimensionError("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                         shape_str(bias.shape()) + " do not match " + shape_str(x.shape()));
  const std::size_t rows = x.numel() / d;
  const auto xv = x.values();
  const auto gv = gain.values();
  const auto bv = bias.values();
  std::vector<double> out(xv.size());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const std::size_t i = r * d + j;
      xhat[i] = (row[j] - mu) * inv_std[r];
      out[i] = xhat[i] * gv[j] + bv[j];
    }
  }
  Node* px = x.node().get();
  Node* pg = gain.node().get();
  Node* pb = bias.node().get();
  return make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [px, pg, pb, rows, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node& self) {
        const auto& g = self.grad;
        if (pg->requires_grad) {
          auto& dg = pg->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) dg[i % d] += g[i] * xhat[i];
        }
        if (pb->requires_grad) {
          auto& db = pb->grad_buffer();
          for (std::size_t i = 0; i < g.size(); ++i) db[i % d] += g[i];
        }
        if (px->requires_grad) {
          auto& dx = px->grad_buffer();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double m1 = 0.0, m2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const std::size_t i = r * d + j;
              const double dxh = g[i] * pg->value[j];
              m1 += dxh;
              m2 += dxh * xhat[i];
            }
            m1 *= inv_d;
            m2 *= inv_d;
            for (std::size_t j = 0; j < d; ++j) {
              const std::size_t i = r * d + j;
              const double dxh = g[i] * pg->value[j];
              dx[i] += inv_std[r] * (dxh - m1 - xhat[i] * m2);
            }
          }
        }
      });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Node* px = x.node().get();
  return make_result({1}, {s}, {x}, [px](Node& self) {
    auto& dst = px->grad_buffer();
    for (auto& v : dst) v += self.grad[0];
  });
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep) {
  const std::size_t n = x.dim(-1);
  const std::size_t m = keep.size();
  if (m % n != 0 || x.numel() % m != 0)
    throw DimensionError("masked_softmax: mask of " + std::to_string(m) + " entries does not tile " +
                         shape_str(x.shape()));
  std::vector<std::uint8_t> fill(m);
  for (std::size_t r = 0; r < m / n; ++r) {
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      fill[r * n + j] = keep[r * n + j] ? 0 : 1;
      any = any || keep[r * n + j];
    }
    if (!any) throw std::invalid_argument("masked_softmax: row " + std::to_string(r) + " has no unmasked entries");
  }
  return softmax(masked_fill(x, fill, kMaskSentinel), -1);
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 2 || heads == 0 || x.dim(1) % heads != 0)
    throw DimensionError("split_heads: " + shape_str(x.shape()) + " not divisible into " +
                         std::to_string(heads) + " heads");
  const std::size_t L = x.dim(0), dk = x.dim(1) / heads;
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < L; ++l)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(l * heads * dk + h * dk), dk,
                  out.begin() + static_cast<std::ptrdiff_t>((h * L + l) * dk));
  Node* px = x.node().get();
  return make_result({heads, L, dk}, std::move(out), {x}, [px, heads, L, dk](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < dk; ++j)
          dst[l * heads * dk + h * dk + j] += self.grad[(h * L + l) * dk + j];
  });
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("merge_heads expects [h, L, dk], got " + shape_str(x.shape()));
  const std::size_t heads = x.dim(0), L = x.dim(1), dk = x.dim(2);
  const auto xv = x.values();
  std::vector<double> out(xv.size());
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t l = 0; l < L; ++l)
      std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((h * L + l) * dk), dk,
                  out.begin() + static_cast<std::ptrdiff_t>(l * heads * dk + h * dk));
  Node* px = x.node().get();
  return make_result({L, heads * dk}, std::move(out), {x}, [px, heads, L, dk](Node& self) {
    auto& dst = px->grad_buffer();
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t j = 0; j < dk; ++j)
          dst[(h * L + l) * dk + j] += self.grad[l * heads * dk + h * dk + j];
  });
}

}  // namespace hat
