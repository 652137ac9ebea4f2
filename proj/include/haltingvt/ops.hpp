#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <vector>

#include <Eigen/Core>

#include "haltingvt/tensor.hpp"

namespace haltingvt {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace detail {

template <typename T>
Eigen::Map<const RowMatrix<T>> as_matrix(const std::vector<T>& v, std::size_t r, std::size_t c) {
    return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <typename T>
Eigen::Map<RowMatrix<T>> as_matrix(std::vector<T>& v, std::size_t r, std::size_t c) {
    return {v.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)};
}

template <typename T>
void require_rank2(const char* op, const Tensor<T>& a) {
    if (a.rank() != 2) {
        throw ShapeError(op, "expected a rank-2 operand, got " + shape_string(a.shape()));
    }
}

template <typename T>
void require_same(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape() != b.shape()) {
        throw ShapeError(op, a.shape(), b.shape());
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_rank2("matmul", a);
    detail::require_rank2("matmul", b);
    if (a.cols() != b.rows()) {
        throw ShapeError("matmul", a.shape(), b.shape());
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    std::vector<T> out(m * n);
    detail::as_matrix(out, m, n).noalias() =
        detail::as_matrix(a.node()->value, m, k) * detail::as_matrix(b.node()->value, k, n);
    FlopCounter::local().add(2ULL * m * k * n);
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(
        Shape{m, n}, std::move(out), detail::any_requires_grad({&a, &b}),
        [an, bn, m, k, n](const Node<T>& self) {
            auto dc = detail::as_matrix(self.grad, m, n);
            if (an->requires_grad) {
                an->ensure_grad();
                detail::as_matrix(an->grad, m, k).noalias() +=
                    dc * detail::as_matrix(bn->value, k, n).transpose();
            }
            if (bn->requires_grad) {
                bn->ensure_grad();
                detail::as_matrix(bn->grad, k, n).noalias() +=
                    detail::as_matrix(an->value, m, k).transpose() * dc;
            }
        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
    detail::require_rank2("transpose", a);
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(m * n);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[j * m + i] = a.node()->value[i * n + j];
        }
    }
    auto an = a.node();
    return detail::make_result<T>(Shape{n, m}, std::move(out), a.requires_grad(),
                                  [an, m, n](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < m; ++i) {
                                          for (std::size_t j = 0; j < n; ++j) {
                                              an->grad[i * n + j] += self.grad[j * m + i];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape", a.shape(), shape);
    }
    auto an = a.node();
    return detail::make_result<T>(std::move(shape), an->value, a.requires_grad(),
                                  [an](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                          an->grad[i] += self.grad[i];
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Elementwise

namespace detail {

template <typename T, typename Fwd, typename Bwd>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Bwd bwd) {
    require_same(op, a, b);
    std::vector<T> out(a.size());
    const auto& av = a.node()->value;
    const auto& bv = b.node()->value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(av[i], bv[i]);
    }
    auto an = a.node(), bn = b.node();
    return make_result<T>(a.shape(), std::move(out), any_requires_grad({&a, &b}),
                          [an, bn, bwd](const Node<T>& self) {
                              const bool ga = an->requires_grad, gb = bn->requires_grad;
                              if (ga) {
                                  an->ensure_grad();
                              }
                              if (gb) {
                                  bn->ensure_grad();
                              }
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  auto [da, db] = bwd(an->value[i], bn->value[i], self.grad[i]);
                                  if (ga) {
                                      an->grad[i] += da;
                                  }
                                  if (gb) {
                                      bn->grad[i] += db;
                                  }
                              }
                          });
}

// y = f(x); the backward functor receives (x, y, dy).
template <typename T, typename Fwd, typename Bwd>
Tensor<T> unary(const Tensor<T>& a, Fwd fwd, Bwd bwd) {
    std::vector<T> out(a.size());
    const auto& av = a.node()->value;
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = fwd(av[i]);
    }
    auto an = a.node();
    return make_result<T>(a.shape(), std::move(out), a.requires_grad(),
                          [an, bwd](const Node<T>& self) {
                              an->ensure_grad();
                              for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                  an->grad[i] += bwd(an->value[i], self.value[i], self.grad[i]);
                              }
                          });
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; },
        [](T, T, T g) { return std::pair<T, T>{g, g}; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; },
        [](T, T, T g) { return std::pair<T, T>{g, -g}; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; },
        [](T x, T y, T g) { return std::pair<T, T>{g * y, g * x}; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    return detail::unary<T>(
        a, [c](T x) { return c * x; }, [c](T, T, T g) { return c * g; });
}

template <typename T>
Tensor<T> shift(const Tensor<T>& a, T c) {
    return detail::unary<T>(
        a, [c](T x) { return x + c; }, [](T, T, T g) { return g; });
}

// gamma * x + beta with constant coefficients; counted as one multiply-add per element.
template <typename T>
Tensor<T> affine(const Tensor<T>& a, T gamma, T beta) {
    FlopCounter::local().add(2ULL * a.size());
    return detail::unary<T>(
        a, [gamma, beta](T x) { return gamma * x + beta; },
        [gamma](T, T, T g) { return gamma * g; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
    return detail::unary<T>(
        a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
        [](T, T y, T g) { return g * y * (T(1) - y); });
}

// Exact (erf) GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    constexpr T inv_sqrt2 = T(0.70710678118654752440);
    constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
    return detail::unary<T>(
        a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
        [](T x, T, T g) {
            const T cdf = T(0.5) * (T(1) + std::erf(x * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * x * x);
            return g * (cdf + x * pdf);
        });
}

// Multiplies every element by the single value held in `s`.
template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, const Tensor<T>& s) {
    if (s.size() != 1) {
        throw ShapeError("mul_scalar", a.shape(), s.shape());
    }
    const T c = s[0];
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = a.node()->value[i] * c;
    }
    auto an = a.node(), sn = s.node();
    return detail::make_result<T>(a.shape(), std::move(out), detail::any_requires_grad({&a, &s}),
                                  [an, sn](const Node<T>& self) {
                                      const T c = sn->value[0];
                                      T ds = 0;
                                      if (an->requires_grad) {
                                          an->ensure_grad();
                                      }
                                      for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                          if (an->requires_grad) {
                                              an->grad[i] += self.grad[i] * c;
                                          }
                                          ds += self.grad[i] * an->value[i];
                                      }
                                      if (sn->requires_grad) {
                                          sn->accumulate(0, ds);
                                      }
                                  });
}

// Adds a length-n vector to every row of an [m, n] matrix (trailing-axis expansion).
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    detail::require_rank2("add_row", a);
    if (row.size() != a.cols()) {
        throw ShapeError("add_row", a.shape(), row.shape());
    }
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(a.node()->value);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            out[i * n + j] += row.node()->value[j];
        }
    }
    auto an = a.node(), rn = row.node();
    return detail::make_result<T>(a.shape(), std::move(out), detail::any_requires_grad({&a, &row}),
                                  [an, rn, m, n](const Node<T>& self) {
                                      if (an->requires_grad) {
                                          an->ensure_grad();
                                          for (std::size_t i = 0; i < m * n; ++i) {
                                              an->grad[i] += self.grad[i];
                                          }
                                      }
                                      if (rn->requires_grad) {
                                          rn->ensure_grad();
                                          for (std::size_t i = 0; i < m; ++i) {
                                              for (std::size_t j = 0; j < n; ++j) {
                                                  rn->grad[j] += self.grad[i * n + j];
                                              }
                                          }
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Reductions and normalization

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T total = 0;
    for (T v : a.values()) {
        total += v;
    }
    auto an = a.node();
    return detail::make_result<T>(Shape{1}, std::vector<T>{total}, a.requires_grad(),
                                  [an](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (T& g : an->grad) {
                                          g += self.grad[0];
                                      }
                                  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

// Softmax over axis 1 (each row) or axis 0 (each column) of a rank-2 tensor.
// Rank-1 inputs are treated as a single row.
template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis = -1) {
    const bool rank1 = a.rank() == 1;
    if (!rank1 && a.rank() != 2) {
        throw ShapeError("softmax", "expected rank 1 or 2, got " + shape_string(a.shape()));
    }
    if (axis == -1) {
        axis = rank1 ? 0 : 1;
    }
    if (rank1 ? axis != 0 : (axis != 0 && axis != 1)) {
        throw ShapeError("softmax", "axis " + std::to_string(axis) + " out of range for " +
                                        shape_string(a.shape()));
    }
    const std::size_t rows = rank1 ? 1 : a.rows();
    const std::size_t cols = rank1 ? a.size() : a.cols();
    const bool along_rows = rank1 || axis == 1;
    // Lines are the reduction sets: rows when along_rows, columns otherwise.
    const std::size_t lines = along_rows ? rows : cols;
    const std::size_t len = along_rows ? cols : rows;
    const std::size_t stride = along_rows ? 1 : cols;
    auto index = [=](std::size_t line, std::size_t i) {
        return along_rows ? line * cols + i * stride : i * stride + line;
    };
    const auto& x = a.node()->value;
    std::vector<T> out(a.size());
    for (std::size_t line = 0; line < lines; ++line) {
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t i = 0; i < len; ++i) {
            mx = std::max(mx, x[index(line, i)]);
        }
        T total = 0;
        for (std::size_t i = 0; i < len; ++i) {
            const T e = std::exp(x[index(line, i)] - mx);
            out[index(line, i)] = e;
            total += e;
        }
        for (std::size_t i = 0; i < len; ++i) {
            out[index(line, i)] /= total;
        }
    }
    auto an = a.node();
    return detail::make_result<T>(a.shape(), std::move(out), a.requires_grad(),
                                  [an, lines, len, index](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (std::size_t line = 0; line < lines; ++line) {
                                          T dot = 0;
                                          for (std::size_t i = 0; i < len; ++i) {
                                              dot += self.grad[index(line, i)] * self.value[index(line, i)];
                                          }
                                          for (std::size_t i = 0; i < len; ++i) {
                                              const std::size_t k = index(line, i);
                                              an->grad[k] += self.value[k] * (self.grad[k] - dot);
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-6)) {
    detail::require_rank2("layer_norm", x);
    if (gain.size() != x.cols() || bias.size() != x.cols()) {
        throw ShapeError("layer_norm", x.shape(), gain.shape());
    }
    const std::size_t m = x.rows(), n = x.cols();
    std::vector<T> out(m * n);
    std::vector<T> xhat(m * n);
    std::vector<T> inv_std(m);
    const auto& xv = x.node()->value;
    const auto& gv = gain.node()->value;
    const auto& bv = bias.node()->value;
    for (std::size_t i = 0; i < m; ++i) {
        T mu = 0;
        for (std::size_t j = 0; j < n; ++j) {
            mu += xv[i * n + j];
        }
        mu /= static_cast<T>(n);
        T var = 0;
        for (std::size_t j = 0; j < n; ++j) {
            const T d = xv[i * n + j] - mu;
            var += d * d;
        }
        var /= static_cast<T>(n);
        inv_std[i] = T(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const T h = (xv[i * n + j] - mu) * inv_std[i];
            xhat[i * n + j] = h;
            out[i * n + j] = gv[j] * h + bv[j];
        }
    }
    auto xn = x.node(), gn = gain.node(), bn = bias.node();
    return detail::make_result<T>(
        x.shape(), std::move(out), detail::any_requires_grad({&x, &gain, &bias}),
        [xn, gn, bn, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Node<T>& self) {
            if (gn->requires_grad || bn->requires_grad) {
                gn->ensure_grad();
                bn->ensure_grad();
                for (std::size_t i = 0; i < m; ++i) {
                    for (std::size_t j = 0; j < n; ++j) {
                        const T g = self.grad[i * n + j];
                        if (gn->requires_grad) {
                            gn->grad[j] += g * xhat[i * n + j];
                        }
                        if (bn->requires_grad) {
                            bn->grad[j] += g;
                        }
                    }
                }
            }
            if (!xn->requires_grad) {
                return;
            }
            xn->ensure_grad();
            std::vector<T> dxhat(n);
            for (std::size_t i = 0; i < m; ++i) {
                T mean_d = 0, mean_dx = 0;
                for (std::size_t j = 0; j < n; ++j) {
                    dxhat[j] = self.grad[i * n + j] * gn->value[j];
                    mean_d += dxhat[j];
                    mean_dx += dxhat[j] * xhat[i * n + j];
                }
                mean_d /= static_cast<T>(n);
                mean_dx /= static_cast<T>(n);
                for (std::size_t j = 0; j < n; ++j) {
                    xn->grad[i * n + j] +=
                        inv_std[i] * (dxhat[j] - mean_d - xhat[i * n + j] * mean_dx);
                }
            }
        });
}

// Cross-entropy of one logit vector against an integer target.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::size_t target) {
    const std::size_t c = logits.size();
    if (logits.rank() == 2 && logits.rows() != 1) {
        throw ShapeError("cross_entropy", logits.shape(), Shape{1, c});
    }
    if (target >= c) {
        throw std::out_of_range("cross_entropy: target " + std::to_string(target) +
                                " out of range for " + std::to_string(c) + " classes");
    }
    const auto& z = logits.node()->value;
    const T mx = *std::max_element(z.begin(), z.end());
    T total = 0;
    for (T v : z) {
        total += std::exp(v - mx);
    }
    const T lse = mx + std::log(total);
    auto ln = logits.node();
    return detail::make_result<T>(Shape{1}, std::vector<T>{lse - z[target]}, logits.requires_grad(),
                                  [ln, target, lse](const Node<T>& self) {
                                      ln->ensure_grad();
                                      for (std::size_t i = 0; i < ln->value.size(); ++i) {
                                          const T p = std::exp(ln->value[i] - lse);
                                          ln->grad[i] += self.grad[0] * (p - (i == target ? T(1) : T(0)));
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Selection and assembly

// Rows `index` of a rank-2 tensor; dropped rows receive zero gradient.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& a, const std::vector<std::size_t>& index) {
    detail::require_rank2("gather_rows", a);
    const std::size_t n = a.cols();
    std::vector<T> out(index.size() * n);
    for (std::size_t r = 0; r < index.size(); ++r) {
        if (index[r] >= a.rows()) {
            throw ShapeError("gather_rows", "row " + std::to_string(index[r]) + " out of range for " +
                                                shape_string(a.shape()));
        }
        std::copy_n(a.node()->value.begin() + static_cast<std::ptrdiff_t>(index[r] * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(r * n));
    }
    auto an = a.node();
    return detail::make_result<T>(Shape{index.size(), n}, std::move(out), a.requires_grad(),
                                  [an, index, n](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (std::size_t r = 0; r < index.size(); ++r) {
                                          for (std::size_t j = 0; j < n; ++j) {
                                              an->grad[index[r] * n + j] += self.grad[r * n + j];
                                          }
                                      }
                                  });
}

// Single column j of a rank-2 tensor, as an [m, 1] tensor.
template <typename T>
Tensor<T> column(const Tensor<T>& a, std::size_t j) {
    detail::require_rank2("column", a);
    if (j >= a.cols()) {
        throw ShapeError("column", a.shape(), Shape{a.rows(), j + 1});
    }
    const std::size_t m = a.rows(), n = a.cols();
    std::vector<T> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        out[i] = a.node()->value[i * n + j];
    }
    auto an = a.node();
    return detail::make_result<T>(Shape{m, 1}, std::move(out), a.requires_grad(),
                                  [an, m, n, j](const Node<T>& self) {
                                      an->ensure_grad();
                                      for (std::size_t i = 0; i < m; ++i) {
                                          an->grad[i * n + j] += self.grad[i];
                                      }
                                  });
}

// Element i of the flattened tensor, as a [1] tensor.
template <typename T>
Tensor<T> element(const Tensor<T>& a, std::size_t i) {
    if (i >= a.size()) {
        throw ShapeError("element", a.shape(), Shape{i + 1});
    }
    auto an = a.node();
    return detail::make_result<T>(Shape{1}, std::vector<T>{a[i]}, a.requires_grad(),
                                  [an, i](const Node<T>& self) { an->accumulate(i, self.grad[0]); });
}

// Row-wise select: row i from `a` where take_a[i], otherwise from `b`.
template <typename T>
Tensor<T> where_rows(const std::vector<std::uint8_t>& take_a, const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same("where_rows", a, b);
    detail::require_rank2("where_rows", a);
    if (take_a.size() != a.rows()) {
        throw ShapeError("where_rows", a.shape(), Shape{take_a.size()});
    }
    const std::size_t n = a.cols();
    std::vector<T> out(a.size());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const auto& src = take_a[i] ? a.node()->value : b.node()->value;
        std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(i * n), n,
                    out.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    auto an = a.node(), bn = b.node();
    return detail::make_result<T>(a.shape(), std::move(out), detail::any_requires_grad({&a, &b}),
                                  [an, bn, take_a, n](const Node<T>& self) {
                                      for (std::size_t i = 0; i < take_a.size(); ++i) {
                                          auto& dst = take_a[i] ? an : bn;
                                          if (!dst->requires_grad) {
                                              continue;
                                          }
                                          dst->ensure_grad();
                                          for (std::size_t j = 0; j < n; ++j) {
                                              dst->grad[i * n + j] += self.grad[i * n + j];
                                          }
                                      }
                                  });
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows", "no operands");
    }
    const std::size_t n = parts.front().rank() == 1 ? parts.front().size() : parts.front().cols();
    std::size_t rows = 0;
    bool needs = false;
    for (const auto& p : parts) {
        const std::size_t pc = p.rank() == 1 ? p.size() : p.cols();
        if (pc != n || p.rank() > 2) {
            throw ShapeError("concat_rows", parts.front().shape(), p.shape());
        }
        rows += p.rank() == 1 ? 1 : p.rows();
        needs = needs || p.requires_grad();
    }
    std::vector<T> out;
    out.reserve(rows * n);
    std::vector<std::shared_ptr<Node<T>>> nodes;
    for (const auto& p : parts) {
        out.insert(out.end(), p.values().begin(), p.values().end());
        nodes.push_back(p.node());
    }
    return detail::make_result<T>(Shape{rows, n}, std::move(out), needs,
                                  [nodes = std::move(nodes)](const Node<T>& self) {
                                      std::size_t offset = 0;
                                      for (const auto& p : nodes) {
                                          if (p->requires_grad) {
                                              p->ensure_grad();
                                              for (std::size_t i = 0; i < p->value.size(); ++i) {
                                                  p->grad[i] += self.grad[offset + i];
                                              }
                                          }
                                          offset += p->value.size();
                                      }
                                  });
}

// ---------------------------------------------------------------------------
// Grouped multi-head attention
//
// Each group is a set of rows that attend to each other: every member is a
// query, members with a set key flag are keys. Masked keys receive exactly zero
// weight. A row that is a query in several groups receives the mean of its
// per-group outputs; a row in no group receives zero.

struct AttentionGroup {
    std::vector<std::size_t> members;
    std::vector<std::uint8_t> key_mask;  // empty: every member is a key
};

struct AttentionLayout {
    std::size_t rows = 0;
    std::vector<AttentionGroup> groups;
};

// Head-averaged softmax row of one query, recorded for every group containing it.
struct AttentionProbe {
    std::size_t query_row = 0;
    std::vector<std::size_t> groups;
    std::vector<std::vector<double>> weights;  // parallel to groups; indexed like members
};

template <typename T>
Tensor<T> grouped_attention(const Tensor<T>& qkv, std::size_t heads, const AttentionLayout& layout,
                            AttentionProbe* probe = nullptr) {
    detail::require_rank2("grouped_attention", qkv);
    if (qkv.cols() % 3 != 0 || heads == 0 || (qkv.cols() / 3) % heads != 0) {
        throw ShapeError("grouped_attention", "qkv width " + std::to_string(qkv.cols()) +
                                                  " incompatible with " + std::to_string(heads) +
                                                  " heads");
    }
    if (layout.rows != qkv.rows()) {
        throw ShapeError("grouped_attention", qkv.shape(), Shape{layout.rows, qkv.cols()});
    }
    const std::size_t n = qkv.rows(), width = qkv.cols(), dim = width / 3, dh = dim / heads;
    const T scale_factor = T(1) / std::sqrt(static_cast<T>(dh));
    const auto& x = qkv.node()->value;

    std::vector<T> uses(n, T(0));
    for (const auto& g : layout.groups) {
        if (!g.key_mask.empty() && g.key_mask.size() != g.members.size()) {
            throw ShapeError("grouped_attention", "key mask length does not match group size");
        }
        bool any_key = g.key_mask.empty() && !g.members.empty();
        for (std::uint8_t k : g.key_mask) {
            any_key = any_key || k != 0;
        }
        if (!g.members.empty() && !any_key) {
            throw ShapeError("grouped_attention", "empty key set for a live query group");
        }
        for (std::size_t r : g.members) {
            if (r >= n) {
                throw ShapeError("grouped_attention", "member row out of range");
            }
            uses[r] += T(1);
        }
    }

    std::vector<T> out(n * dim, T(0));
    // Softmax weights per (group, head), kept for the backward pass.
    auto weights = std::make_shared<std::vector<RowMatrix<T>>>();
    weights->reserve(layout.groups.size() * heads);
    if (probe != nullptr) {
        probe->groups.clear();
        probe->weights.clear();
    }
    RowMatrix<T> q, k, v, o;
    for (std::size_t gi = 0; gi < layout.groups.size(); ++gi) {
        const auto& g = layout.groups[gi];
        const auto m = static_cast<Eigen::Index>(g.members.size());
        q.resize(m, static_cast<Eigen::Index>(dh));
        k.resize(m, static_cast<Eigen::Index>(dh));
        v.resize(m, static_cast<Eigen::Index>(dh));
        std::ptrdiff_t probe_pos = -1;
        for (Eigen::Index i = 0; i < m; ++i) {
            if (probe != nullptr && g.members[static_cast<std::size_t>(i)] == probe->query_row) {
                probe_pos = i;
            }
        }
        std::vector<double> probe_row;
        if (probe_pos >= 0) {
            probe_row.assign(static_cast<std::size_t>(m), 0.0);
        }
        for (std::size_t h = 0; h < heads; ++h) {
            for (Eigen::Index i = 0; i < m; ++i) {
                const T* row = x.data() + g.members[static_cast<std::size_t>(i)] * width + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                    q(i, static_cast<Eigen::Index>(c)) = row[c];
                    k(i, static_cast<Eigen::Index>(c)) = row[dim + c];
                    v(i, static_cast<Eigen::Index>(c)) = row[2 * dim + c];
                }
            }
            RowMatrix<T> p = (q * k.transpose()) * scale_factor;
            for (Eigen::Index i = 0; i < m; ++i) {
                T mx = -std::numeric_limits<T>::infinity();
                for (Eigen::Index j = 0; j < m; ++j) {
                    if (g.key_mask.empty() || g.key_mask[static_cast<std::size_t>(j)]) {
                        mx = std::max(mx, p(i, j));
                    }
                }
                T total = 0;
                for (Eigen::Index j = 0; j < m; ++j) {
                    if (g.key_mask.empty() || g.key_mask[static_cast<std::size_t>(j)]) {
                        p(i, j) = std::exp(p(i, j) - mx);
                        total += p(i, j);
                    } else {
                        p(i, j) = T(0);
                    }
                }
                p.row(i) /= total;
            }
            o.noalias() = p * v;
            FlopCounter::local().add(4ULL * static_cast<std::uint64_t>(m * m) * dh);
            for (Eigen::Index i = 0; i < m; ++i) {
                const std::size_t r = g.members[static_cast<std::size_t>(i)];
                T* dst = out.data() + r * dim + h * dh;
                for (std::size_t c = 0; c < dh; ++c) {
                    dst[c] += o(i, static_cast<Eigen::Index>(c)) / uses[r];
                }
            }
            if (probe_pos >= 0) {
                for (Eigen::Index j = 0; j < m; ++j) {
                    probe_row[static_cast<std::size_t>(j)] +=
                        static_cast<double>(p(probe_pos, j)) / static_cast<double>(heads);
                }
            }
            weights->push_back(std::move(p));
        }
        if (probe_pos >= 0) {
            probe->groups.push_back(gi);
            probe->weights.push_back(std::move(probe_row));
        }
    }

    auto xn = qkv.node();
    return detail::make_result<T>(
        Shape{n, dim}, std::move(out), qkv.requires_grad(),
        [xn, layout, weights, uses = std::move(uses), heads, dim, dh, width,
         scale_factor](const Node<T>& self) {
            xn->ensure_grad();
            const auto& xv = xn->value;
            auto& dx = xn->grad;
            RowMatrix<T> q, k, v, dout, dp, ds;
            std::size_t wi = 0;
            for (const auto& g : layout.groups) {
                const auto m = static_cast<Eigen::Index>(g.members.size());
                q.resize(m, static_cast<Eigen::Index>(dh));
                k.resize(m, static_cast<Eigen::Index>(dh));
                v.resize(m, static_cast<Eigen::Index>(dh));
                dout.resize(m, static_cast<Eigen::Index>(dh));
                for (std::size_t h = 0; h < heads; ++h) {
                    const RowMatrix<T>& p = (*weights)[wi++];
                    for (Eigen::Index i = 0; i < m; ++i) {
                        const std::size_t r = g.members[static_cast<std::size_t>(i)];
                        const T* row = xv.data() + r * width + h * dh;
                        const T* go = self.grad.data() + r * dim + h * dh;
                        for (std::size_t c = 0; c < dh; ++c) {
                            const auto cc = static_cast<Eigen::Index>(c);
                            q(i, cc) = row[c];
                            k(i, cc) = row[dim + c];
                            v(i, cc) = row[2 * dim + c];
                            dout(i, cc) = go[c] / uses[r];
                        }
                    }
                    dp.noalias() = dout * v.transpose();
                    ds.resize(m, m);
                    for (Eigen::Index i = 0; i < m; ++i) {
                        const T dot = dp.row(i).dot(p.row(i));
                        for (Eigen::Index j = 0; j < m; ++j) {
                            ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
                        }
                    }
                    const RowMatrix<T> dq = ds * k;
                    const RowMatrix<T> dk = ds.transpose() * q;
                    const RowMatrix<T> dv = p.transpose() * dout;
                    for (Eigen::Index i = 0; i < m; ++i) {
                        T* dst = dx.data() + g.members[static_cast<std::size_t>(i)] * width + h * dh;
                        for (std::size_t c = 0; c < dh; ++c) {
                            const auto cc = static_cast<Eigen::Index>(c);
                            dst[c] += dq(i, cc);
                            dst[dim + c] += dk(i, cc);
                            dst[2 * dim + c] += dv(i, cc);
                        }
                    }
                }
            }
        });
}

}  // namespace haltingvt
