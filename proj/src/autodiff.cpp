#include "davpt/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "davpt/error.hpp"
#include "kernels.hpp"

namespace davpt {

// ---------------------------------------------------------------------------
// Tape

Var Tape::constant(Tensor value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::input(Tensor value, bool requires_grad) {
  Node node;
  node.value = std::move(value);
  node.needs_grad = requires_grad;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::parameter(Tensor& param) {
  Node node;
  node.value = param;
  node.value.set_requires_grad(false);
  node.value.clear_grad();
  node.needs_grad = param.requires_grad();
  node.bound = &param;
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::vector<std::size_t> inputs, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) throw ContractError("tape input refers to a node that does not exist yet");
    node.needs_grad = node.needs_grad || nodes_[in].needs_grad;
  }
  node.inputs = std::move(inputs);
  if (node.needs_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

std::span<double> Tape::in_grad(std::size_t id) {
  Node& node = nodes_[id];
  if (!node.needs_grad) return {};
  if (node.grad.empty()) node.grad.assign(node.value.numel(), 0.0);
  return node.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw ContractError("backward called with a value from another tape");
  if (consumed_) throw ContractError("tape already differentiated; record a fresh forward pass");
  const Tensor& lv = nodes_[loss.id].value;
  if (lv.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_string(lv.shape()));
  }
  consumed_ = true;
  if (!nodes_[loss.id].needs_grad) return;
  nodes_[loss.id].grad.assign(1, 1.0);
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (!node.needs_grad || node.grad.empty() || !node.backward) continue;
    node.backward(*this, i);
  }
  for (Node& node : nodes_) {
    if (node.bound != nullptr && node.bound->requires_grad() && !node.grad.empty()) {
      node.bound->accumulate_grad(node.grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Operations

namespace {

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) throw ContractError("operands recorded on different tapes");
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.numel() != b.numel() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shapes " + shape_string(a.shape()) + " and " +
                         shape_string(b.shape()) + " differ");
  }
}

Shape matrix_shape(std::size_t r, std::size_t c) { return Shape{r, c}; }

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  if (bv.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  Tensor out(matrix_shape(m, n));
  kernels::gemm_nn(m, k, n, av.values().data(), bv.values().data(), out.values().data());
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, m, k, n](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    if (auto ga = tp.in_grad(a); !ga.empty()) {
      kernels::gemm_nt(m, n, k, g.data(), tp.node_value(b).values().data(), ga.data());
    }
    if (auto gb = tp.in_grad(b); !gb.empty()) {
      kernels::gemm_tn(m, k, n, tp.node_value(a).values().data(), g.data(), gb.data());
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
  if (bv.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree for " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()) + "^T");
  }
  Tensor out(matrix_shape(m, n));
  kernels::gemm_nt(m, k, n, av.values().data(), bv.values().data(), out.values().data());
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id, m, k, n](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    if (auto ga = tp.in_grad(a); !ga.empty()) {
      kernels::gemm_nn(m, n, k, g.data(), tp.node_value(b).values().data(), ga.data());
    }
    if (auto gb = tp.in_grad(b); !gb.empty()) {
      kernels::gemm_tn(m, n, k, g.data(), tp.node_value(a).values().data(), gb.data());
    }
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "add");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    for (std::size_t in : {a, b}) {
      if (auto gi = tp.in_grad(in); !gi.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "sub");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    if (auto ga = tp.in_grad(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gb = tp.in_grad(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_same_shape(av, bv, "mul");
  Tensor out = av;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& avv = tp.node_value(a);
    const auto& bvv = tp.node_value(b);
    if (auto ga = tp.in_grad(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bvv[i];
    if (auto gb = tp.in_grad(b); !gb.empty())
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * avv[i];
  });
}

Var scale(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.clear_grad();
  for (double& v : out.values()) v *= s;
  return t.record(std::move(out), {a.id}, [a = a.id, s](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += s * g[i];
  });
}

Var add_scalar(Var a, double s) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (double& v : out.values()) v += s;
  return t.record(std::move(out), {a.id}, [a = a.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var add_row(Var a, Var row) {
  Tape& t = tape_of(a, row);
  const Tensor& av = t.value(a);
  const Tensor& rv = t.value(row);
  const std::size_t r = av.rows(), c = av.cols();
  if (rv.numel() != c) {
    throw DimensionError("add_row: row " + shape_string(rv.shape()) + " does not broadcast over " +
                         shape_string(av.shape()));
  }
  Tensor out = av;
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
  return t.record(std::move(out), {a.id, row.id}, [a = a.id, rw = row.id, r, c](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    if (auto ga = tp.in_grad(a); !ga.empty())
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    if (auto gr = tp.in_grad(rw); !gr.empty())
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) gr[j] += g[i * c + j];
  });
}

Var exp(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (double& v : out.values()) v = std::exp(v);
  return t.record(std::move(out), {a.id}, [a = a.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& y = tp.node_value(self);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i];
  });
}

Var log(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (double& v : out.values()) {
    if (!(v > 0.0)) throw NumericError("log of non-positive value " + std::to_string(v));
    v = std::log(v);
  }
  return t.record(std::move(out), {a.id}, [a = a.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& x = tp.node_value(a);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
  });
}

Var gelu(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  for (double& v : out.values()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  return t.record(std::move(out), {a.id}, [a = a.id](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& x = tp.node_value(a);
    auto ga = tp.in_grad(a);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double xi = x[i];
      const double cdf = 0.5 * (1.0 + std::erf(xi * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * xi * xi);
      ga[i] += g[i] * (cdf + xi * pdf);
    }
  });
}

Var sum(Var a) {
  Tape& t = *a.tape;
  double s = 0.0;
  for (double v : t.value(a).values()) s += v;
  return t.record(Tensor::scalar(s), {a.id}, [a = a.id](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    for (double& gi : tp.in_grad(a)) gi += g;
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.tape->value(a).numel());
  return scale(sum(a), 1.0 / n);
}

Var dot(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  if (av.numel() != bv.numel()) {
    throw DimensionError("dot: sizes " + shape_string(av.shape()) + " and " + shape_string(bv.shape()) + " differ");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += av[i] * bv[i];
  return t.record(Tensor::scalar(s), {a.id, b.id}, [a = a.id, b = b.id](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    const auto& avv = tp.node_value(a);
    const auto& bvv = tp.node_value(b);
    if (auto ga = tp.in_grad(a); !ga.empty())
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * bvv[i];
    if (auto gb = tp.in_grad(b); !gb.empty())
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += g * avv[i];
  });
}

Var weighted_sum(Var a, std::vector<double> weights) {
  Tape& t = *a.tape;
  const Tensor& av = t.value(a);
  if (weights.size() != av.numel()) {
    throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor " +
                         shape_string(av.shape()));
  }
  double s = 0.0;
  for (std::size_t i = 0; i < av.numel(); ++i) s += weights[i] * av[i];
  return t.record(Tensor::scalar(s), {a.id}, [a = a.id, w = std::move(weights)](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g * w[i];
  });
}

Var softmax_rows(Var a) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.clear_grad();
  const std::size_t r = out.rows(), c = out.cols();
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return t.record(std::move(out), {a.id}, [a = a.id, r, c](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& y = tp.node_value(self);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < r; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < c; ++j) s += g[i * c + j] * y[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += y[i * c + j] * (g[i * c + j] - s);
    }
  });
}

Var l2_normalize_rows(Var a, bool* degenerate) {
  Tape& t = *a.tape;
  Tensor out = t.value(a);
  out.clear_grad();
  const std::size_t r = out.rows(), c = out.cols();
  std::vector<double> norms(r);
  bool any_degenerate = false;
  for (std::size_t i = 0; i < r; ++i) {
    auto row = out.row(i);
    double ss = 0.0;
    for (double v : row) ss += v * v;
    const double n = std::sqrt(ss);
    if (n < kNormEpsilon) {
      norms[i] = 0.0;
      any_degenerate = true;
      continue;
    }
    norms[i] = n;
    for (double& v : row) v /= n;
  }
  if (degenerate) *degenerate = any_degenerate;
  return t.record(std::move(out), {a.id}, [a = a.id, r, c, norms = std::move(norms)](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& y = tp.node_value(self);
    auto ga = tp.in_grad(a);
    for (std::size_t i = 0; i < r; ++i) {
      if (norms[i] == 0.0) {
        for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[i * c + j];
        continue;
      }
      double yg = 0.0;
      for (std::size_t j = 0; j < c; ++j) yg += y[i * c + j] * g[i * c + j];
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += (g[i * c + j] - y[i * c + j] * yg) / norms[i];
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  const Tensor& xv = t.value(x);
  const std::size_t r = xv.rows(), c = xv.cols();
  if (t.value(gain).numel() != c || t.value(bias).numel() != c) {
    throw DimensionError("layer_norm: gain/bias " + shape_string(t.value(gain).shape()) + "/" +
                         shape_string(t.value(bias).shape()) + " for input " + shape_string(xv.shape()));
  }
  const auto& gv = t.value(gain);
  const auto& bv = t.value(bias);
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.numel());
  std::vector<double> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    const double* xi = xv.values().data() + i * c;
    double mu = 0.0;
    for (std::size_t j = 0; j < c; ++j) mu += xi[j];
    mu /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(c);
    const double is = 1.0 / std::sqrt(var + kLayerNormEpsilon);
    inv_std[i] = is;
    for (std::size_t j = 0; j < c; ++j) {
      const double h = (xi[j] - mu) * is;
      xhat[i * c + j] = h;
      out[i * c + j] = h * gv[j] + bv[j];
    }
  }
  return t.record(std::move(out), {x.id, gain.id, bias.id},
                  [x = x.id, gn = gain.id, bs = bias.id, r, c, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](Tape& tp, std::size_t self) {
                    auto g = tp.out_grad(self);
                    const auto& gv2 = tp.node_value(gn);
                    if (auto gg = tp.in_grad(gn); !gg.empty())
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gg[j] += g[i * c + j] * xhat[i * c + j];
                    if (auto gb = tp.in_grad(bs); !gb.empty())
                      for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gb[j] += g[i * c + j];
                    if (auto gx = tp.in_grad(x); !gx.empty()) {
                      const double inv_c = 1.0 / static_cast<double>(c);
                      for (std::size_t i = 0; i < r; ++i) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t j = 0; j < c; ++j) {
                          const double dh = g[i * c + j] * gv2[j];
                          m1 += dh;
                          m2 += dh * xhat[i * c + j];
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for (std::size_t j = 0; j < c; ++j) {
                          const double dh = g[i * c + j] * gv2[j];
                          gx[i * c + j] += inv_std[i] * (dh - m1 - xhat[i * c + j] * m2);
                        }
                      }
                    }
                  });
}

Var cross_entropy(Var logits, std::span<const std::size_t> labels) {
  Tape& t = *logits.tape;
  const Tensor& lv = t.value(logits);
  const std::size_t r = lv.rows(), c = lv.cols();
  if (labels.size() != r) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_string(lv.shape()));
  }
  std::vector<double> probs(lv.numel());
  double total = 0.0;
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] >= c) throw ContractError("cross_entropy: label " + std::to_string(labels[i]) + " out of range");
    const double* z = lv.values().data() + i * c;
    const double mx = *std::max_element(z, z + c);
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      probs[i * c + j] = std::exp(z[j] - mx);
      s += probs[i * c + j];
    }
    for (std::size_t j = 0; j < c; ++j) probs[i * c + j] /= s;
    total += (mx + std::log(s)) - z[labels[i]];
  }
  total /= static_cast<double>(r);
  std::vector<std::size_t> lab(labels.begin(), labels.end());
  return t.record(Tensor::scalar(total), {logits.id},
                  [l = logits.id, r, c, probs = std::move(probs), lab = std::move(lab)](Tape& tp, std::size_t self) {
                    const double g = tp.out_grad(self)[0] / static_cast<double>(r);
                    auto gl = tp.in_grad(l);
                    for (std::size_t i = 0; i < r; ++i)
                      for (std::size_t j = 0; j < c; ++j)
                        gl[i * c + j] += g * (probs[i * c + j] - (j == lab[i] ? 1.0 : 0.0));
                  });
}

Var masked_lse0_plus_rows(Var z, std::vector<unsigned char> mask) {
  Tape& t = *z.tape;
  const Tensor& zv = t.value(z);
  const std::size_t r = zv.rows(), c = zv.cols();
  if (mask.size() != zv.numel()) {
    throw DimensionError("masked_lse0_plus_rows: mask of size " + std::to_string(mask.size()) + " for " +
                         shape_string(zv.shape()));
  }
  Tensor out({r, 1});
  for (std::size_t i = 0; i < r; ++i) {
    double m = 0.0;
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) m = std::max(m, zv[i * c + j]);
    double s = std::exp(-m);
    for (std::size_t j = 0; j < c; ++j)
      if (mask[i * c + j]) s += std::exp(zv[i * c + j] - m);
    out[i] = m + std::log(s);
  }
  return t.record(std::move(out), {z.id}, [zi = z.id, r, c, mask = std::move(mask)](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    const auto& y = tp.node_value(self);
    const auto& zv2 = tp.node_value(zi);
    auto gz = tp.in_grad(zi);
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j)
        if (mask[i * c + j]) gz[i * c + j] += g[i] * std::exp(zv2[i * c + j] - y[i]);
  });
}

Var gather_rows(std::span<const RowRef> refs) {
  if (refs.empty()) throw ContractError("gather_rows: no rows requested");
  Tape& t = *refs.front().source.tape;
  const std::size_t c = t.value(refs.front().source).cols();
  std::vector<std::size_t> inputs;
  std::vector<std::pair<std::size_t, std::size_t>> plan;
  plan.reserve(refs.size());
  Tensor out({refs.size(), c});
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const RowRef& ref = refs[i];
    if (ref.source.tape != &t) throw ContractError("gather_rows: rows from different tapes");
    const Tensor& sv = t.value(ref.source);
    if (sv.cols() != c) {
      throw DimensionError("gather_rows: width " + std::to_string(sv.cols()) + " vs " + std::to_string(c));
    }
    if (ref.row >= sv.rows()) {
      throw DimensionError("gather_rows: row " + std::to_string(ref.row) + " of " + shape_string(sv.shape()));
    }
    std::copy_n(sv.values().data() + ref.row * c, c, out.values().data() + i * c);
    if (std::find(inputs.begin(), inputs.end(), ref.source.id) == inputs.end()) inputs.push_back(ref.source.id);
    plan.emplace_back(ref.source.id, ref.row);
  }
  return t.record(std::move(out), std::move(inputs), [plan = std::move(plan), c](Tape& tp, std::size_t self) {
    auto g = tp.out_grad(self);
    for (std::size_t i = 0; i < plan.size(); ++i) {
      auto gs = tp.in_grad(plan[i].first);
      if (gs.empty()) continue;
      double* dst = gs.data() + plan[i].second * c;
      const double* src = g.data() + i * c;
      for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
    }
  });
}

Var slice_rows(Var a, std::size_t begin, std::size_t end) {
  const Tensor& av = a.tape->value(a);
  if (begin >= end || end > av.rows()) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                         shape_string(av.shape()));
  }
  std::vector<RowRef> refs;
  refs.reserve(end - begin);
  for (std::size_t i = begin; i < end; ++i) refs.push_back({a, i});
  return gather_rows(refs);
}

Var attention(Var q, Var k, Var v, std::size_t batch, std::size_t heads, std::vector<double>* probs) {
  Tape& t = tape_of(q, k);
  tape_of(q, v);
  const Tensor& qv = t.value(q);
  const Tensor& kv = t.value(k);
  const Tensor& vv = t.value(v);
  const std::size_t rows = qv.rows(), dim = qv.cols();
  if (batch == 0 || heads == 0 || rows % batch != 0 || dim % heads != 0) {
    throw DimensionError("attention: " + std::to_string(rows) + " rows x " + std::to_string(dim) +
                         " cols cannot split into batch " + std::to_string(batch) + " / heads " +
                         std::to_string(heads));
  }
  if (kv.rows() != rows || vv.rows() != rows || kv.cols() != dim || vv.cols() != dim) {
    throw DimensionError("attention: q " + shape_string(qv.shape()) + ", k " + shape_string(kv.shape()) + ", v " +
                         shape_string(vv.shape()) + " disagree");
  }
  const std::size_t seq = rows / batch, hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  auto maps = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
  Tensor out({rows, dim});
  const double* Q = qv.values().data();
  const double* K = kv.values().data();
  const double* V = vv.values().data();
  double* O = out.values().data();
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      double* A = maps->data() + (b * heads + h) * seq * seq;
      const std::size_t off = h * hd;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qi = Q + (b * seq + i) * dim + off;
        double* ai = A + i * seq;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < seq; ++j) {
          const double* kj = K + (b * seq + j) * dim + off;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          ai[j] = s * inv_sqrt;
          mx = std::max(mx, ai[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < seq; ++j) {
          ai[j] = std::exp(ai[j] - mx);
          z += ai[j];
        }
        double* oi = O + (b * seq + i) * dim + off;
        for (std::size_t j = 0; j < seq; ++j) {
          ai[j] /= z;
          const double* vj = V + (b * seq + j) * dim + off;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += ai[j] * vj[c];
        }
      }
    }
  }
  if (probs) *probs = *maps;
  return t.record(
      std::move(out), {q.id, k.id, v.id},
      [qi = q.id, ki = k.id, vi = v.id, batch, heads, seq, dim, hd, inv_sqrt, maps](Tape& tp, std::size_t self) {
        auto g = tp.out_grad(self);
        const double* Qv = tp.node_value(qi).values().data();
        const double* Kv = tp.node_value(ki).values().data();
        const double* Vv = tp.node_value(vi).values().data();
        auto gq = tp.in_grad(qi);
        auto gk = tp.in_grad(ki);
        auto gv = tp.in_grad(vi);
        std::vector<double> ds(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const double* A = maps->data() + (b * heads + h) * seq * seq;
            const std::size_t off = h * hd;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* gi = g.data() + (b * seq + i) * dim + off;
              const double* ai = A + i * seq;
              double dot_sum = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* vj = Vv + (b * seq + j) * dim + off;
                double da = 0.0;
                for (std::size_t c = 0; c < hd; ++c) da += gi[c] * vj[c];
                ds[j] = da;
                dot_sum += da * ai[j];
                if (!gv.empty()) {
                  double* gvj = gv.data() + (b * seq + j) * dim + off;
                  for (std::size_t c = 0; c < hd; ++c) gvj[c] += ai[j] * gi[c];
                }
              }
              for (std::size_t j = 0; j < seq; ++j) ds[j] = ai[j] * (ds[j] - dot_sum) * inv_sqrt;
              const double* qrow = Qv + (b * seq + i) * dim + off;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* krow = Kv + (b * seq + j) * dim + off;
                if (!gq.empty()) {
                  double* gqi = gq.data() + (b * seq + i) * dim + off;
                  for (std::size_t c = 0; c < hd; ++c) gqi[c] += ds[j] * krow[c];
                }
                if (!gk.empty()) {
                  double* gkj = gk.data() + (b * seq + j) * dim + off;
                  for (std::size_t c = 0; c < hd; ++c) gkj[c] += ds[j] * qrow[c];
                }
              }
            }
          }
        }
      });
}

}  // namespace davpt
