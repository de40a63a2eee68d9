#include "exitdepth/autograd.hpp"

#include <algorithm>
#include <cmath>

#include "exitdepth/errors.hpp"

namespace exitdepth {

// ---------------------------------------------------------------------------
// ParameterStore

Parameter& ParameterStore::add(std::string name, Tensor value) {
  if (index_.contains(name)) throw UsageError("duplicate parameter " + name);
  auto p = std::make_unique<Parameter>();
  p->name = name;
  p->grad = Tensor::zeros_like(value);
  p->value = std::move(value);
  index_.emplace(std::move(name), params_.size());
  params_.push_back(std::move(p));
  return *params_.back();
}

Parameter& ParameterStore::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return *params_[it->second];
}

const Parameter& ParameterStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw UsageError("unknown parameter " + name);
  return *params_[it->second];
}

std::size_t ParameterStore::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& p : params_) n += p->value.size();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p->grad.fill(0.0);
}

double ParameterStore::grad_norm() const {
  double sq = 0.0;
  for (const auto& p : params_) {
    for (double g : p->grad.values()) sq += g * g;
  }
  return std::sqrt(sq);
}

ParameterStore::ParameterStore(const ParameterStore& other) : index_(other.index_) {
  params_.reserve(other.params_.size());
  for (const auto& p : other.params_) params_.push_back(std::make_unique<Parameter>(*p));
}

ParameterStore& ParameterStore::operator=(const ParameterStore& other) {
  if (this != &other) {
    ParameterStore copy(other);
    *this = std::move(copy);
  }
  return *this;
}

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const { return tape_->value(id_); }

Var Tape::push(const char* op, Tensor value, bool requires_grad, BackwardFn fn) {
  if (!value.all_finite()) throw NumericError(std::string("non-finite value produced by ") + op);
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(fn);
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::constant(Tensor value) { return push("constant", std::move(value), false, {}); }

Var Tape::param(Parameter& p) {
  if (auto it = param_nodes_.find(&p); it != param_nodes_.end()) return Var(this, it->second);
  Var v = push(p.name.c_str(), p.value, true, {});
  nodes_.back().param = &p;
  param_nodes_.emplace(&p, v.id());
  return v;
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw UsageError(std::string(op) + ": operands on different tapes");
    rg = rg || requires_grad(in.id());
  }
  return push(op, std::move(value), rg, std::move(fn));
}

Var Tape::record(const char* op, Tensor value, const std::vector<Var>& inputs, BackwardFn fn) {
  bool rg = false;
  for (const Var& in : inputs) {
    if (&in.tape() != this) throw UsageError(std::string(op) + ": operands on different tapes");
    rg = rg || requires_grad(in.id());
  }
  return push(op, std::move(value), rg, std::move(fn));
}

Tensor& Tape::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() != n.value.size() || n.grad.shape() != n.value.shape()) {
    n.grad = Tensor::zeros_like(n.value);
  }
  return n.grad;
}

void Tape::backward(const Var& loss) {
  if (&loss.tape() != this) throw UsageError("backward: loss is on a different tape");
  if (consumed_) throw UsageError("backward called twice on the same tape; re-run the forward");
  if (loss.value().size() != 1) {
    throw UsageError("backward: loss must be scalar, got " + shape_string(loss.value().shape()));
  }
  consumed_ = true;
  if (!requires_grad(loss.id())) return;
  grad(loss.id()).fill(1.0);
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || n.grad.size() == 0) continue;
    if (n.param != nullptr) {
      auto dst = n.param->grad.values();
      auto src = n.grad.values();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
    } else if (n.backward) {
      n.backward(*this, n.grad);
    }
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

bool needs(Tape& t, const Var& v) { return t.requires_grad(v.id()); }

void accumulate(Tensor& dst, const Tensor& src, double factor = 1.0) {
  auto d = dst.values();
  auto s = src.values();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += factor * s[i];
}

Tensor map_values(const Tensor& x, double (*f)(double)) {
  Tensor out = x;
  for (double& v : out.values()) v = f(v);
  return out;
}

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  require(av.rank() == 2 && bv.rank() == 2 && av.cols() == bv.rows(),
          "matmul " + shape_string(av.shape()) + " x " + shape_string(bv.shape()));
  Tensor out = kernels::matmul(av, bv);
  const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
  return a.tape().record("matmul", std::move(out), {a, b},
                         [a, b, m, k, n](Tape& t, const Tensor& g) {
                           const Tensor& av = t.value(a.id());
                           const Tensor& bv = t.value(b.id());
                           if (needs(t, a)) {
                             // dA = G B^T
                             Tensor& ga = t.grad(a.id());
                             for (std::size_t i = 0; i < m; ++i) {
                               for (std::size_t p = 0; p < k; ++p) {
                                 double s = 0.0;
                                 const double* grow = g.data() + i * n;
                                 const double* brow = bv.data() + p * n;
                                 for (std::size_t j = 0; j < n; ++j) s += grow[j] * brow[j];
                                 ga(i, p) += s;
                               }
                             }
                           }
                           if (needs(t, b)) {
                             // dB = A^T G
                             Tensor& gb = t.grad(b.id());
                             for (std::size_t i = 0; i < m; ++i) {
                               const double* grow = g.data() + i * n;
                               for (std::size_t p = 0; p < k; ++p) {
                                 const double aval = av(i, p);
                                 double* gbrow = gb.data() + p * n;
                                 for (std::size_t j = 0; j < n; ++j) gbrow[j] += aval * grow[j];
                               }
                             }
                           }
                         });
}

Var add(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "add shape mismatch " +
                                               shape_string(a.value().shape()) + " vs " +
                                               shape_string(b.value().shape()));
  Tensor out = a.value();
  accumulate(out, b.value());
  return a.tape().record("add", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (needs(t, a)) accumulate(t.grad(a.id()), g);
    if (needs(t, b)) accumulate(t.grad(b.id()), g);
  });
}

Var sub(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "sub shape mismatch");
  Tensor out = a.value();
  accumulate(out, b.value(), -1.0);
  return a.tape().record("sub", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (needs(t, a)) accumulate(t.grad(a.id()), g);
    if (needs(t, b)) accumulate(t.grad(b.id()), g, -1.0);
  });
}

Var mul(const Var& a, const Var& b) {
  require(a.value().same_shape(b.value()), "mul shape mismatch");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return a.tape().record("mul", std::move(out), {a, b}, [a, b](Tape& t, const Tensor& g) {
    if (needs(t, a)) {
      Tensor& ga = t.grad(a.id());
      const Tensor& bv = t.value(b.id());
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (needs(t, b)) {
      Tensor& gb = t.grad(b.id());
      const Tensor& av = t.value(a.id());
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (double& v : out.values()) v *= factor;
  return x.tape().record("scale", std::move(out), {x}, [x, factor](Tape& t, const Tensor& g) {
    accumulate(t.grad(x.id()), g, factor);
  });
}

Var transpose(const Var& x) {
  const Tensor& xv = x.value();
  require(xv.rank() == 2, "transpose: matrix required");
  const std::size_t m = xv.rows(), n = xv.cols();
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out(j, i) = xv(i, j);
  }
  return x.tape().record("transpose", std::move(out), {x}, [x, m, n](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    for (std::size_t i = 0; i < m; ++i) {
      for (std::size_t j = 0; j < n; ++j) gx(i, j) += g(j, i);
    }
  });
}

Var add_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  require(bias.value().size() == xv.cols(), "add_bias: bias size " +
                                                std::to_string(bias.value().size()) +
                                                " vs cols " + std::to_string(xv.cols()));
  Tensor out = xv;
  const std::size_t n = xv.cols();
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    for (std::size_t c = 0; c < n; ++c) out.data()[r * n + c] += bias.value()[c];
  }
  return x.tape().record("add_bias", std::move(out), {x, bias},
                         [x, bias, n](Tape& t, const Tensor& g) {
                           if (needs(t, x)) accumulate(t.grad(x.id()), g);
                           if (needs(t, bias)) {
                             Tensor& gb = t.grad(bias.id());
                             const std::size_t rows = g.size() / n;
                             for (std::size_t r = 0; r < rows; ++r) {
                               for (std::size_t c = 0; c < n; ++c) gb[c] += g[r * n + c];
                             }
                           }
                         });
}

Var relu(const Var& x) {
  Tensor out = map_values(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.tape().record("relu", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const Tensor& xv = t.value(x.id());
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) gx[i] += g[i];
    }
  });
}

Var sigmoid(const Var& x) {
  Tensor out = map_values(x.value(), kernels::sigmoid);
  const int self = static_cast<int>(x.tape().size());
  return x.tape().record("sigmoid", std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const Tensor& y = t.value(self);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

Var log_sigmoid(const Var& x) {
  Tensor out = map_values(x.value(), kernels::log_sigmoid);
  return x.tape().record("log_sigmoid", std::move(out), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const Tensor& xv = t.value(x.id());
    // d/dz log sigmoid(z) = sigmoid(-z)
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * kernels::sigmoid(-xv[i]);
  });
}

Var softmax(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < xv.rows(); ++r) kernels::softmax_row(xv.row(r), out.row(r));
  const int self = static_cast<int>(x.tape().size());
  return x.tape().record("softmax", std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const Tensor& y = t.value(self);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < n; ++c) dot += g[r * n + c] * y[r * n + c];
      for (std::size_t c = 0; c < n; ++c) gx[r * n + c] += y[r * n + c] * (g[r * n + c] - dot);
    }
  });
}

Var log_softmax(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out = Tensor::zeros_like(xv);
  for (std::size_t r = 0; r < xv.rows(); ++r) kernels::log_softmax_row(xv.row(r), out.row(r));
  const int self = static_cast<int>(x.tape().size());
  return x.tape().record("log_softmax", std::move(out), {x}, [x, self](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const Tensor& y = t.value(self);
    const std::size_t n = y.cols();
    for (std::size_t r = 0; r < y.rows(); ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < n; ++c) gsum += g[r * n + c];
      for (std::size_t c = 0; c < n; ++c) {
        gx[r * n + c] += g[r * n + c] - std::exp(y[r * n + c]) * gsum;
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gain, const Var& bias, double eps) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  require(gain.value().size() == n && bias.value().size() == n, "layer_norm: gain/bias size");
  Tensor out = Tensor::zeros_like(xv);
  std::vector<kernels::LayerNormStats> stats(xv.rows());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    stats[r] = kernels::layer_norm_row(xv.row(r), gain.value().values(), bias.value().values(),
                                       eps, out.row(r));
  }
  return x.tape().record(
      "layer_norm", std::move(out), {x, gain, bias},
      [x, gain, bias, n, stats = std::move(stats)](Tape& t, const Tensor& g) {
        const Tensor& xv = t.value(x.id());
        const Tensor& gv = t.value(gain.id());
        const auto dn = static_cast<double>(n);
        std::vector<double> xhat(n), dxhat(n);
        for (std::size_t r = 0; r < xv.rows(); ++r) {
          const auto [mu, rstd] = stats[r];
          for (std::size_t c = 0; c < n; ++c) {
            xhat[c] = (xv(r, c) - mu) * rstd;
            dxhat[c] = g(r, c) * gv[c];
          }
          if (needs(t, gain)) {
            Tensor& gg = t.grad(gain.id());
            for (std::size_t c = 0; c < n; ++c) gg[c] += g(r, c) * xhat[c];
          }
          if (needs(t, bias)) {
            Tensor& gb = t.grad(bias.id());
            for (std::size_t c = 0; c < n; ++c) gb[c] += g(r, c);
          }
          if (needs(t, x)) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t c = 0; c < n; ++c) {
              s1 += dxhat[c];
              s2 += dxhat[c] * xhat[c];
            }
            Tensor& gx = t.grad(x.id());
            for (std::size_t c = 0; c < n; ++c) {
              gx(r, c) += rstd * (dxhat[c] - s1 / dn - xhat[c] * s2 / dn);
            }
          }
        }
      });
}

Var embedding_lookup(const Var& table, std::span<const int> ids) {
  const Tensor& tv = table.value();
  require(tv.rank() == 2, "embedding_lookup: table must be a matrix");
  const std::size_t d = tv.cols();
  Tensor out({ids.size(), d});
  std::vector<int> idv(ids.begin(), ids.end());
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= tv.rows()) {
      throw UsageError("embedding_lookup: id " + std::to_string(ids[r]) + " out of range");
    }
    auto src = tv.row(static_cast<std::size_t>(ids[r]));
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return table.tape().record("embedding_lookup", std::move(out), {table},
                             [table, idv = std::move(idv), d](Tape& t, const Tensor& g) {
                               Tensor& gt = t.grad(table.id());
                               for (std::size_t r = 0; r < idv.size(); ++r) {
                                 double* dst = gt.data() + static_cast<std::size_t>(idv[r]) * d;
                                 for (std::size_t c = 0; c < d; ++c) dst[c] += g[r * d + c];
                               }
                             });
}

Var pick(const Var& x, std::span<const int> cols) {
  const Tensor& xv = x.value();
  require(cols.size() == xv.rows(), "pick: one column index per row required");
  Tensor out({cols.size()});
  std::vector<int> cv(cols.begin(), cols.end());
  for (std::size_t r = 0; r < cols.size(); ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= xv.cols()) {
      throw UsageError("pick: column " + std::to_string(cols[r]) + " out of range");
    }
    out[r] = xv(r, static_cast<std::size_t>(cols[r]));
  }
  return x.tape().record("pick", std::move(out), {x}, [x, cv = std::move(cv)](Tape& t,
                                                                           const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    for (std::size_t r = 0; r < cv.size(); ++r) gx(r, static_cast<std::size_t>(cv[r])) += g[r];
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().values()) s += v;
  return x.tape().record("sum", Tensor::scalar(s), {x}, [x](Tape& t, const Tensor& g) {
    Tensor& gx = t.grad(x.id());
    const double gv = g[0];
    for (double& v : gx.values()) v += gv;
  });
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var cross_entropy(const Var& logits, std::span<const int> targets) {
  return scale(sum(pick(log_softmax(logits), targets)), -1.0);
}

Var cross_entropy(const Var& logits, int target) {
  const int ids[1] = {target};
  return cross_entropy(logits, std::span<const int>(ids));
}

Var scale_gradient(const Var& x, double gamma) {
  if (gamma < 0.0) throw UsageError("scale_gradient: gamma must be non-negative");
  return x.tape().record("scale_gradient", x.value(), {x}, [x, gamma](Tape& t, const Tensor& g) {
    if (gamma != 0.0) accumulate(t.grad(x.id()), g, gamma);
  });
}

Var stop_gradient(const Var& x) { return x.tape().constant(x.value()); }

Var select_rows(const std::vector<Var>& candidates, std::span<const int> choice) {
  require(!candidates.empty(), "select_rows: no candidates");
  const Tensor& first = candidates.front().value();
  for (const Var& c : candidates) require(c.value().same_shape(first), "select_rows: shape");
  require(choice.size() == first.rows(), "select_rows: one choice per row required");
  const std::size_t n = first.cols();
  Tensor out = Tensor::zeros_like(first);
  std::vector<int> ch(choice.begin(), choice.end());
  for (std::size_t r = 0; r < ch.size(); ++r) {
    if (ch[r] < 0 || static_cast<std::size_t>(ch[r]) >= candidates.size()) {
      throw UsageError("select_rows: choice out of range");
    }
    auto src = candidates[static_cast<std::size_t>(ch[r])].value().row(r);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return first.rows() == 0
             ? candidates.front()
             : candidates.front().tape().record(
                   "select_rows", std::move(out), candidates,
                   [candidates, ch = std::move(ch), n](Tape& t, const Tensor& g) {
                     for (std::size_t r = 0; r < ch.size(); ++r) {
                       const Var& src = candidates[static_cast<std::size_t>(ch[r])];
                       if (!needs(t, src)) continue;
                       Tensor& gs = t.grad(src.id());
                       for (std::size_t c = 0; c < n; ++c) gs(r, c) += g(r, c);
                     }
                   });
}

Var gather_rows(const Var& x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor out({rows.size(), n});
  std::vector<std::size_t> rv(rows.begin(), rows.end());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] >= xv.rows()) throw UsageError("gather_rows: row out of range");
    auto src = xv.row(rows[r]);
    std::copy(src.begin(), src.end(), out.row(r).begin());
  }
  return x.tape().record("gather_rows", std::move(out), {x},
                         [x, rv = std::move(rv), n](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad(x.id());
                           for (std::size_t r = 0; r < rv.size(); ++r) {
                             for (std::size_t c = 0; c < n; ++c) gx(rv[r], c) += g(r, c);
                           }
                         });
}

Var segment_mean(const Var& x, std::span<const std::pair<std::size_t, std::size_t>> segments) {
  const Tensor& xv = x.value();
  const std::size_t n = xv.cols();
  Tensor out({segments.size(), n});
  std::vector<std::pair<std::size_t, std::size_t>> segs(segments.begin(), segments.end());
  for (std::size_t s = 0; s < segs.size(); ++s) {
    const auto [b, e] = segs[s];
    if (b >= e || e > xv.rows()) throw UsageError("segment_mean: empty or out-of-range segment");
    for (std::size_t r = b; r < e; ++r) {
      for (std::size_t c = 0; c < n; ++c) out(s, c) += xv(r, c);
    }
    const double inv = 1.0 / static_cast<double>(e - b);
    for (std::size_t c = 0; c < n; ++c) out(s, c) *= inv;
  }
  return x.tape().record("segment_mean", std::move(out), {x},
                         [x, segs = std::move(segs), n](Tape& t, const Tensor& g) {
                           Tensor& gx = t.grad(x.id());
                           for (std::size_t s = 0; s < segs.size(); ++s) {
                             const auto [b, e] = segs[s];
                             const double inv = 1.0 / static_cast<double>(e - b);
                             for (std::size_t r = b; r < e; ++r) {
                               for (std::size_t c = 0; c < n; ++c) gx(r, c) += g(s, c) * inv;
                             }
                           }
                         });
}

Var concat_cols(const std::vector<Var>& parts) {
  require(!parts.empty(), "concat_cols: nothing to concatenate");
  const std::size_t rows = parts.front().value().rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (const Var& p : parts) {
    require(p.value().rows() == rows, "concat_cols: row count mismatch");
    widths.push_back(p.value().cols());
    total += p.value().cols();
  }
  Tensor out({rows, total});
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& pv = parts[k].value();
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < widths[k]; ++c) out(r, off + c) = pv.data()[r * widths[k] + c];
    }
    off += widths[k];
  }
  return parts.front().tape().record(
      "concat_cols", std::move(out), parts,
      [parts, widths = std::move(widths), rows, total](Tape& t, const Tensor& g) {
        std::size_t off = 0;
        for (std::size_t k = 0; k < parts.size(); ++k) {
          if (needs(t, parts[k])) {
            Tensor& gp = t.grad(parts[k].id());
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < widths[k]; ++c) {
                gp.data()[r * widths[k] + c] += g.data()[r * total + off + c];
              }
            }
          }
          off += widths[k];
        }
      });
}

Var attention(const Var& query, const Var& keys, const Var& vals, std::size_t heads,
              std::span<const AttentionSpan> spans) {
  const Tensor& qv = query.value();
  const Tensor& kv = keys.value();
  const Tensor& vv = vals.value();
  const std::size_t d = qv.cols();
  require(heads > 0 && d % heads == 0, "attention: width not divisible by heads");
  require(kv.cols() == d && vv.cols() == d && kv.rows() == vv.rows(),
          "attention: key/value shapes " + shape_string(kv.shape()) + " " +
              shape_string(vv.shape()));
  require(spans.size() == qv.rows(), "attention: one span per query row required");
  std::vector<AttentionSpan> sp(spans.begin(), spans.end());
  // Per-row offsets into the saved attention weights.
  std::vector<std::size_t> woff(sp.size() + 1, 0);
  for (std::size_t i = 0; i < sp.size(); ++i) {
    if (sp[i].begin >= sp[i].end || sp[i].end > kv.rows()) {
      throw UsageError("attention: empty or out-of-range key span");
    }
    woff[i + 1] = woff[i] + heads * (sp[i].end - sp[i].begin);
  }
  std::vector<double> weights(woff.back());
  Tensor out({qv.rows(), d});
  for (std::size_t i = 0; i < sp.size(); ++i) {
    kernels::attend_row(qv.row(i), kv.values(), vv.values(), sp[i].begin, sp[i].end, heads,
                        out.row(i), std::span<double>(weights.data() + woff[i], woff[i + 1] - woff[i]));
  }
  return query.tape().record(
      "attention", std::move(out), {query, keys, vals},
      [query, keys, vals, heads, d, sp = std::move(sp), woff = std::move(woff),
       weights = std::move(weights)](Tape& t, const Tensor& g) {
        const Tensor& qv = t.value(query.id());
        const Tensor& kv = t.value(keys.id());
        const Tensor& vv = t.value(vals.id());
        const std::size_t dh = d / heads;
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        const bool gq = needs(t, query), gk = needs(t, keys), gv = needs(t, vals);
        Tensor* gqt = gq ? &t.grad(query.id()) : nullptr;
        Tensor* gkt = gk ? &t.grad(keys.id()) : nullptr;
        Tensor* gvt = gv ? &t.grad(vals.id()) : nullptr;
        std::vector<double> dscore;
        for (std::size_t i = 0; i < sp.size(); ++i) {
          const std::size_t len = sp[i].end - sp[i].begin;
          dscore.assign(len, 0.0);
          for (std::size_t h = 0; h < heads; ++h) {
            const double* w = weights.data() + woff[i] + h * len;
            const std::size_t off = h * dh;
            const double* go = g.data() + i * d + off;
            double dot = 0.0;
            for (std::size_t j = 0; j < len; ++j) {
              const std::size_t kr = sp[i].begin + j;
              double da = 0.0;
              for (std::size_t c = 0; c < dh; ++c) da += go[c] * vv(kr, off + c);
              dscore[j] = da;
              dot += w[j] * da;
              if (gv) {
                for (std::size_t c = 0; c < dh; ++c) (*gvt)(kr, off + c) += w[j] * go[c];
              }
            }
            for (std::size_t j = 0; j < len; ++j) {
              const double ds = w[j] * (dscore[j] - dot) * sc;
              const std::size_t kr = sp[i].begin + j;
              if (gq) {
                for (std::size_t c = 0; c < dh; ++c) (*gqt)(i, off + c) += ds * kv(kr, off + c);
              }
              if (gk) {
                for (std::size_t c = 0; c < dh; ++c) (*gkt)(kr, off + c) += ds * qv(i, off + c);
              }
            }
          }
        }
      });
}

}  // namespace exitdepth
