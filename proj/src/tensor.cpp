#include "groundlab/tensor.hpp"

#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>

namespace groundlab::autodiff {

namespace detail {

bool corrupt_relu_backward = false;

struct Access {
  static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
  static Tensor wrap(std::shared_ptr<Node> n) { return Tensor(std::move(n)); }
};

}  // namespace detail

namespace {

using detail::Access;
using detail::Node;

std::atomic<std::uint64_t> g_next_node_id{1};

std::string shape_str(const Node& n) {
  return std::to_string(n.rows()) + "x" + std::to_string(n.cols());
}

std::shared_ptr<Node> make_node(std::size_t rows, std::size_t cols,
                                std::vector<std::shared_ptr<Node>> parents) {
  auto n = std::make_shared<Node>();
  n->shape = {rows, cols};
  n->value.resize(rows * cols);
  n->id = g_next_node_id.fetch_add(1, std::memory_order_relaxed);
  n->leaf = parents.empty();
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  n->parents = std::move(parents);
  return n;
}

const std::shared_ptr<Node>& checked(const Tensor& t, const char* op) {
  const auto& n = Access::node(t);
  if (!n) throw std::invalid_argument(std::string(op) + ": undefined tensor");
  return n;
}

void require_same_shape(const char* op, const Node& a, const Node& b) {
  if (a.shape != b.shape) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch: " + shape_str(a) +
                                " vs " + shape_str(b));
  }
}

// C[m,n] (+)= A[m,k] * B[k,n]
void mm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
           double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    if (!accumulate)
      for (std::size_t j = 0; j < n; ++j) ci[j] = 0.0;
    const double* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
void mm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
           double* c, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accumulate ? ci[j] + acc : acc;
    }
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
void mm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b,
           double* c, bool accumulate) {
  if (!accumulate)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a + p * m;
    const double* bp = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      double* ci = c + i * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

bool is_masked(double m) { return m <= kMaskedOut * 0.5; }

}  // namespace

// ---------------------------------------------------------------------------
// Tensor handle

Tensor Tensor::zeros(std::size_t rows, std::size_t cols, bool requires_grad) {
  auto n = make_node(rows, cols, {});
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Access::wrap(std::move(n));
}

Tensor Tensor::from_data(std::size_t rows, std::size_t cols, std::vector<double> data,
                         bool requires_grad) {
  if (data.size() != rows * cols) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + std::to_string(rows) + "x" +
                                std::to_string(cols));
  }
  auto n = make_node(rows, cols, {});
  n->value = std::move(data);
  n->requires_grad = requires_grad;
  if (requires_grad) n->ensure_grad();
  return Access::wrap(std::move(n));
}

Tensor Tensor::scalar(double v) { return from_data(1, 1, {v}); }

const Shape& Tensor::shape() const { return checked(*this, "shape")->shape; }
std::size_t Tensor::rows() const { return checked(*this, "rows")->rows(); }
std::size_t Tensor::cols() const { return checked(*this, "cols")->cols(); }
std::size_t Tensor::size() const { return checked(*this, "size")->size(); }
std::uint64_t Tensor::node_id() const { return checked(*this, "node_id")->id; }
bool Tensor::requires_grad() const { return checked(*this, "requires_grad")->requires_grad; }
bool Tensor::is_leaf() const { return checked(*this, "is_leaf")->leaf; }

const std::vector<double>& Tensor::values() const { return checked(*this, "values")->value; }

double Tensor::value(std::size_t r, std::size_t c) const {
  const auto& n = checked(*this, "value");
  if (r >= n->rows() || c >= n->cols()) throw std::out_of_range("Tensor::value: index");
  return n->value[r * n->cols() + c];
}

double Tensor::item() const {
  const auto& n = checked(*this, "item");
  if (n->size() != 1)
    throw std::invalid_argument("item: tensor is " + shape_str(*n) + ", not scalar");
  return n->value[0];
}

std::vector<double>& Tensor::mutable_values() {
  const auto& n = checked(*this, "mutable_values");
  if (!n->leaf)
    throw std::logic_error("mutable_values: only leaves may be mutated in place");
  return n->value;
}

bool Tensor::has_grad() const { return !checked(*this, "has_grad")->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  const auto& n = checked(*this, "grad");
  n->ensure_grad();
  return n->grad;
}

void Tensor::zero_grad() {
  const auto& n = checked(*this, "zero_grad");
  if (!n->grad.empty()) n->grad.assign(n->size(), 0.0);
}

// ---------------------------------------------------------------------------
// Operations

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& na = checked(a, "matmul");
  const auto& nb = checked(b, "matmul");
  if (na->cols() != nb->rows()) {
    throw std::invalid_argument("matmul: inner dimensions disagree: lhs is " +
                                shape_str(*na) + ", rhs is " + shape_str(*nb));
  }
  const std::size_t m = na->rows(), k = na->cols(), n = nb->cols();
  auto out = make_node(m, n, {na, nb});
  mm_nn(m, k, n, na->value.data(), nb->value.data(), out->value.data(), false);
  Node* pa = na.get();
  Node* pb = nb.get();
  out->backprop = [m, k, n, pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      mm_nt(m, n, k, self.grad.data(), pb->value.data(), pa->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      mm_tn(k, m, n, pa->value.data(), self.grad.data(), pb->grad.data(), true);
    }
  };
  return Access::wrap(std::move(out));
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  const auto& na = checked(a, "matmul_nt");
  const auto& nb = checked(b, "matmul_nt");
  if (na->cols() != nb->cols()) {
    throw std::invalid_argument("matmul_nt: inner dimensions disagree: lhs is " +
                                shape_str(*na) + ", rhs^T is " + std::to_string(nb->cols()) +
                                "x" + std::to_string(nb->rows()));
  }
  const std::size_t m = na->rows(), k = na->cols(), n = nb->rows();
  auto out = make_node(m, n, {na, nb});
  mm_nt(m, k, n, na->value.data(), nb->value.data(), out->value.data(), false);
  Node* pa = na.get();
  Node* pb = nb.get();
  out->backprop = [m, k, n, pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      mm_nn(m, n, k, self.grad.data(), pb->value.data(), pa->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      mm_tn(n, m, k, self.grad.data(), pa->value.data(), pb->grad.data(), true);
    }
  };
  return Access::wrap(std::move(out));
}

Tensor transpose(const Tensor& a) {
  const auto& na = checked(a, "transpose");
  const std::size_t m = na->rows(), n = na->cols();
  auto out = make_node(n, m, {na});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->value[j * m + i] = na->value[i * n + j];
  Node* pa = na.get();
  out->backprop = [m, n, pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j * m + i];
  };
  return Access::wrap(std::move(out));
}

namespace {

template <typename Fwd, typename Bwd>
Tensor binary_elementwise(const char* op, const Tensor& a, const Tensor& b, Fwd fwd,
                          Bwd bwd) {
  const auto& na = checked(a, op);
  const auto& nb = checked(b, op);
  require_same_shape(op, *na, *nb);
  auto out = make_node(na->rows(), na->cols(), {na, nb});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->value[i] = fwd(na->value[i], nb->value[i]);
  Node* pa = na.get();
  Node* pb = nb.get();
  out->backprop = [pa, pb, bwd](Node& self) {
    const bool ga = pa->requires_grad, gb = pb->requires_grad;
    if (ga) pa->ensure_grad();
    if (gb) pb->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i) {
      const auto [da, db] = bwd(pa->value[i], pb->value[i]);
      if (ga) pa->grad[i] += self.grad[i] * da;
      if (gb) pb->grad[i] += self.grad[i] * db;
    }
  };
  return Access::wrap(std::move(out));
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double) { return std::pair{1.0, 1.0}; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double) { return std::pair{1.0, -1.0}; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y) { return std::pair{y, x}; });
}

Tensor scale(const Tensor& a, double s) {
  const auto& na = checked(a, "scale");
  auto out = make_node(na->rows(), na->cols(), {na});
  for (std::size_t i = 0; i < out->size(); ++i) out->value[i] = na->value[i] * s;
  Node* pa = na.get();
  out->backprop = [pa, s](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i] * s;
  };
  return Access::wrap(std::move(out));
}

Tensor relu(const Tensor& a) {
  const auto& na = checked(a, "relu");
  auto out = make_node(na->rows(), na->cols(), {na});
  for (std::size_t i = 0; i < out->size(); ++i)
    out->value[i] = na->value[i] > 0.0 ? na->value[i] : 0.0;
  Node* pa = na.get();
  out->backprop = [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    if (detail::corrupt_relu_backward) {
      for (std::size_t i = 0; i < self.size(); ++i) pa->grad[i] += self.grad[i];
      return;
    }
    for (std::size_t i = 0; i < self.size(); ++i)
      if (pa->value[i] > 0.0) pa->grad[i] += self.grad[i];
  };
  return Access::wrap(std::move(out));
}

Tensor concat_last_dim(std::span<const Tensor> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_last_dim: no inputs");
  std::vector<std::shared_ptr<Node>> nodes;
  nodes.reserve(parts.size());
  std::size_t total_cols = 0;
  for (const auto& p : parts) {
    nodes.push_back(checked(p, "concat_last_dim"));
    total_cols += nodes.back()->cols();
    if (nodes.back()->rows() != nodes.front()->rows()) {
      throw std::invalid_argument("concat_last_dim: row mismatch: " +
                                  shape_str(*nodes.front()) + " vs " +
                                  shape_str(*nodes.back()));
    }
  }
  const std::size_t m = nodes.front()->rows();
  auto out = make_node(m, total_cols, nodes);
  std::size_t col0 = 0;
  for (const auto& nd : nodes) {
    const std::size_t c = nd->cols();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < c; ++j)
        out->value[i * total_cols + col0 + j] = nd->value[i * c + j];
    col0 += c;
  }
  out->backprop = [m, total_cols](Node& self) {
    std::size_t first = 0;
    for (const auto& parent : self.parents) {
      const std::size_t c = parent->cols();
      if (parent->requires_grad) {
        parent->ensure_grad();
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < c; ++j)
            parent->grad[i * c + j] += self.grad[i * total_cols + first + j];
      }
      first += c;
    }
  };
  return Access::wrap(std::move(out));
}

Tensor slice_cols(const Tensor& a, std::size_t first, std::size_t count) {
  const auto& na = checked(a, "slice_cols");
  if (first + count > na->cols()) {
    throw std::invalid_argument("slice_cols: [" + std::to_string(first) + ", " +
                                std::to_string(first + count) + ") out of " +
                                shape_str(*na));
  }
  const std::size_t m = na->rows(), n = na->cols();
  auto out = make_node(m, count, {na});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < count; ++j)
      out->value[i * count + j] = na->value[i * n + first + j];
  Node* pa = na.get();
  out->backprop = [m, n, first, count, pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j)
        pa->grad[i * n + first + j] += self.grad[i * count + j];
  };
  return Access::wrap(std::move(out));
}

Tensor mean_pool_rows(const Tensor& a) {
  const auto& na = checked(a, "mean_pool_rows");
  if (na->rows() == 0) throw std::invalid_argument("mean_pool_rows: empty input");
  const std::size_t m = na->rows(), n = na->cols();
  auto out = make_node(1, n, {na});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->value[j] += na->value[i * n + j];
  for (std::size_t j = 0; j < n; ++j) out->value[j] /= static_cast<double>(m);
  Node* pa = na.get();
  out->backprop = [m, n, pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const double inv = 1.0 / static_cast<double>(m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += self.grad[j] * inv;
  };
  return Access::wrap(std::move(out));
}

Tensor l2_norm_rows(const Tensor& a) {
  const auto& na = checked(a, "l2_norm_rows");
  const std::size_t m = na->rows(), n = na->cols();
  auto out = make_node(m, 1, {na});
  for (std::size_t i = 0; i < m; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double v = na->value[i * n + j];
      acc += v * v;
    }
    out->value[i] = std::sqrt(acc);
  }
  Node* pa = na.get();
  out->backprop = [m, n, pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double norm = self.value[i];
      if (norm == 0.0) continue;  // subgradient 0 at the kink
      const double g = self.grad[i] / norm;
      for (std::size_t j = 0; j < n; ++j) pa->grad[i * n + j] += g * pa->value[i * n + j];
    }
  };
  return Access::wrap(std::move(out));
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const auto& nx = checked(x, "layer_norm");
  const auto& ng = checked(gain, "layer_norm");
  const auto& nb = checked(bias, "layer_norm");
  const std::size_t m = nx->rows(), n = nx->cols();
  if (ng->rows() != 1 || ng->cols() != n || nb->rows() != 1 || nb->cols() != n) {
    throw std::invalid_argument("layer_norm: gain/bias must be 1x" + std::to_string(n) +
                                ", got " + shape_str(*ng) + " and " + shape_str(*nb));
  }
  auto out = make_node(m, n, {nx, ng, nb});
  std::vector<double> mean(m), inv_std(m);
  for (std::size_t i = 0; i < m; ++i) {
    const double* xi = nx->value.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += xi[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (xi[j] - mu) * (xi[j] - mu);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    mean[i] = mu;
    inv_std[i] = inv;
    for (std::size_t j = 0; j < n; ++j)
      out->value[i * n + j] = ng->value[j] * ((xi[j] - mu) * inv) + nb->value[j];
  }
  Node* px = nx.get();
  Node* pg = ng.get();
  Node* pb = nb.get();
  out->backprop = [m, n, px, pg, pb, mean = std::move(mean),
                   inv_std = std::move(inv_std)](Node& self) {
    const bool gx = px->requires_grad, gg = pg->requires_grad, gb = pb->requires_grad;
    if (gx) px->ensure_grad();
    if (gg) pg->ensure_grad();
    if (gb) pb->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* xi = px->value.data() + i * n;
      const double* gi = self.grad.data() + i * n;
      const double inv = inv_std[i];
      const double mu = mean[i];
      double mean_h = 0.0, mean_hx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        const double xhat = (xi[j] - mu) * inv;
        const double h = gi[j] * pg->value[j];
        mean_h += h;
        mean_hx += h * xhat;
        if (gg) pg->grad[j] += gi[j] * xhat;
        if (gb) pb->grad[j] += gi[j];
      }
      if (!gx) continue;
      mean_h /= static_cast<double>(n);
      mean_hx /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double xhat = (xi[j] - mu) * inv;
        const double h = gi[j] * pg->value[j];
        px->grad[i * n + j] += inv * (h - mean_h - xhat * mean_hx);
      }
    }
  };
  return Access::wrap(std::move(out));
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  const auto& nx = checked(x, "linear");
  const auto& nw = checked(w, "linear");
  const auto& nb = checked(b, "linear");
  if (nx->cols() != nw->rows() || nb->rows() != 1 || nb->cols() != nw->cols()) {
    throw std::invalid_argument("linear: incompatible shapes: x " + shape_str(*nx) +
                                ", w " + shape_str(*nw) + ", b " + shape_str(*nb));
  }
  const std::size_t m = nx->rows(), k = nx->cols(), n = nw->cols();
  auto out = make_node(m, n, {nx, nw, nb});
  mm_nn(m, k, n, nx->value.data(), nw->value.data(), out->value.data(), false);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out->value[i * n + j] += nb->value[j];
  Node* px = nx.get();
  Node* pw = nw.get();
  Node* pb = nb.get();
  out->backprop = [m, k, n, px, pw, pb](Node& self) {
    if (px->requires_grad) {
      px->ensure_grad();
      mm_nt(m, n, k, self.grad.data(), pw->value.data(), px->grad.data(), true);
    }
    if (pw->requires_grad) {
      pw->ensure_grad();
      mm_tn(k, m, n, px->value.data(), self.grad.data(), pw->grad.data(), true);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) pb->grad[j] += self.grad[i * n + j];
    }
  };
  return Access::wrap(std::move(out));
}

namespace {

// Shared softmax machinery: mask == nullptr means no masking.
Tensor softmax_impl(const Tensor& logits, const Tensor* mask) {
  const auto& nl = checked(logits, "masked_softmax");
  std::shared_ptr<Node> nm;
  if (mask) {
    nm = checked(*mask, "masked_softmax");
    require_same_shape("masked_softmax", *nl, *nm);
    for (std::size_t i = 0; i < nm->size(); ++i) {
      const double mv = nm->value[i];
      if (mv != 0.0 && !is_masked(mv)) {
        throw std::invalid_argument(
            "masked_softmax: mask entries must be 0 or the -inf sentinel, got " +
            std::to_string(mv));
      }
    }
  }
  const std::size_t m = nl->rows(), n = nl->cols();
  std::vector<std::shared_ptr<Node>> parents{nl};
  if (nm) parents.push_back(nm);
  auto out = make_node(m, n, std::move(parents));
  for (std::size_t i = 0; i < m; ++i) {
    const double* li = nl->value.data() + i * n;
    const double* mi = nm ? nm->value.data() + i * n : nullptr;
    double row_max = -1e300;
    bool any_open = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (mi && is_masked(mi[j])) continue;
      any_open = true;
      const double z = li[j] + (mi ? mi[j] : 0.0);
      if (z > row_max) row_max = z;
    }
    if (!any_open) {
      throw std::invalid_argument("masked_softmax: row " + std::to_string(i) +
                                  " is fully masked");
    }
    double denom = 0.0;
    double* oi = out->value.data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      if (mi && is_masked(mi[j])) {
        oi[j] = 0.0;  // exact zero at masked positions
        continue;
      }
      oi[j] = std::exp(li[j] + (mi ? mi[j] : 0.0) - row_max);
      denom += oi[j];
    }
    for (std::size_t j = 0; j < n; ++j) oi[j] /= denom;
  }
  Node* pl = nl.get();
  out->backprop = [m, n, pl](Node& self) {
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    for (std::size_t i = 0; i < m; ++i) {
      const double* p = self.value.data() + i * n;
      const double* g = self.grad.data() + i * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[j] * p[j];
      for (std::size_t j = 0; j < n; ++j) pl->grad[i * n + j] += p[j] * (g[j] - dot);
    }
  };
  return Access::wrap(std::move(out));
}

}  // namespace

Tensor softmax_rows(const Tensor& logits) { return softmax_impl(logits, nullptr); }

Tensor masked_softmax(const Tensor& logits, const Tensor& mask) {
  return softmax_impl(logits, &mask);
}

Tensor sum(const Tensor& a) {
  const auto& na = checked(a, "sum");
  auto out = make_node(1, 1, {na});
  double acc = 0.0;
  for (double v : na->value) acc += v;
  out->value[0] = acc;
  Node* pa = na.get();
  out->backprop = [pa](Node& self) {
    if (!pa->requires_grad) return;
    pa->ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < pa->grad.size(); ++i) pa->grad[i] += g;
  };
  return Access::wrap(std::move(out));
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  const auto& nt = checked(table, "embedding_rows");
  const std::size_t v = nt->rows(), d = nt->cols();
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= v) {
      throw std::invalid_argument("embedding_rows: unknown token id " + std::to_string(id) +
                                  " for table of " + std::to_string(v) + " rows");
    }
  }
  auto out = make_node(ids.size(), d, {nt});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double* src = nt->value.data() + static_cast<std::size_t>(ids[i]) * d;
    double* dst = out->value.data() + i * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
  }
  Node* pt = nt.get();
  std::vector<int> ids_copy(ids.begin(), ids.end());
  out->backprop = [pt, d, ids_copy = std::move(ids_copy)](Node& self) {
    if (!pt->requires_grad) return;
    pt->ensure_grad();
    for (std::size_t i = 0; i < ids_copy.size(); ++i) {
      double* dst = pt->grad.data() + static_cast<std::size_t>(ids_copy[i]) * d;
      const double* src = self.grad.data() + i * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
    }
  };
  return Access::wrap(std::move(out));
}

Tensor cross_entropy_logits(const Tensor& logits, std::size_t target) {
  const auto& nl = checked(logits, "cross_entropy_logits");
  const std::size_t k = nl->size();
  if (k == 0) throw std::invalid_argument("cross_entropy_logits: empty logits");
  if (target >= k) {
    throw std::invalid_argument("cross_entropy_logits: target " + std::to_string(target) +
                                " out of range for " + std::to_string(k) + " logits");
  }
  auto out = make_node(1, 1, {nl});
  double max_l = nl->value[0];
  for (double v : nl->value) max_l = std::max(max_l, v);
  double denom = 0.0;
  std::vector<double> probs(k);
  for (std::size_t i = 0; i < k; ++i) {
    probs[i] = std::exp(nl->value[i] - max_l);
    denom += probs[i];
  }
  for (std::size_t i = 0; i < k; ++i) probs[i] /= denom;
  out->value[0] = std::log(denom) + max_l - nl->value[target];
  Node* pl = nl.get();
  out->backprop = [pl, target, probs = std::move(probs)](Node& self) {
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    const double g = self.grad[0];
    for (std::size_t i = 0; i < probs.size(); ++i)
      pl->grad[i] += g * (probs[i] - (i == target ? 1.0 : 0.0));
  };
  return Access::wrap(std::move(out));
}

Tensor binary_cross_entropy_logits(const Tensor& logits, std::span<const double> labels,
                                   std::span<const std::uint8_t> valid) {
  const auto& nl = checked(logits, "binary_cross_entropy_logits");
  const std::size_t w = nl->size();
  if (labels.size() != w || valid.size() != w) {
    throw std::invalid_argument("binary_cross_entropy_logits: " + std::to_string(w) +
                                " logits vs " + std::to_string(labels.size()) +
                                " labels and " + std::to_string(valid.size()) + " flags");
  }
  std::size_t count = 0;
  for (std::size_t i = 0; i < w; ++i) {
    if (!valid[i]) continue;
    ++count;
    if (labels[i] != 0.0 && labels[i] != 1.0) {
      throw std::invalid_argument("binary_cross_entropy_logits: label " +
                                  std::to_string(labels[i]) + " is not binary");
    }
  }
  if (count == 0)
    throw std::invalid_argument("binary_cross_entropy_logits: no valid positions");
  auto out = make_node(1, 1, {nl});
  double acc = 0.0;
  for (std::size_t i = 0; i < w; ++i) {
    if (!valid[i]) continue;
    const double x = nl->value[i];
    // max(x,0) - x*y + log(1 + exp(-|x|))
    acc += (x > 0.0 ? x : 0.0) - x * labels[i] + std::log1p(std::exp(-std::abs(x)));
  }
  out->value[0] = acc / static_cast<double>(count);
  Node* pl = nl.get();
  std::vector<double> lbl(labels.begin(), labels.end());
  std::vector<std::uint8_t> vld(valid.begin(), valid.end());
  out->backprop = [pl, count, lbl = std::move(lbl), vld = std::move(vld)](Node& self) {
    if (!pl->requires_grad) return;
    pl->ensure_grad();
    const double g = self.grad[0] / static_cast<double>(count);
    for (std::size_t i = 0; i < lbl.size(); ++i) {
      if (!vld[i]) continue;
      const double sig = 1.0 / (1.0 + std::exp(-pl->value[i]));
      pl->grad[i] += g * (sig - lbl[i]);
    }
  };
  return Access::wrap(std::move(out));
}

// ---------------------------------------------------------------------------
// Reverse sweep

void backward(const Tensor& loss) {
  const auto& root_sp = checked(loss, "backward");
  Node* root = root_sp.get();
  if (root->size() != 1) {
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(*root));
  }
  if (!root->requires_grad) {
    // Constant graph: nothing reachable carries gradients.
    return;
  }

  // Reverse post-order DFS over the requires_grad subgraph is a topological
  // order; every node is visited exactly once.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  struct Frame {
    Node* n;
    std::size_t next;
  };
  std::vector<Frame> stack{{root, 0}};
  seen.insert(root);
  while (!stack.empty()) {
    Frame& top = stack.back();
    if (top.next < top.n->parents.size()) {
      Node* p = top.n->parents[top.next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
    } else {
      order.push_back(top.n);
      stack.pop_back();
    }
  }

  // Interior gradients are per-sweep scratch; leaf gradients accumulate.
  for (Node* n : order) {
    if (!n->leaf)
      n->grad.assign(n->size(), 0.0);
    else
      n->ensure_grad();
  }
  root->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backprop) n->backprop(*n);
  }
}

}  // namespace groundlab::autodiff
