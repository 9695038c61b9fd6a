#include "cadenza/core/autograd.hpp"

#include <algorithm>
#include <cassert>
#include <cmath>
#include <unordered_set>

#include <Eigen/Core>

#include "cadenza/core/error.hpp"

namespace cadenza::ag {

Mat& Node::grad_buffer() {
  if (grad.rows != value.rows || grad.cols != value.cols) grad = Mat(value.rows, value.cols);
  return grad;
}

Var::Var(Mat value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

void Var::zero_grad() {
  if (!node_) return;
  auto& g = node_->grad_buffer();
  std::fill(g.data.begin(), g.data.end(), 0.0);
}

void Var::backward() const {
  if (!node_ || value().size() != 1) throw Error(ErrorCode::ShapeMismatch, "backward() needs a 1x1 root");
  if (!node_->requires_grad) return;

  // Iterative post-order DFS for a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  // Interior nodes start from zero; leaves keep accumulating across calls.
  for (Node* n : order) {
    if (n->backward_fn) {
      auto& g = n->grad_buffer();
      std::fill(g.data.begin(), g.data.end(), 0.0);
    }
  }
  node_->grad_buffer().data[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

Var make_result(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn) {
  Var out(std::move(value));
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  if (needs) {
    out.node_->requires_grad = true;
    for (auto& p : parents) out.node_->parents.push_back(p.node_);
    out.node_->backward_fn = std::move(fn);
  }
  return out;
}

namespace {

void require_same(const Mat& a, const Mat& b, const char* op) {
  if (!a.same_shape(b)) throw Error(ErrorCode::ShapeMismatch, op);
}

Mat& pgrad(Node& self, std::size_t i) { return self.parents[i]->grad_buffer(); }
bool pneeds(Node& self, std::size_t i) { return self.parents[i]->requires_grad; }

template <typename F, typename D>
Var unary(const Var& a, F f, D dfdx) {
  Mat out(a.rows(), a.cols());
  const auto& x = a.value().data;
  for (std::size_t i = 0; i < x.size(); ++i) out.data[i] = f(x[i]);
  return make_result(std::move(out), {a}, [dfdx](Node& self) {
    auto& g = pgrad(self, 0);
    const auto& x = self.parents[0]->value.data;
    for (std::size_t i = 0; i < x.size(); ++i) g.data[i] += self.grad.data[i] * dfdx(x[i], self.value.data[i]);
  });
}

}  // namespace

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
Eigen::Map<RowMajor> view(Mat& m) { return {m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols)}; }
Eigen::Map<const RowMajor> view(const Mat& m) { return {m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols)}; }

}  // namespace

Var matmul(const Var& a, const Var& b) {
  const Mat& A = a.value();
  const Mat& B = b.value();
  if (A.cols != B.rows) throw Error(ErrorCode::ShapeMismatch, "matmul inner dimension");
  Mat out(A.rows, B.cols);
  view(out).noalias() = view(A) * view(B);
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    if (pneeds(self, 0)) view(pgrad(self, 0)).noalias() += view(self.grad) * view(B).transpose();
    if (pneeds(self, 1)) view(pgrad(self, 1)).noalias() += view(A).transpose() * view(self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Mat& A = a.value();
  const Mat& B = b.value();
  if (A.cols != B.cols) throw Error(ErrorCode::ShapeMismatch, "matmul_nt inner dimension");
  Mat out(A.rows, B.rows);
  view(out).noalias() = view(A) * view(B).transpose();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    if (pneeds(self, 0)) view(pgrad(self, 0)).noalias() += view(self.grad) * view(B);
    if (pneeds(self, 1)) view(pgrad(self, 1)).noalias() += view(self.grad).transpose() * view(A);
  });
}

Var transpose(const Var& a) {
  const Mat& A = a.value();
  Mat out(A.cols, A.rows);
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t c = 0; c < A.cols; ++c) out(c, r) = A(r, c);
  return make_result(std::move(out), {a}, [](Node& self) {
    Mat& g = pgrad(self, 0);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += self.grad(c, r);
  });
}

Var add(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "add");
  Mat out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t p = 0; p < 2; ++p)
      if (pneeds(self, p)) {
        auto& g = pgrad(self, p);
        for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
      }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "sub");
  Mat out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (pneeds(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
    }
    if (pneeds(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "mul");
  Mat out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const auto& x = self.parents[0]->value.data;
    const auto& y = self.parents[1]->value.data;
    if (pneeds(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * y[i];
    }
    if (pneeds(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i] * x[i];
    }
  });
}

Var add_rowvec(const Var& a, const Var& b) {
  const Mat& A = a.value();
  const Mat& B = b.value();
  if (B.rows != 1 || B.cols != A.cols) throw Error(ErrorCode::ShapeMismatch, "add_rowvec");
  Mat out = A;
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t c = 0; c < A.cols; ++c) out(r, c) += B.data[c];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Mat& G = self.grad;
    if (pneeds(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += G.data[i];
    }
    if (pneeds(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t r = 0; r < G.rows; ++r)
        for (std::size_t c = 0; c < G.cols; ++c) g.data[c] += G(r, c);
    }
  });
}

Var mul_rowvec(const Var& a, const Var& b) {
  const Mat& A = a.value();
  const Mat& B = b.value();
  if (B.rows != 1 || B.cols != A.cols) throw Error(ErrorCode::ShapeMismatch, "mul_rowvec");
  Mat out = A;
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t c = 0; c < A.cols; ++c) out(r, c) *= B.data[c];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    const Mat& G = self.grad;
    if (pneeds(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t r = 0; r < G.rows; ++r)
        for (std::size_t c = 0; c < G.cols; ++c) g(r, c) += G(r, c) * B.data[c];
    }
    if (pneeds(self, 1)) {
      auto& g = pgrad(self, 1);
      for (std::size_t r = 0; r < G.rows; ++r)
        for (std::size_t c = 0; c < G.cols; ++c) g.data[c] += G(r, c) * A(r, c);
    }
  });
}

Var scale(const Var& a, double s) {
  Mat out = a.value();
  for (auto& x : out.data) x *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += s * self.grad.data[i];
  });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.value().size() != 1) throw Error(ErrorCode::ShapeMismatch, "scale_by expects a 1x1 scale");
  const double k = s.item();
  Mat out = a.value();
  for (auto& x : out.data) x *= k;
  return make_result(std::move(out), {a, s}, [](Node& self) {
    const double k = self.parents[1]->value.data[0];
    const auto& x = self.parents[0]->value.data;
    if (pneeds(self, 0)) {
      auto& g = pgrad(self, 0);
      for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += k * self.grad.data[i];
    }
    if (pneeds(self, 1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * self.grad.data[i];
      pgrad(self, 1).data[0] += acc;
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Mat out = a.value();
  for (auto& x : out.data) x += s;
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
  });
}

Var silu(const Var& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::exp(-x)); },
      [](double x, double) {
        const double s = 1.0 / (1.0 + std::exp(-x));
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_sigmoid(const Var& a) {
  // log sigma(x) = -softplus(-x), evaluated stably on both tails.
  return unary(
      a, [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
      [](double x, double) { return 1.0 / (1.0 + std::exp(x)); });
}

Var abs(const Var& a) {
  return unary(
      a, [](double x) { return std::fabs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var reciprocal(const Var& a) {
  return unary(a, [](double x) { return 1.0 / x; }, [](double x, double) { return -1.0 / (x * x); });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sqrt_eps(const Var& a, double eps) {
  return unary(
      a, [eps](double x) { return std::sqrt(x + eps); }, [](double, double y) { return 0.5 / y; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x < lo || x > hi) ? 0.0 : 1.0; });
}

Var stop_gradient(const Var& a) { return Var(a.value()); }

Var sum(const Var& a) {
  double s = 0.0;
  for (double x : a.value().data) s += x;
  return make_result(Mat(1, 1, s), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    const double d = self.grad.data[0];
    for (auto& x : g.data) x += d;
  });
}

Var mean(const Var& a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw Error(ErrorCode::ShapeMismatch, "mean of empty matrix");
  return scale(sum(a), 1.0 / n);
}

Var mean_rows(const Var& a) {
  const Mat& A = a.value();
  if (A.rows == 0) throw Error(ErrorCode::ShapeMismatch, "mean_rows of empty matrix");
  Mat out(1, A.cols);
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t c = 0; c < A.cols; ++c) out.data[c] += A(r, c);
  for (auto& x : out.data) x /= static_cast<double>(A.rows);
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    const double inv = 1.0 / static_cast<double>(g.rows);
    for (std::size_t r = 0; r < g.rows; ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(r, c) += self.grad.data[c] * inv;
  });
}

Var reshape(const Var& a, std::size_t rows, std::size_t cols) {
  if (rows * cols != a.value().size()) throw Error(ErrorCode::ShapeMismatch, "reshape size");
  Mat out = a.value();
  out.rows = rows;
  out.cols = cols;
  return make_result(std::move(out), {a}, [](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g.data[i] += self.grad.data[i];
  });
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_cols of nothing");
  const std::size_t rows = parts.front().rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw Error(ErrorCode::ShapeMismatch, "concat_cols row count");
    cols += p.cols();
  }
  Mat out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < p.cols(); ++c) out(r, off + c) = p.value()(r, c);
    off += p.cols();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t pc = self.parents[p]->value.cols;
      if (pneeds(self, p)) {
        auto& g = pgrad(self, p);
        for (std::size_t r = 0; r < g.rows; ++r)
          for (std::size_t c = 0; c < pc; ++c) g(r, c) += self.grad(r, off + c);
      }
      off += pc;
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error(ErrorCode::ShapeMismatch, "concat_rows of nothing");
  const std::size_t cols = parts.front().cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw Error(ErrorCode::ShapeMismatch, "concat_rows column count");
    rows += p.rows();
  }
  Mat out(rows, cols);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + off * cols);
    off += p.rows();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t p = 0; p < self.parents.size(); ++p) {
      const std::size_t n = self.parents[p]->value.size();
      if (pneeds(self, p)) {
        auto& g = pgrad(self, p);
        for (std::size_t i = 0; i < n; ++i) g.data[i] += self.grad.data[off + i];
      }
      off += n;
    }
  });
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
  const Mat& A = a.value();
  if (begin > end || end > A.rows) throw Error(ErrorCode::IndexOutOfRange, "slice_rows");
  Mat out(end - begin, A.cols);
  std::copy(A.data.begin() + begin * A.cols, A.data.begin() + end * A.cols, out.data.begin());
  return make_result(std::move(out), {a}, [begin](Node& self) {
    auto& g = pgrad(self, 0);
    const std::size_t off = begin * g.cols;
    for (std::size_t i = 0; i < self.grad.size(); ++i) g.data[off + i] += self.grad.data[i];
  });
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
  const Mat& A = a.value();
  if (begin > end || end > A.cols) throw Error(ErrorCode::IndexOutOfRange, "slice_cols");
  Mat out(A.rows, end - begin);
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t c = begin; c < end; ++c) out(r, c - begin) = A(r, c);
  return make_result(std::move(out), {a}, [begin](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < self.grad.rows; ++r)
      for (std::size_t c = 0; c < self.grad.cols; ++c) g(r, begin + c) += self.grad(r, c);
  });
}

Var gather_rows(const Var& table, std::span<const std::size_t> index) {
  const Mat& T = table.value();
  Mat out(index.size(), T.cols);
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] >= T.rows) throw Error(ErrorCode::IndexOutOfRange, "gather_rows index");
    std::copy(T.data.begin() + index[r] * T.cols, T.data.begin() + (index[r] + 1) * T.cols,
              out.data.begin() + r * T.cols);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return make_result(std::move(out), {table}, [idx = std::move(idx)](Node& self) {
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t c = 0; c < g.cols; ++c) g(idx[r], c) += self.grad(r, c);
  });
}

Var rmsnorm(const Var& a, const Var& weight, double eps) {
  const Mat& A = a.value();
  const Mat& W = weight.value();
  if (W.rows != 1 || W.cols != A.cols) throw Error(ErrorCode::ShapeMismatch, "rmsnorm weight");
  Mat out(A.rows, A.cols);
  std::vector<double> inv(A.rows);
  for (std::size_t r = 0; r < A.rows; ++r) {
    double ss = 0.0;
    for (double x : A.row(r)) ss += x * x;
    inv[r] = 1.0 / std::sqrt(ss / static_cast<double>(A.cols) + eps);
    for (std::size_t c = 0; c < A.cols; ++c) out(r, c) = A(r, c) * inv[r] * W.data[c];
  }
  return make_result(std::move(out), {a, weight}, [inv = std::move(inv)](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& W = self.parents[1]->value;
    const Mat& G = self.grad;
    const double n = static_cast<double>(A.cols);
    for (std::size_t r = 0; r < A.rows; ++r) {
      if (pneeds(self, 1)) {
        auto& gw = pgrad(self, 1);
        for (std::size_t c = 0; c < A.cols; ++c) gw.data[c] += G(r, c) * A(r, c) * inv[r];
      }
      if (pneeds(self, 0)) {
        double dot = 0.0;
        for (std::size_t c = 0; c < A.cols; ++c) dot += G(r, c) * W.data[c] * A(r, c) * inv[r];
        auto& ga = pgrad(self, 0);
        for (std::size_t c = 0; c < A.cols; ++c) {
          const double xhat = A(r, c) * inv[r];
          ga(r, c) += (G(r, c) * W.data[c] - xhat * dot / n) * inv[r];
        }
      }
    }
  });
}

Var rope(const Var& a, std::span<const std::size_t> positions, std::size_t n_heads, double base) {
  const Mat& A = a.value();
  if (positions.size() != A.rows || n_heads == 0 || A.cols % n_heads != 0 || (A.cols / n_heads) % 2 != 0)
    throw Error(ErrorCode::ShapeMismatch, "rope layout");
  const std::size_t dh = A.cols / n_heads;
  std::vector<double> cs(A.rows * dh / 2), sn(A.rows * dh / 2);
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t i = 0; i < dh / 2; ++i) {
      const double theta =
          static_cast<double>(positions[r]) * std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(dh));
      cs[r * dh / 2 + i] = std::cos(theta);
      sn[r * dh / 2 + i] = std::sin(theta);
    }
  Mat out(A.rows, A.cols);
  for (std::size_t r = 0; r < A.rows; ++r)
    for (std::size_t h = 0; h < n_heads; ++h)
      for (std::size_t i = 0; i < dh / 2; ++i) {
        const std::size_t c0 = h * dh + 2 * i;
        const double c = cs[r * dh / 2 + i], s = sn[r * dh / 2 + i];
        out(r, c0) = A(r, c0) * c - A(r, c0 + 1) * s;
        out(r, c0 + 1) = A(r, c0) * s + A(r, c0 + 1) * c;
      }
  return make_result(std::move(out), {a}, [cs = std::move(cs), sn = std::move(sn), n_heads, dh](Node& self) {
    auto& g = pgrad(self, 0);
    const Mat& G = self.grad;
    for (std::size_t r = 0; r < G.rows; ++r)
      for (std::size_t h = 0; h < n_heads; ++h)
        for (std::size_t i = 0; i < dh / 2; ++i) {
          const std::size_t c0 = h * dh + 2 * i;
          const double c = cs[r * dh / 2 + i], s = sn[r * dh / 2 + i];
          g(r, c0) += G(r, c0) * c + G(r, c0 + 1) * s;
          g(r, c0 + 1) += -G(r, c0) * s + G(r, c0 + 1) * c;
        }
  });
}

KeySpans causal_spans(std::size_t n) {
  KeySpans s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = {0, i + 1};
  return s;
}

KeySpans block_causal_spans(std::size_t n, std::size_t block) {
  KeySpans s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = {(i / block) * block, i + 1};
  return s;
}

KeySpans full_spans(std::size_t n) { return KeySpans(n, {0, n}); }

Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads, const KeySpans& spans) {
  const Mat& Q = q.value();
  const Mat& K = k.value();
  const Mat& V = v.value();
  if (!K.same_shape(V) || Q.cols != K.cols || spans.size() != Q.rows || Q.cols % n_heads != 0)
    throw Error(ErrorCode::ShapeMismatch, "attention operands");
  const std::size_t dh = Q.cols / n_heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<std::size_t> offsets(Q.rows + 1, 0);
  for (std::size_t i = 0; i < Q.rows; ++i) {
    if (spans[i].first >= spans[i].second || spans[i].second > K.rows)
      throw Error(ErrorCode::IndexOutOfRange, "attention key span");
    offsets[i + 1] = offsets[i] + spans[i].second - spans[i].first;
  }
  std::vector<double> probs(offsets.back() * n_heads);
  Mat out(Q.rows, Q.cols);
  for (std::size_t i = 0; i < Q.rows; ++i) {
    const auto [b, e] = spans[i];
    for (std::size_t h = 0; h < n_heads; ++h) {
      double* p = probs.data() + offsets[i] * n_heads + h * (e - b);
      double mx = -INFINITY;
      for (std::size_t j = b; j < e; ++j) {
        double s = 0.0;
        for (std::size_t d = 0; d < dh; ++d) s += Q(i, h * dh + d) * K(j, h * dh + d);
        p[j - b] = s * sc;
        mx = std::max(mx, p[j - b]);
      }
      double z = 0.0;
      for (std::size_t j = b; j < e; ++j) z += (p[j - b] = std::exp(p[j - b] - mx));
      for (std::size_t j = b; j < e; ++j) {
        p[j - b] /= z;
        for (std::size_t d = 0; d < dh; ++d) out(i, h * dh + d) += p[j - b] * V(j, h * dh + d);
      }
    }
  }
  return make_result(
      std::move(out), {q, k, v},
      [spans, offsets = std::move(offsets), probs = std::move(probs), n_heads, dh, sc](Node& self) {
        const Mat& Q = self.parents[0]->value;
        const Mat& K = self.parents[1]->value;
        const Mat& V = self.parents[2]->value;
        const Mat& G = self.grad;
        Mat* gQ = pneeds(self, 0) ? &pgrad(self, 0) : nullptr;
        Mat* gK = pneeds(self, 1) ? &pgrad(self, 1) : nullptr;
        Mat* gV = pneeds(self, 2) ? &pgrad(self, 2) : nullptr;
        std::vector<double> gs;
        for (std::size_t i = 0; i < Q.rows; ++i) {
          const auto [b, e] = spans[i];
          gs.assign(e - b, 0.0);
          for (std::size_t h = 0; h < n_heads; ++h) {
            const double* p = probs.data() + offsets[i] * n_heads + h * (e - b);
            double dot = 0.0;
            for (std::size_t j = b; j < e; ++j) {
              double gp = 0.0;
              for (std::size_t d = 0; d < dh; ++d) gp += G(i, h * dh + d) * V(j, h * dh + d);
              gs[j - b] = gp;
              dot += p[j - b] * gp;
              if (gV)
                for (std::size_t d = 0; d < dh; ++d) (*gV)(j, h * dh + d) += p[j - b] * G(i, h * dh + d);
            }
            for (std::size_t j = b; j < e; ++j) {
              const double g = p[j - b] * (gs[j - b] - dot) * sc;
              if (gQ)
                for (std::size_t d = 0; d < dh; ++d) (*gQ)(i, h * dh + d) += g * K(j, h * dh + d);
              if (gK)
                for (std::size_t d = 0; d < dh; ++d) (*gK)(j, h * dh + d) += g * Q(i, h * dh + d);
            }
          }
        }
      });
}

Var logsoftmax_pick(const Var& logits, std::span<const std::size_t> targets) {
  const Mat& X = logits.value();
  if (targets.size() != X.rows) throw Error(ErrorCode::ShapeMismatch, "logsoftmax_pick targets");
  Mat out(X.rows, 1);
  std::vector<double> lse(X.rows);
  for (std::size_t r = 0; r < X.rows; ++r) {
    if (targets[r] >= X.cols) throw Error(ErrorCode::IndexOutOfRange, "logsoftmax_pick target");
    double mx = -INFINITY;
    for (double x : X.row(r)) mx = std::max(mx, x);
    double z = 0.0;
    for (double x : X.row(r)) z += std::exp(x - mx);
    lse[r] = mx + std::log(z);
    out.data[r] = X(r, targets[r]) - lse[r];
  }
  std::vector<std::size_t> tg(targets.begin(), targets.end());
  return make_result(std::move(out), {logits}, [tg = std::move(tg), lse = std::move(lse)](Node& self) {
    const Mat& X = self.parents[0]->value;
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < X.rows; ++r) {
      const double gr = self.grad.data[r];
      if (gr == 0.0) continue;
      for (std::size_t c = 0; c < X.cols; ++c) g(r, c) -= gr * std::exp(X(r, c) - lse[r]);
      g(r, tg[r]) += gr;
    }
  });
}

Var row_cosine(const Var& a, const Var& b) {
  require_same(a.value(), b.value(), "row_cosine");
  const Mat& A = a.value();
  const Mat& B = b.value();
  Mat out(A.rows, 1);
  std::vector<double> na(A.rows), nb(A.rows);
  for (std::size_t r = 0; r < A.rows; ++r) {
    double ab = 0, aa = 0, bb = 0;
    for (std::size_t c = 0; c < A.cols; ++c) {
      ab += A(r, c) * B(r, c);
      aa += A(r, c) * A(r, c);
      bb += B(r, c) * B(r, c);
    }
    na[r] = std::sqrt(aa);
    nb[r] = std::sqrt(bb);
    out.data[r] = ab / (na[r] * nb[r]);
  }
  return make_result(std::move(out), {a, b}, [na = std::move(na), nb = std::move(nb)](Node& self) {
    const Mat& A = self.parents[0]->value;
    const Mat& B = self.parents[1]->value;
    for (std::size_t r = 0; r < A.rows; ++r) {
      const double g = self.grad.data[r];
      const double cs = self.value.data[r];
      if (pneeds(self, 0)) {
        auto& ga = pgrad(self, 0);
        for (std::size_t c = 0; c < A.cols; ++c)
          ga(r, c) += g * (B(r, c) / (na[r] * nb[r]) - cs * A(r, c) / (na[r] * na[r]));
      }
      if (pneeds(self, 1)) {
        auto& gb = pgrad(self, 1);
        for (std::size_t c = 0; c < A.cols; ++c)
          gb(r, c) += g * (A(r, c) / (na[r] * nb[r]) - cs * B(r, c) / (nb[r] * nb[r]));
      }
    }
  });
}

Var l2_normalize_rows(const Var& a, double eps) {
  const Mat& A = a.value();
  Mat out(A.rows, A.cols);
  std::vector<double> norms(A.rows);
  for (std::size_t r = 0; r < A.rows; ++r) {
    double ss = 0.0;
    for (double x : A.row(r)) ss += x * x;
    norms[r] = std::max(std::sqrt(ss), eps);
    for (std::size_t c = 0; c < A.cols; ++c) out(r, c) = A(r, c) / norms[r];
  }
  return make_result(std::move(out), {a}, [norms = std::move(norms)](Node& self) {
    const Mat& Y = self.value;
    const Mat& G = self.grad;
    auto& g = pgrad(self, 0);
    for (std::size_t r = 0; r < Y.rows; ++r) {
      double dot = 0.0;
      for (std::size_t c = 0; c < Y.cols; ++c) dot += Y(r, c) * G(r, c);
      for (std::size_t c = 0; c < Y.cols; ++c) g(r, c) += (G(r, c) - Y(r, c) * dot) / norms[r];
    }
  });
}

}  // namespace cadenza::ag
