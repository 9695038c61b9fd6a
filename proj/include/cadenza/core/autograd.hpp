#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "cadenza/core/mat.hpp"

// Minimal tape-free reverse-mode differentiation over dense matrices.
// Every op records its parents and a closure that pushes the output gradient
// back to them. Graphs are built per forward pass and dropped afterwards.
namespace cadenza::ag {

struct Node {
  Mat value;
  Mat grad;  // lazily sized to value on first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  Mat& grad_buffer();
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  static Var param(Mat value) { return Var(std::move(value), true); }
  static Var scalar(double v) { return Var(Mat(1, 1, v)); }

  const Mat& value() const { return node_->value; }
  Mat& mutable_value() { return node_->value; }
  const Mat& grad() const { return node_->grad_buffer(); }
  Mat& mutable_grad() { return node_->grad_buffer(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  std::size_t rows() const { return node_->value.rows; }
  std::size_t cols() const { return node_->value.cols; }
  double item() const { return node_->value.data.at(0); }

  void zero_grad();
  // Seeds d(self)/d(self) = 1 (self must be 1x1) and accumulates into every
  // reachable node that requires a gradient.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  friend Var make_result(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn);
  std::shared_ptr<Node> node_;
};

Var make_result(Mat value, std::vector<Var> parents, std::function<void(Node&)> fn);

// Arithmetic
Var matmul(const Var& a, const Var& b);
Var matmul_nt(const Var& a, const Var& b);  // a * b^T
Var transpose(const Var& a);
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var add_rowvec(const Var& a, const Var& b);  // broadcast 1 x n over rows
Var mul_rowvec(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var scale_by(const Var& a, const Var& s);  // s is 1 x 1
Var add_scalar(const Var& a, double s);

// Elementwise
Var silu(const Var& a);
Var tanh(const Var& a);
Var exp(const Var& a);
Var log_sigmoid(const Var& a);
Var abs(const Var& a);
Var square(const Var& a);
Var reciprocal(const Var& a);
Var sqrt_eps(const Var& a, double eps);  // sqrt(a + eps)
Var clamp(const Var& a, double lo, double hi);
Var stop_gradient(const Var& a);

// Reductions
Var sum(const Var& a);
Var mean(const Var& a);
Var mean_rows(const Var& a);  // 1 x cols

// Shape
Var reshape(const Var& a, std::size_t rows, std::size_t cols);
Var concat_cols(const std::vector<Var>& parts);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
Var gather_rows(const Var& table, std::span<const std::size_t> index);

// Sequence model pieces
Var rmsnorm(const Var& a, const Var& weight, double eps = 1e-6);
Var rope(const Var& a, std::span<const std::size_t> positions, std::size_t n_heads, double base = 10000.0);

// Each query row i attends to key rows [spans[i].first, spans[i].second).
using KeySpans = std::vector<std::pair<std::size_t, std::size_t>>;
Var attention(const Var& q, const Var& k, const Var& v, std::size_t n_heads, const KeySpans& spans);
KeySpans causal_spans(std::size_t n);
KeySpans block_causal_spans(std::size_t n, std::size_t block);
KeySpans full_spans(std::size_t n);

// Row-wise log-softmax evaluated at targets[r]; returns rows x 1.
Var logsoftmax_pick(const Var& logits, std::span<const std::size_t> targets);
// Row-wise cosine similarity, rows x 1. Zero-norm rows must be screened by the caller.
Var row_cosine(const Var& a, const Var& b);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

}  // namespace cadenza::ag
