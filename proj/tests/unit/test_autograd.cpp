#include <cmath>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/rng.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace cadenza;
using namespace cadenza::ag;
using cadenza::testing::grad_check;

namespace {
Var rand_param(Rng& rng, std::size_t r, std::size_t c) { return Var::param(rng.normal_mat(r, c)); }
}  // namespace

TEST_CASE("matmul and elementwise ops match finite differences") {
  Rng rng(1);
  auto a = rand_param(rng, 3, 4), b = rand_param(rng, 4, 5), bias = rand_param(rng, 1, 5);
  auto res = grad_check({a, b, bias}, [&] {
    auto y = add_rowvec(matmul(a, b), bias);
    return sum(mul(silu(y), tanh(y)));
  });
  CHECK(res.rel_error < 1e-6);

  auto c = rand_param(rng, 3, 5);
  res = grad_check({a, c, b}, [&] { return mean(mul(square(sub(matmul_nt(a, transpose(b)), c)), matmul(a, b))); });
  CHECK(res.rel_error < 1e-6);
}

TEST_CASE("normalization, rope and attention gradients") {
  Rng rng(2);
  auto x = rand_param(rng, 5, 8), w = rand_param(rng, 1, 8);
  std::vector<std::size_t> pos{0, 1, 2, 7, 9};
  auto res = grad_check({x, w}, [&] { return sum(mul(rope(rmsnorm(x, w), pos, 2), rope(x, pos, 2))); });
  CHECK(res.rel_error < 1e-6);

  auto q = rand_param(rng, 6, 8), k = rand_param(rng, 6, 8), v = rand_param(rng, 6, 8);
  for (const auto& spans : {causal_spans(6), block_causal_spans(6, 3), full_spans(6)}) {
    res = grad_check({q, k, v}, [&] { return sum(square(attention(q, k, v, 2, spans))); });
    CHECK(res.rel_error < 1e-6);
  }
}

TEST_CASE("attention respects key spans") {
  Rng rng(3);
  Var q(rng.normal_mat(4, 4)), k(rng.normal_mat(4, 4)), v(rng.normal_mat(4, 4));
  auto out = attention(q, k, v, 1, causal_spans(4));
  // first row can only see key 0, so it returns v[0]
  for (std::size_t c = 0; c < 4; ++c) CHECK(out.value()(0, c) == doctest::Approx(v.value()(0, c)));
}

TEST_CASE("log-softmax pick, cosine and normalization gradients") {
  Rng rng(4);
  auto x = rand_param(rng, 4, 6), y = rand_param(rng, 4, 6), s = Var::param(Mat(1, 1, 0.3));
  std::vector<std::size_t> tg{0, 5, 2, 2};
  auto res = grad_check({x, s}, [&] { return sum(logsoftmax_pick(scale_by(x, exp(s)), tg)); });
  CHECK(res.rel_error < 1e-6);
  res = grad_check({x, y}, [&] { return mean(log_sigmoid(row_cosine(x, y))); });
  CHECK(res.rel_error < 1e-6);
  res = grad_check({x}, [&] { return sum(mul(l2_normalize_rows(x), y)); });
  CHECK(res.rel_error < 1e-6);
}

TEST_CASE("shape ops route gradients to the right slots") {
  Rng rng(5);
  auto a = rand_param(rng, 2, 3), b = rand_param(rng, 3, 3), t = rand_param(rng, 5, 2);
  std::vector<std::size_t> idx{4, 0, 4, 1};
  auto res = grad_check({a, b, t}, [&] {
    auto rows = concat_rows({a, b});
    auto cols = concat_cols({slice_rows(rows, 1, 5), gather_rows(t, idx)});
    return sum(square(reshape(slice_cols(cols, 1, 5), 2, 8)));
  });
  CHECK(res.rel_error < 1e-6);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  auto w = Var::param(Mat(1, 1, 2.0));
  auto loss = [&] { return square(w); };
  loss().backward();
  loss().backward();
  CHECK(w.grad().data[0] == doctest::Approx(8.0));
  w.zero_grad();
  CHECK(w.grad().data[0] == 0.0);
}
