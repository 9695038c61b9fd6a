#include "cadenza/core/layers.hpp"

#include <cmath>

namespace cadenza::nn {

using namespace ag;

Linear::Linear(std::size_t in, std::size_t out, Rng& rng, bool with_bias)
    : weight(Var::param(rng.normal_mat(in, out, 1.0 / std::sqrt(static_cast<double>(in))))) {
  if (with_bias) bias = Var::param(Mat(1, out));
}

Var Linear::operator()(const Var& x) const {
  auto y = matmul(x, weight);
  return bias.defined() ? add_rowvec(y, bias) : y;
}

void Linear::collect(std::vector<Var>& out) const {
  out.push_back(weight);
  if (bias.defined()) out.push_back(bias);
}

TransformerBlock::TransformerBlock(std::size_t d, std::size_t heads, Rng& rng)
    : attn_norm(Var::param(Mat(1, d, 1.0))),
      wq(d, d, rng, false),
      wk(d, d, rng, false),
      wv(d, d, rng, false),
      wo(d, d, rng, false),
      mlp_norm(Var::param(Mat(1, d, 1.0))),
      up(d, 4 * d, rng, false),
      down(4 * d, d, rng, false),
      n_heads(heads) {}

Var TransformerBlock::operator()(const Var& x, std::span<const std::size_t> positions, const KeySpans& spans) const {
  auto h = rmsnorm(x, attn_norm);
  auto q = rope(wq(h), positions, n_heads);
  auto k = rope(wk(h), positions, n_heads);
  auto a = attention(q, k, wv(h), n_heads, spans);
  auto x1 = add(x, wo(a));
  auto m = down(silu(up(rmsnorm(x1, mlp_norm))));
  return add(x1, m);
}

void TransformerBlock::collect(std::vector<Var>& out) const {
  out.push_back(attn_norm);
  for (const auto* l : {&wq, &wk, &wv, &wo}) l->collect(out);
  out.push_back(mlp_norm);
  up.collect(out);
  down.collect(out);
}

}  // namespace cadenza::nn

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"

namespace cadenza::nn {

void write_params(ByteWriter& w, const std::vector<ag::Var>& params) {
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) w.mat_f32(p.value());
}

void read_params(ByteReader& r, std::vector<ag::Var>& params) {
  if (r.u32() != params.size()) throw Error(ErrorCode::BadCheckpoint, "parameter count differs from model");
  for (auto& p : params) {
    Mat m = r.mat_f32();
    if (!m.same_shape(p.value())) throw Error(ErrorCode::BadCheckpoint, "parameter shape differs from model");
    p.mutable_value() = std::move(m);
  }
}

std::vector<Mat> snapshot(const std::vector<ag::Var>& params) {
  std::vector<Mat> out;
  for (const auto& p : params) out.push_back(p.value());
  return out;
}

void restore(std::vector<ag::Var>& params, const std::vector<Mat>& values) {
  if (values.size() != params.size()) throw Error(ErrorCode::ShapeMismatch, "snapshot size");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!values[i].same_shape(params[i].value())) throw Error(ErrorCode::ShapeMismatch, "snapshot shape");
    params[i].mutable_value() = values[i];
  }
}

}  // namespace cadenza::nn
