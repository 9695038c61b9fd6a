#include "cadenza/rvq/downsample.hpp"

#include <numeric>

#include "cadenza/core/error.hpp"

namespace cadenza::rvq {

using namespace ag;

AttentionMixer::AttentionMixer(std::size_t channels, std::size_t n_blocks, std::size_t n_heads, Rng& rng) {
  for (std::size_t b = 0; b < n_blocks; ++b) blocks_.emplace_back(channels, n_heads, rng);
}

Var AttentionMixer::forward(const Var& x) const {
  std::vector<std::size_t> pos(x.rows());
  std::iota(pos.begin(), pos.end(), 0);
  const auto spans = full_spans(x.rows());
  Var h = x;
  for (const auto& b : blocks_) h = b(h, pos, spans);
  return h;
}

void AttentionMixer::collect(std::vector<Var>& out) const {
  for (const auto& b : blocks_) b.collect(out);
}

QueryDownsampler::QueryDownsampler(std::size_t channels, std::shared_ptr<SequenceMixer> m, Rng& rng)
    : query(Var::param(rng.normal_mat(1, channels, 0.1))), mixer(std::move(m)) {}

Var QueryDownsampler::forward(const Var& x) const {
  if (x.rows() % 2 != 0) throw Error(ErrorCode::ShapeMismatch, "query downsampling needs an even frame count");
  if (x.cols() != query.cols()) throw Error(ErrorCode::DimMismatch, "query width differs from features");
  const std::size_t pairs = x.rows() / 2;
  if (pairs == 0) return Var(Mat(0, x.cols()));
  // [x0, x1, q, x2, x3, q, ...]
  std::vector<std::size_t> order;
  order.reserve(3 * pairs);
  for (std::size_t p = 0; p < pairs; ++p) {
    order.push_back(2 * p);
    order.push_back(2 * p + 1);
    order.push_back(x.rows());
  }
  auto mixed = mixer->forward(gather_rows(concat_rows({x, query}), order));
  std::vector<std::size_t> picks(pairs);
  for (std::size_t p = 0; p < pairs; ++p) picks[p] = 3 * p + 2;
  return gather_rows(mixed, picks);
}

void QueryDownsampler::collect(std::vector<Var>& out) const {
  out.push_back(query);
  mixer->collect(out);
}

FeatureSeq downsample_queries(const FeatureSeq& y_h, const QueryDownsampler& q) {
  Mat x = y_h.data;
  std::size_t pad = 0;
  if (x.rows % 2 == 1) {
    x.data.resize(x.data.size() + x.cols, 0.0);
    ++x.rows;
    pad = 1;
  }
  return FeatureSeq{q.forward(Var(std::move(x))).value(), y_h.frame_rate / 2.0, pad};
}

Upsampler::Upsampler(std::size_t in_channels, std::size_t out_ch, std::size_t r, Rng& rng)
    : proj(in_channels, out_ch * r, rng), ratio(r), out_channels(out_ch) {}

Var Upsampler::forward(const Var& y) const { return reshape(proj(y), y.rows() * ratio, out_channels); }

}  // namespace cadenza::rvq
