#include "cadenza/flow/field.hpp"

#include <cmath>

#include "cadenza/core/error.hpp"

namespace cadenza::flow {

using namespace ag;

Mat time_embedding(std::span<const double> t, std::size_t features) {
  Mat e(t.size(), 2 * features);
  for (std::size_t r = 0; r < t.size(); ++r)
    for (std::size_t i = 0; i < features; ++i) {
      const double f = std::pow(2.0, static_cast<double>(i) * 6.0 / static_cast<double>(features)) * 3.14159265358979;
      e(r, 2 * i) = std::sin(f * t[r]);
      e(r, 2 * i + 1) = std::cos(f * t[r]);
    }
  return e;
}

MlpVectorField::MlpVectorField(const MlpFieldConfig& cfg, Rng& rng)
    : cfg_(cfg),
      in_(2 * cfg.latent_dim + cfg.cond_dim + 2 * cfg.time_features, cfg.hidden, rng),
      out_(cfg.hidden, cfg.latent_dim, rng) {
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    nn::Linear up(cfg.hidden, cfg.hidden, rng), down(cfg.hidden, cfg.hidden, rng);
    down.weight.mutable_value() = rng.normal_mat(cfg.hidden, cfg.hidden, 0.1 / std::sqrt(double(cfg.hidden)));
    blocks_.emplace_back(std::move(up), std::move(down));
  }
  out_.weight.mutable_value() = rng.normal_mat(cfg.hidden, cfg.latent_dim, 0.1 / std::sqrt(double(cfg.hidden)));
}

Var MlpVectorField::velocity(const Var& z_t, std::span<const double> t, const Var& cond, const Var& partial) const {
  const std::size_t n = z_t.rows();
  if (z_t.cols() != cfg_.latent_dim || partial.cols() != cfg_.latent_dim || cond.cols() != cfg_.cond_dim ||
      partial.rows() != n || cond.rows() != n || t.size() != n)
    throw Error(ErrorCode::ShapeMismatch, "vector field inputs");
  auto h = in_(concat_cols({z_t, Var(time_embedding(t, cfg_.time_features)), cond, partial}));
  for (const auto& [up, down] : blocks_) h = add(h, down(silu(up(h))));
  return out_(silu(h));
}

std::vector<Var> MlpVectorField::params() const {
  std::vector<Var> out;
  in_.collect(out);
  for (const auto& [up, down] : blocks_) {
    up.collect(out);
    down.collect(out);
  }
  out_.collect(out);
  return out;
}

void MlpVectorField::copy_from(const MlpVectorField& other) {
  if (!(other.cfg_ == cfg_)) throw Error(ErrorCode::ConfigMismatch, "vector field shapes differ");
  auto mine = params();
  nn::restore(mine, nn::snapshot(other.params()));
}

}  // namespace cadenza::flow
