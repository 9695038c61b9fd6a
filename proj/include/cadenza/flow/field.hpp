#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/layers.hpp"
#include "cadenza/core/rng.hpp"

namespace cadenza::flow {

// Velocity model v(z_t, t, cond, partial). All inputs are per latent frame
// (rows); t is given per row so several sequences can share one call.
class VectorField {
 public:
  virtual ~VectorField() = default;
  virtual ag::Var velocity(const ag::Var& z_t, std::span<const double> t, const ag::Var& cond,
                           const ag::Var& partial) const = 0;
  virtual std::vector<ag::Var> params() const { return {}; }
  virtual std::size_t latent_dim() const = 0;
  virtual std::size_t cond_dim() const = 0;
};

struct MlpFieldConfig {
  std::size_t latent_dim = 16;
  std::size_t cond_dim = 64;
  std::size_t hidden = 128;
  std::size_t blocks = 3;
  std::size_t time_features = 16;  // sin/cos pairs
  friend bool operator==(const MlpFieldConfig&, const MlpFieldConfig&) = default;
};

// Residual MLP applied frame by frame to [z_t, embed(t), cond, partial].
class MlpVectorField final : public VectorField {
 public:
  MlpVectorField(const MlpFieldConfig& cfg, Rng& rng);

  ag::Var velocity(const ag::Var& z_t, std::span<const double> t, const ag::Var& cond,
                   const ag::Var& partial) const override;
  std::vector<ag::Var> params() const override;
  std::size_t latent_dim() const override { return cfg_.latent_dim; }
  std::size_t cond_dim() const override { return cfg_.cond_dim; }
  const MlpFieldConfig& config() const { return cfg_; }

  // Copies parameter values from another field of identical shape.
  void copy_from(const MlpVectorField& other);

 private:
  MlpFieldConfig cfg_;
  nn::Linear in_;
  std::vector<std::pair<nn::Linear, nn::Linear>> blocks_;
  nn::Linear out_;
};

// Wraps a plain function; carries no parameters. Handy for analytic fields.
class FunctionField final : public VectorField {
 public:
  using Fn = std::function<Mat(const Mat& z_t, std::span<const double> t, const Mat& cond, const Mat& partial)>;
  FunctionField(std::size_t latent_dim, std::size_t cond_dim, Fn fn)
      : latent_dim_(latent_dim), cond_dim_(cond_dim), fn_(std::move(fn)) {}

  ag::Var velocity(const ag::Var& z_t, std::span<const double> t, const ag::Var& cond,
                   const ag::Var& partial) const override {
    return ag::Var(fn_(z_t.value(), t, cond.value(), partial.value()));
  }
  std::size_t latent_dim() const override { return latent_dim_; }
  std::size_t cond_dim() const override { return cond_dim_; }

 private:
  std::size_t latent_dim_, cond_dim_;
  Fn fn_;
};

Mat time_embedding(std::span<const double> t, std::size_t features);

}  // namespace cadenza::flow
