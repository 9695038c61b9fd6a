#include "cadenza/flow/codec.hpp"

#include <Eigen/Dense>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"

namespace cadenza::flow {

LatentSeq LatentCodec::encode(std::span<const double> signal) const {
  const std::size_t n = chunk(), frames = (signal.size() + n - 1) / n;
  LatentSeq z{Mat(frames, dim())};
  std::vector<double> buf(n);
  for (std::size_t f = 0; f < frames; ++f) {
    for (std::size_t s = 0; s < n; ++s) {
      const std::size_t i = f * n + s;
      buf[s] = (i < signal.size() ? signal[i] : 0.0) - mean.data[s];
    }
    for (std::size_t d = 0; d < dim(); ++d) {
      double acc = 0.0;
      for (std::size_t s = 0; s < n; ++s) acc += buf[s] * basis(s, d);
      z.data(f, d) = acc;
    }
  }
  return z;
}

std::vector<double> LatentCodec::decode(const LatentSeq& z) const {
  const std::size_t n = chunk();
  std::vector<double> out(z.frames() * n);
  for (std::size_t f = 0; f < z.frames(); ++f)
    for (std::size_t s = 0; s < n; ++s) {
      double acc = bias.data[s];
      for (std::size_t d = 0; d < dim(); ++d) acc += z.data(f, d) * decoder(s, d);
      out[f * n + s] = acc;
    }
  return out;
}

ag::Var LatentCodec::decode_var(const ag::Var& z, const ag::Var& decoder, const ag::Var& bias) {
  auto frames = ag::add_rowvec(ag::matmul_nt(z, decoder), bias);
  return ag::reshape(frames, 1, frames.rows() * frames.cols());
}

LatentCodec fit_codec(std::span<const std::vector<double>> corpus, std::size_t chunk, std::size_t dim) {
  if (chunk == 0 || dim == 0 || dim > chunk) throw Error(ErrorCode::BadConfig, "codec needs 0 < dim <= chunk");
  std::vector<const double*> rows;
  for (const auto& sig : corpus)
    for (std::size_t s = 0; s + chunk <= sig.size(); s += chunk) rows.push_back(sig.data() + s);
  if (rows.empty()) throw Error(ErrorCode::EmptyCorpus, "no full chunk in codec corpus");

  Eigen::VectorXd mu = Eigen::VectorXd::Zero(Eigen::Index(chunk));
  for (const auto* r : rows) mu += Eigen::Map<const Eigen::VectorXd>(r, Eigen::Index(chunk));
  mu /= static_cast<double>(rows.size());
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(Eigen::Index(chunk), Eigen::Index(chunk));
  for (const auto* r : rows) {
    Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(r, Eigen::Index(chunk)) - mu;
    cov.noalias() += x * x.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  LatentCodec c{Mat(chunk, dim), Mat(1, chunk), {}, {}};
  // eigenvalues ascend; keep the top `dim`
  for (std::size_t d = 0; d < dim; ++d) {
    const Eigen::Index col = Eigen::Index(chunk - 1 - d);
    for (std::size_t s = 0; s < chunk; ++s) c.basis(s, d) = eig.eigenvectors()(Eigen::Index(s), col);
  }
  for (std::size_t s = 0; s < chunk; ++s) c.mean.data[s] = mu(Eigen::Index(s));
  c.decoder = c.basis;
  c.bias = c.mean;
  return c;
}

std::vector<std::uint8_t> encode_codec(const LatentCodec& c) {
  ByteWriter w;
  w.magic("LCDC", 1);
  w.mat_f32(c.basis);
  w.mat_f32(c.mean);
  w.mat_f32(c.decoder);
  w.mat_f32(c.bias);
  return w.bytes();
}

LatentCodec decode_codec(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("LCDC", 1);
  LatentCodec c;
  c.basis = r.mat_f32();
  c.mean = r.mat_f32();
  c.decoder = r.mat_f32();
  c.bias = r.mat_f32();
  if (c.mean.rows != 1 || c.mean.cols != c.basis.rows || !c.decoder.same_shape(c.basis) || !c.bias.same_shape(c.mean) ||
      !r.at_end()) throw Error(ErrorCode::BadCheckpoint, "codec layout");
  return c;
}

}  // namespace cadenza::flow
