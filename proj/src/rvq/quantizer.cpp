#include "cadenza/rvq/quantizer.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/core/rng.hpp"

namespace cadenza::rvq {

using namespace ag;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const RowMat> view(const Mat& m) { return {m.data.data(), Eigen::Index(m.rows), Eigen::Index(m.cols)}; }

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

std::size_t nearest(std::span<const double> x, const Mat& book) {
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t v = 0; v < book.rows; ++v) {
    const double d = sq_dist(x, book.row(v));
    if (d < best_d) {
      best_d = d;
      best = v;
    }
  }
  return best;
}

double mean_row_norm(const Mat& m) {
  if (m.rows == 0) return 0.0;
  double s = 0.0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double n2 = 0.0;
    for (double v : m.row(r)) n2 += v * v;
    s += std::sqrt(n2);
  }
  return s / static_cast<double>(m.rows);
}

void check_frames(const Mat& m) {
  for (std::size_t r = 0; r < m.rows; ++r) {
    double n2 = 0.0;
    for (double v : m.row(r)) n2 += v * v;
    if (std::sqrt(n2) < 1e-12) throw Error(ErrorCode::DegenerateFrame, "frame " + std::to_string(r) + " has zero norm");
  }
}

// Batched nearest-centroid assignment; ties resolve to the lower index.
std::vector<std::size_t> assign(const Mat& x, const Mat& centroids) {
  auto X = view(x);
  auto C = view(centroids);
  Eigen::VectorXd cn = C.rowwise().squaredNorm();
  RowMat dots = X * C.transpose();
  std::vector<std::size_t> out(x.rows);
  for (Eigen::Index i = 0; i < dots.rows(); ++i) {
    Eigen::Index best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index v = 0; v < dots.cols(); ++v) {
      const double d = cn(v) - 2.0 * dots(i, v);
      if (d < best_d) {
        best_d = d;
        best = v;
      }
    }
    out[std::size_t(i)] = std::size_t(best);
  }
  return out;
}

Mat kmeans(const Mat& x, std::size_t k, std::size_t iterations, Rng& rng) {
  const std::size_t n = x.rows;
  Mat c(k, x.cols);
  // k-means++ seeding
  std::vector<double> d2(n, std::numeric_limits<double>::infinity());
  std::size_t pick = rng.index(n);
  for (std::size_t j = 0; j < k; ++j) {
    std::copy(x.row(pick).begin(), x.row(pick).end(), c.row(j).begin());
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      d2[i] = std::min(d2[i], sq_dist(x.row(i), c.row(j)));
      total += d2[i];
    }
    if (j + 1 == k) break;
    if (total <= 0.0) {
      pick = rng.index(n);
      continue;
    }
    const double u = rng.uniform() * total;
    double cum = 0.0;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      cum += d2[i];
      if (cum > u) {
        pick = i;
        break;
      }
    }
  }
  for (std::size_t it = 0; it < iterations; ++it) {
    const auto labels = assign(x, c);
    Mat sums(k, x.cols);
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      auto s = sums.row(labels[i]);
      auto xi = x.row(i);
      for (std::size_t d = 0; d < x.cols; ++d) s[d] += xi[d];
      ++counts[labels[i]];
    }
    bool moved = false;
    for (std::size_t j = 0; j < k; ++j) {
      if (counts[j] == 0) continue;
      for (std::size_t d = 0; d < x.cols; ++d) {
        const double v = sums(j, d) / static_cast<double>(counts[j]);
        moved = moved || v != c(j, d);
        c(j, d) = v;
      }
    }
    if (!moved) break;
  }
  return c;
}

}  // namespace

void CodebookSet::validate() const {
  if (books.empty() || books[0].rows == 0 || books[0].cols == 0) throw Error(ErrorCode::BadConfig, "empty codebook set");
  for (const auto& b : books) {
    if (!b.same_shape(books[0])) throw Error(ErrorCode::BadConfig, "codebooks differ in shape");
    for (double v : b.data)
      if (!std::isfinite(v)) throw Error(ErrorCode::BadConfig, "non-finite codebook entry");
  }
}

EncodeResult rvq_encode(const FeatureSeq& y, const CodebookSet& cb) {
  if (cb.books.empty() || y.channels() != cb.dim()) throw Error(ErrorCode::DimMismatch, "feature width differs from codebooks");
  const std::size_t L = y.frames(), K = cb.num_books();
  EncodeResult res{TokenFrameSeq(L, K), FeatureSeq{Mat(L, y.channels()), y.frame_rate, y.pad_frames}, {}};
  Mat residual = y.data;
  for (std::size_t k = 0; k < K; ++k) {
    const Mat& book = cb.books[k];
    for (std::size_t t = 0; t < L; ++t) {
      const std::size_t idx = nearest(residual.row(t), book);
      res.tokens.at(t, k) = static_cast<std::uint32_t>(idx);
      auto r = residual.row(t);
      auto q = res.quantized.data.row(t);
      auto e = book.row(idx);
      for (std::size_t c = 0; c < r.size(); ++c) {
        r[c] -= e[c];
        q[c] += e[c];
      }
    }
    res.residual_norms.push_back(mean_row_norm(residual));
  }
  return res;
}

FeatureSeq rvq_decode(const TokenFrameSeq& tokens, const CodebookSet& cb, double frame_rate) {
  if (tokens.num_books != cb.num_books()) throw Error(ErrorCode::DimMismatch, "token depth differs from codebook count");
  FeatureSeq out{Mat(tokens.frames, cb.dim()), frame_rate, 0};
  for (std::size_t k = 0; k < tokens.num_books; ++k)
    for (std::size_t t = 0; t < tokens.frames; ++t) {
      const std::uint32_t idx = tokens.at(t, k);
      if (idx >= cb.vocab()) throw Error(ErrorCode::IndexOutOfRange, "token index " + std::to_string(idx));
      auto q = out.data.row(t);
      auto e = cb.books[k].row(idx);
      for (std::size_t c = 0; c < q.size(); ++c) q[c] += e[c];
    }
  return out;
}

Var commitment_loss(const Var& y, const Var& y_hat) {
  if (!y.value().same_shape(y_hat.value())) throw Error(ErrorCode::ShapeMismatch, "commitment loss operands");
  if (y.rows() == 0) return Var::scalar(0.0);
  return scale(sum(square(sub(stop_gradient(y), y_hat))), 1.0 / static_cast<double>(y.rows()));
}

double commitment_loss(const FeatureSeq& y, const FeatureSeq& y_hat) {
  return commitment_loss(Var(y.data), Var(y_hat.data)).item();
}

Var alignment_loss(const Var& u, const Var& ref) {
  if (!u.value().same_shape(ref.value())) throw Error(ErrorCode::ShapeMismatch, "alignment loss operands");
  check_frames(u.value());
  check_frames(ref.value());
  if (u.rows() == 0) return Var::scalar(0.0);
  return scale(mean(log_sigmoid(row_cosine(u, ref))), -1.0);
}

double alignment_loss(const FeatureSeq& u, const FeatureSeq& ref) { return alignment_loss(Var(u.data), Var(ref.data)).item(); }

Var straight_through(const Var& y, const Var& y_hat) {
  if (!y.value().same_shape(y_hat.value())) throw Error(ErrorCode::ShapeMismatch, "straight-through operands");
  return make_result(y_hat.value(), {y}, [](Node& self) {
    auto& g = self.parents[0]->grad_buffer();
    for (std::size_t i = 0; i < g.data.size(); ++i) g.data[i] += self.grad.data[i];
  });
}

CodebookSet train_codebooks(std::span<const FeatureSeq> corpus, const KMeansConfig& cfg) {
  std::size_t rows = 0, dim = 0;
  for (const auto& f : corpus) {
    if (f.frames() == 0) continue;
    if (dim != 0 && f.channels() != dim) throw Error(ErrorCode::DimMismatch, "corpus widths differ");
    dim = f.channels();
    rows += f.frames();
  }
  if (rows == 0) throw Error(ErrorCode::EmptyCorpus, "no frames to fit codebooks on");
  if (cfg.num_books == 0 || cfg.vocab == 0) throw Error(ErrorCode::BadConfig, "codebook count and vocab must be positive");
  Mat residual(rows, dim);
  std::size_t r = 0;
  for (const auto& f : corpus)
    for (std::size_t t = 0; t < f.frames(); ++t, ++r) std::copy(f.data.row(t).begin(), f.data.row(t).end(), residual.row(r).begin());

  Rng rng(cfg.seed);
  CodebookSet cb;
  for (std::size_t k = 0; k < cfg.num_books; ++k) {
    Mat book = kmeans(residual, cfg.vocab, cfg.iterations, rng);
    for (std::size_t i = 0; i < rows; ++i) {
      auto e = book.row(nearest(residual.row(i), book));
      auto x = residual.row(i);
      for (std::size_t d = 0; d < dim; ++d) x[d] -= e[d];
    }
    cb.books.push_back(std::move(book));
  }
  return cb;
}

std::vector<std::uint8_t> encode_codebooks(const CodebookSet& cb) {
  cb.validate();
  ByteWriter w;
  w.magic("RVQ1", 1);
  w.u32(static_cast<std::uint32_t>(cb.num_books()));
  w.u32(static_cast<std::uint32_t>(cb.vocab()));
  w.u32(static_cast<std::uint32_t>(cb.dim()));
  for (const auto& b : cb.books)
    for (double v : b.data) w.f32(static_cast<float>(v));
  return w.bytes();
}

CodebookSet decode_codebooks(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("RVQ1", 1);
  const std::size_t K = r.u32(), V = r.u32(), C = r.u32();
  if (K == 0 || V == 0 || C == 0 || r.remaining() != K * V * C * 4) throw Error(ErrorCode::BadCheckpoint, "codebook payload size");
  CodebookSet cb;
  for (std::size_t k = 0; k < K; ++k) {
    Mat b(V, C);
    for (auto& v : b.data) v = r.f32();
    cb.books.push_back(std::move(b));
  }
  cb.validate();
  return cb;
}

std::vector<std::uint8_t> encode_tokens(const TokenFrameSeq& t) {
  ByteWriter w;
  w.magic("TOKS", 1);
  w.u32(static_cast<std::uint32_t>(t.frames));
  w.u32(static_cast<std::uint32_t>(t.num_books));
  for (auto v : t.indices) w.u32(v);
  return w.bytes();
}

TokenFrameSeq decode_tokens(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("TOKS", 1);
  const std::size_t L = r.u32(), K = r.u32();
  if (r.remaining() != L * K * 4) throw Error(ErrorCode::BadCheckpoint, "token payload size");
  TokenFrameSeq t(L, K);
  for (auto& v : t.indices) v = r.u32();
  return t;
}

void save_codebooks(const std::filesystem::path& path, const CodebookSet& cb) { write_file(path, encode_codebooks(cb)); }
CodebookSet load_codebooks(const std::filesystem::path& path) { return decode_codebooks(read_file(path)); }
void save_tokens(const std::filesystem::path& path, const TokenFrameSeq& t) { write_file(path, encode_tokens(t)); }
TokenFrameSeq load_tokens(const std::filesystem::path& path) { return decode_tokens(read_file(path)); }

}  // namespace cadenza::rvq
