#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "cadenza/core/autograd.hpp"
#include "cadenza/core/mat.hpp"
#include "cadenza/rvq/features.hpp"

namespace cadenza::rvq {

struct CodebookSet {
  std::vector<Mat> books;  // K matrices, each V x C

  std::size_t num_books() const { return books.size(); }
  std::size_t vocab() const { return books.empty() ? 0 : books[0].rows; }
  std::size_t dim() const { return books.empty() ? 0 : books[0].cols; }
  // Throws BadConfig on empty/inconsistent shapes or non-finite entries.
  void validate() const;
};

struct TokenFrameSeq {
  std::size_t frames = 0;
  std::size_t num_books = 0;
  std::vector<std::uint32_t> indices;  // frames x num_books, row-major

  TokenFrameSeq() = default;
  TokenFrameSeq(std::size_t l, std::size_t k) : frames(l), num_books(k), indices(l * k, 0) {}

  std::uint32_t& at(std::size_t l, std::size_t k) { return indices[l * num_books + k]; }
  std::uint32_t at(std::size_t l, std::size_t k) const { return indices[l * num_books + k]; }
  std::span<const std::uint32_t> frame(std::size_t l) const { return {indices.data() + l * num_books, num_books}; }
  friend bool operator==(const TokenFrameSeq&, const TokenFrameSeq&) = default;
};

struct EncodeResult {
  TokenFrameSeq tokens;
  FeatureSeq quantized;
  std::vector<double> residual_norms;  // one per stage
};

// Greedy residual quantization; ties go to the lower index.
EncodeResult rvq_encode(const FeatureSeq& y, const CodebookSet& cb);
// Sums book_k[index_k] in stage order. Throws IndexOutOfRange.
FeatureSeq rvq_decode(const TokenFrameSeq& tokens, const CodebookSet& cb, double frame_rate = kLowRate);

// mean_t || sg(y_t) - y_hat_t ||^2
ag::Var commitment_loss(const ag::Var& y, const ag::Var& y_hat);
double commitment_loss(const FeatureSeq& y, const FeatureSeq& y_hat);

// -mean_t log sigmoid(cos(u_t, ref_t)). Throws DegenerateFrame on a frame with
// norm below 1e-12.
ag::Var alignment_loss(const ag::Var& u, const ag::Var& ref);
double alignment_loss(const FeatureSeq& u, const FeatureSeq& ref);

// Identity in the forward pass, passes the gradient of y_hat straight to y.
ag::Var straight_through(const ag::Var& y, const ag::Var& y_hat);

struct KMeansConfig {
  std::size_t num_books = 8;
  std::size_t vocab = 256;
  std::size_t iterations = 25;
  std::uint64_t seed = 0;
};

// Stage-wise k-means (k-means++ seeding, Lloyd iterations); stage k is fit on
// the residuals left by stages < k. Empty clusters keep their previous
// centroid. Throws EmptyCorpus.
CodebookSet train_codebooks(std::span<const FeatureSeq> corpus, const KMeansConfig& cfg);

std::vector<std::uint8_t> encode_codebooks(const CodebookSet& cb);
CodebookSet decode_codebooks(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_tokens(const TokenFrameSeq& t);
TokenFrameSeq decode_tokens(std::span<const std::uint8_t> bytes);

void save_codebooks(const std::filesystem::path& path, const CodebookSet& cb);
CodebookSet load_codebooks(const std::filesystem::path& path);
void save_tokens(const std::filesystem::path& path, const TokenFrameSeq& t);
TokenFrameSeq load_tokens(const std::filesystem::path& path);

}  // namespace cadenza::rvq
