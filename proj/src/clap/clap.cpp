#include "cadenza/clap/clap.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "json.hpp"

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/core/optim.hpp"

namespace cadenza::clap {

using namespace ag;
using lyrics::TagCategory;
using lyrics::TagSet;

void MaskingConfig::validate() const {
  if (!(p_a >= 0.0 && p_a <= 1.0 && p_t >= 0.0 && p_t <= 1.0))
    throw Error(ErrorCode::BadConfig, "masking probabilities must lie in [0, 1]");
}

TagSet mask_description(const TagSet& tags, const MaskingConfig& cfg, Rng& rng) {
  cfg.validate();
  TagSet out;
  for (const auto& [cat, list] : tags.entries) {
    if (list.empty()) continue;
    if (rng.bernoulli(cfg.p_a)) continue;
    std::vector<std::string> kept;
    if (list.size() == 1) {
      kept = list;
    } else {
      for (const auto& t : list)
        if (!rng.bernoulli(cfg.p_t)) kept.push_back(t);
    }
    if (!kept.empty()) out.entries[cat] = std::move(kept);
  }
  return out;
}

namespace {

std::string join(const std::vector<std::string>& v, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += sep;
    out += v[i];
  }
  return out;
}

std::string sentence_part(TagCategory c, const std::string& x) {
  switch (c) {
    case TagCategory::Gender: return "a " + x + " gender";
    case TagCategory::Genre: return "with " + x + " genre";
    case TagCategory::Instrument: return "the instrument is " + x;
    case TagCategory::Mood: return "a " + x + " mood";
    case TagCategory::Scene: return "suitable for " + x + " scene";
    case TagCategory::SingerTimbre: return "a " + x + " singer timbre";
    case TagCategory::Topic: return "about " + x;
    case TagCategory::Region: return "with " + x + " regional color";
  }
  return x;
}

}  // namespace

std::string format_description(const TagSet& tags, DescriptionStyle style) {
  std::vector<std::string> parts;
  for (auto c : lyrics::kAllCategories) {
    auto it = tags.entries.find(c);
    if (it == tags.entries.end() || it->second.empty()) continue;
    switch (style) {
      case DescriptionStyle::LabeledTags: parts.push_back(std::string(lyrics::category_name(c)) + ": " + join(it->second, ", ")); break;
      case DescriptionStyle::BareTags: parts.push_back(join(it->second, ", ")); break;
      case DescriptionStyle::Sentence: parts.push_back(sentence_part(c, join(it->second, " and "))); break;
    }
  }
  if (parts.empty()) return "";
  if (style == DescriptionStyle::Sentence) return "The music features " + join(parts, ", ");
  return join(parts, ", ");
}

std::string format_description(const TagSet& tags, std::optional<DescriptionStyle> style, Rng& rng) {
  if (!style) style = static_cast<DescriptionStyle>(rng.index(3));
  return format_description(tags, *style);
}

std::vector<std::uint32_t> text_tokens(std::string_view text, std::size_t buckets) {
  if (buckets == 0) throw Error(ErrorCode::BadConfig, "text buckets must be positive");
  std::vector<std::uint32_t> out;
  std::uint64_t h = 0;
  bool in_word = false;
  const auto flush = [&] {
    if (in_word) out.push_back(static_cast<std::uint32_t>(h % buckets));
    in_word = false;
  };
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isalnum(u) || u == '_' || u >= 0x80) {
      if (!in_word) h = 1469598103934665603ull;
      h = (h ^ static_cast<std::uint64_t>(std::tolower(u))) * 1099511628211ull;
      in_word = true;
    } else {
      flush();
    }
  }
  flush();
  return out;
}

DualEncoder::DualEncoder(const DualEncoderConfig& cfg, Rng& rng)
    : word_embed(Var::param(rng.normal_mat(cfg.text_buckets, cfg.text_embed_dim, 1.0))),
      music_proj(cfg.feature_dim, cfg.proj_dim, rng),
      text_proj(cfg.text_embed_dim, cfg.proj_dim, rng),
      log_tau(Var::param(Mat(1, 1, std::log(cfg.tau_init)))),
      cfg_(cfg) {
  if (!(cfg.tau_init >= kTauMin && cfg.tau_init <= kTauMax)) throw Error(ErrorCode::BadConfig, "tau_init outside [1e-2, 100]");
}

Var DualEncoder::encode_music(std::span<const rvq::FeatureSeq> music) const {
  if (music.empty()) throw Error(ErrorCode::BatchMismatch, "empty music batch");
  std::vector<Var> rows;
  for (const auto& m : music) {
    if (m.data.cols != cfg_.feature_dim) throw Error(ErrorCode::DimMismatch, "music feature width");
    if (m.data.rows == 0) throw Error(ErrorCode::DimMismatch, "music clip without frames");
    rows.push_back(mean_rows(Var(m.data)));
  }
  return l2_normalize_rows(music_proj(rows.size() == 1 ? rows[0] : concat_rows(rows)));
}

Var DualEncoder::encode_text(std::span<const std::string> texts) const {
  if (texts.empty()) throw Error(ErrorCode::BatchMismatch, "empty text batch");
  std::vector<Var> rows;
  for (const auto& t : texts) {
    auto ids = text_tokens(t, cfg_.text_buckets);
    if (ids.empty()) {
      rows.push_back(Var(Mat(1, cfg_.text_embed_dim)));
      continue;
    }
    std::vector<std::size_t> idx(ids.begin(), ids.end());
    rows.push_back(mean_rows(gather_rows(word_embed, idx)));
  }
  return l2_normalize_rows(text_proj(rows.size() == 1 ? rows[0] : concat_rows(rows)));
}

Var DualEncoder::tau() const { return exp(clamp(log_tau, std::log(kTauMin), std::log(kTauMax))); }

std::vector<Var> DualEncoder::params() const {
  std::vector<Var> out{word_embed};
  music_proj.collect(out);
  text_proj.collect(out);
  out.push_back(log_tau);
  return out;
}

Var infonce_loss(const Var& music, const Var& text, const Var& tau) {
  if (music.rows() != text.rows() || music.cols() != text.cols() || music.rows() == 0)
    throw Error(ErrorCode::BatchMismatch, "music and text batches differ");
  const std::size_t n = music.rows();
  std::vector<std::size_t> diag(n);
  for (std::size_t i = 0; i < n; ++i) diag[i] = i;
  auto s = scale_by(matmul_nt(music, text), reciprocal(tau));  // s_ij = cos(m_i, t_j) / tau
  auto m2t = sum(logsoftmax_pick(s, diag));
  auto t2m = sum(logsoftmax_pick(transpose(s), diag));
  return scale(add(m2t, t2m), -1.0);
}

double infonce_loss(const Mat& music, const Mat& text, double tau) {
  return infonce_loss(Var(music), Var(text), Var(Mat(1, 1, tau))).item();
}

std::string RetrievalReport::to_json() const {
  const auto dir = [](const DirectionMetrics& d) {
    nlohmann::json j;
    for (const auto& [k, v] : d.recall) j["R@" + std::to_string(k)] = v;
    j["mAP@10"] = d.map10;
    return j;
  };
  return nlohmann::json{{"text_to_music", dir(text_to_music)}, {"music_to_text", dir(music_to_text)}}.dump(2);
}

namespace {

Mat unit_rows(const Mat& m) {
  Mat out = m;
  for (std::size_t r = 0; r < m.rows; ++r) {
    double n = 0.0;
    for (double x : m.row(r)) n += x * x;
    n = std::sqrt(n);
    if (n > 0.0)
      for (auto& x : out.row(r)) x /= n;
  }
  return out;
}

// Queries are rows of q, candidates rows of c; the match of query i is row i.
DirectionMetrics rank_direction(const Mat& q, const Mat& c, std::span<const std::size_t> ks) {
  const std::size_t n = q.rows;
  std::vector<std::size_t> ranks(n);
  std::vector<double> s(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0.0;
      for (std::size_t x = 0; x < q.cols; ++x) d += q(i, x) * c(j, x);
      s[j] = d;
    }
    std::size_t rank = 1;
    for (std::size_t j = 0; j < n; ++j)
      if (s[j] > s[i] || (s[j] == s[i] && j < i)) ++rank;
    ranks[i] = rank;
  }
  DirectionMetrics d;
  for (auto k : ks) {
    double hit = 0.0;
    for (auto r : ranks) hit += r <= k ? 1.0 : 0.0;
    d.recall[k] = hit / static_cast<double>(n);
  }
  for (auto r : ranks) d.map10 += r <= 10 ? 1.0 / static_cast<double>(r) : 0.0;
  d.map10 /= static_cast<double>(n);
  return d;
}

}  // namespace

RetrievalReport retrieval_metrics(const Mat& music, const Mat& text, std::span<const std::size_t> ks) {
  if (music.rows == 0 || music.rows != text.rows || music.cols != text.cols)
    throw Error(ErrorCode::DimMismatch, "retrieval matrices differ in shape");
  const Mat m = unit_rows(music), t = unit_rows(text);
  return {rank_direction(t, m, ks), rank_direction(m, t, ks)};
}

namespace {

struct TagPool {
  TagCategory cat;
  std::vector<std::string> names;
  std::size_t min_count, max_count;
};

const std::vector<TagPool>& tag_pools() {
  static const std::vector<TagPool> pools{
      {TagCategory::Gender, {"male", "female"}, 1, 1},
      {TagCategory::Genre, {"pop", "rock", "jazz", "folk", "hiphop", "electronic", "classical", "blues"}, 1, 1},
      {TagCategory::Mood, {"soft", "warm", "sad", "happy", "energetic", "calm", "dark", "romantic"}, 1, 2},
      {TagCategory::Instrument, {"piano", "guitar", "drum", "violin", "synth", "bass", "flute", "saxophone"}, 1, 3},
  };
  return pools;
}

}  // namespace

std::vector<ClapExample> synthetic_pairs(std::size_t n, std::size_t frames, std::size_t feature_dim, std::uint64_t seed) {
  if (frames == 0 || feature_dim == 0) throw Error(ErrorCode::BadConfig, "synthetic pairs need frames and width");
  constexpr std::size_t kLatent = 16;
  Rng rng(seed);
  // A latent vector per tag and one fixed projection to feature space.
  std::map<std::string, Mat> latent;
  for (const auto& p : tag_pools())
    for (const auto& name : p.names) latent[name] = rng.normal_mat(1, kLatent);
  Mat proj = rng.normal_mat(kLatent, feature_dim, 1.0 / std::sqrt(static_cast<double>(kLatent)));

  std::vector<ClapExample> out;
  for (std::size_t i = 0; i < n; ++i) {
    ClapExample ex;
    Mat z(1, kLatent);
    for (const auto& p : tag_pools()) {
      const std::size_t count = p.min_count + rng.index(p.max_count - p.min_count + 1);
      std::vector<std::string> chosen;
      while (chosen.size() < count) {
        const auto& name = p.names[rng.index(p.names.size())];
        if (std::find(chosen.begin(), chosen.end(), name) == chosen.end()) chosen.push_back(name);
      }
      std::sort(chosen.begin(), chosen.end());
      for (const auto& c : chosen)
        for (std::size_t d = 0; d < kLatent; ++d) z.data[d] += latent[c].data[d];
      ex.tags.entries[p.cat] = chosen;
    }
    Mat feats(frames, feature_dim);
    for (std::size_t t = 0; t < frames; ++t)
      for (std::size_t f = 0; f < feature_dim; ++f) {
        double v = 0.0;
        for (std::size_t d = 0; d < kLatent; ++d) v += z.data[d] * proj(d, f);
        feats(t, f) = v + 0.3 * rng.normal();
      }
    ex.music = {std::move(feats), rvq::kHighRate, 0};
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<ClapStep> train_clap(DualEncoder& enc, std::span<const ClapExample> data, const ClapTrainConfig& cfg,
                                 const std::function<void(const ClapStep&)>& on_step) {
  if (data.empty()) throw Error(ErrorCode::EmptyCorpus, "no CLAP training pairs");
  cfg.masking.validate();
  auto params = enc.params();
  Adam opt(params, AdamConfig{cfg.lr});
  Rng rng(cfg.seed);
  const std::size_t b = std::min(cfg.batch == 0 ? data.size() : cfg.batch, data.size());
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<ClapStep> history;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    // Distinct items per batch: a partial Fisher-Yates shuffle.
    for (std::size_t i = 0; i < b; ++i) std::swap(order[i], order[i + rng.index(order.size() - i)]);
    std::vector<rvq::FeatureSeq> music;
    std::vector<std::string> text;
    for (std::size_t i = 0; i < b; ++i) {
      const auto& ex = data[order[i]];
      music.push_back(ex.music);
      text.push_back(format_description(mask_description(ex.tags, cfg.masking, rng), std::nullopt, rng));
    }
    opt.zero_grad();
    auto loss = infonce_loss(enc.encode_music(music), enc.encode_text(text), enc.tau());
    loss.backward();
    opt.step();
    ClapStep rec{step, loss.item(), enc.tau_value()};
    if (on_step) on_step(rec);
    history.push_back(rec);
  }
  return history;
}

RetrievalReport evaluate(const DualEncoder& enc, std::span<const ClapExample> data, std::span<const std::size_t> ks) {
  std::vector<rvq::FeatureSeq> music;
  std::vector<std::string> text;
  for (const auto& ex : data) {
    music.push_back(ex.music);
    text.push_back(format_description(ex.tags, DescriptionStyle::LabeledTags));
  }
  return retrieval_metrics(enc.encode_music(music).value(), enc.encode_text(text).value(), ks);
}

std::vector<std::uint8_t> encode_embeddings(const Mat& m) {
  ByteWriter w;
  w.magic("CEMB", 1);
  w.mat_f32(m);
  return w.bytes();
}

Mat decode_embeddings(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CEMB", 1);
  Mat m = r.mat_f32();
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes in embedding dump");
  return m;
}

std::vector<std::uint8_t> encode_encoder(const DualEncoder& e) {
  ByteWriter w;
  w.magic("CLAP", 1);
  const auto& c = e.config();
  for (auto v : {c.feature_dim, c.proj_dim, c.text_buckets, c.text_embed_dim}) w.u32(static_cast<std::uint32_t>(v));
  w.f64(c.tau_init);
  nn::write_params(w, e.params());
  return w.bytes();
}

DualEncoder decode_encoder(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CLAP", 1);
  DualEncoderConfig c;
  c.feature_dim = r.u32();
  c.proj_dim = r.u32();
  c.text_buckets = r.u32();
  c.text_embed_dim = r.u32();
  c.tau_init = r.f64();
  Rng rng(0);
  DualEncoder e(c, rng);
  auto params = e.params();
  nn::read_params(r, params);
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "trailing bytes in encoder checkpoint");
  return e;
}

}  // namespace cadenza::clap
