#include "cadenza/lyrics/condition.hpp"

#include <algorithm>

#include "cadenza/core/binio.hpp"
#include "cadenza/core/error.hpp"
#include "cadenza/lyrics/tokenizer.hpp"

namespace cadenza::lyrics {

namespace {
constexpr std::uint16_t kCondVersion = 1;

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}
}  // namespace

std::string_view category_name(TagCategory c) {
  switch (c) {
    case TagCategory::Gender: return "gender";
    case TagCategory::Genre: return "genre";
    case TagCategory::Instrument: return "instrument";
    case TagCategory::Mood: return "mood";
    case TagCategory::Scene: return "scene";
    case TagCategory::SingerTimbre: return "singer_timbre";
    case TagCategory::Topic: return "topic";
    case TagCategory::Region: return "region";
  }
  return "?";
}

std::optional<TagCategory> parse_category(std::string_view name) {
  for (auto c : kAllCategories)
    if (category_name(c) == name) return c;
  if (name == "timbre") return TagCategory::SingerTimbre;
  return std::nullopt;
}

bool TagSet::empty() const { return tag_count() == 0; }

std::size_t TagSet::tag_count() const {
  std::size_t n = 0;
  for (const auto& [c, tags] : entries) n += tags.size();
  return n;
}

TagSet parse_tag_spec(std::string_view spec) {
  TagSet out;
  while (!spec.empty()) {
    auto semi = spec.find(';');
    auto item = trim(spec.substr(0, semi));
    spec = semi == std::string_view::npos ? std::string_view{} : spec.substr(semi + 1);
    if (item.empty()) continue;
    auto eq = item.find('=');
    if (eq == std::string_view::npos) throw Error(ErrorCode::BadConfig, "tag spec item without '=': " + std::string(item));
    auto cat = parse_category(trim(item.substr(0, eq)));
    if (!cat) throw Error(ErrorCode::BadConfig, "unknown tag category: " + std::string(item.substr(0, eq)));
    auto& list = out.entries[*cat];
    auto values = item.substr(eq + 1);
    while (!values.empty()) {
      auto comma = values.find(',');
      auto v = trim(values.substr(0, comma));
      if (!v.empty()) list.emplace_back(v);
      values = comma == std::string_view::npos ? std::string_view{} : values.substr(comma + 1);
    }
  }
  return out;
}

TagProbTable TagProbTable::defaults() {
  return TagProbTable{{{TagCategory::Genre, 0.95},
                       {TagCategory::SingerTimbre, 0.5},
                       {TagCategory::Gender, 0.375},
                       {TagCategory::Mood, 0.325},
                       {TagCategory::Instrument, 0.25},
                       {TagCategory::Scene, 0.2},
                       {TagCategory::Region, 0.125},
                       {TagCategory::Topic, 0.1}}};
}

TagProbTable TagProbTable::uniform(double p) {
  TagProbTable t;
  for (auto c : kAllCategories) t.probs[c] = p;
  return t;
}

double TagProbTable::prob(TagCategory c) const {
  auto it = probs.find(c);
  return it == probs.end() ? 1.0 : it->second;
}

TagSet sample_tags(const TagSet& tags, const TagProbTable& table, Rng& rng) {
  TagSet out;
  for (auto c : kAllCategories) {
    const bool keep = rng.uniform() < table.prob(c);
    auto it = tags.entries.find(c);
    if (it == tags.entries.end()) continue;
    out.entries[c] = keep ? it->second : std::vector<std::string>{};
  }
  return out;
}

std::string join_tags(const TagSet& tags) {
  std::string out;
  for (const auto& [c, list] : tags.entries)
    for (const auto& t : list) {
      if (!out.empty()) out += ", ";
      out += t;
    }
  return out;
}

std::size_t CondSequence::length() const {
  std::size_t n = 0;
  for (const auto& s : segments) n += s.role == SegmentRole::RefEmbed ? 1 : s.tokens.size();
  return n;
}

bool CondSequence::has(SegmentRole role) const { return find(role) != nullptr; }

const CondSegment* CondSequence::find(SegmentRole role) const {
  for (const auto& s : segments)
    if (s.role == role) return &s;
  return nullptr;
}

CondSequence build_condition(const TagSet& tags, std::optional<std::span<const float>> ref_embed,
                             const LyricsDoc& lyrics, double drop_ref_prob, Rng& rng) {
  CondSequence c;

  CondSegment tag{SegmentRole::Tag, {tok::kTagOpen}, {}};
  auto body = encode_bytes(join_tags(tags));
  tag.tokens.insert(tag.tokens.end(), body.begin(), body.end());
  tag.tokens.push_back(tok::kTagClose);
  c.segments.push_back(std::move(tag));

  const bool drop = rng.uniform() < drop_ref_prob;
  if (ref_embed && !drop)
    c.segments.push_back(CondSegment{SegmentRole::RefEmbed, {}, {ref_embed->begin(), ref_embed->end()}});

  c.segments.push_back(CondSegment{SegmentRole::Lyrics, encode_lyrics(lyrics), {}});
  return c;
}

std::vector<std::uint8_t> encode_cond(const CondSequence& cond) {
  ByteWriter w;
  w.magic("CSEQ", kCondVersion);
  w.u32(static_cast<std::uint32_t>(cond.segments.size()));
  for (const auto& s : cond.segments) {
    w.u8(static_cast<std::uint8_t>(s.role));
    if (s.role == SegmentRole::RefEmbed) {
      w.u32(static_cast<std::uint32_t>(s.embedding.size()));
      for (float x : s.embedding) w.f32(x);
    } else {
      w.u32(static_cast<std::uint32_t>(s.tokens.size()));
      for (auto t : s.tokens) w.u32(t);
    }
  }
  return w.bytes();
}

CondSequence decode_cond(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.expect_magic("CSEQ", kCondVersion);
  CondSequence c;
  const auto n = r.u32();
  for (std::uint32_t i = 0; i < n; ++i) {
    CondSegment s;
    const auto role = r.u8();
    if (role > 2) throw Error(ErrorCode::BadCheckpoint, "CSEQ: unknown segment role");
    s.role = static_cast<SegmentRole>(role);
    const auto len = r.u32();
    if (static_cast<std::size_t>(len) * 4 > r.remaining()) throw Error(ErrorCode::BadCheckpoint, "CSEQ: truncated");
    if (s.role == SegmentRole::RefEmbed) {
      s.embedding.resize(len);
      for (auto& x : s.embedding) x = r.f32();
    } else {
      s.tokens.resize(len);
      for (auto& t : s.tokens) {
        t = r.u32();
        if (t >= tok::kVocabSize) throw Error(ErrorCode::BadCheckpoint, "CSEQ: token out of vocabulary");
      }
    }
    c.segments.push_back(std::move(s));
  }
  if (!r.at_end()) throw Error(ErrorCode::BadCheckpoint, "CSEQ: trailing bytes");
  return c;
}

}  // namespace cadenza::lyrics
