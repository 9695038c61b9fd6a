#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cadenza/core/rng.hpp"
#include "cadenza/lyrics/lyrics.hpp"

namespace cadenza::lyrics {

enum class TagCategory { Gender, Genre, Instrument, Mood, Scene, SingerTimbre, Topic, Region };

inline constexpr std::array<TagCategory, 8> kAllCategories{
    TagCategory::Gender, TagCategory::Genre,        TagCategory::Instrument, TagCategory::Mood,
    TagCategory::Scene,  TagCategory::SingerTimbre, TagCategory::Topic,      TagCategory::Region};

std::string_view category_name(TagCategory c);
std::optional<TagCategory> parse_category(std::string_view name);

struct TagSet {
  std::map<TagCategory, std::vector<std::string>> entries;

  bool empty() const;  // true when no category holds a tag
  std::size_t tag_count() const;
  friend bool operator==(const TagSet&, const TagSet&) = default;
};

// "genre=pop,rock;mood=sad" -> TagSet. Throws BadConfig on unknown categories.
TagSet parse_tag_spec(std::string_view spec);

struct TagProbTable {
  std::map<TagCategory, double> probs;

  // Per-category selection probabilities used during LM conditioning.
  static TagProbTable defaults();
  static TagProbTable uniform(double p);
  double prob(TagCategory c) const;  // categories missing from the table are always kept
};

// One Bernoulli draw per category in kAllCategories order (whether or not the
// category is present), so the random stream consumed is independent of the
// tag content. Dropped categories keep their key with an empty list.
TagSet sample_tags(const TagSet& tags, const TagProbTable& table, Rng& rng);

enum class SegmentRole : std::uint8_t { Tag = 0, RefEmbed = 1, Lyrics = 2 };

struct CondSegment {
  SegmentRole role = SegmentRole::Tag;
  std::vector<std::uint32_t> tokens;  // Tag and Lyrics
  std::vector<float> embedding;       // RefEmbed
  friend bool operator==(const CondSegment&, const CondSegment&) = default;
};

struct CondSequence {
  std::vector<CondSegment> segments;

  // Number of prefix positions the sequence occupies in the LM: one per token,
  // one per reference embedding.
  std::size_t length() const;
  bool has(SegmentRole role) const;
  const CondSegment* find(SegmentRole role) const;
  friend bool operator==(const CondSequence&, const CondSequence&) = default;
};

// C = [C_tag, C_muq, C_lyrics]. The reference segment is dropped with
// probability drop_ref_prob (one uniform draw per call, always consumed).
CondSequence build_condition(const TagSet& tags, std::optional<std::span<const float>> ref_embed,
                             const LyricsDoc& lyrics, double drop_ref_prob, Rng& rng);

// Comma-joined tag text in canonical category order.
std::string join_tags(const TagSet& tags);

// "CSEQ" v1: u32 segment count, then per segment a role byte and a
// length-prefixed payload (u32 token ids or f32 values).
std::vector<std::uint8_t> encode_cond(const CondSequence& cond);
CondSequence decode_cond(std::span<const std::uint8_t> bytes);

}  // namespace cadenza::lyrics
