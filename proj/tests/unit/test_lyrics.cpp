#include <algorithm>
#include <string>

#include "cadenza/core/error.hpp"
#include "cadenza/lyrics/condition.hpp"
#include "cadenza/lyrics/lyrics.hpp"
#include "cadenza/lyrics/tokenizer.hpp"
#include "doctest.h"
#include "lyrics_corpus.hpp"

using namespace cadenza;
using namespace cadenza::lyrics;

TEST_CASE("structure box parses into six sections") {
  auto doc = parse_lyrics(testdata::kStructureBox);
  REQUIRE(doc.sections.size() == 6);
  const MarkerKind expected[] = {MarkerKind::Chorus, MarkerKind::Verse,  MarkerKind::Prechorus,
                                 MarkerKind::Chorus, MarkerKind::Bridge, MarkerKind::Outro};
  for (std::size_t i = 0; i < 6; ++i) CHECK(doc.sections[i].marker.kind == expected[i]);
  CHECK(doc.sections[5].lines.size() == 2);
  CHECK(doc.sections[5].lines[0] == "Cut the engine.");
  CHECK(doc.sections[1].lines.size() == 4);
}

TEST_CASE("fine-grained box binds one annotation per section") {
  auto doc = parse_finegrained(testdata::kFinegrainedBox);
  REQUIRE(doc.sections.size() == 6);
  REQUIRE(doc.sections[0].annotation.has_value());
  CHECK(doc.sections[0].marker.kind == MarkerKind::Intro);
  CHECK(doc.sections[0].annotation->phrases.size() == 4);
  CHECK(doc.sections[0].annotation->phrases[0] == "Subtle electronic pulse");
  CHECK(doc.sections[0].lines.size() == 2);
  for (const auto& s : doc.sections) CHECK(s.annotation.has_value());

  // Without annotation parsing, the style line becomes its own section.
  CHECK(parse_lyrics(testdata::kFinegrainedBox).sections.size() == 12);
}

TEST_CASE("plain lyrics carry no annotations") {
  auto doc = parse_finegrained(testdata::kStructureBox);
  for (const auto& s : doc.sections) CHECK_FALSE(s.annotation.has_value());
}

TEST_CASE("empty input and preamble handling") {
  CHECK(parse_lyrics("").sections.empty());
  CHECK(parse_lyrics("\n\n  \n").sections.empty());
  auto doc = parse_lyrics("\nhello\nworld\n\n[Verse]\nx\n");
  REQUIRE(doc.sections.size() == 2);
  CHECK(doc.sections[0].marker == SectionMarker::other("preamble"));
  CHECK(doc.sections[0].lines == std::vector<std::string>{"hello", "world"});
  CHECK(serialize(doc) == "hello\nworld\n\n[Verse]\nx\n");
}

TEST_CASE("markers round-trip case-insensitively and keep unknown names verbatim") {
  auto doc = parse_lyrics("[cHoRuS]\na\n[Pre-Chorus]\nb\n");
  CHECK(doc.sections[0].marker.kind == MarkerKind::Chorus);
  CHECK(doc.sections[1].marker == SectionMarker::other("Pre-Chorus"));
  CHECK(serialize(doc) == "[Chorus]\na\n\n[Pre-Chorus]\nb\n");
  CHECK(parse_lyrics(serialize(doc)) == doc);
}

TEST_CASE("blank lines inside sections survive, trailing ones do not") {
  auto doc = parse_lyrics("[Verse]\na\n\nb\n\n\n[Outro]\nz\n\n");
  CHECK(doc.sections[0].lines == std::vector<std::string>{"a", "", "b"});
  CHECK(doc.sections[1].lines == std::vector<std::string>{"z"});
}

TEST_CASE("malformed markers are rejected") {
  CHECK_THROWS_AS(parse_lyrics("[Verse\nabc\n"), Error);
  CHECK_THROWS_AS(parse_lyrics("[Verse] trailing words\n"), Error);
  CHECK_THROWS_AS(parse_finegrained("[]\n"), Error);
  try {
    parse_lyrics("ok\n[Chorus\n");
    FAIL("expected MalformedMarker");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::MalformedMarker);
  }
}

TEST_CASE("only the line directly after a marker can be an annotation") {
  auto doc = parse_finegrained("[Verse]\n[soft, warm]\nline\n[Chorus]\n\n[loud, big]\n");
  REQUIRE(doc.sections.size() == 3);
  CHECK(doc.sections[0].annotation->phrases == std::vector<std::string>{"soft", "warm"});
  CHECK_FALSE(doc.sections[1].annotation.has_value());
  CHECK(doc.sections[2].marker == SectionMarker::other("loud, big"));
  // a comma-free bracket line right after a marker is a new (empty) section
  auto two = parse_finegrained("[Intro]\n[Verse]\nx\n");
  CHECK(two.sections.size() == 2);
}

TEST_CASE("generated documents round-trip through serialize") {
  Rng rng(2024);
  for (int i = 0; i < 50; ++i) {
    auto gen = testdata::random_document(rng, i % 2 == 0);
    auto parsed = gen.finegrained ? parse_finegrained(gen.raw_text) : parse_lyrics(gen.raw_text);
    CHECK(serialize(parsed) == serialize(gen.doc));
    CHECK(parsed == gen.doc);
    auto again = gen.finegrained ? parse_finegrained(serialize(parsed)) : parse_lyrics(serialize(parsed));
    CHECK(again == parsed);
  }
}

TEST_CASE("stripping annotations leaves the section markers unchanged") {
  Rng rng(77);
  for (int i = 0; i < 20; ++i) {
    auto gen = testdata::random_document(rng, true);
    auto with = parse_finegrained(gen.raw_text);
    auto without = parse_finegrained(testdata::strip_annotations(gen.raw_text));
    REQUIRE(with.sections.size() == without.sections.size());
    for (std::size_t s = 0; s < with.sections.size(); ++s) {
      CHECK(with.sections[s].marker == without.sections[s].marker);
      CHECK_FALSE(without.sections[s].annotation.has_value());
    }
  }
}

TEST_CASE("lyrics tokenization keeps markers as single tokens") {
  auto doc = parse_lyrics("[Chorus]\nla\n[Hook]\nx\n");
  auto ids = encode_lyrics(doc);
  CHECK(ids.front() == tok::kMarkerBase + static_cast<std::uint32_t>(MarkerKind::Chorus));
  CHECK(decode(ids) == serialize(doc));
  // unknown markers stay as bytes
  CHECK(std::count(ids.begin(), ids.end(), static_cast<std::uint32_t>('[')) == 1);
}

TEST_CASE("tag sampling honours forced probabilities and seeds") {
  auto tags = parse_tag_spec("genre=pop,rock;mood=soft,warm;instrument=piano;topic=love");
  Rng r1(9);
  CHECK(sample_tags(tags, TagProbTable::uniform(1.0), r1) == tags);
  Rng r2(9);
  auto none = sample_tags(tags, TagProbTable::uniform(0.0), r2);
  CHECK(none.empty());
  CHECK(none.entries.size() == tags.entries.size());

  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i)
    CHECK(sample_tags(tags, TagProbTable::defaults(), a) == sample_tags(tags, TagProbTable::defaults(), b));
}

TEST_CASE("default tag table matches the published selection probabilities") {
  auto t = TagProbTable::defaults();
  CHECK(t.prob(TagCategory::Genre) == 0.95);
  CHECK(t.prob(TagCategory::SingerTimbre) == 0.5);
  CHECK(t.prob(TagCategory::Gender) == 0.375);
  CHECK(t.prob(TagCategory::Mood) == 0.325);
  CHECK(t.prob(TagCategory::Instrument) == 0.25);
  CHECK(t.prob(TagCategory::Scene) == 0.2);
  CHECK(t.prob(TagCategory::Region) == 0.125);
  CHECK(t.prob(TagCategory::Topic) == 0.1);
}

TEST_CASE("genre keep-rate converges to its table probability") {
  auto tags = parse_tag_spec("genre=pop");
  Rng rng(5);
  int kept = 0;
  const int n = 100000;
  for (int i = 0; i < n; ++i) kept += !sample_tags(tags, TagProbTable::defaults(), rng).empty();
  CHECK(std::abs(kept / double(n) - 0.95) < 0.01);
}

TEST_CASE("condition sequence structure") {
  auto tags = parse_tag_spec("genre=pop;mood=soft");
  auto doc = parse_lyrics(testdata::kStructureBox);
  std::vector<float> ref(8, 0.5f);
  Rng rng(1);

  auto c = build_condition(tags, std::span<const float>(ref), doc, 0.0, rng);
  REQUIRE(c.segments.size() == 3);
  CHECK(c.segments[0].role == SegmentRole::Tag);
  CHECK(c.segments[1].role == SegmentRole::RefEmbed);
  CHECK(c.segments[2].role == SegmentRole::Lyrics);
  CHECK(c.segments[0].tokens.front() == tok::kTagOpen);
  CHECK(c.segments[0].tokens.back() == tok::kTagClose);
  CHECK(decode(c.segments[0].tokens) == "<tag>pop, soft</tag>");
  CHECK(c.length() == c.segments[0].tokens.size() + 1 + c.segments[2].tokens.size());

  CHECK_FALSE(build_condition(tags, std::span<const float>(ref), doc, 1.0, rng).has(SegmentRole::RefEmbed));
  CHECK_FALSE(build_condition(tags, std::nullopt, doc, 0.0, rng).has(SegmentRole::RefEmbed));

  auto empty = build_condition(TagSet{}, std::nullopt, doc, 0.0, rng);
  CHECK(empty.segments[0].tokens == std::vector<std::uint32_t>{tok::kTagOpen, tok::kTagClose});
}

TEST_CASE("segment order does not depend on tag order") {
  auto doc = parse_lyrics("[Verse]\nx\n");
  std::vector<float> ref(4, 1.0f);
  Rng r1(3), r2(3);
  auto a = build_condition(parse_tag_spec("genre=a,b,c"), std::span<const float>(ref), doc, 0.5, r1);
  auto b = build_condition(parse_tag_spec("genre=c,a,b"), std::span<const float>(ref), doc, 0.5, r2);
  REQUIRE(a.segments.size() == b.segments.size());
  for (std::size_t i = 0; i < a.segments.size(); ++i) CHECK(a.segments[i].role == b.segments[i].role);
}

TEST_CASE("reference presence rate at drop probability one half") {
  auto doc = parse_lyrics("[Verse]\nx\n");
  std::vector<float> ref(4, 1.0f);
  Rng rng(11);
  int present = 0;
  for (int i = 0; i < 10000; ++i)
    present += build_condition(TagSet{}, std::span<const float>(ref), doc, 0.5, rng).has(SegmentRole::RefEmbed);
  CHECK(std::abs(present / 10000.0 - 0.5) < 0.02);
}

TEST_CASE("CSEQ records round-trip and reject corruption") {
  auto doc = parse_lyrics(testdata::kStructureBox);
  std::vector<float> ref{0.25f, -1.5f, 3.0f};
  Rng rng(1);
  auto c = build_condition(parse_tag_spec("genre=pop"), std::span<const float>(ref), doc, 0.0, rng);
  auto bytes = encode_cond(c);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "CSEQ");
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);
  CHECK(decode_cond(bytes) == c);

  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_cond(bad), Error);
  auto future = bytes;
  future[4] = 9;
  CHECK_THROWS_AS(decode_cond(future), Error);
  bytes.pop_back();
  CHECK_THROWS_AS(decode_cond(bytes), Error);
}
