#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cadenza::lyrics {

enum class MarkerKind { Intro, Verse, Prechorus, Chorus, Bridge, Outro, Other };

struct SectionMarker {
  MarkerKind kind = MarkerKind::Other;
  std::string name;  // verbatim, only meaningful for Other

  static SectionMarker known(MarkerKind k) { return {k, {}}; }
  static SectionMarker other(std::string n) { return {MarkerKind::Other, std::move(n)}; }

  // Accepts the inner name of a `[Name]` marker; known names match case-insensitively.
  static SectionMarker from_name(std::string_view name);
  // Canonical display name ("Chorus", or the verbatim Other name).
  std::string display_name() const;
  std::string bracketed() const { return "[" + display_name() + "]"; }

  friend bool operator==(const SectionMarker& a, const SectionMarker& b) {
    return a.kind == b.kind && (a.kind != MarkerKind::Other || a.name == b.name);
  }
};

struct StyleAnnotation {
  std::vector<std::string> phrases;
  friend bool operator==(const StyleAnnotation&, const StyleAnnotation&) = default;
};

struct Section {
  SectionMarker marker;
  std::optional<StyleAnnotation> annotation;
  std::vector<std::string> lines;
  friend bool operator==(const Section&, const Section&) = default;
};

struct LyricsDoc {
  std::vector<Section> sections;
  friend bool operator==(const LyricsDoc&, const LyricsDoc&) = default;
};

inline constexpr std::string_view kPreambleName = "preamble";

// Every `[Name]` line opens a section. Lines before the first marker form an
// implicit other("preamble") section. Trailing blank lines of a section are
// dropped; interior blank lines are kept as empty strings.
// Throws Error(MalformedMarker) for a line starting with `[` that is not a
// complete `[Name]` line.
LyricsDoc parse_lyrics(std::string_view text);

// As parse_lyrics, but a bracketed comma list on the line directly after a
// marker binds to that section as its StyleAnnotation.
LyricsDoc parse_finegrained(std::string_view text);

// Canonical text form: sections separated by one blank line, known markers in
// canonical case, annotation as `[a, b, c]`, trailing newline.
std::string serialize(const LyricsDoc& doc);

}  // namespace cadenza::lyrics
