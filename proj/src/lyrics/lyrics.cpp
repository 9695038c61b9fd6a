#include "cadenza/lyrics/lyrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <utility>

#include "cadenza/core/error.hpp"

namespace cadenza::lyrics {

namespace {

constexpr std::array<std::pair<MarkerKind, std::string_view>, 6> kKnown{{
    {MarkerKind::Intro, "Intro"},
    {MarkerKind::Verse, "Verse"},
    {MarkerKind::Prechorus, "Prechorus"},
    {MarkerKind::Chorus, "Chorus"},
    {MarkerKind::Bridge, "Bridge"},
    {MarkerKind::Outro, "Outro"},
}};

bool iequals(std::string_view a, std::string_view b) {
  return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
           return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
         });
}

std::string_view trim(std::string_view s) {
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && is_space(s.front())) s.remove_prefix(1);
  while (!s.empty() && is_space(s.back())) s.remove_suffix(1);
  return s;
}

std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) out.push_back(text.substr(start));
      break;
    }
    out.push_back(text.substr(start, nl - start));
    start = nl + 1;
  }
  for (auto& l : out)
    if (!l.empty() && l.back() == '\r') l.remove_suffix(1);
  return out;
}

bool is_blank(std::string_view line) { return trim(line).empty(); }

// Returns the inner text of a `[...]` line, or nullopt for ordinary lines.
std::optional<std::string_view> bracket_inner(std::string_view line, std::size_t line_no) {
  auto t = trim(line);
  if (t.empty() || t.front() != '[') return std::nullopt;
  auto close = t.find(']');
  if (close == std::string_view::npos)
    throw Error(ErrorCode::MalformedMarker, "line " + std::to_string(line_no) + ": '[' without ']'");
  if (close != t.size() - 1)
    throw Error(ErrorCode::MalformedMarker, "line " + std::to_string(line_no) + ": text after marker");
  auto inner = trim(t.substr(1, close - 1));
  if (inner.empty()) throw Error(ErrorCode::MalformedMarker, "line " + std::to_string(line_no) + ": empty marker");
  return inner;
}

std::optional<StyleAnnotation> as_annotation(std::string_view inner) {
  if (inner.find(',') == std::string_view::npos) return std::nullopt;
  StyleAnnotation ann;
  std::size_t start = 0;
  while (true) {
    auto comma = inner.find(',', start);
    auto piece = trim(inner.substr(start, comma == std::string_view::npos ? std::string_view::npos : comma - start));
    if (!piece.empty()) ann.phrases.emplace_back(piece);
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  if (ann.phrases.empty()) return std::nullopt;
  return ann;
}

void close_section(std::vector<Section>& sections) {
  if (sections.empty()) return;
  auto& lines = sections.back().lines;
  while (!lines.empty() && is_blank(lines.back())) lines.pop_back();
}

LyricsDoc parse_impl(std::string_view text, bool finegrained) {
  LyricsDoc doc;
  bool after_marker = false;
  std::size_t line_no = 0;
  for (auto line : split_lines(text)) {
    ++line_no;
    auto inner = bracket_inner(line, line_no);
    if (inner) {
      if (finegrained && after_marker) {
        if (auto ann = as_annotation(*inner)) {
          doc.sections.back().annotation = std::move(ann);
          after_marker = false;
          continue;
        }
      }
      close_section(doc.sections);
      doc.sections.push_back(Section{SectionMarker::from_name(*inner), std::nullopt, {}});
      after_marker = true;
      continue;
    }
    after_marker = false;
    if (doc.sections.empty()) {
      if (is_blank(line)) continue;  // leading blanks before any content
      doc.sections.push_back(Section{SectionMarker::other(std::string(kPreambleName)), std::nullopt, {}});
    }
    doc.sections.back().lines.emplace_back(is_blank(line) ? std::string_view{} : line);
  }
  close_section(doc.sections);
  return doc;
}

}  // namespace

SectionMarker SectionMarker::from_name(std::string_view name) {
  for (const auto& [kind, canon] : kKnown)
    if (iequals(name, canon)) return known(kind);
  return other(std::string(name));
}

std::string SectionMarker::display_name() const {
  for (const auto& [k, canon] : kKnown)
    if (k == kind) return std::string(canon);
  return name;
}

LyricsDoc parse_lyrics(std::string_view text) { return parse_impl(text, false); }

LyricsDoc parse_finegrained(std::string_view text) { return parse_impl(text, true); }

std::string serialize(const LyricsDoc& doc) {
  std::string out;
  for (std::size_t s = 0; s < doc.sections.size(); ++s) {
    const auto& sec = doc.sections[s];
    if (s > 0) out += "\n";
    const bool implicit_preamble = s == 0 && sec.marker == SectionMarker::other(std::string(kPreambleName)) &&
                                   !sec.annotation && !sec.lines.empty() && !sec.lines.front().empty();
    if (!implicit_preamble) out += sec.marker.bracketed() + "\n";
    if (sec.annotation) {
      out += "[";
      for (std::size_t i = 0; i < sec.annotation->phrases.size(); ++i) {
        if (i) out += ", ";
        out += sec.annotation->phrases[i];
      }
      out += "]\n";
    }
    for (const auto& l : sec.lines) out += l + "\n";
  }
  return out;
}

}  // namespace cadenza::lyrics
