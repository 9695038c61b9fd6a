#include "cadenza/lyrics/tokenizer.hpp"

#include "cadenza/core/error.hpp"

namespace cadenza::lyrics {

std::vector<std::uint32_t> encode_bytes(std::string_view text) {
  std::vector<std::uint32_t> ids;
  ids.reserve(text.size());
  for (unsigned char c : text) ids.push_back(c);
  return ids;
}

std::vector<std::uint32_t> encode_lyrics(const LyricsDoc& doc) {
  const std::string text = serialize(doc);
  std::vector<std::uint32_t> ids;
  std::size_t start = 0;
  while (start < text.size()) {
    auto nl = text.find('\n', start);
    if (nl == std::string::npos) nl = text.size();
    std::string_view line(text.data() + start, nl - start);
    bool special = false;
    if (line.size() > 2 && line.front() == '[' && line.back() == ']') {
      auto m = SectionMarker::from_name(line.substr(1, line.size() - 2));
      if (m.kind != MarkerKind::Other && m.bracketed() == line) {
        ids.push_back(tok::kMarkerBase + static_cast<std::uint32_t>(m.kind));
        special = true;
      }
    }
    if (!special)
      for (unsigned char c : line) ids.push_back(c);
    if (nl < text.size()) ids.push_back('\n');
    start = nl + 1;
  }
  return ids;
}

std::string decode(const std::vector<std::uint32_t>& ids) {
  std::string out;
  for (auto id : ids) {
    if (id < 256) {
      out.push_back(static_cast<char>(id));
    } else if (id == tok::kTagOpen) {
      out += "<tag>";
    } else if (id == tok::kTagClose) {
      out += "</tag>";
    } else if (id < tok::kVocabSize) {
      out += SectionMarker::known(static_cast<MarkerKind>(id - tok::kMarkerBase)).bracketed();
    } else {
      throw Error(ErrorCode::IndexOutOfRange, "token id " + std::to_string(id));
    }
  }
  return out;
}

}  // namespace cadenza::lyrics
