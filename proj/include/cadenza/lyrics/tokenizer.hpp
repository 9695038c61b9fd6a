#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "cadenza/lyrics/lyrics.hpp"

namespace cadenza::lyrics {

// Byte-level tokenizer: ids 0..255 are raw bytes, followed by reserved ids for
// the tag delimiters and one id per known section marker.
namespace tok {
inline constexpr std::uint32_t kTagOpen = 256;
inline constexpr std::uint32_t kTagClose = 257;
inline constexpr std::uint32_t kMarkerBase = 258;  // + MarkerKind (Intro..Outro)
inline constexpr std::uint32_t kVocabSize = 264;
}  // namespace tok

std::vector<std::uint32_t> encode_bytes(std::string_view text);

// Serializes the document and tokenizes it; known marker lines become single
// marker tokens, everything else is bytes.
std::vector<std::uint32_t> encode_lyrics(const LyricsDoc& doc);

// Inverse rendering for diagnostics: specials print as `<tag>`, `</tag>` and
// `[Chorus]`-style markers.
std::string decode(const std::vector<std::uint32_t>& ids);

}  // namespace cadenza::lyrics
