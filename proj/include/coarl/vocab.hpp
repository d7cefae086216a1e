#pragma once

namespace coarl {

// Byte-level vocabulary: ids 0..255 are raw bytes, followed by three specials.
inline constexpr int kByteCount = 256;
inline constexpr int kPadId = 256;
inline constexpr int kBosId = 257;
inline constexpr int kEosId = 258;
inline constexpr int kVocabSize = 259;

}  // namespace coarl
