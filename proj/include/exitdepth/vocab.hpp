#pragma once

namespace exitdepth::tokens {

// Reserved ids at the bottom of every vocabulary.
inline constexpr int pad = 0;
inline constexpr int bos = 1;
inline constexpr int eos = 2;
inline constexpr int unk = 3;
inline constexpr int first_content = 4;

}  // namespace exitdepth::tokens
