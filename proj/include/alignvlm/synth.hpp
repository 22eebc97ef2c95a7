#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "alignvlm/image.hpp"
#include "alignvlm/model.hpp"
#include "alignvlm/rng.hpp"

namespace alignvlm {

// Glyph cell geometry: 3×4 grid of 3×3 bit blocks plus a fixed baseline bar,
// drawn inside a 14×14 cell.
inline constexpr std::uint32_t kGlyphCell = 14;
inline constexpr std::uint32_t kGlyphBits = 12;
inline constexpr std::size_t kMaxGlyphVocab = std::size_t{1} << kGlyphBits;

/// Deterministic bitmap (kGlyphCell² bytes, 0 or 255) for a token id. The
/// map is injective for ids below kMaxGlyphVocab.
inline std::vector<std::uint8_t> glyph_bitmap(std::size_t id) {
  if (id >= kMaxGlyphVocab) {
    throw InputError("glyph alphabet covers ids below " + std::to_string(kMaxGlyphVocab));
  }
  std::vector<std::uint8_t> bmp(kGlyphCell * kGlyphCell, 0);
  for (std::uint32_t bit = 0; bit < kGlyphBits; ++bit) {
    if (!((id >> bit) & 1U)) continue;
    const std::uint32_t by = 1 + 3 * (bit / 4), bx = 1 + 3 * (bit % 4);
    for (std::uint32_t y = by; y < by + 3; ++y)
      for (std::uint32_t x = bx; x < bx + 3; ++x) bmp[y * kGlyphCell + x] = 255;
  }
  for (std::uint32_t x = 1; x < 13; ++x) bmp[11 * kGlyphCell + x] = 255;
  return bmp;
}

enum class DocStyle { Caption, Page, Instruction };

inline std::string_view style_name(DocStyle s) {
  switch (s) {
    case DocStyle::Caption: return "caption";
    case DocStyle::Page: return "page";
    case DocStyle::Instruction: return "instruction";
  }
  return "?";
}

inline DocStyle parse_style(std::string_view s) {
  for (auto st : {DocStyle::Caption, DocStyle::Page, DocStyle::Instruction})
    if (style_name(st) == s) return st;
  throw InputError("unknown document style '" + std::string(s) + "'");
}

struct SynthDoc {
  std::uint64_t seed = 0;
  DocStyle style = DocStyle::Page;
  Image image;
  std::vector<std::size_t> target;  // glyph ids in reading order

  std::vector<std::size_t> prompt() const {
    // The query marker takes the place of BOS so text positions keep their
    // offset from the vision tokens across styles.
    if (style == DocStyle::Instruction) return {kQueryToken};
    return {kBosToken};
  }
};

/// Renders `num_tokens` random glyph tokens row-major into a side×side page,
/// one glyph per patch cell, white strokes on a black background.
inline SynthDoc synth_document(std::uint64_t seed, std::size_t num_tokens, std::size_t vocab_size,
                               DocStyle style = DocStyle::Page, std::uint32_t side = 56) {
  if (vocab_size <= kFirstGlyphToken) throw InputError("vocabulary has no glyph tokens");
  if (vocab_size > kMaxGlyphVocab) {
    throw InputError("vocabulary of " + std::to_string(vocab_size) +
                     " exceeds the glyph alphabet (" + std::to_string(kMaxGlyphVocab) + ")");
  }
  if (side == 0 || side % kGlyphCell != 0) throw InputError("page side must be a multiple of 14");
  const std::uint32_t per_row = side / kGlyphCell;
  const std::size_t capacity = std::size_t(per_row) * per_row;
  if (num_tokens > capacity) {
    throw InputError(std::to_string(num_tokens) + " tokens do not fit a page holding " +
                     std::to_string(capacity));
  }
  SynthDoc doc;
  doc.seed = seed;
  doc.style = style;
  doc.image = Image(side, side, 1);
  Rng rng(seed);
  for (std::size_t i = 0; i < num_tokens; ++i) {
    doc.target.push_back(static_cast<std::size_t>(
        rng.uniform_int(kFirstGlyphToken, static_cast<std::int64_t>(vocab_size) - 1)));
  }
  for (std::size_t i = 0; i < num_tokens; ++i) {
    const auto bmp = glyph_bitmap(doc.target[i]);
    const std::uint32_t oy = std::uint32_t(i / per_row) * kGlyphCell;
    const std::uint32_t ox = std::uint32_t(i % per_row) * kGlyphCell;
    for (std::uint32_t y = 0; y < kGlyphCell; ++y)
      for (std::uint32_t x = 0; x < kGlyphCell; ++x)
        if (bmp[y * kGlyphCell + x]) doc.image.at(0, oy + y, ox + x) = 255;
  }
  return doc;
}

/// Token-count range for a style on a page with `capacity` cells.
inline std::pair<std::size_t, std::size_t> style_token_range(DocStyle s, std::size_t per_row,
                                                             std::size_t capacity) {
  if (s == DocStyle::Caption) return {1, per_row};
  return {1, capacity};
}

inline std::vector<SynthDoc> make_corpus(DocStyle style, std::size_t count, std::uint64_t seed,
                                         std::size_t vocab_size, std::uint32_t side = 56) {
  std::vector<SynthDoc> docs;
  docs.reserve(count);
  const std::size_t per_row = side / kGlyphCell;
  const auto [lo, hi] = style_token_range(style, per_row, per_row * per_row);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint64_t s = derive_seed(seed, i);
    Rng len_rng(derive_seed(s, "length"));
    const auto n = static_cast<std::size_t>(
        len_rng.uniform_int(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
    docs.push_back(synth_document(s, n, vocab_size, style, side));
  }
  return docs;
}

template <class T>
Example<T> make_example(const SynthDoc& doc, const TilingConfig& tiling) {
  return {prepare_patches<T>(doc.image, tiling), doc.prompt(), doc.target};
}

template <class T>
std::vector<Example<T>> make_examples(const std::vector<SynthDoc>& docs,
                                      const TilingConfig& tiling) {
  std::vector<Example<T>> out;
  out.reserve(docs.size());
  for (const auto& d : docs) out.push_back(make_example<T>(d, tiling));
  return out;
}

}  // namespace alignvlm
