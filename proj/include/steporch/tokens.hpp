#pragma once

// Dual-codebook audio tokens, the unified 5120-id audio vocabulary and the
// 2:3 interleaving transform.
//
// A linguistic token comes from the 1024-entry codebook (~16.7 Hz), a semantic
// token from the 4096-entry codebook (25 Hz). Every interleave group holds two
// linguistic tokens followed by three semantic tokens: [L, L, S, S, S].

#include <algorithm>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "steporch/errors.hpp"

namespace steporch {

inline constexpr std::uint32_t kLinguisticCodebookSize = 1024;
inline constexpr std::uint32_t kSemanticCodebookSize = 4096;
inline constexpr std::uint32_t kUnifiedVocabSize =
    kLinguisticCodebookSize + kSemanticCodebookSize;
inline constexpr std::uint32_t kSemanticOffset = kLinguisticCodebookSize;

inline constexpr std::size_t kLinguisticPerGroup = 2;
inline constexpr std::size_t kSemanticPerGroup = 3;
inline constexpr std::size_t kGroupSize = kLinguisticPerGroup + kSemanticPerGroup;

// Nominal rates; metadata only.
inline constexpr double kLinguisticRateHz = 16.7;
inline constexpr double kSemanticRateHz = 25.0;

enum class Codebook : std::uint8_t { Linguistic, Semantic };

inline const char* to_string(Codebook c) {
  return c == Codebook::Linguistic ? "linguistic" : "semantic";
}

inline std::uint32_t codebook_size(Codebook c) {
  return c == Codebook::Linguistic ? kLinguisticCodebookSize : kSemanticCodebookSize;
}

namespace detail {
inline void check_codebook_range(Codebook c, std::uint32_t id) {
  if (id >= codebook_size(c)) {
    throw RangeError(std::string(to_string(c)) + " token id " + std::to_string(id) +
                     " out of range [0, " + std::to_string(codebook_size(c)) + ")");
  }
}
}  // namespace detail

class LinguisticToken {
 public:
  explicit LinguisticToken(std::uint32_t id) : id_(static_cast<std::uint16_t>(id)) {
    detail::check_codebook_range(Codebook::Linguistic, id);
  }
  std::uint16_t id() const noexcept { return id_; }
  auto operator<=>(const LinguisticToken&) const = default;

 private:
  std::uint16_t id_;
};

class SemanticToken {
 public:
  explicit SemanticToken(std::uint32_t id) : id_(static_cast<std::uint16_t>(id)) {
    detail::check_codebook_range(Codebook::Semantic, id);
  }
  std::uint16_t id() const noexcept { return id_; }
  auto operator<=>(const SemanticToken&) const = default;

 private:
  std::uint16_t id_;
};

struct UnifiedId {
  std::uint32_t value = 0;
  auto operator<=>(const UnifiedId&) const = default;
};

// A token of either codebook. Construction is always range checked.
class AudioToken {
 public:
  AudioToken(LinguisticToken t) : codebook_(Codebook::Linguistic), id_(t.id()) {}  // NOLINT
  AudioToken(SemanticToken t) : codebook_(Codebook::Semantic), id_(t.id()) {}      // NOLINT

  static AudioToken linguistic(std::uint32_t id) { return LinguisticToken(id); }
  static AudioToken semantic(std::uint32_t id) { return SemanticToken(id); }

  Codebook codebook() const noexcept { return codebook_; }
  std::uint16_t id() const noexcept { return id_; }
  bool is_linguistic() const noexcept { return codebook_ == Codebook::Linguistic; }
  bool is_semantic() const noexcept { return codebook_ == Codebook::Semantic; }

  auto operator<=>(const AudioToken&) const = default;

 private:
  Codebook codebook_;
  std::uint16_t id_;
};

inline std::ostream& operator<<(std::ostream& os, const AudioToken& t) {
  return os << (t.is_linguistic() ? "L" : "S") << t.id();
}

inline UnifiedId unified_id(const AudioToken& token) {
  return token.is_linguistic() ? UnifiedId{token.id()}
                               : UnifiedId{kSemanticOffset + token.id()};
}

inline AudioToken from_unified(UnifiedId id) {
  if (id.value >= kUnifiedVocabSize) {
    throw RangeError("unified audio id " + std::to_string(id.value) +
                     " out of range [0, " + std::to_string(kUnifiedVocabSize) + ")");
  }
  if (id.value < kSemanticOffset) return AudioToken::linguistic(id.value);
  return AudioToken::semantic(id.value - kSemanticOffset);
}

// Token stream made of whole [L,L,S,S,S] groups. The structure is checked on
// construction, so any instance satisfies the group invariant.
class InterleavedSequence {
 public:
  InterleavedSequence() = default;

  // Throws StructureError naming the first offending index.
  static InterleavedSequence from_tokens(std::vector<AudioToken> tokens) {
    validate(tokens);
    InterleavedSequence seq;
    seq.tokens_ = std::move(tokens);
    return seq;
  }

  static void validate(std::span<const AudioToken> tokens) {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const bool want_linguistic = (i % kGroupSize) < kLinguisticPerGroup;
      if (tokens[i].is_linguistic() != want_linguistic) {
        throw StructureError("interleaved sequence: expected " +
                                 std::string(want_linguistic ? "linguistic" : "semantic") +
                                 " token at index " + std::to_string(i),
                             i);
      }
    }
    if (tokens.size() % kGroupSize != 0) {
      throw StructureError("interleaved sequence: incomplete trailing group (length " +
                               std::to_string(tokens.size()) + ")",
                           tokens.size() - tokens.size() % kGroupSize);
    }
  }

  std::span<const AudioToken> tokens() const noexcept { return tokens_; }
  std::size_t size() const noexcept { return tokens_.size(); }
  bool empty() const noexcept { return tokens_.empty(); }
  std::size_t group_count() const noexcept { return tokens_.size() / kGroupSize; }

  void append(const InterleavedSequence& other) {
    tokens_.insert(tokens_.end(), other.tokens_.begin(), other.tokens_.end());
  }

  bool operator==(const InterleavedSequence&) const = default;

 private:
  std::vector<AudioToken> tokens_;
};

inline InterleavedSequence interleave(std::span<const LinguisticToken> ling,
                                      std::span<const SemanticToken> sem) {
  if (ling.size() * kSemanticPerGroup != sem.size() * kLinguisticPerGroup ||
      ling.size() % kLinguisticPerGroup != 0) {
    const std::size_t groups = std::min(ling.size() / kLinguisticPerGroup,
                                        sem.size() / kSemanticPerGroup);
    throw AlignmentError("interleave: " + std::to_string(ling.size()) +
                         " linguistic vs " + std::to_string(sem.size()) +
                         " semantic tokens do not form whole 2:3 groups; largest "
                         "complete group count is " + std::to_string(groups));
  }
  const std::size_t groups = ling.size() / kLinguisticPerGroup;
  std::vector<AudioToken> out;
  out.reserve(groups * kGroupSize);
  for (std::size_t k = 0; k < groups; ++k) {
    out.emplace_back(ling[2 * k]);
    out.emplace_back(ling[2 * k + 1]);
    out.emplace_back(sem[3 * k]);
    out.emplace_back(sem[3 * k + 1]);
    out.emplace_back(sem[3 * k + 2]);
  }
  return InterleavedSequence::from_tokens(std::move(out));
}

struct DeinterleavedStreams {
  std::vector<LinguisticToken> linguistic;
  std::vector<SemanticToken> semantic;
  bool operator==(const DeinterleavedStreams&) const = default;
};

inline DeinterleavedStreams deinterleave(std::span<const AudioToken> tokens) {
  InterleavedSequence::validate(tokens);
  DeinterleavedStreams out;
  out.linguistic.reserve(tokens.size() / kGroupSize * kLinguisticPerGroup);
  out.semantic.reserve(tokens.size() / kGroupSize * kSemanticPerGroup);
  for (const auto& t : tokens) {
    if (t.is_linguistic()) {
      out.linguistic.emplace_back(t.id());
    } else {
      out.semantic.emplace_back(t.id());
    }
  }
  return out;
}

inline DeinterleavedStreams deinterleave(const InterleavedSequence& seq) {
  return deinterleave(seq.tokens());
}

// Fixture text format: one unified id per line, decimal. Blank lines and lines
// starting with '#' are skipped on read.
inline void write_token_text(std::ostream& os, std::span<const AudioToken> tokens) {
  for (const auto& t : tokens) os << unified_id(t).value << '\n';
}

inline std::vector<AudioToken> read_token_text(std::istream& is) {
  std::vector<AudioToken> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line.front() == '#') continue;
    std::uint64_t value = 0;
    std::size_t digits = 0;
    for (char c : line) {
      if (c < '0' || c > '9') {
        throw FormatError("token text line " + std::to_string(line_no) +
                          ": not a decimal id: '" + line + "'");
      }
      value = value * 10 + static_cast<std::uint64_t>(c - '0');
      if (++digits > 9) {
        throw RangeError("token text line " + std::to_string(line_no) + ": id too large");
      }
    }
    out.push_back(from_unified(UnifiedId{static_cast<std::uint32_t>(value)}));
  }
  return out;
}

}  // namespace steporch
