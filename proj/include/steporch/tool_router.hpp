#pragma once

// Splits a streamed model response into speakable text and tool-call
// directives. Directives are delimited by the literal markers
//   <tool_call>NAME ARGS</tool_call>
// where NAME runs up to the first '{', '(' or whitespace and ARGS is the
// (trimmed) remainder, kept opaque. Markers may be split across chunks.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steporch/errors.hpp"

namespace steporch {

inline constexpr std::string_view kToolCallOpen = "<tool_call>";
inline constexpr std::string_view kToolCallClose = "</tool_call>";

using CallId = std::uint64_t;

struct ToolCallDirective {
  CallId call_id = 0;
  std::string name;
  std::string args;
  bool operator==(const ToolCallDirective&) const = default;
};

// Either a run of speakable text or a directive, in stream order.
struct RoutedPiece {
  std::string text;
  std::optional<ToolCallDirective> directive;
  bool operator==(const RoutedPiece&) const = default;
};

struct RoutedText {
  std::string tts_text;
  std::vector<ToolCallDirective> directives;
  std::vector<std::string> malformed;  // one message per rejected directive
  std::vector<RoutedPiece> pieces;

  void add_text(std::string_view text) {
    if (text.empty()) return;
    tts_text.append(text);
    if (!pieces.empty() && !pieces.back().directive) {
      pieces.back().text.append(text);
    } else {
      pieces.push_back({std::string(text), std::nullopt});
    }
  }

  void add_directive(ToolCallDirective d) {
    directives.push_back(d);
    pieces.push_back({{}, std::move(d)});
  }

  void append(RoutedText&& other) {
    for (auto& p : other.pieces) {
      if (p.directive) {
        add_directive(std::move(*p.directive));
      } else {
        add_text(p.text);
      }
    }
    for (auto& m : other.malformed) malformed.push_back(std::move(m));
  }
  bool operator==(const RoutedText&) const = default;
};

namespace detail {
inline std::string_view trim(std::string_view s) {
  const auto ws = " \t\r\n";
  const auto b = s.find_first_not_of(ws);
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(ws);
  return s.substr(b, e - b + 1);
}

// Length of the longest suffix of `text` that is a proper prefix of `marker`.
inline std::size_t partial_marker_suffix(std::string_view text, std::string_view marker) {
  const std::size_t max = std::min(text.size(), marker.size() - 1);
  for (std::size_t n = max; n > 0; --n) {
    if (text.substr(text.size() - n) == marker.substr(0, n)) return n;
  }
  return 0;
}
}  // namespace detail

class StreamingToolRouter {
 public:
  explicit StreamingToolRouter(CallId first_call_id = 1) : next_call_id_(first_call_id) {}

  RoutedText feed(std::string_view chunk) {
    if (finished_) throw LifecycleError("tool router: feed after finish");
    std::string buf = std::move(carry_);
    carry_.clear();
    buf.append(chunk);
    RoutedText out;
    std::size_t pos = 0;
    while (pos <= buf.size()) {
      const std::string_view rest = std::string_view(buf).substr(pos);
      if (!inside_) {
        const auto open = rest.find(kToolCallOpen);
        if (open == std::string_view::npos) {
          const auto hold = detail::partial_marker_suffix(rest, kToolCallOpen);
          out.add_text(rest.substr(0, rest.size() - hold));
          carry_.assign(rest.substr(rest.size() - hold));
          break;
        }
        out.add_text(rest.substr(0, open));
        pos += open + kToolCallOpen.size();
        inside_ = true;
      } else {
        const auto close = rest.find(kToolCallClose);
        if (close == std::string_view::npos) {
          carry_.assign(rest);
          break;
        }
        parse_directive(rest.substr(0, close), out);
        pos += close + kToolCallClose.size();
        inside_ = false;
      }
    }
    return out;
  }

  // End of the response stream. A held-back partial opening marker is plain
  // text; an unterminated directive is reported as malformed.
  RoutedText finish() {
    if (finished_) throw LifecycleError("tool router: double finish");
    finished_ = true;
    RoutedText out;
    if (inside_) {
      out.malformed.push_back("unterminated tool call: '" + std::string(kToolCallOpen) + carry_ +
                              "'");
    } else {
      out.add_text(carry_);
    }
    carry_.clear();
    return out;
  }

  bool inside_directive() const noexcept { return inside_; }
  CallId next_call_id() const noexcept { return next_call_id_; }

 private:
  void parse_directive(std::string_view body, RoutedText& out) {
    const auto trimmed = detail::trim(body);
    const auto name_end = trimmed.find_first_of("{( \t\r\n");
    const auto name = trimmed.substr(0, name_end);
    if (name.empty()) {
      out.malformed.push_back("tool call with empty name: '" + std::string(body) + "'");
      return;
    }
    ToolCallDirective d;
    d.call_id = next_call_id_++;
    d.name = std::string(name);
    d.args = name_end == std::string_view::npos
                 ? std::string()
                 : std::string(detail::trim(trimmed.substr(name_end)));
    out.add_directive(std::move(d));
  }

  std::string carry_;
  bool inside_ = false;
  bool finished_ = false;
  CallId next_call_id_;
};

// Routes one complete response. Throws MalformedDirectiveError on any
// rejected or unterminated directive.
inline RoutedText route_model_chunk(std::string_view text) {
  StreamingToolRouter router;
  RoutedText out = router.feed(text);
  out.append(router.finish());
  if (!out.malformed.empty()) throw MalformedDirectiveError(out.malformed.front());
  return out;
}

}  // namespace steporch
