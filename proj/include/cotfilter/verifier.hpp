#pragma once

#include <cctype>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

#include "cotfilter/common.hpp"

namespace cotfilter {

// ---------------------------------------------------------------------------
// Exact rational arithmetic over 128-bit integers. Wide enough for any
// answer literal we accept (parser caps digit counts well below overflow).
// ---------------------------------------------------------------------------

using int128 = __int128;

namespace detail {

inline int128 abs128(int128 v) { return v < 0 ? -v : v; }

inline int128 gcd128(int128 a, int128 b) {
  a = abs128(a);
  b = abs128(b);
  while (b != 0) {
    int128 t = a % b;
    a = b;
    b = t;
  }
  return a;
}

inline std::string i128_str(int128 v) {
  if (v == 0) return "0";
  bool neg = v < 0;
  unsigned __int128 u = neg ? static_cast<unsigned __int128>(-(v + 1)) + 1
                            : static_cast<unsigned __int128>(v);
  std::string out;
  while (u != 0) {
    out.push_back(static_cast<char>('0' + static_cast<int>(u % 10)));
    u /= 10;
  }
  if (neg) out.push_back('-');
  return std::string(out.rbegin(), out.rend());
}

}  // namespace detail

/// Reduced fraction with positive denominator. Equality is value equality
/// because construction always reduces.
struct Rational {
  int128 num = 0;
  int128 den = 1;

  static Rational make(int128 n, int128 d) {
    if (d == 0) throw std::invalid_argument("rational with zero denominator");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    int128 g = detail::gcd128(n, d);
    if (g > 1) {
      n /= g;
      d /= g;
    }
    return Rational{n, d};
  }

  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num == b.num && a.den == b.den;
  }

  std::string str() const {
    if (den == 1) return detail::i128_str(num);
    return detail::i128_str(num) + "/" + detail::i128_str(den);
  }
};

/// Normalized answer. `canonical` is what byte-equality compares; `numeric`
/// is set when the text parses as an exact rational.
struct CanonicalAnswer {
  std::string raw;
  std::string canonical;
  std::optional<Rational> numeric;
};

// ---------------------------------------------------------------------------
// \boxed extraction
// ---------------------------------------------------------------------------

namespace detail {

// Matches the brace block starting at text[open] == '{'. Returns the index
// one past the closing brace, or npos when the block never closes. Escaped
// braces (\{ \}) do not affect depth.
inline std::size_t match_braces(std::string_view text, std::size_t open) {
  int depth = 0;
  for (std::size_t i = open; i < text.size(); ++i) {
    char c = text[i];
    if (c == '\\' && i + 1 < text.size() &&
        (text[i + 1] == '{' || text[i + 1] == '}')) {
      ++i;
      continue;
    }
    if (c == '{') ++depth;
    else if (c == '}' && --depth == 0) return i + 1;
  }
  return std::string_view::npos;
}

}  // namespace detail

/// Content of the last complete \boxed{...} in `text`. Later occurrences
/// win; an unbalanced final occurrence falls back to earlier complete ones.
/// Absent when no occurrence closes its braces.
inline std::optional<std::string> extract_boxed(std::string_view text) {
  static constexpr std::string_view kMarker = "\\boxed";
  std::size_t search_end = text.size();
  while (true) {
    std::size_t at = text.rfind(kMarker, search_end);
    if (at == std::string_view::npos) return std::nullopt;
    std::size_t open = at + kMarker.size();
    while (open < text.size() &&
           (text[open] == ' ' || text[open] == '\t'))
      ++open;
    if (open < text.size() && text[open] == '{') {
      std::size_t close = detail::match_braces(text, open);
      if (close != std::string_view::npos)
        return std::string(text.substr(open + 1, close - open - 2));
    }
    if (at == 0) return std::nullopt;
    search_end = at - 1;
  }
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

namespace detail {

inline constexpr int kMaxAnswerDigits = 30;

inline bool all_digits(std::string_view s) {
  if (s.empty()) return false;
  for (char c : s)
    if (!std::isdigit(static_cast<unsigned char>(c))) return false;
  return true;
}

// Unsigned digit string -> int128, rejecting values beyond the digit cap.
inline std::optional<int128> parse_digits(std::string_view digits) {
  if (!all_digits(digits) || digits.size() > kMaxAnswerDigits)
    return std::nullopt;
  int128 v = 0;
  for (char c : digits) v = v * 10 + (c - '0');
  return v;
}

inline std::optional<int128> parse_signed(std::string_view s) {
  s = trim_view(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '+' || s[0] == '-')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  auto mag = parse_digits(s);
  if (!mag) return std::nullopt;
  return neg ? -*mag : *mag;
}

// "1,234,567" shape: groups of three after a 1-3 digit head, optional sign
// and decimal tail. Commas are dropped only when the whole string matches.
inline std::optional<std::string> strip_thousands(std::string_view s) {
  std::size_t i = 0;
  if (i < s.size() && (s[i] == '+' || s[i] == '-')) ++i;
  std::size_t head = 0;
  while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
    ++i;
    ++head;
  }
  if (head == 0 || head > 3) return std::nullopt;
  bool any_group = false;
  while (i < s.size() && s[i] == ',') {
    if (i + 3 >= s.size()) return std::nullopt;
    for (std::size_t j = 1; j <= 3; ++j)
      if (!std::isdigit(static_cast<unsigned char>(s[i + j])))
        return std::nullopt;
    i += 4;
    any_group = true;
  }
  if (!any_group) return std::nullopt;
  if (i < s.size()) {
    if (s[i] != '.') return std::nullopt;
    ++i;
    if (i == s.size()) return std::nullopt;
    while (i < s.size()) {
      if (!std::isdigit(static_cast<unsigned char>(s[i]))) return std::nullopt;
      ++i;
    }
  }
  std::string out;
  out.reserve(s.size());
  for (char c : s)
    if (c != ',') out.push_back(c);
  return out;
}

inline std::optional<Rational> parse_decimal(std::string_view s) {
  s = trim_view(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '+' || s[0] == '-')) {
    neg = s[0] == '-';
    s.remove_prefix(1);
  }
  auto dot = s.find('.');
  if (dot == std::string_view::npos) {
    auto v = parse_digits(s);
    if (!v) return std::nullopt;
    return Rational::make(neg ? -*v : *v, 1);
  }
  std::string_view ip = s.substr(0, dot);
  std::string_view fp = s.substr(dot + 1);
  if (ip.empty() && fp.empty()) return std::nullopt;
  if (!ip.empty() && !all_digits(ip)) return std::nullopt;
  if (!fp.empty() && !all_digits(fp)) return std::nullopt;
  if (ip.size() + fp.size() > kMaxAnswerDigits) return std::nullopt;
  int128 num = 0;
  for (char c : ip) num = num * 10 + (c - '0');
  int128 den = 1;
  for (char c : fp) {
    num = num * 10 + (c - '0');
    den *= 10;
  }
  return Rational::make(neg ? -num : num, den);
}

// \frac{a}{b} (or \dfrac) with integer arguments, possibly the whole string.
inline std::optional<Rational> parse_frac(std::string_view s) {
  s = trim_view(s);
  bool neg = false;
  if (!s.empty() && (s[0] == '+' || s[0] == '-')) {
    neg = s[0] == '-';
    s = trim_view(s.substr(1));
  }
  for (std::string_view cmd : {"\\frac", "\\dfrac", "\\tfrac"}) {
    if (s.substr(0, cmd.size()) != cmd) continue;
    std::string_view rest = s.substr(cmd.size());
    std::size_t open1 = rest.find_first_not_of(" \t");
    if (open1 == std::string_view::npos || rest[open1] != '{') continue;
    std::size_t close1 = match_braces(rest, open1);
    if (close1 == std::string_view::npos) continue;
    std::size_t open2 = rest.find_first_not_of(" \t", close1);
    if (open2 == std::string_view::npos || rest[open2] != '{') continue;
    std::size_t close2 = match_braces(rest, open2);
    if (close2 == std::string_view::npos) continue;
    if (!trim_view(rest.substr(close2)).empty()) continue;
    auto a = parse_signed(rest.substr(open1 + 1, close1 - open1 - 2));
    auto b = parse_signed(rest.substr(open2 + 1, close2 - open2 - 2));
    if (!a || !b || *b == 0) continue;
    int128 n = neg ? -*a : *a;
    return Rational::make(n, *b);
  }
  return std::nullopt;
}

inline std::optional<Rational> parse_slash(std::string_view s) {
  auto slash = s.find('/');
  if (slash == std::string_view::npos) return std::nullopt;
  if (s.find('/', slash + 1) != std::string_view::npos) return std::nullopt;
  auto a = parse_signed(s.substr(0, slash));
  auto b = parse_signed(s.substr(slash + 1));
  if (!a || !b || *b == 0) return std::nullopt;
  return Rational::make(*a, *b);
}

inline std::optional<Rational> parse_numeric(std::string_view s) {
  if (auto t = strip_thousands(s)) return parse_decimal(*t);
  if (auto r = parse_frac(s)) return r;
  if (auto r = parse_slash(s)) return r;
  return parse_decimal(s);
}

// Drops \left and \right when they prefix a delimiter, keeping commands
// like \leftarrow intact.
inline std::string strip_left_right(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    bool dropped = false;
    for (std::string_view cmd : {"\\left", "\\right"}) {
      if (s.substr(i, cmd.size()) != cmd) continue;
      std::size_t next = i + cmd.size();
      if (next < s.size() &&
          std::isalpha(static_cast<unsigned char>(s[next])))
        continue;
      i = next;
      dropped = true;
      break;
    }
    if (!dropped) out.push_back(s[i++]);
  }
  return out;
}

// Lower-cases command names (\Frac -> \frac) and, when the string holds no
// commands at all, the whole text.
inline std::string fold_case(std::string_view s) {
  std::string out(s);
  if (s.find('\\') == std::string_view::npos) {
    for (char& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return out;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i] != '\\') continue;
    std::size_t j = i + 1;
    while (j < out.size() && std::isalpha(static_cast<unsigned char>(out[j]))) {
      out[j] = static_cast<char>(std::tolower(static_cast<unsigned char>(out[j])));
      ++j;
    }
    i = j - 1;
  }
  return out;
}

inline std::string strip_wrappers(std::string_view raw) {
  std::string s = trim(raw);
  for (int pass = 0; pass < 8; ++pass) {
    std::string before = s;
    while (s.size() >= 2 && s.front() == '$' && s.back() == '$') {
      s = trim(std::string_view(s).substr(1, s.size() - 2));
    }
    s = strip_left_right(s);
    s = trim(s);
    while (!s.empty() && s.back() == '.') {
      s.pop_back();
      s = trim(s);
    }
    // A lone \text{...} wrapper adds no content; unwrap it.
    static constexpr std::string_view kText = "\\text";
    if (s.size() > kText.size() && std::string_view(s).substr(0, kText.size()) == kText) {
      std::string_view rest = std::string_view(s).substr(kText.size());
      std::size_t open = rest.find_first_not_of(" \t");
      if (open != std::string_view::npos && rest[open] == '{') {
        std::size_t close = match_braces(rest, open);
        if (close != std::string_view::npos &&
            trim_view(rest.substr(close)).empty()) {
          s = trim(rest.substr(open + 1, close - open - 2));
        }
      }
    }
    if (s == before) break;
  }
  return s;
}

}  // namespace detail

/// Canonical form of a raw answer string. Numeric answers become reduced
/// rationals; everything else is case-folded text. Command case folds
/// before wrapper stripping so \Text{...} unwraps the same as \text{...},
/// keeping canonicalization idempotent.
inline CanonicalAnswer normalize_answer(std::string_view raw) {
  CanonicalAnswer out;
  out.raw = std::string(raw);
  std::string s = detail::strip_wrappers(detail::fold_case(raw));
  if (auto r = detail::parse_numeric(s)) {
    out.numeric = *r;
    out.canonical = r->str();
    return out;
  }
  out.canonical = detail::fold_case(s);
  return out;
}

/// True when both sides share a rational value, else when canonical strings
/// are byte-equal.
inline bool answers_match(const CanonicalAnswer& pred,
                          const CanonicalAnswer& gold) {
  if (pred.numeric && gold.numeric) return *pred.numeric == *gold.numeric;
  return pred.canonical == gold.canonical;
}

inline bool answers_match(std::string_view pred, std::string_view gold) {
  return answers_match(normalize_answer(pred), normalize_answer(gold));
}

/// Full judgment for one model completion: extract the boxed answer, then
/// compare. Missing or unbalanced \boxed counts as incorrect.
inline bool completion_correct(std::string_view completion,
                               const CanonicalAnswer& gold) {
  auto boxed = extract_boxed(completion);
  if (!boxed) return false;
  return answers_match(normalize_answer(*boxed), gold);
}

}  // namespace cotfilter
