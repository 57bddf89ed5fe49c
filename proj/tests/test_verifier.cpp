#include <random>
#include <string>
#include <vector>

#include "catch2/catch_amalgamated.hpp"

#include "cotfilter/verifier.hpp"

using namespace cotfilter;

TEST_CASE("extract_boxed basic forms") {
  CHECK(extract_boxed("so \\boxed{42}.") == "42");
  CHECK(extract_boxed("\\boxed{1} ... final \\boxed{\\frac{2}{4}}") ==
        "\\frac{2}{4}");
  CHECK(extract_boxed("\\boxed{\\text{a{b}c}}") == "\\text{a{b}c}");
  CHECK_FALSE(extract_boxed("no box at all"));
  CHECK_FALSE(extract_boxed(""));
  CHECK_FALSE(extract_boxed("\\boxed{unterminated"));
}

TEST_CASE("extract_boxed edge handling") {
  // A dangling final occurrence falls back to the previous balanced one.
  CHECK(extract_boxed("\\boxed{1} then \\boxed{2") == "1");
  // Whitespace between the command and its brace is tolerated.
  CHECK(extract_boxed("\\boxed {7}") == "7");
  // Escaped braces inside the body do not affect matching depth.
  CHECK(extract_boxed("\\boxed{a\\{b\\}c}") == "a\\{b\\}c");
  // Empty body is a present-but-empty answer.
  CHECK(extract_boxed("\\boxed{}") == "");
  // Nested boxed: the inner occurrence starts later, so last-wins picks it.
  CHECK(extract_boxed("\\boxed{\\boxed{3}}") == "3");
}

TEST_CASE("normalize_answer numeric forms") {
  auto rational_of = [](std::string_view s) {
    auto c = normalize_answer(s);
    REQUIRE(c.numeric.has_value());
    return c.numeric->str();
  };
  CHECK(rational_of(" 1/2 ") == "1/2");
  CHECK(rational_of("\\frac{2}{4}") == "1/2");
  CHECK(rational_of("0.5") == "1/2");
  CHECK(rational_of("0.50") == "1/2");
  CHECK(rational_of("12") == "12");
  CHECK(rational_of("-12") == "-12");
  CHECK(rational_of(".5") == "1/2");
  CHECK(rational_of("1,234") == "1234");
  CHECK(rational_of("1,234,567.5") == "2469135/2");
  CHECK(rational_of("-\\frac{3}{6}") == "-1/2");
  CHECK(rational_of("\\frac{-3}{6}") == "-1/2");
  CHECK(rational_of("\\dfrac{1}{3}") == "1/3");
  CHECK(rational_of("\\tfrac{2}{6}") == "1/3");
  CHECK(rational_of("$0.25$") == "1/4");
  CHECK(rational_of("42.") == "42");
  CHECK(rational_of("3/-4") == "-3/4");
}

TEST_CASE("normalize_answer non-numeric forms") {
  CHECK_FALSE(normalize_answer("Wednesday").numeric.has_value());
  CHECK(normalize_answer("Wednesday").canonical ==
        normalize_answer("wednesday ").canonical);
  CHECK_FALSE(normalize_answer("x+1").numeric.has_value());
  CHECK_FALSE(normalize_answer("1/0").numeric.has_value());
  CHECK_FALSE(normalize_answer("").numeric.has_value());
  CHECK_FALSE(normalize_answer("1,23").numeric.has_value());  // bad grouping
  // With commands present, only command names fold; content keeps case.
  CHECK(normalize_answer("\\sqrt{X}").canonical == "\\sqrt{X}");
  // A case-variant \text wrapper unwraps the same as the lowercase one.
  CHECK(normalize_answer("\\Text{ABC}").canonical == "abc");
}

TEST_CASE("normalize_answer wrapper stripping") {
  CHECK(normalize_answer("$\\frac{1}{2}$").numeric->str() == "1/2");
  CHECK(normalize_answer("$$42$$").numeric->str() == "42");
  CHECK(normalize_answer("\\left(x\\right)").canonical == "(x)");
  CHECK(normalize_answer("\\text{7}").numeric->str() == "7");
}

TEST_CASE("answers_match equivalences") {
  CHECK(answers_match("\\frac{2}{4}", "1/2"));
  CHECK(answers_match("0.50", "1/2"));
  CHECK(answers_match("Wednesday", "wednesday "));
  CHECK(answers_match("-0.25", "\\frac{-1}{4}"));
  CHECK(answers_match("1,000", "1000"));
  CHECK_FALSE(answers_match("1/2", "1/3"));
  CHECK_FALSE(answers_match("Wednesday", "Thursday"));
  CHECK_FALSE(answers_match("0.5", "0.51"));
  // Numeric vs plain word falls back to canonical comparison.
  CHECK_FALSE(answers_match("7", "seven"));
}

TEST_CASE("answers_match is reflexive and symmetric") {
  std::vector<std::string> forms = {
      "1/2",   "\\frac{2}{4}", "0.5",   "42",        "-42",      "x+1",
      "3.250", "1,234",        "area",  "\\sqrt{2}", "$18$",     "  7 ",
      "19.",   "\\frac{7}{1}", "0.125", "-\\frac{0}{5}"};
  for (const auto& a : forms) {
    CHECK(answers_match(a, a));
    for (const auto& b : forms)
      CHECK(answers_match(a, b) == answers_match(b, a));
  }
}

TEST_CASE("normalization is idempotent over generated forms") {
  std::vector<std::string> forms;
  const char* bodies[] = {"1/2",  "\\frac{3}{9}", "0.25", "137",
                          "-8",   "x^2",          "pi",   "12,345",
                          "0.50", "\\sqrt{3}"};
  const char* wraps[] = {"%s",     "$%s$",   " %s ",  "%s.",
                         "$$%s$$", "\\left(%s\\right)", "\\text{%s}"};
  for (const char* body : bodies)
    for (const char* wrap : wraps) {
      char buf[128];
      std::snprintf(buf, sizeof buf, wrap, body);
      forms.emplace_back(buf);
    }
  REQUIRE(forms.size() >= 70);
  for (const auto& form : forms) {
    auto once = normalize_answer(form);
    auto twice = normalize_answer(once.canonical);
    CHECK(twice.canonical == once.canonical);
    CHECK(twice.numeric.has_value() == once.numeric.has_value());
    if (once.numeric && twice.numeric)
      CHECK(twice.numeric->str() == once.numeric->str());
  }
}

TEST_CASE("extract_boxed survives adversarial brace fuzz") {
  std::mt19937_64 rng(20240817);
  const char alphabet[] = {'{', '}', '\\', 'b', 'o', 'x', 'e', 'd', '1', ' '};
  for (int iter = 0; iter < 10000; ++iter) {
    std::string s;
    auto len = rng() % 40;
    for (std::uint64_t i = 0; i < len; ++i)
      s += alphabet[rng() % sizeof alphabet];
    auto result = extract_boxed(s);  // must not throw or crash
    if (result) CHECK(result->size() <= s.size());
  }
}

TEST_CASE("normalize_answer survives numeric fuzz") {
  std::mt19937_64 rng(20240818);
  const char alphabet[] = {'0', '1', '9', ',', '.', '/', '-', '\\', 'f',
                           'r', 'a', 'c', '{', '}', '$', ' '};
  for (int iter = 0; iter < 10000; ++iter) {
    std::string s;
    auto len = rng() % 24;
    for (std::uint64_t i = 0; i < len; ++i)
      s += alphabet[rng() % sizeof alphabet];
    auto c = normalize_answer(s);  // must not throw
    auto again = normalize_answer(c.canonical);
    CHECK(again.canonical == c.canonical);
  }
}

TEST_CASE("oversized digit strings stay non-numeric") {
  std::string huge(40, '9');
  CHECK_FALSE(normalize_answer(huge).numeric.has_value());
  CHECK(answers_match(huge, huge));
  CHECK_FALSE(answers_match(huge, std::string(41, '9')));
}

TEST_CASE("completion_correct end to end") {
  auto gold = normalize_answer("7");
  CHECK(completion_correct("steps... so \\boxed{7}.", gold));
  CHECK(completion_correct("\\boxed{14/2}", gold));
  CHECK_FALSE(completion_correct("the answer is 7", gold));  // no box
  CHECK_FALSE(completion_correct("\\boxed{8}", gold));
  CHECK_FALSE(completion_correct("", gold));
}
