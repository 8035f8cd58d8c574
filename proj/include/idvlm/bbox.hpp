#pragma once

#include <algorithm>
#include <optional>
#include <regex>
#include <string>
#include <string_view>

#include "idvlm/errors.hpp"

namespace idvlm {

// Pixel box, left-top corner and right-bottom corner.
struct BBox {
  long long left = 0;
  long long top = 0;
  long long right = 0;
  long long bottom = 0;

  bool valid() const { return left >= 0 && top >= 0 && left < right && top < bottom; }
  bool within(long long width, long long height) const { return valid() && right <= width && bottom <= height; }
  long long width() const { return right - left; }
  long long height() const { return bottom - top; }
  double area() const { return static_cast<double>(width()) * static_cast<double>(height()); }

  friend bool operator==(const BBox&, const BBox&) = default;

  std::string str() const {
    return "(" + std::to_string(left) + ", " + std::to_string(top) + ", " + std::to_string(right) + ", " +
           std::to_string(bottom) + ")";
  }
};

inline void require_valid(const BBox& b, const std::string& what) {
  if (!b.valid()) throw ValidationError(what + ": invalid bbox " + b.str());
}

enum class BoxGrammar { kBracket, kRefBox };

inline std::string to_string(BoxGrammar g) { return g == BoxGrammar::kBracket ? "bracket_form" : "ref_box_form"; }

inline BoxGrammar parse_box_grammar(std::string_view s) {
  if (s == "bracket_form" || s == "bracket") return BoxGrammar::kBracket;
  if (s == "ref_box_form" || s == "ref_box" || s == "refbox") return BoxGrammar::kRefBox;
  throw ConfigError("unknown bbox grammar '" + std::string(s) + "'");
}

// "bbox: [x1, y1, x2, y2]"
inline std::string render_bracket(const BBox& b) {
  return "bbox: [" + std::to_string(b.left) + ", " + std::to_string(b.top) + ", " + std::to_string(b.right) +
         ", " + std::to_string(b.bottom) + "]";
}

// "<ref>name</ref><box>(x1,y1),(x2,y2)</box>"
inline std::string render_ref_box(const BBox& b, std::string_view ref) {
  return "<ref>" + std::string(ref) + "</ref><box>(" + std::to_string(b.left) + "," + std::to_string(b.top) +
         "),(" + std::to_string(b.right) + "," + std::to_string(b.bottom) + ")</box>";
}

inline std::string render_bbox(const BBox& b, BoxGrammar g, std::string_view ref = "") {
  return g == BoxGrammar::kBracket ? render_bracket(b) : render_ref_box(b, ref);
}

namespace detail {

inline std::optional<BBox> box_from_match(const std::smatch& m) {
  try {
    BBox b{std::stoll(m[1].str()), std::stoll(m[2].str()), std::stoll(m[3].str()), std::stoll(m[4].str())};
    if (!b.valid()) return std::nullopt;
    return b;
  } catch (const std::exception&) {
    return std::nullopt;  // out of range
  }
}

}  // namespace detail

// First box in the grammar, whitespace-tolerant. Boxes violating
// left < right, top < bottom are misses.
inline std::optional<BBox> parse_bbox(const std::string& text, BoxGrammar g) {
  static const std::regex bracket(
      R"(bbox\s*:\s*\[\s*(\d{1,9})\s*,\s*(\d{1,9})\s*,\s*(\d{1,9})\s*,\s*(\d{1,9})\s*\])", std::regex::icase);
  static const std::regex refbox(
      R"(<box>\s*\(\s*(\d{1,9})\s*,\s*(\d{1,9})\s*\)\s*,\s*\(\s*(\d{1,9})\s*,\s*(\d{1,9})\s*\)\s*</box>)",
      std::regex::icase);
  std::smatch m;
  if (!std::regex_search(text, m, g == BoxGrammar::kBracket ? bracket : refbox)) return std::nullopt;
  return detail::box_from_match(m);
}

// Continuous-area intersection over union.
inline double iou(const BBox& a, const BBox& b) {
  const long long iw = std::min(a.right, b.right) - std::max(a.left, b.left);
  const long long ih = std::min(a.bottom, b.bottom) - std::max(a.top, b.top);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = static_cast<double>(iw) * static_cast<double>(ih);
  return inter / (a.area() + b.area() - inter);
}

}  // namespace idvlm
