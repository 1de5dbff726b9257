#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace sfl {

/// Per-pixel class ids, one byte each: 0 is background, 1..K are classes
/// 0..K-1 shifted by one.
struct LabelMask {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<std::uint8_t> ids;

    LabelMask() = default;
    LabelMask(std::size_t h, std::size_t w, std::uint8_t fill = 0) : height(h), width(w), ids(h * w, fill) {}

    std::uint8_t& at(std::size_t y, std::size_t x) { return ids[y * width + x]; }
    std::uint8_t at(std::size_t y, std::size_t x) const { return ids[y * width + x]; }
    std::size_t size() const { return ids.size(); }

    friend bool operator==(const LabelMask&, const LabelMask&) = default;
};

/// Mask id used for class index c.
constexpr std::uint8_t mask_id(std::size_t class_index) { return static_cast<std::uint8_t>(class_index + 1); }

}  // namespace sfl
