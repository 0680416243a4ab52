#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string_view>

namespace cvc {

/// Annotated catheter class. Left and right PICC lines are traced
/// separately (they get their own spatial priors) but share one type label.
enum class CvcClass { PiccLeft, PiccRight, IJ, Subclavian, SwanGanz };

inline constexpr std::array<CvcClass, 5> kAllCvcClasses = {
    CvcClass::PiccLeft, CvcClass::PiccRight, CvcClass::IJ, CvcClass::Subclavian,
    CvcClass::SwanGanz};

/// The four type indicators reported per image.
enum class CatheterType { Picc, IJ, Subclavian, SwanGanz };

inline constexpr std::size_t kNumTypes = 4;
inline constexpr std::array<CatheterType, kNumTypes> kAllTypes = {
    CatheterType::Picc, CatheterType::IJ, CatheterType::Subclavian, CatheterType::SwanGanz};

constexpr CatheterType type_of(CvcClass c) noexcept {
  switch (c) {
    case CvcClass::PiccLeft:
    case CvcClass::PiccRight: return CatheterType::Picc;
    case CvcClass::IJ: return CatheterType::IJ;
    case CvcClass::Subclavian: return CatheterType::Subclavian;
    case CvcClass::SwanGanz: return CatheterType::SwanGanz;
  }
  return CatheterType::Picc;
}

constexpr std::size_t index_of(CvcClass c) noexcept { return static_cast<std::size_t>(c); }
constexpr std::size_t index_of(CatheterType t) noexcept { return static_cast<std::size_t>(t); }

constexpr std::string_view to_string(CvcClass c) noexcept {
  switch (c) {
    case CvcClass::PiccLeft: return "PICC_LEFT";
    case CvcClass::PiccRight: return "PICC_RIGHT";
    case CvcClass::IJ: return "IJ";
    case CvcClass::Subclavian: return "SUBCLAVIAN";
    case CvcClass::SwanGanz: return "SWAN_GANZ";
  }
  return "?";
}

constexpr std::string_view to_string(CatheterType t) noexcept {
  switch (t) {
    case CatheterType::Picc: return "PICC";
    case CatheterType::IJ: return "IJ";
    case CatheterType::Subclavian: return "SUBCLAVIAN";
    case CatheterType::SwanGanz: return "SWAN_GANZ";
  }
  return "?";
}

std::optional<CvcClass> parse_cvc_class(std::string_view s) noexcept;
std::optional<CatheterType> parse_catheter_type(std::string_view s) noexcept;

}  // namespace cvc
