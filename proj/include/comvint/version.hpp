#pragma once

namespace comvint {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace comvint
