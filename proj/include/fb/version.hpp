#pragma once

namespace fb {

inline constexpr const char* kToolVersion = "0.1.0";

}  // namespace fb
