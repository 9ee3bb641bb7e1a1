#pragma once

namespace drr {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace drr
