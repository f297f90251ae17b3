#pragma once

namespace ctmle {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace ctmle
