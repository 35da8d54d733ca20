#pragma once

namespace scorewatch {
inline constexpr const char* kVersion = "0.1.0";
}
