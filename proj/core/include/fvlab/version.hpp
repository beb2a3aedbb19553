#pragma once

namespace fvlab {
inline constexpr const char* kVersion = "0.1.0";
}
