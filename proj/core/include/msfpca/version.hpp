#pragma once

namespace msfpca {

inline constexpr const char* kVersion = "0.1.0";

}  // namespace msfpca
