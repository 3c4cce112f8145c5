#pragma once

namespace bm2 {

/// Library version, e.g. "0.3.0".
const char* version();
/// Short git hash of the source tree at configure time, or "unknown".
const char* git_hash();

}  // namespace bm2
