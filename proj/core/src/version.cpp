#include "bm2/version.hpp"

namespace bm2 {

const char* version() { return BM2_VERSION; }
const char* git_hash() { return BM2_GIT_HASH; }

}  // namespace bm2
