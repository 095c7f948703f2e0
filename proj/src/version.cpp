#include "neuromoco/version.hpp"

namespace neuromoco {

const char* version_string() { return "0.1.0"; }

} // namespace neuromoco
