#pragma once

namespace neuromoco {

const char* version_string();

} // namespace neuromoco
