#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace scvlm {

// Canonical tokenisation shared by the text encoder and every text metric:
// ASCII-lowercase, then split on any byte that is not [a-z0-9].
std::vector<std::string> tokenize(std::string_view text);

}  // namespace scvlm
