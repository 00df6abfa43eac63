// SPDX-License-Identifier: Apache-2.0
#include "l2smerge/names.hpp"

#include <fnmatch.h>

namespace l2smerge {

bool glob_match(std::string_view pattern, std::string_view text) {
    std::string p(pattern), t(text);
    return ::fnmatch(p.c_str(), t.c_str(), 0) == 0;
}

bool matches_any(const std::vector<std::string>& patterns, std::string_view text) {
    for (const auto& p : patterns) {
        if (glob_match(p, text)) return true;
    }
    return false;
}

} // namespace l2smerge
