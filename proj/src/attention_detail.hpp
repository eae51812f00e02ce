#pragma once

#include <utility>

#include "mimo/attention.hpp"

namespace mimo::detail {

void check_attend_args(const AttentionInputs& in, std::span<const AttentionHeadState> heads,
                       std::span<const KeyRange> mask);

// Index range [first, second) of keys whose positions fall inside r.
std::pair<std::size_t, std::size_t> key_span(const std::vector<std::int64_t>& positions, KeyRange r);

}  // namespace mimo::detail
