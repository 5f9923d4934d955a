#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "flowlm/ingest.hpp"

namespace flowlm {

/// CIDDS-shaped flow capture with realistic-looking per-label feature distributions.
/// Attack flows arrive in contiguous bursts between stretches of background traffic,
/// so windows of consecutive flows carry context. Rows use the published CIDDS column
/// layout (raw_rows/header_line are populated) and byte counts above 10^6 use the
/// "<x> M" notation.
FlowTable synthetic_capture(DomainTag domain,
                            const std::vector<std::pair<std::string, std::size_t>>& composition,
                            std::uint64_t seed);

/// Default label mix for a synthetic capture of about `total` flows in `domain`.
std::vector<std::pair<std::string, std::size_t>> synthetic_composition(DomainTag domain,
                                                                       std::size_t total);

/// Writes header_line + raw_rows verbatim (source-format CSV, no label columns added).
void write_raw_csv(const FlowTable& table, const std::string& path);

}  // namespace flowlm
