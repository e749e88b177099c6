#pragma once

#include <string>

#include "dubox/dataio.hpp"
#include "dubox/encoding.hpp"

namespace dubox {

// Human-readable dump of both detectors' targets for one record: per-GT
// positive range and owned hooks with their offsets, then an ASCII map of
// hook owners ('.' negative, digit = owning GT index mod 10, '#' when the
// hook carries no box regression).
std::string describe_targets(const DatasetRecord& rec, const EncoderConfig& cfg);

}  // namespace dubox
