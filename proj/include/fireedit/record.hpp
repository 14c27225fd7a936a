#pragma once

#include <cstdint>

#include "fireedit/vision.hpp"
#include "fireedit/vlm.hpp"

namespace fireedit {

enum class EditKind : std::uint8_t { add, remove, change_color };

const char* edit_kind_name(EditKind kind);

// One input/target/instruction triplet with oracle boxes for every shape in
// the source and the box the edit is confined to.
struct DatasetRecord {
  Image source;
  Image target;
  TokenSequence instruction;
  RegionSet boxes;
  EditKind edit_kind = EditKind::change_color;
  Box edit_box;
  bool region_critical = false;
};

}  // namespace fireedit
