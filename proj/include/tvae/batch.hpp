#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "tvae/tensor.hpp"

namespace tvae::data {

inline constexpr std::int32_t kPadId = 0;
inline constexpr std::int32_t kStartId = 1;
inline constexpr std::int32_t kEndId = 2;
inline constexpr std::int32_t kUnkId = 3;
inline constexpr std::size_t kReservedIds = 4;

/// One padded minibatch. All grids are batch x len; masks are 1 exactly on
/// non-pad positions. tgt_in is tgt_out shifted right with the start token
/// prepended.
struct Batch {
  diff::Ids src_ids;
  diff::Mask src_mask;
  diff::Ids tgt_in;
  diff::Ids tgt_out;
  diff::Mask tgt_mask;
  std::vector<std::size_t> example_index;  // corpus position of each row

  std::size_t size() const { return src_ids.shape.empty() ? 0 : src_ids.shape[0]; }
};

}  // namespace tvae::data
