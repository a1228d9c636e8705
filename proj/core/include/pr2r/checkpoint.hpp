#ifndef PR2R_CHECKPOINT_HPP
#define PR2R_CHECKPOINT_HPP

#include <map>
#include <string>

#include "pr2r/tensor.hpp"

namespace pr2r {

// Binary tensor container, also used for single-tensor .t64 image files.
//
// Layout (all integers little-endian):
//   magic "PR2R" | version u32 | tensor count u32
//   per tensor: name length u32 | name bytes | rank u32 | extents u64[rank] | payload f64[numel]

inline constexpr std::uint32_t kCheckpointVersion = 1;

void write_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> read_checkpoint(const std::string& path);

void write_single_tensor(const std::string& path, const Tensor& t);  // unnamed tensor
Tensor read_single_tensor(const std::string& path);

}  // namespace pr2r

#endif
