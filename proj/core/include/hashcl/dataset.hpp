#pragma once

#include <cstddef>
#include <vector>

namespace hashcl {

struct LabeledSample {
  std::vector<double> raw;
  std::size_t label = 0;
};

/// One task of a class-incremental stream. Class ids are globally unique.
struct TaskData {
  std::size_t task = 0;
  std::vector<std::size_t> classes;
  std::vector<LabeledSample> train;
  std::vector<LabeledSample> test;
};

}  // namespace hashcl
