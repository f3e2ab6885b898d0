#pragma once

#include <stdexcept>
#include <string>

namespace milore {

// Incompatible tensor extents. Messages name the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Class index or row index outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// Invalid or inconsistent configuration (expert count, rank, layer index, ...).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Stored data disagrees with its recorded totals, magic or hashes.
class IntegrityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the compute graph, e.g. a second backward pass over a consumed graph.
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A batch with no masked frames has no defined masked-prediction loss.
class EmptyMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss. Parameters are left at their last finite values.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace milore
