#pragma once

#include <stdexcept>
#include <string>

namespace mpq {

// Root of every failure raised by the library. Subclasses map onto distinct
// process exit codes in the command line tool.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible tensor/layer shapes or malformed network description.
class ShapeError : public Error {
 public:
  using Error::Error;
};

// Non-finite values, log of zero and similar numeric failures.
class NumericError : public Error {
 public:
  using Error::Error;
};

// The requested bit budget cannot be met even with every layer at its
// smallest candidate bit-width.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

// An exact solver or oracle was asked to work beyond its size budget.
class BudgetError : public Error {
 public:
  using Error::Error;
};

// Invalid manifest field, missing file or size mismatch on disk.
class ManifestError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace mpq
