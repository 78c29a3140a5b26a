#pragma once

#include <stdexcept>
#include <string>

namespace msg {

// Violated precondition: bad shapes, out-of-range arguments, empty inputs.
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Math domain violation or non-finite value in a computation.
class DomainError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

// File or format problem. The message always names the path.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

[[noreturn]] inline void contract_fail(const std::string& what) { throw ContractError(what); }

inline void require(bool ok, const std::string& what) {
  if (!ok) contract_fail(what);
}

}  // namespace detail
}  // namespace msg
