#pragma once

#include <stdexcept>
#include <string>

namespace csn {

// Error taxonomy shared across the library. Messages are single-line so the
// CLI can forward them verbatim as machine-parseable diagnostics.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define CSN_DEFINE_ERROR(NAME)                            \
  class NAME : public Error {                             \
   public:                                                \
    explicit NAME(const std::string& msg) : Error(msg) {} \
  }

CSN_DEFINE_ERROR(DimensionError);      // shape/extent mismatch
CSN_DEFINE_ERROR(StateError);          // e.g. eval-mode batch norm without stats
CSN_DEFINE_ERROR(IndexError);          // out-of-range label or index
CSN_DEFINE_ERROR(ContractError);       // API contract violation
CSN_DEFINE_ERROR(ConfigError);         // invalid configuration
CSN_DEFINE_ERROR(IngestError);         // unreadable or missing dataset input
CSN_DEFINE_ERROR(IntegrityError);      // dataset content violates its contract
CSN_DEFINE_ERROR(SamplingError);       // episode sampling infeasible
CSN_DEFINE_ERROR(StatsError);          // statistics precondition failed
CSN_DEFINE_ERROR(SelectionError);      // checkpoint selection infeasible
CSN_DEFINE_ERROR(SerializationError);  // malformed container file

#undef CSN_DEFINE_ERROR

}  // namespace csn
