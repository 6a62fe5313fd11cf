#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace sdegeom {

enum class Errc {
  NotSPD,
  EvalFailure,
  SyntaxError,
  UnknownIdentifier,
  ArityError,
  DomainError,
  UnknownScenario,
  BadParams,
  DegenerateX,
  OutOfOverlap,
  ChartExit,
  ZeroVector,
  TooFewAlivePaths,
  NotApplicable,
  ConfigError,
};

inline std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::NotSPD: return "NotSPD";
    case Errc::EvalFailure: return "EvalFailure";
    case Errc::SyntaxError: return "SyntaxError";
    case Errc::UnknownIdentifier: return "UnknownIdentifier";
    case Errc::ArityError: return "ArityError";
    case Errc::DomainError: return "DomainError";
    case Errc::UnknownScenario: return "UnknownScenario";
    case Errc::BadParams: return "BadParams";
    case Errc::DegenerateX: return "DegenerateX";
    case Errc::OutOfOverlap: return "OutOfOverlap";
    case Errc::ChartExit: return "ChartExit";
    case Errc::ZeroVector: return "ZeroVector";
    case Errc::TooFewAlivePaths: return "TooFewAlivePaths";
    case Errc::NotApplicable: return "NotApplicable";
    case Errc::ConfigError: return "ConfigError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

}  // namespace sdegeom
