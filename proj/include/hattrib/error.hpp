#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace hattrib {

enum class ErrorCode {
  // configuration
  ConfigError,
  // data / ingest
  MissingFile,
  MissingColumn,
  UnparsableRow,
  NonPositivePrice,
  EmptyIntersection,
  SlotOutOfRange,
  InsufficientHistory,
  SeriesTooShort,
  FeatureUndefined,
  DimensionMismatch,
  ShapeMismatch,
  BadArchitecture,
  StaleCache,
  NotOnSimplex,
  EpisodeFinished,
  WindowTooLong,
  NoOverlap,
  TooFewSamples,
  DegenerateTarget,
  ModelNotFitted,
  ArtifactMismatch,
  // numeric
  NonFiniteInput,
  NonFiniteGradient,
  RankDeficient,
  NaNLoss,
  ZeroVariance,
};

enum class ErrorCategory { Config, Data, Numeric };

constexpr std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::MissingFile: return "MissingFile";
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::UnparsableRow: return "UnparsableRow";
    case ErrorCode::NonPositivePrice: return "NonPositivePrice";
    case ErrorCode::EmptyIntersection: return "EmptyIntersection";
    case ErrorCode::SlotOutOfRange: return "SlotOutOfRange";
    case ErrorCode::InsufficientHistory: return "InsufficientHistory";
    case ErrorCode::SeriesTooShort: return "SeriesTooShort";
    case ErrorCode::FeatureUndefined: return "FeatureUndefined";
    case ErrorCode::DimensionMismatch: return "DimensionMismatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::BadArchitecture: return "BadArchitecture";
    case ErrorCode::StaleCache: return "StaleCache";
    case ErrorCode::NotOnSimplex: return "NotOnSimplex";
    case ErrorCode::EpisodeFinished: return "EpisodeFinished";
    case ErrorCode::WindowTooLong: return "WindowTooLong";
    case ErrorCode::NoOverlap: return "NoOverlap";
    case ErrorCode::TooFewSamples: return "TooFewSamples";
    case ErrorCode::DegenerateTarget: return "DegenerateTarget";
    case ErrorCode::ModelNotFitted: return "ModelNotFitted";
    case ErrorCode::ArtifactMismatch: return "ArtifactMismatch";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::NonFiniteGradient: return "NonFiniteGradient";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::NaNLoss: return "NaNLoss";
    case ErrorCode::ZeroVariance: return "ZeroVariance";
  }
  return "Unknown";
}

constexpr ErrorCategory category(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
      return ErrorCategory::Config;
    case ErrorCode::NonFiniteInput:
    case ErrorCode::NonFiniteGradient:
    case ErrorCode::RankDeficient:
    case ErrorCode::NaNLoss:
    case ErrorCode::ZeroVariance:
      return ErrorCategory::Numeric;
    default:
      return ErrorCategory::Data;
  }
}

// Process exit code used by the CLI for each error category.
constexpr int exit_code(ErrorCategory cat) {
  switch (cat) {
    case ErrorCategory::Config: return 2;
    case ErrorCategory::Data: return 3;
    case ErrorCategory::Numeric: return 4;
  }
  return 1;
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace hattrib
