#pragma once

#include <stdexcept>
#include <string>

namespace gaitdis {

/// Root of every error raised by the library. `kind()` is a stable
/// machine-readable tag used by the CLI error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct InvalidInput : Error {
  explicit InvalidInput(const std::string& w) : Error("invalid_input", w) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& w) : Error("shape", w) {}
};

struct InvalidBox : Error {
  explicit InvalidBox(const std::string& w) : Error("invalid_box", w) {}
};

struct IngestionError : Error {
  explicit IngestionError(const std::string& w) : Error("ingestion", w) {}
};

struct VersionError : Error {
  explicit VersionError(const std::string& w) : Error("version", w) {}
};

struct CorruptionError : Error {
  explicit CorruptionError(const std::string& w) : Error("corruption", w) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& w) : Error("config", w) {}
};

struct CapacityError : Error {
  explicit CapacityError(const std::string& w) : Error("capacity", w) {}
};

struct PairingError : Error {
  explicit PairingError(const std::string& w) : Error("pairing", w) {}
};

struct ProtocolError : Error {
  explicit ProtocolError(const std::string& w) : Error("protocol", w) {}
};

struct UndefinedCosine : Error {
  explicit UndefinedCosine(const std::string& w) : Error("undefined_cosine", w) {}
};

struct UndefinedFar : Error {
  explicit UndefinedFar(const std::string& w) : Error("undefined_far", w) {}
};

/// Non-finite activation detected in a forward pass.
class NumericFault : public Error {
 public:
  NumericFault(const std::string& stage, int layer)
      : Error("numeric_fault", stage + ": non-finite activation at layer " + std::to_string(layer)),
        layer_(layer) {}
  int layer() const noexcept { return layer_; }

 private:
  int layer_;
};

/// Non-finite loss during training; names the offending component.
class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(std::string component)
      : Error("non_finite_loss", "non-finite loss component: " + component),
        component_(std::move(component)) {}
  const std::string& component() const noexcept { return component_; }

 private:
  std::string component_;
};

}  // namespace gaitdis
