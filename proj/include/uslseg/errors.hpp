#pragma once

#include <stdexcept>
#include <string>

namespace uslseg {

// Every failure raised by the library derives from Error so callers can catch
// a single type at the CLI boundary.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class EmptyDataset : public Error {
 public:
  using Error::Error;
};

class DecodeError : public Error {
 public:
  DecodeError(std::string id, const std::string& detail)
      : Error("cannot decode '" + id + "': " + detail), id_(std::move(id)) {}
  const std::string& id() const { return id_; }

 private:
  std::string id_;
};

class DegenerateInput : public Error {
 public:
  using Error::Error;
};

class InvalidMethod : public Error {
 public:
  using Error::Error;
};

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss(const std::string& where, long batch)
      : Error("non-finite loss in " + where + " at batch " + std::to_string(batch)), batch_(batch) {}
  long batch() const { return batch_; }

 private:
  long batch_;
};

class InvalidThresholds : public Error {
 public:
  using Error::Error;
};

class InvalidThreshold : public Error {
 public:
  using Error::Error;
};

class NoTrainableSamples : public Error {
 public:
  using Error::Error;
};

class NonBinaryInput : public Error {
 public:
  using Error::Error;
};

class MissingPrediction : public Error {
 public:
  explicit MissingPrediction(const std::string& id) : Error("missing prediction for '" + id + "'") {}
};

class MissingPrerequisite : public Error {
 public:
  MissingPrerequisite(const std::string& stage, const std::string& what)
      : Error("stage '" + stage + "' is missing prerequisite: " + what) {}
};

class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& detail)
      : Error("config field '" + field + "': " + detail), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

}  // namespace uslseg
