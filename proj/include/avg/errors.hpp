#pragma once

#include <stdexcept>
#include <string>

namespace avg {

/// Base of all library errors. kind() is a stable machine-readable tag.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define AVG_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& message) : Error(tag, message) {} \
  };

AVG_DEFINE_ERROR(ConfigError, "config")
AVG_DEFINE_ERROR(FormatError, "format")
AVG_DEFINE_ERROR(IntegrityError, "integrity")
AVG_DEFINE_ERROR(ShapeError, "shape")
AVG_DEFINE_ERROR(UsageError, "usage")
AVG_DEFINE_ERROR(TrainingError, "training")
AVG_DEFINE_ERROR(DependencyError, "dependency")

#undef AVG_DEFINE_ERROR

}  // namespace avg
