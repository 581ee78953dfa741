#pragma once

#include <stdexcept>
#include <string>

namespace cxrdiff {

// Error families map onto CLI exit codes (config 2, data 3, numerical 4).
enum class ErrorFamily { config, data, numerical };

class Error : public std::runtime_error {
 public:
  Error(ErrorFamily family, std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), family_(family), kind_(std::move(kind)) {}

  ErrorFamily family() const noexcept { return family_; }
  const std::string& kind() const noexcept { return kind_; }

 private:
  ErrorFamily family_;
  std::string kind_;
};

inline Error config_error(const std::string& kind, const std::string& what) {
  return Error(ErrorFamily::config, kind, what);
}
inline Error data_error(const std::string& kind, const std::string& what) {
  return Error(ErrorFamily::data, kind, what);
}
inline Error numerical_error(const std::string& kind, const std::string& what) {
  return Error(ErrorFamily::numerical, kind, what);
}

inline int exit_code(ErrorFamily family) {
  switch (family) {
    case ErrorFamily::config: return 2;
    case ErrorFamily::data: return 3;
    case ErrorFamily::numerical: return 4;
  }
  return 1;
}

}  // namespace cxrdiff
