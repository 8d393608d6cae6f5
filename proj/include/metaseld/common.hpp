#pragma once

#include <stdexcept>
#include <string>

namespace metaseld {

/// Error categories; values double as CLI exit codes.
enum class ErrCode { ok = 0, config = 2, data = 3, numeric = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrCode code, std::string msg) : std::runtime_error(std::move(msg)), code_(code) {}
  ErrCode code() const { return code_; }

 private:
  ErrCode code_;
};

[[noreturn]] inline void fail_config(const std::string& m) { throw Error(ErrCode::config, m); }
[[noreturn]] inline void fail_data(const std::string& m) { throw Error(ErrCode::data, m); }
[[noreturn]] inline void fail_numeric(const std::string& m) { throw Error(ErrCode::numeric, m); }

}  // namespace metaseld
