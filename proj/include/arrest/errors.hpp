#pragma once

#include <stdexcept>
#include <string>

namespace arrest {

// Error with a stable machine-readable category, used by the CLI to emit
// "error:<category>: <message>" lines. Library code throws these for
// contract violations; anything else escaping to main is "internal".
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& message)
        : std::runtime_error(message), category_(std::move(category)) {}

    const std::string& category() const { return category_; }

private:
    std::string category_;
};

inline Error usage_error(const std::string& msg) { return Error("usage", msg); }
inline Error config_error(const std::string& msg) { return Error("config", msg); }
inline Error shape_error(const std::string& msg) { return Error("shape", msg); }
inline Error data_error(const std::string& msg) { return Error("data", msg); }
inline Error model_error(const std::string& msg) { return Error("model", msg); }
inline Error io_error(const std::string& msg) { return Error("io", msg); }
inline Error domain_error(const std::string& msg) { return Error("domain", msg); }
inline Error state_error(const std::string& msg) { return Error("state", msg); }

}  // namespace arrest
