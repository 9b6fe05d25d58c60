#pragma once

#include <stdexcept>
#include <string>

namespace fdt {

// Every failure raised by the library derives from Error so callers (and the
// CLI exit-code mapping) can separate domain errors from programming bugs.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class DataError : public Error {
public:
    using Error::Error;
};

class FormatError : public Error {
public:
    using Error::Error;
};

class ProtocolError : public Error {
public:
    using Error::Error;
};

class IntegrityError : public Error {
public:
    using Error::Error;
};

class VerificationError : public Error {
public:
    using Error::Error;
};

class GrowthCapError : public ContractError {
public:
    using ContractError::ContractError;
};

}  // namespace fdt
