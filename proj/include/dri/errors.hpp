#pragma once

#include <stdexcept>

#include "dri/tensor.hpp"

namespace dri {

// DimensionError and ContractError live in tensor.hpp since the core needs them.

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public DataError {
public:
    using DataError::DataError;
};

class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace dri
