#pragma once

#include <stdexcept>
#include <string>

namespace dsparse {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or rank disagreement between arrays.
struct DimError : Error {
    using Error::Error;
};

// A scalar argument outside its valid range (probabilities, sparsity, temperature...).
struct ParamError : Error {
    using Error::Error;
};

// Training-mode batch statistics need at least two rows.
struct BatchSizeError : Error {
    using Error::Error;
};

// Entity/relation id outside vocabulary bounds.
struct IndexError : Error {
    using Error::Error;
};

// Malformed input file.
struct ParseError : Error {
    using Error::Error;
};

// Unknown entity/relation name under strict vocabulary reuse.
struct VocabError : Error {
    using Error::Error;
};

// An operation applied in the wrong object state (e.g. augmenting twice).
struct StateError : Error {
    using Error::Error;
};

// A checkpoint file that is corrupt, truncated, or inconsistent with its data.
struct IntegrityError : Error {
    using Error::Error;
};

struct VersionError : IntegrityError {
    using IntegrityError::IntegrityError;
};

// Evaluation-protocol violation (e.g. gold entity missing from its filter set).
struct ProtocolError : Error {
    using Error::Error;
};

} // namespace dsparse
