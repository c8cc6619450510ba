#pragma once

#include <stdexcept>
#include <string>

namespace procformer {

// Error categories map onto CLI exit codes: input data problems exit 2,
// training divergence exits 3, model file incompatibilities exit 4.
// Anything else is a usage or internal error (exit 1).

struct InputError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ModelFileError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EngineError : std::logic_error {
    using std::logic_error::logic_error;
};

// --- event log ingestion ---
struct MissingColumn : InputError { using InputError::InputError; };
struct BadTimestamp : InputError { using InputError::InputError; };
struct BadRow : InputError { using InputError::InputError; };
struct EmptyLog : InputError { using InputError::InputError; };
struct DegenerateSplit : InputError { using InputError::InputError; };

// --- feature construction ---
struct TraceTooLong : InputError { using InputError::InputError; };
struct EmptyDataset : InputError { using InputError::InputError; };
struct PrefixLongerThanMaxLen : InputError { using InputError::InputError; };

// --- evaluation ---
struct EmptyInput : InputError { using InputError::InputError; };
struct EmptyTestSet : InputError { using InputError::InputError; };

// --- tensor engine ---
struct ShapeMismatch : EngineError { using EngineError::EngineError; };
struct AllMasked : EngineError { using EngineError::EngineError; };
struct NonScalarLoss : EngineError { using EngineError::EngineError; };
struct BadTargetId : EngineError { using EngineError::EngineError; };

// --- training ---
struct NonFiniteGradient : TrainingError { using TrainingError::TrainingError; };
struct DivergedLoss : TrainingError { using TrainingError::TrainingError; };

// --- model files ---
struct VersionMismatch : ModelFileError { using ModelFileError::ModelFileError; };
struct CorruptFile : ModelFileError { using ModelFileError::ModelFileError; };

} // namespace procformer
