#pragma once

#include <stdexcept>
#include <string>

namespace cmcs {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidSequence : Error { using Error::Error; };
struct TopologyMismatch : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ChannelError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct ArchitectureMismatch : Error { using Error::Error; };
struct DegenerateVector : Error { using Error::Error; };
struct NormalizationError : Error { using Error::Error; };
struct ParameterError : Error { using Error::Error; };
struct TrainingDiverged : Error { using Error::Error; };
struct EmptySplit : Error { using Error::Error; };
struct StratificationError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

} // namespace cmcs
