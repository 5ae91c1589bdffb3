#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace campfire {

enum class ErrorCode {
    MalformedManifest,
    CorruptTile,
    ChannelMismatch,
    MissingStats,
    ZeroStd,
    InvalidConfig,
    NotEnoughPlates,
    NoNonControlCompounds,
    IOFailure,
    IndivisibleTile,
    EmptySequence,
    EmptyChannel,
    ShapeMismatch,
    DataUnavailable,
    DegenerateLabels,
    InsufficientData,
    UnknownChannel,
    DimensionMismatch,
    EmptyWell,
    NoTriplets,
    CorruptCheckpoint,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MalformedManifest: return "MalformedManifest";
        case ErrorCode::CorruptTile: return "CorruptTile";
        case ErrorCode::ChannelMismatch: return "ChannelMismatch";
        case ErrorCode::MissingStats: return "MissingStats";
        case ErrorCode::ZeroStd: return "ZeroStd";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::NotEnoughPlates: return "NotEnoughPlates";
        case ErrorCode::NoNonControlCompounds: return "NoNonControlCompounds";
        case ErrorCode::IOFailure: return "IOFailure";
        case ErrorCode::IndivisibleTile: return "IndivisibleTile";
        case ErrorCode::EmptySequence: return "EmptySequence";
        case ErrorCode::EmptyChannel: return "EmptyChannel";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::DataUnavailable: return "DataUnavailable";
        case ErrorCode::DegenerateLabels: return "DegenerateLabels";
        case ErrorCode::InsufficientData: return "InsufficientData";
        case ErrorCode::UnknownChannel: return "UnknownChannel";
        case ErrorCode::DimensionMismatch: return "DimensionMismatch";
        case ErrorCode::EmptyWell: return "EmptyWell";
        case ErrorCode::NoTriplets: return "NoTriplets";
        case ErrorCode::CorruptCheckpoint: return "CorruptCheckpoint";
    }
    return "Unknown";
}

/// Every failure raised by the library carries one of the codes above so the
/// CLI can map it onto an exit status.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

    bool is_io() const noexcept { return code_ == ErrorCode::IOFailure; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

}  // namespace campfire
