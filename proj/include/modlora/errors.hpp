// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace modlora {

/// Base of every error raised by the library. `category()` feeds the CLI's
/// machine-readable error line and exit code.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual const char* category() const noexcept = 0;
    virtual int exit_code() const noexcept { return 1; }
};

#define MODLORA_DEFINE_ERROR(Name, tag, code)                              \
    class Name : public Error {                                            \
    public:                                                                \
        using Error::Error;                                                \
        const char* category() const noexcept override { return tag; }    \
        int exit_code() const noexcept override { return code; }           \
    };

MODLORA_DEFINE_ERROR(ShapeError, "shape", 1)
MODLORA_DEFINE_ERROR(ParameterError, "parameter", 1)
MODLORA_DEFINE_ERROR(LookupError, "lookup", 1)
MODLORA_DEFINE_ERROR(SpecError, "spec", 1)
MODLORA_DEFINE_ERROR(ValidationError, "validation", 1)
MODLORA_DEFINE_ERROR(IoError, "io", 2)

#undef MODLORA_DEFINE_ERROR

/// Checkpoint container problems. Each malformation has its own kind so
/// callers and tests can tell them apart.
class FormatError : public Error {
public:
    enum class Kind {
        Truncated,
        HeaderJson,
        BadEntry,
        UnsupportedDtype,
        OverlappingOffsets,
        BadMetadata,
    };

    FormatError(Kind kind, const std::string& what) : Error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }
    const char* category() const noexcept override {
        switch (kind_) {
        case Kind::Truncated: return "format.truncated";
        case Kind::HeaderJson: return "format.json";
        case Kind::BadEntry: return "format.entry";
        case Kind::UnsupportedDtype: return "format.dtype";
        case Kind::OverlappingOffsets: return "format.offsets";
        case Kind::BadMetadata: return "format.metadata";
        }
        return "format";
    }
    int exit_code() const noexcept override { return 2; }

private:
    Kind kind_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
    DivergenceError(const std::string& what, std::size_t step) : Error(what), step_(step) {}
    std::size_t step() const noexcept { return step_; }
    const char* category() const noexcept override { return "divergence"; }
    int exit_code() const noexcept override { return 3; }

private:
    std::size_t step_;
};

}  // namespace modlora
