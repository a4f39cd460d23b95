#pragma once

// Error taxonomy. Everything thrown by the library derives from Error;
// provider failures split into Transient (retryable) and Permanent.

#include <cstddef>
#include <stdexcept>
#include <string>

namespace comvint {

class Error : public std::runtime_error {
public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// --- annotations -----------------------------------------------------------

class MalformedMarkup : public Error {
public:
    using Error::Error;
};

class IoFailure : public Error {
public:
    using Error::Error;
};

class DuplicateImageId : public Error {
public:
    using Error::Error;
};

class RecordMissingField : public Error {
public:
    using Error::Error;
};

// --- selection ---------------------------------------------------------------

class UnknownName : public Error {
public:
    using Error::Error;
};

class NoObjects : public Error {
public:
    using Error::Error;
};

// --- prompts -----------------------------------------------------------------

class MissingBinding : public Error {
public:
    using Error::Error;
};

class UnknownPlaceholder : public Error {
public:
    using Error::Error;
};

class EmptyAnnotations : public Error {
public:
    using Error::Error;
};

class TopicNotInImage : public Error {
public:
    using Error::Error;
};

class WrongFormat : public Error {
public:
    using Error::Error;
};

// --- llm client --------------------------------------------------------------

/// Retryable provider failure: HTTP 429/5xx, timeouts, connection errors.
class TransientError : public Error {
public:
    using Error::Error;
};

/// Non-retryable provider failure: other 4xx, malformed response body.
class PermanentError : public Error {
public:
    using Error::Error;
};

class ScriptExhausted : public Error {
public:
    using Error::Error;
};

class ParseError : public Error {
public:
    using Error::Error;
};

class ParseMismatch : public ParseError {
public:
    ParseMismatch(size_t found, size_t expected)
        : ParseError("expected " + std::to_string(expected) + " question/answer pairs, found " +
                     std::to_string(found)),
          found_(found),
          expected_(expected) {}
    size_t found() const { return found_; }
    size_t expected() const { return expected_; }

private:
    size_t found_;
    size_t expected_;
};

class UnparseableVerdict : public ParseError {
public:
    using ParseError::ParseError;
};

class UnknownModel : public Error {
public:
    using Error::Error;
};

// --- dataset / pipeline --------------------------------------------------------

class SchemaViolation : public Error {
public:
    SchemaViolation(const std::string& msg, size_t line) : Error(msg + " (line " + std::to_string(line) + ")"), line_(line) {}
    size_t line() const { return line_; }

private:
    size_t line_;
};

class InsufficientRecords : public Error {
public:
    InsufficientRecords(const std::string& type, size_t needed, size_t available)
        : Error("insufficient " + type + " records: need " + std::to_string(needed) + ", have " +
                std::to_string(available)),
          needed_(needed),
          available_(available) {}
    size_t needed() const { return needed_; }
    size_t available() const { return available_; }

private:
    size_t needed_;
    size_t available_;
};

class ConfigInvalid : public Error {
public:
    using Error::Error;
};

class CorruptCheckpoint : public Error {
public:
    using Error::Error;
};

/// Caller violated a documented precondition (e.g. complicating a failed
/// record). Distinct from data errors so the pipeline never masks it.
class PreconditionViolation : public Error {
public:
    using Error::Error;
};

// --- eval ----------------------------------------------------------------------

class EmptyInput : public Error {
public:
    using Error::Error;
};

}  // namespace comvint
