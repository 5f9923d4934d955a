#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace flowlm {

/// Broad failure classes. The CLI maps these onto process exit codes.
enum class ErrorKind {
    data,         // malformed or insufficient input data, validation failures
    io,           // unreadable/unwritable files, usage errors
    fingerprint,  // artifacts that do not belong together
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::io, what) {}
};

class MalformedRow : public Error {
public:
    MalformedRow(std::size_t row, const std::string& reason)
        : Error(ErrorKind::data, "malformed row " + std::to_string(row) + ": " + reason), row_(row) {}
    std::size_t row() const noexcept { return row_; }

private:
    std::size_t row_;
};

class UnknownLabel : public Error {
public:
    explicit UnknownLabel(const std::string& what) : Error(ErrorKind::data, what) {}
};

class InsufficientLabel : public Error {
public:
    InsufficientLabel(const std::string& label, std::size_t wanted, std::size_t available)
        : Error(ErrorKind::data, "label '" + label + "': requested " + std::to_string(wanted) +
                                     " but only " + std::to_string(available) + " available"),
          label_(label) {}
    const std::string& label() const noexcept { return label_; }

private:
    std::string label_;
};

class EmptyFitSet : public Error {
public:
    EmptyFitSet() : Error(ErrorKind::data, "cannot fit discretizer on an empty table") {}
};

class FormatVersionMismatch : public Error {
public:
    explicit FormatVersionMismatch(const std::string& what) : Error(ErrorKind::io, what) {}
};

class ConfigMismatch : public Error {
public:
    explicit ConfigMismatch(const std::string& what) : Error(ErrorKind::data, what) {}

protected:
    ConfigMismatch(ErrorKind kind, const std::string& what) : Error(kind, what) {}
};

/// Artifacts trained against a different discretizer (or otherwise mismatched inputs).
class FingerprintMismatch : public ConfigMismatch {
public:
    explicit FingerprintMismatch(const std::string& what)
        : ConfigMismatch(ErrorKind::fingerprint, what) {}
};

class EmptyTable : public Error {
public:
    EmptyTable() : Error(ErrorKind::data, "tokenized table is empty") {}
};

class RaggedBatch : public Error {
public:
    explicit RaggedBatch(const std::string& what) : Error(ErrorKind::data, what) {}
};

class IdOutOfRange : public Error {
public:
    explicit IdOutOfRange(const std::string& what) : Error(ErrorKind::data, what) {}
};

class ShapeMismatch : public Error {
public:
    explicit ShapeMismatch(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NoMaskedPositions : public Error {
public:
    NoMaskedPositions() : Error(ErrorKind::data, "batch has no positions selected for MLM loss") {}
};

class NonFiniteGradient : public Error {
public:
    explicit NonFiniteGradient(const std::string& tensor)
        : Error(ErrorKind::data, "non-finite gradient in tensor '" + tensor + "'"), tensor_(tensor) {}
    const std::string& tensor() const noexcept { return tensor_; }

private:
    std::string tensor_;
};

class MissingLabels : public Error {
public:
    MissingLabels() : Error(ErrorKind::data, "fine-tuning requires a labeled training table") {}
};

}  // namespace flowlm
