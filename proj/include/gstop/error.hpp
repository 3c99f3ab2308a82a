#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>

namespace gstop {

using NodeId = std::uint32_t;

enum class ErrorKind {
    configuration,
    domain,
    syntax,
    unknown_identifier,
    signature_mismatch,
    evaluation,
    solver,
    stability,
    infeasible_constraint,
    capacity,
};

inline const char* to_string(ErrorKind kind)
{
    switch (kind) {
    case ErrorKind::configuration: return "configuration error";
    case ErrorKind::domain: return "domain error";
    case ErrorKind::syntax: return "syntax error";
    case ErrorKind::unknown_identifier: return "unknown identifier";
    case ErrorKind::signature_mismatch: return "signature mismatch";
    case ErrorKind::evaluation: return "evaluation error";
    case ErrorKind::solver: return "solver error";
    case ErrorKind::stability: return "stability error";
    case ErrorKind::infeasible_constraint: return "infeasible constraint";
    case ErrorKind::capacity: return "capacity error";
    }
    return "error";
}

/// Base of every exception thrown by the library. The kind drives the CLI exit code.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind)
    {
    }

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Expression parse failure positioned at a byte offset of the source text.
class ParseError : public Error {
public:
    ParseError(ErrorKind kind, std::size_t offset, const std::string& what)
        : Error(kind, what + " at offset " + std::to_string(offset)), offset_(offset)
    {
    }

    std::size_t offset() const noexcept { return offset_; }

private:
    std::size_t offset_;
};

/// Failure attached to a tree node (Picard non-convergence, infeasible constraint, ...).
class NodeError : public Error {
public:
    NodeError(ErrorKind kind, NodeId node, const std::string& what)
        : Error(kind, what + " at node " + std::to_string(node)), node_(node)
    {
    }

    NodeId node() const noexcept { return node_; }

private:
    NodeId node_;
};

} // namespace gstop
