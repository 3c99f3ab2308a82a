#pragma once

// Expression language for generators g(t,y,z), constraints phi(t,y,z) and
// rewards f(t,w).
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | primary
//   primary := number | variable | func '(' expr [',' expr] ')' | '(' expr ')'
//   func    := abs | max | min | pos | neg | exp | sqrt
//
// pos(e) = max(e, 0), neg(e) = max(-e, 0). A '-' directly followed by a
// numeric literal is read as a negative literal, so printed forms re-parse to
// the identical tree.

#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "gstop/error.hpp"

namespace gstop {

/// Variables a function may reference: (t, y, z) for generators and
/// constraints, (t, w) for rewards and terminal expressions.
enum class Signature { generator, reward };

inline const char* to_string(Signature s)
{
    return s == Signature::generator ? "generator(t,y,z)" : "reward(t,w)";
}

struct GeneratorEnv {
    double t = 0.0;
    double y = 0.0;
    double z = 0.0;
};

struct RewardEnv {
    double t = 0.0;
    double w = 0.0;
};

namespace detail {

enum class Op : std::uint8_t {
    literal,
    var0, // t
    var1, // y or w
    var2, // z
    add,
    sub,
    mul,
    div,
    negate,
    abs,
    max,
    min,
    pos,
    negpart,
    exp,
    sqrt,
};

struct ExprNode {
    Op op = Op::literal;
    double value = 0.0;
    std::int32_t lhs = -1;
    std::int32_t rhs = -1;

    friend bool operator==(const ExprNode& a, const ExprNode& b)
    {
        // literals compare bitwise so that -0.0 and 0.0 stay distinct
        if (a.op != b.op || a.lhs != b.lhs || a.rhs != b.rhs) return false;
        return a.op != Op::literal || (std::signbit(a.value) == std::signbit(b.value) && a.value == b.value);
    }
};

inline int arity(Op op)
{
    switch (op) {
    case Op::literal:
    case Op::var0:
    case Op::var1:
    case Op::var2: return 0;
    case Op::negate:
    case Op::abs:
    case Op::pos:
    case Op::negpart:
    case Op::exp:
    case Op::sqrt: return 1;
    default: return 2;
    }
}

inline std::string format_number(double v)
{
    std::array<char, 64> buf{};
    auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

class Parser;

} // namespace detail

/// A parsed, immutable expression with its signature and optional declared
/// structure. Nodes are stored in postfix order; the last node is the root.
class FunctionSpec {
public:
    FunctionSpec() = default;

    const std::string& source() const noexcept { return source_; }
    Signature signature() const noexcept { return signature_; }
    std::size_t node_count() const noexcept { return nodes_.size(); }

    /// Declared Lipschitz bound M of (A1); informational, guards use probed slopes.
    std::optional<double> declared_lipschitz;
    /// Declared convexity in (y,z).
    std::optional<bool> declared_convex;

    /// True when variable slot `slot` (0 = t, 1 = y or w, 2 = z) occurs.
    bool references(int slot) const noexcept
    {
        const auto want = static_cast<detail::Op>(static_cast<int>(detail::Op::var0) + slot);
        for (const auto& n : nodes_) {
            if (n.op == want) return true;
        }
        return false;
    }
    bool references_t() const noexcept { return references(0); }
    bool references_y() const noexcept { return signature_ == Signature::generator && references(1); }
    bool references_z() const noexcept { return signature_ == Signature::generator && references(2); }
    bool references_w() const noexcept { return signature_ == Signature::reward && references(1); }

    /// Evaluates at raw slots (t, a, b): (t, y, z) or (t, w, unused).
    /// Throws ErrorKind::evaluation on division by zero or a non-finite result.
    double operator()(double t, double a, double b = 0.0) const
    {
        constexpr std::size_t inline_capacity = 64;
        std::array<double, inline_capacity> small;
        std::vector<double> large;
        double* vals = small.data();
        if (nodes_.size() > inline_capacity) {
            large.resize(nodes_.size());
            vals = large.data();
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            const auto& n = nodes_[i];
            const double l = n.lhs >= 0 ? vals[n.lhs] : 0.0;
            const double r = n.rhs >= 0 ? vals[n.rhs] : 0.0;
            double v = 0.0;
            switch (n.op) {
            case detail::Op::literal: v = n.value; break;
            case detail::Op::var0: v = t; break;
            case detail::Op::var1: v = a; break;
            case detail::Op::var2: v = b; break;
            case detail::Op::add: v = l + r; break;
            case detail::Op::sub: v = l - r; break;
            case detail::Op::mul: v = l * r; break;
            case detail::Op::div:
                if (r == 0.0) throw Error(ErrorKind::evaluation, "division by zero in '" + source_ + "'");
                v = l / r;
                break;
            case detail::Op::negate: v = -l; break;
            case detail::Op::abs: v = std::fabs(l); break;
            case detail::Op::max: v = l < r ? r : l; break;
            case detail::Op::min: v = r < l ? r : l; break;
            case detail::Op::pos: v = l > 0.0 ? l : 0.0; break;
            case detail::Op::negpart: v = l < 0.0 ? -l : 0.0; break;
            case detail::Op::exp: v = std::exp(l); break;
            case detail::Op::sqrt: v = std::sqrt(l); break;
            }
            vals[i] = v;
        }
        const double out = nodes_.empty() ? 0.0 : vals[nodes_.size() - 1];
        if (!std::isfinite(out)) {
            throw Error(ErrorKind::evaluation, "non-finite value of '" + source_ + "' at t=" +
                                                   detail::format_number(t) + " (" + detail::format_number(a) +
                                                   ", " + detail::format_number(b) + ")");
        }
        return out;
    }

    /// Canonical fully parenthesised form; parse(print()) reproduces the tree.
    std::string print() const { return nodes_.empty() ? "0" : print_node(static_cast<std::int32_t>(nodes_.size()) - 1); }

    /// Structural equality of the expression trees and signatures.
    friend bool operator==(const FunctionSpec& a, const FunctionSpec& b)
    {
        return a.signature_ == b.signature_ && a.nodes_ == b.nodes_;
    }

    /// Builds lhs + scale * rhs as a new expression of lhs's signature.
    static FunctionSpec add_scaled(const FunctionSpec& lhs, double scale, const FunctionSpec& rhs)
    {
        FunctionSpec out;
        out.signature_ = lhs.signature_;
        out.nodes_ = lhs.nodes_;
        const auto lhs_root = static_cast<std::int32_t>(out.nodes_.size()) - 1;
        const auto offset = static_cast<std::int32_t>(out.nodes_.size());
        out.nodes_.push_back({detail::Op::literal, scale, -1, -1});
        const auto scale_node = offset;
        for (auto n : rhs.nodes_) {
            if (n.lhs >= 0) n.lhs += offset + 1;
            if (n.rhs >= 0) n.rhs += offset + 1;
            out.nodes_.push_back(n);
        }
        const auto rhs_root = static_cast<std::int32_t>(out.nodes_.size()) - 1;
        out.nodes_.push_back({detail::Op::mul, 0.0, scale_node, rhs_root});
        const auto prod = static_cast<std::int32_t>(out.nodes_.size()) - 1;
        out.nodes_.push_back({detail::Op::add, 0.0, lhs_root, prod});
        out.source_ = out.print();
        return out;
    }

private:
    friend class detail::Parser;

    std::string print_node(std::int32_t i) const
    {
        const auto& n = nodes_[static_cast<std::size_t>(i)];
        const bool gen = signature_ == Signature::generator;
        switch (n.op) {
        case detail::Op::literal: return detail::format_number(n.value);
        case detail::Op::var0: return "t";
        case detail::Op::var1: return gen ? "y" : "w";
        case detail::Op::var2: return "z";
        case detail::Op::add: return "(" + print_node(n.lhs) + " + " + print_node(n.rhs) + ")";
        case detail::Op::sub: return "(" + print_node(n.lhs) + " - " + print_node(n.rhs) + ")";
        case detail::Op::mul: return "(" + print_node(n.lhs) + " * " + print_node(n.rhs) + ")";
        case detail::Op::div: return "(" + print_node(n.lhs) + " / " + print_node(n.rhs) + ")";
        case detail::Op::negate: return "(-(" + print_node(n.lhs) + "))";
        case detail::Op::abs: return "abs(" + print_node(n.lhs) + ")";
        case detail::Op::max: return "max(" + print_node(n.lhs) + ", " + print_node(n.rhs) + ")";
        case detail::Op::min: return "min(" + print_node(n.lhs) + ", " + print_node(n.rhs) + ")";
        case detail::Op::pos: return "pos(" + print_node(n.lhs) + ")";
        case detail::Op::negpart: return "neg(" + print_node(n.lhs) + ")";
        case detail::Op::exp: return "exp(" + print_node(n.lhs) + ")";
        case detail::Op::sqrt: return "sqrt(" + print_node(n.lhs) + ")";
        }
        return "?";
    }

    std::string source_;
    Signature signature_ = Signature::generator;
    std::vector<detail::ExprNode> nodes_;
};

namespace detail {

class Parser {
public:
    Parser(std::string_view text, Signature sig) : text_(text), sig_(sig) {}

    FunctionSpec run()
    {
        out_.source_ = std::string(text_);
        out_.signature_ = sig_;
        skip_ws();
        if (pos_ == text_.size()) fail(ErrorKind::syntax, "empty expression");
        parse_expr();
        skip_ws();
        if (pos_ != text_.size()) fail(ErrorKind::syntax, "unexpected '" + std::string(1, text_[pos_]) + "'");
        return std::move(out_);
    }

private:
    [[noreturn]] void fail(ErrorKind kind, const std::string& msg) const { throw ParseError(kind, pos_, msg); }

    void skip_ws()
    {
        while (pos_ < text_.size() && (text_[pos_] == ' ' || text_[pos_] == '\t' || text_[pos_] == '\n' ||
                                       text_[pos_] == '\r')) {
            ++pos_;
        }
    }

    bool peek(char c)
    {
        skip_ws();
        return pos_ < text_.size() && text_[pos_] == c;
    }

    void expect(char c)
    {
        if (!peek(c)) {
            if (pos_ == text_.size()) fail(ErrorKind::syntax, std::string("expected '") + c + "', found end of input");
            fail(ErrorKind::syntax, std::string("expected '") + c + "'");
        }
        ++pos_;
    }

    std::int32_t emit(Op op, std::int32_t lhs = -1, std::int32_t rhs = -1, double value = 0.0)
    {
        out_.nodes_.push_back({op, value, lhs, rhs});
        return static_cast<std::int32_t>(out_.nodes_.size()) - 1;
    }

    std::int32_t parse_expr()
    {
        auto lhs = parse_term();
        while (true) {
            if (peek('+')) {
                ++pos_;
                auto rhs = parse_term();
                lhs = emit(Op::add, lhs, rhs);
            } else if (peek('-')) {
                ++pos_;
                auto rhs = parse_term();
                lhs = emit(Op::sub, lhs, rhs);
            } else {
                return lhs;
            }
        }
    }

    std::int32_t parse_term()
    {
        auto lhs = parse_unary();
        while (true) {
            if (peek('*')) {
                ++pos_;
                auto rhs = parse_unary();
                lhs = emit(Op::mul, lhs, rhs);
            } else if (peek('/')) {
                ++pos_;
                auto rhs = parse_unary();
                lhs = emit(Op::div, lhs, rhs);
            } else {
                return lhs;
            }
        }
    }

    static bool is_digit(char c) { return c >= '0' && c <= '9'; }
    static bool is_ident_start(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }

    std::int32_t parse_unary()
    {
        if (peek('-')) {
            const auto minus = pos_;
            ++pos_;
            if (pos_ < text_.size() && (is_digit(text_[pos_]) || text_[pos_] == '.')) {
                pos_ = minus;
                return parse_number();
            }
            auto operand = parse_unary();
            return emit(Op::negate, operand);
        }
        return parse_primary();
    }

    std::int32_t parse_number()
    {
        const auto start = pos_;
        std::size_t end = pos_;
        if (end < text_.size() && text_[end] == '-') ++end;
        while (end < text_.size() && is_digit(text_[end])) ++end;
        if (end < text_.size() && text_[end] == '.') {
            ++end;
            while (end < text_.size() && is_digit(text_[end])) ++end;
        }
        if (end < text_.size() && (text_[end] == 'e' || text_[end] == 'E')) {
            std::size_t exp_end = end + 1;
            if (exp_end < text_.size() && (text_[exp_end] == '+' || text_[exp_end] == '-')) ++exp_end;
            if (exp_end < text_.size() && is_digit(text_[exp_end])) {
                while (exp_end < text_.size() && is_digit(text_[exp_end])) ++exp_end;
                end = exp_end;
            }
        }
        double value = 0.0;
        auto res = std::from_chars(text_.data() + start, text_.data() + end, value);
        if (res.ec != std::errc() || res.ptr != text_.data() + end) fail(ErrorKind::syntax, "malformed number");
        if (!std::isfinite(value)) fail(ErrorKind::syntax, "number out of range");
        pos_ = end;
        return emit(Op::literal, -1, -1, value);
    }

    std::int32_t parse_primary()
    {
        skip_ws();
        if (pos_ == text_.size()) fail(ErrorKind::syntax, "unexpected end of input");
        const char c = text_[pos_];
        if (is_digit(c) || c == '.') return parse_number();
        if (c == '(') {
            ++pos_;
            auto inner = parse_expr();
            expect(')');
            return inner;
        }
        if (!is_ident_start(c)) fail(ErrorKind::syntax, "unexpected '" + std::string(1, c) + "'");

        const auto start = pos_;
        while (pos_ < text_.size() && (is_ident_start(text_[pos_]) || is_digit(text_[pos_]))) ++pos_;
        const auto name = text_.substr(start, pos_ - start);

        if (auto op = function_op(name)) {
            if (!peek('(')) fail(ErrorKind::syntax, "expected '(' after " + std::string(name));
            ++pos_;
            auto a = parse_expr();
            std::int32_t b = -1;
            if (arity(*op) == 2) {
                expect(',');
                b = parse_expr();
            }
            expect(')');
            return emit(*op, a, b);
        }

        const bool gen = sig_ == Signature::generator;
        Op var;
        if (name == "t") {
            var = Op::var0;
        } else if (name == "y" || name == "z") {
            if (!gen) {
                pos_ = start;
                fail(ErrorKind::signature_mismatch, "variable '" + std::string(name) + "' not allowed in " +
                                                        to_string(sig_));
            }
            var = name == "y" ? Op::var1 : Op::var2;
        } else if (name == "w") {
            if (gen) {
                pos_ = start;
                fail(ErrorKind::signature_mismatch, "variable 'w' not allowed in " + std::string(to_string(sig_)));
            }
            var = Op::var1;
        } else {
            pos_ = start;
            fail(ErrorKind::unknown_identifier, "unknown identifier '" + std::string(name) + "'");
        }
        return emit(var);
    }

    static std::optional<Op> function_op(std::string_view name)
    {
        if (name == "abs") return Op::abs;
        if (name == "max") return Op::max;
        if (name == "min") return Op::min;
        if (name == "pos") return Op::pos;
        if (name == "neg") return Op::negpart;
        if (name == "exp") return Op::exp;
        if (name == "sqrt") return Op::sqrt;
        return std::nullopt;
    }

    std::string_view text_;
    Signature sig_;
    std::size_t pos_ = 0;
    FunctionSpec out_;
};

} // namespace detail

/// Parses `text` for the given signature. Throws ParseError carrying the byte offset.
inline FunctionSpec parse(std::string_view text, Signature sig)
{
    return detail::Parser(text, sig).run();
}

inline double evaluate(const FunctionSpec& f, const GeneratorEnv& env)
{
    if (f.signature() != Signature::generator) {
        throw Error(ErrorKind::signature_mismatch, "'" + f.source() + "' is not a generator/constraint");
    }
    return f(env.t, env.y, env.z);
}

inline double evaluate(const FunctionSpec& f, const RewardEnv& env)
{
    if (f.signature() != Signature::reward) {
        throw Error(ErrorKind::signature_mismatch, "'" + f.source() + "' is not a reward");
    }
    return f(env.t, env.w);
}

} // namespace gstop
