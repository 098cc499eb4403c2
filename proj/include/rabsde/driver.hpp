#pragma once

#include "rabsde/error.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace rabsde {

/// Variables a driver, obstacle or terminal expression may reference.
///
/// `ey`/`ez` are the anticipated arguments E[Y_{t+delta}|G_t], E[Z_{t+delta}|G_t];
/// `tau` is the default time stopped at the current time (tau ^ t).
enum class Var : std::uint8_t { t, w, h, y, z, ey, ez, u, tau };

inline constexpr std::size_t kVarCount = 9;

inline constexpr std::array<std::string_view, kVarCount> kVarNames = {"t", "w", "h", "y", "z",
                                                                      "ey", "ez", "u", "tau"};

inline std::optional<Var> var_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kVarCount; ++i)
        if (kVarNames[i] == name) return static_cast<Var>(i);
    return std::nullopt;
}

inline std::string_view name_of(Var v) { return kVarNames[static_cast<std::size_t>(v)]; }

using VarMask = std::uint32_t;

inline constexpr VarMask bit(Var v) { return VarMask{1} << static_cast<unsigned>(v); }

/// Variable assignment for expression evaluation.
class Env {
public:
    Env() { values_.fill(0.0); }

    Env& set(Var v, double x) {
        values_[static_cast<std::size_t>(v)] = x;
        bound_ |= bit(v);
        return *this;
    }

    double get(Var v) const { return values_[static_cast<std::size_t>(v)]; }
    bool bound(Var v) const { return (bound_ & bit(v)) != 0; }
    VarMask bound_mask() const { return bound_; }

    /// Binds every variable; convenient for solver call sites.
    static Env full(double t, double w, double h, double y, double z, double ey, double ez, double u,
                    double tau) {
        Env e;
        e.set(Var::t, t).set(Var::w, w).set(Var::h, h).set(Var::y, y).set(Var::z, z);
        e.set(Var::ey, ey).set(Var::ez, ez).set(Var::u, u).set(Var::tau, tau);
        return e;
    }

private:
    std::array<double, kVarCount> values_{};
    VarMask bound_ = 0;
};

namespace detail {

enum class Op : std::uint8_t { constant, variable, add, sub, mul, div, neg, min, max, exp, abs };

struct AstNode {
    Op op = Op::constant;
    double value = 0.0;
    Var var = Var::t;
    int lhs = -1;
    int rhs = -1;
};

struct Token {
    enum Kind { number, ident, plus, minus, star, slash, lparen, rparen, comma, end } kind = end;
    std::string_view text;
    std::size_t offset = 0;
    double value = 0.0;
};

class Lexer {
public:
    explicit Lexer(std::string_view src) : src_(src) { advance(); }

    const Token& peek() const { return tok_; }

    Token take() {
        Token t = tok_;
        advance();
        return t;
    }

private:
    void advance() {
        while (pos_ < src_.size() && (src_[pos_] == ' ' || src_[pos_] == '\t' || src_[pos_] == '\n' ||
                                      src_[pos_] == '\r'))
            ++pos_;
        tok_ = Token{};
        tok_.offset = pos_;
        if (pos_ >= src_.size()) return;
        char c = src_[pos_];
        auto single = [&](Token::Kind k) {
            tok_.kind = k;
            tok_.text = src_.substr(pos_, 1);
            ++pos_;
        };
        switch (c) {
            case '+': return single(Token::plus);
            case '-': return single(Token::minus);
            case '*': return single(Token::star);
            case '/': return single(Token::slash);
            case '(': return single(Token::lparen);
            case ')': return single(Token::rparen);
            case ',': return single(Token::comma);
            default: break;
        }
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') {
            std::size_t start = pos_;
            while (pos_ < src_.size() && (std::isdigit(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '.'))
                ++pos_;
            if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
                std::size_t save = pos_++;
                if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
                if (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) {
                    while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_;
                } else {
                    pos_ = save;
                }
            }
            tok_.kind = Token::number;
            tok_.text = src_.substr(start, pos_ - start);
            auto [ptr, ec] = std::from_chars(tok_.text.data(), tok_.text.data() + tok_.text.size(), tok_.value);
            if (ec != std::errc() || ptr != tok_.text.data() + tok_.text.size())
                throw ParseError("malformed number '" + std::string(tok_.text) + "'", start);
            return;
        }
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            std::size_t start = pos_;
            while (pos_ < src_.size() &&
                   (std::isalnum(static_cast<unsigned char>(src_[pos_])) || src_[pos_] == '_'))
                ++pos_;
            tok_.kind = Token::ident;
            tok_.text = src_.substr(start, pos_ - start);
            return;
        }
        throw ParseError(std::string("unexpected character '") + c + "'", pos_);
    }

    std::string_view src_;
    std::size_t pos_ = 0;
    Token tok_;
};

// expr  := term (('+' | '-') term)*
// term  := unary (('*' | '/') unary)*
// unary := '-' unary | primary
// primary := number | var | func '(' args ')' | '(' expr ')'
class Parser {
public:
    Parser(std::string_view src, std::vector<AstNode>& nodes) : lex_(src), nodes_(nodes) {}

    int parse_all() {
        int root = expr();
        if (lex_.peek().kind != Token::end)
            throw ParseError("unexpected '" + std::string(lex_.peek().text) + "'", lex_.peek().offset);
        return root;
    }

private:
    int push(AstNode n) {
        nodes_.push_back(n);
        return static_cast<int>(nodes_.size()) - 1;
    }

    int binary(Op op, int l, int r) { return push(AstNode{op, 0.0, Var::t, l, r}); }

    int expr() {
        int lhs = term();
        for (;;) {
            auto k = lex_.peek().kind;
            if (k == Token::plus) {
                lex_.take();
                lhs = binary(Op::add, lhs, term());
            } else if (k == Token::minus) {
                lex_.take();
                lhs = binary(Op::sub, lhs, term());
            } else {
                return lhs;
            }
        }
    }

    int term() {
        int lhs = unary();
        for (;;) {
            auto k = lex_.peek().kind;
            if (k == Token::star) {
                lex_.take();
                lhs = binary(Op::mul, lhs, unary());
            } else if (k == Token::slash) {
                lex_.take();
                lhs = binary(Op::div, lhs, unary());
            } else {
                return lhs;
            }
        }
    }

    int unary() {
        if (lex_.peek().kind == Token::minus) {
            lex_.take();
            return binary(Op::neg, unary(), -1);
        }
        return primary();
    }

    void expect(Token::Kind k, const char* what) {
        if (lex_.peek().kind != k) {
            const auto& t = lex_.peek();
            std::string got = t.kind == Token::end ? std::string("end of input") : "'" + std::string(t.text) + "'";
            throw ParseError(std::string("expected ") + what + ", found " + got, t.offset);
        }
        lex_.take();
    }

    int primary() {
        Token t = lex_.take();
        switch (t.kind) {
            case Token::number: return push(AstNode{Op::constant, t.value, Var::t, -1, -1});
            case Token::lparen: {
                int inner = expr();
                expect(Token::rparen, "')'");
                return inner;
            }
            case Token::ident: {
                if (lex_.peek().kind == Token::lparen) return call(t);
                auto v = var_from_name(t.text);
                if (!v) throw ParseError("unknown variable '" + std::string(t.text) + "'", t.offset);
                return push(AstNode{Op::variable, 0.0, *v, -1, -1});
            }
            case Token::end: throw ParseError("unexpected end of input", t.offset);
            default: throw ParseError("unexpected '" + std::string(t.text) + "'", t.offset);
        }
    }

    int call(const Token& name) {
        Op op;
        int arity;
        if (name.text == "min") {
            op = Op::min;
            arity = 2;
        } else if (name.text == "max") {
            op = Op::max;
            arity = 2;
        } else if (name.text == "exp") {
            op = Op::exp;
            arity = 1;
        } else if (name.text == "abs") {
            op = Op::abs;
            arity = 1;
        } else {
            throw ParseError("unknown function '" + std::string(name.text) + "'", name.offset);
        }
        lex_.take();  // '('
        int a = expr();
        int b = -1;
        if (arity == 2) {
            expect(Token::comma, "','");
            b = expr();
        }
        expect(Token::rparen, "')'");
        return binary(op, a, b);
    }

    Lexer lex_;
    std::vector<AstNode>& nodes_;
};

inline std::string format_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

}  // namespace detail

/// Parsed arithmetic expression over the fixed variable set.
///
/// Grammar (EBNF):
///
///     expr    = term { ("+" | "-") term } ;
///     term    = unary { ("*" | "/") unary } ;
///     unary   = "-" unary | primary ;
///     primary = number | variable | func "(" expr [ "," expr ] ")" | "(" expr ")" ;
///     func    = "min" | "max" | "exp" | "abs" ;
///     variable= "t" | "w" | "h" | "y" | "z" | "ey" | "ez" | "u" | "tau" ;
///
/// Instances are immutable; copies share the tree.
class DriverExpr {
public:
    DriverExpr() : DriverExpr(parse("0")) {}

    static DriverExpr parse(std::string_view text) {
        auto nodes = std::make_shared<std::vector<detail::AstNode>>();
        detail::Parser p(text, *nodes);
        int root = p.parse_all();
        VarMask mask = 0;
        for (const auto& n : *nodes)
            if (n.op == detail::Op::variable) mask |= bit(n.var);
        return DriverExpr(std::string(text), std::move(nodes), root, mask);
    }

    const std::string& source() const noexcept { return source_; }
    VarMask free_vars() const noexcept { return free_; }
    bool uses(Var v) const noexcept { return (free_ & bit(v)) != 0; }

    double eval(const Env& env) const {
        VarMask missing = free_ & ~env.bound_mask();
        if (missing != 0) {
            for (std::size_t i = 0; i < kVarCount; ++i)
                if (missing & (VarMask{1} << i))
                    throw EvalError("unbound variable '" + std::string(kVarNames[i]) + "' in '" + source_ + "'");
        }
        return eval_node(root_, env);
    }

    /// Fully parenthesised printout; re-parsing it yields an equivalent tree.
    std::string canonical() const { return print_node(root_); }

private:
    DriverExpr(std::string src, std::shared_ptr<const std::vector<detail::AstNode>> nodes, int root, VarMask mask)
        : source_(std::move(src)), nodes_(std::move(nodes)), root_(root), free_(mask) {}

    double eval_node(int i, const Env& env) const {
        using detail::Op;
        const auto& n = (*nodes_)[static_cast<std::size_t>(i)];
        switch (n.op) {
            case Op::constant: return n.value;
            case Op::variable: return env.get(n.var);
            case Op::add: return eval_node(n.lhs, env) + eval_node(n.rhs, env);
            case Op::sub: return eval_node(n.lhs, env) - eval_node(n.rhs, env);
            case Op::mul: return eval_node(n.lhs, env) * eval_node(n.rhs, env);
            case Op::div: {
                double num = eval_node(n.lhs, env);
                double den = eval_node(n.rhs, env);
                if (den == 0.0) throw EvalError("division by zero in '" + source_ + "'");
                return num / den;
            }
            case Op::neg: return -eval_node(n.lhs, env);
            case Op::min: return std::min(eval_node(n.lhs, env), eval_node(n.rhs, env));
            case Op::max: return std::max(eval_node(n.lhs, env), eval_node(n.rhs, env));
            case Op::exp: return std::exp(eval_node(n.lhs, env));
            case Op::abs: return std::abs(eval_node(n.lhs, env));
        }
        return 0.0;
    }

    std::string print_node(int i) const {
        using detail::Op;
        const auto& n = (*nodes_)[static_cast<std::size_t>(i)];
        auto bin = [&](const char* op) { return "(" + print_node(n.lhs) + " " + op + " " + print_node(n.rhs) + ")"; };
        auto fn = [&](const char* name) {
            std::string s = std::string(name) + "(" + print_node(n.lhs);
            if (n.rhs >= 0) s += ", " + print_node(n.rhs);
            return s + ")";
        };
        switch (n.op) {
            case Op::constant: {
                // Negative literals print as a negation so the grammar can read them back.
                if (std::signbit(n.value)) return "(-" + detail::format_double(-n.value) + ")";
                return detail::format_double(n.value);
            }
            case Op::variable: return std::string(name_of(n.var));
            case Op::add: return bin("+");
            case Op::sub: return bin("-");
            case Op::mul: return bin("*");
            case Op::div: return bin("/");
            case Op::neg: return "(-" + print_node(n.lhs) + ")";
            case Op::min: return fn("min");
            case Op::max: return fn("max");
            case Op::exp: return fn("exp");
            case Op::abs: return fn("abs");
        }
        return "0";
    }

    std::string source_;
    std::shared_ptr<const std::vector<detail::AstNode>> nodes_;
    int root_ = 0;
    VarMask free_ = 0;
};

inline DriverExpr parse_driver(std::string_view text) { return DriverExpr::parse(text); }

inline double eval_driver(const DriverExpr& expr, const Env& env) { return expr.eval(env); }

/// Whether a driver is written against dH (the original equation) or dM
/// (after the compensator rewrite F = f - lambda (1-H) u).
enum class DriverForm { h_form, m_form };

/// F(args) = f(args) - lambda (1 - h) u.
struct MFormRule {
    const DriverExpr* f = nullptr;
    double lambda = 0.0;
    double h = 0.0;

    double operator()(const Env& env) const { return f->eval(env) - lambda * (1.0 - h) * env.get(Var::u); }
};

inline MFormRule to_M_form(const DriverExpr& f, double lambda, double h) {
    if (h != 0.0 && h != 1.0) throw InvalidArgument("h must be 0 or 1");
    return MFormRule{&f, lambda, h};
}

/// A driver together with the form it was written in. Evaluates in either form.
class TransformedDriver {
public:
    TransformedDriver() = default;
    TransformedDriver(DriverExpr base, DriverForm form) : base_(std::move(base)), form_(form) {}

    const DriverExpr& base() const noexcept { return base_; }
    DriverForm form() const noexcept { return form_; }

    /// Driver of the dM-written equation at intensity `lambda`.
    double eval_m(const Env& env, double lambda) const {
        double v = base_.eval(env);
        if (form_ == DriverForm::h_form) v -= lambda * (1.0 - env.get(Var::h)) * env.get(Var::u);
        return v;
    }

    /// Driver of the dH-written equation at intensity `lambda`.
    double eval_h(const Env& env, double lambda) const {
        double v = base_.eval(env);
        if (form_ == DriverForm::m_form) v += lambda * (1.0 - env.get(Var::h)) * env.get(Var::u);
        return v;
    }

private:
    DriverExpr base_;
    DriverForm form_ = DriverForm::h_form;
};

/// Tensor grid over the expression variables. Only variables the expression
/// actually uses are enumerated; the others are held at the range midpoint.
/// `h` always ranges over {0, 1}.
struct SampleGrid {
    struct Range {
        double lo = -2.0;
        double hi = 2.0;
        int points = 9;
    };

    std::array<Range, kVarCount> ranges{};
    std::size_t max_points = 4'000'000;

    SampleGrid() {
        ranges[static_cast<std::size_t>(Var::t)] = {0.0, 1.0, 5};
        ranges[static_cast<std::size_t>(Var::tau)] = {0.0, 1.0, 3};
    }

    Range& operator[](Var v) { return ranges[static_cast<std::size_t>(v)]; }
    const Range& operator[](Var v) const { return ranges[static_cast<std::size_t>(v)]; }

    double value(Var v, int i) const {
        if (v == Var::h) return static_cast<double>(i);
        const auto& r = (*this)[v];
        if (r.points <= 1) return 0.5 * (r.lo + r.hi);
        return r.lo + (r.hi - r.lo) * i / (r.points - 1);
    }

    int points(Var v) const { return v == Var::h ? 2 : std::max(1, (*this)[v].points); }

    void validate() const {
        for (std::size_t i = 0; i < kVarCount; ++i) {
            const auto& r = ranges[i];
            if (static_cast<Var>(i) == Var::h) continue;
            if (!(r.hi >= r.lo) || !std::isfinite(r.lo) || !std::isfinite(r.hi) || r.points < 1)
                throw InvalidArgument("degenerate grid range for '" + std::string(kVarNames[i]) + "'");
        }
    }
};

/// Calls fn(env, index) for every point of the grid restricted to `mask`.
/// `index[v]` is the grid coordinate of variable v.
template <typename Fn>
void for_each_grid_point(const SampleGrid& grid, VarMask mask, Fn&& fn) {
    grid.validate();
    std::array<int, kVarCount> dims{};
    std::size_t total = 1;
    for (std::size_t i = 0; i < kVarCount; ++i) {
        auto v = static_cast<Var>(i);
        dims[i] = (mask & bit(v)) ? grid.points(v) : 1;
        total *= static_cast<std::size_t>(dims[i]);
        if (total > grid.max_points) throw InvalidArgument("sample grid too large; reduce points per variable");
    }
    std::array<int, kVarCount> idx{};
    for (std::size_t n = 0; n < total; ++n) {
        Env env;
        for (std::size_t i = 0; i < kVarCount; ++i) {
            auto v = static_cast<Var>(i);
            double x = (mask & bit(v)) ? grid.value(v, idx[i])
                                       : (v == Var::h ? 0.0 : 0.5 * (grid[v].lo + grid[v].hi));
            env.set(v, x);
        }
        fn(env, static_cast<const std::array<int, kVarCount>&>(idx));
        for (std::size_t i = 0; i < kVarCount; ++i) {
            if (++idx[i] < dims[i]) break;
            idx[i] = 0;
        }
    }
}

/// Sampled Lipschitz constants of a driver in its solution arguments.
/// The u constant is lambda-weighted: |f(u) - f(u')| <= C_u lambda_t |u - u'|.
struct LipschitzEstimate {
    double c_y = 0.0;
    double c_z = 0.0;
    double c_ey = 0.0;
    double c_ez = 0.0;
    double c_u = 0.0;
    int grid_points_per_var = 0;
    std::size_t evaluations = 0;

    double overall() const noexcept { return std::max({c_y, c_z, c_ey, c_ez, c_u}); }
};

using LambdaOfTime = std::function<double(double)>;

/// Largest finite-difference ratio along each solution coordinate over the grid.
/// Points where lambda_t = 0 are skipped for the u coordinate.
inline LipschitzEstimate estimate_lipschitz(const DriverExpr& expr, const SampleGrid& grid,
                                            const LambdaOfTime& lambda_of_t) {
    LipschitzEstimate est;
    est.grid_points_per_var = grid[Var::y].points;
    constexpr std::array<Var, 5> coords = {Var::y, Var::z, Var::ey, Var::ez, Var::u};
    std::array<double*, 5> slots = {&est.c_y, &est.c_z, &est.c_ey, &est.c_ez, &est.c_u};
    VarMask mask = expr.free_vars() | bit(Var::t);
    for_each_grid_point(grid, mask, [&](Env env, const std::array<int, kVarCount>& idx) {
        double base = expr.eval(env);
        ++est.evaluations;
        if (!std::isfinite(base)) throw EvalError("non-finite driver value on the sample grid: '" + expr.source() + "'");
        for (std::size_t c = 0; c < coords.size(); ++c) {
            Var v = coords[c];
            if (!expr.uses(v)) continue;
            int i = idx[static_cast<std::size_t>(v)];
            if (i + 1 >= grid.points(v)) continue;
            double x0 = grid.value(v, i);
            double x1 = grid.value(v, i + 1);
            Env moved = env;
            moved.set(v, x1);
            double next = expr.eval(moved);
            ++est.evaluations;
            if (!std::isfinite(next))
                throw EvalError("non-finite driver value on the sample grid: '" + expr.source() + "'");
            double ratio = std::abs(next - base) / (x1 - x0);
            if (v == Var::u) {
                double lam = lambda_of_t(env.get(Var::t));
                if (lam <= 0.0) continue;
                ratio /= lam;
            }
            *slots[c] = std::max(*slots[c], ratio);
        }
    });
    return est;
}

inline LipschitzEstimate estimate_lipschitz(const DriverExpr& expr, const SampleGrid& grid, double lambda) {
    return estimate_lipschitz(expr, grid, [lambda](double) { return lambda; });
}

/// Constant for the dM-written driver F = f - lambda (1-H) u: the correction adds
/// at most lambda |u - u'| which the lambda-weighted u slot absorbs with constant 1.
inline LipschitzEstimate check_M_form_lipschitz(const LipschitzEstimate& f_estimate, double lambda_max) {
    LipschitzEstimate out = f_estimate;
    if (lambda_max > 0.0) out.c_u += 1.0;
    return out;
}

/// max |f(t, w, h, 0, ..., 0)| over the (t, w, h, tau) grid; throws when non-finite.
inline double check_integrability(const DriverExpr& expr, const SampleGrid& grid) {
    VarMask mask = expr.free_vars() & (bit(Var::t) | bit(Var::w) | bit(Var::h) | bit(Var::tau));
    double worst = 0.0;
    for_each_grid_point(grid, mask, [&](Env env, const auto&) {
        for (Var v : {Var::y, Var::z, Var::ey, Var::ez, Var::u}) env.set(v, 0.0);
        double x = expr.eval(env);
        if (!std::isfinite(x)) throw EvalError("driver is not finite at the origin: '" + expr.source() + "'");
        worst = std::max(worst, std::abs(x));
    });
    return worst;
}

}  // namespace rabsde
