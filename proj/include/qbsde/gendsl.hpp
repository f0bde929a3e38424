#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace qbsde::dsl {

enum class Op { num, var, neg, add, sub, mul, div, pow, call };
enum class Var { t, y, a, z, w, wp, norm2z, normz };
enum class Fn { abs, exp, log, sqrt, pos, neg, sgn, tanh, min, max, dotz };

struct Node;
using Expr = std::shared_ptr<const Node>;

/// Immutable expression node. `index` is the zero-based component for z, w, wp.
struct Node {
    Op op = Op::num;
    double value = 0.0;
    Var var = Var::t;
    std::size_t index = 0;
    Fn fn = Fn::abs;
    std::vector<Expr> args;
};

inline Expr number(double v) { return std::make_shared<const Node>(Node{Op::num, v, Var::t, 0, Fn::abs, {}}); }
inline Expr variable(Var v, std::size_t index = 0) {
    return std::make_shared<const Node>(Node{Op::var, 0.0, v, index, Fn::abs, {}});
}
inline Expr unary_minus(Expr e) { return std::make_shared<const Node>(Node{Op::neg, 0.0, Var::t, 0, Fn::abs, {std::move(e)}}); }
inline Expr binary(Op op, Expr l, Expr r) {
    return std::make_shared<const Node>(Node{op, 0.0, Var::t, 0, Fn::abs, {std::move(l), std::move(r)}});
}
inline Expr call(Fn fn, std::vector<Expr> args) {
    return std::make_shared<const Node>(Node{Op::call, 0.0, Var::t, 0, fn, std::move(args)});
}

/// Syntax error, unknown identifier or arity mismatch at a byte offset.
struct ParseError : std::invalid_argument {
    ParseError(std::string kind_, std::size_t offset_, const std::string& detail)
        : std::invalid_argument(kind_ + " at offset " + std::to_string(offset_) + ": " + detail),
          kind(std::move(kind_)),
          offset(offset_) {}
    std::string kind;
    std::size_t offset;
};

/// Domain violation during evaluation; `subexpression` is the formatted culprit.
struct EvalError : std::domain_error {
    EvalError(const std::string& what, std::string sub) : std::domain_error(what + " in '" + sub + "'"), subexpression(std::move(sub)) {}
    std::string subexpression;
};

inline const char* fn_name(Fn f) {
    switch (f) {
        case Fn::abs: return "abs";
        case Fn::exp: return "exp";
        case Fn::log: return "log";
        case Fn::sqrt: return "sqrt";
        case Fn::pos: return "pos";
        case Fn::neg: return "neg";
        case Fn::sgn: return "sgn";
        case Fn::tanh: return "tanh";
        case Fn::min: return "min";
        case Fn::max: return "max";
        case Fn::dotz: return "dotz";
    }
    return "?";
}

inline std::optional<Fn> fn_from_name(std::string_view s) {
    for (Fn f : {Fn::abs, Fn::exp, Fn::log, Fn::sqrt, Fn::pos, Fn::neg, Fn::sgn, Fn::tanh, Fn::min, Fn::max, Fn::dotz})
        if (s == fn_name(f)) return f;
    return std::nullopt;
}

namespace detail {

class Parser {
public:
    explicit Parser(std::string_view src) : s_(src) {}

    Expr parse() {
        Expr e = expr();
        skip();
        if (pos_ != s_.size()) fail("syntax error", "unexpected '" + std::string(1, s_[pos_]) + "'");
        return e;
    }

private:
    [[noreturn]] void fail(const std::string& kind, const std::string& detail) const { throw ParseError(kind, pos_, detail); }

    void skip() {
        while (pos_ < s_.size() && (s_[pos_] == ' ' || s_[pos_] == '\t' || s_[pos_] == '\n' || s_[pos_] == '\r')) ++pos_;
    }

    bool accept(char c) {
        skip();
        if (pos_ < s_.size() && s_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    Expr expr() {
        Expr left = term();
        for (;;) {
            if (accept('+')) left = binary(Op::add, left, term());
            else if (accept('-')) left = binary(Op::sub, left, term());
            else return left;
        }
    }

    Expr term() {
        Expr left = factor();
        for (;;) {
            if (accept('*')) left = binary(Op::mul, left, factor());
            else if (accept('/')) left = binary(Op::div, left, factor());
            else return left;
        }
    }

    Expr factor() {
        const bool negate = accept('-');
        Expr base = atom();
        if (negate) base = unary_minus(base);
        if (accept('^')) base = binary(Op::pow, base, atom());
        return base;
    }

    Expr atom() {
        skip();
        if (pos_ >= s_.size()) fail("syntax error", "unexpected end of input");
        const char c = s_[pos_];
        if (c == '(') {
            ++pos_;
            Expr e = expr();
            if (!accept(')')) fail("syntax error", "expected ')'");
            return e;
        }
        if ((c >= '0' && c <= '9') || c == '.') return num();
        if (is_alpha(c)) return ident();
        fail("syntax error", "unexpected '" + std::string(1, c) + "'");
    }

    static bool is_alpha(char c) { return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_'; }
    static bool is_digit(char c) { return c >= '0' && c <= '9'; }

    Expr num() {
        const std::size_t start = pos_;
        while (pos_ < s_.size() && is_digit(s_[pos_])) ++pos_;
        if (pos_ < s_.size() && s_[pos_] == '.') {
            ++pos_;
            while (pos_ < s_.size() && is_digit(s_[pos_])) ++pos_;
        }
        if (pos_ < s_.size() && (s_[pos_] == 'e' || s_[pos_] == 'E')) {
            std::size_t q = pos_ + 1;
            if (q < s_.size() && (s_[q] == '+' || s_[q] == '-')) ++q;
            if (q < s_.size() && is_digit(s_[q])) {
                pos_ = q;
                while (pos_ < s_.size() && is_digit(s_[pos_])) ++pos_;
            }
        }
        double v = 0.0;
        const auto res = std::from_chars(s_.data() + start, s_.data() + pos_, v);
        if (res.ec != std::errc() || res.ptr != s_.data() + pos_) {
            pos_ = start;
            fail("syntax error", "malformed number");
        }
        return number(v);
    }

    Expr ident() {
        const std::size_t start = pos_;
        while (pos_ < s_.size() && (is_alpha(s_[pos_]) || is_digit(s_[pos_]))) ++pos_;
        const std::string_view name = s_.substr(start, pos_ - start);
        skip();
        const bool is_call = pos_ < s_.size() && s_[pos_] == '(';
        if (is_call) {
            if (name == "pow") return call_args(start, name, 2, [](std::vector<Expr> a) { return binary(Op::pow, a[0], a[1]); });
            const auto f = fn_from_name(name);
            if (!f) {
                pos_ = start;
                fail("unknown identifier", "no function named '" + std::string(name) + "'");
            }
            const std::size_t arity = (*f == Fn::min || *f == Fn::max) ? 2 : (*f == Fn::dotz ? 0 : 1);
            return call_args(start, name, arity, [f](std::vector<Expr> a) { return call(*f, std::move(a)); });
        }
        if (name == "t") return variable(Var::t);
        if (name == "y") return variable(Var::y);
        if (name == "a") return variable(Var::a);
        if (name == "norm2z") return variable(Var::norm2z);
        if (name == "normz") return variable(Var::normz);
        for (auto [prefix, v] : {std::pair{std::string_view("wp"), Var::wp}, std::pair{std::string_view("z"), Var::z},
                                 std::pair{std::string_view("w"), Var::w}}) {
            if (name.size() > prefix.size() && name.substr(0, prefix.size()) == prefix) {
                const std::string_view digits = name.substr(prefix.size());
                std::size_t k = 0;
                const auto r = std::from_chars(digits.data(), digits.data() + digits.size(), k);
                if (r.ec == std::errc() && r.ptr == digits.data() + digits.size() && k >= 1 && digits[0] != '0')
                    return variable(v, k - 1);
            }
        }
        pos_ = start;
        if (fn_from_name(name) || name == "pow") fail("syntax error", "function '" + std::string(name) + "' needs arguments");
        fail("unknown identifier", "'" + std::string(name) + "'");
    }

    template <class Make>
    Expr call_args(std::size_t start, std::string_view name, std::size_t arity, Make make) {
        accept('(');
        std::vector<Expr> args;
        if (!accept(')')) {
            args.push_back(expr());
            while (accept(',')) args.push_back(expr());
            if (!accept(')')) fail("syntax error", "expected ')' or ','");
        }
        if ((arity == 0 && args.empty()) || (arity != 0 && args.size() != arity)) {
            const std::size_t here = pos_;
            pos_ = start;
            (void)here;
            fail("arity mismatch", "'" + std::string(name) + "' takes " + (arity == 0 ? std::string("at least 1") : std::to_string(arity)) +
                                       " argument(s), got " + std::to_string(args.size()));
        }
        return make(std::move(args));
    }

    std::string_view s_;
    std::size_t pos_ = 0;
};

inline std::string format_number(double v) {
    std::array<char, 64> buf{};
    const auto r = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), r.ptr);
}

inline bool is_atom(const Expr& e) { return e->op == Op::num || e->op == Op::var || e->op == Op::call; }

inline std::string fmt(const Expr& e);

inline std::string atom_text(const Expr& e) { return is_atom(e) ? fmt(e) : "(" + fmt(e) + ")"; }

inline int level(const Expr& e) {
    switch (e->op) {
        case Op::add:
        case Op::sub: return 1;
        case Op::mul:
        case Op::div: return 2;
        default: return 3;
    }
}

inline std::string fmt(const Expr& e) {
    switch (e->op) {
        case Op::num: return format_number(e->value);
        case Op::var:
            switch (e->var) {
                case Var::t: return "t";
                case Var::y: return "y";
                case Var::a: return "a";
                case Var::norm2z: return "norm2z";
                case Var::normz: return "normz";
                case Var::z: return "z" + std::to_string(e->index + 1);
                case Var::w: return "w" + std::to_string(e->index + 1);
                case Var::wp: return "wp" + std::to_string(e->index + 1);
            }
            return "?";
        case Op::neg: return "-" + atom_text(e->args[0]);
        case Op::pow: {
            const Expr& b = e->args[0];
            const std::string base = b->op == Op::neg ? "-" + atom_text(b->args[0]) : atom_text(b);
            return base + "^" + atom_text(e->args[1]);
        }
        case Op::call: {
            std::string s = std::string(fn_name(e->fn)) + "(";
            for (std::size_t i = 0; i < e->args.size(); ++i) s += (i ? ", " : "") + fmt(e->args[i]);
            return s + ")";
        }
        case Op::add:
        case Op::sub:
        case Op::mul:
        case Op::div: {
            const int lv = level(e);
            const Expr& l = e->args[0];
            const Expr& r = e->args[1];
            const std::string ls = level(l) < lv ? "(" + fmt(l) + ")" : fmt(l);
            const std::string rs = level(r) <= lv ? "(" + fmt(r) + ")" : fmt(r);
            const char* op = e->op == Op::add ? " + " : e->op == Op::sub ? " - " : e->op == Op::mul ? "*" : "/";
            return ls + op + rs;
        }
    }
    return "?";
}

}  // namespace detail

inline Expr parse(std::string_view src) { return detail::Parser(src).parse(); }

/// Canonical text with the fewest parentheses that re-parse to the same tree.
inline std::string format(const Expr& e) { return detail::fmt(e); }

inline bool equal(const Expr& a, const Expr& b) {
    if (a->op != b->op || a->args.size() != b->args.size()) return false;
    switch (a->op) {
        case Op::num:
            if (std::bit_cast<std::uint64_t>(a->value) != std::bit_cast<std::uint64_t>(b->value)) return false;
            break;
        case Op::var:
            if (a->var != b->var || a->index != b->index) return false;
            break;
        case Op::call:
            if (a->fn != b->fn) return false;
            break;
        default: break;
    }
    for (std::size_t i = 0; i < a->args.size(); ++i)
        if (!equal(a->args[i], b->args[i])) return false;
    return true;
}

/// Variables used anywhere in the tree.
struct Usage {
    bool t = false, y = false, a = false, z = false, w = false, wp = false;
    std::size_t z_dim = 0, w_dim = 0, wp_dim = 0, dotz_arity = 0;
    bool random() const { return w || wp; }
    bool constant() const { return !(t || y || a || z || w || wp); }
};

inline void collect(const Expr& e, Usage& u) {
    if (e->op == Op::var) {
        switch (e->var) {
            case Var::t: u.t = true; break;
            case Var::y: u.y = true; break;
            case Var::a: u.a = true; break;
            case Var::z: u.z = true; u.z_dim = std::max(u.z_dim, e->index + 1); break;
            case Var::w: u.w = true; u.w_dim = std::max(u.w_dim, e->index + 1); break;
            case Var::wp: u.wp = true; u.wp_dim = std::max(u.wp_dim, e->index + 1); break;
            case Var::norm2z:
            case Var::normz: u.z = true; break;
        }
    }
    if (e->op == Op::call && e->fn == Fn::dotz) {
        u.z = true;
        u.dotz_arity = std::max(u.dotz_arity, e->args.size());
    }
    for (const auto& c : e->args) collect(c, u);
}

inline Usage usage(const Expr& e) {
    Usage u;
    collect(e, u);
    return u;
}

/// Evaluation point. `lambda` may be null, meaning the identity.
struct Env {
    double t = 0.0;
    double y = 0.0;
    double a = 0.0;
    std::span<const double> z{};
    std::span<const double> w{};
    std::span<const double> wp{};
    const Eigen::MatrixXd* lambda = nullptr;
};

namespace detail {

inline double lambda_component(const Env& env, std::size_t r) {
    if (!env.lambda) return r < env.z.size() ? env.z[r] : 0.0;
    double acc = 0.0;
    for (Eigen::Index c = 0; c < env.lambda->cols(); ++c) acc += (*env.lambda)(static_cast<Eigen::Index>(r), c) * env.z[static_cast<std::size_t>(c)];
    return acc;
}

inline double lambda_norm2(const Env& env) {
    const std::size_t d = env.lambda ? static_cast<std::size_t>(env.lambda->rows()) : env.z.size();
    double s = 0.0;
    for (std::size_t r = 0; r < d; ++r) {
        const double v = lambda_component(env, r);
        s += v * v;
    }
    return s;
}

}  // namespace detail

/// Postfix program compiled from a tree; evaluation is reentrant.
class Program {
public:
    Program() = default;

    explicit Program(const Expr& e) : source_(e) {
        emit(e);
        std::size_t depth = 0;
        for (const auto& ins : code_) {
            depth = depth + 1 - ins.pops;
            max_stack_ = std::max(max_stack_, depth);
        }
    }

    const Expr& source() const { return source_; }
    bool empty() const { return code_.empty(); }

    double operator()(const Env& env) const {
        if (max_stack_ <= 64) {
            std::array<double, 64> st;
            return run(env, st.data());
        }
        std::vector<double> st(max_stack_);
        return run(env, st.data());
    }

private:
    enum class Code { num, t, y, a, z, w, wp, norm2z, normz, neg, add, sub, mul, div, pow, abs, exp, log, sqrt, pos, negpart, sgn, tanh, min, max, dotz };

    struct Instr {
        Code code;
        double value = 0.0;
        std::size_t index = 0;
        std::size_t pops = 0;
        const Node* node = nullptr;
    };

    void emit(const Expr& e) {
        for (const auto& c : e->args) emit(c);
        Instr ins{Code::num, 0.0, 0, e->args.size(), e.get()};
        switch (e->op) {
            case Op::num: ins.value = e->value; break;
            case Op::var:
                ins.index = e->index;
                switch (e->var) {
                    case Var::t: ins.code = Code::t; break;
                    case Var::y: ins.code = Code::y; break;
                    case Var::a: ins.code = Code::a; break;
                    case Var::z: ins.code = Code::z; break;
                    case Var::w: ins.code = Code::w; break;
                    case Var::wp: ins.code = Code::wp; break;
                    case Var::norm2z: ins.code = Code::norm2z; break;
                    case Var::normz: ins.code = Code::normz; break;
                }
                break;
            case Op::neg: ins.code = Code::neg; break;
            case Op::add: ins.code = Code::add; break;
            case Op::sub: ins.code = Code::sub; break;
            case Op::mul: ins.code = Code::mul; break;
            case Op::div: ins.code = Code::div; break;
            case Op::pow: ins.code = Code::pow; break;
            case Op::call:
                switch (e->fn) {
                    case Fn::abs: ins.code = Code::abs; break;
                    case Fn::exp: ins.code = Code::exp; break;
                    case Fn::log: ins.code = Code::log; break;
                    case Fn::sqrt: ins.code = Code::sqrt; break;
                    case Fn::pos: ins.code = Code::pos; break;
                    case Fn::neg: ins.code = Code::negpart; break;
                    case Fn::sgn: ins.code = Code::sgn; break;
                    case Fn::tanh: ins.code = Code::tanh; break;
                    case Fn::min: ins.code = Code::min; break;
                    case Fn::max: ins.code = Code::max; break;
                    case Fn::dotz: ins.code = Code::dotz; break;
                }
                break;
        }
        code_.push_back(ins);
    }

    [[noreturn]] static void domain(const Instr& ins, const std::string& what) {
        const Expr view(std::shared_ptr<const Node>{}, ins.node);
        throw EvalError(what, format(view));
    }

    static double component(std::span<const double> v, std::size_t k, const Instr& ins, const char* name) {
        if (k >= v.size()) domain(ins, std::string(name) + " component out of range");
        return v[k];
    }

    double run(const Env& env, double* st) const {
        std::size_t sp = 0;
        for (const Instr& ins : code_) {
            double r = 0.0;
            switch (ins.code) {
                case Code::num: r = ins.value; break;
                case Code::t: r = env.t; break;
                case Code::y: r = env.y; break;
                case Code::a: r = env.a; break;
                case Code::z: r = component(env.z, ins.index, ins, "z"); break;
                case Code::w: r = component(env.w, ins.index, ins, "w"); break;
                case Code::wp: r = component(env.wp, ins.index, ins, "wp"); break;
                case Code::norm2z: r = detail::lambda_norm2(env); break;
                case Code::normz: r = std::sqrt(detail::lambda_norm2(env)); break;
                case Code::neg: r = -st[sp - 1]; break;
                case Code::add: r = st[sp - 2] + st[sp - 1]; break;
                case Code::sub: r = st[sp - 2] - st[sp - 1]; break;
                case Code::mul: r = st[sp - 2] * st[sp - 1]; break;
                case Code::div:
                    if (st[sp - 1] == 0.0) domain(ins, "division by zero");
                    r = st[sp - 2] / st[sp - 1];
                    break;
                case Code::pow: r = std::pow(st[sp - 2], st[sp - 1]); break;
                case Code::abs: r = std::abs(st[sp - 1]); break;
                case Code::exp: r = std::exp(st[sp - 1]); break;
                case Code::log:
                    if (!(st[sp - 1] > 0.0)) domain(ins, "log of a nonpositive value");
                    r = std::log(st[sp - 1]);
                    break;
                case Code::sqrt:
                    if (st[sp - 1] < 0.0) domain(ins, "sqrt of a negative value");
                    r = std::sqrt(st[sp - 1]);
                    break;
                case Code::pos: r = st[sp - 1] > 0.0 ? st[sp - 1] : 0.0; break;
                case Code::negpart: r = st[sp - 1] < 0.0 ? -st[sp - 1] : 0.0; break;
                case Code::sgn: r = st[sp - 1] > 0.0 ? 1.0 : (st[sp - 1] < 0.0 ? -1.0 : 0.0); break;
                case Code::tanh: r = std::tanh(st[sp - 1]); break;
                case Code::min: r = std::min(st[sp - 2], st[sp - 1]); break;
                case Code::max: r = std::max(st[sp - 2], st[sp - 1]); break;
                case Code::dotz: {
                    const std::size_t d = env.lambda ? static_cast<std::size_t>(env.lambda->rows()) : env.z.size();
                    if (ins.pops != d) domain(ins, "arity mismatch: dotz needs " + std::to_string(d) + " coefficients");
                    for (std::size_t k = 0; k < d; ++k) r += st[sp - d + k] * detail::lambda_component(env, k);
                    break;
                }
            }
            if (!std::isfinite(r)) domain(ins, "non-finite result");
            sp -= ins.pops;
            st[sp++] = r;
        }
        return st[0];
    }

    Expr source_;
    std::vector<Instr> code_;
    std::size_t max_stack_ = 0;
};

inline double evaluate(const Expr& e, const Env& env) { return Program(e)(env); }

/// f = c(t, a) + b*y + <zc, z> + <lc, lambda z> + p*|lambda z| + q*|lambda z|^2
/// with numeric coefficients. Used to recognize closed-form families.
struct AffineForm {
    Expr constant;
    double y = 0.0;
    std::vector<double> z;
    std::vector<double> lz;
    double normz = 0.0;
    double norm2z = 0.0;

    bool radial_only() const {
        for (double v : z) if (v != 0.0) return false;
        for (double v : lz) if (v != 0.0) return false;
        return y == 0.0;
    }
    bool linear_only() const { return normz == 0.0 && norm2z == 0.0; }
};

namespace detail {

inline void add_into(std::vector<double>& dst, const std::vector<double>& src, double s) {
    if (dst.size() < src.size()) dst.resize(src.size(), 0.0);
    for (std::size_t i = 0; i < src.size(); ++i) dst[i] += s * src[i];
}

inline std::optional<AffineForm> affine(const Expr& e) {
    const Usage u = usage(e);
    if (u.random()) return std::nullopt;
    if (!u.y && !u.z) {
        AffineForm f;
        f.constant = e;
        return f;
    }
    auto scaled = [](AffineForm f, double s) {
        f.y *= s;
        for (double& v : f.z) v *= s;
        for (double& v : f.lz) v *= s;
        f.normz *= s;
        f.norm2z *= s;
        if (f.constant) f.constant = s == -1.0 ? unary_minus(f.constant) : binary(Op::mul, number(s), f.constant);
        return f;
    };
    switch (e->op) {
        case Op::var: {
            AffineForm f;
            if (e->var == Var::y) f.y = 1.0;
            else if (e->var == Var::normz) f.normz = 1.0;
            else if (e->var == Var::norm2z) f.norm2z = 1.0;
            else if (e->var == Var::z) {
                f.z.assign(e->index + 1, 0.0);
                f.z[e->index] = 1.0;
            } else return std::nullopt;
            return f;
        }
        case Op::call: {
            if (e->fn != Fn::dotz) return std::nullopt;
            AffineForm f;
            for (const auto& c : e->args) {
                if (!usage(c).constant()) return std::nullopt;
                f.lz.push_back(evaluate(c, Env{}));
            }
            return f;
        }
        case Op::neg: {
            auto f = affine(e->args[0]);
            if (!f) return std::nullopt;
            return scaled(*f, -1.0);
        }
        case Op::add:
        case Op::sub: {
            auto l = affine(e->args[0]);
            auto r = affine(e->args[1]);
            if (!l || !r) return std::nullopt;
            const double s = e->op == Op::add ? 1.0 : -1.0;
            AffineForm f = *l;
            f.y += s * r->y;
            add_into(f.z, r->z, s);
            add_into(f.lz, r->lz, s);
            f.normz += s * r->normz;
            f.norm2z += s * r->norm2z;
            if (r->constant) {
                const Expr rc = r->constant;
                f.constant = f.constant ? binary(e->op, f.constant, rc) : (s > 0 ? rc : unary_minus(rc));
            }
            return f;
        }
        case Op::mul: {
            const bool lc = usage(e->args[0]).constant(), rc = usage(e->args[1]).constant();
            if (lc) {
                auto f = affine(e->args[1]);
                if (!f) return std::nullopt;
                return scaled(*f, evaluate(e->args[0], Env{}));
            }
            if (rc) {
                auto f = affine(e->args[0]);
                if (!f) return std::nullopt;
                return scaled(*f, evaluate(e->args[1], Env{}));
            }
            return std::nullopt;
        }
        case Op::div: {
            if (!usage(e->args[1]).constant()) return std::nullopt;
            auto f = affine(e->args[0]);
            if (!f) return std::nullopt;
            return scaled(*f, 1.0 / evaluate(e->args[1], Env{}));
        }
        default: return std::nullopt;
    }
}

}  // namespace detail

/// Decomposes e into the affine-radial family, or nullopt if it is not of that form.
inline std::optional<AffineForm> affine_form(const Expr& e) {
    try {
        return detail::affine(e);
    } catch (const EvalError&) {
        return std::nullopt;
    }
}

}  // namespace qbsde::dsl
