#pragma once

#include <cmath>
#include <random>
#include <vector>

#include "qbsde/gendsl.hpp"

namespace fuzz {

using namespace qbsde::dsl;

inline Expr random_leaf(std::mt19937_64& rng) {
    static const double numbers[] = {0.0, 1.0, 2.0, 0.5, 3.25, 1e-3, 7.0, 0.1, 12.5, 2.5e-7};
    std::uniform_int_distribution<int> pick(0, 12);
    const int k = pick(rng);
    switch (k) {
        case 0: return variable(Var::t);
        case 1: return variable(Var::y);
        case 2: return variable(Var::a);
        case 3: return variable(Var::z, 0);
        case 4: return variable(Var::z, 1);
        case 5: return variable(Var::w, 0);
        case 6: return variable(Var::wp, 0);
        case 7: return variable(Var::norm2z);
        case 8: return variable(Var::normz);
        default: {
            std::uniform_int_distribution<int> n(0, 9);
            return number(numbers[n(rng)]);
        }
    }
}

/// Random tree of depth at most `depth` over the whole grammar.
inline Expr random_tree(std::mt19937_64& rng, int depth) {
    std::uniform_int_distribution<int> pick(0, 15);
    if (depth <= 1) return random_leaf(rng);
    const int k = pick(rng);
    auto sub = [&] { return random_tree(rng, depth - 1); };
    switch (k) {
        case 0:
        case 1: return random_leaf(rng);
        case 2: return unary_minus(sub());
        case 3: return binary(Op::add, sub(), sub());
        case 4: return binary(Op::sub, sub(), sub());
        case 5: return binary(Op::mul, sub(), sub());
        case 6: return binary(Op::div, sub(), sub());
        case 7: return binary(Op::pow, sub(), sub());
        case 8: {
            static const Fn unary[] = {Fn::abs, Fn::exp, Fn::log, Fn::sqrt, Fn::pos, Fn::neg, Fn::sgn, Fn::tanh};
            std::uniform_int_distribution<int> f(0, 7);
            return call(unary[f(rng)], {sub()});
        }
        case 9: return call(Fn::min, {sub(), sub()});
        case 10: return call(Fn::max, {sub(), sub()});
        case 11: return call(Fn::dotz, {sub(), sub()});
        default: return k % 2 ? binary(Op::add, sub(), sub()) : binary(Op::mul, sub(), sub());
    }
}

inline double checked(double v, const Expr& e) {
    if (!std::isfinite(v)) throw EvalError("non-finite result", format(e));
    return v;
}

/// Straightforward recursive interpreter used as the reference semantics.
inline double tree_walk(const Expr& e, const Env& env) {
    auto arg = [&](std::size_t k) { return tree_walk(e->args[k], env); };
    auto zc = [&](std::size_t k) {
        if (k >= env.z.size()) throw EvalError("z component out of range", format(e));
        return env.z[k];
    };
    switch (e->op) {
        case Op::num: return checked(e->value, e);
        case Op::var:
            switch (e->var) {
                case Var::t: return env.t;
                case Var::y: return env.y;
                case Var::a: return env.a;
                case Var::z: return zc(e->index);
                case Var::w:
                    if (e->index >= env.w.size()) throw EvalError("w component out of range", format(e));
                    return env.w[e->index];
                case Var::wp:
                    if (e->index >= env.wp.size()) throw EvalError("wp component out of range", format(e));
                    return env.wp[e->index];
                case Var::norm2z:
                case Var::normz: {
                    double s = 0.0;
                    for (double v : env.z) s += v * v;
                    return checked(e->var == Var::normz ? std::sqrt(s) : s, e);
                }
            }
            break;
        case Op::neg: return checked(-arg(0), e);
        case Op::add: { const double l = arg(0), r = arg(1); return checked(l + r, e); }
        case Op::sub: { const double l = arg(0), r = arg(1); return checked(l - r, e); }
        case Op::mul: { const double l = arg(0), r = arg(1); return checked(l * r, e); }
        case Op::div: {
            const double l = arg(0), r = arg(1);
            if (r == 0.0) throw EvalError("division by zero", format(e));
            return checked(l / r, e);
        }
        case Op::pow: { const double l = arg(0), r = arg(1); return checked(std::pow(l, r), e); }
        case Op::call: {
            if (e->fn == Fn::dotz) {
                std::vector<double> c;
                for (std::size_t k = 0; k < e->args.size(); ++k) c.push_back(arg(k));
                if (c.size() != env.z.size()) throw EvalError("arity mismatch", format(e));
                double r = 0.0;
                for (std::size_t k = 0; k < c.size(); ++k) r += c[k] * env.z[k];
                return checked(r, e);
            }
            if (e->fn == Fn::min || e->fn == Fn::max) {
                const double l = arg(0), r = arg(1);
                return checked(e->fn == Fn::min ? std::min(l, r) : std::max(l, r), e);
            }
            const double x = arg(0);
            switch (e->fn) {
                case Fn::abs: return checked(std::abs(x), e);
                case Fn::exp: return checked(std::exp(x), e);
                case Fn::log:
                    if (!(x > 0.0)) throw EvalError("log of a nonpositive value", format(e));
                    return checked(std::log(x), e);
                case Fn::sqrt:
                    if (x < 0.0) throw EvalError("sqrt of a negative value", format(e));
                    return checked(std::sqrt(x), e);
                case Fn::pos: return x > 0.0 ? x : 0.0;
                case Fn::neg: return x < 0.0 ? -x : 0.0;
                case Fn::sgn: return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
                case Fn::tanh: return checked(std::tanh(x), e);
                default: break;
            }
        }
    }
    throw EvalError("unreachable", format(e));
}

}  // namespace fuzz
