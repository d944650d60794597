"""Signal temporal logic: syntax, parser and semantics."""
from .ast import (And, Eventually, FalseF, Formula, Globally, Implies, Interval,
                  IntervalError, Next, Not, Or, Predicate, TrueF, Until, conjunction,
                  disjunction, to_text)
from .parser import (MalformedIntervalError, SpecSyntaxError, UnboundPredicateError, bind,
                     parse_spec, tokenize)
from .predicates import PredicateBinding, linear, region, x_greater
from .semantics import (EmptyWindowError, SmoothingConfig, Trajectory, eval_bool,
                        robustness, robustness_signal, soft_robustness, soft_signal,
                        softmax, softmin)

__all__ = [
    "And", "Eventually", "FalseF", "Formula", "Globally", "Implies", "Interval",
    "IntervalError", "Next", "Not", "Or", "Predicate", "TrueF", "Until", "conjunction",
    "disjunction", "to_text", "MalformedIntervalError", "SpecSyntaxError",
    "UnboundPredicateError", "bind", "parse_spec", "tokenize", "PredicateBinding", "linear",
    "region", "x_greater", "EmptyWindowError", "SmoothingConfig", "Trajectory", "eval_bool",
    "robustness", "robustness_signal", "soft_robustness", "soft_signal", "softmax", "softmin",
]
