"""Numerical laboratory for Codazzi tensors with two eigenvalues and the
warped-product structure they induce."""

__version__ = "0.1.0"

from .errors import CodazziLabError  # noqa: E402
from .exprlang import ScalarExpr, eval_jet2, evaluate, parse  # noqa: E402
from .geometry import Chart, GridSpec, MetricField, SymTensorField  # noqa: E402

__all__ = ["__version__", "CodazziLabError", "ScalarExpr", "parse", "eval_jet2", "evaluate",
           "Chart", "GridSpec", "MetricField", "SymTensorField"]
