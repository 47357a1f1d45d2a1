"""Convergence-figure rendering for fluxqmc experiment CSV output."""

from .render import FigureSpec, build_figure, fit_slope, load_series, render

__version__ = "0.1.0"
