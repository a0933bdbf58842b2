"""Delta and Tweedie catch-rate models with the mean-parameterized generalized gamma.

Submodules: ``distributions`` (densities, CDFs, samplers), ``gmrf`` (Matérn
fields), ``estimation`` (Laplace maximum likelihood, convergence, AIC),
``index`` (area-weighted indices and bias correction), ``diagnostics``
(randomized quantile residuals), ``experiment`` (simulation study),
``survey`` (CSV fitting) and ``cli``.
"""
__version__ = "0.1.0"

from .errors import DomainError, NumericalError, ValidationError  # noqa: F401
