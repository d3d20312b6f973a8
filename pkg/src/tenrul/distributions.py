"""Location-scale error densities and the log/identity response transform.

The regression models assume ``y = mu + sigma * eps`` where ``eps`` follows a
standard log-concave density.  Lifetime families (weibull, lognormal,
loglogistic) are handled by regressing ``ln(ttf)`` with the matching working
density (sev, normal, logistic respectively), so only three densities exist.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.special import expit

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

WORKING_KINDS = ("normal", "sev", "logistic")


@dataclass(frozen=True)
class Family:
    """An error-distribution choice for the location-scale regression.

    Attributes
    ----------
    name : str
        Config-facing name (``"weibull"``, ``"sev"``, ...).
    working : str
        Density used after the response transform: one of ``WORKING_KINDS``.
    log_transform : bool
        Whether responses are log-transformed before fitting.
    """

    name: str
    working: str
    log_transform: bool


FAMILIES = {
    "normal": Family("normal", "normal", False),
    "sev": Family("sev", "sev", False),
    "logistic": Family("logistic", "logistic", False),
    "lognormal": Family("lognormal", "normal", True),
    "loglogistic": Family("loglogistic", "logistic", True),
    "weibull": Family("weibull", "sev", True),
}


@functools.lru_cache(maxsize=None)
def _check_unit_mass(kind):
    total, _ = quad(lambda e: math.exp(float(log_density(kind, e))), -np.inf, np.inf)
    if abs(total - 1.0) > 1e-6:
        raise RuntimeError(f"density {kind!r} integrates to {total}, not 1")
    return total


def get_family(name):
    """Look up a :class:`Family` by config name, verifying its density mass."""
    if isinstance(name, Family):
        _check_unit_mass(name.working)
        return name
    try:
        fam = FAMILIES[str(name).lower()]
    except KeyError:
        raise ValueError(
            f"unknown distribution {name!r}; expected one of {sorted(FAMILIES)}"
        ) from None
    _check_unit_mass(fam.working)
    return fam


def log_density(kind, eps):
    """``ln f(eps)`` of a working density, elementwise.

    Parameters
    ----------
    kind : str
        One of ``"normal"``, ``"sev"``, ``"logistic"``.
    eps : array_like
        Standardized residuals.
    """
    eps = np.asarray(eps, dtype=float)
    if kind == "normal":
        return -_LOG_SQRT_2PI - 0.5 * eps**2
    if kind == "sev":
        with np.errstate(over="ignore"):  # exp -> inf gives the correct -inf tail
            return eps - np.exp(eps)
    if kind == "logistic":
        return eps - 2.0 * np.logaddexp(0.0, eps)
    raise ValueError(f"unknown working density {kind!r}")


def dlog_density(kind, eps):
    """First derivative of ``ln f`` with respect to ``eps``, elementwise."""
    eps = np.asarray(eps, dtype=float)
    if kind == "normal":
        return -eps
    if kind == "sev":
        with np.errstate(over="ignore"):
            return 1.0 - np.exp(eps)
    if kind == "logistic":
        return 1.0 - 2.0 * expit(eps)
    raise ValueError(f"unknown working density {kind!r}")


def d2log_density(kind, eps):
    """Second derivative of ``ln f``; non-positive everywhere (log-concavity)."""
    eps = np.asarray(eps, dtype=float)
    if kind == "normal":
        return np.full_like(eps, -1.0)
    if kind == "sev":
        with np.errstate(over="ignore"):
            return -np.exp(eps)
    if kind == "logistic":
        s = expit(eps)
        return -2.0 * s * (1.0 - s)
    raise ValueError(f"unknown working density {kind!r}")


def apply_response_transform(family, ttf):
    """Map raw time-to-failure values onto the fitting scale.

    Identity families return the values unchanged; log families return
    ``ln(ttf)`` and reject non-positive inputs.
    """
    fam = get_family(family)
    ttf = np.asarray(ttf, dtype=float)
    if not fam.log_transform:
        return ttf.copy()
    if np.any(ttf <= 0.0):
        raise ValueError(
            f"family {fam.name!r} needs positive lifetimes; "
            f"min value is {ttf.min()!r}"
        )
    return np.log(ttf)


def invert_response_transform(family, y):
    """Map a fitted location back to the time-to-failure scale."""
    fam = get_family(family)
    y = np.asarray(y, dtype=float)
    return np.exp(y) if fam.log_transform else y.copy()


def response_log_jacobian(family, ttf):
    """Change-of-variables term putting a log-scale fit on the lifetime scale.

    A family fitted on ``ln(ttf)`` has observed-data density
    ``f(ln t) / t``, so its log-likelihood carries an extra ``-sum(ln t_i)``
    relative to the fitting-scale value.  Identity families return 0.  Adding
    this term makes log-likelihoods (and hence BIC) comparable across
    families that model different scales of the same lifetimes.
    """
    fam = get_family(family)
    if not fam.log_transform:
        return 0.0
    ttf = np.asarray(ttf, dtype=float)
    if np.any(ttf <= 0.0):
        raise ValueError(
            f"family {fam.name!r} needs positive lifetimes; "
            f"min value is {ttf.min()!r}"
        )
    return -float(np.log(ttf).sum())
