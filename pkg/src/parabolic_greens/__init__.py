"""
Learning Green's functions of parabolic PDEs
============================================

Tools to recover the Green's function of ``u_t - div(A grad u) = f`` on the
unit space-time cylinder from forcing/solution pairs. The domain pair
``U x U`` is split hierarchically into well-separated (admissible) box pairs,
each of which is learned with a randomized SVD driven by Gaussian-process
forcings; the remaining near-diagonal pairs are approximated by zero.

Modules
-------
geometry
    Parabolic metric, admissibility and the hierarchical partition.
solver
    Crank-Nicolson forward/adjoint solvers and ground-truth kernels.
sampling
    Squared-exponential covariance, KL sampling and the covariance quality
    factor.
rsvd
    Per-block randomized SVD and its probabilistic error bound.
theory
    Closed-form constants and numerical inequality checks.
learner
    End-to-end learning, evaluation, L1 error and persistence.
cli
    Command-line front end (``pgreen``).
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as KERNEL_BACKEND  # noqa: E402

__all__ = ["__version__", "KERNEL_BACKEND"]
