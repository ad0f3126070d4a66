"""Pontryagin-guided direct policy optimization under general discount kernels.

Library layout:

* ``kernels``    - two-time discount kernels and structural diagnostics
* ``problems``   - benchmark controlled diffusions with analytic partials
* ``policy``     - MLP policies with manual forward/reverse passes
* ``rollout``    - Euler-Maruyama simulation with tape recording
* ``adjoint``    - pathwise costates, Monte Carlo averaging, bridge checks
* ``stage1``     - rollout warm-start (direct policy optimization)
* ``stage2``     - costate estimation + Hamiltonian maximization projection
* ``reference``  - analytic/ODE ground-truth policies
* ``bench``      - error grids, residual curves, sweeps, runtime scaling
* ``cli``        - command-line entry point
"""

__version__ = "0.1.0"
