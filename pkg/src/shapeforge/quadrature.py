"""Quadrature rules on the reference triangle and reference edge."""

import numpy as np

# Dunavant degree-4 rule, 6 points, two symmetry orbits. Weights are
# normalized to sum to 1/2 (the reference triangle area), so an element
# integral is sum_q w_q * f(x_q) * det(J_geom).
_A1 = 0.445948490915965
_A2 = 0.091576213509771
_W1 = 0.223381589678011 / 2.0
_W2 = 0.109951743655322 / 2.0

TRI_POINTS = np.array(
    [
        [_A1, _A1],
        [1.0 - 2.0 * _A1, _A1],
        [_A1, 1.0 - 2.0 * _A1],
        [_A2, _A2],
        [1.0 - 2.0 * _A2, _A2],
        [_A2, 1.0 - 2.0 * _A2],
    ]
)
TRI_WEIGHTS = np.array([_W1, _W1, _W1, _W2, _W2, _W2])

# 2-point Gauss on [0, 1], exact through degree 3. Used for all boundary
# line integrals.
_G = 0.5 / np.sqrt(3.0)
EDGE_POINTS = np.array([0.5 - _G, 0.5 + _G])
EDGE_WEIGHTS = np.array([0.5, 0.5])


def edge_rule(order):
    """Gauss-Legendre points/weights on [0, 1] for the given point count.

    The assembly rule is the fixed 2-point one; higher orders are used by
    self-checks that compare quadrature against closed-form integrals.
    """
    x, w = np.polynomial.legendre.leggauss(order)
    return 0.5 * (x + 1.0), 0.5 * w
