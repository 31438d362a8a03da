"""A single c-concave layer with a quadratic potential on the plane.

For psi(y) = (y - mu)^T M (y - mu) / 2 the inner minimizer, the flow Jacobian
and psi^c all have closed forms, which makes this the smallest end-to-end check
of the implicit layer.
"""

import numpy as np

from ircpm.ccave import FlowLayer, forward, implicit_jacobian, inner_minimize
from ircpm.diffnet import QuadraticPotential
from ircpm.manifold import Euclidean

m = Euclidean(2)
pot = QuadraticPotential(m)
layer = FlowLayer(m, pot)

M = np.array([[0.5, 0.2], [0.2, 0.3]])
mu = np.array([1.0, -1.0])
theta = pot.pack(mu, M)
x = np.array([2.0, 0.5])

rep = inner_minimize(layer, theta, x)
print("y* (solver)      ", rep.minimizer, "in", rep.iterations, "iterations")
print("y* (closed form) ", np.linalg.solve(np.eye(2) + M, x + M @ mu))

y, logdet, _ = forward(layer, theta, x)
print("log|det J| (flow)  ", logdet)
print("log|det J| (exact) ", -np.log(np.linalg.det(np.eye(2) + M)))
print("J (implicit)\n", implicit_jacobian(layer, theta, x))
