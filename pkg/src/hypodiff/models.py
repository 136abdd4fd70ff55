"""Built-in example systems and the model registry."""

import numpy as np

from .model import DegenerateDiffusion, Dimensions, ParameterBox, ThetaPoint


def _boxes(bounds):
    return tuple(ParameterBox(lo, hi) for lo, hi in bounds)


class LinearOscillator(DegenerateDiffusion):
    """Damped hypo-elliptic oscillator.

    dX = (-theta2[0] X - theta2[1] Y) dt + theta1 dw,   dY = theta3 X dt
    """

    name = "oscillator"
    default_bounds = (([0.2], [3.0]), ([0.1, 0.1], [5.0, 5.0]), ([0.2], [3.0]))

    def __init__(self, bounds=None, default_theta=None):
        dims = Dimensions(d_x=1, d_y=1, r=1, p1=1, p2=2, p3=1)
        if default_theta is None:
            default_theta = ThetaPoint([1.0], [1.5, 1.0], [1.0])
        super().__init__(dims, _boxes(bounds or self.default_bounds), default_theta)

    def A(self, z, theta2):
        return -(theta2[0] * z[:, :1] + theta2[1] * z[:, 1:2])

    def A_theta(self, z, theta2):
        return -z[:, None, :2].copy()

    def B(self, z, theta1):
        return np.full((z.shape[0], 1, 1), float(theta1[0]))

    def B_theta(self, z, theta1):
        return np.ones((z.shape[0], 1, 1, 1))

    def H(self, z, theta3):
        return theta3[0] * z[:, :1]

    def H_theta(self, z, theta3):
        return z[:, :1, None].copy()

    def H_x(self, z, theta3):
        return np.full((z.shape[0], 1, 1), float(theta3[0]))

    def H_xx(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1, 1))

    def H_y(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1))

    def H_x_theta(self, z, theta3):
        return np.ones((z.shape[0], 1, 1, 1))

    def H_xx_theta(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1, 1, 1))

    def H_y_theta(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1, 1))

    def stationary_covariance(self, theta):
        """Solution of the Lyapunov equation M P + P M^T + Q = 0."""
        a, b = theta.theta2
        c = theta.theta3[0]
        s2 = theta.theta1[0] ** 2
        vx = s2 / (2.0 * a)
        return np.array([[vx, 0.0], [0.0, c * vx / b]])


class FitzHughNagumo(DegenerateDiffusion):
    """Stochastic FitzHugh-Nagumo type system, noise on the fast variable.

    dX = theta2 (X - X^3 - Y) dt + theta1 dw
    dY = (theta3[0] X - theta3[1] Y + theta3[2]) dt
    """

    name = "fitzhugh-nagumo"
    default_bounds = (([0.1], [2.0]), ([0.5], [10.0]), ([0.2, 0.1, -1.0], [3.0, 3.0, 1.0]))

    def __init__(self, bounds=None, default_theta=None):
        dims = Dimensions(d_x=1, d_y=1, r=1, p1=1, p2=1, p3=3)
        if default_theta is None:
            default_theta = ThetaPoint([0.5], [3.0], [1.0, 0.5, 0.3])
        super().__init__(dims, _boxes(bounds or self.default_bounds), default_theta)

    def A(self, z, theta2):
        x, y = z[:, :1], z[:, 1:2]
        return theta2[0] * (x - x ** 3 - y)

    def A_theta(self, z, theta2):
        x, y = z[:, :1], z[:, 1:2]
        return (x - x ** 3 - y)[:, :, None]

    def B(self, z, theta1):
        return np.full((z.shape[0], 1, 1), float(theta1[0]))

    def B_theta(self, z, theta1):
        return np.ones((z.shape[0], 1, 1, 1))

    def H(self, z, theta3):
        return theta3[0] * z[:, :1] - theta3[1] * z[:, 1:2] + theta3[2]

    def H_theta(self, z, theta3):
        m = z.shape[0]
        return np.stack([z[:, :1], -z[:, 1:2], np.ones((m, 1))], axis=-1)

    def H_x(self, z, theta3):
        return np.full((z.shape[0], 1, 1), float(theta3[0]))

    def H_xx(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1, 1))

    def H_y(self, z, theta3):
        return np.full((z.shape[0], 1, 1), -float(theta3[1]))

    def H_x_theta(self, z, theta3):
        out = np.zeros((z.shape[0], 1, 1, 3))
        out[..., 0] = 1.0
        return out

    def H_xx_theta(self, z, theta3):
        return np.zeros((z.shape[0], 1, 1, 1, 3))

    def H_y_theta(self, z, theta3):
        out = np.zeros((z.shape[0], 1, 1, 3))
        out[..., 1] = -1.0
        return out


_REGISTRY = {
    LinearOscillator.name: LinearOscillator,
    FitzHughNagumo.name: FitzHughNagumo,
}


def register_model(name, factory):
    """Register a model factory (a callable returning a DegenerateDiffusion)."""
    if name in _REGISTRY:
        raise KeyError(f"model {name!r} is already registered")
    _REGISTRY[name] = factory


def get_model(name, **kwargs):
    try:
        factory = _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; available: {sorted(_REGISTRY)}") from None
    return factory(**kwargs)


def available_models():
    return sorted(_REGISTRY)
