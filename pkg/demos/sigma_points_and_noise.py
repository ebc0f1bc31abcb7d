"""Two small experiments behind the approach.

First: a handful of sigma points reproduce the mean and covariance of a
Gaussian exactly, and the weighted sum over them propagates moments through
a nonlinear map about as well as thousands of random samples.

Second: uncertain *parameters* need nothing beyond an ordinary ODE solver
run once per parameter value. A genuinely stochastic (Ito) model needs a
stochastic integrator such as Euler-Maruyama, and only when the noise
vanishes does that collapse to forward Euler.
"""
import numpy as np

from tychopt.dynamics import SDEModel, euler_maruyama, explicit_euler
from tychopt.uncertainty import (
    GaussianSpec,
    cubature_covariance,
    cubature_expectation,
    sample,
    sigma_points,
)

spec = GaussianSpec([1.0, -1.0], np.diag([0.2 ** 2, 0.1 ** 2]))
for scheme in ("symmetric", "simplex"):
    sig = sigma_points(spec, scheme)
    print(f"{scheme:>9}: {sig.size} points, mean error "
          f"{np.abs(sig.mean() - spec.mean).max():.1e}, covariance error "
          f"{np.abs(sig.covariance() - spec.covariance).max():.1e}")


def polar(p):
    # a mildly nonlinear map of the parameter
    return np.array([np.hypot(p[0], p[1]), np.arctan2(p[1], p[0])])


sig = sigma_points(spec)
ut_mean = cubature_expectation(sig, polar)
ut_cov = cubature_covariance(sig, polar)
P = sample(spec, 20_000, seed=3)
Y = polar(P)
print("map (|p|, angle p):")
print(f"  sigma points  mean {np.round(ut_mean, 4)}  var {np.round(np.diag(ut_cov), 5)}")
print(f"  20k samples   mean {np.round(Y.mean(axis=1), 4)}  var {np.round(Y.var(axis=1), 5)}")

# --- Ornstein-Uhlenbeck: dx = -x dt + sigma dW ------------------------------
for s in (1.0, 0.0):
    model = SDEModel(drift=lambda x, u, t: -x,
                     diffusion=lambda x, u, t, s=s: np.full((1, 1) + np.shape(x)[1:], s),
                     n_x=1, n_w=1)
    path = euler_maruyama(model, [1.0], None, 10.0, 0.01, seed=11, n_paths=10_000)
    ee = explicit_euler(lambda x, u, t: -x, [1.0], None, 10.0, 0.01)
    print(f"sigma={s}: final variance {path.x[-1, 0].var():.4f} (stationary {s ** 2 / 2}); "
          f"identical to forward Euler: {np.array_equal(path.x[:, 0, 0], ee.x[:, 0])}")
