"""Surface targets: signed distance fields (Euclidean mode) and heightfields (isotropic mode).

All queries are vectorised: points are ``(3,)`` or ``(N, 3)`` arrays and the
result has a matching leading shape.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

EUCLIDEAN = "euclidean"
ISOTROPIC = "isotropic"


class TargetError(ValueError):
    """Invalid target construction or a query in the wrong mode/outside the domain."""


class ProjectionError(RuntimeError):
    """Newton projection met a vanishing SDF gradient."""

    def __init__(self, point):
        self.point = np.asarray(point)
        super().__init__(f"vanishing SDF gradient at point {self.point.tolist()}")


@dataclass
class ProjectionReport:
    iterations_used: np.ndarray
    final_abs_distance: np.ndarray


def _as_points(p, dim=3):
    p = np.asarray(p, dtype=float)
    single = p.ndim == 1
    return np.atleast_2d(p).reshape(-1, dim), single


def _unit(v, axis=-1):
    n = np.linalg.norm(v, axis=axis, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


class SurfaceTarget:
    mode = EUCLIDEAN
    #: optional callable (N,3) -> (N,3) snapping boundary vertices onto a feature curve
    boundary_projector = None

    def sdf(self, p: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grad(self, p: np.ndarray) -> np.ndarray:
        # central differences; analytic subclasses override
        h = 1e-6
        g = np.empty_like(p)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            g[:, k] = (self.sdf(p + dp) - self.sdf(p - dp)) / (2 * h)
        return g

    def sdf_and_grad(self, p: np.ndarray):
        """Distance and gradient together; subclasses override to share work."""
        return self.sdf(p), self.grad(p)


class Sphere(SurfaceTarget):
    def __init__(self, radius=1.0, center=(0.0, 0.0, 0.0)):
        if radius <= 0:
            raise TargetError("sphere radius must be positive")
        self.radius = float(radius)
        self.center = np.asarray(center, dtype=float)

    def sdf(self, p):
        return np.linalg.norm(p - self.center, axis=1) - self.radius

    def grad(self, p):
        return _unit(p - self.center)


def _ellipsoid_closest(y, axes):
    """Closest points on the axis-aligned ellipsoid/ellipse ``sum (x_i/axes_i)^2 = 1``.

    ``y`` holds non-negative coordinates ``(N, k)``. The Lagrange parameter is
    bracketed and found by safeguarded Newton, so the result is exact to rounding.
    """
    e = np.asarray(axes, dtype=float)
    e2 = e * e
    emin2 = e2.min()
    shift = e2 - emin2                       # >= 0, zero on the shortest axes
    ey = e * y
    n = len(y)
    x = np.zeros_like(y)

    # s = t + emin^2; F(s) = sum (e_i y_i / (s + shift_i))^2 decreases on s > 0
    zero_min = np.all((y == 0) | (shift > 0), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio0 = np.where(shift > 0, ey / np.where(shift > 0, shift, 1.0), 0.0)
    f0 = np.sum(ratio0 ** 2, axis=1)
    on_plane = zero_min & (f0 < 1.0)

    hi = np.sqrt(np.sum(ey ** 2, axis=1))
    lo = np.zeros(n)
    todo = ~on_plane & (hi > 0)
    lo_t, hi_t = lo[todo], hi[todo]
    eyt = ey[todo]
    # exact for spheres, close to the root near the surface
    s = np.clip(emin2 * np.linalg.norm(y[todo] / e, axis=1), lo_t, hi_t)
    for _ in range(200):
        r = eyt / (s[:, None] + shift)
        g = np.sum(r * r, axis=1) - 1.0
        dg = -2.0 * np.sum(r * r / (s[:, None] + shift), axis=1)
        lo_t = np.where(g > 0, s, lo_t)
        hi_t = np.where(g > 0, hi_t, s)
        # Newton step, bisection when it leaves the bracket
        with np.errstate(divide="ignore", invalid="ignore"):
            step = s - g / dg
        ok = (step >= lo_t) & (step <= hi_t)
        s_new = np.where(ok, step, 0.5 * (lo_t + hi_t))
        done = np.abs(s_new - s) <= 2e-15 * s_new
        s = s_new
        if np.all(done | (hi_t - lo_t <= 4e-16 * hi_t)):
            break
    x[todo] = e2 * y[todo] / (s[:, None] + shift)

    if np.any(on_plane):
        # x_i = e_i^2 y_i / shift_i on the long axes; the first shortest axis takes the remainder
        xp = np.where(shift > 0, e2 * y[on_plane] / np.where(shift > 0, shift, 1.0), 0.0)
        kmin = int(np.argmin(shift))
        rem = 1.0 - np.sum((xp / e) ** 2, axis=1)
        xp[:, kmin] = e[kmin] * np.sqrt(np.clip(rem, 0.0, None))
        x[on_plane] = xp
    return x


class Ellipsoid(SurfaceTarget):
    """Axis-aligned ellipsoid with exact signed distance."""

    def __init__(self, axes=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
        self.axes = np.asarray(axes, dtype=float)
        if self.axes.shape != (3,) or np.any(self.axes <= 0):
            raise TargetError("ellipsoid needs three positive semi-axes")
        self.center = np.asarray(center, dtype=float)

    def sdf_and_grad(self, p):
        q = p - self.center
        x = _ellipsoid_closest(np.abs(q), self.axes)
        inside = np.sum((q / self.axes) ** 2, axis=1) < 1.0
        d = np.linalg.norm(np.abs(q) - x, axis=1)
        sgn = np.where(q < 0, -1.0, 1.0)
        return np.where(inside, -d, d), _unit(sgn * x / self.axes ** 2)

    def sdf(self, p):
        return self.sdf_and_grad(p)[0]

    def grad(self, p):
        return self.sdf_and_grad(p)[1]


class EllipseCurve(SurfaceTarget):
    """Ellipse ``(x/a)^2 + (y/b)^2 = 1`` in the plane z = 0 (signed distance measured in-plane)."""

    def __init__(self, a=2.0, b=1.0):
        if a <= 0 or b <= 0:
            raise TargetError("ellipse semi-axes must be positive")
        self.axes = np.array([a, b], dtype=float)

    def sdf_and_grad(self, p):
        q = p[:, :2]
        x = _ellipsoid_closest(np.abs(q), self.axes)
        inside = np.sum((q / self.axes) ** 2, axis=1) < 1.0
        d = np.linalg.norm(np.abs(q) - x, axis=1)
        sgn = np.where(q < 0, -1.0, 1.0)
        g = _unit(sgn * x / self.axes ** 2)
        return np.where(inside, -d, d), np.column_stack([g, np.zeros(len(p))])

    def sdf(self, p):
        return self.sdf_and_grad(p)[0]

    def grad(self, p):
        return self.sdf_and_grad(p)[1]

    def curvature(self, theta):
        """Curvature at parameter angle ``theta`` of ``(a cos t, b sin t)``."""
        a, b = self.axes
        return a * b / (a**2 * np.sin(theta) ** 2 + b**2 * np.cos(theta) ** 2) ** 1.5


class Torus(SurfaceTarget):
    """Torus around the z axis with major radius ``R`` and tube radius ``r``."""

    def __init__(self, major=1.0, minor=0.25, center=(0.0, 0.0, 0.0)):
        if not 0 < minor < major:
            raise TargetError("torus needs 0 < minor < major")
        self.major, self.minor = float(major), float(minor)
        self.center = np.asarray(center, dtype=float)

    def sdf(self, p):
        q = p - self.center
        rho = np.hypot(q[:, 0], q[:, 1])
        return np.hypot(rho - self.major, q[:, 2]) - self.minor

    def grad(self, p):
        q = p - self.center
        rho = np.hypot(q[:, 0], q[:, 1])
        safe = np.where(rho > 0, rho, 1.0)
        w = rho - self.major
        g = np.column_stack([q[:, 0] / safe * w, q[:, 1] / safe * w, q[:, 2]])
        return _unit(g)


class Box(SurfaceTarget):
    def __init__(self, half_extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0)):
        self.half = np.asarray(half_extents, dtype=float)
        self.center = np.asarray(center, dtype=float)

    def sdf(self, p):
        q = np.abs(p - self.center) - self.half
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
        return outside + np.minimum(q.max(axis=1), 0.0)

    def grad(self, p):
        d = p - self.center
        s = np.where(d < 0, -1.0, 1.0)
        q = np.abs(d) - self.half
        out = np.maximum(q, 0.0)
        g = np.where((q.max(axis=1) > 0)[:, None], out, 0.0)
        inside = q.max(axis=1) <= 0
        k = np.argmax(q, axis=1)
        g[inside] = 0.0
        g[inside, k[inside]] = 1.0
        return _unit(s * g)


class Plane(SurfaceTarget):
    """Plane ``normal . p = offset``; positive on the side ``normal`` points to."""

    def __init__(self, normal=(0.0, 0.0, 1.0), offset=0.0):
        n = np.asarray(normal, dtype=float)
        self.normal = n / np.linalg.norm(n)
        self.offset = float(offset)

    def sdf(self, p):
        return p @ self.normal - self.offset

    def grad(self, p):
        return np.broadcast_to(self.normal, p.shape).copy()


class SmoothUnion(SurfaceTarget):
    """Polynomial smooth minimum of several SDFs with blend radius ``k``."""

    def __init__(self, parts, k=0.1):
        if not parts:
            raise TargetError("smooth union needs at least one part")
        self.parts = list(parts)
        self.k = float(k)

    def _eval(self, p, want_grad):
        d = self.parts[0].sdf(p)
        g = self.parts[0].grad(p) if want_grad else None
        for part in self.parts[1:]:
            b = part.sdf(p)
            if self.k > 0:
                h = np.clip(0.5 + 0.5 * (b - d) / self.k, 0.0, 1.0)
            else:
                h = (d < b).astype(float)
            if want_grad:
                g = h[:, None] * g + (1 - h)[:, None] * part.grad(p)
            d = b * (1 - h) + d * h - self.k * h * (1 - h)
        return d, g

    def sdf(self, p):
        return self._eval(p, False)[0]

    def grad(self, p):
        return self._eval(p, True)[1]

    def sdf_and_grad(self, p):
        return self._eval(p, True)


class GridSDF(SurfaceTarget):
    """Sampled SDF on a regular grid; trilinear values, clamped outside the grid.

    ``values[i, j, k]`` is the sample at ``origin + (i, j, k) * spacing``.
    """

    def __init__(self, values, origin, spacing):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise TargetError("grid SDF needs at least 2 samples per axis")
        self.origin = np.asarray(origin, dtype=float).reshape(3)
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (3,)).copy()
        if np.any(self.spacing <= 0):
            raise TargetError("grid spacing must be positive")

    @classmethod
    def from_target(cls, target: SurfaceTarget, lo, hi, shape):
        lo, hi = np.asarray(lo, float), np.asarray(hi, float)
        shape = tuple(int(s) for s in np.broadcast_to(shape, (3,)))
        axes = [np.linspace(lo[k], hi[k], shape[k]) for k in range(3)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        vals = target.sdf(grid).reshape(shape)
        return cls(vals, lo, (hi - lo) / (np.array(shape) - 1))

    def sdf(self, p):
        idx = ((p - self.origin) / self.spacing).T
        return ndimage.map_coordinates(self.values, idx, order=1, mode="nearest")

    def grad(self, p):
        # taken at the nearest point whose stencil stays in the grid, so it
        # does not vanish for queries outside
        hi = self.origin + self.spacing * (np.array(self.values.shape) - 2)
        q = np.clip(p, self.origin + self.spacing, np.maximum(hi, self.origin + self.spacing))
        g = np.empty_like(q)
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = self.spacing[k]
            g[:, k] = (self.sdf(q + dp) - self.sdf(q - dp)) / (2 * self.spacing[k])
        return g

    def save(self, path):
        nx, ny, nz = self.values.shape
        header = "GRIDSDF {} {} {} {} {} {} {} {} {}\n".format(
            nx, ny, nz, *map(repr, self.origin.tolist()), *map(repr, self.spacing.tolist()))
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.values.astype("<f4").ravel(order="F").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").split()
            raw = fh.read()
        if not header or header[0] != "GRIDSDF" or len(header) != 10:
            raise TargetError(f"{path}: bad GRIDSDF header")
        nx, ny, nz = (int(v) for v in header[1:4])
        origin = [float(v) for v in header[4:7]]
        spacing = [float(v) for v in header[7:10]]
        vals = np.frombuffer(raw, dtype="<f4")
        if vals.size != nx * ny * nz:
            raise TargetError(f"{path}: expected {nx * ny * nz} floats, found {vals.size}")
        return cls(vals.reshape((nx, ny, nz), order="F").astype(float), origin, spacing)


class Heightfield(SurfaceTarget):
    """Graph ``z = f(x, y)`` over the rectangle ``[x0, x1] x [y0, y1]`` (isotropic mode).

    Subclasses provide ``height(xy)`` and ``partials(xy) -> (fx, fy)``.
    """

    mode = ISOTROPIC

    def __init__(self, domain):
        x0, x1, y0, y1 = (float(v) for v in domain)
        if not (x1 > x0 and y1 > y0):
            raise TargetError("heightfield domain must have positive extent")
        self.domain = (x0, x1, y0, y1)

    @property
    def _lo(self):
        return np.array([self.domain[0], self.domain[2]])

    @property
    def _hi(self):
        return np.array([self.domain[1], self.domain[3]])

    def clamp(self, xy):
        return np.clip(xy, self._lo, self._hi)

    def contains(self, xy, tol=1e-9):
        pad = tol * np.max(self._hi - self._lo)
        return np.all((xy >= self._lo - pad) & (xy <= self._hi + pad), axis=1)

    def height(self, xy):
        raise NotImplementedError

    def partials(self, xy):
        raise NotImplementedError

    def side_mask(self, xy, tol):
        """Bit mask of rectangle sides each point lies on: 1=x0, 2=x1, 4=y0, 8=y1."""
        x0, x1, y0, y1 = self.domain
        m = np.zeros(len(xy), dtype=np.int64)
        m |= np.where(np.abs(xy[:, 0] - x0) <= tol, 1, 0)
        m |= np.where(np.abs(xy[:, 0] - x1) <= tol, 2, 0)
        m |= np.where(np.abs(xy[:, 1] - y0) <= tol, 4, 0)
        m |= np.where(np.abs(xy[:, 1] - y1) <= tol, 8, 0)
        return m

    def snap_to_sides(self, xy, mask):
        """Move points onto the sides named by ``mask`` (corners stay fixed)."""
        x0, x1, y0, y1 = self.domain
        out = self.clamp(xy)
        out[:, 0] = np.where(mask & 1, x0, np.where(mask & 2, x1, out[:, 0]))
        out[:, 1] = np.where(mask & 4, y0, np.where(mask & 8, y1, out[:, 1]))
        return out


class AnalyticHeightfield(Heightfield):
    """Heightfield from vectorised callables ``f(x, y)`` and optional partials."""

    def __init__(self, f, domain, fx=None, fy=None, name="custom"):
        super().__init__(domain)
        self.f, self.fx, self.fy = f, fx, fy
        self.name = name

    def height(self, xy):
        return np.asarray(self.f(xy[:, 0], xy[:, 1]), dtype=float) * np.ones(len(xy))

    def partials(self, xy):
        x, y = xy[:, 0], xy[:, 1]
        if self.fx is not None and self.fy is not None:
            one = np.ones(len(xy))
            return np.asarray(self.fx(x, y), float) * one, np.asarray(self.fy(x, y), float) * one
        h = 1e-6 * max(self._hi - self._lo)
        fx = (self.f(x + h, y) - self.f(x - h, y)) / (2 * h)
        fy = (self.f(x, y + h) - self.f(x, y - h)) / (2 * h)
        return fx, fy


class GridHeightfield(Heightfield):
    """Sampled heightfield with bilinear values; ``values[i, j]`` at ``origin + (i, j) * spacing``."""

    def __init__(self, values, origin, spacing):
        self.values = np.asarray(values, dtype=float)
        if self.values.ndim != 2 or min(self.values.shape) < 2:
            raise TargetError("grid heightfield needs at least 2 samples per axis")
        self.origin = np.asarray(origin, dtype=float).reshape(2)
        self.spacing = np.broadcast_to(np.asarray(spacing, dtype=float), (2,)).copy()
        if np.any(self.spacing <= 0):
            raise TargetError("grid spacing must be positive")
        hi = self.origin + self.spacing * (np.array(self.values.shape) - 1)
        super().__init__((self.origin[0], hi[0], self.origin[1], hi[1]))

    @classmethod
    def from_function(cls, f, domain, shape):
        x0, x1, y0, y1 = domain
        xs, ys = np.linspace(x0, x1, shape[0]), np.linspace(y0, y1, shape[1])
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        return cls(f(X, Y), (x0, y0), ((x1 - x0) / (shape[0] - 1), (y1 - y0) / (shape[1] - 1)))

    def height(self, xy):
        idx = ((xy - self.origin) / self.spacing).T
        return ndimage.map_coordinates(self.values, idx, order=1, mode="nearest")

    def partials(self, xy):
        out = []
        for k in range(2):
            h = self.spacing[k]
            dp = np.zeros(2)
            dp[k] = h
            fwd_ok = xy[:, k] + h <= self._hi[k] + 1e-12
            bwd_ok = xy[:, k] - h >= self._lo[k] - 1e-12
            plus = np.where(fwd_ok[:, None], xy + dp, xy)
            minus = np.where(bwd_ok[:, None], xy - dp, xy)
            step = h * (fwd_ok.astype(float) + bwd_ok.astype(float))
            out.append((self.height(plus) - self.height(minus)) / step)
        return out[0], out[1]

    def save(self, path):
        nx, ny = self.values.shape
        header = "HFIELD {} {} {} {} {} {}\n".format(
            nx, ny, *map(repr, self.origin.tolist()), *map(repr, self.spacing.tolist()))
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(self.values.astype("<f4").ravel(order="F").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            header = fh.readline().decode("ascii").split()
            raw = fh.read()
        if not header or header[0] != "HFIELD" or len(header) != 7:
            raise TargetError(f"{path}: bad HFIELD header")
        nx, ny = int(header[1]), int(header[2])
        vals = np.frombuffer(raw, dtype="<f4")
        if vals.size != nx * ny:
            raise TargetError(f"{path}: expected {nx * ny} floats, found {vals.size}")
        return cls(vals.reshape((nx, ny), order="F").astype(float),
                   [float(v) for v in header[3:5]], [float(v) for v in header[5:7]])


def named_heightfield(name: str, params=(), domain=(-1.0, 1.0, -1.0, 1.0)) -> AnalyticHeightfield:
    """Analytic heightfields selectable by name.

    ``flat``, ``plane:gx,gy``, ``paraboloid:a,b`` (``(a x^2 + b y^2) / 2``),
    ``saddle:a`` (``a x y``), ``ripple:amp,freq`` and ``corner-bumps:amp,width``
    (Gaussian bumps at the four corners of the domain).
    """
    p = [float(v) for v in params]
    if name == "flat":
        return AnalyticHeightfield(lambda x, y: 0.0 * x, domain, lambda x, y: 0.0 * x,
                                   lambda x, y: 0.0 * x, name)
    if name == "plane":
        gx, gy = (p + [1.0, 0.0])[:2]
        return AnalyticHeightfield(lambda x, y: gx * x + gy * y, domain,
                                   lambda x, y: gx + 0 * x, lambda x, y: gy + 0 * y, name)
    if name == "paraboloid":
        a, b = (p + [1.0, 1.0])[:2]
        return AnalyticHeightfield(lambda x, y: 0.5 * (a * x**2 + b * y**2), domain,
                                   lambda x, y: a * x, lambda x, y: b * y, name)
    if name == "saddle":
        a = (p + [1.0])[0]
        return AnalyticHeightfield(lambda x, y: a * x * y, domain,
                                   lambda x, y: a * y, lambda x, y: a * x, name)
    if name == "ripple":
        amp, freq = (p + [0.1, 3.0])[:2]
        return AnalyticHeightfield(
            lambda x, y: amp * np.sin(freq * x) * np.cos(freq * y), domain,
            lambda x, y: amp * freq * np.cos(freq * x) * np.cos(freq * y),
            lambda x, y: -amp * freq * np.sin(freq * x) * np.sin(freq * y), name)
    if name == "corner-bumps":
        amp, width = (p + [0.3, 0.25])[:2]
        x0, x1, y0, y1 = domain
        cx = 0.5 * (x0 + x1)
        cy = 0.5 * (y0 + y1)
        # bumps sit inward of each corner along the diagonals
        corners = [(cx + s * 0.6 * (x1 - cx), cy + t * 0.6 * (y1 - cy)) for s in (-1, 1) for t in (-1, 1)]

        def f(x, y):
            return sum(amp * np.exp(-((x - u) ** 2 + (y - v) ** 2) / width**2) for u, v in corners)

        def fx(x, y):
            return sum(-2 * (x - u) / width**2 * amp * np.exp(-((x - u) ** 2 + (y - v) ** 2) / width**2)
                       for u, v in corners)

        def fy(x, y):
            return sum(-2 * (y - v) / width**2 * amp * np.exp(-((x - u) ** 2 + (y - v) ** 2) / width**2)
                       for u, v in corners)

        return AnalyticHeightfield(f, domain, fx, fy, name)
    raise TargetError(f"unknown analytic heightfield {name!r}")


# ---------------------------------------------------------------------------
# query functions

def _require(target, mode):
    if target.mode != mode:
        raise TargetError(f"query needs a {mode} target, got {target.mode}")


def sdf_eval(target: SurfaceTarget, p):
    """Signed distance at ``p``."""
    _require(target, EUCLIDEAN)
    pts, single = _as_points(p)
    d = target.sdf(pts)
    return float(d[0]) if single else d


def sdf_grad(target: SurfaceTarget, p):
    _require(target, EUCLIDEAN)
    pts, single = _as_points(p)
    g = target.grad(pts)
    return g[0] if single else g


def surface_normal(target: SurfaceTarget, p):
    """Unit outward normal (normalised SDF gradient)."""
    _require(target, EUCLIDEAN)
    pts, single = _as_points(p)
    g = target.grad(pts)
    n = np.linalg.norm(g, axis=1)
    bad = n <= 1e-8
    if np.any(bad):
        raise ProjectionError(pts[np.argmax(bad)])
    g = g / n[:, None]
    return g[0] if single else g


def newton_project(target: SurfaceTarget, pts, tol, max_iter):
    """Iterate ``p <- p - d * grad / |grad|^2`` per point until ``|d| < tol``.

    Points still outside ``tol`` after ``max_iter`` steps are finished by a
    bracketed bisection along their gradient line. Returns
    ``(points, iterations, abs_distance, stalled)``; ``stalled`` marks points
    whose gradient vanished (they keep their last iterate).
    """
    p = np.array(pts, dtype=float)
    n = len(p)
    iters = np.zeros(n, dtype=np.int64)
    stalled = np.zeros(n, dtype=bool)
    d = np.zeros(n)
    idx = np.arange(n)
    for k in range(max_iter + 1):
        if len(idx) == 0:
            break
        dk, g = target.sdf_and_grad(p[idx])
        d[idx] = dk
        keep = np.abs(dk) >= tol
        idx, g, dk = idx[keep], g[keep], dk[keep]
        if k == max_iter:
            break
        g2 = np.sum(g * g, axis=1)
        ok = g2 > 1e-16
        stalled[idx[~ok]] = True
        idx, g, g2, dk = idx[ok], g[ok], g2[ok], dk[ok]
        p[idx] -= (dk / g2)[:, None] * g
        iters[idx] += 1
    if len(idx):
        # Newton can cycle on fields whose gradient is only approximate
        # (sampled grids); finish those points by bisection along the gradient
        p[idx], d[idx] = _bisect_along_gradient(target, p[idx], tol)
    return p, iters, np.abs(d), stalled


def _bisect_along_gradient(target, p, tol, max_expand=30, max_bisect=100):
    """Root of ``sdf(p - t u)`` with ``u = grad/|grad|``, bracketed by doubling ``|t|``.

    Returns ``(points, sdf values)``; unbracketed points are left unchanged.
    """
    d0, g = target.sdf_and_grad(p)
    gn = np.linalg.norm(g, axis=1)
    u = g / np.where(gn > 0, gn, 1.0)[:, None]
    step = np.maximum(np.abs(d0), tol)
    lo = np.zeros(len(p))
    hi = np.sign(d0) * step
    found = np.zeros(len(p), dtype=bool)
    for _ in range(max_expand):
        dh = target.sdf(p - hi[:, None] * u)
        found |= np.sign(dh) != np.sign(d0)
        if found.all():
            break
        grow = ~found
        lo[grow] = hi[grow]
        hi[grow] *= 2.0
    found &= gn > 0
    out, dval = p.copy(), d0.copy()
    if not found.any():
        return out, dval
    a, b, pf, uf = lo[found], hi[found], p[found], u[found]
    da = target.sdf(pf - a[:, None] * uf)
    for _ in range(max_bisect):
        m = 0.5 * (a + b)
        dm = target.sdf(pf - m[:, None] * uf)
        same = np.sign(dm) == np.sign(da)
        a, da = np.where(same, m, a), np.where(same, dm, da)
        b = np.where(same, b, m)
        if np.all(np.minimum(np.abs(da), np.abs(target.sdf(pf - b[:, None] * uf))) < tol):
            break
    db = target.sdf(pf - b[:, None] * uf)
    t = np.where(np.abs(da) <= np.abs(db), a, b)
    out[found] = pf - t[:, None] * uf
    dval[found] = np.where(np.abs(da) <= np.abs(db), da, db)
    return out, dval


def project_to_surface(target: SurfaceTarget, p, tol=1e-8, max_iter=20):
    """Project points onto the zero level set by Newton steps along the gradient.

    Returns ``(points, ProjectionReport)``. Raises :class:`ProjectionError` at
    a vanishing gradient (e.g. a medial-axis point).
    """
    _require(target, EUCLIDEAN)
    pts, single = _as_points(p)
    out, iters, absd, stalled = newton_project(target, pts, tol, max_iter)
    if np.any(stalled):
        raise ProjectionError(out[np.argmax(stalled)])
    if single:
        return out[0], ProjectionReport(int(iters[0]), float(absd[0]))
    return out, ProjectionReport(iters, absd)


def _xy(target, xy, check=True):
    arr = np.asarray(xy, dtype=float)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr)[:, :2]
    if check and not np.all(target.contains(arr)):
        bad = arr[np.argmin(target.contains(arr))]
        raise TargetError(f"query {bad.tolist()} outside heightfield domain {target.domain}")
    return arr, single


def isotropic_gauss_map(target: Heightfield, xy):
    """Gauss image ``(f_x, f_y, (f_x^2 + f_y^2) / 2)`` of the graph point above ``xy``."""
    _require(target, ISOTROPIC)
    arr, single = _xy(target, xy)
    fx, fy = target.partials(arr)
    out = np.column_stack([fx, fy, 0.5 * (fx**2 + fy**2)])
    return out[0] if single else out


def isotropic_boundary_normal(target: Heightfield, xy):
    """Unit vector ``(f_x, f_y, 1) / sqrt(f_x^2 + f_y^2 + 1)``."""
    _require(target, ISOTROPIC)
    arr, single = _xy(target, xy)
    fx, fy = target.partials(arr)
    out = np.column_stack([fx, fy, np.ones(len(arr))])
    out /= np.linalg.norm(out, axis=1, keepdims=True)
    return out[0] if single else out


def graph_normal(target: Heightfield, xy):
    """Unit upward normal ``(-f_x, -f_y, 1) / |.|`` of the graph surface."""
    arr, single = _xy(target, xy, check=False)
    fx, fy = target.partials(target.clamp(arr))
    out = _unit(np.column_stack([-fx, -fy, np.ones(len(arr))]))
    return out[0] if single else out


def project_isotropic(target: Heightfield, p):
    """Clamp ``(x, y)`` into the domain and reset ``z = f(x, y)``."""
    _require(target, ISOTROPIC)
    pts, single = _as_points(p)
    xy = target.clamp(pts[:, :2])
    out = np.column_stack([xy, target.height(xy)])
    return out[0] if single else out


def load_target_file(path):
    """Load a ``GRIDSDF`` or ``HFIELD`` file, dispatching on the header keyword."""
    with open(path, "rb") as fh:
        kw = fh.readline().split()[:1]
    if kw == [b"GRIDSDF"]:
        return GridSDF.load(path)
    if kw == [b"HFIELD"]:
        return GridHeightfield.load(path)
    raise TargetError(f"{Path(path)}: unrecognised target file header")
