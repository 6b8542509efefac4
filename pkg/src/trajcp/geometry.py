"""Convex rigid bodies, signed distance, distance gradients and swept checks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from . import _geomkern as gk
from . import _simkern as sk
from .dynamics import PlantModel, Pose

D_FLOOR = 1e-4


class GeometryError(RuntimeError):
    pass


class ConvexShape:
    """Base class; a shape lives in its own body frame."""

    kind: int

    def bounding_sphere(self) -> tuple[np.ndarray, float]:
        raise NotImplementedError

    def circumradius(self) -> float:
        """Largest distance of any point of the shape from the frame origin."""
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Sphere(ConvexShape):
    center: np.ndarray
    radius: float
    kind = 0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(3))
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")

    def bounding_sphere(self):
        return self.center, float(self.radius)

    def circumradius(self) -> float:
        return float(np.linalg.norm(self.center) + self.radius)

    def to_dict(self) -> dict:
        return {"type": "sphere", "center": self.center.tolist(), "radius": float(self.radius)}


class Polytope(ConvexShape):
    """Convex hull of a vertex list (at least four affinely independent points)."""

    kind = 1

    def __init__(self, vertices):
        V = np.asarray(vertices, dtype=float)
        if V.ndim != 2 or V.shape[1] != 3 or V.shape[0] < 4:
            raise ValueError("polytope needs at least 4 vertices in 3-D")
        try:
            hull = ConvexHull(V)
        except QhullError as exc:
            raise ValueError("polytope vertices are not affinely independent") from exc
        self.vertices = V[hull.vertices]
        self.face_normals = _unique_directions(hull.equations[:, :3], signed=True)
        self.edge_directions = _hull_edges(V, hull)

    @classmethod
    def box(cls, lo, hi) -> "Polytope":
        lo = np.asarray(lo, dtype=float)
        hi = np.asarray(hi, dtype=float)
        if np.any(hi <= lo):
            raise ValueError("box needs hi > lo on every axis")
        corners = [[(lo, hi)[a][0], (lo, hi)[b][1], (lo, hi)[c][2]]
                   for a in (0, 1) for b in (0, 1) for c in (0, 1)]
        return cls(corners)

    def bounding_sphere(self):
        c = 0.5 * (self.vertices.min(axis=0) + self.vertices.max(axis=0))
        return c, float(np.linalg.norm(self.vertices - c, axis=1).max())

    def circumradius(self) -> float:
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def to_dict(self) -> dict:
        return {"type": "polytope", "vertices": self.vertices.tolist()}


def _unique_directions(dirs, signed: bool) -> np.ndarray:
    out: list[np.ndarray] = []
    for d in dirs:
        d = d / np.linalg.norm(d)
        dup = False
        for e in out:
            c = d @ e
            if c > 1 - 1e-9 or (not signed and c < -1 + 1e-9):
                dup = True
                break
        if not dup:
            out.append(d)
    return np.array(out)


def _hull_edges(V, hull) -> np.ndarray:
    # triangulated facets: keep only edges whose two faces have distinct normals
    adj: dict[tuple[int, int], list[int]] = {}
    for f, simplex in enumerate(hull.simplices):
        for a in range(3):
            e = tuple(sorted((simplex[a], simplex[(a + 1) % 3])))
            adj.setdefault(e, []).append(f)
    normals = hull.equations[:, :3]
    dirs = []
    for (a, b), faces in adj.items():
        if len(faces) == 2 and normals[faces[0]] @ normals[faces[1]] > 1 - 1e-9:
            continue
        dirs.append(V[b] - V[a])
    return _unique_directions(dirs, signed=False)


def pack_shapes(shapes: Sequence[ConvexShape]) -> tuple:
    """Struct-of-arrays layout consumed by the compiled kernels."""
    n = len(shapes)
    kind = np.array([s.kind for s in shapes], dtype=np.int64)
    core = np.zeros((n, 3))
    skin = np.zeros(n)
    bcenter = np.zeros((n, 3))
    brad = np.zeros(n)
    circ = np.zeros(n)
    verts, norms, edges = [], [], []
    voff, foff, eoff = [0], [0], [0]
    for k, s in enumerate(shapes):
        bcenter[k], brad[k] = s.bounding_sphere()
        circ[k] = s.circumradius()
        if isinstance(s, Sphere):
            core[k] = s.center
            skin[k] = s.radius
        else:
            core[k] = bcenter[k]
            verts.append(s.vertices)
            norms.append(s.face_normals)
            edges.append(s.edge_directions)
        voff.append(voff[-1] + (0 if isinstance(s, Sphere) else len(s.vertices)))
        foff.append(foff[-1] + (0 if isinstance(s, Sphere) else len(s.face_normals)))
        eoff.append(eoff[-1] + (0 if isinstance(s, Sphere) else len(s.edge_directions)))

    def cat(parts):
        return np.ascontiguousarray(np.vstack(parts)) if parts else np.zeros((0, 3))

    return (kind, core, skin, bcenter, brad, circ,
            np.array(voff, dtype=np.int64), cat(verts),
            np.array(foff, dtype=np.int64), cat(norms),
            np.array(eoff, dtype=np.int64), cat(edges))


@dataclass
class RobotBody:
    parts: list[tuple[str, ConvexShape]]

    def __post_init__(self):
        if not self.parts:
            raise ValueError("robot needs at least one part")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.parts]


@dataclass
class Environment:
    obstacles: list[tuple[str, ConvexShape]]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.obstacles]


@dataclass(frozen=True, eq=False)
class Contact:
    distance: float
    point_robot: np.ndarray
    point_obstacle: np.ndarray


def signed_distance(part: ConvexShape, pose: Pose, obstacle: ConvexShape,
                    obstacle_pose: Pose | None = None) -> Contact:
    """Separation (>0) or negative penetration depth between posed shapes."""
    SA = pack_shapes([part])
    SB = pack_shapes([obstacle])
    obstacle_pose = obstacle_pose or Pose.identity()
    pa = np.empty(3)
    pb = np.empty(3)
    d, status = gk.signed_distance_kernel(
        SA, 0, pose.rotation_matrix(), np.asarray(pose.translation, dtype=float),
        SB, 0, obstacle_pose.rotation_matrix(), np.asarray(obstacle_pose.translation, dtype=float),
        pa, pb)
    if status == gk.STATUS_NO_CONVERGENCE:
        raise GeometryError(f"GJK did not converge within {gk.GJK_MAX_ITER} iterations")
    return Contact(float(d), pa, pb)


@dataclass(frozen=True)
class SweptResult:
    collided: bool
    first_hit: tuple[int, int, int] | None
    min_distance: float
    domain_exit: bool = False


class CollisionChecker:
    """Binds a plant's pose map to packed robot and environment geometry."""

    def __init__(self, model: PlantModel, robot: RobotBody, env: Environment):
        self.model = model
        self.robot = robot
        self.env = env
        self.SR = pack_shapes([s for _, s in robot.parts])
        self.SE = pack_shapes([s for _, s in env.obstacles])
        self.nparts = len(robot.parts)
        self.nobs = len(env.obstacles)

    def distance(self, x, i: int, j: int) -> float:
        kind, prm, _, _, pidx = self.model.kernel_args()
        d = sk.state_pair_distance(kind, prm, pidx, np.asarray(x, dtype=float), self.SR, i, self.SE, j)
        if np.isnan(d):
            raise GeometryError(f"distance query for pair ({i}, {j}) did not converge")
        return float(d)

    def gradient(self, x, i: int, j: int, rel_step: float = 1e-5) -> tuple[np.ndarray, bool]:
        """Central-difference gradient of d_ij over the state.

        Returns ``(grad, degenerate)``; ``degenerate`` flags an exact touch
        where the one-sided quotients disagree.
        """
        x = np.asarray(x, dtype=float)
        kind, prm, _, _, pidx = self.model.kernel_args()
        steps = rel_step * np.maximum(1.0, np.abs(x))
        fwd = np.empty_like(x)
        bwd = np.empty_like(x)
        d = sk.state_pair_gradient(kind, prm, pidx, x, self.SR, i, self.SE, j, steps, fwd, bwd)
        grad = 0.5 * (fwd + bwd)
        degenerate = False
        if abs(d) < 1e-9:
            tol = np.maximum(1e-6, 1e-2 * np.abs(grad))
            degenerate = bool(np.any(np.abs(fwd - bwd) > tol))
        return grad, degenerate

    def swept(self, states, margin: float = 0.0, domain_exit: bool = False) -> SweptResult:
        if domain_exit:
            return SweptResult(True, None, float("nan"), True)
        X = np.ascontiguousarray(states, dtype=float)
        if X.shape[0] < 1:
            raise ValueError("rollout must contain at least one state")
        if margin < 0:
            raise ValueError("margin must be non-negative")
        kind, prm, _, _, pidx = self.model.kernel_args()
        hit, t, i, j, dmin = sk.swept_states(kind, prm, pidx, X, X.shape[0], self.SR, self.SE,
                                             float(margin), D_FLOOR)
        return SweptResult(bool(hit), (int(t), int(i), int(j)) if hit else None, float(dmin))

    def discrete(self, states, margin: float = 0.0) -> bool:
        """Endpoint-only check; the swept check exists because this can tunnel."""
        return any(self.distance(x, i, j) <= margin
                   for x in np.atleast_2d(states)
                   for i in range(self.nparts) for j in range(self.nobs))


def distance_gradient(robot: RobotBody, i: int, env: Environment, j: int, state,
                      model: PlantModel) -> tuple[np.ndarray, bool]:
    return CollisionChecker(model, robot, env).gradient(state, i, j)


def swept_collides(robot: RobotBody, env: Environment, result, margin: float = 0.0,
                   model: PlantModel | None = None) -> tuple[bool, tuple[int, int, int] | None]:
    """Swept check of a rollout; ``result`` is a RolloutResult."""
    model = model or result.model
    out = CollisionChecker(model, robot, env).swept(result.states, margin, result.domain_exit)
    return out.collided, out.first_hit
