"""Interpolation curves, PCA loss landscapes and sharpness."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, ParameterError, SchemaError
from .model import ModelConfig, NamedTensors, canonical, loss, loss_and_grad
from .numkit import RngState, householder_qr, jacobi_eigh, keyed_seed, rng_gaussian
from .protect import ProtectedModel
from .tasks import concat
from .training import FROZEN_SUFFIXES, eval_batch

N_EVAL = 512
EMBEDDING_PREFIX = "embed."


def flatten_weights(w: NamedTensors, names=None) -> np.ndarray:
    """Concatenate tensors in canonical (lexicographic) order."""
    names = sorted(w) if names is None else list(names)
    if not names:
        return np.zeros(0)
    return np.concatenate([np.asarray(w[k], dtype=np.float64).reshape(-1) for k in names])


def unflatten_weights(vec, like: NamedTensors, names=None) -> NamedTensors:
    """Inverse of :func:`flatten_weights`; tensors outside ``names`` are copied from ``like``."""
    names = sorted(like) if names is None else list(names)
    vec = np.asarray(vec, dtype=np.float64)
    total = sum(np.size(like[k]) for k in names)
    if vec.shape != (total,):
        raise ParameterError(f"vector of length {vec.size} does not match {total} parameters")
    out = {k: np.array(v, copy=True) for k, v in like.items()}
    at = 0
    for k in names:
        n = np.size(like[k])
        out[k] = vec[at:at + n].reshape(np.shape(like[k])).copy()
        at += n
    return canonical(out)


def tensors_of(w) -> NamedTensors:
    return w.tensors if isinstance(w, ProtectedModel) else w


def evaluation_batch(task, n: int = N_EVAL):
    """Seed-pinned evaluation batch for one task or the union over several."""
    tasks = list(task) if isinstance(task, (list, tuple)) else [task]
    return concat(eval_batch(t, n) for t in tasks)


def _same_schema(a, b):
    if set(a) != set(b) or any(np.shape(a[k]) != np.shape(b[k]) for k in a):
        diff = sorted(set(a) ^ set(b)) or sorted(k for k in a if np.shape(a[k]) != np.shape(b[k]))
        raise SchemaError("models do not share a schema: " + ", ".join(diff), names=diff)


# ---------------------------------------------------------------------------
# linear interpolation
# ---------------------------------------------------------------------------

def interpolation_curve(cfg: ModelConfig, wA, wB, task, steps: int = 21, n_eval: int = N_EVAL) -> list:
    """``[(t, loss((1 - t) wA + t wB)), ...]`` on a uniform grid including both ends."""
    if steps < 2:
        raise ParameterError(f"steps must be >= 2, got {steps}")
    a, b = tensors_of(wA), tensors_of(wB)
    _same_schema(a, b)
    batch = evaluation_batch(task, n_eval)
    out = []
    for t in np.linspace(0.0, 1.0, steps):
        w = {k: (1.0 - t) * a[k] + t * b[k] for k in a}
        out.append((float(t), loss(cfg, w, batch)))
    return out


def barrier_height(curve) -> float:
    """Interior maximum minus the larger endpoint."""
    losses = [l for _, l in curve]
    if len(losses) < 3:
        return 0.0
    return max(losses[1:-1]) - max(losses[0], losses[-1])


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["t", "loss"])
        for t, l in curve:
            wr.writerow([repr(float(t)), repr(float(l))])


# ---------------------------------------------------------------------------
# PCA landscape
# ---------------------------------------------------------------------------

@dataclass
class LandscapeGrid:
    names: list            # tensors spanned by the axes
    center: np.ndarray     # mean anchor over ``names``
    axes: np.ndarray       # 2 x P, orthonormal rows
    xs: np.ndarray
    ys: np.ndarray
    grid: np.ndarray       # len(ys) x len(xs) losses
    anchor_coords: np.ndarray
    residuals: np.ndarray  # out-of-plane norm per anchor
    eigenvalues: np.ndarray
    total_energy: float

    def to_dict(self) -> dict:
        return {"names": self.names, "xs": self.xs.tolist(), "ys": self.ys.tolist(),
                "anchor_coords": self.anchor_coords.tolist(), "residuals": self.residuals.tolist(),
                "eigenvalues": self.eigenvalues.tolist(), "total_energy": self.total_energy}


def pca_axes(x: np.ndarray, seed: int = 0):
    """Top-2 principal axes of the rows of ``x`` via the centred Gram matrix.

    Returns ``(center, axes, eigenvalues, total_energy)``. When the second
    eigenvalue vanishes (collinear anchors) the second axis is an arbitrary
    seeded direction orthogonal to the first.
    """
    center = x.mean(axis=0)
    xc = x - center
    eig = jacobi_eigh(xc @ xc.T)
    total = float(np.sum(xc * xc))
    lam = np.maximum(eig.eigenvalues, 0.0)
    if total == 0.0 or lam[0] <= 1e-14 * max(total, 1e-300):
        raise DegenerateError("all anchors coincide; the PCA plane is undefined")
    cols = [xc.T @ eig.eigenvectors[:, 0]]
    if len(lam) > 1 and lam[1] > 1e-10 * lam[0]:
        cols.append(xc.T @ eig.eigenvectors[:, 1])
    else:
        g, _ = rng_gaussian(RngState(keyed_seed(seed, "pca")), x.shape[1], 1)
        cols.append(g[:, 0])
    q, _ = householder_qr(np.stack(cols, axis=1))
    axes = q.T
    if axes[0] @ cols[0] < 0:
        axes[0] = -axes[0]
    return center, axes, lam, total


def loss_landscape(cfg: ModelConfig, anchors, task, steps: int = 25, margin: float = 0.2,
                   include_embeddings: bool = False, n_eval: int = N_EVAL, seed: int = 0) -> LandscapeGrid:
    anchors = [tensors_of(a) for a in anchors]
    if len(anchors) < 2:
        raise ParameterError("need at least two anchors")
    if steps < 3:
        raise ParameterError(f"steps must be >= 3, got {steps}")
    if margin < 0:
        raise ParameterError(f"margin must be >= 0, got {margin}")
    for a in anchors[1:]:
        _same_schema(anchors[0], a)
    names = [k for k in sorted(anchors[0])
             if (include_embeddings or not k.startswith(EMBEDDING_PREFIX))
             and not k.endswith(FROZEN_SUFFIXES)]
    x = np.stack([flatten_weights(a, names) for a in anchors])
    center, axes, lam, total = pca_axes(x, seed)
    coords = (x - center) @ axes.T
    resid = np.linalg.norm((x - center) - coords @ axes, axis=1)

    # coordinates outside the plane sit at the anchors' mean
    mean_model = {k: np.mean([a[k] for a in anchors], axis=0) for k in anchors[0]}
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    span = np.maximum(hi - lo, 1e-12 * max(1.0, float(np.abs(coords).max())))
    xs = np.linspace(lo[0] - margin * span[0], hi[0] + margin * span[0], steps)
    ys = np.linspace(lo[1] - margin * span[1], hi[1] + margin * span[1], steps)
    batch = evaluation_batch(task, n_eval)
    grid = np.empty((steps, steps))
    for r, yv in enumerate(ys):
        for c, xv in enumerate(xs):
            w = unflatten_weights(center + xv * axes[0] + yv * axes[1], mean_model, names)
            grid[r, c] = loss(cfg, w, batch)
    return LandscapeGrid(names, center, axes, xs, ys, grid, coords, resid, lam[:2], total)


def write_grid_csv(path, grid: LandscapeGrid, labels=None) -> None:
    labels = labels or [f"anchor{i}" for i in range(len(grid.anchor_coords))]
    with open(path, "w", newline="") as f:
        for lab, (x, y), r in zip(labels, grid.anchor_coords, grid.residuals):
            f.write(f"# {lab} x={float(x)!r} y={float(y)!r} residual={float(r)!r}\n")
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["x", "y", "loss"])
        for r, yv in enumerate(grid.ys):
            for c, xv in enumerate(grid.xs):
                wr.writerow([repr(float(xv)), repr(float(yv)), repr(float(grid.grid[r, c]))])


# ---------------------------------------------------------------------------
# sharpness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SharpnessConfig:
    epsilon: float = 0.02
    samples: int = 8
    ascent_steps: int = 3
    seed: int = 0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be > 0, got {self.epsilon}")
        if self.samples < 1:
            raise ParameterError(f"samples must be >= 1, got {self.samples}")
        if self.ascent_steps < 0:
            raise ParameterError(f"ascent_steps must be >= 0, got {self.ascent_steps}")

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "samples": self.samples,
                "ascent_steps": self.ascent_steps, "seed": self.seed}


def sharpness_fn(loss_fn, w, sc: SharpnessConfig, grad_fn=None) -> float:
    """max(0, max_delta (L(w + delta) - L(w)) / (1 + L(w))) over ``||delta|| <= epsilon``.

    Each of ``sc.samples`` seeded random directions starts on the sphere and
    is refined by ``sc.ascent_steps`` normalised gradient steps of length
    epsilon / 10, projected back onto the ball. Every visited point counts.
    """
    w = np.asarray(w, dtype=np.float64)
    base = float(loss_fn(w))
    eps = sc.epsilon
    best = 0.0
    for m in range(sc.samples):
        d, _ = rng_gaussian(RngState(keyed_seed(sc.seed, "sharpness", m)), 1, w.size)
        d = d[0]
        delta = eps * d / np.linalg.norm(d)
        for step in range(sc.ascent_steps + 1):
            best = max(best, (float(loss_fn(w + delta)) - base) / (1.0 + base))
            if step == sc.ascent_steps or grad_fn is None:
                break
            g = np.asarray(grad_fn(w + delta), dtype=np.float64)
            gn = np.linalg.norm(g)
            if gn == 0.0:
                break
            delta = delta + (eps / 10.0) * g / gn
            dn = np.linalg.norm(delta)
            if dn > eps:
                delta *= eps / dn
    return best


def trainable_names(w: NamedTensors) -> list:
    return [k for k in sorted(w) if not k.endswith(FROZEN_SUFFIXES)]


def sharpness(cfg: ModelConfig, w, task, sc: SharpnessConfig, n_eval: int = N_EVAL) -> float:
    """Sharpness of a model (or protected bundle) on the seed-pinned evaluation batch."""
    t = tensors_of(w)
    names = trainable_names(t)
    batch = evaluation_batch(task, n_eval)
    w0 = flatten_weights(t, names)

    def f(v):
        return loss(cfg, unflatten_weights(v, t, names), batch)

    def g(v):
        _, grads = loss_and_grad(cfg, unflatten_weights(v, t, names), batch)
        return flatten_weights(grads, names)

    return sharpness_fn(f, w0, sc, g)
