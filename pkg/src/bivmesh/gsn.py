"""Graph-subdivision refinement: a midpoint split followed by a degree-
normalized, MLP-parameterized neighbour-difference vertex update, with the
Chamfer / cotangent-Laplacian losses, hand-derived reverse-mode gradients,
and the AdamW training loop.

No autodiff framework: the computation graph is fixed, so the backward pass
is written out explicitly and checked against finite differences.
"""

import copy
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .anatomy import SURFACE_TARGETS
from .mesh import LabeledMesh, build_edges, midpoint_subdivide
from .volume import surface_mask


class GsnError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


HIDDEN = 16


@dataclass
class MlpParams:
    """3 -> 16 -> 16 -> 3 perceptron; rectifier hidden, linear output."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray

    @classmethod
    def zeros(cls):
        return cls(w1=np.zeros((HIDDEN, 3)), b1=np.zeros(HIDDEN),
                   w2=np.zeros((HIDDEN, HIDDEN)), b2=np.zeros(HIDDEN),
                   w3=np.zeros((3, HIDDEN)), b3=np.zeros(3))

    @classmethod
    def initialize(cls, rng):
        # Glorot-uniform hidden layers; zero last layer so the update starts
        # as exact midpoint subdivision.
        def glorot(shape):
            bound = np.sqrt(6.0 / (shape[0] + shape[1]))
            return rng.uniform(-bound, bound, shape)

        return cls(w1=glorot((HIDDEN, 3)), b1=np.zeros(HIDDEN),
                   w2=glorot((HIDDEN, HIDDEN)), b2=np.zeros(HIDDEN),
                   w3=np.zeros((3, HIDDEN)), b3=np.zeros(3))

    def arrays(self):
        return [self.w1, self.b1, self.w2, self.b2, self.w3, self.b3]

    def check_finite(self):
        for a in self.arrays():
            if not np.all(np.isfinite(a)):
                raise GsnError("non-finite MLP parameter")
        return self


@dataclass
class GsnStack:
    layers: list                                  # exactly 2 MlpParams

    def __post_init__(self):
        if len(self.layers) != 2:
            raise GsnError("GSN stack must hold exactly 2 layers")

    @classmethod
    def zeros(cls):
        return cls(layers=[MlpParams.zeros(), MlpParams.zeros()])

    @classmethod
    def initialize(cls, rng):
        return cls(layers=[MlpParams.initialize(rng), MlpParams.initialize(rng)])


@dataclass(frozen=True)
class LossWeights:
    chamfer: float = 0.56
    laplacian: float = 0.12

    def __post_init__(self):
        if self.chamfer < 0 or self.laplacian < 0:
            raise GsnError("loss weights must be >= 0")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 120
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise GsnError("epochs must be >= 1")
        if self.lr < 0:
            raise GsnError("learning rate must be >= 0")


# ---------------------------------------------------------------------------
# MLP forward/backward
# ---------------------------------------------------------------------------

def mlp_forward(theta, x):
    """Evaluate the vertex-update MLP on x of shape (..., 3) or (3,)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise GsnError("non-finite MLP input")
    single = x.ndim == 1
    X = np.atleast_2d(x)
    y, _ = _mlp_forward_tape(theta, X)
    return y[0] if single else y


def _mlp_forward_tape(theta, X):
    z1 = X @ theta.w1.T + theta.b1
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ theta.w2.T + theta.b2
    a2 = np.maximum(z2, 0.0)
    y = a2 @ theta.w3.T + theta.b3
    return y, (X, z1, a1, z2, a2)


def _mlp_backward(theta, tape, dy):
    X, z1, a1, z2, a2 = tape
    grads = MlpParams.zeros()
    grads.w3 += dy.T @ a2
    grads.b3 += dy.sum(axis=0)
    da2 = dy @ theta.w3
    dz2 = da2 * (z2 > 0.0)
    grads.w2 += dz2.T @ a1
    grads.b2 += dz2.sum(axis=0)
    da1 = dz2 @ theta.w2
    dz1 = da1 * (z1 > 0.0)
    grads.w1 += dz1.T @ X
    grads.b1 += dz1.sum(axis=0)
    dX = dz1 @ theta.w1
    return grads, dX


# ---------------------------------------------------------------------------
# GSN layer forward
# ---------------------------------------------------------------------------

@dataclass
class _LayerTape:
    parent_edges: np.ndarray       # (E, 2) midpoint parents
    n_parent: int
    src: np.ndarray                # directed edge sources (subdivided mesh)
    dst: np.ndarray
    norm: np.ndarray               # 1 / sqrt(deg_src * deg_dst)
    mlp_tape: tuple


def _gsn_layer_tape(m, theta):
    sub, smap = midpoint_subdivide(m)
    table = build_edges(sub)
    e = table.edges
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    deg = table.degrees.astype(np.float64)
    norm = 1.0 / np.sqrt(deg[src] * deg[dst])
    diffs = sub.vertices[dst] - sub.vertices[src]
    messages, mlp_tape = _mlp_forward_tape(theta, diffs)
    update = np.zeros_like(sub.vertices)
    np.add.at(update, src, norm[:, None] * messages)
    out = LabeledMesh(vertices=sub.vertices + update, faces=sub.faces,
                      labels=sub.labels)
    tape = _LayerTape(parent_edges=smap.parent_edges, n_parent=m.n_vertices,
                      src=src, dst=dst, norm=norm, mlp_tape=mlp_tape)
    return out, tape


def gsn_layer(m, theta):
    """One subdivision level: midpoint split, then offset every vertex by the
    degree-normalized sum of MLP-transformed neighbour differences."""
    out, _ = _gsn_layer_tape(m, theta)
    return out


def gsn_forward(m, stack):
    """Apply both layers sequentially; returns [level-1 mesh, level-2 mesh]."""
    outputs = []
    mesh = m
    for theta in stack.layers:
        mesh = gsn_layer(mesh, theta)
        outputs.append(mesh)
    return outputs


def _update_backward(theta, tape, gbar):
    """Adjoint of p' = p + scatter(norm * h(p[dst] - p[src]) -> src)."""
    dmsg = tape.norm[:, None] * gbar[tape.src]
    theta_grads, ddiff = _mlp_backward(theta, tape.mlp_tape, dmsg)
    gpos = gbar.copy()
    np.add.at(gpos, tape.dst, ddiff)
    np.subtract.at(gpos, tape.src, ddiff)
    return theta_grads, gpos


def _subdivision_backward(tape, gmid):
    """Adjoint of the midpoint concatenation back to parent positions."""
    gpar = gmid[: tape.n_parent].copy()
    half = 0.5 * gmid[tape.n_parent:]
    np.add.at(gpar, tape.parent_edges[:, 0], half)
    np.add.at(gpar, tape.parent_edges[:, 1], half)
    return gpar


# ---------------------------------------------------------------------------
# Ground-truth point clouds
# ---------------------------------------------------------------------------

def boundary_voxel_mask(mask):
    """Foreground voxels with at least one background 6-neighbour (in-grid)."""
    mask = np.asarray(mask, dtype=bool)
    interior = np.ones_like(mask)
    interior[1:, :, :] &= mask[:-1, :, :]
    interior[:-1, :, :] &= mask[1:, :, :]
    interior[:, 1:, :] &= mask[:, :-1, :]
    interior[:, :-1, :] &= mask[:, 1:, :]
    interior[:, :, 1:] &= mask[:, :, :-1]
    interior[:, :, :-1] &= mask[:, :, 1:]
    return mask & ~interior


def extract_point_cloud(vol, target, ndc, max_points=5000, seed=0):
    """Boundary-voxel centers of the target's region, mapped to NDC."""
    mask = surface_mask(vol, target)
    if not mask.any():
        raise GsnError(f"empty mask for surface target {target}")
    idx = np.argwhere(boundary_voxel_mask(mask))
    pts = ndc.index_to_ndc(idx)
    if max_points is not None and len(pts) > max_points:
        rng = np.random.default_rng(seed)
        keep = rng.choice(len(pts), size=max_points, replace=False)
        pts = pts[np.sort(keep)]
    return pts


def build_point_cloud_set(vol, ndc, max_points=5000, seed=0):
    """Per-surface-target point clouds for every nonempty target."""
    pcs = {}
    for target in SURFACE_TARGETS:
        if surface_mask(vol, target).any():
            pcs[target] = extract_point_cloud(vol, target, ndc,
                                              max_points=max_points, seed=seed)
    return pcs


# ---------------------------------------------------------------------------
# Losses (value + analytic vertex gradients)
# ---------------------------------------------------------------------------

def chamfer_loss(m, pcs, pairs=None):
    """Symmetric squared-distance Chamfer summed over anatomical labels,
    each direction normalized by its own set size.

    Returns (value, vertex_gradient, pairs); pass `pairs` back in to evaluate
    the same frozen nearest-neighbour assignment at new positions.
    """
    V = m.vertices
    grad = np.zeros_like(V)
    total = 0.0
    pairs_out = {}
    for target in SURFACE_TARGETS:
        pts = pcs.get(target)
        if pts is None or len(pts) == 0:
            continue
        sel = np.flatnonzero(m.labels == target)
        if len(sel) == 0:
            warnings.warn(f"no vertices with label {target}; label skipped",
                          stacklevel=2)
            continue
        if pairs is not None and target not in pairs:
            continue
        vx = V[sel]
        if pairs is not None:
            nn_vp, nn_pv = pairs[target]
        else:
            nn_vp = cKDTree(pts).query(vx)[1]
            nn_pv = cKDTree(vx).query(pts)[1]
        pairs_out[target] = (nn_vp, nn_pv)
        d1 = vx - pts[nn_vp]
        total += (d1 ** 2).sum() / len(vx)
        grad[sel] += (2.0 / len(vx)) * d1
        d2 = pts - vx[nn_pv]
        total += (d2 ** 2).sum() / len(pts)
        np.subtract.at(grad, sel[nn_pv], (2.0 / len(pts)) * d2)
    return total, grad, pairs_out


def _cotangent_coefficients(m):
    """Per-directed-edge weights c_ij = (cot a_ij + cot b_ij) / (4 A_i).

    a_ij, b_ij are the angles opposite edge (i, j) in its incident triangles
    (cotangents clamped to [-20, 20]); A_i sums the areas of all triangles
    containing vertex i.
    """
    V, F = m.vertices, m.faces
    p0, p1, p2 = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    cross = np.cross(p1 - p0, p2 - p0)
    areas2 = np.linalg.norm(cross, axis=1)           # 2 * area
    if np.any(areas2 < 1e-300):
        raise GsnError("zero-area face")

    vertex_area = np.zeros(m.n_vertices)
    np.add.at(vertex_area, F.ravel(), np.repeat(areas2 / 2.0, 3))

    # cot at corner k for the edge opposite k, accumulated per undirected edge
    cot_sum = {}
    corners = ((0, 1, 2), (1, 2, 0), (2, 0, 1))
    cots = []
    opp_edges = []
    for k, i, j in corners:
        u = V[F[:, i]] - V[F[:, k]]
        w = V[F[:, j]] - V[F[:, k]]
        dot = (u * w).sum(axis=1)
        crs = np.linalg.norm(np.cross(u, w), axis=1)
        cot = np.clip(dot / np.maximum(crs, 1e-300), -20.0, 20.0)
        cots.append(cot)
        opp_edges.append(np.sort(F[:, [i, j]], axis=1))
    opp = np.vstack(opp_edges)
    cot_all = np.concatenate(cots)
    edges, inverse = np.unique(opp, axis=0, return_inverse=True)
    edge_cot = np.zeros(len(edges))
    np.add.at(edge_cot, inverse, cot_all)

    src = np.concatenate([edges[:, 0], edges[:, 1]])
    dst = np.concatenate([edges[:, 1], edges[:, 0]])
    coeff = np.concatenate([edge_cot, edge_cot]) / (4.0 * vertex_area[src])
    return src, dst, coeff


def laplacian_loss(m, weights=None):
    """Mean Euclidean norm of the cotangent-weighted Laplacian vectors
    L_i = sum_j c_ij (v_i - v_j); gradients treat the weights as constants.

    Returns (value, vertex_gradient, weights) with reusable frozen weights.
    """
    if weights is None:
        weights = _cotangent_coefficients(m)
    src, dst, coeff = weights
    V = m.vertices
    L = np.zeros_like(V)
    np.add.at(L, src, coeff[:, None] * (V[src] - V[dst]))
    norms = np.linalg.norm(L, axis=1)
    value = norms.mean()

    # Subgradient 0 where |L| vanishes (symmetric meshes hit exact zeros);
    # without the threshold the unit direction is numerical noise.
    safe = norms > 1e-12
    unit = np.where(safe[:, None], L / np.where(safe, norms, 1.0)[:, None], 0.0)
    row_sum = np.zeros(m.n_vertices)
    np.add.at(row_sum, src, coeff)
    grad = unit * row_sum[:, None]
    np.subtract.at(grad, dst, coeff[:, None] * unit[src])
    grad /= m.n_vertices
    return value, grad, weights


def total_loss(meshes, pcs, w=None, frozen=None):
    """Mean over GSN output levels of chamfer-weight * Chamfer +
    laplacian-weight * Laplacian.  Returns (value, per-level vertex
    gradients, frozen aux data)."""
    w = w or LossWeights()
    n = len(meshes)
    value = 0.0
    grads = []
    frozen_out = []
    for lvl, mesh in enumerate(meshes):
        fr = frozen[lvl] if frozen is not None else (None, None)
        if w.chamfer != 0.0:
            c_val, c_grad, pairs = chamfer_loss(mesh, pcs, pairs=fr[0])
        else:
            c_val, c_grad, pairs = 0.0, np.zeros_like(mesh.vertices), None
        if w.laplacian != 0.0:
            l_val, l_grad, wts = laplacian_loss(mesh, weights=fr[1])
        else:
            l_val, l_grad, wts = 0.0, np.zeros_like(mesh.vertices), None
        value += (w.chamfer * c_val + w.laplacian * l_val) / n
        grads.append((w.chamfer * c_grad + w.laplacian * l_grad) / n)
        frozen_out.append((pairs, wts))
    return value, grads, frozen_out


def backprop(stack, mesh, pcs, w=None, frozen=None):
    """Exact gradients of total_loss w.r.t. every stack parameter, under
    frozen nearest-neighbour matches and frozen cotangent weights.

    Returns (loss, [MlpParams grads per layer], frozen aux data).
    """
    w = w or LossWeights()
    tapes = []
    meshes = []
    current = mesh
    for theta in stack.layers:
        current, tape = _gsn_layer_tape(current, theta)
        tapes.append(tape)
        meshes.append(current)
    loss, level_grads, frozen_out = total_loss(meshes, pcs, w, frozen=frozen)
    if not np.isfinite(loss):
        raise GsnError("non-finite loss in forward pass")

    param_grads = [None] * len(stack.layers)
    gbar = None
    for lvl in reversed(range(len(stack.layers))):
        g = level_grads[lvl] if gbar is None else level_grads[lvl] + gbar
        if not np.all(np.isfinite(g)):
            bad = int(np.flatnonzero(~np.isfinite(g).all(axis=1))[0])
            raise GsnError(f"non-finite gradient at layer {lvl + 1}, vertex {bad}")
        theta_grads, gmid = _update_backward(stack.layers[lvl], tapes[lvl], g)
        param_grads[lvl] = theta_grads
        gbar = _subdivision_backward(tapes[lvl], gmid)
    return loss, param_grads, frozen_out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(dataset, cfg=None, w=None):
    """Full-batch AdamW over (adjusted template, point-cloud set) cases.

    Deterministic given cfg.seed: fixed initialization, fixed accumulation
    order, one optimizer step per epoch.  Returns (best-loss stack, history).
    """
    if not dataset:
        raise GsnError("empty training dataset")
    cfg = cfg or TrainConfig()
    w = w or LossWeights()
    rng = np.random.default_rng(cfg.seed)
    stack = GsnStack.initialize(rng)
    params = [a for theta in stack.layers for a in theta.arrays()]
    m1 = [np.zeros_like(a) for a in params]
    m2 = [np.zeros_like(a) for a in params]
    history = []
    best_loss = np.inf
    best = copy.deepcopy(stack)
    for epoch in range(cfg.epochs):
        loss_sum = 0.0
        grad_acc = [np.zeros_like(a) for a in params]
        for mesh, pcs in dataset:
            loss, grads, _ = backprop(stack, mesh, pcs, w)
            loss_sum += loss
            flat = [a for g in grads for a in g.arrays()]
            for acc, g in zip(grad_acc, flat):
                acc += g
        epoch_loss = loss_sum / len(dataset)
        if not np.isfinite(epoch_loss):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}",
                                   history + [epoch_loss])
        history.append(epoch_loss)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            best = copy.deepcopy(stack)
        t = epoch + 1
        for p, g, ma, va in zip(params, grad_acc, m1, m2):
            g = g / len(dataset)
            ma *= cfg.beta1
            ma += (1.0 - cfg.beta1) * g
            va *= cfg.beta2
            va += (1.0 - cfg.beta2) * g * g
            mhat = ma / (1.0 - cfg.beta1 ** t)
            vhat = va / (1.0 - cfg.beta2 ** t)
            p -= cfg.lr * (mhat / (np.sqrt(vhat) + cfg.eps) + cfg.weight_decay * p)
    return best, history


# ---------------------------------------------------------------------------
# Checkpoints: JSON header line + little-endian f32 payload, extension .gsn
# ---------------------------------------------------------------------------

def save_checkpoint(stack, path, seed=None, epoch=None, loss=None):
    header = {
        "architecture": [3, HIDDEN, HIDDEN, 3],
        "layers": len(stack.layers),
        "tensors": ["w1", "b1", "w2", "b2", "w3", "b3"],
        "seed": seed,
        "epoch": epoch,
        "loss": loss,
    }
    payload = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                       for theta in stack.layers for a in theta.arrays())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(payload)
    return path


def load_checkpoint(path):
    blob = open(path, "rb").read()
    nl = blob.find(b"\n")
    if nl < 0:
        raise GsnError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(blob[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise GsnError(f"{path}: malformed checkpoint header: {e}") from e
    shapes = [(HIDDEN, 3), (HIDDEN,), (HIDDEN, HIDDEN), (HIDDEN,), (3, HIDDEN), (3,)]
    n_per_layer = sum(int(np.prod(s)) for s in shapes)
    n_layers = int(header.get("layers", 2))
    data = np.frombuffer(blob[nl + 1:], dtype="<f4").astype(np.float64)
    if len(data) != n_per_layer * n_layers:
        raise GsnError(f"{path}: payload size mismatch")
    layers = []
    off = 0
    for _ in range(n_layers):
        vals = []
        for s in shapes:
            n = int(np.prod(s))
            vals.append(data[off:off + n].reshape(s).copy())
            off += n
        layers.append(MlpParams(*vals))
    return GsnStack(layers=layers), header
