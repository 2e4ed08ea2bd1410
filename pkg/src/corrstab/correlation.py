"""Feature-correlation matrices and the decorrelation loss.

A layer's features are arranged as a ``[samples x dim]`` matrix; the loss
drives the matrix of absolute Pearson coefficients between its columns
toward the identity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .errors import ConfigError, NumericError, PreconditionError, ValidationError

EPS = 1e-12
EVAL_MAX_EDGES = 4096


class CorrConfig(BaseModel):
    """Which features enter the correlation loss and how many rows are sampled."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    source: Literal["edge", "node"] = "edge"
    irreps: Literal["only0e", "only1o", "both-mixed", "both-summed"] = "only1o"
    sampling: Literal["sqrt-f", "fixed"] = "sqrt-f"
    fixed_s: int = Field(1024, ge=2)
    vector_mode: Literal["components", "norm"] = "components"
    seed: int = 0


@dataclass(frozen=True)
class CorrMatrix:
    values: np.ndarray
    layer: int = 0
    n_samples: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValidationError(f"correlation matrix must be square, got {v.shape}")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def offdiag_mean(self) -> float:
        return corr_loss_layer(self)


# ---------------------------------------------------------------- sampling

def sample_size(f: int, cfg: CorrConfig) -> int:
    """Rows drawn from ``f`` candidates: ceil(sqrt(f)) or min(s, f), at least 2."""
    if f <= 0:
        return 0
    if cfg.sampling == "sqrt-f":
        r = math.isqrt(f)
        n = r if r * r == f else r + 1
    else:
        n = cfg.fixed_s
    return min(f, max(n, 2))


def sample_edges(f: int, cfg: CorrConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Sorted distinct indices drawn uniformly without replacement.

    Without an explicit ``rng`` the draw is seeded by ``cfg.seed``.
    """
    if f < 1:
        raise PreconditionError("need at least one candidate row to sample from")
    n = sample_size(f, cfg)
    if n >= f:
        return np.arange(f)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    return np.sort(rng.choice(f, size=n, replace=False))


# ---------------------------------------------------------------- Pearson

def _check_input(X: np.ndarray):
    if X.ndim != 2:
        raise ValidationError(f"feature matrix must be 2-D, got shape {X.shape}")
    if X.shape[0] < 2:
        raise PreconditionError(f"need at least 2 samples, got {X.shape[0]}")
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite values in feature matrix")


def _pearson_parts(X: np.ndarray):
    Xc = X - X.mean(axis=0)
    Xc[:, np.ptp(X, axis=0) == 0] = 0.0  # constant columns: exact zero, not rounding residue
    cov = Xc.T @ Xc / X.shape[0]
    sd = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    denom = np.outer(sd, sd) + EPS
    C = np.abs(cov) / denom
    np.fill_diagonal(C, 1.0)
    return C, Xc, cov, sd, denom


def pearson_abs(X, layer: int = 0) -> CorrMatrix:
    """|Pearson| between columns of ``X`` (population statistics).

    Zero-variance columns get 0 off-diagonal entries; the diagonal is 1.
    """
    X = np.asarray(X, dtype=float)
    _check_input(X)
    C = _pearson_parts(X)[0]
    return CorrMatrix(np.clip(C, 0.0, 1.0), layer=layer, n_samples=X.shape[0])


def pearson_abs_tensor(X: Tensor) -> Tensor:
    """Differentiable |Pearson| matrix; the constant diagonal carries no gradient.

    The backward pass is hand-written (first order only). Clipping to
    [0, 1] is left out here so the gradient stays exact; the value differs
    from :func:`pearson_abs` only by rounding.
    """
    _check_input(X.data)
    C, Xc, cov, sd, denom = _pearson_parts(X.data)
    s = X.shape[0]

    def vjp(g, need):
        if ad._state["record"]:
            raise NotImplementedError("second derivatives of the correlation are not supported")
        G = np.array(g.data, dtype=float)
        np.fill_diagonal(G, 0.0)
        gcov = G * np.sign(cov) / denom
        M = G * np.abs(cov) / denom**2
        gsd = -(M + M.T) @ sd
        safe = sd > 0
        diag = np.zeros_like(sd)
        diag[safe] = gsd[safe] / (2.0 * sd[safe])
        gcov[np.diag_indices_from(gcov)] += diag
        gXc = Xc @ (gcov + gcov.T) / s
        return (Tensor(gXc - gXc.mean(axis=0)),)

    return ad._node(C, (X,), vjp)


def corr_loss_layer(C) -> float:
    """sum |C - I| / (dim (dim - 1))."""
    values = C.values if isinstance(C, CorrMatrix) else np.asarray(C, dtype=float)
    dim = values.shape[0]
    if dim < 2:
        raise PreconditionError("correlation loss needs dim >= 2")
    return float(np.abs(values - np.eye(dim)).sum() / (dim * (dim - 1)))


def corr_loss_layer_tensor(C: Tensor) -> Tensor:
    dim = C.shape[0]
    if dim < 2:
        raise PreconditionError("correlation loss needs dim >= 2")
    mask = 1.0 - np.eye(dim)
    return ad.sum_(C * mask) * (1.0 / (dim * (dim - 1)))


def corr_loss_total(per_layer: Sequence) -> float:
    return float(sum(float(x) for x in per_layer))


# ---------------------------------------------------------------- feature selection

def _rows(x, idx):
    x = ad.as_tensor(x)
    return ad.take(x, Segments(idx, x.shape[0]))


def _vector_block(v: Tensor, cfg: CorrConfig) -> Tensor:
    """``[rows, 3, d]`` -> ``[3 rows, d]`` (components stacked) or ``[rows, d]`` norms."""
    rows, _, d = v.shape
    if cfg.vector_mode == "norm":
        return ad.sqrt(ad.sum_(v * v, axis=1) + EPS**2)
    return ad.reshape(v, (3 * rows, d))


def layer_blocks(scalar, vector, idx, cfg: CorrConfig) -> list:
    """Matrices whose losses are summed for one layer (one block unless both-summed)."""
    if cfg.irreps in ("only1o", "both-mixed", "both-summed") and vector is None:
        raise ConfigError(f"irreps={cfg.irreps} needs vector (1o) features, which the model lacks")
    if cfg.irreps == "only0e":
        return [_rows(scalar, idx)]
    vec = _rows(vector, idx)
    if cfg.irreps == "only1o":
        return [_vector_block(vec, cfg)]
    sca = _rows(scalar, idx)
    if cfg.irreps == "both-summed":
        return [sca, _vector_block(vec, cfg)]
    rows, _, d = vec.shape
    if cfg.vector_mode == "norm":
        flat = _vector_block(vec, cfg)
    else:
        flat = ad.reshape(vec, (rows, 3 * d))
    return [ad.concat([sca, flat], axis=1)]


def select_features(layers, cfg: CorrConfig, idx=None, rng=None) -> list:
    """Per-layer lists of ``[rows x dim']`` blocks for the chosen source and irreps.

    ``layers`` is a :class:`~corrstab.model.LayerFeatures`. ``idx`` are the
    sampled edge (or atom) indices; when omitted they are drawn with
    :func:`sample_edges`. Returns ``(blocks_per_layer, idx)``.
    """
    if cfg.source == "edge":
        scalars, vectors = layers.edge_scalar, layers.edge_vector
    else:
        scalars, vectors = layers.node_scalar, layers.node_vector
    if not scalars:
        raise ConfigError(f"no {cfg.source} features were captured")
    if idx is None:
        idx = sample_edges(scalars[0].shape[0], cfg, rng)
    blocks = []
    for k, sca in enumerate(scalars):
        vec = vectors[k] if k < len(vectors) else None
        blocks.append(layer_blocks(sca, vec, idx, cfg))
    return blocks, idx


def corr_loss_tensor(blocks_per_layer) -> Tensor:
    """Differentiable total loss: sum over layers and blocks."""
    total = None
    for blocks in blocks_per_layer:
        for X in blocks:
            term = corr_loss_layer_tensor(pearson_abs_tensor(ad.as_tensor(X)))
            total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def corr_losses(blocks_per_layer) -> list:
    """Per-layer loss values (blocks of a layer are summed)."""
    out = []
    for blocks in blocks_per_layer:
        out.append(sum(corr_loss_layer(pearson_abs(ad.as_tensor(X).data)) for X in blocks))
    return out


# ---------------------------------------------------------------- dataset value

@dataclass
class DatasetCorr:
    """Frame-averaged last-layer correlation and its off-diagonal mean."""

    value: float
    matrices: list
    n_frames: int
    n_samples: list

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "n_frames": self.n_frames,
            "n_samples": self.n_samples,
            "matrices": [m.values.tolist() for m in self.matrices],
        }


def eval_indices(f: int, cfg: CorrConfig) -> np.ndarray:
    """All rows when ``f`` is at most 4096, otherwise a seeded draw of 4096."""
    if f <= EVAL_MAX_EDGES:
        return np.arange(f)
    return sample_edges(f, cfg.model_copy(update={"sampling": "fixed", "fixed_s": EVAL_MAX_EDGES}))


def frame_last_layer_corr(feats, cfg: CorrConfig) -> list:
    """|Pearson| matrices of the last layer for one frame (one per block)."""
    if cfg.source == "edge":
        n_rows = feats.edge_scalar[-1].shape[0]
    else:
        n_rows = feats.node_scalar[-1].shape[0]
    idx = eval_indices(n_rows, cfg)
    if cfg.source == "edge":
        sca, vec = feats.edge_scalar[-1], feats.edge_vector[-1]
    else:
        sca, vec = feats.node_scalar[-1], feats.node_vector[-1]
    with ad.no_grad():
        blocks = layer_blocks(sca, vec, idx, cfg)
    return [pearson_abs(b.data) for b in blocks]


def dataset_corr_value(params, ds, cfg: CorrConfig) -> DatasetCorr:
    """Mean over frames of the last layer's |Pearson| matrix, reduced to its
    mean absolute off-diagonal (summed over blocks for both-summed)."""
    from .model import forward

    frames = list(ds)
    if not frames:
        raise ValidationError("dataset_corr_value needs at least one frame")
    capture = "edge" if cfg.source == "edge" else "node"
    sums = None
    n_samples = None
    for frame in frames:
        _, _, feats = forward(params, frame, capture=capture)
        mats = frame_last_layer_corr(feats, cfg)
        if sums is None:
            sums = [m.values.copy() for m in mats]
            n_samples = [m.n_samples for m in mats]
        else:
            for acc, m in zip(sums, mats):
                acc += m.values
    layer = params.n_layers
    means = [CorrMatrix(acc / len(frames), layer=layer, n_samples=n) for acc, n in zip(sums, n_samples)]
    value = float(sum(corr_loss_layer(m) for m in means))
    return DatasetCorr(value=value, matrices=means, n_frames=len(frames), n_samples=n_samples)
