"""A small edge-based message-passing force field.

Each directed edge carries scalar (0e) channels and vector (1o) channels.
Energies are a sum of per-edge terms read out from the last layer's scalars;
forces are the exact negative position gradient.

Layout conventions: edge vector features are stored as ``(f, 3, dim)`` so
channel mixing is a plain matrix product over the last axis.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Segments, Tensor
from .errors import NumericError, ValidationError
from .frame import Frame
from .graph import EdgeGraph, build_graph, species_pairs
from .io import atomic_write

CHECKPOINT_VERSION = 1
IRREPS = ("0e", "1o")


@dataclass
class ModelParams:
    n_species: int
    n_layers: int = 3
    dim: int = 8
    n_basis: int = 8
    r_max: float = 4.5
    cutoff_p: int = 6
    weights: dict = field(default_factory=dict)
    energy_shift: float = 0.0
    energy_scale: float = 1.0
    avg_neighbors: float = 1.0

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValidationError("n_layers must be >= 1")
        if self.dim < 1 or self.n_basis < 1:
            raise ValidationError("dim and n_basis must be >= 1")

    @property
    def n_pairs(self) -> int:
        return self.n_species * (self.n_species + 1) // 2

    def shapes(self) -> dict:
        d, k = self.dim, self.n_basis
        out = {"freq": (k,), "embed.W": (self.n_pairs + k, d), "embed.b": (d,)}
        for layer in range(1, self.n_layers + 1):
            out[f"layer{layer}.W"] = (3 * d, d)
            out[f"layer{layer}.b"] = (d,)
            out[f"layer{layer}.gate"] = (d, d)
            if layer > 1:
                out[f"layer{layer}.mix"] = (d, d)
        out["out.W"] = (d, d)
        out["out.b"] = (d,)
        out["out.w"] = (d, 1)
        return out

    def names(self) -> list:
        return list(self.shapes())

    def copy(self) -> "ModelParams":
        return ModelParams(
            n_species=self.n_species,
            n_layers=self.n_layers,
            dim=self.dim,
            n_basis=self.n_basis,
            r_max=self.r_max,
            cutoff_p=self.cutoff_p,
            weights={k: v.copy() for k, v in self.weights.items()},
            energy_shift=self.energy_shift,
            energy_scale=self.energy_scale,
            avg_neighbors=self.avg_neighbors,
        )

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.weights.values()))


def init_params(n_species, n_layers=3, dim=16, n_basis=8, r_max=4.5, cutoff_p=6, seed=0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; Bessel frequencies k*pi."""
    params = ModelParams(n_species, n_layers, dim, n_basis, r_max, cutoff_p)
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in params.shapes().items():
        if name == "freq":
            weights[name] = np.pi * np.arange(1, n_basis + 1, dtype=float)
            continue
        fan_in = shape[0] if len(shape) == 2 else params.shapes()[name.replace(".b", ".W")][0]
        bound = 1.0 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    params.weights = weights
    return params


# ---------------------------------------------------------------- batching

@dataclass
class Batch:
    """Disjoint union of several frames' graphs."""

    species: np.ndarray
    positions: np.ndarray
    src: Segments
    dst: Segments
    shift: np.ndarray
    pair_onehot: np.ndarray
    edge_frame: Segments
    atom_frame: np.ndarray
    n_atoms: np.ndarray
    edge_offsets: np.ndarray
    atom_offsets: np.ndarray

    @property
    def n_frames(self) -> int:
        return len(self.n_atoms)

    @property
    def f(self) -> int:
        return len(self.src.idx)


def pair_index(species_a, species_b, n_species: int) -> np.ndarray:
    lookup = {pair: k for k, pair in enumerate(species_pairs(n_species))}
    lo = np.minimum(species_a, species_b)
    hi = np.maximum(species_a, species_b)
    table = np.zeros((n_species + 1, n_species + 1), dtype=np.int64)
    for (a, b), k in lookup.items():
        table[a, b] = k
    return table[lo, hi]


def make_batch(frames: Sequence[Frame], graphs: Sequence[EdgeGraph], n_species: int) -> Batch:
    n_atoms = np.array([f.n_atoms for f in frames], dtype=np.int64)
    n_edges = np.array([g.f for g in graphs], dtype=np.int64)
    atom_offsets = np.concatenate([[0], np.cumsum(n_atoms)])
    edge_offsets = np.concatenate([[0], np.cumsum(n_edges)])
    total = int(atom_offsets[-1])
    if frames:
        species = np.concatenate([f.species for f in frames]).astype(np.int64)
        positions = np.concatenate([np.asarray(f.positions).reshape(-1, 3) for f in frames])
        src = np.concatenate([g.src + o for g, o in zip(graphs, atom_offsets)]).astype(np.int64)
        dst = np.concatenate([g.dst + o for g, o in zip(graphs, atom_offsets)]).astype(np.int64)
        shift = np.concatenate([g.shift.reshape(-1, 3) for g in graphs])
    else:
        species = np.zeros(0, dtype=np.int64)
        positions = np.zeros((0, 3))
        src = dst = np.zeros(0, dtype=np.int64)
        shift = np.zeros((0, 3))
    if len(species) and species.max() > n_species:
        raise ValidationError(f"species id {species.max()} exceeds model's {n_species} species")
    onehot = np.zeros((len(src), n_species * (n_species + 1) // 2))
    if len(src):
        onehot[np.arange(len(src)), pair_index(species[src], species[dst], n_species)] = 1.0
    edge_frame = np.repeat(np.arange(len(frames)), n_edges)
    return Batch(
        species=species,
        positions=positions,
        src=Segments(src, total),
        dst=Segments(dst, total),
        shift=shift,
        pair_onehot=onehot,
        edge_frame=Segments(edge_frame, len(frames)),
        atom_frame=np.repeat(np.arange(len(frames)), n_atoms),
        n_atoms=n_atoms,
        edge_offsets=edge_offsets,
        atom_offsets=atom_offsets,
    )


def batch_frames(frames: Sequence[Frame], params: "ModelParams", graphs=None) -> Batch:
    if graphs is None:
        graphs = [build_graph(f, params.r_max) for f in frames]
    return make_batch(frames, graphs, params.n_species)


# ---------------------------------------------------------------- forward

@dataclass
class LayerFeatures:
    """Per-layer features. Vectors are laid out ``(rows, 3, dim)``."""

    edge_scalar: list
    edge_vector: list
    node_scalar: list
    node_vector: list

    @property
    def n_layers(self) -> int:
        return len(self.edge_scalar)

    def numpy(self) -> "LayerFeatures":
        conv = lambda xs: [x.data if isinstance(x, Tensor) else x for x in xs]
        return LayerFeatures(
            conv(self.edge_scalar), conv(self.edge_vector),
            conv(self.node_scalar), conv(self.node_vector),
        )


def weight_tensors(params: ModelParams, requires_grad: bool = False) -> dict:
    return {k: Tensor(v, requires_grad=requires_grad) for k, v in params.weights.items()}


def _check(x: Tensor, where: str):
    if not np.all(np.isfinite(x.data)):
        raise NumericError(f"non-finite values in {where}")


def poly_cutoff(x: Tensor, p: int) -> Tensor:
    """Smooth envelope equal to 1 at x=0 and vanishing with two derivatives at x=1."""
    return ad.polynomial(x, poly_cutoff_coeffs(p))


def poly_cutoff_coeffs(p: int) -> np.ndarray:
    """Ascending-power coefficients of the cutoff envelope."""
    p = int(p)
    coeffs = np.zeros(p + 3)
    coeffs[0] = 1.0
    coeffs[p] = -(p + 1.0) * (p + 2.0) / 2.0
    coeffs[p + 1] = p * (p + 2.0)
    coeffs[p + 2] = -p * (p + 1.0) / 2.0
    return coeffs


def _stacked_matmul(parts, weight: Tensor) -> Tensor:
    """``concat(parts, -1) @ weight`` as a sum of per-block products.

    Avoids materialising the concatenation, whose second-order gradient would
    otherwise scatter into zero-padded copies of the full width.
    """
    out, start = None, 0
    for part in parts:
        width = part.shape[-1]
        term = ad.as_tensor(part) @ weight[start : start + width]
        out = term if out is None else out + term
        start += width
    return out


def forward_tensors(params: ModelParams, batch: Batch, W: dict, R: Tensor, capture: bool = False):
    """Energies per frame (Tensor [B]), per-edge energies and optional features.

    ``capture`` is False, True/"all", "edge" (edge features only) or "node".
    """
    d = params.dim
    rc = params.r_max
    norm = 1.0 / params.avg_neighbors
    src, dst = batch.src, batch.dst
    f = batch.f

    disp = ad.take(R, dst) - ad.take(R, src) + batch.shift
    dist = ad.sqrt(ad.sum_(disp * disp, axis=1, keepdims=True))  # [f,1]
    unit = disp / dist  # [f,3]

    env = poly_cutoff(dist * (1.0 / rc), params.cutoff_p)  # [f,1]
    freq = ad.reshape(W["freq"], (1, -1))
    bessel = np.sqrt(2.0 / rc) * ad.sin(dist * freq * (1.0 / rc)) / dist
    rbf = bessel * env

    x = ad.silu(_stacked_matmul([batch.pair_onehot, rbf], W["embed.W"]) + W["embed.b"]) * env
    _check(x, "embedding")
    v = None
    feats = LayerFeatures([], [], [], []) if capture else None

    for layer in range(1, params.n_layers + 1):
        # vectors: gated bond direction plus mixed neighbourhood vector difference
        gate = x @ W[f"layer{layer}.gate"]  # [f,d]
        v_new = ad.outer(gate, unit)  # [f,3,d]
        # channel mixing is linear, so it is applied per atom before gathering onto edges
        if v is not None:
            vn = (ad.scatter(v, src) * norm) @ W[f"layer{layer}.mix"]  # [n,3,d]
            v_new = v_new + (ad.take(vn, src) - ad.take(vn, dst))
        v = v_new
        # scalars: self, neighbourhood sum and the bond projection of the vectors
        Wl = W[f"layer{layer}.W"]
        h = (ad.scatter(x, src) * norm) @ Wl[d : 2 * d]  # [n,d]
        proj = ad.project(v, unit)  # [f,d]
        update = ad.silu(
            x @ Wl[:d] + (ad.take(h, src) + ad.take(h, dst)) + proj @ Wl[2 * d :] + W[f"layer{layer}.b"]
        )
        x = x + update * env
        _check(x, f"layer {layer}")
        _check(v, f"layer {layer} vectors")
        if capture:
            feats.edge_scalar.append(x)
            feats.edge_vector.append(v)
            if capture in (True, "all", "node"):
                feats.node_scalar.append(ad.scatter(x, src) * norm)
                feats.node_vector.append(ad.scatter(v, src) * norm)

    hidden = ad.silu(x @ W["out.W"] + W["out.b"])
    edge_energy = ad.reshape((hidden @ W["out.w"]) * env, (f,)) * params.energy_scale
    _check(edge_energy, "readout")
    energy = ad.scatter(edge_energy, batch.edge_frame) + params.energy_shift * batch.n_atoms.astype(float)
    return energy, edge_energy, feats


def _single_batch(params: ModelParams, frame: Frame, graph: Optional[EdgeGraph]) -> Batch:
    if graph is None:
        graph = build_graph(frame, params.r_max)
    return make_batch([frame], [graph], params.n_species)


def forward(params: ModelParams, frame: Frame, graph: Optional[EdgeGraph] = None, capture: bool = False):
    """Energy (eV), per-edge energies and, with ``capture``, the layer features."""
    batch = _single_batch(params, frame, graph)
    with ad.no_grad():
        energy, edge_energy, feats = forward_tensors(
            params, batch, weight_tensors(params), Tensor(batch.positions), capture
        )
    return float(energy.data[0]), edge_energy.data.copy(), feats.numpy() if capture else None


def energy_and_forces_batch(params: ModelParams, batch: Batch):
    R = Tensor(batch.positions, requires_grad=True)
    energy, _, _ = forward_tensors(params, batch, weight_tensors(params), R)
    (g,) = ad.grad(ad.sum_(energy), [R])
    return energy.data.copy(), -g.data


def forces(params: ModelParams, frame: Frame, graph: Optional[EdgeGraph] = None) -> np.ndarray:
    """-dE/dr for every atom, eV/A."""
    batch = _single_batch(params, frame, graph)
    return energy_and_forces_batch(params, batch)[1]


def energy_and_forces(params: ModelParams, frame: Frame, graph: Optional[EdgeGraph] = None):
    batch = _single_batch(params, frame, graph)
    e, f = energy_and_forces_batch(params, batch)
    return float(e[0]), f


def predict_batch(params: ModelParams, frames: Sequence[Frame], chunk: int = 8) -> list:
    """``[(E, F), ...]`` in input order; frames are evaluated as disjoint unions."""
    out = []
    for start in range(0, len(frames), chunk):
        part = list(frames[start : start + chunk])
        try:
            batch = batch_frames(part, params)
            energies, frc = energy_and_forces_batch(params, batch)
        except NumericError as exc:
            for k, fr in enumerate(part):
                try:
                    energy_and_forces(params, fr)
                except NumericError as inner:
                    raise NumericError(f"frame {start + k}: {inner}") from inner
            raise exc
        for k in range(len(part)):
            a, b = batch.atom_offsets[k], batch.atom_offsets[k + 1]
            out.append((float(energies[k]), frc[a:b].copy()))
    return out


@dataclass
class Outputs:
    """What a training loss sees: energies, forces and (optionally) features."""

    energy: Tensor
    forces: Tensor
    features: Optional[LayerFeatures]
    batch: Batch
    edge_energy: Tensor


def outputs_with_graph(params: ModelParams, batch: Batch, W: dict, capture: bool = True) -> Outputs:
    """Forward pass whose forces stay differentiable w.r.t. the weights ``W``."""
    R = Tensor(batch.positions, requires_grad=True)
    energy, edge_energy, feats = forward_tensors(params, batch, W, R, capture)
    (g,) = ad.grad(ad.sum_(energy), [R], create_graph=True)
    return Outputs(energy=energy, forces=-g, features=feats, batch=batch, edge_energy=edge_energy)


def grad_params(params: ModelParams, batch: Batch, loss_fn: Callable[[Outputs], Tensor], capture: bool = True):
    """Scalar loss and its gradient w.r.t. every weight.

    ``loss_fn`` maps :class:`Outputs` to a scalar Tensor; gradients flow
    through energies, forces (second order) and captured features.
    """
    W = weight_tensors(params, requires_grad=True)
    outputs = outputs_with_graph(params, batch, W, capture)
    loss = loss_fn(outputs)
    names = list(W)
    grads = ad.grad(loss, [W[k] for k in names])
    result = {}
    for k, g in zip(names, grads):
        if not np.all(np.isfinite(g.data)):
            raise NumericError(f"non-finite gradient for {k}")
        result[k] = g.data
    return float(loss.data), result, outputs


# ---------------------------------------------------------------- checkpoints

def params_to_dict(params: ModelParams) -> dict:
    return {
        "n_species": params.n_species,
        "n_layers": params.n_layers,
        "dim": params.dim,
        "n_basis": params.n_basis,
        "r_max": params.r_max,
        "cutoff_p": params.cutoff_p,
        "energy_shift": params.energy_shift,
        "energy_scale": params.energy_scale,
        "avg_neighbors": params.avg_neighbors,
        "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()} for k, v in params.weights.items()},
    }


def params_from_dict(obj: dict) -> ModelParams:
    p = ModelParams(
        n_species=int(obj["n_species"]),
        n_layers=int(obj["n_layers"]),
        dim=int(obj["dim"]),
        n_basis=int(obj["n_basis"]),
        r_max=float(obj["r_max"]),
        cutoff_p=int(obj["cutoff_p"]),
        energy_shift=float(obj["energy_shift"]),
        energy_scale=float(obj["energy_scale"]),
        avg_neighbors=float(obj["avg_neighbors"]),
    )
    p.weights = {
        k: np.array(v["data"], dtype=float).reshape(v["shape"]) for k, v in obj["weights"].items()
    }
    missing = set(p.shapes()) - set(p.weights)
    if missing:
        raise ValidationError(f"checkpoint lacks weights {sorted(missing)}")
    return p


def save_checkpoint(path, params: ModelParams, config: Optional[dict] = None, extra: Optional[dict] = None):
    blob = {
        "format": "corrstab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "params": params_to_dict(params),
        "config": config or {},
        "extra": extra or {},
    }
    atomic_write(path, json.dumps(blob))


def load_checkpoint(path):
    """Returns ``(params, config, extra)``."""
    blob = json.loads(Path(path).read_text())
    if blob.get("format") != "corrstab-checkpoint":
        raise ValidationError(f"{path} is not a corrstab checkpoint")
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint version {blob.get('version')}")
    return params_from_dict(blob["params"]), blob.get("config", {}), blob.get("extra", {})
