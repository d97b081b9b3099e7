"""Experiment registry and runner.

Every random quantity in a run is drawn from one seeded generator, in the
order the builder below lists them. Outputs per run: ``trace.csv``,
``metrics.csv``, SVG plots and ``metadata.json`` (the only file carrying
wall-clock time).
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .alignment import (
    AlignedBasis,
    aligned_init,
    find_condition,
    rank1_aligned_init,
    strong_alignment_monitor,
)
from .fastdyn import admissible_sigmas
from .mnist import find_mnist, load_idx_images, load_mnist, select_separable_subset
from .network import Dataset, TrainConfig, TrainTrace, train
from .reports import atomic_write, emit_csv, emit_metrics, emit_trace_svgs
from .rng import Generator, rng
from .structured import (
    StructuredLayer,
    conv_basis,
    pinv_alignment_check,
    toeplitz_basis,
    train_structured,
)

U64_MAX = (1 << 64) - 1
FIG2B_INPUT_SCALE = 0.3
FIG2B_TOP_DIRECTIONS = 32
MNIST_SUBSET = 256
LOGISTIC_POINTS = 20


@dataclass
class ExperimentSpec:
    name: str
    seed: int = 0
    steps: Optional[int] = None
    lr: float = 1e-2
    loss_stop: float = 1e-4
    data_path: Optional[str] = None
    out_dir: Optional[str] = None
    record_every: Optional[int] = None

    def __post_init__(self):
        if self.name not in REGISTRY:
            raise ValueError(f"unknown experiment {self.name!r}; known: {', '.join(REGISTRY)}")
        if not 0 <= int(self.seed) <= U64_MAX:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.loss_stop < 0:
            raise ValueError("loss_stop must be nonnegative")


@dataclass
class Prepared:
    """What a builder hands back: how to train, plus extra metrics and notes."""

    train: Callable[[TrainConfig], TrainTrace]
    metrics: Callable[[TrainTrace], dict] = lambda trace: {}
    notes: dict = field(default_factory=dict)
    max_rank: Optional[int] = None
    snapshots: bool = False


@dataclass
class Experiment:
    name: str
    description: str
    default_steps: int
    record_every: int
    build: Callable[[ExperimentSpec, Generator], Prepared]


@dataclass
class RunReport:
    trace: TrainTrace
    metadata: dict
    metrics: dict
    files: list = field(default_factory=list)


# -- shared pieces -----------------------------------------------------------------

def random_aligned_net(gen: Generator, dims) -> tuple[AlignedBasis, object]:
    """Haar ``Q_0..Q_d``, then per layer singular values uniform in [0.5, 1] sorted descending."""
    basis = AlignedBasis(tuple(gen.orthonormal(k) for k in dims))
    sigmas = [np.sort(gen.uniforms(min(dims[i], dims[i + 1]), low=0.5, high=1.0))[::-1]
              for i in range(len(dims) - 1)]
    return basis, aligned_init(basis, sigmas)


def synthetic_image(gen: Generator, side: int = 28) -> np.ndarray:
    """Two Gaussian bumps: per bump centre (row, col), width, amplitude."""
    ii, jj = np.indices((side, side))
    img = np.zeros((side, side))
    lo, hi = side * 6 / 28, side * 22 / 28
    for _ in range(2):
        ci, cj = gen.uniforms(2, low=lo, high=hi)
        width = gen.uniforms(1, low=2.0, high=5.0)[0]
        amp = gen.uniforms(1, low=0.5, high=1.0)[0]
        img += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * width * width))
    return img


def fig2a_problem(gen: Generator, k: int = 4, depth: int = 3, init_scale: float = 0.3):
    """``Y`` (k x k standard normal) then each layer's ``2k-1`` coefficients, ``init_scale`` * normal."""
    y = gen.normals(k, k)
    structure = toeplitz_basis(k)
    coeffs = [gen.normals(structure.r) * init_scale for _ in range(depth)]
    return structure, y, coeffs


def fig2b_filters(gen: Generator, depth: int = 3, centre: float = 0.8, noise: float = 0.1):
    out = []
    for _ in range(depth):
        c = gen.normals(9) * noise
        c[4] += centre
        out.append(c)
    return out


def _adjacent_summary(trace: TrainTrace) -> dict:
    if not trace.adjacent or not trace.adjacent[0]:
        return {}
    mins = [min(row) for row in trace.adjacent]
    first = next((s for s, m in zip(trace.steps, mins) if m < 1 - 1e-3), -1)
    return {
        "adjacent_min_start": mins[0],
        "adjacent_min_end": mins[-1],
        "adjacent_min_overall": min(mins),
        "first_step_adjacent_below_0.999": first,
    }


# -- builders ---------------------------------------------------------------------

def _build_fig1a(spec, gen):
    x = gen.normals(9, 9)
    y = gen.normals(9, 9)
    _, net = random_aligned_net(gen, [9, 9, 9, 9])
    data = Dataset(x, y)
    return Prepared(train=lambda cfg: train(net, data, cfg, "mse"),
                    notes={"dims": [9, 9, 9, 9], "loss": "mse"})


def _mnist_dataset(spec) -> tuple[Dataset, dict]:
    images_path, labels_path = find_mnist(spec.data_path)
    images, labels = load_mnist(images_path, labels_path)
    sub = select_separable_subset(images, labels, MNIST_SUBSET, spec.seed)
    notes = {"label_encoding": "one-hot, argmax-separable by least squares with bias",
             "subset_requested": sub.requested, "subset_achieved": sub.achieved}
    return sub.dataset, notes


def _build_mnist(loss_kind):
    def build(spec, gen):
        data, notes = _mnist_dataset(spec)
        dims = [data.x.shape[0], 1024, 64, data.y.shape[0]]
        _, net = random_aligned_net(gen, dims)
        notes.update({"dims": dims, "loss": loss_kind})
        return Prepared(train=lambda cfg: train(net, data, cfg, loss_kind), notes=notes)
    return build


def _build_fig2a(spec, gen):
    structure, y, coeffs = fig2a_problem(gen)
    data = Dataset(np.eye(structure.shape[0]), y)
    layers = [StructuredLayer(structure, c) for c in coeffs]

    def metrics(trace):
        rep = pinv_alignment_check(trace.final_net, data)
        return {"pinv_output_score": rep.output_score.value, "pinv_input_score": rep.input_score.value,
                "pinv_residual": rep.residual}

    return Prepared(train=lambda cfg: train_structured(layers, data, cfg, "mse"), metrics=metrics,
                    notes={"structure": "toeplitz", "k": 4, "r": structure.r, "depth": 3,
                           "init": "coefficients 0.3 * standard normal"})


def _build_fig2b(spec, gen):
    source = "synthetic"
    if spec.data_path:
        images_path, _ = find_mnist(spec.data_path)
        img = load_idx_images(images_path)[:, 0].reshape(28, 28)
        source = f"mnist:{images_path.name}[0]"
    else:
        img = synthetic_image(gen)
    x = (FIG2B_INPUT_SCALE * img).reshape(-1, 1)
    structure = conv_basis(28, 3)
    layers = [StructuredLayer(structure, c) for c in fig2b_filters(gen)]
    data = Dataset(x, x)
    return Prepared(train=lambda cfg: train_structured(layers, data, cfg, "mse"),
                    max_rank=FIG2B_TOP_DIRECTIONS,
                    notes={"image": source, "input_scale": FIG2B_INPUT_SCALE,
                           "scored_directions": FIG2B_TOP_DIRECTIONS,
                           "init": "filters 0.8 * centre delta + 0.1 * standard normal"})


def _build_condition_demo(spec, gen):
    x = gen.normals(6, 10)
    cond = find_condition(x, x, 6)
    if cond is None:
        raise RuntimeError("autoencoding data failed the alignment condition")
    interior = [gen.orthonormal(6) for _ in range(2)]
    basis = AlignedBasis.from_condition(cond, [6, 6, 6, 6], interior)
    net = aligned_init(basis, list(admissible_sigmas(cond.lambda_, cond.lambda_prime, 3)))
    data = Dataset(x, x)

    def metrics(trace):
        rep = strong_alignment_monitor(trace, basis, tol=1e-8)
        return {"monitor_worst": rep.worst, "monitor_first_flag": -1 if rep.first_flag is None else rep.first_flag}

    return Prepared(train=lambda cfg: train(net, data, cfg, "mse"), metrics=metrics, snapshots=True,
                    notes={"dims": [6, 6, 6, 6], "problem": "autoencoding", "n": 10})


def separable_points(gen: Generator, count: int = LOGISTIC_POINTS, margin: float = 0.2):
    """Direction ``w``, then points redrawn until ``|w . p| >= margin``; labels ``sign(w . p)``."""
    w = gen.normals(2)
    w /= np.linalg.norm(w)
    pts = []
    while len(pts) < count:
        p = gen.normals(2)
        if abs(w @ p) >= margin:
            pts.append(p)
    x = np.array(pts).T
    return x, np.sign(w @ x).reshape(1, -1)


def _build_rank1(spec, gen):
    x, y = separable_points(gen)
    dims = [2, 4, 4, 1]
    net = rank1_aligned_init(dims, scale=0.5, gen=gen)
    data = Dataset(x, y)
    return Prepared(train=lambda cfg: train(net, data, cfg, "logistic"),
                    notes={"dims": dims, "loss": "logistic", "points": LOGISTIC_POINTS})


REGISTRY: dict[str, Experiment] = {
    "fig1a": Experiment("fig1a", "random 9x9 regression, 2 hidden layers, aligned init, MSE",
                        200000, 100, _build_fig1a),
    "fig1b": Experiment("fig1b", "256 separable MNIST digits, 784-1024-64-10, MSE",
                        20000, 500, _build_mnist("mse")),
    "fig1c": Experiment("fig1c", "256 separable MNIST digits, 784-1024-64-10, cross-entropy",
                        20000, 500, _build_mnist("xent")),
    "fig2a": Experiment("fig2a", "Toeplitz 4x4 layers, depth 3, factorize a random matrix",
                        300000, 1000, _build_fig2a),
    "fig2b": Experiment("fig2b", "3x3 convolutional autoencoder on one 28x28 image",
                        20000, 1000, _build_fig2b),
    "condition-demo": Experiment("condition-demo", "autoencoding 6x10 data from a condition-satisfying init",
                                 20000, 10, _build_condition_demo),
    "rank1-demo": Experiment("rank1-demo", "rank-one aligned init, logistic loss on separable 2-d points",
                             2000, 10, _build_rank1),
}


def run(spec: ExperimentSpec) -> RunReport:
    exp = REGISTRY[spec.name]
    prep = exp.build(spec, rng(spec.seed))
    config = TrainConfig(
        learning_rate=spec.lr,
        max_steps=spec.steps or exp.default_steps,
        loss_stop=spec.loss_stop,
        record_every=spec.record_every or exp.record_every,
        max_rank=prep.max_rank,
        keep_snapshots=prep.snapshots,
    )
    t0 = time.perf_counter()
    trace = prep.train(config)
    wall = time.perf_counter() - t0

    metrics = {
        "final_step": trace.steps[-1],
        "final_loss": trace.losses[-1],
        "converged": int(trace.converged),
    }
    metrics.update(_adjacent_summary(trace))
    metrics.update(prep.metrics(trace))
    metadata = {
        "experiment": spec.name,
        "description": exp.description,
        "spec": asdict(spec),
        "config": {k: v for k, v in asdict(config).items()},
        "converged": trace.converged,
        "wall_seconds": wall,
        "notes": prep.notes,
    }
    report = RunReport(trace=trace, metadata=metadata, metrics=metrics)
    if spec.out_dir:
        out = Path(spec.out_dir)
        report.files.append(emit_csv(trace, out / "trace.csv"))
        report.files.append(emit_metrics(metrics, out / "metrics.csv"))
        report.files.extend(emit_trace_svgs(trace, out))
        meta = dict(metadata, files=[p.name for p in report.files] + ["metadata.json"])
        report.files.append(atomic_write(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n"))
    return report
