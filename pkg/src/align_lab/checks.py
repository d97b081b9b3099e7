"""Acceptance checks: one function per criterion, each timed against its budget.

Every check builds its problems from a fixed seed so results are
reproducible run to run.
"""

from __future__ import annotations

import functools
import shutil
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .alignment import (
    AlignedBasis,
    aligned_init,
    check_sensing_condition,
    find_condition,
    strong_alignment_monitor,
)
from .experiments import (
    REGISTRY,
    ExperimentSpec,
    fig2a_problem,
    random_aligned_net,
    run,
)
from .fastdyn import (
    SvState,
    admissible_sigmas,
    convergence_certificate,
    equivalence_check,
    lr_bound,
    reduced_loss,
    sv_trajectory,
)
from .linalg import layer_adjacent_scores
from .minnorm import min_norm_factorization, norm_lower_bound_check
from .mnist import IMAGES_MAGIC, LABELS_MAGIC
from .network import (
    Dataset,
    LinearNetwork,
    SensingData,
    TrainConfig,
    gd_step,
    loss_and_gradients,
    loss_value,
    train,
)
from .rng import Generator, rng
from .structured import (
    Feasibility,
    StructuredLayer,
    conv_basis,
    feasibility,
    pinv_alignment_check,
    projected_matrix_step,
    structured_gd_step,
    toeplitz_basis,
    train_structured_batch,
)

MISALIGNED = 1 - 1e-3
# loss values below this are float noise; strict decrease is only required above it
DECREASE_FLOOR = 1e-20

# which filter tap (1-based) fills each entry of the 3x3-filter operator on a 3x3 image; 0 = structural zero
CONV_GOLDEN = np.array([
    [5, 4, 0, 2, 1, 0, 0, 0, 0],
    [6, 5, 4, 3, 2, 1, 0, 0, 0],
    [0, 6, 5, 0, 3, 2, 0, 0, 0],
    [8, 7, 0, 5, 4, 0, 2, 1, 0],
    [9, 8, 7, 6, 5, 4, 3, 2, 1],
    [0, 9, 8, 0, 6, 5, 0, 3, 2],
    [0, 0, 0, 8, 7, 0, 5, 4, 0],
    [0, 0, 0, 9, 8, 7, 6, 5, 4],
    [0, 0, 0, 0, 9, 8, 0, 6, 5],
])


@dataclass
class CheckResult:
    id: int
    name: str
    passed: bool
    detail: str
    seconds: float
    limit: float | None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        budget = f" (limit {self.limit:g}s)" if self.limit else ""
        return f"[{status}] {self.id:2d} {self.name}: {self.detail} [{self.seconds:.2f}s{budget}]"


def _timed(cid: int, name: str, limit, fn: Callable[[], tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    secs = time.perf_counter() - t0
    if limit is not None and secs > limit:
        ok, detail = False, f"{detail}; over time budget"
    return CheckResult(cid, name, bool(ok), detail, secs, limit)


# -- problem builders -------------------------------------------------------------

def condition_problem(x, y, r: int, gen: Generator, depth: int = 3, fraction: float = 0.9):
    """Aligned init from the data condition with random interior bases and ``gamma = lr_bound``."""
    cond = find_condition(x, y, r)
    if cond is None:
        raise RuntimeError("data do not satisfy the alignment condition")
    dims = [x.shape[0]] + [r] * (depth - 1) + [y.shape[0]]
    basis = AlignedBasis.from_condition(cond, dims, [gen.orthonormal(k) for k in dims[1:-1]])
    sigmas = admissible_sigmas(cond.lambda_, cond.lambda_prime, depth, fraction)
    gamma = lr_bound(sigmas, cond.lambda_, cond.lambda_prime, x.shape[1], depth)
    return cond, basis, sigmas, gamma


def spread_matrix(gen: Generator, k: int, low: float = 0.5, high: float = 1.5) -> np.ndarray:
    """Haar ``U``, singular values uniform in [low, high] sorted descending, Haar ``V``."""
    u = gen.orthonormal(k)
    s = np.sort(gen.uniforms(k, low=low, high=high))[::-1]
    return u @ np.diag(s) @ gen.orthonormal(k).T


def sensing_problem(gen: Generator, k: int = 4, count: int = 8, depth: int = 3, fraction: float = 0.9):
    """Sensors sharing singular vectors, a realizable target and an aligned init.

    Returns ``(basis, net, data, gamma)``. The step size is the inverse of
    the largest curvature ``d * lambda_max(H) * max|D|^(2 - 2/d)`` where ``H``
    is the Gram matrix of the sensors' diagonals and ``D`` the target's.
    """
    u, v = gen.orthonormal(k), gen.orthonormal(k)
    sensors = [u @ np.diag(gen.normals(k)) @ v.T for _ in range(count)]
    target = u @ np.diag(np.sort(gen.uniforms(k, low=1.0, high=2.0))[::-1]) @ v.T
    obs = np.array([np.sum(m * target) for m in sensors])
    found = check_sensing_condition(sensors)
    if found is None:
        raise RuntimeError("sensors share no singular basis")
    su, sv = found
    dstar = np.diag(su.T @ target @ sv)
    s0 = np.sign(dstar) * np.abs(fraction * dstar) ** (1.0 / depth)
    basis = AlignedBasis(tuple([sv] + [gen.orthonormal(k) for _ in range(depth - 1)] + [su]))
    diags = np.array([np.diag(su.T @ m @ sv) for m in sensors])
    h = diags.T @ diags / count
    gamma = 1.0 / (depth * np.linalg.eigvalsh(h).max() * np.abs(dstar).max() ** (2 - 2 / depth))
    return basis, aligned_init(basis, [s0] * depth), SensingData(tuple(sensors), obs), gamma


# -- alignment ----------------------------------------------------------------------

def _invariance_run(basis, net, data, gamma, kind, steps=1000):
    cfg = TrainConfig(learning_rate=gamma, max_steps=steps, loss_stop=0.0, record_every=1,
                      keep_snapshots=True, measure=False)
    trace = train(net, data, cfg, kind)
    rep = strong_alignment_monitor(trace, basis, tol=1e-8)
    return rep.worst, trace.losses[-1]


def _invariance_check(cid, name, build):
    def body():
        basis, net, data, gamma, kind = build()
        worst, loss = _invariance_run(basis, net, data, gamma, kind)
        ok = worst >= 1 - 1e-8 and loss <= 1e-10
        return ok, f"worst score {worst:.16f}, final loss {loss:.3e}"
    return _timed(cid, name, 5.0, body)


def check_invariance_autoencoding() -> CheckResult:
    def build():
        gen = rng(101)
        x = gen.normals(6, 10)
        _, basis, sigmas, gamma = condition_problem(x, x, 6, gen)
        return basis, aligned_init(basis, list(sigmas)), Dataset(x, x), gamma, "mse"
    return _invariance_check(1, "invariance/autoencoding", build)


def check_invariance_factorization() -> CheckResult:
    def build():
        gen = rng(102)
        x, y = np.eye(4), spread_matrix(gen, 4)
        _, basis, sigmas, gamma = condition_problem(x, y, 4, gen)
        return basis, aligned_init(basis, list(sigmas)), Dataset(x, y), gamma, "mse"
    return _invariance_check(1, "invariance/factorization", build)


def check_invariance_sensing() -> CheckResult:
    def build():
        basis, net, data, gamma = sensing_problem(rng(103))
        return basis, net, data, gamma, "sensing"
    return _invariance_check(1, "invariance/sensing", build)


def fig1a_breaks_alignment(seed: int, gamma: float = 1e-2, every: int = 10, cap: int = 500000) -> bool:
    """True when some adjacent score drops below ``1 - 1e-3`` before the loss reaches 1e-4."""
    gen = rng(seed)
    x, y = gen.normals(9, 9), gen.normals(9, 9)
    _, net = random_aligned_net(gen, [9, 9, 9, 9])
    data = Dataset(x, y)
    for step in range(cap + 1):
        if step % every == 0:
            if loss_value(net, data) <= 1e-4:
                return False
            if min(s.value for s in layer_adjacent_scores(net)) < MISALIGNED:
                return True
        net = gd_step(net, data, gamma)
    return False


def check_fig1a_misalignment(seeds: int = 100) -> CheckResult:
    def body():
        hits = sum(fig1a_breaks_alignment(s) for s in range(seeds))
        return hits >= 95, f"{hits}/{seeds} seeds lose alignment before convergence"
    return _timed(2, "fig1a misalignment", 60.0, body)


def check_logistic_rank1() -> CheckResult:
    def body():
        rep = run(ExperimentSpec("rank1-demo", seed=0, steps=2000, loss_stop=0.0, record_every=1))
        trace = rep.trace
        worst = trace.min_adjacent()
        monotone = all(b < a for a, b in zip(trace.losses, trace.losses[1:]))
        ok = worst >= 1 - 1e-8 and monotone and len(trace.steps) == 2001
        return ok, f"worst adjacent {worst:.16f}, strictly decreasing loss: {monotone}"
    return _timed(11, "logistic rank-one", 5.0, body)


# -- fastdyn --------------------------------------------------------------------------

def equivalence_instance(i: int):
    """Instance ``i``: depth 2..4 and rank 1..5, alternating autoencoding and factorization."""
    gen = rng(3000 + i)
    depth = 2 + i % 3
    r = 1 + (i // 3) % 5
    if i % 2 == 0:
        x = gen.normals(r, r + 3)
        y = x
    else:
        x, y = np.eye(r), spread_matrix(gen, r)
    cond, basis, sigmas, gamma = condition_problem(x, y, r, gen, depth=depth)
    return cond, basis, sigmas, gamma, Dataset(x, y)


def check_sv_equivalence(instances: int = 20, steps: int = 500) -> CheckResult:
    def body():
        worst = 0.0
        for i in range(instances):
            cond, basis, sigmas, gamma, data = equivalence_instance(i)
            worst = max(worst, equivalence_check(cond, basis, sigmas, gamma, steps, data))
        return worst <= 1e-8, f"max deviation {worst:.3e} over {instances} instances"
    return _timed(3, "full GD vs singular-value dynamics", 10.0, body)


def certificate_instance(i: int) -> SvState:
    """Random depth 2..5, rank 1..4, positive spectra, products below target, ``gamma = lr_bound``."""
    gen = rng(4000 + i)
    d = 2 + i % 4
    r = 1 + (i // 4) % 4
    lam = gen.uniforms(r, low=0.2, high=2.0)
    lp = gen.uniforms(r, low=0.2, high=2.0)
    target = lp / lam
    frac = gen.uniforms(r, low=0.05, high=0.95)
    # per-layer split of the product: random positive weights summing to 1
    w = gen.uniforms(d, r, low=0.5, high=1.5)
    w /= w.sum(axis=0)
    sigmas = (frac * target)[None, :] ** w
    n = 1 + i % 7
    gamma = lr_bound(sigmas, lam, lp, n, d)
    return SvState(sigmas, lp, lam, gamma / n)


def check_certificate(instances: int = 100, steps: int = 300) -> CheckResult:
    def body():
        checked, bad = 0, []
        for i in range(instances):
            state = certificate_instance(i)
            traj = sv_trajectory(state, steps)
            rep = convergence_certificate(traj)
            losses = [reduced_loss(s) for s in traj.states]
            strict = all(b < a for a, b in zip(losses, losses[1:]) if a > DECREASE_FLOOR)
            checked += rep.checked
            if not (rep.products_bounded and rep.monotone and strict):
                bad.append(i)
        detail = f"{checked} (k, t) envelope checks, {instances - len(bad)}/{instances} with strict loss decrease"
        return not bad, detail
    return _timed(4, "convergence certificate", 10.0, body)


# -- network ---------------------------------------------------------------------------

def _fd_rel_error(net: LinearNetwork, data, kind: str, h: float = 1e-6) -> float:
    _, grads = loss_and_gradients(net, data, kind)
    num, den = 0.0, 0.0
    for i, w in enumerate(net.layers):
        fd = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            up, dn = w.copy(), w.copy()
            up[idx] += h
            dn[idx] -= h
            lu = loss_value(LinearNetwork(net.layers[:i] + (up,) + net.layers[i + 1:]), data, kind)
            ld = loss_value(LinearNetwork(net.layers[:i] + (dn,) + net.layers[i + 1:]), data, kind)
            fd[idx] = (lu - ld) / (2 * h)
        num = max(num, float(np.max(np.abs(fd - grads[i]))))
        den = max(den, float(np.max(np.abs(grads[i]))))
    return num / max(den, np.finfo(float).tiny)


def gradient_instance(i: int):
    """Small random network and data for loss kind ``i % 3`` (mse, xent, sensing)."""
    gen = rng(5000 + i)
    kind = ("mse", "xent", "sensing")[i % 3]
    depth = 2 + i % 2
    if kind == "sensing":
        k = 3
        dims = [k] + [3] * (depth - 1) + [k]
        data = SensingData(tuple(gen.normals(k, k) for _ in range(5)), gen.normals(5))
    else:
        dims = [3] + [4] * (depth - 1) + [3]
        n = 6
        x = gen.normals(dims[0], n)
        if kind == "mse":
            y = gen.normals(dims[-1], n)
        else:
            y = np.zeros((dims[-1], n))
            y[[gen.integers(dims[-1]) for _ in range(n)], np.arange(n)] = 1.0
        data = Dataset(x, y)
    net = LinearNetwork(tuple(gen.normals(dims[j + 1], dims[j]) * 0.7 for j in range(depth)))
    return net, data, kind


def check_finite_differences(instances: int = 50) -> CheckResult:
    def body():
        worst = {"mse": 0.0, "xent": 0.0, "sensing": 0.0}
        for i in range(instances):
            net, data, kind = gradient_instance(i)
            worst[kind] = max(worst[kind], _fd_rel_error(net, data, kind))
        ok = max(worst.values()) <= 1e-6
        return ok, ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    return _timed(5, "finite-difference gradients", 10.0, body)


# -- structured --------------------------------------------------------------------------

def _path_deviation(structure, kind: str, gen: Generator, depth: int = 3, steps: int = 100,
                    gamma: float = 1e-2) -> float:
    k = structure.shape[0]
    n = 5
    x = gen.normals(k, n)
    if kind == "mse":
        y = gen.normals(k, n)
    else:
        y = np.zeros((k, n))
        y[[gen.integers(k) for _ in range(n)], np.arange(n)] = 1.0
    data = Dataset(x, y)
    layers = [StructuredLayer(structure, gen.normals(structure.r) * 0.5) for _ in range(depth)]
    weights = [layer.materialize() for layer in layers]
    structures = [structure] * depth
    worst = 0.0
    for _ in range(steps):
        layers = structured_gd_step(layers, data, gamma, kind)
        weights = projected_matrix_step(weights, structures, data, gamma, kind)
        for layer, w in zip(layers, weights):
            worst = max(worst, float(np.max(np.abs(layer.materialize() - w))))
    return worst


def check_projection_paths() -> CheckResult:
    def body():
        parts, worst = [], 0.0
        for label, structure in (("toeplitz4", toeplitz_basis(4)), ("conv3x3", conv_basis(3, 3))):
            for j, kind in enumerate(("mse", "xent")):
                dev = _path_deviation(structure, kind, rng(6000 + 10 * len(parts) + j))
                worst = max(worst, dev)
                parts.append(f"{label}/{kind} {dev:.1e}")
        return worst <= 1e-12, ", ".join(parts)
    return _timed(6, "coefficient vs projected paths", 10.0, body)


def check_conv_golden() -> CheckResult:
    def body():
        s = conv_basis(3, 3)
        got = np.zeros(s.shape, dtype=int)
        for j in range(s.r):
            mask = s.basis[j] != 0
            got[mask] = j + 1
        ok = np.array_equal(got, CONV_GOLDEN) and s.r == 9
        return ok, "9x9 pattern matches" if ok else f"pattern differs:\n{got}"
    return _timed(7, "convolution golden matrix", None, body)


def fig2a_batch(seeds: int = 100, gamma: float = 1e-2, cap: int = 1_000_000):
    structure = toeplitz_basis(4)
    ys, coeffs = [], [[], [], []]
    for s in range(seeds):
        _, y, cs = fig2a_problem(rng(s))
        ys.append(y)
        for i in range(3):
            coeffs[i].append(cs[i])
    xs = np.broadcast_to(np.eye(4), (seeds, 4, 4))
    res = train_structured_batch([structure] * 3, [np.array(c) for c in coeffs], xs, np.array(ys),
                                 gamma, cap, 1e-4)
    return structure, np.array(ys), res


def check_toeplitz_misalignment(seeds: int = 100) -> CheckResult:
    def body():
        structure, ys, res = fig2a_batch(seeds)
        hits, converged = 0, int(np.sum(res.converged))
        for b in range(seeds):
            if not res.converged[b]:
                continue
            layers = res.layers([structure] * 3, b)
            net = LinearNetwork(tuple(layer.materialize() for layer in layers))
            rep = pinv_alignment_check(net, Dataset(np.eye(4), ys[b]))
            adj = min(s.value for s in layer_adjacent_scores(net))
            if rep.output_score.value < MISALIGNED and rep.input_score.value < MISALIGNED and adj < MISALIGNED:
                hits += 1
        return hits >= 95, f"{hits}/{seeds} converged and misaligned ({converged} converged)"
    return _timed(8, "Toeplitz misalignment", 60.0, body)


def exhaustive_feasibility_oracle(r: int, k: int, n: int) -> bool:
    """Ruled out when even the best non-trivial partition leaves too few free parameters."""
    if k == 1:
        return False
    best = _max_pair_count(k)
    return r + best < k * (k - 1) // 2 - max(k - n, 0) * (max(k - n, 0) - 1) // 2


@functools.lru_cache(maxsize=None)
def _max_pair_count(k: int) -> int:
    return max(sum(p * (p - 1) // 2 for p in part) for part in _partitions(k) if len(part) > 1)


def _partitions(k: int, largest: int | None = None):
    largest = k if largest is None else largest
    if k == 0:
        yield ()
        return
    for first in range(min(k, largest), 0, -1):
        for rest in _partitions(k - first, first):
            yield (first,) + rest


def check_feasibility() -> CheckResult:
    def body():
        named = [((9, 16, 16), Feasibility.RULED_OUT), ((7, 4, 4), Feasibility.NOT_RULED_OUT),
                 ((9, 784, 1), Feasibility.NOT_RULED_OUT)]
        errors = [args for args, want in named if feasibility(*args) != want]
        mismatches = 0
        for k in range(1, 9):
            for n in range(1, 9):
                for r in range(1, 65):
                    want = exhaustive_feasibility_oracle(r, k, n)
                    if (feasibility(r, k, n) == Feasibility.RULED_OUT) != want:
                        mismatches += 1
        ok = not errors and mismatches == 0
        return ok, f"named cases wrong: {errors or 'none'}; grid mismatches: {mismatches}"
    return _timed(9, "feasibility", None, body)


def check_fig2b_synthetic() -> CheckResult:
    def body():
        rep = run(ExperimentSpec("fig2b", seed=0, steps=20000))
        end = rep.trace.adjacent[-1]
        misaligned = min(end) < MISALIGNED
        converged = rep.trace.converged
        ok = misaligned and rep.metadata["converged"] == converged
        state = "converged" if converged else "partial trace (flagged converged=false)"
        return ok, f"{state} at step {rep.trace.steps[-1]}, final top-32 adjacent scores {[f'{v:.2e}' for v in end]}"
    return _timed(13, "fig2b synthetic", 300.0, body)


# -- minnorm ----------------------------------------------------------------------------------

def check_min_norm(targets: int = 10) -> CheckResult:
    def body():
        worst_rel, violations = 0.0, 0
        for t in range(targets):
            p = rng(7000 + t).normals(5, 5)
            fac = min_norm_factorization(p)
            bound = 2.0 * float(np.sum(np.linalg.svd(p, compute_uv=False)))
            worst_rel = max(worst_rel, abs(fac.norm_sum - bound) / bound)
            violations += norm_lower_bound_check(p, trials=1000, seed=t).violations
        ok = worst_rel <= 1e-10 and violations == 0
        return ok, f"max relative gap to 2Tr(S) {worst_rel:.2e}; undercuts {violations}"
    return _timed(10, "minimum-norm factorization", None, body)


# -- harness ----------------------------------------------------------------------------------

def write_idx_fixture(root: Path, count: int = 300, seed: int = 0) -> Path:
    """Random 28x28 images and labels in IDX format, for runs without MNIST."""
    gen = rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    pix = (gen.uniforms(count, 784) * 256).astype(np.uint8)
    labels = np.array([gen.integers(10) for _ in range(count)], dtype=np.uint8)
    (root / "train-images-idx3-ubyte").write_bytes(
        np.array([IMAGES_MAGIC, count, 28, 28], dtype=">u4").tobytes() + pix.tobytes())
    (root / "train-labels-idx1-ubyte").write_bytes(
        np.array([LABELS_MAGIC, count], dtype=">u4").tobytes() + labels.tobytes())
    return root


REPRO_STEPS = {"fig1a": 300, "fig1b": 3, "fig1c": 3, "fig2a": 300, "fig2b": 30,
               "condition-demo": 200, "rank1-demo": 200}


def check_reproducible_csv() -> CheckResult:
    def body():
        tmp = Path(tempfile.mkdtemp(prefix="align-lab-repro-"))
        try:
            data_dir = write_idx_fixture(tmp / "idx")
            differing = []
            for name in REGISTRY:
                blobs = []
                for rep in range(2):
                    out = tmp / f"{name}-{rep}"
                    data = str(data_dir) if name in ("fig1b", "fig1c") else None
                    run(ExperimentSpec(name, seed=7, steps=REPRO_STEPS.get(name, 100), data_path=data,
                                       out_dir=str(out), record_every=10))
                    blobs.append((out / "trace.csv").read_bytes())
                if blobs[0] != blobs[1]:
                    differing.append(name)
        finally:
            shutil.rmtree(tmp, ignore_errors=True)
        return not differing, f"{len(REGISTRY)} experiments, differing: {differing or 'none'}"
    return _timed(12, "byte-identical CSV", None, body)


GROUPS: dict[str, list[Callable[[], CheckResult]]] = {
    "alignment": [check_invariance_autoencoding, check_invariance_factorization, check_invariance_sensing,
                  check_fig1a_misalignment, check_logistic_rank1],
    "fastdyn": [check_sv_equivalence, check_certificate],
    "network": [check_finite_differences],
    "structured": [check_projection_paths, check_conv_golden, check_toeplitz_misalignment,
                   check_feasibility, check_fig2b_synthetic],
    "minnorm": [check_min_norm],
    "harness": [check_reproducible_csv],
}


def run_checks(group: str = "all", echo: Callable[[str], None] | None = print) -> list[CheckResult]:
    if group != "all" and group not in GROUPS:
        raise ValueError(f"unknown check group {group!r}; known: all, {', '.join(GROUPS)}")
    fns = [f for g in GROUPS.values() for f in g] if group == "all" else GROUPS[group]
    results = []
    for fn in sorted(fns, key=lambda f: _ORDER.index(f)):
        res = fn()
        if echo:
            echo(res.line())
        results.append(res)
    return results


_ORDER = [check_invariance_autoencoding, check_invariance_factorization, check_invariance_sensing,
          check_fig1a_misalignment, check_sv_equivalence, check_certificate, check_finite_differences,
          check_projection_paths, check_conv_golden, check_toeplitz_misalignment, check_feasibility,
          check_min_norm, check_logistic_rank1, check_reproducible_csv, check_fig2b_synthetic]
