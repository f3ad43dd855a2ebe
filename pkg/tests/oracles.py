"""Independent oracles the tests check the implementation against.

Everything here deliberately avoids the code paths under test: gradients
come from central finite differences through public entry points, and
lattice quantities come from explicit path enumeration.
"""

from __future__ import annotations

import math

import numpy as np

from hdnn.network import Network, iter_params


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


def fd_array_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f with respect to array x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = grad.reshape(-1)
    xf = x.reshape(-1)
    for i in range(xf.size):
        orig = xf[i]
        xf[i] = orig + step
        hi = f(x)
        xf[i] = orig - step
        lo = f(x)
        xf[i] = orig
        flat[i] = (hi - lo) / (2 * step)
    return grad


def fd_param_grads(net: Network, loss_fn, step: float = 1e-3,
                   max_coords_per_tensor: int | None = None,
                   rng: np.random.Generator | None = None) -> dict[str, np.ndarray]:
    """Central differences of loss_fn() over the network's own parameters.

    Perturbs the parameter buffers in place and restores them. When
    ``max_coords_per_tensor`` is set, only a random coordinate subset per
    tensor is evaluated; untouched coordinates come back as NaN so the
    caller can mask them.
    """
    grads: dict[str, np.ndarray] = {}
    for name, param in iter_params(net):
        g = np.full(param.size, np.nan)
        coords = np.arange(param.size)
        if max_coords_per_tensor is not None and param.size > max_coords_per_tensor:
            coords = rng.choice(param.size, size=max_coords_per_tensor, replace=False)
        flat = param.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_fn()
            flat[i] = orig - step
            lo = loss_fn()
            flat[i] = orig
            g[i] = (hi - lo) / (2 * step)
        grads[name] = g.reshape(param.shape)
    return grads


def masked_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    mask = ~np.isnan(numeric)
    return rel_err(np.asarray(analytic)[mask], numeric[mask])


# ---------------------------------------------------------------------------
# lattice enumeration


def enumerate_paths(lat) -> list[list[int]]:
    """All complete start-to-end paths as lists of arc indices."""
    out_arcs: dict[int, list[int]] = {}
    for i, arc in enumerate(lat.arcs):
        out_arcs.setdefault(arc.src, []).append(i)
    paths: list[list[int]] = []

    def walk(node: int, taken: list[int]):
        if node == lat.end:
            paths.append(list(taken))
            return
        for i in out_arcs.get(node, []):
            taken.append(i)
            walk(lat.arcs[i].dst, taken)
            taken.pop()

    walk(lat.start, [])
    return paths


def brute_force_posteriors(lat, frame_log_scores: np.ndarray,
                           arc_accuracy: np.ndarray | None = None):
    """Arc posteriors (and expected accuracies) by explicit path enumeration."""
    scores = np.array([
        frame_log_scores[a.frame, a.state] + a.graph_logweight for a in lat.arcs])
    paths = enumerate_paths(lat)
    logps = np.array([scores[p].sum() for p in paths])
    m = logps.max()
    total = m + math.log(np.exp(logps - m).sum())
    probs = np.exp(logps - total)
    gamma = np.zeros(len(lat.arcs))
    for p, prob in zip(paths, probs):
        for i in p:
            gamma[i] += prob
    if arc_accuracy is None:
        return gamma, total
    path_acc = np.array([arc_accuracy[p].sum() for p in paths])
    expected = float(probs @ path_acc)
    arc_exp = np.zeros(len(lat.arcs))
    for k, (p, prob) in enumerate(zip(paths, probs)):
        for i in p:
            arc_exp[i] += prob * path_acc[k]
    with np.errstate(invalid="ignore", divide="ignore"):
        arc_exp = np.where(gamma > 0, arc_exp / np.maximum(gamma, 1e-300), 0.0)
    return gamma, total, expected, arc_exp


def brute_force_expected_accuracy(lat, posteriors, reference, cfg) -> float:
    """Expected accuracy straight from the definition, via enumeration."""
    y = np.asarray(posteriors, dtype=np.float64)
    log_priors = np.log(np.maximum(np.asarray(cfg.state_priors, dtype=np.float64),
                                   cfg.prior_floor))
    frame_log_scores = cfg.acoustic_scale * (
        np.log(np.maximum(y, 1e-300)) - log_priors[None, :])
    acc = np.array([1.0 if a.state == reference[a.frame] else 0.0 for a in lat.arcs])
    _, _, expected, _ = brute_force_posteriors(lat, frame_log_scores, acc)
    return expected


def random_lattice(rng: np.random.Generator, num_frames: int, num_states: int,
                   max_nodes_per_boundary: int = 2, max_extra_arcs: int = 3):
    """Random valid frame-synchronous lattice with a guaranteed complete path."""
    from hdnn.sequence import Arc, Lattice

    boundary_nodes: list[list[int]] = []
    next_node = 0
    for t in range(num_frames + 1):
        count = 1 if t in (0, num_frames) else int(rng.integers(1, max_nodes_per_boundary + 1))
        boundary_nodes.append(list(range(next_node, next_node + count)))
        next_node += count

    arcs = []
    for t in range(num_frames):
        # every node at boundary t+1 gets an incoming arc, so all nodes are
        # reachable from the unique start and the end stays reachable
        for dst in boundary_nodes[t + 1]:
            src = int(rng.choice(boundary_nodes[t]))
            arcs.append(Arc(src, dst, t, int(rng.integers(num_states)),
                            float(rng.uniform(-1.0, 1.0))))
        for _ in range(int(rng.integers(0, max_extra_arcs + 1))):
            src = int(rng.choice(boundary_nodes[t]))
            dst = int(rng.choice(boundary_nodes[t + 1]))
            arcs.append(Arc(src, dst, t, int(rng.integers(num_states)),
                            float(rng.uniform(-1.0, 1.0))))
    return Lattice(num_frames=num_frames, num_nodes=next_node, arcs=arcs)
