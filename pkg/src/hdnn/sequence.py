"""Lattices, scaled forward-backward, and the expected state-accuracy objective.

A lattice is a frame-synchronous DAG: every arc carries one frame's worth
of one HMM state, so every complete path from the start node to the end
node has exactly ``num_frames`` arcs. Sequence training maximizes the
expected number of frames whose lattice state matches the reference
alignment, taken under the normalized path distribution induced by
scaled acoustic scores plus per-arc graph weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .losses import LossResult
from .numerics import log_sum_exp

NEG_INF = float("-inf")


class LatticeError(ValueError):
    """Structurally invalid or degenerate (no complete path) lattice."""


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    frame: int
    state: int
    graph_logweight: float = 0.0


@dataclass
class Lattice:
    """Time-indexed DAG of state arcs with one node boundary per frame edge.

    Nodes are integers 0..num_nodes-1. Node frames are inferred from the
    arcs (an arc at frame t connects a node at boundary t to one at t+1)
    and validated on construction: frames must be consistent, and there
    must be exactly one node at boundary 0 (start), exactly one at
    boundary num_frames (end), and at least one complete path.
    """

    num_frames: int
    num_nodes: int
    arcs: list[Arc]
    node_frames: np.ndarray = field(init=False, repr=False)
    start: int = field(init=False)
    end: int = field(init=False)

    def __post_init__(self):
        t = self.num_frames
        if t < 1 or self.num_nodes < 2:
            raise LatticeError("lattice needs at least one frame and two nodes")
        frames = np.full(self.num_nodes, -1, dtype=np.int64)

        def assign(node: int, boundary: int):
            if node < 0 or node >= self.num_nodes:
                raise LatticeError(f"arc references unknown node {node}")
            if frames[node] == -1:
                frames[node] = boundary
            elif frames[node] != boundary:
                raise LatticeError(
                    f"node {node} sits at boundaries {frames[node]} and {boundary}")

        for arc in self.arcs:
            if not 0 <= arc.frame < t:
                raise LatticeError(f"arc frame {arc.frame} outside [0, {t})")
            assign(arc.src, arc.frame)
            assign(arc.dst, arc.frame + 1)
        if (frames == -1).any():
            orphans = np.flatnonzero(frames == -1).tolist()
            raise LatticeError(f"nodes {orphans} are not attached to any arc")
        starts = np.flatnonzero(frames == 0)
        ends = np.flatnonzero(frames == t)
        if len(starts) != 1 or len(ends) != 1:
            raise LatticeError(
                f"expected unique start/end nodes, found {len(starts)} at boundary 0 "
                f"and {len(ends)} at boundary {t}")
        self.node_frames = frames
        self.start = int(starts[0])
        self.end = int(ends[0])
        if not self._has_complete_path():
            raise LatticeError("lattice admits no complete start-to-end path")

    def _has_complete_path(self) -> bool:
        reachable = np.zeros(self.num_nodes, dtype=bool)
        reachable[self.start] = True
        for arc in self._arcs_in_topo_order():
            if reachable[arc.src]:
                reachable[arc.dst] = True
        return bool(reachable[self.end])

    def _arcs_in_topo_order(self) -> list[Arc]:
        return sorted(self.arcs, key=lambda a: a.frame)

    def arcs_at_frame(self, frame: int) -> list[Arc]:
        return [a for a in self.arcs if a.frame == frame]

    def max_state(self) -> int:
        return max(a.state for a in self.arcs)


@dataclass
class SmbrConfig:
    """Scoring knobs for the expected-accuracy objective.

    ``acoustic_scale`` multiplies the pseudo log-likelihoods (log posterior
    minus log prior) before they enter the lattice; ``state_priors``
    converts network posteriors into those likelihoods.
    """

    acoustic_scale: float
    state_priors: np.ndarray
    prior_floor: float = 1e-8

    def __post_init__(self):
        if self.acoustic_scale <= 0:
            raise ValueError("acoustic_scale must be positive")
        p = np.asarray(self.state_priors, dtype=np.float64)
        if abs(float(p.sum()) - 1.0) > 1e-5:
            raise ValueError("state priors must sum to 1")
        if self.prior_floor <= 0:
            raise ValueError("prior_floor must be positive")
        self.state_priors = np.maximum(p, self.prior_floor)


def estimate_state_priors(alignments, num_states: int, floor: float = 1e-8) -> np.ndarray:
    """Relative state frequencies over alignments, floored and renormalized."""
    counts = np.zeros(num_states, dtype=np.float64)
    for ali in alignments:
        counts += np.bincount(np.asarray(ali, dtype=np.intp), minlength=num_states)
    total = counts.sum()
    if total == 0:
        raise ValueError("cannot estimate priors from empty alignments")
    priors = np.maximum(counts / total, floor)
    return priors / priors.sum()


@dataclass
class SmbrResult:
    expected_accuracy: float          # expected matching frames, in [0, num_frames]
    arc_posteriors: np.ndarray        # gamma, aligned with lattice.arcs
    arc_expected_accuracy: np.ndarray # path accuracy conditioned on each arc
    dlogits: np.ndarray               # num_frames x output_dim, ascent direction
    total_logprob: float


def _arc_scores(lat: Lattice, frame_log_scores: np.ndarray) -> np.ndarray:
    t, k = frame_log_scores.shape
    if t != lat.num_frames:
        raise ValueError(
            f"frame scores cover {t} frames, lattice has {lat.num_frames}")
    scores = np.empty(len(lat.arcs), dtype=np.float64)
    for i, arc in enumerate(lat.arcs):
        if not 0 <= arc.state < k:
            raise ValueError(f"arc state {arc.state} outside score matrix width {k}")
        scores[i] = frame_log_scores[arc.frame, arc.state] + arc.graph_logweight
    return scores


def forward_backward(lat: Lattice, frame_log_scores: np.ndarray,
                     arc_accuracy: np.ndarray | None = None):
    """Arc posteriors under the normalized path distribution, in log domain.

    Returns (gamma, total_logprob) or, when per-arc accuracies are given,
    (gamma, total_logprob, expected_accuracy, arc_expected_accuracy) where
    the last is the expected complete-path accuracy conditioned on passing
    through each arc.
    """
    frame_log_scores = np.asarray(frame_log_scores, dtype=np.float64)
    scores = _arc_scores(lat, frame_log_scores)
    n = lat.num_nodes
    arcs = lat.arcs
    order = np.argsort([a.frame for a in arcs], kind="stable")

    in_arcs: list[list[int]] = [[] for _ in range(n)]
    out_arcs: list[list[int]] = [[] for _ in range(n)]
    for i, arc in enumerate(arcs):
        in_arcs[arc.dst].append(i)
        out_arcs[arc.src].append(i)

    with_acc = arc_accuracy is not None
    alpha = np.full(n, NEG_INF)
    alpha_acc = np.zeros(n)
    alpha[lat.start] = 0.0
    node_topo = np.argsort(lat.node_frames, kind="stable")
    for v in node_topo:
        if not in_arcs[v]:
            continue
        terms = [alpha[arcs[i].src] + scores[i] for i in in_arcs[v]]
        alpha[v] = log_sum_exp(terms)
        if with_acc and alpha[v] > NEG_INF:
            weights = np.exp(np.asarray(terms) - alpha[v])
            acc_terms = [alpha_acc[arcs[i].src] + arc_accuracy[i] for i in in_arcs[v]]
            alpha_acc[v] = float(weights @ np.asarray(acc_terms))

    beta = np.full(n, NEG_INF)
    beta_acc = np.zeros(n)
    beta[lat.end] = 0.0
    for v in node_topo[::-1]:
        if not out_arcs[v] or v == lat.end:
            continue
        terms = [scores[i] + beta[arcs[i].dst] for i in out_arcs[v]]
        beta[v] = log_sum_exp(terms)
        if with_acc and beta[v] > NEG_INF:
            weights = np.exp(np.asarray(terms) - beta[v])
            acc_terms = [beta_acc[arcs[i].dst] + arc_accuracy[i] for i in out_arcs[v]]
            beta_acc[v] = float(weights @ np.asarray(acc_terms))

    total = alpha[lat.end]
    if not np.isfinite(total):
        raise LatticeError("degenerate lattice: zero total path mass")
    gamma = np.zeros(len(arcs))
    for i, arc in enumerate(arcs):
        logp = alpha[arc.src] + scores[i] + beta[arc.dst] - total
        gamma[i] = np.exp(logp) if logp > NEG_INF else 0.0
    if not with_acc:
        return gamma, float(total)
    arc_exp_acc = np.array([
        alpha_acc[arc.src] + arc_accuracy[i] + beta_acc[arc.dst]
        for i, arc in enumerate(arcs)])
    return gamma, float(total), float(alpha_acc[lat.end]), arc_exp_acc


def smbr_objective(lat: Lattice, posteriors: np.ndarray, reference,
                   cfg: SmbrConfig) -> SmbrResult:
    """Expected frame-state accuracy over the lattice and its logit gradient.

    Acoustic scores are scaled pseudo log-likelihoods,
    ``k * (log posterior - log prior)``, combined with each arc's graph
    weight. An arc contributes accuracy 1 when its state matches the
    reference at its frame. The returned ``dlogits`` is the exact gradient
    of the expected accuracy with respect to the temperature-1 logits
    (the per-frame softmax normalizer cancels inside the normalized path
    distribution), so gradient ascent on it raises the objective.
    """
    y = np.asarray(posteriors, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.intp)
    if y.ndim != 2 or y.shape[0] != lat.num_frames:
        raise ValueError(
            f"posteriors must be {lat.num_frames} x K, got {y.shape}")
    if ref.shape != (lat.num_frames,):
        raise ValueError(
            f"reference length {ref.shape} does not match {lat.num_frames} frames")
    k = cfg.acoustic_scale
    log_priors = np.log(cfg.state_priors)
    if log_priors.shape[0] != y.shape[1]:
        raise ValueError("state prior dimension does not match posterior width")
    frame_log_scores = k * (np.log(np.maximum(y, np.finfo(np.float64).tiny))
                            - log_priors[None, :])

    arc_acc = np.array([1.0 if arc.state == ref[arc.frame] else 0.0
                        for arc in lat.arcs])
    gamma, total, expected, arc_exp_acc = forward_backward(
        lat, frame_log_scores, arc_accuracy=arc_acc)

    dlogits = np.zeros_like(y)
    for i, arc in enumerate(lat.arcs):
        dlogits[arc.frame, arc.state] += gamma[i] * (arc_exp_acc[i] - expected)
    dlogits *= k
    return SmbrResult(expected, gamma, arc_exp_acc, dlogits, total)


def smbr_kd_objective(smbr: SmbrResult, kd: LossResult | None, p: float) -> LossResult:
    """Descent-form combination: negated per-frame accuracy plus p times KD.

    ``kd`` may be None when p == 0 (pure sequence criterion). Gradient
    descent on the returned dlogits raises the expected accuracy and
    lowers the regularizing frame-level loss.
    """
    if p < 0:
        raise ValueError(f"p must be non-negative, got {p}")
    num_frames = smbr.dlogits.shape[0]
    value = -smbr.expected_accuracy / num_frames
    dlogits = -smbr.dlogits / num_frames
    if p > 0:
        if kd is None:
            raise ValueError("p > 0 requires a frame-level regularizer loss")
        value = value + p * kd.value
        dlogits = dlogits + p * kd.dlogits
    return LossResult(float(value), dlogits)


def write_lattice(lat: Lattice, path) -> None:
    """Text form: header `T num_nodes num_arcs`, then `from to t state weight`."""
    lines = [f"{lat.num_frames} {lat.num_nodes} {len(lat.arcs)}"]
    for arc in lat._arcs_in_topo_order():
        lines.append(f"{arc.src} {arc.dst} {arc.frame} {arc.state} {arc.graph_logweight!r}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def read_lattice(path) -> Lattice:
    with open(path, "r", encoding="utf-8") as f:
        tokens = f.read().split("\n")
    header = tokens[0].split()
    if len(header) != 3:
        raise LatticeError(f"malformed lattice header in {path}")
    num_frames, num_nodes, num_arcs = (int(x) for x in header)
    arcs = []
    for line in tokens[1:]:
        if not line.strip():
            continue
        src, dst, frame, state, weight = line.split()
        arcs.append(Arc(int(src), int(dst), int(frame), int(state), float(weight)))
    if len(arcs) != num_arcs:
        raise LatticeError(
            f"lattice header promises {num_arcs} arcs, file has {len(arcs)}")
    return Lattice(num_frames, num_nodes, arcs)


def write_alignment(alignment, path) -> None:
    """One line of space-separated state ids."""
    ali = np.asarray(alignment, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as f:
        f.write(" ".join(str(int(s)) for s in ali) + "\n")


def read_alignment(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        return np.array([int(tok) for tok in f.read().split()], dtype=np.int64)
