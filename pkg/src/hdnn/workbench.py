"""Synthetic corpora, feature splicing, desk-scale lattices, and model files.

The synthetic generator stands in for a real acoustic corpus: a
left-to-right looping HMM emits per-state Gaussian feature vectors, each
pseudo-speaker perturbs them with a fixed affine transform, and the true
state path is kept as the reference alignment. Everything is sized so
brute-force oracles (path enumeration, finite differences) stay cheap.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, NetworkConfig, iter_params, param_shapes
from .numerics import Rng
from .sequence import (Arc, Lattice, read_alignment, read_lattice,
                       write_alignment, write_lattice)

# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass
class CorpusSpec:
    """Full description of a synthetic corpus.

    The emission model is one Gaussian per state (mean row + shared
    per-state std); the transition model self-loops with the given
    probability and otherwise advances to the next state cyclically.
    Speaker transforms are per-speaker diagonal affine maps applied to
    every emitted frame.
    """

    num_states: int
    feature_dim: int
    num_speakers: int
    train_utts_per_speaker: int
    cv_utts_per_speaker: int
    adapt_utts_per_speaker: int
    frames_per_utterance: int
    emission_means: np.ndarray   # num_states x feature_dim
    emission_stds: np.ndarray    # num_states
    self_loop_probs: np.ndarray  # num_states
    speaker_scales: np.ndarray   # num_speakers x feature_dim
    speaker_shifts: np.ndarray   # num_speakers x feature_dim
    seed: int

    def __post_init__(self):
        if min(self.num_states, self.feature_dim, self.num_speakers,
               self.frames_per_utterance) < 1:
            raise ValueError("corpus dimensions must all be >= 1")
        self.emission_means = np.asarray(self.emission_means, dtype=np.float64)
        self.emission_stds = np.asarray(self.emission_stds, dtype=np.float64)
        self.self_loop_probs = np.asarray(self.self_loop_probs, dtype=np.float64)
        self.speaker_scales = np.asarray(self.speaker_scales, dtype=np.float64)
        self.speaker_shifts = np.asarray(self.speaker_shifts, dtype=np.float64)
        if self.emission_means.shape != (self.num_states, self.feature_dim):
            raise ValueError("emission_means must be num_states x feature_dim")
        if self.emission_stds.shape != (self.num_states,):
            raise ValueError("emission_stds must have one entry per state")
        if (self.emission_stds < 0).any():
            raise ValueError("degenerate emission model: negative std")
        if ((self.self_loop_probs < 0) | (self.self_loop_probs >= 1)).any():
            raise ValueError("self-loop probabilities must lie in [0, 1)")
        if self.speaker_scales.shape != (self.num_speakers, self.feature_dim):
            raise ValueError("speaker_scales must be num_speakers x feature_dim")
        if self.speaker_shifts.shape != (self.num_speakers, self.feature_dim):
            raise ValueError("speaker_shifts must be num_speakers x feature_dim")


SPEC_KNOB_TYPES = {
    "num_states": int, "feature_dim": int, "num_speakers": int,
    "train_utts_per_speaker": int, "cv_utts_per_speaker": int,
    "adapt_utts_per_speaker": int, "frames_per_utterance": int,
    "mean_separation": float, "emission_std": float, "self_loop": float,
    "speaker_shift_std": float, "speaker_scale_std": float, "seed": int,
}

SPEC_KNOB_DEFAULTS = {
    "num_states": 12, "feature_dim": 8, "num_speakers": 4,
    "train_utts_per_speaker": 8, "cv_utts_per_speaker": 2,
    "adapt_utts_per_speaker": 2, "frames_per_utterance": 50,
    "mean_separation": 1.0, "emission_std": 0.8, "self_loop": 0.7,
    "speaker_shift_std": 0.0, "speaker_scale_std": 0.0, "seed": 17,
}


def make_corpus_spec(**knobs) -> CorpusSpec:
    """Materialize a CorpusSpec from scalar knobs, deterministically per seed."""
    unknown = set(knobs) - set(SPEC_KNOB_DEFAULTS)
    if unknown:
        raise ValueError(f"unknown corpus knobs: {sorted(unknown)}")
    k = dict(SPEC_KNOB_DEFAULTS, **knobs)
    rng = Rng(k["seed"])
    s, d, spk = k["num_states"], k["feature_dim"], k["num_speakers"]
    means = k["mean_separation"] * rng.stream("emission_means").standard_normal((s, d))
    scales = 1.0 + k["speaker_scale_std"] * rng.stream("speaker_scales").standard_normal((spk, d))
    shifts = k["speaker_shift_std"] * rng.stream("speaker_shifts").standard_normal((spk, d))
    return CorpusSpec(
        num_states=s, feature_dim=d, num_speakers=spk,
        train_utts_per_speaker=k["train_utts_per_speaker"],
        cv_utts_per_speaker=k["cv_utts_per_speaker"],
        adapt_utts_per_speaker=k["adapt_utts_per_speaker"],
        frames_per_utterance=k["frames_per_utterance"],
        emission_means=means,
        emission_stds=np.full(s, k["emission_std"]),
        self_loop_probs=np.full(s, k["self_loop"]),
        speaker_scales=scales, speaker_shifts=shifts, seed=k["seed"])


def read_kv_config(path) -> dict[str, str]:
    """Flat key=value text config; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"malformed config line: {raw!r}")
        key, val = line.split("=", 1)
        values[key.strip()] = val.strip()
    return values


def corpus_spec_from_file(path, **overrides) -> CorpusSpec:
    knobs = {}
    for key, raw in read_kv_config(path).items():
        if key not in SPEC_KNOB_TYPES:
            raise ValueError(f"unknown corpus spec key {key!r}")
        knobs[key] = SPEC_KNOB_TYPES[key](raw)
    knobs.update(overrides)
    return make_corpus_spec(**knobs)


@dataclass
class Utterance:
    utt_id: str
    speaker: int
    features: np.ndarray        # frames x feature_dim, float32
    alignment: np.ndarray       # frames, int64
    lattice: Lattice | None = None


@dataclass
class Corpus:
    spec: CorpusSpec
    train: list[Utterance] = field(default_factory=list)
    cv: list[Utterance] = field(default_factory=list)
    adapt: list[Utterance] = field(default_factory=list)

    def split(self, name: str) -> list[Utterance]:
        if name not in ("train", "cv", "adapt"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


def _sample_utterance(spec: CorpusSpec, rng: Rng, split: str, speaker: int,
                      index: int) -> Utterance:
    t = spec.frames_per_utterance
    utt_id = f"{split}-spk{speaker:02d}-{index:03d}"
    path_stream = rng.stream(f"path/{utt_id}")
    noise_stream = rng.stream(f"noise/{utt_id}")
    states = np.empty(t, dtype=np.int64)
    state = int(path_stream.integers(spec.num_states))
    for i in range(t):
        states[i] = state
        if path_stream.random() >= spec.self_loop_probs[state]:
            state = (state + 1) % spec.num_states
    feats = (spec.emission_means[states]
             + spec.emission_stds[states, None]
             * noise_stream.standard_normal((t, spec.feature_dim)))
    feats = feats * spec.speaker_scales[speaker] + spec.speaker_shifts[speaker]
    return Utterance(utt_id, speaker, feats.astype(np.float32), states)


def gen_corpus(spec: CorpusSpec) -> Corpus:
    """Sample the train/cv/adapt splits; disjoint utterance ids, seed-stable."""
    rng = Rng(spec.seed)
    corpus = Corpus(spec)
    counts = {"train": spec.train_utts_per_speaker,
              "cv": spec.cv_utts_per_speaker,
              "adapt": spec.adapt_utts_per_speaker}
    for split, per_speaker in counts.items():
        bucket = corpus.split(split)
        for speaker in range(spec.num_speakers):
            for index in range(per_speaker):
                bucket.append(_sample_utterance(spec, rng, split, speaker, index))
    return corpus


# ---------------------------------------------------------------------------
# splicing


def splice(features: np.ndarray, context: int) -> np.ndarray:
    """Concatenate each frame with its +/- context neighbours.

    Row t becomes frames t-context .. t+context side by side; the first
    and last frames are replicated past the edges, so the frame count is
    unchanged and the width grows to (2*context+1) * feature_dim.
    """
    if context < 0:
        raise ValueError("context must be >= 0")
    x = np.asarray(features)
    if context == 0:
        return x.copy()
    padded = np.pad(x, ((context, context), (0, 0)), mode="edge")
    n = x.shape[0]
    return np.hstack([padded[k:k + n] for k in range(2 * context + 1)])


def spliced_dim(feature_dim: int, context: int) -> int:
    return feature_dim * (2 * context + 1)


# ---------------------------------------------------------------------------
# desk-scale lattices


def build_lattice(utterance: Utterance, num_states: int, branch_factor: int,
                  rng: np.random.Generator) -> Lattice:
    """Frame-synchronous hypothesis lattice around the reference path.

    One node per frame boundary; every frame carries the reference arc
    plus branch_factor - 1 arcs with distinct competing states, all with
    small random graph weights.
    """
    if branch_factor < 1:
        raise ValueError("branch_factor must be >= 1")
    if branch_factor > num_states:
        raise ValueError(
            f"branch_factor {branch_factor} exceeds {num_states} states")
    t = len(utterance.alignment)
    arcs = []
    for frame in range(t):
        ref_state = int(utterance.alignment[frame])
        states = [ref_state]
        if branch_factor > 1:
            others = [s for s in range(num_states) if s != ref_state]
            picks = rng.choice(len(others), size=branch_factor - 1, replace=False)
            states.extend(others[i] for i in picks)
        for state in states:
            weight = float(rng.uniform(-0.5, 0.0))
            arcs.append(Arc(frame, frame + 1, frame, state, weight))
    return Lattice(num_frames=t, num_nodes=t + 1, arcs=arcs)


# ---------------------------------------------------------------------------
# binary tensor container (model files, feature files, posterior files)

MAGIC = b"HDNNBIN\x00"
FORMAT_VERSION = 1
_CHECKSUM_LEN = 8


class ModelFileError(ValueError):
    """Malformed container file."""


class ChecksumError(ModelFileError):
    """Corrupt or truncated container."""


class VersionError(ModelFileError):
    """Container written by an unknown format version."""


def _checksum(payload: bytes) -> bytes:
    return hashlib.sha256(payload).digest()[:_CHECKSUM_LEN]


def save_tensors(path, kind: str, meta: dict, tensors: list[tuple[str, np.ndarray]]) -> None:
    """Write named float32 tensors with a JSON header and a trailing checksum."""
    manifest = [{"name": name, "shape": list(arr.shape)} for name, arr in tensors]
    header = json.dumps({"kind": kind, "meta": meta, "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", FORMAT_VERSION, len(header))
    blob += header
    for _, arr in tensors:
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    blob += _checksum(bytes(blob))
    Path(path).write_bytes(bytes(blob))


def load_tensors(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    blob = Path(path).read_bytes()
    if len(blob) < len(MAGIC) + 8 + _CHECKSUM_LEN:
        raise ChecksumError(f"{path}: truncated container")
    if blob[:len(MAGIC)] != MAGIC:
        raise ModelFileError(f"{path}: bad magic bytes")
    body, stored = blob[:-_CHECKSUM_LEN], blob[-_CHECKSUM_LEN:]
    if _checksum(body) != stored:
        raise ChecksumError(f"{path}: checksum mismatch")
    version, header_len = struct.unpack_from("<II", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported format version {version}")
    header_start = len(MAGIC) + 8
    header = json.loads(blob[header_start:header_start + header_len])
    offset = header_start + header_len
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=offset)
        tensors[entry["name"]] = arr.reshape(shape).copy()
        offset += count * 4
    if offset != len(body):
        raise ChecksumError(f"{path}: payload length mismatch")
    return header["kind"], header["meta"], tensors


def save_model(net: Network, path, meta: dict | None = None) -> None:
    """Model container: config + every tensor as little-endian float32."""
    cfg = net.config
    file_meta = dict(meta or {})
    file_meta["config"] = {
        "input_dim": cfg.input_dim, "hidden_dim": cfg.hidden_dim,
        "num_hidden_layers": cfg.num_hidden_layers, "output_dim": cfg.output_dim,
        "architecture": cfg.architecture,
    }
    save_tensors(path, "model", file_meta, list(iter_params(net)))


def model_meta(path) -> dict:
    kind, meta, _ = load_tensors(path)
    if kind != "model":
        raise ModelFileError(f"{path}: not a model container (kind={kind!r})")
    return meta


def load_model(path) -> Network:
    kind, meta, tensors = load_tensors(path)
    if kind != "model":
        raise ModelFileError(f"{path}: not a model container (kind={kind!r})")
    cfg = NetworkConfig(**meta["config"])
    expected = param_shapes(cfg)
    missing = [name for name, _ in expected if name not in tensors]
    if missing:
        raise ModelFileError(f"{path}: missing tensors {missing}")
    get = lambda name: tensors[name]
    l = cfg.num_hidden_layers
    return Network(
        config=cfg,
        hidden_weights=[get(f"hidden_weights/{i}") for i in range(l)],
        hidden_biases=[get(f"hidden_biases/{i}") for i in range(l)],
        gate_transform=get("gate_transform") if cfg.is_highway else None,
        gate_carry=get("gate_carry") if cfg.is_highway else None,
        output_weight=get("output_weight"),
        output_bias=get("output_bias"),
    )


# ---------------------------------------------------------------------------
# corpus on disk

SPLITS = ("train", "cv", "adapt")
_META_NAME = "corpus.meta"
_MANIFEST_NAME = "manifest.txt"


def save_corpus(corpus: Corpus, root) -> None:
    """One directory per split; the manifest is written last as the commit point."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    spec = corpus.spec
    meta_lines = [f"num_states={spec.num_states}",
                  f"feature_dim={spec.feature_dim}",
                  f"num_speakers={spec.num_speakers}",
                  f"frames_per_utterance={spec.frames_per_utterance}",
                  f"seed={spec.seed}"]
    (root / _META_NAME).write_text("\n".join(meta_lines) + "\n", encoding="utf-8")
    for split in SPLITS:
        split_dir = root / split
        split_dir.mkdir(exist_ok=True)
        manifest = []
        for utt in corpus.split(split):
            save_tensors(split_dir / f"{utt.utt_id}.feats", "features",
                         {"utt_id": utt.utt_id, "speaker": utt.speaker},
                         [("features", utt.features)])
            write_alignment(utt.alignment, split_dir / f"{utt.utt_id}.ali")
            if utt.lattice is not None:
                write_lattice(utt.lattice, split_dir / f"{utt.utt_id}.lat")
            manifest.append(f"{utt.utt_id} {utt.speaker}")
        (split_dir / _MANIFEST_NAME).write_text(
            "\n".join(manifest) + "\n", encoding="utf-8")


def corpus_meta(root) -> dict[str, int]:
    meta = read_kv_config(Path(root) / _META_NAME)
    return {k: int(v) for k, v in meta.items()}


def load_split(root, split: str, with_lattices: bool = False) -> list[Utterance]:
    split_dir = Path(root) / split
    manifest = split_dir / _MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest for split {split!r} under {root}")
    utts = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        utt_id, speaker = line.split()
        _, _, tensors = load_tensors(split_dir / f"{utt_id}.feats")
        alignment = read_alignment(split_dir / f"{utt_id}.ali")
        lattice = None
        if with_lattices:
            lat_path = split_dir / f"{utt_id}.lat"
            if not lat_path.exists():
                raise FileNotFoundError(
                    f"missing lattice for {utt_id}; run make-lattices first")
            lattice = read_lattice(lat_path)
        utts.append(Utterance(utt_id, int(speaker), tensors["features"],
                              alignment, lattice))
    return utts


# ---------------------------------------------------------------------------
# dataset assembly


def frame_dataset(utterances: list[Utterance], context: int,
                  with_labels: bool = True):
    """Splice and stack utterances into one frame-level dataset."""
    from .trainer import FrameDataset

    if not utterances:
        raise ValueError("no utterances to assemble")
    feats = np.vstack([splice(u.features, context) for u in utterances])
    labels = None
    if with_labels:
        labels = np.concatenate([u.alignment for u in utterances])
    return FrameDataset(feats, labels)


def sequence_examples(utterances: list[Utterance], context: int):
    """Per-utterance spliced features + lattice + alignment for sequence training."""
    from .trainer import SequenceExample

    return [SequenceExample(splice(u.features, context), u.lattice, u.alignment)
            for u in utterances]
