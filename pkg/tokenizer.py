"""
Motion tokenizer: K-disk vocabulary construction plus encode/decode of 0.5 s motion segments.

A motion segment is S sub-step poses expressed in the frame of the pose preceding the window.
Segments are compared by their average corner distance: a canonical vehicle box is placed at every
relative pose and the mean Euclidean distance between corresponding corners is taken.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from geometry import from_frame, to_frame
from models import (
    CANONICAL_LENGTH,
    CANONICAL_WIDTH,
    DEFAULT_SUBSTEPS,
    AgentState,
    PlannerError,
    Pose2D,
    Trajectory,
)


class VocabularyError(PlannerError):
    pass


BoxDims = Tuple[float, float]
CANONICAL_BOX: BoxDims = (CANONICAL_LENGTH, CANONICAL_WIDTH)


@dataclass(frozen=True)
class MotionSegment:
    """S relative poses (dx, dy, dheading) in the frame of the pose before the window."""
    rel_poses: Tuple[Tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        poses = tuple(tuple(float(v) for v in p) for p in self.rel_poses)
        object.__setattr__(self, "rel_poses", poses)
        if not poses or any(len(p) != 3 for p in poses):
            raise VocabularyError("Segment needs at least one (dx, dy, dheading) pose")
        if not all(math.isfinite(v) for p in poses for v in p):
            raise VocabularyError("Segment values must be finite")

    @cached_property
    def array(self) -> np.ndarray:
        return np.asarray(self.rel_poses, dtype=float)

    @property
    def substeps(self) -> int:
        return len(self.rel_poses)

    @staticmethod
    def from_array(arr: np.ndarray) -> "MotionSegment":
        return MotionSegment(tuple(tuple(row) for row in np.asarray(arr, dtype=float)))


@dataclass(frozen=True)
class MotionToken:
    id: int
    template: MotionSegment


def segment_corners(poses: np.ndarray, box: BoxDims = CANONICAL_BOX) -> np.ndarray:
    """Corner positions for (..., S, 3) poses -> (..., S, 4, 2)."""
    hl, hw = box[0] / 2.0, box[1] / 2.0
    offsets = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c = np.cos(poses[..., 2])[..., None]
    s = np.sin(poses[..., 2])[..., None]
    ox, oy = offsets[:, 0], offsets[:, 1]
    x = poses[..., 0:1] + c * ox - s * oy
    y = poses[..., 1:2] + s * ox + c * oy
    return np.stack([x, y], axis=-1)


def avg_corner_distance(a: MotionSegment, b: MotionSegment, box: BoxDims = CANONICAL_BOX) -> float:
    """Mean over sub-steps and the four box corners of the corner-to-corner distance."""
    if a.substeps != b.substeps:
        raise VocabularyError(f"Sub-step mismatch: {a.substeps} vs {b.substeps}")
    diff = segment_corners(a.array, box) - segment_corners(b.array, box)
    return float(np.mean(np.linalg.norm(diff, axis=-1)))


@dataclass(frozen=True)
class TokenVocabulary:
    """Ordered token templates; ids are 0..len-1 and ``pad_id == len``."""
    tokens: Tuple[MotionToken, ...]
    radius: float
    canonical_box: BoxDims = CANONICAL_BOX

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if not self.tokens:
            raise VocabularyError("Vocabulary must contain at least one token")
        if self.radius <= 0.0:
            raise VocabularyError("Vocabulary radius must be positive")
        for expected, token in enumerate(self.tokens):
            if token.id != expected:
                raise VocabularyError(f"Token ids must be 0..n-1, found {token.id} at {expected}")
        steps = {t.template.substeps for t in self.tokens}
        if len(steps) != 1:
            raise VocabularyError(f"Templates disagree on sub-step count: {sorted(steps)}")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return len(self.tokens)

    @property
    def substeps(self) -> int:
        return self.tokens[0].template.substeps

    @cached_property
    def templates(self) -> np.ndarray:
        return np.stack([t.template.array for t in self.tokens])

    @cached_property
    def corners(self) -> np.ndarray:
        return segment_corners(self.templates, self.canonical_box)

    @cached_property
    def end_poses(self) -> np.ndarray:
        """Final relative pose of every template, shape (V, 3)."""
        return self.templates[:, -1, :]

    def check_valid_id(self, token_id: int) -> None:
        if not (0 <= int(token_id) < len(self.tokens)):
            raise VocabularyError(f"Invalid token id {token_id} for vocabulary of size {len(self.tokens)}")

    def min_separation(self) -> float:
        """Smallest pairwise template distance (inf for a single token)."""
        corners = self.corners
        best = math.inf
        for i in range(len(self.tokens) - 1):
            d = np.mean(np.linalg.norm(corners[i + 1 :] - corners[i], axis=-1), axis=(1, 2))
            best = min(best, float(np.min(d)))
        return best

    def to_dict(self) -> Dict[str, Any]:
        return {
            "radius": self.radius,
            "canonical_box": list(self.canonical_box),
            "tokens": [{"id": t.id, "rel_poses": [list(p) for p in t.template.rel_poses]} for t in self.tokens],
        }

    @staticmethod
    def from_dict(data: Dict[str, Any]) -> "TokenVocabulary":
        try:
            raw_tokens = sorted(data["tokens"], key=lambda t: int(t["id"]))
            tokens = tuple(
                MotionToken(int(t["id"]), MotionSegment(tuple(tuple(p) for p in t["rel_poses"]))) for t in raw_tokens
            )
            box = data.get("canonical_box", list(CANONICAL_BOX))
            return TokenVocabulary(tokens=tokens, radius=float(data["radius"]), canonical_box=(float(box[0]), float(box[1])))
        except (KeyError, TypeError, ValueError) as exc:
            raise VocabularyError(f"Malformed vocabulary document: {exc}") from exc

    def save(self, path: Path) -> None:
        """Persist atomically to disk."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_suffix(".tmp")
        tmp_path.write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")
        tmp_path.replace(path)

    @staticmethod
    def load(path: Path) -> "TokenVocabulary":
        path = Path(path)
        if not path.exists():
            raise VocabularyError(f"Vocabulary file not found: {path}")
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise VocabularyError(f"Vocabulary file is not valid JSON: {exc}") from exc
        return TokenVocabulary.from_dict(raw)


def vocabulary_digest(vocab: TokenVocabulary) -> str:
    """sha256 over the canonical JSON form; used to pair checkpoints with their vocabulary."""
    payload = json.dumps(vocab.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def extract_segments(traj: Trajectory, substeps: int = DEFAULT_SUBSTEPS) -> List[MotionSegment]:
    """Split a trajectory into consecutive non-overlapping windows of ``substeps`` states."""
    count = (len(traj.states) - 1) // substeps
    segments: List[MotionSegment] = []
    for k in range(count):
        ref = traj.states[k * substeps].pose
        rel = [to_frame(traj.states[k * substeps + j].pose, ref).to_tuple() for j in range(1, substeps + 1)]
        segments.append(MotionSegment(tuple(rel)))
    return segments


def build_vocabulary(
    segments: Sequence[MotionSegment],
    radius: float,
    max_size: int,
    box: BoxDims = CANONICAL_BOX,
) -> TokenVocabulary:
    """Greedy K-disk cover in input order.

    A segment becomes a template iff its distance to every existing template exceeds ``radius``;
    construction stops once ``max_size`` templates exist.
    """
    if radius <= 0.0:
        raise VocabularyError(f"K-disk radius must be positive, got {radius}")
    if not segments:
        raise VocabularyError("Cannot build a vocabulary from zero segments")
    if max_size < 1:
        raise VocabularyError("max_size must be >= 1")
    corners = segment_corners(np.stack([s.array for s in segments]), box)
    chosen: List[int] = [0]
    bank = np.empty((max_size,) + corners.shape[1:])
    bank[0] = corners[0]
    for idx in range(1, len(segments)):
        if len(chosen) >= max_size:
            break
        dist = np.mean(np.linalg.norm(bank[: len(chosen)] - corners[idx], axis=-1), axis=(1, 2))
        if np.all(dist > radius):
            bank[len(chosen)] = corners[idx]
            chosen.append(idx)
    tokens = tuple(MotionToken(i, segments[src]) for i, src in enumerate(chosen))
    return TokenVocabulary(tokens=tokens, radius=float(radius), canonical_box=box)


def fit_vocabulary(
    segments: Sequence[MotionSegment],
    target: int = 128,
    tolerance: int = 8,
    box: BoxDims = CANONICAL_BOX,
    max_iters: int = 40,
    on_log: Optional[Callable[[str], None]] = None,
) -> TokenVocabulary:
    """Bisect the K-disk radius until the cover size lands within ``target +- tolerance``."""
    lo, hi = 1e-4, 50.0
    cap = max(4 * target, target + tolerance + 1)
    best: Optional[TokenVocabulary] = None
    for iteration in range(max_iters):
        radius = math.sqrt(lo * hi)
        vocab = build_vocabulary(segments, radius, cap, box)
        if on_log:
            on_log(f"radius {radius:.4f} m -> {len(vocab)} tokens (iteration {iteration + 1})")
        if best is None or abs(len(vocab) - target) < abs(len(best) - target):
            best = vocab
        if abs(len(vocab) - target) <= tolerance:
            break
        if len(vocab) > target:
            lo = radius
        else:
            hi = radius
    assert best is not None
    if abs(len(best) - target) > tolerance and on_log:
        on_log(f"WARNING: closest vocabulary has {len(best)} tokens (target {target} +- {tolerance})")
    if len(best) > target + tolerance:
        best = build_vocabulary(segments, best.radius, target + tolerance, box)
    return best


def encode(seg: MotionSegment, vocab: TokenVocabulary) -> int:
    """Nearest template by average corner distance; ties resolve to the lowest id."""
    if seg.substeps != vocab.substeps:
        raise VocabularyError(f"Segment has {seg.substeps} sub-steps, vocabulary uses {vocab.substeps}")
    corners = segment_corners(seg.array, vocab.canonical_box)
    dist = np.mean(np.linalg.norm(vocab.corners - corners, axis=-1), axis=(1, 2))
    return int(np.argmin(dist))


def decode(token_id: int, start: AgentState, vocab: TokenVocabulary, dt: float) -> List[AgentState]:
    """Execute a token from ``start``: S sub-step states with chord-length speeds."""
    vocab.check_valid_id(token_id)
    out: List[AgentState] = []
    prev = start.pose
    for dx, dy, dh in vocab.tokens[int(token_id)].template.rel_poses:
        pose = from_frame(Pose2D(dx, dy, dh), start.pose)
        out.append(start.moved(pose, prev.distance_to(pose) / dt))
        prev = pose
    return out


def tokenize_trajectory(traj: Trajectory, vocab: TokenVocabulary) -> List[int]:
    """Closed-loop tokenization: each window is encoded against the pose the previous tokens reached."""
    substeps = vocab.substeps
    count = (len(traj.states) - 1) // substeps
    current = traj.states[0]
    tokens: List[int] = []
    for k in range(count):
        rel = [
            to_frame(traj.states[k * substeps + j].pose, current.pose).to_tuple() for j in range(1, substeps + 1)
        ]
        token = encode(MotionSegment(tuple(rel)), vocab)
        tokens.append(token)
        current = decode(token, current, vocab, traj.dt)[-1]
    return tokens


def collect_segments(trajectories: Sequence[Trajectory], substeps: int = DEFAULT_SUBSTEPS) -> List[MotionSegment]:
    segments: List[MotionSegment] = []
    for traj in trajectories:
        segments.extend(extract_segments(traj, substeps))
    return segments
