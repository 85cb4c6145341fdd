"""Spoofing-aware attention back-end.

Enrollment speaker embeddings are pooled into a speaker representative
vector by one scaled-dot self-attention layer followed by one feed-forward
self-attention layer. The test embedding is compared against the pooled
vector with a calibrated cosine (the ASV probability), the countermeasure
embedding is scored by a linear head (the CM probability), and the two
probabilities are fused by a learnable linear transform into the final
score.

Spoofed enrollment entries are both zeroed out and excluded from every
attention softmax, so their content can never influence the pooled vector
or any gradient.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class EmptyEnrollmentError(ValueError):
    """Enrollment set has no entries at all."""


class DegenerateEnrollmentError(ValueError):
    """Every enrollment entry is masked as spoofed."""


class ZeroNormError(ValueError):
    """Cosine similarity was asked for a zero-norm vector."""


CHECKPOINT_MAGIC = b"SASVBKND"
CHECKPOINT_VERSION = 1

POOLING_MODES = ("attention", "average")


@dataclass(frozen=True)
class Embedding:
    """A fixed-dimension embedding keyed by utterance id.

    kind is "asv" for speaker embeddings and "cm" for countermeasure
    embeddings. ASV embeddings must be nonzero (cosine needs a norm).
    """

    utterance_id: str
    kind: str
    values: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.values, dtype=np.float64)
        if v.ndim != 1:
            raise ValueError(f"embedding values must be a vector, got ndim={v.ndim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"embedding {self.utterance_id!r} has non-finite values")
        if self.kind not in ("asv", "cm"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "asv" and not np.any(v):
            raise ZeroNormError(f"ASV embedding {self.utterance_id!r} is a zero vector")
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class EnrollmentSet:
    """Ordered enrollment embeddings plus a bona-fide mask for one speaker."""

    speaker_id: str
    embeddings: tuple[Embedding, ...]
    bonafide_mask: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "embeddings", tuple(self.embeddings))
        object.__setattr__(self, "bonafide_mask", tuple(bool(b) for b in self.bonafide_mask))
        if len(self.embeddings) != len(self.bonafide_mask):
            raise ValueError(
                f"enrollment for {self.speaker_id!r}: {len(self.embeddings)} embeddings "
                f"but {len(self.bonafide_mask)} mask entries"
            )

    def __len__(self) -> int:
        return len(self.embeddings)

    def matrix(self) -> np.ndarray:
        """K x d_a stack of embedding values in enrollment order."""
        return np.stack([e.values for e in self.embeddings])

    def spoof_mask(self) -> np.ndarray:
        """True where the entry is spoofed, i.e. must be masked out."""
        return np.array([not b for b in self.bonafide_mask], dtype=bool)


_PARAM_NAMES = (
    "Wq", "Wk", "Wv", "Wf", "bf", "vf",
    "a", "b", "w_cm", "b_cm", "w1", "w2", "v",
)


class BackendParams:
    """All trainable weights of the back-end.

    Shapes are fixed at construction from (d_a, d_c, h_f). Tensors are
    tape-tracked when a tape is supplied, plain values otherwise.
    """

    def __init__(self, d_a: int, d_c: int, h_f: int, tensors: dict[str, Tensor]):
        self.d_a = d_a
        self.d_c = d_c
        self.h_f = h_f
        expected = self._shapes(d_a, d_c, h_f)
        for name in _PARAM_NAMES:
            t = tensors[name]
            if t.shape != expected[name]:
                raise ad.ShapeError(
                    f"parameter {name}: expected shape {expected[name]}, got {t.shape}"
                )
            setattr(self, name, t)

    @staticmethod
    def _shapes(d_a: int, d_c: int, h_f: int) -> dict[str, tuple[int, int]]:
        return {
            "Wq": (d_a, d_a), "Wk": (d_a, d_a), "Wv": (d_a, d_a),
            "Wf": (h_f, d_a), "bf": (1, h_f), "vf": (1, h_f),
            "a": (1, 1), "b": (1, 1),
            "w_cm": (1, d_c), "b_cm": (1, 1),
            "w1": (1, 1), "w2": (1, 1), "v": (1, 1),
        }

    @classmethod
    def init(cls, d_a: int, d_c: int, h_f: int, rng: np.random.Generator,
             tape: Tape | None = None) -> "BackendParams":
        """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, neutral heads.

        The fusion starts at w1 = w2 = 1, v = -1 so that fuse(0.5, 0.5)
        gives probability 0.5.
        """
        def uniform(shape, fan_in):
            bound = 1.0 / math.sqrt(fan_in)
            return rng.uniform(-bound, bound, size=shape)

        values = {
            "Wq": uniform((d_a, d_a), d_a),
            "Wk": uniform((d_a, d_a), d_a),
            "Wv": uniform((d_a, d_a), d_a),
            "Wf": uniform((h_f, d_a), d_a),
            "bf": np.zeros((1, h_f)),
            "vf": uniform((1, h_f), h_f),
            "a": np.array([[1.0]]),
            "b": np.array([[0.0]]),
            "w_cm": uniform((1, d_c), d_c),
            "b_cm": np.array([[0.0]]),
            "w1": np.array([[1.0]]),
            "w2": np.array([[1.0]]),
            "v": np.array([[-1.0]]),
        }
        make = tape.parameter if tape is not None else Tensor
        return cls(d_a, d_c, h_f, {k: make(v) for k, v in values.items()})

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in _PARAM_NAMES]

    def detach(self) -> "BackendParams":
        """Untracked view sharing the same arrays; safe for scoring."""
        return BackendParams(
            self.d_a, self.d_c, self.h_f,
            {name: t.detach() for name, t in self.parameters()},
        )

    def save(self, path) -> None:
        """Write the versioned binary checkpoint; round-trips bit-exactly."""
        with open(path, "wb") as f:
            f.write(CHECKPOINT_MAGIC)
            f.write(struct.pack("<IIII", CHECKPOINT_VERSION, self.d_a, self.d_c, self.h_f))
            for name, t in self.parameters():
                encoded = name.encode("utf-8")
                f.write(struct.pack("<I", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<II", t.rows, t.cols))
                f.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path, tape: Tape | None = None) -> "BackendParams":
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != CHECKPOINT_MAGIC:
                raise ValueError(f"{path}: not a back-end checkpoint (bad magic {magic!r})")
            version, d_a, d_c, h_f = struct.unpack("<IIII", f.read(16))
            if version != CHECKPOINT_VERSION:
                raise ValueError(f"{path}: unsupported checkpoint version {version}")
            tensors = {}
            for _ in _PARAM_NAMES:
                (name_len,) = struct.unpack("<I", f.read(4))
                name = f.read(name_len).decode("utf-8")
                rows, cols = struct.unpack("<II", f.read(8))
                raw = f.read(rows * cols * 8)
                value = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
                tensors[name] = tape.parameter(value) if tape is not None else Tensor(value)
            if f.read(1):
                raise ValueError(f"{path}: trailing bytes after parameters")
        return cls(d_a, d_c, h_f, tensors)


def _check_enrollment(enroll: EnrollmentSet) -> np.ndarray:
    if len(enroll) == 0:
        raise EmptyEnrollmentError(f"enrollment for {enroll.speaker_id!r} is empty")
    spoof = enroll.spoof_mask()
    if spoof.all():
        raise DegenerateEnrollmentError(
            f"enrollment for {enroll.speaker_id!r} has no bona-fide entry"
        )
    return spoof


def pool_enrollments(params: BackendParams, enroll: EnrollmentSet) -> Tensor:
    """Pool enrollment embeddings into the speaker representative vector.

    Spoofed entries are zeroed and excluded from both attention softmaxes,
    so the result is independent of their content. Returns a 1 x d_a tensor,
    tracked whenever the parameters are.
    """
    spoof = _check_enrollment(enroll)
    E = ad.zero_rows(Tensor(enroll.matrix()), spoof)

    # scaled-dot self-attention with residual, masked rows forced to zero
    Q = ad.matmul(E, params.Wq)
    K = ad.matmul(E, params.Wk)
    V = ad.matmul(E, params.Wv)
    scores = ad.affine(ad.matmul(Q, ad.transpose(K)), 1.0 / math.sqrt(params.d_a))
    A = ad.softmax_masked(scores, spoof)
    O = ad.zero_rows(ad.add(ad.matmul(A, V), E), spoof)

    # feed-forward self-attention pooling over the SDSA outputs
    hidden = ad.tanh(ad.add_bias(ad.matmul(O, ad.transpose(params.Wf)), params.bf))
    logits = ad.transpose(ad.matmul(hidden, ad.transpose(params.vf)))
    alpha = ad.softmax_masked(logits, spoof)
    return ad.matmul(alpha, O)


def average_pool(enroll: EnrollmentSet) -> Tensor:
    """Arithmetic mean of the bona-fide enrollment embeddings only."""
    spoof = _check_enrollment(enroll)
    kept = enroll.matrix()[~spoof]
    return Tensor(kept.mean(axis=0, keepdims=True))


def asv_probability(params: BackendParams, q_asv: Tensor, h: Tensor
                    ) -> tuple[Tensor, Tensor, Tensor]:
    """Calibrated cosine head: returns (cos, s_asv, P_asv) as 1x1 tensors."""
    if not np.any(q_asv.value):
        raise ZeroNormError("test ASV embedding has zero norm")
    if not np.any(h.value):
        raise ZeroNormError("speaker representative vector has zero norm")
    dot = ad.matmul(q_asv, ad.transpose(h))
    cos = ad.div(dot, ad.mul(ad.norm(q_asv), ad.norm(h)))
    s_asv = ad.add(ad.mul(params.a, cos), params.b)
    return cos, s_asv, ad.sigmoid(s_asv)


def cm_probability(params: BackendParams, q_cm: Tensor) -> tuple[Tensor, Tensor]:
    """Linear countermeasure head: returns (s_cm, P_cm) as 1x1 tensors."""
    if q_cm.shape != (1, params.d_c):
        raise ad.ShapeError(
            f"CM embedding shape {q_cm.shape} does not match (1, {params.d_c})"
        )
    s_cm = ad.add(ad.matmul(params.w_cm, ad.transpose(q_cm)), params.b_cm)
    return s_cm, ad.sigmoid(s_cm)


def fuse(params: BackendParams, P_cm: Tensor, P_asv: Tensor) -> tuple[Tensor, Tensor]:
    """Learnable fusion of the two probabilities: returns (s, P)."""
    s = ad.add(ad.add(ad.mul(params.w1, P_cm), ad.mul(params.w2, P_asv)), params.v)
    return s, ad.sigmoid(s)


@dataclass(frozen=True)
class ForwardScores:
    """Every score the back-end produces for one trial, as 1x1 tensors."""

    p: Tensor
    p_asv: Tensor
    p_cm: Tensor
    s: Tensor
    s_asv: Tensor
    s_cm: Tensor
    cos: Tensor

    def items(self) -> dict[str, float]:
        return {k: getattr(self, k).item() for k in
                ("p", "p_asv", "p_cm", "s", "s_asv", "s_cm", "cos")}


def forward(params: BackendParams, q_asv: Embedding, q_cm: Embedding,
            enroll: EnrollmentSet, pooling: str = "attention") -> ForwardScores:
    """Full back-end pass: pool, both heads, fusion.

    pooling selects the attention pooling path or the plain averaging
    ablation. All intermediate scores are exposed so that the asv-only and
    score-sum comparison scorers can reuse one pass.
    """
    if pooling not in POOLING_MODES:
        raise ValueError(f"unknown pooling mode {pooling!r}, expected one of {POOLING_MODES}")
    if q_asv.dim != params.d_a:
        raise ad.ShapeError(f"ASV embedding dim {q_asv.dim} does not match d_a={params.d_a}")
    if pooling == "attention":
        h = pool_enrollments(params, enroll)
    else:
        h = average_pool(enroll)
    cos, s_asv, p_asv = asv_probability(params, Tensor(q_asv.values), h)
    s_cm, p_cm = cm_probability(params, Tensor(q_cm.values))
    s, p = fuse(params, p_cm, p_asv)
    return ForwardScores(p=p, p_asv=p_asv, p_cm=p_cm, s=s, s_asv=s_asv, s_cm=s_cm, cos=cos)
