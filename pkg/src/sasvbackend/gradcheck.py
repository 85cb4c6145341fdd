"""Finite-difference validation of the analytic gradients.

Builds a random tiny batch, computes the full-batch BCE loss (no hard
selection, so the loss surface is smooth), and compares every parameter
element's analytic gradient against central differences of the same loss
evaluated through an untracked view of the parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .backend import BackendParams, Embedding
from .sampling import UtteranceRecord, draw_batch, expand_pairs
from .training import TrainConfig, batch_loss

FD_STEP = 1e-5
TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradCheckResult:
    """Max relative finite-difference error per parameter group."""

    errors: dict[str, float]
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _random_pool(rng, n_speakers, n_utts_half, d_a, d_c):
    pool = []
    for s in range(n_speakers):
        speaker = f"g{s}"
        for j in range(2 * n_utts_half):
            bona = j < n_utts_half
            utt = f"{speaker}-{j}"
            vec = rng.standard_normal(d_a)
            vec /= np.sqrt(np.sum(vec * vec))
            pool.append(UtteranceRecord(
                speaker_id=speaker, utterance_id=utt, bonafide=bona,
                asv_embedding=Embedding(utt, "asv", vec),
                cm_embedding=Embedding(utt, "cm", rng.standard_normal(d_c)),
            ))
    return pool


def gradient_check(seed: int = 0, d_a: int = 8, d_c: int = 6, h_f: int = 4,
                   speakers: int = 2, utterances: int = 4,
                   pooling: str = "attention", step: float = FD_STEP) -> GradCheckResult:
    """Compare analytic and finite-difference gradients of one batch loss.

    The loss is the mean BCE over every pair of the batch; hard selection
    is disabled by setting the negative budget above the batch size.
    """
    rng = np.random.default_rng(seed)
    pool = _random_pool(rng, speakers, utterances // 2 + 1, d_a, d_c)
    config = TrainConfig(
        speakers_per_batch=speakers, utterances_per_speaker=utterances,
        hard_negative_top_n=10 * speakers * speakers * utterances,
        pooling=pooling, hidden_dim=h_f, seed=seed,
    )
    batch = draw_batch(pool, speakers, utterances, rng)
    pairs = expand_pairs(batch)

    tape = ad.Tape()
    params = BackendParams.init(d_a, d_c, h_f, rng, tape=tape)
    loss, _ = batch_loss(params, pairs, config)
    tape.backward(loss)
    analytic = {name: t.grad.copy() for name, t in params.parameters()}

    detached = params.detach()

    def loss_value() -> float:
        value, _ = batch_loss(detached, pairs, config)
        return value.item()

    errors: dict[str, float] = {}
    for name, tensor in params.parameters():
        flat = tensor.value.reshape(-1)
        fd = np.zeros_like(flat)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            up = loss_value()
            flat[i] = original - step
            down = loss_value()
            flat[i] = original
            fd[i] = (up - down) / (2.0 * step)
        ag = analytic[name].reshape(-1)
        errors[name] = float(np.max(np.abs(ag - fd) / (np.abs(ag) + 1e-8)))
    return GradCheckResult(errors=errors)
