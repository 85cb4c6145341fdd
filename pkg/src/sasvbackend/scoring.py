"""Score trial lists with a trained back-end.

Three scorers share one set of parameters:

  fused      the back-end's final probability (CM-aware)
  asv_only   the calibrated cosine probability, ignoring the CM head
  score_sum  untrained combination: raw cosine plus raw CM score

Enrollment utterances in trial lists follow the usual convention of being
bona fide, so no masking applies at scoring time. Pooling is cached per
distinct (claimed speaker, enrollment ids) so large trial lists stay cheap.
"""

from __future__ import annotations

from .autodiff import Tensor
from .backend import (
    BackendParams,
    Embedding,
    EnrollmentSet,
    asv_probability,
    average_pool,
    cm_probability,
    fuse,
    pool_enrollments,
)
from .data import TrialList, resolve_trials
from .metrics import ScoreRecord, score_sum_baseline

SCORERS = ("fused", "asv_only", "score_sum")


def score_trials(params: BackendParams, trials: TrialList, asv_map, cm_map,
                 pooling: str = "attention", scorer: str = "fused") -> list[ScoreRecord]:
    """Produce one ScoreRecord per trial, in trial order."""
    if scorer not in SCORERS:
        raise ValueError(f"unknown scorer {scorer!r}, expected one of {SCORERS}")
    resolve_trials(trials, asv_map, cm_map)
    params = params.detach()  # never record scoring on a training tape

    pooled: dict[tuple, Tensor] = {}
    records = []
    for t in trials:
        key = (t.claimed_speaker, t.enroll_ids)
        h = pooled.get(key)
        if h is None:
            enroll = EnrollmentSet(
                speaker_id=t.claimed_speaker,
                embeddings=tuple(
                    Embedding(e, "asv", asv_map[e]) for e in t.enroll_ids
                ),
                bonafide_mask=(True,) * len(t.enroll_ids),
            )
            h = (pool_enrollments(params, enroll) if pooling == "attention"
                 else average_pool(enroll))
            pooled[key] = h
        cos, _, p_asv = asv_probability(params, Tensor(asv_map[t.test_id]), h)
        if scorer == "asv_only":
            score = p_asv.item()
        else:
            s_cm, p_cm = cm_probability(params, Tensor(cm_map[t.test_id]))
            if scorer == "score_sum":
                score = score_sum_baseline(cos.item(), s_cm.item())
            else:
                _, p = fuse(params, p_cm, p_asv)
                score = p.item()
        records.append(ScoreRecord(t.claimed_speaker, t.test_id, score, t.label))
    return records
