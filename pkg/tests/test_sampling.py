"""Sampler tests: batch layout, pair expansion counts, label rules."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sasvbackend import sampling as sm
from sasvbackend.backend import Embedding


def make_pool(n_speakers, bona_per_speaker, spoof_per_speaker, d_a=4, d_c=3, seed=0):
    rng = np.random.default_rng(seed)
    pool = []
    for s in range(n_speakers):
        speaker = f"spk{s:02d}"
        for j in range(bona_per_speaker + spoof_per_speaker):
            bona = j < bona_per_speaker
            utt = f"{speaker}-{'b' if bona else 's'}{j:02d}"
            pool.append(sm.UtteranceRecord(
                speaker_id=speaker,
                utterance_id=utt,
                bonafide=bona,
                asv_embedding=Embedding(utt, "asv", rng.standard_normal(d_a)),
                cm_embedding=Embedding(utt, "cm", rng.standard_normal(d_c)),
            ))
    return pool


class TestDrawBatch:
    def test_table_layout_m3_k4(self):
        pool = make_pool(3, 2, 2)
        batch = sm.draw_batch(pool, 3, 4, np.random.default_rng(0))
        assert batch.m == 3 and batch.k == 4
        for block in batch.speakers:
            bona = [u.bonafide for u in block.utterances]
            assert sum(bona) == 2
            assert all(u.speaker_id == block.speaker_id for u in block.utterances)

    def test_full_scale_configuration_size(self):
        pool = make_pool(20, 8, 8)
        batch = sm.draw_batch(pool, 16, 10, np.random.default_rng(1))
        total = sum(len(b.utterances) for b in batch.speakers)
        assert total == 160
        for block in batch.speakers:
            assert sum(u.bonafide for u in block.utterances) == 5

    def test_no_replacement_within_batch(self):
        pool = make_pool(4, 3, 3)
        batch = sm.draw_batch(pool, 3, 6, np.random.default_rng(5))
        ids = [u.utterance_id for b in batch.speakers for u in b.utterances]
        assert len(ids) == len(set(ids))
        speakers = [b.speaker_id for b in batch.speakers]
        assert len(speakers) == len(set(speakers))

    def test_deterministic_given_seed(self):
        pool = make_pool(6, 4, 4)
        def draw_sequence():
            rng = np.random.default_rng(77)
            return [
                [u.utterance_id for b in sm.draw_batch(pool, 3, 4, rng).speakers
                 for u in b.utterances]
                for _ in range(5)
            ]
        assert draw_sequence() == draw_sequence()

    def test_pool_exhausted_names_deficiency(self):
        pool = make_pool(3, 1, 4)  # only one bona-fide utterance per speaker
        with pytest.raises(sm.PoolExhaustedError, match="bona-fide"):
            sm.draw_batch(pool, 3, 4, np.random.default_rng(0))

    def test_too_few_speakers(self):
        pool = make_pool(2, 4, 4)
        with pytest.raises(sm.PoolExhaustedError):
            sm.draw_batch(pool, 3, 4, np.random.default_rng(0))

    def test_k2_always_degenerate(self):
        # one bona-fide entry per block: excluding it empties the enrollment
        pool = make_pool(4, 3, 3)
        with pytest.raises(sm.PoolExhaustedError, match="attempts"):
            sm.draw_batch(pool, 3, 2, np.random.default_rng(0))

    def test_odd_k_rejected(self):
        pool = make_pool(4, 3, 3)
        with pytest.raises(ValueError, match="even"):
            sm.draw_batch(pool, 3, 5, np.random.default_rng(0))


class TestExpandPairs:
    def test_table_counts_m3_k4(self):
        pool = make_pool(3, 2, 2)
        batch = sm.draw_batch(pool, 3, 4, np.random.default_rng(2))
        pairs = sm.expand_pairs(batch)
        assert len(pairs) == 36
        assert sum(p.positive for p in pairs) == 6

    def test_full_scale_counts_m16_k10(self):
        pool = make_pool(20, 8, 8)
        batch = sm.draw_batch(pool, 16, 10, np.random.default_rng(3))
        pairs = sm.expand_pairs(batch)
        assert len(pairs) == 2560
        assert sum(p.positive for p in pairs) == 80

    def test_spoofed_test_of_own_speaker_is_negative(self):
        pool = make_pool(3, 2, 2)
        batch = sm.draw_batch(pool, 3, 4, np.random.default_rng(4))
        pairs = sm.expand_pairs(batch)
        same_speaker_spoofed = [
            p for p in pairs
            if p.test.speaker_id == p.enroll.speaker_id and not p.test.bonafide
        ]
        assert same_speaker_spoofed
        assert all(not p.positive for p in same_speaker_spoofed)

    def test_label_rule_exhaustive(self):
        pool = make_pool(4, 3, 3)
        batch = sm.draw_batch(pool, 4, 6, np.random.default_rng(6))
        for p in sm.expand_pairs(batch):
            expected = (p.test.speaker_id == p.enroll.speaker_id) and p.test.bonafide
            assert p.positive == expected

    def test_enrollment_never_contains_test(self):
        pool = make_pool(3, 2, 2)
        batch = sm.draw_batch(pool, 3, 4, np.random.default_rng(7))
        for p in sm.expand_pairs(batch):
            enrolled = {e.utterance_id for e in p.enroll.embeddings}
            assert p.test.utterance_id not in enrolled

    def test_enrollment_size_and_index_exclusion(self):
        pool = make_pool(3, 2, 2)
        batch = sm.draw_batch(pool, 3, 4, np.random.default_rng(8))
        pairs = sm.expand_pairs(batch)
        blocks = batch.speakers
        i = 0
        for l in range(3):
            for m_idx in range(4):
                for n in range(3):
                    p = pairs[i]
                    i += 1
                    assert len(p.enroll) == 3
                    expected = [
                        u.utterance_id
                        for j, u in enumerate(blocks[n].utterances) if j != m_idx
                    ]
                    assert [e.utterance_id for e in p.enroll.embeddings] == expected

    def test_every_enrollment_keeps_a_bonafide(self):
        pool = make_pool(5, 2, 2)
        rng = np.random.default_rng(9)
        for _ in range(10):
            batch = sm.draw_batch(pool, 3, 4, rng)
            for p in sm.expand_pairs(batch):
                assert any(p.enroll.bonafide_mask)

    @given(m=st.integers(2, 5), half_k=st.integers(1, 3), seed=st.integers(0, 1000))
    @settings(max_examples=40, deadline=None)
    def test_pair_count_formula(self, m, half_k, seed):
        k = 2 * half_k
        if k == 2:
            return  # single bona-fide entry per block cannot survive exclusion
        pool = make_pool(m + 1, half_k + 1, half_k + 1, seed=seed)
        batch = sm.draw_batch(pool, m, k, np.random.default_rng(seed))
        pairs = sm.expand_pairs(batch)
        assert len(pairs) == m * k * m
        assert sum(p.positive for p in pairs) == m * k // 2
