"""Encoder activation statistics and their CSV export."""

import numpy as np
import pytest

from medtr import data as data_mod
from medtr import model as med_model
from medtr.analyze import (
    analysis_rows,
    branch_streams,
    matched_branch_fraction,
    per_frame_variance_mean,
    standardize_streams,
    utterance_stats,
    write_analysis_csv,
)
from medtr.errors import ContractError
from medtr.tensor import Tensor


def _feats(rng, t_len=16):
    return rng.normal(size=(t_len, data_mod.DEFAULT_D_FEAT)).astype(np.float32)


class TestBranchStreams:
    def test_pre_norm_streams_returned(self, toy_med, rng):
        feats = Tensor(_feats(rng))
        streams = branch_streams(toy_med, feats)
        assert set(streams) == {"eng", "man"}
        enc = med_model.encode(toy_med, feats)
        for br in streams:
            assert np.array_equal(streams[br], enc.pre_norm[br].data.astype(np.float64))
            assert not np.array_equal(streams[br], enc.branches[br].data)

    def test_single_encoder_variant_rejected(self, vocab, rng):
        cfg = med_model.toy_config("baseline", vocab.size, data_mod.DEFAULT_D_FEAT)
        mono = med_model.build_model(cfg, seed=0)
        with pytest.raises(ContractError):
            branch_streams(mono, Tensor(_feats(rng)))


class TestStandardization:
    def test_joint_moments(self, rng):
        streams = {"eng": rng.normal(size=(5, 8)) * 3 + 1, "man": rng.normal(size=(5, 8))}
        out = standardize_streams(streams)
        stacked = np.concatenate([out["eng"].ravel(), out["man"].ravel()])
        assert np.isclose(stacked.mean(), 0.0, atol=1e-12)
        assert np.isclose(stacked.std(), 1.0, atol=1e-12)
        # shared statistics: the relative scale between branches survives
        ratio_before = streams["eng"].std() / streams["man"].std()
        ratio_after = out["eng"].std() / out["man"].std()
        assert np.isclose(ratio_before, ratio_after, atol=1e-9)

    def test_constant_streams_rejected(self):
        with pytest.raises(ContractError):
            standardize_streams({"eng": np.ones((3, 4)), "man": np.ones((3, 4))})

    def test_per_frame_variance_mean(self):
        arr = np.array([[1.0, 3.0], [2.0, 2.0]])
        # frame variances: 1.0 and 0.0
        assert per_frame_variance_mean(arr) == 0.5


class TestSymmetry:
    def test_tied_branches_have_equal_stats(self, vocab, rng):
        # after copying one branch onto the other, the contrast must vanish
        cfg = med_model.toy_config("med", vocab.size, data_mod.DEFAULT_D_FEAT)
        params = med_model.build_model(cfg, seed=13)
        for name, t in params.registry.items():
            if name.startswith("enc.eng."):
                params.registry["enc.man." + name[len("enc.eng."):]].data[...] = t.data
        stats = utterance_stats(params, Tensor(_feats(rng)))
        assert np.isclose(stats["eng"], stats["man"], atol=1e-12)


class TestRows:
    def test_row_count_and_layout(self, toy_med, rng):
        feats = Tensor(_feats(rng, t_len=13))
        rows = analysis_rows(toy_med, feats)
        t_out = med_model.encode(toy_med, feats).t_len
        assert len(rows) == 2 * t_out * toy_med.config.d_model
        branches = {r[3] for r in rows}
        assert branches == {"eng", "man"}
        frames = {r[0] for r in rows}
        assert frames == set(range(t_out))


class TestCsvExport:
    def test_file_shapes(self, toy_med, tiny_cs_corpus, tmp_path):
        corpus = tiny_cs_corpus[:2]
        csv_path = tmp_path / "acts.csv"
        summary_path = tmp_path / "acts.summary.csv"
        summaries = write_analysis_csv(csv_path, toy_med, corpus, summary_path)
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "utt_id,frame,channel,value,encoder"
        expect_rows = 0
        for utt in corpus:
            t_out = med_model.encode(toy_med, Tensor(utt.features)).t_len
            expect_rows += 2 * t_out * toy_med.config.d_model
        assert len(lines) == 1 + expect_rows
        sm = summary_path.read_text().splitlines()
        assert sm[0] == "utt_id,var_eng,var_man"
        assert len(sm) == 1 + len(corpus)
        assert len(summaries) == len(corpus)
        first = sm[1].split(",")
        assert first[0] == corpus[0].utt_id
        assert np.isclose(float(first[1]), summaries[0][1]["eng"], rtol=1e-4)


class TestMatchedFraction:
    def test_range_and_determinism(self, toy_med, lang_specs):
        corpus = data_mod.gen_monolingual(lang_specs["A"], 6, seed=77)
        f1 = matched_branch_fraction(toy_med, corpus, {"A": "eng", "B": "man"})
        f2 = matched_branch_fraction(toy_med, corpus, {"A": "eng", "B": "man"})
        assert 0.0 <= f1 <= 1.0 and f1 == f2

    def test_flipping_the_map_flips_wins(self, toy_med, lang_specs):
        # with two branches, a win under one assignment is a loss under
        # the swapped assignment
        corpus = data_mod.gen_monolingual(lang_specs["B"], 5, seed=78)
        f = matched_branch_fraction(toy_med, corpus, {"A": "eng", "B": "man"})
        g = matched_branch_fraction(toy_med, corpus, {"A": "man", "B": "eng"})
        assert np.isclose(f + g, 1.0, atol=1e-12)
