"""Optimizer, schedule, stage loop, and the transfer recipe."""

import math

import numpy as np
import pytest

from medtr import data as data_mod
from medtr import model as med_model
from medtr import train as train_mod
from medtr.checkpoint import load_archive
from medtr.errors import ConfigError, ContractError, DivergenceError
from medtr.tensor import Tensor
from medtr.train import (
    BRANCH_OF_LANG,
    AdamState,
    TrainConfig,
    adam_step,
    evaluate_ter,
    global_grad_norm,
    make_batches,
    noam_lr,
    paper_train_config,
    restore_model,
    run_recipe,
    snapshot_state,
    split_dev,
    train_stage,
    utterance_loss,
    write_report,
)


class TestSchedule:
    def test_closed_form(self):
        for step, d_model, warmup, scl in [(1, 256, 25000, 1.0), (300, 32, 300, 2.0),
                                           (9999, 256, 400, 0.5)]:
            expect = scl * d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)
            assert noam_lr(step, d_model, warmup, scl) == expect

    def test_peaks_at_warmup(self):
        w = 50
        ramp = [noam_lr(s, 64, w) for s in range(1, w + 1)]
        assert all(a < b for a, b in zip(ramp, ramp[1:]))
        assert noam_lr(w + 1, 64, w) < noam_lr(w, 64, w)
        assert np.isclose(noam_lr(4 * w, 64, w), 0.5 * noam_lr(w, 64, w), atol=1e-12)

    def test_step_must_be_positive(self):
        with pytest.raises(ContractError):
            noam_lr(0, 64, 100)


def _one_param_registry(values):
    t = Tensor(np.asarray(values, dtype=np.float32), requires_grad=True, name="w")
    return {"w": t}, t


class TestAdam:
    def test_first_step_hand_values(self):
        reg, t = _one_param_registry([1.0, -3.0])
        t.grad = np.array([2.0, 0.0], dtype=np.float32)
        moments = AdamState(reg)
        ok = adam_step(reg, moments, step=1, lr=0.5, clip_norm=None)
        assert ok
        # bias correction makes the first update lr * g / (|g| + eps)
        assert np.isclose(t.data[0], 1.0 - 0.5, atol=1e-6)
        assert t.data[1] == -3.0  # zero gradient, zero moment
        assert np.allclose(moments.m["w"], [0.2, 0.0], atol=1e-7)
        assert np.allclose(moments.v["w"], [0.08, 0.0], atol=1e-7)

    def test_global_norm_clipping_scales_moments(self):
        reg, t = _one_param_registry([0.0, 0.0])
        t.grad = np.array([3.0, 4.0], dtype=np.float32)  # norm 5
        moments = AdamState(reg)
        adam_step(reg, moments, step=1, lr=0.1, clip_norm=2.5)
        assert np.allclose(moments.m["w"], 0.1 * np.array([1.5, 2.0]), atol=1e-7)

    def test_non_finite_gradient_skips_update(self):
        reg, t = _one_param_registry([1.0, 2.0])
        t.grad = np.array([np.nan, 1.0], dtype=np.float32)
        moments = AdamState(reg)
        before = t.data.copy()
        ok = adam_step(reg, moments, step=1, lr=0.5)
        assert not ok
        assert np.array_equal(t.data, before)
        assert np.all(moments.m["w"] == 0.0) and np.all(moments.v["w"] == 0.0)

    def test_missing_gradient_means_no_motion(self):
        reg, t = _one_param_registry([1.0])
        moments = AdamState(reg)
        assert adam_step(reg, moments, step=1, lr=0.5)
        assert t.data[0] == 1.0

    def test_step_contract(self):
        reg, _ = _one_param_registry([1.0])
        with pytest.raises(ContractError):
            adam_step(reg, AdamState(reg), step=0, lr=0.1)

    def test_global_grad_norm(self):
        reg, t = _one_param_registry([0.0, 0.0])
        t.grad = np.array([3.0, 4.0], dtype=np.float32)
        assert np.isclose(global_grad_norm(reg), 5.0, atol=1e-7)
        t.grad = None
        assert global_grad_norm(reg) == 0.0


class TestTrainConfig:
    def test_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(epochs=0)
        with pytest.raises(ConfigError):
            TrainConfig(warmup_steps=0)
        with pytest.raises(ConfigError):
            TrainConfig(batch_frames=0)

    def test_reference_scale_defaults(self):
        tcfg = paper_train_config()
        assert tcfg.epochs == 30 and tcfg.warmup_steps == 25000

    def test_branch_assignment(self):
        assert BRANCH_OF_LANG == {"A": "eng", "B": "man"}


class TestBatching:
    class _FakeUtt:
        def __init__(self, utt_id, frames):
            self.utt_id = utt_id
            self.features = np.zeros((frames, 1), dtype=np.float32)

    def test_groups_by_frame_budget(self):
        corpus = [self._FakeUtt(f"u{i}", n) for i, n in enumerate([10, 5, 8, 20])]
        batches = make_batches(corpus, 15)
        sizes = [[corpus[i].features.shape[0] for i in b] for b in batches]
        assert sizes == [[5, 8], [10], [20]]
        flat = [i for b in batches for i in b]
        assert sorted(flat) == [0, 1, 2, 3]

    def test_oversized_utterance_gets_own_batch(self):
        corpus = [self._FakeUtt("a", 100), self._FakeUtt("b", 3)]
        batches = make_batches(corpus, 10)
        assert [[corpus[i].utt_id for i in b] for b in batches] == [["b"], ["a"]]

    def test_ties_break_by_utt_id(self):
        corpus = [self._FakeUtt("z", 5), self._FakeUtt("a", 5)]
        assert make_batches(corpus, 100) == [[1, 0]]


class TestSnapshotRestore:
    def test_roundtrip_bitwise(self, toy_med):
        snap = snapshot_state(toy_med)
        for t in toy_med.registry.values():
            t.data[...] = t.data + 1.0
        n = restore_model(toy_med, snap)
        assert n == len(toy_med.registry)
        for name, t in toy_med.registry.items():
            assert np.array_equal(t.data, snap[name])

    def test_optimizer_entries_ignored(self, toy_med):
        moments = AdamState(toy_med.registry)
        snap = snapshot_state(toy_med, moments, step=7)
        assert "opt.step" in snap and any(k.startswith("opt.m.") for k in snap)
        assert restore_model(toy_med, snap) == len(toy_med.registry)

    def test_shape_mismatch_rejected(self, toy_med):
        snap = snapshot_state(toy_med)
        snap["dec.embed.weight"] = np.zeros((2, 2), dtype=np.float32)
        with pytest.raises(ContractError):
            restore_model(toy_med, snap)


class TestUtteranceLoss:
    def test_mix_and_determinism(self, toy_med, tiny_cs_corpus):
        utt = tiny_cs_corpus[0]
        mol = utterance_loss(toy_med, utt, mol_weight=0.3, smoothing=0.1)
        expect = 0.3 * float(mol.ctc_part.data) + 0.7 * float(mol.att_part.data)
        assert np.isclose(float(mol.total.data), expect, atol=1e-5)
        again = utterance_loss(toy_med, utt, mol_weight=0.3, smoothing=0.1)
        assert float(again.total.data) == float(mol.total.data)


def _tiny_tcfg(**over):
    base = dict(
        epochs=2, batch_frames=300, lr_scale=1.0, warmup_steps=20,
        seed=0, augment=False, dev_beam=0,
    )
    base.update(over)
    return TrainConfig(**base)


def _fresh_model(vocab, seed=5):
    config = med_model.toy_config("med", vocab.size, data_mod.DEFAULT_D_FEAT)
    return med_model.build_model(config, seed)


class TestTrainStage:
    def test_curve_checkpoint_and_restore(self, vocab, tiny_cs_corpus, tmp_path):
        params = _fresh_model(vocab)
        train, dev = tiny_cs_corpus[:8], tiny_cs_corpus[8:12]
        ckpt = tmp_path / "stage.ckpt"
        res = train_stage(params, train, dev, _tiny_tcfg(), vocab, ckpt_path=str(ckpt))
        assert len(res.curve) == 2 and not res.aborted
        assert res.steps > 0 and res.best_epoch >= 1
        assert [st.epoch for st in res.curve] == [1, 2]
        # the checkpoint holds exactly the state left in params (best dev)
        archive = load_archive(ckpt)
        assert "opt.step" in archive
        for name, t in params.registry.items():
            assert np.array_equal(archive[name], t.data)

    def test_bitwise_repeatability(self, vocab, tiny_cs_corpus):
        train, dev = tiny_cs_corpus[:8], tiny_cs_corpus[8:12]
        runs = []
        for _ in range(2):
            params = _fresh_model(vocab)
            res = train_stage(params, train, dev, _tiny_tcfg(), vocab)
            runs.append((params, res))
        (p1, r1), (p2, r2) = runs
        assert [(s.train_loss, s.dev_loss, s.dev_ter) for s in r1.curve] == [
            (s.train_loss, s.dev_loss, s.dev_ter) for s in r2.curve
        ]
        for name in p1.registry:
            assert np.array_equal(p1.registry[name].data, p2.registry[name].data)

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts_and_restores(self, vocab, tiny_cs_corpus):
        params = _fresh_model(vocab)
        params.ctc_b.data[...] = np.inf  # poisoned state: loss is non-finite
        res = train_stage(
            params, tiny_cs_corpus[:4], tiny_cs_corpus[4:6], _tiny_tcfg(), vocab
        )
        assert res.aborted and res.curve == []

    def test_stop_ter_short_circuits(self, vocab, tiny_cs_corpus):
        params = _fresh_model(vocab)
        res = train_stage(
            params, tiny_cs_corpus[:4], tiny_cs_corpus[4:6],
            _tiny_tcfg(epochs=5, stop_ter=1e9), vocab,
        )
        assert len(res.curve) == 1 and not res.aborted

    def test_empty_corpora_rejected(self, vocab, tiny_cs_corpus):
        params = _fresh_model(vocab)
        with pytest.raises(ContractError):
            train_stage(params, [], tiny_cs_corpus[:2], _tiny_tcfg(), vocab)
        with pytest.raises(ContractError):
            train_stage(params, tiny_cs_corpus[:2], [], _tiny_tcfg(), vocab)


class TestEvaluateTer:
    def test_finite_and_subsettable(self, toy_med, vocab, tiny_cs_corpus):
        full = evaluate_ter(toy_med, tiny_cs_corpus[:2], vocab, beam=0)
        assert math.isfinite(full) and full >= 0.0
        one = evaluate_ter(toy_med, tiny_cs_corpus[:2], vocab, max_utts=1, beam=0)
        assert math.isfinite(one)

    def test_beam_path_runs(self, toy_med, vocab, tiny_cs_corpus):
        out = evaluate_ter(toy_med, tiny_cs_corpus[:1], vocab, beam=2, alpha=0.3)
        assert math.isfinite(out) and out >= 0.0


class TestReport:
    def test_row_format(self, tmp_path):
        rows = [
            ("pretrain_a", train_mod.EpochStats(1, 1.5, 2.0, 88.0)),
            ("finetune", train_mod.EpochStats(2, 0.5, 0.75, 12.345)),
        ]
        path = tmp_path / "report.tsv"
        write_report(path, rows)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        stage, epoch, tr, dv, ter_s = lines[1].split("\t")
        assert stage == "finetune" and int(epoch) == 2
        assert float(tr) == 0.5 and float(dv) == 0.75 and float(ter_s) == 12.345


class TestSplitDev:
    def test_fraction_and_minimum(self):
        xs = list(range(30))
        tr, dv = split_dev(xs, frac=0.1)
        assert len(dv) == 3 and tr + dv == xs
        tr, dv = split_dev([1, 2], frac=0.1)
        assert len(dv) == 1  # never empty


def _recipe_corpora(vocab, lang_specs, n_mono=10, n_cs=12):
    a = data_mod.gen_monolingual(lang_specs["A"], n_mono, seed=41, utt_prefix="a")
    b = data_mod.gen_monolingual(lang_specs["B"], n_mono, seed=42, shard=2, utt_prefix="b")
    cs = data_mod.gen_code_switching(
        lang_specs["A"], lang_specs["B"], n_cs + 3, 0.3, 0.69, seed=43
    )
    corpora = {
        "train_a": a,
        "train_b": b,
        "cs_train": cs[:n_cs],
        "cs_dev": cs[n_cs:],
    }
    data_mod.normalize(corpora, "cs_train")
    return corpora


class TestRecipe:
    def test_branch_pretraining_accounting(self, vocab, lang_specs, tmp_path):
        corpora = _recipe_corpora(vocab, lang_specs)
        tcfg = _tiny_tcfg(epochs=1)
        res = run_recipe(
            "med", corpora, vocab, model_seed=7, tcfg=tcfg,
            workdir=str(tmp_path), pretrain="branches",
        )
        for branch in ("eng", "man"):
            loaded, expected = res.transplant_counts[branch]
            assert loaded == expected > 0
        stages = {name for name, _ in res.report_rows}
        assert stages == {"pretrain_a", "pretrain_b", "finetune"}
        assert set(res.stage_results) == {"pretrain_a", "pretrain_b", "finetune"}
        for stage in ("pretrain_a", "pretrain_b", "finetune"):
            assert (tmp_path / f"{stage}.ckpt").exists()

    def test_combined_pretraining_covers_all_branches(self, vocab, lang_specs, tmp_path):
        corpora = _recipe_corpora(vocab, lang_specs)
        res = run_recipe(
            "med", corpora, vocab, model_seed=7, tcfg=_tiny_tcfg(epochs=1),
            workdir=str(tmp_path), pretrain="combined",
        )
        assert set(res.transplant_counts) == {"eng", "man"}
        assert "pretrain_ab" in res.stage_results

    def test_scratch_recipe_has_no_transplants(self, vocab, lang_specs, tmp_path):
        corpora = _recipe_corpora(vocab, lang_specs)
        res = run_recipe(
            "baseline", corpora, vocab, model_seed=7, tcfg=_tiny_tcfg(epochs=1),
            workdir=str(tmp_path), pretrain="none",
        )
        assert res.transplant_counts == {}
        assert set(res.stage_results) == {"finetune"}

    def test_unknown_pretrain_mode(self, vocab, lang_specs, tmp_path):
        corpora = _recipe_corpora(vocab, lang_specs)
        with pytest.raises(ConfigError):
            run_recipe(
                "med", corpora, vocab, model_seed=7, tcfg=_tiny_tcfg(),
                workdir=str(tmp_path), pretrain="full",
            )
