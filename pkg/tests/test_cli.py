"""End-to-end command-line flows on a miniature dataset."""

import os

import pytest

from medtr.checkpoint import load_archive
from medtr.cli import SPLITS, main
from medtr.data import load_corpus, make_vocab
from medtr.decode import save_ngram, train_ngram

TINY_CFG = """
variant = med
n_enc_layers = 2
n_dec_layers = 2
d_model = 32
d_ff = 64
n_heads = 2
dropout = 0.0
epochs = 1
batch_frames = 400
lr_scale = 1.0
warmup_steps = 20
augment = false
beam = 2
alpha = 0.3
beta = 0.3
n_mono = 6
n_cs_train = 10
n_cs_dev = 3
n_eval = 4
seed = 0
"""


@pytest.fixture(scope="session")
def cli_env(tmp_path_factory):
    """Shared config + generated data + one trained checkpoint."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    data = root / "data"
    assert main(["gen", "--config", str(cfg), "--out", str(data)]) == 0
    train_out = root / "train"
    assert (
        main([
            "train", "--config", str(cfg), "--data", str(data),
            "--out", str(train_out),
        ])
        == 0
    )
    return {"root": root, "cfg": str(cfg), "data": str(data), "train": str(train_out)}


class TestGen:
    def test_reports_and_writes_all_splits(self, cli_env, tmp_path, capsys):
        out = tmp_path / "d"
        assert main(["gen", "--config", cli_env["cfg"], "--out", str(out)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == len(SPLITS)
        counts = {}
        for line in lines:
            tag, split, n = line.split("\t")
            assert tag == "gen"
            counts[split] = int(n)
        assert counts["train_a"] == 6 and counts["cs_train"] == 10
        assert counts["eval_a"] == counts["eval_b"] == 4
        for split in SPLITS:
            assert (out / f"{split}.tsv").exists()
            assert (out / f"{split}.feats").exists()
        assert (out / "meta.txt").exists()

    def test_byte_deterministic(self, cli_env, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["gen", "--config", cli_env["cfg"], "--out", str(a)]) == 0
        assert main(["gen", "--config", cli_env["cfg"], "--out", str(b)]) == 0
        for split in SPLITS:
            for suffix in (".tsv", ".feats"):
                fa = (a / (split + suffix)).read_bytes()
                fb = (b / (split + suffix)).read_bytes()
                assert fa == fb, f"{split}{suffix} differs between identical runs"

    def test_loadable_roundtrip(self, cli_env):
        vocab = make_vocab(20)
        corpus = load_corpus(cli_env["data"], "cs_dev", vocab, 20)
        assert len(corpus) == 3

    def test_seed_flag_changes_data(self, cli_env, tmp_path):
        out = tmp_path / "s9"
        assert main([
            "gen", "--config", cli_env["cfg"], "--seed", "9", "--out", str(out)
        ]) == 0
        a = (out / "cs_train.feats").read_bytes()
        b = open(os.path.join(cli_env["data"], "cs_train.feats"), "rb").read()
        assert a != b


class TestTrain:
    def test_outputs(self, cli_env, capsys):
        # ran inside the fixture; verify its artifacts
        assert os.path.exists(os.path.join(cli_env["train"], "train.ckpt"))
        report = os.path.join(cli_env["train"], "report.tsv")
        lines = open(report).read().strip().splitlines()
        assert len(lines) == 1  # one epoch
        stage, epoch, train_loss, dev_loss, dev_ter = lines[0].split("\t")
        assert stage == "train" and int(epoch) == 1
        float(train_loss), float(dev_loss), float(dev_ter)

    def test_variant_override(self, cli_env, tmp_path, capsys):
        out = tmp_path / "b"
        code = main([
            "train", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out), "--variant", "baseline",
        ])
        assert code == 0
        archive = load_archive(out / "train.ckpt")
        assert any(k.startswith("enc.shared.") for k in archive)
        assert not any(k.startswith("enc.eng.") for k in archive)

    def test_missing_data_dir_fails_cleanly(self, cli_env, tmp_path, capsys):
        code = main([
            "train", "--config", cli_env["cfg"], "--data", str(tmp_path / "none"),
            "--out", str(tmp_path / "o"),
        ])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("medtr-error\tInputError\t")

    def test_meta_mismatch_detected(self, cli_env, tmp_path, capsys):
        other_cfg = tmp_path / "other.cfg"
        other_cfg.write_text(TINY_CFG + "vocab_per_lang = 10\n")
        code = main([
            "train", "--config", str(other_cfg), "--data", cli_env["data"],
            "--out", str(tmp_path / "o"),
        ])
        assert code == 1
        assert "vocab_per_lang" in capsys.readouterr().err


class TestRecipe:
    def test_transplant_lines_and_report(self, cli_env, tmp_path, capsys):
        out = tmp_path / "r"
        code = main([
            "recipe", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out),
        ])
        assert code == 0
        lines = capsys.readouterr().out.strip().splitlines()
        trans = [l for l in lines if l.startswith("transplant\t")]
        assert len(trans) == 2
        for line in trans:
            _, branch, counts = line.split("\t")
            loaded, expected = counts.split("/")
            assert branch in ("eng", "man")
            assert loaded == expected and int(loaded) > 0
        stages = {l.split("\t")[0] for l in lines if not l.startswith("transplant")}
        assert stages == {"pretrain_a", "pretrain_b", "finetune"}
        report = (out / "report.tsv").read_text().strip().splitlines()
        assert len(report) == 3  # one epoch per stage


class TestAblation:
    def test_table_covers_all_variants(self, cli_env, tmp_path, capsys):
        out = tmp_path / "ab"
        code = main([
            "ablation", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out), "--beam", "1",
        ])
        assert code == 0
        table = (out / "ablation.tsv").read_text().strip().splitlines()
        assert table[0] == "variant\tsplit\tter_all\tter_a\tter_b"
        assert len(table) == 1 + 8
        seen = [tuple(l.split("\t")[:2]) for l in table[1:]]
        for variant in ("baseline", "m_en", "m_de", "med"):
            assert (variant, "eval_a") in seen and (variant, "eval_b") in seen
        for line in table[1:]:
            for cell in line.split("\t")[2:]:
                float(cell)  # trained arms report numbers, not "failed"
        for variant in ("baseline", "m_en", "m_de", "med"):
            assert (out / f"{variant}.ckpt").exists()


class TestDecode:
    def test_report_and_hypotheses(self, cli_env, tmp_path, capsys):
        out = tmp_path / "dec"
        code = main([
            "decode", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out), "--ckpt",
            os.path.join(cli_env["train"], "train.ckpt"), "--beam", "2",
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        assert stdout.startswith("decode\tcs_dev\tbeam=2\t")
        hyp_lines = (out / "cs_dev.hyp.tsv").read_text().strip().splitlines()
        assert len(hyp_lines) == 3
        report = dict(
            l.split("\t") for l in (out / "cs_dev.ter.txt").read_text().strip().splitlines()
        )
        assert report["split"] == "cs_dev"
        assert float(report["beta"]) == 0.0  # no LM given: fusion disabled
        assert int(report["n_ref"]) > 0
        for key in ("ter_all", "ter_a", "ter_b", "subs", "dels", "ins"):
            assert key in report

    def test_lm_fusion_path(self, cli_env, tmp_path, capsys):
        vocab = make_vocab(20)
        corpus = load_corpus(cli_env["data"], "cs_train", vocab, 20)
        seqs = [[vocab.tokens[i] for i in utt.labels] for utt in corpus]
        lm_path = tmp_path / "lm.tsv"
        save_ngram(train_ngram(seqs, list(vocab.tokens[3:])), lm_path)
        out = tmp_path / "dec"
        code = main([
            "decode", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out), "--ckpt",
            os.path.join(cli_env["train"], "train.ckpt"),
            "--beam", "2", "--lm", str(lm_path), "--beta", "0.2",
        ])
        assert code == 0
        report = dict(
            l.split("\t") for l in (out / "cs_dev.ter.txt").read_text().strip().splitlines()
        )
        assert float(report["beta"]) == 0.2

    def test_wrong_variant_rejected(self, cli_env, tmp_path, capsys):
        code = main([
            "decode", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(tmp_path / "x"), "--ckpt",
            os.path.join(cli_env["train"], "train.ckpt"), "--variant", "baseline",
        ])
        assert code == 1
        assert capsys.readouterr().err.startswith("medtr-error\tInputError\t")

    def test_vocab_mismatch_detected_before_decoding(self, cli_env, tmp_path, capsys):
        small_cfg = tmp_path / "small.cfg"
        small_cfg.write_text(
            TINY_CFG + "vocab_per_lang = 12\nn_mono = 4\nn_cs_train = 4\n"
            "n_cs_dev = 2\nn_eval = 2\n"
        )
        small_data = tmp_path / "sd"
        assert main(["gen", "--config", str(small_cfg), "--out", str(small_data)]) == 0
        code = main([
            "decode", "--config", str(small_cfg), "--data", str(small_data),
            "--out", str(tmp_path / "o"), "--ckpt",
            os.path.join(cli_env["train"], "train.ckpt"),
        ])
        assert code == 1
        err = capsys.readouterr().err
        assert err.startswith("medtr-error\tInputError\t")
        assert "vocabulary size" in err

    def test_corrupt_checkpoint_rejected(self, cli_env, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
        code = main([
            "decode", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(tmp_path / "o"), "--ckpt", str(bad),
        ])
        assert code == 1
        assert capsys.readouterr().err.startswith("medtr-error\tInputError\t")


class TestAnalyze:
    def test_csv_and_summary(self, cli_env, tmp_path, capsys):
        out_csv = tmp_path / "acts.csv"
        code = main([
            "analyze", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(out_csv), "--ckpt",
            os.path.join(cli_env["train"], "train.ckpt"),
            "--split", "eval_a", "--max-utts", "2",
        ])
        assert code == 0
        stdout = capsys.readouterr().out
        parts = stdout.strip().split("\t")
        assert parts[0] == "analyze" and parts[1] == "eval_a"
        assert parts[3] == "matched_variance_fraction"
        assert 0.0 <= float(parts[4]) <= 1.0
        lines = out_csv.read_text().splitlines()
        assert lines[0] == "utt_id,frame,channel,value,encoder"
        assert len(lines) > 1
        summary = (tmp_path / "acts.csv.summary.csv").read_text().splitlines()
        assert summary[0] == "utt_id,var_eng,var_man"
        assert len(summary) == 3

    def test_single_encoder_checkpoint_rejected(self, cli_env, tmp_path, capsys):
        base_out = tmp_path / "b"
        assert main([
            "train", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(base_out), "--variant", "baseline",
        ]) == 0
        capsys.readouterr()
        code = main([
            "analyze", "--config", cli_env["cfg"], "--data", cli_env["data"],
            "--out", str(tmp_path / "x.csv"), "--ckpt", str(base_out / "train.ckpt"),
            "--variant", "baseline",
        ])
        assert code == 1
        assert capsys.readouterr().err.startswith("medtr-error\tContractError\t")
