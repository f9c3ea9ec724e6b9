"""Command-line entry points: gen, train, recipe, ablation, decode, analyze."""

import argparse
import os
import sys

from . import analyze as analyze_mod
from . import data as data_mod
from . import model as med_model
from . import train as train_mod
from .checkpoint import load_archive
from .config import load_config
from .decode import beam_search, corpus_ter, load_ngram, write_decode_output
from .errors import InputError, MedtrError
from .tensor import Tensor

SPLITS = ("train_a", "train_b", "cs_train", "cs_dev", "eval_a", "eval_b")


def _meta_path(data_dir):
    return os.path.join(data_dir, "meta.txt")


def _write_meta(data_dir, cfg):
    with open(_meta_path(data_dir), "w", encoding="utf-8") as fh:
        fh.write(f"d_feat = {cfg.d_feat}\n")
        fh.write(f"vocab_per_lang = {cfg.vocab_per_lang}\n")
        fh.write(f"seed = {cfg.seed}\n")
        fh.write(f"splits = {','.join(SPLITS)}\n")


def _read_meta(data_dir):
    path = _meta_path(data_dir)
    if not os.path.exists(path):
        raise InputError(f"no meta.txt in {data_dir}; run `medtr gen` first")
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if "=" in line:
                k, _, v = line.partition("=")
                out[k.strip()] = v.strip()
    return out


def _load_data(data_dir, cfg, splits):
    meta = _read_meta(data_dir)
    if int(meta["d_feat"]) != cfg.d_feat:
        raise InputError(
            f"corpus d_feat {meta['d_feat']} does not match config d_feat {cfg.d_feat}"
        )
    if int(meta["vocab_per_lang"]) != cfg.vocab_per_lang:
        raise InputError(
            f"corpus vocab_per_lang {meta['vocab_per_lang']} does not match "
            f"config value {cfg.vocab_per_lang}"
        )
    vocab = data_mod.make_vocab(cfg.vocab_per_lang)
    corpora = {s: data_mod.load_corpus(data_dir, s, vocab, cfg.d_feat) for s in splits}
    return vocab, corpora


def cmd_gen(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    vocab = data_mod.make_vocab(cfg.vocab_per_lang)
    specs = data_mod.make_lang_specs(vocab, seed=seed, d_feat=cfg.d_feat)
    sa, sb = specs[data_mod.LANG_A], specs[data_mod.LANG_B]
    corpora = {
        "train_a": data_mod.gen_monolingual(sa, cfg.n_mono, seed, shard=10, utt_prefix="a"),
        "train_b": data_mod.gen_monolingual(sb, cfg.n_mono, seed, shard=11, utt_prefix="b"),
        "cs_train": data_mod.gen_code_switching(
            sa, sb, cfg.n_cs_train, cfg.switch_prob, cfg.matrix_ratio, seed, shard=12,
            utt_prefix="cs",
        ),
        "cs_dev": data_mod.gen_code_switching(
            sa, sb, cfg.n_cs_dev, cfg.switch_prob, cfg.matrix_ratio, seed, shard=13,
            utt_prefix="csd",
        ),
        "eval_a": data_mod.gen_code_switching(
            sa, sb, cfg.n_eval, cfg.switch_prob, cfg.eval_a_ratio, seed,
            matrix_lang=data_mod.LANG_A, shard=14, utt_prefix="ea",
        ),
        "eval_b": data_mod.gen_code_switching(
            sa, sb, cfg.n_eval, cfg.switch_prob, cfg.eval_b_ratio, seed,
            matrix_lang=data_mod.LANG_B, shard=15, utt_prefix="eb",
        ),
    }
    data_mod.normalize(corpora, "cs_train")
    os.makedirs(args.out, exist_ok=True)
    for split, corpus in corpora.items():
        data_mod.save_corpus(args.out, split, corpus, vocab)
    _write_meta(args.out, cfg)
    for split in SPLITS:
        print(f"gen\t{split}\t{len(corpora[split])}")
    return 0


def _model_seed(seed):
    return seed + 1000


def cmd_train(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    variant = args.variant or cfg.variant
    vocab, corpora = _load_data(args.data, cfg, ("cs_train", "cs_dev"))
    mc = cfg.model_config(vocab.size)
    if variant != mc.variant:
        mc = med_model.replace_variant(mc, variant)
    params = med_model.build_model(mc, _model_seed(seed))
    tcfg = cfg.train_config(seed)
    os.makedirs(args.out, exist_ok=True)
    res = train_mod.train_stage(
        params,
        corpora["cs_train"],
        corpora["cs_dev"],
        tcfg,
        vocab,
        stage_id=0,
        ckpt_path=os.path.join(args.out, "train.ckpt"),
    )
    train_mod.write_report(os.path.join(args.out, "report.tsv"), [("train", st) for st in res.curve])
    for st in res.curve:
        print(f"train\t{st.epoch}\t{st.train_loss:.6f}\t{st.dev_loss:.6f}\t{st.dev_ter:.3f}")
    if res.aborted:
        print("train\taborted\tbest checkpoint restored", file=sys.stderr)
        return 2
    return 0


def cmd_recipe(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    vocab, corpora = _load_data(
        args.data, cfg, ("train_a", "train_b", "cs_train", "cs_dev")
    )
    tcfg = cfg.train_config(seed)
    res = train_mod.run_recipe(
        cfg.variant,
        corpora,
        vocab,
        _model_seed(seed),
        tcfg,
        args.out,
        pretrain=cfg.pretrain if cfg.pretrain != "none" else "branches",
        toy=True,
    )
    train_mod.write_report(os.path.join(args.out, "report.tsv"), res.report_rows)
    for branch, (loaded, expected) in sorted(res.transplant_counts.items()):
        print(f"transplant\t{branch}\t{loaded}/{expected}")
    for stage, st in res.report_rows:
        print(f"{stage}\t{st.epoch}\t{st.train_loss:.6f}\t{st.dev_loss:.6f}\t{st.dev_ter:.3f}")
    return 0


def _decode_corpus(params, corpus, vocab, beam, alpha, beta, lm):
    pairs = []
    hyps = []
    for utt in corpus:
        best = beam_search(
            params, params.config, Tensor(utt.features), vocab,
            beam=beam, alpha=alpha, beta=beta, lm=lm,
        )[0]
        ref = [(vocab.tokens[i], vocab.lang_of(i)) for i in utt.labels]
        hyp = [(vocab.tokens[i], vocab.lang_of(i)) for i in best.tokens]
        pairs.append((ref, hyp))
        hyps.append((utt.utt_id, [vocab.tokens[i] for i in best.tokens]))
    return corpus_ter(pairs), hyps


def cmd_ablation(args):
    cfg = load_config(args.config)
    seed = cfg.seed if args.seed is None else args.seed
    vocab, corpora = _load_data(
        args.data, cfg, ("cs_train", "cs_dev", "eval_a", "eval_b")
    )
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i, variant in enumerate(med_model.VARIANTS):
        mc = cfg.model_config(vocab.size)
        mc = med_model.replace_variant(mc, variant)
        params = med_model.build_model(mc, _model_seed(seed) + i)
        tcfg = cfg.train_config(seed)
        try:
            res = train_mod.train_stage(
                params,
                corpora["cs_train"],
                corpora["cs_dev"],
                tcfg,
                vocab,
                stage_id=i,
                ckpt_path=os.path.join(args.out, f"{variant}.ckpt"),
            )
            if res.aborted:
                raise MedtrError(f"{variant} arm diverged")
            for split in ("eval_a", "eval_b"):
                rep, _ = _decode_corpus(
                    params, corpora[split], vocab, beam=args.beam or cfg.beam,
                    alpha=cfg.alpha if args.alpha is None else args.alpha,
                    beta=0.0, lm=None,
                )
                rows.append(
                    (
                        variant,
                        split,
                        f"{rep.ter_pct:.3f}",
                        f"{rep.lang_ter_pct(data_mod.LANG_A):.3f}",
                        f"{rep.lang_ter_pct(data_mod.LANG_B):.3f}",
                    )
                )
        except MedtrError as exc:
            print(f"ablation\t{variant}\tfailed\t{exc}", file=sys.stderr)
            for split in ("eval_a", "eval_b"):
                rows.append((variant, split, "failed", "failed", "failed"))
    table = os.path.join(args.out, "ablation.tsv")
    with open(table, "w", encoding="utf-8") as fh:
        fh.write("variant\tsplit\tter_all\tter_a\tter_b\n")
        for row in rows:
            fh.write("\t".join(row) + "\n")
    for row in rows:
        print("\t".join(("ablation",) + row))
    return 0


def _load_checkpoint_model(cfg, ckpt_path, vocab, variant=None):
    archive = load_archive(ckpt_path)
    if "dec.embed.weight" not in archive:
        raise InputError(f"{ckpt_path}: not a model checkpoint (no decoder embedding)")
    rows = archive["dec.embed.weight"].shape[0]
    if rows != vocab.size:
        raise InputError(
            f"checkpoint vocabulary size {rows} does not match corpus "
            f"vocabulary size {vocab.size}"
        )
    mc = cfg.model_config(vocab.size)
    if variant and variant != mc.variant:
        mc = med_model.replace_variant(mc, variant)
    params = med_model.build_model(mc, 0)
    loaded = train_mod.restore_model(params, archive)
    if loaded != len(params.registry):
        raise InputError(
            f"checkpoint matches only {loaded}/{len(params.registry)} tensors of "
            f"variant {mc.variant!r}; wrong --variant or config?"
        )
    return params


def cmd_decode(args):
    cfg = load_config(args.config)
    vocab, corpora = _load_data(args.data, cfg, (args.split,))
    corpus = corpora[args.split]
    params = _load_checkpoint_model(cfg, args.ckpt, vocab, args.variant)
    lm = load_ngram(args.lm) if args.lm else None
    beam = args.beam or cfg.beam
    alpha = cfg.alpha if args.alpha is None else args.alpha
    beta = (cfg.beta if args.beta is None else args.beta) if lm else 0.0
    rep, hyps = _decode_corpus(params, corpus, vocab, beam, alpha, beta, lm)
    os.makedirs(args.out, exist_ok=True)
    write_decode_output(os.path.join(args.out, f"{args.split}.hyp.tsv"), hyps)
    report = os.path.join(args.out, f"{args.split}.ter.txt")
    with open(report, "w", encoding="utf-8") as fh:
        fh.write(f"split\t{args.split}\n")
        fh.write(f"beam\t{beam}\nalpha\t{alpha}\nbeta\t{beta}\n")
        fh.write(f"ter_all\t{rep.ter_pct:.3f}\n")
        fh.write(f"ter_a\t{rep.lang_ter_pct(data_mod.LANG_A):.3f}\n")
        fh.write(f"ter_b\t{rep.lang_ter_pct(data_mod.LANG_B):.3f}\n")
        fh.write(f"n_ref\t{rep.n_ref}\nsubs\t{rep.subs}\ndels\t{rep.dels}\nins\t{rep.ins}\n")
    print(f"decode\t{args.split}\tbeam={beam}\tter={rep.ter_pct:.3f}")
    return 0


def cmd_analyze(args):
    cfg = load_config(args.config)
    vocab, corpora = _load_data(args.data, cfg, (args.split,))
    corpus = corpora[args.split]
    if args.max_utts:
        corpus = corpus[: args.max_utts]
    params = _load_checkpoint_model(cfg, args.ckpt, vocab, args.variant)
    summary = args.out + ".summary.csv"
    analyze_mod.write_analysis_csv(args.out, params, corpus, summary_path=summary)
    frac = analyze_mod.matched_branch_fraction(params, corpus, train_mod.BRANCH_OF_LANG)
    print(f"analyze\t{args.split}\t{len(corpus)}\tmatched_variance_fraction\t{frac:.3f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="medtr", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, data=True, out=True):
        sp.add_argument("--config", required=True, help="key=value config file")
        sp.add_argument("--seed", type=int, default=None)
        if data:
            sp.add_argument("--data", required=True, help="generated corpus directory")
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="generate synthetic corpora")
    common(sp, data=False)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("train", help="train one variant from scratch")
    common(sp)
    sp.add_argument("--variant", choices=med_model.VARIANTS)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("recipe", help="pretrain both languages, transplant, finetune")
    common(sp)
    sp.set_defaults(fn=cmd_recipe)

    sp = sub.add_parser("ablation", help="train and score all four variants")
    common(sp)
    sp.add_argument("--beam", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.set_defaults(fn=cmd_ablation)

    sp = sub.add_parser("decode", help="beam-decode a split with a checkpoint")
    common(sp)
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="cs_dev")
    sp.add_argument("--variant", choices=med_model.VARIANTS)
    sp.add_argument("--beam", type=int, default=None)
    sp.add_argument("--alpha", type=float, default=None)
    sp.add_argument("--beta", type=float, default=None)
    sp.add_argument("--lm", default=None, help="n-gram file for shallow fusion")
    sp.set_defaults(fn=cmd_decode)

    sp = sub.add_parser("analyze", help="export per-encoder activation statistics")
    sp.add_argument("--config", required=True)
    sp.add_argument("--seed", type=int, default=None)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="CSV output path")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--split", default="eval_a")
    sp.add_argument("--variant", choices=med_model.VARIANTS)
    sp.add_argument("--max-utts", type=int, default=None)
    sp.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except MedtrError as exc:
        print(f"medtr-error\t{type(exc).__name__}\t{exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"medtr-error\tOSError\t{exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
