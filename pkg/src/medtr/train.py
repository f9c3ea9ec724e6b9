"""Optimizer, schedule, stage training loop, and the transfer recipe."""

import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from . import losses as losses_mod
from . import model as med_model
from .checkpoint import load_archive, save_archive
from .data import EOS_ID, PAD_ID, SOS_ID
from .decode import beam_search, greedy_attention_decode, ter
from .errors import ConfigError, ContractError, DivergenceError
from .rng import substream
from .tensor import Tape, Tensor, scale

log = logging.getLogger("medtr.train")

BRANCH_OF_LANG = {data_mod.LANG_A: "eng", data_mod.LANG_B: "man"}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_frames: int = 600  # bucketing cap: max summed frames per minibatch
    lr_scale: float = 2.0
    warmup_steps: int = 300
    seed: int = 0
    clip_norm: float = 5.0
    ckpt_every: int = 1  # epochs between periodic checkpoint writes
    mol_weight: float = None  # None -> use the model config's value
    augment: bool = False
    time_masks: int = 1
    time_width: int = 4
    feat_masks: int = 1
    feat_width: int = 4
    stop_ter: float = None  # early-stop once dev TER reaches this (percent)
    dev_beam: int = 4  # joint beam width for per-epoch dev TER; 0 -> greedy
    dev_alpha: float = 0.3

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_frames < 1:
            raise ConfigError("batch_frames must be positive")


def paper_train_config(**overrides):
    base = dict(epochs=30, warmup_steps=25000)
    base.update(overrides)
    return TrainConfig(**base)


def noam_lr(step, d_model, warmup_steps, lr_scale=1.0):
    """lr = scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)."""
    if step < 1:
        raise ContractError(f"schedule step must be >= 1, got {step}")
    return (
        lr_scale
        * d_model ** -0.5
        * min(step ** -0.5, step * warmup_steps ** -1.5)
    )


class AdamState:
    """First/second moment buffers, keyed like the parameter registry."""

    def __init__(self, registry):
        self.m = {k: np.zeros_like(t.data) for k, t in registry.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in registry.items()}


def adam_step(
    registry,
    moments,
    step,
    lr,
    clip_norm=5.0,
    beta1=0.9,
    beta2=0.98,
    eps=1e-9,
):
    """One clipped Adam update from each tensor's accumulated ``.grad``.

    Returns True when applied; a non-finite gradient skips the update and
    logs the incident instead of corrupting the parameters.
    """
    if step < 1:
        raise ContractError(f"optimizer step must be >= 1, got {step}")
    grads = {}
    sq_sum = 0.0
    for name, t in registry.items():
        g = t.grad
        if g is None:
            g = np.zeros_like(t.data)
        if not np.all(np.isfinite(g)):
            log.warning("non-finite gradient in %s at step %d; update skipped", name, step)
            return False
        g = g.astype(np.float64)
        grads[name] = g
        sq_sum += float((g * g).sum())
    norm = math.sqrt(sq_sum)
    if clip_norm is not None and norm > clip_norm and norm > 0.0:
        factor = clip_norm / norm
        for g in grads.values():
            g *= factor
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for name, t in registry.items():
        g = grads[name]
        m = moments.m[name]
        v = moments.v[name]
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        t.data[...] = t.data - update.astype(t.data.dtype)
    return True


def global_grad_norm(registry):
    sq = 0.0
    for t in registry.values():
        if t.grad is not None:
            sq += float((t.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# stage training


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    dev_loss: float
    dev_ter: float


@dataclass
class StageResult:
    curve: list
    best_epoch: int
    best_dev_loss: float
    steps: int
    skipped_steps: int
    aborted: bool = False


def make_batches(corpus, batch_frames):
    """Length-bucketed minibatches capped by total frame count."""
    order = sorted(range(len(corpus)), key=lambda i: (corpus[i].features.shape[0], corpus[i].utt_id))
    batches, cur, cur_frames = [], [], 0
    for idx in order:
        n = corpus[idx].features.shape[0]
        if cur and cur_frames + n > batch_frames:
            batches.append(cur)
            cur, cur_frames = [], 0
        cur.append(idx)
        cur_frames += n
    if cur:
        batches.append(cur)
    return batches


def utterance_loss(params, utt, mol_weight, smoothing, training=False, rng=None):
    """MOL loss of one utterance; returns the MolLoss record."""
    config = params.config
    enc = med_model.encode(params, Tensor(utt.features), rng=rng, training=training)
    log_probs = med_model.ctc_head(params, config, enc)
    ctc = losses_mod.ctc_loss(log_probs, utt.labels)
    dec_in = np.concatenate(([SOS_ID], utt.labels)).astype(np.int64)
    targets = np.concatenate((utt.labels, [EOS_ID])).astype(np.int64)
    logits = med_model.forward_decoder(params, config, enc, dec_in, rng=rng, training=training)
    att = losses_mod.attention_loss(logits, targets, smoothing=smoothing, pad_id=PAD_ID)
    return losses_mod.mol_loss(ctc, att, mol_weight)


def evaluate_loss(params, corpus, mol_weight, smoothing):
    total = 0.0
    for utt in corpus:
        total += float(utterance_loss(params, utt, mol_weight, smoothing).total.data)
    return total / len(corpus)


def evaluate_ter(params, corpus, vocab, max_utts=None, beam=0, alpha=0.3):
    """Dev TER (percent): joint beam decode, or greedy attention if beam=0."""
    use = corpus if max_utts is None else corpus[:max_utts]
    n_err, n_ref = 0, 0
    for utt in use:
        if beam > 0:
            best = beam_search(
                params, params.config, Tensor(utt.features), vocab,
                beam=beam, alpha=alpha, beta=0.0,
            )[0]
            hyp_ids = list(best.tokens)
        else:
            hyp_ids = greedy_attention_decode(params, params.config, Tensor(utt.features))
        ref = [(vocab.tokens[i], vocab.lang_of(i)) for i in utt.labels]
        hyp = [(vocab.tokens[i], vocab.lang_of(i)) for i in hyp_ids]
        rep = ter(ref, hyp)
        n_err += rep.errors
        n_ref += rep.n_ref
    return 100.0 * n_err / max(n_ref, 1)


def snapshot_state(params, moments=None, step=None):
    out = {k: t.data.copy() for k, t in params.registry.items()}
    if step is not None:
        out["opt.step"] = np.asarray([float(step)], dtype=np.float32)
    if moments is not None:
        for k in params.registry:
            out[f"opt.m.{k}"] = moments.m[k].copy()
            out[f"opt.v.{k}"] = moments.v[k].copy()
    return out


def restore_model(params, archive):
    """Copy model tensors (ignoring optimizer entries) from an archive."""
    count = 0
    for name, t in params.registry.items():
        if name in archive:
            if tuple(archive[name].shape) != tuple(t.data.shape):
                raise ContractError(
                    f"checkpoint tensor {name} has shape {archive[name].shape}, "
                    f"model expects {t.data.shape}"
                )
            t.data[...] = archive[name]
            count += 1
    return count


def train_stage(
    params,
    train_corpus,
    dev_corpus,
    tcfg,
    vocab,
    stage_id=0,
    ckpt_path=None,
    dev_ter_utts=200,
):
    """Train `params` in place; retains and restores the best-dev state.

    Returns a StageResult with the per-epoch curve. Non-finite batch loss
    aborts the stage, restoring the best checkpoint seen so far.
    """
    if not train_corpus:
        raise ContractError("train_stage: empty training corpus")
    if not dev_corpus:
        raise ContractError("train_stage: empty dev corpus")
    config = params.config
    mol_weight = config.mol_weight if tcfg.mol_weight is None else tcfg.mol_weight
    smoothing = config.label_smoothing
    shuffle_rng = substream(tcfg.seed, "shuffle", stage_id)
    mask_rng = substream(tcfg.seed, "mask", stage_id)
    dropout_rng = substream(tcfg.seed, "dropout", stage_id)
    moments = AdamState(params.registry)
    batches = make_batches(train_corpus, tcfg.batch_frames)
    curve = []
    best = snapshot_state(params)
    best_dev = math.inf
    best_epoch = 0
    step = 0
    skipped = 0
    aborted = False
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(len(batches))
        epoch_loss = 0.0
        epoch_utts = 0
        diverged = False
        for b in order:
            batch = batches[b]
            params.zero_grad()
            batch_loss = 0.0
            inv = 1.0 / len(batch)
            for idx in batch:
                utt = train_corpus[idx]
                feats = utt.features
                if tcfg.augment:
                    feats = data_mod.augment_mask(
                        feats,
                        tcfg.time_masks,
                        min(tcfg.time_width, feats.shape[0]),
                        tcfg.feat_masks,
                        min(tcfg.feat_width, feats.shape[1]),
                        mask_rng,
                    )
                work = data_mod.Utterance(
                    utt_id=utt.utt_id,
                    features=feats,
                    labels=utt.labels,
                    lang_tags=utt.lang_tags,
                    matrix_lang=utt.matrix_lang,
                )
                with Tape() as tape:
                    mol = utterance_loss(
                        params, work, mol_weight, smoothing, training=True, rng=dropout_rng
                    )
                    tape.backward(scale(mol.total, inv))
                batch_loss += float(mol.total.data)
            batch_loss *= inv
            if not math.isfinite(batch_loss):
                log.error(
                    "stage %d epoch %d: non-finite batch loss %r; aborting with "
                    "best checkpoint from epoch %d",
                    stage_id, epoch, batch_loss, best_epoch,
                )
                diverged = True
                break
            epoch_loss += batch_loss * len(batch)
            epoch_utts += len(batch)
            step += 1
            lr = noam_lr(step, config.d_model, tcfg.warmup_steps, tcfg.lr_scale)
            if not adam_step(params.registry, moments, step, lr, tcfg.clip_norm):
                skipped += 1
        if diverged:
            aborted = True
            break
        train_loss = epoch_loss / max(epoch_utts, 1)
        dev_loss = evaluate_loss(params, dev_corpus, mol_weight, smoothing)
        dev_ter = evaluate_ter(
            params, dev_corpus, vocab, max_utts=dev_ter_utts,
            beam=tcfg.dev_beam, alpha=tcfg.dev_alpha,
        )
        curve.append(EpochStats(epoch=epoch, train_loss=train_loss, dev_loss=dev_loss, dev_ter=dev_ter))
        if not math.isfinite(dev_loss):
            log.error("stage %d epoch %d: non-finite dev loss; aborting", stage_id, epoch)
            aborted = True
            break
        if dev_loss < best_dev:
            best_dev = dev_loss
            best_epoch = epoch
            best = snapshot_state(params, moments, step)
        if ckpt_path and (epoch % tcfg.ckpt_every == 0 or epoch == tcfg.epochs):
            save_archive(ckpt_path, best)
        if tcfg.stop_ter is not None and dev_ter <= tcfg.stop_ter:
            log.info("stage %d: dev TER %.2f%% reached target at epoch %d", stage_id, dev_ter, epoch)
            break
    restore_model(params, best)
    if ckpt_path:
        save_archive(ckpt_path, best)
    return StageResult(
        curve=curve,
        best_epoch=best_epoch,
        best_dev_loss=best_dev,
        steps=step,
        skipped_steps=skipped,
        aborted=aborted,
    )


def write_report(path, rows):
    """`stage<TAB>epoch<TAB>train_loss<TAB>dev_loss<TAB>dev_ter` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for stage, st in rows:
            fh.write(
                f"{stage}\t{st.epoch}\t{st.train_loss:.6f}\t{st.dev_loss:.6f}\t{st.dev_ter:.3f}\n"
            )


# ---------------------------------------------------------------------------
# transfer recipe


@dataclass
class RecipeResult:
    params: object
    report_rows: list  # (stage_name, EpochStats)
    transplant_counts: dict  # branch -> tensors loaded
    stage_results: dict  # stage name -> StageResult


def split_dev(corpus, frac=0.1):
    n_dev = max(1, int(len(corpus) * frac))
    return corpus[:-n_dev], corpus[-n_dev:]


def run_recipe(
    variant,
    corpora,
    vocab,
    model_seed,
    tcfg,
    workdir,
    pretrain="none",
    pretrain_tcfg=None,
    toy=True,
    dev_ter_utts=200,
):
    """Train `variant` on the code-switching corpus, optionally pretrained.

    `corpora` must hold "train_a"/"train_b" (monolingual), "cs_train", and
    "cs_dev". `pretrain` is "none" (scratch), "branches" (stage 1/2
    monolingual pretraining transplanted into the dual branches), or
    "combined" (single-encoder pretraining on both monolingual corpora,
    transplanted into every branch of the target model).
    """
    if pretrain not in ("none", "branches", "combined"):
        raise ConfigError(f"unknown pretrain mode {pretrain!r}")
    os.makedirs(workdir, exist_ok=True)
    build = med_model.toy_config if toy else med_model.paper_config
    report_rows = []
    stage_results = {}
    transplant_counts = {}

    target = med_model.build_model(build(variant, vocab.size, corpora["cs_train"][0].features.shape[1]), model_seed)
    pre_cfg = pretrain_tcfg or tcfg

    if pretrain == "branches":
        jobs = [("pretrain_a", "train_a", "eng", 1), ("pretrain_b", "train_b", "man", 2)]
    elif pretrain == "combined":
        jobs = [("pretrain_ab", "combined", None, 1)]
    else:
        jobs = []

    for stage_name, split, branch, stage_id in jobs:
        if split == "combined":
            corpus = list(corpora["train_a"]) + list(corpora["train_b"])
        else:
            corpus = corpora[split]
        mono_cfg = build("baseline", vocab.size, corpus[0].features.shape[1])
        mono = med_model.build_model(mono_cfg, model_seed + stage_id)
        tr, dv = split_dev(corpus)
        ckpt = os.path.join(workdir, f"{stage_name}.ckpt")
        res = train_stage(
            mono, tr, dv, pre_cfg, vocab, stage_id=stage_id, ckpt_path=ckpt,
            dev_ter_utts=dev_ter_utts,
        )
        stage_results[stage_name] = res
        report_rows += [(stage_name, st) for st in res.curve]
        if res.aborted:
            raise DivergenceError(f"{stage_name} diverged; recipe aborted")
        archive = load_archive(ckpt)
        branches = [branch] if branch else list(target.config.encoder_branches)
        for br in branches:
            if br == "shared":
                name_map = {}
                for name in target.registry:
                    if name.startswith("enc.shared.") or ".cross.shared." in name:
                        name_map[name] = name
            else:
                name_map = med_model.branch_transplant_map(target, br)
            n = med_model.transplant(target, archive, name_map)
            transplant_counts[br] = (n, len(name_map))

    finetune_stage_id = 3
    res = train_stage(
        target,
        corpora["cs_train"],
        corpora["cs_dev"],
        tcfg,
        vocab,
        stage_id=finetune_stage_id,
        ckpt_path=os.path.join(workdir, "finetune.ckpt"),
        dev_ter_utts=dev_ter_utts,
    )
    stage_results["finetune"] = res
    report_rows += [("finetune", st) for st in res.curve]
    return RecipeResult(
        params=target,
        report_rows=report_rows,
        transplant_counts=transplant_counts,
        stage_results=stage_results,
    )
