"""Synthetic bilingual corpus generation and corpus I/O.

Two artificial "languages" with disjoint vocabularies emit Gaussian feature
frames around per-token prototypes. The prototype clouds are separated by
construction (languages sit at opposite corners of the first two feature
dimensions), which gives the language-specific signal the dual-encoder
architecture is meant to exploit. Code-switching utterances draw the
per-token language from a two-state Markov chain that starts in the matrix
language.
"""

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError, InputError
from .rng import substream

PAD_ID = 0
SOS_ID = 1
EOS_ID = 2
SPECIALS = ("<pad>", "<sos>", "<eos>")

LANG_A = "A"
LANG_B = "B"

MIN_TOKENS = 3
MAX_TOKENS = 12
FRAMES_PER_TOKEN = (4, 8)
DEFAULT_D_FEAT = 20
DEFAULT_VOCAB_PER_LANG = 20
NOISE_SCALE = 1.0


@dataclass(frozen=True)
class Vocab:
    tokens: tuple  # id -> token string, specials first
    vocab_per_lang: int

    @property
    def size(self):
        return len(self.tokens)

    @property
    def blank_id(self):
        # CTC blank sits one past the decoder vocabulary
        return len(self.tokens)

    def lang_ids(self, lang):
        n = self.vocab_per_lang
        if lang == LANG_A:
            return range(len(SPECIALS), len(SPECIALS) + n)
        if lang == LANG_B:
            return range(len(SPECIALS) + n, len(SPECIALS) + 2 * n)
        raise InputError(f"unknown language {lang!r}")

    def lang_of(self, token_id):
        if token_id < len(SPECIALS):
            return None
        if token_id < len(SPECIALS) + self.vocab_per_lang:
            return LANG_A
        if token_id < self.size:
            return LANG_B
        raise InputError(f"token id {token_id} out of range")

    def to_tokens(self, ids):
        return [self.tokens[i] for i in ids]

    def to_ids(self, tokens):
        try:
            return np.array([self._tok2id()[t] for t in tokens], dtype=np.int64)
        except KeyError as exc:
            raise InputError(f"token {exc.args[0]!r} is not in the vocabulary") from None

    def _tok2id(self):
        cache = getattr(self, "_t2i", None)
        if cache is None:
            cache = {t: i for i, t in enumerate(self.tokens)}
            object.__setattr__(self, "_t2i", cache)
        return cache


def make_vocab(vocab_per_lang=DEFAULT_VOCAB_PER_LANG):
    toks = list(SPECIALS)
    toks += [f"a{i:02d}" for i in range(vocab_per_lang)]
    toks += [f"b{i:02d}" for i in range(vocab_per_lang)]
    return Vocab(tokens=tuple(toks), vocab_per_lang=vocab_per_lang)


@dataclass(frozen=True)
class SynthLangSpec:
    lang: str
    token_ids: tuple
    prototypes: np.ndarray  # (n_tokens, d_feat)
    frames_range: tuple = FRAMES_PER_TOKEN
    noise_scale: float = NOISE_SCALE


SIGNATURE_DIMS = (0, 1)
SIGNATURE_SHIFT = 4.0
BLOCK_WIDTH = 8  # per-language token-identity sub-space width


def make_lang_specs(vocab, d_feat=DEFAULT_D_FEAT, seed=0):
    """Build both language specs with separated prototype clouds.

    Language identity lives in the first two dimensions (+4 vs -4); each
    language's token identity lives in its own block of dimensions (A in
    [2, 2+W), B in [2+W, 2+2W)), zero outside it. Tokens of one language
    therefore carry no information in the other language's block, so a
    model trained on one language has nothing to read in the other's
    sub-space.
    """
    if d_feat < 2 + 2 * BLOCK_WIDTH:
        raise ConfigError(
            f"d_feat must be at least {2 + 2 * BLOCK_WIDTH}, got {d_feat}"
        )
    rng = substream(seed, "data", 999)
    blocks = {
        LANG_A: slice(2, 2 + BLOCK_WIDTH),
        LANG_B: slice(2 + BLOCK_WIDTH, 2 + 2 * BLOCK_WIDTH),
    }
    specs = {}
    for lang, sign in ((LANG_A, +1.0), (LANG_B, -1.0)):
        ids = tuple(vocab.lang_ids(lang))
        n = len(ids)
        # resample until every token pair is comfortably above the noise
        for _ in range(64):
            block = rng.uniform(-3.0, 3.0, size=(n, BLOCK_WIDTH))
            d2 = ((block[:, None] - block[None]) ** 2).sum(-1)
            d2[np.diag_indices(n)] = np.inf
            if float(np.sqrt(d2.min())) > 2.5 * NOISE_SCALE:
                break
        else:
            raise ContractError("token prototype separation failed; construction bug")
        protos = np.zeros((n, d_feat))
        protos[:, blocks[lang]] = block
        for dim in SIGNATURE_DIMS:
            protos[:, dim] = sign * SIGNATURE_SHIFT
        specs[lang] = SynthLangSpec(
            lang=lang, token_ids=ids, prototypes=protos.astype(np.float32)
        )
    a, b = specs[LANG_A], specs[LANG_B]
    d2 = ((a.prototypes[:, None, :] - b.prototypes[None, :, :]) ** 2).sum(-1)
    min_dist = float(np.sqrt(d2.min()))
    if min_dist <= 2.0 * max(a.noise_scale, b.noise_scale):
        raise ContractError(
            f"cross-language prototype separation {min_dist:.3f} is not above "
            f"2 sigma; construction bug"
        )
    return specs


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray  # (T, d_feat) float32
    labels: np.ndarray  # token ids
    lang_tags: list  # per-token language id
    matrix_lang: str


def _emit(rng, spec_by_lang, labels, langs):
    rows = []
    for tok, lang in zip(labels, langs):
        spec = spec_by_lang[lang]
        proto = spec.prototypes[tok - spec.token_ids[0]]
        lo, hi = spec.frames_range
        n = int(rng.integers(lo, hi + 1))
        rows.append(proto[None, :] + spec.noise_scale * rng.normal(size=(n, proto.shape[0])))
    return np.concatenate(rows, axis=0).astype(np.float32)


def _draw_token(rng, spec, prev):
    # avoid immediate repeats: keeps every utterance CTC-feasible after 4x
    # downsampling without relying on frame-count luck
    ids = spec.token_ids
    tok = int(ids[rng.integers(0, len(ids))])
    while tok == prev:
        tok = int(ids[rng.integers(0, len(ids))])
    return tok


def gen_monolingual(spec, n_utts, seed, shard=0, utt_prefix="mono"):
    """Utterances of 3-12 tokens in one language; deterministic in seed."""
    if n_utts < 1:
        raise ContractError(f"n_utts must be >= 1, got {n_utts}")
    rng = substream(seed, "data", shard)
    spec_by_lang = {spec.lang: spec}
    out = []
    for i in range(n_utts):
        n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
        labels, prev = [], None
        for _ in range(n_tok):
            tok = _draw_token(rng, spec, prev)
            labels.append(tok)
            prev = tok
        langs = [spec.lang] * n_tok
        feats = _emit(rng, spec_by_lang, labels, langs)
        out.append(
            Utterance(
                utt_id=f"{utt_prefix}{i:05d}",
                features=feats,
                labels=np.array(labels, dtype=np.int64),
                lang_tags=langs,
                matrix_lang=spec.lang,
            )
        )
    return out


def _solve_stay_prob(switch_prob, matrix_ratio):
    """Embedded-language stay probability hitting the target token ratio.

    The chain starts in the matrix language, so short utterances are
    matrix-biased; binary-search the embedded->embedded probability until
    the exact expected matrix-token fraction (averaged over the uniform
    3-12 length distribution) equals `matrix_ratio`.
    """

    def expected_fraction(p_ee):
        # token-weighted over the length distribution: long utterances
        # contribute more tokens to the split ratio
        p_mm = 1.0 - switch_prob
        matrix_tokens = 0.0
        all_tokens = 0.0
        for n in range(MIN_TOKENS, MAX_TOKENS + 1):
            pm = 1.0
            for _ in range(n):
                matrix_tokens += pm
                pm = pm * p_mm + (1.0 - pm) * (1.0 - p_ee)
            all_tokens += n
        return matrix_tokens / all_tokens

    lo, hi = 0.0, 1.0
    if expected_fraction(1.0) > matrix_ratio:
        return 1.0
    if expected_fraction(0.0) < matrix_ratio:
        return 0.0
    # expected fraction decreases as p_ee grows
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if expected_fraction(mid) > matrix_ratio:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def gen_code_switching(
    spec_a,
    spec_b,
    n_utts,
    switch_prob,
    matrix_ratio,
    seed,
    matrix_lang="mixed",
    shard=1,
    utt_prefix="cs",
):
    """Code-switching corpus; token language follows a two-state Markov chain.

    `matrix_lang` is "A", "B", or "mixed" (each utterance flips a fair coin).
    `matrix_ratio` is the target fraction of matrix-language tokens over the
    split; `switch_prob` the per-step probability of leaving the matrix
    language.
    """
    if not 0.0 < switch_prob < 1.0:
        raise ContractError(f"switch_prob must be in (0, 1), got {switch_prob}")
    if not 0.0 < matrix_ratio < 1.0:
        raise ContractError(f"matrix_ratio must be in (0, 1), got {matrix_ratio}")
    rng = substream(seed, "data", shard)
    spec_by_lang = {spec_a.lang: spec_a, spec_b.lang: spec_b}
    p_stay_matrix = 1.0 - switch_prob
    p_stay_embedded = _solve_stay_prob(switch_prob, matrix_ratio)
    out = []
    for i in range(n_utts):
        if matrix_lang == "mixed":
            matrix = LANG_A if rng.random() < 0.5 else LANG_B
        else:
            matrix = matrix_lang
        embedded = LANG_B if matrix == LANG_A else LANG_A
        n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
        labels, langs = [], []
        lang, prev = matrix, None
        for _ in range(n_tok):
            tok = _draw_token(rng, spec_by_lang[lang], prev)
            labels.append(tok)
            langs.append(lang)
            prev = tok
            if lang == matrix:
                if rng.random() >= p_stay_matrix:
                    lang = embedded
            else:
                if rng.random() >= p_stay_embedded:
                    lang = matrix
        feats = _emit(rng, spec_by_lang, labels, langs)
        out.append(
            Utterance(
                utt_id=f"{utt_prefix}{i:05d}",
                features=feats,
                labels=np.array(labels, dtype=np.int64),
                lang_tags=langs,
                matrix_lang=matrix,
            )
        )
    return out


# ---------------------------------------------------------------------------
# normalization and augmentation


def normalize(corpora, train_key):
    """Subtract the training split's global per-dimension mean everywhere.

    Mutates features in place; returns the mean vector used.
    """
    if train_key not in corpora:
        raise ContractError(f"training split {train_key!r} not in corpora")
    train = corpora[train_key]
    if not train:
        raise ContractError("training split is empty")
    total = np.zeros(train[0].features.shape[1], dtype=np.float64)
    count = 0
    for utt in train:
        total += utt.features.sum(axis=0, dtype=np.float64)
        count += utt.features.shape[0]
    mean = (total / count).astype(np.float32)
    for split in corpora.values():
        for utt in split:
            utt.features = utt.features - mean
    return mean


def augment_mask(features, n_time_masks, time_width, n_feat_masks, feat_width, rng):
    """Zero random time bands and feature bands (a SpecAugment-style mask).

    Returns a new array; the input is untouched.
    """
    t_len, d = features.shape
    if time_width > t_len:
        raise ContractError(f"time mask width {time_width} exceeds {t_len} frames")
    if feat_width > d:
        raise ContractError(f"feature mask width {feat_width} exceeds {d} dims")
    out = features.copy()
    for _ in range(n_time_masks):
        if time_width == 0:
            break
        start = int(rng.integers(0, t_len - time_width + 1))
        out[start : start + time_width, :] = 0.0
    for _ in range(n_feat_masks):
        if feat_width == 0:
            break
        start = int(rng.integers(0, d - feat_width + 1))
        out[:, start : start + feat_width] = 0.0
    return out


# ---------------------------------------------------------------------------
# corpus files

MANIFEST_SUFFIX = ".tsv"
FEATURES_SUFFIX = ".feats"


def save_corpus(out_dir, split, corpus, vocab):
    """Write `{split}.tsv` manifest and `{split}.feats` binary features."""
    os.makedirs(out_dir, exist_ok=True)
    man_path = os.path.join(out_dir, split + MANIFEST_SUFFIX)
    feat_path = os.path.join(out_dir, split + FEATURES_SUFFIX)
    with open(man_path, "w", encoding="utf-8") as man, open(feat_path, "wb") as feats:
        for utt in corpus:
            toks = " ".join(vocab.to_tokens(utt.labels))
            tags = " ".join(utt.lang_tags)
            man.write(
                f"{utt.utt_id}\t{utt.features.shape[0]}\t{toks}\t{tags}\t{utt.matrix_lang}\n"
            )
            feats.write(struct.pack("<I", utt.features.shape[0]))
            feats.write(np.ascontiguousarray(utt.features, dtype="<f4").tobytes())
    return man_path, feat_path


def load_corpus(out_dir, split, vocab, d_feat):
    man_path = os.path.join(out_dir, split + MANIFEST_SUFFIX)
    feat_path = os.path.join(out_dir, split + FEATURES_SUFFIX)
    if not os.path.exists(man_path):
        raise InputError(f"manifest not found: {man_path}")
    if not os.path.exists(feat_path):
        raise InputError(f"feature file not found: {feat_path}")
    out = []
    with open(man_path, encoding="utf-8") as man, open(feat_path, "rb") as feats:
        for line_no, line in enumerate(man, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise InputError(
                    f"{man_path}:{line_no}: expected 5 tab-separated fields, got {len(parts)}"
                )
            utt_id, n_frames_s, toks_s, tags_s, matrix = parts
            try:
                n_frames = int(n_frames_s)
            except ValueError:
                raise InputError(f"{man_path}:{line_no}: bad frame count {n_frames_s!r}") from None
            labels = vocab.to_ids(toks_s.split())
            tags = tags_s.split()
            if len(tags) != len(labels):
                raise InputError(
                    f"{man_path}:{line_no}: {len(labels)} tokens but {len(tags)} language tags"
                )
            header = feats.read(4)
            if len(header) != 4:
                raise InputError(f"{feat_path}: truncated before {utt_id}")
            (stored,) = struct.unpack("<I", header)
            if stored != n_frames:
                raise InputError(
                    f"{feat_path}: frame count {stored} for {utt_id} does not match "
                    f"manifest value {n_frames}"
                )
            raw = feats.read(4 * n_frames * d_feat)
            if len(raw) != 4 * n_frames * d_feat:
                raise InputError(f"{feat_path}: truncated feature payload for {utt_id}")
            arr = np.frombuffer(raw, dtype="<f4").reshape(n_frames, d_feat).copy()
            out.append(
                Utterance(
                    utt_id=utt_id,
                    features=arr,
                    labels=labels,
                    lang_tags=tags,
                    matrix_lang=matrix,
                )
            )
        if feats.read(1):
            raise InputError(f"{feat_path}: trailing bytes after last utterance")
    return out
