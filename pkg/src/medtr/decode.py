"""Joint CTC/attention beam decoding, n-gram shallow fusion, TER metrics.

The beam keeps hypotheses of equal length in lock-step. Each step scores
every vocabulary continuation of every live hypothesis as

    combined = alpha * ctc_prefix + (1 - alpha) * att + beta * lm

where ctc_prefix is the incremental CTC prefix log-probability (cached
lattice state per hypothesis), att the sum of decoder log-softmax picks,
and lm the n-gram log-probability. Emitting end-of-sequence moves a
hypothesis to the finished pool, where the CTC term becomes the
full-sequence CTC log-probability, making finished scores directly
comparable with ctc_loss. Final ranking is by length-normalized combined
score.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import model as med_model
from .ctc_core import ctc_prefix_initial, ctc_prefix_step
from .data import EOS_ID, PAD_ID, SOS_ID, SPECIALS
from .errors import ContractError, InputError

EOS_TOKEN = "</s>"
BOS_TOKEN = "<s>"


# ---------------------------------------------------------------------------
# hypotheses and prefix scoring


@dataclass
class Hypothesis:
    tokens: tuple  # emitted token ids; never contains blank/pad/sos/eos
    att_score: float
    ctc_score: float
    lm_score: float
    combined: float
    ctc_state: np.ndarray = None  # (T', 2) lattice state; None once finished
    finished: bool = False

    def normalized(self):
        # +1 counts the end-of-sequence emission
        return self.combined / (len(self.tokens) + 1)


def _combine(alpha, beta, ctc, att, lm):
    # weight of exactly 0 disables a term even if its score is -inf
    total = 0.0
    if alpha != 0.0:
        total += alpha * ctc
    if alpha != 1.0:
        total += (1.0 - alpha) * att
    if beta != 0.0:
        total += beta * lm
    return total


def ctc_prefix_score(log_probs, prefix, cached_state, next_token):
    """Extend `prefix` by one token; returns (score, new_state).

    `log_probs` is the (T', V+1) frame table with blank last, `prefix` the
    tokens emitted so far, `cached_state` the (T', 2) lattice state of that
    prefix (from ctc_prefix_initial for the empty prefix). The score is the
    log-probability that prefix+next_token is a prefix of the CTC output.
    """
    log_probs = np.asarray(log_probs, dtype=np.float64)
    blank = log_probs.shape[1] - 1
    next_token = int(next_token)
    if next_token == blank:
        raise ContractError("ctc_prefix_score: next_token must not be the blank")
    if not 0 <= next_token < blank:
        raise InputError(f"ctc_prefix_score: token {next_token} out of range [0, {blank})")
    last = int(prefix[-1]) if len(prefix) else -1
    psi, states = ctc_prefix_step(
        log_probs, blank, last, len(prefix), cached_state, np.array([next_token])
    )
    return float(psi[0]), states[0]


def ctc_finish_score(cached_state):
    """Full-sequence CTC log-probability of the prefix owning this state."""
    return float(np.logaddexp(cached_state[-1, 0], cached_state[-1, 1]))


# ---------------------------------------------------------------------------
# n-gram language model


@dataclass
class NgramLm:
    """Bigram LM with additive-smoothed interpolated backoff.

    P(w | h) = (c(h, w) + P1(w)) / (c(h) + 1), with the unigram
    P1(w) = (c(w) + 1) / (N + V) over the joint vocabulary plus the
    end-of-sequence token. Unseen histories back off to P1 exactly, and
    every conditional sums to one by construction.
    """

    order: int
    unigram_logp: dict  # token -> log P1
    backoff_log: dict  # history -> log(1 / (c(h) + 1))
    bigram_logp: dict  # (history, token) -> log P(token | history)

    def score(self, prefix_tokens, next_token):
        if next_token not in self.unigram_logp or next_token == BOS_TOKEN:
            raise InputError(f"LM cannot score unknown token {next_token!r}")
        hist = prefix_tokens[-1] if prefix_tokens else BOS_TOKEN
        key = (hist, next_token)
        if key in self.bigram_logp:
            return self.bigram_logp[key]
        return self.backoff_log.get(hist, 0.0) + self.unigram_logp[next_token]

    def scoreable_tokens(self):
        return [t for t in self.unigram_logp if t != BOS_TOKEN]

    def conditional_sum(self, history):
        return sum(math.exp(self.score([history], t)) for t in self.scoreable_tokens())


def shallow_fusion_score(lm, prefix_tokens, next_token):
    """Backoff n-gram conditional log-probability of the next token."""
    return lm.score(prefix_tokens, next_token)


def train_ngram(sequences, vocab_tokens):
    """Estimate an NgramLm from token-string sequences over `vocab_tokens`."""
    vocab_tokens = list(vocab_tokens)
    scoreable = vocab_tokens + [EOS_TOKEN]
    c1 = {t: 0 for t in scoreable}
    c_hist = {}
    c2 = {}
    n_total = 0
    for seq in sequences:
        padded = [BOS_TOKEN] + list(seq) + [EOS_TOKEN]
        for tok in padded[1:]:
            if tok not in c1:
                raise InputError(f"training token {tok!r} is not in the LM vocabulary")
            c1[tok] += 1
            n_total += 1
        for h, w in zip(padded[:-1], padded[1:]):
            c_hist[h] = c_hist.get(h, 0) + 1
            c2[(h, w)] = c2.get((h, w), 0) + 1
    v = len(scoreable)
    unigram_p = {t: (c1[t] + 1.0) / (n_total + v) for t in scoreable}
    unigram_logp = {t: math.log(p) for t, p in unigram_p.items()}
    backoff_log = {h: math.log(1.0 / (n + 1.0)) for h, n in c_hist.items()}
    bigram_logp = {
        (h, w): math.log((n + unigram_p[w]) / (c_hist[h] + 1.0)) for (h, w), n in c2.items()
    }
    return NgramLm(
        order=2,
        unigram_logp=unigram_logp,
        backoff_log=backoff_log,
        bigram_logp=bigram_logp,
    )


def save_ngram(lm, path):
    """One record per line: order, tokens, logprob, backoff (tab-separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for tok in lm.unigram_logp:
            bo = lm.backoff_log.get(tok, 0.0)
            fh.write(f"1\t{tok}\t{lm.unigram_logp[tok]!r}\t{bo!r}\n")
        if BOS_TOKEN in lm.backoff_log and BOS_TOKEN not in lm.unigram_logp:
            fh.write(f"1\t{BOS_TOKEN}\t-99.0\t{lm.backoff_log[BOS_TOKEN]!r}\n")
        for (h, w), lp in lm.bigram_logp.items():
            fh.write(f"2\t{h} {w}\t{lp!r}\t0.0\n")


def load_ngram(path):
    unigram_logp, backoff_log, bigram_logp = {}, {}, {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise InputError(f"{path}:{line_no}: expected 4 fields, got {len(parts)}")
            order_s, toks, lp_s, bo_s = parts
            try:
                order, lp, bo = int(order_s), float(lp_s), float(bo_s)
            except ValueError:
                raise InputError(f"{path}:{line_no}: malformed numeric field") from None
            if order == 1:
                if lp > -90.0:  # -99 marks history-only entries
                    unigram_logp[toks] = lp
                if bo != 0.0:
                    backoff_log[toks] = bo
            elif order == 2:
                pair = tuple(toks.split(" "))
                if len(pair) != 2:
                    raise InputError(f"{path}:{line_no}: bigram needs two tokens")
                bigram_logp[pair] = lp
            else:
                raise InputError(f"{path}:{line_no}: unsupported order {order}")
    return NgramLm(
        order=2,
        unigram_logp=unigram_logp,
        backoff_log=backoff_log,
        bigram_logp=bigram_logp,
    )


# ---------------------------------------------------------------------------
# beam search


def beam_search(
    params,
    config,
    features,
    vocab,
    beam=10,
    alpha=0.3,
    beta=0.3,
    lm=None,
    max_len=None,
):
    """Joint CTC/attention beam decode of one utterance.

    Returns finished hypotheses sorted by length-normalized combined score.
    If nothing finished within `max_len` steps, the best unfinished
    hypotheses are returned instead, with `finished` left False as the flag.
    """
    if beam < 1:
        raise ContractError(f"beam must be >= 1, got {beam}")
    if lm is None and beta != 0.0:
        raise ContractError("beta is non-zero but no language model was given")
    enc = med_model.encode(params, features)
    ctc_lp = med_model.ctc_head(params, config, enc).data.astype(np.float64)
    blank = config.blank_id
    t_len = enc.t_len
    if max_len is None:
        max_len = t_len
    cands = np.array(
        [i for i in range(config.vocab_size) if i not in (PAD_ID, SOS_ID, EOS_ID)],
        dtype=np.int64,
    )
    live = [
        Hypothesis(
            tokens=(),
            att_score=0.0,
            ctc_score=0.0,
            lm_score=0.0,
            combined=0.0,
            ctc_state=ctc_prefix_initial(ctc_lp, blank),
        )
    ]
    finished = []
    last_live = live
    for _ in range(max_len + 1):
        if not live:
            break
        expansions = []
        for hyp in live:
            dec_in = np.array((SOS_ID,) + hyp.tokens, dtype=np.int64)
            logits = med_model.forward_decoder(params, config, enc, dec_in)
            row = logits.data[-1].astype(np.float64)
            att_lp = row - row.max()
            att_lp = att_lp - math.log(np.exp(att_lp).sum())
            strs = vocab.to_tokens(hyp.tokens)

            # end-of-sequence competes in the beam like any candidate
            att_eos = hyp.att_score + att_lp[EOS_ID]
            ctc_eos = ctc_finish_score(hyp.ctc_state)
            lm_eos = hyp.lm_score + (lm.score(strs, EOS_TOKEN) if lm else 0.0)
            comb_eos = _combine(alpha, beta, ctc_eos, att_eos, lm_eos)
            if np.isfinite(comb_eos):
                expansions.append(
                    Hypothesis(
                        tokens=hyp.tokens,
                        att_score=att_eos,
                        ctc_score=ctc_eos,
                        lm_score=lm_eos,
                        combined=comb_eos,
                        ctc_state=None,
                        finished=True,
                    )
                )
            if len(hyp.tokens) >= max_len:
                continue
            last = hyp.tokens[-1] if hyp.tokens else -1
            psi, states = ctc_prefix_step(
                ctc_lp, blank, last, len(hyp.tokens), hyp.ctc_state, cands
            )
            for idx, cand in enumerate(cands):
                att_c = hyp.att_score + att_lp[cand]
                lm_c = hyp.lm_score + (
                    lm.score(strs, vocab.tokens[cand]) if lm else 0.0
                )
                comb = _combine(alpha, beta, psi[idx], att_c, lm_c)
                if not np.isfinite(comb):
                    continue
                expansions.append(
                    Hypothesis(
                        tokens=hyp.tokens + (int(cand),),
                        att_score=att_c,
                        ctc_score=float(psi[idx]),
                        lm_score=lm_c,
                        combined=comb,
                        ctc_state=states[idx],
                    )
                )
        expansions.sort(key=lambda h: h.combined, reverse=True)
        live = []
        for h in expansions[:beam]:
            if h.finished:
                finished.append(h)
            else:
                live.append(h)
        if live:
            last_live = live
    if finished:
        finished.sort(key=lambda h: h.normalized(), reverse=True)
        return finished
    last_live.sort(key=lambda h: h.normalized(), reverse=True)
    return last_live


def greedy_attention_decode(params, config, features, max_len=None):
    """Fast attention-only greedy decode used for per-epoch dev scoring."""
    enc = med_model.encode(params, features)
    if max_len is None:
        max_len = enc.t_len
    tokens = []
    for _ in range(max_len):
        dec_in = np.array([SOS_ID] + tokens, dtype=np.int64)
        logits = med_model.forward_decoder(params, config, enc, dec_in)
        row = logits.data[-1].copy()
        row[PAD_ID] = row[SOS_ID] = -np.inf  # never emit control tokens
        nxt = int(np.argmax(row))
        if nxt == EOS_ID:
            break
        tokens.append(nxt)
    return tokens


# ---------------------------------------------------------------------------
# token error rate


@dataclass
class LangCounts:
    n_ref: int = 0
    subs: int = 0
    dels: int = 0
    ins: int = 0

    def errors(self):
        return self.subs + self.dels + self.ins


@dataclass
class TerReport:
    n_ref: int
    subs: int
    dels: int
    ins: int
    per_lang: dict  # lang -> LangCounts

    @property
    def errors(self):
        return self.subs + self.dels + self.ins

    @property
    def ter_pct(self):
        return 100.0 * self.errors / self.n_ref

    def lang_ter_pct(self, lang):
        c = self.per_lang[lang]
        if c.n_ref == 0:
            return float("nan")
        return 100.0 * c.errors() / c.n_ref


def _merge_counts(target, extra):
    target.n_ref += extra.n_ref
    target.subs += extra.subs
    target.dels += extra.dels
    target.ins += extra.ins


def ter(ref, hyp):
    """Levenshtein-aligned token error rate with per-language attribution.

    `ref` and `hyp` are sequences of (token, lang) pairs. Alignment uses
    uniform costs; cost ties prefer substitution over insertion+deletion.
    Substitutions and deletions are attributed to the reference token's
    language, insertions to the hypothesis token's language.
    """
    ref = list(ref)
    hyp = list(hyp)
    if not ref:
        raise InputError("ter: empty reference makes TER undefined")
    n, m = len(ref), len(hyp)
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (0 if ref[i - 1][0] == hyp[j - 1][0] else 1)
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)

    per_lang = {}

    def counts(lang):
        return per_lang.setdefault(lang, LangCounts())

    for tok, lang in ref:
        counts(lang).n_ref += 1

    i, j = n, m
    subs = dels = inss = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0:
            match = ref[i - 1][0] == hyp[j - 1][0]
            diag = dist[i - 1, j - 1] + (0 if match else 1)
            if diag == dist[i, j]:  # ties prefer the diagonal
                if not match:
                    subs += 1
                    counts(ref[i - 1][1]).subs += 1
                i, j = i - 1, j - 1
                continue
        if i > 0 and dist[i - 1, j] + 1 == dist[i, j]:
            dels += 1
            counts(ref[i - 1][1]).dels += 1
            i -= 1
            continue
        inss += 1
        counts(hyp[j - 1][1]).ins += 1
        j -= 1

    return TerReport(n_ref=n, subs=subs, dels=dels, ins=inss, per_lang=per_lang)


def corpus_ter(pairs):
    """Aggregate TER over (ref, hyp) tagged-sequence pairs."""
    total = TerReport(n_ref=0, subs=0, dels=0, ins=0, per_lang={})
    for ref, hyp in pairs:
        rep = ter(ref, hyp)
        total.n_ref += rep.n_ref
        total.subs += rep.subs
        total.dels += rep.dels
        total.ins += rep.ins
        for lang, c in rep.per_lang.items():
            _merge_counts(total.per_lang.setdefault(lang, LangCounts()), c)
    return total


def write_decode_output(path, rows):
    """`utt_id<TAB>hyp tokens` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for utt_id, tokens in rows:
            fh.write(f"{utt_id}\t{' '.join(tokens)}\n")
