"""CTC training criterion and N-best prefix beam search decoding.

The loss is the standard forward DP over the blank-extended label, run in
log space through the autodiff graph, so its gradient comes from the same
reverse-mode machinery as everything else. Blank id is fixed at 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

BLANK_ID = 0
WB_TOKEN = "<wb>"


@dataclass(frozen=True)
class PhonemeInventory:
    """Ordered non-blank phoneme symbols; ids are 1-based (blank is 0)."""

    symbols: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("phoneme inventory has duplicate symbols")
        if self.symbols.count(WB_TOKEN) != 1:
            raise ValueError(f"phoneme inventory must contain {WB_TOKEN} exactly once")

    @property
    def num_classes(self) -> int:
        """Output classes of the acoustic network, including blank."""
        return len(self.symbols) + 1

    @property
    def wb_id(self) -> int:
        return self.symbols.index(WB_TOKEN) + 1

    def id_of(self, symbol: str) -> int:
        try:
            return self.symbols.index(symbol) + 1
        except ValueError:
            raise ValueError(f"unknown phoneme symbol: {symbol!r}") from None

    def ids_of(self, symbols) -> list[int]:
        index = {s: i + 1 for i, s in enumerate(self.symbols)}
        return [index[s] for s in symbols]

    def symbol_of(self, pid: int) -> str:
        if not 1 <= pid <= len(self.symbols):
            raise ValueError(f"phoneme id {pid} out of range")
        return self.symbols[pid - 1]


@dataclass
class NBestList:
    """Distinct decoded sequences with non-increasing log scores."""

    candidates: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def __post_init__(self):
        seqs = [tuple(s) for s, _ in self.candidates]
        if len(set(seqs)) != len(seqs):
            raise ValueError("n-best candidates must be pairwise distinct")
        scores = [sc for _, sc in self.candidates]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise ValueError("n-best scores must be non-increasing")

    def __len__(self):
        return len(self.candidates)

    def sequences(self) -> list[tuple[int, ...]]:
        return [s for s, _ in self.candidates]


def ctc_feasible(t_len: int, label) -> bool:
    """A label fits in t_len frames iff t_len >= |label| + adjacent repeats."""
    label = list(label)
    repeats = sum(1 for a, b in zip(label, label[1:]) if a == b)
    return t_len >= len(label) + repeats


def ctc_loss(log_probs: Tensor, label) -> Tensor:
    """-log P(label | log_probs) over all CTC alignments.

    log_probs is [T, V+1] with valid log-distributions per frame (column 0
    is blank). Infeasible labels yield a detached +inf marker carrying no
    gradient; callers are expected to skip those utterances.
    """
    label = [int(x) for x in label]
    T, C = log_probs.shape
    if any(x == BLANK_ID for x in label):
        raise ValueError("label may not contain the blank id")
    if any(not 0 < x < C for x in label):
        raise ValueError(f"label id out of range for {C} classes")
    if not ctc_feasible(T, label):
        return Tensor(np.inf)

    ext = [BLANK_ID]
    for x in label:
        ext.extend((x, BLANK_ID))
    S = len(ext)
    ext_idx = np.array(ext, dtype=np.int64)

    # emissions [T, S]: log_probs gathered at the extended label symbols
    emit = ad.take(log_probs.transpose(), ext_idx).transpose()

    skip_blocked = np.ones(S, dtype=bool)
    for s in range(2, S):
        if ext[s] != BLANK_ID and ext[s] != ext[s - 2]:
            skip_blocked[s] = False

    init_blocked = np.ones(S, dtype=bool)
    init_blocked[: min(2, S)] = False
    alpha = ad.masked_fill(emit[0], init_blocked, -np.inf)

    neg1 = Tensor([-np.inf])
    neg2 = Tensor([-np.inf, -np.inf])
    for t in range(1, T):
        a1 = ad.concat([neg1, alpha[:-1]]) if S > 1 else neg1
        a2 = ad.concat([neg2, alpha[:-2]]) if S > 2 else ad.masked_fill(alpha, np.ones(S, bool), -np.inf)
        a2 = ad.masked_fill(a2, skip_blocked, -np.inf)
        alpha = ad.log_sum_exp(ad.stack([alpha, a1, a2], axis=0), axis=0) + emit[t]

    final = ad.log_sum_exp(alpha[max(S - 2, 0):], axis=0)
    return -final


def greedy_collapse(frame_argmax) -> tuple[int, ...]:
    """Merge adjacent repeats, then drop blanks."""
    out = []
    prev = None
    for x in frame_argmax:
        x = int(x)
        if x != prev:
            out.append(x)
        prev = x
    return tuple(x for x in out if x != BLANK_ID)


def prefix_beam_search_nbest(log_probs: np.ndarray, beam: int, n: int) -> NBestList:
    """Standard CTC prefix beam search keeping per-prefix blank/non-blank mass.

    Prefixes are merged in log space; after each frame only the top `beam`
    prefixes by total mass survive. Returns the top `n` distinct collapsed
    prefixes with their total log probabilities.
    """
    if not beam >= n >= 1:
        raise ValueError(f"need beam >= n >= 1, got beam={beam}, n={n}")
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    NEG = -np.inf

    beams: dict[tuple[int, ...], tuple[float, float]] = {(): (0.0, NEG)}
    for t in range(T):
        new: dict[tuple[int, ...], list[float]] = {}

        def slot(prefix):
            entry = new.get(prefix)
            if entry is None:
                entry = [NEG, NEG]
                new[prefix] = entry
            return entry

        row = lp[t]
        for prefix, (pb, pnb) in beams.items():
            total = np.logaddexp(pb, pnb)
            cur = slot(prefix)
            cur[0] = np.logaddexp(cur[0], total + row[BLANK_ID])
            last = prefix[-1] if prefix else None
            for c in range(1, C):
                pc = row[c]
                if c == last:
                    cur[1] = np.logaddexp(cur[1], pnb + pc)
                    ext = slot(prefix + (c,))
                    ext[1] = np.logaddexp(ext[1], pb + pc)
                else:
                    ext = slot(prefix + (c,))
                    ext[1] = np.logaddexp(ext[1], total + pc)

        ranked = sorted(new.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beams = {k: (v[0], v[1]) for k, v in ranked[:beam]}

    final = sorted(beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
    return NBestList([(k, float(np.logaddexp(v[0], v[1]))) for k, v in final[:n]])
