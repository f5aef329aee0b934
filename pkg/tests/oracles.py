"""Independent reference implementations used as test oracles.

These deliberately share no code with the package: brute-force search,
textbook metric formulas with different internal representations, and a
memoized recursive LCS. They exist so the production paths can be checked
against something that cannot inherit their bugs.
"""

from __future__ import annotations

import math
import re
import sys
from functools import lru_cache

_WORDS = re.compile(r"[\w]+", re.UNICODE)


def tok(text: str) -> list[str]:
    return [w.lower() for w in _WORDS.findall(text)]


def brute_force_top_k(matrix, ids, query, k):
    """Full sort over exact cosine scores; ties by ascending id."""
    import numpy as np

    q = np.asarray(query, dtype=np.float64)
    q = q / np.linalg.norm(q)
    scored = []
    for row, pid in zip(matrix, ids):
        r = np.asarray(row, dtype=np.float64)
        r = r / np.linalg.norm(r)
        scored.append((float(np.dot(r, q)), pid))
    scored.sort(key=lambda pair: (-pair[0], pair[1]))
    return [pid for _, pid in scored[:k]]


def lcs_recursive(a: tuple[str, ...], b: tuple[str, ...]) -> int:
    sys.setrecursionlimit(100000)

    @lru_cache(maxsize=None)
    def go(i: int, j: int) -> int:
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + go(i + 1, j + 1)
        return max(go(i + 1, j), go(i, j + 1))

    return go(0, 0)


def lcs_f1_oracle(candidate: str, reference: str) -> float:
    a, b = tuple(tok(candidate)), tuple(tok(reference))
    lcs = lcs_recursive(a, b)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(a), lcs / len(b)
    return 2 * p * r / (p + r)


def _ngram_list(tokens: list[str], n: int) -> list[tuple[str, ...]]:
    return [tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1)]


def bleu_oracle(preds: list[str], refs: list[str], n_max: int = 4) -> list[float]:
    """Corpus BLEU via explicit position-by-position clipping."""
    clipped = {n: 0 for n in range(1, n_max + 1)}
    total = {n: 0 for n in range(1, n_max + 1)}
    c_len = r_len = 0
    for pred, ref in zip(preds, refs):
        c_tok, r_tok = tok(pred), tok(ref)
        c_len += len(c_tok)
        r_len += len(r_tok)
        for n in range(1, n_max + 1):
            cand_grams = _ngram_list(c_tok, n)
            ref_grams = _ngram_list(r_tok, n)
            budget: dict[tuple[str, ...], int] = {}
            for gram in ref_grams:
                budget[gram] = budget.get(gram, 0) + 1
            for gram in cand_grams:
                if budget.get(gram, 0) > 0:
                    clipped[n] += 1
                    budget[gram] -= 1
            total[n] += len(cand_grams)
    if c_len == 0:
        return [0.0] * n_max
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    out = []
    for n in range(1, n_max + 1):
        ps = [clipped[m] / total[m] if total[m] else 0.0 for m in range(1, n + 1)]
        if min(ps) == 0.0:
            out.append(0.0)
        else:
            out.append(100.0 * bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


def rouge_l_oracle(preds: list[str], refs: list[str], beta: float = 1.2) -> float:
    total = 0.0
    for pred, ref in zip(preds, refs):
        a, b = tuple(tok(pred)), tuple(tok(ref))
        lcs = lcs_recursive(a, b)
        if lcs == 0:
            continue
        p, r = lcs / len(a), lcs / len(b)
        total += ((1 + beta**2) * p * r) / (r + beta**2 * p)
    return 100.0 * total / len(preds)


def cider_oracle(preds: list[str], refs: list[str], n_max: int = 4) -> float:
    """CIDEr with length-normalized TF: scale-invariant under the cosine,
    so it must agree with a raw-count implementation."""
    ref_toks = [tok(r) for r in refs]
    pred_toks = [tok(p) for p in preds]
    num_docs = len(refs)

    df: dict[int, dict[tuple[str, ...], int]] = {n: {} for n in range(1, n_max + 1)}
    for tokens in ref_toks:
        for n in range(1, n_max + 1):
            for gram in set(_ngram_list(tokens, n)):
                df[n][gram] = df[n].get(gram, 0) + 1

    def vec(tokens: list[str], n: int) -> dict[tuple[str, ...], float]:
        grams = _ngram_list(tokens, n)
        if not grams:
            return {}
        counts: dict[tuple[str, ...], int] = {}
        for gram in grams:
            counts[gram] = counts.get(gram, 0) + 1
        return {
            gram: (count / len(grams))
            * math.log(num_docs / max(1.0, df[n].get(gram, 0)))
            for gram, count in counts.items()
        }

    score = 0.0
    for c_tok, r_tok in zip(pred_toks, ref_toks):
        pair = 0.0
        for n in range(1, n_max + 1):
            vc, vr = vec(c_tok, n), vec(r_tok, n)
            norm_c = math.sqrt(sum(v * v for v in vc.values()))
            norm_r = math.sqrt(sum(v * v for v in vr.values()))
            if norm_c == 0 or norm_r == 0:
                continue
            dot = sum(v * vr.get(g, 0.0) for g, v in vc.items())
            pair += dot / (norm_c * norm_r)
        score += 10.0 * pair / n_max
    return score / len(preds)
