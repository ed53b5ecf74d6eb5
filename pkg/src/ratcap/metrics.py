"""Caption metrics: BLEU-1..4, ROUGE-L and CIDEr-D.

All metrics tokenize with :func:`ratcap.tokenizer.normalize_caption` followed
by whitespace splitting.  Scores are pure functions of their arguments.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .tokenizer import NORMALIZATION, normalize_caption

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2
MAX_N = 4


class MetricError(ValueError):
    pass


def words(text: str) -> list[str]:
    return normalize_caption(text).split()


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def ngram_stats(tokens: Sequence[str], max_n: int = MAX_N) -> Counter:
    """All n-grams for n = 1..max_n in a single counter."""
    out: Counter = Counter()
    for n in range(1, max_n + 1):
        out.update(ngrams(tokens, n))
    return out


# -- BLEU ---------------------------------------------------------------------
def _closest_ref_len(cand_len: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def _bleu_counts(cand: list[str], refs: list[list[str]], max_n: int):
    matches, totals = [], []
    for n in range(1, max_n + 1):
        c = ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, k in ngrams(r, n).items():
                if k > max_ref[g]:
                    max_ref[g] = k
        matches.append(sum(min(k, max_ref[g]) for g, k in c.items()))
        totals.append(max(len(cand) - n + 1, 0))
    return matches, totals, _closest_ref_len(len(cand), (len(r) for r in refs))


def _bleu_from_counts(matches, totals, cand_len, ref_len, max_n):
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores, log_sum = [], 0.0
    for n in range(max_n):
        if matches[n] == 0 or totals[n] == 0:
            # geometric mean with a zero factor; later orders stay zero too
            scores.extend([0.0] * (max_n - n))
            break
        log_sum += math.log(matches[n] / totals[n])
        scores.append(bp * math.exp(log_sum / (n + 1)))
    return scores


def bleu(candidate: str, references: Sequence[str], max_n: int = MAX_N) -> list[float]:
    """Sentence BLEU-1..max_n with clipped precisions and closest-length brevity penalty."""
    if not references:
        raise MetricError("bleu needs at least one reference")
    cand = words(candidate)
    refs = [words(r) for r in references]
    matches, totals, ref_len = _bleu_counts(cand, refs, max_n)
    return _bleu_from_counts(matches, totals, len(cand), ref_len, max_n)


def corpus_bleu(pairs: Sequence[tuple[str, Sequence[str]]], max_n: int = MAX_N) -> list[float]:
    """Corpus BLEU: counts and lengths summed over all pairs before combining."""
    m_tot = [0] * max_n
    t_tot = [0] * max_n
    c_len = r_len = 0
    for cand_text, ref_texts in pairs:
        cand = words(cand_text)
        refs = [words(r) for r in ref_texts]
        matches, totals, ref_len = _bleu_counts(cand, refs, max_n)
        m_tot = [a + b for a, b in zip(m_tot, matches)]
        t_tot = [a + b for a, b in zip(t_tot, totals)]
        c_len += len(cand)
        r_len += ref_len
    return _bleu_from_counts(m_tot, t_tot, c_len, r_len, max_n)


# -- ROUGE-L --------------------------------------------------------------------
def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: str, references: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """Max over references of the LCS F-measure."""
    if not references:
        raise MetricError("rouge_l needs at least one reference")
    cand = words(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref_text in references:
        ref = words(ref_text)
        lcs = lcs_length(cand, ref)
        if lcs == 0 or not ref:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        f = (1 + beta**2) * p * r / (r + beta**2 * p)
        best = max(best, f)
    return best


# -- CIDEr-D --------------------------------------------------------------------
@dataclass
class IdfTable:
    """Document frequencies of n-grams over a reference corpus (one document per image)."""

    df: dict[tuple[str, ...], int] = field(default_factory=dict)
    n_docs: int = 0

    @classmethod
    def build(cls, reference_sets: Iterable[Sequence[str]], max_n: int = MAX_N) -> "IdfTable":
        df: Counter = Counter()
        n_docs = 0
        for refs in reference_sets:
            n_docs += 1
            seen: set = set()
            for r in refs:
                seen.update(ngram_stats(words(r), max_n))
            df.update(seen)
        return cls(dict(df), n_docs)

    @property
    def degenerate(self) -> bool:
        return self.n_docs <= 1

    def idf(self, gram) -> float:
        return math.log(float(self.n_docs)) - math.log(max(1.0, float(self.df.get(gram, 0.0))))


def _tfidf(tokens: list[str], idf: IdfTable, max_n: int):
    vecs, norms = [], []
    for n in range(1, max_n + 1):
        vec = {g: k * idf.idf(g) for g, k in ngrams(tokens, n).items()}
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider_d(
    candidate: str,
    references: Sequence[str],
    idf: IdfTable,
    sigma: float = CIDER_SIGMA,
    max_n: int = MAX_N,
) -> float:
    """CIDEr-D in [0, 10]: clipped TF-IDF cosine per n with a Gaussian length penalty."""
    if not references:
        raise MetricError("cider_d needs at least one reference")
    if idf.degenerate:
        return 0.0
    cand = words(candidate)
    c_vecs, c_norms = _tfidf(cand, idf, max_n)
    total = 0.0
    for ref_text in references:
        ref = words(ref_text)
        r_vecs, r_norms = _tfidf(ref, idf, max_n)
        penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2 * sigma**2))
        sims = 0.0
        for n in range(max_n):
            if c_norms[n] == 0 or r_norms[n] == 0:
                continue
            rv = r_vecs[n]
            dot = sum(min(v, rv[g]) * rv[g] for g, v in c_vecs[n].items() if g in rv)
            sims += dot / (c_norms[n] * r_norms[n]) * penalty
        total += sims / max_n
    return 10.0 * total / len(references)


# -- corpus-level report ------------------------------------------------------------
METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr-D")


def sentence_scores(candidate: str, references: Sequence[str], idf: IdfTable) -> dict[str, float]:
    """All metrics for one candidate (sentence-level BLEU)."""
    b = bleu(candidate, references)
    out = {f"BLEU-{i + 1}": v for i, v in enumerate(b)}
    out["ROUGE-L"] = rouge_l(candidate, references)
    out["CIDEr-D"] = cider_d(candidate, references, idf)
    return out


def corpus_eval(
    predictions: Mapping[str, str],
    references: Mapping[str, Sequence[str]],
    idf: IdfTable | None = None,
) -> dict[str, float]:
    """Corpus BLEU, mean ROUGE-L and mean CIDEr-D.

    ``idf`` defaults to document frequencies over ``references``.
    """
    if not predictions:
        raise MetricError("empty prediction set")
    missing = sorted(set(references) - set(predictions))
    extra = sorted(set(predictions) - set(references))
    if missing or extra:
        raise MetricError(f"key mismatch: missing predictions {missing}, unknown ids {extra}")
    keys = sorted(predictions)
    if idf is None:
        idf = IdfTable.build(references[k] for k in keys)
    out = {f"BLEU-{i + 1}": v for i, v in enumerate(corpus_bleu([(predictions[k], references[k]) for k in keys]))}
    out["ROUGE-L"] = sum(rouge_l(predictions[k], references[k]) for k in keys) / len(keys)
    out["CIDEr-D"] = sum(cider_d(predictions[k], references[k], idf) for k in keys) / len(keys)
    return out


def report_json(scores: Mapping[str, float]) -> str:
    payload = dict(scores)
    payload["config"] = {"tokenization": NORMALIZATION, "cider_sigma": CIDER_SIGMA, "rouge_beta": ROUGE_BETA}
    return json.dumps(payload, indent=2, sort_keys=True)
