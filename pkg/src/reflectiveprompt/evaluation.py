"""Fitness computation: prompt rendering, answer extraction, and metrics.

Classification fitness is macro-F1 over a label set with aliases;
generation fitness is the mean of per-sentence METEOR scores (exact and
stem matching stages, no synonym tables). Both metrics are total functions
into [0, 1]. A digest-keyed cache makes re-evaluating an unchanged prompt
free of LLM calls.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .core import LabelDef, TaskSpec
from .errors import BudgetExhaustedError, MalformedOutputError, UsageError, ValidationError
from .gateway import ChatMessage, CompletionRequest, Gateway, build_request

UNMATCHED = "<unmatched>"

INFERENCE_TEMPERATURE = 0.0
INFERENCE_MAX_TOKENS = 256

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class EvalSample:
    """One labelled example: model input plus gold label or reference text."""

    input: str
    target: str
    line: int | None = None

    def __post_init__(self):
        if not self.input.strip():
            raise ValidationError("sample input must be non-empty")
        if not self.target.strip():
            raise ValidationError("sample target must be non-empty")


@dataclass(frozen=True)
class MeteorParams:
    alpha: float = 0.9
    beta: float = 3.0
    gamma: float = 0.5
    matchers: tuple[str, ...] = ("exact", "stem")

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise ValidationError("alpha must be in (0, 1)")
        if not (self.beta > 0):
            raise ValidationError("beta must be > 0")
        if not (0.0 <= self.gamma <= 1.0):
            raise ValidationError("gamma must be in [0, 1]")
        if not self.matchers or any(m not in ("exact", "stem") for m in self.matchers):
            raise ValidationError("matchers must be a non-empty subset of exact/stem")


@dataclass(frozen=True)
class FitnessScore:
    value: float
    n_samples: int
    metric: str
    per_sample: tuple[dict, ...] = ()

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0):
            raise ValidationError("fitness value outside [0, 1]")


class PorterStemmer:
    """Classic suffix-stripping stemmer; enough for METEOR's stem stage."""

    _VOWELS = "aeiou"

    _STEP2 = (
        ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
        ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
        ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
        ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
        ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
    )
    _STEP3 = (
        ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
        ("ical", "ic"), ("ful", ""), ("ness", ""),
    )
    _STEP4 = (
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
        "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    )

    def stem(self, word: str) -> str:
        w = word.lower()
        if len(w) <= 2:
            return w
        w = self._step1a(w)
        w = self._step1b(w)
        w = self._step1c(w)
        w = self._step2(w)
        w = self._step3(w)
        w = self._step4(w)
        w = self._step5(w)
        return w

    def _is_consonant(self, w: str, i: int) -> bool:
        ch = w[i]
        if ch in self._VOWELS:
            return False
        if ch == "y":
            return i == 0 or not self._is_consonant(w, i - 1)
        return True

    def _measure(self, stem: str) -> int:
        m = 0
        prev_vowel = False
        for i in range(len(stem)):
            consonant = self._is_consonant(stem, i)
            if consonant and prev_vowel:
                m += 1
            prev_vowel = not consonant
        return m

    def _has_vowel(self, stem: str) -> bool:
        return any(not self._is_consonant(stem, i) for i in range(len(stem)))

    def _ends_double_consonant(self, w: str) -> bool:
        return len(w) >= 2 and w[-1] == w[-2] and self._is_consonant(w, len(w) - 1)

    def _ends_cvc(self, w: str) -> bool:
        if len(w) < 3:
            return False
        return (
            self._is_consonant(w, len(w) - 3)
            and not self._is_consonant(w, len(w) - 2)
            and self._is_consonant(w, len(w) - 1)
            and w[-1] not in "wxy"
        )

    def _step1a(self, w: str) -> str:
        if w.endswith("sses") or w.endswith("ies"):
            return w[:-2]
        if w.endswith("ss"):
            return w
        if w.endswith("s"):
            return w[:-1]
        return w

    def _step1b(self, w: str) -> str:
        if w.endswith("eed"):
            return w[:-1] if self._measure(w[:-3]) > 0 else w
        if w.endswith("ed") and self._has_vowel(w[:-2]):
            return self._step1b_fixup(w[:-2])
        if w.endswith("ing") and self._has_vowel(w[:-3]):
            return self._step1b_fixup(w[:-3])
        return w

    def _step1b_fixup(self, w: str) -> str:
        if w.endswith(("at", "bl", "iz")):
            return w + "e"
        if self._ends_double_consonant(w) and w[-1] not in "lsz":
            return w[:-1]
        if self._measure(w) == 1 and self._ends_cvc(w):
            return w + "e"
        return w

    def _step1c(self, w: str) -> str:
        if w.endswith("y") and self._has_vowel(w[:-1]):
            return w[:-1] + "i"
        return w

    def _longest_rule(self, w: str, rules) -> tuple[str, str] | None:
        best = None
        for suffix, replacement in rules:
            if w.endswith(suffix) and (best is None or len(suffix) > len(best[0])):
                best = (suffix, replacement)
        return best

    def _step2(self, w: str) -> str:
        rule = self._longest_rule(w, self._STEP2)
        if rule and self._measure(w[: -len(rule[0])]) > 0:
            return w[: -len(rule[0])] + rule[1]
        return w

    def _step3(self, w: str) -> str:
        rule = self._longest_rule(w, self._STEP3)
        if rule and self._measure(w[: -len(rule[0])]) > 0:
            return w[: -len(rule[0])] + rule[1]
        return w

    def _step4(self, w: str) -> str:
        rule = self._longest_rule(w, [(s, "") for s in self._STEP4])
        if rule is None:
            return w
        suffix = rule[0]
        stem = w[: -len(suffix)]
        if self._measure(stem) <= 1:
            return w
        if suffix == "ion" and not stem.endswith(("s", "t")):
            return w
        return stem

    def _step5(self, w: str) -> str:
        if w.endswith("e"):
            stem = w[:-1]
            m = self._measure(stem)
            if m > 1 or (m == 1 and not self._ends_cvc(stem)):
                w = stem
        if self._measure(w) > 1 and self._ends_double_consonant(w) and w.endswith("l"):
            w = w[:-1]
        return w


_STEMMER = PorterStemmer()


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric runs."""
    return _TOKEN_RE.findall(text.lower())


def _align(hyp: list[str], ref: list[str], matchers: tuple[str, ...]) -> list[tuple[int, int]]:
    """Greedy one-to-one unigram alignment, stage by stage.

    Within a stage, a hypothesis token prefers the reference position that
    extends the chunk started by the nearest already-matched token to its
    left, falling back to the earliest free candidate.
    """
    assigned: list[int | None] = [None] * len(hyp)
    ref_taken = [False] * len(ref)

    for stage in matchers:
        if stage == "exact":
            hyp_keys, ref_keys = hyp, ref
        else:
            hyp_keys = [_STEMMER.stem(t) for t in hyp]
            ref_keys = [_STEMMER.stem(t) for t in ref]
        for i in range(len(hyp)):
            if assigned[i] is not None:
                continue
            candidates = [
                j for j in range(len(ref))
                if not ref_taken[j] and ref_keys[j] == hyp_keys[i]
            ]
            if not candidates:
                continue
            prev_ref = None
            for back in range(i - 1, -1, -1):
                if assigned[back] is not None:
                    prev_ref = assigned[back]
                    break
            choice = prev_ref + 1 if prev_ref is not None and prev_ref + 1 in candidates else candidates[0]
            assigned[i] = choice
            ref_taken[choice] = True

    return [(i, j) for i, j in enumerate(assigned) if j is not None]


def _count_chunks(matches: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for hyp_i, ref_i in matches:
        if prev is None or (hyp_i, ref_i) != (prev[0] + 1, prev[1] + 1):
            chunks += 1
        prev = (hyp_i, ref_i)
    return chunks


def meteor_sentence(hypothesis: str, reference: str, params: MeteorParams | None = None) -> float:
    """Unigram precision/recall harmonic mean with a fragmentation penalty.

    With m matched unigrams: P = m/|hyp|, R = m/|ref|,
    Fmean = P*R / (alpha*P + (1-alpha)*R), penalty = gamma*(chunks/m)**beta,
    score = Fmean * (1 - penalty). Zero matches or an empty side scores 0.
    """
    params = params or MeteorParams()
    hyp = tokenize(hypothesis)
    ref = tokenize(reference)
    if not hyp or not ref:
        return 0.0
    matches = _align(hyp, ref, params.matchers)
    m = len(matches)
    if m == 0:
        return 0.0
    precision = m / len(hyp)
    recall = m / len(ref)
    fmean = (precision * recall) / (params.alpha * precision + (1 - params.alpha) * recall)
    penalty = params.gamma * (_count_chunks(matches) / m) ** params.beta
    return fmean * (1.0 - penalty)


def extract_label(raw_output: str, label_set: tuple[LabelDef, ...]) -> str:
    """Earliest whole-word alias occurrence wins; no occurrence -> UNMATCHED.

    Matching is case-insensitive; ties at the same start position resolve
    in label-set order. Total function: never raises on any output text.
    """
    best: tuple[int, int] | None = None
    for order, label in enumerate(label_set):
        for alias in label.all_aliases:
            pattern = re.compile(
                r"(?<![a-zA-Z0-9])" + re.escape(alias) + r"(?![a-zA-Z0-9])",
                re.IGNORECASE,
            )
            found = pattern.search(raw_output)
            if found is None:
                continue
            key = (found.start(), order)
            if best is None or key < best:
                best = key
    return label_set[best[1]].name if best else UNMATCHED


def macro_f1(
    predictions: list[str],
    golds: list[str],
    label_set: tuple[LabelDef, ...],
) -> float:
    """Unweighted mean of per-label F1 from the confusion counts.

    UNMATCHED predictions contribute a false negative for the gold label and
    no false positive anywhere. Labels absent from both sides score 0 and
    still enter the average.
    """
    if len(predictions) != len(golds):
        raise ValidationError(
            f"predictions ({len(predictions)}) and golds ({len(golds)}) differ in length"
        )
    if not golds:
        raise ValidationError("macro_f1 needs at least one sample")
    names = [label.name for label in label_set]
    for gold in golds:
        if gold not in names:
            raise ValidationError(f"gold label {gold!r} not in label set")

    tp = {name: 0 for name in names}
    fp = {name: 0 for name in names}
    fn = {name: 0 for name in names}
    for pred, gold in zip(predictions, golds):
        if pred == gold:
            tp[gold] += 1
        else:
            fn[gold] += 1
            if pred in tp:
                fp[pred] += 1

    f1_values = []
    for name in names:
        denominator = 2 * tp[name] + fp[name] + fn[name]
        f1_values.append(2 * tp[name] / denominator if denominator else 0.0)
    return sum(f1_values) / len(f1_values)


def render_task_input(
    prompt: str,
    sample: EvalSample,
    label_set: tuple[LabelDef, ...] | None = None,
) -> CompletionRequest:
    """Candidate prompt as system message, sample input (plus, for
    classification, a fixed answer-format line) as user message."""
    if not prompt.strip():
        raise ValidationError("prompt must be non-empty")
    user_text = sample.input
    if label_set:
        names = ", ".join(label.name for label in label_set)
        user_text = f"{sample.input}\nAnswer with exactly one of the following labels: {names}."
    return build_request(
        [ChatMessage("system", prompt), ChatMessage("user", user_text)],
        purpose="task_inference",
        temperature=INFERENCE_TEMPERATURE,
        max_tokens=INFERENCE_MAX_TOKENS,
    )


def digest_prompt(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()[:16]


def digest_samples(samples: list[EvalSample]) -> str:
    canonical = json.dumps([[s.input, s.target] for s in samples], ensure_ascii=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


class FitnessCache:
    """(prompt digest, sample-set digest) -> FitnessScore; thread-safe."""

    def __init__(self):
        self._entries: dict[str, FitnessScore] = {}
        self._lock = threading.Lock()

    @staticmethod
    def _key(prompt_digest: str, samples_digest: str) -> str:
        return f"{prompt_digest}:{samples_digest}"

    def get(self, prompt_digest: str, samples_digest: str) -> FitnessScore | None:
        with self._lock:
            return self._entries.get(self._key(prompt_digest, samples_digest))

    def put(self, prompt_digest: str, samples_digest: str, score: FitnessScore) -> None:
        with self._lock:
            self._entries[self._key(prompt_digest, samples_digest)] = score

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)

    def to_doc(self) -> dict:
        with self._lock:
            return {
                key: {
                    "value": score.value,
                    "n_samples": score.n_samples,
                    "metric": score.metric,
                    "per_sample": list(score.per_sample),
                }
                for key, score in self._entries.items()
            }

    @classmethod
    def from_doc(cls, doc: dict) -> "FitnessCache":
        cache = cls()
        for key, entry in doc.items():
            cache._entries[key] = FitnessScore(
                value=entry["value"],
                n_samples=entry["n_samples"],
                metric=entry["metric"],
                per_sample=tuple(entry["per_sample"]),
            )
        return cache


def evaluate_prompt(
    prompt: str,
    task: TaskSpec,
    samples: list[EvalSample],
    gateway: Gateway,
    cache: FitnessCache | None = None,
    audit_path: str | None = None,
    parallelism: int = 1,
    meteor_params: MeteorParams | None = None,
) -> FitnessScore:
    """Score one prompt over a sample batch through the task LLM.

    Individual malformed responses count as UNMATCHED/0 instead of aborting;
    budget exhaustion aborts the whole batch and propagates. Results are
    cached by (prompt digest, sample-set digest), so an unchanged prompt
    re-evaluates with zero LLM calls.
    """
    if not samples:
        raise UsageError("evaluate_prompt needs at least one sample")
    prompt_digest = digest_prompt(prompt)
    samples_digest = digest_samples(samples)
    if cache is not None:
        hit = cache.get(prompt_digest, samples_digest)
        if hit is not None:
            return hit

    label_set = task.label_set if task.metric == "macro_f1" else None

    def _query(sample: EvalSample) -> str:
        request = render_task_input(prompt, sample, label_set)
        try:
            return gateway.complete(request).text
        except MalformedOutputError:
            return ""

    if parallelism > 1 and len(samples) > 1:
        with ThreadPoolExecutor(max_workers=parallelism) as pool:
            raw_outputs = list(pool.map(_query, samples))
    else:
        raw_outputs = [_query(sample) for sample in samples]

    per_sample = []
    if task.metric == "macro_f1":
        predictions = [extract_label(raw, task.label_set) for raw in raw_outputs]
        golds = [sample.target for sample in samples]
        value = macro_f1(predictions, golds, task.label_set)
        for index, (raw, pred, gold) in enumerate(zip(raw_outputs, predictions, golds)):
            per_sample.append(
                {
                    "index": index,
                    "raw_output": raw,
                    "extracted": pred,
                    "score": 1.0 if pred == gold else 0.0,
                }
            )
    else:
        scores = [
            meteor_sentence(raw, sample.target, meteor_params)
            for raw, sample in zip(raw_outputs, samples)
        ]
        value = sum(scores) / len(scores)
        for index, (raw, score) in enumerate(zip(raw_outputs, scores)):
            per_sample.append(
                {"index": index, "raw_output": raw, "extracted": None, "score": score}
            )

    result = FitnessScore(
        value=value,
        n_samples=len(samples),
        metric=task.metric,
        per_sample=tuple(per_sample),
    )
    if audit_path:
        with open(audit_path, "a", encoding="utf-8") as fh:
            for record in per_sample:
                line = {
                    "prompt_digest": prompt_digest,
                    "sample_index": record["index"],
                    "raw_output": record["raw_output"],
                    "extracted": record["extracted"],
                    "per_sample_score": record["score"],
                }
                fh.write(json.dumps(line, ensure_ascii=False, sort_keys=True) + "\n")
    if cache is not None:
        cache.put(prompt_digest, samples_digest, result)
    return result
