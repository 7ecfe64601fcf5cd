"""End-to-end pipeline driver, metrics, fairness protocol, sweeps, grid search.

Every run is deterministic given its seeds: per-instance randomness is derived
from (run seed, instance id) with a stable hash, and emitted report rows carry
only deterministic fields (wall-clock timings live in separate measured
reports, never in the byte-comparable emissions).
"""

from __future__ import annotations

import hashlib
import itertools
import json
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .budget import Counters, CostConstants, LatencyReport, StageClock, WorkloadShape, measured_report, model_latency, scalarized_objective
from .encoder import DialogueContext, EncoderWeights, Turn, encode_context
from .errors import CompositionError, ConfigError, InvariantViolation
from .memory import Memory, tokenize
from .prompt import (
    BudgetConfig,
    DEFAULT_ANSWER_FORMAT,
    DEFAULT_INSTRUCTION,
    Prompt,
    compose,
    count_tokens,
    render_exemplar_line,
)
from .retrieval import Candidate, RetrievalConfig, retrieve_pool
from .selection import (
    SelectedSet,
    SelectionConfig,
    fps_select,
    greedy_select,
    mmr_select,
    random_select,
    topk_select,
)
from .verifier import VerifierOutput, candidate_labels, mock_verifier, score_labels

METHODS = ("ldra", "topk", "mmr", "fps", "random", "topk_rand_add")

FAIRNESS_ARMS = ("ldra", "topk", "topk_rand_add", "ldra_shuffle", "ldra_prefix_replace")

TOKEN_DEVIATION_LIMIT_PCT = 2.0

NOT_MENTIONED = "not_mentioned"


def derive_seed(*parts) -> int:
    """Stable cross-platform seed from arbitrary parts."""
    digest = hashlib.blake2s(":".join(str(p) for p in parts).encode("utf-8"), digest_size=8)
    return int.from_bytes(digest.digest(), "big")


# ---------------------------------------------------------------------------
# Eval corpus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalInstance:
    """One evaluation dialogue with its gold label."""

    id: str
    dialogue: DialogueContext
    gold: str
    slots: tuple[Mapping[str, str], ...] | None = None

    def __post_init__(self):
        if not self.gold:
            raise ConfigError(f"instance {self.id!r} has an empty gold label")


def write_corpus(instances: Sequence[EvalInstance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            row = {
                "id": inst.id,
                "turns": [
                    {
                        "user": t.user,
                        "agent": t.agent,
                        "user_embedding": [float(x) for x in t.user_embedding],
                        "agent_embedding": [float(x) for x in t.agent_embedding],
                    }
                    for t in inst.dialogue.turns
                ],
                "current": inst.dialogue.current,
                "current_embedding": [float(x) for x in inst.dialogue.current_embedding],
                "gold": inst.gold,
            }
            if inst.slots is not None:
                row["slots"] = [dict(s) for s in inst.slots]
            fh.write(json.dumps(row, ensure_ascii=False) + "\n")


def read_corpus(path: str | Path) -> list[EvalInstance]:
    out: list[EvalInstance] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            turns = tuple(
                Turn(
                    user=str(t["user"]),
                    agent=str(t["agent"]),
                    user_embedding=np.asarray(t["user_embedding"], dtype=np.float64),
                    agent_embedding=np.asarray(t["agent_embedding"], dtype=np.float64),
                )
                for t in row.get("turns", [])
            )
            dialogue = DialogueContext(
                turns=turns,
                current=str(row["current"]),
                current_embedding=np.asarray(row["current_embedding"], dtype=np.float64),
            )
            slots = row.get("slots")
            out.append(
                EvalInstance(
                    id=str(row["id"]),
                    dialogue=dialogue,
                    gold=str(row["gold"]),
                    slots=tuple(slots) if slots is not None else None,
                )
            )
    if not out:
        raise ConfigError(f"corpus file {path} holds no instances")
    return out


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FairnessConfig:
    """Equal-budget protocol knobs."""

    shuffle_seed: int | None = 13
    prefix_replace: bool = True
    token_targets: tuple[int, ...] = (260, 285, 310, 330, 360)

    def __post_init__(self):
        if any(t <= 0 for t in self.token_targets):
            raise ConfigError("token_targets must be positive")
        if list(self.token_targets) != sorted(self.token_targets):
            raise ConfigError("token_targets must be sorted ascending")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one experiment run depends on."""

    method: str = "ldra"
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    fairness: FairnessConfig = field(default_factory=FairnessConfig)
    runs: int = 3
    base_seed: int = 0
    shortlist_size: int = 3
    mock_margin: float = 2.0
    tau_c: float = 1.0
    lambda_mmr: float = 0.5
    instruction: str = DEFAULT_INSTRUCTION
    answer_format: str = DEFAULT_ANSWER_FORMAT

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.runs < 1:
            raise ConfigError("runs must be >= 1")
        if self.shortlist_size < 0:
            raise ConfigError("shortlist_size must be >= 0")
        if self.tau_c <= 0:
            raise ConfigError("tau_c must be positive")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "selection": {
                "alpha": self.selection.alpha,
                "k": self.selection.k,
                "tau": self.selection.tau,
                "label_cap": self.selection.label_cap,
                "mu": self.selection.mu,
            },
            "retrieval": {
                "lambda_vec": self.retrieval.lambda_vec,
                "pool_size": self.retrieval.pool_size,
                "normalization": self.retrieval.normalization,
            },
            "budget": {
                "max_prompt_tokens": self.budget.max_prompt_tokens,
                "summary_token_cap": self.budget.summary_token_cap,
                "compression_policy": self.budget.compression_policy,
            },
            "fairness": {
                "shuffle_seed": self.fairness.shuffle_seed,
                "prefix_replace": self.fairness.prefix_replace,
                "token_targets": list(self.fairness.token_targets),
            },
            "runs": self.runs,
            "base_seed": self.base_seed,
            "shortlist_size": self.shortlist_size,
            "mock_margin": self.mock_margin,
            "tau_c": self.tau_c,
            "lambda_mmr": self.lambda_mmr,
            "instruction": self.instruction,
            "answer_format": self.answer_format,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ExperimentConfig":
        base = cls()
        sel = {**base.to_dict()["selection"], **data.get("selection", {})}
        ret = {**base.to_dict()["retrieval"], **data.get("retrieval", {})}
        bud = {**base.to_dict()["budget"], **data.get("budget", {})}
        fair = {**base.to_dict()["fairness"], **data.get("fairness", {})}
        return cls(
            method=data.get("method", base.method),
            selection=SelectionConfig(**sel),
            retrieval=RetrievalConfig(**ret),
            budget=BudgetConfig(**bud),
            fairness=FairnessConfig(
                shuffle_seed=fair["shuffle_seed"],
                prefix_replace=fair["prefix_replace"],
                token_targets=tuple(fair["token_targets"]),
            ),
            runs=int(data.get("runs", base.runs)),
            base_seed=int(data.get("base_seed", base.base_seed)),
            shortlist_size=int(data.get("shortlist_size", base.shortlist_size)),
            mock_margin=float(data.get("mock_margin", base.mock_margin)),
            tau_c=float(data.get("tau_c", base.tau_c)),
            lambda_mmr=float(data.get("lambda_mmr", base.lambda_mmr)),
            instruction=str(data.get("instruction", base.instruction)),
            answer_format=str(data.get("answer_format", base.answer_format)),
        )

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:12]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _canon(value: str) -> str:
    return value.strip().lower()


def jga(predictions: Sequence[str], golds: Sequence[str]) -> float:
    """Exact-match rate after canonical normalization (lowercase, trim)."""
    if len(predictions) != len(golds):
        raise ConfigError(
            f"prediction/gold length mismatch: {len(predictions)} vs {len(golds)}"
        )
    if not golds:
        raise ConfigError("jga needs at least one aligned pair")
    hits = sum(1 for p, g in zip(predictions, golds) if _canon(p) == _canon(g))
    return hits / len(golds)


def aga(
    predicted_slots: Sequence[Mapping[str, str]],
    gold_slots: Sequence[Mapping[str, str]],
) -> float:
    """Mean per-turn slot accuracy over active slots.

    A slot is active iff its gold value differs from not_mentioned; turns with
    no active slots are skipped.
    """
    if len(predicted_slots) != len(gold_slots):
        raise ConfigError(
            f"prediction/gold length mismatch: {len(predicted_slots)} vs {len(gold_slots)}"
        )
    per_turn: list[float] = []
    for pred, gold in zip(predicted_slots, gold_slots):
        active = [slot for slot, v in gold.items() if _canon(str(v)) != NOT_MENTIONED]
        if not active:
            continue
        correct = sum(
            1
            for slot in active
            if _canon(str(pred.get(slot, NOT_MENTIONED))) == _canon(str(gold[slot]))
        )
        per_turn.append(correct / len(active))
    if not per_turn:
        raise ConfigError("aga is undefined: no turn has an active gold slot")
    return sum(per_turn) / len(per_turn)


def render_state(state: Mapping[str, Mapping[str, str]]) -> str:
    """Canonical label string for a slot-value state: sorted 'domain-slot=value'
    entries joined by ';', not_mentioned slots omitted."""
    parts = []
    for domain, slots in state.items():
        for slot, value in slots.items():
            v = _canon(str(value))
            if v == NOT_MENTIONED:
                continue
            parts.append(f"{_canon(str(domain))}-{_canon(str(slot))}={v}")
    return ";".join(sorted(parts))


def parse_state(canonical: str) -> dict[str, dict[str, str]]:
    """Inverse of render_state for well-formed canonical strings."""
    out: dict[str, dict[str, str]] = {}
    if not canonical:
        return out
    for part in canonical.split(";"):
        key, _, value = part.partition("=")
        domain, _, slot = key.partition("-")
        if not (domain and slot and value):
            raise ConfigError(f"malformed canonical state entry {part!r}")
        out.setdefault(domain, {})[slot] = value
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineResult:
    """All artifacts of one end-to-end run, retrievable for audit."""

    instance_id: str
    prediction: str
    output: VerifierOutput
    prompt: Prompt
    selection: SelectedSet
    extra_exemplars: tuple[tuple[str, str], ...]
    pool: list[Candidate]
    candidate_set: tuple[str, ...]
    latency: LatencyReport


def _rand_add_pairs(
    memory: Memory,
    exclude_ids: set[str],
    base_tokens: int,
    target: int,
    seed: int,
) -> list[tuple[str, str]]:
    """Random exemplars whose rendered lines still fit under the target."""
    rng = random.Random(seed)
    order = rng.sample(range(len(memory.exemplars)), len(memory.exemplars))
    used = base_tokens
    out: list[tuple[str, str]] = []
    for i in order:
        ex = memory.exemplars[i]
        if ex.id in exclude_ids:
            continue
        cost = count_tokens(render_exemplar_line(ex.text, ex.label))
        if used + cost > target:
            continue
        used += cost
        exclude_ids.add(ex.id)
        out.append((ex.text, ex.label))
    return out


def select_for_method(
    method: str,
    pool: Sequence[Candidate],
    config: ExperimentConfig,
    seed: int,
    instance_id: str,
) -> SelectedSet:
    """Dispatch to the configured selector with a per-instance derived seed."""
    sel = config.selection
    if method in ("ldra",):
        return greedy_select(pool, sel)
    if method in ("topk", "topk_rand_add"):
        return topk_select(pool, sel.k, sel.alpha)
    if method == "mmr":
        return mmr_select(pool, sel.k, config.lambda_mmr, sel.alpha)
    if method == "fps":
        return fps_select(pool, sel.k, sel.alpha)
    if method == "random":
        return random_select(pool, sel.k, derive_seed(seed, instance_id, "random"), sel.alpha)
    raise ConfigError(f"unknown method {method!r}")


def run_pipeline(
    instance: EvalInstance,
    config: ExperimentConfig,
    memory: Memory,
    verifier,
    weights: EncoderWeights | None = None,
    seed: int = 0,
    pool: list[Candidate] | None = None,
) -> PipelineResult:
    """Encode, retrieve, select, compose, and decode one instance.

    Deterministic under the mock verifier and fixed seeds. The verifier may be
    a boundary object or a factory called with the instance (the mock needs
    the gold label). Candidate labels are derived from the exemplars actually
    present in the composed prompt, extended by the retrieval shortlist.
    """
    if weights is None:
        weights = EncoderWeights.default(memory.dim)
    if callable(verifier) and not hasattr(verifier, "score"):
        verifier = verifier(instance)
    clock = StageClock()
    with clock.stage("ann"):
        z = encode_context(instance.dialogue, weights)
        if pool is None:
            pool = retrieve_pool(memory, z, instance.dialogue.current, config.retrieval)
    with clock.stage("div"):
        selection = select_for_method(config.method, pool, config, seed, instance.id)
    with clock.stage("prompt"):
        pairs = [(c.text, c.label) for c in selection.members]
        prompt = compose(
            config.instruction,
            instance.dialogue,
            pairs,
            config.budget,
            answer_format=config.answer_format,
        )
        extras: tuple[tuple[str, str], ...] = ()
        if config.method == "topk_rand_add":
            exclude = set(selection.ids())
            added = _rand_add_pairs(
                memory,
                exclude,
                prompt.token_count,
                config.budget.max_prompt_tokens,
                derive_seed(seed, instance.id, "randadd"),
            )
            if added:
                extras = tuple(added)
                prompt = compose(
                    config.instruction,
                    instance.dialogue,
                    list(prompt.exemplars) + added,
                    config.budget,
                    answer_format=config.answer_format,
                )
    with clock.stage("llm"):
        exposed = [label for _, label in prompt.exemplars]
        labels = candidate_labels(exposed, pool, config.shortlist_size)
        output = score_labels(prompt, labels, verifier, config.tau_c)
    counters = Counters(
        sim_ops=selection.sim_ops,
        verifier_calls=len(labels),
        prompt_tokens=prompt.token_count,
        gen_tokens=len(labels),  # one yes/no token per verifier call
        turns=len(instance.dialogue.turns),
    )
    latency = measured_report(clock, counters, len(pool), config.selection.k)
    return PipelineResult(
        instance_id=instance.id,
        prediction=output.decision,
        output=output,
        prompt=prompt,
        selection=selection,
        extra_exemplars=extras,
        pool=pool,
        candidate_set=labels,
        latency=latency,
    )


def verify_run_invariants(
    result: PipelineResult,
    config: ExperimentConfig,
    instance: EvalInstance,
    mock: bool = True,
) -> None:
    """Runtime self-checks; raises InvariantViolation when any fails."""
    sel = result.selection
    if config.method == "ldra":
        for c in sel.members:
            if c.vec_score < config.selection.tau - 1e-12:
                raise InvariantViolation(
                    f"{instance.id}: selected {c.exemplar_id} below tau"
                )
        for label, n in sel.label_counts.items():
            if n > config.selection.label_cap:
                raise InvariantViolation(f"{instance.id}: label {label} exceeds cap")
    g, d, r = sel.recompute()
    if sel.members and (
        abs(g - sel.g) > 1e-9 or abs(d - sel.dtext) > 1e-9 or abs(r - sel.r) > 1e-9
    ):
        raise InvariantViolation(f"{instance.id}: incremental diversity terms drifted")
    if result.prompt.token_count > config.budget.max_prompt_tokens:
        raise InvariantViolation(f"{instance.id}: prompt exceeds its token budget")
    if mock:
        covered = instance.gold in result.candidate_set
        correct = result.prediction == instance.gold
        if covered != correct:
            raise InvariantViolation(
                f"{instance.id}: mock accuracy diverged from gold coverage"
            )


def evaluate(
    memory: Memory,
    corpus: Sequence[EvalInstance],
    config: ExperimentConfig,
    seed: int,
    weights: EncoderWeights | None = None,
    verifier_factory: Callable[[EvalInstance], object] | None = None,
) -> tuple[list[dict], dict, list[LatencyReport]]:
    """Run the pipeline over a corpus; returns per-instance rows, a summary,
    and the measured latency reports (kept out of the deterministic rows)."""
    mock = verifier_factory is None
    if verifier_factory is None:
        verifier_factory = lambda inst: mock_verifier(  # noqa: E731
            inst.gold, derive_seed(seed, inst.id, "mock"), config.mock_margin
        )
    rows: list[dict] = []
    reports: list[LatencyReport] = []
    predictions: list[str] = []
    golds: list[str] = []
    for inst in corpus:
        result = run_pipeline(
            inst, config, memory, verifier_factory(inst), weights=weights, seed=seed
        )
        verify_run_invariants(result, config, inst, mock=mock)
        predictions.append(result.prediction)
        golds.append(inst.gold)
        reports.append(result.latency)
        rows.append(
            {
                "type": "instance",
                "id": inst.id,
                "method": config.method,
                "seed": seed,
                "prediction": result.prediction,
                "gold": inst.gold,
                "correct": result.prediction == inst.gold,
                "covered": inst.gold in result.candidate_set,
                "tokens": result.prompt.token_count,
                "selected": result.selection.ids(),
                "g": result.selection.g,
                "d": result.selection.dtext,
                "r": result.selection.r,
                "sim_ops": result.selection.sim_ops,
                "verifier_calls": len(result.candidate_set),
            }
        )
    summary = {
        "type": "summary",
        "method": config.method,
        "seed": seed,
        "n": len(corpus),
        "accuracy": jga(predictions, golds),
        "coverage_rate": sum(1 for r in rows if r["covered"]) / len(rows),
        "mean_r": sum(r["r"] for r in rows) / len(rows),
        "mean_tokens": sum(r["tokens"] for r in rows) / len(rows),
    }
    return rows, summary, reports


# ---------------------------------------------------------------------------
# Fairness suite
# ---------------------------------------------------------------------------


def _pad_to_target(prompt: Prompt, target: int) -> Prompt:
    """Append single-token pad marks until the prompt hits the target exactly."""
    if prompt.token_count > target:
        raise CompositionError(
            f"prompt holds {prompt.token_count} tokens, above the {target} target"
        )
    pad = target - prompt.token_count
    if pad == 0:
        return prompt
    text = prompt.text + (" ." * pad)
    return replace(prompt, text=text, token_count=count_tokens(text))


def _prefix_replace_pairs(
    pairs: list[tuple[str, str]],
    memory: Memory,
    exclude_ids: set[str],
    seed: int,
) -> list[tuple[str, str]]:
    """Replace the first ceil(n/2) exemplars with random ones of the same label."""
    rng = random.Random(seed)
    out = list(pairs)
    taken = set(exclude_ids)
    for i in range(math.ceil(len(pairs) / 2)):
        label = pairs[i][1]
        choices = [eid for eid in memory.label_index.get(label, ()) if eid not in taken]
        if not choices:
            continue  # label too rare to replace; keep the original
        pick = choices[rng.randrange(len(choices))]
        taken.add(pick)
        out[i] = (memory.get(pick).text, label)
    return out


def fairness_suite(
    memory: Memory,
    corpus: Sequence[EvalInstance],
    config: ExperimentConfig,
    weights: EncoderWeights | None = None,
) -> list[dict]:
    """Budget- and position-controlled comparison across selection arms.

    For every token target, each arm's prompt is composed under that budget and
    padded to exactly the target, so realized token counts match across arms;
    the rand-add arm reaches the target with random exemplars first (which do
    extend its exposed label set) and pad marks after. Emits accuracy and
    coverage per (target, arm) and asserts the cross-arm token deviation bound.
    """
    if not corpus:
        raise ConfigError("fairness suite needs a non-empty corpus")
    if weights is None:
        weights = EncoderWeights.default(memory.dim)
    seed = config.base_seed

    # Retrieval and selection are target-independent; compute them once.
    per_instance = []
    for inst in corpus:
        z = encode_context(inst.dialogue, weights)
        pool = retrieve_pool(memory, z, inst.dialogue.current, config.retrieval)
        sel_ldra = greedy_select(pool, config.selection)
        sel_topk = topk_select(pool, config.selection.k, config.selection.alpha)
        verifier = mock_verifier(
            inst.gold, derive_seed(seed, inst.id, "mock"), config.mock_margin
        )
        per_instance.append((inst, pool, sel_ldra, sel_topk, verifier))

    arms = [a for a in FAIRNESS_ARMS if a != "ldra_prefix_replace" or config.fairness.prefix_replace]
    rows: list[dict] = []
    for target in config.fairness.token_targets:
        budget = BudgetConfig(
            max_prompt_tokens=target,
            summary_token_cap=min(config.budget.summary_token_cap, target),
            compression_policy=config.budget.compression_policy,
        )
        try:
            arm_tokens: dict[str, list[int]] = {a: [] for a in arms}
            arm_correct: dict[str, int] = {a: 0 for a in arms}
            arm_covered: dict[str, int] = {a: 0 for a in arms}
            for inst, pool, sel_ldra, sel_topk, verifier in per_instance:
                for arm in arms:
                    if arm == "ldra":
                        pairs = [(c.text, c.label) for c in sel_ldra.members]
                        permutation = None
                    elif arm == "topk":
                        pairs = [(c.text, c.label) for c in sel_topk.members]
                        permutation = None
                    elif arm == "topk_rand_add":
                        pairs = [(c.text, c.label) for c in sel_topk.members]
                        permutation = None
                    elif arm == "ldra_shuffle":
                        pairs = [(c.text, c.label) for c in sel_ldra.members]
                        permutation = list(range(len(pairs)))
                        random.Random(
                            derive_seed(config.fairness.shuffle_seed, inst.id)
                        ).shuffle(permutation)
                    else:  # ldra_prefix_replace
                        pairs = _prefix_replace_pairs(
                            [(c.text, c.label) for c in sel_ldra.members],
                            memory,
                            set(sel_ldra.ids()),
                            derive_seed(seed, inst.id, "prefix"),
                        )
                        permutation = None
                    prompt = compose(
                        config.instruction,
                        inst.dialogue,
                        pairs,
                        budget,
                        permutation=permutation,
                        answer_format=config.answer_format,
                    )
                    if arm == "topk_rand_add":
                        added = _rand_add_pairs(
                            memory,
                            set(sel_topk.ids()),
                            prompt.token_count,
                            target,
                            derive_seed(seed, inst.id, "randadd", target),
                        )
                        if added:
                            prompt = compose(
                                config.instruction,
                                inst.dialogue,
                                list(prompt.exemplars) + added,
                                budget,
                                answer_format=config.answer_format,
                            )
                    prompt = _pad_to_target(prompt, target)
                    exposed = [label for _, label in prompt.exemplars]
                    labels = candidate_labels(exposed, pool, config.shortlist_size)
                    output = score_labels(prompt, labels, verifier, config.tau_c)
                    covered = inst.gold in labels
                    correct = output.decision == inst.gold
                    if covered != correct:
                        raise InvariantViolation(
                            f"{inst.id}/{arm}: mock accuracy diverged from coverage"
                        )
                    arm_tokens[arm].append(prompt.token_count)
                    arm_correct[arm] += correct
                    arm_covered[arm] += covered
            means = {a: sum(v) / len(v) for a, v in arm_tokens.items()}
            deviation_pct = (max(means.values()) - min(means.values())) / min(means.values()) * 100.0
            if deviation_pct > TOKEN_DEVIATION_LIMIT_PCT:
                raise InvariantViolation(
                    f"target {target}: cross-arm token deviation {deviation_pct:.2f}% "
                    f"exceeds {TOKEN_DEVIATION_LIMIT_PCT}%"
                )
            n = len(per_instance)
            for arm in arms:
                rows.append(
                    {
                        "type": "fairness",
                        "target": target,
                        "arm": arm,
                        "n": n,
                        "accuracy": arm_correct[arm] / n,
                        "coverage": arm_covered[arm] / n,
                        "mean_tokens": means[arm],
                        "token_deviation_pct": deviation_pct,
                    }
                )
        except CompositionError as exc:
            rows.append(
                {"type": "fairness_skip", "target": target, "reason": str(exc)}
            )
    return rows


# ---------------------------------------------------------------------------
# Sweeps and grid search
# ---------------------------------------------------------------------------


def sweep(
    memory: Memory,
    corpus: Sequence[EvalInstance],
    grid: Mapping[str, Sequence],
    seeds: Sequence[int],
    config: ExperimentConfig,
    weights: EncoderWeights | None = None,
) -> list[dict]:
    """Full factorial over {k, alpha, method} with mean/std aggregation over
    seeds. Each row also carries the mean diversity score of the selected sets
    so score-vs-accuracy trends can be read off directly."""
    ks = list(grid.get("k", [config.selection.k]))
    alphas = list(grid.get("alpha", [config.selection.alpha]))
    methods = list(grid.get("method", [config.method]))
    if not ks or not alphas or not methods or not seeds:
        raise ConfigError("sweep grid and seeds must be non-empty")
    rows: list[dict] = []
    for method, k, alpha in itertools.product(methods, ks, alphas):
        cfg = replace(
            config,
            method=method,
            selection=replace(config.selection, k=int(k), alpha=float(alpha)),
        )
        accs, covs, rs = [], [], []
        for s in seeds:
            _, summary, _ = evaluate(memory, corpus, cfg, int(s), weights=weights)
            accs.append(summary["accuracy"])
            covs.append(summary["coverage_rate"])
            rs.append(summary["mean_r"])
        acc = np.array(accs)
        rows.append(
            {
                "type": "sweep",
                "method": method,
                "k": int(k),
                "alpha": float(alpha),
                "seeds": [int(s) for s in seeds],
                "accuracy_mean": float(acc.mean()),
                "accuracy_std": float(acc.std()),
                "coverage_mean": float(np.mean(covs)),
                "r_mean": float(np.mean(rs)),
            }
        )
    return rows


DEFAULT_GRIDS: dict[str, tuple] = {
    "alpha": (0.2, 0.5, 0.8),
    "tau": (0.2, 0.4, 0.6),
    "label_cap": (1, 2),
    "pool_size": (64, 128, 256),
    "k": (4, 6, 8),
    "lambda_vec": (0.4, 0.6, 0.8),
    "mu": (0.0, 0.1, 0.2),
}

_GRID_KEYS = ("alpha", "tau", "label_cap", "pool_size", "k", "lambda_vec", "mu")


def _apply_theta(config: ExperimentConfig, theta: Mapping[str, float]) -> ExperimentConfig:
    sel = config.selection
    ret = config.retrieval
    sel = replace(
        sel,
        alpha=float(theta.get("alpha", sel.alpha)),
        tau=float(theta.get("tau", sel.tau)),
        label_cap=int(theta.get("label_cap", sel.label_cap)),
        k=int(theta.get("k", sel.k)),
        mu=float(theta.get("mu", sel.mu)),
    )
    ret = replace(
        ret,
        pool_size=int(theta.get("pool_size", ret.pool_size)),
        lambda_vec=float(theta.get("lambda_vec", ret.lambda_vec)),
    )
    return replace(config, selection=sel, retrieval=ret)


def grid_search(
    memory: Memory,
    corpus: Sequence[EvalInstance],
    grids: Mapping[str, Sequence],
    budget_b: float,
    lambda_penalty: float,
    config: ExperimentConfig,
    constants: CostConstants | None = None,
    weights: EncoderWeights | None = None,
) -> tuple[dict, list[dict]]:
    """Exhaustive search over bounded grids maximizing the scalarized
    objective on the given dev corpus.

    The latency term is the modeled per-query total under the supplied cost
    constants with empirical mean workload sizes, so the search result is
    deterministic given seeds. Returns (best row, all rows).
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ConfigError("grid search needs non-empty grids")
    unknown = set(grids) - set(_GRID_KEYS)
    if unknown:
        raise ConfigError(f"unknown grid keys: {sorted(unknown)}")
    if constants is None:
        constants = CostConstants()
    if weights is None:
        weights = EncoderWeights.default(memory.dim)

    keys = [k for k in _GRID_KEYS if k in grids]
    values = [list(grids[k]) for k in keys]

    # The relevance scan does not depend on pool_size; cache the deepest pool
    # per (instance, lambda_vec) and slice it per configuration.
    max_pool = max([int(v) for v in grids.get("pool_size", [config.retrieval.pool_size])])
    pool_cache: dict[tuple[str, float], list[Candidate]] = {}

    def pools_for(cfg: ExperimentConfig) -> dict[str, list[Candidate]]:
        out = {}
        for inst in corpus:
            key = (inst.id, cfg.retrieval.lambda_vec)
            if key not in pool_cache:
                deep = replace(cfg.retrieval, pool_size=max(max_pool, cfg.retrieval.pool_size))
                z = encode_context(inst.dialogue, weights)
                pool_cache[key] = retrieve_pool(memory, z, inst.dialogue.current, deep)
            out[inst.id] = pool_cache[key][: cfg.retrieval.pool_size]
        return out

    rows: list[dict] = []
    best: dict | None = None
    mean_terms = sum(len(tokenize(i.dialogue.current)) for i in corpus) / len(corpus)
    mean_turns = sum(len(i.dialogue.turns) for i in corpus) / len(corpus)
    for combo in itertools.product(*values):
        theta = dict(zip(keys, combo))
        cfg = _apply_theta(config, theta)
        pools = pools_for(cfg)
        seed = config.base_seed
        correct = 0
        tokens = 0
        calls = 0
        for inst in corpus:
            verifier = mock_verifier(
                inst.gold, derive_seed(seed, inst.id, "mock"), cfg.mock_margin
            )
            result = run_pipeline(
                inst, cfg, memory, verifier, weights=weights, seed=seed, pool=pools[inst.id]
            )
            correct += result.prediction == inst.gold
            tokens += result.prompt.token_count
            calls += len(result.candidate_set)
        n = len(corpus)
        shape = WorkloadShape(
            memory_size=len(memory),
            query_terms=round(mean_terms),
            pool_size=cfg.retrieval.pool_size,
            k=cfg.selection.k,
            turns=round(mean_turns),
            prompt_tokens=round(tokens / n),
            gen_tokens=round(calls / n),
        )
        t_model = model_latency(constants, shape).t_total
        accuracy = correct / n
        objective = scalarized_objective(accuracy, t_model, budget_b, lambda_penalty)
        row = {
            "type": "grid",
            "theta": theta,
            "accuracy": accuracy,
            "modeled_latency": t_model,
            "objective": objective,
        }
        rows.append(row)
        if best is None or objective > best["objective"]:
            best = row
    assert best is not None
    return best, rows
