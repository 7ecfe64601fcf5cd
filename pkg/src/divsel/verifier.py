"""Intent decoding through a yes/no log-odds verifier with temperature scaling.

A verifier answers one question per candidate label and returns the two log
probabilities; the decision is the arg max of the log odds, which temperature
scaling never changes. A deterministic in-process mock implements the same
boundary for closed-loop testing, and an HTTP client speaks it to an external
endpoint.
"""

from __future__ import annotations

import json
import math
import os
import random
import urllib.error
import urllib.request
from dataclasses import dataclass
from typing import Mapping, Protocol, Sequence

from .errors import (
    CandidateSetError,
    ConfigError,
    VerifierProtocolError,
    VerifierTransportError,
)
from .prompt import Prompt
from .retrieval import Candidate

PAYLOAD_VERSION = 1
DEFAULT_TOKEN_ENV = "DIVSEL_VERIFIER_TOKEN"
DEFAULT_TAU_C = 1.0


class VerifierBoundary(Protocol):
    """Request/response protocol every verifier speaks."""

    def score(self, prompt_text: str, question_text: str, label: str) -> tuple[float, float]:
        """Return (logp_yes, logp_no) for one label question."""
        ...


@dataclass(frozen=True)
class VerifierOutput:
    """Scores, calibrated probabilities, and the decoded label."""

    scores: dict[str, float]
    calibrated: dict[str, float]
    decision: str
    candidate_set: tuple[str, ...]


def question_for(label: str) -> str:
    return f"Is intent = {label}?"


def candidate_labels(selected, pool: Sequence[Candidate], shortlist_size: int) -> tuple[str, ...]:
    """Unique labels exposed by the selection, extended by the labels of the
    top shortlist_size pool items; order is first-seen and deterministic."""
    if shortlist_size < 0:
        raise ConfigError("shortlist_size must be >= 0")
    if hasattr(selected, "labels"):
        base = list(selected.labels())
    else:
        base = [str(lab) for lab in selected]
    out: list[str] = []
    seen: set[str] = set()
    for lab in base:
        if lab not in seen:
            seen.add(lab)
            out.append(lab)
    for c in pool[:shortlist_size]:
        if c.label not in seen:
            seen.add(c.label)
            out.append(c.label)
    if not out:
        raise CandidateSetError("no candidate labels: empty selection and zero shortlist")
    return tuple(out)


def _logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def decide_from_scores(scores: Mapping[str, float], tau_c: float = DEFAULT_TAU_C) -> VerifierOutput:
    """Temperature-calibrate a score map and decode the arg max.

    Ties break by label lexicographic order; the decision is invariant to the
    temperature because the logistic is monotone.
    """
    if tau_c <= 0:
        raise ConfigError(f"tau_c must be positive, got {tau_c}")
    if not scores:
        raise CandidateSetError("cannot decide over an empty score map")
    calibrated = {y: _logistic(s / tau_c) for y, s in scores.items()}
    decision = min(scores, key=lambda y: (-scores[y], y))
    return VerifierOutput(
        scores=dict(scores),
        calibrated=calibrated,
        decision=decision,
        candidate_set=tuple(scores),
    )


def score_labels(
    prompt: Prompt,
    labels: Sequence[str],
    verifier: VerifierBoundary,
    tau_c: float = DEFAULT_TAU_C,
) -> VerifierOutput:
    """Query the verifier once per label and decode the best-scoring intent.

    Assembly keys on label, so per-label calls could run concurrently; a
    transport failure discards all partial results.
    """
    if not labels:
        raise CandidateSetError("score_labels needs at least one candidate label")
    scores: dict[str, float] = {}
    for label in labels:
        logp_yes, logp_no = verifier.score(prompt.text, question_for(label), label)
        scores[label] = logp_yes - logp_no
    return decide_from_scores(scores, tau_c)


def _log_sigmoid(x: float) -> float:
    # log(1 / (1 + e^-x)) computed stably
    if x >= 0:
        return -math.log1p(math.exp(-x))
    return x - math.log1p(math.exp(x))


class MockVerifier:
    """Deterministic stand-in: the gold label scores +margin iff queried; any
    other label scores -margin plus small seeded noise. End-to-end accuracy
    under this mock equals the rate at which selection exposes the gold label."""

    def __init__(self, gold_label: str, noise_seed: int, margin: float = 2.0):
        if margin <= 0:
            raise ConfigError("margin must be positive")
        self.gold_label = gold_label
        self.noise_seed = noise_seed
        self.margin = margin

    def score(self, prompt_text: str, question_text: str, label: str) -> tuple[float, float]:
        if label == self.gold_label:
            s = self.margin
        else:
            rng = random.Random(f"{self.noise_seed}:{label}")
            s = -self.margin + rng.uniform(-self.margin / 4, self.margin / 4)
        return _log_sigmoid(s), _log_sigmoid(-s)


def mock_verifier(gold_label: str, noise_seed: int, margin: float = 2.0) -> MockVerifier:
    return MockVerifier(gold_label, noise_seed, margin)


class EndpointVerifier:
    """HTTP adapter for the verifier boundary.

    POSTs {"v", "prompt_text", "question_text", "label"} as JSON and expects
    {"logp_yes", "logp_no"}. A bearer token is read from the environment when
    present.
    """

    def __init__(self, url: str, timeout: float = 10.0, token_env: str = DEFAULT_TOKEN_ENV):
        self.url = url
        self.timeout = timeout
        self.token_env = token_env

    def score(self, prompt_text: str, question_text: str, label: str) -> tuple[float, float]:
        payload = {
            "v": PAYLOAD_VERSION,
            "prompt_text": prompt_text,
            "question_text": question_text,
            "label": label,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        req = urllib.request.Request(
            self.url, data=json.dumps(payload).encode("utf-8"), headers=headers, method="POST"
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read()
        except (urllib.error.URLError, OSError) as exc:
            raise VerifierTransportError(f"verifier endpoint unreachable: {exc}") from exc
        try:
            reply = json.loads(body.decode("utf-8"))
            logp_yes = float(reply["logp_yes"])
            logp_no = float(reply["logp_no"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise VerifierProtocolError(f"malformed verifier reply: {body!r}") from exc
        return logp_yes, logp_no
