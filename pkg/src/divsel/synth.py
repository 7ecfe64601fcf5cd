"""Seeded synthetic corpus: clustered label embeddings plus eval dialogues.

Each intent label gets a random unit cluster center and a small vocabulary;
exemplars are tight perturbations of their center. A fraction of queries
(the ambiguity rate) is generated closer to a distractor cluster than to the
gold cluster, both in embedding space and in surface vocabulary, which is
exactly the regime where relevance-only retrieval fails to expose the gold
label. All embeddings are generated zero-mean so layer normalization in the
default encoder preserves their direction.
"""

from __future__ import annotations

import numpy as np

from .encoder import DialogueContext, Turn
from .errors import ConfigError
from .harness import EvalInstance
from .memory import Memory, ingest

_CONSONANTS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"

DISTRACTOR_WEIGHT = 1.0
GOLD_WEIGHT = 0.62
QUERY_NOISE = 0.05
EXEMPLAR_NOISE = 0.08
WORDS_PER_TEXT = 8
VOCAB_PER_LABEL = 12
SHARED_VOCAB = 20
SHARED_WORD_RATE = 0.3


def _word(rng: np.random.Generator, syllables: int = 2) -> str:
    out = []
    for _ in range(syllables):
        out.append(_CONSONANTS[rng.integers(len(_CONSONANTS))])
        out.append(_VOWELS[rng.integers(len(_VOWELS))])
    return "".join(out)


def _unit_zero_mean(rng_vec: np.ndarray) -> np.ndarray:
    v = rng_vec - rng_vec.mean()
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise ConfigError("degenerate zero vector while generating embeddings")
    return v / norm


def _text(rng: np.random.Generator, label_vocab: list[str], shared: list[str], n_words: int) -> str:
    words = []
    for _ in range(n_words):
        if rng.random() < SHARED_WORD_RATE:
            words.append(shared[rng.integers(len(shared))])
        else:
            words.append(label_vocab[rng.integers(len(label_vocab))])
    return " ".join(words)


def synth_corpus(
    labels: int,
    per_label: int,
    ambiguity: float,
    seed: int,
    dim: int = 32,
    instances: int = 200,
    max_history_turns: int = 2,
) -> tuple[Memory, list[EvalInstance]]:
    """Generate a memory and matching eval instances, reproducible by seed."""
    if labels < 2 or per_label < 1 or instances < 1:
        raise ConfigError("need at least 2 labels, 1 exemplar per label, 1 instance")
    if not 0.0 <= ambiguity <= 1.0:
        raise ConfigError("ambiguity must be in [0, 1]")
    if dim < 4:
        raise ConfigError("dim must be >= 4")
    rng = np.random.default_rng(seed)

    label_names = [f"intent_{i:02d}" for i in range(labels)]
    centers = np.stack([_unit_zero_mean(rng.normal(size=dim)) for _ in range(labels)])
    shared_vocab = [_word(rng) for _ in range(SHARED_VOCAB)]
    vocab = {name: [_word(rng, 3) for _ in range(VOCAB_PER_LABEL)] for name in label_names}

    records = []
    for li, name in enumerate(label_names):
        for j in range(per_label):
            emb = _unit_zero_mean(centers[li] + EXEMPLAR_NOISE * rng.normal(size=dim))
            records.append(
                {
                    "id": f"ex_{name}_{j:03d}",
                    "text": _text(rng, vocab[name], shared_vocab, WORDS_PER_TEXT),
                    "label": name,
                    "embedding": emb.tolist(),
                }
            )
    memory = ingest(records)

    out: list[EvalInstance] = []
    for i in range(instances):
        gold_idx = int(rng.integers(labels))
        gold = label_names[gold_idx]
        ambiguous = bool(rng.random() < ambiguity)
        if ambiguous:
            distractor_idx = int(rng.integers(labels - 1))
            if distractor_idx >= gold_idx:
                distractor_idx += 1
            raw = (
                DISTRACTOR_WEIGHT * centers[distractor_idx]
                + GOLD_WEIGHT * centers[gold_idx]
                + QUERY_NOISE * rng.normal(size=dim)
            )
            text_vocab = vocab[label_names[distractor_idx]]
        else:
            raw = centers[gold_idx] + QUERY_NOISE * rng.normal(size=dim)
            text_vocab = vocab[gold]
        current_embedding = _unit_zero_mean(raw)
        current = _text(rng, text_vocab, shared_vocab, WORDS_PER_TEXT)

        turns = []
        for _ in range(int(rng.integers(max_history_turns + 1))):
            turns.append(
                Turn(
                    user=_text(rng, vocab[gold], shared_vocab, WORDS_PER_TEXT),
                    agent=_text(rng, shared_vocab, shared_vocab, WORDS_PER_TEXT),
                    user_embedding=_unit_zero_mean(
                        centers[gold_idx] + 0.5 * rng.normal(size=dim)
                    ),
                    agent_embedding=_unit_zero_mean(rng.normal(size=dim)),
                )
            )
        dialogue = DialogueContext(
            turns=tuple(turns), current=current, current_embedding=current_embedding
        )
        out.append(EvalInstance(id=f"inst_{i:04d}", dialogue=dialogue, gold=gold))
    return memory, out
