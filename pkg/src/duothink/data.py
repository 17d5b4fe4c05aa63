"""Synthetic personalized long-form corpus with a fixed word-level vocabulary.

Each user has a deterministic style: one preferred synonym per concept slot,
a clause-ordering template, and a response-length tendency. Histories always
realize every slot so the user's choices are recoverable from context; target
responses vary in length. Users are split disjointly into train/held-out.
"""

from __future__ import annotations

import hashlib
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, SEP, EOS = 0, 1, 2
SPECIALS = ["<pad>", "<sep>", "<eos>"]


@dataclass(frozen=True)
class StyleSpace:
    anchors: tuple = ("build", "color", "feel", "sound", "size", "mood")
    synonyms: tuple = (
        ("sturdy", "solid", "robust", "tough"),
        ("crimson", "azure", "emerald", "amber"),
        ("smooth", "rough", "soft", "firm"),
        ("quiet", "loud", "crisp", "mellow"),
        ("compact", "large", "slim", "bulky"),
        ("cheerful", "somber", "calm", "bold"),
    )
    topics: tuple = ("lamp", "chair", "kettle", "radio", "blanket", "clock",
                     "mirror", "basket", "helmet", "ladder", "teapot", "wallet")
    templates: tuple = ((0, 1, 2, 3, 4, 5), (5, 4, 3, 2, 1, 0),
                        (2, 0, 4, 1, 5, 3), (1, 3, 5, 0, 2, 4))
    query_verb: str = "review"
    link_word: str = "is"
    min_clauses: int = 2
    length_means: tuple = (3.5, 6.0)
    length_jitter: float = 0.7

    @property
    def n_slots(self) -> int:
        return len(self.anchors)

    @property
    def syn_per_slot(self) -> int:
        return len(self.synonyms[0])

    def distinct_styles(self) -> int:
        return self.syn_per_slot ** self.n_slots * len(self.templates)


DEFAULT_STYLE_SPACE = StyleSpace()


class Vocab:
    """Fixed word-level vocabulary; id order is a pure function of the space."""

    def __init__(self, space: StyleSpace = DEFAULT_STYLE_SPACE):
        words = list(SPECIALS)
        words.append(space.query_verb)
        words.append(space.link_word)
        words.extend(space.anchors)
        for syns in space.synonyms:
            words.extend(syns)
        words.extend(space.topics)
        if len(set(words)) != len(words):
            raise ValueError("style space words collide")
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self):
        return len(self.words)

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.index[t] for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.words[int(i)] for i in ids]


@dataclass(frozen=True)
class UserStyle:
    user_id: int
    syn_choice: tuple          # preferred synonym index per slot
    template: tuple            # clause ordering over slots
    length_mean: float

    @classmethod
    def derive(cls, corpus_seed: int, user_id: int, space: StyleSpace) -> "UserStyle":
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=corpus_seed, spawn_key=(1000, user_id)))
        syn = tuple(int(rng.integers(0, space.syn_per_slot)) for _ in range(space.n_slots))
        template = space.templates[int(rng.integers(0, len(space.templates)))]
        lo, hi = space.length_means
        mean = float(rng.uniform(lo, hi))
        return cls(user_id=user_id, syn_choice=syn, template=template, length_mean=mean)


@dataclass
class Sample:
    user_id: int
    history: list              # list of (query ids, response ids)
    query: list                # token ids
    response: list             # token ids, no EOS
    sample_id: int = 0

    def encode(self) -> tuple[np.ndarray, int]:
        """Serialize to (ids, prompt_len); response carries a trailing <eos>."""
        prompt: list[int] = []
        for q, r in self.history:
            prompt.extend(q); prompt.append(SEP)
            prompt.extend(r); prompt.append(SEP)
        prompt.extend(self.query); prompt.append(SEP)
        ids = prompt + list(self.response) + [EOS]
        return np.asarray(ids, dtype=np.int64), len(prompt)

    def prompt_ids(self) -> np.ndarray:
        ids, p = self.encode()
        return ids[:p]


def _response_tokens(style: UserStyle, topic: str, n_clauses: int,
                     space: StyleSpace, vocab: Vocab) -> list[int]:
    words = [topic, space.link_word]
    for slot in style.template[:n_clauses]:
        words.append(space.anchors[slot])
        words.append(space.synonyms[slot][style.syn_choice[slot]])
    return vocab.encode(words)


def _query_tokens(topic: str, space: StyleSpace, vocab: Vocab) -> list[int]:
    return vocab.encode([space.query_verb, topic])


@dataclass
class Dataset:
    samples: list
    vocab: Vocab
    seed: int
    n_users: int
    samples_per_user: int
    heldout_users: list
    space: StyleSpace = field(default_factory=lambda: DEFAULT_STYLE_SPACE)

    def train_samples(self) -> list:
        held = set(self.heldout_users)
        return [s for s in self.samples if s.user_id not in held]

    def heldout_samples(self) -> list:
        held = set(self.heldout_users)
        return [s for s in self.samples if s.user_id in held]

    def encoded(self, samples=None) -> list[tuple[np.ndarray, int]]:
        return [s.encode() for s in (self.samples if samples is None else samples)]

    def max_seq_len(self) -> int:
        return max(len(s.encode()[0]) for s in self.samples)

    def save_jsonl(self, path: str | Path, config_hash: str = "") -> str:
        """Write record lines plus a manifest sidecar; returns the corpus hash."""
        path = Path(path)
        lines = []
        for s in self.samples:
            rec = {"user_id": s.user_id,
                   "history": [[list(map(int, q)), list(map(int, r))] for q, r in s.history],
                   "query": list(map(int, s.query)),
                   "response": list(map(int, s.response))}
            lines.append(json.dumps(rec, sort_keys=True, separators=(",", ":")))
        blob = ("\n".join(lines) + "\n").encode("utf-8")
        path.write_bytes(blob)
        corpus_hash = hashlib.sha256(blob).hexdigest()
        manifest = {
            "config_hash": config_hash, "corpus_hash": corpus_hash,
            "seed": self.seed, "n_users": self.n_users,
            "samples_per_user": self.samples_per_user,
            "heldout_users": list(map(int, self.heldout_users)),
            "vocab": self.vocab.words, "vocab_size": len(self.vocab),
            "max_seq_len": self.max_seq_len(),
        }
        manifest_path = path.with_suffix(path.suffix + ".manifest.json")
        manifest_path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
        return corpus_hash

    @classmethod
    def load_jsonl(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        manifest = json.loads(path.with_suffix(path.suffix + ".manifest.json").read_text())
        vocab = Vocab()
        if manifest["vocab"] != vocab.words:
            raise ValueError("dataset manifest vocabulary does not match this style space")
        samples = []
        with open(path) as f:
            for i, line in enumerate(f):
                rec = json.loads(line)
                samples.append(Sample(user_id=rec["user_id"],
                                      history=[(q, r) for q, r in rec["history"]],
                                      query=rec["query"], response=rec["response"],
                                      sample_id=i))
        return cls(samples=samples, vocab=vocab, seed=manifest["seed"],
                   n_users=manifest["n_users"],
                   samples_per_user=manifest["samples_per_user"],
                   heldout_users=manifest["heldout_users"])


def generate_corpus(n_users: int, samples_per_user: int,
                    space: StyleSpace = DEFAULT_STYLE_SPACE, seed: int = 0,
                    heldout_frac: float = 0.2, history_pairs: int = 2) -> Dataset:
    """Deterministic corpus: same seed, byte-identical output."""
    if n_users > space.distinct_styles():
        warnings.warn(f"{n_users} users exceed {space.distinct_styles()} distinct "
                      f"styles; styles will repeat", stacklevel=2)
    vocab = Vocab(space)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(2000,)))
    samples = []
    sid = 0
    for uid in range(n_users):
        style = UserStyle.derive(seed, uid, space)
        for _ in range(samples_per_user):
            history = []
            for _ in range(history_pairs):
                topic = space.topics[int(rng.integers(0, len(space.topics)))]
                history.append((_query_tokens(topic, space, vocab),
                                _response_tokens(style, topic, space.n_slots, space, vocab)))
            topic = space.topics[int(rng.integers(0, len(space.topics)))]
            query = _query_tokens(topic, space, vocab)
            n_clauses = int(np.clip(round(rng.normal(style.length_mean, space.length_jitter)),
                                    space.min_clauses, space.n_slots))
            response = _response_tokens(style, topic, n_clauses, space, vocab)
            samples.append(Sample(user_id=uid, history=history, query=query,
                                  response=response, sample_id=sid))
            sid += 1
    n_held = max(1, int(round(n_users * heldout_frac))) if n_users > 1 else 0
    heldout_users = list(range(n_users - n_held, n_users))
    return Dataset(samples=samples, vocab=vocab, seed=seed, n_users=n_users,
                   samples_per_user=samples_per_user, heldout_users=heldout_users,
                   space=space)


def bigram_style_accuracy(dataset: Dataset) -> float:
    """Per-user bigram oracle: fit next-word counts on history responses,
    predict the synonym following each anchor in the target response."""
    vocab = dataset.vocab
    anchor_ids = {vocab.index[a] for a in dataset.space.anchors}
    correct, total = 0, 0
    for s in dataset.samples:
        counts: dict[int, dict[int, int]] = {}
        for _q, r in s.history:
            for a, b in zip(r, r[1:]):
                counts.setdefault(a, {})
                counts[a][b] = counts[a].get(b, 0) + 1
        resp = s.response
        for a, b in zip(resp, resp[1:]):
            if a in anchor_ids:
                total += 1
                if a in counts and max(counts[a], key=counts[a].get) == b:
                    correct += 1
    return correct / max(total, 1)
