"""Datasets of (condition vector, captions), vocabularies and a scene grammar.

The synthetic grammar describes a scene by one category index per slot
(subject, verb, object, ...).  Every category owns a small set of synonymous
phrases, so the number of valid captions of a scene under a template is the
product of the choice-set sizes of the slots the template uses.
"""
from __future__ import annotations

import hashlib
import itertools
import json
import re
import string
import zlib
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

BOS, EOS, PAD, UNK = 0, 1, 2, 3
SPECIALS = ("<bos>", "<eos>", "<pad>", "<unk>")

_PUNCT = str.maketrans({c: " " for c in string.punctuation if c not in "<>"})


def tokenize(text: str) -> List[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return text.lower().translate(_PUNCT).split()


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class VocabIndex:
    def __init__(self, tokens: Sequence[str], min_count: int = 1):
        self.min_count = min_count
        self.itos: List[str] = list(SPECIALS) + [t for t in tokens if t not in SPECIALS]
        self.stoi: Dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str) -> List[int]:
        """Token ids for ``text`` without BOS/EOS; unknown words map to UNK."""
        return [self.stoi.get(t, UNK) for t in tokenize(text)]

    def encode_caption(self, text: str) -> Tuple[int, ...]:
        return (BOS, *self.encode(text), EOS)

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if strip and i in (BOS, PAD):
                continue
            if strip and i == EOS:
                break
            words.append(self.itos[i])
        return " ".join(words)

    def to_dict(self) -> dict:
        return {"tokens": self.itos[len(SPECIALS):], "min_count": self.min_count}

    @classmethod
    def from_dict(cls, d: dict) -> "VocabIndex":
        return cls(d["tokens"], d.get("min_count", 1))


@dataclass
class CaptionRecord:
    """``tokens`` holds BOS, x_1..x_T with x_T == EOS."""

    tokens: Tuple[int, ...]
    condition: np.ndarray
    raw_text: str
    cond_id: str = ""
    truncated: bool = False

    @property
    def length(self) -> int:
        return len(self.tokens) - 1

    def validate(self, vocab_size: int, max_len: int) -> None:
        body = self.tokens[1:]
        if self.tokens[0] != BOS:
            raise ValueError("caption must start with BOS")
        if not 1 <= len(body) <= max_len:
            raise ValueError(f"caption length {len(body)} outside [1, {max_len}]")
        if body[-1] != EOS or body.count(EOS) != 1:
            raise ValueError("caption must contain exactly one EOS, at the end")
        if max(self.tokens) >= vocab_size:
            raise ValueError("token id outside vocabulary")


@dataclass
class Dataset:
    """Conditions keyed by id, in insertion order, with their reference captions."""

    features: Dict[str, np.ndarray] = field(default_factory=dict)
    captions: Dict[str, List[str]] = field(default_factory=dict)
    meta: Dict[str, dict] = field(default_factory=dict)

    @property
    def cond_ids(self) -> List[str]:
        return list(self.features)

    @property
    def feature_dim(self) -> Optional[int]:
        for v in self.features.values():
            return int(v.shape[0])
        return None

    def __len__(self):
        return len(self.features)

    def n_captions(self) -> int:
        return sum(len(c) for c in self.captions.values())

    def add(self, cond_id: str, features, caption: str, meta: Optional[dict] = None) -> None:
        f = np.asarray(features, dtype=np.float64)
        if cond_id in self.features:
            if self.features[cond_id].shape != f.shape:
                raise ValueError(f"condition {cond_id!r} seen with a different feature dimension")
        else:
            d = self.feature_dim
            if d is not None and f.shape != (d,):
                raise ValueError(f"feature dimension {f.shape[0]} != {d} for condition {cond_id!r}")
            self.features[cond_id] = f
            self.captions[cond_id] = []
        self.captions[cond_id].append(caption)
        if meta is not None:
            self.meta[cond_id] = meta

    def subset(self, ids: Iterable[str]) -> "Dataset":
        out = Dataset()
        for i in ids:
            out.features[i] = self.features[i]
            out.captions[i] = list(self.captions[i])
            if i in self.meta:
                out.meta[i] = self.meta[i]
        return out

    def records(self, vocab: VocabIndex, max_len: Optional[int] = None) -> List[CaptionRecord]:
        out = []
        for cid in self.features:
            for cap in self.captions[cid]:
                ids = vocab.encode(cap)
                if max_len is not None and len(ids) + 1 > max_len:
                    ids = ids[: max_len - 1]
                out.append(CaptionRecord((BOS, *ids, EOS), self.features[cid], cap, cid))
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for cid in self.features:
            h.update(cid.encode())
            h.update(np.ascontiguousarray(self.features[cid]).tobytes())
            for c in self.captions[cid]:
                h.update(c.encode())
                h.update(b"\0")
        return h.hexdigest()

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for cid in self.features:
                feats = [float(x) for x in self.features[cid]]
                for cap in self.captions[cid]:
                    fh.write(json.dumps({"cond_id": cid, "features": feats, "caption": cap}) + "\n")


def load_jsonl(path) -> Dataset:
    """Read ``{"cond_id", "features", "caption"}`` lines; lines sharing a cond_id are grouped."""
    ds = Dataset()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cid, feats, cap = str(obj["cond_id"]), obj["features"], obj["caption"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: line {lineno}: malformed record ({exc})") from None
            try:
                ds.add(cid, feats, cap)
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: {exc}") from None
    return ds


def build_vocab(dataset: Dataset, min_count: int = 1) -> VocabIndex:
    """Frequency-descending ids with lexicographic tie-break; rare words map to UNK."""
    if not len(dataset):
        raise ValueError("cannot build a vocabulary from an empty dataset")
    counts = Counter(t for caps in dataset.captions.values() for c in caps for t in tokenize(c))
    kept = sorted((t for t, n in counts.items() if n >= min_count and t not in SPECIALS), key=lambda t: (-counts[t], t))
    return VocabIndex(kept, min_count)


def split(dataset: Dataset, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> Tuple[Dataset, Dataset, Dataset]:
    """Partition by condition id with a seeded shuffle."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    ids = dataset.cond_ids
    order = np.random.default_rng(seed).permutation(len(ids))
    n = len(ids)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_val = min(n_val, n - n_train)
    parts = [order[:n_train], order[n_train : n_train + n_val], order[n_train + n_val :]]
    for r, part, label in zip(ratios, parts, ("train", "val", "test")):
        if r > 0 and len(part) == 0:
            raise ValueError(f"{label} split is empty under ratios {ratios}")
    return tuple(dataset.subset(ids[i] for i in sorted(part)) for part in parts)


def training_sentence_index(dataset: Dataset) -> frozenset:
    return frozenset(normalize(c) for caps in dataset.captions.values() for c in caps)


# ---------------------------------------------------------------------------
# synthetic scenes

_SLOT_RE = re.compile(r"\{(\w+)\}")


@dataclass
class SceneGrammar:
    """``slots[name][category]`` is the list of interchangeable phrases."""

    slots: Dict[str, List[List[str]]]
    templates: List[str]
    feature_dim: int = 32
    noise: float = 0.1

    @property
    def slot_names(self) -> List[str]:
        return list(self.slots)

    @property
    def attribute_dim(self) -> int:
        return len(self.slots)

    def template_slots(self, template: str) -> List[str]:
        return _SLOT_RE.findall(template)

    def count_valid(self, attributes: Sequence[int], template: Optional[str] = None) -> int:
        """Closed-form number of valid captions for a scene (one or all templates)."""
        templates = [template] if template is not None else self.templates
        total = 0
        for tpl in templates:
            n = 1
            for s in self.template_slots(tpl):
                n *= len(self.slots[s][attributes[self.slot_names.index(s)]])
            total += n
        return total

    def realize(self, attributes: Sequence[int], template: str, choices: Dict[str, int]) -> str:
        def sub(m):
            s = m.group(1)
            return self.slots[s][attributes[self.slot_names.index(s)]][choices[s]]

        return _SLOT_RE.sub(sub, template)

    def enumerate(self, attributes: Sequence[int]) -> List[str]:
        out = []
        for tpl in self.templates:
            names = self.template_slots(tpl)
            sizes = [len(self.slots[s][attributes[self.slot_names.index(s)]]) for s in names]
            for combo in itertools.product(*[range(n) for n in sizes]):
                out.append(self.realize(attributes, tpl, dict(zip(names, combo))))
        return out

    def sample_caption(self, attributes: Sequence[int], rng: np.random.Generator) -> str:
        """Uniform over the scene's valid captions (templates weighted by their counts)."""
        weights = np.array([self.count_valid(attributes, t) for t in self.templates], dtype=float)
        tpl = self.templates[rng.choice(len(self.templates), p=weights / weights.sum())]
        choices = {}
        for s in self.template_slots(tpl):
            choices[s] = int(rng.integers(len(self.slots[s][attributes[self.slot_names.index(s)]])))
        return self.realize(attributes, tpl, choices)

    def match(self, caption: str) -> Optional[Tuple[str, Tuple[int, ...]]]:
        """Parse a caption back to (template, attributes) or None."""
        for tpl in self.templates:
            names = self.template_slots(tpl)
            pattern = re.escape(tpl)
            for s in names:
                alts = "|".join(
                    f"(?P<{s}_{c}_{k}>{re.escape(p)})"
                    for c, phrases in enumerate(self.slots[s])
                    for k, p in enumerate(phrases)
                )
                pattern = pattern.replace(re.escape("{" + s + "}"), f"(?:{alts})", 1)
            m = re.fullmatch(pattern, caption)
            if m is None:
                continue
            attrs = [-1] * self.attribute_dim
            for key, val in m.groupdict().items():
                if val is None:
                    continue
                s, c, _ = key.rsplit("_", 2)
                attrs[self.slot_names.index(s)] = int(c)
            return tpl, tuple(attrs)
        return None

    def vocabulary(self) -> List[str]:
        words = set()
        for tpl in self.templates:
            words.update(tokenize(_SLOT_RE.sub(" ", tpl)))
        for cats in self.slots.values():
            for phrases in cats:
                for p in phrases:
                    words.update(tokenize(p))
        return sorted(words)

    def to_dict(self) -> dict:
        return {"slots": self.slots, "templates": self.templates, "feature_dim": self.feature_dim, "noise": self.noise}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGrammar":
        unknown = set(d) - {"slots", "templates", "feature_dim", "noise"}
        if unknown:
            raise ValueError(f"unknown grammar keys: {sorted(unknown)}")
        g = cls(d["slots"], d["templates"], int(d.get("feature_dim", 32)), float(d.get("noise", 0.1)))
        for tpl in g.templates:
            for s in g.template_slots(tpl):
                if s not in g.slots:
                    raise ValueError(f"template {tpl!r} uses unknown slot {s!r}")
        return g

    @classmethod
    def load(cls, path) -> "SceneGrammar":
        return cls.from_dict(json.loads(Path(path).read_text()))


def default_grammar(feature_dim: int = 32, noise: float = 0.1) -> SceneGrammar:
    """About 120 word types, captions of 6 to 12 tokens."""
    slots = {
        "subject": [
            ["man", "guy", "gentleman"],
            ["woman", "lady", "girl"],
            ["dog", "puppy", "hound"],
            ["cat", "kitten", "kitty"],
            ["horse", "pony", "stallion"],
            ["child", "kid", "toddler"],
            ["bird", "parrot", "pigeon"],
            ["chef", "cook", "baker"],
        ],
        "verb": [
            ["holding", "carrying", "grabbing"],
            ["watching", "looking at", "staring at"],
            ["chasing", "following", "pursuing"],
            ["eating", "chewing", "biting"],
            ["pushing", "pulling", "dragging"],
            ["painting", "drawing", "sketching"],
        ],
        "object": [
            ["ball", "toy", "frisbee"],
            ["sandwich", "pizza", "cake"],
            ["kite", "balloon", "flag"],
            ["bicycle", "bike", "scooter"],
            ["book", "magazine", "newspaper"],
            ["box", "crate", "basket"],
            ["umbrella", "parasol", "hat"],
            ["bottle", "cup", "mug"],
        ],
        "modifier": [
            ["small", "little", "tiny"],
            ["large", "big", "huge"],
            ["happy", "cheerful", "smiling"],
            ["young", "youthful", "juvenile"],
            ["old", "elderly", "aged"],
            ["brown", "dark", "tan"],
        ],
        "place": [
            ["in a park", "on the grass", "in a field"],
            ["on a beach", "near the ocean", "by the sea"],
            ["in a kitchen", "at a counter", "near a stove"],
            ["on a street", "on a sidewalk", "on a road"],
            ["in a room", "on a couch", "near a window"],
        ],
    }
    templates = [
        "a {modifier} {subject} is {verb} a {object}",
        "a {subject} is {verb} a {object} {place}",
        "the {modifier} {subject} {place} is {verb} the {object}",
    ]
    return SceneGrammar(slots, templates, feature_dim, noise)


def _projection(grammar: SceneGrammar, seed: int) -> np.ndarray:
    n_onehot = sum(len(c) for c in grammar.slots.values())
    rng = np.random.default_rng([seed, zlib.crc32(b"projection")])
    return rng.standard_normal((n_onehot, grammar.feature_dim)) / np.sqrt(grammar.attribute_dim)


def scene_features(grammar: SceneGrammar, attributes: Sequence[int], projection: np.ndarray, rng) -> np.ndarray:
    onehot = np.zeros(projection.shape[0])
    offset = 0
    for s, a in zip(grammar.slot_names, attributes):
        onehot[offset + a] = 1.0
        offset += len(grammar.slots[s])
    return onehot @ projection + grammar.noise * rng.standard_normal(grammar.feature_dim)


def generate_synthetic(grammar: SceneGrammar, n_scenes: int, captions_per_scene: int = 5, seed: int = 0) -> Dataset:
    """Scenes with noisy attribute embeddings and distinct sampled captions.

    ``meta[cond_id]`` records the attribute vector and the closed-form count of
    valid captions for the scene.
    """
    rng = np.random.default_rng([seed, zlib.crc32(b"scenes")])
    proj = _projection(grammar, seed)
    sizes = [len(c) for c in grammar.slots.values()]
    ds = Dataset()
    for k in range(n_scenes):
        attrs = tuple(int(rng.integers(n)) for n in sizes)
        n_valid = grammar.count_valid(attrs)
        if captions_per_scene > n_valid:
            raise ValueError(f"scene {attrs} has only {n_valid} valid captions, {captions_per_scene} requested")
        feats = scene_features(grammar, attrs, proj, rng)
        chosen: List[str] = []
        seen = set()
        while len(chosen) < captions_per_scene:
            c = grammar.sample_caption(attrs, rng)
            if c not in seen:
                seen.add(c)
                chosen.append(c)
        cid = f"scene{k:05d}"
        for c in chosen:
            ds.add(cid, feats, c, meta={"attributes": list(attrs), "n_valid": n_valid})
    return ds


__all__ = [
    "BOS",
    "EOS",
    "PAD",
    "UNK",
    "SPECIALS",
    "tokenize",
    "normalize",
    "VocabIndex",
    "CaptionRecord",
    "Dataset",
    "load_jsonl",
    "build_vocab",
    "split",
    "training_sentence_index",
    "SceneGrammar",
    "default_grammar",
    "generate_synthetic",
]
