"""Review ingestion, splitting, history sampling and synthetic corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .textenc import Vocab, placeholder_tokens, tokenize

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Interaction:
    user: str
    item: str
    rating: float
    text: str
    key: int = -1

    def __post_init__(self):
        if not self.user or not self.item:
            raise ValueError("user and item ids must be non-empty")
        if not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")


def load_reviews(path) -> list[Interaction]:
    """Parse Amazon-style JSON Lines (reviewerID, asin, overall, reviewText)."""
    out: list[Interaction] = []
    skipped = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                user, item, rating = str(rec["reviewerID"]), str(rec["asin"]), float(rec["overall"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: cannot parse record ({e})") from None
            if not 1.0 <= rating <= 5.0:
                raise ValueError(f"{path}:{lineno}: rating {rating} outside [1, 5]")
            text = rec.get("reviewText")
            if not isinstance(text, str):
                skipped += 1
                continue
            out.append(Interaction(user, item, rating, text, key=lineno - 1))
    if skipped:
        log.warning("%s: skipped %d records without reviewText", path, skipped)
    if not out:
        log.warning("%s: no reviews loaded", path)
    return out


def write_reviews(path, interactions: Sequence[Interaction]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for x in interactions:
            rec = {"reviewerID": x.user, "asin": x.item, "overall": x.rating, "reviewText": x.text}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def split(interactions: Sequence[Interaction], seed: int):
    """Seeded 8:1:1 split; val and test sizes are floored, the remainder goes to train."""
    n = len(interactions)
    if n < 10:
        raise ValueError(f"need at least 10 interactions to split, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_val = n_test = n // 10
    n_train = n - n_val - n_test
    pick = lambda idx: [interactions[i] for i in idx]  # noqa: E731
    return pick(order[:n_train]), pick(order[n_train:n_train + n_val]), pick(order[n_train + n_val:])


def entity_universe(interactions: Sequence[Interaction]) -> tuple[list[str], list[str]]:
    return sorted({x.user for x in interactions}), sorted({x.item for x in interactions})


@dataclass
class HistoryIndex:
    users: dict[str, list[tuple[int, torch.Tensor]]]
    items: dict[str, list[tuple[int, torch.Tensor]]]
    max_len: int
    keys: frozenset[int] = field(default_factory=frozenset)


def build_history_index(train: Sequence[Interaction], vocab: Vocab, max_len: int) -> HistoryIndex:
    users: dict[str, list] = {}
    items: dict[str, list] = {}
    for x in train:
        toks = torch.tensor(tokenize(x.text, vocab, max_len)[0], dtype=torch.long)
        users.setdefault(x.user, []).append((x.key, toks))
        items.setdefault(x.item, []).append((x.key, toks))
    return HistoryIndex(users, items, max_len, frozenset(x.key for x in train))


def sample_history(index: HistoryIndex, entity: str, k: int, exclude: int | None = None,
                   seed: int | np.random.Generator = 0, side: str = "user") -> list[torch.Tensor]:
    """Draw k token sequences for an entity, never returning the excluded interaction.

    Without replacement when enough entries remain, with replacement otherwise,
    and k ``[CLS][UNK]`` placeholders when nothing remains.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    table = index.users if side == "user" else index.items
    entries = [toks for key, toks in table.get(entity, ()) if key != exclude]
    if not entries:
        return [placeholder_tokens(index.max_len) for _ in range(k)]
    replace = len(entries) < k
    picks = rng.choice(len(entries), size=k, replace=replace)
    return [entries[j] for j in picks]


# --- synthetic corpora ----------------------------------------------------

@dataclass
class SynthSpec:
    n_users: int = 40
    n_items: int = 40
    n_interactions: int = 400
    n_interactions_b: int | None = None
    lexicon_size: int = 20
    shared_fraction: float = 0.5
    noise_rate: float = 0.5
    sentiment_tokens: int = 8
    noise_vocab: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.shared_fraction <= 1.0:
            raise ValueError("shared_fraction must be in [0, 1]")
        counts = (self.n_users, self.n_items, self.n_interactions, self.lexicon_size,
                  self.sentiment_tokens, self.noise_vocab)
        if min(counts) < 1 or (self.n_interactions_b is not None and self.n_interactions_b < 1):
            raise ValueError("SynthSpec counts must be >= 1")
        if self.sentiment_tokens % 4:
            raise ValueError("sentiment_tokens must be a multiple of 4 so every rating is representable")


@dataclass
class SynthDomain:
    name: str
    interactions: list[Interaction]
    positive: list[str]
    negative: list[str]
    noise: list[str]


def _lexicons(spec: SynthSpec, tag: str, polarity: str) -> list[str]:
    n_shared = round(spec.shared_fraction * spec.lexicon_size)
    shared = [f"{polarity}{j}" for j in range(n_shared)]
    own = [f"{tag}{polarity}{j}" for j in range(spec.lexicon_size - n_shared)]
    return shared + own


def gen_synthetic(spec: SynthSpec) -> tuple[SynthDomain, SynthDomain]:
    """Two review domains whose ratings are readable from sentiment-token counts.

    Ratings come from user and item biases; a review with rating r carries
    ``(r - 1) / 4`` of its sentiment tokens from the positive lexicon, plus
    domain-specific noise tokens.
    """
    rng = np.random.default_rng(spec.seed)
    domains = []
    for tag, n in (("a", spec.n_interactions), ("b", spec.n_interactions_b or spec.n_interactions)):
        pos, neg = _lexicons(spec, tag, "good"), _lexicons(spec, tag, "bad")
        noise = [f"{tag}topic{j}" for j in range(spec.noise_vocab)]
        user_bias = rng.normal(0.0, 0.8, spec.n_users)
        item_bias = rng.normal(0.0, 0.8, spec.n_items)
        m = spec.sentiment_tokens
        rows = []
        for key in range(n):
            u, i = int(rng.integers(spec.n_users)), int(rng.integers(spec.n_items))
            r = int(np.clip(np.rint(3.0 + user_bias[u] + item_bias[i] + rng.normal(0.0, 0.3)), 1, 5))
            n_pos = (r - 1) * m // 4
            words = list(rng.choice(pos, n_pos)) + list(rng.choice(neg, m - n_pos))
            words += list(rng.choice(noise, rng.binomial(2 * m, spec.noise_rate / 2)))
            rng.shuffle(words)
            rows.append(Interaction(f"{tag}u{u}", f"{tag}i{i}", float(r), " ".join(words), key=key))
        domains.append(SynthDomain(tag, rows, pos, neg, noise))
    return domains[0], domains[1]


def write_synthetic(out_dir, spec: SynthSpec) -> list[Path]:
    """Write both domains as JSON Lines plus a manifest recording the spec."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for dom in gen_synthetic(spec):
        p = out_dir / f"domain_{dom.name}.jsonl"
        write_reviews(p, dom.interactions)
        paths.append(p)
    manifest = out_dir / "synth_manifest.json"
    manifest.write_text(json.dumps({"synth_spec": asdict(spec)}, indent=2, sort_keys=True) + "\n")
    return paths + [manifest]


# --- domain similarity ----------------------------------------------------

TextEncoder = Callable[[Sequence[str]], torch.Tensor]


def domain_similarity(a: Sequence[Interaction], b: Sequence[Interaction], n: int, encoder: TextEncoder,
                      seed: int = 0) -> float:
    """Cosine between the mean encodings of n sampled reviews from each domain."""
    if len(a) < n or len(b) < n:
        raise ValueError(f"both domains need at least n={n} reviews (got {len(a)} and {len(b)})")
    centroids = []
    for dom in (a, b):
        picks = np.random.default_rng(seed).choice(len(dom), size=n, replace=False)
        vecs = torch.as_tensor(encoder([dom[j].text for j in picks]), dtype=torch.float64)
        centroids.append(vecs.mean(dim=0))
    na, nb = centroids[0].norm(), centroids[1].norm()
    if na == 0 or nb == 0:
        raise ValueError("domain centroid has zero norm")
    return float(torch.clamp(centroids[0] @ centroids[1] / (na * nb), -1.0, 1.0))
