"""Source-adapter pretraining, target training with ID alignment, and evaluation."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Sequence

import numpy as np
import torch

from .adapters import (
    FormatError, LoraAdapter, MergeSpec, adapter_from_tensors, dare_merge, init_adapter_for, read_tensors,
    sub_seed, write_tensors,
)
from .data import (
    HistoryIndex, Interaction, build_history_index, domain_similarity, entity_universe, sample_history, split,
)
from .heads import Fusion, IdEmbeddings, PredictHead, mse_loss, sample_negatives, total_loss, triplet_loss
from .textenc import MATRIX_NAMES, EncoderConfig, EncoderParams, Vocab, build_vocab, encode, init_encoder, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "step", "l_rec", "l_cl", "total", "val_mse")


@dataclass
class TrainConfig:
    lam: float = 0.3
    margin: float = 1.0
    k: int = 3
    rank: int = 8
    p: float = 0.9
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 20
    seed: int = 0
    dropout: float = 0.1
    no_cl: bool = False
    eval_repeats: int = 5
    patience: int = 5
    max_steps: int | None = None
    split_seed: int = 0
    max_len: int = 64
    attach: tuple[str, ...] = MATRIX_NAMES
    residual_fusion: bool = True
    fusion_projections: bool = False
    encoder: EncoderConfig = field(default_factory=EncoderConfig)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        for name in ("k", "rank", "batch_size", "eval_repeats", "epochs"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0.0 <= self.p < 1.0:
            raise ValueError("p must be in [0, 1)")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        self.attach = tuple(self.attach)

    @property
    def effective_lam(self) -> float:
        return 0.0 if self.no_cl else self.lam

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def full(cls, **overrides) -> "TrainConfig":
        base = dict(lr=1e-5, batch_size=4, dropout=0.5, rank=16, lam=0.3, k=3,
                    encoder=EncoderConfig(d_model=768, n_layers=12, n_heads=12, d_ffn=3072, max_len=256),
                    max_len=256)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["attach"] = list(self.attach)
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        enc_known = {f.name for f in fields(EncoderConfig)}
        enc = dict(raw.pop("encoder", {}) or {})
        for key in list(raw):
            if key in enc_known and key not in known:
                enc[key] = raw.pop(key)
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if set(enc) - enc_known:
            raise ValueError(f"unknown encoder keys: {sorted(set(enc) - enc_known)}")
        return cls(**raw, encoder=EncoderConfig(**enc))


@dataclass
class TargetModel:
    encoder: EncoderParams
    adapter: LoraAdapter
    ids: IdEmbeddings
    fusion: Fusion
    head: PredictHead
    vocab: Vocab
    index: HistoryIndex
    config: TrainConfig
    log: list[dict] = field(default_factory=list)

    def trainable(self) -> list[torch.Tensor]:
        return (self.adapter.parameters() + list(self.ids.parameters())
                + list(self.fusion.parameters()) + list(self.head.parameters()))

    def trainable_tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.adapter.tensors())
        out["ids.user"] = self.ids.user
        out["ids.item"] = self.ids.item
        for name, t in self.head.state_dict().items():
            out["head." + name] = t
        for name, t in self.fusion.state_dict().items():
            out["fusion." + name] = t
        return out

    def train(self, flag: bool = True) -> None:
        for m in (self.ids, self.fusion, self.head):
            m.train(flag)


@dataclass
class PretrainResult:
    adapter: LoraAdapter
    head: PredictHead
    log: list[dict]


@dataclass
class EvalResult:
    mean_mse: float
    per_repeat: list[float]
    predictions: np.ndarray  # (repeats, N)
    targets: np.ndarray

    @property
    def clamped_mse(self) -> float:
        return float(np.mean((np.clip(self.predictions, 1.0, 5.0) - self.targets) ** 2))


def _batches(n: int, size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, size):
        yield order[start:start + size]


def _snapshot(tensors: list[torch.Tensor]) -> list[torch.Tensor]:
    return [t.detach().clone() for t in tensors]


def _restore(tensors: list[torch.Tensor], saved: list[torch.Tensor]) -> None:
    with torch.no_grad():
        for t, s in zip(tensors, saved):
            t.copy_(s)


# --- source pretraining ---------------------------------------------------

def _tokens(interactions: Sequence[Interaction], vocab: Vocab, max_len: int) -> torch.Tensor:
    return torch.tensor([tokenize(x.text, vocab, max_len)[0] for x in interactions], dtype=torch.long)


def source_predictions(interactions, base, adapter, head, vocab, max_len, batch_size=256) -> torch.Tensor:
    head.eval()
    toks = _tokens(interactions, vocab, max_len)
    with torch.no_grad():
        return torch.cat([head(encode(toks[b], base, adapter)) for b in _batches(len(toks), batch_size, None)])


def pretrain_source(train: Sequence[Interaction], base: EncoderParams, vocab: Vocab, config: TrainConfig,
                    val: Sequence[Interaction] | None = None, label: str = "") -> PretrainResult:
    """Fit an adapter and a width-d head to predict ratings from single reviews.

    Only the adapter and head are updated; with ``val`` the adapter from the
    epoch with lowest validation MSE is returned.
    """
    if not train:
        raise ValueError("pretrain_source needs a non-empty dataset")
    adapter = init_adapter_for(base, config.rank, sub_seed(config.seed, 1), config.attach, label=label)
    adapter.requires_grad_(True)
    head = PredictHead(base.d_model, base.d_model, config.dropout, seed=sub_seed(config.seed, 2), dtype=base.dtype)
    params = adapter.parameters() + list(head.parameters())
    opt = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(sub_seed(config.seed, 3))
    gen = torch.Generator().manual_seed(sub_seed(config.seed, 4))
    toks = _tokens(train, vocab, config.max_len)
    ratings = torch.tensor([x.rating for x in train], dtype=base.dtype)

    rows: list[dict] = []
    best, best_val, stale, step = None, float("inf"), 0, 0
    for epoch in range(config.epochs):
        head.train()
        for b in _batches(len(train), config.batch_size, rng):
            cls = encode(toks[b], base, adapter, dropout=config.dropout, generator=gen)
            loss = mse_loss(head(cls, gen), ratings[b])
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            rows.append(dict(epoch=epoch, step=step, l_rec=loss.item(), l_cl=0.0, total=loss.item(), val_mse=""))
            if config.max_steps is not None and step >= config.max_steps:
                break
        if val:
            pred = source_predictions(val, base, adapter, head, vocab, config.max_len)
            vm = float(mse_loss(pred, [x.rating for x in val]))
            rows[-1]["val_mse"] = vm
            log.info("pretrain epoch %d step %d val_mse %.4f", epoch, step, vm)
            if vm < best_val:
                best_val, best, stale = vm, _snapshot(params), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        if config.max_steps is not None and step >= config.max_steps:
            break
    if best is not None:
        _restore(params, best)
    adapter.requires_grad_(False)
    head.requires_grad_(False)
    head.eval()
    return PretrainResult(adapter, head, rows)


# --- target model ---------------------------------------------------------

def build_target_model(dataset: Sequence[Interaction], train: Sequence[Interaction], merged: EncoderParams,
                       vocab: Vocab, config: TrainConfig) -> TargetModel:
    """Fresh target model; ID tables cover every entity in ``dataset``."""
    users, items = entity_universe(dataset)
    d, dtype = merged.d_model, merged.dtype
    adapter = init_adapter_for(merged, config.rank, sub_seed(config.seed, 11), config.attach, label="target")
    return TargetModel(
        encoder=merged,
        adapter=adapter,
        ids=IdEmbeddings(users, items, d, seed=sub_seed(config.seed, 12), dtype=dtype),
        fusion=Fusion(d, config.residual_fusion, config.fusion_projections, seed=sub_seed(config.seed, 13), dtype=dtype),
        head=PredictHead(2 * d, d, config.dropout, seed=sub_seed(config.seed, 14), dtype=dtype),
        vocab=vocab,
        index=build_history_index(train, vocab, config.max_len),
        config=config,
    )


@dataclass
class BatchOutput:
    pred: torch.Tensor
    v_u: torch.Tensor
    v_i: torch.Tensor
    user_rows: torch.Tensor
    item_rows: torch.Tensor


def history_tokens(model: TargetModel, batch: Sequence[Interaction], rng: np.random.Generator) -> torch.Tensor:
    """``(N, 2, k, L)`` tokens: k user histories then k item histories per interaction."""
    k = model.config.k
    out = []
    for x in batch:
        hu = sample_history(model.index, x.user, k, exclude=x.key, seed=rng, side="user")
        hi = sample_history(model.index, x.item, k, exclude=x.key, seed=rng, side="item")
        out.append(torch.stack([torch.stack(hu), torch.stack(hi)]))
    return torch.stack(out)


def forward_batch(model: TargetModel, batch: Sequence[Interaction], tokens: torch.Tensor,
                  dropout: float = 0.0, generator: torch.Generator | None = None) -> BatchOutput:
    n, _, k, length = tokens.shape
    cls = encode(tokens.reshape(n * 2 * k, length), model.encoder, model.adapter, dropout=dropout, generator=generator)
    cls = cls.view(n, 2, k, -1)
    u_rows, i_rows = model.ids.rows([x.user for x in batch], [x.item for x in batch])
    p_u, p_i = model.ids.user[u_rows], model.ids.item[i_rows]
    # item representation absorbs the user's contents and vice versa
    v_i = model.fusion(p_i, cls[:, 0])
    v_u = model.fusion(p_u, cls[:, 1])
    pred = model.head(torch.cat([v_u, v_i], dim=-1), generator)
    return BatchOutput(pred, v_u, v_i, u_rows, i_rows)


def batch_losses(model: TargetModel, batch: Sequence[Interaction], out: BatchOutput,
                 neg_users: Sequence[int] | None, neg_items: Sequence[int] | None):
    """Return ``(l_rec, l_cl, total)``; ``l_cl`` is 0 when the contrastive term is disabled."""
    ratings = torch.tensor([x.rating for x in batch], dtype=out.pred.dtype)
    l_rec = mse_loss(out.pred, ratings)
    lam = model.config.effective_lam
    if lam == 0.0 or neg_users is None:
        l_cl = torch.zeros((), dtype=l_rec.dtype)
    else:
        U, I = model.ids.user, model.ids.item
        neg_u = torch.as_tensor(neg_users, dtype=torch.long)
        neg_i = torch.as_tensor(neg_items, dtype=torch.long)
        l_cl = triplet_loss(out.v_i, U[out.user_rows], U[neg_u], out.v_u, I[out.item_rows], I[neg_i],
                            model.config.margin)
    return l_rec, l_cl, total_loss(l_rec, l_cl, lam)


def train_target(dataset: Sequence[Interaction], train: Sequence[Interaction], merged: EncoderParams, vocab: Vocab,
                 config: TrainConfig, val: Sequence[Interaction] | None = None) -> TargetModel:
    """Train target adapter, ID tables, fusion and head on top of a frozen merged encoder."""
    if not train:
        raise ValueError("train_target needs a non-empty training split")
    model = build_target_model(dataset, train, merged, vocab, config)
    model.adapter.requires_grad_(True)
    params = model.trainable()
    opt = torch.optim.Adam(params, lr=config.lr)
    rng = np.random.default_rng(sub_seed(config.seed, 15))
    gen = torch.Generator().manual_seed(sub_seed(config.seed, 16))
    n_users, n_items = len(model.ids.user_ids), len(model.ids.item_ids)

    best, best_val, stale, step = None, float("inf"), 0, 0
    for epoch in range(config.epochs):
        model.train(True)
        for b in _batches(len(train), config.batch_size, rng):
            batch = [train[j] for j in b]
            toks = history_tokens(model, batch, rng)
            out = forward_batch(model, batch, toks, config.dropout, gen)
            if config.effective_lam > 0:
                neg_u = sample_negatives(out.user_rows.tolist(), n_users, rng)
                neg_i = sample_negatives(out.item_rows.tolist(), n_items, rng)
            else:
                neg_u = neg_i = None
            l_rec, l_cl, loss = batch_losses(model, batch, out, neg_u, neg_i)
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            model.log.append(dict(epoch=epoch, step=step, l_rec=l_rec.item(), l_cl=l_cl.item(),
                                  total=loss.item(), val_mse=""))
            if config.max_steps is not None and step >= config.max_steps:
                break
        if val:
            vm = evaluate(model, val, 1, seed=sub_seed(config.seed, 1000 + epoch)).mean_mse
            model.log[-1]["val_mse"] = vm
            log.info("target epoch %d step %d val_mse %.4f", epoch, step, vm)
            if vm < best_val:
                best_val, best, stale = vm, _snapshot(params), 0
            else:
                stale += 1
                if stale >= config.patience:
                    break
        if config.max_steps is not None and step >= config.max_steps:
            break
    if best is not None:
        _restore(params, best)
    model.adapter.requires_grad_(False)
    for t in params:
        t.requires_grad_(False)
    model.train(False)
    return model


def evaluate(model: TargetModel, interactions: Sequence[Interaction], eval_repeats: int = 5, seed: int = 0,
             batch_size: int = 64) -> EvalResult:
    """MSE over ``eval_repeats`` independent history draws, dropout off."""
    if not interactions:
        raise ValueError("cannot evaluate on an empty split")
    if eval_repeats < 1:
        raise ValueError("eval_repeats must be >= 1")
    was_training = model.head.training
    model.train(False)
    targets = np.array([x.rating for x in interactions], dtype=np.float64)
    preds = np.empty((eval_repeats, len(interactions)), dtype=np.float64)
    with torch.no_grad():
        for r in range(eval_repeats):
            rng = np.random.default_rng(sub_seed(seed, r))
            for b in _batches(len(interactions), batch_size, None):
                batch = [interactions[j] for j in b]
                out = forward_batch(model, batch, history_tokens(model, batch, rng))
                preds[r, b] = out.pred.double().numpy()
    model.train(was_training)
    per_repeat = [float(np.mean((preds[r] - targets) ** 2)) for r in range(eval_repeats)]
    return EvalResult(float(np.mean(per_repeat)), per_repeat, preds, targets)


# --- checkpoints and logs -------------------------------------------------

def save_checkpoint(model: TargetModel, path) -> None:
    write_tensors(path, model.trainable_tensors(), rank=model.adapter.rank)


def load_checkpoint(path, dataset: Sequence[Interaction], train: Sequence[Interaction], merged: EncoderParams,
                    vocab: Vocab, config: TrainConfig) -> TargetModel:
    """Rebuild a target model and fill it from a checkpoint; every tensor must be present."""
    rank, tensors = read_tensors(path)
    model = build_target_model(dataset, train, merged, vocab, replace(config, rank=rank))
    expected = model.trainable_tensors()
    missing = [n for n in expected if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing tensor '{missing[0]}'")
    adapter = adapter_from_tensors({n: tensors[n] for n in model.adapter.tensors()}, rank, label="target")
    model.adapter = LoraAdapter({p: (B.to(merged.dtype), A.to(merged.dtype)) for p, (B, A) in adapter.pairs.items()},
                                rank, "target")
    with torch.no_grad():
        for name, t in model.trainable_tensors().items():
            if name.startswith(("ids.", "head.", "fusion.")):
                if tensors[name].shape != t.shape:
                    raise FormatError(f"{path}: tensor '{name}' has shape {tuple(tensors[name].shape)}, "
                                      f"expected {tuple(t.shape)}")
                t.copy_(tensors[name])
    for t in model.trainable():
        t.requires_grad_(False)
    model.train(False)
    return model


def write_log(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in LOG_COLUMNS})


# --- transfer experiment --------------------------------------------------

@dataclass
class TransferRow:
    sources: tuple[str, ...]
    val_mse: float
    test_mse: float
    per_repeat: list[float]


@dataclass
class TransferReport:
    target: str
    rows: list[TransferRow]
    similarity: dict[str, float]

    def row(self, sources: Sequence[str]) -> TransferRow:
        key = tuple(sources)
        return next(r for r in self.rows if r.sources == key)

    @property
    def baseline(self) -> TransferRow:
        return self.row(())

    def gain(self, sources: Sequence[str], metric: str = "val_mse") -> float:
        """Relative MSE improvement over the no-source run (positive is better)."""
        base = getattr(self.baseline, metric)
        return (base - getattr(self.row(sources), metric)) / base

    def table(self) -> str:
        """Similarity and MSE columns per source, with relative improvement over the plain model."""
        lines = ["source\tsim\tmse\tgain"]
        base = self.baseline.test_mse
        lines.append(f"-\t-\t{base:.4f}\t-")
        for r in self.rows:
            if not r.sources:
                continue
            name = "&".join(r.sources)
            sim = self.similarity.get(name, float("nan"))
            lines.append(f"{name}\t{sim:.2f}\t{r.test_mse:.4f}\t{(base - r.test_mse) / base:+.0%}")
        return "\n".join(lines)


def run_transfer_experiment(sources: dict[str, Sequence[Interaction]], target: Sequence[Interaction],
                            config: TrainConfig, target_name: str = "target",
                            subsets: Sequence[Sequence[str]] | None = None,
                            similarity_n: int | None = 100) -> TransferReport:
    """Pretrain one adapter per source, merge each subset into the base, train and evaluate on the target."""
    texts = [x.text for ds in sources.values() for x in ds] + [x.text for x in target]
    vocab = build_vocab(texts)
    base = init_encoder(len(vocab), config.encoder, seed=config.seed)
    base_sum = base.checksum()

    adapters = {}
    for j, (name, ds) in enumerate(sources.items()):
        tr, va, _ = split(ds, config.split_seed)
        cfg = replace(config, seed=sub_seed(config.seed, 200 + j))
        adapters[name] = pretrain_source(tr, base, vocab, cfg, val=va, label=name).adapter

    t_train, t_val, t_test = split(target, config.split_seed)
    if subsets is None:
        names = list(sources)
        subsets = [c for n in range(len(names) + 1) for c in itertools.combinations(names, n)]
    rows = []
    for subset in subsets:
        spec = MergeSpec(config.p, config.seed, [adapters[s] for s in subset])
        merged = dare_merge(base, spec)
        model = train_target(target, t_train, merged, vocab, config, val=t_val)
        va = evaluate(model, t_val, config.eval_repeats, seed=config.seed)
        te = evaluate(model, t_test, config.eval_repeats, seed=config.seed)
        rows.append(TransferRow(tuple(subset), va.mean_mse, te.mean_mse, te.per_repeat))
    if base.checksum() != base_sum:
        raise RuntimeError("base encoder was modified during the experiment")

    similarity = {}
    if similarity_n:
        enc = text_encoder(base, vocab, config.max_len)
        for name, ds in sources.items():
            n = min(similarity_n, len(ds), len(target))
            similarity[name] = domain_similarity(ds, target, n, enc, seed=config.seed)
    return TransferReport(target_name, rows, similarity)


def text_encoder(params: EncoderParams, vocab: Vocab, max_len: int, adapter: LoraAdapter | None = None,
                 batch_size: int = 256):
    """Callable mapping raw texts to CLS vectors, for :func:`loid.data.domain_similarity`."""
    def run(texts):
        toks = torch.tensor([tokenize(t, vocab, max_len)[0] for t in texts], dtype=torch.long)
        with torch.no_grad():
            return torch.cat([encode(toks[b], params, adapter) for b in _batches(len(toks), batch_size, None)])
    return run

