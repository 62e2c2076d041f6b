"""Losses, AdamW, pretraining and fine-tuning loops, checkpoints.

Training is logically single threaded and fully deterministic: one seeded
generator drives shuffling, all accumulation orders are fixed, and checkpoints
round-trip parameters, optimizer moments and the generator state bitwise.
"""
from __future__ import annotations

import json
import os
import shutil
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from . import ssm
from .errors import CompatibilityError, ConfigError, EmptyDatasetError
from .numcore import Tensor
from .records import N_RANKS
from .taxonomy import (
    ClassWeights,
    TargetDistribution,
    Taxonomy,
    smooth_target,
    truncate_to_known,
)
from .tokenizers import PAD, Vocab, encode, load_vocab, save_vocab

STAGES = ("pretrain", "finetune", "scratch")
_STAGE_DEFAULTS = {  # learning rate and epoch budget per stage
    "pretrain": (8e-4, 15),
    "finetune": (8e-5, 12),
    "scratch": (8e-4, 7),
}


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    lr: float | None = None
    max_epochs: int | None = None
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    patience: int = 3
    batch_size: int = 32
    seed: int = 0
    smoothing_mode: str = "hierarchical"
    epsilon: float = 0.1
    weighted_loss: bool = True
    head_mode: str = "multi"
    wall_clock_limit: float | None = None

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got '{self.stage}'")
        lr0, epochs0 = _STAGE_DEFAULTS[self.stage]
        if self.lr is None:
            self.lr = lr0
        if self.max_epochs is None:
            self.max_epochs = epochs0
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.patience < 0:
            raise ConfigError(f"patience must be >= 0, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments.

    Parameters whose grad is None are skipped entirely; names in `no_decay`
    (the layer-norm gains/biases) never receive weight decay.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 no_decay: set[str] | None = None):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.no_decay = no_decay or set()
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            if self.weight_decay and name not in self.no_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def pad_batch(token_lists: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad to the longest sequence; returns int ids and a 0/1 float mask."""
    T = max(len(t) for t in token_lists)
    ids = np.full((len(token_lists), T), PAD, dtype=np.int64)
    mask = np.zeros((len(token_lists), T), dtype=np.float64)
    for i, toks in enumerate(token_lists):
        ids[i, :len(toks)] = toks
        mask[i, :len(toks)] = 1.0
    return ids, mask


def lm_loss(state: ssm.ModelState, ids: np.ndarray, mask: np.ndarray) -> tuple[Tensor, int]:
    """Mean next-token cross-entropy over non-PAD targets; also returns the target count."""
    dtype = state.params["embedding"].data.dtype
    hidden = ssm.model_forward(state, ids, mask)
    logits = ssm.lm_logits(state, hidden)
    logp = nc.log_softmax(logits[:, :-1, :], axis=-1)
    targets = ids[:, 1:]
    valid = (targets != PAD).astype(dtype)
    n_valid = int(valid.sum())
    onehot = np.zeros(logp.data.shape, dtype=dtype)
    b_idx, t_idx = np.nonzero(targets != PAD)
    onehot[b_idx, t_idx, targets[b_idx, t_idx]] = 1.0
    total = nc.tsum(nc.mul(logp, Tensor(onehot)))
    return nc.mul(total, Tensor(np.asarray(-1.0 / max(n_valid, 1), dtype=dtype))), n_valid


def weighted_cross_entropy(
    logits: list[Tensor],
    targets: list[TargetDistribution],
    weights: ClassWeights | None = None,
    enabled: bool = False,
    head_mode: str = "multi",
) -> tuple[Tensor, int]:
    """Per sample: mean over its labelled ranks of -sum q*log softmax(z), each rank
    term scaled by the true class's weight when `enabled`. Batch loss is the mean
    over samples; fully unlabelled samples contribute zero and are counted.
    """
    if enabled and weights is None:
        raise ConfigError("weighted loss requested without ClassWeights")
    ranks = list(range(N_RANKS)) if head_mode == "multi" else [N_RANKS - 1]
    if len(logits) != len(ranks):
        raise ConfigError(f"{len(ranks)} heads expected, got {len(logits)} logit tensors")
    n = len(targets)
    dtype = logits[0].data.dtype
    n_ranks_per_sample = np.zeros(n)
    for i, tgt in enumerate(targets):
        n_ranks_per_sample[i] = sum(1 for r in ranks if tgt.mask[r])
    n_fully_masked = int((n_ranks_per_sample == 0).sum())
    denom = np.maximum(n_ranks_per_sample, 1.0)

    total = Tensor(np.asarray(0.0, dtype=dtype))
    for head, r in enumerate(ranks):
        q = np.zeros(logits[head].data.shape, dtype=dtype)
        scale = np.zeros(n, dtype=dtype)
        for i, tgt in enumerate(targets):
            if not tgt.mask[r]:
                continue
            q[i] = tgt.per_rank[r]
            w = 1.0
            if enabled:
                w = float(weights.per_rank[r][tgt.true_index[r]])
            scale[i] = w / denom[i]
        logp = nc.log_softmax(logits[head], axis=-1)
        contrib = nc.tsum(nc.mul(nc.mul(logp, Tensor(q)), Tensor(scale[:, None])))
        total = nc.sub(total, contrib)
    return nc.mul(total, Tensor(np.asarray(1.0 / n, dtype=dtype))), n_fully_masked


# ---------------------------------------------------------------------------
# checkpointing


class Checkpoint:
    """A checkpoint directory: manifest.json plus one raw tensor file per array."""

    def __init__(self, directory):
        self.dir = Path(directory)
        with open(self.dir / "manifest.json", "r", encoding="ascii") as fh:
            self.manifest = json.load(fh)

    def load_arrays(self, group: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.manifest["tensors"][group]:
            out[name] = nc.load_tensor(self.dir / group / (name + ".bin"))
        return out

    def load_model(self) -> ssm.ModelState:
        cfg = ssm.ModelConfig(**self.manifest["model_config"])
        arrays = self.load_arrays("params")
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        norms = set(self.manifest["norm_param_names"])
        return ssm.ModelState(cfg, params, self.manifest.get("class_counts"), norms)

    def load_vocab(self) -> Vocab:
        return load_vocab(self.dir / self.manifest["vocab_file"])

    def load_taxonomy(self) -> Taxonomy:
        if not self.manifest.get("taxonomy_file"):
            raise ConfigError("checkpoint has no taxonomy")
        return Taxonomy.load(self.dir / self.manifest["taxonomy_file"])


def _write_checkpoint(dest: Path, manifest: dict, groups: dict[str, dict[str, np.ndarray]],
                      vocab: Vocab, taxonomy: Taxonomy | None):
    """Write-temp-then-rename so readers never observe a half-written checkpoint."""
    dest = Path(dest)
    tmp = dest.parent / (dest.name + f".tmp{os.getpid()}")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    manifest = dict(manifest)
    manifest["tensors"] = {g: sorted(arrays) for g, arrays in groups.items()}
    manifest["vocab_file"] = "vocab.txt"
    save_vocab(vocab, tmp / "vocab.txt")
    if taxonomy is not None:
        manifest["taxonomy_file"] = "taxonomy.json"
        taxonomy.save(tmp / "taxonomy.json")
    else:
        manifest["taxonomy_file"] = None
    for group, arrays in groups.items():
        gdir = tmp / group
        gdir.mkdir()
        for name, arr in arrays.items():
            nc.save_tensor(gdir / (name + ".bin"), arr)
    with open(tmp / "manifest.json", "w", encoding="ascii") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    old = dest.parent / (dest.name + ".old")
    if old.exists():  # leftover from an interrupted write
        shutil.rmtree(old)
    if dest.exists():
        dest.replace(old)
    tmp.replace(dest)
    if old.exists():
        shutil.rmtree(old)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class _LoopState:
    epoch: int = 0
    best_val: float = float("inf")
    best_epoch: int = -1
    bad_epochs: int = 0
    history: list = field(default_factory=list)


def _batch_iter(n: int, batch_size: int, order=None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def _stop_early(loop: _LoopState, patience: int) -> bool:
    # patience counts tolerated non-improving epochs; 0 stops on the first one
    return loop.bad_epochs >= max(patience, 1)


def _snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: p.data.copy() for k, p in params.items()}


class _MetricsLog:
    def __init__(self, path):
        self.path = Path(path)

    def write(self, **fields):
        with open(self.path, "a", encoding="ascii") as fh:
            fh.write(json.dumps(fields) + "\n")


def _encode_all(records, vocab: Vocab, max_len: int) -> list[list[int]]:
    return [encode(vocab, r.sequence, max_len).ids for r in records]


def _run_loop(
    *,
    state: ssm.ModelState,
    opt: AdamW,
    cfg: TrainConfig,
    model_cfg: ssm.ModelConfig,
    out_dir: Path,
    vocab: Vocab,
    taxonomy: Taxonomy | None,
    train_step,   # (batch indices) -> (loss float, denominator int)
    val_pass,     # () -> float
    rng: np.random.Generator,
    loop: _LoopState,
    best_params: dict[str, np.ndarray] | None,
    n_train: int,
    manifest_base: dict,
) -> Checkpoint:
    log = _MetricsLog(out_dir / "metrics.jsonl")
    started = time.monotonic()
    if best_params is None:
        best_params = _snapshot(state.params)

    while loop.epoch < cfg.max_epochs:
        epoch = loop.epoch + 1
        t0 = time.monotonic()
        order = rng.permutation(n_train)
        total, denom = 0.0, 0
        for batch in _batch_iter(n_train, cfg.batch_size, order):
            loss_value, weight = train_step(batch)
            total += loss_value * weight
            denom += weight
        train_loss = total / max(denom, 1)
        log.write(epoch=epoch, split="train", loss=train_loss, lr=cfg.lr,
                  wall_ms=1000.0 * (time.monotonic() - t0))

        t0 = time.monotonic()
        val_loss = val_pass()
        log.write(epoch=epoch, split="val", loss=val_loss, lr=cfg.lr,
                  wall_ms=1000.0 * (time.monotonic() - t0))

        loop.epoch = epoch
        loop.history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        if val_loss < loop.best_val:
            loop.best_val = val_loss
            loop.best_epoch = epoch
            loop.bad_epochs = 0
            best_params = _snapshot(state.params)
        else:
            loop.bad_epochs += 1

        manifest = dict(manifest_base)
        manifest.update(
            epoch=loop.epoch, history=loop.history, best_epoch=loop.best_epoch,
            best_val_loss=loop.best_val, bad_epochs=loop.bad_epochs, adam_step=opt.t,
            rng_state=rng.bit_generator.state,
        )
        _write_checkpoint(
            out_dir / "last",
            manifest,
            {
                "params": {k: p.data for k, p in state.params.items()},
                "opt_m": opt.m,
                "opt_v": opt.v,
                "best": best_params,
            },
            vocab,
            taxonomy,
        )
        if _stop_early(loop, cfg.patience):
            break
        if cfg.wall_clock_limit is not None and time.monotonic() - started > cfg.wall_clock_limit:
            break

    final_manifest = dict(manifest_base)
    final_manifest.update(
        epoch=loop.best_epoch, history=loop.history, best_epoch=loop.best_epoch,
        best_val_loss=loop.best_val, bad_epochs=loop.bad_epochs, adam_step=opt.t,
        rng_state=rng.bit_generator.state,
    )
    _write_checkpoint(out_dir / "final", final_manifest, {"params": best_params}, vocab, taxonomy)
    return Checkpoint(out_dir / "final")


def _resume_if_requested(out_dir: Path, resume: bool, state: ssm.ModelState, opt: AdamW,
                         rng: np.random.Generator, loop: _LoopState):
    last = Path(out_dir) / "last"
    if not resume or not (last / "manifest.json").exists():
        return None
    ckpt = Checkpoint(last)
    for name, arr in ckpt.load_arrays("params").items():
        state.params[name].data = arr
    opt.m = ckpt.load_arrays("opt_m")
    opt.v = ckpt.load_arrays("opt_v")
    opt.t = ckpt.manifest["adam_step"]
    rng.bit_generator.state = ckpt.manifest["rng_state"]
    loop.epoch = ckpt.manifest["epoch"]
    loop.history = ckpt.manifest["history"]
    loop.best_epoch = ckpt.manifest["best_epoch"]
    loop.best_val = ckpt.manifest["best_val_loss"]
    loop.bad_epochs = ckpt.manifest["bad_epochs"]
    return ckpt.load_arrays("best")


def pretrain(
    train_records,
    val_records,
    vocab: Vocab,
    model_cfg: ssm.ModelConfig,
    cfg: TrainConfig,
    out_dir,
    resume: bool = False,
) -> Checkpoint:
    """Next-token pretraining with per-epoch validation and early stopping."""
    if cfg.stage != "pretrain":
        raise ConfigError(f"pretrain called with stage '{cfg.stage}'")
    if not train_records or not val_records:
        raise EmptyDatasetError("pretrain needs non-empty train and validation sets")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_tokens = _encode_all(train_records, vocab, model_cfg.max_len)
    val_tokens = _encode_all(val_records, vocab, model_cfg.max_len)

    state = ssm.init_model(model_cfg, seed=cfg.seed)
    opt = AdamW(state.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                cfg.weight_decay, state.norm_param_names)
    rng = np.random.default_rng(cfg.seed)
    loop = _LoopState()
    best = _resume_if_requested(out_dir, resume, state, opt, rng, loop)

    def train_step(batch):
        ids, mask = pad_batch([train_tokens[i] for i in batch])
        opt.zero_grad()
        loss, n_valid = lm_loss(state, ids, mask)
        nc.backward(loss)
        opt.step()
        return float(loss.data), n_valid

    def val_pass():
        total, count = 0.0, 0
        with nc.no_grad():
            for batch in _batch_iter(len(val_tokens), cfg.batch_size):
                ids, mask = pad_batch([val_tokens[i] for i in batch])
                loss, n_valid = lm_loss(state, ids, mask)
                total += float(loss.data) * n_valid
                count += n_valid
        return total / max(count, 1)

    manifest = {
        "stage": "pretrain",
        "model_config": model_cfg.backbone_fields() | {
            "max_len": model_cfg.max_len, "head_mode": model_cfg.head_mode},
        "train_config": asdict(cfg),
        "norm_param_names": sorted(state.norm_param_names),
        "class_counts": None,
    }
    return _run_loop(
        state=state, opt=opt, cfg=cfg, model_cfg=model_cfg, out_dir=out_dir, vocab=vocab,
        taxonomy=None, train_step=train_step, val_pass=val_pass, rng=rng, loop=loop,
        best_params=best, n_train=len(train_tokens), manifest_base=manifest,
    )


def _check_compatible(ckpt: Checkpoint, model_cfg: ssm.ModelConfig, vocab: Vocab):
    mismatches = []
    saved = ckpt.manifest["model_config"]
    for key, value in model_cfg.backbone_fields().items():
        if saved.get(key) != value:
            mismatches.append(f"{key}: checkpoint {saved.get(key)} != requested {value}")
    ckpt_vocab = ckpt.load_vocab()
    if (ckpt_vocab.kind, ckpt_vocab.kmer_k, ckpt_vocab.token_to_id, ckpt_vocab.merges) != (
            vocab.kind, vocab.kmer_k, vocab.token_to_id, vocab.merges):
        mismatches.append("tokenizer: checkpoint vocabulary differs from the provided one")
    if mismatches:
        raise CompatibilityError("; ".join(mismatches))


def finetune(
    train_records,
    val_records,
    taxonomy: Taxonomy,
    vocab: Vocab,
    cfg: TrainConfig,
    out_dir,
    model_cfg: ssm.ModelConfig | None = None,
    init_from: Checkpoint | str | None = None,
    class_weights_override: ClassWeights | None = None,
    resume: bool = False,
) -> Checkpoint:
    """Supervised fine-tuning (stage=finetune) or training from scratch (stage=scratch).

    Fine-tuning loads the backbone from `init_from` after checking that the
    tokenizer and backbone configuration match; classification heads are always
    freshly initialized from the config seed.
    """
    from .taxonomy import class_weights as compute_class_weights

    if cfg.stage not in ("finetune", "scratch"):
        raise ConfigError(f"finetune called with stage '{cfg.stage}'")
    if not train_records or not val_records:
        raise EmptyDatasetError("finetune needs non-empty train and validation sets")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if cfg.stage == "finetune":
        if init_from is None:
            raise ConfigError("stage=finetune requires a pretraining checkpoint")
        ckpt = init_from if isinstance(init_from, Checkpoint) else Checkpoint(init_from)
        loaded_cfg = ssm.ModelConfig(**{**ckpt.manifest["model_config"],
                                        "head_mode": cfg.head_mode})
        if model_cfg is not None:
            _check_compatible(ckpt, model_cfg, vocab)
            loaded_cfg = ssm.ModelConfig(**{**model_cfg.backbone_fields(),
                                            "max_len": model_cfg.max_len,
                                            "head_mode": cfg.head_mode})
        else:
            _check_compatible(ckpt, loaded_cfg, vocab)
        model_cfg = loaded_cfg
        state = ssm.init_model(model_cfg, seed=cfg.seed)
        for name, arr in ckpt.load_arrays("params").items():
            state.params[name].data = arr.copy()
    else:
        if model_cfg is None:
            raise ConfigError("stage=scratch requires a ModelConfig")
        model_cfg = ssm.ModelConfig(**{**model_cfg.backbone_fields(),
                                       "max_len": model_cfg.max_len,
                                       "head_mode": cfg.head_mode})
        state = ssm.init_model(model_cfg, seed=cfg.seed)

    if cfg.head_mode == "single" and not any(
            r.label.depth == N_RANKS for r in train_records):
        raise ConfigError("single-head mode needs at least one species-labelled record")

    ssm.add_classification_heads(state, taxonomy.class_counts(), seed=cfg.seed)
    weights = class_weights_override
    if weights is None and cfg.weighted_loss:
        weights = compute_class_weights(taxonomy)

    train_tokens = _encode_all(train_records, vocab, model_cfg.max_len)
    val_tokens = _encode_all(val_records, vocab, model_cfg.max_len)
    train_targets = [
        smooth_target(taxonomy, truncate_to_known(taxonomy, r.label),
                      cfg.smoothing_mode, cfg.epsilon)
        for r in train_records
    ]
    val_targets = [
        smooth_target(taxonomy, truncate_to_known(taxonomy, r.label),
                      cfg.smoothing_mode, cfg.epsilon)
        for r in val_records
    ]

    opt = AdamW(state.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                cfg.weight_decay, state.norm_param_names)
    rng = np.random.default_rng(cfg.seed)
    loop = _LoopState()
    best = _resume_if_requested(out_dir, resume, state, opt, rng, loop)

    def classification_loss(token_batch, target_batch):
        ids, mask = pad_batch(token_batch)
        hidden = ssm.model_forward(state, ids, mask)
        logits = ssm.classify(state, hidden, mask)
        return weighted_cross_entropy(
            logits, target_batch, weights, cfg.weighted_loss, cfg.head_mode)

    def train_step(batch):
        opt.zero_grad()
        loss, _ = classification_loss(
            [train_tokens[i] for i in batch], [train_targets[i] for i in batch])
        nc.backward(loss)
        opt.step()
        return float(loss.data), len(batch)

    def val_pass():
        total, count = 0.0, 0
        with nc.no_grad():
            for batch in _batch_iter(len(val_tokens), cfg.batch_size):
                loss, _ = classification_loss(
                    [val_tokens[i] for i in batch], [val_targets[i] for i in batch])
                total += float(loss.data) * len(batch)
                count += len(batch)
        return total / max(count, 1)

    manifest = {
        "stage": cfg.stage,
        "model_config": model_cfg.backbone_fields() | {
            "max_len": model_cfg.max_len, "head_mode": model_cfg.head_mode},
        "train_config": asdict(cfg),
        "norm_param_names": sorted(state.norm_param_names),
        "class_counts": taxonomy.class_counts(),
    }
    return _run_loop(
        state=state, opt=opt, cfg=cfg, model_cfg=model_cfg, out_dir=out_dir, vocab=vocab,
        taxonomy=taxonomy, train_step=train_step, val_pass=val_pass, rng=rng, loop=loop,
        best_params=best, n_train=len(train_tokens), manifest_base=manifest,
    )
