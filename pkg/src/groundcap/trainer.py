"""Training loops, Adam schedules, and checkpointing for both models.

Everything is deterministic given (config, seed, platform): model init, batch
order, sampling, and checkpoint bytes. A checkpoint carries parameters, Adam
moments, the torch generator state, and the metric history, which is enough to
resume a run bit-identically at any epoch boundary.
"""

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .captioner import CaptionerConfig, UpDownCaptioner
from .common import as_double_tensor
from .data import PAD, CaptionRecord, Dataset
from .evaluation import attention_accuracy, full_report, strip_wrap
from .matcher import Matcher, MatcherConfig, triplet_loss_hard
from .objectives import (
    CiderContext,
    RewardConfig,
    RewardFn,
    Stage1Config,
    build_cider_context,
    build_gamma,
    stage1_loss_batch,
)

CHECKPOINT_MAGIC = b"GCKPT01\n"
PARAM_PREFIX = "param."
FINAL_CKPT = "ckpt-final.bin"
BEST_CKPT = "ckpt-best.bin"


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""


# -- configuration ------------------------------------------------------------


@dataclass
class OptimizerConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")


@dataclass
class ScheduleConfig:
    """Per-stage epoch budget and stepped learning-rate decay."""

    epochs: int
    lr: float
    lr_decay: float = 1.0
    decay_every: int = 0
    patience: int | None = None  # early stop after this many epochs without val improvement

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ValueError("lr_decay must be in (0, 1]")
        if self.decay_every < 0:
            raise ValueError("decay_every must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def lr_at(self, epoch: int) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.lr_decay ** (epoch // self.decay_every)


@dataclass
class ExperimentConfig:
    """One experiment: dataset, both model configs, and all stage schedules."""

    dataset_dir: str = "data"
    seed: int = 0
    batch_size: int = 32
    grad_clip: float = 5.0
    matcher: MatcherConfig = field(default_factory=MatcherConfig)
    captioner: CaptionerConfig = field(default_factory=CaptionerConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    reward: RewardConfig = field(default_factory=RewardConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    matcher_train: ScheduleConfig = field(
        default_factory=lambda: ScheduleConfig(20, 5e-4, 0.8, 3, patience=5)
    )
    stage1_train: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(30, 5e-4, 0.8, 3))
    stage2_train: ScheduleConfig = field(default_factory=lambda: ScheduleConfig(80, 5e-5))

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be > 0")
        self.matcher.validate()
        self.captioner.validate()
        self.stage1.validate()
        self.reward.validate()
        self.optimizer.validate()
        self.matcher_train.validate()
        self.stage1_train.validate()
        self.stage2_train.validate()


def desk_config(dataset_dir: str = "data", seed: int = 0) -> ExperimentConfig:
    """Small widths and short schedules sized for minute-scale experiments."""
    return ExperimentConfig(
        dataset_dir=dataset_dir,
        seed=seed,
        matcher=MatcherConfig(joint_dim=96, word_embed_dim=64),
        captioner=CaptionerConfig(
            feature_embed_dim=64, word_embed_dim=64, hidden_dim=64, attention_dim=64
        ),
        matcher_train=ScheduleConfig(12, 5e-4, 0.8, 3, patience=5),
        stage1_train=ScheduleConfig(10, 5e-4, 0.8, 3),
        stage2_train=ScheduleConfig(10, 5e-5),
    )


_SECTIONS = {
    "matcher": MatcherConfig,
    "captioner": CaptionerConfig,
    "stage1": Stage1Config,
    "reward": RewardConfig,
    "optimizer": OptimizerConfig,
    "matcher_train": ScheduleConfig,
    "stage1_train": ScheduleConfig,
    "stage2_train": ScheduleConfig,
}


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Rebuild an ExperimentConfig from nested plain dicts; strict on keys."""
    leftover = dict(data)
    kwargs = {}
    for name, section_type in _SECTIONS.items():
        if name in leftover:
            section = leftover.pop(name)
            try:
                kwargs[name] = section_type(**section)
            except TypeError as exc:
                raise ValueError(f"bad config section {name!r}: {exc}") from exc
    for name in ("dataset_dir", "seed", "batch_size", "grad_clip"):
        if name in leftover:
            kwargs[name] = leftover.pop(name)
    if leftover:
        raise ValueError(f"unknown config keys: {sorted(leftover)}")
    cfg = ExperimentConfig(**kwargs)
    cfg.validate()
    return cfg


# -- checkpoint blob ----------------------------------------------------------


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Atomic single-file checkpoint: JSON header plus raw little-endian arrays."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        blob = arr.tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"meta": meta, "arrays": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path} is not a checkpoint file")
    base = len(CHECKPOINT_MAGIC)
    hlen = int.from_bytes(data[base : base + 8], "little")
    head = json.loads(data[base + 8 : base + 8 + hlen].decode("utf-8"))
    payload = data[base + 8 + hlen :]
    arrays = {}
    for entry in head["arrays"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = (
            np.frombuffer(raw, dtype=np.dtype(entry["dtype"]))
            .reshape(entry["shape"])
            .copy()
        )
    return arrays, head["meta"]


def model_arrays(model: torch.nn.Module) -> dict[str, np.ndarray]:
    return {
        PARAM_PREFIX + name: p.detach().numpy().copy()
        for name, p in model.named_parameters()
    }


def load_model_arrays(model: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = PARAM_PREFIX + name
            if key not in arrays:
                raise KeyError(f"checkpoint is missing parameter {name}")
            arr = arrays[key]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(
                    f"parameter {name} has shape {tuple(p.shape)}, checkpoint has {tuple(arr.shape)}"
                )
            p.copy_(torch.from_numpy(arr))


def checkpoint_meta(path: str | Path) -> dict:
    _, meta = load_checkpoint(path)
    return meta


def load_matcher_checkpoint(path: str | Path, dataset: Dataset) -> Matcher:
    arrays, meta = load_checkpoint(path)
    if meta.get("stage") != "matcher":
        raise ValueError(f"{path} is a {meta.get('stage')!r} checkpoint, not a matcher")
    cfg = config_from_dict(meta["config"])
    model = Matcher(len(dataset.vocab), dataset.config.feature_dim, cfg.matcher, seed=cfg.seed)
    load_model_arrays(model, arrays)
    return model


def load_captioner_checkpoint(path: str | Path, dataset: Dataset) -> UpDownCaptioner:
    arrays, meta = load_checkpoint(path)
    if meta.get("stage") not in ("captioner-xe", "captioner-scst"):
        raise ValueError(f"{path} is a {meta.get('stage')!r} checkpoint, not a captioner")
    cfg = config_from_dict(meta["config"])
    model = UpDownCaptioner(
        len(dataset.vocab), dataset.config.feature_dim, cfg.captioner, seed=cfg.seed
    )
    load_model_arrays(model, arrays)
    return model


# -- shared loop plumbing ------------------------------------------------------


def _named_params(model: torch.nn.Module) -> tuple[list[str], list[Tensor]]:
    pairs = sorted(model.named_parameters())
    return [n for n, _ in pairs], [p for _, p in pairs]


def _make_adam(params: list[Tensor], cfg: ExperimentConfig, lr: float) -> torch.optim.Adam:
    opt = cfg.optimizer
    return torch.optim.Adam(params, lr=lr, betas=(opt.beta1, opt.beta2), eps=opt.eps)


def _adam_arrays(
    opt: torch.optim.Adam, names: list[str], params: list[Tensor]
) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    arrays, steps = {}, {}
    for name, p in zip(names, params):
        state = opt.state.get(p)
        if not state:
            continue
        arrays[f"adam.{name}.exp_avg"] = state["exp_avg"].numpy().copy()
        arrays[f"adam.{name}.exp_avg_sq"] = state["exp_avg_sq"].numpy().copy()
        steps[name] = float(state["step"])
    return arrays, steps


def _restore_adam(
    opt: torch.optim.Adam,
    names: list[str],
    params: list[Tensor],
    arrays: dict[str, np.ndarray],
    steps: dict[str, float],
) -> None:
    for name, p in zip(names, params):
        key = f"adam.{name}.exp_avg"
        if key not in arrays:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(steps[name])),
            "exp_avg": torch.from_numpy(arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(arrays[f"adam.{name}.exp_avg_sq"].copy()),
        }


def _batches(items: list, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def _pad_batch(caps: list[CaptionRecord]) -> tuple[Tensor, Tensor]:
    lengths = [len(c.tokens) for c in caps]
    tokens = torch.full((len(caps), max(lengths)), PAD, dtype=torch.long)
    for b, cap in enumerate(caps):
        tokens[b, : lengths[b]] = torch.tensor(cap.tokens, dtype=torch.long)
    return tokens, torch.tensor(lengths, dtype=torch.long)


def _features_for(dataset: Dataset, caps: list[CaptionRecord]) -> Tensor:
    return torch.stack(
        [as_double_tensor(dataset.scene(c.scene_id).features) for c in caps]
    )


def _write_metrics(run_dir: Path, fields: list[str], history: list[dict]) -> None:
    with (run_dir / "metrics.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def _rng_state(gen: torch.Generator) -> np.ndarray:
    return gen.get_state().numpy().copy()


def _set_rng_state(gen: torch.Generator, arr: np.ndarray) -> None:
    gen.set_state(torch.from_numpy(arr.copy()))


def _check_finite(loss: Tensor, stage: str, epoch: int) -> None:
    if not bool(torch.isfinite(loss)):
        raise TrainingDivergedError(f"{stage} loss became non-finite at epoch {epoch}")


class _RunState:
    """Resumable bookkeeping shared by the three stage loops."""

    def __init__(
        self,
        stage: str,
        model: torch.nn.Module,
        cfg: ExperimentConfig,
        run_dir: Path,
        lr0: float,
    ):
        self.stage = stage
        self.model = model
        self.cfg = cfg
        self.run_dir = run_dir
        self.names, self.params = _named_params(model)
        self.opt = _make_adam(self.params, cfg, lr0)
        self.gen = torch.Generator()
        self.gen.manual_seed(cfg.seed)
        self.start_epoch = 0
        self.history: list[dict] = []
        self.best_val = math.inf
        self.since_improve = 0
        self.extra: dict = {}

    def resume(self, path: str | Path) -> None:
        arrays, meta = load_checkpoint(path)
        if meta.get("stage") != self.stage:
            raise ValueError(
                f"cannot resume {self.stage} from a {meta.get('stage')!r} checkpoint"
            )
        load_model_arrays(self.model, arrays)
        _restore_adam(self.opt, self.names, self.params, arrays, meta["adam_step"])
        _set_rng_state(self.gen, arrays["rng.torch"])
        self.start_epoch = meta["epoch"]
        self.history = meta["history"]
        self.best_val = math.inf if meta["best_val"] is None else meta["best_val"]
        self.since_improve = meta["since_improve"]
        self.extra = meta.get("extra", {})

    def set_lr(self, lr: float) -> None:
        for group in self.opt.param_groups:
            group["lr"] = lr

    def step(self, loss: Tensor, epoch: int) -> None:
        _check_finite(loss, self.stage, epoch)
        self.opt.zero_grad()
        loss.backward()
        torch.nn.utils.clip_grad_norm_(self.params, self.cfg.grad_clip)
        self.opt.step()

    def save(self, epoch: int, name: str = FINAL_CKPT) -> None:
        arrays = model_arrays(self.model)
        adam_arrays, adam_steps = _adam_arrays(self.opt, self.names, self.params)
        arrays.update(adam_arrays)
        arrays["rng.torch"] = _rng_state(self.gen)
        meta = {
            "format": 1,
            "stage": self.stage,
            "epoch": epoch,
            "config": config_to_dict(self.cfg),
            "history": self.history,
            "best_val": None if math.isinf(self.best_val) else self.best_val,
            "since_improve": self.since_improve,
            "adam_step": adam_steps,
            "extra": self.extra,
        }
        save_checkpoint(self.run_dir / name, arrays, meta)


# -- matcher training ----------------------------------------------------------

MATCHER_METRICS = ["epoch", "lr", "train_loss", "val_loss", "val_r1"]


def train_matcher(
    dataset: Dataset,
    cfg: ExperimentConfig,
    run_dir: str | Path,
    resume_from: str | Path | None = None,
) -> Matcher:
    """Triplet training with in-batch hard negatives; keeps the best-val epoch.

    Writes ckpt-final.bin every epoch and ckpt-best.bin whenever validation
    loss improves; the returned model carries the best-val parameters.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sched = cfg.matcher_train
    model = Matcher(len(dataset.vocab), dataset.config.feature_dim, cfg.matcher, seed=cfg.seed)
    state = _RunState("matcher", model, cfg, run_dir, sched.lr)
    if resume_from is not None:
        state.resume(resume_from)

    train_caps = dataset.captions["train"]
    val_caps = dataset.captions["val"]
    pos = cfg.matcher.pos_restricted

    def same_scene(caps: list[CaptionRecord]) -> Tensor | None:
        # Captions of one scene are positives for each other's image; mining
        # them as negatives would pin their hinge at exactly the margin.
        sids = [c.scene_id for c in caps]
        mask = torch.tensor([[a == b for b in sids] for a in sids])
        mask.fill_diagonal_(False)
        return mask if bool(mask.any()) else None

    def batch_loss(caps: list[CaptionRecord]) -> Tensor:
        feats = _features_for(dataset, caps)
        ids = [list(c.tokens) for c in caps]
        masks = [list(c.noun_mask) for c in caps] if pos else None
        return triplet_loss_hard(
            model.score_matrix(feats, ids, masks), cfg.matcher.margin, same_scene(caps)
        )

    def run_val() -> tuple[float, float]:
        loss_sum, hits, total = 0.0, 0, 0
        with torch.no_grad():
            for caps in _batches(val_caps, cfg.batch_size):
                if len(caps) < 2:
                    continue
                feats = _features_for(dataset, caps)
                ids = [list(c.tokens) for c in caps]
                masks = [list(c.noun_mask) for c in caps] if pos else None
                scores = model.score_matrix(feats, ids, masks)
                loss_sum += float(
                    triplet_loss_hard(scores, cfg.matcher.margin, same_scene(caps))
                ) * len(caps)
                picked = scores.numpy().argmax(axis=0)  # best scene per caption
                sids = [c.scene_id for c in caps]
                hits += sum(sids[p] == sid for p, sid in zip(picked, sids))
                total += len(caps)
        if total == 0:
            return float("nan"), float("nan")
        return loss_sum / total, hits / total

    for epoch in range(state.start_epoch, sched.epochs):
        lr = sched.lr_at(epoch)
        state.set_lr(lr)
        perm = torch.randperm(len(train_caps), generator=state.gen).tolist()
        loss_sum, seen = 0.0, 0
        for idx in _batches(perm, cfg.batch_size):
            if len(idx) < 2:
                continue  # triplet loss needs in-batch negatives
            caps = [train_caps[i] for i in idx]
            loss = batch_loss(caps)
            state.step(loss, epoch)
            loss_sum += float(loss.detach()) * len(caps)
            seen += len(caps)
        val_loss, val_r1 = run_val()
        state.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / max(seen, 1),
                "val_loss": val_loss,
                "val_r1": val_r1,
            }
        )
        improved = val_loss < state.best_val
        if improved:
            state.best_val = val_loss
            state.since_improve = 0
        else:
            state.since_improve += 1
        _write_metrics(run_dir, MATCHER_METRICS, state.history)
        state.save(epoch + 1)
        if improved:
            state.save(epoch + 1, BEST_CKPT)
        if sched.patience is not None and state.since_improve >= sched.patience:
            break

    if not (run_dir / FINAL_CKPT).exists():  # 0-epoch runs still leave artifacts
        _write_metrics(run_dir, MATCHER_METRICS, state.history)
        state.save(state.start_epoch)
        state.save(state.start_epoch, BEST_CKPT)

    best_arrays, _ = load_checkpoint(run_dir / BEST_CKPT)
    load_model_arrays(model, best_arrays)
    return model


# -- teacher attention ----------------------------------------------------------


def precompute_teacher_attention(
    matcher: Matcher, dataset: Dataset, split: str = "train"
) -> dict[str, np.ndarray]:
    """Frozen word-over-region attention for every caption of a split."""
    store: dict[str, np.ndarray] = {}
    for cap in dataset.captions[split]:
        scene = dataset.scene(cap.scene_id)
        store[cap.caption_id] = matcher.attention(scene.features, cap.tokens).weights
    return store


# -- stage 1: cross entropy with attention transfer ------------------------------

STAGE1_METRICS = [
    "epoch",
    "lr",
    "train_loss",
    "train_xe",
    "train_transfer",
    "val_xe",
    "val_attention_accuracy",
]


def _supervision_table(
    dataset: Dataset,
    split: str,
    cfg: Stage1Config,
    teacher_store: dict[str, np.ndarray] | None,
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-caption supervision rows plus validity masks, precomputed once."""
    table: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    for cap in dataset.captions[split]:
        scene = dataset.scene(cap.scene_id)
        n, k = len(cap.tokens), scene.num_regions
        rows = np.zeros((n, k), dtype=np.float64)
        valid = np.zeros(n, dtype=bool)
        if cfg.supervision == "distill":
            if cap.caption_id not in teacher_store:
                raise KeyError(f"teacher store has no attention for {cap.caption_id}")
            alpha = teacher_store[cap.caption_id]
            if alpha.shape != (n, k):
                raise ValueError(
                    f"teacher attention for {cap.caption_id} has shape {alpha.shape}, "
                    f"expected {(n, k)}"
                )
            for i, is_noun in enumerate(cap.noun_mask):
                if is_noun:
                    rows[i] = alpha[i]
                    valid[i] = True
        else:  # ground-truth indicators
            for i, vec in build_gamma(scene, cap).items():
                total = vec.sum()
                if total > 0:
                    rows[i] = vec / total if cfg.gt_form == "kl" else vec
                    valid[i] = True
        table[cap.caption_id] = (rows, valid)
    return table


def _supervision_tensors(
    caps: list[CaptionRecord],
    table: dict[str, tuple[np.ndarray, np.ndarray]],
    length: int,
    k: int,
) -> tuple[Tensor, Tensor]:
    rows = torch.zeros(len(caps), length, k, dtype=torch.float64)
    valid = torch.zeros(len(caps), length, dtype=torch.bool)
    for b, cap in enumerate(caps):
        r, v = table[cap.caption_id]
        rows[b, : r.shape[0]] = torch.from_numpy(r)
        valid[b, : v.shape[0]] = torch.from_numpy(v)
    return rows, valid


def _val_xe(model: UpDownCaptioner, dataset: Dataset, batch_size: int) -> float:
    xe_sum, count = 0.0, 0
    with torch.no_grad():
        for caps in _batches(dataset.captions["val"], batch_size):
            feats = _features_for(dataset, caps)
            tokens, lengths = _pad_batch(caps)
            logprobs, _, mask = model.teacher_forced_batch(feats, tokens, lengths)
            xe_sum += float(-(logprobs * mask).sum())
            count += len(caps)
    return xe_sum / max(count, 1)


def train_stage1(
    dataset: Dataset,
    cfg: ExperimentConfig,
    run_dir: str | Path,
    teacher_store: dict[str, np.ndarray] | None = None,
    resume_from: str | Path | None = None,
) -> UpDownCaptioner:
    """Cross-entropy training with the configured attention-transfer term."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sched = cfg.stage1_train
    model = UpDownCaptioner(
        len(dataset.vocab), dataset.config.feature_dim, cfg.captioner, seed=cfg.seed
    )
    state = _RunState("captioner-xe", model, cfg, run_dir, sched.lr)
    if resume_from is not None:
        state.resume(resume_from)

    supervised = cfg.stage1.supervision != "none" and cfg.stage1.lambda1 != 0.0
    table = None
    if supervised:
        if cfg.stage1.supervision == "distill" and teacher_store is None:
            raise ValueError("distillation needs a precomputed teacher attention store")
        table = _supervision_table(dataset, "train", cfg.stage1, teacher_store)

    train_caps = dataset.captions["train"]
    k = dataset.config.regions_per_scene

    for epoch in range(state.start_epoch, sched.epochs):
        lr = sched.lr_at(epoch)
        state.set_lr(lr)
        perm = torch.randperm(len(train_caps), generator=state.gen).tolist()
        loss_sum, xe_sum, transfer_sum, seen = 0.0, 0.0, 0.0, 0
        for idx in _batches(perm, cfg.batch_size):
            caps = [train_caps[i] for i in idx]
            feats = _features_for(dataset, caps)
            tokens, lengths = _pad_batch(caps)
            rows = valid = None
            if table is not None:
                rows, valid = _supervision_tensors(caps, table, tokens.shape[1], k)
            loss, parts = stage1_loss_batch(
                model, feats, tokens, lengths, cfg.stage1, rows, valid
            )
            state.step(loss, epoch)
            loss_sum += float(loss.detach()) * len(caps)
            xe_sum += parts["xe"]
            transfer_sum += parts["transfer"]
            seen += len(caps)
        dumps = teacher_forced_dumps(model, dataset, "val")
        val_acc = attention_accuracy(dumps, dataset).accuracy
        state.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": loss_sum / seen,
                "train_xe": xe_sum / seen,
                "train_transfer": transfer_sum / seen,
                "val_xe": _val_xe(model, dataset, cfg.batch_size),
                "val_attention_accuracy": val_acc,
            }
        )
        _write_metrics(run_dir, STAGE1_METRICS, state.history)
        state.save(epoch + 1)

    if not (run_dir / FINAL_CKPT).exists():
        _write_metrics(run_dir, STAGE1_METRICS, state.history)
        state.save(state.start_epoch)
    return model


# -- stage 2: self-critical sequence training ------------------------------------

STAGE2_METRICS = ["epoch", "lr", "train_reward", "val_cider"]
REWARD_FIELDS = [
    "epoch",
    "batch",
    "sample_reward",
    "baseline_reward",
    "advantage",
    "cider_sample",
    "match_sample",
]


def _split_refs(dataset: Dataset, split: str) -> dict[str, list[list[int]]]:
    return {
        scene_id: [strip_wrap(c.tokens) for c in caps]
        for scene_id, caps in dataset.captions_by_scene(split).items()
    }


def _noun_token_ids(dataset: Dataset) -> frozenset[int]:
    return frozenset(
        dataset.vocab.word_to_id[w]
        for w in dataset.noun_lexicon
        if w in dataset.vocab.word_to_id
    )


def build_reward_fn(dataset: Dataset, cfg: ExperimentConfig) -> RewardFn:
    """Reward over train-split references, with the configured matcher term."""
    ctx = build_cider_context(_split_refs(dataset, "train")) if cfg.reward.use_cider else None
    matcher = None
    if cfg.reward.matcher != "none":
        if not cfg.reward.matcher_ckpt:
            raise ValueError("matcher-based reward needs reward.matcher_ckpt")
        matcher = load_matcher_checkpoint(cfg.reward.matcher_ckpt, dataset)
    return RewardFn(cfg.reward, ctx, matcher, _noun_token_ids(dataset))


def _val_greedy_cider(
    model: UpDownCaptioner, dataset: Dataset, batch_size: int, ctx: CiderContext | None = None
) -> float:
    if ctx is None:
        ctx = build_cider_context(_split_refs(dataset, "val"))
    scenes = dataset.scenes["val"]
    scores = []
    for chunk in _batches(scenes, batch_size):
        feats = torch.stack([as_double_tensor(s.features) for s in chunk])
        for scene, seq in zip(chunk, model.greedy_decode_batch(feats)):
            scores.append(ctx.score(scene.scene_id, strip_wrap(seq)))
    return float(np.mean(scores))


def train_stage2_scst(
    dataset: Dataset,
    cfg: ExperimentConfig,
    run_dir: str | Path,
    init_ckpt: str | Path,
    resume_from: str | Path | None = None,
) -> UpDownCaptioner:
    """Policy-gradient fine-tuning against the greedy-decode baseline.

    Starts from a stage-1 checkpoint with a fresh optimizer. Every batch logs
    one rewards.csv row; every epoch logs greedy-decode validation CIDEr.
    """
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    sched = cfg.stage2_train
    model = UpDownCaptioner(
        len(dataset.vocab), dataset.config.feature_dim, cfg.captioner, seed=cfg.seed
    )
    init_arrays, init_meta = load_checkpoint(init_ckpt)
    if init_meta.get("stage") not in ("captioner-xe", "captioner-scst"):
        raise ValueError(
            f"stage 2 must start from a captioner checkpoint, got {init_meta.get('stage')!r}"
        )
    load_model_arrays(model, init_arrays)
    state = _RunState("captioner-scst", model, cfg, run_dir, sched.lr)
    state.extra = {"reward_rows": []}
    if resume_from is not None:
        state.resume(resume_from)
    reward_rows: list[dict] = state.extra["reward_rows"]

    reward_fn = build_reward_fn(dataset, cfg)
    val_ctx = build_cider_context(_split_refs(dataset, "val"))
    scenes = dataset.scenes["train"]

    for epoch in range(state.start_epoch, sched.epochs):
        lr = sched.lr_at(epoch)
        state.set_lr(lr)
        perm = torch.randperm(len(scenes), generator=state.gen).tolist()
        reward_sum, seen = 0.0, 0
        for batch_no, idx in enumerate(_batches(perm, cfg.batch_size)):
            chunk = [scenes[i] for i in idx]
            feats = torch.stack([as_double_tensor(s.features) for s in chunk])
            seqs, logprobs, mask = model.sample_decode_batch(feats, state.gen)
            greedy = model.greedy_decode_batch(feats)
            sample_parts = [reward_fn.parts(s, seq) for s, seq in zip(chunk, seqs)]
            r_sample = [c + cfg.reward.lambda2 * m for c, m in sample_parts]
            r_greedy = [reward_fn(s, g) for s, g in zip(chunk, greedy)]
            adv = torch.tensor(r_sample, dtype=torch.float64) - torch.tensor(
                r_greedy, dtype=torch.float64
            )
            loss = (-adv * (logprobs * mask.to(logprobs.dtype)).sum(dim=1)).mean()
            state.step(loss, epoch)
            reward_sum += float(np.sum(r_sample))
            seen += len(chunk)
            reward_rows.append(
                {
                    "epoch": epoch,
                    "batch": batch_no,
                    "sample_reward": float(np.mean(r_sample)),
                    "baseline_reward": float(np.mean(r_greedy)),
                    "advantage": float(adv.mean()),
                    "cider_sample": float(np.mean([c for c, _ in sample_parts])),
                    "match_sample": float(np.mean([m for _, m in sample_parts])),
                }
            )
        state.history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_reward": reward_sum / seen,
                "val_cider": _val_greedy_cider(model, dataset, cfg.batch_size, val_ctx),
            }
        )
        _write_metrics(run_dir, STAGE2_METRICS, state.history)
        with (run_dir / "rewards.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REWARD_FIELDS)
            writer.writeheader()
            writer.writerows(reward_rows)
        state.save(epoch + 1)

    if not (run_dir / FINAL_CKPT).exists():
        _write_metrics(run_dir, STAGE2_METRICS, state.history)
        with (run_dir / "rewards.csv").open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=REWARD_FIELDS)
            writer.writeheader()
            writer.writerows(reward_rows)
        state.save(state.start_epoch)
    return model


# -- attention dumps and evaluation ----------------------------------------------


def _dump_row(token_index: int, weights: np.ndarray, scene) -> dict:
    best = int(np.argmax(weights))
    return {
        "token_index": token_index,
        "weights": [float(w) for w in weights],
        "argmax_region": best,
        "box": scene.boxes[best].as_list(),
    }


def teacher_forced_dumps(
    model: UpDownCaptioner, dataset: Dataset, split: str, batch_size: int = 64
) -> list[dict]:
    """Decoder attention on ground-truth captions: rows for token indices 1..n-1."""
    dumps = []
    with torch.no_grad():
        for caps in _batches(dataset.captions[split], batch_size):
            feats = _features_for(dataset, caps)
            tokens, lengths = _pad_batch(caps)
            _, betas, _ = model.teacher_forced_batch(feats, tokens, lengths)
            for b, cap in enumerate(caps):
                scene = dataset.scene(cap.scene_id)
                rows = [
                    _dump_row(i, betas[b, i - 1].numpy(), scene)
                    for i in range(1, len(cap.tokens))
                ]
                dumps.append(
                    {
                        "caption_id": cap.caption_id,
                        "scene_id": cap.scene_id,
                        "tokens": list(cap.tokens),
                        "rows": rows,
                    }
                )
    return dumps


def decoded_dumps(
    model: UpDownCaptioner, dataset: Dataset, split: str, beam_size: int = 1
) -> list[dict]:
    """One decode per scene. Beam decodes carry no attention rows."""
    dumps = []
    for scene in dataset.scenes[split]:
        if beam_size == 1:
            tokens, att = model.greedy_decode(scene.features)
            rows = [_dump_row(i, att.weights[i - 1], scene) for i in range(1, len(tokens))]
        else:
            tokens = model.beam_search(scene.features, beam_size)
            rows = []
        dumps.append(
            {
                "caption_id": f"{scene.scene_id}#decoded",
                "scene_id": scene.scene_id,
                "tokens": list(tokens),
                "rows": rows,
            }
        )
    return dumps


def matcher_dumps(matcher: Matcher, dataset: Dataset, split: str) -> list[dict]:
    """Matcher attention on ground-truth captions: one row per token index."""
    dumps = []
    for cap in dataset.captions[split]:
        scene = dataset.scene(cap.scene_id)
        att = matcher.attention(scene.features, cap.tokens)
        rows = [_dump_row(i, att.weights[i], scene) for i in range(len(cap.tokens))]
        dumps.append(
            {
                "caption_id": cap.caption_id,
                "scene_id": cap.scene_id,
                "tokens": list(cap.tokens),
                "rows": rows,
            }
        )
    return dumps


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


REPORT_FIELDS = [
    "split",
    "num_scenes",
    "B1",
    "B4",
    "M",
    "C",
    "S",
    "F1_all",
    "F1_loc",
    "attention_accuracy",
    "attention_correct",
    "attention_total",
]


def evaluate_split(
    model: UpDownCaptioner,
    dataset: Dataset,
    split: str,
    run_dir: str | Path,
    beam_size: int = 1,
) -> dict:
    """Decode a split, write eval artifacts, and return the metric record.

    Grounding metrics are only computed for beam_size=1 decodes, which carry
    one attention row per generated token.
    """
    run_dir = Path(run_dir)
    eval_dir = run_dir / f"eval-{split}"
    write_jsonl(eval_dir / "decoded.jsonl", decoded_dumps(model, dataset, split, beam_size))
    write_jsonl(eval_dir / "teacher_forced.jsonl", teacher_forced_dumps(model, dataset, split))
    report = full_report(run_dir, dataset, split, grounding=beam_size == 1)
    with (eval_dir / "report.json").open("w") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    with (eval_dir / "report.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        writer.writeheader()
        writer.writerow({k: ("" if report[k] is None else report[k]) for k in REPORT_FIELDS})
    return report
