"""Training orchestration: segments, mini-batch streams, stages, curriculum.

Stages, in curriculum order:

``dpcl_pretrain_100``  affinity cost on 100-frame segments
``dpcl_400``           affinity cost on 400-frame segments, from the pretrained model
``enh_only``           enhancement loss, embedding network frozen
``end_to_end``         enhancement loss through soft clustering into the embeddings

Every stage uses rmsprop with the halving schedule (epoch counter restarts
per stage), global-norm clipping and early stopping on the validation cost;
the validation-best parameters are returned.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import signal
from .model import (
    Model,
    ModelConfig,
    dpcl_loss,
    init_model_params,
    make_batch,
    signal_loss,
    utterance_arrays,
)
from .enhance import init_enhance_params
from .nnet.optim import RMSprop, clip_gradient

log = logging.getLogger(__name__)

STAGES = ("dpcl_pretrain_100", "dpcl_400", "enh_only", "end_to_end")
DPCL_STAGES = ("dpcl_pretrain_100", "dpcl_400")
STAGE_SEGMENT_LEN = {"dpcl_pretrain_100": 100, "dpcl_400": 400, "enh_only": 400, "end_to_end": 400}


class StagePrerequisiteError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "dpcl_pretrain_100"
    segment_len: int = 100
    batch_size: int = 16
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    max_grad_norm: float = 200.0
    dpcl_weight: float = 0.0
    allow_skip_pretrain: bool = False
    blend: dict | None = None  # speaker count -> weight; None = equal over available corpora
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if self.segment_len < 1 or self.batch_size < 1:
            raise ValueError("segment_len and batch_size must be positive")
        if self.blend is not None:
            w = list(self.blend.values())
            if not w or min(w) < 0 or sum(w) <= 0:
                raise ValueError("blend weights must be non-negative and not all zero")

    def blend_for(self, available) -> dict:
        return dict(self.blend) if self.blend is not None else {C: 1.0 for C in sorted(available)}


@dataclass
class TrainLog:
    stage: str
    epochs: list = field(default_factory=list)
    train_cost: list = field(default_factory=list)
    valid_cost: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    wall_time: list = field(default_factory=list)
    best_epoch: int = -1
    notes: list = field(default_factory=list)

    def append(self, epoch, train_cost, valid_cost, lr, wall):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("epochs must be strictly increasing")
        self.epochs.append(epoch)
        self.train_cost.append(train_cost)
        self.valid_cost.append(valid_cost)
        self.lr.append(lr)
        self.wall_time.append(wall)

    def write(self, path) -> None:
        """Deterministic TSV; wall-clock times go to a ``.timing.tsv`` sidecar."""
        path = Path(path)
        lines = [f"# stage={self.stage}\tbest_epoch={self.best_epoch}" + "".join(f"\tnote={n}" for n in self.notes),
                 "epoch\ttrain_cost\tvalid_cost\tlr"]
        lines += [f"{e}\t{t!r}\t{v!r}\t{lr!r}" for e, t, v, lr in
                  zip(self.epochs, self.train_cost, self.valid_cost, self.lr)]
        path.write_text("\n".join(lines) + "\n")
        timing = path.with_name(path.name.removesuffix(".tsv") + ".timing.tsv")
        timing.write_text("epoch\twall_time_s\n" + "".join(f"{e}\t{w:.3f}\n" for e, w in zip(self.epochs, self.wall_time)))

    @classmethod
    def read(cls, path) -> TrainLog:
        lines = Path(path).read_text().splitlines()
        head = dict(item.split("=", 1) for item in lines[0][2:].split("\t") if "=" in item)
        out = cls(stage=head["stage"], best_epoch=int(head["best_epoch"]))
        out.notes = [item.split("=", 1)[1] for item in lines[0][2:].split("\t") if item.startswith("note=")]
        for line in lines[2:]:
            e, t, v, lr = line.split("\t")
            out.append(int(e), float(t), float(v), float(lr), float("nan"))
        return out


# -- config files -----------------------------------------------------------

def _coerce(value: str, kind):
    if kind in (bool, "bool"):
        v = value.strip().lower()
        if v not in ("1", "true", "yes", "on", "0", "false", "no", "off"):
            raise ValueError(f"not a boolean: {value!r}")
        return v in ("1", "true", "yes", "on")
    if kind in (int, "int"):
        return int(value)
    if kind in (float, "float"):
        return float(value)
    return value.strip()


def _parse_blend(value: str) -> dict:
    out = {}
    for part in value.split(","):
        c, w = part.split(":")
        out[int(c)] = float(w)
    return out


def load_curriculum_config(path):
    """Read ``key = value`` lines into ``(TrainConfig, stage_overrides)``.

    ``model.<field>`` keys configure the model; ``<stage>.<field>`` keys
    override TrainConfig fields for a single curriculum stage.
    """
    top = {f.name: f.type for f in fields(TrainConfig)}
    model_types = {f.name: f.type for f in fields(ModelConfig)}
    kw, model_kw, overrides = {}, {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        scope, _, name = key.rpartition(".")
        try:
            if scope == "model" and name in model_types:
                model_kw[name] = _coerce(value, model_types[name])
            elif scope in STAGES and name in top and name not in ("model", "stage", "blend"):
                overrides.setdefault(scope, {})[name] = _coerce(value, top[name])
            elif not scope and key == "blend":
                kw["blend"] = _parse_blend(value)
            elif not scope and key in top and key != "model":
                kw[key] = _coerce(value, top[key])
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return TrainConfig(model=ModelConfig(**model_kw), **kw), overrides


def load_train_config(path) -> TrainConfig:
    cfg, overrides = load_curriculum_config(path)
    if overrides:
        raise ValueError(f"{path}: per-stage keys need load_curriculum_config")
    return cfg


def save_train_config(path, cfg: TrainConfig, overrides: dict | None = None) -> None:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(cfg, f.name)
        if f.name == "model":
            lines += [f"model.{k} = {v}" for k, v in dataclasses.asdict(value).items()]
        elif f.name == "blend":
            if value is not None:
                lines.append("blend = " + ",".join(f"{c}:{w!r}" for c, w in sorted(value.items())))
        else:
            lines.append(f"{f.name} = {value}")
    for stage in STAGES:
        for k, v in (overrides or {}).get(stage, {}).items():
            lines.append(f"{stage}.{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


# -- data -------------------------------------------------------------------

def segment_utterance(features, targets, weights, segment_len: int, **extra) -> list[dict]:
    """Cut time-major arrays into consecutive non-overlapping segments.

    A trailing remainder of at least ``segment_len / 2`` frames is kept and
    zero-padded (padding gets zero weight); shorter remainders are dropped.
    Returns dicts with keys ``feats``, ``Y``, ``w``, ``length`` and ``extra``'s keys.
    """
    if segment_len < 1:
        raise ValueError("segment_len must be positive")
    arrays = {"feats": np.asarray(features), "Y": np.asarray(targets), "w": np.asarray(weights)}
    arrays.update({k: np.asarray(v) for k, v in extra.items()})
    T = arrays["feats"].shape[0]
    segments = []
    for start in range(0, T, segment_len):
        length = min(segment_len, T - start)
        if length < segment_len and 2 * length < segment_len:
            break
        seg = {"length": length}
        for key, arr in arrays.items():
            piece = arr[start : start + length]
            if length < segment_len:
                pad = np.zeros((segment_len - length,) + arr.shape[1:], dtype=arr.dtype)
                piece = np.concatenate([piece, pad])
            seg[key] = piece
        segments.append(seg)
    return segments


@dataclass
class CorpusData:
    """Prepared utterances keyed by speaker count, plus the feature statistics."""

    train: dict
    valid: dict
    stats: signal.GlobalStats
    scfg: signal.SignalConfig = signal.SignalConfig()


def render_utterances(manifest: corpus_mod.MixtureManifest, scfg: signal.SignalConfig, base_dir=None):
    out = []
    for entry in manifest.entries:
        mix, refs = corpus_mod.render_mixture(entry, scfg, base_dir)
        out.append((entry.mixture_id, mix, refs))
    return out


def prepare_corpus(train: dict, valid: dict, scfg: signal.SignalConfig = signal.SignalConfig(),
                   silence_db: float = -40.0, stats: signal.GlobalStats | None = None) -> CorpusData:
    """Feature arrays for rendered utterances ``{C: [(id, mixture, refs), ...]}``.

    Global statistics are fitted on the training log magnitudes unless given.
    """
    def arrays(items):
        return [dict(utterance_arrays(mix, refs, None, scfg, silence_db), mixture_id=mid) for mid, mix, refs in items]

    tr = {C: arrays(items) for C, items in train.items()}
    va = {C: arrays(items) for C, items in valid.items()}
    if stats is None:
        stats = signal.fit_global_stats([u["logmag"] for us in tr.values() for u in us])
    for us in list(tr.values()) + list(va.values()):
        for u in us:
            u["feats"] = signal.apply_global_mvn(u["logmag"], stats)
    return CorpusData(tr, va, stats, scfg)


def corpus_segments(utterances: list[dict], segment_len: int) -> list[dict]:
    segs = []
    for u in utterances:
        segs += segment_utterance(u["feats"], u["Y"], u["w"], segment_len,
                                  mix_mag=u["mix_mag"], ref_mag=u["ref_mag"])
    # padding rows already carry zero weight; segments need some active bins
    return [s for s in segs if s["w"].sum() >= 2 * s["Y"].shape[-1]]


def blend_corpora(corpora: list, weights, batch_size: int, seed: int):
    """Endless stream of ``(corpus_index, segments)`` mini-batches.

    Each batch comes from one corpus, chosen with probability proportional to
    ``weights``. Every corpus reshuffles its own segments on each pass; the
    corpus choice uses a separate random stream so a zero-weight corpus does
    not perturb the others.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(corpora),) or (weights < 0).any() or weights.sum() <= 0:
        raise ValueError("weights must be non-negative, one per corpus, not all zero")
    chooser = np.random.default_rng([seed, 0])
    shufflers = [np.random.default_rng([seed, 1, k]) for k in range(len(corpora))]
    orders = [np.array([], dtype=np.int64) for _ in corpora]
    probs = weights / weights.sum()
    while True:
        k = int(chooser.choice(len(corpora), p=probs)) if len(corpora) > 1 else 0
        while len(orders[k]) < batch_size:
            orders[k] = np.concatenate([orders[k], shufflers[k].permutation(len(corpora[k]))])
        take, orders[k] = orders[k][:batch_size], orders[k][batch_size:]
        yield k, [corpora[k][i] for i in take]


# -- stages -----------------------------------------------------------------

def _stage_loss(stage, params, batch, cfg: TrainConfig, rng, seed, need_grad):
    if stage in DPCL_STAGES:
        return dpcl_loss(params, batch, cfg.model, rng, need_grad)
    return signal_loss(params, batch, cfg.model, rng, seed, train_embedding=(stage == "end_to_end"),
                       need_grad=need_grad, dpcl_weight=cfg.dpcl_weight)


def _check_prerequisites(cfg: TrainConfig, start: Model | None):
    stages = set(start.meta.get("stages", [])) if start is not None else set()
    if cfg.stage == "dpcl_400" and "dpcl_pretrain_100" not in stages and not cfg.allow_skip_pretrain:
        raise StagePrerequisiteError("dpcl_400 needs a dpcl_pretrain_100 checkpoint (or allow_skip_pretrain)")
    if cfg.stage == "enh_only" and not stages & set(DPCL_STAGES):
        raise StagePrerequisiteError("enh_only needs a trained deep clustering checkpoint")
    if cfg.stage == "end_to_end" and not (stages & set(DPCL_STAGES) and "enh_only" in stages):
        raise StagePrerequisiteError("end_to_end needs deep clustering and enh_only checkpoints")


def _validation_batches(data: CorpusData, cfg: TrainConfig):
    batches = []
    for C, w in sorted(cfg.blend_for(data.train).items()):
        if w <= 0 or C not in data.valid:
            continue
        segs = corpus_segments(data.valid[C], cfg.segment_len)
        for i in range(0, len(segs), cfg.batch_size):
            batches.append(make_batch(segs[i : i + cfg.batch_size]))
    return batches


def run_stage(cfg: TrainConfig, data: CorpusData, start: Model | None = None):
    """Train one stage; returns ``(best_model, optimizer, TrainLog)``."""
    _check_prerequisites(cfg, start)
    rng = np.random.default_rng([cfg.seed, STAGES.index(cfg.stage)])
    trainlog = TrainLog(stage=cfg.stage)
    if start is None:
        params = init_model_params(cfg.model, rng, with_enhancer=False)
        meta = {"stages": []}
        stats = data.stats
        if cfg.stage == "dpcl_400":
            trainlog.notes.append("non-curriculum")
    else:
        params = start.params.copy()
        meta = {**start.meta, "stages": list(start.meta.get("stages", []))}
        stats = start.stats
    if cfg.stage == "enh_only" and "enh.out.W" not in params:
        init_enhance_params(cfg.model.enh_net, rng, params)

    blend = cfg.blend_for(data.train)
    counts = sorted(C for C, w in blend.items() if w > 0)
    missing = [C for C in counts if C not in data.train]
    if missing:
        raise ValueError(f"no training data for speaker counts {missing}")
    corpora = [corpus_segments(data.train[C], cfg.segment_len) for C in counts]
    stream = blend_corpora(corpora, [blend[C] for C in counts], cfg.batch_size, cfg.seed)
    n_batches = math.ceil(sum(len(c) for c in corpora) / cfg.batch_size)
    valid = _validation_batches(data, cfg)
    if not valid:
        raise ValueError("no validation segments")

    opt = RMSprop()
    best, best_params, wait = math.inf, params.copy(), 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        opt.epoch = epoch
        costs = []
        for step in range(n_batches):
            _, segs = next(stream)
            batch = make_batch(segs)
            seed = int(rng.integers(2**31))
            loss, grads = _stage_loss(cfg.stage, params, batch, cfg, rng, seed, True)
            opt.step(params, clip_gradient(grads, cfg.max_grad_norm))
            costs.append(loss)
        vcost = float(np.mean([_stage_loss(cfg.stage, params, b, cfg, None, 1000 + i, False)[0]
                               for i, b in enumerate(valid)]))
        tcost = float(np.mean(costs))
        trainlog.append(epoch, tcost, vcost, opt.lr, time.perf_counter() - t0)
        log.info("%s epoch %d train %.5f valid %.5f lr %.2e", cfg.stage, epoch, tcost, vcost, opt.lr)
        if vcost < best:
            best, best_params, wait = vcost, params.copy(), 0
            trainlog.best_epoch = epoch
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    meta["stages"].append(cfg.stage)
    if cfg.stage in ("enh_only", "end_to_end"):
        meta["enh_sources"] = sorted(set(meta.get("enh_sources", [])) | set(counts))
    return Model(cfg.model, best_params, stats, data.scfg, meta), opt, trainlog


def curriculum(base: TrainConfig, data: CorpusData, out_dir, overrides: dict | None = None,
               skip_pretrain: bool = False) -> dict:
    """Run every stage in order, threading checkpoints; returns ``{stage: Model}``.

    ``overrides`` maps a stage name to TrainConfig field overrides. Each stage
    writes ``<stage>.ckpt`` and ``<stage>.log.tsv`` under ``out_dir``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    overrides = overrides or {}
    models = {}
    current = None
    for stage in STAGES:
        if skip_pretrain and stage == "dpcl_pretrain_100":
            continue
        kw = {"segment_len": STAGE_SEGMENT_LEN[stage], **overrides.get(stage, {})}
        if stage == "dpcl_400" and skip_pretrain:
            kw["allow_skip_pretrain"] = True
        cfg = replace(base, stage=stage, **kw)
        current, opt, trainlog = run_stage(cfg, data, current)
        current.save(out / f"{stage}.ckpt", opt)
        trainlog.write(out / f"{stage}.log.tsv")
        models[stage] = current
    return models
