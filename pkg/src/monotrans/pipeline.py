"""Orchestration of the 3-stage recipe: data prep, CTC alignment, staged
training, N-best building, decoding, evaluation, and scale tuning.

Everything is driven by a flat key-value config (see CONFIG_SCHEMA) and is
bitwise-reproducible given the config's seeds.
"""

from __future__ import annotations

import os
import warnings
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import ctc as ctc_mod
from . import dataio, lm as lm_mod, mbr as mbr_mod
from .decoder import DecodeConfig, beam_decode, exhaustive_decode, format_decode_lines, words_and_pending
from .losses import LossWeights, StageResult, stage1_total, stage2_fs_loss
from .model import ModelConfig, TransducerModel
from .optim_sched import OptimizerState, ScheduleSpec, lr_at, step_update
from .oracles import ctc_logprob_by_enumeration, fullsum_by_enumeration
from .topology import fullsum


def derive_seed(*parts) -> int:
    norm = [zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in parts]
    return int(np.random.SeedSequence(norm).generate_state(1)[0])


# --------------------------------------------------------------------- config

CONFIG_VERSION = "#config v1"

CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 2024),
    "workdir": (str, "work"),
    # synthetic corpus
    "data.vocab": (int, 10),
    "data.n_train": (int, 2000),
    "data.n_dev": (int, 200),
    "data.n_test": (int, 200),
    "data.min_labels": (int, 3),
    "data.max_labels": (int, 8),
    "data.min_frames_per_label": (int, 1),
    "data.max_frames_per_label": (int, 3),
    "data.feat_dim": (int, 8),
    "data.noise_sigma": (float, 0.3),
    "data.filter_max_frames": (int, 60),
    "data.filter_max_labels": (int, 16),
    # language models (trained on the train transcripts)
    "lm.order": (int, 3),
    "lm.discount": (float, 0.4),
    # transducer model
    "model.context_k": (int, 1),
    "model.enc_layers": (int, 2),
    "model.enc_dim": (int, 16),
    "model.enc_window": (int, 3),
    "model.pred_dim": (int, 8),
    "model.joint_dim": (int, 16),
    "model.subsample": (int, 1),
    "model.dropout": (float, 0.1),
    "model.aux_middle_layer": (int, 0),
    # alignment CTC model
    "ctc.hidden_dim": (int, 12),
    "ctc.layers": (int, 1),
    "ctc.window": (int, 5),
    "ctc.epochs": (int, 4),
    "ctc.lr_peak": (float, 8e-4),
    # loss weights
    "loss.label_smooth": (float, 0.2),
    "loss.boost_scale": (float, 5.0),
    "loss.focal_gamma": (float, 1.0),
    "loss.middle_scale": (float, 0.3),
    "loss.fs_aux_scale": (float, 0.05),
    "loss.clip_norm": (float, 20.0),
    # training
    "train.epochs_stage1": (int, 20),
    "train.epochs_stage2": (int, 10),
    "train.epochs_stage3": (int, 2),
    "train.batch_frames": (int, 2000),
    "train.micro_batch": (int, 0),
    "train.lr_peak_stage1": (float, 8e-4),
    "train.lr_peak_stage2": (float, 5e-5),
    "train.constant_lr": (float, 1e-5),
    "train.lr_final": (float, 1e-6),
    "train.l2": (float, 5e-6),
    "train.dropout": (float, -1.0),  # >= 0 overrides model.dropout for this run
    "train.chunk_window": (int, 0),
    "train.select_by": (str, "loss"),
    "train.mask_time": (int, 1),
    "train.mask_feat": (int, 1),
    "train.mask_time_width": (int, 2),
    "train.mask_feat_width": (int, 1),
    # static N-best generation
    "nbest.n": (int, 4),
    "nbest.subset_fraction": (float, 0.25),
    "nbest.seed": (int, 17),
    "nbest.beam_size": (int, 8),
    "nbest.lam1": (float, 0.5),
    # stage-3 scales (lam1 <= 0 means: reuse the N-best store's lam1)
    "mbr.lam1": (float, -1.0),
    "mbr.beta": (float, -1.0),  # <= 0 means 1/lam1
    # decoding
    "decode.lam1": (float, 0.0),
    "decode.lam2": (float, 0.0),
    "decode.beam_size": (int, 8),
    "decode.n_best": (int, 1),
}


def default_config() -> dict:
    return {k: v for k, (_, v) in CONFIG_SCHEMA.items()}


def _parse_value(key: str, raw: str):
    typ = CONFIG_SCHEMA[key][0]
    if typ is bool:
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    return typ(raw)


def _check_key(key: str):
    if key not in CONFIG_SCHEMA:
        known = ", ".join(sorted(CONFIG_SCHEMA))
        raise KeyError(f"unknown config key {key!r}; valid keys: {known}")


def parse_config_file(path) -> dict:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    cfg = default_config()
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().strip()
        if first != CONFIG_VERSION:
            raise ValueError(f"{path}: expected first line {CONFIG_VERSION!r}, got {first!r}")
        for ln, line in enumerate(fh, start=2):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected 'key = value'")
            key, _, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            _check_key(key)
            cfg[key] = _parse_value(key, raw)
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        _check_key(key)
        cfg[key] = _parse_value(key, raw.strip())
    return cfg


def write_config(path, cfg: dict):
    lines = [CONFIG_VERSION] + [f"{k} = {cfg[k]}" for k in sorted(cfg)]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------- workspace


@dataclass
class Workspace:
    root: str

    def path(self, *parts) -> str:
        return os.path.join(self.root, *parts)

    @property
    def data_dir(self):
        return self.path("data")

    @property
    def lm_recog(self):
        return self.path("lm", "recog.lm")

    @property
    def lm_gen(self):
        return self.path("lm", "gen.lm")

    @property
    def ctc_ckpt(self):
        return self.path("ctc", "ctc.ckpt")

    def align_file(self, split):
        return self.path("align", f"{split}.align")

    def stage_dir(self, stage):
        return self.path(stage)

    def best_ckpt(self, stage):
        return self.path(stage, "best.ckpt")

    def last_ckpt(self, stage):
        return self.path(stage, "last.ckpt")

    def metrics_file(self, stage):
        return self.path(stage, "metrics.tsv")

    @property
    def nbest_file(self):
        return self.path("nbest", "train.nbest")

    @property
    def risk_file(self):
        return self.path("stage3", "risk.tsv")


def _require(path, what, hint):
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {what}: {path} (run `{hint}` first)")


def synthetic_spec_from(cfg) -> dataio.SyntheticSpec:
    return dataio.SyntheticSpec(
        seed=cfg["seed"],
        vocab=cfg["data.vocab"],
        n_train=cfg["data.n_train"],
        n_dev=cfg["data.n_dev"],
        n_test=cfg["data.n_test"],
        min_labels=cfg["data.min_labels"],
        max_labels=cfg["data.max_labels"],
        min_frames_per_label=cfg["data.min_frames_per_label"],
        max_frames_per_label=cfg["data.max_frames_per_label"],
        feat_dim=cfg["data.feat_dim"],
        noise_sigma=cfg["data.noise_sigma"],
    )


def model_config_from(cfg) -> ModelConfig:
    return ModelConfig(
        V=cfg["data.vocab"],
        feat_dim=cfg["data.feat_dim"],
        context_k=cfg["model.context_k"],
        enc_layers=cfg["model.enc_layers"],
        enc_dim=cfg["model.enc_dim"],
        enc_window=cfg["model.enc_window"],
        pred_dim=cfg["model.pred_dim"],
        joint_dim=cfg["model.joint_dim"],
        subsample=cfg["model.subsample"],
        dropout=cfg["model.dropout"],
        aux_middle_layer=cfg["model.aux_middle_layer"],
    )


def loss_weights_from(cfg) -> LossWeights:
    return LossWeights(
        label_smooth=cfg["loss.label_smooth"],
        boost_scale=cfg["loss.boost_scale"],
        focal_gamma=cfg["loss.focal_gamma"],
        middle_scale=cfg["loss.middle_scale"],
        fs_aux_scale=cfg["loss.fs_aux_scale"],
        clip_norm=cfg["loss.clip_norm"],
    )


def decode_config_from(cfg) -> DecodeConfig:
    return DecodeConfig(
        lam1=cfg["decode.lam1"],
        lam2=cfg["decode.lam2"],
        beam_size=cfg["decode.beam_size"],
        n_best=cfg["decode.n_best"],
    )


# ------------------------------------------------------------------ gen-data


def run_gen_data(cfg) -> dict:
    ws = Workspace(cfg["workdir"])
    spec = synthetic_spec_from(cfg)
    splits = dataio.generate(spec)
    dataio.save_dataset(ws.data_dir, splits, spec.feat_dim)
    os.makedirs(ws.path("lm"), exist_ok=True)
    corpus = [[str(x) for x in u.labels] for u in splits["train"]]
    recog = lm_mod.train_ngram(corpus, cfg["lm.order"], cfg["lm.discount"])
    gen = lm_mod.train_ngram(corpus, max(cfg["lm.order"] - 1, 1), cfg["lm.discount"])
    lm_mod.write_ngram(ws.lm_recog, recog)
    lm_mod.write_ngram(ws.lm_gen, gen)
    return {split: len(utts) for split, utts in splits.items()}


# -------------------------------------------------------------- batching core


def make_epoch_batches(n_utts: int, frame_counts, batch_frames: int, seed: int, epochs: int):
    """Deterministic per-epoch shuffles grouped greedily by a frame budget."""
    all_batches = []
    for ep in range(epochs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 90, ep]))
        order = rng.permutation(n_utts)
        batches, cur, cur_frames = [], [], 0
        for idx in order:
            f = frame_counts[idx]
            if cur and cur_frames + f > batch_frames:
                batches.append(cur)
                cur, cur_frames = [], 0
            cur.append(int(idx))
            cur_frames += f
        if cur:
            batches.append(cur)
        all_batches.append(batches)
    return all_batches


class MetricsLog:
    """One line per epoch, tab separated: epoch, train_loss, dev_loss, lr."""

    def __init__(self, path):
        os.makedirs(os.path.dirname(path), exist_ok=True)
        self.path = path
        open(path, "w").close()

    def append(self, epoch, train_loss, dev_loss, lr):
        with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
            fh.write(f"{epoch}\t{'%.17g' % train_loss}\t{'%.17g' % dev_loss}\t{'%.17g' % lr}\n")


def _masked_feats(cfg, feats, seed):
    return dataio.mask_augment(
        feats,
        cfg["train.mask_time"],
        cfg["train.mask_feat"],
        seed,
        time_width=cfg["train.mask_time_width"],
        feat_width=cfg["train.mask_feat_width"],
    )


# ------------------------------------------------------------------ train-ctc


def run_train_ctc(cfg) -> float:
    ws = Workspace(cfg["workdir"])
    _require(ws.data_dir, "dataset", "monotrans gen-data")
    data = dataio.load_dataset(ws.data_dir)
    train, dev = data["train"], data["dev"]
    ctc_cfg = ctc_mod.CtcModelConfig(
        V=cfg["data.vocab"],
        feat_dim=cfg["data.feat_dim"],
        hidden_dim=cfg["ctc.hidden_dim"],
        layers=cfg["ctc.layers"],
        window=cfg["ctc.window"],
        subsample=cfg["model.subsample"],
    )
    model = ctc_mod.CtcAlignModel.create(ctc_cfg, seed=derive_seed(cfg["seed"], 10))
    frames = [u.T for u in train]
    epochs = cfg["ctc.epochs"]
    batches = make_epoch_batches(len(train), frames, cfg["train.batch_frames"], derive_seed(cfg["seed"], 11), epochs)
    total_steps = max(sum(len(b) for b in batches), 1)
    sched = ScheduleSpec(kind="oclr_stage1", lr_peak=cfg["ctc.lr_peak"], lr_final=cfg["train.lr_final"], total_steps=total_steps)
    opt = OptimizerState(l2=cfg["train.l2"])
    log = MetricsLog(ws.path("ctc", "metrics.tsv"))

    def batch_loss(utts, update, lr):
        model.store.zero_grads()
        n = len(utts)
        total, skipped = 0.0, 0
        for u in utts:
            rows, cache = model.forward(u.feats)
            lp, grad = ctc_mod.ctc_fullsum(rows, u.labels)
            if not np.isfinite(lp):
                skipped += 1
                continue
            total += -lp
            model.backward(cache, -grad / n)
        if update:
            step_update(model.store, opt, lr)
        return total / n, skipped

    step = 0
    dev_loss = float("nan")
    for ep in range(epochs):
        ep_loss, n_batches = 0.0, 0
        for batch_idx in batches[ep]:
            lr = lr_at(sched, step)
            loss, _ = batch_loss([train[i] for i in batch_idx], update=True, lr=lr)
            ep_loss += loss
            n_batches += 1
            step += 1
        dev_loss, _ = batch_loss(dev, update=False, lr=0.0)
        log.append(ep + 1, ep_loss / max(n_batches, 1), dev_loss, lr_at(sched, min(step, total_steps)))
    model.save(ws.ctc_ckpt)
    return dev_loss


# ---------------------------------------------------------------------- align


def run_align(cfg) -> dict:
    ws = Workspace(cfg["workdir"])
    _require(ws.ctc_ckpt, "alignment CTC checkpoint", "monotrans train-ctc")
    model = ctc_mod.CtcAlignModel.load(ws.ctc_ckpt)
    data = dataio.load_dataset(ws.data_dir)
    os.makedirs(ws.path("align"), exist_ok=True)
    counts = {}
    for split in ("train", "dev"):
        alignments = {}
        failed = 0
        for u in data[split]:
            rows, _ = model.forward(u.feats)
            try:
                fa = ctc_mod.ctc_viterbi_align(rows, u.labels)
            except ValueError:
                failed += 1
                continue
            alignments[u.id] = ctc_mod.to_transducer_alignment(fa)
        ctc_mod.write_alignments(ws.align_file(split), alignments, blank=cfg["data.vocab"])
        counts[split] = (len(alignments), failed)
    return counts


# ---------------------------------------------------------------- run_stage


def _dev_loss_stage1(model, dev, dev_aligns, weights):
    batch = [(u.feats, dev_aligns.get(u.id)) for u in dev]
    res = stage1_total(model, batch, weights, train_mode=False)
    model.store.zero_grads()
    return res.loss


def _dev_loss_fs(model, dev):
    batch = [(u.feats, u.labels) for u in dev]
    res = stage2_fs_loss(model, batch, train_mode=False)
    model.store.zero_grads()
    return res.loss


def run_stage(cfg, stage: str) -> dict:
    """Train one pipeline stage; emits best (by dev loss) and last checkpoints
    plus an append-only metrics log. Prerequisite artifacts are checked up
    front and named in the error when missing."""
    if stage == "ctc":
        dev = run_train_ctc(cfg)
        return {"dev_loss": dev}
    if stage not in ("stage1", "stage2", "stage3"):
        raise ValueError(f"unknown stage {stage!r}")
    ws = Workspace(cfg["workdir"])
    _require(ws.data_dir, "dataset", "monotrans gen-data")
    data = dataio.load_dataset(ws.data_dir)
    train, dev = data["train"], data["dev"]
    weights = loss_weights_from(cfg)
    seed = cfg["seed"]

    if stage == "stage1":
        _require(ws.align_file("train"), "train alignments", "monotrans align")
        _require(ws.align_file("dev"), "dev alignments", "monotrans align")
        model = TransducerModel.create(model_config_from(cfg), seed=derive_seed(seed, 20))
        sched_kind, lr_peak, epochs = "oclr_stage1", cfg["train.lr_peak_stage1"], cfg["train.epochs_stage1"]
    elif stage == "stage2":
        _require(ws.best_ckpt("stage1"), "stage-1 checkpoint", "monotrans train --stage stage1")
        model = TransducerModel.load(ws.best_ckpt("stage1"))
        sched_kind, lr_peak, epochs = "oclr_stage2", cfg["train.lr_peak_stage2"], cfg["train.epochs_stage2"]
    else:
        _require(ws.best_ckpt("stage2"), "stage-2 checkpoint", "monotrans train --stage stage2")
        _require(ws.nbest_file, "N-best store", "monotrans build-nbest")
        model = TransducerModel.load(ws.best_ckpt("stage2"))
        sched_kind, lr_peak, epochs = "constant", cfg["train.constant_lr"], cfg["train.epochs_stage3"]

    if cfg["train.dropout"] >= 0:
        model.cfg.dropout = cfg["train.dropout"]
    # normalization-freeze hook: the toy encoder has no BatchNorm, so freezing
    # its statistics from stage 2 on is a no-op kept for architectural parity
    model.frozen_norm_stats = stage in ("stage2", "stage3")

    if stage == "stage3":
        return _run_stage3(cfg, ws, model, train, dev, weights, epochs)

    train_aligns = ctc_mod.read_alignments(ws.align_file("train")) if stage == "stage1" else {}
    dev_aligns = ctc_mod.read_alignments(ws.align_file("dev")) if stage == "stage1" else {}

    frames = [u.T for u in train]
    batches = make_epoch_batches(len(train), frames, cfg["train.batch_frames"], derive_seed(seed, 30, stage), epochs)
    total_steps = max(sum(len(b) for b in batches), 1)
    sched = ScheduleSpec(kind=sched_kind, lr_peak=lr_peak, lr_final=cfg["train.lr_final"], total_steps=total_steps)
    opt = OptimizerState(l2=cfg["train.l2"])
    log = MetricsLog(ws.metrics_file(stage))
    os.makedirs(ws.stage_dir(stage), exist_ok=True)

    def dev_loss():
        if stage == "stage1":
            return _dev_loss_stage1(model, dev, dev_aligns, weights)
        return _dev_loss_fs(model, dev)

    best = dev_loss() if epochs == 0 else float("inf")
    model.save(ws.best_ckpt(stage))
    step = 0
    n_skipped = 0
    for ep in range(epochs):
        ep_loss, nb = 0.0, 0
        for bi, batch_idx in enumerate(batches[ep]):
            lr = lr_at(sched, step)
            items, seeds = [], []
            for j, i in enumerate(batch_idx):
                u = train[i]
                feats = _masked_feats(cfg, u.feats, derive_seed(seed, 40, ep, i))
                if stage == "stage1":
                    items.append((feats, train_aligns.get(u.id)))
                else:
                    items.append((feats, u.labels))
                seeds.append(derive_seed(seed, 41, ep, i))
            if stage == "stage1":
                res = stage1_total(
                    model, items, weights, train_mode=True, dropout_seeds=seeds,
                    chunk_window=cfg["train.chunk_window"],
                )
            else:
                micro = cfg["train.micro_batch"]
                if micro > 0:
                    model.store.zero_grads()
                    total, skipped = 0.0, 0
                    for lo in range(0, len(items), micro):
                        part = stage2_fs_loss(
                            model, items[lo : lo + micro], train_mode=True,
                            dropout_seeds=seeds[lo : lo + micro],
                            grad_scale=1.0 / len(items), zero_grads=False,
                        )
                        total += part.loss
                        skipped += part.n_skipped
                    res = StageResult(loss=total, n_utts=len(items), n_skipped=skipped)
                else:
                    res = stage2_fs_loss(model, items, train_mode=True, dropout_seeds=seeds)
            n_skipped += res.n_skipped
            step_update(model.store, opt, lr)
            ep_loss += res.loss
            nb += 1
            step += 1
        dl = dev_loss()
        log.append(ep + 1, ep_loss / max(nb, 1), dl, lr_at(sched, min(step, total_steps)))
        if dl < best:
            best = dl
            model.save(ws.best_ckpt(stage))
    model.save(ws.last_ckpt(stage))
    if n_skipped:
        warnings.warn(f"{stage}: skipped {n_skipped} utterance passes (missing alignment or infeasible length)")
    return {"best_dev_loss": best, "epochs": epochs, "skipped": n_skipped}


def _run_stage3(cfg, ws, model, train, dev, weights, epochs):
    store = mbr_mod.read_nbest(ws.nbest_file)
    lam1 = cfg["mbr.lam1"] if cfg["mbr.lam1"] > 0 else store.lam1
    beta = cfg["mbr.beta"] if cfg["mbr.beta"] > 0 else None
    scales = mbr_mod.MbrScales(lam1=lam1, beta=beta, fs_aux_scale=weights.fs_aux_scale)
    batch_all = mbr_mod.load_for_training(store, train, n=cfg["nbest.n"])
    if not batch_all:
        raise ValueError(f"{ws.nbest_file}: store holds no usable lists")
    seed = cfg["seed"]

    frames = [b[0].shape[0] for b in batch_all]
    batches = make_epoch_batches(len(batch_all), frames, cfg["train.batch_frames"], derive_seed(seed, 31), epochs)
    total_steps = max(sum(len(b) for b in batches), 1)
    sched = ScheduleSpec(kind="constant", constant_lr=cfg["train.constant_lr"], total_steps=total_steps)
    opt = OptimizerState(l2=cfg["train.l2"])
    log = MetricsLog(ws.metrics_file("stage3"))
    os.makedirs(os.path.dirname(ws.risk_file), exist_ok=True)

    def log_risk(epoch):
        risk = mbr_mod.expected_risk(model, batch_all, scales)
        mode = "a" if epoch else "w"
        with open(ws.risk_file, mode, encoding="utf-8", newline="\n") as fh:
            fh.write(f"{epoch}\t{'%.17g' % risk}\n")
        return risk

    log_risk(0)
    best = float("inf") if epochs else _dev_loss_fs(model, dev)
    model.save(ws.best_ckpt("stage3"))
    step = 0
    skipped = 0
    for ep in range(epochs):
        ep_loss, nb = 0.0, 0
        for batch_idx in batches[ep]:
            lr = lr_at(sched, step)
            # masking augmentation stays off in this stage
            items = [batch_all[i] for i in batch_idx]
            seeds = [derive_seed(seed, 42, ep, i) for i in batch_idx]
            loss, _, n_skip = mbr_mod.stage3_total(model, items, scales, train_mode=True, dropout_seeds=seeds)
            skipped += n_skip
            step_update(model.store, opt, lr)
            ep_loss += loss
            nb += 1
            step += 1
        dl = _dev_loss_fs(model, dev)
        log.append(ep + 1, ep_loss / max(nb, 1), dl, lr_at(sched, min(step, total_steps)))
        log_risk(ep + 1)
        if dl < best:
            best = dl
            model.save(ws.best_ckpt("stage3"))
    model.save(ws.last_ckpt("stage3"))
    risks = read_risk_log(ws.risk_file)
    return {"best_dev_loss": best, "epochs": epochs, "skipped": skipped, "risks": risks, "lam1": lam1}


def read_risk_log(path) -> list[float]:
    with open(path, "r", encoding="utf-8") as fh:
        return [float(line.split("\t")[1]) for line in fh.read().splitlines() if line]


# -------------------------------------------------------------------- N-best


def run_build_nbest(cfg) -> dict:
    ws = Workspace(cfg["workdir"])
    _require(ws.best_ckpt("stage2"), "stage-2 checkpoint", "monotrans train --stage stage2")
    _require(ws.lm_gen, "generation LM", "monotrans gen-data")
    model = TransducerModel.load(ws.best_ckpt("stage2"))
    gen_lm = lm_mod.read_ngram(ws.lm_gen)
    train = dataio.load_dataset(ws.data_dir)["train"]
    store = mbr_mod.build_static_nbest(
        train,
        model,
        gen_lm,
        lam1=cfg["nbest.lam1"],
        n_best=cfg["nbest.n"],
        subset_fraction=cfg["nbest.subset_fraction"],
        seed=cfg["nbest.seed"],
        max_T=cfg["data.filter_max_frames"],
        max_S=cfg["data.filter_max_labels"],
        beam_size=cfg["nbest.beam_size"],
    )
    os.makedirs(os.path.dirname(ws.nbest_file), exist_ok=True)
    mbr_mod.write_nbest(ws.nbest_file, store)
    sizes = [len(v) for v in store.lists.values()]
    return {"utts": len(store.lists), "mean_entries": float(np.mean(sizes)) if sizes else 0.0}


# ------------------------------------------------------------------ evaluate


@dataclass
class EvalReport:
    wer: float
    sub: float
    dele: float
    ins: float
    n_ref: int
    n_utts: int
    lam1: float
    lam2: float
    per_utt: list = field(default_factory=list)

    def summary(self) -> str:
        return (
            f"WER {self.wer:.2f} Sub {self.sub:.2f} Del {self.dele:.2f} Ins {self.ins:.2f} "
            f"({self.n_ref} ref tokens, {self.n_utts} utts, lam1={self.lam1:g} lam2={self.lam2:g})"
        )


def evaluate_model(model, lm, utterances, dcfg: DecodeConfig) -> EvalReport:
    """Decode every utterance, score mapped word sequences, and aggregate."""
    n_ref = n_sub = n_del = n_ins = 0
    per_utt = []
    for u in utterances:
        hyp = beam_decode(model, lm, u.feats, dcfg)[0]
        ref_words, _ = words_and_pending(u.labels, dcfg.w_mapping)
        hyp_words, _ = words_and_pending(hyp.labels, dcfg.w_mapping)
        stats = mbr_mod.levenshtein(ref_words, hyp_words)
        n_ref += len(ref_words)
        n_sub += stats.sub
        n_del += stats.dele
        n_ins += stats.ins
        per_utt.append((u.id, stats, hyp.labels))
    denom = max(n_ref, 1)
    return EvalReport(
        wer=100.0 * (n_sub + n_del + n_ins) / denom,
        sub=100.0 * n_sub / denom,
        dele=100.0 * n_del / denom,
        ins=100.0 * n_ins / denom,
        n_ref=n_ref,
        n_utts=len(per_utt),
        lam1=dcfg.lam1,
        lam2=dcfg.lam2,
        per_utt=per_utt,
    )


def run_evaluate(cfg, ckpt_path, split: str, dcfg: DecodeConfig | None = None) -> EvalReport:
    ws = Workspace(cfg["workdir"])
    _require(ckpt_path, "checkpoint", "monotrans train")
    _require(ws.lm_recog, "recognition LM", "monotrans gen-data")
    model = TransducerModel.load(ckpt_path)
    lm = lm_mod.read_ngram(ws.lm_recog)
    utts = dataio.load_dataset(ws.data_dir)[split]
    return evaluate_model(model, lm, utts, dcfg or decode_config_from(cfg))


def run_decode(cfg, ckpt_path, split: str, out_path=None) -> list[str]:
    ws = Workspace(cfg["workdir"])
    _require(ckpt_path, "checkpoint", "monotrans train")
    model = TransducerModel.load(ckpt_path)
    lm = lm_mod.read_ngram(ws.lm_recog)
    dcfg = decode_config_from(cfg)
    lines = []
    for u in dataio.load_dataset(ws.data_dir)[split]:
        lines.extend(format_decode_lines(u.id, beam_decode(model, lm, u.feats, dcfg)))
    if out_path:
        with open(out_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(lines) + "\n")
    return lines


def tune_scale(model, lm, utterances, grid_lam1, grid_lam2=(0.0,), base: DecodeConfig | None = None):
    """Exhaustive grid evaluation; returns argmin-WER scales (ties prefer the
    smaller lam1, then the smaller lam2) plus the per-point reports."""
    base = base or DecodeConfig()
    if not grid_lam1:
        raise ValueError("empty lam1 grid")
    best = None
    reports = {}
    for lam1 in sorted(grid_lam1):
        for lam2 in sorted(grid_lam2):
            dcfg = DecodeConfig(lam1=lam1, lam2=lam2, beam_size=base.beam_size,
                                n_best=1, w_mapping=base.w_mapping)
            rep = evaluate_model(model, lm, utterances, dcfg)
            reports[(lam1, lam2)] = rep
            if best is None or rep.wer < best[2].wer:
                best = (lam1, lam2, rep)
    return best[0], best[1], best[2], reports


# ------------------------------------------------------------- verification


def gradient_checks(seed: int = 7, rel_tol: float = 1e-4, abs_floor: float = 1e-8) -> dict:
    """Central finite-difference sweeps over every parameter for the three
    training criteria on a small seeded model. Returns max relative errors."""
    cfg = ModelConfig(V=5, feat_dim=4, context_k=1, enc_layers=2, enc_dim=8, enc_window=3,
                      pred_dim=5, joint_dim=8, subsample=2, dropout=0.1, aux_middle_layer=0)
    model = TransducerModel.create(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1)
    utts = [rng.normal(size=(9, 4)), rng.normal(size=(7, 4))]
    targets = [(1, 3, 0), (2, 4)]
    weights = LossWeights(clip_norm=np.inf)
    seeds = [11, 12]

    from .topology import AlignmentPath

    def make_align(T_out, target):
        frames = [cfg.blank] * T_out
        pos = np.linspace(0, T_out - 1, num=len(target), dtype=int)
        for p, lab in zip(pos, target):
            frames[int(p)] = lab
        return AlignmentPath(frames=tuple(frames), blank=cfg.blank)

    aligns = []
    for feats, target in zip(utts, targets):
        T_out = -(-feats.shape[0] // cfg.subsample)
        aligns.append(make_align(T_out, target))

    lists = []
    for i, (feats, target) in enumerate(zip(utts, targets)):
        entries = [mbr_mod.NBestEntry(labels=tuple(target), lm_logprob=-1.0, is_ref=True)]
        alt = tuple(target[:-1]) + ((target[-1] + 1) % cfg.V,)
        entries.append(mbr_mod.NBestEntry(labels=alt, lm_logprob=-1.5))
        entries.append(mbr_mod.NBestEntry(labels=tuple(target[:-1]), lm_logprob=-0.8))
        for e in entries:
            e.risk = mbr_mod.levenshtein(target, e.labels).distance
        lists.append((feats, mbr_mod.NBestList(utt_id=f"g{i}", entries=entries, ref_index=0)))
    scales = mbr_mod.MbrScales(lam1=0.5, fs_aux_scale=0.05)

    losses = {
        "stage1": lambda: stage1_total(
            model, list(zip(utts, aligns)), weights, train_mode=True, dropout_seeds=seeds
        ).loss,
        "stage2": lambda: stage2_fs_loss(
            model, list(zip(utts, targets)), train_mode=True, dropout_seeds=seeds
        ).loss,
        "stage3": lambda: mbr_mod.stage3_total(
            model, lists, scales, train_mode=True, dropout_seeds=seeds
        )[0],
    }

    results = {}
    h = 1e-5
    for name, fn in losses.items():
        fn()  # fills grads
        ana = model.store.flat_grads()
        theta = model.store.flat_params()
        worst = 0.0
        for i in range(theta.size):
            t = theta.copy()
            t[i] += h
            model.store.set_flat_params(t)
            up = fn()
            t[i] -= 2 * h
            model.store.set_flat_params(t)
            down = fn()
            fd = (up - down) / (2 * h)
            err = abs(fd - ana[i]) / max(abs(fd), abs(ana[i]), abs_floor / rel_tol)
            worst = max(worst, err)
        model.store.set_flat_params(theta)
        results[name] = {"max_rel_err": worst, "n_params": int(theta.size), "pass": worst <= rel_tol}
    return results


def oracle_checks(seed: int = 13) -> dict:
    """Quick dual-route agreement suites for the three dynamic programs."""
    rng = np.random.default_rng(seed)
    out = {}

    worst = 0.0
    for trial in range(60):
        T = int(rng.integers(1, 7))
        S = int(rng.integers(0, min(T, 4) + 1))
        V = int(rng.integers(1, 6))
        raw = rng.normal(size=(T, S + 1, V + 1))
        lat = raw - np.log(np.exp(raw).sum(-1, keepdims=True))
        target = tuple(int(x) for x in rng.integers(0, V, size=S))
        worst = max(worst, abs(fullsum(lat, target).log_prob - fullsum_by_enumeration(lat, target)))
    out["fullsum"] = {"max_abs_err": worst, "pass": worst <= 1e-9}

    worst = 0.0
    for trial in range(40):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(1, 5))
        S = int(rng.integers(0, 4))
        raw = rng.normal(size=(T, V + 1))
        lg = raw - np.log(np.exp(raw).sum(-1, keepdims=True))
        target = tuple(int(x) for x in rng.integers(0, V, size=S))
        got, _ = ctc_mod.ctc_fullsum(lg, target)
        want = ctc_logprob_by_enumeration(lg, target)
        if want == -np.inf:
            if got != -np.inf:
                worst = np.inf
        else:
            worst = max(worst, abs(got - want))
    out["ctc"] = {"max_abs_err": worst, "pass": worst <= 1e-9}

    corpus = [[str(int(x)) for x in rng.integers(0, 3, size=4)] for _ in range(30)]
    lmx = lm_mod.train_ngram(corpus, order=2, discount=0.4)
    mcfg = ModelConfig(V=3, feat_dim=3, context_k=1, enc_layers=1, enc_dim=5, pred_dim=3,
                       joint_dim=5, subsample=1, dropout=0.0)
    mismatches = 0
    for trial in range(20):
        model = TransducerModel.create(mcfg, seed=int(rng.integers(0, 2**31)))
        model.store.params["joint_W2"] *= 4.0
        feats = rng.normal(size=(3, 3))
        for lam1 in (0.0, 0.5):
            for lam2 in (0.0, 0.2):
                dcfg = DecodeConfig(lam1=lam1, lam2=lam2, beam_size=1_000_000, n_best=1)
                bh = beam_decode(model, lmx, feats, dcfg)[0]
                eh = exhaustive_decode(model, lmx, feats, dcfg)
                if bh.labels != eh.labels or abs(bh.combined - eh.combined) > 1e-9:
                    mismatches += 1
    out["decoder"] = {"mismatches": mismatches, "pass": mismatches == 0}
    return out
