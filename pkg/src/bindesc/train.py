"""Schedule-coupled training loop with per-epoch checkpoints and resume."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from bindesc import binquant as bq
from bindesc import model as M
from bindesc import tensor as T
from bindesc.data.archive import BatchSampler, PatchArchive
from bindesc.loss import Batch, LossConfig, total_loss

log = logging.getLogger(__name__)

LOSS_COLUMNS = ["epoch", "batch", "step", "t", "k", "total", "triplet", "sos", "r_l2", "seconds"]


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    variant: str = "didymos"
    scaling_variant: str = "none"
    epochs: int = 200
    batch_pairs: int = 512
    lr: float = 0.01
    seed: int = 0
    t_min: float = 0.1
    t_max: float = 10.0
    loss: dict = field(default_factory=dict)   # LossConfig overrides
    keep_epoch_checkpoints: bool = False

    def loss_config(self, binary):
        return LossConfig(**{**self.loss, "binary": binary})


@dataclass
class TrainResult:
    network: M.Network
    epochs_run: int
    history: list        # per-epoch mean loss components
    checkpoint: Path | None


def _dump_failure(out_dir, epoch, b, idx, res, net):
    path = Path(out_dir) / f"nan_dump_e{epoch}_b{b}.npz"
    norms = {p.name: float(np.linalg.norm(p.value)) for p in net.params()}
    np.savez(path, pair_indices=idx, grad_d=res.grad_d, grad_dp=res.grad_dp,
             components=np.array([res.total, res.triplet, res.sos, res.r_l2]),
             param_norms=json.dumps(norms))
    return path


def train_step(net, A, B, cfg_loss, lr, step):
    """Forward both sets as one batch, apply the loss, one Adam update."""
    n = len(A)
    desc, pre = net.forward(np.concatenate([A, B]), train=True)
    res = total_loss(Batch(desc[:n], desc[n:], pre[:n], pre[n:]), cfg_loss)
    if not np.isfinite(res.total):
        return res, False
    net.zero_grad()
    grad_pre = None
    if res.grad_x is not None:
        grad_pre = np.concatenate([res.grad_x, res.grad_xp])
    net.backward(np.concatenate([res.grad_d, res.grad_dp]), grad_pre)
    T.adam_step(net.params(), lr=lr, step=step)
    return res, True


def train(cfg: TrainConfig, archive: PatchArchive, out_dir=None, resume=True, progress=None):
    """Train ``cfg.variant`` on the archive's train split.

    ``out_dir`` receives ``last.ckpt`` after every epoch, ``loss.csv`` with
    one row per step and ``config.json``.  With ``resume`` an existing
    ``last.ckpt`` is picked up and training continues where it stopped.
    """
    out = Path(out_dir) if out_dir is not None else None
    spec = M.build(cfg.variant, cfg.scaling_variant)
    loss_cfg = cfg.loss_config(spec.binary_descriptor)
    sampler = BatchSampler(archive, "train", cfg.batch_pairs, cfg.seed)

    net = M.Network(spec, seed=cfg.seed)
    start, step = 0, 0
    ckpt_path = out / "last.ckpt" if out else None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(asdict(cfg), indent=1, sort_keys=True))
    if resume and ckpt_path and ckpt_path.exists():
        ck = M.load(ckpt_path)
        if ck.spec.to_dict() != spec.to_dict():
            raise TrainingError("checkpoint architecture differs from the config")
        net = ck.to_network()
        start, step = ck.epoch, ck.optimizer["step"]
        log.info("resuming at epoch %d (step %d)", start, step)
    rows = _load_rows(out, start) if out else []

    history = []
    for epoch in range(start, cfg.epochs):
        t, k = bq.schedule(epoch, cfg.epochs, cfg.t_min, cfg.t_max)
        net.set_schedule(t, k)
        log.info("epoch %d: t=%.4g k=%.4g", epoch, t, k)
        sums = np.zeros(4)
        for b, idx in enumerate(sampler.epoch(epoch)):
            t0 = time.perf_counter()
            A, B = archive.pair_patches(idx)
            res, ok = train_step(net, A, B, loss_cfg, cfg.lr, step + 1)
            if not ok:
                where = _dump_failure(out or ".", epoch, b, idx, res, net)
                raise TrainingError(f"non-finite loss at epoch {epoch} batch {b}; dump: {where}")
            step += 1
            comps = [res.total, res.triplet, res.sos, res.r_l2]
            sums += comps
            rows.append([epoch, b, step, t, k, *comps, time.perf_counter() - t0])
            if progress:
                progress(epoch, b, comps)
        history.append({"epoch": epoch, **dict(zip(["total", "triplet", "sos", "r_l2"],
                                                   (sums / max(len(sampler), 1)).tolist()))})
        if out:
            _write_rows(out / "loss.csv", rows)
            M.save(M.Checkpoint.from_network(net, step, epoch + 1, {"config": asdict(cfg)}),
                   ckpt_path)
            if cfg.keep_epoch_checkpoints:
                M.save(M.Checkpoint.from_network(net, step, epoch + 1, {"config": asdict(cfg)}),
                       out / f"epoch{epoch + 1:04d}.ckpt")
    return TrainResult(net, cfg.epochs - start, history, ckpt_path)


def _load_rows(out, start):
    path = out / "loss.csv"
    if not path.exists() or start == 0:
        return []
    with open(path, newline="") as f:
        rd = csv.reader(f)
        next(rd, None)
        rows = [r for r in rd if int(r[0]) < start]
    return [[int(r[0]), int(r[1]), int(r[2]), *map(float, r[3:])] for r in rows]


def _write_rows(path, rows):
    with open(path, "w", newline="") as f:
        wr = csv.writer(f)
        wr.writerow(LOSS_COLUMNS)
        wr.writerows(rows)


def read_loss_csv(path):
    with open(path, newline="") as f:
        return [{k: float(v) for k, v in r.items()} for r in csv.DictReader(f)]


def cached_run(cfg: TrainConfig, archive_path, progress=None):
    """Train into the cache directory keyed by config and archive checksum.

    A finished run is returned as-is; an interrupted one resumes.  Returns
    (network, run directory).
    """
    from bindesc.cache import cached_path
    from bindesc.data.archive import archive_checksum, archive_read

    key = {"train": asdict(cfg), "archive": archive_checksum(archive_path)}
    out = cached_path("runs", key, "")
    ckpt = out / "last.ckpt"
    if ckpt.exists():
        ck = M.load(ckpt)
        if ck.epoch >= cfg.epochs:
            return ck.to_network(), out
    res = train(cfg, archive_read(archive_path), out, resume=True, progress=progress)
    return res.network, out
