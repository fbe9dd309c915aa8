"""Training checkpoints: everything needed to continue a run bit-identically.

A checkpoint directory holds the weights (BN statistics included), the
ADAM moments, the metrics log so far, the last completed (round, epoch)
and, for self-training, the labeled pool and the ordered remaining ids.
It is written to a sibling directory and swapped in, so a crash never
leaves a half-written checkpoint behind.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import CandidateRecord
from .errors import FormatError
from .metrics import MetricsLog
from .model import MultiTaskNet, NetworkConfig, load_weights, save_weights
from .optim import Adam, AdamState
from .semisup import LabeledPool, Progress, read_pool_checkpoint, write_pool_checkpoint

CHECKPOINT_VERSION = 1


def save_adam(opt: Adam, path) -> None:
    st = opt.state
    arrays = {f"m{i}": m for i, m in enumerate(st.m)} | {f"v{i}": v for i, v in enumerate(st.v)}
    hyper = np.array([st.lr, st.beta1, st.beta2, st.eps], dtype=np.float64)
    with open(path, "wb") as fh:
        np.savez(fh, hyper=hyper, step_count=np.array(st.step_count), **arrays)


def load_adam(path, params) -> Adam:
    with np.load(path) as z:
        n = len(params)
        if sum(k.startswith("m") for k in z.files) != n:
            raise FormatError(f"{path}: optimizer state holds a different number of tensors")
        lr, b1, b2, eps = z["hyper"].tolist()
        state = AdamState(lr=lr, beta1=b1, beta2=b2, eps=eps, step_count=int(z["step_count"]),
                          m=[z[f"m{i}"].copy() for i in range(n)], v=[z[f"v{i}"].copy() for i in range(n)])
    return Adam(params, state=state)


@dataclass
class Checkpoint:
    net: MultiTaskNet
    optimizer: Adam
    log: MetricsLog
    progress: Progress
    pool: LabeledPool | None
    remaining: list[CandidateRecord] | None


def save_checkpoint(directory, net: MultiTaskNet, optimizer: Adam, log: MetricsLog, progress: Progress,
                    pool: LabeledPool | None = None, remaining: Sequence[CandidateRecord] | None = None) -> Path:
    final = Path(directory)
    tmp = final.with_name(final.name + ".part")
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir(parents=True)
    save_weights(net, tmp / "weights.ndlw")
    save_adam(optimizer, tmp / "adam.npz")
    if len(log):
        log.to_csv(tmp / "log.csv")
    else:
        (tmp / "log.csv").write_text("")
    meta = {"version": CHECKPOINT_VERSION, "round": progress.round, "epoch": progress.epoch,
            "network_digest": net.cfg.digest().hex()}
    if pool is not None:
        write_pool_checkpoint(pool, tmp, progress.round)
        meta["pool"] = f"pool_round{progress.round}.csv"
        meta["remaining"] = [r.id for r in remaining or ()]
    (tmp / "progress.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    old = final.with_name(final.name + ".old")
    if final.exists():
        final.rename(old)
    tmp.rename(final)
    if old.exists():
        shutil.rmtree(old)
    return final


def has_checkpoint(directory) -> bool:
    return (Path(directory) / "progress.json").exists()


def load_checkpoint(directory, cfg: NetworkConfig, records_by_id: dict[str, CandidateRecord] | None = None) -> Checkpoint:
    d = Path(directory)
    try:
        meta = json.loads((d / "progress.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{d}: unreadable checkpoint ({exc})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"{d}: unsupported checkpoint version {meta.get('version')}")
    net = load_weights(d / "weights.ndlw", cfg)
    opt = load_adam(d / "adam.npz", net.parameters())
    log = MetricsLog.from_csv(d / "log.csv") if (d / "log.csv").stat().st_size else MetricsLog()
    pool = remaining = None
    if "pool" in meta:
        if records_by_id is None:
            raise FormatError(f"{d}: a self-training checkpoint needs the dataset records")
        pool = read_pool_checkpoint(d / meta["pool"], records_by_id)
        missing = [i for i in meta["remaining"] if i not in records_by_id]
        if missing:
            raise FormatError(f"{d}: remaining ids not in dataset, e.g. {missing[0]}")
        remaining = [records_by_id[i] for i in meta["remaining"]]
    return Checkpoint(net, opt, log, Progress(meta["round"], meta["epoch"]), pool, remaining)
