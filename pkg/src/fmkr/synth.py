"""Synthetic flow/syslog corpus with kill-chain labels.

Flow features are class-conditional isotropic Gaussians whose means sit on
orthonormal directions, so every pair of class means is ``separation`` noise
standard deviations apart. The class geometry comes from ``means_seed`` and
is shared by every draw; ``seed`` only controls sampling, so train and test
corpora drawn with different seeds follow the same distribution. ``shift``
moves all class means by a common vector to model a local domain.

Syslog lines are emitted near flows (inside the fusion window) with a
stage-specific message template.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Mapping

import numpy as np

from fmkr.ingest import (AlignConfig, FlowRecord, FusedSample, SyslogRecord, align_and_fuse,
                         featurize_syslog_line, format_syslog_line, write_flow_file,
                         write_syslog_file)
from fmkr.stages import StageLabel

# Class sizes echoing the imbalance of real APT captures (NT >> ... >> DE).
DEFAULT_COUNTS = {StageLabel.NT: 3000, StageLabel.RN: 300, StageLabel.EF: 150,
                  StageLabel.LM: 40, StageLabel.DE: 10}

_TEMPLATES = {
    StageLabel.NT: ("cron[{pid}]: session opened for user {user}",
                    "systemd[1]: Started {svc}.service"),
    StageLabel.RN: ("kernel: [UFW BLOCK] IN=eth0 SRC={ip} DST={ip2} PROTO=TCP DPT={port}",
                    "sshd[{pid}]: Invalid user {user} from {ip}"),
    StageLabel.EF: ("sshd[{pid}]: Accepted password for {user} from {ip} port {port} ssh2",
                    "sudo: {user} : TTY=pts/0 ; COMMAND=/bin/bash -i"),
    StageLabel.LM: ("smbd[{pid}]: connect to service ADMIN$ initially as user {user} from {ip}",
                    "sshd[{pid}]: Accepted publickey for root from {ip2}"),
    StageLabel.DE: ("audit: type=EXECVE exe=/usr/bin/scp bytes={size} dst={ip}",
                    "curl[{pid}]: POST https://{host}/upload size={size} STATUS=200"),
}
_USERS = ("alice", "bob", "svc_backup", "admin", "ops")
_SERVICES = ("nginx", "chronyd", "rsyslog", "docker")


@dataclasses.dataclass(frozen=True)
class SynthConfig:
    """Generator settings.

    ``counts`` maps stage to number of flows. ``separation`` is the distance
    between any two class means in noise standard deviations. ``spacing`` is
    the mean gap (seconds) between consecutive flows. ``syslog_prob`` is the
    chance an attack-stage flow gets a syslog line; ``benign_syslog_prob``
    the same for NT flows.
    """

    counts: Mapping = dataclasses.field(default_factory=lambda: dict(DEFAULT_COUNTS))
    flow_dim: int = 80
    separation: float = 5.0
    noise: float = 1.0
    spacing: float = 300.0
    start: float = 1_600_000_000.0
    syslog_prob: float = 0.6
    benign_syslog_prob: float = 0.05
    jitter: float = 1.0
    shift: float = 0.0
    shift_seed: int = 1
    means_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        counts = {StageLabel.parse(k): int(v) for k, v in dict(self.counts).items()}
        if any(v < 0 for v in counts.values()):
            raise ValueError("counts must be >= 0")
        if sum(1 for v in counts.values() if v > 0) < 2:
            raise ValueError("at least two classes need a positive count")
        object.__setattr__(self, "counts", counts)
        if self.flow_dim < len(StageLabel):
            raise ValueError(f"flow_dim must be >= {len(StageLabel)}")
        if not 0 <= self.syslog_prob <= 1 or not 0 <= self.benign_syslog_prob <= 1:
            raise ValueError("syslog probabilities must lie in [0, 1]")
        if self.spacing <= 0 or self.noise <= 0:
            raise ValueError("spacing and noise must be positive")


def class_means(cfg: SynthConfig) -> np.ndarray:
    """``(5, flow_dim)`` class means, including the domain shift."""
    rng = np.random.default_rng(cfg.means_seed)
    q, _ = np.linalg.qr(rng.standard_normal((cfg.flow_dim, len(StageLabel))))
    means = q.T * (cfg.separation * cfg.noise / np.sqrt(2.0))
    if cfg.shift:
        v = np.random.default_rng(cfg.shift_seed).standard_normal(cfg.flow_dim)
        means = means + cfg.shift * cfg.noise * v / np.linalg.norm(v)
    return means


def _render(template: str, rng: np.random.Generator) -> str:
    def ip():
        return "10.{}.{}.{}".format(*rng.integers(0, 255, size=3))
    return template.format(
        pid=int(rng.integers(100, 65000)), user=_USERS[int(rng.integers(len(_USERS)))],
        svc=_SERVICES[int(rng.integers(len(_SERVICES)))], ip=ip(), ip2=ip(),
        port=int(rng.integers(1, 65535)), size=int(rng.integers(10_000, 50_000_000)),
        host=f"cdn{int(rng.integers(1, 99))}.example.net",
    )


def generate(cfg: SynthConfig) -> tuple[list[FlowRecord], list[tuple[float, str, StageLabel]]]:
    """Return flow records (time ordered) and syslog lines ``(ts, text, label)``."""
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg)
    labels = np.concatenate([np.full(cfg.counts.get(s, 0), int(s)) for s in StageLabel])
    labels = rng.permutation(labels)
    n = len(labels)
    times = cfg.start + np.cumsum(rng.exponential(cfg.spacing, size=n))
    feats = means[labels] + cfg.noise * rng.standard_normal((n, cfg.flow_dim))
    flows = [FlowRecord(float(t), f, StageLabel(int(c))) for t, f, c in zip(times, feats, labels)]

    lines = []
    for t, c in zip(times, labels):
        stage = StageLabel(int(c))
        p = cfg.benign_syslog_prob if stage is StageLabel.NT else cfg.syslog_prob
        if rng.random() < p:
            options = _TEMPLATES[stage]
            text = _render(options[int(rng.integers(len(options)))], rng)
            ts = float(t + rng.uniform(-cfg.jitter, cfg.jitter))
            lines.append((ts, text, stage))
    return flows, lines


def syslog_records(lines) -> list[SyslogRecord]:
    return [SyslogRecord(t, featurize_syslog_line(text), lab, raw=format_syslog_line(t, text, lab))
            for t, text, lab in lines]


def fused_samples(cfg: SynthConfig, align: AlignConfig = AlignConfig()) -> list[FusedSample]:
    """Generate and fuse in memory (no files)."""
    flows, lines = generate(cfg)
    return align_and_fuse(flows, syslog_records(lines), align)


def write_corpus(cfg: SynthConfig, out_dir) -> tuple[Path, Path]:
    """Write ``flows.csv`` and ``syslog.log`` under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    flows, lines = generate(cfg)
    flow_path, sys_path = out / "flows.csv", out / "syslog.log"
    write_flow_file(flow_path, flows)
    write_syslog_file(sys_path, lines)
    return flow_path, sys_path
