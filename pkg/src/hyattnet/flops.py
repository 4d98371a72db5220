"""Analytic and instrumented multiply-accumulate accounting for the
token-attention work saved by routing.

Per stage with T tokens, C channels, an SxS region grid and top-k routing:
dense token attention costs 2*T*T*C MACs (query-key scores plus the
value mix); routed attention costs 2*T*(k*T/S^2)*C, a reduction of exactly
k/S^2. Routing itself adds an S^2 x S^2 affinity product (S^4 * C MACs)
plus 2*T*C accumulations for the region means. FLOPs count each MAC as a
multiply and an add (2x).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .attention import MacCounter, count_attention_macs
from .network import HyattConfig, HyattNet
from .tensor import Tensor


@dataclass
class StageFlops:
    stage: int
    tokens: int
    channels: int
    region_grid: int
    topk: int
    dense_macs: int
    bra_macs: int
    routing_macs: int
    pooling_accs: int

    @property
    def ratio(self) -> float:
        return self.topk / (self.region_grid * self.region_grid)


@dataclass
class FlopReport:
    stages: list

    @property
    def total_dense_macs(self) -> int:
        return sum(s.dense_macs for s in self.stages)

    @property
    def total_bra_macs(self) -> int:
        return sum(s.bra_macs for s in self.stages)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("stage,tokens,channels,region_grid,topk,dense_macs,bra_macs,"
                  "dense_flops,bra_flops,ratio,routing_macs,pooling_accs\n")
        for s in self.stages:
            buf.write(
                f"{s.stage},{s.tokens},{s.channels},{s.region_grid},{s.topk},"
                f"{s.dense_macs},{s.bra_macs},{2 * s.dense_macs},{2 * s.bra_macs},"
                f"{s.ratio!r},{s.routing_macs},{s.pooling_accs}\n"
            )
        buf.write(
            f"total,,,,,{self.total_dense_macs},{self.total_bra_macs},"
            f"{2 * self.total_dense_macs},{2 * self.total_bra_macs},"
            f"{self.total_bra_macs / self.total_dense_macs!r},,\n"
        )
        return buf.getvalue()


def analytic_flops(cfg: HyattConfig) -> FlopReport:
    stages = []
    for i in range(5):
        h, w = cfg.stage_hw(i)
        tokens = h * w
        channels = cfg.stage_dims[i]
        grid = cfg.stage_region_grid[i]
        topk = cfg.stage_topk[i]
        gathered = topk * tokens // (grid * grid)
        stages.append(StageFlops(
            stage=i + 1,
            tokens=tokens,
            channels=channels,
            region_grid=grid,
            topk=topk,
            dense_macs=2 * tokens * tokens * channels,
            bra_macs=2 * tokens * gathered * channels,
            routing_macs=grid ** 4 * channels,
            pooling_accs=2 * tokens * channels,
        ))
    return FlopReport(stages=stages)


def instrumented_token_macs(cfg: HyattConfig, net: HyattNet | None = None) -> dict:
    """Token-attention MACs actually executed by a single-sample forward,
    collected per stage from the attention layers' counters."""
    if net is None:
        net = HyattNet(cfg)
    counter = MacCounter()
    image = Tensor(np.zeros((1, 1) + tuple(cfg.input_size), dtype=np.float32))
    with count_attention_macs(counter):
        net.forward(image)
    return {label: counter.token_macs(label) for label in counter.qk}


def verify_flop_claim(cfg: HyattConfig, net: HyattNet | None = None):
    """Compare analytic per-stage counts against the instrumented forward.

    Returns (report, instrumented, mismatches); an exact match means the
    analytic table describes the executed computation."""
    report = analytic_flops(cfg)
    counted = instrumented_token_macs(cfg, net)
    mismatches = []
    for row in report.stages:
        got = counted.get(f"stage{row.stage}", 0)
        if got != row.bra_macs:
            mismatches.append((row.stage, row.bra_macs, got))
    return report, counted, mismatches
